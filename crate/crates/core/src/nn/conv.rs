//! 2-D convolution via im2col and a packed GEMM.

use super::tape::Op;
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of a convolution along one axis.
pub fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel > size + 2 * pad {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

fn geometry(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Geometry> {
    let [_, cin, h, w] = *input else {
        return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {input:?}")));
    };
    let [_, kcin, kh, kw] = *kernel else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [Cout,Cin,kh,kw], got {kernel:?}"),
        ));
    };
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but kernel expects {kcin}"),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    let (Some(ho), Some(wo)) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad))
    else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
        ));
    };
    Ok(Geometry {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    })
}

fn im2col<T: Real>(x: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), kernel.shape(), stride, pad)?;
    let n = x.shape()[0];
    let cout = kernel.shape()[0];
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{cout}], got {:?}", bias.shape()),
        ));
    }
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); n * cout * cols];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    let in_stride = g.cin * g.h * g.w;
    for b in 0..n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let yb = &mut out[b * cout * cols..(b + 1) * cout * cols];
        for (co, chunk) in yb.chunks_mut(cols).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        let colm: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        T::gemm(cout, rows, cols, T::one(), kernel.data(), false, colm, false, T::one(), yb);
    }
    Tensor::new([n, cout, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
}

pub(crate) fn backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_kernel: bool,
) -> ConvGrads<T> {
    let g = geometry(x.shape(), kernel.shape(), stride, pad).expect("validated in forward");
    let n = x.shape()[0];
    let cout = kernel.shape()[0];
    let (rows, cols) = (g.rows(), g.cols());
    let in_stride = g.cin * g.h * g.w;

    let mut dw = want_kernel.then(|| vec![T::zero(); cout * rows]);
    let mut dx = want_input.then(|| vec![T::zero(); x.len()]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
    let mut dcol = vec![T::zero(); if want_input && !g.is_pointwise() { rows * cols } else { 0 }];

    for b in 0..n {
        let dyb = &dy.data()[b * cout * cols..(b + 1) * cout * cols];
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        if let Some(dw) = dw.as_mut() {
            let colm: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut col);
                &col
            };
            // dW += dY · colᵀ
            T::gemm(cout, cols, rows, T::one(), dyb, false, colm, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if g.is_pointwise() {
                T::gemm(rows, cout, cols, T::one(), kernel.data(), true, dyb, false, T::one(), dxb);
            } else {
                // dcol = Wᵀ · dY, then scatter back.
                T::gemm(
                    rows,
                    cout,
                    cols,
                    T::one(),
                    kernel.data(),
                    true,
                    dyb,
                    false,
                    T::zero(),
                    &mut dcol,
                );
                col2im(&dcol, &g, dxb);
            }
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
        kernel: dw.map(|d| Tensor::new(kernel.shape().to_vec(), d).expect("shape")),
    }
}

pub(crate) fn bias_grad<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = *dy.shape() else {
        unreachable!("conv output is rank 4")
    };
    let plane = h * w;
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            let start = (b * c + co) * plane;
            *acc += dy.data()[start..start + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::new([c], db).expect("shape")
}

/// Cross-correlation of `input [N,Cin,H,W]` with `kernel [Cout,Cin,kh,kw]`.
///
/// Output extent is `floor((H + 2·pad − kh) / stride) + 1` per axis.
pub fn conv2d<'t, T: Real>(
    input: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Var<'t, T>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, T>> {
    input.same_tape(&kernel);
    input.same_tape(&bias);
    let y = forward(
        &input.borrow_value(),
        &kernel.borrow_value(),
        &bias.borrow_value(),
        stride,
        pad,
    )?;
    Ok(input.tape().push(
        y,
        Op::Conv2d {
            input: input.id(),
            kernel: kernel.id(),
            bias: bias.id(),
            stride,
            pad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Tape;

    /// Six nested loops, straight from the definition.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Vec<f64> {
        let (n, cin, h, w) = x.dims4("t").unwrap();
        let (cout, _, kh, kw) = k.dims4("t").unwrap();
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (w + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_and_sum_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 1, 1, 1], &[5.0]).unwrap());
        let k = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros([1]));
        assert_eq!(conv2d(x, k, b, 1, 0).unwrap().value().data(), &[5.0]);

        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn([1, 2, 5, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([3], 1.0, &mut rng);
        let y = forward(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        let want = naive_conv(&x, &k, &b, 2, 1);
        for (a, w) in y.data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-5);
        }
    }

    #[test]
    fn pointwise_path_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn([2, 4, 3, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([3, 4, 1, 1], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([3], 1.0, &mut rng);
        let y = forward(&x, &k, &b, 1, 0).unwrap();
        let want = naive_conv(&x, &k, &b, 1, 0);
        for (a, w) in y.data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros([1]);
        let wrong_cin = Tensor::<f32>::zeros([1, 3, 3, 3]);
        let err = forward(&x, &wrong_cin, &b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
        let too_big = Tensor::<f32>::zeros([1, 2, 7, 7]);
        assert!(forward(&x, &too_big, &b, 1, 1).is_err());
        let k = Tensor::<f32>::zeros([1, 2, 3, 3]);
        assert!(forward(&x, &k, &b, 0, 1).is_err());
    }
}
