//! Pooling, nearest-neighbour up-sampling and channel concatenation.

use super::tape::Op;
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

pub(crate) fn forward<T: Real>(x: &Tensor<T>, k: usize, mode: PoolMode) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4("pool2d")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(
            "pool2d",
            format!("extent {h}x{w} not divisible by window {k}"),
        ));
    }
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut argmax = if mode == PoolMode::Max {
        vec![0u32; out.len()]
    } else {
        Vec::new()
    };
    let inv = T::one() / T::from_f64((k * k) as f64);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = plane * ho * wo + oy * wo + ox;
                match mode {
                    PoolMode::Max => {
                        let mut best = T::neg_infinity();
                        let mut best_at = 0;
                        for dy in 0..k {
                            for dx in 0..k {
                                let i = (oy * k + dy) * w + ox * k + dx;
                                if src[i] > best {
                                    best = src[i];
                                    best_at = i;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = (plane * h * w + best_at) as u32;
                    }
                    PoolMode::Avg => {
                        let mut acc = T::zero();
                        for dy in 0..k {
                            let row = (oy * k + dy) * w + ox * k;
                            acc += src[row..row + k].iter().copied().sum::<T>();
                        }
                        out[o] = acc * inv;
                    }
                }
            }
        }
    }
    Ok((Tensor::new([n, c, ho, wo], out)?, argmax))
}

pub(crate) fn backward<T: Real>(
    dy: &Tensor<T>,
    in_shape: &[usize],
    k: usize,
    mode: PoolMode,
    argmax: &[u32],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape.to_vec());
    match mode {
        PoolMode::Max => {
            let d = dx.data_mut();
            for (&g, &at) in dy.data().iter().zip(argmax) {
                d[at as usize] += g;
            }
        }
        PoolMode::Avg => {
            let (h, w) = (in_shape[2], in_shape[3]);
            let (ho, wo) = (h / k, w / k);
            let inv = T::one() / T::from_f64((k * k) as f64);
            let d = dx.data_mut();
            for (o, &g) in dy.data().iter().enumerate() {
                let plane = o / (ho * wo);
                let (oy, ox) = ((o % (ho * wo)) / wo, o % wo);
                for yy in 0..k {
                    let row = plane * h * w + (oy * k + yy) * w + ox * k;
                    for v in &mut d[row..row + k] {
                        *v += g * inv;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn upsample_forward<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample2d")?;
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
            for (ox, v) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                *v = srow[ox / factor];
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub(crate) fn upsample_backward<T: Real>(dy: &Tensor<T>, in_shape: &[usize], factor: usize) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let planes = in_shape[0] * in_shape[1];
    let d = dx.data_mut();
    for plane in 0..planes {
        let src = &dy.data()[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let base = plane * h * w + (oy / factor) * w;
            for ox in 0..wo {
                d[base + ox / factor] += src[oy * wo + ox];
            }
        }
    }
    dx
}

pub(crate) fn concat_forward<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let (n, _, h, w) = first.dims4("concat")?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new([n, total_c, h, w], out)
}

pub(crate) fn split_channels<T: Real>(g: &Tensor<T>, shapes: &[&[usize]]) -> Vec<Tensor<T>> {
    let (n, total_c, h, w) = g.dims4("concat").expect("rank 4");
    let plane = h * w;
    let mut outs: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for b in 0..n {
        let mut offset = 0;
        for (s, out) in shapes.iter().zip(outs.iter_mut()) {
            let c = s[1];
            let start = (b * total_c + offset) * plane;
            out.extend_from_slice(&g.data()[start..start + c * plane]);
            offset += c;
        }
    }
    outs.into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::new(s.to_vec(), d).expect("shape"))
        .collect()
}

/// Non-overlapping `k×k` pooling. Max mode routes the gradient to the first
/// maximal element of each window; average mode spreads it uniformly.
pub fn pool2d<T: Real>(input: Var<'_, T>, k: usize, mode: PoolMode) -> Result<Var<'_, T>> {
    let (y, argmax) = forward(&input.borrow_value(), k, mode)?;
    Ok(input.tape().push(
        y,
        Op::Pool {
            input: input.id(),
            k,
            mode,
            argmax,
        },
    ))
}

/// Nearest-neighbour up-sampling by an integer factor.
pub fn upsample2d<T: Real>(input: Var<'_, T>, factor: usize) -> Result<Var<'_, T>> {
    let y = upsample_forward(&input.borrow_value(), factor)?;
    Ok(input.tape().push(
        y,
        Op::Upsample {
            input: input.id(),
            factor,
        },
    ))
}

/// Concatenation along the channel axis.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    for p in parts {
        first.same_tape(p);
    }
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().map(|v| &**v).collect();
    let y = concat_forward(&refs)?;
    Ok(first.tape().push(
        y,
        Op::Concat {
            inputs: parts.iter().map(|p| p.id()).collect(),
        },
    ))
}
