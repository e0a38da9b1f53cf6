//! Per-channel batch normalisation over `[N, C, H, W]`.

use super::tape::Op;
use super::{Mode, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics owned by the model, updated in train mode.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut Tensor<T>,
    pub var: &'a mut Tensor<T>,
}

pub(crate) struct BnSaved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch statistics were used, so the mean/variance depend on the input.
    batch_stats: bool,
    dims: (usize, usize, usize),
}

pub(crate) struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: RunningStats<'_, T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, h, w) = x.dims4("batch_norm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.shape() != [c] || stats.var.shape() != [c] {
        return Err(Error::shape(
            "batch_norm2d",
            format!("affine/statistics must be [{c}] for input {:?}", x.shape()),
        ));
    }
    let plane = h * w;
    let count = n * plane;
    let eps = T::from_f64(BN_EPS);
    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::InvalidArgument(format!(
                    "batch_norm2d in train mode needs N·H·W >= 2, got {count}"
                )));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_count = T::one() / T::from_f64(count as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let start = (b * c + ch) * plane;
                    s += x.data()[start..start + plane].iter().copied().sum::<T>();
                }
                let m = s * inv_count;
                let mut v = T::zero();
                for b in 0..n {
                    let start = (b * c + ch) * plane;
                    for &xv in &x.data()[start..start + plane] {
                        v += (xv - m) * (xv - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v * inv_count;
            }
            let mom = T::from_f64(BN_MOMENTUM);
            let unbias = T::from_f64(count as f64 / (count - 1) as f64);
            for ch in 0..c {
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut stats.var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            let (m, is, g, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in start..start + plane {
                let xh = (x.data()[i] - m) * is;
                xhat[i] = xh;
                y[i] = g * xh + be;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BnSaved {
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
            dims: (n, c, plane),
        },
    ))
}

pub(crate) fn backward<T: Real>(dy: &Tensor<T>, gamma: &Tensor<T>, saved: &BnSaved<T>) -> BnGrads<T> {
    let (n, c, plane) = saved.dims;
    let count = T::from_f64((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            for i in start..start + plane {
                dbeta[ch] += dy.data()[i];
                dgamma[ch] += dy.data()[i] * saved.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            if saved.batch_stats {
                let k = scale / count;
                let span = start..start + plane;
                for ((d, &g), &xh) in dx[span.clone()].iter_mut().zip(&dy.data()[span.clone()]).zip(&saved.xhat[span]) {
                    *d = k * (count * g - dbeta[ch] - xh * dgamma[ch]);
                }
            } else {
                for (d, &g) in dx[start..start + plane].iter_mut().zip(&dy.data()[start..start + plane]) {
                    *d = scale * g;
                }
            }
        }
    }
    BnGrads {
        input: Tensor::new(dy.shape().to_vec(), dx).expect("shape"),
        gamma: Tensor::new([c], dgamma).expect("shape"),
        beta: Tensor::new([c], dbeta).expect("shape"),
    }
}

/// Batch normalisation with affine `gamma`/`beta`.
///
/// Train mode normalises with batch statistics and folds them into `stats`
/// with momentum 0.1 (unbiased variance); eval mode normalises with `stats`.
pub fn batch_norm2d<'t, T: Real>(
    input: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    stats: RunningStats<'_, T>,
    mode: Mode,
) -> Result<Var<'t, T>> {
    input.same_tape(&gamma);
    input.same_tape(&beta);
    let (y, saved) = forward(
        &input.borrow_value(),
        &gamma.borrow_value(),
        &beta.borrow_value(),
        stats,
        mode,
    )?;
    Ok(input.tape().push(
        y,
        Op::BatchNorm {
            input: input.id(),
            gamma: gamma.id(),
            beta: beta.id(),
            saved,
        },
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn run(x: &Tensor<f64>, beta: f64, mode: Mode) -> Tensor<f64> {
        let c = x.shape()[1];
        let mut mean = Tensor::zeros([c]);
        let mut var = Tensor::ones([c]);
        let stats = RunningStats {
            mean: &mut mean,
            var: &mut var,
        };
        forward(x, &Tensor::ones([c]), &Tensor::full([c], beta), stats, mode)
            .unwrap()
            .0
    }

    fn channel_moments(y: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let (n, c, h, w) = y.dims4("t").unwrap();
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| {
                let s = (b * c + ch) * h * w;
                y.data()[s..s + h * w].to_vec()
            })
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn constant_input_normalises_to_zero() {
        let x = Tensor::full([2, 3, 2, 2], 4.2);
        let y = run(&x, 0.0, Mode::Train);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_shifts_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([4, 2, 4, 4], 1.0, &mut rng);
        let y = run(&x, 5.0, Mode::Train);
        for ch in 0..2 {
            assert!((channel_moments(&y, ch).0 - 5.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_statistics_are_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn([3, 4, 5, 5], 3.0, &mut rng).map(|v| v + 2.0);
        let y = run(&x, 0.0, Mode::Train);
        for ch in 0..4 {
            let (m, v) = channel_moments(&y, ch);
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_f64([1, 1, 1, 2], &[1.0, 3.0]).unwrap();
        let mut mean = Tensor::zeros([1]);
        let mut var = Tensor::ones([1]);
        forward(
            &x,
            &Tensor::ones([1]),
            &Tensor::zeros([1]),
            RunningStats {
                mean: &mut mean,
                var: &mut var,
            },
            Mode::Train,
        )
        .unwrap();
        // batch mean 2, unbiased variance 2
        assert!((mean.item() - 0.2).abs() < 1e-12);
        assert!((var.item() - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn train_mode_needs_two_values_per_channel() {
        let x = Tensor::<f64>::zeros([1, 2, 1, 1]);
        let mut mean = Tensor::zeros([2]);
        let mut var = Tensor::ones([2]);
        let r = forward(
            &x,
            &Tensor::ones([2]),
            &Tensor::zeros([2]),
            RunningStats {
                mean: &mut mean,
                var: &mut var,
            },
            Mode::Train,
        );
        assert!(r.is_err());
        // eval mode is fine with a single value
        assert!(run(&x, 0.0, Mode::Eval).all_finite());
    }
}
