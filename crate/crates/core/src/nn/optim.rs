//! SGD (with momentum) and Adam.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptKind {
    pub fn sgd(momentum: f64) -> Self {
        OptKind::Sgd { momentum }
    }

    pub fn adam() -> Self {
        OptKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state. SGD keeps a velocity per parameter when momentum is
/// non-zero; Adam keeps first and second moments.
#[derive(Clone, Debug)]
pub struct OptState<T> {
    pub kind: OptKind,
    pub t: u64,
    pub buffers: IndexMap<String, Vec<Tensor<T>>>,
}

impl<T: Real> OptState<T> {
    pub fn new(kind: OptKind) -> Self {
        OptState {
            kind,
            t: 0,
            buffers: IndexMap::new(),
        }
    }

    fn slots(&self) -> usize {
        match self.kind {
            OptKind::Sgd { momentum: 0.0 } => 0,
            OptKind::Sgd { .. } => 1,
            OptKind::Adam { .. } => 2,
        }
    }

    /// One update of every trainable entry from its grad buffer. Grads are
    /// left in place; callers clear them.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        for (name, p) in params.iter() {
            if p.kind == ParamKind::Trainable && p.grad.is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        self.t += 1;
        let slots = self.slots();
        let t = self.t as i32;
        let lr_t = T::from_f64(lr);
        for (name, p) in params.iter_mut() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let bufs = self
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| (0..slots).map(|_| Tensor::zeros(p.value.shape().to_vec())).collect());
            if bufs.iter().any(|b| b.shape() != p.value.shape()) {
                return Err(Error::ParamMismatch(format!("optimizer buffer shape for `{name}`")));
            }
            let w = p.value.data_mut();
            let g = grad.data();
            match self.kind {
                OptKind::Sgd { momentum: 0.0 } => {
                    for (wi, &gi) in w.iter_mut().zip(g) {
                        *wi -= lr_t * gi;
                    }
                }
                OptKind::Sgd { momentum } => {
                    let mu = T::from_f64(momentum);
                    let v = bufs[0].data_mut();
                    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = mu * *vi + gi;
                        *wi -= lr_t * *vi;
                    }
                }
                OptKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                    let c1 = T::from_f64(1.0 - beta1.powi(t));
                    let c2 = T::from_f64(1.0 - beta2.powi(t));
                    let eps = T::from_f64(eps);
                    let (m_buf, v_buf) = bufs.split_at_mut(1);
                    let (m, v) = (m_buf[0].data_mut(), v_buf[0].data_mut());
                    for i in 0..w.len() {
                        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        w[i] -= lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        params.bump_step();
        Ok(())
    }
}

/// `base_lr · (1 − iter / max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: u64, max_iter: u64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::InvalidArgument(format!("iteration {iter} beyond max {max_iter}")));
    }
    if max_iter == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64, g: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::full([1], w), ParamKind::Trainable).unwrap();
        ps.get_mut("w").unwrap().grad = Some(Tensor::full([1], g));
        ps
    }

    #[test]
    fn sgd_step() {
        let mut ps = one_param(1.0, 2.0);
        OptState::new(OptKind::sgd(0.0)).step(&mut ps, 0.1).unwrap();
        assert!((ps.value("w").unwrap().item() - 0.8).abs() < 1e-12);
        assert_eq!(ps.step(), 1);
        // grads are untouched
        assert_eq!(ps.get("w").unwrap().grad.as_ref().unwrap().item(), 2.0);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut ps = one_param(0.0, 1.0);
        let mut opt = OptState::new(OptKind::sgd(0.9));
        opt.step(&mut ps, 1.0).unwrap();
        opt.step(&mut ps, 1.0).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((ps.value("w").unwrap().item() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_regardless_of_scale() {
        for g in [1e-3, 1.0, 1e3] {
            let mut ps = one_param(0.0, g);
            OptState::new(OptKind::adam()).step(&mut ps, 0.01).unwrap();
            // closed form: lr · g / (|g| + eps)
            let want = -0.01 * g / (g.abs() + 1e-8);
            assert!((ps.value("w").unwrap().item() - want).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        for kind in [OptKind::sgd(0.9), OptKind::adam()] {
            let mut ps = one_param(0.7, 3.0);
            OptState::new(kind).step(&mut ps, 0.0).unwrap();
            assert_eq!(ps.value("w").unwrap().item(), 0.7);
        }
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = one_param(0.0, 1.0);
        ps.zero_grad();
        let err = OptState::new(OptKind::adam()).step(&mut ps, 0.1).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(_)));
    }

    #[test]
    fn moment_buffers_only_for_adam() {
        let mut ps = one_param(0.0, 1.0);
        let mut adam = OptState::new(OptKind::adam());
        adam.step(&mut ps, 0.1).unwrap();
        assert_eq!(adam.buffers["w"].len(), 2);
        let mut sgd = OptState::new(OptKind::sgd(0.0));
        sgd.step(&mut ps, 0.1).unwrap();
        assert!(sgd.buffers["w"].is_empty());
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(1e-4, 0, 100, 0.9).unwrap(), 1e-4);
        assert_eq!(poly_lr(1e-4, 100, 100, 0.9).unwrap(), 0.0);
        let half = poly_lr(1e-4, 50, 100, 0.9).unwrap();
        assert!((half - 5.359e-5).abs() < 1e-8);
        assert!(poly_lr(1e-4, 101, 100, 0.9).is_err());
    }
}
