//! Central finite-difference checks against `backward`, run in `f64`.

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamKind, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Floor on the relative-error denominator, so entries whose true gradient
/// is numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = format!("{} analytic={analytic:e} numeric={numeric:e}", label());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

fn indices(len: usize, per_tensor: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= per_tensor {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, per_tensor).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares the grad buffers of `params` with central differences of `loss`.
///
/// `loss` receives a perturbed copy of the parameters. At most `per_tensor`
/// entries of each trainable tensor are probed.
pub fn check_params(
    params: &ParamSet<f64>,
    mut loss: impl FnMut(&mut ParamSet<f64>) -> Result<f64>,
    h: f64,
    per_tensor: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (name, p) in params.iter() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::MissingGrad(name.to_string()))?;
        for i in indices(p.value.len(), per_tensor, rng) {
            let orig = p.value.data()[i];
            let mut eval_at = |x: f64| -> Result<f64> {
                work.get_mut(name).expect("same names").value.data_mut()[i] = x;
                let out = loss(&mut work);
                work.get_mut(name).expect("same names").value.data_mut()[i] = orig;
                out
            };
            let plus = eval_at(orig + h)?;
            let minus = eval_at(orig - h)?;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(|| format!("{name}[{i}]"), grad.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Same check for the gradient of a function of one input tensor.
pub fn check_input(
    input: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut loss: impl FnMut(&Tensor<f64>) -> Result<f64>,
    h: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    if input.shape() != analytic.shape() {
        return Err(Error::shape("check_input", "gradient shape differs from input"));
    }
    let mut report = GradCheckReport::default();
    for i in indices(input.len(), samples, rng) {
        let mut probe = input.clone();
        probe.data_mut()[i] += h;
        let plus = loss(&probe)?;
        probe.data_mut()[i] -= 2.0 * h;
        let minus = loss(&probe)?;
        report.record(|| format!("input[{i}]"), analytic.data()[i], (plus - minus) / (2.0 * h));
    }
    Ok(report)
}
