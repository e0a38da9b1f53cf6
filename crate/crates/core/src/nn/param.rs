//! Named parameter collections.

use indexmap::IndexMap;

use super::norm::RunningStats;
use super::{Gradients, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Receives gradients and optimizer updates.
    Trainable,
    /// State such as batch-norm running statistics; copied and averaged, never optimized.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub kind: ParamKind,
}

/// Insertion-ordered map from name to parameter, plus an update counter.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Param<T>>,
    step: u64,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name,
            Param {
                value,
                grad: None,
                kind,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::ParamMismatch(format!("no parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Number of scalar weights in trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Records every trainable entry on `tape`. With `track == false` the
    /// entries become constants, so no gradient can reach this set.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, track: bool) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(name, p)| {
                let v = if track {
                    tape.variable(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars, track }
    }

    /// Adds the gradients of bound entries into their grad buffers. Entries
    /// the loss did not reach get a zero buffer.
    pub fn accumulate(&mut self, bound: &Bound<'_, T>, grads: &mut Gradients<T>) -> Result<()> {
        if !bound.track {
            return Ok(());
        }
        for (name, var) in &bound.vars {
            let param = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::ParamMismatch(format!("bound `{name}` not in set")))?;
            let g = grads
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(param.value.shape().to_vec()));
            match &mut param.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    pub fn has_grads(&self) -> bool {
        self.entries.values().any(|p| p.grad.is_some())
    }

    /// Mutable running mean and variance stored under `{prefix}.running_mean`
    /// and `{prefix}.running_var`.
    pub fn running_stats(&mut self, prefix: &str) -> Result<RunningStats<'_, T>> {
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        match self.entries.get_disjoint_mut([mean_name.as_str(), var_name.as_str()]) {
            [Some(mean), Some(var)] => Ok(RunningStats {
                mean: &mut mean.value,
                var: &mut var.value,
            }),
            _ => Err(Error::ParamMismatch(format!("no running statistics under `{prefix}`"))),
        }
    }

    /// Bitwise equality of every value (grads ignored).
    pub fn values_equal(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, a), (nb, b))| na == nb && a.value == b.value)
    }

    fn check_compatible(&self, other: &ParamSet<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ParamMismatch(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, a), (nb, b)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb || a.value.shape() != b.value.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{na}` {:?} vs `{nb}` {:?}",
                    a.value.shape(),
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Trainable entries of a [`ParamSet`] recorded on one tape.
pub struct Bound<'t, T> {
    vars: IndexMap<String, Var<'t, T>>,
    track: bool,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::ParamMismatch(format!("no bound parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Exponential moving average: `teacher ← α·teacher + (1 − α)·student` for
/// every entry, buffers included.
pub fn ema_update<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, alpha: f64) -> Result<()> {
    ema_update_where(teacher, student, alpha, |_| true)
}

/// Like [`ema_update`] but leaves buffers alone, so a teacher can keep
/// normalisation statistics gathered from its own forward passes.
pub fn ema_update_trainable<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, alpha: f64) -> Result<()> {
    ema_update_where(teacher, student, alpha, |kind| kind == ParamKind::Trainable)
}

fn ema_update_where<T: Real>(
    teacher: &mut ParamSet<T>,
    student: &ParamSet<T>,
    alpha: f64,
    select: impl Fn(ParamKind) -> bool,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("ema alpha {alpha} outside [0,1]")));
    }
    teacher.check_compatible(student)?;
    let a = T::from_f64(alpha);
    let b = T::from_f64(1.0 - alpha);
    for (t, s) in teacher.entries.values_mut().zip(student.entries.values()) {
        if !select(t.kind) {
            continue;
        }
        if alpha == 0.0 {
            t.value.data_mut().copy_from_slice(s.value.data());
            continue;
        }
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    teacher.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::reduce;

    fn single(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::full([2], value), ParamKind::Trainable).unwrap();
        ps.insert("bn.running_mean", Tensor::full([1], value), ParamKind::Buffer).unwrap();
        ps
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = single(0.0);
        assert!(ps.insert("w", Tensor::zeros([1]), ParamKind::Trainable).is_err());
    }

    #[test]
    fn ema_extremes() {
        let student = single(1.0);
        let mut teacher = single(0.3);
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert!(teacher.value("w").unwrap().data().iter().all(|&v| v == 0.3));
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert!(teacher.values_equal(&student));
    }

    #[test]
    fn ema_geometric_series() {
        let student = single(1.0);
        let mut teacher = single(0.0);
        for _ in 0..3 {
            ema_update(&mut teacher, &student, 0.9).unwrap();
        }
        let want = 1.0 - 0.9f64.powi(3);
        assert!((want - 0.271).abs() < 1e-12);
        for (_, p) in teacher.iter() {
            assert!(p.value.data().iter().all(|v| (v - want).abs() < 1e-12));
        }
    }

    #[test]
    fn trainable_ema_skips_buffers() {
        let student = single(1.0);
        let mut teacher = single(0.0);
        ema_update_trainable(&mut teacher, &student, 0.5).unwrap();
        assert!(teacher.value("w").unwrap().data().iter().all(|&v| v == 0.5));
        assert!(teacher.value("bn.running_mean").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(teacher.step, 1);
    }

    #[test]
    fn ema_rejects_mismatch() {
        let student = single(1.0);
        let mut teacher = ParamSet::new();
        teacher.insert("w", Tensor::zeros([3]), ParamKind::Trainable).unwrap();
        assert!(ema_update(&mut teacher, &student, 0.5).is_err());
        let mut teacher = single(0.0);
        assert!(ema_update(&mut teacher, &student, 1.5).is_err());
    }

    #[test]
    fn untracked_binding_leaves_no_grads() {
        let mut ps = single(2.0);
        let tape = Tape::new();
        let bound = ps.bind(&tape, false);
        let loss = reduce::sum(bound.get("w").unwrap());
        let mut grads = tape.backward(loss).unwrap();
        ps.accumulate(&bound, &mut grads).unwrap();
        assert!(!ps.has_grads());
    }

    #[test]
    fn sum_gives_unit_grads_and_accumulates() {
        let mut ps = single(2.0);
        for round in 1..=2 {
            let tape = Tape::new();
            let bound = ps.bind(&tape, true);
            let loss = reduce::sum(bound.get("w").unwrap());
            let mut grads = tape.backward(loss).unwrap();
            ps.accumulate(&bound, &mut grads).unwrap();
            let g = ps.get("w").unwrap().grad.as_ref().unwrap();
            assert!(g.data().iter().all(|&v| v == round as f64));
        }
    }
}
