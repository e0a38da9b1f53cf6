//! Sums, scalings and averages.

use std::rc::Rc;

use super::tape::Op;
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Elementwise mean of equal-shape variables.
pub fn mean_of<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of zero tensors".into()))?;
    let mut acc = (*first.value()).clone();
    for p in &parts[1..] {
        first.same_tape(p);
        let v = p.value();
        if v.shape() != acc.shape() {
            return Err(Error::shape("mean_of", format!("{:?} vs {:?}", v.shape(), acc.shape())));
        }
        acc.add_assign(&v);
    }
    let inv = T::one() / T::from_f64(parts.len() as f64);
    let y = acc.map(|x| x * inv);
    Ok(first.tape().push(
        y,
        Op::Mean {
            inputs: parts.iter().map(|p| p.id()).collect(),
        },
    ))
}

pub fn scale<T: Real>(input: Var<'_, T>, factor: f64) -> Var<'_, T> {
    let f = T::from_f64(factor);
    let y = input.borrow_value().map(|x| x * f);
    input.tape().push(
        y,
        Op::Scale {
            input: input.id(),
            factor: f,
        },
    )
}

pub fn sum<T: Real>(input: Var<'_, T>) -> Var<'_, T> {
    let s = input.borrow_value().sum();
    input.tape().push(Tensor::scalar(s), Op::Sum { input: input.id() })
}

/// `Σ wᵢ·xᵢ` against a constant weight tensor.
pub fn dot<'t, T: Real>(input: Var<'t, T>, weights: Tensor<T>) -> Result<Var<'t, T>> {
    let x = input.value();
    if x.shape() != weights.shape() {
        return Err(Error::shape("dot", format!("{:?} vs {:?}", x.shape(), weights.shape())));
    }
    let s = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
    Ok(input.tape().push(
        Tensor::scalar(s),
        Op::Dot {
            input: input.id(),
            weights: Rc::new(weights),
        },
    ))
}

/// `Σ cᵢ·lᵢ` over scalar variables.
pub fn combine<'t, T: Real>(terms: &[(Var<'t, T>, f64)]) -> Result<Var<'t, T>> {
    let (first, _) = terms
        .first()
        .ok_or_else(|| Error::InvalidArgument("combine of zero terms".into()))?;
    let mut total = T::zero();
    let mut ids = Vec::with_capacity(terms.len());
    for (v, c) in terms {
        first.same_tape(v);
        let val = v.value();
        if val.len() != 1 {
            return Err(Error::shape("combine", format!("term of shape {:?} is not scalar", val.shape())));
        }
        let c = T::from_f64(*c);
        total += c * val.item();
        ids.push((v.id(), c));
    }
    Ok(first.tape().push(Tensor::scalar(total), Op::Combine { terms: ids }))
}
