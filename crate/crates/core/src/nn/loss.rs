//! Scalar losses. All of them are means over their elements.

use std::rc::Rc;

use super::activation::sigmoid;
use super::tape::Op;
use super::{IntTensor, Real, Tensor, Var};
use crate::error::{Error, Result};

fn check_finite<T: Real>(name: &str, v: T) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Pixel-wise softmax cross-entropy of `logits [N,K,H,W]` against `labels [N,H,W]`.
pub fn softmax_ce_loss<'t, T: Real>(logits: Var<'t, T>, labels: &IntTensor) -> Result<Var<'t, T>> {
    let x = logits.value();
    let (n, k, h, w) = x.dims4("softmax_ce_loss")?;
    if labels.shape() != [n, h, w] {
        return Err(Error::shape(
            "softmax_ce_loss",
            format!("labels {:?} do not match logits {:?}", labels.shape(), x.shape()),
        ));
    }
    let plane = h * w;
    let mut probs = vec![T::zero(); x.len()];
    let mut total = 0.0f64;
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            let label = labels.data()[b * plane + p] as usize;
            if label >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {label} out of range for {k} classes"
                )));
            }
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(x.data()[base + c * plane + p]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (x.data()[base + c * plane + p] - m).exp();
                probs[base + c * plane + p] = e;
                z += e;
            }
            for c in 0..k {
                probs[base + c * plane + p] /= z;
            }
            // -log p_label = log z + m - x_label
            total += (z.ln() + m - x.data()[base + label * plane + p]).as_f64();
        }
    }
    let loss = T::from_f64(total / (n * plane) as f64);
    check_finite("softmax_ce_loss", loss)?;
    Ok(logits.tape().push(
        Tensor::scalar(loss),
        Op::CrossEntropy {
            logits: logits.id(),
            labels: Rc::new(labels.clone()),
            probs,
        },
    ))
}

pub(crate) fn cross_entropy_backward<T: Real>(
    g: T,
    shape: &[usize],
    labels: &IntTensor,
    probs: &[T],
) -> Tensor<T> {
    let [n, k, h, w] = *shape else { unreachable!() };
    let plane = h * w;
    let scale = g / T::from_f64((n * plane) as f64);
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for b in 0..n {
        for p in 0..plane {
            let label = labels.data()[b * plane + p] as usize;
            d[b * k * plane + label * plane + p] -= scale;
        }
    }
    Tensor::new(shape.to_vec(), d).expect("shape")
}

/// `(1/M) Σ (aᵢ − bᵢ)²`. Gradients flow into whichever side requires them;
/// pass a detached `b` for teacher targets.
pub fn mse_loss<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    a.same_tape(&b);
    let (av, bv) = (a.value(), b.value());
    if av.shape() != bv.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", av.shape(), bv.shape()),
        ));
    }
    let m = av.len().max(1) as f64;
    let sum: f64 = av
        .data()
        .iter()
        .zip(bv.data())
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum();
    let loss = T::from_f64(sum / m);
    check_finite("mse_loss", loss)?;
    Ok(a.tape().push(
        Tensor::scalar(loss),
        Op::Mse {
            a: a.id(),
            b: b.id(),
        },
    ))
}

pub(crate) fn mse_backward<T: Real>(g: T, a: &Tensor<T>, b: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let k = T::from_f64(2.0) * g / T::from_f64(a.len().max(1) as f64);
    let da: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| k * (x - y)).collect();
    let db = da.iter().map(|&v| -v).collect();
    (
        Tensor::new(a.shape().to_vec(), da).expect("shape"),
        Tensor::new(a.shape().to_vec(), db).expect("shape"),
    )
}

/// Binary cross-entropy on logits against a constant label, averaged over
/// every element. Uses `max(x,0) − x·y + ln(1 + e^{−|x|})` so large `|x|` is safe.
pub fn bce_logits_loss<T: Real>(logits: Var<'_, T>, target: f64) -> Result<Var<'_, T>> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("bce target {target} outside [0,1]")));
    }
    let x = logits.value();
    let y = T::from_f64(target);
    let sum: f64 = x
        .data()
        .iter()
        .map(|&v| (v.max(T::zero()) - v * y + (-v.abs()).exp().ln_1p()).as_f64())
        .sum();
    let loss = T::from_f64(sum / x.len().max(1) as f64);
    check_finite("bce_logits_loss", loss)?;
    Ok(logits.tape().push(
        Tensor::scalar(loss),
        Op::BceLogits {
            input: logits.id(),
            target: y,
        },
    ))
}

pub(crate) fn bce_logits_backward<T: Real>(g: T, x: &Tensor<T>, y: T) -> Tensor<T> {
    let k = g / T::from_f64(x.len().max(1) as f64);
    x.map(|v| k * (sigmoid(v) - y))
}
