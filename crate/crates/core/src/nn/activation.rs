use super::tape::Op;
use super::{Real, Tensor, Var};
use crate::error::Result;

/// Negative-side slope of the discriminators' leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn apply<T: Real>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => x.max(T::zero()),
        Activation::LeakyRelu => {
            if x > T::zero() {
                x
            } else {
                x * T::from_f64(LEAKY_SLOPE)
            }
        }
        Activation::Sigmoid => sigmoid(x),
    }
}

pub(crate) fn backward<T: Real>(kind: Activation, dy: &Tensor<T>, x: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let slope = T::from_f64(LEAKY_SLOPE);
    let data = match kind {
        Activation::Relu => dy
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &xv)| if xv > T::zero() { g } else { T::zero() })
            .collect(),
        Activation::LeakyRelu => dy
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &xv)| if xv > T::zero() { g } else { g * slope })
            .collect(),
        Activation::Sigmoid => dy
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &yv)| g * yv * (T::one() - yv))
            .collect(),
    };
    Tensor::new(dy.shape().to_vec(), data).expect("shape")
}

/// Softmax across the channel axis of `[N, C, H, W]`.
pub(crate) fn softmax_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("softmax")?;
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(x.data()[base + ch * plane + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x.data()[base + ch * plane + p] - m).exp();
                out[base + ch * plane + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Real>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = *y.shape() else {
        unreachable!("softmax output is rank 4")
    };
    let plane = h * w;
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + p;
                dot += dy.data()[i] * y.data()[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                dx[i] = y.data()[i] * (dy.data()[i] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("shape")
}

pub fn pointwise<T: Real>(input: Var<'_, T>, kind: Activation) -> Var<'_, T> {
    let y = input.borrow_value().map(|x| apply(kind, x));
    input.tape().push(
        y,
        Op::Pointwise {
            input: input.id(),
            kind,
        },
    )
}

pub fn relu<T: Real>(input: Var<'_, T>) -> Var<'_, T> {
    pointwise(input, Activation::Relu)
}

pub fn leaky_relu<T: Real>(input: Var<'_, T>) -> Var<'_, T> {
    pointwise(input, Activation::LeakyRelu)
}

pub fn softmax<T: Real>(input: Var<'_, T>) -> Result<Var<'_, T>> {
    let y = softmax_forward(&input.borrow_value())?;
    Ok(input.tape().push(y, Op::Softmax { input: input.id() }))
}
