use ndarray::{Array, ArrayBase, Data, Dimension, Zip};

use crate::Scalar;

pub fn elu<T: Scalar, S: Data<Elem = T>, D: Dimension>(x: &ArrayBase<S, D>) -> Array<T, D> {
    x.mapv(|v| if v > T::zero() { v } else { v.exp_m1() })
}

/// Gradient through ELU given the pre-activation input.
pub fn elu_backward<T: Scalar, D: Dimension>(x: &Array<T, D>, grad: &Array<T, D>) -> Array<T, D> {
    let mut out = grad.clone();
    Zip::from(&mut out).and(x).for_each(|g, &v| {
        if v <= T::zero() {
            *g *= v.exp();
        }
    });
    out
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar, S: Data<Elem = T>, D: Dimension>(x: &ArrayBase<S, D>) -> Array<T, D> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar, D: Dimension>(x: &Array<T, D>, grad: &Array<T, D>) -> Array<T, D> {
    let mut out = grad.clone();
    Zip::from(&mut out).and(x).for_each(|g, &v| {
        let s = sigmoid(v);
        *g *= s * (T::one() + v * (T::one() - s));
    });
    out
}
