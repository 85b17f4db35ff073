use ndarray::{Array1, ArrayView2, Ix1, Ix2};
use rand::Rng;

use super::{fan_in_bound, Module, Param};
use crate::Scalar;

/// Dense layer acting on vectors.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `out x in`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = fan_in_bound(inputs);
        Self {
            weight: Param::uniform(format!("{name}.weight"), &[outputs, inputs], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[outputs], bound, rng),
        }
    }

    fn w(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    pub fn forward(&self, x: &Array1<T>) -> Array1<T> {
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-D bias");
        self.w().dot(x) + b
    }

    pub fn backward(&mut self, x: &Array1<T>, grad_out: &Array1<T>) -> Array1<T> {
        let outer = grad_out
            .view()
            .insert_axis(ndarray::Axis(1))
            .dot(&x.view().insert_axis(ndarray::Axis(0)));
        self.weight.grad += &outer.into_dyn();
        self.bias.grad += &grad_out.view().into_dyn();
        self.w().t().dot(grad_out)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
