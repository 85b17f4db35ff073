//! Minimal layer library with hand-written backward passes.
//!
//! Layers keep their parameters in [`Param`]s and expose `forward`/`backward`
//! pairs; callers cache whatever inputs the backward pass asks for. Gradients
//! accumulate until [`Param::zero_grad`] is called.

mod activation;
mod adam;
mod conv;
mod linear;

pub use activation::{elu, elu_backward, silu, silu_backward};
pub use adam::{Adam, AdamConfig};
pub use conv::{Conv1d, Conv2d, ConvTranspose1d, Padding};
pub use linear::Linear;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::Scalar;

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            p.value.mapv_inplace(|_| T::lit(dist.sample(rng)));
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything owning trainable parameters. The order of [`Module::params`]
/// is stable and defines the checkpoint layout.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Fan-in scaled bound used for default initialization.
pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
