//! Small reverse-mode network substrate.
//!
//! There is no general autodiff graph: every layer type knows its own forward
//! and backward pass, and models chain them explicitly. Parameters are exposed
//! as flat blocks through [`Parameterized`] so the optimizer, the
//! finite-difference checker and the checkpoint writer can treat every model
//! the same way.

mod adam;
mod bayes;
mod checkpoint;
mod dense;
pub mod gradcheck;

pub use adam::{Adam, AdamConfig};
pub use bayes::{kl_gaussian_to_prior, sample_weights, BayesianDenseLayer, GaussianPosterior, LayerNoise};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, LayerShape, ModelKind};
pub use dense::{DenseLayer, Mlp, MlpTrace};

use serde::{Deserialize, Serialize};

use crate::error::{HarError, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Models whose trainable state is a fixed list of flat parameter blocks.
pub trait Parameterized<T: Scalar> {
    fn param_blocks(&self) -> Vec<&[T]>;
    fn param_blocks_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }

    fn zero_grads(&self) -> Grads<T> {
        Grads { blocks: self.param_blocks().iter().map(|b| vec![T::zero(); b.len()]).collect() }
    }
}

/// Gradient storage mirroring a model's parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub blocks: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.blocks.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|x| x.is_finite())
    }

    pub fn flatten(&self) -> Vec<T> {
        self.blocks.concat()
    }

    /// Errors naming the first block that holds a non-finite entry.
    pub fn check_finite(&self, owner: &str) -> Result<()> {
        match self.blocks.iter().position(|b| b.iter().any(|x| !x.is_finite())) {
            None => Ok(()),
            Some(i) => Err(HarError::NonFinite(format!("{owner} gradient block {i}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Identity, Activation::Relu, Activation::Tanh] {
            for &x in &[-1.3f64, -0.2, 0.4, 2.0] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let an = act.derivative_from_output(act.apply(x));
                assert!((fd - an).abs() < 1e-6, "{act:?} at {x}");
            }
            assert_eq!(Activation::from_code(act.code()), Some(act));
        }
    }
}
