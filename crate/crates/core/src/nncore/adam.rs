use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::nncore::{Grads, Parameterized};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias-corrected moments. Moment buffers are sized on the first
/// step from the gradient blocks.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M, grads: &Grads<T>) -> Result<()> {
        let mut params = model.param_blocks_mut();
        if params.len() != grads.blocks.len() || params.iter().zip(&grads.blocks).any(|(p, g)| p.len() != g.len()) {
            return Err(shape("gradient blocks do not match parameter blocks"));
        }
        if self.m.is_empty() {
            self.m = grads.blocks.iter().map(|b| vec![T::zero(); b.len()]).collect();
            self.v = self.m.clone();
        }
        self.step_count += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let lr = T::lit(self.config.learning_rate);
        let eps = T::lit(self.config.epsilon);
        let t = self.step_count as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.blocks[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar1(Vec<f64>);
    impl Parameterized<f64> for Scalar1 {
        fn param_blocks(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Scalar1(vec![1.5, -2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            opt.step(&mut p, &Grads { blocks: vec![vec![0.0, 0.0]] }).unwrap();
        }
        assert_eq!(p.0, vec![1.5, -2.0]);
    }

    #[test]
    fn step_on_square_descends() {
        let mut p = Scalar1(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        let g = Grads { blocks: vec![vec![2.0 * p.0[0]]] };
        opt.step(&mut p, &g).unwrap();
        assert!(p.0[0].abs() < 1.0);
        // first Adam step moves by exactly lr (bias-corrected m/sqrt(v) = 1)
        assert!((p.0[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn identical_inputs_identical_trajectories() {
        let run = || {
            let mut p = Scalar1(vec![0.7, -0.3]);
            let mut opt = Adam::new(AdamConfig::default());
            for _ in 0..50 {
                let g = Grads { blocks: vec![p.0.iter().map(|x| 2.0 * x).collect()] };
                opt.step(&mut p, &g).unwrap();
            }
            p.0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Scalar1(vec![0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut p, &Grads { blocks: vec![vec![0.0, 1.0]] }).is_err());
    }
}
