//! Gaussian variational posteriors over weights (Bayes by backprop).
//!
//! Each weight has a posterior `N(μ, σ²)` with `σ = softplus(ρ)`, so the
//! optimizer works on the unconstrained `ρ`. Samples are drawn with the
//! reparameterization `w = μ + σ ε`, which keeps `w` differentiable in `μ`
//! and `ρ` for a fixed noise draw `ε`.

use crate::error::{invalid, shape, Result};
use crate::nncore::{Activation, DenseLayer, Parameterized};
use crate::rng::{self, HarRng};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<T> {
    pub mu: Vec<T>,
    pub rho: Vec<T>,
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn new(mu: Vec<T>, rho: Vec<T>) -> Result<Self> {
        if mu.len() != rho.len() {
            return Err(shape(format!("mu has {} entries, rho {}", mu.len(), rho.len())));
        }
        Ok(Self { mu, rho })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<T> {
        self.rho.iter().map(|r| r.softplus()).collect()
    }
}

/// `w = μ + softplus(ρ) ⊙ ε`.
pub fn sample_weights<T: Scalar>(posterior: &GaussianPosterior<T>, noise: &[T]) -> Result<Vec<T>> {
    if noise.len() != posterior.len() {
        return Err(shape(format!("noise has {} entries for {} weights", noise.len(), posterior.len())));
    }
    Ok(posterior.mu.iter().zip(&posterior.rho).zip(noise).map(|((&m, &r), &e)| m + r.softplus() * e).collect())
}

/// `KL(N(μ, σ²) ‖ N(0, σ_p²))` summed over elements.
pub fn kl_gaussian_to_prior<T: Scalar>(posterior: &GaussianPosterior<T>, prior_sigma: T) -> T {
    let half = T::lit(0.5);
    let pv2 = T::lit(2.0) * prior_sigma * prior_sigma;
    posterior
        .mu
        .iter()
        .zip(&posterior.rho)
        .map(|(&m, &r)| {
            let s = r.softplus();
            (prior_sigma / s).ln() + (s * s + m * m) / pv2 - half
        })
        .sum()
}

/// Adds `∂KL/∂μ` and `∂KL/∂ρ`, scaled by `scale`, into `gmu` and `grho`.
fn kl_gradient<T: Scalar>(posterior: &GaussianPosterior<T>, prior_sigma: T, scale: T, gmu: &mut [T], grho: &mut [T]) {
    let pv = prior_sigma * prior_sigma;
    for i in 0..posterior.len() {
        let r = posterior.rho[i];
        let s = r.softplus();
        gmu[i] += scale * posterior.mu[i] / pv;
        grho[i] += scale * (s / pv - T::one() / s) * r.sigmoid();
    }
}

/// Standard-normal draws for one Bayesian layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerNoise<T> {
    pub fn draw(in_dim: usize, out_dim: usize, rng: &mut HarRng) -> Self {
        Self { weights: rng::normal_vec(rng, in_dim * out_dim), bias: rng::normal_vec(rng, out_dim) }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weights: vec![T::zero(); in_dim * out_dim], bias: vec![T::zero(); out_dim] }
    }
}

/// Dense layer whose weights and biases carry Gaussian posteriors under a
/// shared `N(0, σ_p²)` prior.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesianDenseLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_posterior: GaussianPosterior<T>,
    pub bias_posterior: GaussianPosterior<T>,
    pub prior_sigma: T,
    pub activation: Activation,
}

impl<T: Scalar> BayesianDenseLayer<T> {
    /// Means drawn like a deterministic layer's initialization, every `ρ` set
    /// to `rho_init`.
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        prior_sigma: T,
        rho_init: T,
        rng: &mut HarRng,
    ) -> Result<Self> {
        if !(prior_sigma > T::zero()) {
            return Err(invalid(format!("prior sigma {prior_sigma} must be positive")));
        }
        let det = DenseLayer::<T>::init(in_dim, out_dim, activation, rng);
        Ok(Self {
            in_dim,
            out_dim,
            weight_posterior: GaussianPosterior { mu: det.weights, rho: vec![rho_init; in_dim * out_dim] },
            bias_posterior: GaussianPosterior { mu: det.bias, rho: vec![rho_init; out_dim] },
            prior_sigma,
            activation,
        })
    }

    pub fn sample(&self, noise: &LayerNoise<T>) -> Result<DenseLayer<T>> {
        Ok(DenseLayer {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weights: sample_weights(&self.weight_posterior, &noise.weights)?,
            bias: sample_weights(&self.bias_posterior, &noise.bias)?,
            activation: self.activation,
        })
    }

    /// The network evaluated at the posterior means.
    pub fn mean_layer(&self) -> DenseLayer<T> {
        DenseLayer {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weights: self.weight_posterior.mu.clone(),
            bias: self.bias_posterior.mu.clone(),
            activation: self.activation,
        }
    }

    pub fn kl(&self) -> T {
        kl_gaussian_to_prior(&self.weight_posterior, self.prior_sigma)
            + kl_gaussian_to_prior(&self.bias_posterior, self.prior_sigma)
    }

    /// Adds `scale · ∂KL/∂θ` into the layer's four gradient blocks
    /// `[w_mu, w_rho, b_mu, b_rho]`.
    pub fn accumulate_kl_grad(&self, scale: T, grads: &mut [Vec<T>]) {
        let (w, b) = grads.split_at_mut(2);
        let (wmu, wrho) = w.split_at_mut(1);
        let (bmu, brho) = b.split_at_mut(1);
        kl_gradient(&self.weight_posterior, self.prior_sigma, scale, &mut wmu[0], &mut wrho[0]);
        kl_gradient(&self.bias_posterior, self.prior_sigma, scale, &mut bmu[0], &mut brho[0]);
    }

    /// Maps gradients w.r.t. a sampled weight tensor onto `μ` and `ρ`:
    /// `∂w/∂μ = 1`, `∂w/∂ρ = ε · sigmoid(ρ)`.
    pub fn accumulate_sample_grad(&self, noise: &LayerNoise<T>, gw: &[T], gb: &[T], grads: &mut [Vec<T>]) {
        let chain = |post: &GaussianPosterior<T>, eps: &[T], g: &[T], gmu: &mut [T], grho: &mut [T]| {
            for i in 0..g.len() {
                gmu[i] += g[i];
                grho[i] += g[i] * eps[i] * post.rho[i].sigmoid();
            }
        };
        let (w, b) = grads.split_at_mut(2);
        let (wmu, wrho) = w.split_at_mut(1);
        let (bmu, brho) = b.split_at_mut(1);
        chain(&self.weight_posterior, &noise.weights, gw, &mut wmu[0], &mut wrho[0]);
        chain(&self.bias_posterior, &noise.bias, gb, &mut bmu[0], &mut brho[0]);
    }
}

impl<T: Scalar> Parameterized<T> for BayesianDenseLayer<T> {
    fn param_blocks(&self) -> Vec<&[T]> {
        vec![&self.weight_posterior.mu, &self.weight_posterior.rho, &self.bias_posterior.mu, &self.bias_posterior.rho]
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            &mut self.weight_posterior.mu,
            &mut self.weight_posterior.rho,
            &mut self.bias_posterior.mu,
            &mut self.bias_posterior.rho,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{max_relative_error, numeric_gradient};
    use crate::nncore::Grads;

    #[test]
    fn sampling_examples() {
        let p = GaussianPosterior::new(vec![0.3, -1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(sample_weights(&p, &[0.0, 0.0]).unwrap(), p.mu);
        let z = GaussianPosterior::new(vec![0.0], vec![0.0]).unwrap();
        let w = sample_weights(&z, &[1.0]).unwrap()[0];
        assert!((w - std::f64::consts::LN_2).abs() < 1e-12);
        let tight = GaussianPosterior::<f64>::new(vec![0.7], vec![-60.0]).unwrap();
        assert!((sample_weights(&tight, &[5.0]).unwrap()[0] - 0.7).abs() < 1e-20);
        assert!(sample_weights(&p, &[1.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        let rho_for = |s: f64| (s.exp() - 1.0).ln();
        let same = GaussianPosterior::new(vec![0.0; 3], vec![rho_for(1.0); 3]).unwrap();
        assert!(kl_gaussian_to_prior(&same, 1.0).abs() < 1e-12);
        let shifted = GaussianPosterior::new(vec![1.0], vec![rho_for(1.0)]).unwrap();
        assert!((kl_gaussian_to_prior(&shifted, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_w_r_t_mu_at_unit() {
        let rho = (1f64.exp() - 1.0).ln();
        let p = GaussianPosterior::new(vec![1.0], vec![rho]).unwrap();
        let mut gmu = vec![0.0];
        let mut grho = vec![0.0];
        kl_gradient(&p, 1.0, 1.0, &mut gmu, &mut grho);
        assert!((gmu[0] - 1.0).abs() < 1e-12);
        assert!(grho[0].abs() < 1e-12);
    }

    #[test]
    fn layer_kl_and_sample_gradients_match_finite_differences() {
        let mut rng = rng::seeded(4);
        let mut layer = BayesianDenseLayer::<f64>::init(3, 2, Activation::Tanh, 1.0, -1.0, &mut rng).unwrap();
        let noise = LayerNoise::draw(3, 2, &mut rng);
        let x = [0.2, -0.5, 0.9];
        let loss = |l: &BayesianDenseLayer<f64>| {
            let y = l.sample(&noise).unwrap().forward(&x).unwrap();
            y.iter().map(|v| v * v).sum::<f64>() + 0.1 * l.kl()
        };
        let mut g: Grads<f64> = layer.zero_grads();
        let dense = layer.sample(&noise).unwrap();
        let y = dense.forward(&x).unwrap();
        let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let mut gw = vec![0.0; 6];
        let mut gb = vec![0.0; 2];
        dense.backward(&x, &y, &dy, &mut gw, &mut gb);
        layer.accumulate_sample_grad(&noise, &gw, &gb, &mut g.blocks);
        layer.accumulate_kl_grad(0.1, &mut g.blocks);
        let num = numeric_gradient(&mut layer, loss, 1e-5);
        assert!(max_relative_error(&g, &num, 1e-6) < 1e-6);
    }

    #[test]
    fn prior_sigma_must_be_positive() {
        let mut rng = rng::seeded(0);
        assert!(BayesianDenseLayer::<f64>::init(2, 2, Activation::Relu, 0.0, -3.0, &mut rng).is_err());
    }
}
