//! Four-layer Bayesian classifier over embedding distributions.
//!
//! Inputs are the embedding means followed by `ln(1 + variance)` for a
//! chosen subset of latent dimensions (all of them unless the classifier has
//! been compressed). Every weight and bias has a Gaussian posterior trained
//! by Bayes by backprop; predictions average the softmax over posterior
//! samples.

mod predict;
mod train;

pub use predict::{
    calibrate_ood_threshold, classify_pipeline, embed_windows, ood_score, predict, predict_batch, FrameworkMode,
    FrozenEnsemble, OodDecision, PipelineOutput, PredictiveResult, DEFAULT_EVAL_SAMPLES,
};
pub use train::{
    elbo_gradients, elbo_loss, train_fcbnn, BnnEpoch, ElboTerms, FcBnnConfig, LabeledFeatures, TrainedFcBnn,
};

use crate::encoder::EmbeddingDistribution;
use crate::error::{format_err, invalid, shape, Result};
use crate::nncore::{
    Activation, BayesianDenseLayer, CheckpointData, GaussianPosterior, LayerNoise, LayerShape, Mlp, ModelKind,
    Parameterized,
};
use crate::rng::HarRng;
use crate::Scalar;

pub const DEFAULT_HIDDEN: [usize; 3] = [32, 32, 16];
pub const DEFAULT_PRIOR_SIGMA: f64 = 1.0;
pub const DEFAULT_RHO_INIT: f64 = -5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FcBnnModel<T> {
    /// Dimension of the embeddings the model is fed.
    pub latent_dim: usize,
    /// Latent dimensions used as inputs, in input order.
    pub kept_dims: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<BayesianDenseLayer<T>>,
}

/// Builds `2·|kept| → h1 → h2 → h3 → K` with relu hidden layers and linear
/// logits.
pub fn build_fcbnn<T: Scalar>(
    latent_dim: usize,
    kept_dims: &[usize],
    num_classes: usize,
    hidden: [usize; 3],
    prior_sigma: T,
    rho_init: T,
    rng: &mut HarRng,
) -> Result<FcBnnModel<T>> {
    if kept_dims.is_empty() || kept_dims.iter().any(|&k| k >= latent_dim) {
        return Err(invalid(format!("kept dims {kept_dims:?} invalid for latent dim {latent_dim}")));
    }
    if num_classes < 2 || hidden.contains(&0) {
        return Err(invalid(format!("classifier with {num_classes} classes and hidden {hidden:?}")));
    }
    let dims = [2 * kept_dims.len(), hidden[0], hidden[1], hidden[2], num_classes];
    let layers = (0..4)
        .map(|i| {
            let act = if i == 3 { Activation::Identity } else { Activation::Relu };
            BayesianDenseLayer::init(dims[i], dims[i + 1], act, prior_sigma, rho_init, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FcBnnModel { latent_dim, kept_dims: kept_dims.to_vec(), num_classes, layers })
}

/// Trainable parameter count `Σ 2·(in + 1)·out` for a layer chain.
pub fn fcbnn_param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| 2 * (w[0] + 1) * w[1]).sum()
}

/// `[mean[k] for k in kept] ++ [ln(1 + variance[k]) for k in kept]`.
pub fn pair_features<T: Scalar>(dist: &EmbeddingDistribution<T>, kept_dims: &[usize]) -> Vec<T> {
    kept_dims.iter().map(|&k| dist.mean[k]).chain(kept_dims.iter().map(|&k| dist.variance[k].ln_1p())).collect()
}

impl<T: Scalar> FcBnnModel<T> {
    pub fn input_dim(&self) -> usize {
        2 * self.kept_dims.len()
    }

    pub fn hidden(&self) -> [usize; 3] {
        [self.layers[0].out_dim, self.layers[1].out_dim, self.layers[2].out_dim]
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.out_dim)).collect()
    }

    pub fn features(&self, dist: &EmbeddingDistribution<T>) -> Result<Vec<T>> {
        if dist.dim() != self.latent_dim {
            return Err(shape(format!("{}-dim embedding for a {}-dim classifier", dist.dim(), self.latent_dim)));
        }
        Ok(pair_features(dist, &self.kept_dims))
    }

    pub fn draw_noise(&self, rng: &mut HarRng) -> Vec<LayerNoise<T>> {
        self.layers.iter().map(|l| LayerNoise::draw(l.in_dim, l.out_dim, rng)).collect()
    }

    /// The deterministic network for one posterior draw.
    pub fn sample_network(&self, noise: &[LayerNoise<T>]) -> Result<Mlp<T>> {
        if noise.len() != self.layers.len() {
            return Err(shape(format!("{} noise sets for {} layers", noise.len(), self.layers.len())));
        }
        Ok(Mlp { layers: self.layers.iter().zip(noise).map(|(l, n)| l.sample(n)).collect::<Result<Vec<_>>>()? })
    }

    /// The network at the posterior means.
    pub fn mean_network(&self) -> Mlp<T> {
        Mlp { layers: self.layers.iter().map(|l| l.mean_layer()).collect() }
    }

    pub fn kl(&self) -> T {
        self.layers.iter().map(|l| l.kl()).sum()
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        let mut meta = vec![
            ("latent_dim".to_string(), self.latent_dim as f64),
            ("num_classes".to_string(), self.num_classes as f64),
            ("prior_sigma".to_string(), self.layers[0].prior_sigma.as_f64()),
        ];
        meta.extend(self.kept_dims.iter().enumerate().map(|(i, &k)| (format!("kept.{i}"), k as f64)));
        CheckpointData {
            kind: ModelKind::FcBnn,
            layers: self
                .layers
                .iter()
                .map(|l| LayerShape { in_dim: l.in_dim, out_dim: l.out_dim, activation: l.activation, bayesian: true })
                .collect(),
            meta,
            blocks: self.param_blocks().iter().map(|b| b.iter().map(|v| v.as_f64()).collect()).collect(),
        }
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self> {
        if data.kind != ModelKind::FcBnn {
            return Err(format_err("checkpoint", format!("expected an fc-bnn, found {:?}", data.kind)));
        }
        let latent_dim = data.require_meta("latent_dim")? as usize;
        let num_classes = data.require_meta("num_classes")? as usize;
        let prior_sigma = T::lit(data.require_meta("prior_sigma")?);
        let kept_dims: Vec<usize> = (0..).map_while(|i| data.meta(&format!("kept.{i}"))).map(|v| v as usize).collect();
        if data.blocks.len() != 4 * data.layers.len() {
            return Err(format_err("checkpoint", "fc-bnn needs four blocks per layer"));
        }
        let blocks = data.blocks_as::<T>();
        let layers = data
            .layers
            .iter()
            .zip(blocks.chunks_exact(4))
            .map(|(s, b)| {
                if b[0].len() != s.in_dim * s.out_dim || b[2].len() != s.out_dim {
                    return Err(format_err("checkpoint", "layer shape disagrees with its parameters"));
                }
                Ok(BayesianDenseLayer {
                    in_dim: s.in_dim,
                    out_dim: s.out_dim,
                    weight_posterior: GaussianPosterior::new(b[0].clone(), b[1].clone())?,
                    bias_posterior: GaussianPosterior::new(b[2].clone(), b[3].clone())?,
                    prior_sigma,
                    activation: s.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self { latent_dim, kept_dims, num_classes, layers };
        if model.layers.first().map(|l| l.in_dim) != Some(model.input_dim())
            || model.layers.last().map(|l| l.out_dim) != Some(num_classes)
        {
            return Err(format_err("checkpoint", "fc-bnn dimensions are inconsistent"));
        }
        Ok(model)
    }
}

impl<T: Scalar> Parameterized<T> for FcBnnModel<T> {
    fn param_blocks(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.param_blocks()).collect()
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.param_blocks_mut()).collect()
    }
}

/// Spread of the learned posterior standard deviations of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVariability {
    pub layer: usize,
    pub count: usize,
    pub sigma_mean: f64,
    /// Population standard deviation of σ across the layer's weights and
    /// biases.
    pub sigma_std: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `(lower edge, upper edge, count)`; counts sum to `count`.
    pub histogram: Vec<(f64, f64, usize)>,
}

pub fn weight_variability_summary<T: Scalar>(model: &FcBnnModel<T>, bins: usize) -> Vec<LayerVariability> {
    let bins = bins.max(1);
    model
        .layers
        .iter()
        .enumerate()
        .map(|(layer, l)| {
            let sigmas: Vec<f64> =
                l.weight_posterior.sigma().into_iter().chain(l.bias_posterior.sigma()).map(|s| s.as_f64()).collect();
            let n = sigmas.len() as f64;
            let mean = sigmas.iter().sum::<f64>() / n;
            let std = (sigmas.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
            let lo = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = (hi - lo) / bins as f64;
            let mut counts = vec![0usize; bins];
            for &s in &sigmas {
                let b = if width > 0.0 { (((s - lo) / width) as usize).min(bins - 1) } else { 0 };
                counts[b] += 1;
            }
            let histogram = counts
                .into_iter()
                .enumerate()
                .map(|(i, c)| (lo + width * i as f64, lo + width * (i + 1) as f64, c))
                .collect();
            LayerVariability {
                layer,
                count: sigmas.len(),
                sigma_mean: mean,
                sigma_std: std,
                sigma_min: lo,
                sigma_max: hi,
                histogram,
            }
        })
        .collect()
}

/// Logits of the posterior-mean network.
pub fn deterministic_logits<T: Scalar>(model: &FcBnnModel<T>, features: &[T]) -> Result<Vec<T>> {
    model.mean_network().forward(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{load_checkpoint, save_checkpoint};
    use crate::rng;

    #[test]
    fn parameter_counts() {
        let mut r = rng::seeded(0);
        let all: Vec<usize> = (0..16).collect();
        let m = build_fcbnn::<f64>(16, &all, 7, [32, 32, 16], 1.0, -5.0, &mut r).unwrap();
        assert_eq!(m.num_params(), 5518);
        assert_eq!(fcbnn_param_count(&m.dims()), 5518);
        let tiny = build_fcbnn::<f64>(1, &[0], 2, [1, 1, 1], 1.0, -5.0, &mut r).unwrap();
        assert_eq!(tiny.num_params(), 22);
        // Explicit enumeration of every tensor.
        let enumerated: usize = m
            .layers
            .iter()
            .map(|l| {
                l.weight_posterior.mu.len()
                    + l.weight_posterior.rho.len()
                    + l.bias_posterior.mu.len()
                    + l.bias_posterior.rho.len()
            })
            .sum();
        assert_eq!(enumerated, 5518);
        assert_eq!(m.num_params() % 2, 0);
    }

    #[test]
    fn features_use_kept_dims_and_log1p_variance() {
        let d = EmbeddingDistribution::new(vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 3.0]).unwrap();
        let f = pair_features(&d, &[2, 0]);
        assert_eq!(f[0], 3.0);
        assert_eq!(f[1], 1.0);
        assert!((f[2] - 4f64.ln()).abs() < 1e-15);
        assert!((f[3] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn fresh_model_has_zero_sigma_dispersion() {
        let mut r = rng::seeded(1);
        let m = build_fcbnn::<f64>(4, &[0, 1, 2, 3], 3, [6, 5, 4], 1.0, -4.0, &mut r).unwrap();
        let summary = weight_variability_summary(&m, 10);
        assert_eq!(summary.len(), 4);
        for s in &summary {
            assert!(s.sigma_std < 1e-15);
            assert_eq!(s.histogram.iter().map(|h| h.2).sum::<usize>(), s.count);
        }
        assert_eq!(summary.iter().map(|s| s.count).sum::<usize>() * 2, m.num_params());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng::seeded(2);
        let m = build_fcbnn::<f64>(5, &[4, 1], 3, [4, 4, 4], 1.0, -3.0, &mut r).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &m.to_checkpoint()).unwrap();
        let back = FcBnnModel::<f64>::from_checkpoint(&load_checkpoint(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut r = rng::seeded(3);
        assert!(build_fcbnn::<f64>(4, &[], 3, [4, 4, 4], 1.0, -3.0, &mut r).is_err());
        assert!(build_fcbnn::<f64>(4, &[4], 3, [4, 4, 4], 1.0, -3.0, &mut r).is_err());
        assert!(build_fcbnn::<f64>(4, &[0], 1, [4, 4, 4], 1.0, -3.0, &mut r).is_err());
    }
}
