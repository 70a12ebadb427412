//! Variational encoder-decoder over IMU windows.
//!
//! A shared trunk feeds a mean head and a log-variance head; the decoder
//! reconstructs the preprocessed window from a reparameterized latent
//! sample. Training combines reconstruction, latent KL and a triplet or
//! quadruplet metric loss on the mean embeddings.

mod loss;
mod mining;
mod train;

pub use loss::{
    latent_kl_grad, latent_kl_loss, quadruplet_loss, quadruplet_loss_grad, reconstruction_grad, reconstruction_loss,
    total_loss, triplet_loss, triplet_loss_grad, RECON_WEIGHT, REGULARIZER_WEIGHT,
};
pub use mining::{mine_pairs, MinedTuple};
pub use train::{batch_gradients, batch_loss, train_encoder, BatchLoss, EncoderConfig, EpochLoss, TrainedEncoder};

use serde::{Deserialize, Serialize};

use crate::data::{ImuWindow, CHANNELS};
use crate::error::{format_err, invalid, shape, Result};
use crate::nncore::{Activation, CheckpointData, DenseLayer, LayerShape, Mlp, ModelKind, Parameterized};
use crate::rng::HarRng;
use crate::Scalar;

pub const DEFAULT_LATENT_DIM: usize = 16;
pub const LOGVAR_MIN: f64 = -18.0;
pub const LOGVAR_MAX: f64 = 9.0;
pub const VARIANCE_MIN: f64 = 1e-8;
pub const VARIANCE_MAX: f64 = 1e4;

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDistribution<T> {
    pub mean: Vec<T>,
    pub variance: Vec<T>,
}

impl<T: Scalar> EmbeddingDistribution<T> {
    pub fn new(mean: Vec<T>, variance: Vec<T>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(shape(format!("mean has {} dims, variance {}", mean.len(), variance.len())));
        }
        if mean.iter().chain(&variance).any(|v| !v.is_finite()) || variance.iter().any(|&v| !(v > T::zero())) {
            return Err(invalid("embedding needs finite mean and positive finite variance"));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `z = mean + √variance ⊙ ε`.
pub fn reparameterized_latent<T: Scalar>(dist: &EmbeddingDistribution<T>, noise: &[T]) -> Vec<T> {
    dist.mean.iter().zip(&dist.variance).zip(noise).map(|((&m, &v), &e)| m + v.sqrt() * e).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    Triplet,
    Quadruplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mining {
    Hard,
    SemiHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub mode: MetricMode,
    pub alpha_margin: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub mining: Mining,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { mode: MetricMode::Triplet, alpha_margin: 0.5, alpha1: 0.5, alpha2: 0.25, mining: Mining::SemiHard }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_margin", self.alpha_margin), ("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub trunk: Mlp<T>,
    pub mean_head: DenseLayer<T>,
    pub logvar_head: DenseLayer<T>,
    pub decoder: Mlp<T>,
}

impl<T: Scalar> EncoderModel<T> {
    /// Trunk `input → hidden[0] → … ` with relu, identity heads, and a
    /// decoder mirroring the trunk back to `input_dim`.
    pub fn init(input_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut HarRng) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) || latent_dim == 0 || input_dim == 0 {
            return Err(invalid(format!("encoder dims input={input_dim} hidden={hidden:?} latent={latent_dim}")));
        }
        let mut trunk_dims = vec![input_dim];
        trunk_dims.extend_from_slice(hidden);
        let trunk = Mlp::init(&trunk_dims, Activation::Relu, Activation::Relu, rng);
        let top = *hidden.last().unwrap();
        let mean_head = DenseLayer::init(top, latent_dim, Activation::Identity, rng);
        let mut logvar_head = DenseLayer::init(top, latent_dim, Activation::Identity, rng);
        logvar_head.weights.iter_mut().for_each(|w| *w *= T::lit(0.1));
        let mut dec_dims = vec![latent_dim];
        dec_dims.extend(hidden.iter().rev());
        dec_dims.push(input_dim);
        let decoder = Mlp::init(&dec_dims, Activation::Relu, Activation::Identity, rng);
        Ok(Self { input_dim, latent_dim, trunk, mean_head, logvar_head, decoder })
    }

    /// Default architecture for windows of `window_len` samples.
    pub fn for_windows(window_len: usize, hidden: &[usize], latent_dim: usize, rng: &mut HarRng) -> Result<Self> {
        Self::init(CHANNELS * window_len, hidden, latent_dim, rng)
    }

    /// Mean and clamped log-variance head outputs.
    pub fn heads(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        if x.len() != self.input_dim {
            return Err(shape(format!("encoder expects {} inputs, got {}", self.input_dim, x.len())));
        }
        let h = self.trunk.forward(x)?;
        let mean = self.mean_head.forward(&h)?;
        let logvar = self.logvar_head.forward(&h)?.into_iter().map(clamp_logvar).collect();
        Ok((mean, logvar))
    }

    pub fn encode(&self, x: &[T]) -> Result<EmbeddingDistribution<T>> {
        let (mean, logvar) = self.heads(x)?;
        let variance =
            logvar.into_iter().map(|s| s.exp().max(T::lit(VARIANCE_MIN)).min(T::lit(VARIANCE_MAX))).collect();
        EmbeddingDistribution::new(mean, variance)
    }

    pub fn encode_window(&self, window: &ImuWindow<T>) -> Result<EmbeddingDistribution<T>> {
        self.encode(window.as_slice())
    }

    pub fn decode(&self, z: &[T]) -> Result<Vec<T>> {
        self.decoder.forward(z)
    }

    fn layer_shapes(&self) -> Vec<LayerShape> {
        let shape_of = |l: &DenseLayer<T>| LayerShape {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            activation: l.activation,
            bayesian: false,
        };
        self.trunk
            .layers
            .iter()
            .chain([&self.mean_head, &self.logvar_head])
            .chain(&self.decoder.layers)
            .map(shape_of)
            .collect()
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        CheckpointData {
            kind: ModelKind::Encoder,
            layers: self.layer_shapes(),
            meta: vec![
                ("input_dim".into(), self.input_dim as f64),
                ("latent_dim".into(), self.latent_dim as f64),
                ("trunk_layers".into(), self.trunk.layers.len() as f64),
            ],
            blocks: self.param_blocks().iter().map(|b| b.iter().map(|v| v.as_f64()).collect()).collect(),
        }
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self> {
        if data.kind != ModelKind::Encoder {
            return Err(format_err("checkpoint", format!("expected an encoder, found {:?}", data.kind)));
        }
        let input_dim = data.require_meta("input_dim")? as usize;
        let latent_dim = data.require_meta("latent_dim")? as usize;
        let n_trunk = data.require_meta("trunk_layers")? as usize;
        if data.layers.len() < 2 * n_trunk + 2 || data.blocks.len() != 2 * data.layers.len() {
            return Err(format_err("checkpoint", "encoder layer table does not match its blocks"));
        }
        let blocks = data.blocks_as::<T>();
        let mut layers = data
            .layers
            .iter()
            .zip(blocks.chunks_exact(2))
            .map(|(s, b)| {
                let l = DenseLayer::from_parts(b[0].clone(), b[1].clone(), s.activation)?;
                if l.in_dim != s.in_dim || l.out_dim != s.out_dim {
                    return Err(format_err("checkpoint", "layer shape disagrees with its parameters"));
                }
                Ok(l)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let trunk = Mlp { layers: layers.by_ref().take(n_trunk).collect() };
        let mean_head = layers.next().unwrap();
        let logvar_head = layers.next().unwrap();
        let decoder = Mlp { layers: layers.collect() };
        let model = Self { input_dim, latent_dim, trunk, mean_head, logvar_head, decoder };
        if model.trunk.in_dim() != input_dim
            || model.decoder.out_dim() != input_dim
            || model.mean_head.out_dim != latent_dim
        {
            return Err(format_err("checkpoint", "encoder dimensions are inconsistent"));
        }
        Ok(model)
    }
}

pub(crate) fn clamp_logvar<T: Scalar>(s: T) -> T {
    s.max(T::lit(LOGVAR_MIN)).min(T::lit(LOGVAR_MAX))
}

impl<T: Scalar> Parameterized<T> for EncoderModel<T> {
    fn param_blocks(&self) -> Vec<&[T]> {
        let mut v = self.trunk.param_blocks();
        v.extend(self.mean_head.param_blocks());
        v.extend(self.logvar_head.param_blocks());
        v.extend(self.decoder.param_blocks());
        v
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.trunk.param_blocks_mut();
        v.extend(self.mean_head.param_blocks_mut());
        v.extend(self.logvar_head.param_blocks_mut());
        v.extend(self.decoder.param_blocks_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{load_checkpoint, save_checkpoint};
    use crate::rng;

    #[test]
    fn reparameterization_examples() {
        let d = EmbeddingDistribution::new(vec![0.5, -1.0], vec![1.0, 4.0]).unwrap();
        assert_eq!(reparameterized_latent(&d, &[0.0, 0.0]), d.mean);
        assert_eq!(reparameterized_latent(&d, &[1.0, 1.0]), vec![1.5, 1.0]);
    }

    #[test]
    fn reparameterized_mean_matches_monte_carlo() {
        let d = EmbeddingDistribution::new(vec![0.3, -2.0], vec![0.25, 2.0]).unwrap();
        let mut r = rng::seeded(5);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let z = reparameterized_latent(&d, &rng::normal_vec(&mut r, 2));
            sum[0] += z[0];
            sum[1] += z[1];
        }
        for k in 0..2 {
            let se = (d.variance[k] / n as f64).sqrt();
            assert!((sum[k] / n as f64 - d.mean[k]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn encode_is_deterministic_with_positive_variance() {
        let mut r = rng::seeded(3);
        let m = EncoderModel::<f64>::init(12, &[8, 6], 4, &mut r).unwrap();
        let x: Vec<f64> = rng::normal_vec(&mut r, 12);
        let a = m.encode(&x).unwrap();
        assert_eq!(a, m.encode(&x).unwrap());
        assert!(a.variance.iter().all(|&v| v > 0.0));
        let huge: Vec<f64> = x.iter().map(|v| v * 1e6).collect();
        let h = m.encode(&huge).unwrap();
        assert!(h.variance.iter().all(|&v| (VARIANCE_MIN..=VARIANCE_MAX).contains(&v)));
        assert!(m.encode(&x[..5]).is_err());
        assert_eq!(m.decode(&a.mean).unwrap().len(), 12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng::seeded(8);
        let m = EncoderModel::<f64>::init(10, &[7, 5], 3, &mut r).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &m.to_checkpoint()).unwrap();
        let back = EncoderModel::<f64>::from_checkpoint(&load_checkpoint(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
