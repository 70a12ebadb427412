use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bnn::{build_fcbnn, predict_batch, FcBnnModel, DEFAULT_HIDDEN, DEFAULT_PRIOR_SIGMA, DEFAULT_RHO_INIT};
use crate::error::{invalid, shape, HarError, Result};
use crate::metrics::accuracy;
use crate::nncore::{Adam, AdamConfig, Grads, LayerNoise, Parameterized};
use crate::rng;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcBnnConfig {
    pub hidden: [usize; 3],
    pub prior_sigma: f64,
    pub rho_init: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Posterior draws per minibatch during training.
    pub n_weight_samples: usize,
    /// Posterior draws per window for the per-epoch validation accuracy.
    pub val_samples: usize,
    pub adam: AdamConfig,
}

impl Default for FcBnnConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            prior_sigma: DEFAULT_PRIOR_SIGMA,
            rho_init: DEFAULT_RHO_INIT,
            epochs: 150,
            batch_size: 64,
            n_weight_samples: 1,
            val_samples: 10,
            adam: AdamConfig { learning_rate: 3e-3, ..AdamConfig::default() },
        }
    }
}

impl FcBnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.n_weight_samples == 0 || self.val_samples < 2 {
            return Err(invalid("fc-bnn epochs, batch size and sample counts must be positive (val_samples ≥ 2)"));
        }
        if !(self.prior_sigma > 0.0) {
            return Err(invalid(format!("prior sigma {} must be positive", self.prior_sigma)));
        }
        Ok(())
    }
}

/// Classifier inputs with their labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledFeatures<T> {
    pub features: Vec<Vec<T>>,
    pub labels: Vec<usize>,
}

impl<T> LabeledFeatures<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms<T> {
    /// `kl_scale · KL(q ‖ p)`.
    pub kl: T,
    /// Negative log-likelihood summed over the batch, averaged over draws.
    pub nll: T,
    pub total: T,
}

fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

fn check_inputs<T: Scalar>(
    model: &FcBnnModel<T>,
    inputs: &[Vec<T>],
    labels: &[usize],
    noise: &[Vec<LayerNoise<T>>],
) -> Result<()> {
    if inputs.len() != labels.len() {
        return Err(shape(format!("{} inputs with {} labels", inputs.len(), labels.len())));
    }
    if noise.is_empty() {
        return Err(invalid("at least one posterior draw is required"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(invalid(format!("label {bad} outside 0..{}", model.num_classes)));
    }
    if inputs.iter().any(|x| x.len() != model.input_dim()) {
        return Err(shape(format!("classifier expects {} features", model.input_dim())));
    }
    Ok(())
}

/// `kl_scale · Σ_layers KL + mean over draws of Σ_batch −log p(y | x, w)`.
pub fn elbo_loss<T: Scalar>(
    model: &FcBnnModel<T>,
    inputs: &[Vec<T>],
    labels: &[usize],
    noise: &[Vec<LayerNoise<T>>],
    kl_scale: T,
) -> Result<ElboTerms<T>> {
    check_inputs(model, inputs, labels, noise)?;
    let mut nll = T::zero();
    for n in noise {
        let net = model.sample_network(n)?;
        for (x, &y) in inputs.iter().zip(labels) {
            nll -= log_softmax(&net.forward(x)?)[y];
        }
    }
    nll /= T::from_usize_lossy(noise.len());
    let kl = kl_scale * model.kl();
    Ok(ElboTerms { kl, nll, total: kl + nll })
}

/// [`elbo_loss`] and its gradient with respect to every `μ` and `ρ`, with
/// the posterior noise held fixed.
pub fn elbo_gradients<T: Scalar>(
    model: &FcBnnModel<T>,
    inputs: &[Vec<T>],
    labels: &[usize],
    noise: &[Vec<LayerNoise<T>>],
    kl_scale: T,
) -> Result<(ElboTerms<T>, Grads<T>)> {
    check_inputs(model, inputs, labels, noise)?;
    let mut grads = model.zero_grads();
    let inv_draws = T::one() / T::from_usize_lossy(noise.len());
    let mut nll = T::zero();
    for n in noise {
        let net = model.sample_network(n)?;
        let mut dense = net.zero_grads();
        for (x, &y) in inputs.iter().zip(labels) {
            let trace = net.forward_trace(x)?;
            let logp = log_softmax(trace.output());
            nll -= logp[y];
            let dy: Vec<T> = logp
                .iter()
                .enumerate()
                .map(|(k, &lp)| inv_draws * (lp.exp() - if k == y { T::one() } else { T::zero() }))
                .collect();
            net.backward(&trace, &dy, &mut dense.blocks)?;
        }
        for (i, layer) in model.layers.iter().enumerate() {
            layer.accumulate_sample_grad(
                &n[i],
                &dense.blocks[2 * i],
                &dense.blocks[2 * i + 1],
                &mut grads.blocks[4 * i..4 * i + 4],
            );
        }
    }
    for (i, layer) in model.layers.iter().enumerate() {
        layer.accumulate_kl_grad(kl_scale, &mut grads.blocks[4 * i..4 * i + 4]);
    }
    grads.check_finite("fc-bnn")?;
    nll *= inv_draws;
    let kl = kl_scale * model.kl();
    Ok((ElboTerms { kl, nll, total: kl + nll }, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnnEpoch {
    pub epoch: usize,
    /// Sum of the minibatch objectives, an estimate of the full negative ELBO.
    pub loss: f64,
    pub kl: f64,
    pub nll: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedFcBnn<T> {
    pub model: FcBnnModel<T>,
    pub trace: Vec<BnnEpoch>,
}

/// Builds and trains a classifier over the `kept_dims` of `latent_dim`
/// dimensional embeddings. `train` and `validation` hold precomputed
/// features (see [`crate::bnn::pair_features`]).
pub fn train_fcbnn<T: Scalar>(
    latent_dim: usize,
    kept_dims: &[usize],
    num_classes: usize,
    train: &LabeledFeatures<T>,
    validation: &LabeledFeatures<T>,
    config: &FcBnnConfig,
    seed: u64,
) -> Result<TrainedFcBnn<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(invalid("empty classifier training set"));
    }
    let mut init_rng = rng::stream(seed, 0);
    let mut model = build_fcbnn(
        latent_dim,
        kept_dims,
        num_classes,
        config.hidden,
        T::lit(config.prior_sigma),
        T::lit(config.rho_init),
        &mut init_rng,
    )?;
    let mut rng = rng::stream(seed, 1);
    let mut adam = Adam::new(config.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches = train.len().div_ceil(config.batch_size);
    let kl_scale = T::one() / T::from_usize_lossy(batches);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut kl, mut nll) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<Vec<T>> = chunk.iter().map(|&i| train.features[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let noise: Vec<_> = (0..config.n_weight_samples).map(|_| model.draw_noise(&mut rng)).collect();
            let (terms, grads) = match elbo_gradients(&model, &xs, &ys, &noise, kl_scale) {
                Ok(v) => v,
                Err(HarError::NonFinite(detail)) => return Err(HarError::Diverged { epoch, detail }),
                Err(e) => return Err(e),
            };
            if !terms.total.is_finite() {
                return Err(HarError::Diverged { epoch, detail: format!("minibatch objective {}", terms.total) });
            }
            adam.step(&mut model, &grads)?;
            loss += terms.total.as_f64();
            kl += terms.kl.as_f64();
            nll += terms.nll.as_f64();
        }
        let val_accuracy = if validation.is_empty() {
            f64::NAN
        } else {
            let preds = predict_batch(&model, &validation.features, config.val_samples, seed ^ (epoch as u64 + 1))?;
            let argmax: Vec<usize> = preds.iter().map(|p| p.argmax()).collect();
            accuracy(&argmax, &validation.labels)
        };
        trace.push(BnnEpoch { epoch, loss, kl, nll, val_accuracy });
    }
    Ok(TrainedFcBnn { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{max_relative_error, numeric_gradient};

    #[test]
    fn elbo_gradient_matches_finite_differences_with_frozen_noise() {
        for case in 0..4u64 {
            let mut r = rng::seeded(100 + case);
            let mut model = build_fcbnn::<f64>(3, &[0, 1, 2], 3, [4, 3, 3], 1.0, -1.5, &mut r).unwrap();
            let xs: Vec<Vec<f64>> = (0..5).map(|_| rng::normal_vec(&mut r, 6)).collect();
            let ys = vec![0, 1, 2, 1, 0];
            let noise: Vec<_> = (0..2).map(|_| model.draw_noise(&mut r)).collect();
            let (_, g) = elbo_gradients(&model, &xs, &ys, &noise, 0.25).unwrap();
            let num = numeric_gradient(&mut model, |m| elbo_loss(m, &xs, &ys, &noise, 0.25).unwrap().total, 1e-5);
            let err = max_relative_error(&g, &num, 1e-6);
            assert!(err < 1e-4, "case {case}: {err}");
        }
    }

    #[test]
    fn confident_correct_logits_leave_only_the_kl_term() {
        let mut r = rng::seeded(7);
        let mut model = build_fcbnn::<f64>(1, &[0], 2, [2, 2, 2], 1.0, -40.0, &mut r).unwrap();
        for l in &mut model.layers {
            l.weight_posterior.mu.iter_mut().for_each(|w| *w = 0.0);
            l.bias_posterior.mu.iter_mut().for_each(|b| *b = 0.0);
        }
        model.layers[3].bias_posterior.mu = vec![60.0, -60.0];
        let noise = vec![model.draw_noise(&mut r)];
        let terms = elbo_loss(&model, &[vec![0.3, 0.1]], &[0], &noise, 1.0).unwrap();
        assert!(terms.nll < 1e-20);
        assert!(terms.kl >= 0.0);
        assert!((terms.total - terms.kl).abs() < 1e-12);
        assert!(elbo_loss(&model, &[vec![0.3, 0.1]], &[2], &noise, 1.0).is_err());
    }

    fn separable(n: usize, seed: u64) -> LabeledFeatures<f64> {
        let mut r = rng::seeded(seed);
        let mut out = LabeledFeatures::default();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -1.5 } else { 1.5 };
            let m: Vec<f64> = rng::normal_vec::<f64>(&mut r, 2).into_iter().map(|v| c + 0.4 * v).collect();
            out.features.push(vec![m[0], m[1], 0.2, 0.2]);
            out.labels.push(y);
        }
        out
    }

    #[test]
    fn trains_a_separable_two_class_problem() {
        let train = separable(200, 1);
        let val = separable(100, 2);
        let cfg = FcBnnConfig { epochs: 40, hidden: [8, 8, 4], ..FcBnnConfig::default() };
        let a = train_fcbnn(2, &[0, 1], 2, &train, &val, &cfg, 5).unwrap();
        let b = train_fcbnn(2, &[0, 1], 2, &train, &val, &cfg, 5).unwrap();
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.last().unwrap().loss < a.trace[0].loss);
        assert!(a.trace.last().unwrap().val_accuracy >= 0.95);
    }
}
