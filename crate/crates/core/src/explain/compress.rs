use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{
    fcbnn_param_count, pair_features, predict_batch, train_fcbnn, FcBnnConfig, FcBnnModel, FrozenEnsemble,
    LabeledFeatures,
};
use crate::encoder::EmbeddingDistribution;
use crate::error::{invalid, shape, Result};
use crate::explain::{background_mean, global_shap_summary, kernel_shap, FeatureGroups};
use crate::metrics::accuracy;
use crate::rng;
use crate::Scalar;

/// Knobs of the SHAP-thresholded retraining loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionPolicy {
    /// Keep latent dimensions whose mean |φ| reaches this fraction of the
    /// largest mean |φ|.
    pub shap_fraction: f64,
    /// Largest tolerated drop in validation accuracy below the baseline.
    pub tolerance: f64,
    pub min_hidden: usize,
    /// Posterior draws behind the explained `prob_mean`.
    pub shap_samples: usize,
    /// Coalitions per explanation when enumeration is too large.
    pub n_coalitions: usize,
    /// Validation inputs explained per iteration (evenly spaced).
    pub explain_inputs: usize,
    /// Posterior draws per window when scoring validation accuracy.
    pub eval_samples: usize,
}

impl Default for CompressionPolicy {
    fn default() -> Self {
        Self {
            shap_fraction: 0.2,
            tolerance: 0.02,
            min_hidden: 4,
            shap_samples: 50,
            n_coalitions: 512,
            explain_inputs: 48,
            eval_samples: 100,
        }
    }
}

impl CompressionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.shap_fraction > 0.0 && self.shap_fraction <= 1.0) {
            return Err(invalid(format!("shap_fraction {} must lie in (0, 1]", self.shap_fraction)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(invalid(format!("tolerance {} must be >= 0", self.tolerance)));
        }
        if self.min_hidden == 0
            || self.shap_samples == 0
            || self.explain_inputs == 0
            || self.n_coalitions < 2
            || self.eval_samples < 2
        {
            return Err(invalid("compression sizes must be positive (n_coalitions and eval_samples ≥ 2)"));
        }
        Ok(())
    }
}

/// Embedding distributions with their class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddedSet<T> {
    pub embeddings: Vec<EmbeddingDistribution<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> EmbeddedSet<T> {
    pub fn new(embeddings: Vec<EmbeddingDistribution<T>>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(shape(format!("{} embeddings with {} labels", embeddings.len(), labels.len())));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, kept_dims: &[usize]) -> LabeledFeatures<T> {
        LabeledFeatures {
            features: self.embeddings.iter().map(|e| pair_features(e, kept_dims)).collect(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Every remaining feature cleared the SHAP threshold.
    AllFeaturesRetained,
    /// The retrained model fell outside the accuracy tolerance.
    AccuracyBelowTolerance,
    /// The threshold would have removed every feature.
    WouldDropAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionIteration {
    pub iteration: usize,
    pub kept_dims: Vec<usize>,
    pub hidden: [usize; 3],
    pub param_count: usize,
    pub val_accuracy: f64,
    /// Within tolerance of the baseline (always true for the baseline).
    pub accepted: bool,
    /// Mean |φ| of each kept dimension under this iteration's model; empty
    /// when the model was rejected before being explained.
    pub mean_abs_shap: Vec<f64>,
    pub shap_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub baseline_accuracy: f64,
    pub iterations: Vec<CompressionIteration>,
    pub stop_reason: StopReason,
    /// Index into `iterations` of the model returned by the loop.
    pub final_iteration: usize,
}

impl CompressionReport {
    pub fn final_state(&self) -> &CompressionIteration {
        &self.iterations[self.final_iteration]
    }

    /// `1 − final / baseline` parameter count.
    pub fn param_reduction(&self) -> f64 {
        1.0 - self.final_state().param_count as f64 / self.iterations[0].param_count as f64
    }
}

/// Scales each width by `new_inputs / old_inputs`, rounding and flooring at
/// `min_width`.
pub fn shrink_hidden(hidden: [usize; 3], old_inputs: usize, new_inputs: usize, min_width: usize) -> [usize; 3] {
    let ratio = new_inputs as f64 / old_inputs.max(1) as f64;
    hidden.map(|h| ((h as f64 * ratio).round() as usize).max(min_width))
}

fn evaluate<T: Scalar>(model: &FcBnnModel<T>, data: &LabeledFeatures<T>, samples: usize, seed: u64) -> Result<f64> {
    let preds = predict_batch(model, &data.features, samples, seed)?;
    Ok(accuracy(&preds.iter().map(|p| p.argmax()).collect::<Vec<_>>(), &data.labels))
}

fn mean_abs_shap<T: Scalar>(
    model: &FcBnnModel<T>,
    train: &EmbeddedSet<T>,
    validation: &EmbeddedSet<T>,
    policy: &CompressionPolicy,
    seed: u64,
) -> Result<Vec<f64>> {
    let background = vec![background_mean(&train.features(&model.kept_dims).features)?];
    let ensemble = FrozenEnsemble::new(model, policy.shap_samples, &mut rng::stream(seed, 0))?;
    let model_fn = |x: &[T]| ensemble.prob_mean(x);
    let groups = FeatureGroups::paired(model.kept_dims.iter().map(|d| format!("z{d}")).collect());
    let val = validation.features(&model.kept_dims).features;
    let n = policy.explain_inputs.min(val.len());
    let picks: Vec<usize> = (0..n).map(|i| i * val.len() / n).collect();
    let explanations = picks
        .par_iter()
        .map(|&i| {
            kernel_shap(
                &model_fn,
                &val[i],
                &background,
                &groups,
                policy.n_coalitions,
                &mut rng::stream(seed, 1 + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(global_shap_summary(&explanations)?.mean_abs_by_feature())
}

/// Repeatedly explains the classifier, drops latent dimensions with small
/// mean |φ|, shrinks the hidden layers and retrains, for as long as
/// validation accuracy stays within `policy.tolerance` of the baseline.
/// Returns the report and the last accepted model.
pub fn compress_loop<T: Scalar>(
    train: &EmbeddedSet<T>,
    validation: &EmbeddedSet<T>,
    baseline: &FcBnnModel<T>,
    bnn_config: &FcBnnConfig,
    policy: &CompressionPolicy,
    seed: u64,
) -> Result<(CompressionReport, FcBnnModel<T>)> {
    policy.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(invalid("compression needs non-empty training and validation sets"));
    }
    let eval_seed = seed ^ 0x5eed_0e7a;
    let baseline_accuracy =
        evaluate(baseline, &validation.features(&baseline.kept_dims), policy.eval_samples, eval_seed)?;
    let mut iterations = vec![CompressionIteration {
        iteration: 0,
        kept_dims: baseline.kept_dims.clone(),
        hidden: baseline.hidden(),
        param_count: fcbnn_param_count(&baseline.dims()),
        val_accuracy: baseline_accuracy,
        accepted: true,
        mean_abs_shap: Vec::new(),
        shap_threshold: None,
    }];
    let mut current = baseline.clone();
    let mut final_iteration = 0;

    let stop_reason = loop {
        let it = iterations.len();
        let importance = mean_abs_shap(&current, train, validation, policy, seed.wrapping_add(it as u64))?;
        let max = importance.iter().copied().fold(0.0, f64::max);
        let threshold = policy.shap_fraction * max;
        let last = iterations.last_mut().expect("baseline is recorded");
        last.mean_abs_shap = importance.clone();
        last.shap_threshold = Some(threshold);

        let kept: Vec<usize> =
            current.kept_dims.iter().zip(&importance).filter(|(_, &v)| v >= threshold).map(|(&d, _)| d).collect();
        if kept.is_empty() {
            break StopReason::WouldDropAll;
        }
        if kept.len() == current.kept_dims.len() {
            break StopReason::AllFeaturesRetained;
        }
        let hidden = shrink_hidden(current.hidden(), current.kept_dims.len(), kept.len(), policy.min_hidden);
        let cfg = FcBnnConfig { hidden, ..bnn_config.clone() };
        let retrained = train_fcbnn(
            current.latent_dim,
            &kept,
            current.num_classes,
            &train.features(&kept),
            &LabeledFeatures::default(),
            &cfg,
            seed.wrapping_add(1000 + it as u64),
        )?
        .model;
        let val_accuracy = evaluate(&retrained, &validation.features(&kept), policy.eval_samples, eval_seed)?;
        let accepted = val_accuracy >= baseline_accuracy - policy.tolerance;
        iterations.push(CompressionIteration {
            iteration: it,
            kept_dims: kept,
            hidden,
            param_count: fcbnn_param_count(&retrained.dims()),
            val_accuracy,
            accepted,
            mean_abs_shap: Vec::new(),
            shap_threshold: None,
        });
        if !accepted {
            break StopReason::AccuracyBelowTolerance;
        }
        current = retrained;
        final_iteration = it;
    };
    Ok((CompressionReport { baseline_accuracy, iterations, stop_reason, final_iteration }, current))
}
