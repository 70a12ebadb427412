use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::FcBnnModel;
use crate::data::{sessions, ImuWindow};
use crate::encoder::{EmbeddingDistribution, EncoderModel};
use crate::error::{invalid, Result};
use crate::metrics::percentile;
use crate::nncore::Mlp;
use crate::rng::{self, HarRng};
use crate::tracker::{track_stream, KalmanConfig};
use crate::Scalar;

pub const DEFAULT_EVAL_SAMPLES: usize = 100;
/// Percentile of known-class validation scores used as the OOD threshold.
pub const OOD_PERCENTILE: f64 = 99.0;

/// Whether embeddings reach the classifier raw or through the tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameworkMode {
    Sota,
    Tracked,
}

impl FrameworkMode {
    pub const ALL: [FrameworkMode; 2] = [FrameworkMode::Sota, FrameworkMode::Tracked];

    pub fn as_str(self) -> &'static str {
        match self {
            FrameworkMode::Sota => "SOTA",
            FrameworkMode::Tracked => "tracked",
        }
    }

    pub fn tracker(self, config: &KalmanConfig) -> Option<&KalmanConfig> {
        match self {
            FrameworkMode::Sota => None,
            FrameworkMode::Tracked => Some(config),
        }
    }
}

impl std::fmt::Display for FrameworkMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Monte-Carlo posterior predictive for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveResult<T> {
    pub prob_mean: Vec<T>,
    /// Population standard deviation of each class probability across draws.
    pub prob_std: Vec<T>,
    /// Entropy of `prob_mean` in nats.
    pub entropy: T,
    pub samples_used: usize,
}

impl<T: Scalar> PredictiveResult<T> {
    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.prob_mean.iter().enumerate() {
            if p > self.prob_mean[best] {
                best = k;
            }
        }
        best
    }
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Averages the softmax over `samples` independent posterior draws.
pub fn predict<T: Scalar>(
    model: &FcBnnModel<T>,
    features: &[T],
    samples: usize,
    rng: &mut HarRng,
) -> Result<PredictiveResult<T>> {
    if samples < 2 {
        return Err(invalid(format!("predictive needs at least 2 posterior draws, got {samples}")));
    }
    let k = model.num_classes;
    let mut sum = vec![T::zero(); k];
    let mut sum_sq = vec![T::zero(); k];
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let net = model.sample_network(&model.draw_noise(rng))?;
        let p = softmax(&net.forward(features)?);
        for c in 0..k {
            sum[c] += p[c];
        }
        draws.push(p);
    }
    let n = T::from_usize_lossy(samples);
    let prob_mean: Vec<T> = sum.iter().map(|&s| s / n).collect();
    for p in &draws {
        for c in 0..k {
            let d = p[c] - prob_mean[c];
            sum_sq[c] += d * d;
        }
    }
    let prob_std = sum_sq.iter().map(|&s| (s / n).sqrt()).collect();
    let entropy = prob_mean.iter().filter(|&&p| p > T::zero()).map(|&p| -p * p.ln()).sum::<T>().max(T::zero());
    Ok(PredictiveResult { prob_mean, prob_std, entropy, samples_used: samples })
}

/// A fixed set of posterior draws. Its mean softmax is a deterministic
/// function of the input, which is what attribution needs.
#[derive(Debug, Clone)]
pub struct FrozenEnsemble<T> {
    nets: Vec<Mlp<T>>,
}

impl<T: Scalar> FrozenEnsemble<T> {
    pub fn new(model: &FcBnnModel<T>, samples: usize, rng: &mut HarRng) -> Result<Self> {
        if samples == 0 {
            return Err(invalid("ensemble needs at least one posterior draw"));
        }
        let nets = (0..samples).map(|_| model.sample_network(&model.draw_noise(rng))).collect::<Result<_>>()?;
        Ok(Self { nets })
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn prob_mean(&self, features: &[T]) -> Result<Vec<T>> {
        let mut acc: Vec<T> = Vec::new();
        for net in &self.nets {
            let p = softmax(&net.forward(features)?);
            if acc.is_empty() {
                acc = p;
            } else {
                acc.iter_mut().zip(&p).for_each(|(a, &b)| *a += b);
            }
        }
        let n = T::from_usize_lossy(self.nets.len());
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

/// Predicts every row independently; row `i` draws from stream `i` of `seed`.
pub fn predict_batch<T: Scalar>(
    model: &FcBnnModel<T>,
    features: &[Vec<T>],
    samples: usize,
    seed: u64,
) -> Result<Vec<PredictiveResult<T>>> {
    features.par_iter().enumerate().map(|(i, x)| predict(model, x, samples, &mut rng::stream(seed, i as u64))).collect()
}

/// Mean over classes of the predictive standard deviation.
pub fn ood_score<T: Scalar>(result: &PredictiveResult<T>) -> T {
    result.prob_std.iter().copied().sum::<T>() / T::from_usize_lossy(result.prob_std.len())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodDecision<T> {
    pub score: T,
    pub threshold: T,
    pub is_ood: bool,
}

impl<T: Scalar> OodDecision<T> {
    pub fn new(score: T, threshold: T) -> Self {
        Self { score, threshold, is_ood: score > threshold }
    }
}

/// 99th percentile of known-class validation scores.
pub fn calibrate_ood_threshold<T: Scalar>(validation_scores: &[T]) -> Result<T> {
    percentile(validation_scores, OOD_PERCENTILE).ok_or_else(|| invalid("no validation scores to calibrate on"))
}

/// Encodes windows and, when a tracker config is given, filters each session
/// with a fresh track. Output order follows `windows`.
pub fn embed_windows<T: Scalar>(
    encoder: &EncoderModel<T>,
    tracker: Option<&KalmanConfig>,
    windows: &[ImuWindow<T>],
) -> Result<Vec<EmbeddingDistribution<T>>> {
    let raw = windows.par_iter().map(|w| encoder.encode_window(w)).collect::<Result<Vec<_>>>()?;
    let Some(cfg) = tracker else { return Ok(raw) };
    let mut out = Vec::with_capacity(raw.len());
    let mut start = 0;
    for run in sessions(windows) {
        out.extend(track_stream(&raw[start..start + run.len()], cfg)?);
        start += run.len();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput<T> {
    pub window_id: u64,
    pub label: Option<usize>,
    pub result: PredictiveResult<T>,
    pub decision: OodDecision<T>,
}

/// Encoder → optional tracker → classifier for a window sequence. Window `w`
/// draws its posterior samples from stream `w.id` of `seed`, so both modes
/// see the same weight draws per window.
pub fn classify_pipeline<T: Scalar>(
    encoder: &EncoderModel<T>,
    tracker: Option<&KalmanConfig>,
    model: &FcBnnModel<T>,
    windows: &[ImuWindow<T>],
    samples: usize,
    threshold: T,
    seed: u64,
) -> Result<Vec<PipelineOutput<T>>> {
    let embeddings = embed_windows(encoder, tracker, windows)?;
    windows
        .par_iter()
        .zip(embeddings.par_iter())
        .map(|(w, e)| {
            let result = predict(model, &model.features(e)?, samples, &mut rng::stream(seed, w.id))?;
            let decision = OodDecision::new(ood_score(&result), threshold);
            Ok(PipelineOutput { window_id: w.id, label: w.label, result, decision })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{build_fcbnn, deterministic_logits};

    #[test]
    fn degenerate_posterior_matches_deterministic_network() {
        let mut r = rng::seeded(4);
        let model = build_fcbnn::<f64>(2, &[0, 1], 3, [5, 4, 3], 1.0, -60.0, &mut r).unwrap();
        let x = [0.4, -0.3, 0.1, 0.2];
        let res = predict(&model, &x, 20, &mut r).unwrap();
        assert!(res.prob_std.iter().all(|&s| s < 1e-12));
        assert!(ood_score(&res) < 1e-12);
        let det = softmax(&deterministic_logits(&model, &x).unwrap());
        for (a, b) in res.prob_mean.iter().zip(&det) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predictive_is_a_distribution() {
        let mut r = rng::seeded(5);
        let model = build_fcbnn::<f64>(3, &[0, 1, 2], 4, [6, 6, 6], 1.0, -1.0, &mut r).unwrap();
        let res = predict(&model, &[0.1, 0.9, -2.0, 0.3, 0.3, 0.3], 50, &mut r).unwrap();
        assert!((res.prob_mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(res.prob_std.iter().all(|&s| s >= 0.0));
        assert!(res.entropy >= 0.0 && res.entropy <= 4f64.ln() + 1e-12);
        assert_eq!(res.samples_used, 50);
        assert!(predict(&model, &[0.0; 6], 1, &mut r).is_err());
    }

    #[test]
    fn symmetric_model_predicts_even_odds() {
        let mut r = rng::seeded(6);
        let mut model = build_fcbnn::<f64>(2, &[0, 1], 2, [4, 4, 4], 1.0, 0.0, &mut r).unwrap();
        for l in &mut model.layers {
            l.weight_posterior.mu.iter_mut().for_each(|w| *w = 0.0);
            l.bias_posterior.mu.iter_mut().for_each(|b| *b = 0.0);
        }
        let t = 1000;
        let res = predict(&model, &[0.5, -0.5, 0.2, 0.2], t, &mut r).unwrap();
        let se = res.prob_std[0] / (t as f64).sqrt();
        assert!((res.prob_mean[0] - 0.5).abs() < 3.0 * se, "{:?} se {se}", res.prob_mean);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(calibrate_ood_threshold(&[0.0f64; 10]).unwrap(), 0.0);
        let v: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let t = calibrate_ood_threshold(&v).unwrap();
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(t >= lo && t <= hi);
        assert!(calibrate_ood_threshold::<f64>(&[]).is_err());
        let d = OodDecision::new(0.3, 0.2);
        assert!(d.is_ood);
        assert!(!OodDecision::new(0.2, 0.2).is_ood);
    }

    #[test]
    fn uniform_scores_threshold_near_top_of_range() {
        let mut r = rng::seeded(9);
        let v: Vec<f64> = (0..1000).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect();
        let t = calibrate_ood_threshold(&v).unwrap();
        // The 0.99 quantile of U(0,1) has standard error √(0.99·0.01/1000).
        assert!((t - 0.99).abs() < 4.0 * (0.99f64 * 0.01 / 1000.0).sqrt());
    }
}
