//! Attribution, class similarity and SHAP-driven compression of the
//! classifier.

mod compress;
mod shap;

pub use compress::{
    compress_loop, shrink_hidden, CompressionIteration, CompressionPolicy, CompressionReport, EmbeddedSet, StopReason,
};
pub use shap::{
    background_mean, exact_shapley, exhaustive_coalitions, kernel_shap, sampled_coalitions, FeatureGroups,
    EXACT_MAX_PLAYERS, EXHAUSTIVE_LIMIT,
};

use serde::{Deserialize, Serialize};

use crate::bnn::FrameworkMode;
use crate::error::{invalid, shape, Result};
use crate::Scalar;

/// Per-class attributions of one model output.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapExplanation<T> {
    /// Model output at the background reference, per class.
    pub base_value: Vec<T>,
    /// `phi[i][k]`: contribution of feature `i` to class `k`.
    pub phi: Vec<Vec<T>>,
    /// Model output at the explained input.
    pub output: Vec<T>,
    /// Input value of each feature (the first member for grouped features).
    pub feature_values: Vec<T>,
    pub feature_names: Vec<String>,
}

impl<T: Scalar> ShapExplanation<T> {
    pub fn num_features(&self) -> usize {
        self.phi.len()
    }

    pub fn num_classes(&self) -> usize {
        self.base_value.len()
    }

    /// Largest `|Σᵢ φᵢₖ − (f_k(x) − base_k)|` over classes.
    pub fn efficiency_gap(&self) -> T {
        (0..self.num_classes())
            .map(|k| {
                let s: T = self.phi.iter().map(|row| row[k]).sum();
                (s - (self.output[k] - self.base_value[k])).abs()
            })
            .fold(T::zero(), T::max)
    }

    /// Class with the largest output; ties go to the lowest index.
    pub fn top_class(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.output.iter().enumerate() {
            if v > self.output[best] {
                best = k;
            }
        }
        best
    }
}

/// A coalition of present features and its regression weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionSample {
    pub mask: Vec<bool>,
    pub weight: f64,
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel `(M − 1) / (C(M, s) · s · (M − s))` for `0 < s < M`.
/// The empty and full coalitions have infinite weight and are handled as
/// constraints instead.
pub fn shapley_kernel_weight(m: usize, s: usize) -> Result<f64> {
    if s == 0 || s >= m {
        return Err(invalid(format!("coalition size {s} of {m} is a constraint, not a weighted sample")));
    }
    Ok((m - 1) as f64 / (binomial(m, s) * (s * (m - s)) as f64))
}

/// Pearson correlation. Errors when either input is constant.
pub fn pearson<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(shape(format!("pearson of lengths {} and {}", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(invalid("pearson needs at least 2 points"));
    }
    let n = T::from_usize_lossy(u.len());
    let mu = u.iter().copied().sum::<T>() / n;
    let mv = v.iter().copied().sum::<T>() / n;
    let (mut suv, mut suu, mut svv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if !(suu > T::zero()) || !(svv > T::zero()) {
        return Err(invalid("pearson of a constant vector is undefined"));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt())).max(-T::one()).min(T::one()))
}

/// Componentwise mean of the vectors carrying each label `0..num_classes`.
pub fn class_means<T: Scalar>(vectors: &[Vec<T>], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<T>>> {
    if vectors.len() != labels.len() {
        return Err(shape(format!("{} vectors with {} labels", vectors.len(), labels.len())));
    }
    let d = vectors.first().map_or(0, Vec::len);
    let mut sums = vec![vec![T::zero(); d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (v, &l) in vectors.iter().zip(labels) {
        if l >= num_classes || v.len() != d {
            return Err(shape(format!("label {l} or vector length {} out of range", v.len())));
        }
        for (s, &x) in sums[l].iter_mut().zip(v) {
            *s += x;
        }
        counts[l] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(k, (s, c))| {
            if c == 0 {
                return Err(invalid(format!("class {k} has no samples")));
            }
            let n = T::from_usize_lossy(c);
            Ok(s.into_iter().map(|x| x / n).collect())
        })
        .collect()
}

/// Correlation of the unknown-class mean embedding with each known-class
/// mean embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub mode: FrameworkMode,
    pub r: Vec<f64>,
}

impl SimilarityMatrix {
    /// Most similar known class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.r.iter().enumerate() {
            if v > self.r[best] {
                best = k;
            }
        }
        best
    }
}

pub fn class_similarity<T: Scalar>(
    known_means: &[Vec<T>],
    unknown_mean: &[T],
    mode: FrameworkMode,
) -> Result<SimilarityMatrix> {
    let r = known_means.iter().map(|m| pearson(m, unknown_mean).map(T::as_f64)).collect::<Result<Vec<_>>>()?;
    Ok(SimilarityMatrix { mode, r })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: usize,
    pub name: String,
    pub mean_abs_phi: f64,
}

/// One dot of a beeswarm plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeeswarmPoint {
    pub input: usize,
    pub feature: usize,
    pub class: usize,
    pub value: f64,
    pub phi: f64,
}

/// Force-plot data for the top class of one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceRow {
    pub input: usize,
    pub class: usize,
    pub base_value: f64,
    pub contributions: Vec<f64>,
    pub output: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    /// Features by decreasing mean |φ| (averaged over inputs and classes);
    /// ties keep feature order.
    pub ranking: Vec<FeatureImportance>,
    pub beeswarm: Vec<BeeswarmPoint>,
    pub force: Vec<ForceRow>,
}

impl ShapSummary {
    /// Mean |φ| indexed by feature.
    pub fn mean_abs_by_feature(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.ranking.len()];
        for f in &self.ranking {
            v[f.feature] = f.mean_abs_phi;
        }
        v
    }
}

pub fn global_shap_summary<T: Scalar>(explanations: &[ShapExplanation<T>]) -> Result<ShapSummary> {
    let first = explanations.first().ok_or_else(|| invalid("no explanations to summarize"))?;
    let (m, k) = (first.num_features(), first.num_classes());
    let mut totals = vec![0.0f64; m];
    let mut beeswarm = Vec::with_capacity(explanations.len() * m * k);
    let mut force = Vec::with_capacity(explanations.len());
    for (n, e) in explanations.iter().enumerate() {
        if e.num_features() != m || e.num_classes() != k {
            return Err(shape("explanations disagree on feature or class count"));
        }
        for (i, row) in e.phi.iter().enumerate() {
            for (c, &p) in row.iter().enumerate() {
                totals[i] += p.as_f64().abs();
                beeswarm.push(BeeswarmPoint {
                    input: n,
                    feature: i,
                    class: c,
                    value: e.feature_values[i].as_f64(),
                    phi: p.as_f64(),
                });
            }
        }
        let top = e.top_class();
        force.push(ForceRow {
            input: n,
            class: top,
            base_value: e.base_value[top].as_f64(),
            contributions: e.phi.iter().map(|row| row[top].as_f64()).collect(),
            output: e.output[top].as_f64(),
        });
    }
    let denom = (explanations.len() * k) as f64;
    let mut ranking: Vec<FeatureImportance> = totals
        .iter()
        .enumerate()
        .map(|(i, &t)| FeatureImportance { feature: i, name: first.feature_names[i].clone(), mean_abs_phi: t / denom })
        .collect();
    ranking.sort_by(|a, b| b.mean_abs_phi.total_cmp(&a.mean_abs_phi));
    Ok(ShapSummary { ranking, beeswarm, force })
}

#[cfg(test)]
mod tests;
