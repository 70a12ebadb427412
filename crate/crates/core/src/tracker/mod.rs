//! Kalman filtering of embedding distributions.
//!
//! The encoder mean is the measurement and its variance the measurement
//! noise. The state follows a random walk (`F = I`, `Q = q·I`), the
//! measurement model is the identity, and each measurement is associated to
//! the single track only if its Mahalanobis distance passes a chi-square
//! gate.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::encoder::EmbeddingDistribution;
use crate::error::{invalid, shape, Result};
use crate::linalg::{Ldlt, Matrix};
use crate::Scalar;

/// Added to the innovation covariance when its plain factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanConfig {
    pub process_noise_q: f64,
    pub gate_prob: f64,
    pub init_variance: f64,
    pub max_misses: usize,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self { process_noise_q: 1e-3, gate_prob: 0.99, init_variance: 1.0, max_misses: 5 }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.process_noise_q >= 0.0 && self.process_noise_q.is_finite()) {
            return Err(invalid(format!("process noise {} must be non-negative", self.process_noise_q)));
        }
        if !(self.gate_prob > 0.0 && self.gate_prob < 1.0) {
            return Err(invalid(format!("gate probability {} must lie in (0, 1)", self.gate_prob)));
        }
        if !(self.init_variance > 0.0 && self.init_variance.is_finite()) {
            return Err(invalid(format!("initial variance {} must be positive", self.init_variance)));
        }
        if self.max_misses == 0 {
            return Err(invalid("max_misses must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState<T> {
    pub x: Vec<T>,
    pub p: Matrix<T>,
    pub age: usize,
    pub misses: usize,
}

impl<T: Scalar> TrackState<T> {
    pub fn new(x: Vec<T>, p: Matrix<T>) -> Result<Self> {
        if p.rows() != x.len() || p.cols() != x.len() {
            return Err(shape(format!("{}-dim state with {}x{} covariance", x.len(), p.rows(), p.cols())));
        }
        Ok(Self { x, p, age: 0, misses: 0 })
    }

    pub fn from_measurement(meas: &EmbeddingDistribution<T>, init_variance: T) -> Self {
        let d = meas.dim();
        Self { x: meas.mean.clone(), p: Matrix::from_diag(&vec![init_variance; d]), age: 0, misses: 0 }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// The emitted distribution `(x, diag(P))`.
    pub fn distribution(&self) -> Result<EmbeddingDistribution<T>> {
        EmbeddingDistribution::new(self.x.clone(), self.p.diag())
    }
}

/// `x` unchanged, `P ← P + q·I`.
pub fn predict<T: Scalar>(track: &TrackState<T>, config: &KalmanConfig) -> TrackState<T> {
    let mut next = track.clone();
    next.p.add_diag(T::lit(config.process_noise_q));
    next.p.symmetrize();
    next
}

fn innovation<T: Scalar>(track: &TrackState<T>, meas: &EmbeddingDistribution<T>) -> Result<(Ldlt<T>, Vec<T>)> {
    if meas.dim() != track.dim() {
        return Err(shape(format!("{}-dim measurement for a {}-dim track", meas.dim(), track.dim())));
    }
    let mut s = track.p.clone();
    for (i, &v) in meas.variance.iter().enumerate() {
        s[(i, i)] += v;
    }
    let chol = Ldlt::with_jitter(&s, T::lit(CHOLESKY_JITTER))?;
    let resid = meas.mean.iter().zip(&track.x).map(|(&z, &x)| z - x).collect();
    Ok((chol, resid))
}

/// `√((z − x)ᵀ S⁻¹ (z − x))` with `S = P + diag(variance)`, factored as
/// `L D Lᵀ`.
pub fn mahalanobis<T: Scalar>(track: &TrackState<T>, meas: &EmbeddingDistribution<T>) -> Result<T> {
    let (chol, resid) = innovation(track, meas)?;
    Ok(chol.quad_form(&resid).sqrt())
}

/// Chi-square quantile by the Wilson-Hilferty cube approximation
/// `k (1 − 2/(9k) + z √(2/(9k)))³`, `z` the standard normal quantile.
pub fn chi_square_quantile(prob: f64, dof: usize) -> f64 {
    let k = dof as f64;
    let z = Normal::standard().inverse_cdf(prob);
    let c = 2.0 / (9.0 * k);
    k * (1.0 - c + z * c.sqrt()).max(0.0).powi(3)
}

/// Accepts iff `distance² ≤ χ²_dof(gate_prob)`.
pub fn gate<T: Scalar>(distance: T, dim: usize, gate_prob: f64) -> bool {
    let d = distance.as_f64();
    d * d <= chi_square_quantile(gate_prob, dim)
}

/// Kalman update with `H = I`, `R = diag(variance)`.
pub fn update<T: Scalar>(track: &TrackState<T>, meas: &EmbeddingDistribution<T>) -> Result<TrackState<T>> {
    let (chol, resid) = innovation(track, meas)?;
    // K = P S⁻¹ = (S⁻¹ P)ᵀ since both are symmetric.
    let k = chol.solve_matrix(&track.p).transpose();
    let dx = k.matvec(&resid);
    let x = track.x.iter().zip(&dx).map(|(&a, &b)| a + b).collect();
    let kp = k.matmul(&track.p);
    let d = track.dim();
    let mut p = track.p.clone();
    for i in 0..d {
        for j in 0..d {
            p[(i, j)] -= kp[(i, j)];
        }
    }
    p.symmetrize();
    Ok(TrackState { x, p, age: track.age, misses: 0 })
}

/// One row of the per-step trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackStep {
    pub step: usize,
    pub accepted: bool,
    pub reinitialized: bool,
    pub mahalanobis: f64,
    pub trace_p: f64,
}

/// Single-track filter: initialized by the first measurement and
/// re-initialized after `max_misses` consecutive gate rejections.
#[derive(Debug, Clone)]
pub struct Tracker<T> {
    pub config: KalmanConfig,
    state: Option<TrackState<T>>,
    steps: usize,
}

impl<T: Scalar> Tracker<T> {
    pub fn new(config: KalmanConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state: None, steps: 0 })
    }

    pub fn state(&self) -> Option<&TrackState<T>> {
        self.state.as_ref()
    }

    pub fn reset(&mut self) {
        self.state = None;
    }

    pub fn step(&mut self, meas: &EmbeddingDistribution<T>) -> Result<(EmbeddingDistribution<T>, TrackStep)> {
        let step = self.steps;
        self.steps += 1;
        let init = T::lit(self.config.init_variance);
        let Some(current) = self.state.take() else {
            let fresh = TrackState::from_measurement(meas, init);
            let row = TrackStep {
                step,
                accepted: true,
                reinitialized: true,
                mahalanobis: 0.0,
                trace_p: fresh.p.trace().as_f64(),
            };
            let out = fresh.distribution()?;
            self.state = Some(fresh);
            return Ok((out, row));
        };

        let mut predicted = predict(&current, &self.config);
        predicted.age += 1;
        let dist = mahalanobis(&predicted, meas)?;
        let accepted = gate(dist, meas.dim(), self.config.gate_prob);
        let mut reinitialized = false;
        let next = if accepted {
            update(&predicted, meas)?
        } else if predicted.misses + 1 >= self.config.max_misses {
            reinitialized = true;
            TrackState::from_measurement(meas, init)
        } else {
            predicted.misses += 1;
            predicted
        };
        let row =
            TrackStep { step, accepted, reinitialized, mahalanobis: dist.as_f64(), trace_p: next.p.trace().as_f64() };
        let out = next.distribution()?;
        self.state = Some(next);
        Ok((out, row))
    }
}

/// Filters a stream from a fresh track; output length equals input length.
pub fn track_stream<T: Scalar>(
    embeddings: &[EmbeddingDistribution<T>],
    config: &KalmanConfig,
) -> Result<Vec<EmbeddingDistribution<T>>> {
    track_stream_with_trace(embeddings, config).map(|(out, _)| out)
}

pub fn track_stream_with_trace<T: Scalar>(
    embeddings: &[EmbeddingDistribution<T>],
    config: &KalmanConfig,
) -> Result<(Vec<EmbeddingDistribution<T>>, Vec<TrackStep>)> {
    let mut tracker = Tracker::new(*config)?;
    let mut out = Vec::with_capacity(embeddings.len());
    let mut rows = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        let (d, r) = tracker.step(e)?;
        out.push(d);
        rows.push(r);
    }
    Ok((out, rows))
}
