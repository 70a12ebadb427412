//! Synthetic IMU activity generator.
//!
//! Each class is a periodic motion: a fundamental with a few harmonics,
//! per-channel amplitudes and phases, slow frequency and amplitude wander,
//! sensor noise, plus gravity and a random-walk bias that the high-pass
//! stage has to remove. Each class is recorded as one continuous session which
//! is filtered, windowed, z-scored and cut into contiguous
//! train/validation/test runs.

use serde::{Deserialize, Serialize};

use crate::data::{
    apply_filter, design_butterworth, window_stream, zscore_normalize, DatasetSplit, ImuSeries, ImuWindow,
    ACTIVITY_NAMES, BUTTERWORTH_ORDER, CHANNELS, DEFAULT_CORNER_HZ, DEFAULT_HOP, DEFAULT_SAMPLE_RATE_HZ,
    DEFAULT_WINDOW_LEN,
};
use crate::error::{invalid, Result};
use crate::rng::{self, HarRng};
use crate::Scalar;
use rand::Rng;

pub const TRAIN_FRACTION: f64 = 0.52;
pub const VALIDATION_FRACTION: f64 = 0.23;
/// Filter settling time discarded before windowing.
const WARMUP_S: f64 = 20.0;
const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignal {
    pub name: String,
    pub frequency_hz: f64,
    /// Per-channel amplitude (accel x/y/z in m/s², gyro x/y/z in rad/s).
    pub amplitude: [f64; CHANNELS],
    /// Relative weights of the fundamental and its harmonics.
    pub harmonics: Vec<f64>,
    #[serde(default)]
    pub phase_rad: [f64; CHANNELS],
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSignal>,
    /// Hold the last class out of training entirely (the unknown activity).
    #[serde(default = "default_true")]
    pub hold_out_last: bool,
    #[serde(default = "default_window_len")]
    pub window_len: usize,
    #[serde(default = "default_hop")]
    pub hop: usize,
    pub windows_per_class: usize,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_corner")]
    pub corner_hz: f64,
    /// Relative depth of the slow frequency and amplitude wander.
    #[serde(default = "default_wander")]
    pub wander: f64,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}
fn default_window_len() -> usize {
    DEFAULT_WINDOW_LEN
}
fn default_hop() -> usize {
    DEFAULT_HOP
}
fn default_rate() -> f64 {
    DEFAULT_SAMPLE_RATE_HZ
}
fn default_corner() -> f64 {
    DEFAULT_CORNER_HZ
}
fn default_wander() -> f64 {
    0.08
}

fn class(
    name: &str,
    f: f64,
    amplitude: [f64; 6],
    harmonics: &[f64],
    phase_rad: [f64; 6],
    noise_std: f64,
) -> ClassSignal {
    ClassSignal {
        name: name.to_string(),
        frequency_hz: f,
        amplitude,
        harmonics: harmonics.to_vec(),
        phase_rad,
        noise_std,
    }
}

impl SyntheticSpec {
    /// Seven everyday activities plus a held-out "kick". Kick shares jump's
    /// axis amplitudes and sits near its frequency but has its own harmonic
    /// mix and inter-axis phases, so it resembles jump without coinciding.
    pub fn eight_activities(windows_per_class: usize, seed: u64) -> Self {
        let n = 0.25;
        let classes = vec![
            class(ACTIVITY_NAMES[0], 0.9, [0.05; 6], &[1.0], [0.0; 6], n),
            class(
                ACTIVITY_NAMES[1],
                1.8,
                [0.6, 0.5, 4.0, 0.4, 1.2, 0.3],
                &[1.0, 0.5, 0.25],
                [0.0, 0.4, 0.0, 1.2, 0.8, 2.0],
                n,
            ),
            class(ACTIVITY_NAMES[2], 0.5, [0.8, 0.6, 0.3, 0.1, 0.6, 0.1], &[1.0], [0.0, 1.5, 3.0, 0.0, 1.5, 3.0], n),
            class(
                ACTIVITY_NAMES[3],
                1.0,
                [0.3, 0.3, 2.0, 0.1, 1.6, 0.1],
                &[1.0, 0.2],
                [0.0, 0.0, 0.0, 1.57, 1.57, 0.0],
                n,
            ),
            class(
                ACTIVITY_NAMES[4],
                1.3,
                [1.2, 0.6, 2.5, 0.8, 0.6, 0.4],
                &[1.0, 0.3, 0.5],
                [0.0, 2.0, 0.5, 1.0, 3.0, 0.2],
                n,
            ),
            class(ACTIVITY_NAMES[5], 3.2, [0.5, 0.5, 0.4, 0.3, 0.3, 0.3], &[1.0], [0.0, 0.7, 1.4, 2.1, 2.8, 3.5], n),
            class(
                ACTIVITY_NAMES[6],
                2.3,
                [1.5, 0.8, 2.0, 0.6, 0.4, 0.9],
                &[1.0, 0.6, 0.1],
                [0.0, 1.0, 0.3, 2.2, 0.6, 1.7],
                n,
            ),
            class(
                ACTIVITY_NAMES[7],
                1.55,
                [0.9, 0.5, 3.5, 0.6, 1.2, 0.5],
                &[1.0, 0.15, 0.5],
                [1.2, 1.2, 0.0, 2.2, 1.6, 1.4],
                n,
            ),
        ];
        Self {
            classes,
            hold_out_last: true,
            window_len: DEFAULT_WINDOW_LEN,
            hop: DEFAULT_HOP,
            windows_per_class,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            corner_hz: DEFAULT_CORNER_HZ,
            wander: default_wander(),
            seed,
        }
    }

    pub fn num_known_classes(&self) -> usize {
        self.classes.len() - usize::from(self.hold_out_last)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if self.num_known_classes() < 2 {
            return Err(invalid(format!("need at least 2 known classes, got {}", self.num_known_classes())));
        }
        if self.window_len < 2 || self.hop == 0 {
            return Err(invalid("window_len must be >= 2 and hop >= 1"));
        }
        if self.windows_per_class < 4 {
            return Err(invalid("windows_per_class must be >= 4 so every split is populated"));
        }
        if !(self.sample_rate_hz > 0.0) || !(self.corner_hz > 0.0 && self.corner_hz < self.sample_rate_hz / 2.0) {
            return Err(invalid("need sample_rate_hz > 0 and 0 < corner_hz < sample_rate_hz / 2"));
        }
        if !(0.0..0.5).contains(&self.wander) {
            return Err(invalid("wander must lie in [0, 0.5)"));
        }
        for c in &self.classes {
            if !(c.noise_std >= 0.0) || !c.noise_std.is_finite() {
                return Err(invalid(format!("class {}: noise_std must be finite and >= 0", c.name)));
            }
            if !(c.frequency_hz > 0.0 && c.frequency_hz < self.sample_rate_hz / 2.0) {
                return Err(invalid(format!("class {}: frequency must lie below Nyquist", c.name)));
            }
            if c.harmonics.is_empty() || c.amplitude.iter().chain(&c.phase_rad).any(|v| !v.is_finite()) {
                return Err(invalid(format!("class {}: needs finite amplitudes and >= 1 harmonic weight", c.name)));
            }
        }
        for i in 0..k {
            for j in (i + 1)..k {
                let (a, b) = (&self.classes[i], &self.classes[j]);
                if a.frequency_hz == b.frequency_hz && a.amplitude == b.amplitude {
                    return Err(invalid(format!("classes {} and {} share frequency and amplitude", a.name, b.name)));
                }
            }
        }
        Ok(())
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::eight_activities(200, 7)
    }
}

fn record_class<T: Scalar>(spec: &SyntheticSpec, signal: &ClassSignal, rng: &mut HarRng) -> Result<ImuSeries<T>> {
    let fs = spec.sample_rate_hz;
    let warmup = (WARMUP_S * fs).round() as usize;
    let len = warmup + spec.window_len + (spec.windows_per_class - 1) * spec.hop;
    let two_pi = 2.0 * std::f64::consts::PI;

    let fm_period = rng.random_range(8.0..16.0);
    let am_period = rng.random_range(5.0..11.0);
    let am_phase = rng.random_range(0.0..two_pi);
    let start_phase = rng.random_range(0.0..two_pi);
    let mut bias = [0.0f64; CHANNELS];
    let mut phase = start_phase;

    let mut channels: Vec<Vec<T>> = (0..CHANNELS).map(|_| Vec::with_capacity(len)).collect();
    for t in 0..len {
        let time = t as f64 / fs;
        let freq = signal.frequency_hz * (1.0 + 0.5 * spec.wander * (two_pi * time / fm_period).sin());
        phase += two_pi * freq / fs;
        let envelope = 1.0 + spec.wander * 2.0 * (two_pi * time / am_period + am_phase).sin();
        for (c, ch) in channels.iter_mut().enumerate() {
            let periodic: f64 = signal
                .harmonics
                .iter()
                .enumerate()
                .map(|(h, &w)| w * ((h + 1) as f64 * (phase + signal.phase_rad[c])).sin())
                .sum();
            bias[c] += 0.002 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let offset = if c == 2 { GRAVITY } else { 0.0 };
            let noise = signal.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            ch.push(T::lit(offset + bias[c] + envelope * signal.amplitude[c] * periodic + noise));
        }
    }
    ImuSeries::new(channels, T::lit(fs))
}

/// Generates, preprocesses and splits the synthetic dataset. Pure function of
/// `spec` (including its seed).
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<DatasetSplit<T>> {
    spec.validate()?;
    let coeffs = design_butterworth(BUTTERWORTH_ORDER, T::lit(spec.corner_hz), T::lit(spec.sample_rate_hz))?;
    let warmup = (WARMUP_S * spec.sample_rate_hz).round() as usize;
    let known = spec.num_known_classes();

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        unknown: Vec::new(),
        seed: spec.seed,
        window_len: spec.window_len,
        sample_rate_hz: spec.sample_rate_hz,
        num_classes: known,
        unknown_label: spec.hold_out_last.then_some(known),
    };

    let n = spec.windows_per_class;
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let n_val = ((n as f64) * VALIDATION_FRACTION).round() as usize;

    for (label, signal) in spec.classes.iter().enumerate() {
        let mut rng = rng::stream(spec.seed, label as u64);
        let raw = record_class::<T>(spec, signal, &mut rng)?;
        let filtered = apply_filter(&coeffs, &raw)?.skip(warmup)?;
        let windows = window_stream(&filtered, spec.window_len, spec.hop)?;
        debug_assert_eq!(windows.len(), n);
        let base_session = (label * 4) as u32;
        for (i, w) in windows.iter().enumerate() {
            let z = zscore_normalize(w)?;
            let (dest, part) = if label >= known {
                (&mut split.unknown, 3)
            } else if i < n_train {
                (&mut split.train, 0)
            } else if i < n_train + n_val {
                (&mut split.validation, 1)
            } else {
                (&mut split.test, 2)
            };
            let id = (label * n + i) as u64;
            dest.push(ImuWindow::new(id, Some(label), base_session + part, z.as_slice().to_vec())?);
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sq_dist;

    fn small(seed: u64) -> SyntheticSpec {
        let mut s = SyntheticSpec::eight_activities(20, seed);
        s.window_len = 64;
        s.hop = 32;
        s
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic::<f64>(&small(3)).unwrap();
        let b = generate_synthetic::<f64>(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic::<f64>(&small(4)).unwrap();
        assert_ne!(a.train[0], c.train[0]);
    }

    #[test]
    fn window_conservation_and_split_disjointness() {
        let mut spec = small(1);
        spec.windows_per_class = 100;
        let d = generate_synthetic::<f64>(&spec).unwrap();
        assert_eq!(d.known_len(), 700);
        assert_eq!(d.unknown.len(), 100);
        assert!(d.unknown.iter().all(|w| w.label == Some(7)));
        assert!(d.train.iter().chain(&d.validation).chain(&d.test).all(|w| w.label.unwrap() < 7));
        let mut ids: Vec<u64> = d.splits().iter().flat_map(|(_, s)| s.iter().map(|w| w.id)).collect();
        let total = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), total);
        assert_eq!(d.train.len(), 7 * 52);
        assert_eq!(d.validation.len(), 7 * 23);
    }

    #[test]
    fn noiseless_disjoint_classes_are_one_nn_separable() {
        let mut spec = small(11);
        spec.classes.truncate(2);
        spec.classes[0].frequency_hz = 1.0;
        spec.classes[1].frequency_hz = 4.0;
        for c in &mut spec.classes {
            c.noise_std = 0.0;
        }
        spec.hold_out_last = false;
        spec.windows_per_class = 60;
        let d = generate_synthetic::<f64>(&spec).unwrap();
        let correct = d
            .test
            .iter()
            .filter(|q| {
                let nn = d
                    .train
                    .iter()
                    .min_by(|a, b| {
                        sq_dist(a.as_slice(), q.as_slice()).partial_cmp(&sq_dist(b.as_slice(), q.as_slice())).unwrap()
                    })
                    .unwrap();
                nn.label == q.label
            })
            .count();
        assert_eq!(correct, d.test.len());
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = small(0);
        s.classes[1].noise_std = -1.0;
        assert!(s.validate().is_err());
        let mut s = small(0);
        s.classes[2] = s.classes[1].clone();
        assert!(s.validate().is_err());
        let mut s = small(0);
        s.classes.truncate(2);
        assert!(s.validate().is_err());
    }
}
