//! IMU series and windows, preprocessing, synthetic data and dataset files.

mod filter;
mod io;
mod synthetic;

pub use filter::{
    apply_filter, design_butterworth, filter_channel, FilterCoefficients, BUTTERWORTH_ORDER, DEFAULT_CORNER_HZ,
};
pub use io::{
    read_binary_split, read_csv_split, read_dataset, read_manifest, write_binary_split, write_csv_split, write_dataset,
    DatasetFormat, Manifest,
};
pub use synthetic::{generate_synthetic, ClassSignal, SyntheticSpec};

use crate::error::{invalid, shape, HarError, Result};
use crate::Scalar;

/// 3 accelerometer + 3 gyroscope axes.
pub const CHANNELS: usize = 6;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 100.0;
pub const DEFAULT_WINDOW_LEN: usize = 128;
pub const DEFAULT_HOP: usize = 64;
/// Standard-deviation floor below which a channel is treated as constant.
pub const ZSCORE_EPS: f64 = 1e-9;

pub const ACTIVITY_NAMES: [&str; 8] = ["idle", "jump", "sit", "squat", "stairs", "stand", "walk", "kick"];

/// Continuous 6-channel recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSeries<T> {
    channels: Vec<Vec<T>>,
    sample_rate_hz: T,
}

impl<T: Scalar> ImuSeries<T> {
    pub fn new(channels: Vec<Vec<T>>, sample_rate_hz: T) -> Result<Self> {
        if channels.len() != CHANNELS {
            return Err(shape(format!("expected {CHANNELS} channels, got {}", channels.len())));
        }
        let len = channels[0].len();
        if len == 0 {
            return Err(invalid("series must contain at least one sample"));
        }
        if channels.iter().any(|c| c.len() != len) {
            return Err(shape("channels have different lengths"));
        }
        if !(sample_rate_hz > T::zero()) || !sample_rate_hz.is_finite() {
            return Err(invalid(format!("sample rate {sample_rate_hz} must be positive")));
        }
        let series = Self { channels, sample_rate_hz };
        if !series.is_finite() {
            return Err(HarError::NonFinite("imu series".into()));
        }
        Ok(series)
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.channels
    }

    pub fn sample_rate_hz(&self) -> T {
        self.sample_rate_hz
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.channels.iter().flatten().all(|v| v.is_finite())
    }

    /// Drops the first `n` samples.
    pub fn skip(&self, n: usize) -> Result<Self> {
        Self::new(self.channels.iter().map(|c| c[n.min(c.len())..].to_vec()).collect(), self.sample_rate_hz)
    }
}

/// Fixed-length segment, stored channel-major (`samples[c * len + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImuWindow<T> {
    pub id: u64,
    pub label: Option<usize>,
    /// Recording the window was cut from; the tracker restarts whenever it
    /// changes.
    pub session: u32,
    samples: Vec<T>,
}

impl<T: Scalar> ImuWindow<T> {
    pub fn new(id: u64, label: Option<usize>, session: u32, samples: Vec<T>) -> Result<Self> {
        if samples.is_empty() || !samples.len().is_multiple_of(CHANNELS) {
            return Err(shape(format!("{} samples is not a whole number of {CHANNELS}-channel frames", samples.len())));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(HarError::NonFinite(format!("window {id}")));
        }
        Ok(Self { id, label, session, samples })
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.samples.len() / CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let w = self.len();
        &self.samples[c * w..(c + 1) * w]
    }

    /// Flattened channel-major values; the encoder input.
    pub fn as_slice(&self) -> &[T] {
        &self.samples
    }

    pub fn with_samples(&self, samples: Vec<T>) -> Result<Self> {
        if samples.len() != self.samples.len() {
            return Err(shape("replacement samples change the window shape"));
        }
        Self::new(self.id, self.label, self.session, samples)
    }
}

/// Cuts `series` into windows of `length` samples every `hop` samples.
/// Returns an empty list when the series is shorter than one window.
pub fn window_stream<T: Scalar>(series: &ImuSeries<T>, length: usize, hop: usize) -> Result<Vec<ImuWindow<T>>> {
    if length == 0 || hop == 0 {
        return Err(invalid("window length and hop must be at least 1"));
    }
    let total = series.len();
    if length > total {
        return Ok(Vec::new());
    }
    let count = (total - length) / hop + 1;
    (0..count)
        .map(|i| {
            let start = i * hop;
            let samples = series.channels().iter().flat_map(|c| c[start..start + length].iter().copied()).collect();
            ImuWindow::new(i as u64, None, 0, samples)
        })
        .collect()
}

/// Per-channel `(x - mean) / std` with population std. Channels whose std is
/// below [`ZSCORE_EPS`] become all zeros.
pub fn zscore_normalize<T: Scalar>(window: &ImuWindow<T>) -> Result<ImuWindow<T>> {
    let w = window.len();
    if w < 2 {
        return Err(invalid("z-score needs at least two samples per channel"));
    }
    let n = T::from_usize_lossy(w);
    let eps = T::lit(ZSCORE_EPS);
    let mut out = Vec::with_capacity(window.as_slice().len());
    for c in 0..CHANNELS {
        let ch = window.channel(c);
        let mean = ch.iter().copied().sum::<T>() / n;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let std = var.sqrt();
        if std < eps {
            out.extend(std::iter::repeat_n(T::zero(), w));
        } else {
            out.extend(ch.iter().map(|&v| (v - mean) / std));
        }
    }
    window.with_samples(out)
}

/// Train / validation / test partitions of the known classes plus the
/// held-out class.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<ImuWindow<T>>,
    pub validation: Vec<ImuWindow<T>>,
    pub test: Vec<ImuWindow<T>>,
    pub unknown: Vec<ImuWindow<T>>,
    pub seed: u64,
    pub window_len: usize,
    pub sample_rate_hz: f64,
    /// Number of known classes; labels in train/validation/test are below it.
    pub num_classes: usize,
    /// Label carried by every window of the held-out class.
    pub unknown_label: Option<usize>,
}

impl<T: Scalar> DatasetSplit<T> {
    pub fn splits(&self) -> [(&'static str, &[ImuWindow<T>]); 4] {
        [("train", &self.train), ("validation", &self.validation), ("test", &self.test), ("unknown", &self.unknown)]
    }

    pub fn known_len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Splits a window sequence into runs of equal session id, preserving order.
pub fn sessions<T>(windows: &[ImuWindow<T>]) -> Vec<&[ImuWindow<T>]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=windows.len() {
        if i == windows.len() || windows[i].session != windows[start].session {
            if i > start {
                out.push(&windows[start..i]);
            }
            start = i;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_series(t: usize) -> ImuSeries<f64> {
        let channels = (0..CHANNELS).map(|c| (0..t).map(|i| (i * 10 + c) as f64).collect()).collect();
        ImuSeries::new(channels, 100.0).unwrap()
    }

    fn window_from_channels(chs: &[Vec<f64>]) -> ImuWindow<f64> {
        ImuWindow::new(0, None, 0, chs.concat()).unwrap()
    }

    #[test]
    fn window_counts_follow_formula() {
        let s = ramp_series(100);
        assert_eq!(window_stream(&s, 100, 1).unwrap().len(), 1);
        assert_eq!(window_stream(&s, 50, 25).unwrap().len(), 3);
        assert_eq!(window_stream(&s, 101, 1).unwrap().len(), 0);
        assert_eq!(window_stream(&s, 10, 7).unwrap().len(), (100 - 10) / 7 + 1);
    }

    #[test]
    fn windows_slice_at_hop_offsets() {
        let s = ramp_series(100);
        let ws = window_stream(&s, 50, 25).unwrap();
        for (i, w) in ws.iter().enumerate() {
            for c in 0..CHANNELS {
                assert_eq!(w.channel(c), &s.channels()[c][i * 25..i * 25 + 50]);
            }
        }
        // consecutive windows share exactly length - hop samples
        assert_eq!(&ws[0].channel(2)[25..], &ws[1].channel(2)[..25]);
    }

    #[test]
    fn zscore_hand_case_and_constant_channel() {
        let mut chs = vec![vec![5.0; 3]; CHANNELS];
        chs[0] = vec![1.0, 2.0, 3.0];
        let z = zscore_normalize(&window_from_channels(&chs)).unwrap();
        let s = (1.5f64).sqrt(); // 1 / sqrt(2/3)
        for (got, want) in z.channel(0).iter().zip([-s, 0.0, s]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((z.channel(0)[0] + 1.22474).abs() < 1e-5);
        assert!(z.channel(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zscore_moments_and_idempotence() {
        let chs: Vec<Vec<f64>> = (0..CHANNELS)
            .map(|c| (0..40).map(|t| ((t * (c + 3)) as f64 * 0.37).sin() * (c + 1) as f64 + c as f64).collect())
            .collect();
        let z = zscore_normalize(&window_from_channels(&chs)).unwrap();
        for c in 0..CHANNELS {
            let ch = z.channel(c);
            let mean = ch.iter().sum::<f64>() / 40.0;
            let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0).sqrt();
            assert!(mean.abs() < 1e-12);
            assert!((std - 1.0).abs() < 1e-9);
        }
        let zz = zscore_normalize(&z).unwrap();
        for (a, b) in z.as_slice().iter().zip(zz.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zscore_requires_two_samples() {
        let w = ImuWindow::new(0, None, 0, vec![1.0f64; CHANNELS]).unwrap();
        assert!(zscore_normalize(&w).is_err());
    }

    #[test]
    fn series_validation() {
        assert!(ImuSeries::new(vec![vec![0.0f64; 4]; 5], 100.0).is_err());
        assert!(ImuSeries::new(vec![vec![0.0f64; 0]; 6], 100.0).is_err());
        assert!(ImuSeries::new(vec![vec![0.0f64; 4]; 6], 0.0).is_err());
        let mut chs = vec![vec![0.0f64; 4]; 6];
        chs[3][1] = f64::NAN;
        assert!(matches!(ImuSeries::new(chs, 100.0), Err(HarError::NonFinite(_))));
    }

    #[test]
    fn sessions_group_contiguous_runs() {
        let mk = |s| ImuWindow::new(0, None, s, vec![0.0f64; 12]).unwrap();
        let ws = vec![mk(1), mk(1), mk(2), mk(1)];
        let runs = sessions(&ws);
        assert_eq!(runs.iter().map(|r| r.len()).collect::<Vec<_>>(), vec![2, 1, 1]);
    }
}
