use std::path::{Path, PathBuf};

use har_core::bnn::FcBnnConfig;
use har_core::data::{
    ClassSignal, DatasetFormat, SyntheticSpec, DEFAULT_CORNER_HZ, DEFAULT_HOP, DEFAULT_SAMPLE_RATE_HZ,
    DEFAULT_WINDOW_LEN,
};
use har_core::encoder::{EncoderConfig, MetricMode};
use har_core::explain::CompressionPolicy;
use har_core::tracker::KalmanConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, CliResult};

pub const OUT_DIR_ENV: &str = "HAR_OUT_DIR";

/// Where the windows come from: an existing dataset directory, or the
/// bundled synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Read a dataset directory instead of generating one.
    pub path: Option<PathBuf>,
    pub storage: DatasetFormat,
    pub windows_per_class: usize,
    pub window_len: usize,
    pub hop: usize,
    pub sample_rate_hz: f64,
    pub corner_hz: f64,
    pub wander: f64,
    /// Replaces the built-in eight activities; the last class is held out.
    pub classes: Option<Vec<ClassSignal>>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            storage: DatasetFormat::Csv,
            windows_per_class: 200,
            window_len: DEFAULT_WINDOW_LEN,
            hop: DEFAULT_HOP,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            corner_hz: DEFAULT_CORNER_HZ,
            wander: 0.08,
            classes: None,
        }
    }
}

impl DatasetConfig {
    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        let mut spec = SyntheticSpec::eight_activities(self.windows_per_class, seed);
        if let Some(classes) = &self.classes {
            spec.classes = classes.clone();
        }
        spec.window_len = self.window_len;
        spec.hop = self.hop;
        spec.sample_rate_hz = self.sample_rate_hz;
        spec.corner_hz = self.corner_hz;
        spec.wander = self.wander;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Posterior draws per window.
    pub samples: usize,
    /// Also score the held-out class for OOD metrics.
    pub with_unknown: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { samples: har_core::bnn::DEFAULT_EVAL_SAMPLES, with_unknown: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Test windows explained (evenly spaced over the split).
    pub inputs: usize,
    pub n_coalitions: usize,
    /// Posterior draws behind the explained `prob_mean`.
    pub shap_samples: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { inputs: 100, n_coalitions: 512, shap_samples: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub tracker: KalmanConfig,
    #[serde(default)]
    pub bnn: FcBnnConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub compression: CompressionPolicy,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: default_out_dir(),
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            tracker: KalmanConfig::default(),
            bnn: FcBnnConfig::default(),
            evaluation: EvaluationConfig::default(),
            explain: ExplainConfig::default(),
            compression: CompressionPolicy::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub metric: Option<MetricMode>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(format!("reading config {}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Flags win over `HAR_OUT_DIR`, which wins over the file.
    pub fn apply(&mut self, overrides: &Overrides, env_out_dir: Option<PathBuf>) -> CliResult<()> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(metric) = overrides.metric {
            self.encoder.metric.mode = metric;
        }
        if let Some(dir) = overrides.out_dir.clone().or(env_out_dir) {
            self.out_dir = dir;
        }
        self.validate()
    }

    pub fn validate(&self) -> CliResult<()> {
        let wrap = |section: &str, r: har_core::Result<()>| r.map_err(|e| CliError::Config(format!("[{section}] {e}")));
        wrap("encoder", self.encoder.validate())?;
        wrap("tracker", self.tracker.validate())?;
        wrap("bnn", self.bnn.validate())?;
        wrap("compression", self.compression.validate())?;
        if self.dataset.path.is_none() {
            wrap("dataset", self.dataset.synthetic_spec(self.seed).validate())?;
        }
        if self.evaluation.samples < 2 {
            return Err(CliError::Config("[evaluation] samples must be >= 2".into()));
        }
        if self.explain.inputs == 0 || self.explain.n_coalitions < 2 || self.explain.shap_samples == 0 {
            return Err(CliError::Config(
                "[explain] inputs, shap_samples must be positive and n_coalitions >= 2".into(),
            ));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(CliError::Config("out_dir must not be empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded. Every field takes
    /// part, so any change to the config changes the hash.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml_str("seed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.encoder, EncoderConfig::default());
        assert_eq!(cfg.compression.shap_fraction, 0.2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(PipelineConfig::from_toml_str("seed = 1\nbogus = 2\n"), Err(CliError::Config(_))));
        assert!(PipelineConfig::from_toml_str("seed = 1\n[encoder]\nepoch = 3\n").is_err());
        assert!(PipelineConfig::from_toml_str("seed = 1\n[tracker]\nq = 3\n").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = PipelineConfig::from_toml_str("seed = 1\n[tracker]\ngate_prob = 1.5\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(PipelineConfig::from_toml_str("seed = 1\n[encoder.metric]\nmode = \"pentuplet\"\n").is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = PipelineConfig::default();
        let mut a = base.clone();
        a.tracker.process_noise_q = 2e-3;
        let mut b = base.clone();
        b.seed += 1;
        let mut c = base.clone();
        c.compression.tolerance = 0.03;
        let h = base.hash();
        assert_eq!(h, base.clone().hash());
        assert_eq!(h.len(), 64);
        for other in [a, b, c] {
            assert_ne!(h, other.hash());
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = PipelineConfig::default();
        let ov = Overrides { seed: Some(99), out_dir: Some("flag".into()), metric: Some(MetricMode::Quadruplet) };
        cfg.apply(&ov, Some("env".into())).unwrap();
        assert_eq!((cfg.seed, cfg.out_dir.to_str().unwrap()), (99, "flag"));
        assert_eq!(cfg.encoder.metric.mode, MetricMode::Quadruplet);
        let mut cfg = PipelineConfig::default();
        cfg.apply(&Overrides::default(), Some("env".into())).unwrap();
        assert_eq!(cfg.out_dir.to_str().unwrap(), "env");
    }
}
