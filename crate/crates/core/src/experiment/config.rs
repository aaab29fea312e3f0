use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::mlp::{Loss, MlpSpec, NoiseMode, SupervisionNoise};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Mnist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Gaussian,
    Uniform,
    ZeroMix,
}

/// Which gradient stands in for the population gradient in the drift `μ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// Full dataset up to `full_drift_limit` samples, mini-batch mean beyond.
    Auto,
    Full,
    Batch,
}

/// How mini-batches are drawn from the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Reshuffle once per epoch and take consecutive slices.
    Epoch,
    /// Fresh uniform subset every step, independent across steps.
    Iid,
}

/// Flat run configuration. Every key has a default; files only list the
/// keys they change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub spread: f64,
    /// Directory holding `train-images-idx3-ubyte` and `train-labels-idx1-ubyte`.
    pub mnist_dir: String,
    /// First `mnist_subset` samples; 0 keeps all.
    pub mnist_subset: usize,

    /// Hidden widths; input and output widths come from the dataset.
    pub hidden: Vec<usize>,
    pub loss: Loss,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Stop early once the full-data loss falls below this; 0 disables.
    pub stop_loss: f64,
    pub sampling: SamplingMode,

    pub data_seed: u64,
    pub init_seed: u64,
    pub sampling_seed: u64,
    pub noise_seed: u64,

    pub noise_mode: NoiseKind,
    /// Standard deviation (gaussian) or half width (uniform).
    pub noise_scale: f64,
    pub rho: f64,
    pub label_eps: f64,

    /// Re-estimate the noise terms every this many steps.
    pub noise_stride: u64,
    /// Record every this many steps; 0 picks 1 up to 5000 steps, else 10.
    pub record_stride: u64,
    pub drift: DriftMode,
    pub full_drift_limit: usize,

    pub output_dir: String,

    pub rho_grid: Vec<f64>,
    pub eps_grid: Vec<f64>,
    pub batch_grid: Vec<usize>,
    pub seed_grid: Vec<u64>,
    /// Number of independent initializations in the init-law suite.
    pub init_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Blobs,
            n_samples: 4000,
            n_features: 20,
            n_classes: 4,
            spread: 0.5,
            mnist_dir: "data/mnist".into(),
            mnist_subset: 0,
            hidden: vec![512, 256],
            loss: Loss::CrossEntropy,
            eta: 0.01,
            batch_size: 128,
            steps: 2000,
            stop_loss: 0.0,
            sampling: SamplingMode::Epoch,
            data_seed: 0,
            init_seed: 1,
            sampling_seed: 2,
            noise_seed: 3,
            noise_mode: NoiseKind::None,
            noise_scale: 0.5,
            rho: 1.0,
            label_eps: 0.0,
            noise_stride: 1,
            record_stride: 0,
            drift: DriftMode::Auto,
            full_drift_limit: 20_000,
            output_dir: "runs".into(),
            rho_grid: vec![1.0, 0.6, 0.3, 0.1],
            eps_grid: vec![0.0, 0.25, 0.5, 0.75],
            batch_grid: vec![32, 64, 128, 256],
            seed_grid: vec![1, 2, 3],
            init_trials: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; values use TOML syntax, with bare
    /// words read as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ExperimentError> {
        let mut table =
            toml::Table::try_from(self).map_err(|e| ExperimentError::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw.split_once('=').ok_or_else(|| {
                ExperimentError::Config(format!("override '{raw}' is not key=value"))
            })?;
            let key = key.trim();
            if !table.contains_key(key) {
                return Err(ExperimentError::Config(format!("unknown key '{key}'")));
            }
            table.insert(key.to_string(), parse_value(value.trim()));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |msg: String| Err(ExperimentError::Config(msg));
        if self.steps < 1 {
            return fail("steps must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if self.noise_stride < 1 {
            return fail("noise_stride must be at least 1".into());
        }
        if self.dataset == DatasetKind::Blobs {
            if self.n_classes < 2 {
                return fail("blobs need at least 2 classes".into());
            }
            if self.n_features < 1 || self.n_samples < self.batch_size {
                return fail(format!(
                    "blobs need n_features >= 1 and n_samples >= batch_size ({} < {})",
                    self.n_samples, self.batch_size
                ));
            }
            if !(self.spread >= 0.0 && self.spread.is_finite()) {
                return fail(format!("spread must be nonnegative, got {}", self.spread));
            }
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        if !(self.stop_loss >= 0.0) {
            return fail(format!(
                "stop_loss must be nonnegative, got {}",
                self.stop_loss
            ));
        }
        self.supervision_noise()
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn supervision_noise(&self) -> SupervisionNoise {
        let mode = match self.noise_mode {
            NoiseKind::None => NoiseMode::None,
            NoiseKind::Gaussian => NoiseMode::Gaussian {
                std: self.noise_scale,
            },
            NoiseKind::Uniform => NoiseMode::Uniform {
                half_width: self.noise_scale,
            },
            NoiseKind::ZeroMix => NoiseMode::ZeroMix,
        };
        SupervisionNoise {
            mode,
            rho: self.rho,
            label_corruption_eps: self.label_eps,
        }
    }

    /// Network for inputs of width `input` and `classes` outputs.
    pub fn network(&self, input: usize, classes: usize) -> Result<MlpSpec, ExperimentError> {
        let mut widths = vec![input];
        widths.extend(&self.hidden);
        widths.push(classes);
        MlpSpec::from_widths(&widths).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn effective_record_stride(&self) -> u64 {
        match self.record_stride {
            0 if self.steps <= 5000 => 1,
            0 => 10,
            s => s,
        }
    }

    /// Same configuration with every seed except the data seed set to `seed`.
    pub fn with_run_seed(&self, seed: u64) -> Self {
        Self {
            init_seed: seed,
            sampling_seed: seed,
            noise_seed: seed,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir.clear();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}
