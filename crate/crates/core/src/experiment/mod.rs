//! Configuration, datasets, tracked training runs, implication suites and
//! file output.

mod config;
mod data;
mod output;
mod suites;
mod tracker;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{DatasetKind, DriftMode, ExperimentConfig, NoiseKind, SamplingMode};
pub use data::{
    load_mnist_idx, make_blobs, DataError, Dataset, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
    MNIST_CLASSES,
};
pub use output::{
    fmt_f64, layers_csv, manifest, network_csv, schema, trajectory_json, write_json, write_run,
    LAYER_COLUMNS, NETWORK_COLUMNS, VERSION,
};
pub use suites::{kaiming_edge_prediction, run_implication_suite, SuiteKind, SuiteSummary};
pub use tracker::{build_dataset, run_tracked_training, track_on, TrackedRun};

use crate::dynamics::DynamicsError;
use crate::mlp::MlpError;
use crate::noise::NoiseError;
use crate::spectral::SpectralError;

/// Coarse failure class, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("step {step}: {what}")]
    Numerical { step: u64, what: String },
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

impl ExperimentError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Self::Config(_) => ErrorCategory::Config,
            Self::Io { .. } | Self::Data(DataError::Io { .. }) => ErrorCategory::Io,
            Self::Data(_) => ErrorCategory::Data,
            Self::Mlp(
                MlpError::InputWidth { .. }
                | MlpError::LabelCount { .. }
                | MlpError::LabelOutOfRange { .. },
            ) => ErrorCategory::Data,
            Self::Mlp(MlpError::InvalidNoise(_)) => ErrorCategory::Config,
            _ => ErrorCategory::Numerical,
        }
    }
}
