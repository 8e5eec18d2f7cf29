//! Error types shared across the crate.
//!
//! Recoverable failures (ingestion, configuration, persistence) are `Result`s
//! with typed errors. Shape mismatches inside the numeric kernels are
//! programmer errors and panic with a descriptive message instead; every such
//! contract is called out in the corresponding rustdoc.

use std::path::PathBuf;
use thiserror::Error;

/// Failures while ingesting IDX-format dataset files.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated IDX file, needed {needed} bytes but only {found} available")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error(
        "image/label count mismatch: {images} images in {images_path} vs {labels} labels in {labels_path}"
    )]
    CountMismatch {
        images_path: PathBuf,
        images: usize,
        labels_path: PathBuf,
        labels: usize,
    },

    #[error("{path}: unsupported IDX geometry {rows}x{cols}, expected 28x28")]
    BadGeometry {
        path: PathBuf,
        rows: usize,
        cols: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Invalid experiment configurations, rejected before any training starts.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("fdr needs task boundaries and cannot run on the boundary-free mnist360 stream")]
    FdrOnMnist360,

    #[error("buffer capacity {0} is not one of the supported sizes {{200, 500, 1000, 5120}}")]
    UnsupportedBufferSize(usize),

    #[error("mnist360 supports buffer capacities {{200, 500, 1000}}, got {0}")]
    UnsupportedBufferSizeMnist360(usize),

    #[error("{method} does not use a replay buffer but buffer capacity {capacity} was configured")]
    BufferOnBufferless { method: String, capacity: usize },

    #[error("{method} requires a nonzero buffer capacity")]
    MissingBuffer { method: String },

    #[error("negative coefficient: {name} = {value}")]
    NegativeCoefficient { name: &'static str, value: f64 },

    #[error("learning rate must be positive, got {0}")]
    NonPositiveLr(f64),

    #[error("{name} must be positive, got {value}")]
    NonPositiveSize { name: &'static str, value: usize },

    #[error("unknown {what}: {value}")]
    UnknownName { what: &'static str, value: String },

    #[error("{method} trains offline over the task union; it is driven by the joint trainer, not the streaming loop")]
    OfflineMethod { method: String },

    #[error("mnist360 shows each training example exactly once; epochs_per_task must be 1, got {0}")]
    Mnist360SingleEpoch(usize),
}

/// Anything that can stop an experiment run.
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl RunError {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.into(),
            source,
        }
    }
}
