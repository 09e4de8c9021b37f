//! Run-to-failure ingestion, labeling, windowing and few-shot subsampling.

mod cmapss;
mod fewshot;
mod labels;
mod norm;
mod prepared;
mod synthetic;
mod window;
mod xjtu;

use std::path::PathBuf;

pub use cmapss::{parse_cmapss, parse_cmapss_str, DEFAULT_SENSORS};
pub use fewshot::{fewshot_sample, FewShotConfig, SampleReport};
pub use labels::{detect_onset_rms3sigma, label_piecewise_linear, window_rms, OnsetConfig};
pub use norm::NormStats;
pub use prepared::{unit_labels, PrepareConfig, PreparedDataset, Provenance, StageCounts};
pub use synthetic::{gen_synthetic, SyntheticConfig};
pub use window::window_slide;
pub use xjtu::parse_xjtu;

use crate::autodiff::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{file}: {msg}")]
    File { file: PathBuf, msg: String },

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("onset detection needs at least {needed} baseline windows, got {got}")]
    InsufficientBaseline { got: usize, needed: usize },

    #[error("cannot fit normalization on an empty training set")]
    EmptyTrainingSet,

    #[error("invalid data configuration: {0}")]
    Invalid(String),

    #[error("prepared dataset is malformed: {0}")]
    Prepared(String),
}

/// One monitored device from first record to failure.
#[derive(Clone, Debug, PartialEq)]
pub struct RunToFailureUnit {
    pub unit_id: usize,
    /// Channel-major: `series[c][t]`.
    pub series: Vec<Vec<f64>>,
    /// First degraded time step, if known.
    pub onset_index: Option<usize>,
    pub condition: String,
}

impl RunToFailureUnit {
    pub fn n_channels(&self) -> usize {
        self.series.len()
    }

    pub fn len(&self) -> usize {
        self.series.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An `N×T` window labeled with the RUL at its last step.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Channel-major `N×T`.
    pub x: Vec<f64>,
    pub y: f64,
    pub unit_id: usize,
    pub end: usize,
}

/// Windows stacked for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub n_vars: usize,
    pub seq_len: usize,
    pub samples: Vec<WindowSample>,
}

impl WindowSet {
    pub fn new(n_vars: usize, seq_len: usize, samples: Vec<WindowSample>) -> Self {
        debug_assert!(samples.iter().all(|s| s.x.len() == n_vars * seq_len));
        Self {
            n_vars,
            seq_len,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self::new(self.n_vars, self.seq_len, idx.iter().map(|&i| self.samples[i].clone()).collect())
    }

    /// `[len(idx)×N×T]` inputs and their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * self.n_vars * self.seq_len);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&self.samples[i].x);
            y.push(self.samples[i].y);
        }
        let t = Tensor::new(vec![idx.len(), self.n_vars, self.seq_len], x).expect("window set shape");
        (t, y)
    }

    pub fn all(&self) -> (Tensor, Vec<f64>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}
