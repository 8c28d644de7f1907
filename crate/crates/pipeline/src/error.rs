use std::path::PathBuf;

use dci_core::clustering::ClusterError;
use dci_core::densities::DensityError;
use dci_core::ensemble::EnsembleError;
use dci_core::filtering::FilterError;
use dci_core::inversion::InversionError;
use dci_core::iterative::IterativeError;
use dci_core::kpca::KpcaError;
use dci_core::sufficiency::SufficiencyError;
use dci_core::wave::WaveError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{path}: row {row} has {got} fields, expected {expected}")]
    RaggedRow { path: PathBuf, row: u64, expected: usize, got: usize },
    #[error("state file format {found}, this build reads {expected}")]
    StateVersionMismatch { found: u32, expected: u32 },
    #[error("unreadable state file: {0}")]
    State(String),
    #[error("cluster {cluster} received {observed} observation(s); its observed density needs at least 2")]
    SparseCluster { cluster: usize, observed: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: Box<PipelineError> },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Kpca(#[from] KpcaError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error(transparent)]
    Iterative(#[from] IterativeError),
    #[error(transparent)]
    Sufficiency(#[from] SufficiencyError),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Self::Stage { stage, source: Box::new(self) }
    }
}
