//! Saved pipeline state: everything on the predicted side needed to invert
//! further observed data sets without refitting.
//!
//! The file is a MessagePack map whose `format_version` field is checked
//! before the rest is decoded.

use std::path::Path;

use dci_core::clustering::ClusterModel;
use dci_core::densities::DensityEstimate;
use dci_core::inversion::InversionState;
use dci_core::kpca::QoiMap;
use dci_core::{FilteredEnsemble, Points};
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Slice};
use crate::error::PipelineError;
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistedState {
    pub format_version: u32,
    pub config: PipelineConfig,
    pub param_names: Vec<String>,
    pub params: Points,
    pub slice: Option<Slice>,
    /// Coordinates the data were filtered onto; `None` when raw data were
    /// used directly.
    pub filtered_coords: Option<Points>,
    pub predicted: Option<FilteredEnsemble>,
    pub clusters: Option<ClusterModel>,
    /// Per cluster; `None` means the filtered data are the QoI.
    pub maps: Vec<Option<QoiMap>>,
    /// Predicted QoI values per cluster, in member order.
    pub predicted_qoi: Vec<Points>,
    pub predicted_densities: Vec<DensityEstimate>,
    pub inversion: Option<InversionState>,
    pub iteration: Option<InversionState>,
}

#[derive(Deserialize)]
struct Header {
    format_version: u32,
}

impl PersistedState {
    pub fn new(config: PipelineConfig, param_names: Vec<String>, params: Points) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            param_names,
            params,
            slice: None,
            filtered_coords: None,
            predicted: None,
            clusters: None,
            maps: Vec::new(),
            predicted_qoi: Vec::new(),
            predicted_densities: Vec::new(),
            inversion: None,
            iteration: None,
        }
    }

    /// True when observed data can be inverted against this state.
    pub fn is_trained(&self) -> bool {
        let k = self.clusters.as_ref().map_or(0, |c| c.k);
        k > 0 && self.maps.len() == k && self.predicted_qoi.len() == k && self.predicted_densities.len() == k
    }

    /// The most refined weights available: iterated, else single-step.
    pub fn final_r(&self) -> Option<&[f64]> {
        self.iteration.as_ref().or(self.inversion.as_ref()).map(|s| s.r.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PipelineError> {
        rmp_serde::to_vec_named(self).map_err(|e| PipelineError::State(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let header: Header = rmp_serde::from_slice(bytes).map_err(|e| PipelineError::State(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(PipelineError::StateVersionMismatch { found: header.format_version, expected: FORMAT_VERSION });
        }
        rmp_serde::from_slice(bytes).map_err(|e| PipelineError::State(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
