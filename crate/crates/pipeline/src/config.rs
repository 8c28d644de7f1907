//! Run configuration, read from TOML.
//!
//! Every field has a default; the defaults describe the iterated wave run on
//! the 9 x 9 sensor grid (`t = 2.5, 3.0, ..., 7.0`, RBF filtering onto a
//! 49 x 49 grid, linear-kernel kPCA with `q = 2`, `tol = 0.095`, significance
//! check on). Relative paths are resolved against the config file's
//! directory.

use std::path::{Path, PathBuf};

use dci_core::clustering::{SvmSettings, ThresholdRule};
use dci_core::densities::BandwidthRule;
use dci_core::filtering::FilterMethod;
use dci_core::kpca::KernelSpec;
use dci_core::wave::{NoiseModel, WaveConfig};
use dci_core::Points;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::PipelineError;
use crate::io::Layout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Base seed; every random stream is derived from it.
    pub seed: u64,
    pub stages: Stages,
    pub data: DataPaths,
    pub filter: FilterSection,
    pub cluster: ClusterSection,
    pub learn: LearnSection,
    pub invert: InvertSection,
    pub iterate: IterateSection,
    pub output: OutputSection,
    pub simulate: SimulateSection,
    pub sufficiency: SufficiencySection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            stages: Stages::default(),
            data: DataPaths::default(),
            filter: FilterSection::default(),
            cluster: ClusterSection::default(),
            learn: LearnSection::default(),
            invert: InvertSection::default(),
            iterate: IterateSection::default(),
            output: OutputSection::default(),
            simulate: SimulateSection::default(),
            sufficiency: SufficiencySection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub filter: bool,
    pub cluster: bool,
    pub learn: bool,
    pub invert: bool,
    pub iterate: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self { filter: true, cluster: false, learn: true, invert: true, iterate: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Initial parameter samples, one per row, with a header of names.
    pub params: PathBuf,
    pub predicted: PathBuf,
    pub observed: PathBuf,
    pub layout: Layout,
    /// Samples of a reference parameter distribution. When given, TV
    /// distances between its KDE and the updated density are reported.
    pub reference: Option<PathBuf>,
    /// Slice applied to raw data before the filter, cluster, learn and
    /// invert stages. Defaults to the first iteration step when the iterate
    /// stage is on.
    pub slice: Option<Slice>,
}

/// Entries whose coordinate on `axis` equals `value`, with that axis dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slice {
    pub axis: usize,
    pub value: f64,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            params: "data/params.csv".into(),
            predicted: "data/predicted.csv".into(),
            observed: "data/observed.csv".into(),
            layout: Layout::Shared,
            reference: Some("data/reference.csv".into()),
            slice: None,
        }
    }
}

/// Coordinates at which filtered data are evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CoordSpec {
    /// `start + spacing * i`, `i = 0..count`, on each of `dims` axes.
    Grid { start: f64, spacing: f64, count: usize, dims: usize },
    List { points: Vec<Vec<f64>> },
}

impl Default for CoordSpec {
    fn default() -> Self {
        Self::Grid { start: 0.1, spacing: 0.1, count: 49, dims: 2 }
    }
}

impl CoordSpec {
    pub fn points(&self) -> Points {
        match self {
            Self::Grid { start, spacing, count, dims } => {
                let axis: Vec<f64> = (0..*count).map(|i| start + spacing * i as f64).collect();
                Points::tensor_grid(&vec![axis; *dims])
            }
            Self::List { points } => Points::from_rows(points),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            Self::Grid { spacing, count, dims, start } => {
                if !(*spacing > 0.0) || !start.is_finite() || *count == 0 || *dims == 0 {
                    return Err(format!("filter.coords grid needs spacing > 0, count >= 1, dims >= 1 (got {spacing}, {count}, {dims})"));
                }
            }
            Self::List { points } => {
                let d = points.first().map_or(0, Vec::len);
                if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
                    return Err("filter.coords list needs nonempty finite points of equal dimension".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub method: FilterMethod,
    pub coords: CoordSpec,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self { method: FilterMethod::default(), coords: CoordSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClusterMethod {
    /// k-means on the filtered predicted data.
    Kmeans { k: usize },
    /// Labels from thresholds on one parameter.
    Rule { rule: ThresholdRule },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub method: ClusterMethod,
    pub svm: SvmSettings,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { method: ClusterMethod::Kmeans { k: 2 }, svm: SvmSettings::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnSection {
    pub kernel: KernelSpec,
    /// QoI dimension.
    pub q: usize,
}

impl Default for LearnSection {
    fn default() -> Self {
        Self { kernel: KernelSpec::Linear, q: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertSection {
    pub bandwidth: BandwidthRule,
}

impl Default for InvertSection {
    fn default() -> Self {
        Self { bandwidth: BandwidthRule::Scott }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterateSection {
    pub tol: f64,
    pub significance: bool,
    /// Coordinate axis the steps slice along.
    pub axis: usize,
    /// One step per value.
    pub steps: Vec<f64>,
}

impl Default for IterateSection {
    fn default() -> Self {
        Self {
            tol: dci_core::iterative::DEFAULT_TOL,
            significance: true,
            axis: 2,
            steps: (5..=14).map(|i| 0.5 * i as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Cells per axis of joint density grids.
    pub grid_cells: usize,
    /// Cells of marginal density grids.
    pub marginal_cells: usize,
    /// Also write the filtered data as CSV.
    pub write_filtered: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into(), grid_cells: 200, marginal_cells: 1000, write_filtered: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SensorSpec {
    /// `(spacing * i, spacing * j)` for `i, j = 1..=count`.
    Grid { spacing: f64, count: usize },
    Points { points: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// Beta(2, 5) on `a_range` for `a`, truncated normal for `b`.
    Wave { a_range: (f64, f64) },
    /// Independent Betas on `[0, length]`.
    Beta { shapes: Vec<(f64, f64)> },
}

/// Inputs of the `simulate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_initial: usize,
    /// Samples per observed set.
    pub n_observed: usize,
    pub observed_sets: usize,
    pub reference: ReferenceSpec,
    pub sensors: SensorSpec,
    pub times: Vec<f64>,
    pub predicted_noise: NoiseModel,
    pub observed_noise: NoiseModel,
    /// Keep only this coordinate axis (0 = x, 1 = y, 2 = t). The other
    /// two must each take a single value across the plan.
    pub series_axis: Option<usize>,
    pub wave: WaveConfig,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n_initial: 2000,
            n_observed: 200,
            observed_sets: 1,
            reference: ReferenceSpec::Wave { a_range: (1.0, 3.0) },
            sensors: SensorSpec::Grid { spacing: 0.5, count: 9 },
            times: (5..=14).map(|i| 0.5 * i as f64).collect(),
            predicted_noise: NoiseModel::gaussian(2.5e-3),
            observed_noise: NoiseModel::gaussian(2.5e-3),
            series_axis: None,
            wave: WaveConfig::default(),
        }
    }
}

/// Inputs of the `sufficiency` command: two filtered coordinate sets whose
/// learned QoI are compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SufficiencySection {
    pub first: CoordSpec,
    pub second: CoordSpec,
    pub slope: f64,
    pub r_squared: f64,
}

impl Default for SufficiencySection {
    fn default() -> Self {
        Self {
            first: CoordSpec::default(),
            second: CoordSpec::Grid { start: 0.05, spacing: 0.05, count: 99, dims: 2 },
            slope: 0.85,
            r_squared: 0.70,
        }
    }
}

impl PipelineConfig {
    /// The slice the single-step stages work on.
    pub fn base_slice(&self) -> Option<Slice> {
        match (self.data.slice, self.stages.iterate, self.iterate.steps.first()) {
            (Some(s), _, _) => Some(s),
            (None, true, Some(&value)) => Some(Slice { axis: self.iterate.axis, value }),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.params);
        fix(&mut self.data.predicted);
        fix(&mut self.data.observed);
        if let Some(r) = self.data.reference.as_mut() {
            fix(r);
        }
        fix(&mut self.output.dir);
    }

    /// SHA-256 of the TOML rendering, hex encoded.
    pub fn hash(&self) -> Result<String, PipelineError> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Checks numeric ranges only.
    pub fn validate_values(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        match self.filter.method {
            FilterMethod::Rbf(s) => {
                if s.n_min == 0 || s.n_max < s.n_min || !(s.rel_tol >= 0.0) {
                    return bad(format!("rbf needs 1 <= n_min <= n_max and rel_tol >= 0 (got {}, {}, {})", s.n_min, s.n_max, s.rel_tol));
                }
            }
            FilterMethod::Spline(s) => {
                if s.k_min == 0 || s.k_max < s.k_min || !(s.rel_tol >= 0.0) {
                    return bad(format!("spline needs 1 <= k_min <= k_max and rel_tol >= 0 (got {}, {}, {})", s.k_min, s.k_max, s.rel_tol));
                }
            }
        }
        self.filter.coords.validate().map_err(PipelineError::Config)?;
        self.sufficiency.first.validate().map_err(PipelineError::Config)?;
        self.sufficiency.second.validate().map_err(PipelineError::Config)?;
        if let ClusterMethod::Kmeans { k } = self.cluster.method {
            if k == 0 {
                return bad("cluster.method.k must be >= 1".into());
            }
        }
        if self.learn.q == 0 {
            return bad("learn.q must be >= 1".into());
        }
        if !(self.iterate.tol > 0.0 && self.iterate.tol < 1.0) {
            return bad(format!("iterate.tol must lie in (0, 1), got {}", self.iterate.tol));
        }
        if self.stages.iterate && self.iterate.steps.is_empty() {
            return bad("iterate stage enabled without steps".into());
        }
        if self.output.grid_cells < 2 || self.output.marginal_cells < 2 {
            return bad("output grids need at least 2 cells".into());
        }
        Ok(())
    }

    /// Checks numeric ranges and that every input file the enabled stages
    /// read exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.validate_values()?;
        let mut need = vec![&self.data.params, &self.data.predicted];
        if self.stages.invert || self.stages.iterate {
            need.push(&self.data.observed);
        }
        if let Some(r) = &self.data.reference {
            need.push(r);
        }
        for p in need {
            if !p.is_file() {
                return Err(PipelineError::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
