//! Writes wave-equation data sets described by a config's `simulate` section.

use std::path::{Path, PathBuf};

use dci_core::wave::{generate_ensemble, BetaBox, DgDistribution, ParameterDistribution, SensorPlan, UniformBox};
use dci_core::{DataEnsemble, Points};

use crate::config::{PipelineConfig, ReferenceSpec, SensorSpec, SimulateSection};
use crate::error::PipelineError;
use crate::io::{write_ensemble, write_points};
use crate::seed_for;

/// Paths written by [`simulate`]. Observed sets are numbered from 1 when
/// there is more than one.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedFiles {
    pub params: PathBuf,
    pub predicted: PathBuf,
    pub observed: Vec<PathBuf>,
    pub reference: Vec<PathBuf>,
}

pub fn sensor_points(spec: &SensorSpec) -> Points {
    match spec {
        SensorSpec::Grid { spacing, count } => {
            let axis: Vec<f64> = (1..=*count).map(|i| spacing * i as f64).collect();
            Points::tensor_grid(&[axis.clone(), axis])
        }
        SensorSpec::Points { points } => Points::from_rows(points),
    }
}

pub fn reference_distribution(sim: &SimulateSection) -> ParameterDistribution {
    let l = sim.wave.length;
    match &sim.reference {
        ReferenceSpec::Wave { a_range } => ParameterDistribution::Dg(DgDistribution::new(*a_range)),
        ReferenceSpec::Beta { shapes } => ParameterDistribution::Beta(BetaBox { lo: vec![0.0; 2], hi: vec![l; 2], shapes: shapes.clone() }),
    }
}

/// The `s`-th observed set uses streams 2 and 4 offset by `16 s`.
fn set_stream(stream: u64, s: usize) -> u64 {
    stream + 16 * s as u64
}

fn numbered(path: &Path, s: usize, total: usize) -> PathBuf {
    if total == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|x| format!(".{}", x.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_{}{ext}", s + 1))
}

fn sense(params: &Points, plan: &SensorPlan, sim: &SimulateSection) -> Result<DataEnsemble, PipelineError> {
    let mut data = generate_ensemble(params, plan, &sim.wave)?;
    if let Some(keep) = sim.series_axis {
        if keep > 2 {
            return Err(PipelineError::Config(format!("simulate.series_axis must be 0, 1 or 2, got {keep}")));
        }
        let coords = plan.measurement_coords();
        for axis in (0..3).rev().filter(|&a| a != keep) {
            let v = coords.row(0)[axis];
            if coords.rows().any(|r| r[axis] != v) {
                return Err(PipelineError::Config(format!("simulate.series_axis = {keep} needs a single value on axis {axis}")));
            }
            data = data.restrict(axis, v);
        }
    }
    Ok(data)
}

/// Simulates the initial samples and every observed set, writing parameters,
/// data and reference samples to the paths in `cfg.data`.
pub fn simulate(cfg: &PipelineConfig) -> Result<SimulatedFiles, PipelineError> {
    let sim = &cfg.simulate;
    if sim.n_initial == 0 || sim.n_observed == 0 || sim.observed_sets == 0 || sim.times.is_empty() {
        return Err(PipelineError::Config("simulate needs n_initial, n_observed, observed_sets and times to be nonempty".into()));
    }
    let sensors = sensor_points(&sim.sensors);
    let names = vec!["a".to_string(), "b".to_string()];
    let initial = UniformBox::square(0.0, sim.wave.length).sample(sim.n_initial, seed_for(cfg.seed, 1));
    let plan = |noise, stream| SensorPlan { coords: sensors.clone(), times: sim.times.clone(), noise, seed: seed_for(cfg.seed, stream) };
    let predicted = sense(&initial, &plan(sim.predicted_noise.clone(), 3), sim)?;
    write_points(&cfg.data.params, &names, &initial)?;
    write_ensemble(&cfg.data.predicted, &predicted)?;

    let dist = reference_distribution(sim);
    let reference_path = cfg.data.reference.clone().unwrap_or_else(|| cfg.data.observed.with_file_name("reference.csv"));
    let mut files = SimulatedFiles { params: cfg.data.params.clone(), predicted: cfg.data.predicted.clone(), observed: Vec::new(), reference: Vec::new() };
    for s in 0..sim.observed_sets {
        let samples = dist.sample(sim.n_observed, seed_for(cfg.seed, set_stream(2, s)));
        let observed = sense(&samples, &plan(sim.observed_noise.clone(), set_stream(4, s)), sim)?;
        let (obs_path, ref_path) = (numbered(&cfg.data.observed, s, sim.observed_sets), numbered(&reference_path, s, sim.observed_sets));
        write_ensemble(&obs_path, &observed)?;
        write_points(&ref_path, &names, &samples)?;
        files.observed.push(obs_path);
        files.reference.push(ref_path);
    }
    Ok(files)
}
