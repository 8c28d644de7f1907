#![allow(dead_code)]

use std::path::Path;

use dci_pipeline::config::{CoordSpec, SensorSpec};
use dci_pipeline::simulate::simulate;
use dci_pipeline::PipelineConfig;

/// A wave run small enough for debug builds: 4 x 4 sensors, two time steps,
/// 16 filtered coordinates.
pub fn small_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 11;
    cfg.data.reference = Some("data/reference.csv".into());
    cfg.resolve_paths(dir);
    cfg.output.dir = dir.join("out");
    cfg.output.grid_cells = 30;
    cfg.output.marginal_cells = 60;
    let sim = &mut cfg.simulate;
    sim.n_initial = 120;
    sim.n_observed = 80;
    sim.sensors = SensorSpec::Grid { spacing: 1.0, count: 4 };
    sim.times = vec![2.5, 3.0];
    cfg.filter.coords = CoordSpec::Grid { start: 1.0, spacing: 1.0, count: 4, dims: 2 };
    cfg.iterate.steps = vec![2.5, 3.0];
    cfg
}

/// `small_config` with its data simulated.
pub fn simulated(dir: &Path) -> PipelineConfig {
    let cfg = small_config(dir);
    simulate(&cfg).unwrap();
    cfg
}
