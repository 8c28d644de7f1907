//! A small labelled data set in the style of a manufactured-part study:
//! noisy wave heights along a strip of sensors, three classes set by thresholds on
//! a shape-like parameter, and several independent observed sets inverted
//! against one saved state.
//!
//! The droplet row `b` plays the shape parameter through
//! `a1 = 0.08 (b - 2.5)`, which maps `[0, 5]` onto `[-0.2, 0.2]`. Classes are
//! `a1` in `[-0.2, -0.075]`, `(-0.075, 0.075)` and `[0.075, 0.2]`.

use std::path::Path;

use dci_core::clustering::{Interval, ThresholdRule};
use dci_core::filtering::{FilterMethod, SplineSettings};
use dci_core::kpca::KernelSpec;
use dci_core::wave::NoiseModel;

use crate::config::{ClusterMethod, CoordSpec, PipelineConfig, ReferenceSpec, SensorSpec, Stages};

/// The sensor strip runs along `y` at this `x`.
pub const LINE_X: f64 = 2.0;
/// Time of the strip measurement.
pub const LINE_T: f64 = 3.0;

/// `b` at which `a1 = 0.08 (b - 2.5)` equals `v`.
pub fn b_of_a1(v: f64) -> f64 {
    2.5 + v / 0.08
}

pub fn class_rule() -> ThresholdRule {
    let (lo, hi) = (b_of_a1(-0.075), b_of_a1(0.075));
    ThresholdRule { component: 1, intervals: vec![Interval::closed(0.0, lo), Interval::open(lo, hi), Interval::closed(hi, 5.0)] }
}

/// Config for the surrogate with data files under `dir`. `simulate` writes
/// `observed_<k>.csv` and `reference_<k>.csv` for `k = 1..=3`; point
/// `data.observed` at one of them before running.
pub fn surrogate_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.stages = Stages { filter: true, cluster: true, learn: true, invert: true, iterate: false };
    cfg.data.params = "params.csv".into();
    cfg.data.predicted = "predicted.csv".into();
    cfg.data.observed = "observed.csv".into();
    cfg.data.reference = Some("reference.csv".into());
    cfg.output.dir = "out".into();
    cfg.filter.method = FilterMethod::Spline(SplineSettings { k_min: 1, k_max: 30, rel_tol: 0.01 });
    cfg.filter.coords = CoordSpec::Grid { start: 0.05, spacing: 0.0825, count: 60, dims: 1 };
    cfg.cluster.method = ClusterMethod::Rule { rule: class_rule() };
    cfg.learn.kernel = KernelSpec::Gaussian { scale: None };
    cfg.learn.q = 2;
    let sim = &mut cfg.simulate;
    sim.n_initial = 200;
    sim.n_observed = 75;
    sim.observed_sets = 3;
    sim.reference = ReferenceSpec::Beta { shapes: vec![(2.0, 6.0), (3.0, 4.0)] };
    sim.sensors = SensorSpec::Points { points: (1..=301).map(|i| [LINE_X, 5.0 * i as f64 / 302.0]).collect() };
    sim.times = vec![LINE_T];
    sim.predicted_noise = NoiseModel::snr(10.0);
    sim.observed_noise = NoiseModel::snr(5.0);
    sim.series_axis = Some(1);
    cfg.resolve_paths(dir);
    cfg
}
