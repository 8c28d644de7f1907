//! Forward model for the droplet example: the 2-D wave equation
//! `u_tt = u_xx + u_yy` on a square with homogeneous Dirichlet boundaries,
//! solved with second-order centered differences in space and time.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as BetaPdf, Continuous, ContinuousCDF, Normal as NormalPdf};
use thiserror::Error;

use crate::ensemble::{DataEnsemble, Sample};
use crate::points::Points;

#[derive(Debug, Error, PartialEq)]
pub enum WaveError {
    #[error("time step {dt} violates the CFL limit {limit}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("time {t} is not a non-negative multiple of dt = {dt}")]
    TimeNotOnStep { t: f64, dt: f64 },
    #[error("no snapshot stored for time {t}")]
    TimeNotSnapshotted { t: f64 },
    #[error("point ({x}, {y}) lies outside the domain")]
    OutsideDomain { x: f64, y: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Grid, time step and droplet initial condition
/// `u(x, y, 0) = amplitude * exp(-sharpness * ((x - a)^2 + (y - b)^2))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveConfig {
    /// Side length of the square domain `(0, length)^2`.
    pub length: f64,
    /// Grid nodes per side, boundary included.
    pub nodes: usize,
    pub dt: f64,
    pub droplet: (f64, f64),
    pub amplitude: f64,
    pub sharpness: f64,
}

impl Default for WaveConfig {
    fn default() -> Self {
        Self { length: 5.0, nodes: 101, dt: 0.005, droplet: (2.5, 2.5), amplitude: 0.2, sharpness: 10.0 }
    }
}

impl WaveConfig {
    pub fn spacing(&self) -> f64 {
        self.length / (self.nodes - 1) as f64
    }

    pub fn with_droplet(&self, a: f64, b: f64) -> Self {
        Self { droplet: (a, b), ..self.clone() }
    }

    fn validate(&self) -> Result<(), WaveError> {
        if self.nodes < 3 || !(self.length > 0.0) || !(self.dt > 0.0) {
            return Err(WaveError::InvalidConfig(format!(
                "nodes {} length {} dt {}",
                self.nodes, self.length, self.dt
            )));
        }
        let limit = self.spacing() / 2f64.sqrt();
        if self.dt > limit {
            return Err(WaveError::CflViolation { dt: self.dt, limit });
        }
        Ok(())
    }

    fn step_index(&self, t: f64) -> Result<usize, WaveError> {
        let k = t / self.dt;
        if !(t >= 0.0) || (k - k.round()).abs() > 1e-9 * k.max(1.0) {
            return Err(WaveError::TimeNotOnStep { t, dt: self.dt });
        }
        Ok(k.round() as usize)
    }
}

/// Leapfrog integrator holding two time levels.
struct Stepper {
    n: usize,
    c2: f64,
    prev: Vec<f64>,
    cur: Vec<f64>,
    step: usize,
}

impl Stepper {
    fn new(cfg: &WaveConfig) -> Self {
        let n = cfg.nodes;
        let h = cfg.spacing();
        let (a, b) = cfg.droplet;
        let mut u0 = vec![0.0; n * n];
        for i in 1..n - 1 {
            let x = i as f64 * h;
            for j in 1..n - 1 {
                let y = j as f64 * h;
                u0[i * n + j] = cfg.amplitude * (-cfg.sharpness * ((x - a).powi(2) + (y - b).powi(2))).exp();
            }
        }
        let c2 = (cfg.dt / h).powi(2);
        // zero initial velocity: u1 = u0 + (c2 / 2) * lap(u0)
        let mut u1 = u0.clone();
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let k = i * n + j;
                let lap = u0[k - n] + u0[k + n] + u0[k - 1] + u0[k + 1] - 4.0 * u0[k];
                u1[k] += 0.5 * c2 * lap;
            }
        }
        Self { n, c2, prev: u0, cur: u1, step: 0 }
    }

    /// Field at the current step (`cur` holds step + 1 until the first advance).
    fn field(&self) -> &[f64] {
        if self.step == 0 {
            &self.prev
        } else {
            &self.cur
        }
    }

    fn advance(&mut self) {
        if self.step == 0 {
            self.step = 1;
            return;
        }
        let n = self.n;
        let c2 = self.c2;
        // new values overwrite `prev` in place; each entry of `prev` is read
        // only at its own index
        for i in 1..n - 1 {
            let up = &self.cur[(i - 1) * n..i * n];
            let mid = &self.cur[i * n..(i + 1) * n];
            let down = &self.cur[(i + 1) * n..(i + 2) * n];
            let out = &mut self.prev[i * n + 1..(i + 1) * n - 1];
            let it = out
                .iter_mut()
                .zip(mid[1..n - 1].iter())
                .zip(mid[..n - 2].iter().zip(mid[2..].iter()))
                .zip(up[1..n - 1].iter().zip(down[1..n - 1].iter()));
            for (((o, &m), (&l, &r)), (&u, &d)) in it {
                *o = 2.0 * m - *o + c2 * (u + d + l + r - 4.0 * m);
            }
        }
        std::mem::swap(&mut self.prev, &mut self.cur);
        self.step += 1;
    }

    /// Conserved leapfrog energy between the previous and current level.
    fn energy(&self, cfg: &WaveConfig) -> f64 {
        let (older, newer) = (&self.prev, &self.cur);
        let n = self.n;
        let h = cfg.spacing();
        let mut kinetic = 0.0;
        let mut elastic = 0.0;
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let k = i * n + j;
                let v = (newer[k] - older[k]) / cfg.dt;
                kinetic += v * v;
                let gx = (newer[k + n] - newer[k]) * (older[k + n] - older[k]);
                let gy = (newer[k + 1] - newer[k]) * (older[k + 1] - older[k]);
                elastic += (gx + gy) / (h * h);
            }
        }
        0.5 * (kinetic + elastic) * h * h
    }
}

/// Stored fields at requested times.
#[derive(Clone, Debug)]
pub struct Snapshots {
    nodes: usize,
    spacing: f64,
    times: Vec<f64>,
    fields: Vec<Vec<f64>>,
}

impl Snapshots {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Full field (row-major over x then y, boundary included) at time `t`.
    pub fn field(&self, t: f64) -> Result<&[f64], WaveError> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9)
            .map(|k| self.fields[k].as_slice())
            .ok_or(WaveError::TimeNotSnapshotted { t })
    }

    /// Value at `(x, y, t)` by bilinear interpolation between grid nodes.
    pub fn value(&self, t: f64, x: f64, y: f64) -> Result<f64, WaveError> {
        let f = self.field(t)?;
        interpolate(f, self.nodes, self.spacing, x, y)
    }
}

fn interpolate(field: &[f64], n: usize, h: f64, x: f64, y: f64) -> Result<f64, WaveError> {
    let length = h * (n - 1) as f64;
    if !(0.0..=length).contains(&x) || !(0.0..=length).contains(&y) {
        return Err(WaveError::OutsideDomain { x, y });
    }
    let fx = x / h;
    let fy = y / h;
    let mut i = fx.floor() as usize;
    let mut j = fy.floor() as usize;
    // snap points sitting on a node to avoid reading past the last node
    if (fx - fx.round()).abs() < 1e-9 {
        i = fx.round() as usize;
    }
    if (fy - fy.round()).abs() < 1e-9 {
        j = fy.round() as usize;
    }
    let i = i.min(n - 1);
    let j = j.min(n - 1);
    let tx = (fx - i as f64).clamp(0.0, 1.0);
    let ty = (fy - j as f64).clamp(0.0, 1.0);
    let at = |a: usize, b: usize| field[a.min(n - 1) * n + b.min(n - 1)];
    let mut v = (1.0 - tx) * (1.0 - ty) * at(i, j);
    if tx > 0.0 {
        v += tx * (1.0 - ty) * at(i + 1, j);
    }
    if ty > 0.0 {
        v += (1.0 - tx) * ty * at(i, j + 1);
    }
    if tx > 0.0 && ty > 0.0 {
        v += tx * ty * at(i + 1, j + 1);
    }
    Ok(v)
}

/// Solves up to the largest requested time and keeps the fields at `times`.
pub fn solve(config: &WaveConfig, times: &[f64]) -> Result<Snapshots, WaveError> {
    config.validate()?;
    let mut wanted: Vec<(usize, f64)> = times.iter().map(|&t| config.step_index(t).map(|k| (k, t))).collect::<Result<_, _>>()?;
    wanted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut stepper = Stepper::new(config);
    let mut out_times = Vec::with_capacity(wanted.len());
    let mut fields = Vec::with_capacity(wanted.len());
    for (k, t) in wanted {
        while stepper.step < k {
            stepper.advance();
        }
        out_times.push(t);
        fields.push(stepper.field().to_vec());
    }
    Ok(Snapshots { nodes: config.nodes, spacing: config.spacing(), times: out_times, fields })
}

/// Discrete energy after each of the requested steps; used to check that the
/// centered scheme does not dissipate.
pub fn energy_history(config: &WaveConfig, t_end: f64, every: usize) -> Result<Vec<f64>, WaveError> {
    config.validate()?;
    let last = config.step_index(t_end)?;
    let mut stepper = Stepper::new(config);
    stepper.advance();
    let mut out = vec![stepper.energy(config)];
    while stepper.step < last {
        stepper.advance();
        if stepper.step % every.max(1) == 0 {
            out.push(stepper.energy(config));
        }
    }
    Ok(out)
}

/// Measurement noise added to sensed values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation of iid Gaussian noise.
    pub sd: f64,
    /// Round noisy values to this many decimals.
    #[serde(default)]
    pub truncate_decimals: Option<u32>,
    /// Signal-to-noise variance ratio. When set, each sample's noise sd is
    /// `sqrt(var(signal) / snr)` and `sd` is ignored.
    #[serde(default)]
    pub snr: Option<f64>,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn gaussian(sd: f64) -> Self {
        Self { sd, truncate_decimals: None, snr: None }
    }

    pub fn snr(snr: f64) -> Self {
        Self { sd: 0.0, truncate_decimals: None, snr: Some(snr) }
    }

    fn apply<R: Rng>(&self, rng: &mut R, values: &mut [f64]) {
        let sd = match self.snr {
            Some(snr) if !values.is_empty() => {
                let n = values.len() as f64;
                let shift = values[0];
                let m1 = values.iter().map(|v| v - shift).sum::<f64>() / n;
                let m2 = values.iter().map(|v| (v - shift) * (v - shift)).sum::<f64>() / n;
                ((m2 - m1 * m1).max(0.0) / snr).sqrt()
            }
            _ => self.sd,
        };
        if sd > 0.0 {
            let normal = Normal::new(0.0, sd).expect("finite noise sd");
            for v in values.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        if let Some(d) = self.truncate_decimals {
            let s = 10f64.powi(d as i32);
            for v in values.iter_mut() {
                *v = (*v * s).trunc() / s;
            }
        }
    }
}

/// Where and when a sample is measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorPlan {
    /// Sensor locations `(x, y)`.
    pub coords: Points,
    /// Measurement times, each a multiple of the solver time step.
    pub times: Vec<f64>,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl SensorPlan {
    /// Sensors at `(spacing * i, spacing * j)` for `i, j = 1..=count`.
    pub fn grid(spacing: f64, count: usize, times: Vec<f64>, noise: NoiseModel, seed: u64) -> Self {
        let axis: Vec<f64> = (1..=count).map(|i| spacing * i as f64).collect();
        Self { coords: Points::tensor_grid(&[axis.clone(), axis]), times, noise, seed }
    }

    pub fn single(x: f64, y: f64, times: Vec<f64>, noise: NoiseModel, seed: u64) -> Self {
        Self { coords: Points::from_rows(&[[x, y]]), times, noise, seed }
    }

    /// `(x, y, t)` coordinates of one measurement row, time-major.
    pub fn measurement_coords(&self) -> Points {
        let mut p = Points::empty(3);
        for &t in &self.times {
            for c in self.coords.rows() {
                p.push(&[c[0], c[1], t]);
            }
        }
        p
    }

    fn rng_for(&self, sample: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(sample as u64);
        rng
    }
}

/// Samples the snapshot fields at the plan's sensors and times and adds the
/// plan's noise. `sample` selects the noise stream.
pub fn sense(snapshots: &Snapshots, plan: &SensorPlan, sample: usize) -> Result<Vec<f64>, WaveError> {
    let mut values = Vec::with_capacity(plan.times.len() * plan.coords.len());
    for &t in &plan.times {
        for c in plan.coords.rows() {
            values.push(snapshots.value(t, c[0], c[1])?);
        }
    }
    plan.noise.apply(&mut plan.rng_for(sample), &mut values);
    Ok(values)
}

/// Simulates every parameter sample `(a, b)` and records the plan's
/// measurements. Rows carry `(x, y, t)` coordinates, time-major.
pub fn generate_ensemble(params: &Points, plan: &SensorPlan, base: &WaveConfig) -> Result<DataEnsemble, WaveError> {
    base.validate()?;
    if params.dim() != 2 {
        return Err(WaveError::InvalidConfig(format!("parameters must be (a, b), got dimension {}", params.dim())));
    }
    for c in plan.coords.rows() {
        if !(0.0..=base.length).contains(&c[0]) || !(0.0..=base.length).contains(&c[1]) {
            return Err(WaveError::OutsideDomain { x: c[0], y: c[1] });
        }
    }
    let mut order: Vec<(usize, usize)> =
        plan.times.iter().enumerate().map(|(i, &t)| base.step_index(t).map(|k| (k, i))).collect::<Result<_, _>>()?;
    order.sort();
    let h = base.spacing();
    let nodes = base.nodes;
    let n_sensors = plan.coords.len();
    let rows: Vec<Result<Vec<f64>, WaveError>> = (0..params.len())
        .into_par_iter()
        .map(|s| {
            let p = params.row(s);
            let mut stepper = Stepper::new(&base.with_droplet(p[0], p[1]));
            let mut values = vec![0.0; plan.times.len() * n_sensors];
            for &(k, ti) in &order {
                while stepper.step < k {
                    stepper.advance();
                }
                let field = stepper.field();
                for (si, c) in plan.coords.rows().enumerate() {
                    values[ti * n_sensors + si] = interpolate(field, nodes, h, c[0], c[1])?;
                }
            }
            plan.noise.apply(&mut plan.rng_for(s), &mut values);
            Ok(values)
        })
        .collect();
    let coords = Arc::new(plan.measurement_coords());
    let samples = rows
        .into_iter()
        .map(|r| r.map(|values| Sample { coords: Arc::clone(&coords), values }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DataEnsemble::new(3, samples).expect("rows match plan coordinates"))
}

/// Data-generating distribution: `a` is Beta(alpha, beta) mapped onto
/// `a_range`, `b` is normal truncated to the domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgDistribution {
    pub a_range: (f64, f64),
    pub a_shape: (f64, f64),
    pub b_mean: f64,
    pub b_sd: f64,
    pub domain: (f64, f64),
}

impl DgDistribution {
    pub fn new(a_range: (f64, f64)) -> Self {
        Self { a_range, a_shape: (2.0, 5.0), b_mean: 2.5, b_sd: 0.5, domain: (0.0, 5.0) }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = Beta::new(self.a_shape.0, self.a_shape.1).expect("valid beta shape");
        let normal = Normal::new(self.b_mean, self.b_sd).expect("valid normal");
        let (lo, hi) = self.a_range;
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let a = lo + (hi - lo) * beta.sample(&mut rng);
            let b = loop {
                let b = normal.sample(&mut rng);
                if b > self.domain.0 && b < self.domain.1 {
                    break b;
                }
            };
            data.push(a);
            data.push(b);
        }
        Points::new(2, data)
    }

    pub fn marginal_pdf(&self, axis: usize, x: f64) -> f64 {
        match axis {
            0 => {
                let (lo, hi) = self.a_range;
                if x <= lo || x >= hi {
                    return 0.0;
                }
                let beta = BetaPdf::new(self.a_shape.0, self.a_shape.1).expect("valid beta");
                beta.pdf((x - lo) / (hi - lo)) / (hi - lo)
            }
            _ => {
                if x <= self.domain.0 || x >= self.domain.1 {
                    return 0.0;
                }
                let normal = NormalPdf::new(self.b_mean, self.b_sd).expect("valid normal");
                let mass = normal.cdf(self.domain.1) - normal.cdf(self.domain.0);
                normal.pdf(x) / mass
            }
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.marginal_pdf(0, x[0]) * self.marginal_pdf(1, x[1])
    }
}

/// Uniform distribution on an axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl UniformBox {
    pub fn square(lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo; 2], hi: vec![hi; 2] }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.lo.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            for j in 0..m {
                data.push(rng.random_range(self.lo[j]..self.hi[j]));
            }
        }
        Points::new(m, data)
    }

    pub fn marginal_pdf(&self, axis: usize, x: f64) -> f64 {
        if x >= self.lo[axis] && x <= self.hi[axis] {
            1.0 / (self.hi[axis] - self.lo[axis])
        } else {
            0.0
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        (0..self.lo.len()).map(|j| self.marginal_pdf(j, x[j])).product()
    }
}

/// Independent Beta(alpha, beta) components, each mapped onto `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub shapes: Vec<(f64, f64)>,
}

impl BetaBox {
    pub fn sample(&self, n: usize, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let betas: Vec<Beta<f64>> = self.shapes.iter().map(|&(a, b)| Beta::new(a, b).expect("valid beta shape")).collect();
        let m = self.lo.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            for (j, beta) in betas.iter().enumerate() {
                data.push(self.lo[j] + (self.hi[j] - self.lo[j]) * beta.sample(&mut rng));
            }
        }
        Points::new(m, data)
    }

    pub fn marginal_pdf(&self, axis: usize, x: f64) -> f64 {
        let (lo, hi) = (self.lo[axis], self.hi[axis]);
        if x <= lo || x >= hi {
            return 0.0;
        }
        let (a, b) = self.shapes[axis];
        BetaPdf::new(a, b).expect("valid beta").pdf((x - lo) / (hi - lo)) / (hi - lo)
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        (0..self.lo.len()).map(|j| self.marginal_pdf(j, x[j])).product()
    }
}

/// Which parameter distribution to draw from.
#[derive(Clone, Debug, PartialEq)]
pub enum ParameterDistribution {
    Dg(DgDistribution),
    Initial(UniformBox),
    Beta(BetaBox),
}

impl ParameterDistribution {
    pub fn sample(&self, n: usize, seed: u64) -> Points {
        match self {
            Self::Dg(d) => d.sample(n, seed),
            Self::Initial(u) => u.sample(n, seed),
            Self::Beta(d) => d.sample(n, seed),
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        match self {
            Self::Dg(d) => d.pdf(x),
            Self::Initial(u) => u.pdf(x),
            Self::Beta(d) => d.pdf(x),
        }
    }

    pub fn marginal_pdf(&self, axis: usize, x: f64) -> f64 {
        match self {
            Self::Dg(d) => d.marginal_pdf(axis, x),
            Self::Initial(u) => u.marginal_pdf(axis, x),
            Self::Beta(d) => d.marginal_pdf(axis, x),
        }
    }
}

/// Seeded iid draws from the data-generating or initial distribution.
pub fn sample_distributions(kind: &ParameterDistribution, n: usize, seed: u64) -> Points {
    kind.sample(n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WaveConfig {
        WaveConfig::default()
    }

    #[test]
    fn zero_amplitude_stays_zero() {
        let cfg = WaveConfig { amplitude: 0.0, ..small() };
        let snaps = solve(&cfg, &[0.0, 0.5, 1.0]).unwrap();
        for &t in snaps.times() {
            assert!(snaps.field(t).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn centered_droplet_is_symmetric_under_reflection() {
        let snaps = solve(&small(), &[0.5, 1.5, 3.0]).unwrap();
        let n = snaps.nodes();
        for &t in snaps.times() {
            let f = snaps.field(t).unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert!((f[i * n + j] - f[j * n + i]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn cfl_violation_is_reported() {
        let cfg = WaveConfig { dt: 0.05, ..small() };
        assert!(matches!(solve(&cfg, &[0.5]), Err(WaveError::CflViolation { .. })));
    }

    #[test]
    fn off_step_time_is_rejected() {
        assert!(matches!(solve(&small(), &[0.0012]), Err(WaveError::TimeNotOnStep { .. })));
    }

    #[test]
    fn grid_refinement_changes_qoi_little() {
        let coarse = small().with_droplet(1.5, 2.5);
        let fine = WaveConfig { nodes: 201, dt: 0.0025, ..coarse.clone() };
        let qc = solve(&coarse, &[2.5]).unwrap().value(2.5, 4.0, 1.0).unwrap();
        let qf = solve(&fine, &[2.5]).unwrap().value(2.5, 4.0, 1.0).unwrap();
        assert!(((qc - qf) / qf).abs() < 0.05, "coarse {qc} fine {qf}");
    }

    #[test]
    fn energy_is_conserved() {
        let cfg = small().with_droplet(1.3, 3.1);
        let e = energy_history(&cfg, 7.0, 50).unwrap();
        let e0 = e[0];
        for &ek in &e {
            assert!(((ek - e0) / e0).abs() < 0.01, "energy drift {} -> {}", e0, ek);
        }
    }

    #[test]
    fn magnitude_is_order_hundredth() {
        let snaps = solve(&small().with_droplet(1.5, 2.5), &[2.5]).unwrap();
        let max = snaps.field(2.5).unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 1e-3 && max < 1e-1, "max |u| = {max}");
    }

    #[test]
    fn noise_free_sensing_is_exact() {
        let snaps = solve(&small(), &[1.0]).unwrap();
        let plan = SensorPlan::grid(0.5, 9, vec![1.0], NoiseModel::none(), 0);
        let v = sense(&snaps, &plan, 0).unwrap();
        let f = snaps.field(1.0).unwrap();
        assert_eq!(v[0], f[10 * 101 + 10]);
        assert_eq!(v[80], f[90 * 101 + 90]);
    }

    #[test]
    fn sensing_is_seed_deterministic() {
        let snaps = solve(&small(), &[1.0]).unwrap();
        let plan = SensorPlan::grid(0.5, 9, vec![1.0], NoiseModel::gaussian(2.5e-3), 42);
        assert_eq!(sense(&snaps, &plan, 3).unwrap(), sense(&snaps, &plan, 3).unwrap());
        assert_ne!(sense(&snaps, &plan, 3).unwrap(), sense(&snaps, &plan, 4).unwrap());
    }

    #[test]
    fn noise_variance_matches() {
        let snaps = solve(&small(), &[0.0]).unwrap();
        let sd = 2.5e-3;
        let plan = SensorPlan { coords: Points::from_rows(&[[4.0, 1.0]]), times: vec![0.0], noise: NoiseModel::gaussian(sd), seed: 9 };
        let exact = snaps.value(0.0, 4.0, 1.0).unwrap();
        let diffs: Vec<f64> = (0..10_000).map(|s| sense(&snaps, &plan, s).unwrap()[0] - exact).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        assert!((var / (sd * sd) - 1.0).abs() < 0.05, "variance ratio {}", var / (sd * sd));
    }

    #[test]
    fn truncation_rounds_to_decimals() {
        let noise = NoiseModel { sd: 0.0, truncate_decimals: Some(2), snr: None };
        let mut v = vec![0.12345, -0.0199];
        noise.apply(&mut ChaCha8Rng::seed_from_u64(0), &mut v);
        assert_eq!(v, vec![0.12, -0.01]);
    }

    #[test]
    fn ensemble_matches_direct_solve_and_duplicates_agree() {
        let params = Points::from_rows(&[[1.5, 2.0], [1.5, 2.0], [3.0, 4.0]]);
        let plan = SensorPlan::single(4.0, 1.0, vec![0.5, 1.0], NoiseModel::none(), 1);
        let e = generate_ensemble(&params, &plan, &small()).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e.sample(0).values, e.sample(1).values);
        let snaps = solve(&small().with_droplet(3.0, 4.0), &[0.5, 1.0]).unwrap();
        assert_eq!(e.sample(2).values, sense(&snaps, &plan, 2).unwrap());
        assert_eq!(e.sample(0).coords.row(1), &[4.0, 1.0, 1.0]);
    }

    #[test]
    fn dg_a_marginal_mean() {
        let dg = DgDistribution::new((1.0, 2.0));
        let n = 100_000;
        let s = dg.sample(n, 5);
        let a = s.column(0);
        let mean = a.iter().sum::<f64>() / n as f64;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - (1.0 + 2.0 / 7.0)).abs() < 3.0 * se, "mean {mean}");
        assert!(s.column(1).iter().all(|&b| b > 0.0 && b < 5.0));
    }

    #[test]
    fn initial_samples_fill_the_square() {
        let u = UniformBox::square(0.0, 5.0);
        let max_gap = |n: usize| {
            let s = u.sample(n, 3);
            let cells = 10;
            let mut hit = vec![false; cells * cells];
            for r in s.rows() {
                let i = ((r[0] / 5.0) * cells as f64) as usize;
                let j = ((r[1] / 5.0) * cells as f64) as usize;
                hit[i.min(cells - 1) * cells + j.min(cells - 1)] = true;
            }
            hit.iter().filter(|h| !**h).count()
        };
        assert!(max_gap(2000) <= max_gap(50));
        assert_eq!(max_gap(2000), 0);
    }

    #[test]
    fn dg_pdf_integrates_to_one() {
        let dg = DgDistribution::new((1.0, 3.0));
        let n = 400;
        let h = 5.0 / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += dg.pdf(&[(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]);
            }
        }
        assert!((s * h * h - 1.0).abs() < 1e-3);
    }

    #[test]
    fn snr_noise_scales_with_signal_variance() {
        let noise = NoiseModel::snr(4.0);
        let signal: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.01).sin()).collect();
        let n = signal.len() as f64;
        let mean = signal.iter().sum::<f64>() / n;
        let var_s = signal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut noisy = signal.clone();
        noise.apply(&mut ChaCha8Rng::seed_from_u64(1), &mut noisy);
        let var_e = noisy.iter().zip(&signal).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        assert!((var_s / var_e / 4.0 - 1.0).abs() < 0.1, "snr {}", var_s / var_e);
        let mut flat = vec![0.3; 10];
        noise.apply(&mut ChaCha8Rng::seed_from_u64(1), &mut flat);
        assert_eq!(flat, vec![0.3; 10]);
    }

    #[test]
    fn beta_box_moments_and_normalization() {
        let d = BetaBox { lo: vec![0.0, -1.0], hi: vec![5.0, 1.0], shapes: vec![(2.0, 6.0), (3.0, 4.0)] };
        let n = 100_000;
        let s = d.sample(n, 8);
        for (j, expect) in [(0, 5.0 * 2.0 / 8.0), (1, -1.0 + 2.0 * 3.0 / 7.0)] {
            let c = s.column(j);
            let mean = c.iter().sum::<f64>() / n as f64;
            assert!((mean - expect).abs() < 0.01 * (d.hi[j] - d.lo[j]), "mean {mean} vs {expect}");
        }
        let cells = 2000;
        for j in 0..2 {
            let h = (d.hi[j] - d.lo[j]) / cells as f64;
            let total: f64 = (0..cells).map(|i| d.marginal_pdf(j, d.lo[j] + (i as f64 + 0.5) * h) * h).sum();
            assert!((total - 1.0).abs() < 1e-4);
        }
    }
}
