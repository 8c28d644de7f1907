//! End-to-end runs of the randomly generated wave example: a single scalar
//! measurement, a time series, filtered noisy spatial data, iterated
//! spatio-temporal data, and the filtered-coordinate sufficiency check.

use std::sync::Arc;

use dci_core::densities::{tv_from_values, BandwidthRule, DensityEstimate, QuadratureGrid};
use dci_core::filtering::{evaluate_filter, filter_ensemble, filter_ensemble_models, FilterConfig, FilterMethod, RbfSettings};
use dci_core::inversion::{self, InversionState, IterationRecord};
use dci_core::iterative::{iterate, IterateConfig};
use dci_core::kpca::{kpca, qoi_eval, KernelSpec};
use dci_core::sufficiency::{sufficiency_test, SufficiencyReport};
use dci_core::wave::{generate_ensemble, DgDistribution, NoiseModel, SensorPlan, UniformBox, WaveConfig};
use dci_core::{DataEnsemble, FilteredEnsemble, Points};
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::seed_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySettings {
    pub n_initial: usize,
    pub n_dg: usize,
    /// Interval onto which the Beta(2, 5) draw of `a` is mapped.
    pub a_range: (f64, f64),
    pub seed: u64,
    pub noise_sd: f64,
    pub rbf: RbfSettings,
    /// Filtered coordinates `(spacing * i, spacing * j)`, `i, j = 1..=count`.
    pub filtered_spacing: f64,
    pub filtered_count: usize,
    /// Kernel for the scalar and time-series parts.
    pub kernel: KernelSpec,
    /// Kernel for the filtered spatial fields.
    pub field_kernel: KernelSpec,
    pub q: usize,
    pub tol: f64,
    /// Midpoint cells per axis for joint TV.
    pub tv_cells: usize,
    /// Midpoint cells for marginal TV.
    pub marginal_cells: usize,
    pub wave: WaveConfig,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            n_initial: 2000,
            n_dg: 200,
            a_range: (1.0, 3.0),
            seed: 2024,
            noise_sd: 2.5e-3,
            rbf: RbfSettings::default(),
            filtered_spacing: 0.1,
            filtered_count: 49,
            kernel: KernelSpec::default(),
            field_kernel: KernelSpec::Linear,
            q: 2,
            tol: dci_core::iterative::DEFAULT_TOL,
            tv_cells: 200,
            marginal_cells: 1000,
            wave: WaveConfig::default(),
        }
    }
}

/// Distances between an estimated and the exact data-generating density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvSummary {
    pub joint: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub diagnostic: f64,
    pub tv: TvSummary,
    pub r: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    /// Joint and marginal TV after every accepted step, labelled by step.
    pub tv_series: Vec<(String, TvSummary)>,
    pub final_report: InversionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterativeReport {
    pub without_significance: IterationTrace,
    pub with_significance: IterationTrace,
}

/// Sample sets and reference distributions shared by every part.
pub struct Study {
    pub settings: StudySettings,
    pub initial: Points,
    pub dg_samples: Points,
    pub dg: DgDistribution,
    joint_grid: QuadratureGrid,
    marginal_grid: QuadratureGrid,
    dg_joint: Vec<f64>,
    dg_marginals: [Vec<f64>; 2],
}

impl Study {
    pub fn new(settings: StudySettings) -> Result<Self, PipelineError> {
        let (lo, hi) = (0.0, settings.wave.length);
        let initial = UniformBox::square(lo, hi).sample(settings.n_initial, seed_for(settings.seed, 1));
        let dg = DgDistribution::new(settings.a_range);
        let dg_samples = dg.sample(settings.n_dg, seed_for(settings.seed, 2));
        let joint_grid = QuadratureGrid::uniform(&[lo, lo], &[hi, hi], &[settings.tv_cells, settings.tv_cells])?;
        let marginal_grid = QuadratureGrid::uniform(&[lo], &[hi], &[settings.marginal_cells])?;
        let dg_joint = joint_grid.nodes().rows().map(|x| dg.pdf(x)).collect();
        let dg_marginals = [0, 1].map(|j| marginal_grid.nodes().rows().map(|x| dg.marginal_pdf(j, x[0])).collect());
        Ok(Self { settings, initial, dg_samples, dg, joint_grid, marginal_grid, dg_joint, dg_marginals })
    }

    fn plan(&self, coords: Points, times: Vec<f64>, noise_sd: f64, stream: u64) -> SensorPlan {
        SensorPlan { coords, times, noise: NoiseModel::gaussian(noise_sd), seed: seed_for(self.settings.seed, stream) }
    }

    /// Predicted and observed data for one sensor plan (observed noise drawn
    /// from a separate stream).
    fn simulate(&self, coords: Points, times: Vec<f64>, noise_sd: f64) -> Result<(DataEnsemble, DataEnsemble), PipelineError> {
        let pred = generate_ensemble(&self.initial, &self.plan(coords.clone(), times.clone(), noise_sd, 3), &self.settings.wave)?;
        let obs = generate_ensemble(&self.dg_samples, &self.plan(coords, times, noise_sd, 4), &self.settings.wave)?;
        Ok((pred, obs))
    }

    /// TV between the weighted KDE of the initial samples and the exact
    /// data-generating density, jointly and per parameter.
    pub fn tv_of_weights(&self, r: &[f64]) -> Result<TvSummary, PipelineError> {
        let joint = DensityEstimate::fit(&self.initial, Some(r), BandwidthRule::Scott)?;
        let joint_vals = joint.eval(self.joint_grid.nodes())?;
        let mut marg = [0.0; 2];
        for (j, m) in marg.iter_mut().enumerate() {
            let kde = DensityEstimate::fit(&self.initial.select_columns(&[j]), Some(r), BandwidthRule::Scott)?;
            *m = tv_from_values(&kde.eval(self.marginal_grid.nodes())?, &self.dg_marginals[j], &self.marginal_grid);
        }
        Ok(TvSummary { joint: tv_from_values(&joint_vals, &self.dg_joint, &self.joint_grid), a: marg[0], b: marg[1] })
    }

    /// TV of the unweighted initial samples' KDE against the exact
    /// data-generating density.
    pub fn tv_initial(&self) -> Result<TvSummary, PipelineError> {
        self.tv_of_weights(&vec![1.0; self.initial.len()])
    }

    /// TV of the KDE of the data-generating samples against the exact density.
    pub fn tv_dg_kde(&self) -> Result<f64, PipelineError> {
        let kde = DensityEstimate::fit(&self.dg_samples, None, BandwidthRule::Scott)?;
        Ok(tv_from_values(&kde.eval(self.joint_grid.nodes())?, &self.dg_joint, &self.joint_grid))
    }

    fn invert(&self, q_pred: &Points, q_obs: &Points) -> Result<InversionReport, PipelineError> {
        let pi_pred = DensityEstimate::fit(q_pred, None, BandwidthRule::Scott)?;
        let pi_obs = DensityEstimate::fit(q_obs, None, BandwidthRule::Scott)?;
        let r = inversion::compute_ratio(&pi_obs, &pi_pred, q_pred)?;
        Ok(InversionReport { diagnostic: inversion::diagnostic(&r)?, tv: self.tv_of_weights(&r)?, r })
    }

    /// Scalar QoI: the noise-free wave height at `(4, 1)` and `t = 2.5`.
    pub fn part1(&self) -> Result<InversionReport, PipelineError> {
        let (pred, obs) = self.simulate(Points::from_rows(&[[4.0, 1.0]]), vec![2.5], 0.0)?;
        self.invert(pred.to_filtered()?.matrix(), obs.to_filtered()?.matrix())
    }

    /// Fourteen noise-free heights at `(4, 1)`, reduced by kPCA.
    pub fn part2(&self) -> Result<InversionReport, PipelineError> {
        let times: Vec<f64> = (1..=14).map(|i| 0.5 * i as f64).collect();
        let (pred, obs) = self.simulate(Points::from_rows(&[[4.0, 1.0]]), times, 0.0)?;
        let (pred, obs) = (pred.to_filtered()?, obs.to_filtered()?);
        let map = kpca(&pred, &self.settings.kernel, self.settings.q)?;
        self.invert(map.training_scores(), &qoi_eval(&map, &obs)?)
    }

    pub fn filtered_coords(&self, count: usize, spacing: f64) -> Points {
        let axis: Vec<f64> = (1..=count).map(|i| spacing * i as f64).collect();
        Points::tensor_grid(&[axis.clone(), axis])
    }

    fn sensors(&self) -> Points {
        self.filtered_coords(9, 0.5)
    }

    fn filter_config(&self, stream: u64) -> FilterConfig {
        FilterConfig { method: FilterMethod::Rbf(self.settings.rbf), seed: seed_for(self.settings.seed, stream) }
    }

    /// Filters one time slice of predicted and observed spatio-temporal data.
    fn filter_step(&self, pred: &DataEnsemble, obs: &DataEnsemble, t: f64, coords: &Points) -> Result<(FilteredEnsemble, FilteredEnsemble), PipelineError> {
        let p = filter_ensemble(&pred.restrict(2, t), coords, &self.filter_config(5))?;
        let o = filter_ensemble(&obs.restrict(2, t), coords, &self.filter_config(6))?;
        Ok((p, o))
    }

    /// Noisy heights at 81 sensors at `t = 2.5`, RBF-filtered onto the
    /// filtered grid and reduced by kPCA.
    pub fn part3(&self) -> Result<InversionReport, PipelineError> {
        let (pred, obs) = self.simulate(self.sensors(), vec![2.5], self.settings.noise_sd)?;
        let coords = self.filtered_coords(self.settings.filtered_count, self.settings.filtered_spacing);
        let (p, o) = self.filter_step(&pred, &obs, 2.5, &coords)?;
        let map = kpca(&p, &self.settings.field_kernel, self.settings.q)?;
        self.invert(map.training_scores(), &qoi_eval(&map, &o)?)
    }

    /// Iterates over the sensor data at `t = 2.5, 3.0, ..., 7.0` with and
    /// without the significance check.
    pub fn part4(&self) -> Result<IterativeReport, PipelineError> {
        let times: Vec<f64> = (5..=14).map(|i| 0.5 * i as f64).collect();
        let (pred, obs) = self.simulate(self.sensors(), times.clone(), self.settings.noise_sd)?;
        let coords = self.filtered_coords(self.settings.filtered_count, self.settings.filtered_spacing);
        let mut states = [InversionState::new(self.initial.clone()), InversionState::new(self.initial.clone())];
        let mut series: [Vec<(String, TvSummary)>; 2] = [Vec::new(), Vec::new()];
        for &t in &times {
            let (p, o) = self.filter_step(&pred, &obs, t, &coords)?;
            for (alg, state) in states.iter_mut().enumerate() {
                let cfg = IterateConfig {
                    d: self.settings.q,
                    tol: self.settings.tol,
                    significance_check: alg == 1,
                    kernel: self.settings.field_kernel.clone(),
                    bandwidth: BandwidthRule::Scott,
                };
                let label = format!("{t:.1}");
                let (rec, _) = iterate(state, &label, &p, &o, &cfg)?;
                if rec.decision != inversion::Decision::Discarded {
                    series[alg].push((label, self.tv_of_weights(&state.r)?));
                }
            }
        }
        let [s1, s2] = states;
        let [t1, t2] = series;
        let trace = |s: InversionState, tv_series| -> Result<IterationTrace, PipelineError> {
            Ok(IterationTrace {
                final_report: InversionReport { diagnostic: s.diagnostic(), tv: self.tv_of_weights(&s.r)?, r: s.r.clone() },
                records: s.history,
                tv_series,
            })
        };
        Ok(IterativeReport { without_significance: trace(s1, t1)?, with_significance: trace(s2, t2)? })
    }

    /// Fits each predicted sample once at `t = 2.5` and compares the QoI
    /// learned on a coarse and a fine pair of filtered grids. Grids are given
    /// as points per side of sub-meshes of the solver mesh.
    pub fn part5(&self, coarse: (usize, usize), fine: (usize, usize)) -> Result<(SufficiencyReport, SufficiencyReport), PipelineError> {
        let (pred, _) = self.simulate(self.sensors(), vec![2.5], self.settings.noise_sd)?;
        let slice = pred.restrict(2, 2.5);
        let base = self.filtered_coords(1, 1.0);
        let (_, models) = filter_ensemble_models(&slice, &base, &self.filter_config(5))?;
        let models = Arc::new(models);
        let length = self.settings.wave.length;
        let learn = |n: usize| -> Result<dci_core::kpca::QoiMap, PipelineError> {
            let coords = self.filtered_coords(n, length / (n + 1) as f64);
            let mut data = Vec::with_capacity(models.len() * coords.len());
            for m in models.iter() {
                data.extend(evaluate_filter(m, &coords)?);
            }
            let f = FilteredEnsemble::new(coords.clone(), Points::new(coords.len(), data));
            Ok(kpca(&f, &self.settings.field_kernel, self.settings.q)?)
        };
        let (a, b, c, d) = (learn(coarse.0)?, learn(coarse.1)?, learn(fine.0)?, learn(fine.1)?);
        Ok((sufficiency_test(&a, &b, 0.85, 0.70)?, sufficiency_test(&c, &d, 0.85, 0.70)?))
    }
}
