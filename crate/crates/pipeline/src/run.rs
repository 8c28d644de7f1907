//! Stage orchestration, observed-data inversion against a saved state, and
//! the artifacts a run writes.
//!
//! Output directory contents:
//!
//! | file | written when |
//! |---|---|
//! | `state.msgpack` | always (`state.partial.msgpack` if a stage fails) |
//! | `filtered_predicted.csv`, `filtered_observed.csv` | `output.write_filtered` |
//! | `qoi.csv` | learn stage ran |
//! | `diagnostics.csv`, `weights.csv` | invert stage ran |
//! | `qoi_density_<k>.csv` | invert stage ran and `q <= 2` |
//! | `iterations.csv` | iterate stage ran |
//! | `density_<name>.csv`, `density_joint.csv` | weights exist |
//! | `manifest.json` | always |

use std::path::{Path, PathBuf};

use dci_core::clustering::{observed_weights, ClusterModel};
use dci_core::densities::{tv_from_values, BandwidthRule, DensityEstimate, QuadratureGrid};
use dci_core::filtering::{evaluate_filter, filter_ensemble, filter_ensemble_models, FilterConfig};
use dci_core::inversion::{self, ClusterInput, Decision, InversionState, IterationRecord};
use dci_core::iterative::{iterate, IterateConfig};
use dci_core::kpca::{kpca, qoi_eval_rows, QoiMap};
use dci_core::sufficiency::{sufficiency_test, SufficiencyReport};
use dci_core::{DataEnsemble, FilteredEnsemble, Points};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ClusterMethod, PipelineConfig, Slice};
use crate::error::PipelineError;
use crate::io::{read_ensemble, read_points, write_atomic, write_ensemble, write_table, Cell, Layout};
use crate::seed_for;
use crate::state::{PersistedState, FORMAT_VERSION};

pub const STATE_FILE: &str = "state.msgpack";
pub const PARTIAL_STATE_FILE: &str = "state.partial.msgpack";

/// Raw inputs named by a config.
pub struct Inputs {
    pub names: Vec<String>,
    pub params: Points,
    pub predicted: DataEnsemble,
    pub observed: Option<DataEnsemble>,
    pub reference: Option<Points>,
}

impl Inputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let (names, params) = read_points(&cfg.data.params)?;
        let predicted = read_ensemble(&cfg.data.predicted, cfg.data.layout)?;
        if predicted.len() != params.len() {
            return Err(PipelineError::Config(format!("{} parameter rows but {} predicted rows", params.len(), predicted.len())));
        }
        let observed = if cfg.stages.invert || cfg.stages.iterate { Some(read_ensemble(&cfg.data.observed, cfg.data.layout)?) } else { None };
        let reference = match &cfg.data.reference {
            Some(p) => {
                let (_, r) = read_points(p)?;
                if r.dim() != params.dim() {
                    return Err(PipelineError::Config(format!("reference has {} columns, parameters {}", r.dim(), params.dim())));
                }
                Some(r)
            }
            None => None,
        };
        Ok(Self { names, params, predicted, observed, reference })
    }
}

pub fn apply_slice(data: &DataEnsemble, slice: Option<Slice>) -> Result<DataEnsemble, PipelineError> {
    let Some(s) = slice else { return Ok(data.clone()) };
    if data.dim() < 2 || s.axis >= data.dim() {
        return Err(PipelineError::Config(format!("cannot slice axis {} of {}-dimensional data", s.axis, data.dim())));
    }
    let out = data.restrict(s.axis, s.value);
    if let Some(i) = out.samples().iter().position(|x| x.values.is_empty()) {
        return Err(PipelineError::Config(format!("sample {i} has no data at axis {} = {}", s.axis, s.value)));
    }
    Ok(out)
}

fn filter_config(cfg: &PipelineConfig, stream: u64) -> FilterConfig {
    FilterConfig { method: cfg.filter.method, seed: seed_for(cfg.seed, stream) }
}

/// Filters onto the configured coordinates, or uses the raw data as is when
/// the filter stage is off.
pub fn prepare(cfg: &PipelineConfig, data: &DataEnsemble, stream: u64) -> Result<FilteredEnsemble, PipelineError> {
    if cfg.stages.filter {
        Ok(filter_ensemble(data, &cfg.filter.coords.points(), &filter_config(cfg, stream))?)
    } else {
        Ok(data.to_filtered()?)
    }
}

/// Per-cluster outcome of inverting one observed data set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterDiagnostic {
    pub cluster: usize,
    pub members: usize,
    pub observed: usize,
    pub weight: f64,
    /// Mean ratio over the cluster's members; `None` without observations.
    pub diagnostic: Option<f64>,
    pub significance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    /// Weighted mean ratio over all initial samples.
    pub diagnostic: f64,
    pub significance: f64,
    pub clusters: Vec<ClusterDiagnostic>,
    pub r: Vec<f64>,
    /// Observed QoI densities, per cluster.
    pub observed_densities: Vec<Option<DensityEstimate>>,
}

/// Classifies filtered observations and inverts them against the trained
/// predicted side of `state`. Fits only the observed densities.
pub fn invert_filtered(state: &PersistedState, obs: &FilteredEnsemble) -> Result<Inversion, PipelineError> {
    if !state.is_trained() {
        return Err(PipelineError::Config("state has no trained QoI maps and predicted densities".into()));
    }
    let model = state.clusters.as_ref().expect("trained");
    let expected = state.predicted.as_ref().map_or(obs.n_features(), FilteredEnsemble::n_features);
    if obs.n_features() != expected {
        return Err(PipelineError::Config(format!("observed data have {} features, predicted {}", obs.n_features(), expected)));
    }
    let bandwidth = state.config.invert.bandwidth;
    let labels = model.classify(obs.matrix())?;
    let w = observed_weights(&labels, model.k)?;
    let members = model.members();
    let mut inputs = Vec::with_capacity(model.k);
    let mut observed_densities = Vec::with_capacity(model.k);
    let mut clusters = Vec::with_capacity(model.k);
    for k in 0..model.k {
        let idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| i).collect();
        let (obs_kde, diag, sig) = if idx.is_empty() {
            (None, None, None)
        } else if idx.len() == 1 {
            return Err(PipelineError::SparseCluster { cluster: k, observed: 1 });
        } else {
            let rows = obs.matrix().select_rows(&idx);
            let q = match &state.maps[k] {
                Some(map) => qoi_eval_rows(map, &rows),
                None => rows,
            };
            let kde = DensityEstimate::fit(&q, None, bandwidth)?;
            let r = inversion::compute_ratio(&kde, &state.predicted_densities[k], &state.predicted_qoi[k])?;
            (Some(kde), Some(inversion::diagnostic(&r)?), Some(inversion::significance(&r)?))
        };
        clusters.push(ClusterDiagnostic { cluster: k, members: members[k].len(), observed: idx.len(), weight: w[k], diagnostic: diag, significance: sig });
        inputs.push(ClusterInput {
            members: members[k].clone(),
            obs: obs_kde.clone(),
            pred: state.predicted_densities[k].clone(),
            q: state.predicted_qoi[k].clone(),
        });
        observed_densities.push(obs_kde);
    }
    let r = inversion::clustered_update(state.params.len(), &inputs, &w)?;
    Ok(Inversion { diagnostic: inversion::diagnostic(&r)?, significance: inversion::significance(&r)?, clusters, r, observed_densities })
}

/// TV distances between the weighted KDE of the initial samples and the KDE
/// of reference samples, on the bounding box of the initial samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TvReport {
    /// Only for one or two parameters.
    pub joint: Option<f64>,
    pub marginals: Vec<f64>,
}

pub struct Scoring {
    joint_grid: Option<QuadratureGrid>,
    marginal_grids: Vec<QuadratureGrid>,
    reference_joint: Option<Vec<f64>>,
    reference_marginals: Option<Vec<Vec<f64>>>,
}

fn bounds(p: &Points) -> (Vec<f64>, Vec<f64>) {
    let lo = (0..p.dim()).map(|j| p.rows().fold(f64::INFINITY, |m, r| m.min(r[j]))).collect();
    let hi = (0..p.dim()).map(|j| p.rows().fold(f64::NEG_INFINITY, |m, r| m.max(r[j]))).collect();
    (lo, hi)
}

impl Scoring {
    pub fn new(params: &Points, reference: Option<&Points>, cells: usize, marginal_cells: usize) -> Result<Self, PipelineError> {
        let (lo, hi) = bounds(params);
        let joint_grid = if params.dim() <= 2 { Some(QuadratureGrid::uniform(&lo, &hi, &vec![cells; params.dim()])?) } else { None };
        let marginal_grids = (0..params.dim()).map(|j| QuadratureGrid::uniform(&[lo[j]], &[hi[j]], &[marginal_cells])).collect::<Result<Vec<_>, _>>()?;
        let (mut reference_joint, mut reference_marginals) = (None, None);
        if let Some(r) = reference {
            if let Some(g) = &joint_grid {
                reference_joint = Some(DensityEstimate::fit(r, None, BandwidthRule::Scott)?.eval(g.nodes())?);
            }
            let mut m = Vec::with_capacity(r.dim());
            for (j, g) in marginal_grids.iter().enumerate() {
                m.push(DensityEstimate::fit(&r.select_columns(&[j]), None, BandwidthRule::Scott)?.eval(g.nodes())?);
            }
            reference_marginals = Some(m);
        }
        Ok(Self { joint_grid, marginal_grids, reference_joint, reference_marginals })
    }

    pub fn has_reference(&self) -> bool {
        self.reference_marginals.is_some()
    }

    /// Joint (when available) and marginal densities of the weighted KDE.
    pub fn densities(&self, params: &Points, r: &[f64]) -> Result<(Option<Vec<f64>>, Vec<Vec<f64>>), PipelineError> {
        let joint = match &self.joint_grid {
            Some(g) => Some(DensityEstimate::fit(params, Some(r), BandwidthRule::Scott)?.eval(g.nodes())?),
            None => None,
        };
        let mut marg = Vec::with_capacity(params.dim());
        for (j, g) in self.marginal_grids.iter().enumerate() {
            marg.push(DensityEstimate::fit(&params.select_columns(&[j]), Some(r), BandwidthRule::Scott)?.eval(g.nodes())?);
        }
        Ok((joint, marg))
    }

    pub fn tv(&self, params: &Points, r: &[f64]) -> Result<Option<TvReport>, PipelineError> {
        let Some(ref_m) = &self.reference_marginals else { return Ok(None) };
        let (joint, marg) = self.densities(params, r)?;
        let joint = match (joint, &self.reference_joint, &self.joint_grid) {
            (Some(f), Some(g), Some(grid)) => Some(tv_from_values(&f, g, grid)),
            _ => None,
        };
        let marginals = marg.iter().zip(ref_m).zip(&self.marginal_grids).map(|((f, g), grid)| tv_from_values(f, g, grid)).collect();
        Ok(Some(TvReport { joint, marginals }))
    }

    /// Writes `density_<name>.csv` per parameter and `density_joint.csv`
    /// for two parameters: initial (unweighted KDE), updated and reference.
    pub fn export(&self, dir: &Path, names: &[String], params: &Points, r: &[f64]) -> Result<Vec<PathBuf>, PipelineError> {
        let ones = vec![1.0; params.len()];
        let (init_j, init_m) = self.densities(params, &ones)?;
        let (upd_j, upd_m) = self.densities(params, r)?;
        let mut written = Vec::new();
        let with_ref = self.has_reference();
        for (j, g) in self.marginal_grids.iter().enumerate() {
            let path = dir.join(format!("density_{}.csv", file_safe(&names[j])));
            let mut rows = Vec::with_capacity(g.nodes().len());
            for (i, x) in g.nodes().rows().enumerate() {
                let mut row = vec![Cell::Num(x[0]), Cell::Num(init_m[j][i]), Cell::Num(upd_m[j][i])];
                if let Some(m) = &self.reference_marginals {
                    row.push(Cell::Num(m[j][i]));
                }
                rows.push(row);
            }
            let header: &[&str] = if with_ref { &["x", "initial", "updated", "reference"] } else { &["x", "initial", "updated"] };
            write_table(&path, header, &rows)?;
            written.push(path);
        }
        if let (Some(g), Some(ij), Some(uj), 2) = (&self.joint_grid, init_j, upd_j, params.dim()) {
            let path = dir.join("density_joint.csv");
            let mut rows = Vec::with_capacity(g.nodes().len());
            for (i, x) in g.nodes().rows().enumerate() {
                let mut row = vec![Cell::Num(x[0]), Cell::Num(x[1]), Cell::Num(ij[i]), Cell::Num(uj[i])];
                if let Some(rj) = &self.reference_joint {
                    row.push(Cell::Num(rj[i]));
                }
                rows.push(row);
            }
            let (n0, n1) = (names[0].as_str(), names[1].as_str());
            let header: Vec<&str> = if with_ref { vec![n0, n1, "initial", "updated", "reference"] } else { vec![n0, n1, "initial", "updated"] };
            write_table(&path, &header, &rows)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// What a run produced, beyond the files on disk.
#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub state: PersistedState,
    pub inversion: Option<Inversion>,
    pub inversion_tv: Option<TvReport>,
    pub iterations: Vec<IterationRecord>,
    /// TV after each iteration step that was not discarded.
    pub tv_series: Vec<(String, TvReport)>,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    version: &'a str,
    config_hash: String,
    seed: u64,
    stages: Vec<&'a str>,
    files: Vec<(String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(cfg: &PipelineConfig, stages: Vec<&str>, files: &[PathBuf]) -> Result<PathBuf, PipelineError> {
    let mut entries = Vec::with_capacity(files.len());
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| PipelineError::io(f, e))?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        entries.push((name, sha256_hex(&bytes)));
    }
    entries.sort();
    let m = Manifest { format_version: FORMAT_VERSION, version: env!("CARGO_PKG_VERSION"), config_hash: cfg.hash()?, seed: cfg.seed, stages, files: entries };
    let path = cfg.output.dir.join("manifest.json");
    let mut text = serde_json::to_vec_pretty(&m)?;
    text.push(b'\n');
    write_atomic(&path, &text)?;
    Ok(path)
}

fn diagnostics_rows(inv: &Inversion, tv: Option<&TvReport>) -> Vec<Vec<Cell>> {
    let opt = |v: Option<f64>| v.map_or(Cell::Empty, Cell::Num);
    let mut rows: Vec<Vec<Cell>> = inv
        .clusters
        .iter()
        .map(|c| vec![Cell::Int(c.cluster), Cell::Int(c.members), Cell::Int(c.observed), Cell::Num(c.weight), opt(c.diagnostic), opt(c.significance), Cell::Empty])
        .collect();
    let observed = inv.clusters.iter().map(|c| c.observed).sum();
    rows.push(vec![
        Cell::Text("all".into()),
        Cell::Int(inv.r.len()),
        Cell::Int(observed),
        Cell::Num(1.0),
        Cell::Num(inv.diagnostic),
        Cell::Num(inv.significance),
        opt(tv.and_then(|t| t.joint)),
    ]);
    rows
}

pub const DIAGNOSTICS_HEADER: [&str; 7] = ["cluster", "members", "observed", "weight", "diagnostic", "significance", "tv_joint"];

/// Writes `diagnostics.csv` and `weights.csv` for one inversion into `dir`.
pub fn write_inversion(dir: &Path, names: &[String], params: &Points, inv: &Inversion, tv: Option<&TvReport>) -> Result<Vec<PathBuf>, PipelineError> {
    let diag = dir.join("diagnostics.csv");
    write_table(&diag, &DIAGNOSTICS_HEADER, &diagnostics_rows(inv, tv))?;
    let weights = dir.join("weights.csv");
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    header.push("r");
    let rows: Vec<Vec<Cell>> = params.rows().zip(&inv.r).map(|(p, r)| p.iter().map(|v| Cell::Num(*v)).chain([Cell::Num(*r)]).collect()).collect();
    write_table(&weights, &header, &rows)?;
    Ok(vec![diag, weights])
}

fn write_qoi(path: &Path, state: &PersistedState) -> Result<(), PipelineError> {
    let q = state.predicted_qoi.iter().map(Points::dim).max().unwrap_or(0);
    let mut header = vec!["sample".to_string(), "cluster".to_string()];
    header.extend((0..q).map(|i| format!("q{i}")));
    let members = state.clusters.as_ref().map(ClusterModel::members).unwrap_or_default();
    let mut rows: Vec<(usize, Vec<Cell>)> = Vec::new();
    for (k, m) in members.iter().enumerate() {
        for (pos, &i) in m.iter().enumerate() {
            let mut row = vec![Cell::Int(i), Cell::Int(k)];
            row.extend(state.predicted_qoi[k].row(pos).iter().map(|v| Cell::Num(*v)));
            row.resize(q + 2, Cell::Empty);
            rows.push((i, row));
        }
    }
    rows.sort_by_key(|(i, _)| *i);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(path, &header, &rows.into_iter().map(|(_, r)| r).collect::<Vec<_>>())
}

fn write_qoi_densities(dir: &Path, state: &PersistedState, inv: &Inversion, cells: usize, marginal_cells: usize) -> Result<Vec<PathBuf>, PipelineError> {
    let mut written = Vec::new();
    for (k, pred) in state.predicted_densities.iter().enumerate() {
        let q = pred.dim();
        if q > 2 {
            continue;
        }
        let (lo, hi) = bounds(&state.predicted_qoi[k]);
        let n = if q == 1 { marginal_cells } else { cells };
        let grid = QuadratureGrid::uniform(&lo, &hi, &vec![n; q])?;
        let p = pred.eval(grid.nodes())?;
        let o = match &inv.observed_densities[k] {
            Some(d) => Some(d.eval(grid.nodes())?),
            None => None,
        };
        let rows: Vec<Vec<Cell>> = grid
            .nodes()
            .rows()
            .enumerate()
            .map(|(i, x)| x.iter().map(|v| Cell::Num(*v)).chain([Cell::Num(p[i]), o.as_ref().map_or(Cell::Empty, |o| Cell::Num(o[i]))]).collect())
            .collect();
        let header: Vec<&str> = if q == 1 { vec!["q0", "predicted", "observed"] } else { vec!["q0", "q1", "predicted", "observed"] };
        let path = dir.join(format!("qoi_density_{k}.csv"));
        write_table(&path, &header, &rows)?;
        written.push(path);
    }
    Ok(written)
}

fn tv_cells(t: Option<&TvReport>, n_params: usize) -> Vec<Cell> {
    match t {
        Some(t) => std::iter::once(t.joint.map_or(Cell::Empty, Cell::Num)).chain(t.marginals.iter().map(|v| Cell::Num(*v))).collect(),
        None => vec![Cell::Empty; n_params + 1],
    }
}

fn write_iterations(path: &Path, names: &[String], records: &[IterationRecord], tvs: &[Option<TvReport>]) -> Result<(), PipelineError> {
    let mut header: Vec<String> = ["step", "label", "d_used", "diagnostic", "significance", "decision", "tv_joint"].map(String::from).to_vec();
    header.extend(names.iter().map(|n| format!("tv_{n}")));
    let rows: Vec<Vec<Cell>> = records
        .iter()
        .zip(tvs)
        .enumerate()
        .map(|(i, (r, t))| {
            let decision = match r.decision {
                Decision::Accepted => "accepted",
                Decision::Reduced => "reduced",
                Decision::Discarded => "discarded",
            };
            let mut row = vec![Cell::Int(i), Cell::Text(r.label.clone()), Cell::Int(r.d_used), Cell::Num(r.diagnostic), Cell::Num(r.significance), Cell::Text(decision.into())];
            row.extend(tv_cells(t.as_ref(), names.len()));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(path, &header, &rows)
}

fn staged<T>(name: &'static str, f: impl FnOnce() -> Result<T, PipelineError>) -> Result<T, PipelineError> {
    f().map_err(|e| e.in_stage(name))
}

/// Trains the cluster model, QoI maps and predicted densities on filtered
/// predicted data.
fn train(cfg: &PipelineConfig, state: &mut PersistedState, pred: &FilteredEnsemble) -> Result<(), PipelineError> {
    staged("cluster", || {
        let model = match (&cfg.cluster.method, cfg.stages.cluster) {
            (_, false) => ClusterModel::single(pred.len()),
            (ClusterMethod::Kmeans { k }, true) => ClusterModel::from_kmeans(pred.matrix(), *k, seed_for(cfg.seed, 7), &cfg.cluster.svm)?,
            (ClusterMethod::Rule { rule }, true) => ClusterModel::from_rule(&state.params, pred.matrix(), rule.clone(), &cfg.cluster.svm)?,
        };
        state.clusters = Some(model);
        Ok(())
    })?;
    staged("learn", || {
        let members = state.clusters.as_ref().expect("clustered").members();
        let (mut maps, mut qois, mut dens) = (Vec::new(), Vec::new(), Vec::new());
        for m in &members {
            let sub = pred.select(m);
            let (map, q): (Option<QoiMap>, Points) = if cfg.stages.learn {
                let map = kpca(&sub, &cfg.learn.kernel, cfg.learn.q)?;
                let q = map.training_scores().clone();
                (Some(map), q)
            } else {
                (None, sub.matrix().clone())
            };
            dens.push(DensityEstimate::fit(&q, None, cfg.invert.bandwidth)?);
            maps.push(map);
            qois.push(q);
        }
        state.maps = maps;
        state.predicted_qoi = qois;
        state.predicted_densities = dens;
        Ok(())
    })
}

fn stage_names(cfg: &PipelineConfig) -> Vec<&'static str> {
    let s = cfg.stages;
    [("filter", s.filter), ("cluster", s.cluster), ("learn", s.learn), ("invert", s.invert), ("iterate", s.iterate)]
        .into_iter()
        .filter(|(_, on)| *on)
        .map(|(n, _)| n)
        .collect()
}

/// Executes the enabled stages in order and writes the run's artifacts to
/// `cfg.output.dir`. When a stage fails, whatever state was built is saved
/// to `state.partial.msgpack` and the error names the stage.
pub fn run(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    staged("config", || cfg.validate())?;
    let out = cfg.output.dir.clone();
    let inputs = staged("ingest", || Inputs::load(cfg))?;
    let mut state = PersistedState::new(cfg.clone(), inputs.names.clone(), inputs.params.clone());
    state.slice = cfg.base_slice();
    let mut summary = Collected::default();
    match execute(cfg, &inputs, &mut state, &mut summary) {
        Ok(()) => {
            let path = out.join(STATE_FILE);
            state.save(&path)?;
            summary.files.push(path);
            let manifest = write_manifest(cfg, stage_names(cfg), &summary.files)?;
            summary.files.push(manifest);
            Ok(RunSummary {
                out_dir: out,
                state,
                inversion: summary.inversion,
                inversion_tv: summary.inversion_tv,
                iterations: summary.iterations,
                tv_series: summary.tv_series,
                files: summary.files,
            })
        }
        Err(e) => {
            if let Err(save) = state.save(&out.join(PARTIAL_STATE_FILE)) {
                log::error!("could not save partial state: {save}");
            }
            Err(e)
        }
    }
}

#[derive(Default)]
struct Collected {
    inversion: Option<Inversion>,
    inversion_tv: Option<TvReport>,
    iterations: Vec<IterationRecord>,
    tv_series: Vec<(String, TvReport)>,
    files: Vec<PathBuf>,
}

fn execute(cfg: &PipelineConfig, inputs: &Inputs, state: &mut PersistedState, summary: &mut Collected) -> Result<(), PipelineError> {
    let out = &cfg.output.dir;
    let needs_obs = cfg.stages.invert || cfg.stages.iterate;
    let (pred_f, obs_f) = staged("filter", || {
        let pred = prepare(cfg, &apply_slice(&inputs.predicted, state.slice)?, 5)?;
        let obs = match (&inputs.observed, needs_obs) {
            (Some(o), true) => Some(prepare(cfg, &apply_slice(o, state.slice)?, 6)?),
            _ => None,
        };
        if cfg.output.write_filtered {
            for (name, f) in [("filtered_predicted.csv", Some(&pred)), ("filtered_observed.csv", obs.as_ref())] {
                if let Some(f) = f {
                    let rows = f.matrix().rows().map(<[f64]>::to_vec).collect();
                    let path = out.join(name);
                    write_ensemble(&path, &DataEnsemble::with_shared_coords(f.coords().clone(), rows)?)?;
                    summary.files.push(path);
                }
            }
        }
        Ok((pred, obs))
    })?;
    state.filtered_coords = cfg.stages.filter.then(|| pred_f.coords().clone());
    state.predicted = Some(pred_f.clone());
    train(cfg, state, &pred_f)?;
    let qoi = out.join("qoi.csv");
    write_qoi(&qoi, state)?;
    summary.files.push(qoi);

    let scoring = if inputs.reference.is_some() || cfg.stages.invert || cfg.stages.iterate {
        Some(Scoring::new(&inputs.params, inputs.reference.as_ref(), cfg.output.grid_cells, cfg.output.marginal_cells)?)
    } else {
        None
    };

    if cfg.stages.invert {
        staged("invert", || {
            let obs = obs_f.as_ref().ok_or_else(|| PipelineError::Config("no observed data".into()))?;
            let inv = invert_filtered(state, obs)?;
            let tv = scoring.as_ref().map(|s| s.tv(&inputs.params, &inv.r)).transpose()?.flatten();
            summary.files.extend(write_inversion(out, &inputs.names, &inputs.params, &inv, tv.as_ref())?);
            summary.files.extend(write_qoi_densities(out, state, &inv, cfg.output.grid_cells, cfg.output.marginal_cells)?);
            state.inversion = Some(InversionState { params: inputs.params.clone(), r: inv.r.clone(), history: Vec::new() });
            summary.inversion = Some(inv);
            summary.inversion_tv = tv;
            Ok(())
        })?;
    }

    if cfg.stages.iterate {
        staged("iterate", || {
            let observed = inputs.observed.as_ref().ok_or_else(|| PipelineError::Config("no observed data".into()))?;
            let mut st = InversionState::new(inputs.params.clone());
            let icfg = IterateConfig {
                d: cfg.learn.q,
                tol: cfg.iterate.tol,
                significance_check: cfg.iterate.significance,
                kernel: cfg.learn.kernel.clone(),
                bandwidth: cfg.invert.bandwidth,
            };
            let mut tvs = Vec::with_capacity(cfg.iterate.steps.len());
            for &t in &cfg.iterate.steps {
                let slice = Some(Slice { axis: cfg.iterate.axis, value: t });
                let reuse = slice == state.slice;
                let (p, o) = match (&obs_f, reuse) {
                    (Some(o), true) => (pred_f.clone(), o.clone()),
                    _ => (prepare(cfg, &apply_slice(&inputs.predicted, slice)?, 5)?, prepare(cfg, &apply_slice(observed, slice)?, 6)?),
                };
                let label = format!("{t}");
                let (rec, _) = iterate(&mut st, &label, &p, &o, &icfg)?;
                let tv = match (&scoring, rec.decision) {
                    (Some(s), d) if d != Decision::Discarded => s.tv(&inputs.params, &st.r)?,
                    _ => None,
                };
                if let Some(t) = &tv {
                    summary.tv_series.push((label.clone(), t.clone()));
                }
                log::info!("step {label}: {:?} d={} diagnostic {:.4}", rec.decision, rec.d_used, rec.diagnostic);
                tvs.push(tv);
            }
            let path = out.join("iterations.csv");
            write_iterations(&path, &inputs.names, &st.history, &tvs)?;
            summary.files.push(path);
            summary.iterations = st.history.clone();
            state.iteration = Some(st);
            Ok(())
        })?;
    }

    if let (Some(s), Some(r)) = (&scoring, state.final_r()) {
        summary.files.extend(staged("export", || s.export(out, &inputs.names, &inputs.params, r))?);
    }
    Ok(())
}

/// Outcome of [`apply_observations`].
#[derive(Debug)]
pub struct ApplyReport {
    pub inversion: Inversion,
    pub tv: Option<TvReport>,
}

/// Filters and classifies a new observed data set and inverts it against a
/// saved state. Predicted-side quantities are read from the state, never
/// recomputed.
pub fn apply_observations(state_path: &Path, obs_path: &Path, layout: Layout, reference: Option<&Path>) -> Result<ApplyReport, PipelineError> {
    let state = PersistedState::load(state_path)?;
    let obs = read_ensemble(obs_path, layout)?;
    apply_to_state(&state, &obs, reference.map(read_points).transpose()?.map(|(_, p)| p).as_ref())
}

pub fn apply_to_state(state: &PersistedState, obs: &DataEnsemble, reference: Option<&Points>) -> Result<ApplyReport, PipelineError> {
    let cfg = &state.config;
    let obs = apply_slice(obs, state.slice)?;
    let filtered = match &state.filtered_coords {
        Some(c) => filter_ensemble(&obs, c, &filter_config(cfg, 6))?,
        None => obs.to_filtered()?,
    };
    let inversion = invert_filtered(state, &filtered)?;
    let tv = match reference {
        Some(r) => Scoring::new(&state.params, Some(r), cfg.output.grid_cells, cfg.output.marginal_cells)?.tv(&state.params, &inversion.r)?,
        None => None,
    };
    Ok(ApplyReport { inversion, tv })
}

/// Runs [`apply_observations`] and writes `diagnostics.csv` and
/// `weights.csv` to `out`.
pub fn apply_and_write(state_path: &Path, obs_path: &Path, layout: Layout, reference: Option<&Path>, out: &Path) -> Result<(ApplyReport, Vec<PathBuf>), PipelineError> {
    let state = PersistedState::load(state_path)?;
    let obs = read_ensemble(obs_path, layout)?;
    let reference = reference.map(read_points).transpose()?.map(|(_, p)| p);
    let report = apply_to_state(&state, &obs, reference.as_ref())?;
    let files = write_inversion(out, &state.param_names, &state.params, &report.inversion, report.tv.as_ref())?;
    Ok((report, files))
}

/// Filters the predicted data, and the observed data when the file exists,
/// writing `filtered_predicted.csv` and `filtered_observed.csv` to the
/// output directory.
pub fn filter_only(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    staged("config", || cfg.validate_values())?;
    staged("filter", || {
        let slice = cfg.base_slice();
        let mut inputs = vec![("filtered_predicted.csv", read_ensemble(&cfg.data.predicted, cfg.data.layout)?, 5)];
        if cfg.data.observed.exists() {
            inputs.push(("filtered_observed.csv", read_ensemble(&cfg.data.observed, cfg.data.layout)?, 6));
        }
        let mut written = Vec::new();
        for (name, data, stream) in inputs {
            let f = prepare(cfg, &apply_slice(&data, slice)?, stream)?;
            let rows = f.matrix().rows().map(<[f64]>::to_vec).collect();
            let path = cfg.output.dir.join(name);
            write_ensemble(&path, &DataEnsemble::with_shared_coords(f.coords().clone(), rows)?)?;
            written.push(path);
        }
        Ok(written)
    })
}

/// Writes initial, updated and (with `reference`) reference densities for
/// the final weights of a saved state.
pub fn export_densities(state_path: &Path, reference: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let state = PersistedState::load(state_path)?;
    let r = state.final_r().ok_or_else(|| PipelineError::State("state holds no inversion weights".into()))?;
    let reference = reference.map(read_points).transpose()?.map(|(_, p)| p);
    let cfg = &state.config.output;
    Scoring::new(&state.params, reference.as_ref(), cfg.grid_cells, cfg.marginal_cells)?.export(out, &state.param_names, &state.params, r)
}

/// Fits each predicted sample once and compares the QoI learned from its
/// evaluations on the two configured coordinate sets.
pub fn sufficiency(cfg: &PipelineConfig) -> Result<SufficiencyReport, PipelineError> {
    cfg.validate_values()?;
    let (_, params) = read_points(&cfg.data.params)?;
    let predicted = apply_slice(&read_ensemble(&cfg.data.predicted, cfg.data.layout)?, cfg.base_slice())?;
    if predicted.len() != params.len() {
        return Err(PipelineError::Config(format!("{} parameter rows but {} predicted rows", params.len(), predicted.len())));
    }
    let first = cfg.sufficiency.first.points();
    let (_, models) = filter_ensemble_models(&predicted, &first, &filter_config(cfg, 5))?;
    let learn = |coords: &Points| -> Result<QoiMap, PipelineError> {
        let mut data = Vec::with_capacity(models.len() * coords.len());
        for m in &models {
            data.extend(evaluate_filter(m, coords)?);
        }
        Ok(kpca(&FilteredEnsemble::new(coords.clone(), Points::new(coords.len(), data)), &cfg.learn.kernel, cfg.learn.q)?)
    };
    let (a, b) = (learn(&first)?, learn(&cfg.sufficiency.second.points())?);
    Ok(sufficiency_test(&a, &b, cfg.sufficiency.slope, cfg.sufficiency.r_squared)?)
}

pub fn write_sufficiency(path: &Path, report: &SufficiencyReport) -> Result<(), PipelineError> {
    let rows: Vec<Vec<Cell>> = report
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| vec![Cell::Int(i), Cell::Num(c.slope), Cell::Num(c.intercept), Cell::Num(c.r_squared), Cell::Text(report.pass.to_string())])
        .collect();
    write_table(path, &["component", "slope", "intercept", "r_squared", "pass"], &rows)
}
