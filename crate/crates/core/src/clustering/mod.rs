//! Partitioning of predicted samples into clusters (k-means or threshold
//! rules on parameters), a classifier that labels observed data, and the
//! observed cluster weights.

pub mod svm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::points::{sq_dist, Points};

pub use svm::{train_classifier, SvmClassifier, SvmSettings};

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("cluster count must be between 1 and the number of samples ({n}), got {k}")]
    InvalidK { k: usize, n: usize },
    #[error("a cluster stayed empty after {restarts} reseeds")]
    EmptyCluster { restarts: usize },
    #[error("value {value} of component {component} is not covered by any rule interval")]
    UncoveredValue { component: usize, value: f64 },
    #[error("label {label} has {count} samples, need at least {needed}")]
    DegenerateLabels { label: usize, count: usize, needed: usize },
    #[error("label {label} out of range for {k} clusters")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("{rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no labels given")]
    EmptyInput,
    #[error("invalid clustering configuration: {0}")]
    InvalidConfig(String),
}

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_RESTARTS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centroids: Points,
    /// Within-cluster SSE after each assignment step.
    pub objective: Vec<f64>,
}

fn nearest(x: &[f64], centroids: &Points) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seed(data: &Points, k: usize, rng: &mut ChaCha8Rng) -> Points {
    let n = data.len();
    let mut centroids = Points::empty(data.dim());
    centroids.push(data.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = data.rows().map(|x| sq_dist(x, centroids.row(0))).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(data.row(pick));
        let c = centroids.len() - 1;
        for (i, x) in data.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd iterations from k-means++ seeding; deterministic for a given seed.
pub fn kmeans(data: &Points, k: usize, seed: u64) -> Result<KmeansResult, ClusterError> {
    let n = data.len();
    if k == 0 || k > n {
        return Err(ClusterError::InvalidK { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'restart: for _ in 0..=KMEANS_RESTARTS {
        let mut centroids = plus_plus_seed(data, k, &mut rng);
        let mut labels = vec![usize::MAX; n];
        let mut objective = Vec::new();
        for _ in 0..KMEANS_MAX_ITER {
            let mut changed = false;
            let mut sse = 0.0;
            for (i, x) in data.rows().enumerate() {
                let (c, d) = nearest(x, &centroids);
                sse += d;
                if labels[i] != c {
                    labels[i] = c;
                    changed = true;
                }
            }
            objective.push(sse);
            if !changed {
                break;
            }
            let mut sums = vec![0.0; k * data.dim()];
            let mut counts = vec![0usize; k];
            for (x, &l) in data.rows().zip(&labels) {
                counts[l] += 1;
                for (s, v) in sums[l * data.dim()..(l + 1) * data.dim()].iter_mut().zip(x) {
                    *s += v;
                }
            }
            if counts.contains(&0) {
                continue 'restart;
            }
            for (c, &cnt) in counts.iter().enumerate() {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * data.dim()..(c + 1) * data.dim()]) {
                    *dst = s / cnt as f64;
                }
            }
        }
        return Ok(KmeansResult { labels, centroids, objective });
    }
    Err(ClusterError::EmptyCluster { restarts: KMEANS_RESTARTS })
}

/// An interval with per-end closedness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "yes")]
    pub lo_closed: bool,
    #[serde(default = "yes")]
    pub hi_closed: bool,
}

fn yes() -> bool {
    true
}

impl Interval {
    pub fn closed(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_closed: true, hi_closed: true }
    }

    pub fn open(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_closed: false, hi_closed: false }
    }

    pub fn contains(&self, v: f64) -> bool {
        let above = if self.lo_closed { v >= self.lo } else { v > self.lo };
        let below = if self.hi_closed { v <= self.hi } else { v < self.hi };
        above && below
    }
}

/// Labels a sample by which interval holds one of its components; interval
/// `i` is label `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub component: usize,
    pub intervals: Vec<Interval>,
}

impl ThresholdRule {
    pub fn label(&self, v: f64) -> Result<usize, ClusterError> {
        self.intervals
            .iter()
            .position(|iv| iv.contains(v))
            .ok_or(ClusterError::UncoveredValue { component: self.component, value: v })
    }
}

pub fn label_by_rule(params: &Points, rule: &ThresholdRule) -> Result<Vec<usize>, ClusterError> {
    if rule.component >= params.dim() {
        return Err(ClusterError::DimensionMismatch { expected: rule.component + 1, got: params.dim() });
    }
    params.rows().map(|p| rule.label(p[rule.component])).collect()
}

/// Fraction of observed labels in each of `k` clusters. The last nonempty
/// cluster absorbs rounding so the weights sum to exactly 1.
pub fn observed_weights(labels: &[usize], k: usize) -> Result<Vec<f64>, ClusterError> {
    if labels.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(ClusterError::LabelOutOfRange { label: l, k });
        }
        counts[l] += 1;
    }
    let total = labels.len() as f64;
    let mut w: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let last = counts.iter().rposition(|&c| c > 0).expect("labels are nonempty");
    let head: f64 = w[..last].iter().sum();
    w[last] = 1.0 - head;
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Partition {
    /// Everything in one cluster.
    Single,
    Kmeans { centroids: Points },
    Rule { rule: ThresholdRule },
}

/// Labels for the predicted samples plus a classifier for new data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub partition: Partition,
    pub labels: Vec<usize>,
    pub classifier: Option<SvmClassifier>,
}

impl ClusterModel {
    pub fn single(n: usize) -> Self {
        Self { k: 1, partition: Partition::Single, labels: vec![0; n], classifier: None }
    }

    /// k-means on the filtered predicted rows, then a classifier on them.
    pub fn from_kmeans(rows: &Points, k: usize, seed: u64, svm: &SvmSettings) -> Result<Self, ClusterError> {
        if k == 1 {
            return Ok(Self::single(rows.len()));
        }
        let km = kmeans(rows, k, seed)?;
        let classifier = train_classifier(rows, &km.labels, svm)?;
        Ok(Self { k, partition: Partition::Kmeans { centroids: km.centroids }, labels: km.labels, classifier: Some(classifier) })
    }

    /// Rule labels from the parameter samples, then a classifier on the
    /// filtered predicted rows.
    pub fn from_rule(params: &Points, rows: &Points, rule: ThresholdRule, svm: &SvmSettings) -> Result<Self, ClusterError> {
        if params.len() != rows.len() {
            return Err(ClusterError::LengthMismatch { rows: rows.len(), labels: params.len() });
        }
        let labels = label_by_rule(params, &rule)?;
        let k = rule.intervals.len();
        let classifier = train_classifier(rows, &labels, svm)?;
        Ok(Self { k, partition: Partition::Rule { rule }, labels, classifier: Some(classifier) })
    }

    pub fn classify(&self, rows: &Points) -> Result<Vec<usize>, ClusterError> {
        match &self.classifier {
            Some(c) => c.predict(rows),
            None => Ok(vec![0; rows.len()]),
        }
    }

    /// Sample indices belonging to each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            m[l].push(i);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn two_blobs(seed: u64) -> (Points, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Points::empty(3);
        let mut truth = Vec::new();
        for i in 0..80 {
            let c = if i % 2 == 0 { 0.0 } else { 10.0 };
            let row: Vec<f64> = (0..3).map(|_| c + rng.sample::<f64, _>(StandardNormal)).collect();
            p.push(&row);
            truth.push(i % 2);
        }
        (p, truth)
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let (p, _) = two_blobs(1);
        let r = kmeans(&p, 1, 0).unwrap();
        for j in 0..3 {
            let mean = p.column(j).iter().sum::<f64>() / p.len() as f64;
            assert!((r.centroids.row(0)[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_recovered_up_to_permutation() {
        for seed in 0..5 {
            let (p, truth) = two_blobs(seed);
            let r = kmeans(&p, 2, seed).unwrap();
            let flip = r.labels[0] != truth[0];
            for (l, t) in r.labels.iter().zip(&truth) {
                assert_eq!(*l, if flip { 1 - t } else { *t });
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let (p, _) = two_blobs(3);
        assert_eq!(kmeans(&p, 4, 9).unwrap(), kmeans(&p, 4, 9).unwrap());
    }

    #[test]
    fn too_few_distinct_points_exhausts_reseeds() {
        let p = Points::from_rows(&[[1.0], [1.0], [1.0], [2.0]]);
        assert_eq!(kmeans(&p, 3, 0).unwrap_err(), ClusterError::EmptyCluster { restarts: KMEANS_RESTARTS });
        assert_eq!(kmeans(&p, 5, 0).unwrap_err(), ClusterError::InvalidK { k: 5, n: 4 });
    }

    fn table_rule() -> ThresholdRule {
        ThresholdRule {
            component: 0,
            intervals: vec![Interval::closed(-0.2, -0.075), Interval::open(-0.075, 0.075), Interval::closed(0.075, 0.2)],
        }
    }

    #[test]
    fn rule_thresholds() {
        let r = table_rule();
        assert_eq!(r.label(-0.1).unwrap(), 0);
        assert_eq!(r.label(0.0).unwrap(), 1);
        assert_eq!(r.label(0.2).unwrap(), 2);
        assert_eq!(r.label(-0.075).unwrap(), 0);
        assert_eq!(r.label(0.075).unwrap(), 2);
        assert_eq!(r.label(0.3).unwrap_err(), ClusterError::UncoveredValue { component: 0, value: 0.3 });
        let p = Points::from_rows(&[[0.1, 9.0], [-0.15, 0.0]]);
        assert_eq!(label_by_rule(&p, &r).unwrap(), vec![2, 0]);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(observed_weights(&[0, 0, 0], 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(observed_weights(&[0, 0, 1, 1], 2).unwrap(), vec![0.5, 0.5]);
        assert_eq!(observed_weights(&[], 2).unwrap_err(), ClusterError::EmptyInput);
        assert_eq!(observed_weights(&[2], 2).unwrap_err(), ClusterError::LabelOutOfRange { label: 2, k: 2 });
    }

    #[test]
    fn model_members_partition_samples() {
        let (p, _) = two_blobs(4);
        let svm = SvmSettings { c_grid: vec![10.0], gamma_grid: vec![1.0], ..Default::default() };
        let m = ClusterModel::from_kmeans(&p, 2, 1, &svm).unwrap();
        let members = m.members();
        assert_eq!(members.iter().map(Vec::len).sum::<usize>(), p.len());
        assert_eq!(m.classify(&p).unwrap(), m.labels);
        assert_eq!(ClusterModel::single(3).classify(&p).unwrap(), vec![0; p.len()]);
    }

    proptest! {
        #[test]
        fn weights_count_exactly(labels in prop::collection::vec(0usize..5, 1..300)) {
            let w = observed_weights(&labels, 5).unwrap();
            prop_assert_eq!(w.iter().sum::<f64>(), 1.0);
            for (k, wk) in w.iter().enumerate() {
                let c = labels.iter().filter(|&&l| l == k).count() as f64;
                prop_assert!((0.0..=1.0).contains(wk));
                prop_assert!((wk - c / labels.len() as f64).abs() < 1e-15);
            }
        }

        #[test]
        fn lloyd_objective_nonincreasing(seed in 0u64..1000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..120).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = Points::new(2, data);
            let r = kmeans(&p, k, seed).unwrap();
            for w in r.objective.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }

        #[test]
        fn rule_labels_idempotent(v in -0.2f64..=0.2) {
            let r = table_rule();
            let a = r.label(v).unwrap();
            prop_assert_eq!(a, r.label(v).unwrap());
            prop_assert!(r.intervals[a].contains(v));
        }
    }
}
