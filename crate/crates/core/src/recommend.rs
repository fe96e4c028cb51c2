//! Split and merge recommendations with confidences.
//!
//! A split proposes dividing one expert cluster along the automated clusters
//! that dominate its row of the split matrix; its confidence mixes that
//! evidence with the change in silhouette the split would cause. A merge
//! proposes unifying two expert clusters whose points spread similarly over
//! the automated clusters, optionally weighted by how close the two clusters
//! are in feature space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contingency::{
    contingency, merge_matrix, split_matrix, AxisMode, ContingencyError, ContingencyMatrix,
    MergeMatrix, SplitMatrix,
};
use crate::dataset::LabeledDataset;
use crate::metrics::{self, LinkageKind, LinkageTable, MetricsError};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum RecommendError {
    #[error(transparent)]
    Contingency(#[from] ContingencyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("a split needs at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("expert row {0} out of range")]
    RowOutOfRange(usize),
}

pub type Result<T, E = RecommendError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendParams {
    pub epsilon_split: f64,
    /// Silhouette weight; must stay below 1 because candidates are selected
    /// by `value / (1 - lambda_split)`.
    pub lambda_split: f64,
    pub epsilon_merge: f64,
    pub lambda_merge: f64,
    pub linkage: LinkageKind,
    pub silhouette_cap: usize,
    pub seed: u64,
    #[serde(default)]
    pub axis_mode: AxisMode,
}

impl Default for RecommendParams {
    fn default() -> Self {
        Self {
            epsilon_split: 0.8,
            lambda_split: 0.1,
            epsilon_merge: 0.8,
            lambda_merge: 0.2,
            linkage: LinkageKind::Average,
            silhouette_cap: metrics::DEFAULT_SILHOUETTE_CAP,
            seed: 0,
            axis_mode: AxisMode::Column,
        }
    }
}

impl RecommendParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RecommendError::InvalidParams(msg));
        if !(0.0..1.0).contains(&self.lambda_split) {
            return bad(format!("lambda_split must be in [0, 1), got {}", self.lambda_split));
        }
        if !(0.0..=1.0).contains(&self.lambda_merge) {
            return bad(format!("lambda_merge must be in [0, 1], got {}", self.lambda_merge));
        }
        if !self.epsilon_split.is_finite() || !self.epsilon_merge.is_finite() {
            return bad("thresholds must be finite".into());
        }
        if self.silhouette_cap < 2 {
            return bad(format!("silhouette_cap must be >= 2, got {}", self.silhouette_cap));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SplitRecommendation<T> {
    pub expert_label: usize,
    pub candidates: Vec<usize>,
    /// Split-matrix value of each candidate cell.
    pub split_values: Vec<T>,
    pub per_candidate_confidence: Vec<T>,
    pub confidence: T,
    /// Scaled silhouette change; absent when the silhouette weight is 0.
    pub s_dec: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MergeRecommendation<T> {
    /// Expert ids, first < second.
    pub pair: (usize, usize),
    pub target_cluster: usize,
    pub confidence: T,
    /// Cosine similarity of the two rows of the merge matrix.
    pub sim_term: T,
    /// `1 - normalized linkage distance`.
    pub linkage_term: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", bound = "T: Scalar")]
pub enum Recommendation<T> {
    Split(SplitRecommendation<T>),
    Merge(MergeRecommendation<T>),
}

impl<T: Scalar> Recommendation<T> {
    pub fn confidence(&self) -> T {
        match self {
            Self::Split(s) => s.confidence,
            Self::Merge(m) => m.confidence,
        }
    }

    /// Expert labels the recommendation would change.
    pub fn expert_labels(&self) -> Vec<usize> {
        match self {
            Self::Split(s) => vec![s.expert_label],
            Self::Merge(m) => vec![m.pair.0, m.pair.1],
        }
    }
}

/// Automated clusters `j` of expert row `i` with `H[i][j] / (1 - lambda_split) > epsilon_split`.
pub fn split_candidates<T: Scalar>(h: &SplitMatrix<T>, i: usize, params: &RecommendParams) -> Vec<usize> {
    if i >= h.values.rows() {
        return Vec::new();
    }
    let widen = T::one() - T::of(params.lambda_split);
    let eps = T::of(params.epsilon_split);
    h.values
        .row(i)
        .iter()
        .enumerate()
        .filter(|(_, &v)| v / widen > eps)
        .map(|(j, _)| j)
        .collect()
}

/// Expert labels after splitting expert cluster `i` along `candidates`:
/// its points in a candidate cluster get a fresh label per candidate, the
/// rest keep `i`.
pub fn relabel_split(
    expert: &[usize],
    clusters: &[usize],
    n_expert: usize,
    i: usize,
    candidates: &[usize],
) -> Vec<usize> {
    expert
        .iter()
        .zip(clusters)
        .map(|(&e, &c)| match candidates.iter().position(|&k| k == c) {
            Some(pos) if e == i => n_expert + pos,
            _ => e,
        })
        .collect()
}

/// Counts silhouette evaluations so callers can verify when they are skipped.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationCounter {
    pub silhouette: usize,
}

pub fn split_confidences<T: Scalar>(
    ds: &LabeledDataset<T>,
    i: usize,
    candidates: &[usize],
    h: &SplitMatrix<T>,
    params: &RecommendParams,
    counter: &mut EvaluationCounter,
) -> Result<SplitRecommendation<T>> {
    if candidates.len() < 2 {
        return Err(RecommendError::TooFewCandidates(candidates.len()));
    }
    if i >= h.values.rows() {
        return Err(RecommendError::RowOutOfRange(i));
    }
    let clusters = ds.cluster_labels().ok_or(ContingencyError::Unclustered)?;
    let lambda = T::of(params.lambda_split);
    let split_values: Vec<T> = candidates.iter().map(|&j| h.values.get(i, j)).collect();
    let s_dec = if params.lambda_split > 0.0 {
        let before = metrics::silhouette(
            ds.features(),
            ds.expert_labels(),
            params.silhouette_cap,
            params.seed,
        )?;
        let relabeled =
            relabel_split(ds.expert_labels(), clusters, ds.expert().n_labels(), i, candidates);
        let after = metrics::silhouette(ds.features(), &relabeled, params.silhouette_cap, params.seed)?;
        counter.silhouette += 2;
        // Silhouette difference lies in [-2, 2]; map it affinely onto [0, 1].
        Some((after - before + T::of(2.0)) / T::of(4.0))
    } else {
        None
    };
    let per_candidate_confidence: Vec<T> = split_values
        .iter()
        .map(|&c| match s_dec {
            Some(s) => (T::one() - lambda) * c + lambda * s,
            None => c,
        })
        .collect();
    let confidence = per_candidate_confidence.iter().copied().sum::<T>()
        / T::of_count(per_candidate_confidence.len());
    Ok(SplitRecommendation {
        expert_label: i,
        candidates: candidates.to_vec(),
        split_values,
        per_candidate_confidence,
        confidence,
        s_dec,
    })
}

/// Column maximizing the summed counts of rows `j` and `k` (lowest index on ties).
fn merge_target(m: &ContingencyMatrix, j: usize, k: usize) -> usize {
    let mut best = 0;
    let mut best_count = 0;
    for c in 0..m.n_clusters() {
        let s = m.counts.get(j, c) + m.counts.get(k, c);
        if s > best_count {
            best = c;
            best_count = s;
        }
    }
    best
}

/// All expert pairs whose combined similarity and linkage score exceeds
/// `epsilon_merge`, sorted by confidence descending.
pub fn merge_candidates<T: Scalar>(
    ds: &LabeledDataset<T>,
    m: &ContingencyMatrix,
    mm: &MergeMatrix<T>,
    params: &RecommendParams,
) -> Result<Vec<MergeRecommendation<T>>> {
    let n = mm.sim.rows();
    let lambda = T::of(params.lambda_merge);
    let eps = T::of(params.epsilon_merge);
    let mut linkage = LinkageTable::new(ds.features(), ds.expert_labels(), ds.expert().n_labels(), params.linkage);
    let mut out = Vec::new();
    for j in 0..n {
        for k in j + 1..n {
            let sim = mm.sim.get(j, k);
            // The linkage term is at most 1, so this bound skips pairs that
            // cannot pass without touching the point cloud.
            if (T::one() - lambda) * sim + lambda <= eps {
                continue;
            }
            let linkage_term = T::one() - linkage.normalized(j, k)?;
            let confidence = (T::one() - lambda) * sim + lambda * linkage_term;
            if confidence > eps {
                out.push(MergeRecommendation {
                    pair: (j, k),
                    target_cluster: merge_target(m, j, k),
                    confidence,
                    sim_term: sim,
                    linkage_term,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.pair.cmp(&b.pair))
            .then(a.target_cluster.cmp(&b.target_cluster))
    });
    Ok(out)
}

/// Everything computed for one pass over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Analysis<T> {
    pub contingency: ContingencyMatrix,
    pub split: SplitMatrix<T>,
    pub merge: MergeMatrix<T>,
    pub splits: Vec<SplitRecommendation<T>>,
    pub merges: Vec<MergeRecommendation<T>>,
    pub evaluations: EvaluationCounter,
}

impl<T: Scalar> Analysis<T> {
    /// Splits then merges, each in their sorted order.
    pub fn recommendations(&self) -> Vec<Recommendation<T>> {
        self.splits
            .iter()
            .cloned()
            .map(Recommendation::Split)
            .chain(self.merges.iter().cloned().map(Recommendation::Merge))
            .collect()
    }
}

pub fn analyze<T: Scalar>(ds: &LabeledDataset<T>, params: &RecommendParams) -> Result<Analysis<T>> {
    params.validate()?;
    let m = contingency(ds)?;
    let h = split_matrix::<T>(&m, params.axis_mode);
    let mm = merge_matrix::<T>(&m);
    let mut evaluations = EvaluationCounter::default();
    let mut splits = Vec::new();
    for i in 0..m.n_expert() {
        let candidates = split_candidates(&h, i, params);
        if candidates.len() >= 2 {
            splits.push(split_confidences(ds, i, &candidates, &h, params, &mut evaluations)?);
        }
    }
    splits.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.expert_label.cmp(&b.expert_label))
    });
    let merges = if m.n_expert() >= 2 {
        merge_candidates(ds, &m, &mm, params)?
    } else {
        Vec::new()
    };
    Ok(Analysis {
        contingency: m,
        split: h,
        merge: mm,
        splits,
        merges,
        evaluations,
    })
}

/// Display names used when rendering recommendations.
#[derive(Debug, Clone, Copy)]
pub struct LabelNames<'a> {
    pub expert: &'a [String],
    pub cluster: &'a [String],
}

impl<'a> LabelNames<'a> {
    pub fn of<T: Scalar>(ds: &'a LabeledDataset<T>) -> Self {
        Self {
            expert: &ds.expert().names,
            cluster: ds.clusters().map_or(&[], |c| c.names.as_slice()),
        }
    }

    fn expert(&self, id: usize) -> String {
        self.expert.get(id).cloned().unwrap_or_else(|| format!("E_{id}"))
    }

    fn cluster(&self, id: usize) -> String {
        self.cluster.get(id).cloned().unwrap_or_else(|| format!("C_{id}"))
    }
}

/// Multi-line listing of a recommendation.
pub fn render<T: Scalar>(rec: &Recommendation<T>, names: LabelNames<'_>) -> String {
    match rec {
        Recommendation::Split(s) => {
            let clusters: Vec<String> = s.candidates.iter().map(|&c| names.cluster(c)).collect();
            format!(
                "SPLIT \n    EXPERT CLUSTER  {} \nINTO \n    CLUSTERS  [({})]  (Confidence {:.2})",
                names.expert(s.expert_label),
                clusters.join(", "),
                s.confidence
            )
        }
        Recommendation::Merge(m) => format!(
            "MERGE \n    EXPERT CLUSTER {} \nWITH \n    EXPERT CLUSTER {} \nINTO \n    CLUSTER {} # (Confidence {:.2})",
            names.expert(m.pair.0),
            names.expert(m.pair.1),
            names.cluster(m.target_cluster),
            m.confidence
        ),
    }
}

/// The listing collapsed onto one line.
pub fn render_compact<T: Scalar>(rec: &Recommendation<T>, names: LabelNames<'_>) -> String {
    render(rec, names).split_whitespace().collect::<Vec<_>>().join(" ")
}
