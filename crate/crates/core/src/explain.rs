//! Human-readable justifications: conjunctive rules with precision and
//! coverage, and per-cluster bounding boxes.
//!
//! Rules are induced directly against labels over a grid of per-feature
//! quantile cut points. Candidate predicates are `feature <= cut` and
//! `feature > cut`. Two search strategies share the same output contract:
//!
//! * [`SearchStrategy::Exhaustive`] (default) scores every conjunction of up
//!   to `max_conditions` predicates and is therefore grid-optimal.
//! * [`SearchStrategy::Greedy`] grows one rule by repeatedly adding the
//!   predicate that most improves precision.
//!
//! Selection: when some rule reaches `precision_target`, the shortest such
//! rule with the largest coverage wins; otherwise the most precise rule
//! wins (ties: larger coverage, fewer conditions, earlier predicates).

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::matrix::Matrix;
use crate::recommend::{MergeRecommendation, SplitRecommendation};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("target has no positive examples")]
    NoPositives,
    #[error("target vector has {found} entries for {rows} rows")]
    LengthMismatch { rows: usize, found: usize },
    #[error("quantile grid needs at least 2 cut points, got {0}")]
    GridTooSmall(usize),
    #[error("quantiles must lie in [0, 1] with lo <= hi")]
    BadQuantiles,
    #[error("label {0} has no points")]
    EmptyLabel(usize),
    #[error("dataset has no cluster labels")]
    Unclustered,
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
}

pub type Result<T, E = ExplainError> = std::result::Result<T, E>;

/// Comparison applied to one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", bound = "T: Scalar")]
pub enum Predicate<T> {
    Le { value: T },
    Gt { value: T },
    Eq { value: T },
    InInterval { lo: T, hi: T },
}

impl<T: Scalar> Predicate<T> {
    pub fn holds(&self, x: T) -> bool {
        match *self {
            Self::Le { value } => x <= value,
            Self::Gt { value } => x > value,
            Self::Eq { value } => x == value,
            Self::InInterval { lo, hi } => lo <= x && x <= hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Condition<T> {
    pub feature: String,
    #[serde(flatten)]
    pub predicate: Predicate<T>,
}

impl<T: Scalar> Condition<T> {
    pub fn le(feature: impl Into<String>, value: T) -> Self {
        Self { feature: feature.into(), predicate: Predicate::Le { value } }
    }

    pub fn gt(feature: impl Into<String>, value: T) -> Self {
        Self { feature: feature.into(), predicate: Predicate::Gt { value } }
    }

    pub fn within(feature: impl Into<String>, lo: T, hi: T) -> Self {
        assert!(lo <= hi, "interval bounds out of order");
        Self { feature: feature.into(), predicate: Predicate::InInterval { lo, hi } }
    }

    /// Index of the condition's feature in `schema`.
    pub fn resolve(&self, schema: &[String]) -> Result<usize> {
        schema
            .iter()
            .position(|f| *f == self.feature)
            .ok_or_else(|| ExplainError::UnknownFeature(self.feature.clone()))
    }
}

impl<T: Scalar> fmt::Display for Condition<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.predicate {
            Predicate::Le { value } => write!(f, "{} <= {:.2}", self.feature, value),
            Predicate::Gt { value } => write!(f, "{} > {:.2}", self.feature, value),
            Predicate::Eq { value } => write!(f, "{} = {:.2}", self.feature, value),
            Predicate::InInterval { lo, hi } => {
                write!(f, "{} in [{:.2}, {:.2}]", self.feature, lo, hi)
            }
        }
    }
}

/// Evaluates a conjunction on a feature row; an empty conjunction always holds.
pub fn conjunction_holds<T: Scalar>(conditions: &[(usize, Predicate<T>)], row: &[T]) -> bool {
    conditions.iter().all(|(f, p)| p.holds(row[*f]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ExplanationRule<T> {
    pub target_label: usize,
    pub target_name: String,
    pub conditions: Vec<Condition<T>>,
    /// Fraction of matched points that carry the target label.
    pub precision: f64,
    /// Fraction of the slice matched by the conditions.
    pub coverage: f64,
    pub matched: usize,
    pub matched_positive: usize,
    pub slice_size: usize,
}

impl<T: Scalar> ExplanationRule<T> {
    pub fn compiled(&self, schema: &[String]) -> Result<Vec<(usize, Predicate<T>)>> {
        self.conditions
            .iter()
            .map(|c| Ok((c.resolve(schema)?, c.predicate)))
            .collect()
    }

    /// One mask per condition telling which rows of `features` satisfy it.
    pub fn condition_masks(&self, features: &Matrix<T>, schema: &[String]) -> Result<Vec<Vec<bool>>> {
        self.conditions
            .iter()
            .map(|c| {
                let f = c.resolve(schema)?;
                Ok((0..features.rows()).map(|r| c.predicate.holds(features.get(r, f))).collect())
            })
            .collect()
    }
}

impl<T: Scalar> fmt::Display for ExplanationRule<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body = if self.conditions.is_empty() {
            "TRUE".to_string()
        } else {
            self.conditions.iter().map(ToString::to_string).collect::<Vec<_>>().join(" AND ")
        };
        write!(
            f,
            "{}: {} (Precision: {:.2}, Coverage: {:.2})",
            self.target_name, body, self.precision, self.coverage
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStrategy {
    #[default]
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InduceConfig {
    pub max_conditions: usize,
    pub precision_target: f64,
    /// Quantile levels used as cut points for every feature.
    pub quantiles: Vec<f64>,
    pub search: SearchStrategy,
}

impl Default for InduceConfig {
    fn default() -> Self {
        Self {
            max_conditions: 2,
            precision_target: 0.95,
            quantiles: (1..10).map(|d| d as f64 / 10.0).collect(),
            search: SearchStrategy::Exhaustive,
        }
    }
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], q: f64) -> T {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::of(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted_column<T: Scalar>(features: &Matrix<T>, f: usize) -> Vec<T> {
    let mut v = features.column(f);
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    v
}

#[derive(Clone)]
struct Bits(Vec<u64>);

impl Bits {
    fn from_fn(n: usize, f: impl Fn(usize) -> bool) -> Self {
        let mut words = vec![0u64; n.div_ceil(64)];
        for i in (0..n).filter(|&i| f(i)) {
            words[i / 64] |= 1 << (i % 64);
        }
        Self(words)
    }

    fn and(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a & b).collect())
    }

    fn count(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn count_and(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }
}

/// A candidate predicate on the quantile grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPredicate<T> {
    pub feature: usize,
    pub predicate: Predicate<T>,
}

/// Cut points per feature: distinct quantiles of the column, ascending.
/// Predicates are ordered by feature, then threshold, `<=` before `>`.
pub fn grid_predicates<T: Scalar>(features: &Matrix<T>, quantiles: &[f64]) -> Vec<GridPredicate<T>> {
    let mut out = Vec::new();
    for f in 0..features.cols() {
        let sorted = sorted_column(features, f);
        let mut cuts: Vec<T> = quantiles.iter().map(|&q| quantile_sorted(&sorted, q)).collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        cuts.dedup();
        for value in cuts {
            out.push(GridPredicate { feature: f, predicate: Predicate::Le { value } });
            out.push(GridPredicate { feature: f, predicate: Predicate::Gt { value } });
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Scored {
    picks: Vec<usize>,
    matched: usize,
    positive: usize,
}

impl Scored {
    /// Exact comparison of `positive / matched` between two candidates.
    fn precision_cmp(&self, other: &Self) -> Ordering {
        let a = self.positive as u128 * other.matched as u128;
        let b = other.positive as u128 * self.matched as u128;
        a.cmp(&b)
    }

    fn meets(&self, target: f64) -> bool {
        self.positive as f64 >= target * self.matched as f64 - 1e-12
    }

    /// `Greater` when `self` should be preferred over `other`.
    fn preference(&self, other: &Self, target: f64) -> Ordering {
        match (self.meets(target), other.meets(target)) {
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            (true, true) => other
                .picks
                .len()
                .cmp(&self.picks.len())
                .then(self.matched.cmp(&other.matched))
                .then(self.precision_cmp(other))
                .then(other.picks.cmp(&self.picks)),
            (false, false) => self
                .precision_cmp(other)
                .then(self.matched.cmp(&other.matched))
                .then(other.picks.len().cmp(&self.picks.len()))
                .then(other.picks.cmp(&self.picks)),
        }
    }
}

fn exhaustive(
    masks: &[Bits],
    positives: &Bits,
    all: Bits,
    n: usize,
    config: &InduceConfig,
) -> Scored {
    let mut best = Scored { picks: Vec::new(), matched: n, positive: positives.count() };
    let mut stack: Vec<(Vec<usize>, Bits)> = vec![(Vec::new(), all)];
    while let Some((picks, cover)) = stack.pop() {
        if picks.len() == config.max_conditions {
            continue;
        }
        let start = picks.last().map_or(0, |&p| p + 1);
        for (p, mask) in masks.iter().enumerate().skip(start) {
            let next = cover.and(mask);
            let matched = next.count();
            if matched == 0 {
                // Supersets of an empty conjunction stay empty.
                continue;
            }
            let mut cand_picks = picks.clone();
            cand_picks.push(p);
            let cand = Scored { picks: cand_picks.clone(), matched, positive: next.count_and(positives) };
            if cand.preference(&best, config.precision_target) == Ordering::Greater {
                best = cand;
            }
            stack.push((cand_picks, next));
        }
    }
    best
}

fn greedy(masks: &[Bits], positives: &Bits, all: Bits, n: usize, config: &InduceConfig) -> Scored {
    let mut current = Scored { picks: Vec::new(), matched: n, positive: positives.count() };
    let mut cover = all;
    while current.picks.len() < config.max_conditions && !current.meets(config.precision_target) {
        let mut step: Option<(Scored, Bits)> = None;
        for (p, mask) in masks.iter().enumerate() {
            if current.picks.contains(&p) {
                continue;
            }
            let next = cover.and(mask);
            let matched = next.count();
            if matched == 0 {
                continue;
            }
            let mut picks = current.picks.clone();
            picks.push(p);
            let cand = Scored { picks, matched, positive: next.count_and(positives) };
            let better = match &step {
                None => true,
                Some((s, _)) => cand
                    .precision_cmp(s)
                    .then(cand.matched.cmp(&s.matched))
                    .then(s.picks.cmp(&cand.picks))
                    == Ordering::Greater,
            };
            if better {
                step = Some((cand, next));
            }
        }
        match step {
            Some((s, next)) if s.precision_cmp(&current) == Ordering::Greater => {
                current = s;
                cover = next;
            }
            _ => break,
        }
    }
    current
}

/// Induces one conjunctive rule describing the rows where `target` is true.
pub fn induce_rule<T: Scalar>(
    features: &Matrix<T>,
    feature_names: &[String],
    target: &[bool],
    target_label: usize,
    target_name: &str,
    config: &InduceConfig,
) -> Result<ExplanationRule<T>> {
    let n = features.rows();
    if target.len() != n {
        return Err(ExplainError::LengthMismatch { rows: n, found: target.len() });
    }
    if config.quantiles.len() < 2 {
        return Err(ExplainError::GridTooSmall(config.quantiles.len()));
    }
    if !target.iter().any(|&t| t) {
        return Err(ExplainError::NoPositives);
    }
    let grid = grid_predicates(features, &config.quantiles);
    let masks: Vec<Bits> = grid
        .iter()
        .map(|g| Bits::from_fn(n, |r| g.predicate.holds(features.get(r, g.feature))))
        .collect();
    let positives = Bits::from_fn(n, |r| target[r]);
    let all = Bits::from_fn(n, |_| true);
    let best = match config.search {
        SearchStrategy::Exhaustive => exhaustive(&masks, &positives, all, n, config),
        SearchStrategy::Greedy => greedy(&masks, &positives, all, n, config),
    };
    let mut picks = best.picks.clone();
    picks.sort_unstable();
    Ok(ExplanationRule {
        target_label,
        target_name: target_name.to_owned(),
        conditions: picks
            .iter()
            .map(|&p| Condition {
                feature: feature_names[grid[p].feature].clone(),
                predicate: grid[p].predicate,
            })
            .collect(),
        precision: best.positive as f64 / best.matched as f64,
        coverage: best.matched as f64 / n as f64,
        matched: best.matched,
        matched_positive: best.positive,
        slice_size: n,
    })
}

/// One rule per split candidate, induced on the points of the expert
/// cluster being split with the automated clusters as targets.
pub fn explain_split<T: Scalar>(
    ds: &LabeledDataset<T>,
    rec: &SplitRecommendation<T>,
    config: &InduceConfig,
) -> Result<Vec<ExplanationRule<T>>> {
    let clusters = ds.clusters().ok_or(ExplainError::Unclustered)?;
    let rows = ds.expert().members(rec.expert_label);
    if rows.is_empty() {
        return Err(ExplainError::EmptyLabel(rec.expert_label));
    }
    let slice = ds.features().select_rows(&rows);
    rec.candidates
        .iter()
        .map(|&c| {
            let target: Vec<bool> = rows.iter().map(|&r| clusters.ids[r] == c).collect();
            let name = clusters.names.get(c).cloned().unwrap_or_else(|| format!("C_{c}"));
            induce_rule(&slice, ds.feature_names(), &target, c, &name, config)
        })
        .collect()
}

/// One rule per expert cluster of the pair, induced on the union of their points.
pub fn explain_merge<T: Scalar>(
    ds: &LabeledDataset<T>,
    rec: &MergeRecommendation<T>,
    config: &InduceConfig,
) -> Result<(ExplanationRule<T>, ExplanationRule<T>)> {
    let (j, k) = rec.pair;
    let labels = ds.expert_labels();
    let rows: Vec<usize> = (0..ds.n_rows()).filter(|&r| labels[r] == j || labels[r] == k).collect();
    let slice = ds.features().select_rows(&rows);
    let rule_for = |e: usize| {
        let target: Vec<bool> = rows.iter().map(|&r| labels[r] == e).collect();
        if !target.iter().any(|&t| t) {
            return Err(ExplainError::EmptyLabel(e));
        }
        let name = ds.expert().names.get(e).cloned().unwrap_or_else(|| format!("E_{e}"));
        induce_rule(&slice, ds.feature_names(), &target, e, &name, config)
    };
    Ok((rule_for(j)?, rule_for(k)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Expert,
    Cluster,
}

/// Per-feature inner-quantile intervals of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BoundingBox<T> {
    pub kind: LabelKind,
    pub label: usize,
    pub name: String,
    pub quantiles: (f64, f64),
    pub intervals: Vec<Condition<T>>,
}

pub fn bounding_box<T: Scalar>(
    ds: &LabeledDataset<T>,
    kind: LabelKind,
    label: usize,
    quantiles: (f64, f64),
) -> Result<BoundingBox<T>> {
    let (lo_q, hi_q) = quantiles;
    if !(0.0..=1.0).contains(&lo_q) || !(0.0..=1.0).contains(&hi_q) || lo_q > hi_q {
        return Err(ExplainError::BadQuantiles);
    }
    let labeling = match kind {
        LabelKind::Expert => ds.expert(),
        LabelKind::Cluster => ds.clusters().ok_or(ExplainError::Unclustered)?,
    };
    let rows = labeling.members(label);
    if rows.is_empty() {
        return Err(ExplainError::EmptyLabel(label));
    }
    let points = ds.features().select_rows(&rows);
    let intervals = (0..points.cols())
        .map(|f| {
            let sorted = sorted_column(&points, f);
            Condition::within(
                ds.feature_names()[f].clone(),
                quantile_sorted(&sorted, lo_q),
                quantile_sorted(&sorted, hi_q),
            )
        })
        .collect();
    Ok(BoundingBox {
        kind,
        label,
        name: labeling.names[label].clone(),
        quantiles,
        intervals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_blobs, BlobSpec, Labeling};
    use proptest::prelude::*;

    fn names(d: usize) -> Vec<String> {
        (1..=d).map(|i| format!("x{i}")).collect()
    }

    /// Best precision over the empty rule and every 1- and 2-predicate
    /// conjunction of the grid, by direct row scans.
    pub(crate) fn brute_force_best_precision(features: &Matrix<f64>, target: &[bool], quantiles: &[f64]) -> f64 {
        let grid = grid_predicates(features, quantiles);
        let eval = |picks: &[usize]| -> Option<f64> {
            let rows: Vec<usize> = (0..features.rows())
                .filter(|&r| picks.iter().all(|&p| grid[p].predicate.holds(features.get(r, grid[p].feature))))
                .collect();
            if rows.is_empty() {
                return None;
            }
            Some(rows.iter().filter(|&&r| target[r]).count() as f64 / rows.len() as f64)
        };
        let mut best = eval(&[]).unwrap();
        for a in 0..grid.len() {
            if let Some(p) = eval(&[a]) {
                best = best.max(p);
            }
            for b in a + 1..grid.len() {
                if let Some(p) = eval(&[a, b]) {
                    best = best.max(p);
                }
            }
        }
        best
    }

    #[test]
    fn separable_one_dimensional() {
        let xs: Vec<f64> = (-5..5).map(|i| i as f64 + 0.5).collect();
        let features = Matrix::from_vec(10, 1, xs.clone());
        let target: Vec<bool> = xs.iter().map(|&x| x < 0.0).collect();
        let rule = induce_rule(&features, &names(1), &target, 0, "A", &InduceConfig::default()).unwrap();
        assert_eq!(rule.conditions.len(), 1);
        assert!(matches!(rule.conditions[0].predicate, Predicate::Le { .. }));
        assert_eq!(rule.precision, 1.0);
        assert_eq!(rule.coverage, 0.5);
        assert_eq!(rule.to_string(), "A: x1 <= 0.00 (Precision: 1.00, Coverage: 0.50)");
    }

    #[test]
    fn constant_features_give_empty_rule() {
        let features = Matrix::from_vec(4, 2, vec![1.0; 8]);
        let rule = induce_rule(&features, &names(2), &[true; 4], 0, "A", &InduceConfig::default()).unwrap();
        assert!(rule.conditions.is_empty());
        assert_eq!((rule.precision, rule.coverage), (1.0, 1.0));
        assert_eq!(rule.to_string(), "A: TRUE (Precision: 1.00, Coverage: 1.00)");

        let rule = induce_rule(&features, &names(2), &[true, false, false, false], 0, "A", &InduceConfig::default()).unwrap();
        assert!(rule.conditions.is_empty());
        assert_eq!(rule.precision, 0.25);
    }

    #[test]
    fn errors() {
        let features = Matrix::from_vec(2, 1, vec![0.0, 1.0]);
        let cfg = InduceConfig::default();
        assert_eq!(induce_rule(&features, &names(1), &[false, false], 0, "A", &cfg).unwrap_err(), ExplainError::NoPositives);
        assert!(matches!(induce_rule(&features, &names(1), &[true], 0, "A", &cfg), Err(ExplainError::LengthMismatch { .. })));
        let cfg = InduceConfig { quantiles: vec![0.5], ..InduceConfig::default() };
        assert_eq!(induce_rule(&features, &names(1), &[true, false], 0, "A", &cfg).unwrap_err(), ExplainError::GridTooSmall(1));
    }

    #[test]
    fn non_separable_matches_exhaustive_optimum() {
        // Checkerboard: greedy growth cannot see the two-condition optimum.
        let mut coords = Vec::new();
        let mut target = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                coords.push(i as f64);
                coords.push(j as f64);
                target.push((i < 10) ^ (j < 10) || (i * 7 + j * 3) % 11 == 0);
            }
        }
        let features = Matrix::from_vec(400, 2, coords);
        let cfg = InduceConfig { precision_target: 1.0, ..InduceConfig::default() };
        let rule = induce_rule(&features, &names(2), &target, 0, "A", &cfg).unwrap();
        assert!(rule.conditions.len() <= 2);
        let best = brute_force_best_precision(&features, &target, &cfg.quantiles);
        assert_eq!(rule.precision, best);
    }

    #[test]
    fn greedy_growth_never_lowers_precision() {
        let ds = generate_blobs::<f64>(&BlobSpec { n_blobs: 3, points_per_blob: 40, seed: 4, std: 3.0, ..BlobSpec::default() }).unwrap();
        let target: Vec<bool> = ds.expert_labels().iter().map(|&l| l == 1).collect();
        let mut last = 0.0;
        for k in 0..4 {
            let cfg = InduceConfig { max_conditions: k, precision_target: 1.0, search: SearchStrategy::Greedy, ..InduceConfig::default() };
            let rule = induce_rule(ds.features(), ds.feature_names(), &target, 1, "E_1", &cfg).unwrap();
            assert!(rule.precision >= last);
            last = rule.precision;
        }
    }

    fn recompute(rule: &ExplanationRule<f64>, slice: &Matrix<f64>, schema: &[String], target: &[bool]) -> (f64, f64) {
        let compiled = rule.compiled(schema).unwrap();
        let rows: Vec<usize> = (0..slice.rows()).filter(|&r| conjunction_holds(&compiled, slice.row(r))).collect();
        let pos = rows.iter().filter(|&&r| target[r]).count();
        (pos as f64 / rows.len() as f64, rows.len() as f64 / slice.rows() as f64)
    }

    fn split_blobs() -> LabeledDataset<f64> {
        let ds = generate_blobs::<f64>(&BlobSpec {
            n_blobs: 3,
            points_per_blob: 60,
            centers: Some(vec![vec![-8.0, 0.0], vec![8.0, 0.0], vec![0.0, 9.0]]),
            std: 1.0,
            seed: 21,
            ..BlobSpec::default()
        })
        .unwrap();
        let truth = ds.ground_truth().unwrap().to_vec();
        let expert: Vec<usize> = truth.iter().map(|&t| usize::from(t == 2)).collect();
        ds.with_expert(Labeling { ids: expert, names: vec!["E_0".into(), "E_1".into()] })
            .unwrap()
            .with_cluster_ids(truth)
            .unwrap()
    }

    #[test]
    fn split_explanations_are_precise_and_consistent() {
        let ds = split_blobs();
        let rec = SplitRecommendation {
            expert_label: 0,
            candidates: vec![0, 1],
            split_values: vec![1.0, 1.0],
            per_candidate_confidence: vec![1.0, 1.0],
            confidence: 1.0,
            s_dec: None,
        };
        let rules = explain_split(&ds, &rec, &InduceConfig::default()).unwrap();
        assert_eq!(rules.len(), 2);
        let rows = ds.expert().members(0);
        let slice = ds.features().select_rows(&rows);
        for rule in &rules {
            assert!(rule.precision >= 0.9, "{rule}");
            let target: Vec<bool> = rows.iter().map(|&r| ds.cluster_labels().unwrap()[r] == rule.target_label).collect();
            let (p, c) = recompute(rule, &slice, ds.feature_names(), &target);
            assert!((p - rule.precision).abs() < 1e-12 && (c - rule.coverage).abs() < 1e-12);
        }
    }

    #[test]
    fn candidate_covering_whole_slice_gives_empty_rule() {
        let ds = split_blobs();
        let rec = SplitRecommendation {
            expert_label: 1,
            candidates: vec![2, 0],
            split_values: vec![1.0, 0.0],
            per_candidate_confidence: vec![1.0, 0.0],
            confidence: 0.5,
            s_dec: None,
        };
        let cfg = InduceConfig::default();
        let rules: Vec<_> = rec.candidates[..1]
            .iter()
            .map(|_| explain_split(&ds, &SplitRecommendation { candidates: vec![2], ..rec.clone() }, &cfg).unwrap())
            .collect();
        let r = &rules[0][0];
        assert!(r.conditions.is_empty());
        assert_eq!(r.coverage, 1.0);
    }

    #[test]
    fn merge_explanations() {
        let ds = split_blobs();
        // Separated pair: E_0 (two blobs) vs E_1.
        let rec = MergeRecommendation { pair: (0, 1), target_cluster: 0, confidence: 1.0, sim_term: 1.0, linkage_term: 1.0 };
        let (a, b) = explain_merge(&ds, &rec, &InduceConfig::default()).unwrap();
        assert!(a.precision >= 0.95 || b.precision >= 0.95);
        assert_eq!(b.precision, 1.0);

        // Indistinguishable pair: a blob randomly halved.
        let truth = ds.ground_truth().unwrap().to_vec();
        let halves: Vec<usize> = truth.iter().enumerate().map(|(i, &t)| if t == 2 { 2 + i % 2 } else { t }).collect();
        let dup = ds
            .with_expert(Labeling { ids: halves, names: (0..4).map(|i| format!("E_{i}")).collect() })
            .unwrap();
        let rec = MergeRecommendation { pair: (2, 3), ..rec };
        let (a, b) = explain_merge(&dup, &rec, &InduceConfig::default()).unwrap();
        for r in [&a, &b] {
            // Only small pure corners exist by chance.
            assert!(r.precision < 0.95 || r.coverage < 0.25, "{r}");
        }
    }

    #[test]
    fn bounding_boxes() {
        let ds = split_blobs();
        let bb = bounding_box(&ds, LabelKind::Cluster, 1, (0.05, 0.95)).unwrap();
        let rows = ds.clusters().unwrap().members(1);
        for (f, iv) in bb.intervals.iter().enumerate() {
            let Predicate::InInterval { lo, hi } = iv.predicate else { panic!() };
            let inside = rows.iter().filter(|&&r| (lo..=hi).contains(&ds.features().get(r, f))).count();
            let expected = (0.9 * rows.len() as f64).ceil() as i64;
            assert!((inside as i64 - expected).abs() <= 1, "{inside} vs {expected}");
        }
        let full = bounding_box(&ds, LabelKind::Expert, 1, (0.0, 1.0)).unwrap();
        let rows = ds.expert().members(1);
        let xs: Vec<f64> = rows.iter().map(|&r| ds.features().get(r, 0)).collect();
        let Predicate::InInterval { lo, hi } = full.intervals[0].predicate else { panic!() };
        assert_eq!(lo, xs.iter().cloned().fold(f64::MAX, f64::min));
        assert_eq!(hi, xs.iter().cloned().fold(f64::MIN, f64::max));
        assert_eq!(bounding_box(&ds, LabelKind::Expert, 7, (0.05, 0.95)).unwrap_err(), ExplainError::EmptyLabel(7));
    }

    #[test]
    fn singleton_bounding_box_is_a_point() {
        let ds = LabeledDataset::new(
            Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]),
            names(2),
            vec!["a".into(), "b".into()],
            Labeling { ids: vec![0, 1], names: vec!["E_0".into(), "E_1".into()] },
            None,
        )
        .unwrap();
        let bb = bounding_box(&ds, LabelKind::Expert, 1, (0.05, 0.95)).unwrap();
        assert_eq!(bb.intervals[0].predicate, Predicate::InInterval { lo: 3.0, hi: 3.0 });
        assert_eq!(bb.intervals[1].predicate, Predicate::InInterval { lo: 4.0, hi: 4.0 });
    }

    #[test]
    fn masks_follow_conditions() {
        let rule = ExplanationRule {
            target_label: 0,
            target_name: "C_0".into(),
            conditions: vec![Condition::le("x1", 0.5), Condition::gt("x2", 1.0)],
            precision: 1.0,
            coverage: 0.5,
            matched: 1,
            matched_positive: 1,
            slice_size: 2,
        };
        let features = Matrix::from_vec(2, 2, vec![0.0, 2.0, 1.0, 0.0]);
        let masks = rule.condition_masks(&features, &names(2)).unwrap();
        assert_eq!(masks, vec![vec![true, false], vec![true, false]]);
        assert!(rule.condition_masks(&features, &["q".to_string(), "x2".to_string()]).is_err());
        let json = serde_json::to_string(&rule.conditions[0]).unwrap();
        assert_eq!(json, r#"{"feature":"x1","op":"le","value":0.5}"#);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn exhaustive_equals_brute_force(
            coords in proptest::collection::vec(-5.0f64..5.0, 60),
            target in proptest::collection::vec(any::<bool>(), 30),
        ) {
            prop_assume!(target.iter().any(|&t| t));
            let features = Matrix::from_vec(30, 2, coords);
            let cfg = InduceConfig { precision_target: 1.0, ..InduceConfig::default() };
            let rule = induce_rule(&features, &names(2), &target, 0, "A", &cfg).unwrap();
            prop_assert_eq!(rule.precision, brute_force_best_precision(&features, &target, &cfg.quantiles));
            prop_assert!(rule.coverage > 0.0);
            let (p, c) = recompute(&rule, &features, &names(2), &target);
            prop_assert!((p - rule.precision).abs() < 1e-12 && (c - rule.coverage).abs() < 1e-12);
        }
    }
}
