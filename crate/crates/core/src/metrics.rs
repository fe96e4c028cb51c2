//! Silhouette coefficient, inter-cluster linkage distances and
//! homogeneity / completeness / v-measure.
//!
//! Distances are Euclidean throughout.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contingency::ContingencyMatrix;
use crate::matrix::Matrix;
use crate::scalar::{clamp, euclidean, Scalar};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("silhouette needs at least 2 distinct labels, found {0}")]
    TooFewLabels(usize),
    #[error("silhouette subsample cap must be at least 2, got {0}")]
    CapTooSmall(usize),
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cluster {0} has no points")]
    EmptyCluster(usize),
    #[error("linkage needs two distinct clusters, got {0} twice")]
    SameCluster(usize),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Default number of points the silhouette is evaluated on.
pub const DEFAULT_SILHOUETTE_CAP: usize = 2000;

/// Maps arbitrary label values to `0..k` preserving their order.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut index = BTreeMap::new();
    for &l in labels {
        index.entry(l).or_insert(0usize);
    }
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    (labels.iter().map(|l| index[l]).collect(), index.len())
}

/// Mean silhouette over all points, or over a seeded uniform subsample of
/// `subsample_cap` points when there are more.
pub fn silhouette<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    subsample_cap: usize,
    seed: u64,
) -> Result<T> {
    if labels.len() != features.rows() {
        return Err(MetricsError::LengthMismatch(features.rows(), labels.len()));
    }
    if subsample_cap < 2 {
        return Err(MetricsError::CapTooSmall(subsample_cap));
    }
    let n = labels.len();
    let (points, labels): (Matrix<T>, Vec<usize>) = if n > subsample_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, subsample_cap).into_vec();
        idx.sort_unstable();
        let sub: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        (features.select_rows(&idx), sub)
    } else {
        (features.clone(), labels.to_vec())
    };
    let (labels, k) = compact(&labels);
    if k < 2 {
        return Err(MetricsError::TooFewLabels(k));
    }
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    // Per-point values are independent; the final sum runs in index order so
    // the result does not depend on thread scheduling.
    let per_point: Vec<T> = (0..points.rows())
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return T::zero();
            }
            let mut sums = vec![T::zero(); k];
            let p = points.row(i);
            for (j, &lj) in labels.iter().enumerate() {
                if j != i {
                    sums[lj] = sums[lj] + euclidean(p, points.row(j));
                }
            }
            let a = sums[own] / T::of_count(sizes[own] - 1);
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / T::of_count(sizes[c]))
                .fold(T::infinity(), T::min);
            let denom = a.max(b);
            if denom > T::zero() {
                (b - a) / denom
            } else {
                T::zero()
            }
        })
        .collect();
    let total = per_point.iter().fold(T::zero(), |acc, &v| acc + v);
    Ok(total / T::of_count(per_point.len()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkageKind {
    Single,
    Complete,
    #[default]
    Average,
    Centroid,
}

impl std::str::FromStr for LinkageKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "single" => Ok(Self::Single),
            "complete" => Ok(Self::Complete),
            "average" => Ok(Self::Average),
            "centroid" => Ok(Self::Centroid),
            other => Err(format!(
                "unknown linkage {other:?} (expected single|complete|average|centroid)"
            )),
        }
    }
}

impl std::fmt::Display for LinkageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Complete => "complete",
            Self::Average => "average",
            Self::Centroid => "centroid",
        })
    }
}

fn centroid<T: Scalar>(features: &Matrix<T>, members: &[usize]) -> Vec<T> {
    let mut c = vec![T::zero(); features.cols()];
    for &i in members {
        for (acc, &v) in c.iter_mut().zip(features.row(i)) {
            *acc = *acc + v;
        }
    }
    let n = T::of_count(members.len());
    c.iter_mut().for_each(|v| *v = *v / n);
    c
}

fn linkage_between<T: Scalar>(
    features: &Matrix<T>,
    a: &[usize],
    b: &[usize],
    kind: LinkageKind,
) -> T {
    if kind == LinkageKind::Centroid {
        return euclidean(&centroid(features, a), &centroid(features, b));
    }
    let mut min = T::infinity();
    let mut max = T::zero();
    let mut sum = T::zero();
    for &i in a {
        for &j in b {
            let d = euclidean(features.row(i), features.row(j));
            min = min.min(d);
            max = max.max(d);
            sum = sum + d;
        }
    }
    match kind {
        LinkageKind::Single => min,
        LinkageKind::Complete => max,
        _ => sum / T::of_count(a.len() * b.len()),
    }
}

fn members_of(labels: &[usize], label: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == label)
        .map(|(i, _)| i)
        .collect()
}

/// Distance between clusters `a` and `b` under the given linkage.
pub fn linkage_distance<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    a: usize,
    b: usize,
    kind: LinkageKind,
) -> Result<T> {
    if a == b {
        return Err(MetricsError::SameCluster(a));
    }
    let ma = members_of(labels, a);
    let mb = members_of(labels, b);
    if ma.is_empty() {
        return Err(MetricsError::EmptyCluster(a));
    }
    if mb.is_empty() {
        return Err(MetricsError::EmptyCluster(b));
    }
    // Fixed evaluation order keeps the result bit-identical under argument swap.
    if a < b {
        Ok(linkage_between(features, &ma, &mb, kind))
    } else {
        Ok(linkage_between(features, &mb, &ma, kind))
    }
}

/// Largest pairwise distance between any two points.
pub fn diameter<T: Scalar>(features: &Matrix<T>) -> T {
    (0..features.rows())
        .into_par_iter()
        .map(|i| {
            (i + 1..features.rows())
                .map(|j| euclidean(features.row(i), features.row(j)))
                .fold(T::zero(), T::max)
        })
        .collect::<Vec<T>>()
        .into_iter()
        .fold(T::zero(), T::max)
}

/// Lazily evaluated, diameter-normalized linkage distances between the
/// clusters of one labeling.
pub struct LinkageTable<'a, T: Scalar> {
    features: &'a Matrix<T>,
    members: Vec<Vec<usize>>,
    kind: LinkageKind,
    diameter: Option<T>,
}

impl<'a, T: Scalar> LinkageTable<'a, T> {
    pub fn new(features: &'a Matrix<T>, labels: &[usize], n_labels: usize, kind: LinkageKind) -> Self {
        let mut members = vec![Vec::new(); n_labels];
        for (i, &l) in labels.iter().enumerate() {
            members[l].push(i);
        }
        Self {
            features,
            members,
            kind,
            diameter: None,
        }
    }

    fn diameter(&mut self) -> T {
        *self.diameter.get_or_insert_with(|| diameter(self.features))
    }

    /// Linkage distance divided by the dataset diameter, clamped to `[0, 1]`.
    pub fn normalized(&mut self, a: usize, b: usize) -> Result<T> {
        if a == b {
            return Ok(T::zero());
        }
        for l in [a, b] {
            if self.members[l].is_empty() {
                return Err(MetricsError::EmptyCluster(l));
            }
        }
        let diam = self.diameter();
        if diam == T::zero() {
            return Ok(T::zero());
        }
        let d = linkage_between(self.features, &self.members[a], &self.members[b], self.kind);
        Ok(clamp(d / diam, T::zero(), T::one()))
    }
}

/// Symmetric matrix of normalized linkage distances between all expert clusters.
pub fn linkage_matrix_normalized<T: Scalar>(
    features: &Matrix<T>,
    expert_labels: &[usize],
    kind: LinkageKind,
) -> Result<Matrix<T>> {
    let (labels, k) = compact(expert_labels);
    if k < 2 {
        return Err(MetricsError::TooFewLabels(k));
    }
    let mut table = LinkageTable::new(features, &labels, k, kind);
    let mut out = Matrix::filled(k, k, T::zero());
    for a in 0..k {
        for b in a + 1..k {
            let d = table.normalized(a, b)?;
            out.set(a, b, d);
            out.set(b, a, d);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementScores {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

fn conditional_entropy(joint: &[Vec<f64>], n: f64, by_column: bool) -> f64 {
    // H(row variable | column variable) when by_column, else H(col | row).
    let rows = joint.len();
    let cols = joint.first().map_or(0, Vec::len);
    let mut h = 0.0;
    if by_column {
        for j in 0..cols {
            let marginal: f64 = (0..rows).map(|i| joint[i][j]).sum();
            for row in joint {
                let c = row[j];
                if c > 0.0 {
                    h -= c / n * (c / marginal).log2();
                }
            }
        }
    } else {
        for row in joint {
            let marginal: f64 = row.iter().sum();
            for &c in row {
                if c > 0.0 {
                    h -= c / n * (c / marginal).log2();
                }
            }
        }
    }
    h.max(0.0)
}

fn marginal_entropy(sizes: impl Iterator<Item = f64>, n: f64) -> f64 {
    sizes
        .filter(|&c| c > 0.0)
        .map(|c| -(c / n) * (c / n).log2())
        .sum::<f64>()
        .max(0.0)
}

/// Homogeneity, completeness and v-measure of `predicted` against `truth`.
pub fn agreement(truth: &[usize], predicted: &[usize]) -> Result<AgreementScores> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch(truth.len(), predicted.len()));
    }
    let (t, kt) = compact(truth);
    let (p, kp) = compact(predicted);
    let n = t.len() as f64;
    let table = ContingencyMatrix::from_labels(&t, &p, kt, kp);
    let joint: Vec<Vec<f64>> = table
        .counts
        .to_rows()
        .into_iter()
        .map(|r| r.into_iter().map(|c| c as f64).collect())
        .collect();
    if t.is_empty() {
        return Ok(AgreementScores { homogeneity: 1.0, completeness: 1.0, v_measure: 1.0 });
    }
    let h_truth = marginal_entropy(joint.iter().map(|r| r.iter().sum()), n);
    let h_pred = marginal_entropy((0..kp).map(|j| joint.iter().map(|r| r[j]).sum()), n);
    let homogeneity = if h_truth == 0.0 {
        1.0
    } else {
        1.0 - conditional_entropy(&joint, n, true) / h_truth
    };
    let completeness = if h_pred == 0.0 {
        1.0
    } else {
        1.0 - conditional_entropy(&joint, n, false) / h_pred
    };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(AgreementScores {
        homogeneity,
        completeness,
        v_measure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(v.len(), 1, v.to_vec())
    }

    /// Straight O(n^2) silhouette over all points.
    fn silhouette_oracle(points: &Matrix<f64>, labels: &[usize]) -> f64 {
        let n = labels.len();
        let mut total = 0.0;
        for i in 0..n {
            let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if same.is_empty() {
                continue;
            }
            let dist = |j: usize| -> f64 {
                points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            };
            let a = same.iter().map(|&j| dist(j)).sum::<f64>() / same.len() as f64;
            let mut others: Vec<usize> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
            others.sort_unstable();
            others.dedup();
            let b = others
                .iter()
                .map(|&l| {
                    let m: Vec<usize> = (0..n).filter(|&j| labels[j] == l).collect();
                    m.iter().map(|&j| dist(j)).sum::<f64>() / m.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            if a.max(b) > 0.0 {
                total += (b - a) / a.max(b);
            }
        }
        total / n as f64
    }

    #[test]
    fn silhouette_two_tight_groups() {
        let pts = col(&[0.0, 0.1, 10.0, 10.1]);
        let s = silhouette(&pts, &[0, 0, 1, 1], 2000, 0).unwrap();
        // point 0: a = 0.1, b = 10.05 -> 0.99005; the others are symmetric.
        let p0 = (10.05 - 0.1) / 10.05;
        let p1 = (9.95 - 0.1) / 9.95;
        assert!((s - (p0 + p1) / 2.0).abs() < 1e-12);
        assert!((s - 0.990).abs() < 1e-3);
    }

    #[test]
    fn silhouette_overlapping_labels_not_positive() {
        let pts = col(&[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        let s = silhouette(&pts, &[0, 1, 0, 1, 0, 1], 2000, 0).unwrap();
        assert!(s <= 0.0);
    }

    #[test]
    fn silhouette_errors() {
        let pts = col(&[0.0, 1.0]);
        assert_eq!(silhouette(&pts, &[3, 3], 2000, 0), Err(MetricsError::TooFewLabels(1)));
        assert_eq!(silhouette(&pts, &[0, 1], 1, 0), Err(MetricsError::CapTooSmall(1)));
    }

    #[test]
    fn singleton_points_score_zero() {
        let pts = col(&[0.0, 5.0, 5.5]);
        let s = silhouette(&pts, &[0, 1, 1], 2000, 0).unwrap();
        assert!((s - silhouette_oracle(&pts, &[0, 1, 1])).abs() < 1e-12);
    }

    #[test]
    fn subsampled_silhouette_is_deterministic() {
        let v: Vec<f64> = (0..300).map(|i| (i % 3) as f64 * 10.0 + (i as f64 * 0.37).sin()).collect();
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let pts = col(&v);
        let a = silhouette(&pts, &labels, 50, 9).unwrap();
        let b = silhouette(&pts, &labels, 50, 9).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn linkage_examples() {
        let pts = col(&[0.0, 1.0, 3.0, 5.0]);
        let l = [0, 0, 1, 1];
        let d = |k| linkage_distance(&pts, &l, 0, 1, k).unwrap();
        // Pairs: |0-3|=3, |0-5|=5, |1-3|=2, |1-5|=4.
        assert_eq!(d(LinkageKind::Single), 2.0);
        assert_eq!(d(LinkageKind::Complete), 5.0);
        assert_eq!(d(LinkageKind::Average), 3.5);
        assert_eq!(d(LinkageKind::Centroid), 3.5);

        let same = col(&[1.0, 1.0]);
        for k in [LinkageKind::Single, LinkageKind::Complete, LinkageKind::Average, LinkageKind::Centroid] {
            assert_eq!(linkage_distance(&same, &[0, 1], 0, 1, k).unwrap(), 0.0);
        }
        assert_eq!(linkage_distance(&pts, &l, 0, 2, LinkageKind::Single), Err(MetricsError::EmptyCluster(2)));
        assert_eq!(linkage_distance(&pts, &l, 1, 1, LinkageKind::Single), Err(MetricsError::SameCluster(1)));
    }

    #[test]
    fn normalized_linkage_matrix() {
        let pts = col(&[0.0, 1.0, 2.0]);
        for k in [LinkageKind::Single, LinkageKind::Complete, LinkageKind::Average, LinkageKind::Centroid] {
            let m = linkage_matrix_normalized(&pts, &[0, 1, 2], k).unwrap();
            assert_eq!(m.to_rows(), vec![vec![0.0, 0.5, 1.0], vec![0.5, 0.0, 0.5], vec![1.0, 0.5, 0.0]]);
        }
        let two = col(&[-3.0, 4.0]);
        assert_eq!(linkage_matrix_normalized(&two, &[0, 1], LinkageKind::Single).unwrap().get(0, 1), 1.0);
        let flat = col(&[2.0, 2.0, 2.0]);
        let m = linkage_matrix_normalized(&flat, &[0, 1, 1], LinkageKind::Complete).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn agreement_examples() {
        let a = agreement(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap();
        assert_eq!((a.homogeneity, a.completeness, a.v_measure), (1.0, 1.0, 1.0));

        let a = agreement(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!((a.homogeneity, a.completeness), (0.0, 1.0));

        // Table (truth rows x pred cols) = [[1,1],[0,2]].
        // H(T)=1, H(T|P)=0.75*H(1/3,2/3)=0.688722, H(P)=H(1/4,3/4)=0.811278, H(P|T)=0.5.
        let a = agreement(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let h3 = -(1.0f64 / 3.0) * (1.0f64 / 3.0).log2() - (2.0f64 / 3.0) * (2.0f64 / 3.0).log2();
        let hp = -(0.25f64) * 0.25f64.log2() - 0.75 * 0.75f64.log2();
        let h = 1.0 - 0.75 * h3;
        let c = 1.0 - 0.5 / hp;
        assert!((a.homogeneity - h).abs() < 1e-12);
        assert!((a.completeness - c).abs() < 1e-12);
        assert!((a.homogeneity - 0.311278).abs() < 1e-6);
        assert!((a.completeness - 0.383688).abs() < 1e-6);
        assert!((a.v_measure - 2.0 * h * c / (h + c)).abs() < 1e-12);

        assert_eq!(agreement(&[0], &[0, 1]), Err(MetricsError::LengthMismatch(1, 2)));
    }

    fn labeled_points() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (4usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec(-50.0f64..50.0, n * 2),
                proptest::collection::vec(0usize..4, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn silhouette_matches_oracle((coords, labels) in labeled_points()) {
            let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
            prop_assume!(distinct.len() >= 2);
            let pts = Matrix::from_vec(labels.len(), 2, coords);
            let s = silhouette(&pts, &labels, labels.len(), 3).unwrap();
            prop_assert!((s - silhouette_oracle(&pts, &labels)).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn linkage_orderings((coords, labels) in labeled_points()) {
            let pts = Matrix::from_vec(labels.len(), 2, coords);
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let d = |a, b, k| linkage_distance(&pts, &labels, a, b, k).unwrap();
            for k in [LinkageKind::Single, LinkageKind::Complete, LinkageKind::Average, LinkageKind::Centroid] {
                prop_assert_eq!(d(0, 1, k), d(1, 0, k));
            }
            let s = d(0, 1, LinkageKind::Single);
            let a = d(0, 1, LinkageKind::Average);
            let c = d(0, 1, LinkageKind::Complete);
            prop_assert!(s <= a + 1e-12 && a <= c + 1e-12);
        }

        #[test]
        fn agreement_invariant_under_relabeling(
            pairs in proptest::collection::vec((0usize..4, 0usize..5), 1..120),
            shift in 1usize..50,
        ) {
            let t: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let base = agreement(&t, &p).unwrap();
            let t2: Vec<usize> = t.iter().map(|&l| (3 - l) * shift).collect();
            let p2: Vec<usize> = p.iter().map(|&l| 100 - l).collect();
            let moved = agreement(&t2, &p2).unwrap();
            prop_assert!((base.homogeneity - moved.homogeneity).abs() < 1e-12);
            prop_assert!((base.completeness - moved.completeness).abs() < 1e-12);
            let swapped = agreement(&p, &t).unwrap();
            prop_assert!((base.v_measure - swapped.v_measure).abs() < 1e-12);
            if base.homogeneity > 0.0 && base.completeness > 0.0 {
                let hm = 2.0 * base.homogeneity * base.completeness / (base.homogeneity + base.completeness);
                prop_assert!((base.v_measure - hm).abs() < 1e-12);
            }
        }
    }
}
