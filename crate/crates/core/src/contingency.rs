//! Contingency matrix between expert and automated labelings, and the two
//! normalized views of it that drive split and merge recommendations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::matrix::Matrix;
use crate::scalar::{clamp, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum ContingencyError {
    #[error("dataset has no cluster labels yet")]
    Unclustered,
    #[error("entropy of an all-zero distribution is undefined")]
    ZeroDistribution,
}

/// Co-assignment counts: `counts[i][j]` is the number of points in expert
/// cluster `i` and automated cluster `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyMatrix {
    pub counts: Matrix<u64>,
    pub expert_ids: Vec<String>,
    pub cluster_ids: Vec<String>,
}

impl ContingencyMatrix {
    /// Builds the matrix from raw label vectors with `n_expert` rows and `n_cluster` columns.
    pub fn from_labels(
        expert: &[usize],
        clusters: &[usize],
        n_expert: usize,
        n_cluster: usize,
    ) -> Self {
        assert_eq!(expert.len(), clusters.len(), "label vectors differ in length");
        let mut counts = Matrix::filled(n_expert, n_cluster, 0u64);
        for (&e, &c) in expert.iter().zip(clusters) {
            counts.set(e, c, counts.get(e, c) + 1);
        }
        Self {
            counts,
            expert_ids: (0..n_expert).map(|i| i.to_string()).collect(),
            cluster_ids: (0..n_cluster).map(|j| j.to_string()).collect(),
        }
    }

    pub fn n_expert(&self) -> usize {
        self.counts.rows()
    }

    pub fn n_clusters(&self) -> usize {
        self.counts.cols()
    }

    pub fn total(&self) -> u64 {
        self.counts.as_slice().iter().sum()
    }

    /// Multiplies every count by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            counts: self.counts.map(|c| c * factor),
            ..self.clone()
        }
    }
}

pub fn contingency<T: Scalar>(ds: &LabeledDataset<T>) -> Result<ContingencyMatrix, ContingencyError> {
    let clusters = ds.clusters().ok_or(ContingencyError::Unclustered)?;
    let mut m = ContingencyMatrix::from_labels(
        ds.expert_labels(),
        &clusters.ids,
        ds.expert().n_labels(),
        clusters.n_labels(),
    );
    m.expert_ids = ds.expert().names.clone();
    m.cluster_ids = clusters.names.clone();
    Ok(m)
}

/// Shannon entropy in bits of a non-negative vector after normalization.
pub fn entropy_bits<T: Scalar>(distribution: &[T]) -> Result<T, ContingencyError> {
    let total: T = distribution.iter().copied().sum();
    if total.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(ContingencyError::ZeroDistribution);
    }
    Ok(distribution
        .iter()
        .filter(|&&v| v > T::zero())
        .map(|&v| {
            let p = v / total;
            -p * p.log2()
        })
        .sum::<T>()
        .max(T::zero()))
}

/// Which axis the split normalization and entropy penalty run along.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisMode {
    /// Normalize and penalize each automated cluster (column).
    #[default]
    Column,
    /// Normalize and penalize each expert cluster (row).
    Row,
}

impl std::str::FromStr for AxisMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "column" => Ok(Self::Column),
            "row" => Ok(Self::Row),
            other => Err(format!("unknown axis mode {other:?} (expected column|row)")),
        }
    }
}

/// Split evidence per (expert, automated) cell, min-max scaled per row to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SplitMatrix<T> {
    pub values: Matrix<T>,
    pub axis_mode: AxisMode,
}

/// Row-normalized contingency and the cosine similarity between expert rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MergeMatrix<T> {
    pub values: Matrix<T>,
    pub sim: Matrix<T>,
}

fn l2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `1 / (H / log2(n_expert) + 1)` for one count vector; 1 when there is a
/// single expert label or the vector is empty.
fn entropy_penalty<T: Scalar>(counts: &[T], n_expert: usize) -> T {
    if n_expert <= 1 {
        return T::one();
    }
    match entropy_bits(counts) {
        Ok(h) => T::one() / (h / T::of_count(n_expert).log2() + T::one()),
        Err(_) => T::one(),
    }
}

const FLAT_TOLERANCE: f64 = 1e-12;

fn min_max_rows<T: Scalar>(m: &mut Matrix<T>) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let (lo, hi) = row
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if row.is_empty() {
            continue;
        }
        // Spreads at rounding level count as flat.
        if hi - lo > hi.abs() * T::of(FLAT_TOLERANCE) {
            for v in row.iter_mut() {
                *v = clamp((*v - lo) / (hi - lo), T::zero(), T::one());
            }
        } else {
            // Flat row: no evidence if zero, otherwise every cell is an equal candidate.
            let fill = if hi > T::zero() { T::one() } else { T::zero() };
            row.fill(fill);
        }
    }
}

pub fn split_matrix<T: Scalar>(m: &ContingencyMatrix, axis_mode: AxisMode) -> SplitMatrix<T> {
    let n_expert = m.n_expert();
    let mut values = m.counts.map(|c| T::of(c as f64));
    match axis_mode {
        AxisMode::Column => {
            for j in 0..values.cols() {
                let col = values.column(j);
                let norm = l2(&col);
                if norm == T::zero() {
                    continue;
                }
                let penalty = entropy_penalty(&col, n_expert);
                for (i, v) in col.into_iter().enumerate() {
                    values.set(i, j, v / norm * penalty);
                }
            }
        }
        AxisMode::Row => {
            for i in 0..values.rows() {
                let row = values.row(i).to_vec();
                let norm = l2(&row);
                if norm == T::zero() {
                    continue;
                }
                let penalty = entropy_penalty(&row, n_expert);
                for v in values.row_mut(i) {
                    *v = *v / norm * penalty;
                }
            }
        }
    }
    min_max_rows(&mut values);
    SplitMatrix { values, axis_mode }
}

pub fn merge_matrix<T: Scalar>(m: &ContingencyMatrix) -> MergeMatrix<T> {
    let mut values = m.counts.map(|c| T::of(c as f64));
    let mut nonzero = vec![false; values.rows()];
    for (i, nz) in nonzero.iter_mut().enumerate() {
        let norm = l2(values.row(i));
        if norm > T::zero() {
            *nz = true;
            for v in values.row_mut(i) {
                *v = *v / norm;
            }
        }
    }
    let n = values.rows();
    let mut sim = Matrix::filled(n, n, T::zero());
    for a in 0..n {
        for b in a..n {
            if !(nonzero[a] && nonzero[b]) {
                continue;
            }
            let dot = if a == b {
                T::one()
            } else {
                let d: T = values.row(a).iter().zip(values.row(b)).map(|(&x, &y)| x * y).sum();
                clamp(d, T::zero(), T::one())
            };
            sim.set(a, b, dot);
            sim.set(b, a, dot);
        }
    }
    MergeMatrix { values, sim }
}
