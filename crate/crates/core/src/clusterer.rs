//! Baseline k-means so demos run without an external clusterer.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClusterError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the number of points ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("n_init must be at least 1")]
    ZeroRestarts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub seed: u64,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest inertia wins.
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, max_iter: 300, seed, tol: 1e-6, n_init: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KMeansResult<T> {
    pub labels: Vec<usize>,
    pub centroids: Matrix<T>,
    pub inertia: T,
    pub iterations: usize,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<T: Scalar>(point: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = (0, sq_dist(point, centroids.row(0)));
    for c in 1..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus<T: Scalar>(features: &Matrix<T>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let n = features.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|r| sq_dist(features.row(r), features.row(chosen[0])).as_f64()).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // Every remaining point coincides with a centre.
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|r| !chosen.contains(r)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (r, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(r), features.row(next)).as_f64());
        }
    }
    features.select_rows(&chosen)
}

fn lloyd<T: Scalar>(features: &Matrix<T>, mut centroids: Matrix<T>, config: &KMeansConfig) -> KMeansResult<T> {
    let (n, d, k) = (features.rows(), features.cols(), centroids.rows());
    let mut previous: Option<T> = None;
    let mut iterations = 0;
    loop {
        let assigned: Vec<(usize, T)> = (0..n).into_par_iter().map(|r| nearest(features.row(r), &centroids)).collect();
        let inertia: T = assigned.iter().map(|&(_, dist)| dist).sum();
        if let Some(prev) = previous {
            assert!(
                inertia <= prev + prev * T::of(1e-9) + T::of(1e-12),
                "k-means inertia increased from {prev} to {inertia}"
            );
        }
        previous = Some(inertia);
        let labels: Vec<usize> = assigned.iter().map(|&(c, _)| c).collect();
        if iterations == config.max_iter {
            return KMeansResult { labels, centroids, inertia, iterations };
        }
        iterations += 1;

        let mut sums = Matrix::filled(k, d, T::zero());
        let mut counts = vec![0usize; k];
        for (r, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums.row_mut(c).iter_mut().zip(features.row(r)) {
                *s = *s + x;
            }
        }
        let mut shift = T::zero();
        for c in (0..k).filter(|&c| counts[c] > 0) {
            let count = T::of_count(counts[c]);
            let updated: Vec<T> = sums.row(c).iter().map(|&s| s / count).collect();
            shift = shift.max(sq_dist(&updated, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&updated);
        }
        if shift.as_f64() < config.tol {
            let assigned: Vec<(usize, T)> = (0..n).into_par_iter().map(|r| nearest(features.row(r), &centroids)).collect();
            let inertia: T = assigned.iter().map(|&(_, dist)| dist).sum();
            let labels = assigned.into_iter().map(|(c, _)| c).collect();
            return KMeansResult { labels, centroids, inertia, iterations };
        }
    }
}

/// Lloyd's algorithm from seeded k-means++ starts. A cluster that empties out
/// keeps its centroid, so label ids can have gaps.
pub fn kmeans<T: Scalar>(features: &Matrix<T>, config: &KMeansConfig) -> Result<KMeansResult<T>, ClusterError> {
    let n = features.rows();
    if config.k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if config.k > n {
        return Err(ClusterError::TooManyClusters { k: config.k, n });
    }
    if config.n_init == 0 {
        return Err(ClusterError::ZeroRestarts);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<KMeansResult<T>> = None;
    for _ in 0..config.n_init {
        let start = plus_plus(features, config.k, &mut rng);
        let run = lloyd(features, start, config);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}
