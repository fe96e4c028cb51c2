//! Synthetic blob scenarios with planted expert mistakes.
//!
//! Blob centres are fixed; the seed drives the noise, the label corruption
//! and the k-means clustering, so each scenario is a pure function of it.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clusterer::{kmeans, ClusterError, KMeansConfig};
use crate::dataset::{corrupt_labels, generate_blobs, BlobSpec, CorruptionMap, DatasetError, LabeledDataset, Labeling, SplitCorruption};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

pub type Result<T, E = ScenarioError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    /// The expert lumps two of four blobs into one label.
    Split,
    /// The expert cuts one of three blobs into two labels.
    Merge,
    /// Eight blobs; two merged and one cut in three.
    Refine,
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "split" => Ok(Self::Split),
            "merge" => Ok(Self::Merge),
            "refine" => Ok(Self::Refine),
            other => Err(format!("unknown scenario {other:?} (expected split|merge|refine)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Corrupted expert labels, k-means clusters and ground truth.
    pub dataset: LabeledDataset<f64>,
    /// Where each ground-truth blob's label went.
    pub corruption: CorruptionMap,
}

fn clustered(ds: LabeledDataset<f64>, k: usize, seed: u64) -> Result<LabeledDataset<f64>> {
    let labels = kmeans(ds.features(), &KMeansConfig::new(k, seed))?.labels;
    Ok(ds.with_cluster_ids(labels)?)
}

pub fn split_scenario(seed: u64) -> Result<Scenario> {
    let ds = generate_blobs::<f64>(&BlobSpec {
        n_blobs: 4,
        points_per_blob: 100,
        centers: Some(vec![vec![-9.0, -9.0], vec![9.0, -9.0], vec![-9.0, 9.0], vec![9.0, 9.0]]),
        std: 1.5,
        seed,
        ..BlobSpec::default()
    })?;
    let expert: Vec<usize> = ds.ground_truth().unwrap_or_default().iter().map(|&t| t.min(2)).collect();
    let ds = ds.with_expert(Labeling { ids: expert, names: vec!["E_0".into(), "E_1".into(), "E_2".into()] })?;
    Ok(Scenario {
        dataset: clustered(ds, 4, seed)?,
        corruption: CorruptionMap { old_to_new: vec![vec![0], vec![1], vec![2], vec![2]] },
    })
}

pub fn merge_scenario(seed: u64) -> Result<Scenario> {
    let ds = generate_blobs::<f64>(&BlobSpec {
        n_blobs: 3,
        points_per_blob: 120,
        centers: Some(vec![vec![-9.0, 0.0], vec![9.0, 0.0], vec![0.0, 12.0]]),
        std: 1.5,
        seed,
        ..BlobSpec::default()
    })?;
    let (ds, corruption) = corrupt_labels(&ds, &[], &[SplitCorruption { label: 2, parts: 2, seed }])?;
    Ok(Scenario { dataset: clustered(ds, 3, seed)?, corruption })
}

pub fn refinement_scenario(seed: u64) -> Result<Scenario> {
    let centers: Vec<Vec<f64>> = (0..8).map(|i| vec![(i % 4) as f64 * 9.0, (i / 4) as f64 * 9.0]).collect();
    let ds = generate_blobs::<f64>(&BlobSpec {
        n_blobs: 8,
        points_per_blob: 60,
        centers: Some(centers),
        std: 1.0,
        seed,
        ..BlobSpec::default()
    })?;
    let ds = clustered(ds, 8, seed)?;
    let (dataset, corruption) = corrupt_labels(&ds, &[vec![0, 1]], &[SplitCorruption { label: 5, parts: 3, seed }])?;
    Ok(Scenario { dataset, corruption })
}

pub fn scenario(kind: ScenarioKind, seed: u64) -> Result<Scenario> {
    match kind {
        ScenarioKind::Split => split_scenario(seed),
        ScenarioKind::Merge => merge_scenario(seed),
        ScenarioKind::Refine => refinement_scenario(seed),
    }
}
