//! Dataset ingestion, synthetic blob generation and label corruption.
//!
//! A [`LabeledDataset`] pairs an `n x d` feature matrix with two labelings of
//! the same rows: the expert labeling (derived from domain knowledge) and the
//! automated clustering. Label ids are always contiguous and start at 0; the
//! original label strings are kept in a name table.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: file is empty")]
    EmptyFile { path: String },
    #[error("length mismatch: features have {features} rows but {source_name} has {labels}")]
    LengthMismatch {
        source_name: String,
        features: usize,
        labels: usize,
    },
    #[error("{path}: non-numeric value {value:?} at row {row}, column {col}")]
    NonNumeric {
        path: String,
        row: usize,
        col: usize,
        value: String,
    },
    #[error("{path}: non-finite value {value:?} at row {row}, column {col}")]
    NonFinite {
        path: String,
        row: usize,
        col: usize,
        value: String,
    },
    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    Ragged {
        path: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: row id {found:?} at row {row} does not match feature row id {expected:?}")]
    RowIdMismatch {
        path: String,
        row: usize,
        expected: String,
        found: String,
    },
    #[error("{path}: cluster file mixes the unclustered sentinel -1 with real labels (row {row})")]
    PartialSentinel { path: String, row: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid blob spec: {0}")]
    InvalidSpec(String),
    #[error("unknown expert label id {0}")]
    UnknownLabel(usize),
    #[error("expert label {0} appears in more than one merge/split")]
    OverlappingCorruption(usize),
    #[error("split of label {label} needs at least 2 parts, got {parts}")]
    TooFewParts { label: usize, parts: usize },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Orders digit runs by value and everything else by character, falling
/// back to plain string order so distinct strings never compare equal.
pub fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    fn chunks(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for (x, y) in ca.iter().zip(&cb) {
        let ord = match (x, y) {
            ((true, x), (true, y)) => {
                let (x, y) = (x.trim_start_matches('0'), y.trim_start_matches('0'));
                x.len().cmp(&y.len()).then_with(|| x.cmp(y))
            }
            ((_, x), (_, y)) => x.cmp(y),
        };
        if ord.is_ne() {
            return ord;
        }
    }
    ca.len().cmp(&cb.len()).then_with(|| a.cmp(b))
}

/// A labeling of rows with contiguous ids and their display names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub ids: Vec<usize>,
    pub names: Vec<String>,
}

impl Labeling {
    /// Canonicalizes arbitrary label strings. Integer-looking labels sort
    /// numerically, anything else in natural order (`C_2` before `C_10`).
    pub fn from_names<S: AsRef<str>>(raw: &[S]) -> Self {
        let distinct: BTreeSet<&str> = raw.iter().map(AsRef::as_ref).collect();
        let mut names: Vec<String> = distinct.into_iter().map(str::to_owned).collect();
        if names.iter().all(|n| n.trim().parse::<i64>().is_ok()) {
            names.sort_by_key(|n| n.trim().parse::<i64>().unwrap_or_default());
        } else {
            names.sort_by(|a, b| natural_cmp(a, b));
        }
        let index: HashMap<&str, usize> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let ids = raw.iter().map(|r| index[r.as_ref()]).collect();
        Self { ids, names }
    }

    /// Compacts arbitrary ids to `0..k` in order of first appearance of the
    /// sorted distinct ids, carrying names along.
    pub fn compact(ids: &[usize], names: &[String]) -> Self {
        let distinct: BTreeSet<usize> = ids.iter().copied().collect();
        let remap: HashMap<usize, usize> =
            distinct.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        Self {
            ids: ids.iter().map(|i| remap[i]).collect(),
            names: distinct
                .iter()
                .map(|&old| names.get(old).cloned().unwrap_or_else(|| old.to_string()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.names.len()
    }

    /// The `{"name": id}` map persisted next to label files.
    pub fn label_map(&self) -> BTreeMap<String, usize> {
        self.names.iter().cloned().zip(0..).collect()
    }

    pub fn members(&self, label: usize) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    fn validate(&self, what: &str) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= self.names.len()) {
            return Err(DatasetError::Invalid(format!(
                "{what} label id {bad} has no name (only {} names)",
                self.names.len()
            )));
        }
        let used: BTreeSet<usize> = self.ids.iter().copied().collect();
        if used.len() != self.names.len() {
            return Err(DatasetError::Invalid(format!(
                "{what} label ids are not contiguous from 0"
            )));
        }
        Ok(())
    }
}

/// Feature matrix plus expert and automated labelings of its rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LabeledDataset<T> {
    features: Matrix<T>,
    feature_names: Vec<String>,
    row_ids: Vec<String>,
    expert: Labeling,
    /// `None` until a clusterer or a cluster file provides labels.
    clusters: Option<Labeling>,
    /// Generating labels for synthetic data, used only for evaluation.
    ground_truth: Option<Vec<usize>>,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(
        features: Matrix<T>,
        feature_names: Vec<String>,
        row_ids: Vec<String>,
        expert: Labeling,
        clusters: Option<Labeling>,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 || features.cols() == 0 {
            return Err(DatasetError::Invalid("need at least one row and one feature".into()));
        }
        if feature_names.len() != features.cols() {
            return Err(DatasetError::Invalid(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.cols()
            )));
        }
        if let Some((i, _)) = features.as_slice().iter().enumerate().find(|(_, v)| !v.is_finite())
        {
            return Err(DatasetError::NonFinite {
                path: "<memory>".into(),
                row: i / features.cols() + 1,
                col: i % features.cols() + 1,
                value: features.as_slice()[i].to_string(),
            });
        }
        for (what, len) in [("row ids", row_ids.len()), ("expert labels", expert.len())]
            .into_iter()
            .chain(clusters.as_ref().map(|c| ("cluster labels", c.len())))
        {
            if len != n {
                return Err(DatasetError::LengthMismatch {
                    source_name: what.into(),
                    features: n,
                    labels: len,
                });
            }
        }
        expert.validate("expert")?;
        if let Some(c) = &clusters {
            c.validate("cluster")?;
        }
        Ok(Self {
            features,
            feature_names,
            row_ids,
            expert,
            clusters,
            ground_truth: None,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn expert(&self) -> &Labeling {
        &self.expert
    }

    pub fn expert_labels(&self) -> &[usize] {
        &self.expert.ids
    }

    pub fn clusters(&self) -> Option<&Labeling> {
        self.clusters.as_ref()
    }

    pub fn cluster_labels(&self) -> Option<&[usize]> {
        self.clusters.as_ref().map(|c| c.ids.as_slice())
    }

    pub fn ground_truth(&self) -> Option<&[usize]> {
        self.ground_truth.as_deref()
    }

    pub fn with_expert(mut self, expert: Labeling) -> Result<Self> {
        if expert.len() != self.n_rows() {
            return Err(DatasetError::LengthMismatch {
                source_name: "expert labels".into(),
                features: self.n_rows(),
                labels: expert.len(),
            });
        }
        expert.validate("expert")?;
        self.expert = expert;
        Ok(self)
    }

    pub fn with_clusters(mut self, clusters: Labeling) -> Result<Self> {
        if clusters.len() != self.n_rows() {
            return Err(DatasetError::LengthMismatch {
                source_name: "cluster labels".into(),
                features: self.n_rows(),
                labels: clusters.len(),
            });
        }
        clusters.validate("cluster")?;
        self.clusters = Some(clusters);
        Ok(self)
    }

    /// Attaches cluster ids produced by a clusterer, naming them `C_<id>`.
    pub fn with_cluster_ids(self, ids: Vec<usize>) -> Result<Self> {
        let k = ids.iter().max().map_or(0, |m| m + 1);
        let names: Vec<String> = (0..k).map(|i| format!("C_{i}")).collect();
        self.with_clusters(Labeling::compact(&ids, &names))
    }

    pub fn with_ground_truth(mut self, truth: Vec<usize>) -> Result<Self> {
        if truth.len() != self.n_rows() {
            return Err(DatasetError::LengthMismatch {
                source_name: "ground truth".into(),
                features: self.n_rows(),
                labels: truth.len(),
            });
        }
        self.ground_truth = Some(truth);
        Ok(self)
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DatasetError + '_ {
    move |source| DatasetError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn read_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err(path))?;
    let records = rdr
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(csv_err(path))?;
    if records.is_empty() {
        return Err(DatasetError::EmptyFile {
            path: path.display().to_string(),
        });
    }
    Ok(records)
}

struct FeatureTable<T> {
    names: Vec<String>,
    row_ids: Option<Vec<String>>,
    values: Matrix<T>,
}

fn read_features<T: Scalar>(path: &Path) -> Result<FeatureTable<T>> {
    let records = read_records(path)?;
    let shown = path.display().to_string();
    let header: Vec<String> = records[0].iter().map(|h| h.trim().to_owned()).collect();
    let has_id = header.first().is_some_and(|h| h.eq_ignore_ascii_case("id"));
    let names: Vec<String> = header.iter().skip(usize::from(has_id)).cloned().collect();
    if names.is_empty() {
        return Err(DatasetError::Invalid(format!("{shown}: no feature columns")));
    }
    if records.len() == 1 {
        return Err(DatasetError::EmptyFile { path: shown });
    }
    let mut data = Vec::with_capacity((records.len() - 1) * names.len());
    let mut ids = Vec::new();
    for (r, rec) in records.iter().enumerate().skip(1) {
        if rec.len() != header.len() {
            return Err(DatasetError::Ragged {
                path: shown,
                row: r,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let mut fields = rec.iter();
        if has_id {
            ids.push(fields.next().unwrap_or_default().trim().to_owned());
        }
        for (c, cell) in fields.enumerate() {
            let cell = cell.trim();
            let v: T = cell.parse().map_err(|_| DatasetError::NonNumeric {
                path: shown.clone(),
                row: r,
                col: c + 1,
                value: cell.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::NonFinite {
                    path: shown,
                    row: r,
                    col: c + 1,
                    value: cell.to_owned(),
                });
            }
            data.push(v);
        }
    }
    Ok(FeatureTable {
        values: Matrix::from_vec(records.len() - 1, names.len(), data),
        names,
        row_ids: has_id.then_some(ids),
    })
}

const LABEL_HEADERS: &[&str] = &[
    "label", "labels", "expert", "cluster", "clusters", "class", "truth",
];

/// Label file: one label per line, or `id,label`; an optional header row is
/// recognized by its column names.
fn read_labels(path: &Path) -> Result<(Option<Vec<String>>, Vec<String>)> {
    let mut records = read_records(path)?;
    let first = &records[0];
    let is_header = match first.len() {
        1 => LABEL_HEADERS.contains(&first[0].trim().to_ascii_lowercase().as_str()),
        2 => first[0].trim().eq_ignore_ascii_case("id"),
        _ => false,
    };
    if is_header {
        records.remove(0);
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyFile {
            path: path.display().to_string(),
        });
    }
    let width = records[0].len();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        if rec.len() != width || !(1..=2).contains(&width) {
            return Err(DatasetError::Ragged {
                path: path.display().to_string(),
                row: r + 1,
                expected: width.clamp(1, 2),
                found: rec.len(),
            });
        }
        if width == 2 {
            ids.push(rec[0].trim().to_owned());
        }
        labels.push(rec[width - 1].trim().to_owned());
    }
    Ok(((width == 2).then_some(ids), labels))
}

fn reconcile_ids(
    path: &Path,
    current: &mut Option<Vec<String>>,
    incoming: Option<Vec<String>>,
) -> Result<()> {
    match (current.as_ref(), incoming) {
        (_, None) => Ok(()),
        (None, Some(ids)) => {
            *current = Some(ids);
            Ok(())
        }
        (Some(have), Some(ids)) => {
            if let Some((row, (a, b))) =
                have.iter().zip(&ids).enumerate().find(|(_, (a, b))| a != b)
            {
                return Err(DatasetError::RowIdMismatch {
                    path: path.display().to_string(),
                    row: row + 1,
                    expected: a.clone(),
                    found: b.clone(),
                });
            }
            Ok(())
        }
    }
}

/// Loads features, expert labels and cluster labels from CSV files.
///
/// A cluster file holding only `-1` yields an unclustered dataset.
pub fn load_dataset<T: Scalar>(
    features_path: &Path,
    expert_path: &Path,
    clusters_path: Option<&Path>,
) -> Result<LabeledDataset<T>> {
    let table = read_features::<T>(features_path)?;
    let n = table.values.rows();
    let mut row_ids = table.row_ids;

    let (expert_ids, expert_raw) = read_labels(expert_path)?;
    if expert_raw.len() != n {
        return Err(DatasetError::LengthMismatch {
            source_name: expert_path.display().to_string(),
            features: n,
            labels: expert_raw.len(),
        });
    }
    reconcile_ids(expert_path, &mut row_ids, expert_ids)?;

    let clusters = match clusters_path {
        None => None,
        Some(path) => {
            let (ids, raw) = read_labels(path)?;
            if raw.len() != n {
                return Err(DatasetError::LengthMismatch {
                    source_name: path.display().to_string(),
                    features: n,
                    labels: raw.len(),
                });
            }
            reconcile_ids(path, &mut row_ids, ids)?;
            let sentinel = raw.iter().filter(|l| l.as_str() == "-1").count();
            if sentinel == n {
                None
            } else if sentinel > 0 {
                let row = raw.iter().position(|l| l == "-1").unwrap_or(0) + 1;
                return Err(DatasetError::PartialSentinel {
                    path: path.display().to_string(),
                    row,
                });
            } else {
                Some(Labeling::from_names(&raw))
            }
        }
    };

    LabeledDataset::new(
        table.values,
        table.names,
        row_ids.unwrap_or_else(|| default_row_ids(n)),
        Labeling::from_names(&expert_raw),
        clusters,
    )
}

fn default_row_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

/// Paths written by [`save_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub features: PathBuf,
    pub expert: PathBuf,
    pub clusters: PathBuf,
    pub truth: Option<PathBuf>,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            features: dir.join("features.csv"),
            expert: dir.join("expert.csv"),
            clusters: dir.join("clusters.csv"),
            truth: Some(dir.join("truth.csv")),
        }
    }
}

fn write_labels(path: &Path, header: &str, labels: impl Iterator<Item = String>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(csv_err(path))?;
    wtr.write_record([header]).map_err(csv_err(path))?;
    for l in labels {
        wtr.write_record([l]).map_err(csv_err(path))?;
    }
    wtr.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the canonical CSV form of a dataset into `dir`.
///
/// Row ids are written as an `id` column only when they differ from the
/// default `0..n` numbering.
pub fn save_dataset<T: Scalar>(ds: &LabeledDataset<T>, dir: &Path) -> Result<DatasetFiles> {
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let files = DatasetFiles::in_dir(dir);
    let with_ids = ds.row_ids != default_row_ids(ds.n_rows());
    let path = files.features.as_path();
    let mut wtr = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header: Vec<String> = Vec::new();
    if with_ids {
        header.push("id".into());
    }
    header.extend(ds.feature_names.iter().cloned());
    wtr.write_record(&header).map_err(csv_err(path))?;
    for r in 0..ds.n_rows() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if with_ids {
            rec.push(ds.row_ids[r].clone());
        }
        rec.extend(ds.features.row(r).iter().map(|v| v.to_string()));
        wtr.write_record(&rec).map_err(csv_err(path))?;
    }
    wtr.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;

    let names = |l: &Labeling| -> Vec<String> {
        l.ids.iter().map(|&i| l.names[i].clone()).collect()
    };
    write_labels(&files.expert, "label", names(&ds.expert).into_iter())?;
    match &ds.clusters {
        Some(c) => write_labels(&files.clusters, "label", names(c).into_iter())?,
        None => write_labels(
            &files.clusters,
            "label",
            std::iter::repeat_n("-1".to_string(), ds.n_rows()),
        )?,
    }
    let truth = match (&ds.ground_truth, &files.truth) {
        (Some(t), Some(p)) => {
            write_labels(p, "truth", t.iter().map(ToString::to_string))?;
            Some(p.clone())
        }
        _ => None,
    };
    Ok(DatasetFiles { truth, ..files })
}

/// Reads an optional ground-truth file (same format as label files).
pub fn load_truth(path: &Path) -> Result<Vec<usize>> {
    let (_, raw) = read_labels(path)?;
    Ok(Labeling::from_names(&raw).ids)
}

/// Specification of isotropic Gaussian blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_blobs: usize,
    pub points_per_blob: usize,
    pub dim: usize,
    /// Blob centers; drawn uniformly from `[-10, 10]^dim` when absent.
    pub centers: Option<Vec<Vec<f64>>>,
    pub std: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            n_blobs: 3,
            points_per_blob: 100,
            dim: 2,
            centers: None,
            std: 1.0,
            seed: 0,
        }
    }
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.n_blobs == 0 || self.points_per_blob == 0 || self.dim == 0 {
            return Err(DatasetError::InvalidSpec("counts must be at least 1".into()));
        }
        if !(self.std.is_finite() && self.std > 0.0) {
            return Err(DatasetError::InvalidSpec(format!("std must be > 0, got {}", self.std)));
        }
        if let Some(c) = &self.centers {
            if c.len() != self.n_blobs || c.iter().any(|p| p.len() != self.dim) {
                return Err(DatasetError::InvalidSpec(format!(
                    "expected {} centers of dimension {}",
                    self.n_blobs, self.dim
                )));
            }
        }
        Ok(())
    }
}

/// Samples isotropic Gaussian blobs. Expert labels start as the blob ids
/// (named `E_<id>`) and are also stored as ground truth; cluster labels are
/// left unset.
pub fn generate_blobs<T: Scalar>(spec: &BlobSpec) -> Result<LabeledDataset<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = match &spec.centers {
        Some(c) => c.clone(),
        None => {
            let boxed = Uniform::new(-10.0, 10.0).expect("valid range");
            (0..spec.n_blobs)
                .map(|_| (0..spec.dim).map(|_| boxed.sample(&mut rng)).collect())
                .collect()
        }
    };
    let noise = Normal::new(0.0, spec.std).expect("std validated");
    let n = spec.n_blobs * spec.points_per_blob;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (b, center) in centers.iter().enumerate() {
        for _ in 0..spec.points_per_blob {
            data.extend(center.iter().map(|&c| T::of(c + noise.sample(&mut rng))));
            labels.push(b);
        }
    }
    let names: Vec<String> = (0..spec.n_blobs).map(|b| format!("E_{b}")).collect();
    let feature_names = (1..=spec.dim).map(|i| format!("x{i}")).collect();
    LabeledDataset::new(
        Matrix::from_vec(n, spec.dim, data),
        feature_names,
        default_row_ids(n),
        Labeling {
            ids: labels.clone(),
            names,
        },
        None,
    )?
    .with_ground_truth(labels)
}

/// Random split of one expert label into `parts` new labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCorruption {
    pub label: usize,
    pub parts: usize,
    pub seed: u64,
}

/// Old expert id -> the new ids its points now carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionMap {
    pub old_to_new: Vec<Vec<usize>>,
}

/// Applies fake merges and splits to the expert labeling.
///
/// Untouched labels keep their relative order and come first, followed by
/// one label per merge group and then the parts of each split. Split parts
/// are assigned round-robin over a seeded permutation of the label's points,
/// so part sizes differ by at most one.
pub fn corrupt_labels<T: Scalar>(
    ds: &LabeledDataset<T>,
    merges: &[Vec<usize>],
    splits: &[SplitCorruption],
) -> Result<(LabeledDataset<T>, CorruptionMap)> {
    let k = ds.expert.n_labels();
    let mut seen = BTreeSet::new();
    let touched = merges.iter().flatten().copied().chain(splits.iter().map(|s| s.label));
    for l in touched {
        if l >= k {
            return Err(DatasetError::UnknownLabel(l));
        }
        if !seen.insert(l) {
            return Err(DatasetError::OverlappingCorruption(l));
        }
    }
    if let Some(s) = splits.iter().find(|s| s.parts < 2) {
        return Err(DatasetError::TooFewParts {
            label: s.label,
            parts: s.parts,
        });
    }

    let old_names = &ds.expert.names;
    let mut names = Vec::new();
    let mut old_to_new: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (l, name) in old_names.iter().enumerate() {
        if !seen.contains(&l) {
            old_to_new[l].push(names.len());
            names.push(name.clone());
        }
    }
    for group in merges.iter().filter(|g| !g.is_empty()) {
        let id = names.len();
        let joined: Vec<&str> = group.iter().map(|&l| old_names[l].as_str()).collect();
        names.push(joined.join("+"));
        for &l in group {
            old_to_new[l].push(id);
        }
    }
    let mut ids: Vec<usize> = ds.expert.ids.iter().map(|&l| old_to_new[l].first().copied().unwrap_or(usize::MAX)).collect();
    for s in splits {
        let first = names.len();
        for p in 0..s.parts {
            names.push(format!("{}#{p}", old_names[s.label]));
            old_to_new[s.label].push(first + p);
        }
        let mut members = ds.expert.members(s.label);
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(s.seed));
        for (pos, row) in members.into_iter().enumerate() {
            ids[row] = first + pos % s.parts;
        }
    }
    // Split parts of an empty label would leave gaps; compact keeps ids contiguous.
    let expert = Labeling::compact(&ids, &names);
    let mut out = ds.clone();
    out.expert = expert;
    Ok((out, CorruptionMap { old_to_new }))
}
