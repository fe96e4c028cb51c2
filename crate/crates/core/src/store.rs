//! On-disk session persistence.
//!
//! ```text
//! <root>/<id>/session.json     state, rewritten atomically
//! <root>/<id>/decisions.log    one JSON decision record per line, append-only
//! <root>/<id>/kb/v<N>.json     every knowledge base version
//! <root>/<id>/dataset/         base features, labels and ground truth
//! ```

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;
use thiserror::Error;

use crate::dataset::{load_dataset, load_truth, save_dataset, DatasetError, DatasetFiles, LabeledDataset};
use crate::rulebase::KnowledgeBase;
use crate::scalar::Scalar;
use crate::session::{IterationReport, Session, SessionError, SessionState};

/// Environment variable naming the data directory.
pub const DATA_DIR_ENV: &str = "KNAC_DATA_DIR";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session {0:?} not found")]
    NotFound(String),
    #[error("session {0:?} already exists")]
    Exists(String),
    #[error("invalid session id {0:?}")]
    InvalidId(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_owned(), source }
}

fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> StoreError + '_ {
    move |source| StoreError::Json { path: path.to_owned(), source }
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// A fresh time-based session id.
pub fn new_id() -> String {
    format!("s{}-{:08x}", Utc::now().format("%Y%m%d%H%M%S"), rand::random::<u32>())
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io(&root))?;
        Ok(Self { root })
    }

    /// Opens `$KNAC_DATA_DIR`, or `fallback` when it is unset.
    pub fn from_env(fallback: impl Into<PathBuf>) -> Result<Self> {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => Self::open(PathBuf::from(dir)),
            None => Self::open(fallback),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.to_owned()));
        }
        Ok(self.root.join(id))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.dir(id).is_ok_and(|d| d.join("session.json").is_file())
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(&self.root)
            .map_err(io(&self.root))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|id| self.exists(id))
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Persists a new session together with its base dataset.
    pub fn create<T: Scalar>(&self, session: &Session<T>) -> Result<()> {
        let dir = self.dir(&session.state.id)?;
        if dir.exists() {
            return Err(StoreError::Exists(session.state.id.clone()));
        }
        let data = dir.join("dataset");
        fs::create_dir_all(&data).map_err(io(&data))?;
        save_dataset(&session.dataset, &data)?;
        self.write_kb(&dir, &session.state.initial_kb)?;
        self.save(session, None)
    }

    fn write_kb<T: Scalar>(&self, dir: &Path, kb: &KnowledgeBase<T>) -> Result<()> {
        let kb_dir = dir.join("kb");
        fs::create_dir_all(&kb_dir).map_err(io(&kb_dir))?;
        let path = kb_dir.join(format!("v{}.json", kb.version));
        if !path.exists() {
            let body = serde_json::to_vec_pretty(kb).map_err(json(&path))?;
            write_atomic(&path, &body)?;
        }
        Ok(())
    }

    /// Writes the session state, any new knowledge base versions and any
    /// decision records not yet in the log.
    pub fn save<T: Scalar>(&self, session: &Session<T>, report: Option<&IterationReport<T>>) -> Result<()> {
        let dir = self.dir(&session.state.id)?;
        if !dir.join("dataset").is_dir() {
            return Err(StoreError::NotFound(session.state.id.clone()));
        }
        for kb in report.into_iter().flat_map(|r| &r.kb_versions) {
            self.write_kb(&dir, kb)?;
        }
        self.write_kb(&dir, &session.state.kb)?;

        let log = dir.join("decisions.log");
        let logged = match fs::File::open(&log) {
            Ok(f) => BufReader::new(f).lines().count(),
            Err(_) => 0,
        };
        if logged < session.state.decisions.len() {
            let mut out = OpenOptions::new().create(true).append(true).open(&log).map_err(io(&log))?;
            for record in &session.state.decisions[logged..] {
                let line = serde_json::to_string(record).map_err(json(&log))?;
                writeln!(out, "{line}").map_err(io(&log))?;
            }
        }

        let path = dir.join("session.json");
        let body = serde_json::to_vec_pretty(&session.state).map_err(json(&path))?;
        write_atomic(&path, &body)
    }

    pub fn base_dataset<T: Scalar>(&self, id: &str) -> Result<LabeledDataset<T>> {
        let files = DatasetFiles::in_dir(&self.dir(id)?.join("dataset"));
        let ds = load_dataset::<T>(&files.features, &files.expert, Some(&files.clusters))?;
        match files.truth.filter(|t| t.exists()) {
            Some(t) => Ok(ds.with_ground_truth(load_truth(&t)?)?),
            None => Ok(ds),
        }
    }

    pub fn load<T: Scalar>(&self, id: &str) -> Result<Session<T>> {
        if !self.exists(id) {
            return Err(StoreError::NotFound(id.to_owned()));
        }
        let path = self.dir(id)?.join("session.json");
        let body = fs::read(&path).map_err(io(&path))?;
        let state: SessionState<T> = serde_json::from_slice(&body).map_err(json(&path))?;
        Ok(Session::restore(state, self.base_dataset(id)?)?)
    }

    pub fn kb_version<T: Scalar>(&self, id: &str, version: u64) -> Result<KnowledgeBase<T>> {
        let path = self.dir(id)?.join("kb").join(format!("v{version}.json"));
        let body = fs::read(&path).map_err(|_| StoreError::NotFound(format!("{id}/kb/v{version}")))?;
        serde_json::from_slice(&body).map_err(json(&path))
    }

    pub fn kb_versions(&self, id: &str) -> Result<Vec<u64>> {
        let kb_dir = self.dir(id)?.join("kb");
        let mut versions: Vec<u64> = fs::read_dir(&kb_dir)
            .map_err(io(&kb_dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix('v')?.strip_suffix(".json")?.parse().ok()
            })
            .collect();
        versions.sort_unstable();
        Ok(versions)
    }

    pub fn session_json_path(&self, id: &str) -> Result<PathBuf> {
        Ok(self.dir(id)?.join("session.json"))
    }
}
