//! Versioned on-disk document store for cohorts, models and run logs.
//!
//! Every document is written to a temporary file in its target directory
//! and renamed into place, so readers only ever see complete documents.

use std::collections::HashMap;
use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use aqi_core::cohort::{AcademicLevel, Cohort};
use aqi_core::features::NormalizationCaps;
use aqi_core::model::{TrainedKind, TrainedModel};
use aqi_core::qp::ConstraintResiduals;

use crate::error::{ApiError, ServiceError};
use crate::pipeline::{sha256_hex, TraceEntry, TrainRequest};

pub const STORE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub cohort_id: String,
    pub cohort_hash: String,
    pub level: AcademicLevel,
    pub request: TrainRequest,
    pub seed: u64,
    pub run_id: String,
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistryEntry {
    pub format_version: u32,
    pub model_id: String,
    pub kind: TrainedKind,
    /// sha256 of the canonical model artifact.
    pub checksum: String,
    pub caps: NormalizationCaps,
    pub model: TrainedModel,
    pub training: TrainingMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub format_version: u32,
    pub run_id: String,
    pub model_id: String,
    pub cohort_id: String,
    pub kind: TrainedKind,
    pub status: RunStatus,
    pub trace: Vec<TraceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<ConstraintResiduals>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    format_version: u32,
}

#[derive(Clone, Copy)]
enum Kind {
    Cohort,
    Model,
    Run,
}

impl Kind {
    fn dir(self) -> &'static str {
        match self {
            Kind::Cohort => "cohorts",
            Kind::Model => "models",
            Kind::Run => "runs",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Kind::Cohort => "c-",
            Kind::Model => "m-",
            Kind::Run => "r-",
        }
    }
}

fn storage(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(e.to_string())
}

pub struct Store {
    root: PathBuf,
    model_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Store {
    /// Open or initialize a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, ServiceError> {
        let root = root.into();
        for kind in [Kind::Cohort, Kind::Model, Kind::Run] {
            fs::create_dir_all(root.join(kind.dir())).map_err(storage)?;
        }
        let manifest = root.join("store.json");
        match fs::read(&manifest) {
            Ok(bytes) => {
                let m: StoreManifest = serde_json::from_slice(&bytes).map_err(storage)?;
                if m.format_version != STORE_FORMAT_VERSION {
                    return Err(storage(format!("unsupported store version {}", m.format_version)));
                }
            }
            Err(e) if e.kind() == ErrorKind::NotFound => {
                let m = StoreManifest {
                    format_version: STORE_FORMAT_VERSION,
                };
                write_atomic(&manifest, &serde_json::to_vec_pretty(&m).map_err(storage)?)?;
            }
            Err(e) => return Err(storage(e)),
        }
        Ok(Store {
            root,
            model_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    // Ids are `<prefix><hex>`; anything else cannot name a document.
    fn path(&self, kind: Kind, id: &str) -> Option<PathBuf> {
        let hex = id.strip_prefix(kind.prefix())?;
        if hex.is_empty() || !hex.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
            return None;
        }
        Some(self.root.join(kind.dir()).join(format!("{id}.json")))
    }

    fn read<T: DeserializeOwned>(&self, kind: Kind, id: &str) -> Result<Option<T>, ServiceError> {
        let Some(path) = self.path(kind, id) else {
            return Ok(None);
        };
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(storage),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(storage(e)),
        }
    }

    /// Store a cohort under its content hash.
    pub fn put_cohort(&self, cohort: &Cohort) -> Result<String, ServiceError> {
        let text = cohort.to_json();
        let id = format!("c-{}", &sha256_hex(text.as_bytes())[..16]);
        let path = self.path(Kind::Cohort, &id).expect("generated id is well formed");
        write_atomic(&path, text.as_bytes())?;
        Ok(id)
    }

    pub fn cohort_text(&self, id: &str) -> Result<String, ServiceError> {
        let path = self
            .path(Kind::Cohort, id)
            .ok_or_else(|| ServiceError::UnknownCohort(id.to_string()))?;
        match fs::read_to_string(&path) {
            Ok(t) => Ok(t),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(ServiceError::UnknownCohort(id.to_string())),
            Err(e) => Err(storage(e)),
        }
    }

    pub fn get_cohort(&self, id: &str) -> Result<Cohort, ServiceError> {
        Cohort::from_json(&self.cohort_text(id)?).map_err(storage)
    }

    pub fn put_model(&self, entry: &ModelRegistryEntry) -> Result<(), ServiceError> {
        let lock = {
            let mut locks = self.model_locks.lock().expect("lock table poisoned");
            locks.entry(entry.model_id.clone()).or_default().clone()
        };
        let _guard = lock.lock().expect("model lock poisoned");
        let path = self
            .path(Kind::Model, &entry.model_id)
            .ok_or_else(|| storage(format!("malformed model id `{}`", entry.model_id)))?;
        write_atomic(&path, &serde_json::to_vec_pretty(entry).map_err(storage)?)
    }

    pub fn get_model(&self, id: &str) -> Result<ModelRegistryEntry, ServiceError> {
        self.read(Kind::Model, id)?
            .ok_or_else(|| ServiceError::UnknownModel(id.to_string()))
    }

    pub fn put_run(&self, run: &RunLog) -> Result<(), ServiceError> {
        let path = self
            .path(Kind::Run, &run.run_id)
            .ok_or_else(|| storage(format!("malformed run id `{}`", run.run_id)))?;
        write_atomic(&path, &serde_json::to_vec_pretty(run).map_err(storage)?)
    }

    pub fn get_run(&self, id: &str) -> Result<RunLog, ServiceError> {
        self.read(Kind::Run, id)?
            .ok_or_else(|| ServiceError::UnknownRun(id.to_string()))
    }
}

/// Write `bytes` to `path` via a synced temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(storage)?;
    tmp.write_all(bytes).map_err(storage)?;
    tmp.as_file().sync_all().map_err(storage)?;
    tmp.persist(path).map_err(storage)?;
    Ok(())
}
