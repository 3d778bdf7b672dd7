//! Per-session state and its on-disk layout.
//!
//! ```text
//! {root}/sessions/{id}/session.json
//!                     /dataset/manifest.json, dataset/images/*.png
//!                     /checkpoints/{checkpoint}.ckpt
//!                     /history.jsonl
//! ```
//!
//! A checkpoint file is always written before the `session.json` that
//! references it, and `session.json` is replaced atomically, so a crash
//! leaves the last committed state readable.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dash_core::cluster::{ClusterResult, StyleStats};
use dash_core::dataset::{write_atomic, Dataset, HistoryLog, ImageSample, Split, HISTORY_FILE};
use dash_core::engine::{
    read_checkpoint, write_checkpoint, Checkpoint, EpochLoss, EpochProgress, LatentSet, PredictionSet, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};

pub const SESSION_FILE: &str = "session.json";
pub const DATASET_DIR: &str = "dataset";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const INTERRUPTED: &str = "interrupted by restart";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub id: String,
    pub parent_id: Option<String>,
    pub created_at: String,
    pub dataset_version: Option<String>,
    pub train_config: Option<TrainConfig>,
    /// `None` for checkpoints that were not produced by a job.
    pub warm_start: Option<bool>,
    pub epoch_losses: Vec<EpochLoss>,
    pub discarded: bool,
}

impl CheckpointEntry {
    fn of(checkpoint: &Checkpoint, warm_start: Option<bool>) -> Self {
        Self {
            id: checkpoint.id.clone(),
            parent_id: checkpoint.parent_id.clone(),
            created_at: checkpoint.created_at.clone(),
            dataset_version: checkpoint.dataset_version.clone(),
            train_config: checkpoint.train_config.clone(),
            warm_start,
            epoch_losses: checkpoint.epoch_losses.clone(),
            discarded: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetVersion {
    pub version: String,
    /// Number of samples; every version is a prefix of the next.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running { epoch: usize, epochs: usize },
    Done { checkpoint_id: String },
    Failed { reason: String },
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Done { .. } | JobState::Failed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub session_id: String,
    pub config: TrainConfig,
    pub warm_start: bool,
    pub parent_id: String,
    pub created_at: String,
    pub finished_at: Option<String>,
    #[serde(flatten)]
    pub state: JobState,
    pub progress: Vec<EpochProgress>,
}

/// Contents of `session.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub format: u32,
    pub id: String,
    pub created_at: String,
    pub active: String,
    pub checkpoints: Vec<CheckpointEntry>,
    pub dataset_versions: Vec<DatasetVersion>,
    pub jobs: Vec<Job>,
}

/// A clustering kept for representatives and translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub k: usize,
    pub seed: u64,
    pub checkpoint_id: String,
    pub dataset_version: String,
    pub splits: Vec<Split>,
    pub sizes: Vec<usize>,
    pub majority_labels: Vec<Option<usize>>,
    pub styles: Vec<StyleStats>,
    pub result: ClusterResult,
}

pub struct ClusterState {
    pub view: ClusterView,
    pub latents: LatentSet,
}

pub struct Session {
    pub dir: PathBuf,
    pub meta: SessionMeta,
    pub dataset: Arc<Dataset>,
    pub dataset_version: String,
    pub checkpoints: HashMap<String, Arc<Checkpoint>>,
    pub history: HistoryLog,
    pub clusterings: BTreeMap<usize, Arc<ClusterState>>,
    pub last_k: Option<usize>,
    /// Translated images awaiting registration, by id.
    pub pending: BTreeMap<String, ImageSample>,
    pub cache: HashMap<String, Arc<Vec<u8>>>,
    pub predictions: HashMap<(String, String, Split), Arc<PredictionSet>>,
}

impl Session {
    /// Creates the directory layout and commits the first checkpoint.
    pub fn create(dir: PathBuf, id: String, dataset: Dataset, initial: Checkpoint) -> ApiResult<Self> {
        std::fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| ApiError::internal(e.to_string()))?;
        dataset.save(&dir.join(DATASET_DIR))?;
        let version = dataset.version();
        let history = HistoryLog::open(dir.join(HISTORY_FILE))?;
        let meta = SessionMeta {
            format: 1,
            id,
            created_at: chrono::Utc::now().to_rfc3339(),
            active: initial.id.clone(),
            checkpoints: Vec::new(),
            dataset_versions: vec![DatasetVersion {
                version: version.clone(),
                samples: dataset.len(),
            }],
            jobs: Vec::new(),
        };
        let mut session = Self {
            dir,
            meta,
            dataset: Arc::new(dataset),
            dataset_version: version,
            checkpoints: HashMap::new(),
            history,
            clusterings: BTreeMap::new(),
            last_k: None,
            pending: BTreeMap::new(),
            cache: HashMap::new(),
            predictions: HashMap::new(),
        };
        session.add_checkpoint(initial, None)?;
        session.persist()?;
        Ok(session)
    }

    /// Reloads a session directory. Jobs that were still running are marked
    /// failed.
    pub fn load(dir: PathBuf) -> ApiResult<Self> {
        let path = dir.join(SESSION_FILE);
        let bytes = std::fs::read(&path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
        let mut meta: SessionMeta = serde_json::from_slice(&bytes)?;
        let dataset = Dataset::load(&dir.join(DATASET_DIR))?;
        let version = dataset.version();
        if meta.dataset_versions.last().map(|v| &v.version) != Some(&version) {
            meta.dataset_versions.push(DatasetVersion {
                version: version.clone(),
                samples: dataset.len(),
            });
        }
        let mut checkpoints = HashMap::new();
        for entry in &meta.checkpoints {
            let ckpt = read_checkpoint(&checkpoint_path(&dir, &entry.id))?;
            checkpoints.insert(entry.id.clone(), Arc::new(ckpt));
        }
        let now = chrono::Utc::now().to_rfc3339();
        let mut dirty = false;
        for job in &mut meta.jobs {
            if !job.state.is_terminal() {
                job.state = JobState::Failed {
                    reason: INTERRUPTED.to_owned(),
                };
                job.finished_at = Some(now.clone());
                dirty = true;
            }
        }
        let history = HistoryLog::open(dir.join(HISTORY_FILE))?;
        let session = Self {
            dir,
            meta,
            dataset: Arc::new(dataset),
            dataset_version: version,
            checkpoints,
            history,
            clusterings: BTreeMap::new(),
            last_k: None,
            pending: BTreeMap::new(),
            cache: HashMap::new(),
            predictions: HashMap::new(),
        };
        if dirty {
            session.persist()?;
        }
        Ok(session)
    }

    pub fn persist(&self) -> ApiResult<()> {
        let bytes = serde_json::to_vec_pretty(&self.meta)?;
        write_atomic(&self.dir.join(SESSION_FILE), &bytes)?;
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn entry(&self, id: &str) -> Option<&CheckpointEntry> {
        self.meta.checkpoints.iter().find(|c| c.id == id)
    }

    fn entry_mut(&mut self, id: &str) -> Option<&mut CheckpointEntry> {
        self.meta.checkpoints.iter_mut().find(|c| c.id == id)
    }

    /// Writes the checkpoint file and records it in memory. The caller
    /// persists `session.json`.
    pub fn add_checkpoint(&mut self, checkpoint: Checkpoint, warm_start: Option<bool>) -> ApiResult<()> {
        if self.checkpoints.contains_key(&checkpoint.id) {
            return Ok(());
        }
        write_checkpoint(&checkpoint, &checkpoint_path(&self.dir, &checkpoint.id))?;
        self.meta.checkpoints.push(CheckpointEntry::of(&checkpoint, warm_start));
        self.checkpoints.insert(checkpoint.id.clone(), Arc::new(checkpoint));
        Ok(())
    }

    /// A live (not discarded) checkpoint.
    pub fn checkpoint(&self, id: &str) -> ApiResult<Arc<Checkpoint>> {
        let entry = self.entry(id).ok_or_else(|| ApiError::not_found("checkpoint", id))?;
        if entry.discarded {
            return Err(ApiError::conflict(format!("checkpoint {id} has been discarded")));
        }
        Ok(self.checkpoints[id].clone())
    }

    pub fn active(&self) -> Arc<Checkpoint> {
        self.checkpoints[&self.meta.active].clone()
    }

    pub fn activate(&mut self, id: &str) -> ApiResult<()> {
        self.checkpoint(id)?;
        self.meta.active = id.to_owned();
        self.persist()
    }

    pub fn discard(&mut self, id: &str) -> ApiResult<()> {
        self.checkpoint(id)?;
        if self.meta.active == id {
            return Err(ApiError::conflict(format!(
                "checkpoint {id} is active; switch to another checkpoint first"
            )));
        }
        self.entry_mut(id).expect("checked above").discarded = true;
        self.persist()
    }

    pub fn running_job(&self) -> Option<&Job> {
        self.meta.jobs.iter().find(|j| !j.state.is_terminal())
    }

    pub fn job(&self, id: &str) -> Option<&Job> {
        self.meta.jobs.iter().find(|j| j.id == id)
    }

    pub fn job_mut(&mut self, id: &str) -> Option<&mut Job> {
        self.meta.jobs.iter_mut().find(|j| j.id == id)
    }

    /// The dataset as it was at `version`.
    pub fn dataset_at(&self, version: &str) -> ApiResult<Dataset> {
        if version == self.dataset_version {
            return Ok((*self.dataset).clone());
        }
        let entry = self
            .meta
            .dataset_versions
            .iter()
            .find(|v| v.version == version)
            .ok_or_else(|| ApiError::not_found("dataset version", version))?;
        let d = &self.dataset;
        let (h, w) = d.image_size();
        let samples = d.samples()[..entry.samples.min(d.len())].to_vec();
        let past = Dataset::new(d.class_names().to_vec(), h, w, samples, d.spec().cloned())?;
        if past.version() != version {
            return Err(ApiError::internal(format!(
                "dataset version {version} cannot be reconstructed"
            )));
        }
        Ok(past)
    }

    pub fn replace_dataset(&mut self, dataset: Dataset) -> ApiResult<()> {
        dataset.save_incremental(&self.dir.join(DATASET_DIR))?;
        self.dataset_version = dataset.version();
        self.meta.dataset_versions.push(DatasetVersion {
            version: self.dataset_version.clone(),
            samples: dataset.len(),
        });
        self.dataset = Arc::new(dataset);
        self.persist()
    }

    pub fn clear_caches(&mut self) {
        self.cache.clear();
        self.predictions.clear();
    }
}

pub fn checkpoint_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("{id}.ckpt"))
}
