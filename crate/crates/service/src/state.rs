//! Session registry and every operation the HTTP layer exposes.
//!
//! Methods block; the router runs them on the blocking pool. Heavy analytics
//! snapshot the inputs they need, release the session lock while computing,
//! and publish the result under a key that includes the checkpoint id and
//! dataset version.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use dash_core::cluster::{
    augmented_id, check_k, compute_style_stats, kmeans, majority_labels, representatives, translate_with, MomentMatching,
};
use dash_core::dataset::{generate_biased_dataset, BiasedDatasetSpec, Dataset, HistoryRecord, ImageSample, Split};
use dash_core::diff::{
    confusion, frequent_misclassified, mosaic_layout, trace_diff, ConfusionMatrix, FrequentMiss, MosaicLayout,
    TraceDiff, DEFAULT_GUTTER, DEFAULT_MIN_CELL,
};
use dash_core::engine::{
    extract_latents, init_model, predict, read_checkpoint, train, Checkpoint, ConvNetConfig, PredictionRecord,
    PredictionSet, TrainConfig,
};
use dash_core::explain::{grad_cam, overlay, Heatmap};
use dash_core::image::Image;
use dash_core::projection::{density_grid, scott_bandwidth, tsne, DensityField, ProjectionResult, TsneParams};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::session::{CheckpointEntry, ClusterState, ClusterView, DatasetVersion, Job, JobState, Session};

pub const SESSIONS_DIR: &str = "sessions";
pub const MAX_TRANSLATIONS_PER_SOURCE: usize = 16;

fn lock(session: &Mutex<Session>) -> MutexGuard<'_, Session> {
    session.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub id: Option<String>,
    /// Directory holding `manifest.json`.
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
    /// Generated when no directory is given.
    #[serde(default)]
    pub dataset_spec: Option<BiasedDatasetSpec>,
    /// Defaults to the small two-block network with seed 0.
    #[serde(default)]
    pub model: Option<ConvNetConfig>,
    /// Initial checkpoint file; a fresh model is initialized otherwise.
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    /// Starts a training job right away.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRequest {
    pub config: TrainConfig,
    #[serde(default = "yes")]
    pub warm_start: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub version: String,
    pub samples: usize,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub augmented: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub created_at: String,
    pub active: String,
    pub dataset: DatasetSummary,
    pub dataset_versions: Vec<DatasetVersion>,
    pub checkpoints: Vec<CheckpointEntry>,
    pub jobs: Vec<Job>,
    pub pending: Vec<String>,
    pub clusterings: Vec<usize>,
    pub history_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session: SessionView,
    pub job: Option<Job>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsView {
    pub checkpoint_id: String,
    pub dataset_version: String,
    pub split: Split,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub records: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMeta {
    pub id: String,
    pub split: Split,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub loss: f64,
    pub augmented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionView {
    pub checkpoint_id: String,
    pub dataset_version: String,
    pub projection: ProjectionResult,
    /// Aligned with `projection.points`.
    pub meta: Vec<PointMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityView {
    pub checkpoint_id: String,
    pub dataset_version: String,
    /// Restricts the estimate to one ground-truth class.
    pub class: Option<usize>,
    pub points: usize,
    pub field: DensityField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcamView {
    pub checkpoint_id: String,
    pub heatmap: Heatmap,
    pub alpha: f64,
    pub original_png: String,
    pub heatmap_png: String,
    pub overlay_png: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterRequest {
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub splits: Option<Vec<Split>>,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativesView {
    pub k: usize,
    pub n: usize,
    pub checkpoint_id: String,
    pub representatives: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranslateRequest {
    pub source_ids: Vec<String>,
    pub cluster: usize,
    #[serde(default = "one")]
    pub count: usize,
    /// Which clustering to use; the most recent one by default.
    #[serde(default)]
    pub k: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatedImage {
    pub id: String,
    pub source_id: String,
    pub style_cluster: usize,
    pub label: usize,
    pub png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateView {
    pub k: usize,
    pub cluster: usize,
    pub items: Vec<TranslatedImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentRequest {
    pub ids: Vec<String>,
    /// Target class for every image; each keeps its source's label otherwise.
    #[serde(default)]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentView {
    pub added: Vec<String>,
    pub dataset_version: String,
    pub history: Vec<HistoryRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DiffQuery {
    pub cid_a: Option<String>,
    pub cid_b: Option<String>,
    pub split: Option<Split>,
    pub min_cell: Option<f64>,
    pub gutter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicSide {
    pub checkpoint_id: String,
    pub confusion: ConfusionMatrix,
    pub layout: MosaicLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicView {
    pub split: Split,
    pub dataset_version: String,
    pub a: MosaicSide,
    pub b: MosaicSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceView {
    pub dataset_version: String,
    pub trace: TraceDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequentView {
    pub split: Split,
    pub threshold: f64,
    pub dataset_version: String,
    pub checkpoints: Vec<String>,
    pub items: Vec<FrequentMiss>,
}

struct Inner {
    root: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    jobs: RwLock<HashMap<String, String>>,
}

/// Shared handle to every session under one root directory.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Opens `root`, reloading every session found under it.
    pub fn open(root: impl Into<PathBuf>) -> ApiResult<Self> {
        let root = root.into();
        let dir = root.join(SESSIONS_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| ApiError::internal(format!("{}: {e}", dir.display())))?;
        let mut sessions = BTreeMap::new();
        let mut jobs = HashMap::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| ApiError::internal(e.to_string()))?;
        for entry in entries {
            let path = entry.map_err(|e| ApiError::internal(e.to_string()))?.path();
            if !path.join(crate::session::SESSION_FILE).exists() {
                continue;
            }
            let session = Session::load(path)?;
            for job in &session.meta.jobs {
                jobs.insert(job.id.clone(), session.id().to_owned());
            }
            sessions.insert(session.id().to_owned(), Arc::new(Mutex::new(session)));
        }
        Ok(Self {
            inner: Arc::new(Inner {
                root,
                sessions: RwLock::new(sessions),
                jobs: RwLock::new(jobs),
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.inner
            .sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.inner
            .sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    pub fn create_session(&self, req: CreateSession) -> ApiResult<CreatedSession> {
        let dataset = match (&req.dataset_dir, &req.dataset_spec) {
            (Some(dir), None) => Dataset::load(dir)?,
            (None, Some(spec)) => generate_biased_dataset(spec)?,
            _ => return Err(ApiError::invalid("give exactly one of dataset_dir and dataset_spec")),
        };
        let (h, w) = dataset.image_size();
        let initial = match (&req.checkpoint_path, &req.model) {
            (Some(path), _) => read_checkpoint(path)?,
            (None, Some(model)) => init_model(model)?,
            (None, None) => {
                let mut model = ConvNetConfig::small(dataset.num_classes(), 0);
                model.input_size = h.max(w);
                init_model(&model)?
            }
        };
        let cfg = initial.config();
        if cfg.input_size != h || cfg.input_size != w || cfg.num_classes != dataset.num_classes() {
            return Err(ApiError::invalid(format!(
                "model expects {0}x{0} images and {1} classes; dataset has {h}x{w} images and {2} classes",
                cfg.input_size,
                cfg.num_classes,
                dataset.num_classes()
            )));
        }

        let id = {
            let mut sessions = self.inner.sessions.write().unwrap_or_else(|e| e.into_inner());
            let id = match req.id {
                Some(id) => {
                    if id.is_empty()
                        || id.len() > 64
                        || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
                    {
                        return Err(ApiError::invalid("session id must be 1-64 characters of [A-Za-z0-9_-]"));
                    }
                    if sessions.contains_key(&id) {
                        return Err(ApiError::conflict(format!("session {id} already exists")));
                    }
                    id
                }
                None => (1..)
                    .map(|n| format!("s{n}"))
                    .find(|id| !sessions.contains_key(id) && !self.session_dir(id).exists())
                    .expect("unbounded"),
            };
            let session = Session::create(self.session_dir(&id), id.clone(), dataset, initial)?;
            sessions.insert(id.clone(), Arc::new(Mutex::new(session)));
            id
        };
        let job = match req.train {
            Some(config) => Some(self.start_training(&id, TrainRequest { config, warm_start: true })?),
            None => None,
        };
        Ok(CreatedSession {
            session: self.get_session(&id)?,
            job,
        })
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.inner.root.join(SESSIONS_DIR).join(id)
    }

    pub fn get_session(&self, id: &str) -> ApiResult<SessionView> {
        let session = self.session(id)?;
        let s = lock(&session);
        let d = &s.dataset;
        Ok(SessionView {
            id: s.meta.id.clone(),
            created_at: s.meta.created_at.clone(),
            active: s.meta.active.clone(),
            dataset: DatasetSummary {
                version: s.dataset_version.clone(),
                samples: d.len(),
                class_names: d.class_names().to_vec(),
                image_size: d.image_size().0,
                train: d.split_len(Split::Train),
                val: d.split_len(Split::Val),
                test: d.split_len(Split::Test),
                augmented: d.samples().iter().filter(|s| s.source_id.is_some()).count(),
            },
            dataset_versions: s.meta.dataset_versions.clone(),
            checkpoints: s.meta.checkpoints.clone(),
            jobs: s.meta.jobs.clone(),
            pending: s.pending.keys().cloned().collect(),
            clusterings: s.clusterings.keys().copied().collect(),
            history_records: s.history.records().len(),
        })
    }

    /// Starts a background training job on the active checkpoint (or a
    /// fresh initialization of its architecture when `warm_start` is false).
    pub fn start_training(&self, session_id: &str, req: TrainRequest) -> ApiResult<Job> {
        req.config.validate()?;
        let session = self.session(session_id)?;
        let (job, parent, dataset) = {
            let mut s = lock(&session);
            if let Some(job) = s.running_job() {
                return Err(ApiError::conflict(format!("training job {} is still running", job.id))
                    .with_detail(serde_json::json!({ "job_id": job.id })));
            }
            let parent = if req.warm_start {
                s.active()
            } else {
                let fresh = init_model(s.active().config())?;
                let id = fresh.id.clone();
                s.add_checkpoint(fresh, None)?;
                s.checkpoint(&id)?
            };
            let job = Job {
                id: format!("{}-job{}", s.id(), s.meta.jobs.len() + 1),
                session_id: s.id().to_owned(),
                config: req.config.clone(),
                warm_start: req.warm_start,
                parent_id: parent.id.clone(),
                created_at: chrono::Utc::now().to_rfc3339(),
                finished_at: None,
                state: JobState::Running {
                    epoch: 0,
                    epochs: req.config.epochs,
                },
                progress: Vec::new(),
            };
            s.meta.jobs.push(job.clone());
            s.persist()?;
            (job, parent, s.dataset.clone())
        };
        self.inner
            .jobs
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(job.id.clone(), session_id.to_owned());

        let job_id = job.id.clone();
        let config = req.config;
        let warm_start = req.warm_start;
        std::thread::spawn(move || {
            let result = train(&parent, &dataset, &config, |p| {
                let mut s = lock(&session);
                if let Some(job) = s.job_mut(&job_id) {
                    job.progress.push(*p);
                    job.state = JobState::Running {
                        epoch: p.epoch,
                        epochs: p.epochs,
                    };
                }
            });
            let mut s = lock(&session);
            let state = match result.map_err(ApiError::from).and_then(|c| commit(&mut s, c, warm_start)) {
                Ok(id) => JobState::Done { checkpoint_id: id },
                Err(e) => JobState::Failed {
                    reason: e.body.message,
                },
            };
            if let Some(job) = s.job_mut(&job_id) {
                job.state = state;
                job.finished_at = Some(chrono::Utc::now().to_rfc3339());
            }
            if let Err(e) = s.persist() {
                eprintln!("failed to persist session {}: {e}", s.id());
            }
        });
        Ok(job)
    }

    pub fn job(&self, job_id: &str) -> ApiResult<Job> {
        let session_id = self
            .inner
            .jobs
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(job_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("job", job_id))?;
        let session = self.session(&session_id)?;
        let s = lock(&session);
        s.job(job_id).cloned().ok_or_else(|| ApiError::not_found("job", job_id))
    }

    /// Polls until the job is terminal.
    pub fn wait_for_job(&self, job_id: &str) -> ApiResult<Job> {
        loop {
            let job = self.job(job_id)?;
            if job.state.is_terminal() {
                return Ok(job);
            }
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
    }

    pub fn activate(&self, session_id: &str, checkpoint_id: &str) -> ApiResult<SessionView> {
        lock(&*self.session(session_id)?).activate(checkpoint_id)?;
        self.get_session(session_id)
    }

    pub fn discard(&self, session_id: &str, checkpoint_id: &str) -> ApiResult<SessionView> {
        lock(&*self.session(session_id)?).discard(checkpoint_id)?;
        self.get_session(session_id)
    }

    /// Drops every cached analytics result, for checking that cached and
    /// fresh responses agree.
    pub fn clear_caches(&self, session_id: &str) -> ApiResult<()> {
        lock(&*self.session(session_id)?).clear_caches();
        Ok(())
    }

    /// The dataset as it was at `version`; past versions are prefixes of the
    /// current one.
    pub fn dataset_at(&self, session_id: &str, version: &str) -> ApiResult<Dataset> {
        lock(&*self.session(session_id)?).dataset_at(version)
    }

    pub fn checkpoint(&self, session_id: &str, checkpoint_id: &str) -> ApiResult<Arc<Checkpoint>> {
        let session = self.session(session_id)?;
        let s = lock(&session);
        s.checkpoints
            .get(checkpoint_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("checkpoint", checkpoint_id))
    }

    /// Resolves an optional checkpoint id (active by default) and snapshots
    /// the current dataset.
    fn snapshot(&self, session_id: &str, checkpoint: Option<&str>) -> ApiResult<Snapshot> {
        let session = self.session(session_id)?;
        let s = lock(&session);
        let checkpoint = match checkpoint {
            Some(id) => s.checkpoint(id)?,
            None => s.active(),
        };
        Ok(Snapshot {
            session: session.clone(),
            checkpoint,
            dataset: s.dataset.clone(),
            version: s.dataset_version.clone(),
        })
    }

    fn cached(
        &self,
        snap: &Snapshot,
        op: &str,
        params: &impl Serialize,
        compute: impl FnOnce() -> ApiResult<Vec<u8>>,
    ) -> ApiResult<Arc<Vec<u8>>> {
        let key = format!(
            "{op}|{}|{}|{}",
            snap.checkpoint.id,
            snap.version,
            serde_json::to_string(params)?
        );
        if let Some(hit) = lock(&snap.session).cache.get(&key) {
            return Ok(hit.clone());
        }
        let bytes = Arc::new(compute()?);
        lock(&snap.session).cache.insert(key, bytes.clone());
        Ok(bytes)
    }

    fn predictions_for(&self, snap: &Snapshot, split: Split) -> ApiResult<Arc<PredictionSet>> {
        let key = (snap.checkpoint.id.clone(), snap.version.clone(), split);
        if let Some(hit) = lock(&snap.session).predictions.get(&key) {
            return Ok(hit.clone());
        }
        let set = Arc::new(predict(&snap.checkpoint, &snap.dataset, split)?);
        lock(&snap.session).predictions.insert(key, set.clone());
        Ok(set)
    }

    pub fn predictions(&self, session_id: &str, split: Split, checkpoint: Option<&str>) -> ApiResult<Arc<Vec<u8>>> {
        let snap = self.snapshot(session_id, checkpoint)?;
        self.cached(&snap, "predictions", &split, || {
            let set = self.predictions_for(&snap, split)?;
            Ok(serde_json::to_vec(&PredictionsView {
                checkpoint_id: set.checkpoint_id.clone(),
                dataset_version: snap.version.clone(),
                split,
                accuracy: set.accuracy(),
                mean_loss: set.mean_loss(),
                records: set.records.clone(),
            })?)
        })
    }

    /// Joint t-SNE of the train and val latents with per-point metadata.
    pub fn projection(
        &self,
        session_id: &str,
        params: &TsneParams,
        checkpoint: Option<&str>,
    ) -> ApiResult<Arc<Vec<u8>>> {
        let snap = self.snapshot(session_id, checkpoint)?;
        self.projection_bytes(&snap, params)
    }

    fn projection_bytes(&self, snap: &Snapshot, params: &TsneParams) -> ApiResult<Arc<Vec<u8>>> {
        self.cached(snap, "projection", params, || {
            let splits = [Split::Train, Split::Val];
            let latents = extract_latents(&snap.checkpoint, &snap.dataset, &splits)?;
            let projection = tsne(&latents, params)?;
            let mut records = HashMap::new();
            for split in splits {
                let set = self.predictions_for(snap, split)?;
                for r in &set.records {
                    records.insert(r.image_id.clone(), (split, r.clone()));
                }
            }
            let meta = projection
                .points
                .iter()
                .map(|p| {
                    let (split, r) = &records[&p.id];
                    PointMeta {
                        id: p.id.clone(),
                        split: *split,
                        label: r.label,
                        predicted: r.predicted,
                        correct: r.correct,
                        loss: r.loss,
                        augmented: snap.dataset.get(&p.id).is_some_and(|s| s.source_id.is_some()),
                    }
                })
                .collect();
            Ok(serde_json::to_vec(&ProjectionView {
                checkpoint_id: snap.checkpoint.id.clone(),
                dataset_version: snap.version.clone(),
                projection,
                meta,
            })?)
        })
    }

    /// Kernel density over the projection, optionally for one class.
    pub fn density(
        &self,
        session_id: &str,
        params: &TsneParams,
        class: Option<usize>,
        resolution: Option<usize>,
        checkpoint: Option<&str>,
    ) -> ApiResult<Arc<Vec<u8>>> {
        let snap = self.snapshot(session_id, checkpoint)?;
        if let Some(c) = class {
            if c >= snap.dataset.num_classes() {
                return Err(ApiError::invalid(format!(
                    "class {c} is not below {}",
                    snap.dataset.num_classes()
                )));
            }
        }
        let resolution = resolution.unwrap_or(dash_core::projection::DEFAULT_RESOLUTION);
        self.cached(&snap, "density", &(params, class, resolution), || {
            let view: ProjectionView = serde_json::from_slice(&self.projection_bytes(&snap, params)?)?;
            let points: Vec<[f64; 2]> = view
                .projection
                .points
                .iter()
                .zip(&view.meta)
                .filter(|(_, m)| class.is_none_or(|c| m.label == c))
                .map(|(p, _)| [p.x, p.y])
                .collect();
            if points.is_empty() {
                return Err(ApiError::invalid("no projected points for this class"));
            }
            let field = density_grid(&points, scott_bandwidth(&points), resolution)?;
            Ok(serde_json::to_vec(&DensityView {
                checkpoint_id: view.checkpoint_id,
                dataset_version: view.dataset_version,
                class,
                points: points.len(),
                field,
            })?)
        })
    }

    pub fn gradcam(
        &self,
        session_id: &str,
        image_id: &str,
        class: Option<usize>,
        alpha: Option<f64>,
        checkpoint: Option<&str>,
    ) -> ApiResult<Arc<Vec<u8>>> {
        let snap = self.snapshot(session_id, checkpoint)?;
        let image = self.image(session_id, image_id)?;
        let alpha = alpha.unwrap_or(0.5);
        self.cached(&snap, "gradcam", &(image_id, class, alpha), || {
            let heatmap = grad_cam(&snap.checkpoint, image_id, &image, class)?;
            let o = overlay(&image, &heatmap, alpha)?;
            Ok(serde_json::to_vec(&GradcamView {
                checkpoint_id: snap.checkpoint.id.clone(),
                heatmap,
                alpha,
                original_png: STANDARD.encode(o.original.encode_png()),
                heatmap_png: STANDARD.encode(o.heatmap.encode_png()),
                overlay_png: STANDARD.encode(o.blend.encode_png()),
            })?)
        })
    }

    /// Pixels of a dataset image or a pending translation.
    pub fn image(&self, session_id: &str, image_id: &str) -> ApiResult<Image> {
        let session = self.session(session_id)?;
        let s = lock(&session);
        s.dataset
            .get(image_id)
            .or_else(|| s.pending.get(image_id))
            .map(|x| x.pixels.clone())
            .ok_or_else(|| ApiError::not_found("image", image_id))
    }

    pub fn cluster(&self, session_id: &str, req: ClusterRequest) -> ApiResult<ClusterView> {
        check_k(req.k)?;
        let splits = req.splits.unwrap_or_else(|| vec![Split::Train, Split::Val]);
        if splits.is_empty() {
            return Err(ApiError::invalid("splits must not be empty"));
        }
        let snap = self.snapshot(session_id, req.checkpoint.as_deref())?;
        let latents = extract_latents(&snap.checkpoint, &snap.dataset, &splits)?;
        let result = kmeans(&latents, req.k, req.seed)?;
        let styles = (0..result.k)
            .map(|c| compute_style_stats(&snap.dataset, &result, c))
            .collect::<dash_core::Result<Vec<_>>>()?;
        let view = ClusterView {
            k: req.k,
            seed: req.seed,
            checkpoint_id: snap.checkpoint.id.clone(),
            dataset_version: snap.version.clone(),
            splits,
            sizes: result.sizes(),
            majority_labels: majority_labels(&result, &snap.dataset),
            styles,
            result,
        };
        let mut s = lock(&snap.session);
        s.clusterings.insert(
            req.k,
            Arc::new(ClusterState {
                view: view.clone(),
                latents,
            }),
        );
        s.last_k = Some(req.k);
        Ok(view)
    }

    fn clustering(&self, session_id: &str, k: Option<usize>) -> ApiResult<Arc<ClusterState>> {
        let session = self.session(session_id)?;
        let s = lock(&session);
        let k = k.or(s.last_k).ok_or_else(|| ApiError::invalid("no clustering has been computed yet"))?;
        s.clusterings
            .get(&k)
            .cloned()
            .ok_or_else(|| ApiError::not_found("clustering", &k.to_string()))
    }

    pub fn representatives(&self, session_id: &str, k: usize, n: Option<usize>) -> ApiResult<RepresentativesView> {
        let state = self.clustering(session_id, Some(k))?;
        let n = n.unwrap_or(dash_core::cluster::DEFAULT_REPRESENTATIVES);
        Ok(RepresentativesView {
            k,
            n,
            checkpoint_id: state.view.checkpoint_id.clone(),
            representatives: representatives(&state.view.result, &state.latents, n)?,
        })
    }

    /// Translates sources toward a cluster's style into the pending basket.
    pub fn translate(&self, session_id: &str, req: TranslateRequest) -> ApiResult<TranslateView> {
        let state = self.clustering(session_id, req.k)?;
        let k = state.view.k;
        if req.cluster >= k {
            return Err(ApiError::invalid(format!("cluster {} is not below K = {k}", req.cluster)));
        }
        if req.count == 0 || req.count > MAX_TRANSLATIONS_PER_SOURCE {
            return Err(ApiError::invalid(format!(
                "count must lie in 1-{MAX_TRANSLATIONS_PER_SOURCE}"
            )));
        }
        if req.source_ids.is_empty() {
            return Err(ApiError::invalid("source_ids must not be empty"));
        }
        let style = state.view.styles[req.cluster];
        let session = self.session(session_id)?;
        let mut s = lock(&session);
        let mut sources = Vec::with_capacity(req.source_ids.len());
        for id in &req.source_ids {
            let sample = s
                .dataset
                .get(id)
                .cloned()
                .ok_or_else(|| ApiError::not_found("image", id))?;
            sources.push(sample);
        }
        let mut generated: Vec<ImageSample> = Vec::new();
        for source in &sources {
            let mut index = 0;
            for _ in 0..req.count {
                loop {
                    let id = augmented_id(&source.id, req.cluster, index);
                    if s.dataset.get(&id).is_none() && !s.pending.contains_key(&id) && !generated.iter().any(|g| g.id == id) {
                        break;
                    }
                    index += 1;
                }
                generated.push(translate_with(&MomentMatching, source, &style, index)?);
                index += 1;
            }
        }
        let items = generated
            .iter()
            .map(|g| TranslatedImage {
                id: g.id.clone(),
                source_id: g.source_id.clone().expect("translation sets the source"),
                style_cluster: req.cluster,
                label: g.label,
                png: STANDARD.encode(g.pixels.quantized().encode_png()),
            })
            .collect();
        for g in generated {
            s.pending.insert(g.id.clone(), g);
        }
        Ok(TranslateView {
            k,
            cluster: req.cluster,
            items,
        })
    }

    /// Registers pending translations in the train split.
    pub fn augment(&self, session_id: &str, req: AugmentRequest) -> ApiResult<AugmentView> {
        if req.ids.is_empty() {
            return Err(ApiError::invalid("ids must not be empty"));
        }
        let session = self.session(session_id)?;
        let mut s = lock(&session);
        if let Some(label) = req.label {
            if label >= s.dataset.num_classes() {
                return Err(ApiError::invalid(format!(
                    "label {label} is not below {}",
                    s.dataset.num_classes()
                )));
            }
        }
        let mut groups: BTreeMap<usize, Vec<ImageSample>> = BTreeMap::new();
        for id in &req.ids {
            let sample = s
                .pending
                .get(id)
                .cloned()
                .ok_or_else(|| ApiError::not_found("pending translation", id))?;
            let label = req.label.unwrap_or(sample.label);
            groups.entry(label).or_default().push(sample);
        }
        let before = s.history.records().len();
        let active = s.meta.active.clone();
        let mut dataset = (*s.dataset).clone();
        for (label, samples) in groups {
            dataset = dataset.register_augmented(samples, label, &mut s.history, Some(&active))?;
        }
        s.replace_dataset(dataset)?;
        for id in &req.ids {
            s.pending.remove(id);
        }
        Ok(AugmentView {
            added: req.ids,
            dataset_version: s.dataset_version.clone(),
            history: s.history.records()[before..].to_vec(),
        })
    }

    /// `(previous, current)`: explicit ids, else the active checkpoint's
    /// parent and the active checkpoint.
    fn diff_pair(&self, session_id: &str, q: &DiffQuery) -> ApiResult<(Snapshot, Snapshot)> {
        let session = self.session(session_id)?;
        let (a, b) = {
            let s = lock(&session);
            let b = q.cid_b.clone().unwrap_or_else(|| s.meta.active.clone());
            let a = match &q.cid_a {
                Some(a) => a.clone(),
                None => s
                    .entry(&b)
                    .ok_or_else(|| ApiError::not_found("checkpoint", &b))?
                    .parent_id
                    .clone()
                    .ok_or_else(|| ApiError::invalid(format!("checkpoint {b} has no parent; pass cid_a")))?,
            };
            (a, b)
        };
        Ok((self.snapshot(session_id, Some(&a))?, self.snapshot(session_id, Some(&b))?))
    }

    pub fn mosaic(&self, session_id: &str, q: &DiffQuery) -> ApiResult<Arc<Vec<u8>>> {
        let (a, b) = self.diff_pair(session_id, q)?;
        let split = q.split.unwrap_or(Split::Test);
        let min_cell = q.min_cell.unwrap_or(DEFAULT_MIN_CELL);
        let gutter = q.gutter.unwrap_or(DEFAULT_GUTTER);
        self.cached(&b, "mosaic", &(&a.checkpoint.id, split, min_cell, gutter), || {
            let side = |snap: &Snapshot| -> ApiResult<MosaicSide> {
                let set = self.predictions_for(snap, split)?;
                let cm = confusion(&set, &snap.dataset, split)?;
                let layout = mosaic_layout(&cm, min_cell, gutter)?;
                Ok(MosaicSide {
                    checkpoint_id: snap.checkpoint.id.clone(),
                    confusion: cm,
                    layout,
                })
            };
            Ok(serde_json::to_vec(&MosaicView {
                split,
                dataset_version: b.version.clone(),
                a: side(&a)?,
                b: side(&b)?,
            })?)
        })
    }

    pub fn trace(&self, session_id: &str, q: &DiffQuery) -> ApiResult<Arc<Vec<u8>>> {
        let (a, b) = self.diff_pair(session_id, q)?;
        let split = q.split.unwrap_or(Split::Test);
        self.cached(&b, "trace", &(&a.checkpoint.id, split), || {
            let prev = self.predictions_for(&a, split)?;
            let curr = self.predictions_for(&b, split)?;
            Ok(serde_json::to_vec(&TraceView {
                dataset_version: b.version.clone(),
                trace: trace_diff(&prev, &curr, split)?,
            })?)
        })
    }

    /// Images misclassified by at least `threshold` of the live trained
    /// checkpoints.
    pub fn frequent(&self, session_id: &str, threshold: Option<f64>, split: Option<Split>) -> ApiResult<FrequentView> {
        let threshold = threshold.unwrap_or(0.5);
        let split = split.unwrap_or(Split::Test);
        let session = self.session(session_id)?;
        let ids: Vec<String> = {
            let s = lock(&session);
            s.meta
                .checkpoints
                .iter()
                .filter(|c| !c.discarded && c.train_config.is_some())
                .map(|c| c.id.clone())
                .collect()
        };
        let mut sets = Vec::with_capacity(ids.len());
        let mut version = String::new();
        for id in &ids {
            let snap = self.snapshot(session_id, Some(id))?;
            version = snap.version.clone();
            sets.push((*self.predictions_for(&snap, split)?).clone());
        }
        if version.is_empty() {
            version = lock(&session).dataset_version.clone();
        }
        let items = if sets.is_empty() {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(ApiError::invalid(format!("threshold {threshold} is outside (0, 1]")));
            }
            Vec::new()
        } else {
            frequent_misclassified(&sets, split, threshold)?
        };
        Ok(FrequentView {
            split,
            threshold,
            dataset_version: version,
            checkpoints: ids,
            items,
        })
    }

    pub fn history(&self, session_id: &str) -> ApiResult<Vec<HistoryRecord>> {
        Ok(lock(&*self.session(session_id)?).history.records().to_vec())
    }
}

struct Snapshot {
    session: Arc<Mutex<Session>>,
    checkpoint: Arc<Checkpoint>,
    dataset: Arc<Dataset>,
    version: String,
}

/// Records a finished training run and makes it active.
fn commit(s: &mut Session, checkpoint: Checkpoint, warm_start: bool) -> ApiResult<String> {
    let id = checkpoint.id.clone();
    if let Some(entry) = s.entry(&id) {
        if entry.discarded {
            return Err(ApiError::conflict(format!(
                "training reproduced discarded checkpoint {id}"
            )));
        }
    } else {
        s.add_checkpoint(checkpoint, Some(warm_start))?;
    }
    s.meta.active = id.clone();
    s.persist()?;
    Ok(id)
}
