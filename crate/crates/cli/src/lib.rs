//! The `dash` command line. Each subcommand is a thin adapter over one
//! library call; its JSON output is that call's serialization.
//!
//! Exit codes: 0 success, 2 usage or invalid argument, 3 data error,
//! 4 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dash_core::cluster::{
    check_k, compute_style_stats, translate_with, ClusterResult, MomentMatching, StyleStats,
};
use dash_core::dataset::{
    color_contingency, cramers_v, generate_biased_dataset, BiasedDatasetSpec, Dataset, HistoryLog, HistoryRecord,
    ImageSample, Split, HISTORY_FILE,
};
use dash_core::diff::{
    confusion, frequent_misclassified, mosaic_layout, trace_diff, ConfusionMatrix, MosaicLayout, TraceDiff,
    DEFAULT_GUTTER, DEFAULT_MIN_CELL,
};
use dash_core::engine::{
    extract_latents, init_model, predict, read_checkpoint, train, write_checkpoint, Checkpoint, ConvNetConfig,
    EpochLoss, PredictionSet, TrainConfig,
};
use dash_core::explain::{grad_cam, overlay};
use dash_core::image::Image;
use dash_core::projection::{density_grid, scott_bandwidth, tsne, TsneParams};
use dash_core::replay::{run_replay, ReplayScript};
use dash_core::{Error, ErrorKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_COMPUTE: u8 = 4;

pub const TRANSLATIONS_FILE: &str = "translations.json";

#[derive(Debug, Parser)]
#[command(name = "dash", version, about = "Discover and mitigate data bias in image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Also write the JSON result to this file.
    #[arg(long, global = true)]
    pub json_out: Option<PathBuf>,
    /// Print a human-readable table instead of JSON where one exists.
    #[arg(long, global = true)]
    pub table: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic biased dataset.
    GenData(GenDataArgs),
    /// Train a checkpoint.
    Train(TrainArgs),
    /// Predict one split and report accuracy.
    Evaluate(EvaluateArgs),
    /// t-SNE of latent vectors.
    Project(ProjectArgs),
    /// Grad-CAM heatmap of one image.
    Gradcam(GradcamArgs),
    /// K-means over latent vectors.
    Cluster(ClusterArgs),
    /// Translate source images toward a cluster's style.
    Translate(TranslateArgs),
    /// Register translated images as training data.
    Augment(AugmentArgs),
    /// Mosaic layouts and trace between two checkpoints.
    Diff(DiffArgs),
    /// Images misclassified by many checkpoints.
    Frequent(FrequentArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Run a scripted debias loop and report metrics.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory (holds manifest.json).
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON spec; the three-class colored-shapes spec otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub rho: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Output checkpoint file.
    #[arg(long)]
    pub out: PathBuf,
    /// Parent checkpoint to continue from.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Network config JSON for a fresh model.
    #[arg(long, conflicts_with = "from")]
    pub model: Option<PathBuf>,
    /// Training config JSON; overrides the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Shuffle seed, and init seed of a fresh default model.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = dash_core::projection::DEFAULT_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, value_delimiter = ',', default_value = "train,val")]
    pub splits: Vec<Split>,
    /// Also write the kernel density field here.
    #[arg(long)]
    pub density_out: Option<PathBuf>,
    #[arg(long, default_value_t = dash_core::projection::DEFAULT_RESOLUTION)]
    pub resolution: usize,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: String,
    /// Target class; the predicted class otherwise.
    #[arg(long)]
    pub class: Option<usize>,
    /// Writes heatmap PNG/JSON plus original and overlay PNGs.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "train,val")]
    pub splits: Vec<Split>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Output of `dash cluster`.
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub cluster: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    pub sources: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Directory for the translated PNGs and translations.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Output directory of `dash translate`.
    #[arg(long)]
    pub translations: PathBuf,
    /// Target class; each image keeps its source's label otherwise.
    #[arg(long)]
    pub label: Option<usize>,
    /// Recorded in the history as the acting checkpoint.
    #[arg(long)]
    pub checkpoint_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Previous checkpoint.
    #[arg(long)]
    pub a: PathBuf,
    /// Current checkpoint.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_MIN_CELL)]
    pub min_cell: f64,
    #[arg(long, default_value_t = DEFAULT_GUTTER)]
    pub gutter: f64,
}

#[derive(Debug, Args)]
pub struct FrequentArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Session root directory.
    #[arg(long, env = "DASH_DATA_DIR", default_value = "dash-data")]
    pub root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub script: PathBuf,
    /// Saves the final dataset, every checkpoint and the history here.
    #[arg(long)]
    pub save_dir: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub exit_code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            exit_code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            exit_code: EXIT_DATA,
            kind: "data",
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (exit_code, kind) = match e.kind() {
            ErrorKind::InvalidInput => (EXIT_USAGE, "invalid_input"),
            ErrorKind::Data => (EXIT_DATA, "data"),
            ErrorKind::Compute => (EXIT_COMPUTE, "compute"),
        };
        Self {
            exit_code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Result of a subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub json: Value,
    pub table: Option<String>,
}

impl Output {
    fn of(value: &impl Serialize) -> CliResult<Self> {
        Ok(Self {
            json: serde_json::to_value(value)?,
            table: None,
        })
    }

    fn with_table(mut self, table: String) -> Self {
        self.table = Some(table);
        self
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    let bytes = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load(data: &DataArg) -> CliResult<Dataset> {
    Ok(Dataset::load(&data.data)?)
}

pub fn run(cli: &Cli) -> CliResult<Output> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Project(a) => project(a),
        Command::Gradcam(a) => gradcam(a),
        Command::Cluster(a) => cluster(a),
        Command::Translate(a) => translate(a),
        Command::Augment(a) => augment(a),
        Command::Diff(a) => diff(a),
        Command::Frequent(a) => frequent(a),
        Command::Serve(a) => serve(a),
        Command::Replay(a) => replay(a),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataReport {
    pub manifest: PathBuf,
    pub version: String,
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Association between class and bias color, 0 to 1.
    pub train_cramers_v: f64,
    pub test_cramers_v: f64,
}

fn gen_data(a: &GenDataArgs) -> CliResult<Output> {
    let spec = match &a.spec {
        Some(path) => read_json(path)?,
        None => BiasedDatasetSpec::colored_shapes(a.rho, a.seed),
    };
    let dataset = generate_biased_dataset(&spec)?;
    let manifest = dataset.save(&a.out)?;
    Output::of(&GenDataReport {
        manifest,
        version: dataset.version(),
        samples: dataset.len(),
        train: dataset.split_len(Split::Train),
        val: dataset.split_len(Split::Val),
        test: dataset.split_len(Split::Test),
        train_cramers_v: cramers_v(&color_contingency(&dataset, Split::Train)),
        test_cramers_v: cramers_v(&color_contingency(&dataset, Split::Test)),
    })
}

/// What `train` prints: everything in the checkpoint except the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub id: String,
    pub parent_id: Option<String>,
    pub train_config: Option<TrainConfig>,
    pub epoch_losses: Vec<EpochLoss>,
    pub dataset_version: Option<String>,
    pub created_at: String,
    pub parameters: usize,
    pub path: PathBuf,
}

impl CheckpointSummary {
    pub fn of(c: &Checkpoint, path: &Path) -> Self {
        Self {
            id: c.id.clone(),
            parent_id: c.parent_id.clone(),
            train_config: c.train_config.clone(),
            epoch_losses: c.epoch_losses.clone(),
            dataset_version: c.dataset_version.clone(),
            created_at: c.created_at.clone(),
            parameters: c.network().num_parameters(),
            path: path.to_owned(),
        }
    }
}

fn train_cmd(a: &TrainArgs) -> CliResult<Output> {
    let dataset = load(&a.data)?;
    let parent = match (&a.from, &a.model) {
        (Some(path), _) => read_checkpoint(path)?,
        (None, Some(path)) => init_model(&read_json::<ConvNetConfig>(path)?)?,
        (None, None) => {
            let mut cfg = ConvNetConfig::small(dataset.num_classes(), a.seed);
            cfg.input_size = dataset.image_size().0;
            init_model(&cfg)?
        }
    };
    let config = match &a.config {
        Some(path) => read_json(path)?,
        None => TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            learning_rate: a.lr,
            momentum: a.momentum,
            shuffle_seed: a.seed,
        },
    };
    let child = train(&parent, &dataset, &config, |p| {
        eprintln!(
            "epoch {}/{}  train_loss {:.4}  val_loss {:.4}  val_acc {:.3}",
            p.epoch, p.epochs, p.train_loss, p.val_loss, p.val_accuracy
        );
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    write_checkpoint(&child, &a.out)?;
    Output::of(&CheckpointSummary::of(&child, &a.out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub checkpoint_id: String,
    pub split: Split,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub predictions: PredictionSet,
}

pub fn evaluate_report(checkpoint: &Checkpoint, dataset: &Dataset, split: Split) -> CliResult<EvaluateReport> {
    let predictions = predict(checkpoint, dataset, split)?;
    let c = dataset.num_classes();
    let mut hits = vec![(0usize, 0usize); c];
    for r in &predictions.records {
        hits[r.label].1 += 1;
        if r.correct {
            hits[r.label].0 += 1;
        }
    }
    Ok(EvaluateReport {
        checkpoint_id: checkpoint.id.clone(),
        split,
        accuracy: predictions.accuracy(),
        mean_loss: predictions.mean_loss(),
        per_class_accuracy: hits
            .iter()
            .map(|&(h, n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
        predictions,
    })
}

fn evaluate(a: &EvaluateArgs) -> CliResult<Output> {
    let dataset = load(&a.data)?;
    let checkpoint = read_checkpoint(&a.checkpoint)?;
    let report = evaluate_report(&checkpoint, &dataset, a.split)?;
    let mut table = format!(
        "checkpoint {}  split {}  n {}\n",
        report.checkpoint_id,
        report.split.as_str(),
        report.predictions.records.len()
    );
    let _ = writeln!(table, "{:<12} {:>8}", "class", "accuracy");
    for (name, acc) in dataset.class_names().iter().zip(&report.per_class_accuracy) {
        let acc = acc.map_or("-".to_owned(), |a| format!("{a:.3}"));
        let _ = writeln!(table, "{name:<12} {acc:>8}");
    }
    let _ = writeln!(table, "{:<12} {:>8.3}", "all", report.accuracy);
    let _ = writeln!(table, "{:<12} {:>8.4}", "mean loss", report.mean_loss);
    Ok(Output::of(&report)?.with_table(table))
}

fn project(a: &ProjectArgs) -> CliResult<Output> {
    let dataset = load(&a.data)?;
    let checkpoint = read_checkpoint(&a.checkpoint)?;
    let latents = extract_latents(&checkpoint, &dataset, &a.splits)?;
    let params = TsneParams {
        perplexity: a.perplexity,
        iterations: a.iterations,
        seed: a.seed,
    };
    let result = tsne(&latents, &params)?;
    if let Some(path) = &a.density_out {
        let coords = result.coordinates();
        let field = density_grid(&coords, scott_bandwidth(&coords), a.resolution)?;
        write_json(path, &field)?;
    }
    Output::of(&result)
}

fn gradcam(a: &GradcamArgs) -> CliResult<Output> {
    let dataset = load(&a.data)?;
    let checkpoint = read_checkpoint(&a.checkpoint)?;
    let sample = dataset.get(&a.image).ok_or_else(|| Error::UnknownId(a.image.clone()))?;
    let heatmap = grad_cam(&checkpoint, &a.image, &sample.pixels, a.class)?;
    if let Some(dir) = &a.out_dir {
        let stem = format!("{}-gradcam", a.image);
        heatmap.export(dir, &stem)?;
        let o = overlay(&sample.pixels, &heatmap, a.alpha)?;
        o.original.save_png(&dir.join(format!("{}-original.png", a.image)))?;
        o.blend.save_png(&dir.join(format!("{}-overlay.png", a.image)))?;
    }
    Output::of(&heatmap)
}

fn cluster(a: &ClusterArgs) -> CliResult<Output> {
    check_k(a.k)?;
    let dataset = load(&a.data)?;
    let checkpoint = read_checkpoint(&a.checkpoint)?;
    let latents = extract_latents(&checkpoint, &dataset, &a.splits)?;
    let result = dash_core::cluster::kmeans(&latents, a.k, a.seed)?;
    Output::of(&result)
}

/// Contents of `translations.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationBatch {
    pub cluster: usize,
    pub style: StyleStats,
    pub items: Vec<TranslationItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationItem {
    /// PNG path relative to the batch directory.
    pub file: String,
    #[serde(flatten)]
    pub sample: ImageSample,
}

fn translate(a: &TranslateArgs) -> CliResult<Output> {
    let dataset = load(&a.data)?;
    let clusters: ClusterResult = read_json(&a.clusters)?;
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let style = compute_style_stats(&dataset, &clusters, a.cluster)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
    let mut items = Vec::new();
    for id in &a.sources {
        let source = dataset.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
        for i in 0..a.count {
            let mut sample = translate_with(&MomentMatching, source, &style, i)?;
            sample.pixels = sample.pixels.quantized();
            let file = format!("{}.png", sample.id);
            sample.pixels.save_png(&a.out.join(&file))?;
            items.push(TranslationItem { file, sample });
        }
    }
    let batch = TranslationBatch {
        cluster: a.cluster,
        style,
        items,
    };
    write_json(&a.out.join(TRANSLATIONS_FILE), &batch)?;
    Output::of(&batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub added: Vec<String>,
    pub dataset_version: String,
    pub train: usize,
    pub history: Vec<HistoryRecord>,
}

fn augment(a: &AugmentArgs) -> CliResult<Output> {
    let dataset = load(&a.data)?;
    let batch: TranslationBatch = read_json(&a.translations.join(TRANSLATIONS_FILE))?;
    let mut groups: std::collections::BTreeMap<usize, Vec<ImageSample>> = Default::default();
    let mut added = Vec::new();
    for item in batch.items {
        let mut sample = item.sample;
        sample.pixels = Image::load_png(&a.translations.join(&item.file))?;
        added.push(sample.id.clone());
        groups.entry(a.label.unwrap_or(sample.label)).or_default().push(sample);
    }
    let mut log = HistoryLog::open(a.data.data.join(HISTORY_FILE))?;
    let before = log.records().len();
    let mut next = dataset;
    for (label, samples) in groups {
        next = next.register_augmented(samples, label, &mut log, a.checkpoint_id.as_deref())?;
    }
    next.save_incremental(&a.data.data)?;
    Output::of(&AugmentReport {
        added,
        dataset_version: next.version(),
        train: next.split_len(Split::Train),
        history: log.records()[before..].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSide {
    pub checkpoint_id: String,
    pub confusion: ConfusionMatrix,
    pub layout: MosaicLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub split: Split,
    pub a: DiffSide,
    pub b: DiffSide,
    pub trace: TraceDiff,
}

fn diff(a: &DiffArgs) -> CliResult<Output> {
    let dataset = load(&a.data)?;
    let side = |path: &Path| -> CliResult<(PredictionSet, DiffSide)> {
        let ckpt = read_checkpoint(path)?;
        let set = predict(&ckpt, &dataset, a.split)?;
        let cm = confusion(&set, &dataset, a.split)?;
        let layout = mosaic_layout(&cm, a.min_cell, a.gutter)?;
        Ok((
            set,
            DiffSide {
                checkpoint_id: ckpt.id,
                confusion: cm,
                layout,
            },
        ))
    };
    let (pa, sa) = side(&a.a)?;
    let (pb, sb) = side(&a.b)?;
    let trace = trace_diff(&pa, &pb, a.split)?;
    let c = trace.counts;
    let table = format!(
        "{} -> {}  split {}\ncorrect->correct {}\ncorrect->incorrect {}\nincorrect->correct {}\nincorrect->incorrect {}\naccuracy {:.3} -> {:.3}\n",
        sa.checkpoint_id,
        sb.checkpoint_id,
        a.split.as_str(),
        c.cc,
        c.ci,
        c.ic,
        c.ii,
        sa.confusion.accuracy(),
        sb.confusion.accuracy()
    );
    Ok(Output::of(&DiffReport {
        split: a.split,
        a: sa,
        b: sb,
        trace,
    })?
    .with_table(table))
}

fn frequent(a: &FrequentArgs) -> CliResult<Output> {
    let dataset = load(&a.data)?;
    let sets = a
        .checkpoints
        .iter()
        .map(|p| Ok(predict(&read_checkpoint(p)?, &dataset, a.split)?))
        .collect::<CliResult<Vec<_>>>()?;
    Output::of(&frequent_misclassified(&sets, a.split, a.threshold)?)
}

fn serve(a: &ServeArgs) -> CliResult<Output> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::data(e.to_string()))?;
    runtime
        .block_on(dash_service::serve(a.root.clone(), a.addr))
        .map_err(|e| CliError::data(e.to_string()))?;
    Output::of(&Value::Null)
}

fn replay(a: &ReplayArgs) -> CliResult<Output> {
    let script: ReplayScript = read_json(&a.script)?;
    let outcome = run_replay(&script, |record| {
        if let Ok(line) = serde_json::to_string(record) {
            eprintln!("{line}");
        }
    })?;
    if let Some(dir) = &a.save_dir {
        outcome.dataset.save(&dir.join("dataset"))?;
        let ckpt_dir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::data(format!("{}: {e}", ckpt_dir.display())))?;
        for c in &outcome.checkpoints {
            write_checkpoint(c, &ckpt_dir.join(format!("{}.ckpt", c.id)))?;
        }
        let mut log = HistoryLog::open(dir.join("dataset").join(HISTORY_FILE))?;
        for record in &outcome.history {
            log.append(record.clone())?;
        }
        write_json(&dir.join("report.json"), &outcome.report)?;
    }
    let r = &outcome.report;
    let mut table = format!("{:<6} {:<14} {:>9} {:>9} {:>9}\n", "step", "checkpoint", "train", "val", "test");
    let mut n = 0;
    for step in &r.steps {
        if let dash_core::replay::StepRecord::Train { evaluation: e, .. } = step {
            let _ = writeln!(
                table,
                "{:<6} {:<14} {:>9.3} {:>9.3} {:>9.3}",
                n, e.checkpoint_id, e.train_accuracy, e.val_accuracy, e.test_accuracy
            );
            n += 1;
        }
    }
    let _ = writeln!(
        table,
        "retrains {}  augmented {}  test lift {:+.3}",
        r.retrains, r.augmented_images, r.test_accuracy_lift
    );
    Ok(Output::of(r)?.with_table(table))
}
