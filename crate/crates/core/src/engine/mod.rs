//! Training, evaluation and introspection of the convolutional classifier.

mod checkpoint_file;
mod network;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint_file::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use network::{cross_entropy, softmax, ForwardTrace, Gradients, Network};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// 2x2 max-pool with stride 2 after every block.
    #[default]
    Max2,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    /// Side length of the square RGB input.
    pub input_size: usize,
    pub blocks: Vec<ConvBlock>,
    #[serde(default)]
    pub pooling: Pooling,
    /// Width of an optional ReLU layer between the pooled latent and the
    /// output layer.
    #[serde(default)]
    pub hidden: Option<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ConvNetConfig {
    /// Two 3x3 blocks (8 then 16 channels) with max-pooling, global average
    /// pooling and a linear output layer.
    pub fn small(num_classes: usize, seed: u64) -> Self {
        Self {
            input_size: 32,
            blocks: vec![ConvBlock::new(8, 3, 1), ConvBlock::new(16, 3, 1)],
            pooling: Pooling::Max2,
            hidden: None,
            num_classes,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub shuffle_seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-epoch event emitted while training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochProgress {
    /// 1-based.
    pub epoch: usize,
    pub epochs: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// One trained model instance and its place in the lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub id: String,
    pub parent_id: Option<String>,
    pub train_config: Option<TrainConfig>,
    pub epoch_losses: Vec<EpochLoss>,
    pub dataset_version: Option<String>,
    pub created_at: String,
    network: Network,
}

impl Checkpoint {
    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn config(&self) -> &ConvNetConfig {
        self.network.config()
    }

    /// Replaces the weights, e.g. for hand-built test networks. The id is
    /// recomputed from the new content.
    pub fn with_network(mut self, network: Network) -> Self {
        self.network = network;
        self.id = content_id(&[
            self.parent_id.as_deref().unwrap_or("").as_bytes(),
            &serde_json::to_vec(self.network.config()).expect("config serializes"),
            &weight_bytes(&self.network),
        ]);
        self
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let cfg = self.config();
        let (h, w) = dataset.image_size();
        if h != cfg.input_size || w != cfg.input_size {
            return Err(Error::shape(
                format!("{0}x{0} images", cfg.input_size),
                format!("{h}x{w} images"),
            ));
        }
        if dataset.num_classes() != cfg.num_classes {
            return Err(Error::shape(
                format!("{} classes", cfg.num_classes),
                format!("{} classes", dataset.num_classes()),
            ));
        }
        Ok(())
    }
}

fn weight_bytes(net: &Network) -> Vec<u8> {
    net.flat_weights()
        .iter()
        .flat_map(|&w| (w as f32).to_le_bytes())
        .collect()
}

fn content_id(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    hex::encode(&hasher.finalize()[..6])
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Creates an untrained root checkpoint. Identical configs give identical
/// weights and ids.
pub fn init_model(config: &ConvNetConfig) -> Result<Checkpoint> {
    let network = Network::init(config)?;
    let id = content_id(&[
        b"",
        &serde_json::to_vec(config)?,
        &weight_bytes(&network),
    ]);
    Ok(Checkpoint {
        id,
        parent_id: None,
        train_config: None,
        epoch_losses: Vec::new(),
        dataset_version: None,
        created_at: now(),
        network,
    })
}

fn split_batch(dataset: &Dataset, split: Split) -> Vec<(&Image, usize)> {
    dataset
        .split(split)
        .map(|s| (&s.pixels, s.label))
        .collect()
}

/// Mean loss and accuracy over a batch, evaluated in parallel.
fn evaluate_batch(net: &Network, batch: &[(&Image, usize)]) -> (f64, f64) {
    let results: Vec<(f64, bool)> = batch
        .par_iter()
        .map(|&(img, label)| {
            let logits = net.logits(img);
            (cross_entropy(&logits, label).0, argmax(&logits) == label)
        })
        .collect();
    let n = results.len().max(1) as f64;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = results.iter().filter(|r| r.1).count() as f64 / n;
    (loss, acc)
}

/// Minibatch SGD with momentum on the train split. Returns a child of
/// `parent`; the parent is not modified.
///
/// Per-sample gradients are computed in parallel and summed in batch order,
/// so results do not depend on the thread count.
pub fn train(
    parent: &Checkpoint,
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochProgress),
) -> Result<Checkpoint> {
    config.validate()?;
    parent.check_dataset(dataset)?;
    let train_set = split_batch(dataset, Split::Train);
    let val_set = split_batch(dataset, Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "dataset",
            "training needs non-empty train and val splits",
        ));
    }

    let mut net = parent.network.clone();
    let mut velocity = net.zero_gradients();
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let per_sample: Vec<(f64, Gradients)> = chunk
                .par_iter()
                .map(|&i| net.loss_and_gradients(&[train_set[i]], 1.0))
                .collect();
            let mut grads = net.zero_gradients();
            let mut batch_loss = 0.0;
            for (loss, g) in per_sample {
                batch_loss += loss;
                for (acc, g) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                });
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            net.apply_update(&mut velocity, &grads, config);
            epoch_total += batch_loss;
        }
        let train_loss = epoch_total / train_set.len() as f64;
        let (val_loss, val_accuracy) = evaluate_batch(&net, &val_set);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch: 0,
            });
        }
        epoch_losses.push(EpochLoss {
            train_loss,
            val_loss,
        });
        progress(&EpochProgress {
            epoch: epoch + 1,
            epochs: config.epochs,
            train_loss,
            val_loss,
            val_accuracy,
        });
    }

    let dataset_version = dataset.version();
    let id = content_id(&[
        parent.id.as_bytes(),
        &serde_json::to_vec(config)?,
        dataset_version.as_bytes(),
        &weight_bytes(&net),
    ]);
    Ok(Checkpoint {
        id,
        parent_id: Some(parent.id.clone()),
        train_config: Some(config.clone()),
        epoch_losses,
        dataset_version: Some(dataset_version),
        created_at: now(),
        network: net,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub label: usize,
    pub predicted: usize,
    pub loss: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub checkpoint_id: String,
    pub split: Split,
    pub records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn accuracy(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.correct).count() as f64 / self.records.len() as f64
    }

    pub fn mean_loss(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.loss).sum::<f64>() / self.records.len() as f64
    }

    pub fn get(&self, id: &str) -> Option<&PredictionRecord> {
        self.records.iter().find(|r| r.image_id == id)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted label and cross-entropy for every image of `split`, in dataset
/// order.
pub fn predict(checkpoint: &Checkpoint, dataset: &Dataset, split: Split) -> Result<PredictionSet> {
    checkpoint.check_dataset(dataset)?;
    let samples: Vec<_> = dataset.split(split).collect();
    let records = samples
        .par_iter()
        .map(|s| {
            let logits = checkpoint.network.logits(&s.pixels);
            let predicted = argmax(&logits);
            PredictionRecord {
                image_id: s.id.clone(),
                label: s.label,
                predicted,
                loss: cross_entropy(&logits, s.label).0,
                correct: predicted == s.label,
            }
        })
        .collect();
    Ok(PredictionSet {
        checkpoint_id: checkpoint.id.clone(),
        split,
        records,
    })
}

/// Global average pool of the final conv block's output.
pub fn extract_latent(checkpoint: &Checkpoint, image: &Image) -> Result<Vec<f64>> {
    checkpoint.network.check_input(image)?;
    Ok(checkpoint.network.forward(image).latent)
}

/// Latent vectors keyed by image id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSet {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl LatentSet {
    pub fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::shape(
                format!("{} vectors", ids.len()),
                format!("{} vectors", vectors.len()),
            ));
        }
        if let Some(d) = vectors.first().map(Vec::len) {
            if vectors.iter().any(|v| v.len() != d) {
                return Err(Error::invalid("latents", "vectors differ in dimension"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        Ok(Self { ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|i| self.vectors[i].as_slice())
    }
}

/// Latents for every image in the given splits, in dataset order.
pub fn extract_latents(checkpoint: &Checkpoint, dataset: &Dataset, splits: &[Split]) -> Result<LatentSet> {
    checkpoint.check_dataset(dataset)?;
    let samples: Vec<_> = dataset
        .samples()
        .iter()
        .filter(|s| splits.contains(&s.split))
        .collect();
    let vectors = samples
        .par_iter()
        .map(|s| checkpoint.network.forward(&s.pixels).latent)
        .collect();
    LatentSet::new(samples.iter().map(|s| s.id.clone()).collect(), vectors)
}

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_SAMPLES: usize = 100;
/// Gradients smaller than this are compared absolutely rather than
/// relatively.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Sampled parameters replaced because a `±step` perturbation moved some
    /// ReLU or max-pool across its kink.
    pub skipped_kinks: usize,
    /// `(flat parameter index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

/// Compares analytic gradients of the mean cross-entropy over `batch`
/// against central finite differences on a seeded sample of parameters.
///
/// Parameters are visited in a seeded random order until
/// [`GRADCHECK_SAMPLES`] smooth ones have been checked. A parameter whose
/// perturbation changes the activation pattern of any batch image is
/// skipped, since the central difference straddles a kink there.
pub fn backward_check(checkpoint: &Checkpoint, batch: &[(&Image, usize)], seed: u64) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "gradient check needs a non-empty batch"));
    }
    let net = checkpoint.network();
    for &(img, label) in batch {
        net.check_input(img)?;
        if label >= net.num_classes() {
            return Err(Error::invalid("label", format!("{label} out of range")));
        }
    }
    let (_, grads) = net.loss_and_gradients(batch, 1.0);
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    let traces: Vec<ForwardTrace> = batch.iter().map(|&(img, _)| net.forward(img)).collect();
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let weights = net.flat_weights();
    let perturbed = |i: usize, delta: f64| -> Result<(f64, bool)> {
        let mut w = weights.clone();
        w[i] += delta;
        let shifted = Network::from_weights(net.config(), &w)?;
        let mut loss = 0.0;
        let mut smooth = true;
        for (&(img, label), base) in batch.iter().zip(&traces) {
            let trace = shifted.forward(img);
            smooth &= trace.same_activation_pattern(base);
            loss += cross_entropy(&trace.logits, label).0;
        }
        Ok((loss / batch.len() as f64, smooth))
    };
    let mut worst = None;
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    let mut skipped_kinks = 0;
    for i in order {
        if checked == GRADCHECK_SAMPLES {
            break;
        }
        let (lp, smooth_p) = perturbed(i, GRADCHECK_STEP)?;
        let (lm, smooth_m) = perturbed(i, -GRADCHECK_STEP)?;
        if !(smooth_p && smooth_m) {
            skipped_kinks += 1;
            continue;
        }
        checked += 1;
        let numeric = (lp - lm) / (2.0 * GRADCHECK_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        if err > max_err || worst.is_none() {
            max_err = max_err.max(err);
            worst = Some((i, a, numeric));
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        checked,
        skipped_kinks,
        worst,
    })
}
