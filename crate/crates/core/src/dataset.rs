//! Synthetic biased datasets, their on-disk format, and the augmentation
//! registry.
//!
//! A generated dataset draws one glyph shape per class on a colored
//! background (or colors the glyph itself, see [`BiasAxis`]). In the train and
//! val splits the color agrees with the class-assigned palette entry with
//! probability `bias_strength`; the test split is color-balanced within every
//! class, so a model that learned color instead of shape falls to chance.

use std::f64::consts::PI;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
        }
    }

    /// Whether the point `(dx, dy)`, relative to the glyph center and in
    /// units of the glyph radius, lies inside the shape. Every shape has the
    /// area of the unit circle.
    fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= 1.0,
            Shape::Square => {
                let half = PI.sqrt() / 2.0;
                dx.abs() <= half && dy.abs() <= half
            }
            Shape::Triangle => {
                // Upward equilateral triangle centered on its centroid.
                let r = (4.0 * PI / (3.0 * 3f64.sqrt())).sqrt();
                let bottom = 0.5 * r;
                let top = -r;
                if dy > bottom || dy < top {
                    return false;
                }
                let half_width = (dy - top) / (bottom - top) * r * 3f64.sqrt() / 2.0;
                dx.abs() <= half_width
            }
            Shape::Diamond => dx.abs() + dy.abs() <= (PI / 2.0).sqrt(),
            Shape::Cross => {
                // Arms of half-width 0.3 l and half-length l: area 2.04 l^2.
                let l = (PI / 2.04).sqrt();
                let a = 0.3 * l;
                (dx.abs() <= a && dy.abs() <= l) || (dy.abs() <= a && dx.abs() <= l)
            }
        }
    }
}

/// Which region carries the bias color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasAxis {
    #[default]
    Background,
    Glyph,
}

/// Geometry of a generated glyph, kept so masks can be rebuilt exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub shape: Shape,
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    /// Palette index of the bias color drawn for this image.
    pub color: usize,
}

const SUPERSAMPLE: usize = 4;

impl Glyph {
    /// Fraction of each pixel covered by the glyph, row-major.
    pub fn coverage(&self, height: usize, width: usize) -> Vec<f64> {
        let step = 1.0 / SUPERSAMPLE as f64;
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        let dx = (px - self.center_x) / self.radius;
                        let dy = (py - self.center_y) / self.radius;
                        if self.shape.contains(dx, dy) {
                            hits += 1;
                        }
                    }
                }
                out.push(hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64);
            }
        }
        out
    }

    /// Pixels at least half covered by the glyph, row-major.
    pub fn mask(&self, height: usize, width: usize) -> Vec<bool> {
        self.coverage(height, width)
            .into_iter()
            .map(|c| c >= 0.5)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    #[serde(skip)]
    pub pixels: Image,
    pub label: usize,
    pub split: Split,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_cluster: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glyph: Option<Glyph>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Recipe for a synthetic dataset with a controllable color bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedDatasetSpec {
    pub num_classes: usize,
    pub shapes: Vec<Shape>,
    pub palette: Vec<[f64; 3]>,
    /// Probability that a train/val image shows its class-assigned color.
    pub bias_strength: f64,
    #[serde(default)]
    pub bias_axis: BiasAxis,
    pub counts: SplitCounts,
    pub image_size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.03
}

/// Red, green, blue, then further distinguishable hues.
pub const DEFAULT_PALETTE: [[f64; 3]; 6] = [
    [0.80, 0.15, 0.15],
    [0.15, 0.70, 0.20],
    [0.15, 0.25, 0.80],
    [0.85, 0.75, 0.10],
    [0.60, 0.20, 0.70],
    [0.10, 0.70, 0.70],
];

const NEUTRAL_LIGHT: [f64; 3] = [0.95, 0.95, 0.95];
const NEUTRAL_DARK: [f64; 3] = [0.20, 0.20, 0.20];

impl BiasedDatasetSpec {
    /// Three-class colored-shapes setup with 300/60/90 images at 32x32.
    pub fn colored_shapes(bias_strength: f64, seed: u64) -> Self {
        Self {
            num_classes: 3,
            shapes: Shape::ALL[..3].to_vec(),
            palette: DEFAULT_PALETTE[..3].to_vec(),
            bias_strength,
            bias_axis: BiasAxis::Background,
            counts: SplitCounts {
                train: 300,
                val: 60,
                test: 90,
            },
            image_size: 32,
            noise: default_noise(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        let k = self.palette.len();
        if c < 2 {
            return Err(Error::invalid("num_classes", format!("need C >= 2, got {c}")));
        }
        if self.shapes.len() != c {
            return Err(Error::invalid(
                "shapes",
                format!("need one shape per class ({c}), got {}", self.shapes.len()),
            ));
        }
        let distinct: HashSet<_> = self.shapes.iter().map(|s| s.name()).collect();
        if distinct.len() != c {
            return Err(Error::invalid("shapes", "shapes must be distinct"));
        }
        if k < c {
            return Err(Error::invalid(
                "palette",
                format!("need K_c >= C ({c}), got {k} colors"),
            ));
        }
        if self
            .palette
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::invalid("palette", "color components must lie in [0, 1]"));
        }
        let floor = 1.0 / k as f64;
        if !(self.bias_strength >= floor - 1e-12 && self.bias_strength <= 1.0) {
            return Err(Error::invalid(
                "bias_strength",
                format!(
                    "need 1/K_c ({floor:.4}) <= rho <= 1, got {}",
                    self.bias_strength
                ),
            ));
        }
        for split in Split::ALL {
            if self.counts.get(split) == 0 {
                return Err(Error::invalid(
                    "counts",
                    format!("{split} count must be > 0"),
                ));
            }
        }
        if self.image_size < 8 {
            return Err(Error::invalid(
                "image_size",
                format!("need at least 8 pixels, got {}", self.image_size),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise", "noise must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    class_names: Vec<String>,
    height: usize,
    width: usize,
    samples: Vec<ImageSample>,
    spec: Option<BiasedDatasetSpec>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(
        class_names: Vec<String>,
        height: usize,
        width: usize,
        samples: Vec<ImageSample>,
        spec: Option<BiasedDatasetSpec>,
    ) -> Result<Self> {
        let c = class_names.len();
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            check_sample(s, c, height, width)?;
        }
        Ok(Self {
            class_names,
            height,
            width,
            samples,
            spec,
            index,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn spec(&self) -> Option<&BiasedDatasetSpec> {
        self.spec.as_ref()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageSample> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Content hash over ids, labels, splits, provenance and 8-bit pixels.
    pub fn version(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.samples {
            hasher.update(s.id.as_bytes());
            hasher.update([0]);
            hasher.update((s.label as u64).to_le_bytes());
            hasher.update(s.split.as_str().as_bytes());
            hasher.update([s.provenance as u8]);
            hasher.update(s.pixels.to_rgb8());
        }
        hex::encode(&hasher.finalize()[..8])
    }

    /// Appends augmented samples to the train split and records the event.
    ///
    /// Pixels are quantized to 8 bits so the in-memory dataset equals what a
    /// save/load cycle produces. One history record is written per distinct
    /// style cluster in the batch. Nothing is written unless every sample
    /// validates.
    pub fn register_augmented(
        &self,
        samples: Vec<ImageSample>,
        target_label: usize,
        log: &mut HistoryLog,
        checkpoint_id: Option<&str>,
    ) -> Result<Dataset> {
        if target_label >= self.num_classes() {
            return Err(Error::invalid(
                "target_label",
                format!("{target_label} is not a class index below {}", self.num_classes()),
            ));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if s.provenance != Provenance::Augmented {
                return Err(Error::invalid(
                    "provenance",
                    format!("{} is not an augmented sample", s.id),
                ));
            }
            let source = s.source_id.as_deref().filter(|id| !id.is_empty());
            let Some(source) = source else {
                return Err(Error::invalid("source_id", format!("{} has no source", s.id)));
            };
            if self.get(source).is_none() {
                return Err(Error::UnknownId(source.to_owned()));
            }
            if s.style_cluster.is_none() {
                return Err(Error::invalid(
                    "style_cluster",
                    format!("{} has no style cluster", s.id),
                ));
            }
            if self.get(&s.id).is_some() || !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            if s.pixels.height() != self.height || s.pixels.width() != self.width {
                return Err(Error::shape(
                    format!("{}x{}", self.height, self.width),
                    format!("{}x{}", s.pixels.height(), s.pixels.width()),
                ));
            }
        }

        let mut groups: BTreeMap<usize, (Vec<String>, Vec<String>)> = BTreeMap::new();
        let mut next = self.samples.clone();
        for mut s in samples {
            let cluster = s.style_cluster.expect("validated above");
            let group = groups.entry(cluster).or_default();
            group.0.push(s.source_id.clone().expect("validated above"));
            group.1.push(s.id.clone());
            s.label = target_label;
            s.split = Split::Train;
            s.pixels = s.pixels.quantized();
            next.push(s);
        }
        let dataset = Dataset::new(
            self.class_names.clone(),
            self.height,
            self.width,
            next,
            self.spec.clone(),
        )?;
        for (cluster, (source_ids, new_ids)) in groups {
            log.append(HistoryRecord {
                ts: chrono::Utc::now().to_rfc3339(),
                checkpoint_id: checkpoint_id.map(str::to_owned),
                method: crate::cluster::TranslationMethod::MomentMatching,
                style_cluster: cluster,
                target_label,
                count: new_ids.len(),
                source_ids,
                new_ids,
            })?;
        }
        Ok(dataset)
    }

    /// Writes `manifest.json` and one PNG per sample; returns the manifest
    /// path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let images = dir.join(IMAGES_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &self.samples {
            s.pixels.save_png(&images.join(format!("{}.png", s.id)))?;
        }
        self.write_manifest(dir)
    }

    /// Writes PNGs only for samples not already on disk, then the manifest.
    pub fn save_incremental(&self, dir: &Path) -> Result<PathBuf> {
        let images = dir.join(IMAGES_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &self.samples {
            let path = images.join(format!("{}.png", s.id));
            if !path.exists() {
                s.pixels.save_png(&path)?;
            }
        }
        self.write_manifest(dir)
    }

    fn write_manifest(&self, dir: &Path) -> Result<PathBuf> {
        let manifest = Manifest {
            format: 1,
            class_names: self.class_names.clone(),
            height: self.height,
            width: self.width,
            spec: self.spec.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| ManifestRecord {
                    file: format!("{IMAGES_DIR}/{}.png", s.id),
                    sample: s.clone(),
                })
                .collect(),
        };
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Reads a dataset directory. The manifest is authoritative for labels,
    /// splits and provenance.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::MissingManifest(path));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for record in manifest.samples {
            let mut sample = record.sample;
            let img_path = dir.join(&record.file);
            sample.pixels = Image::load_png(&img_path)?;
            if sample.pixels.height() != manifest.height || sample.pixels.width() != manifest.width
            {
                return Err(Error::CorruptImage {
                    path: img_path,
                    message: format!(
                        "expected {}x{}, found {}x{}",
                        manifest.height,
                        manifest.width,
                        sample.pixels.height(),
                        sample.pixels.width()
                    ),
                });
            }
            samples.push(sample);
        }
        Dataset::new(
            manifest.class_names,
            manifest.height,
            manifest.width,
            samples,
            manifest.spec,
        )
    }
}

fn check_sample(s: &ImageSample, classes: usize, height: usize, width: usize) -> Result<()> {
    if s.label >= classes {
        return Err(Error::invalid(
            "label",
            format!("{}: label {} >= {classes}", s.id, s.label),
        ));
    }
    if s.pixels.height() != height || s.pixels.width() != width {
        return Err(Error::shape(
            format!("{height}x{width}"),
            format!("{}x{} for {}", s.pixels.height(), s.pixels.width(), s.id),
        ));
    }
    if !s.pixels.in_unit_range() {
        return Err(Error::invalid("pixels", format!("{} has values outside [0, 1]", s.id)));
    }
    if s.provenance == Provenance::Augmented
        && (s.source_id.as_deref().is_none_or(str::is_empty) || s.style_cluster.is_none())
    {
        return Err(Error::invalid(
            "provenance",
            format!("augmented sample {} lacks source_id or style_cluster", s.id),
        ));
    }
    Ok(())
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    class_names: Vec<String>,
    height: usize,
    width: usize,
    #[serde(default)]
    spec: Option<BiasedDatasetSpec>,
    samples: Vec<ManifestRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    file: String,
    #[serde(flatten)]
    sample: ImageSample,
}

/// Draws a dataset from `spec`. Identical specs give bitwise-identical output.
pub fn generate_biased_dataset(spec: &BiasedDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let k = spec.palette.len();
    let c = spec.num_classes;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut samples = Vec::new();

    for split in Split::ALL {
        let n = spec.counts.get(split);
        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        labels.shuffle(&mut rng);

        let colors: Vec<usize> = match split {
            Split::Train | Split::Val => labels
                .iter()
                .map(|&label| {
                    if rng.random::<f64>() < spec.bias_strength {
                        label
                    } else {
                        // uniform over the remaining palette entries
                        let j = rng.random_range(0..k - 1);
                        if j >= label { j + 1 } else { j }
                    }
                })
                .collect(),
            Split::Test => balanced_colors(&labels, c, k, &mut rng),
        };

        for (i, (&label, &color)) in labels.iter().zip(&colors).enumerate() {
            let glyph = Glyph {
                shape: spec.shapes[label],
                center_x: size as f64 * (0.5 + rng.random_range(-0.08..=0.08)),
                center_y: size as f64 * (0.5 + rng.random_range(-0.08..=0.08)),
                radius: size as f64 * rng.random_range(0.20..=0.25),
                color,
            };
            let (bg, fg) = match spec.bias_axis {
                BiasAxis::Background => (spec.palette[color], NEUTRAL_LIGHT),
                BiasAxis::Glyph => (NEUTRAL_DARK, spec.palette[color]),
            };
            let coverage = glyph.coverage(size, size);
            let mut img = Image::filled(size, size, [0.0; 3]);
            for ch in 0..3 {
                for (p, &a) in img.channel_mut(ch).iter_mut().zip(&coverage) {
                    let v = bg[ch] * (1.0 - a) + fg[ch] * a;
                    let v = if spec.noise > 0.0 {
                        v + noise.sample(&mut rng)
                    } else {
                        v
                    };
                    *p = v.clamp(0.0, 1.0);
                }
            }
            samples.push(ImageSample {
                id: format!("{split}-{i:05}"),
                pixels: img.quantized(),
                label,
                split,
                provenance: Provenance::Original,
                source_id: None,
                style_cluster: None,
                glyph: Some(glyph),
            });
        }
    }

    let class_names = spec.shapes.iter().map(|s| s.name().to_owned()).collect();
    Dataset::new(class_names, size, size, samples, Some(spec.clone()))
}

/// Per class, cycles through the palette from a random offset and shuffles,
/// so every class sees every color equally often (up to rounding).
fn balanced_colors(labels: &[usize], classes: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut colors = vec![0; labels.len()];
    for class in 0..classes {
        let slots: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let offset = rng.random_range(0..k);
        let mut assigned: Vec<usize> = (0..slots.len()).map(|j| (j + offset) % k).collect();
        assigned.shuffle(rng);
        for (slot, color) in slots.into_iter().zip(assigned) {
            colors[slot] = color;
        }
    }
    colors
}

/// One augmentation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub ts: String,
    pub checkpoint_id: Option<String>,
    pub method: crate::cluster::TranslationMethod,
    pub style_cluster: usize,
    pub target_label: usize,
    pub count: usize,
    pub source_ids: Vec<String>,
    pub new_ids: Vec<String>,
}

/// Append-only augmentation history, optionally backed by a JSON-lines file.
#[derive(Debug, Default)]
pub struct HistoryLog {
    path: Option<PathBuf>,
    records: Vec<HistoryRecord>,
}

impl HistoryLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file, reading back existing records.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let records = if path.exists() {
            read_history(&path)?
        } else {
            Vec::new()
        };
        Ok(Self {
            path: Some(path),
            records,
        })
    }

    pub fn records(&self) -> &[HistoryRecord] {
        &self.records
    }

    pub fn append(&mut self, record: HistoryRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            file.write_all(&line).map_err(|e| Error::io(path, e))?;
            file.sync_data().map_err(|e| Error::io(path, e))?;
        }
        self.records.push(record);
        Ok(())
    }
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Counts of (class, bias color) over one split of a generated dataset.
pub fn color_contingency(dataset: &Dataset, split: Split) -> Vec<Vec<usize>> {
    let k = dataset.spec().map_or(0, |s| s.palette.len());
    let mut table = vec![vec![0; k]; dataset.num_classes()];
    for s in dataset.split(split) {
        if let Some(g) = s.glyph {
            table[s.label][g.color] += 1;
        }
    }
    table
}

/// Cramér's V of a contingency table; 0 for independence, 1 for a perfect
/// association.
pub fn cramers_v(table: &[Vec<usize>]) -> f64 {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    let n: usize = table.iter().flatten().sum();
    if n == 0 || rows < 2 || cols < 2 {
        return 0.0;
    }
    let row_tot: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col_tot: Vec<f64> = (0..cols)
        .map(|j| table.iter().map(|r| r[j]).sum::<usize>() as f64)
        .collect();
    let n = n as f64;
    let mut chi2 = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let expected = row_tot[i] * col_tot[j] / n;
            if expected > 0.0 {
                let d = table[i][j] as f64 - expected;
                chi2 += d * d / expected;
            }
        }
    }
    (chi2 / (n * (rows.min(cols) - 1) as f64)).sqrt()
}
