//! K-means over latent vectors, representative images, and style
//! translation toward a cluster's pixel statistics.
//!
//! Cluster indices act as pseudo labels for the visual style shared by their
//! members. The default translator matches the per-channel mean and standard
//! deviation of a source image to those of a cluster, which captures a color
//! bias exactly while leaving shape content alone.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageSample, Provenance, Split};
use crate::engine::LatentSet;
use crate::error::{Error, Result};
use crate::image::Image;

pub const MIN_K: usize = 2;
pub const MAX_K: usize = 20;
pub const RESTARTS: usize = 10;
/// Inputs with at most this many ways to pick K distinct points as initial
/// centroids are also started from every such pick.
pub const EXHAUSTIVE_SEEDINGS: usize = 64;
pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_REPRESENTATIVES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    pub seed: u64,
    /// Image ids in input order; `assignments[i]` belongs to `ids[i]`.
    pub ids: Vec<String>,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every centroid update of the winning restart.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    /// Up to [`DEFAULT_REPRESENTATIVES`] member ids per cluster, nearest
    /// first.
    pub representatives: Vec<Vec<String>>,
}

impl ClusterResult {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = &str> + '_ {
        self.ids
            .iter()
            .zip(&self.assignments)
            .filter(move |(_, &a)| a == cluster)
            .map(|(id, _)| id.as_str())
    }

    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id).map(|i| self.assignments[i])
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn check_k(k: usize) -> Result<()> {
    if !(MIN_K..=MAX_K).contains(&k) {
        return Err(Error::OutOfRange {
            name: "K",
            value: k as i64,
            min: MIN_K as i64,
            max: MAX_K as i64,
        });
    }
    Ok(())
}

struct Run {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    trace: Vec<f64>,
    iterations: usize,
}

fn plus_plus_seeds(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every point coincides with a chosen center
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[next] = true;
        centroids.push(points[next].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    centroids
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>) -> Run {
    let n = points.len();
    let dim = points[0].len();
    let k = centroids.len();
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, _) = nearest(p, &centroids);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for j in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let inertia = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        trace.push(inertia);
    }
    Run {
        assignments,
        centroids,
        trace,
        iterations,
    }
}

/// Hartigan single-point transfers: moves a point whenever that lowers the
/// total inertia, accounting for both centroid shifts. Each pass that moves
/// something appends the new inertia to the trace.
fn hartigan(points: &[&[f64]], run: &mut Run) {
    let k = run.centroids.len();
    let dim = points[0].len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &a) in points.iter().zip(&run.assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    let centroid = |sums: &[f64], count: usize| -> Vec<f64> { sums.iter().map(|s| s / count as f64).collect() };
    for _ in 0..MAX_ITERATIONS {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let from = run.assignments[i];
            let n_from = counts[from];
            if n_from <= 1 {
                continue;
            }
            let leave = n_from as f64 / (n_from - 1) as f64 * sq_dist(p, &centroid(&sums[from], n_from));
            let mut best: Option<(f64, usize)> = None;
            for to in (0..k).filter(|&j| j != from) {
                let join = match counts[to] {
                    0 => 0.0,
                    n => n as f64 / (n + 1) as f64 * sq_dist(p, &centroid(&sums[to], n)),
                };
                if best.is_none_or(|(c, _)| join < c) {
                    best = Some((join, to));
                }
            }
            let Some((join, to)) = best else { continue };
            if leave - join > 1e-12 * leave {
                counts[from] -= 1;
                counts[to] += 1;
                for d in 0..dim {
                    sums[from][d] -= p[d];
                    sums[to][d] += p[d];
                }
                run.assignments[i] = to;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        run.iterations += 1;
        for j in 0..k {
            if counts[j] > 0 {
                run.centroids[j] = centroid(&sums[j], counts[j]);
            }
        }
        run.trace.push(inertia(points, &run.assignments, &run.centroids));
    }
}

fn inertia(points: &[&[f64]], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Every K-subset of `0..n` in lexicographic order, if there are at most
/// [`EXHAUSTIVE_SEEDINGS`] of them.
fn all_seedings(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut count = 1usize;
    for i in 0..k.min(n - k) {
        count = count * (n - i) / (i + 1);
        if count > EXHAUSTIVE_SEEDINGS {
            return Vec::new();
        }
    }
    let mut out = Vec::with_capacity(count);
    let mut pick: Vec<usize> = (0..k).collect();
    loop {
        out.push(pick.clone());
        let Some(i) = (0..k).rev().find(|&i| pick[i] < n - k + i) else {
            return out;
        };
        pick[i] += 1;
        for j in i + 1..k {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

/// K-means++ seeding followed by Lloyd iterations and Hartigan refinement,
/// repeated [`RESTARTS`] times; the lowest-inertia run wins. Small inputs are
/// additionally started from every choice of K points (see
/// [`EXHAUSTIVE_SEEDINGS`]).
///
/// Points are processed in ascending id order, so the result does not depend
/// on the order of `latents`.
pub fn kmeans(latents: &LatentSet, k: usize, seed: u64) -> Result<ClusterResult> {
    check_k(k)?;
    let n = latents.len();
    if n < k {
        return Err(Error::invalid(
            "K",
            format!("need at least K = {k} points, got {n}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| latents.ids[a].cmp(&latents.ids[b]));
    let points: Vec<&[f64]> = order.iter().map(|&i| latents.vectors[i].as_slice()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seedings: Vec<Vec<Vec<f64>>> = (0..RESTARTS).map(|_| plus_plus_seeds(&points, k, &mut rng)).collect();
    seedings.extend(
        all_seedings(n, k)
            .into_iter()
            .map(|pick| pick.iter().map(|&i| points[i].to_vec()).collect()),
    );
    let mut best: Option<(f64, Run)> = None;
    for centroids in seedings {
        let mut run = lloyd(&points, centroids);
        hartigan(&points, &mut run);
        let total = inertia(&points, &run.assignments, &run.centroids);
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            if run.trace.is_empty() {
                run.trace.push(total);
            }
            best = Some((total, run));
        }
    }
    let (total, run) = best.expect("at least one restart");

    let mut assignments = vec![0; n];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = run.assignments[pos];
    }
    let mut result = ClusterResult {
        k,
        seed,
        ids: latents.ids.clone(),
        assignments,
        centroids: run.centroids,
        inertia: total,
        inertia_trace: run.trace,
        iterations: run.iterations,
        representatives: Vec::new(),
    };
    result.representatives = representatives(&result, latents, DEFAULT_REPRESENTATIVES)?;
    Ok(result)
}

/// For every cluster, up to `n` member ids ordered by distance to the
/// centroid, ties broken by id.
pub fn representatives(result: &ClusterResult, latents: &LatentSet, n: usize) -> Result<Vec<Vec<String>>> {
    if n == 0 {
        return Err(Error::invalid("N", "need at least one representative"));
    }
    let lookup: HashMap<&str, &[f64]> = latents
        .ids
        .iter()
        .map(String::as_str)
        .zip(latents.vectors.iter().map(Vec::as_slice))
        .collect();
    let mut out = Vec::with_capacity(result.k);
    for (j, centroid) in result.centroids.iter().enumerate() {
        let mut members: Vec<(f64, &str)> = result
            .members(j)
            .map(|id| {
                let v = lookup
                    .get(id)
                    .ok_or_else(|| Error::UnknownId(id.to_owned()))?;
                Ok((sq_dist(v, centroid).sqrt(), id))
            })
            .collect::<Result<_>>()?;
        members.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.1.cmp(b.1))
        });
        out.push(members.into_iter().take(n).map(|(_, id)| id.to_owned()).collect());
    }
    Ok(out)
}

/// Most frequent true label among a cluster's members (ties to the lower
/// label); `None` for clusters with no members in `dataset`.
pub fn majority_labels(result: &ClusterResult, dataset: &Dataset) -> Vec<Option<usize>> {
    (0..result.k)
        .map(|j| {
            let mut counts = vec![0usize; dataset.num_classes()];
            for id in result.members(j) {
                if let Some(s) = dataset.get(id) {
                    counts[s.label] += 1;
                }
            }
            let max = *counts.iter().max()?;
            (max > 0).then(|| counts.iter().position(|&c| c == max).expect("max exists"))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationMethod {
    #[default]
    MomentMatching,
}

/// Per-channel pixel moments of a cluster's member images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    pub cluster: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Mean and (population) standard deviation of each channel.
pub fn channel_moments<'a>(images: impl IntoIterator<Item = &'a Image>) -> Option<([f64; 3], [f64; 3])> {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    let images: Vec<&Image> = images.into_iter().collect();
    for img in &images {
        for (c, s) in sum.iter_mut().enumerate() {
            *s += img.channel(c).iter().sum::<f64>();
        }
        count += img.height() * img.width();
    }
    if count == 0 {
        return None;
    }
    let mean = sum.map(|s| s / count as f64);
    let mut var = [0.0; 3];
    for img in &images {
        for (c, v) in var.iter_mut().enumerate() {
            *v += img
                .channel(c)
                .iter()
                .map(|&x| (x - mean[c]) * (x - mean[c]))
                .sum::<f64>();
        }
    }
    Some((mean, var.map(|v| (v / count as f64).sqrt())))
}

pub fn compute_style_stats(dataset: &Dataset, result: &ClusterResult, cluster: usize) -> Result<StyleStats> {
    if cluster >= result.k {
        return Err(Error::invalid(
            "cluster",
            format!("{cluster} is not below K = {}", result.k),
        ));
    }
    let images = result
        .members(cluster)
        .map(|id| {
            dataset
                .get(id)
                .map(|s| &s.pixels)
                .ok_or_else(|| Error::UnknownId(id.to_owned()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = channel_moments(images).ok_or(Error::EmptyCluster(cluster))?;
    Ok(StyleStats { cluster, mean, std })
}

/// A way of rewriting an image toward a cluster's style.
pub trait StyleTranslator {
    fn method(&self) -> TranslationMethod;

    fn translate_pixels(&self, source: &Image, style: &StyleStats) -> Result<Image>;
}

/// `out = clamp((in - μ_src) / σ_src · σ_style + μ_style, 0, 1)` per channel;
/// channels with zero spread are left unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct MomentMatching;

impl StyleTranslator for MomentMatching {
    fn method(&self) -> TranslationMethod {
        TranslationMethod::MomentMatching
    }

    fn translate_pixels(&self, source: &Image, style: &StyleStats) -> Result<Image> {
        let (mean, std) = channel_moments([source])
            .ok_or_else(|| Error::shape("a non-empty image", "0 pixels"))?;
        let mut out = source.clone();
        for c in 0..3 {
            if std[c] <= 0.0 {
                continue;
            }
            let scale = style.std[c] / std[c];
            for v in out.channel_mut(c) {
                *v = ((*v - mean[c]) * scale + style.mean[c]).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

/// Deterministic id of the `index`-th translation of `source_id` into
/// `cluster`.
pub fn augmented_id(source_id: &str, cluster: usize, index: usize) -> String {
    format!("{source_id}~c{cluster}~{index}")
}

pub fn translate(source: &ImageSample, style: &StyleStats) -> Result<ImageSample> {
    translate_with(&MomentMatching, source, style, 0)
}

pub fn translate_with(
    translator: &dyn StyleTranslator,
    source: &ImageSample,
    style: &StyleStats,
    index: usize,
) -> Result<ImageSample> {
    let pixels = translator.translate_pixels(&source.pixels, style)?;
    if !pixels.same_size(&source.pixels) {
        return Err(Error::shape(
            format!("{}x{}", source.pixels.height(), source.pixels.width()),
            format!("{}x{}", pixels.height(), pixels.width()),
        ));
    }
    Ok(ImageSample {
        id: augmented_id(&source.id, style.cluster, index),
        pixels,
        label: source.label,
        split: Split::Train,
        provenance: Provenance::Augmented,
        source_id: Some(source.id.clone()),
        style_cluster: Some(style.cluster),
        glyph: None,
    })
}

pub fn batch_translate(sources: &[&ImageSample], style: &StyleStats, count_per_source: usize) -> Result<Vec<ImageSample>> {
    let mut out = Vec::with_capacity(sources.len() * count_per_source);
    for source in sources {
        for i in 0..count_per_source {
            out.push(translate_with(&MomentMatching, source, style, i)?);
        }
    }
    Ok(out)
}
