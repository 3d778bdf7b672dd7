//! Two-dimensional views of the latent space: exact t-SNE, a Gaussian
//! kernel density grid with contour lines, and lasso selection.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::LatentSet;
use crate::error::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 500;
pub const EARLY_EXAGGERATION: f64 = 4.0;
pub const EXAGGERATION_ITERATIONS: usize = 50;
pub const DEFAULT_RESOLUTION: usize = 64;
pub const CONTOUR_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];

const INIT_STD: f64 = 1e-4;
const MOMENTUM_SWITCH: usize = 250;
const ENTROPY_TOLERANCE: f64 = 1e-10;
const MAX_SEARCH_STEPS: usize = 200;
const MIN_GAIN: f64 = 0.01;

/// `min(30, floor((n - 1) / 3))`, but never below 1.
pub fn default_perplexity(n: usize) -> f64 {
    (n.saturating_sub(1) / 3).clamp(1, 30) as f64
}

/// `max(n / (4 * exaggeration), 50)`.
pub fn learning_rate(n: usize) -> f64 {
    (n as f64 / (4.0 * EARLY_EXAGGERATION)).max(50.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: Option<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: None,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    /// In the order of the input latents.
    pub points: Vec<ProjectedPoint>,
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub initial_kl: f64,
    pub final_kl: f64,
}

impl ProjectionResult {
    pub fn coordinates(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p.x, p.y]).collect()
    }
}

/// Row-normalized Gaussian affinities `p(j | i)` with one precision per
/// point, found by bisection so each row's entropy matches the perplexity.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub n: usize,
    /// Row-major `n x n`; the diagonal is zero.
    pub conditional: Vec<f64>,
    /// Precision `1 / (2 sigma_i^2)` per point.
    pub betas: Vec<f64>,
    /// Shannon entropy of each row, in bits.
    pub entropies: Vec<f64>,
}

impl Affinities {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.conditional[i * self.n..(i + 1) * self.n]
    }

    /// Symmetrized joint affinities `(p(j|i) + p(i|j)) / 2n`.
    pub fn joint(&self) -> Vec<f64> {
        let n = self.n;
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                p[i * n + j] = (self.conditional[i * n + j] + self.conditional[j * n + i]) / (2 * n) as f64;
            }
        }
        p
    }
}

fn check_perplexity(perplexity: f64, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid("latents", format!("t-SNE needs at least 2 points, got {n}")));
    }
    if !perplexity.is_finite() || perplexity >= n as f64 {
        return Err(Error::invalid(
            "perplexity",
            format!("must be below the number of points ({n}), got {perplexity}"),
        ));
    }
    if perplexity < 1.0 || perplexity > (n - 1) as f64 {
        return Err(Error::invalid(
            "perplexity",
            format!("reachable perplexities for {n} points lie in [1, {}], got {perplexity}", n - 1),
        ));
    }
    Ok(())
}

fn squared_distances(points: &[&[f64]]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, out) in row.iter_mut().enumerate() {
            *out = points[i].iter().zip(points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    d
}

/// Fills `row` with `p(j | i)` for precision `beta` and returns its entropy in bits.
fn conditional_row(dist: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let d_min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (p, &d)) in row.iter_mut().zip(dist).enumerate() {
        *p = if j == i { 0.0 } else { (-beta * (d - d_min)).exp() };
        sum += *p;
    }
    let mut entropy = 0.0;
    for p in row.iter_mut() {
        *p /= sum;
        if *p > 0.0 {
            entropy -= *p * p.log2();
        }
    }
    entropy
}

fn calibrate_row(dist: &[f64], i: usize, target_bits: f64, row: &mut [f64]) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut beta = 1.0;
    let mut entropy = conditional_row(dist, i, beta, row);
    for _ in 0..MAX_SEARCH_STEPS {
        let err = entropy - target_bits;
        if err.abs() < ENTROPY_TOLERANCE {
            break;
        }
        // Entropy falls as beta grows.
        if err > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
        entropy = conditional_row(dist, i, beta, row);
    }
    (beta, entropy)
}

/// Calibrates per-point Gaussian bandwidths on `points` for `perplexity`.
pub fn conditional_affinities(points: &[&[f64]], perplexity: f64) -> Result<Affinities> {
    let n = points.len();
    check_perplexity(perplexity, n)?;
    let dist = squared_distances(points);
    let target = perplexity.log2();
    let mut conditional = vec![0.0; n * n];
    let calibrated: Vec<(f64, f64)> = conditional
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| calibrate_row(&dist[i * n..(i + 1) * n], i, target, row))
        .collect();
    Ok(Affinities {
        n,
        conditional,
        betas: calibrated.iter().map(|c| c.0).collect(),
        entropies: calibrated.iter().map(|c| c.1).collect(),
    })
}

/// Student-t kernel values `(1 + |y_i - y_j|^2)^-1` (zero diagonal) and their sum.
fn low_dim_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let row_sums: Vec<f64> = num
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let mut s = 0.0;
            for (j, out) in row.iter_mut().enumerate() {
                if j != i {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    *out = 1.0 / (1.0 + dx * dx + dy * dy);
                    s += *out;
                }
            }
            s
        })
        .collect();
    (num, row_sums.iter().sum())
}

/// `KL(P || Q)` for joint affinities `p` and embedding `y`.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, z) = low_dim_kernel(y);
    p.iter()
        .zip(&num)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / (q / z).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Exact t-SNE of `latents`. Points are processed in ascending id order so
/// the embedding of an id does not depend on input order.
pub fn tsne(latents: &LatentSet, params: &TsneParams) -> Result<ProjectionResult> {
    let n = latents.len();
    let perplexity = params.perplexity.unwrap_or_else(|| default_perplexity(n));
    check_perplexity(perplexity, n)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| latents.ids[a].cmp(&latents.ids[b]));
    let points: Vec<&[f64]> = order.iter().map(|&i| latents.vectors[i].as_slice()).collect();
    let p = conditional_affinities(&points, perplexity)?.joint();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let initial_kl = kl_divergence(&p, &y);

    let lr = learning_rate(n);
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for t in 0..params.iterations {
        let exaggeration = if t < EXAGGERATION_ITERATIONS { EARLY_EXAGGERATION } else { 1.0 };
        let momentum = if t < MOMENTUM_SWITCH { 0.5 } else { 0.8 };
        let (num, z) = low_dim_kernel(&y);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    let w = num[i * n + j];
                    let m = (exaggeration * p[i * n + j] - w / z) * w;
                    g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * m * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (update[i][d] > 0.0);
                gains[i][d] = if same_sign { gains[i][d] * 0.8 } else { gains[i][d] + 0.2 };
                gains[i][d] = gains[i][d].max(MIN_GAIN);
                update[i][d] = momentum * update[i][d] - lr * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        let mean = y.iter().fold([0.0; 2], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        for v in &mut y {
            v[0] -= mean[0] / n as f64;
            v[1] -= mean[1] / n as f64;
        }
    }
    let final_kl = kl_divergence(&p, &y);
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("latents", "t-SNE produced non-finite coordinates"));
    }

    let mut coords = vec![[0.0; 2]; n];
    for (pos, &orig) in order.iter().enumerate() {
        coords[orig] = y[pos];
    }
    Ok(ProjectionResult {
        points: latents
            .ids
            .iter()
            .zip(coords)
            .map(|(id, c)| ProjectedPoint { id: id.clone(), x: c[0], y: c[1] })
            .collect(),
        perplexity,
        iterations: params.iterations,
        seed: params.seed,
        initial_kl,
        final_kl,
    })
}

/// Scott's rule for a 2-D sample: mean per-axis standard deviation times
/// `n^(-1/6)`. Falls back to 1 when the points do not spread.
pub fn scott_bandwidth(points: &[[f64; 2]]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 1.0;
    }
    let mut sigma = 0.0;
    for d in 0..2 {
        let mean = points.iter().map(|p| p[d]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        sigma += var.sqrt() / 2.0;
    }
    if sigma > 0.0 {
        sigma * n.powf(-1.0 / 6.0)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    /// Fraction of the peak density this line traces.
    pub fraction: f64,
    pub level: f64,
    pub polylines: Vec<Vec<[f64; 2]>>,
}

/// Density sampled at cell centers; `values[row * resolution + col]`, row
/// increasing with y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
    pub bandwidth: f64,
    pub values: Vec<f64>,
    pub contours: Vec<Contour>,
}

impl DensityField {
    pub fn cell_size(&self) -> (f64, f64) {
        let r = self.resolution as f64;
        ((self.x_max - self.x_min) / r, (self.y_max - self.y_min) / r)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let (cw, ch) = self.cell_size();
        [self.x_min + (col as f64 + 0.5) * cw, self.y_min + (row as f64 + 0.5) * ch]
    }

    /// Midpoint-rule integral over the grid.
    pub fn integral(&self) -> f64 {
        let (cw, ch) = self.cell_size();
        self.values.iter().sum::<f64>() * cw * ch
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Gaussian KDE of `points` on a `resolution x resolution` grid spanning the
/// bounding box padded by three bandwidths.
pub fn density_grid(points: &[[f64; 2]], bandwidth: f64, resolution: usize) -> Result<DensityField> {
    if points.is_empty() {
        return Err(Error::invalid("points", "density needs at least one point"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid("bandwidth", format!("must be positive, got {bandwidth}")));
    }
    if resolution < 2 {
        return Err(Error::invalid("resolution", "need at least 2 cells per side"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points", "coordinates must be finite"));
    }
    let pad = 3.0 * bandwidth;
    let lo = |d: usize| points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min) - pad;
    let hi = |d: usize| points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max) + pad;
    let mut field = DensityField {
        x_min: lo(0),
        x_max: hi(0),
        y_min: lo(1),
        y_max: hi(1),
        resolution,
        bandwidth,
        values: vec![0.0; resolution * resolution],
        contours: Vec::new(),
    };
    let norm = 1.0 / (points.len() as f64 * 2.0 * std::f64::consts::PI * bandwidth * bandwidth);
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let centers: Vec<[f64; 2]> = (0..resolution * resolution)
        .map(|k| field.cell_center(k / resolution, k % resolution))
        .collect();
    field.values = centers
        .par_iter()
        .map(|c| {
            let s: f64 = points
                .iter()
                .map(|p| (-((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)) * inv).exp())
                .sum();
            s * norm
        })
        .collect();
    let peak = field.peak();
    field.contours = CONTOUR_FRACTIONS
        .iter()
        .map(|&fraction| Contour {
            fraction,
            level: fraction * peak,
            polylines: marching_squares(&field, fraction * peak),
        })
        .collect();
    Ok(field)
}

/// A crossing point on a lattice edge between two cell centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum EdgeKey {
    /// Between `(row, col)` and `(row, col + 1)`.
    Horizontal(usize, usize),
    /// Between `(row, col)` and `(row + 1, col)`.
    Vertical(usize, usize),
}

/// Iso-lines at `level` over the lattice of cell centers, joined into
/// polylines. Closed loops repeat their first vertex at the end.
fn marching_squares(field: &DensityField, level: f64) -> Vec<Vec<[f64; 2]>> {
    let r = field.resolution;
    let v = |row: usize, col: usize| field.values[row * r + col];
    let point = |key: EdgeKey| -> [f64; 2] {
        let ((r0, c0), (r1, c1)) = match key {
            EdgeKey::Horizontal(row, col) => ((row, col), (row, col + 1)),
            EdgeKey::Vertical(row, col) => ((row, col), (row + 1, col)),
        };
        let (a, b) = (v(r0, c0), v(r1, c1));
        let t = if a == b { 0.5 } else { (level - a) / (b - a) };
        let pa = field.cell_center(r0, c0);
        let pb = field.cell_center(r1, c1);
        [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]
    };

    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    for row in 0..r - 1 {
        for col in 0..r - 1 {
            // Corners counter-clockwise from the lower-left.
            let corners = [v(row, col), v(row, col + 1), v(row + 1, col + 1), v(row + 1, col)];
            let edges = [
                EdgeKey::Horizontal(row, col),
                EdgeKey::Vertical(row, col + 1),
                EdgeKey::Horizontal(row + 1, col),
                EdgeKey::Vertical(row, col),
            ];
            let case = corners
                .iter()
                .enumerate()
                .fold(0, |acc, (k, &c)| acc | (usize::from(c >= level) << k));
            // Edge k joins corners k and k + 1.
            let crossing: Vec<usize> = (0..4).filter(|&k| ((case >> k) & 1) != ((case >> ((k + 1) % 4)) & 1)).collect();
            match crossing.len() {
                2 => segments.push((edges[crossing[0]], edges[crossing[1]])),
                4 => {
                    let center = corners.iter().sum::<f64>() / 4.0;
                    // Saddle: join around the corners on the same side as the center.
                    let high_first = case & 1 == 1;
                    if (center >= level) == high_first {
                        segments.push((edges[0], edges[1]));
                        segments.push((edges[2], edges[3]));
                    } else {
                        segments.push((edges[3], edges[0]));
                        segments.push((edges[1], edges[2]));
                    }
                }
                _ => {}
            }
        }
    }

    let mut touching: HashMap<EdgeKey, Vec<usize>> = HashMap::new();
    for (s, &(a, b)) in segments.iter().enumerate() {
        touching.entry(a).or_default().push(s);
        touching.entry(b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let extend = |start: EdgeKey, first: usize, used: &mut Vec<bool>| -> Vec<EdgeKey> {
        let mut chain = vec![start];
        let mut seg = first;
        let mut at = start;
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            let next = if a == at { b } else { a };
            chain.push(next);
            at = next;
            match touching[&at].iter().find(|&&s| !used[s]) {
                Some(&s) => seg = s,
                None => return chain,
            }
        }
    };
    // Open lines start at an end with one segment; loops come afterwards.
    for open in [true, false] {
        for s in 0..segments.len() {
            if used[s] {
                continue;
            }
            let (a, b) = segments[s];
            let start = if touching[&a].len() == 1 {
                a
            } else if touching[&b].len() == 1 {
                b
            } else if open {
                continue;
            } else {
                a
            };
            let chain = extend(start, s, &mut used);
            lines.push(chain.into_iter().map(point).collect());
        }
    }
    lines
}

/// Whether `p` lies on segment `a`-`b`.
fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let scale = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).max(1.0);
    cross.abs() <= 1e-12 * scale
        && p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Even-odd point-in-polygon test. Points on the boundary are outside.
pub fn polygon_contains(polygon: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = polygon.len();
    let mut inside = false;
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        if on_segment(p, a, b) {
            return false;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Ids of the points strictly inside `polygon`, ascending.
pub fn lasso_select(points: &[ProjectedPoint], polygon: &[[f64; 2]]) -> Result<Vec<String>> {
    if polygon.len() < 3 {
        return Err(Error::invalid(
            "polygon",
            format!("a lasso needs at least 3 vertices, got {}", polygon.len()),
        ));
    }
    let mut ids: Vec<String> = points
        .iter()
        .filter(|p| polygon_contains(polygon, [p.x, p.y]))
        .map(|p| p.id.clone())
        .collect();
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_perplexity_follows_point_count() {
        assert_eq!(default_perplexity(2), 1.0);
        assert_eq!(default_perplexity(10), 3.0);
        assert_eq!(default_perplexity(91), 30.0);
        assert_eq!(default_perplexity(1000), 30.0);
    }

    #[test]
    fn perplexity_outside_reach_is_rejected() {
        let v: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
        assert!(conditional_affinities(&refs, 5.0).is_err());
        assert!(conditional_affinities(&refs, 0.5).is_err());
        assert!(conditional_affinities(&refs[..1], 1.0).is_err());
        assert!(conditional_affinities(&refs, 4.0).is_ok());
    }

    #[test]
    fn square_lasso_and_boundary() {
        let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(polygon_contains(&square, [0.5, 0.5]));
        assert!(!polygon_contains(&square, [1.0, 0.5]));
        assert!(!polygon_contains(&square, [0.0, 0.0]));
        assert!(!polygon_contains(&square, [1.5, 0.5]));
        assert!(lasso_select(&[], &square[..2]).is_err());
    }

    #[test]
    fn contour_of_single_bump_is_closed() {
        let field = density_grid(&[[0.0, 0.0]], 1.0, 40).unwrap();
        for c in &field.contours {
            assert_eq!(c.polylines.len(), 1);
            let line = &c.polylines[0];
            assert_eq!(line.first(), line.last());
            // A Gaussian bump at fraction f of its peak has radius h * sqrt(-2 ln f).
            let radius = (-2.0 * c.fraction.ln()).sqrt();
            for p in line {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                assert!((r - radius).abs() < 0.05, "r = {r}, expected {radius}");
            }
        }
    }
}
