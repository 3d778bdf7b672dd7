use dash_core::engine::LatentSet;
use dash_core::projection::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn gaussian_blobs(centers: &[Vec<f64>], per: usize, std: f64, seed: u64) -> (LatentSet, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for i in 0..per {
            ids.push(format!("c{c}-{i:03}"));
            vectors.push(center.iter().map(|m| m + normal.sample(&mut rng)).collect());
            labels.push(c);
        }
    }
    (LatentSet::new(ids, vectors).unwrap(), labels)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Mean silhouette coefficient, straight from the definition.
fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let k = labels.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for (i, &p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (j, &q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
                counts[labels[j]] += 1;
            }
        }
        let a = sums[labels[i]] / counts[labels[i]] as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i])
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / points.len() as f64
}

#[test]
fn bandwidth_search_hits_the_perplexity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vectors: Vec<Vec<f64>> = (0..80).map(|_| (0..6).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    for perplexity in [1.5, 5.0, 12.0, 26.0, 60.0] {
        let aff = conditional_affinities(&refs, perplexity).unwrap();
        for i in 0..refs.len() {
            let row = aff.row(i);
            let entropy: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
            let err = (entropy - perplexity.log2()).abs();
            assert!(err < 1e-4, "perplexity {perplexity} point {i}: log2 error {err}");
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            assert_eq!(row[i], 0.0);
            // The row is a Gaussian kernel in the squared distance.
            let d: Vec<f64> = refs.iter().map(|q| q.iter().zip(refs[i]).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let weights: Vec<f64> = (0..refs.len())
                .map(|j| if j == i { 0.0 } else { (-aff.betas[i] * d[j]).exp() })
                .collect();
            let z: f64 = weights.iter().sum();
            for j in 0..refs.len() {
                assert!((weights[j] / z - row[j]).abs() < 1e-9);
            }
        }
        let joint = aff.joint();
        let n = refs.len();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(joint[i * n + j], joint[j * n + i]);
            }
        }
        assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }
}

#[test]
fn two_gaussians_separate() {
    let mut far = vec![0.0; 10];
    far[0] = 12.0;
    let (latents, labels) = gaussian_blobs(&[vec![0.0; 10], far], 50, 1.0, 3);
    let result = tsne(&latents, &TsneParams::default()).unwrap();
    assert_eq!(result.perplexity, 30.0);
    assert_eq!(result.iterations, 500);
    let coords = result.coordinates();
    assert!(coords.iter().flatten().all(|v| v.is_finite()));
    let s = silhouette(&coords, &labels);
    assert!(s > 0.5, "silhouette {s}");
    assert!(result.final_kl < result.initial_kl, "{} vs {}", result.final_kl, result.initial_kl);
}

#[test]
fn final_kl_improves_on_every_fixture() {
    let fixtures = [
        gaussian_blobs(&[vec![0.0; 4], vec![5.0; 4], vec![-5.0, 5.0, 0.0, 0.0]], 12, 0.5, 1).0,
        gaussian_blobs(&[vec![0.0; 3]], 25, 1.0, 2).0,
        gaussian_blobs(&[vec![0.0, 0.0], vec![1.0, 1.0]], 4, 0.3, 3).0,
    ];
    for latents in &fixtures {
        for seed in 0..3 {
            let params = TsneParams { seed, ..TsneParams::default() };
            let r = tsne(latents, &params).unwrap();
            assert!(r.final_kl < r.initial_kl, "seed {seed}: {} !< {}", r.final_kl, r.initial_kl);
        }
    }
}

#[test]
fn two_points_land_apart() {
    let latents = LatentSet::new(vec!["a".into(), "b".into()], vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let r = tsne(&latents, &TsneParams { perplexity: Some(1.0), ..TsneParams::default() }).unwrap();
    let c = r.coordinates();
    assert!(c.iter().flatten().all(|v| v.is_finite()));
    assert!(dist(c[0], c[1]) > 0.0);
}

#[test]
fn duplicates_stay_together() {
    let centers = [vec![0.0, 0.0, 0.0], vec![10.0, 0.0, 0.0], vec![0.0, 10.0, 0.0]];
    let (base, _) = gaussian_blobs(&centers, 8, 1.0, 9);
    let mut ids = base.ids.clone();
    let mut vectors = base.vectors.clone();
    // Exact copies of one member per cluster.
    for c in 0..3 {
        ids.push(format!("dup-{c}"));
        vectors.push(base.vectors[c * 8].clone());
    }
    let latents = LatentSet::new(ids.clone(), vectors).unwrap();
    let r = tsne(&latents, &TsneParams { seed: 4, ..TsneParams::default() }).unwrap();
    let c = r.coordinates();
    for k in 0..3 {
        let (orig, dup) = (k * 8, base.len() + k);
        let pair = dist(c[orig], c[dup]);
        for j in 0..c.len() {
            if j != orig && j != dup {
                assert!(pair < dist(c[orig], c[j]), "{} vs {}", ids[dup], ids[j]);
                assert!(pair < dist(c[dup], c[j]));
            }
        }
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let one = LatentSet::new(vec!["a".into()], vec![vec![0.0]]).unwrap();
    assert!(tsne(&one, &TsneParams::default()).is_err());
    let (latents, _) = gaussian_blobs(&[vec![0.0; 2]], 10, 1.0, 1);
    for p in [10.0, 11.0, f64::NAN] {
        let params = TsneParams { perplexity: Some(p), ..TsneParams::default() };
        assert!(tsne(&latents, &params).is_err(), "perplexity {p}");
    }
}

#[test]
fn input_order_does_not_change_the_embedding() {
    let (latents, _) = gaussian_blobs(&[vec![0.0; 5], vec![4.0; 5]], 15, 1.0, 11);
    let params = TsneParams { iterations: 200, seed: 5, ..TsneParams::default() };
    let a = tsne(&latents, &params).unwrap();
    let mut order: Vec<usize> = (0..latents.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let shuffled = LatentSet::new(
        order.iter().map(|&i| latents.ids[i].clone()).collect(),
        order.iter().map(|&i| latents.vectors[i].clone()).collect(),
    )
    .unwrap();
    let b = tsne(&shuffled, &params).unwrap();
    for (pos, &i) in order.iter().enumerate() {
        assert_eq!(b.points[pos], a.points[i]);
    }
    assert_eq!(a.final_kl, b.final_kl);
    assert_eq!(tsne(&latents, &params).unwrap(), a);
    let other = tsne(&latents, &TsneParams { seed: 6, ..params }).unwrap();
    assert_ne!(other.points, a.points);
}

fn kde_at(points: &[[f64; 2]], h: f64, x: [f64; 2]) -> f64 {
    points
        .iter()
        .map(|p| (-(dist(*p, x).powi(2)) / (2.0 * h * h)).exp() / (2.0 * std::f64::consts::PI * h * h))
        .sum::<f64>()
        / points.len() as f64
}

#[test]
fn single_point_density_peaks_at_its_cell() {
    let p = [0.3, -1.7];
    let f = density_grid(&[p], 0.5, 31).unwrap();
    let peak = f.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let (cw, ch) = f.cell_size();
    let col = ((p[0] - f.x_min) / cw) as usize;
    let row = ((p[1] - f.y_min) / ch) as usize;
    assert_eq!(peak, row * f.resolution + col);
    assert!((f.x_min - (p[0] - 1.5)).abs() < 1e-12 && (f.y_max - (p[1] + 1.5)).abs() < 1e-12);
}

#[test]
fn density_matches_direct_kde_and_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let clouds: Vec<Vec<[f64; 2]>> = vec![
        vec![[0.0, 0.0]],
        (0..50).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect(),
        (0..60)
            .map(|i| {
                let shift = if i % 2 == 0 { 8.0 } else { -8.0 };
                [shift + normal.sample(&mut rng), 0.5 * normal.sample(&mut rng)]
            })
            .collect(),
        (0..30).map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-1.0..1.0)]).collect(),
    ];
    for points in &clouds {
        let h = scott_bandwidth(points);
        let f = density_grid(points, h, DEFAULT_RESOLUTION).unwrap();
        assert!(f.values.iter().all(|&v| v >= 0.0));
        let integral = f.integral();
        assert!((0.99..=1.01).contains(&integral), "integral {integral}");
        for (row, col) in [(0, 0), (10, 40), (32, 32), (63, 5)] {
            let expected = kde_at(points, h, f.cell_center(row, col));
            let got = f.values[row * f.resolution + col];
            assert!((got - expected).abs() <= 1e-12 * expected.max(1e-300) + 1e-300);
        }
        for c in &f.contours {
            assert_eq!(c.level, c.fraction * f.peak());
        }
    }
}

#[test]
fn duplicated_point_gives_the_same_field() {
    let one = density_grid(&[[1.0, 2.0]], 0.7, 20).unwrap();
    let two = density_grid(&[[1.0, 2.0], [1.0, 2.0]], 0.7, 20).unwrap();
    for (a, b) in one.values.iter().zip(&two.values) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn bad_density_parameters_are_rejected() {
    assert!(density_grid(&[[0.0, 0.0]], 0.0, 10).is_err());
    assert!(density_grid(&[[0.0, 0.0]], -1.0, 10).is_err());
    assert!(density_grid(&[], 1.0, 10).is_err());
    assert!(density_grid(&[[0.0, 0.0]], 1.0, 1).is_err());
}

#[test]
fn contour_vertices_bracket_the_level() {
    let points = [[0.0, 0.0], [3.0, 0.5], [1.0, 3.0], [0.5, 0.2]];
    let f = density_grid(&points, 0.8, 48).unwrap();
    let (cw, ch) = f.cell_size();
    for c in &f.contours {
        assert!(!c.polylines.is_empty());
        for p in c.polylines.iter().flatten() {
            // Every vertex sits between two neighboring cell centers whose
            // values straddle the level.
            let col = (p[0] - f.x_min) / cw - 0.5;
            let row = (p[1] - f.y_min) / ch - 0.5;
            let (r0, c0) = (row.floor() as usize, col.floor() as usize);
            let on_row = (row - row.round()).abs() < 1e-9;
            let (a, b) = if on_row {
                let r = row.round() as usize;
                (f.values[r * f.resolution + c0], f.values[r * f.resolution + c0 + 1])
            } else {
                let cc = col.round() as usize;
                (f.values[r0 * f.resolution + cc], f.values[(r0 + 1) * f.resolution + cc])
            };
            assert!(a.min(b) <= c.level + 1e-15 && c.level <= a.max(b) + 1e-15);
        }
    }
}

fn points(coords: &[[f64; 2]]) -> Vec<ProjectedPoint> {
    coords
        .iter()
        .enumerate()
        .map(|(i, c)| ProjectedPoint { id: format!("p{i}"), x: c[0], y: c[1] })
        .collect()
}

/// Even-odd test with a ray cast upward, an independent take on the rule.
fn upward_ray_inside(polygon: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut crossings = 0;
    for i in 0..polygon.len() {
        let (a, b) = (polygon[i], polygon[(i + 1) % polygon.len()]);
        let (left, right) = if a[0] <= b[0] { (a, b) } else { (b, a) };
        if p[0] >= left[0] && p[0] < right[0] {
            let y = left[1] + (p[0] - left[0]) / (right[0] - left[0]) * (right[1] - left[1]);
            if y > p[1] {
                crossings += 1;
            }
        }
    }
    crossings % 2 == 1
}

#[test]
fn lasso_trivial_cases() {
    let pts = points(&[[0.0, 0.0], [1.0, 1.0], [-2.0, 3.0]]);
    let all = lasso_select(&pts, &[[-5.0, -5.0], [5.0, -5.0], [5.0, 5.0], [-5.0, 5.0]]).unwrap();
    assert_eq!(all, vec!["p0", "p1", "p2"]);
    let none = lasso_select(&pts, &[[10.0, 10.0], [11.0, 10.0], [11.0, 11.0]]).unwrap();
    assert!(none.is_empty());
    assert!(lasso_select(&pts, &[[0.0, 0.0], [1.0, 1.0]]).is_err());
}

#[test]
fn concave_lasso_matches_ray_casting() {
    // A "C" shape opening to the right.
    let polygon = [
        [0.0, 0.0],
        [4.0, 0.0],
        [4.0, 1.0],
        [1.0, 1.0],
        [1.0, 3.0],
        [4.0, 3.0],
        [4.0, 4.0],
        [0.0, 4.0],
    ];
    let coords = [
        [0.5, 0.5],
        [2.0, 2.0],
        [3.5, 0.5],
        [0.5, 3.5],
        [2.5, 3.5],
        [3.0, 2.0],
        [0.5, 2.0],
        [5.0, 2.0],
        [1.5, 0.7],
        [2.0, 1.5],
    ];
    let pts = points(&coords);
    let expected: Vec<String> = pts
        .iter()
        .filter(|p| upward_ray_inside(&polygon, [p.x, p.y]))
        .map(|p| p.id.clone())
        .collect();
    assert_eq!(expected, vec!["p0", "p2", "p3", "p4", "p6", "p8"]);
    assert_eq!(lasso_select(&pts, &polygon).unwrap(), expected);
}

#[test]
fn boundary_points_are_excluded() {
    let triangle = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
    let pts = points(&[[2.0, 2.0], [0.0, 1.0], [4.0, 0.0], [1.0, 0.0], [1.0, 1.0]]);
    assert_eq!(lasso_select(&pts, &triangle).unwrap(), vec!["p4"]);
}

proptest! {
    #[test]
    fn lasso_agrees_with_upward_rays(
        verts in prop::collection::vec((-10i32..10, -10i32..10), 3..9),
        probes in prop::collection::vec((-100i32..100, -100i32..100), 1..30),
    ) {
        let polygon: Vec<[f64; 2]> = verts.iter().map(|&(x, y)| [x as f64, y as f64]).collect();
        // Probes on a finer, offset lattice never touch edges or vertex lines.
        let coords: Vec<[f64; 2]> = probes
            .iter()
            .map(|&(x, y)| [x as f64 / 10.0 + 0.0137, y as f64 / 10.0 + 0.0291])
            .collect();
        let pts = points(&coords);
        let mut expected: Vec<String> = pts
            .iter()
            .filter(|p| upward_ray_inside(&polygon, [p.x, p.y]))
            .map(|p| p.id.clone())
            .collect();
        expected.sort();
        prop_assert_eq!(lasso_select(&pts, &polygon).unwrap(), expected);
    }

    #[test]
    fn lasso_selection_is_order_independent(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[f64; 2]> = (0..20).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let mut pts = points(&coords);
        let polygon = [[-2.0, -2.5], [2.5, -1.0], [0.0, 0.0], [2.0, 2.0], [-2.5, 1.5]];
        let a = lasso_select(&pts, &polygon).unwrap();
        pts.shuffle(&mut rng);
        prop_assert_eq!(lasso_select(&pts, &polygon).unwrap(), a);
    }
}
