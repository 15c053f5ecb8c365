//! Lloyd's k-means with seeded k-means++ seeding.
//!
//! Points are stored point-major: point `i` occupies `points[i * dim..(i + 1) * dim]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            rel_tol: 1e-6,
            restarts: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `k * dim` values, centroid-major.
    pub centroids: Vec<f32>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    /// SSE after every assignment step of the winning restart.
    pub history: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

/// Nearest centroid for every point; ties go to the lowest index.
fn assign(
    points: &[f32],
    dim: usize,
    centroids: &[f64],
    labels: &mut [usize],
    dists: &mut [f64],
) -> f64 {
    let k = centroids.len() / dim;
    let mut sse = 0.0;
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
        sse += best_d;
    }
    sse
}

fn plus_plus_init(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(
        points[first * dim..(first + 1) * dim]
            .iter()
            .map(|&v| v as f64),
    );
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[0..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend(
            points[pick * dim..(pick + 1) * dim]
                .iter()
                .map(|&v| v as f64),
        );
        for (p, d) in points.chunks_exact(dim).zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &centroids[start..start + dim]));
        }
    }
    centroids
}

fn lloyd(
    points: &[f32],
    dim: usize,
    k: usize,
    params: &KMeansParams,
    rng: &mut ChaCha8Rng,
) -> KMeansResult {
    let n = points.len() / dim;
    let mut centroids = plus_plus_init(points, dim, k, rng);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut sse = assign(points, dim, &centroids, &mut labels, &mut dists);
    let mut history = vec![sse];

    for _ in 0..params.max_iter {
        if sse == 0.0 {
            break;
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.chunks_exact(dim).zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }
        // empty clusters take the points farthest from their (updated) centroid
        if counts.contains(&0) {
            for (i, p) in points.chunks_exact(dim).enumerate() {
                let l = labels[i];
                dists[i] = sq_dist(p, &centroids[l * dim..(l + 1) * dim]);
            }
            for c in 0..k {
                if counts[c] != 0 {
                    continue;
                }
                let mut far = 0;
                for i in 1..n {
                    if dists[i] > dists[far] {
                        far = i;
                    }
                }
                for (dst, &v) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&points[far * dim..(far + 1) * dim])
                {
                    *dst = v as f64;
                }
                dists[far] = -1.0;
                counts[c] = 1;
            }
        }
        let next = assign(points, dim, &centroids, &mut labels, &mut dists);
        debug_assert!(
            next <= sse * (1.0 + 1e-12) + 1e-300,
            "k-means SSE increased: {sse} -> {next}"
        );
        let improvement = sse - next;
        sse = next;
        history.push(sse);
        if improvement <= params.rel_tol * (sse + improvement) {
            break;
        }
    }

    let centroids: Vec<f32> = centroids.iter().map(|&v| v as f32).collect();
    let wide: Vec<f64> = centroids.iter().map(|&v| v as f64).collect();
    let sse = assign(points, dim, &wide, &mut labels, &mut dists);
    KMeansResult {
        centroids,
        assignments: labels,
        sse,
        history,
    }
}

/// Clusters `points` (point-major, `dim` values each) into `k` centroids.
///
/// Runs `params.restarts` independent seedings and keeps the lowest SSE. `k`
/// larger than the number of points is allowed; surplus centroids duplicate
/// existing points.
pub fn kmeans(points: &[f32], dim: usize, k: usize, params: &KMeansParams) -> Result<KMeansResult> {
    if dim == 0 || points.is_empty() || points.len() % dim != 0 {
        return config_err(format!(
            "k-means needs at least one point of positive dimension (got {} values, dim {dim})",
            points.len()
        ));
    }
    if k == 0 {
        return config_err("k-means needs k >= 1");
    }
    if params.restarts == 0 {
        return config_err("k-means needs at least one restart");
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..params.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(r as u64);
        let run = lloyd(points, dim, k, params, &mut rng);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
