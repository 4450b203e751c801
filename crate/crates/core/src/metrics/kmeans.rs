//! Seeded k-means (k-means++ initialisation, Lloyd iterations, restarts).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self { k, restarts: 20, iterations: 300, seed: 0x5eed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    pub inertia: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest centroid; ties go to the lower index.
    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for c in 0..self.k {
            let d = dist2(x, self.centroid(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    pub fn histogram(&self, points: &[f64]) -> Vec<usize> {
        let mut h = vec![0; self.k];
        for x in points.chunks_exact(self.dim) {
            h[self.assign(x)] += 1;
        }
        h
    }
}

fn distinct_rows(points: &[f64], dim: usize) -> usize {
    let mut rows: Vec<&[f64]> = points.chunks_exact(dim).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    rows.dedup();
    rows.len()
}

fn plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut cent = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    cent.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points.chunks_exact(dim).map(|x| dist2(x, &cent[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = &points[pick * dim..(pick + 1) * dim];
        cent.extend_from_slice(c);
        for (i, x) in points.chunks_exact(dim).enumerate() {
            d2[i] = d2[i].min(dist2(x, c));
        }
    }
    cent
}

/// One Lloyd run; `None` when a cluster empties.
fn lloyd(points: &[f64], dim: usize, k: usize, mut cent: Vec<f64>, iters: usize) -> Option<KMeans> {
    let n = points.len() / dim;
    let mut labels = vec![usize::MAX; n];
    for _ in 0..iters {
        let model = KMeans { centroids: cent.clone(), k, dim, inertia: 0.0 };
        let mut changed = false;
        for (i, x) in points.chunks_exact(dim).enumerate() {
            let a = model.assign(x);
            if a != labels[i] {
                labels[i] = a;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, x) in points.chunks_exact(dim).enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i] * dim..(labels[i] + 1) * dim].iter_mut().zip(x) {
                *s += v;
            }
        }
        if counts.iter().any(|&c| c == 0) {
            return None;
        }
        for c in 0..k {
            for j in 0..dim {
                cent[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let mut model = KMeans { centroids: cent, k, dim, inertia: 0.0 };
    model.inertia = points.chunks_exact(dim).map(|x| dist2(x, model.centroid(model.assign(x)))).sum();
    Some(model)
}

/// Best of `restarts` runs by inertia. A run that empties a cluster is
/// replaced by a re-seeded run.
pub fn fit(points: &[f64], dim: usize, cfg: &KMeansConfig) -> Result<KMeans> {
    if dim == 0 || points.len() % dim != 0 || points.is_empty() {
        return Err(Error::Invalid(format!("{} values do not form rows of {dim}", points.len())));
    }
    if cfg.k == 0 || cfg.restarts == 0 {
        return Err(Error::Config(format!("k-means needs k >= 1 and restarts >= 1 (k = {})", cfg.k)));
    }
    let distinct = distinct_rows(points, dim);
    if cfg.k > distinct {
        return Err(Error::Invalid(format!("k = {} exceeds {distinct} distinct frames", cfg.k)));
    }
    let mut best: Option<KMeans> = None;
    let mut attempt = 0u64;
    let mut done = 0;
    while done < cfg.restarts {
        let mut rng = seeded(derive_seed(cfg.seed, attempt));
        attempt += 1;
        if attempt > 100 * cfg.restarts as u64 {
            return Err(Error::Invalid(format!("k-means kept emptying clusters (k = {})", cfg.k)));
        }
        let init = plus_plus(points, dim, cfg.k, &mut rng);
        let Some(m) = lloyd(points, dim, cfg.k, init, cfg.iterations) else { continue };
        done += 1;
        if best.as_ref().is_none_or(|b| m.inertia < b.inertia) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}
