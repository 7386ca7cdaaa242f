//! Lloyd's k-means with farthest-point seeding.
//!
//! The first centre is a point drawn from a seeded RNG; each further centre
//! is the point farthest from the centres chosen so far. Clusters that end up
//! empty are re-seeded with the point farthest from its own centroid, taken
//! from a cluster that can spare it, so the result always has exactly `k`
//! non-empty clusters when there are at least `k` points (duplicates
//! included).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KMeansError {
    #[error("k = {k} exceeds the number of points ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("points have inconsistent dimensions")]
    DimensionMismatch,
    #[error("non-finite coordinate in input")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tolerance: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iterations: 100,
            tolerance: 1e-4,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid after each
    /// iteration.
    pub objective_history: Vec<f64>,
}

impl KMeansResult {
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centroids.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn objective(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

fn seed_centres(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..points.len())];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for (i, &d) in min_d.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            if best.map_or(true, |(_, b)| d > b) {
                best = Some((i, d));
            }
        }
        let (next, _) = best.expect("k <= number of points");
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen
}

/// Nearest centroid; keeps `current` when it is among the nearest, else the
/// lowest index wins.
fn nearest(p: &[f64], centroids: &[Vec<f64>], current: Option<usize>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    match current {
        Some(c) if sq_dist(p, &centroids[c]) == best_d => c,
        _ => best,
    }
}

fn fill_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[labels[i]]);
            if best.map_or(true, |(_, b)| d > b) {
                best = Some((i, d));
            }
        }
        let (steal, _) = best.expect("n >= k leaves a cluster with a spare point");
        labels[steal] = empty;
        centroids[empty] = points[steal].clone();
    }
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    sums
}

pub fn kmeans(points: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansResult, KMeansError> {
    let n = points.len();
    let k = config.k;
    if k > n {
        return Err(KMeansError::TooManyClusters { k, n });
    }
    if k == 0 {
        return Ok(KMeansResult {
            labels: Vec::new(),
            centroids: Vec::new(),
            objective_history: Vec::new(),
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(KMeansError::DimensionMismatch);
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(KMeansError::NonFinite);
    }

    let mut centroids: Vec<Vec<f64>> = seed_centres(points, k, config.seed)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids, None)).collect();
    let mut history = Vec::new();

    for _ in 0..config.max_iterations.max(1) {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids, Some(*l));
        }
        fill_empty(points, &mut labels, &mut centroids);
        let updated = means(points, &labels, k, dim);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(objective(points, &labels, &centroids));
        if shift < config.tolerance {
            break;
        }
    }

    Ok(KMeansResult {
        labels,
        centroids,
        objective_history: history,
    })
}
