//! Lloyd's k-means with k-means++ seeding and deterministic restarts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PrioError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub restarts: usize,
    /// Convergence threshold on the largest squared centroid shift.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iters: 100,
            restarts: 8,
            tol: 1e-8,
        }
    }
}

/// Result of one clustering. Group indices are compact and numbered by first
/// occurrence in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

impl Clustering {
    pub fn num_groups(&self) -> usize {
        self.centroids.len()
    }

    /// Member indices of every group.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.num_groups()];
        for (i, &a) in self.assignment.iter().enumerate() {
            g[a].push(i);
        }
        g
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_count(points: &[Vec<f64>], limit: usize) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
            if seen.len() >= limit {
                break;
            }
        }
    }
    seen.len()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        // Guard against rounding landing on an already-chosen point.
        if d2[pick] <= 0.0 {
            pick = d2
                .iter()
                .enumerate()
                .fold((0, -1.0), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                .0;
        }
        let c = points[pick].clone();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> Clustering {
    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..cfg.max_iters.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, _) = nearest(p, &centroids);
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for (j, c) in centroids.iter_mut().enumerate() {
            if counts[j] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(c, &next));
            *c = next;
        }
        if !changed || shift <= cfg.tol {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignment[i] = nearest(p, &centroids).0;
    }
    compact(points, &assignment, &centroids)
}

/// Drops empty groups and renumbers by first occurrence.
fn compact(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> Clustering {
    let mut remap = vec![usize::MAX; centroids.len()];
    let mut order = Vec::new();
    for &a in assignment {
        if remap[a] == usize::MAX {
            remap[a] = order.len();
            order.push(a);
        }
    }
    let assignment: Vec<usize> = assignment.iter().map(|&a| remap[a]).collect();
    let centroids: Vec<Vec<f64>> = order.iter().map(|&j| centroids[j].clone()).collect();
    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    Clustering {
        assignment,
        centroids,
        inertia,
    }
}

/// k-means over arbitrary-dimension points; the lowest-inertia restart wins
/// (ties go to the earliest restart).
pub fn kmeans(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig, seed: u64) -> Result<Clustering> {
    if points.is_empty() {
        return Err(PrioError::validation("k-means input", "no points"));
    }
    if k == 0 {
        return Err(PrioError::validation("k-means", "k must be at least 1"));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(PrioError::Dimension {
            what: "k-means point",
            expected: dim,
            got: p.len(),
        });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PrioError::validation("k-means input", "non-finite coordinate"));
    }
    let k = k.min(distinct_count(points, k));
    let mut best: Option<Clustering> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = rng::stream(seed, &[restart as u64]);
        let init = seed_plus_plus(points, k, &mut rng);
        let run = lloyd(points, init, cfg);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn cluster_geometry(
    log_sizes: &[[f64; 3]],
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<Clustering> {
    let pts: Vec<Vec<f64>> = log_sizes.iter().map(|x| x.to_vec()).collect();
    kmeans(&pts, k, cfg, seed)
}

/// Scales a vector to unit norm; zero vectors are returned unchanged.
pub fn unit_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

pub fn cluster_appearance(
    features: &[Vec<f64>],
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<Clustering> {
    let pts: Vec<Vec<f64>> = features.iter().map(|f| unit_normalize(f)).collect();
    kmeans(&pts, k, cfg, seed)
}
