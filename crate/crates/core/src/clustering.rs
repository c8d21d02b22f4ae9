//! Seeded spherical k-means.
//!
//! Lloyd iterations with k-means++ seeding. Centroids are the mean of their members
//! re-projected onto the unit sphere, so they can be used directly as cosine retrieval
//! queries. Assignment is by maximum cosine (equivalently minimum Euclidean distance
//! between unit vectors), ties to the lowest center index.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_store::normalize;
use crate::geometry::dot;

pub const DEFAULT_MAX_ITERS: usize = 100;

const PAR_THRESHOLD: usize = 1 << 14;
const ZERO_MEAN_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("cannot cluster an empty point set")]
    EmptyInput,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the number of points ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Cluster centers produced by one client's k-means run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCenters {
    pub client_id: usize,
    /// Unit-norm centroids.
    pub centers: Vec<Vec<f32>>,
    /// Members per center. Empty when the centers were loaded from a file.
    pub cluster_sizes: Vec<usize>,
    /// Sum of squared Euclidean distances from each point to its center.
    pub inertia: f64,
    /// Lloyd update steps executed.
    pub iterations: usize,
    /// Inertia after initialization and after every update step.
    #[serde(default)]
    pub inertia_trace: Vec<f64>,
}

impl CandidateCenters {
    /// Wrap externally supplied centers (e.g. read from a center file).
    pub fn from_centers(client_id: usize, centers: Vec<Vec<f32>>) -> Self {
        Self {
            client_id,
            centers,
            cluster_sizes: Vec::new(),
            inertia: f64::NAN,
            iterations: 0,
            inertia_trace: Vec::new(),
        }
    }

    pub fn with_client(mut self, client_id: usize) -> Self {
        self.client_id = client_id;
        self
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.centers.first().map(Vec::len)
    }
}

fn nearest<C: AsRef<[f32]>>(p: &[f32], centers: &[C]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let s = dot(p, c.as_ref());
        if s > best_sim {
            best_sim = s;
            best = j;
        }
    }
    best
}

fn assign<P, C>(points: &[P], centers: &[C]) -> Vec<usize>
where
    P: AsRef<[f32]> + Sync,
    C: AsRef<[f32]> + Sync,
{
    if points.len() * centers.len() >= PAR_THRESHOLD {
        points
            .par_iter()
            .map(|p| nearest(p.as_ref(), centers))
            .collect()
    } else {
        points.iter().map(|p| nearest(p.as_ref(), centers)).collect()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn inertia<P: AsRef<[f32]>>(points: &[P], centers: &[Vec<f32>], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p.as_ref(), &centers[l]))
        .sum()
}

fn check_dims<P: AsRef<[f32]>>(points: &[P]) -> Result<usize, ClusterError> {
    let dim = points.first().map(|p| p.as_ref().len()).unwrap_or(0);
    for p in points {
        if p.as_ref().len() != dim {
            return Err(ClusterError::DimensionMismatch(dim, p.as_ref().len()));
        }
    }
    Ok(dim)
}

fn plus_plus_init<P: AsRef<[f32]>>(points: &[P], k: usize, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every remaining point coincides with a center
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = points[pick].as_ref().to_vec();
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p.as_ref(), &c));
        }
        centers.push(c);
    }
    centers
}

fn update<P: AsRef<[f32]>>(points: &[P], labels: &[usize], centers: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let k = centers.len();
    let dim = centers[0].len();
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, &x) in sums[l].iter_mut().zip(p.as_ref()) {
            *s += f64::from(x);
        }
    }

    // empty clusters are re-seeded at the points farthest from their current centers
    let mut far: Vec<(usize, f64)> = Vec::new();
    if counts.contains(&0) {
        far = points
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (p, &l))| (i, sq_dist(p.as_ref(), &centers[l])))
            .collect();
        far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    }
    let mut far_iter = far.into_iter();

    (0..k)
        .map(|j| {
            if counts[j] == 0 {
                return match far_iter.next() {
                    Some((i, _)) => points[i].as_ref().to_vec(),
                    None => centers[j].clone(),
                };
            }
            let inv = 1.0 / counts[j] as f64;
            let mean: Vec<f64> = sums[j].iter().map(|s| s * inv).collect();
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < ZERO_MEAN_NORM {
                return centers[j].clone();
            }
            let mut c: Vec<f32> = mean.iter().map(|&x| x as f32).collect();
            if !normalize(&mut c) {
                return centers[j].clone();
            }
            c
        })
        .collect()
}

/// Cluster unit vectors into `k` groups.
///
/// Deterministic for a fixed `(points order, k, seed, max_iters)`. Stops when an update
/// leaves every assignment unchanged or after `max_iters` updates. Clusters that end up
/// with no members (only possible with duplicated points) are dropped from the output.
pub fn kmeans<P>(
    points: &[P],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<CandidateCenters, ClusterError>
where
    P: AsRef<[f32]> + Sync,
{
    if points.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > points.len() {
        return Err(ClusterError::TooManyClusters { k, n: points.len() });
    }
    check_dims(points)?;

    let mut rng = crate::seed::rng(seed, "kmeans++", 0);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut labels = assign(points, &centers);
    let mut trace = vec![inertia(points, &centers, &labels)];
    let mut iterations = 0;
    for _ in 0..max_iters {
        let next = update(points, &labels, &centers);
        let next_labels = assign(points, &next);
        iterations += 1;
        centers = next;
        let changed = next_labels != labels;
        labels = next_labels;
        trace.push(inertia(points, &centers, &labels));
        if !changed {
            break;
        }
    }

    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    let inertia = *trace.last().unwrap();
    let (centers, cluster_sizes): (Vec<_>, Vec<_>) = centers
        .into_iter()
        .zip(sizes)
        .filter(|(_, s)| *s > 0)
        .unzip();
    Ok(CandidateCenters {
        client_id: 0,
        centers,
        cluster_sizes,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}

/// Label each point with its nearest center by cosine, ties to the lowest index.
pub fn assign_labels<P>(points: &[P], centers: &CandidateCenters) -> Result<Vec<usize>, ClusterError>
where
    P: AsRef<[f32]> + Sync,
{
    let dim = centers.dim().ok_or(ClusterError::EmptyInput)?;
    for p in points {
        if p.as_ref().len() != dim {
            return Err(ClusterError::DimensionMismatch(dim, p.as_ref().len()));
        }
    }
    Ok(assign(points, &centers.centers))
}
