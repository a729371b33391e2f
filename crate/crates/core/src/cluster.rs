//! Visual clusters: k-means on the background corpus and Gaussian-kernel
//! soft assignment with a hard distance cutoff.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{check_dim, squared_distance};
use crate::{seed, Error, Result};

pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 200;
pub const DEFAULT_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    pub centers: Vec<Vec<f64>>,
    /// Kernel bandwidth α² of the assignment exponent.
    pub bandwidth_sq: f64,
    /// Distance beyond which an image gets zero affinity to a center.
    pub cutoff: f64,
    pub seed: u64,
    pub version: u32,
    /// Users whose images fitted the model; excluded from comparisons.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub background_users: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl ClusterModel {
    pub fn new(centers: Vec<Vec<f64>>, bandwidth_sq: f64, cutoff: f64, seed: u64) -> Result<Self> {
        let model = ClusterModel {
            k: centers.len(),
            dim: centers.first().map_or(0, Vec::len),
            centers,
            bandwidth_sq,
            cutoff,
            seed,
            version: MODEL_VERSION,
            background_users: Vec::new(),
            config_digest: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.centers.len() != self.k {
            return Err(Error::InvalidInput(format!(
                "model declares k = {} with {} centers",
                self.k,
                self.centers.len()
            )));
        }
        for c in &self.centers {
            check_dim(self.dim, c.len())?;
        }
        if !(self.bandwidth_sq > 0.0) || !self.bandwidth_sq.is_finite() {
            return Err(Error::InvalidInput("bandwidth_sq must be positive and finite".into()));
        }
        if !(self.cutoff > 0.0) {
            return Err(Error::InvalidInput("cutoff must be positive".into()));
        }
        if self.version != MODEL_VERSION {
            return Err(Error::InvalidInput(format!("unsupported model version {}", self.version)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        // Strict comparison keeps the lowest index on ties.
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` is reached.
///
/// Empty clusters are refilled with the point farthest from its current
/// center.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    for p in points {
        check_dim(dim, p.len())?;
    }

    let mut rng = seed::rng(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut assignments: Vec<usize> = vec![usize::MAX; points.len()];
    let mut inertia_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let nearest_all: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centers)).collect();
        let mut new_assign: Vec<usize> = nearest_all.iter().map(|(c, _)| *c).collect();
        let mut dist: Vec<f64> = nearest_all.iter().map(|(_, d)| *d).collect();

        // Refill empty clusters, one at a time, from the worst-served point.
        let mut counts = vec![0usize; k];
        new_assign.iter().for_each(|&c| counts[c] += 1);
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let (far, _) = dist
                .iter()
                .enumerate()
                .filter(|(i, _)| counts[new_assign[*i]] > 1)
                .fold((usize::MAX, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
            if far == usize::MAX {
                break;
            }
            counts[new_assign[far]] -= 1;
            new_assign[far] = empty;
            counts[empty] = 1;
            centers[empty] = points[far].clone();
            dist[far] = 0.0;
        }

        if new_assign == assignments {
            converged = true;
            inertia_history.push(dist.iter().sum());
            break;
        }
        assignments = new_assign;

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &c) in points.iter().zip(&assignments) {
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, s) in sums.into_iter().enumerate() {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centers[c] = s.into_iter().map(|v| v * inv).collect();
            }
        }
        inertia_history.push(inertia(points, &centers, &assignments));
    }

    let inertia = inertia(points, &centers, &assignments);
    Ok(KMeansFit {
        centers,
        assignments,
        inertia,
        inertia_history,
        iterations,
        converged,
    })
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just above the final sum.
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centers.push(c);
    }
    centers
}

pub fn inertia(points: &[Vec<f64>], centers: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| squared_distance(p, &centers[c]))
        .sum()
}

/// Mean squared distance over all ordered pairs (including `i = j`),
/// evaluated as `(2/n) Σ ‖dᵢ − d̄‖²`, which equals
/// `(2/n) Σ ‖dᵢ‖² − 2 ‖d̄‖²` without its cancellation.
pub fn estimate_bandwidth(points: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = points.first() else {
        return Err(Error::InsufficientData("no background vectors".into()));
    };
    let dim = first.len();
    for p in points {
        check_dim(dim, p.len())?;
    }
    let n = points.len() as f64;
    let mean = crate::linalg::mean(points.iter().map(Vec::as_slice), dim);
    let spread: f64 = points.iter().map(|p| squared_distance(p, &mean)).sum();
    let alpha_sq = 2.0 * spread / n;
    if !(alpha_sq > 0.0) {
        return Err(Error::InsufficientData(
            "background vectors are all identical; bandwidth would be zero".into(),
        ));
    }
    Ok(alpha_sq)
}

/// Per-cluster affinity `exp(−‖d − r‖² / 2α²)`, zero when `‖d − r‖ > cutoff`.
pub fn soft_assign(d: &[f64], model: &ClusterModel) -> Result<Vec<f64>> {
    check_dim(model.dim, d.len())?;
    Ok(model
        .centers
        .iter()
        .map(|c| {
            let sq = squared_distance(d, c);
            if sq.sqrt() <= model.cutoff {
                (-sq / (2.0 * model.bandwidth_sq)).exp()
            } else {
                0.0
            }
        })
        .collect())
}
