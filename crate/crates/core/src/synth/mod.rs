//! Ground-truth synthetic corpora.
//!
//! Latent visual clusters are Gaussian blobs with well-separated centers.
//! Each preference group draws a distribution over the latent clusters from
//! a symmetric Dirichlet; every image of a user picks a latent cluster from
//! the user's group distribution and jitters around that cluster's center.

pub mod oracle;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageRecord, UserCorpus};
use crate::linalg::euclidean;
use crate::{seed, Error, Result};

/// First timestamp handed out; each user's images follow at one-second steps.
pub const BASE_TIMESTAMP: u64 = 1_600_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    LatentClusterAsLabel,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub images_per_user: usize,
    pub n_latent_clusters: usize,
    pub feature_dim: usize,
    /// Minimum distance between latent cluster centers.
    pub cluster_separation: f64,
    /// Standard deviation of the isotropic noise around a center.
    pub noise_std: f64,
    pub dirichlet_concentration: f64,
    /// Users `u` with equal `u % n_groups` share a preference vector.
    pub n_groups: usize,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 60,
            images_per_user: 100,
            n_latent_clusters: 8,
            feature_dim: 8,
            cluster_separation: 6.0,
            noise_std: 1.0,
            dirichlet_concentration: 0.5,
            n_groups: 60,
            label_mode: LabelMode::LatentClusterAsLabel,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0
            || self.images_per_user == 0
            || self.n_latent_clusters == 0
            || self.feature_dim == 0
            || self.n_groups == 0
        {
            return Err(Error::InvalidInput("synthetic counts must be positive".into()));
        }
        if !(self.cluster_separation > 0.0) || !(self.noise_std >= 0.0) || !(self.dirichlet_concentration > 0.0) {
            return Err(Error::InvalidInput(
                "separation and concentration must be positive, noise non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub centers: Vec<Vec<f64>>,
    pub group_preferences: Vec<Vec<f64>>,
    /// user id → group index
    pub user_groups: BTreeMap<String, usize>,
    /// image id → latent cluster
    pub latent: BTreeMap<String, usize>,
    pub seed: u64,
}

impl GroundTruth {
    pub fn preference(&self, user_id: &str) -> Option<&[f64]> {
        self.user_groups
            .get(user_id)
            .map(|&g| self.group_preferences[g].as_slice())
    }
}

pub fn user_id(u: usize) -> String {
    format!("u{u:04}")
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<(UserCorpus, GroundTruth)> {
    config.validate()?;
    let mut rng = seed::rng(config.seed);
    let centers = place_centers(config, &mut rng);

    let gamma = Gamma::new(config.dirichlet_concentration, 1.0)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let group_preferences: Vec<Vec<f64>> = (0..config.n_groups)
        .map(|_| {
            let mut p: Vec<f64> = (0..config.n_latent_clusters).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = p.iter().sum();
            if total > 0.0 && total.is_finite() {
                p.iter_mut().for_each(|v| *v /= total);
            } else {
                // every gamma draw underflowed: the limit is a point mass
                p.iter_mut().for_each(|v| *v = 0.0);
                p[rng.random_range(0..config.n_latent_clusters)] = 1.0;
            }
            p
        })
        .collect();
    let pickers = group_preferences
        .iter()
        .map(|p| WeightedIndex::new(p).map_err(|e| Error::Numeric(e.to_string())))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(config.n_users * config.images_per_user);
    let mut user_groups = BTreeMap::new();
    let mut latent = BTreeMap::new();
    for u in 0..config.n_users {
        let uid = user_id(u);
        let group = u % config.n_groups;
        user_groups.insert(uid.clone(), group);
        for j in 0..config.images_per_user {
            let c = pickers[group].sample(&mut rng);
            let features = centers[c]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + config.noise_std * z
                })
                .collect();
            let image_id = format!("{uid}_i{j:04}");
            latent.insert(image_id.clone(), c);
            records.push(ImageRecord {
                user_id: uid.clone(),
                image_id,
                timestamp: BASE_TIMESTAMP + j as u64,
                label: match config.label_mode {
                    LabelMode::LatentClusterAsLabel => Some(format!("c{c}")),
                    LabelMode::None => None,
                },
                features,
            });
        }
    }
    let corpus = UserCorpus::from_records(records)?;
    Ok((
        corpus,
        GroundTruth {
            centers,
            group_preferences,
            user_groups,
            latent,
            seed: config.seed,
        },
    ))
}

/// Rejection-samples centers from a Gaussian cloud, widening the cloud
/// whenever a batch of attempts fails to respect the separation.
fn place_centers(config: &SynthConfig, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    let g = config.n_latent_clusters as f64;
    let mut scale = config.cluster_separation * g.powf(1.0 / config.feature_dim as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(config.n_latent_clusters);
    let mut failures = 0;
    while centers.len() < config.n_latent_clusters {
        let cand: Vec<f64> = (0..config.feature_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect();
        if centers.iter().all(|c| euclidean(c, &cand) >= config.cluster_separation) {
            centers.push(cand);
            failures = 0;
        } else {
            failures += 1;
            if failures == 1000 {
                scale *= 1.5;
                failures = 0;
            }
        }
    }
    centers
}

/// Labeled blobs for metric-learning checks.
///
/// Each item's input is its class center plus noise in `signal_dim`
/// coordinates followed by `nuisance_dim` coordinates of class-independent
/// noise. A second, independently noised view of the class center plays
/// the role of a fixed pretrained feature for hybrid embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub signal_dim: usize,
    pub nuisance_dim: usize,
    pub separation: f64,
    pub signal_noise: f64,
    pub nuisance_std: f64,
    pub fixed_noise: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            n_classes: 10,
            per_class: 40,
            signal_dim: 4,
            nuisance_dim: 12,
            separation: 3.0,
            signal_noise: 1.0,
            nuisance_std: 3.0,
            fixed_noise: 1.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSet {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub inputs: Vec<Vec<f64>>,
    pub fixed: Vec<Vec<f64>>,
}

impl BlobSet {
    pub fn labeled(&self) -> Vec<(Vec<f64>, String)> {
        self.inputs.iter().cloned().zip(self.labels.iter().cloned()).collect()
    }
}

/// Draws `per_class` items per class for every seed offset in `splits`
/// (e.g. one train and one test set) around shared class centers.
pub fn labeled_blobs(config: &BlobConfig, splits: usize) -> Result<Vec<BlobSet>> {
    if config.n_classes < 2 || config.per_class == 0 || config.signal_dim == 0 {
        return Err(Error::InvalidInput("blobs need ≥ 2 classes, items and signal dims".into()));
    }
    let mut rng = seed::rng(config.seed);
    let centers = place_centers(
        &SynthConfig {
            n_latent_clusters: config.n_classes,
            feature_dim: config.signal_dim,
            cluster_separation: config.separation,
            ..SynthConfig::default()
        },
        &mut rng,
    );
    let mut normal = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    };
    let mut sets = Vec::with_capacity(splits);
    for s in 0..splits {
        let mut set = BlobSet {
            ids: Vec::new(),
            labels: Vec::new(),
            inputs: Vec::new(),
            fixed: Vec::new(),
        };
        for i in 0..config.per_class {
            for (c, center) in centers.iter().enumerate() {
                let mut input: Vec<f64> = center.iter().map(|m| m + normal(config.signal_noise)).collect();
                input.extend((0..config.nuisance_dim).map(|_| normal(config.nuisance_std)));
                set.fixed.push(center.iter().map(|m| m + normal(config.fixed_noise)).collect());
                set.inputs.push(input);
                set.labels.push(format!("c{c}"));
                set.ids.push(format!("s{s}_c{c}_{i:04}"));
            }
        }
        sets.push(set);
    }
    Ok(sets)
}
