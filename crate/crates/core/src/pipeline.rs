//! Glue between the stages: per-image embedding, soft assignment and
//! profile construction straight from corpus records.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, estimate_bandwidth, kmeans_fit, soft_assign, ClusterModel};
use crate::corpus::{ImageRecord, UserCorpus};
use crate::metric::{hybrid_embed, EmbedderParams};
use crate::profile::{background_distribution, build_profile, BackgroundDistribution, UserProfile};
use crate::{Error, Result};

/// Maps one image record to the vector that gets clustered.
pub trait ImageEmbedder: Sync {
    fn embed(&self, record: &ImageRecord) -> Result<Vec<f64>>;
}

/// Uses the stored features unchanged (e.g. a corpus that was already embedded).
#[derive(Debug, Clone, Copy, Default)]
pub struct RawFeatures;

impl ImageEmbedder for RawFeatures {
    fn embed(&self, record: &ImageRecord) -> Result<Vec<f64>> {
        Ok(record.features.clone())
    }
}

/// Learned embedding only.
#[derive(Debug, Clone, Copy)]
pub struct Learned<'a>(pub &'a EmbedderParams);

impl ImageEmbedder for Learned<'_> {
    fn embed(&self, record: &ImageRecord) -> Result<Vec<f64>> {
        self.0.embed(&record.features)
    }
}

/// Where the fixed half of a hybrid embedding comes from.
#[derive(Debug, Clone, Default)]
pub enum FixedSource {
    /// The record's own input features.
    #[default]
    OwnFeatures,
    /// A separate per-image table keyed by `(user_id, image_id)`.
    Table(BTreeMap<(String, String), Vec<f64>>),
}

impl FixedSource {
    pub fn from_corpus(corpus: &UserCorpus) -> Self {
        FixedSource::Table(
            corpus
                .records()
                .map(|r| ((r.user_id.clone(), r.image_id.clone()), r.features.clone()))
                .collect(),
        )
    }
}

/// Learned embedding concatenated with a fixed per-image vector.
#[derive(Debug, Clone)]
pub struct Hybrid<'a> {
    pub params: &'a EmbedderParams,
    pub fixed: FixedSource,
}

impl ImageEmbedder for Hybrid<'_> {
    fn embed(&self, record: &ImageRecord) -> Result<Vec<f64>> {
        let fixed = match &self.fixed {
            FixedSource::OwnFeatures => Some(record.features.as_slice()),
            FixedSource::Table(t) => t
                .get(&(record.user_id.clone(), record.image_id.clone()))
                .map(Vec::as_slice),
        };
        hybrid_embed(self.params, fixed, &record.features).map_err(|e| match e {
            Error::InvalidInput(m) => Error::User {
                user_id: record.user_id.clone(),
                message: format!("image {}: {m}", record.image_id),
            },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    Raw,
    Learned,
    Hybrid,
}

impl FromStr for EmbeddingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(EmbeddingMode::Raw),
            "learned" => Ok(EmbeddingMode::Learned),
            "hybrid" => Ok(EmbeddingMode::Hybrid),
            other => Err(Error::InvalidInput(format!("unknown embedding mode `{other}`"))),
        }
    }
}

/// Replaces every record's features with its embedding.
pub fn embed_corpus(corpus: &UserCorpus, embedder: &dyn ImageEmbedder) -> Result<UserCorpus> {
    let embedded: Vec<Vec<f64>> = corpus
        .records()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| embedder.embed(r))
        .collect::<Result<_>>()?;
    let mut it = embedded.into_iter();
    corpus.map_features(|_| Ok(it.next().expect("one embedding per record")))
}

pub fn assign_records<'a, I>(records: I, embedder: &dyn ImageEmbedder, model: &ClusterModel) -> Result<Vec<Vec<f64>>>
where
    I: IntoIterator<Item = &'a ImageRecord>,
{
    let records: Vec<&ImageRecord> = records.into_iter().collect();
    records
        .par_iter()
        .map(|r| soft_assign(&embedder.embed(r)?, model))
        .collect()
}

pub fn profile_records<'a, I>(
    user_id: &str,
    records: I,
    embedder: &dyn ImageEmbedder,
    model: &ClusterModel,
) -> Result<UserProfile>
where
    I: IntoIterator<Item = &'a ImageRecord>,
{
    let assignments = assign_records(records, embedder, model)?;
    build_profile(user_id, assignments.iter().map(Vec::as_slice))
}

/// One profile per user over all of the user's images, in user-id order.
pub fn profile_corpus(
    corpus: &UserCorpus,
    embedder: &dyn ImageEmbedder,
    model: &ClusterModel,
) -> Result<Vec<UserProfile>> {
    let users: Vec<(&str, &[ImageRecord])> = corpus.users().collect();
    users
        .par_iter()
        .map(|(id, seq)| profile_records(id, seq.iter(), embedder, model))
        .collect()
}

pub fn corpus_background(
    background: &UserCorpus,
    embedder: &dyn ImageEmbedder,
    model: &ClusterModel,
) -> Result<BackgroundDistribution> {
    let assignments = assign_records(background.records(), embedder, model)?;
    background_distribution(assignments.iter().map(Vec::as_slice))
}

/// How the soft-assignment cutoff δ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "CutoffRepr", into = "CutoffRepr")]
pub enum CutoffRule {
    /// δ = m, the contrastive margin of the embedder.
    #[default]
    Margin,
    /// δ = α, the kernel bandwidth; useful when the clustered space is not
    /// the margin-scaled learned space (raw or hybrid features).
    Bandwidth,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CutoffRepr {
    Name(String),
    Value(f64),
}

impl From<CutoffRule> for CutoffRepr {
    fn from(rule: CutoffRule) -> Self {
        match rule {
            CutoffRule::Value(v) => CutoffRepr::Value(v),
            named => CutoffRepr::Name(named.to_string()),
        }
    }
}

impl TryFrom<CutoffRepr> for CutoffRule {
    type Error = Error;
    fn try_from(r: CutoffRepr) -> Result<Self> {
        match r {
            CutoffRepr::Name(s) => s.parse(),
            CutoffRepr::Value(v) => Ok(CutoffRule::Value(v)),
        }
    }
}

impl FromStr for CutoffRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(CutoffRule::Margin),
            "bandwidth" => Ok(CutoffRule::Bandwidth),
            other => other
                .parse::<f64>()
                .map(CutoffRule::Value)
                .map_err(|_| Error::InvalidInput(format!("cutoff must be `margin`, `bandwidth` or a number, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for CutoffRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CutoffRule::Margin => f.write_str("margin"),
            CutoffRule::Bandwidth => f.write_str("bandwidth"),
            CutoffRule::Value(v) => write!(f, "{v}"),
        }
    }
}

impl CutoffRule {
    pub fn resolve(self, margin: f64, bandwidth_sq: f64) -> f64 {
        match self {
            CutoffRule::Margin => margin,
            CutoffRule::Bandwidth => bandwidth_sq.sqrt(),
            CutoffRule::Value(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iter: usize,
    pub cutoff: CutoffRule,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: cluster::DEFAULT_K,
            max_iter: cluster::DEFAULT_MAX_ITER,
            cutoff: CutoffRule::Margin,
            seed: 0,
        }
    }
}

/// Fits centers and bandwidth on the background corpus. `margin` is the
/// embedder's contrastive margin (1.0 when clustering raw features).
pub fn fit_clusters(
    background: &UserCorpus,
    embedder: &dyn ImageEmbedder,
    config: &ClusterConfig,
    margin: f64,
) -> Result<ClusterModel> {
    let vectors: Vec<Vec<f64>> = background
        .records()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| embedder.embed(r))
        .collect::<Result<_>>()?;
    let fit = kmeans_fit(&vectors, config.k, config.seed, config.max_iter)?;
    let bandwidth_sq = estimate_bandwidth(&vectors)?;
    let cutoff = config.cutoff.resolve(margin, bandwidth_sq);
    let mut model = ClusterModel::new(fit.centers, bandwidth_sq, cutoff, config.seed)?;
    model.background_users = background.user_ids().map(str::to_string).collect();
    Ok(model)
}

/// `(features, label)` pairs for every labeled record.
pub fn labeled_examples(corpus: &UserCorpus) -> Vec<(Vec<f64>, String)> {
    corpus
        .records()
        .filter_map(|r| r.label.as_ref().map(|l| (r.features.clone(), l.clone())))
        .collect()
}
