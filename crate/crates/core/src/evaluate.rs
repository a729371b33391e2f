//! Quantitative harnesses: board retrieval scored by mean reciprocal rank,
//! and same-label retrieval scored by mean average precision.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::corpus::{chronological_split, SplitSpec, UserCorpus};
use crate::linalg::{check_dim, euclidean};
use crate::pipeline::{profile_records, ImageEmbedder};
use crate::profile::UserProfile;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingOutcome {
    pub user_id: String,
    /// 1-based position of the user's own test profile.
    pub rank: usize,
    pub n_candidates: usize,
}

impl RankingOutcome {
    pub fn reciprocal(&self) -> f64 {
        1.0 / self.rank as f64
    }
}

/// Ranks `candidates` by Euclidean distance between normalized profiles.
///
/// Ties are pessimistic: every other candidate at the true candidate's
/// distance is ranked ahead of it.
pub fn rank_candidates(query: &UserProfile, candidates: &[UserProfile], true_id: &str) -> Result<RankingOutcome> {
    let truth = candidates
        .iter()
        .find(|c| c.user_id == true_id)
        .ok_or_else(|| Error::User {
            user_id: true_id.to_string(),
            message: "true candidate missing from candidate set".into(),
        })?;
    check_dim(query.k(), truth.k())?;
    let d_true = euclidean(&query.normalized, &truth.normalized);
    let mut ahead = 0;
    for c in candidates {
        check_dim(query.k(), c.k())?;
        if c.user_id == true_id {
            continue;
        }
        if euclidean(&query.normalized, &c.normalized) <= d_true {
            ahead += 1;
        }
    }
    Ok(RankingOutcome {
        user_id: query.user_id.clone(),
        rank: ahead + 1,
        n_candidates: candidates.len(),
    })
}

pub fn mrr(outcomes: &[RankingOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::InvalidInput("mrr of no outcomes".into()));
    }
    Ok(outcomes.iter().map(RankingOutcome::reciprocal).sum::<f64>() / outcomes.len() as f64)
}

/// Expected MRR of a uniformly random ranking over `n` candidates, `H_n / n`.
pub fn random_mrr_baseline(n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (1..=n).map(|i| 1.0 / i as f64).sum::<f64>() / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub train_size: usize,
    pub mrr: f64,
    pub random_baseline: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub rows: Vec<PredictionRow>,
    /// Users left out, with the reason.
    pub excluded: Vec<(String, String)>,
}

/// Board-retrieval task: each user's train-side profile must pick out the
/// same user's test-side profile among all users' test profiles.
///
/// `split.train_size` is ignored; every entry of `train_sizes` is run with
/// the same subsample and test half.
pub fn run_prediction_task(
    corpus: &UserCorpus,
    split: &SplitSpec,
    embedder: &dyn ImageEmbedder,
    model: &ClusterModel,
    train_sizes: &[usize],
) -> Result<PredictionReport> {
    if train_sizes.is_empty() {
        return Err(Error::InvalidInput("no train sizes given".into()));
    }
    for &t in train_sizes {
        SplitSpec { train_size: t, ..*split }.validate()?;
    }
    let max_train = *train_sizes.iter().max().expect("non-empty");
    let probe = SplitSpec { train_size: max_train, ..*split };

    let mut excluded = Vec::new();
    let mut usable = Vec::new();
    for (uid, seq) in corpus.users() {
        match chronological_split(seq, &probe) {
            Ok(s) => usable.push((uid, s)),
            Err(e) => excluded.push((uid.to_string(), e.to_string())),
        }
    }
    if usable.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} users satisfy the split; need at least 2",
            usable.len()
        )));
    }

    let test_profiles: Vec<UserProfile> = usable
        .par_iter()
        .map(|(uid, s)| profile_records(uid, s.test.iter().copied(), embedder, model))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(train_sizes.len());
    for &t in train_sizes {
        let outcomes: Vec<RankingOutcome> = usable
            .par_iter()
            .map(|(uid, s)| {
                let q = profile_records(uid, s.train[..t].iter().copied(), embedder, model)?;
                rank_candidates(&q, &test_profiles, uid)
            })
            .collect::<Result<_>>()?;
        rows.push(PredictionRow {
            train_size: t,
            mrr: mrr(&outcomes)?,
            random_baseline: random_mrr_baseline(usable.len()),
            n_users: usable.len(),
        });
    }
    Ok(PredictionReport { rows, excluded })
}

/// An embedded, labeled item for mAP evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub id: String,
    pub label: String,
    pub vector: Vec<f64>,
}

/// Mean of precision@r over the ranks `r` holding relevant items.
pub fn average_precision_of_ranking(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// AP of item `query` retrieving same-label items among all other items,
/// ranked by ascending Euclidean distance with ties broken by id.
///
/// Returns `None` when no other item shares the query's label.
pub fn average_precision(query: usize, items: &[LabeledItem]) -> Result<Option<f64>> {
    let q = items
        .get(query)
        .ok_or_else(|| Error::InvalidInput(format!("query index {query} out of range")))?;
    let mut ranked: Vec<(f64, &LabeledItem)> = items
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != query)
        .map(|(_, it)| {
            check_dim(q.vector.len(), it.vector.len())?;
            Ok((euclidean(&q.vector, &it.vector), it))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.id.cmp(&b.1.id))
    });
    let relevance: Vec<bool> = ranked.iter().map(|(_, it)| it.label == q.label).collect();
    Ok(average_precision_of_ranking(&relevance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_query: Vec<(String, f64)>,
    /// Queries without any same-label item.
    pub excluded: Vec<String>,
    pub map: f64,
}

pub fn mean_average_precision(items: &[LabeledItem]) -> Result<MapReport> {
    let labels: std::collections::BTreeSet<&str> = items.iter().map(|i| i.label.as_str()).collect();
    if labels.len() < 2 {
        return Err(Error::InsufficientData("mAP needs at least two labels".into()));
    }
    let aps: Vec<Option<f64>> = (0..items.len())
        .into_par_iter()
        .map(|q| average_precision(q, items))
        .collect::<Result<_>>()?;
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for (item, ap) in items.iter().zip(aps) {
        match ap {
            Some(v) => per_query.push((item.id.clone(), v)),
            None => excluded.push(item.id.clone()),
        }
    }
    if per_query.is_empty() {
        return Err(Error::InsufficientData("no query has a same-label item".into()));
    }
    let map = per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64;
    Ok(MapReport {
        per_query,
        excluded,
        map,
    })
}

pub fn write_prediction_csv<W: Write>(mut w: W, report: &PredictionReport, comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "train_size,mrr,random_baseline")?;
    for r in &report.rows {
        writeln!(w, "{},{},{}", r.train_size, r.mrr, r.random_baseline)?;
    }
    Ok(())
}

pub fn write_map_csv<W: Write>(mut w: W, report: &MapReport, comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "query_id,ap")?;
    for (id, ap) in &report.per_query {
        writeln!(w, "{id},{ap}")?;
    }
    writeln!(w, "mAP,{}", report.map)?;
    Ok(())
}
