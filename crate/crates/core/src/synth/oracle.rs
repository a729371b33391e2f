//! Naive reference implementations: literal formula transcriptions with
//! plain loops and no algebraic shortcuts. They exist to cross-check the
//! production paths and must not call into them (the finite-difference
//! gradient reuses only the forward loss).

#![allow(clippy::needless_range_loop)] // index loops mirror the formulas on purpose

use crate::metric::{batch_loss, EmbedderParams, Gradients, PairBatch};
use crate::{Error, Result};

/// `(1/n²) Σᵢ Σⱼ ‖dᵢ − dⱼ‖²` by double loop.
pub fn bandwidth_pairwise(points: &[Vec<f64>]) -> f64 {
    let n = points.len() as f64;
    let mut total = 0.0;
    for a in points {
        for b in points {
            let mut s = 0.0;
            for k in 0..a.len() {
                s += (a[k] - b[k]) * (a[k] - b[k]);
            }
            total += s;
        }
    }
    total / (n * n)
}

pub fn soft_assign(d: &[f64], centers: &[Vec<f64>], bandwidth_sq: f64, cutoff: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for r in centers {
        let mut s = 0.0;
        for k in 0..d.len() {
            s += (d[k] - r[k]).powi(2);
        }
        if s.sqrt() <= cutoff {
            out.push((-(1.0 / (2.0 * bandwidth_sq)) * s).exp());
        } else {
            out.push(0.0);
        }
    }
    out
}

/// `(ṽ, v)` for a user's assignment vectors.
pub fn profile(assignments: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = assignments[0].len();
    let mut raw = vec![0.0; k];
    for c in assignments {
        for i in 0..k {
            raw[i] += c[i];
        }
    }
    let mut l1 = 0.0;
    for v in &raw {
        l1 += v.abs();
    }
    let norm = raw.iter().map(|v| v / l1).collect();
    (raw, norm)
}

pub fn log_odds_delta(ci: &[f64], cj: &[f64], bg: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..bg.len() {
        let mut sum_i = 0.0;
        let mut sum_j = 0.0;
        let mut sum_bg = 0.0;
        for kk in 0..bg.len() {
            sum_i += ci[kk];
            sum_j += cj[kk];
            sum_bg += bg[kk];
        }
        let term_i = (ci[k] + alpha * bg[k]) / (sum_i + alpha * sum_bg - (ci[k] + alpha * bg[k]));
        let term_j = (cj[k] + alpha * bg[k]) / (sum_j + alpha * sum_bg - (cj[k] + alpha * bg[k]));
        out.push(term_i.ln() - term_j.ln());
    }
    out
}

pub fn delta_variance(ci: &[f64], cj: &[f64], bg: &[f64], alpha: f64) -> Vec<f64> {
    (0..bg.len())
        .map(|k| 1.0 / (ci[k] + alpha * bg[k]) + 1.0 / (cj[k] + alpha * bg[k]))
        .collect()
}

pub fn z_scores(ci: &[f64], cj: &[f64], bg: &[f64], alpha: f64) -> Vec<f64> {
    let d = log_odds_delta(ci, cj, bg, alpha);
    let v = delta_variance(ci, cj, bg, alpha);
    (0..d.len()).map(|k| d[k] / v[k].sqrt()).collect()
}

/// AP by re-sorting all other items and counting relevant items in the top
/// `k` neighbours for every `k`.
pub fn average_precision(query: usize, vectors: &[Vec<f64>], labels: &[String], ids: &[String]) -> Option<f64> {
    let mut order: Vec<(f64, usize)> = Vec::new();
    for i in 0..vectors.len() {
        if i == query {
            continue;
        }
        let mut s = 0.0;
        for k in 0..vectors[i].len() {
            s += (vectors[i][k] - vectors[query][k]).powi(2);
        }
        order.push((s.sqrt(), i));
    }
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(ids[a.1].cmp(&ids[b.1])));
    let total_relevant = order.iter().filter(|(_, i)| labels[*i] == labels[query]).count();
    if total_relevant == 0 {
        return None;
    }
    let mut sum = 0.0;
    for k in 1..=order.len() {
        if labels[order[k - 1].1] != labels[query] {
            continue;
        }
        let hits = order[..k].iter().filter(|(_, i)| labels[*i] == labels[query]).count();
        sum += hits as f64 / k as f64;
    }
    Some(sum / total_relevant as f64)
}

/// Pessimistic rank by a full sort in which the true candidate loses ties.
pub fn rank(query: &[f64], candidates: &[Vec<f64>], true_index: usize) -> usize {
    let mut order: Vec<(f64, bool, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d: f64 = c.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            (d, i == true_index, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    order.iter().position(|o| o.2 == true_index).unwrap() + 1
}

pub fn mrr(ranks: &[usize]) -> f64 {
    let mut s = 0.0;
    for r in ranks {
        s += 1.0 / *r as f64;
    }
    s / ranks.len() as f64
}

/// Central finite differences of the mean batch loss for every parameter.
pub fn finite_difference_gradients(params: &EmbedderParams, batch: &PairBatch, h: f64) -> Result<Gradients> {
    let mut grads: Vec<_> = params.layers.clone();
    let mut probe = params.clone();
    for l in 0..params.layers.len() {
        for i in 0..params.layers[l].weights.data.len() {
            let orig = params.layers[l].weights.data[i];
            probe.layers[l].weights.data[i] = orig + h;
            let up = batch_loss(&probe, batch)?;
            probe.layers[l].weights.data[i] = orig - h;
            let down = batch_loss(&probe, batch)?;
            probe.layers[l].weights.data[i] = orig;
            grads[l].weights.data[i] = (up - down) / (2.0 * h);
        }
        for i in 0..params.layers[l].bias.len() {
            let orig = params.layers[l].bias[i];
            probe.layers[l].bias[i] = orig + h;
            let up = batch_loss(&probe, batch)?;
            probe.layers[l].bias[i] = orig - h;
            let down = batch_loss(&probe, batch)?;
            probe.layers[l].bias[i] = orig;
            grads[l].bias[i] = (up - down) / (2.0 * h);
        }
    }
    Ok(Gradients { layers: grads })
}

/// Inputs for [`oracle_eval`].
#[derive(Debug, Clone)]
pub enum OracleInput {
    Points(Vec<Vec<f64>>),
    SoftAssign {
        d: Vec<f64>,
        centers: Vec<Vec<f64>>,
        bandwidth_sq: f64,
        cutoff: f64,
    },
    Counts {
        counts_i: Vec<f64>,
        counts_j: Vec<f64>,
        background: Vec<f64>,
        prior_scale: f64,
    },
    Retrieval {
        query: usize,
        vectors: Vec<Vec<f64>>,
        labels: Vec<String>,
        ids: Vec<String>,
    },
    Ranks(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleOutput {
    Scalar(f64),
    Vector(Vec<f64>),
    Missing,
}

/// Dispatches a named reference computation.
pub fn oracle_eval(op: &str, input: &OracleInput) -> Result<OracleOutput> {
    use OracleInput as I;
    use OracleOutput as O;
    Ok(match (op, input) {
        ("bandwidth", I::Points(p)) => O::Scalar(bandwidth_pairwise(p)),
        ("soft_assign", I::SoftAssign { d, centers, bandwidth_sq, cutoff }) => {
            O::Vector(soft_assign(d, centers, *bandwidth_sq, *cutoff))
        }
        ("profile", I::Points(p)) => O::Vector(profile(p).1),
        ("log_odds", I::Counts { counts_i, counts_j, background, prior_scale }) => {
            O::Vector(log_odds_delta(counts_i, counts_j, background, *prior_scale))
        }
        ("variance", I::Counts { counts_i, counts_j, background, prior_scale }) => {
            O::Vector(delta_variance(counts_i, counts_j, background, *prior_scale))
        }
        ("z_scores", I::Counts { counts_i, counts_j, background, prior_scale }) => {
            O::Vector(z_scores(counts_i, counts_j, background, *prior_scale))
        }
        ("average_precision", I::Retrieval { query, vectors, labels, ids }) => {
            average_precision(*query, vectors, labels, ids).map_or(O::Missing, O::Scalar)
        }
        ("mrr", I::Ranks(r)) => O::Scalar(mrr(r)),
        (
            "bandwidth" | "soft_assign" | "profile" | "log_odds" | "variance" | "z_scores"
            | "average_precision" | "mrr",
            _,
        ) => return Err(Error::InvalidInput(format!("input does not fit oracle `{op}`"))),
        _ => return Err(Error::InvalidInput(format!("unsupported oracle `{op}`"))),
    })
}
