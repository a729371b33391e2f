//! Pairwise preference differences: log-odds ratios with an informative
//! Dirichlet prior built from the background distribution, their z-scores,
//! and the max-|z| pair statistic.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::check_dim;
use crate::profile::{BackgroundDistribution, UserProfile};
use crate::{Error, Result};

/// Threshold on the max-|z| statistic for a pair to count as different at
/// the 95% level.
pub const SIGNIFICANCE_Z: f64 = 2.0;

/// Prior mass, in pseudo-counts, used when no explicit scale is given.
pub const DEFAULT_PRIOR_MASS: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Multiplier applied to the background counts.
    pub prior_scale: f64,
}

impl PriorConfig {
    pub fn new(prior_scale: f64) -> Result<Self> {
        if !(prior_scale > 0.0) || !prior_scale.is_finite() {
            return Err(Error::InvalidInput(format!(
                "prior_scale must be positive, got {prior_scale}"
            )));
        }
        Ok(PriorConfig { prior_scale })
    }

    /// Scale chosen so the prior contributes `mass` pseudo-counts in total.
    pub fn with_prior_mass(bg: &BackgroundDistribution, mass: f64) -> Result<Self> {
        let total = bg.total();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("background distribution has no mass".into()));
        }
        PriorConfig::new(mass / total)
    }
}

fn check_lengths(ci: &[f64], cj: &[f64], bg: &BackgroundDistribution) -> Result<()> {
    check_dim(bg.counts.len(), ci.len())?;
    check_dim(bg.counts.len(), cj.len())
}

fn smoothed(counts: &[f64], bg: &BackgroundDistribution, prior: &PriorConfig) -> Vec<f64> {
    counts
        .iter()
        .zip(&bg.counts)
        .map(|(c, b)| c + prior.prior_scale * b)
        .collect()
}

fn log_odds(counts: &[f64], bg: &BackgroundDistribution, prior: &PriorConfig) -> Result<Vec<f64>> {
    let s = smoothed(counts, bg, prior);
    let total: f64 = counts.iter().sum::<f64>() + prior.prior_scale * bg.total();
    s.iter()
        .enumerate()
        .map(|(k, &num)| {
            let rest = total - num;
            if !(num > 0.0) || !(rest > 0.0) {
                return Err(Error::Numeric(format!(
                    "cluster {k}: smoothed count {num} must lie strictly inside (0, {total})"
                )));
            }
            Ok(num.ln() - rest.ln())
        })
        .collect()
}

/// Per-cluster difference of smoothed log-odds between users `i` and `j`,
/// computed on unnormalized counts.
pub fn log_odds_delta(
    counts_i: &[f64],
    counts_j: &[f64],
    bg: &BackgroundDistribution,
    prior: &PriorConfig,
) -> Result<Vec<f64>> {
    check_lengths(counts_i, counts_j, bg)?;
    let li = log_odds(counts_i, bg, prior)?;
    let lj = log_odds(counts_j, bg, prior)?;
    Ok(li.iter().zip(&lj).map(|(a, b)| a - b).collect())
}

/// Approximate variance `1/(ṽᵢ(k)+αv̄(k)) + 1/(ṽⱼ(k)+αv̄(k))`.
pub fn delta_variance(
    counts_i: &[f64],
    counts_j: &[f64],
    bg: &BackgroundDistribution,
    prior: &PriorConfig,
) -> Result<Vec<f64>> {
    check_lengths(counts_i, counts_j, bg)?;
    let si = smoothed(counts_i, bg, prior);
    let sj = smoothed(counts_j, bg, prior);
    si.iter()
        .zip(&sj)
        .enumerate()
        .map(|(k, (a, b))| {
            if !(*a > 0.0) || !(*b > 0.0) {
                Err(Error::Numeric(format!("cluster {k}: zero smoothed count")))
            } else {
                Ok(1.0 / a + 1.0 / b)
            }
        })
        .collect()
}

pub fn z_scores(delta: &[f64], variance: &[f64]) -> Result<Vec<f64>> {
    check_dim(delta.len(), variance.len())?;
    delta
        .iter()
        .zip(variance)
        .enumerate()
        .map(|(k, (d, v))| {
            if !(*v > 0.0) {
                Err(Error::Numeric(format!("cluster {k}: nonpositive variance {v}")))
            } else {
                Ok(d / v.sqrt())
            }
        })
        .collect()
}

/// `max_k |z_k|` and the first cluster attaining it.
pub fn pairwise_max_z(z: &[f64]) -> Result<(f64, usize)> {
    if z.is_empty() {
        return Err(Error::InvalidInput("empty z vector".into()));
    }
    Ok(z
        .iter()
        .enumerate()
        .fold((0.0, 0), |best, (k, v)| if v.abs() > best.0 { (v.abs(), k) } else { best }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub user_i: String,
    pub user_j: String,
    pub delta: Vec<f64>,
    pub variance: Vec<f64>,
    pub z: Vec<f64>,
    pub z_max: f64,
    pub argmax_cluster: usize,
}

impl PairStats {
    pub fn significant(&self) -> bool {
        self.z_max >= SIGNIFICANCE_Z
    }
}

pub fn pair_stats(
    a: &UserProfile,
    b: &UserProfile,
    bg: &BackgroundDistribution,
    prior: &PriorConfig,
) -> Result<PairStats> {
    let wrap = |e: Error| Error::Pair {
        user_i: a.user_id.clone(),
        user_j: b.user_id.clone(),
        source: Box::new(e),
    };
    let delta = log_odds_delta(&a.raw_counts, &b.raw_counts, bg, prior).map_err(wrap)?;
    let variance = delta_variance(&a.raw_counts, &b.raw_counts, bg, prior).map_err(wrap)?;
    let z = z_scores(&delta, &variance).map_err(wrap)?;
    let (z_max, argmax_cluster) = pairwise_max_z(&z).map_err(wrap)?;
    Ok(PairStats {
        user_i: a.user_id.clone(),
        user_j: b.user_id.clone(),
        delta,
        variance,
        z,
        z_max,
        argmax_cluster,
    })
}

/// Statistics for every unordered pair, ordered by `(user_i, user_j)` with
/// `user_i < user_j`.
pub fn all_pairs_stats(
    profiles: &[UserProfile],
    bg: &BackgroundDistribution,
    prior: &PriorConfig,
) -> Result<Vec<PairStats>> {
    if profiles.len() < 2 {
        return Err(Error::InsufficientData("need at least two profiles to compare".into()));
    }
    let mut sorted: Vec<&UserProfile> = profiles.iter().collect();
    sorted.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let pairs: Vec<(usize, usize)> = (0..sorted.len())
        .flat_map(|i| (i + 1..sorted.len()).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| pair_stats(sorted[i], sorted[j], bg, prior))
        .collect()
}

/// Step points of the empirical CDF: each distinct value with the fraction
/// of values at or below it.
pub fn ecdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("ecdf of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("ecdf input contains NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        if i + 1 < n && sorted[i + 1] == *v {
            continue;
        }
        out.push((*v, (i + 1) as f64 / n as f64));
    }
    Ok(out)
}

pub fn write_pairs_csv<W: Write>(mut w: W, stats: &[PairStats], comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "user_i,user_j,z_max,argmax_cluster")?;
    for s in stats {
        writeln!(w, "{},{},{},{}", s.user_i, s.user_j, s.z_max, s.argmax_cluster)?;
    }
    Ok(())
}

pub fn write_ecdf_csv<W: Write>(mut w: W, steps: &[(f64, f64)], comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "value,fraction")?;
    for (v, f) in steps {
        writeln!(w, "{v},{f}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bg(v: &[f64]) -> BackgroundDistribution {
        BackgroundDistribution { counts: v.to_vec() }
    }

    #[test]
    fn identical_counts_zero_delta() {
        let b = bg(&[1.0, 2.0, 3.0]);
        let p = PriorConfig::new(0.5).unwrap();
        let d = log_odds_delta(&[4.0, 1.0, 2.0], &[4.0, 1.0, 2.0], &b, &p).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn antisymmetric() {
        let b = bg(&[1.0, 1.0, 2.0]);
        let p = PriorConfig::new(1.0).unwrap();
        let ci = [8.0, 2.0, 1.0];
        let cj = [2.0, 8.0, 0.5];
        let a = log_odds_delta(&ci, &cj, &b, &p).unwrap();
        let r = log_odds_delta(&cj, &ci, &b, &p).unwrap();
        for (x, y) in a.iter().zip(&r) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn all_mass_in_one_cluster_errors() {
        let b = bg(&[1.0, 0.0]);
        let p = PriorConfig::new(1.0).unwrap();
        assert!(log_odds_delta(&[5.0, 0.0], &[1.0, 0.0], &b, &p).is_err());
    }

    #[test]
    fn variance_values() {
        // α·v̄(k) = 0 for cluster 0
        let b = bg(&[0.0, 1.0]);
        let p = PriorConfig::new(1.0).unwrap();
        let v = delta_variance(&[1.0, 1.0], &[1.0, 3.0], &b, &p).unwrap();
        assert_eq!(v[0], 2.0);
        let bigger = delta_variance(&[2.0, 1.0], &[1.0, 3.0], &b, &p).unwrap();
        assert!(bigger[0] < v[0]);
        assert_eq!(v, delta_variance(&[1.0, 3.0], &[1.0, 1.0], &b, &p).unwrap());
        assert!(delta_variance(&[0.0, 1.0], &[1.0, 1.0], &b, &p).is_err());
    }

    #[test]
    fn z_and_max() {
        assert_eq!(z_scores(&[1.0], &[4.0]).unwrap(), vec![0.5]);
        assert_eq!(z_scores(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(z_scores(&[-1.0], &[4.0]).unwrap(), vec![-0.5]);
        assert!(z_scores(&[1.0], &[0.0]).is_err());
        assert_eq!(pairwise_max_z(&[-3.0, 1.0, 2.0]).unwrap(), (3.0, 0));
        assert_eq!(pairwise_max_z(&[0.0, 0.0]).unwrap().0, 0.0);
        assert_eq!(pairwise_max_z(&[2.0, -3.0, 1.0]).unwrap().0, 3.0);
        assert!(pairwise_max_z(&[]).is_err());
    }

    #[test]
    fn prior_mass_scaling() {
        let b = bg(&[10.0, 30.0]);
        let p = PriorConfig::with_prior_mass(&b, 100.0).unwrap();
        assert!((p.prior_scale * b.total() - 100.0).abs() < 1e-12);
        assert!(PriorConfig::new(0.0).is_err());
    }

    fn profile(id: &str, counts: &[f64]) -> UserProfile {
        crate::profile::build_profile(id, std::iter::once(counts)).unwrap()
    }

    #[test]
    fn pair_enumeration() {
        let b = bg(&[1.0, 1.0, 1.0]);
        let p = PriorConfig::new(1.0).unwrap();
        let profiles: Vec<UserProfile> = (0..10)
            .rev()
            .map(|i| profile(&format!("u{i}"), &[1.0 + i as f64, 2.0, 3.0]))
            .collect();
        let stats = all_pairs_stats(&profiles, &b, &p).unwrap();
        assert_eq!(stats.len(), 45);
        assert_eq!((stats[0].user_i.as_str(), stats[0].user_j.as_str()), ("u0", "u1"));
        assert!(stats.iter().all(|s| s.user_i < s.user_j));
        assert_eq!(all_pairs_stats(&profiles[..2], &b, &p).unwrap().len(), 1);
        assert!(all_pairs_stats(&profiles[..1], &b, &p).is_err());
    }

    #[test]
    fn pair_errors_name_users() {
        let b = bg(&[1.0, 0.0]);
        let p = PriorConfig::new(1.0).unwrap();
        let err = all_pairs_stats(&[profile("a", &[3.0, 0.0]), profile("b", &[1.0, 0.0])], &b, &p)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('a') && msg.contains('b'), "{msg}");
        assert_eq!(err.kind(), crate::ErrorKind::Numeric);
    }

    #[test]
    fn ecdf_steps() {
        assert_eq!(
            ecdf(&[3.0, 1.0, 2.0]).unwrap(),
            vec![(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0), (3.0, 1.0)]
        );
        assert_eq!(ecdf(&[5.0, 5.0, 5.0]).unwrap(), vec![(5.0, 1.0)]);
        assert_eq!(ecdf(&[1.0, 2.0, 2.0, 7.0]).unwrap().last().unwrap().1, 1.0);
        assert_eq!(ecdf(&[1.0, 2.0, 2.0, 7.0]).unwrap()[1], (2.0, 0.75));
        assert!(ecdf(&[]).is_err());
    }
}
