//! Per-user preference profiles and the background cluster distribution.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::linalg::check_dim;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    /// Summed soft assignments over the user's images.
    pub raw_counts: Vec<f64>,
    /// `raw_counts / ‖raw_counts‖₁`, or uniform when the mass is zero.
    pub normalized: Vec<f64>,
    pub mass: f64,
    /// Set when no image reached any cluster and the uniform fallback applied.
    pub degenerate: bool,
}

impl UserProfile {
    pub fn k(&self) -> usize {
        self.raw_counts.len()
    }
}

fn sum_assignments<'a, I>(assignments: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = assignments.into_iter();
    let Some(first) = iter.next() else {
        return Err(Error::InsufficientData("no assignment vectors".into()));
    };
    let mut acc = first.to_vec();
    for a in iter {
        check_dim(acc.len(), a.len())?;
        for (s, v) in acc.iter_mut().zip(a) {
            *s += v;
        }
    }
    Ok(acc)
}

/// Aggregates a user's per-image assignment vectors.
pub fn build_profile<'a, I>(user_id: &str, assignments: I) -> Result<UserProfile>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let raw_counts = sum_assignments(assignments).map_err(|e| match e {
        Error::InsufficientData(m) => Error::User {
            user_id: user_id.to_string(),
            message: m,
        },
        other => other,
    })?;
    let mass: f64 = raw_counts.iter().sum();
    let k = raw_counts.len();
    let (normalized, degenerate) = if mass > 0.0 {
        (raw_counts.iter().map(|v| v / mass).collect(), false)
    } else {
        (vec![1.0 / k as f64; k], true)
    };
    Ok(UserProfile {
        user_id: user_id.to_string(),
        raw_counts,
        normalized,
        mass,
        degenerate,
    })
}

/// Unnormalized summed assignments over the background corpus, used as
/// prior pseudo-counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundDistribution {
    pub counts: Vec<f64>,
}

impl BackgroundDistribution {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

pub fn background_distribution<'a, I>(assignments: I) -> Result<BackgroundDistribution>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let counts = sum_assignments(assignments)?;
    if !counts.iter().any(|&c| c > 0.0) {
        return Err(Error::InsufficientData(
            "background assignments are all zero; the prior would be vacuous".into(),
        ));
    }
    Ok(BackgroundDistribution { counts })
}

/// Writes `user_id,Z,degenerate_flag,v1..vK` rows, preceded by any header comment lines.
pub fn write_profiles_csv<W: Write>(mut w: W, profiles: &[UserProfile], comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let k = profiles.first().map_or(0, UserProfile::k);
    write!(w, "user_id,Z,degenerate_flag")?;
    for i in 1..=k {
        write!(w, ",v{i}")?;
    }
    writeln!(w)?;
    for p in profiles {
        write!(w, "{},{},{}", p.user_id, p.mass, p.degenerate)?;
        for v in &p.normalized {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
