//! Fine-grained visual preference profiling.
//!
//! The pipeline runs in stages that each own a module:
//!
//! 1. [`corpus`]: load, filter and split per-user image collections.
//! 2. [`metric`]: learn an embedding with a contrastive pair loss and a
//!    terminal batch-normalization stage, optionally concatenated with a
//!    fixed feature source.
//! 3. [`cluster`]: k-means visual clusters on a background corpus and
//!    Gaussian-kernel soft assignment with a hard cutoff.
//! 4. [`profile`]: aggregate assignments into per-user distributions.
//! 5. [`compare`]: log-odds ratios with an informative Dirichlet prior,
//!    z-scores and the max-z pair statistic.
//! 6. [`evaluate`]: board retrieval scored by MRR, and clustering mAP.
//!
//! [`synth`] generates ground-truth corpora and holds naive reference
//! implementations used to cross-check the fast paths.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN too

pub mod cluster;
pub mod compare;
pub mod corpus;
mod error;
mod seed;
pub mod evaluate;
pub mod linalg;
pub mod metric;
pub mod pipeline;
pub mod profile;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
