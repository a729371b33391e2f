//! Contrastive distance-metric learning.
//!
//! The embedder is a small feedforward network: affine layers with rectifier
//! activations between them, a linear last layer, and a terminal
//! normalization stage without learnable scale or shift. In training mode
//! the normalization uses statistics of the current batch; at inference it
//! uses exponential-moving-average running statistics.
//!
//! Pairs are scored with the contrastive loss
//! `½·l·D² + ½·(1−l)·max(0, m−D)²` where `D` is the Euclidean distance
//! between the two embeddings and `l = 1` marks a similar pair.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{check_dim, euclidean, Matrix};
use crate::{seed, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows
    }

    fn zeros_like(&self) -> Self {
        DenseLayer {
            weights: Matrix::zeros(self.weights.rows, self.weights.cols),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    pub layers: Vec<DenseLayer>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub norm_epsilon: f64,
    /// Weight of the previous running value in the moving average.
    pub norm_momentum: f64,
    pub margin: f64,
}

pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_NORM_EPSILON: f64 = 1e-5;
pub const DEFAULT_NORM_MOMENTUM: f64 = 0.9;

impl EmbedderParams {
    /// He-normal weights, zero biases, running mean 0 and variance 1.
    ///
    /// `dims` lists every layer width starting with the input dimension, so
    /// `[F, H, E]` is a two-layer net.
    pub fn init(dims: &[usize], margin: f64, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "layer dims {dims:?}: need at least input and output, all positive"
            )));
        }
        let mut rng = seed::rng(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let scale = (2.0 / inp as f64).sqrt();
                let data = (0..inp * out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect::<Vec<f64>>();
                DenseLayer {
                    weights: Matrix {
                        rows: out,
                        cols: inp,
                        data,
                    },
                    bias: vec![0.0; out],
                }
            })
            .collect();
        let out = dims[dims.len() - 1];
        let params = EmbedderParams {
            layers,
            running_mean: vec![0.0; out],
            running_var: vec![1.0; out],
            norm_epsilon: DEFAULT_NORM_EPSILON,
            norm_momentum: DEFAULT_NORM_MOMENTUM,
            margin,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::InvalidInput("embedder has no layers".into()));
        };
        for w in self.layers.windows(2) {
            check_dim(w[0].output_dim(), w[1].input_dim())?;
        }
        for l in &self.layers {
            check_dim(l.output_dim(), l.bias.len())?;
            check_dim(l.weights.rows * l.weights.cols, l.weights.data.len())?;
        }
        check_dim(last.output_dim(), self.running_mean.len())?;
        check_dim(last.output_dim(), self.running_var.len())?;
        if self.running_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("running variances must be ≥ 0".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidInput(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::InvalidInput("norm epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::output_dim))
            .collect()
    }

    /// Inference-mode embedding of one input.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), input.len())?;
        let mut a = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.mul_vec(&a);
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            if i < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        for ((v, mean), var) in a.iter_mut().zip(&self.running_mean).zip(&self.running_var) {
            *v = (*v - mean) / (var + self.norm_epsilon).sqrt();
        }
        Ok(a)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            layer_dims: self.layer_dims(),
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    weights: l.weights.data.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            epsilon: self.norm_epsilon,
            momentum: self.norm_momentum,
            margin: self.margin,
            seed: None,
            config_digest: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        if ck.layer_dims.len() != ck.layers.len() + 1 {
            return Err(Error::InvalidInput(
                "layer_dims must have one more entry than layers".into(),
            ));
        }
        let layers = ck
            .layers
            .iter()
            .zip(ck.layer_dims.windows(2))
            .map(|(l, d)| {
                check_dim(d[0] * d[1], l.weights.len())?;
                Ok(DenseLayer {
                    weights: Matrix {
                        rows: d[1],
                        cols: d[0],
                        data: l.weights.clone(),
                    },
                    bias: l.bias.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = EmbedderParams {
            layers,
            running_mean: ck.running_mean.clone(),
            running_var: ck.running_var.clone(),
            norm_epsilon: ck.epsilon,
            norm_momentum: ck.momentum,
            margin: ck.margin,
        };
        params.validate()?;
        Ok(params)
    }
}

/// On-disk checkpoint; weights are row-major `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub layers: Vec<CheckpointLayer>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
    pub margin: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the statistics of the batch being embedded.
    TrainBatch,
    /// Normalize with the running statistics.
    Inference,
}

/// Embeds a batch of inputs.
pub fn forward_embed(
    params: &EmbedderParams,
    inputs: &[&[f64]],
    mode: NormMode,
) -> Result<Vec<Vec<f64>>> {
    match mode {
        NormMode::Inference => inputs.iter().map(|x| params.embed(x)).collect(),
        NormMode::TrainBatch => {
            let cache = forward_train(params, inputs)?;
            Ok((0..cache.normalized.rows)
                .map(|r| cache.normalized.row(r).to_vec())
                .collect())
        }
    }
}

struct ForwardCache {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` is the rectified output of layer `l-1`.
    inputs: Vec<Matrix>,
    /// Pre-activations of every layer.
    pre: Vec<Matrix>,
    normalized: Matrix,
    batch_mean: Vec<f64>,
    /// Biased (population) batch variance.
    batch_var: Vec<f64>,
    inv_std: Vec<f64>,
}

fn forward_train(params: &EmbedderParams, inputs: &[&[f64]]) -> Result<ForwardCache> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let n = inputs.len();
    let mut a = Matrix::zeros(n, params.input_dim());
    for (r, x) in inputs.iter().enumerate() {
        check_dim(params.input_dim(), x.len())?;
        a.row_mut(r).copy_from_slice(x);
    }
    let last = params.layers.len() - 1;
    let mut cache_in = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = Matrix::zeros(n, layer.output_dim());
        for r in 0..n {
            let zr = layer.weights.mul_vec(a.row(r));
            for ((o, v), b) in z.row_mut(r).iter_mut().zip(zr).zip(&layer.bias) {
                *o = v + b;
            }
        }
        let next = if i < last {
            let mut h = z.clone();
            h.data.iter_mut().for_each(|v| *v = v.max(0.0));
            Some(h)
        } else {
            None
        };
        cache_in.push(a);
        pre.push(z.clone());
        a = next.unwrap_or(z);
    }

    let out_dim = params.output_dim();
    let nf = n as f64;
    let mut batch_mean = vec![0.0; out_dim];
    for r in 0..n {
        for (m, v) in batch_mean.iter_mut().zip(a.row(r)) {
            *m += v;
        }
    }
    batch_mean.iter_mut().for_each(|m| *m /= nf);
    let mut batch_var = vec![0.0; out_dim];
    for r in 0..n {
        for ((s, v), m) in batch_var.iter_mut().zip(a.row(r)).zip(&batch_mean) {
            *s += (v - m) * (v - m);
        }
    }
    batch_var.iter_mut().for_each(|s| *s /= nf);
    let inv_std: Vec<f64> = batch_var
        .iter()
        .map(|v| 1.0 / (v + params.norm_epsilon).sqrt())
        .collect();
    let mut normalized = a;
    for r in 0..n {
        for ((v, m), s) in normalized.row_mut(r).iter_mut().zip(&batch_mean).zip(&inv_std) {
            *v = (*v - m) * s;
        }
    }
    Ok(ForwardCache {
        inputs: cache_in,
        pre,
        normalized,
        batch_mean,
        batch_var,
        inv_std,
    })
}

/// Gradient of the batch objective with respect to every layer, in the
/// same shape as [`EmbedderParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data.iter().chain(&l.bias))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn backward(params: &EmbedderParams, cache: &ForwardCache, d_out: &Matrix) -> Gradients {
    let n = d_out.rows;
    let nf = n as f64;
    let e = d_out.cols;

    // Normalization without scale/shift:
    // dz = inv_std · (dx̂ − mean(dx̂) − x̂ · mean(dx̂ ∘ x̂)), column-wise.
    let mut mean_d = vec![0.0; e];
    let mut mean_dx = vec![0.0; e];
    for r in 0..n {
        for c in 0..e {
            let d = d_out[(r, c)];
            mean_d[c] += d;
            mean_dx[c] += d * cache.normalized[(r, c)];
        }
    }
    mean_d.iter_mut().for_each(|v| *v /= nf);
    mean_dx.iter_mut().for_each(|v| *v /= nf);
    let mut dz = Matrix::zeros(n, e);
    for r in 0..n {
        for c in 0..e {
            dz[(r, c)] = cache.inv_std[c]
                * (d_out[(r, c)] - mean_d[c] - cache.normalized[(r, c)] * mean_dx[c]);
        }
    }

    let mut grads: Vec<DenseLayer> = params.layers.iter().map(DenseLayer::zeros_like).collect();
    for l in (0..params.layers.len()).rev() {
        let a_prev = &cache.inputs[l];
        let g = &mut grads[l];
        for r in 0..n {
            let dzr = dz.row(r);
            let ar = a_prev.row(r);
            for (o, d) in dzr.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                for (w, x) in g.weights.row_mut(o).iter_mut().zip(ar) {
                    *w += d * x;
                }
            }
        }
        if l > 0 {
            let w = &params.layers[l].weights;
            let below = &cache.pre[l - 1];
            let mut dprev = Matrix::zeros(n, w.cols);
            for r in 0..n {
                let da = w.mul_vec_transposed(dz.row(r));
                for ((o, v), z) in dprev.row_mut(r).iter_mut().zip(da).zip(below.row(r)) {
                    *o = if *z > 0.0 { v } else { 0.0 };
                }
            }
            dz = dprev;
        }
    }
    Gradients { layers: grads }
}

/// `½·l·D² + ½·(1−l)·max(0, m−D)²`
pub fn contrastive_loss(ex: &[f64], ey: &[f64], similar: bool, margin: f64) -> f64 {
    pair_loss(euclidean(ex, ey), similar, margin)
}

fn pair_loss(d: f64, similar: bool, margin: f64) -> f64 {
    if similar {
        0.5 * d * d
    } else {
        let h = (margin - d).max(0.0);
        0.5 * h * h
    }
}

/// Loss and its gradient with respect to `ex` (the gradient for `ey` is the negation).
fn pair_loss_grad(ex: &[f64], ey: &[f64], similar: bool, margin: f64) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = ex.iter().zip(ey).map(|(a, b)| a - b).collect();
    let d = crate::linalg::squared_norm(&diff).sqrt();
    let loss = pair_loss(d, similar, margin);
    let coef = if similar {
        1.0
    } else if d < margin && d > 0.0 {
        -(margin - d) / d
    } else {
        // Satisfied margin, or the non-differentiable point D = 0.
        0.0
    };
    (loss, diff.into_iter().map(|v| coef * v).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub similar: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn from_indices(labeled: &[(Vec<f64>, String)], idx: &[IndexPair]) -> Self {
        PairBatch {
            pairs: idx
                .iter()
                .map(|p| Pair {
                    x: labeled[p.a].0.clone(),
                    y: labeled[p.b].0.clone(),
                    similar: p.similar,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossAndGradients {
    /// Mean pair loss over the batch.
    pub loss: f64,
    pub gradients: Gradients,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Mean contrastive loss over `batch` and its exact gradient.
///
/// Both sides of every pair are embedded as one normalization batch (`x`
/// rows followed by `y` rows), so the gradient includes the dependence of
/// the batch statistics on every input.
pub fn loss_gradients(params: &EmbedderParams, batch: &PairBatch) -> Result<LossAndGradients> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty pair batch".into()));
    }
    let b = batch.len();
    let inputs: Vec<&[f64]> = batch
        .pairs
        .iter()
        .map(|p| p.x.as_slice())
        .chain(batch.pairs.iter().map(|p| p.y.as_slice()))
        .collect();
    let cache = forward_train(params, &inputs)?;
    let mut d_out = Matrix::zeros(2 * b, params.output_dim());
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, p) in batch.pairs.iter().enumerate() {
        let (loss, g) = pair_loss_grad(
            cache.normalized.row(i),
            cache.normalized.row(b + i),
            p.similar,
            params.margin,
        );
        total += loss;
        for (c, v) in g.iter().enumerate() {
            d_out[(i, c)] = v * inv_b;
            d_out[(b + i, c)] = -v * inv_b;
        }
    }
    let gradients = backward(params, &cache, &d_out);
    Ok(LossAndGradients {
        loss: total * inv_b,
        gradients,
        batch_mean: cache.batch_mean,
        batch_var: cache.batch_var,
    })
}

/// Mean training-mode loss of `batch` without gradients.
pub fn batch_loss(params: &EmbedderParams, batch: &PairBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty pair batch".into()));
    }
    let b = batch.len();
    let inputs: Vec<&[f64]> = batch
        .pairs
        .iter()
        .map(|p| p.x.as_slice())
        .chain(batch.pairs.iter().map(|p| p.y.as_slice()))
        .collect();
    let cache = forward_train(params, &inputs)?;
    let total: f64 = batch
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            contrastive_loss(
                cache.normalized.row(i),
                cache.normalized.row(b + i),
                p.similar,
                params.margin,
            )
        })
        .sum();
    Ok(total / b as f64)
}

/// Indices into a labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexPair {
    pub a: usize,
    pub b: usize,
    pub similar: bool,
}

/// Draws `n_similar` pairs uniformly from same-label pairs and
/// `n_dissimilar` uniformly from cross-label pairs, then shuffles them.
pub fn sample_pairs<L: Ord>(
    labels: &[L],
    n_similar: usize,
    n_dissimilar: usize,
    seed: u64,
) -> Result<Vec<IndexPair>> {
    let mut groups: BTreeMap<&L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(n_similar + n_dissimilar);

    if n_similar > 0 {
        // Weight each label by its number of unordered pairs so the draw is
        // uniform over all same-label pairs.
        let weights: Vec<f64> = groups
            .iter()
            .map(|g| (g.len() * g.len().saturating_sub(1) / 2) as f64)
            .collect();
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            return Err(Error::InsufficientData(
                "similar pairs requested but no label has two members".into(),
            ));
        }
        let dist = rand_distr::weighted::WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for _ in 0..n_similar {
            let g = &groups[dist.sample(&mut rng)];
            let i = rng.random_range(0..g.len());
            let mut j = rng.random_range(0..g.len() - 1);
            if j >= i {
                j += 1;
            }
            out.push(IndexPair {
                a: g[i],
                b: g[j],
                similar: true,
            });
        }
    }

    if n_dissimilar > 0 {
        if groups.len() < 2 {
            return Err(Error::InsufficientData(
                "dissimilar pairs requested but fewer than two labels present".into(),
            ));
        }
        let label_of: Vec<usize> = {
            let mut v = vec![0; labels.len()];
            for (gi, g) in groups.iter().enumerate() {
                for &i in g {
                    v[i] = gi;
                }
            }
            v
        };
        let n = labels.len();
        for _ in 0..n_dissimilar {
            loop {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                if label_of[i] != label_of[j] {
                    out.push(IndexPair {
                        a: i,
                        b: j,
                        similar: false,
                    });
                    break;
                }
            }
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_similar: usize,
    pub n_dissimilar: usize,
    pub learning_rate: f64,
    /// Per-layer learning-rate multipliers; uniform when empty.
    pub layer_lr_scale: Vec<f64>,
    /// Heavy-ball momentum of the gradient-descent update.
    pub sgd_momentum: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Hidden layer widths between input and output.
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub margin: f64,
    pub norm_epsilon: f64,
    pub norm_momentum: f64,
    /// Size of the held-out pair set as a fraction of the training pool.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_similar: 1_000,
            n_dissimilar: 10_200,
            learning_rate: 0.01,
            layer_lr_scale: Vec::new(),
            sgd_momentum: 0.9,
            iterations: 500,
            batch_size: 64,
            hidden_dims: vec![32],
            output_dim: 16,
            margin: DEFAULT_MARGIN,
            norm_epsilon: DEFAULT_NORM_EPSILON,
            norm_momentum: DEFAULT_NORM_MOMENTUM,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.n_similar + self.n_dissimilar == 0 {
            return bad("at least one pair must be sampled");
        }
        if self.iterations == 0 || self.batch_size == 0 || self.output_dim == 0 {
            return bad("iterations, batch_size and output_dim must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and ≥ 0");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) || !(0.0..1.0).contains(&self.norm_momentum) {
            return bad("momenta must lie in [0, 1)");
        }
        if !(self.margin > 0.0) {
            return bad("margin must be > 0");
        }
        if !self.layer_lr_scale.is_empty() && self.layer_lr_scale.len() != self.hidden_dims.len() + 1 {
            return bad("layer_lr_scale needs one entry per layer");
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    pub batch_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: EmbedderParams,
    pub report: TrainReport,
}

/// Mini-batch gradient descent on the contrastive loss over pairs sampled
/// from `labeled`.
pub fn train_metric(config: &TrainConfig, labeled: &[(Vec<f64>, String)]) -> Result<Trained> {
    config.validate()?;
    let Some(first) = labeled.first() else {
        return Err(Error::InsufficientData("no labeled examples".into()));
    };
    let input_dim = first.0.len();
    let labels: Vec<&str> = labeled.iter().map(|(_, l)| l.as_str()).collect();
    let pool = sample_pairs(&labels, config.n_similar, config.n_dissimilar, config.seed)?;
    let frac = config.holdout_fraction.max(0.0);
    let held_sim = ((config.n_similar as f64 * frac).ceil() as usize).min(config.n_similar);
    let held_dis = ((config.n_dissimilar as f64 * frac).ceil() as usize).min(config.n_dissimilar);
    let holdout = PairBatch::from_indices(
        labeled,
        &sample_pairs(&labels, held_sim, held_dis, seed::derive(config.seed, "holdout"))?,
    );

    let mut params = EmbedderParams::init(
        &config.layer_dims(input_dim),
        config.margin,
        seed::derive(config.seed, "init"),
    )?;
    params.norm_epsilon = config.norm_epsilon;
    params.norm_momentum = config.norm_momentum;
    params.validate()?;

    let holdout_loss = |p: &EmbedderParams| -> Result<f64> {
        if holdout.is_empty() {
            Ok(f64::NAN)
        } else {
            batch_loss(p, &holdout)
        }
    };
    let initial_holdout_loss = holdout_loss(&params)?;

    let mut rng = seed::rng(seed::derive(config.seed, "batches"));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut velocity: Vec<DenseLayer> = params.layers.iter().map(DenseLayer::zeros_like).collect();
    let mut batch_losses = Vec::with_capacity(config.iterations);
    let batch_size = config.batch_size.min(pool.len());

    for iteration in 0..config.iterations {
        let mut idx = Vec::with_capacity(batch_size);
        while idx.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(pool[order[cursor]]);
            cursor += 1;
        }
        let batch = PairBatch::from_indices(labeled, &idx);
        let lg = loss_gradients(&params, &batch)?;
        if !lg.loss.is_finite() || !lg.gradients.max_abs().is_finite() {
            return Err(Error::Divergence {
                iteration,
                loss: lg.loss,
            });
        }
        batch_losses.push(lg.loss);

        for (l, ((layer, grad), vel)) in params
            .layers
            .iter_mut()
            .zip(&lg.gradients.layers)
            .zip(velocity.iter_mut())
            .enumerate()
        {
            let lr = config.learning_rate * config.layer_lr_scale.get(l).copied().unwrap_or(1.0);
            let mu = config.sgd_momentum;
            for ((w, g), v) in layer
                .weights
                .data
                .iter_mut()
                .zip(&grad.weights.data)
                .zip(vel.weights.data.iter_mut())
            {
                *v = mu * *v - lr * g;
                *w += *v;
            }
            for ((b, g), v) in layer.bias.iter_mut().zip(&grad.bias).zip(vel.bias.iter_mut()) {
                *v = mu * *v - lr * g;
                *b += *v;
            }
        }

        let n = (2 * batch.len()) as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let mom = params.norm_momentum;
        for (rm, bm) in params.running_mean.iter_mut().zip(&lg.batch_mean) {
            *rm = mom * *rm + (1.0 - mom) * bm;
        }
        for (rv, bv) in params.running_var.iter_mut().zip(&lg.batch_var) {
            *rv = mom * *rv + (1.0 - mom) * bv * unbias;
        }
    }

    let final_holdout_loss = holdout_loss(&params)?;
    if final_holdout_loss.is_nan() != initial_holdout_loss.is_nan() || final_holdout_loss.is_infinite() {
        return Err(Error::Divergence {
            iteration: config.iterations,
            loss: final_holdout_loss,
        });
    }
    Ok(Trained {
        params,
        report: TrainReport {
            initial_holdout_loss,
            final_holdout_loss,
            batch_losses,
        },
    })
}

/// Learned inference-mode embedding followed by the fixed per-image vector.
pub fn hybrid_embed(params: &EmbedderParams, fixed: Option<&[f64]>, input: &[f64]) -> Result<Vec<f64>> {
    let fixed = fixed.ok_or_else(|| {
        Error::InvalidInput("hybrid embedding requires a fixed feature vector".into())
    })?;
    let mut out = params.embed(input)?;
    out.extend_from_slice(fixed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rng: &mut seed::Rng, n: usize, dim: usize) -> PairBatch {
        PairBatch {
            pairs: (0..n)
                .map(|i| Pair {
                    x: (0..dim).map(|_| StandardNormal.sample(rng)).collect(),
                    y: (0..dim).map(|_| StandardNormal.sample(rng)).collect(),
                    similar: i % 2 == 0,
                })
                .collect(),
        }
    }

    #[test]
    fn loss_values() {
        assert_eq!(contrastive_loss(&[1.0, 2.0], &[1.0, 2.0], true, 1.0), 0.0);
        assert_eq!(contrastive_loss(&[0.0], &[1.5], false, 1.0), 0.0);
        assert_eq!(contrastive_loss(&[0.0], &[1.0], false, 1.0), 0.0);
        let v = contrastive_loss(&[0.0, 0.0], &[0.4, 0.0], false, 1.0);
        assert!((v - 0.18).abs() < 1e-15);
        // continuity at D = m
        let below = contrastive_loss(&[0.0], &[1.0 - 1e-9], false, 1.0);
        assert!(below < 1e-17);
    }

    #[test]
    fn identity_network_passes_input() {
        let params = EmbedderParams {
            layers: vec![DenseLayer {
                weights: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
            running_mean: vec![0.0; 3],
            running_var: vec![1.0; 3],
            norm_epsilon: 1e-5,
            norm_momentum: 0.9,
            margin: 1.0,
        };
        let x = [1.0, -2.0, 0.5];
        let y = params.embed(&x).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(a * s, *b);
        }
        assert!(params.embed(&[1.0]).is_err());
    }

    #[test]
    fn train_mode_normalizes_batch() {
        let mut params = EmbedderParams::init(&[5, 8, 4], 1.0, 3).unwrap();
        // Exact normalization is only reached as epsilon → 0.
        params.norm_epsilon = 1e-14;
        let mut rng = seed::rng(11);
        let xs: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let out = forward_embed(&params, &refs, NormMode::TrainBatch).unwrap();
        for c in 0..4 {
            let mean = out.iter().map(|r| r[c]).sum::<f64>() / 16.0;
            let var = out.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn default_epsilon_shrinks_variance_by_known_factor() {
        let params = EmbedderParams::init(&[3, 2], 1.0, 5).unwrap();
        let xs = [vec![1.0, 0.0, 2.0], vec![-1.0, 3.0, 0.5], vec![0.2, 0.2, 0.2]];
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let cache = forward_train(&params, &refs).unwrap();
        for c in 0..2 {
            let var = (0..3).map(|r| cache.normalized[(r, c)].powi(2)).sum::<f64>() / 3.0;
            let bv = cache.batch_var[c];
            assert!((var - bv / (bv + 1e-5)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = EmbedderParams::init(&[4, 6, 3], 1.0, 9).unwrap();
        let x = [0.3, -0.1, 2.0, 1.0];
        assert_eq!(params.embed(&x).unwrap(), params.embed(&x).unwrap());
    }

    #[test]
    fn satisfied_margins_give_zero_gradient() {
        let params = EmbedderParams::init(&[3, 5, 2], 0.01, 1).unwrap();
        let mut rng = seed::rng(2);
        let mut batch = random_batch(&mut rng, 6, 3);
        batch.pairs.iter_mut().for_each(|p| p.similar = false);
        let lg = loss_gradients(&params, &batch).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert_eq!(lg.gradients.max_abs(), 0.0);
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let params = EmbedderParams::init(&[3, 5, 2], 1.0, 4).unwrap();
        let mut rng = seed::rng(8);
        let batch = random_batch(&mut rng, 5, 3);
        let mut doubled = batch.clone();
        doubled.pairs.extend(batch.pairs.clone());
        let a = loss_gradients(&params, &batch).unwrap();
        let b = loss_gradients(&params, &doubled).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (la, lb) in a.gradients.layers.iter().zip(&b.gradients.layers) {
            for (x, y) in la.weights.data.iter().zip(&lb.weights.data) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn pair_sampling_contract() {
        let labels = ["a", "a", "b", "b", "b", "c"];
        let pairs = sample_pairs(&labels, 50, 500, 1).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.similar).count(), 50);
        for p in &pairs {
            assert_ne!(p.a, p.b);
            assert_eq!(p.similar, labels[p.a] == labels[p.b]);
        }
        let none = sample_pairs(&labels, 0, 20, 1).unwrap();
        assert!(none.iter().all(|p| !p.similar));
        assert!(sample_pairs(&["a", "b", "c"], 1, 0, 1).is_err());
        assert!(sample_pairs(&["a", "a"], 0, 1, 1).is_err());
        assert_eq!(sample_pairs(&labels, 10, 10, 4).unwrap(), sample_pairs(&labels, 10, 10, 4).unwrap());
    }

    #[test]
    fn default_pair_ratio() {
        let c = TrainConfig::default();
        let ratio = c.n_dissimilar as f64 / c.n_similar as f64;
        assert!((ratio - 1_045_500.0 / 102_500.0).abs() < 1e-9);
    }

    #[test]
    fn hybrid_concatenates() {
        let params = EmbedderParams::init(&[4, 3], 1.0, 0).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let h = hybrid_embed(&params, Some(&[9.0, 8.0]), &x).unwrap();
        assert_eq!(h.len(), 5);
        assert_eq!(h[..3], params.embed(&x).unwrap()[..]);
        assert_eq!(h[3..], [9.0, 8.0]);
        assert_eq!(hybrid_embed(&params, Some(&[]), &x).unwrap(), params.embed(&x).unwrap());
        assert!(hybrid_embed(&params, None, &x).is_err());

        let big = EmbedderParams::init(&[205, 205], 1.0, 0).unwrap();
        let input = vec![0.1; 205];
        assert_eq!(hybrid_embed(&big, Some(&input), &input).unwrap().len(), 410);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = EmbedderParams::init(&[3, 4, 2], 0.7, 12).unwrap();
        let json = serde_json::to_string(&params.to_checkpoint()).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(EmbedderParams::from_checkpoint(&back).unwrap(), params);
        let mut bad = back.clone();
        bad.format_version = 99;
        assert!(EmbedderParams::from_checkpoint(&bad).is_err());
        let mut bad = back;
        bad.margin = 0.0;
        assert!(EmbedderParams::from_checkpoint(&bad).is_err());
    }

    fn toy_labeled() -> Vec<(Vec<f64>, String)> {
        let mut rng = seed::rng(21);
        (0..60)
            .map(|i| {
                let c = if i % 2 == 0 { -2.0 } else { 2.0 };
                let x: f64 = StandardNormal.sample(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                (vec![c + 0.5 * x, 0.5 * y], format!("c{}", i % 2))
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_only_moves_running_stats() {
        let data = toy_labeled();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            iterations: 5,
            n_similar: 20,
            n_dissimilar: 40,
            hidden_dims: vec![4],
            output_dim: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let trained = train_metric(&cfg, &data).unwrap();
        let init = EmbedderParams::init(&cfg.layer_dims(2), cfg.margin, seed::derive(3, "init")).unwrap();
        assert_eq!(trained.params.layers, init.layers);
        assert_ne!(trained.params.running_mean, init.running_mean);
    }

    #[test]
    fn training_separates_classes_and_is_deterministic() {
        let data = toy_labeled();
        let cfg = TrainConfig {
            iterations: 200,
            n_similar: 200,
            n_dissimilar: 400,
            batch_size: 32,
            hidden_dims: vec![8],
            output_dim: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train_metric(&cfg, &data).unwrap();
        let b = train_metric(&cfg, &data).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.report.final_holdout_loss < a.report.initial_holdout_loss);

        let emb: Vec<Vec<f64>> = data.iter().map(|(x, _)| a.params.embed(x).unwrap()).collect();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                let d = euclidean(&emb[i], &emb[j]);
                if data[i].1 == data[j].1 {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    nx += 1;
                }
            }
        }
        assert!(intra / (ni as f64) < inter / (nx as f64));
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy_labeled();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            iterations: 50,
            n_similar: 20,
            n_dissimilar: 40,
            hidden_dims: vec![4],
            output_dim: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(train_metric(&cfg, &data), Err(Error::Divergence { .. })));
    }
}
