//! Subcommand implementations. Each resolves its configuration, reads its
//! inputs, writes its outputs stamped with the seed and config digest, and
//! returns a one-line summary.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use vispref::cluster::ClusterModel;
use vispref::compare::{all_pairs_stats, ecdf, write_ecdf_csv, write_pairs_csv, PriorConfig, DEFAULT_PRIOR_MASS};
use vispref::corpus::{filter_active, load_corpus, select_background, CorpusFormat, SplitSpec, UserCorpus};
use vispref::evaluate::{mean_average_precision, run_prediction_task, write_map_csv, write_prediction_csv, LabeledItem};
use vispref::metric::{train_metric as fit_metric, Checkpoint, EmbedderParams, TrainConfig};
use vispref::pipeline::{
    corpus_background, embed_corpus, fit_clusters, labeled_examples, profile_corpus, ClusterConfig, CutoffRule,
    EmbeddingMode, FixedSource, Hybrid, ImageEmbedder, Learned, RawFeatures,
};
use vispref::profile::write_profiles_csv;
use vispref::synth::{generate_synthetic, SynthConfig};
use vispref::{cluster, Error};

use crate::config::{digest, require, resolve, usage};
use crate::{ClusterFlags, CompareFlags, EmbedFlags, EvalMapFlags, PredictFlags, ProfileFlags, SynthFlags, TrainFlags};

pub struct Ctx {
    pub file: Value,
    pub seed: u64,
}

/// Stage parameters (digested) next to the stage's file paths (not digested).
#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct Run<P, I> {
    #[serde(flatten)]
    params: P,
    #[serde(flatten)]
    io: I,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct Filter {
    min_pins: usize,
    cutoff_time: u64,
}

impl Filter {
    fn apply(&self, corpus: &UserCorpus) -> UserCorpus {
        filter_active(corpus, self.min_pins, self.cutoff_time)
    }
}

fn stamp(seed: u64, digest: &str) -> Vec<String> {
    vec![format!("seed={seed}"), format!("config={digest}")]
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    finish(w, path)
}

fn load(path: &Path) -> Result<UserCorpus> {
    load_corpus(path, CorpusFormat::from_path(path)).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_model(path: &Path) -> Result<ClusterModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    let model: ClusterModel = serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing model {}", path.display()))?;
    model.validate().with_context(|| format!("model {}", path.display()))?;
    Ok(model)
}

fn load_checkpoint(path: &Path) -> Result<EmbedderParams> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing checkpoint {}", path.display()))?;
    EmbedderParams::from_checkpoint(&ck).with_context(|| format!("checkpoint {}", path.display()))
}

/// Splits a corpus into the model's background users and everyone else.
fn partition(corpus: &UserCorpus, model: &ClusterModel) -> (UserCorpus, UserCorpus) {
    let bg: BTreeSet<&str> = model.background_users.iter().map(String::as_str).collect();
    (
        corpus.retain_users(|id, _| bg.contains(id)),
        corpus.retain_users(|id, _| !bg.contains(id)),
    )
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct SynthIo {
    out: Option<PathBuf>,
    truth: Option<PathBuf>,
}

pub fn synth(ctx: &Ctx, flags: &SynthFlags) -> Result<String> {
    let run: Run<SynthConfig, SynthIo> = resolve(&ctx.file, "synth", flags)?;
    let out = require(&run.io.out, "out")?;
    let params = SynthConfig { seed: ctx.seed, ..run.params };
    let d = digest("synth", ctx.seed, &params)?;
    let (corpus, truth) = generate_synthetic(&params)?;

    let mut w = create(out)?;
    for c in stamp(ctx.seed, &d) {
        writeln!(w, "# {c}")?;
    }
    corpus.write_jsonl(&mut w)?;
    finish(w, out)?;

    let truth_path = run.io.truth.clone().unwrap_or_else(|| out.with_extension("truth.json"));
    let mut sidecar = serde_json::to_value(&truth)?;
    sidecar["config_digest"] = Value::String(d);
    write_json(&truth_path, &sidecar)?;
    Ok(format!(
        "synth: {} users, {} images -> {} (truth {}, seed {})",
        corpus.n_users(),
        corpus.n_images(),
        out.display(),
        truth_path.display(),
        ctx.seed
    ))
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct TrainIo {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
}

pub fn train_metric(ctx: &Ctx, flags: &TrainFlags) -> Result<String> {
    let run: Run<TrainConfig, TrainIo> = resolve(&ctx.file, "train-metric", flags)?;
    let corpus_path = require(&run.io.corpus, "corpus")?;
    let out = require(&run.io.out, "out")?;
    let params = TrainConfig { seed: ctx.seed, ..run.params };
    let d = digest("train-metric", ctx.seed, &params)?;

    let labeled = labeled_examples(&load(corpus_path)?);
    if labeled.is_empty() {
        return Err(Error::InsufficientData(format!("{} has no labeled images", corpus_path.display())).into());
    }
    let trained = fit_metric(&params, &labeled)?;
    let mut ck = trained.params.to_checkpoint();
    ck.seed = Some(ctx.seed);
    ck.config_digest = Some(d);
    write_json(out, &ck)?;
    Ok(format!(
        "train-metric: {} labeled images, holdout loss {:.4} -> {:.4}, checkpoint {}",
        labeled.len(),
        trained.report.initial_holdout_loss,
        trained.report.final_holdout_loss,
        out.display()
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct EmbedParams {
    mode: EmbeddingMode,
}

impl Default for EmbedParams {
    fn default() -> Self {
        EmbedParams { mode: EmbeddingMode::Hybrid }
    }
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct EmbedIo {
    corpus: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    fixed_corpus: Option<PathBuf>,
    out: Option<PathBuf>,
}

struct EmbedderParts {
    params: Option<EmbedderParams>,
    fixed: FixedSource,
}

impl EmbedderParts {
    fn load(mode: EmbeddingMode, io: &EmbedIo) -> Result<Self> {
        let params = match mode {
            EmbeddingMode::Raw => None,
            _ => Some(load_checkpoint(require(&io.checkpoint, "checkpoint")?)?),
        };
        let fixed = match &io.fixed_corpus {
            Some(p) => FixedSource::from_corpus(&load(p)?),
            None => FixedSource::OwnFeatures,
        };
        Ok(EmbedderParts { params, fixed })
    }
}

fn build_embedder(mode: EmbeddingMode, parts: &EmbedderParts) -> Box<dyn ImageEmbedder + '_> {
    match (mode, &parts.params) {
        (EmbeddingMode::Learned, Some(p)) => Box::new(Learned(p)),
        (EmbeddingMode::Hybrid, Some(p)) => Box::new(Hybrid { params: p, fixed: parts.fixed.clone() }),
        _ => Box::new(RawFeatures),
    }
}

pub fn embed(ctx: &Ctx, flags: &EmbedFlags) -> Result<String> {
    let run: Run<EmbedParams, EmbedIo> = resolve(&ctx.file, "embed", flags)?;
    let corpus_path = require(&run.io.corpus, "corpus")?;
    let out = require(&run.io.out, "out")?;
    let d = digest("embed", ctx.seed, &run.params)?;
    let parts = EmbedderParts::load(run.params.mode, &run.io)?;
    let embedder = build_embedder(run.params.mode, &parts);

    let corpus = load(corpus_path)?;
    let embedded = embed_corpus(&corpus, embedder.as_ref())?;
    let mut w = create(out)?;
    for c in stamp(ctx.seed, &d) {
        writeln!(w, "# {c}")?;
    }
    embedded.write_jsonl(&mut w)?;
    finish(w, out)?;
    Ok(format!(
        "embed: {} images, {} -> {} dims ({:?}) -> {}",
        embedded.n_images(),
        corpus.feature_dim(),
        embedded.feature_dim(),
        run.params.mode,
        out.display()
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct ClusterParams {
    k: usize,
    max_iter: usize,
    cutoff: CutoffRule,
    margin: f64,
    background_size: usize,
    #[serde(flatten)]
    filter: Filter,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            k: cluster::DEFAULT_K,
            max_iter: cluster::DEFAULT_MAX_ITER,
            cutoff: CutoffRule::Margin,
            margin: vispref::metric::DEFAULT_MARGIN,
            background_size: 30,
            filter: Filter::default(),
        }
    }
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct ClusterIo {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
}

pub fn cluster(ctx: &Ctx, flags: &ClusterFlags) -> Result<String> {
    let run: Run<ClusterParams, ClusterIo> = resolve(&ctx.file, "cluster", flags)?;
    let corpus_path = require(&run.io.corpus, "corpus")?;
    let out = require(&run.io.out, "out")?;
    let p = &run.params;
    let d = digest("cluster", ctx.seed, p)?;

    let corpus = p.filter.apply(&load(corpus_path)?);
    let (background, _) = select_background(&corpus, p.background_size, ctx.seed)?;
    let config = ClusterConfig { k: p.k, max_iter: p.max_iter, cutoff: p.cutoff, seed: ctx.seed };
    let mut model = fit_clusters(&background, &RawFeatures, &config, p.margin)?;
    model.config_digest = Some(d);
    write_json(out, &model)?;
    Ok(format!(
        "cluster: k={} on {} background users ({} images), alpha^2={:.4}, cutoff={:.4} -> {}",
        model.k,
        background.n_users(),
        background.n_images(),
        model.bandwidth_sq,
        model.cutoff,
        out.display()
    ))
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct StageIo {
    corpus: Option<PathBuf>,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
}

pub fn profile(ctx: &Ctx, flags: &ProfileFlags) -> Result<String> {
    let run: Run<Filter, StageIo> = resolve(&ctx.file, "profile", flags)?;
    let corpus_path = require(&run.io.corpus, "corpus")?;
    let model_path = require(&run.io.model, "model")?;
    let out = require(&run.io.out, "out")?;
    let d = digest("profile", ctx.seed, &run.params)?;

    let model = load_model(model_path)?;
    let (_, users) = partition(&run.params.apply(&load(corpus_path)?), &model);
    if users.is_empty() {
        return Err(Error::InsufficientData("no users left outside the background".into()).into());
    }
    let profiles = profile_corpus(&users, &RawFeatures, &model)?;
    let mut w = create(out)?;
    write_profiles_csv(&mut w, &profiles, &stamp(ctx.seed, &d))?;
    finish(w, out)?;
    let degenerate = profiles.iter().filter(|p| p.degenerate).count();
    Ok(format!(
        "profile: {} users over {} clusters ({} degenerate) -> {}",
        profiles.len(),
        model.k,
        degenerate,
        out.display()
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct CompareParams {
    prior_mass: f64,
    prior_scale: Option<f64>,
    #[serde(flatten)]
    filter: Filter,
}

impl Default for CompareParams {
    fn default() -> Self {
        CompareParams { prior_mass: DEFAULT_PRIOR_MASS, prior_scale: None, filter: Filter::default() }
    }
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct CompareIo {
    corpus: Option<PathBuf>,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    ecdf_out: Option<PathBuf>,
}

pub fn compare(ctx: &Ctx, flags: &CompareFlags) -> Result<String> {
    let run: Run<CompareParams, CompareIo> = resolve(&ctx.file, "compare", flags)?;
    let corpus_path = require(&run.io.corpus, "corpus")?;
    let model_path = require(&run.io.model, "model")?;
    let out = require(&run.io.out, "out")?;
    let ecdf_path = run.io.ecdf_out.clone().unwrap_or_else(|| out.with_extension("ecdf.csv"));
    let d = digest("compare", ctx.seed, &run.params)?;

    let model = load_model(model_path)?;
    let (background, users) = partition(&run.params.filter.apply(&load(corpus_path)?), &model);
    if background.is_empty() {
        return Err(Error::InsufficientData(
            "none of the model's background users are in the corpus; the prior needs them".into(),
        )
        .into());
    }
    let bg = corpus_background(&background, &RawFeatures, &model)?;
    let prior = match run.params.prior_scale {
        Some(s) => PriorConfig::new(s)?,
        None => PriorConfig::with_prior_mass(&bg, run.params.prior_mass)?,
    };
    let profiles = profile_corpus(&users, &RawFeatures, &model)?;
    let stats = all_pairs_stats(&profiles, &bg, &prior)?;
    let z: Vec<f64> = stats.iter().map(|s| s.z_max).collect();
    let steps = ecdf(&z)?;

    let comments = stamp(ctx.seed, &d);
    let mut w = create(out)?;
    write_pairs_csv(&mut w, &stats, &comments)?;
    finish(w, out)?;
    let mut w = create(&ecdf_path)?;
    write_ecdf_csv(&mut w, &steps, &comments)?;
    finish(w, &ecdf_path)?;
    let significant = stats.iter().filter(|s| s.significant()).count();
    Ok(format!(
        "compare: {} pairs of {} users, {} ({:.1}%) with max|z| >= 2 -> {}, {}",
        stats.len(),
        profiles.len(),
        significant,
        100.0 * significant as f64 / stats.len() as f64,
        out.display(),
        ecdf_path.display()
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct PredictParams {
    sample_size: usize,
    test_size: usize,
    train_sizes: Vec<usize>,
    #[serde(flatten)]
    filter: Filter,
}

impl Default for PredictParams {
    fn default() -> Self {
        let split = SplitSpec::default();
        PredictParams {
            sample_size: split.sample_size,
            test_size: split.test_size,
            train_sizes: vec![10, 20, 30, 40, 50],
            filter: Filter::default(),
        }
    }
}

pub fn predict(ctx: &Ctx, flags: &PredictFlags) -> Result<String> {
    let run: Run<PredictParams, StageIo> = resolve(&ctx.file, "predict", flags)?;
    let corpus_path = require(&run.io.corpus, "corpus")?;
    let model_path = require(&run.io.model, "model")?;
    let out = require(&run.io.out, "out")?;
    let p = &run.params;
    let d = digest("predict", ctx.seed, p)?;
    let Some(&max_train) = p.train_sizes.iter().max() else {
        return Err(usage("--train-sizes must list at least one size"));
    };

    let model = load_model(model_path)?;
    let (_, users) = partition(&p.filter.apply(&load(corpus_path)?), &model);
    let split = SplitSpec { sample_size: p.sample_size, test_size: p.test_size, train_size: max_train, seed: ctx.seed };
    let report = run_prediction_task(&users, &split, &RawFeatures, &model, &p.train_sizes)?;

    let mut comments = stamp(ctx.seed, &d);
    comments.extend(report.excluded.iter().map(|(u, why)| format!("excluded {u}: {why}")));
    let mut w = create(out)?;
    write_prediction_csv(&mut w, &report, &comments)?;
    finish(w, out)?;
    let last = report.rows.last().expect("one row per train size");
    Ok(format!(
        "predict: {} users ({} excluded), MRR {:.4} at train size {} vs random {:.4} -> {}",
        last.n_users,
        report.excluded.len(),
        last.mrr,
        last.train_size,
        last.random_baseline,
        out.display()
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct EvalParams {
    mode: EmbeddingMode,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams { mode: EmbeddingMode::Raw }
    }
}

pub fn eval_map(ctx: &Ctx, flags: &EvalMapFlags) -> Result<String> {
    let run: Run<EvalParams, EmbedIo> = resolve(&ctx.file, "eval-map", flags)?;
    let corpus_path = require(&run.io.corpus, "corpus")?;
    let out = require(&run.io.out, "out")?;
    let d = digest("eval-map", ctx.seed, &run.params)?;
    let parts = EmbedderParts::load(run.params.mode, &run.io)?;
    let embedder = build_embedder(run.params.mode, &parts);

    let corpus = load(corpus_path)?;
    let items: Vec<LabeledItem> = corpus
        .records()
        .filter_map(|r| {
            r.label.as_ref().map(|label| {
                Ok(LabeledItem {
                    id: format!("{}/{}", r.user_id, r.image_id),
                    label: label.clone(),
                    vector: embedder.embed(r)?,
                })
            })
        })
        .collect::<vispref::Result<_>>()?;
    let report = mean_average_precision(&items)?;
    let mut w = create(out)?;
    write_map_csv(&mut w, &report, &stamp(ctx.seed, &d))?;
    finish(w, out)?;
    Ok(format!(
        "eval-map: mAP {:.4} over {} queries ({} without a same-label item) -> {}",
        report.map,
        report.per_query.len(),
        report.excluded.len(),
        out.display()
    ))
}
