//! Joint pretraining: dataset sampling, per-kind loss dispatch, optimizer
//! updates, periodic evaluation, checkpoints and exact resumption.
//!
//! Every step draws one dataset by its sampling probability and takes a whole
//! batch from it. Pair batches train the contrastive, masked multimodal and
//! matching losses; image batches train masked image modeling; text batches
//! train masked language modeling.
//!
//! All randomness of step `t` comes from streams keyed by `(seed, t, purpose)`
//! and each dataset walks seed-derived epoch permutations, so the state needed
//! to continue a run is the parameters, optimizer moments, data cursors and
//! the step counter.
//!
//! Output directory layout:
//!
//! ```text
//! resolved_config.toml    full config, including the seed
//! metrics.log             one `key=value` line per step and per evaluation
//! codebook.ckpt           visual codebook used for masked-image targets
//! checkpoint_step{N}.ckpt step 0, every `checkpoint_interval` steps, final step
//! best.ckpt               best held-out retrieval (mean R@1)
//! summary.json            final step and best metric
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::{ImageBatch, PairBatch, TextBatch};
use crate::checkpoint::Container;
use crate::config::{validate_probabilities, DatasetKind, FlavaConfig, ValidatedConfig};
use crate::data::Dataset;
use crate::encoders::{encode_image, encode_multimodal, encode_text, patchify, Encoded};
use crate::error::{FlavaError, Result};
use crate::evaluation::{evaluate_retrieval, RetrievalReport};
use crate::graph::Var;
use crate::masking::{apply_text_mask, image_mask_plan, mlm_mask};
use crate::model::FlavaModel;
use crate::objectives::{gc_loss, itm_loss, make_itm_negatives, mim_loss, mlm_loss, mmm_loss, LossBundle, LossVars};
use crate::optim::{clamp_logit_scale, lr_at, AdamW};
use crate::params::{ParamStore, Session};
use crate::rng;
use crate::synthetic;
use crate::visual_tokenizer::{fit_codebook, Codebook};

/// Noise variant of the synthetic retrieval fixture held out from training.
pub const HELD_OUT_VARIANT: u64 = 9;

const TAG_SAMPLE: u64 = 0;
const TAG_IMAGE_MASK: u64 = 1;
const TAG_TEXT_MASK: u64 = 2;
const TAG_NEGATIVES: u64 = 3;
const TAG_PERMUTATION: u64 = 4;
const TAG_CODEBOOK: u64 = 5;

/// Draws a dataset index from `probs` (which must sum to 1 within 1e-9).
pub fn round_robin_sample<R: rand::Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    validate_probabilities(probs)?;
    let d = WeightedIndex::new(probs).map_err(|_| FlavaError::Probabilities {
        sum: probs.iter().sum(),
    })?;
    Ok(d.sample(rng))
}

/// Position of one dataset in its epoch permutation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub offset: usize,
}

impl Cursor {
    /// Next `batch` rows; a new epoch starts when fewer than `batch` remain,
    /// so a batch never repeats an item.
    pub fn next_rows(&mut self, n: usize, batch: usize, seed: u64, dataset: usize) -> Vec<usize> {
        let batch = batch.min(n);
        if self.offset + batch > n {
            self.epoch += 1;
            self.offset = 0;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, &[TAG_PERMUTATION, dataset as u64, self.epoch]));
        let rows = perm[self.offset..self.offset + batch].to_vec();
        self.offset += batch;
        rows
    }
}

/// Running sums of every loss seen so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub sums: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, u64>,
}

impl RunningStats {
    pub fn record(&mut self, losses: &LossBundle) {
        for (n, v) in losses.entries() {
            *self.sums.entry(n.to_string()).or_default() += v;
            *self.counts.entry(n.to_string()).or_default() += 1;
        }
    }

    pub fn means(&self) -> BTreeMap<String, f64> {
        self.sums
            .iter()
            .map(|(k, s)| (k.clone(), s / self.counts[k] as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub step: u64,
    pub mean_r1: f64,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub params: ParamStore,
    pub optim: AdamW,
    pub cursors: Vec<Cursor>,
    pub stats: RunningStats,
    pub best: Option<BestMetric>,
}

impl TrainState {
    pub fn new(params: ParamStore, datasets: usize) -> Self {
        Self {
            step: 0,
            params,
            optim: AdamW::new(),
            cursors: vec![Cursor::default(); datasets],
            stats: RunningStats::default(),
            best: None,
        }
    }

    /// Overwrites image and/or text encoder parameters from checkpoints.
    pub fn load_pretrained_encoders(&mut self, image_ckpt: Option<&Path>, text_ckpt: Option<&Path>) -> Result<()> {
        load_pretrained_encoders(&mut self.params, image_ckpt, text_ckpt)
    }
}

/// Copies every `image.` tensor of `image_ckpt` and every `text.` tensor of
/// `text_ckpt` over the parameters of the same name. Multimodal encoder and
/// head parameters are never touched. Names the model lacks are ignored.
pub fn load_pretrained_encoders(params: &mut ParamStore, image_ckpt: Option<&Path>, text_ckpt: Option<&Path>) -> Result<()> {
    for (path, prefix) in [(image_ckpt, "image."), (text_ckpt, "text.")] {
        let Some(path) = path else { continue };
        let c = Container::load(path)?;
        for (name, t) in c.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let Some(p) = params.get_mut(name) else { continue };
            if p.dim() != t.dim() {
                return Err(FlavaError::ParamShape {
                    name: name.clone(),
                    expected: p.dim(),
                    found: t.dim(),
                });
            }
            p.assign(t);
        }
    }
    Ok(())
}

/// One step's input, already tokenized for masked-image targets.
#[derive(Debug, Clone, PartialEq)]
pub enum StepBatch {
    Pairs { pairs: PairBatch, image_tokens: Array2<u32> },
    Images { images: ImageBatch, image_tokens: Array2<u32> },
    Texts(TextBatch),
}

impl StepBatch {
    pub fn kind(&self) -> DatasetKind {
        match self {
            StepBatch::Pairs { .. } => DatasetKind::MultimodalPairs,
            StepBatch::Images { .. } => DatasetKind::UnimodalImages,
            StepBatch::Texts(_) => DatasetKind::UnimodalText,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub step: u64,
    pub kind: DatasetKind,
    pub dataset: usize,
    pub lr: f64,
    pub losses: LossBundle,
    pub total: f64,
    pub itm_accuracy: Option<f64>,
    pub grad_norm: f64,
}

impl StepOutput {
    pub fn log_line(&self) -> String {
        let mut line = format!(
            "event=train step={} kind={} dataset={} lr={}",
            self.step,
            self.kind.as_str(),
            self.dataset,
            self.lr
        );
        for (n, v) in self.losses.entries() {
            let _ = write!(line, " {n}={v}");
        }
        if let Some(a) = self.itm_accuracy {
            let _ = write!(line, " itm_acc={a}");
        }
        let _ = write!(line, " total={} grad_norm={}", self.total, self.grad_norm);
        line
    }
}

/// Loss graph of one step plus the matching predictions for pair batches.
pub struct StepGraph {
    pub losses: LossVars,
    pub itm_logits: Option<Var>,
    pub itm_labels: Vec<bool>,
}

/// Re-indexes items of an encoded batch: item `i` of the result is item
/// `sources[i]` of `enc`.
fn gather_items(s: &mut Session, enc: &Encoded, sources: &[usize]) -> Encoded {
    let rows: Vec<usize> = sources
        .iter()
        .flat_map(|&src| (0..enc.seq).map(move |t| src * enc.seq + t))
        .collect();
    let key_mask = rows.iter().map(|&r| enc.key_mask[r]).collect();
    Encoded {
        states: s.graph.gather_rows(enc.states, rows),
        batch: sources.len(),
        seq: enc.seq,
        key_mask,
    }
}

/// The contrastive forward: unmasked images and texts only.
pub fn contrastive_forward(s: &mut Session, cfg: &FlavaConfig, pairs: &PairBatch) -> Result<(Var, Encoded, Encoded)> {
    let img = encode_image(s, &cfg.model, &pairs.images, None)?;
    let txt = encode_text(s, &cfg.model, &pairs.texts)?;
    let (loss, _) = gc_loss(s, &img, &txt);
    Ok((loss, img, txt))
}

/// Builds the loss graph for `batch` at `step` (1-based).
pub fn step_graph(s: &mut Session, cfg: &FlavaConfig, batch: &StepBatch, step: u64) -> Result<StepGraph> {
    let seed = cfg.model.seed;
    let m = &cfg.model;
    let mut out = StepGraph {
        losses: LossVars::default(),
        itm_logits: None,
        itm_labels: Vec::new(),
    };
    match batch {
        StepBatch::Pairs { pairs, image_tokens } => {
            // Unmasked forward for the contrastive loss.
            let (gc, img, txt) = contrastive_forward(s, cfg, pairs)?;
            out.losses.gc = Some(gc);

            // Masked forward for masked multimodal modeling.
            let iplan = image_mask_plan(
                image_tokens,
                m.grid(),
                m.mask_ratio_image,
                &cfg.masking,
                &mut rng::stream(seed, &[step, TAG_IMAGE_MASK]),
            )?;
            let tplan = mlm_mask(
                &pairs.texts,
                m.mask_rate_text,
                cfg.masking.bert_mixed_replacement,
                m.text_vocab_size,
                &mut rng::stream(seed, &[step, TAG_TEXT_MASK]),
            );
            let masked_texts = apply_text_mask(&pairs.texts, &tplan)?;
            let mi = encode_image(s, m, &pairs.images, Some(&iplan))?;
            let mt = encode_text(s, m, &masked_texts)?;
            let mm = encode_multimodal(s, m, &mi, &mt)?;
            let (mmm_i, mmm_t) = mmm_loss(s, &mm, &iplan, &tplan)?;
            out.losses.mmm_image = mmm_i;
            out.losses.mmm_text = mmm_t;

            // Negative-injected forward for image-text matching. Unimodal
            // encodings are per item, so the unmasked ones are reused with
            // the text rows permuted.
            let neg = make_itm_negatives(
                pairs,
                cfg.train.itm_negative_fraction,
                &mut rng::stream(seed, &[step, TAG_NEGATIVES]),
            )?;
            let shuffled = gather_items(s, &txt, &neg.text_source);
            let mm = encode_multimodal(s, m, &img, &shuffled)?;
            let (itm, logits) = itm_loss(s, &mm, &neg.batch.match_labels)?;
            out.losses.itm = Some(itm);
            out.itm_logits = Some(logits);
            out.itm_labels = neg.batch.match_labels;
        }
        StepBatch::Images { images, image_tokens } => {
            let plan = image_mask_plan(
                image_tokens,
                m.grid(),
                m.mask_ratio_image,
                &cfg.masking,
                &mut rng::stream(seed, &[step, TAG_IMAGE_MASK]),
            )?;
            let enc = encode_image(s, m, images, Some(&plan))?;
            out.losses.mim = mim_loss(s, &enc, &plan)?;
        }
        StepBatch::Texts(texts) => {
            let plan = mlm_mask(
                texts,
                m.mask_rate_text,
                cfg.masking.bert_mixed_replacement,
                m.text_vocab_size,
                &mut rng::stream(seed, &[step, TAG_TEXT_MASK]),
            );
            let enc = encode_text(s, m, &apply_text_mask(texts, &plan)?)?;
            out.losses.mlm = mlm_loss(s, &enc, &plan)?;
        }
    }
    Ok(out)
}

/// Runs one optimizer step on `batch` and advances `state.step`.
///
/// A non-finite loss aborts with [`FlavaError::NonFinite`] naming `batch_id`.
pub fn train_step(state: &mut TrainState, cfg: &FlavaConfig, batch: &StepBatch, dataset: usize, batch_id: &str) -> Result<StepOutput> {
    let step = state.step + 1;
    let lr = lr_at(step, &cfg.optim)?;
    let (losses, total, itm_accuracy, grads) = {
        let mut s = Session::training(&state.params);
        let sg = step_graph(&mut s, cfg, batch, step)?;
        let losses = sg.losses.bundle(&s.graph);
        let total = sg.losses.total(&mut s.graph, &cfg.train.loss_weights);
        let total_value = total.map_or(0.0, |t| s.graph.scalar(t));
        if !total_value.is_finite() || losses.entries().iter().any(|(_, v)| !v.is_finite()) {
            let detail = losses
                .entries()
                .iter()
                .map(|(n, v)| format!("{n}={v}"))
                .collect::<Vec<_>>()
                .join(" ");
            return Err(FlavaError::NonFinite {
                step,
                loss: detail,
                batch_id: batch_id.to_string(),
                dump: None,
            });
        }
        let itm_accuracy = sg.itm_logits.map(|l| {
            let lv = s.graph.value(l);
            let hits = sg.itm_labels.iter().enumerate().filter(|&(i, &y)| (lv[[i, 0]] > 0.0) == y).count();
            hits as f64 / sg.itm_labels.len() as f64
        });
        let grads = total.map(|t| s.param_grads(t)).unwrap_or_default();
        (losses, total_value, itm_accuracy, grads)
    };
    let stats = state.optim.update(&mut state.params, &grads, lr, &cfg.optim);
    clamp_logit_scale(&mut state.params, cfg.model.min_temperature);
    state.step = step;
    state.stats.record(&losses);
    Ok(StepOutput {
        step,
        kind: batch.kind(),
        dataset,
        lr,
        losses,
        total,
        itm_accuracy,
        grad_norm: stats.grad_norm,
    })
}

/// Pair source used for held-out retrieval: `train.eval_source`, else the
/// first pair dataset, with synthetic sources switched to a held-out noise
/// variant.
pub fn default_eval_source(cfg: &FlavaConfig) -> Option<String> {
    if let Some(s) = &cfg.train.eval_source {
        return Some(s.clone());
    }
    let first = cfg.datasets.iter().find(|d| d.kind == DatasetKind::MultimodalPairs)?;
    Some(match synthetic::parse_source(&first.source) {
        Some((n, _)) => format!("synthetic:{n}:{HELD_OUT_VARIANT}"),
        None => first.source.clone(),
    })
}

/// Fits the visual codebook on patches of the first `max_images` images
/// across all image-bearing datasets.
pub fn fit_codebook_from(datasets: &[Dataset], cfg: &FlavaConfig) -> Result<Codebook> {
    let m = &cfg.model;
    let mut features: Vec<Array2<f64>> = Vec::new();
    let mut remaining = cfg.train.codebook_fit_images;
    for ds in datasets {
        let Some(images) = &ds.images else { continue };
        if remaining == 0 {
            break;
        }
        let take = remaining.min(images.batch());
        remaining -= take;
        let rows: Vec<usize> = (0..take).collect();
        let p = patchify(&images.select(&rows), m.patch_size)?;
        let (b, n, d) = p.dim();
        features.push(p.into_shape_with_order((b * n, d)).map_err(|e| FlavaError::shape(e.to_string()))?);
    }
    if features.is_empty() {
        return Err(FlavaError::InsufficientData("no images to fit the visual codebook".into()));
    }
    let views: Vec<_> = features.iter().map(|f| f.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).map_err(|e| FlavaError::shape(e.to_string()))?;
    let (cb, _) = fit_codebook(all.view(), m.codebook_size, &mut rng::stream(m.seed, &[TAG_CODEBOOK]))?;
    Ok(cb)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainOptions {
    pub image_init: Option<PathBuf>,
    pub text_init: Option<PathBuf>,
    /// Stop after this step without the final checkpoint, as if killed.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub final_step: u64,
    pub budget: u64,
    pub stopped_early: bool,
    pub best: Option<BestMetric>,
    pub final_checkpoint: Option<PathBuf>,
    pub loss_means: BTreeMap<String, f64>,
}

/// A pretraining run bound to its data and output directory.
pub struct Trainer {
    pub config: FlavaConfig,
    pub model_config: ValidatedConfig,
    pub datasets: Vec<Dataset>,
    pub codebook: Codebook,
    pub eval: Option<PairBatch>,
    pub state: TrainState,
    pub out: PathBuf,
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("checkpoint_step{step}.ckpt"))
}

fn load_datasets(cfg: &FlavaConfig, codebook: Option<&Codebook>) -> Result<Vec<Dataset>> {
    let mut out = Vec::with_capacity(cfg.datasets.len());
    for d in &cfg.datasets {
        let ds = Dataset::load(d.kind, &d.source, &cfg.model)?;
        if d.kind == DatasetKind::MultimodalPairs && ds.len().min(cfg.optim.batch_size) < 2 {
            return Err(FlavaError::InsufficientData(format!(
                "pair dataset {} needs batches of at least 2 pairs",
                d.source
            )));
        }
        out.push(ds);
    }
    if let Some(cb) = codebook {
        tokenize_all(&mut out, cb, cfg.model.patch_size)?;
    }
    Ok(out)
}

fn tokenize_all(datasets: &mut [Dataset], cb: &Codebook, patch: usize) -> Result<()> {
    for ds in datasets {
        if let Some(images) = &ds.images {
            ds.image_tokens = Some(cb.tokenize(images, patch)?);
        }
    }
    Ok(())
}

fn check_codebook(cb: &Codebook, cfg: &FlavaConfig) -> Result<()> {
    if cb.size() != cfg.model.codebook_size || cb.code_dim() != cfg.model.patch_dim() {
        return Err(FlavaError::Config {
            field: "train.codebook".into(),
            rule: "shape",
            detail: format!(
                "codebook is {}x{}, model expects {}x{}",
                cb.size(),
                cb.code_dim(),
                cfg.model.codebook_size,
                cfg.model.patch_dim()
            ),
        });
    }
    Ok(())
}

fn load_eval(cfg: &FlavaConfig) -> Result<Option<PairBatch>> {
    let Some(src) = default_eval_source(cfg) else { return Ok(None) };
    let ds = Dataset::load(DatasetKind::MultimodalPairs, &src, &cfg.model)?;
    let rows: Vec<usize> = (0..ds.len()).collect();
    Ok(Some(ds.pair_batch(&rows)?))
}

fn parse_step(line: &str) -> Option<u64> {
    line.split_whitespace().find_map(|kv| kv.strip_prefix("step=")).and_then(|v| v.parse().ok())
}

impl Trainer {
    /// Validates `config`, loads data, fits or loads the codebook and
    /// initializes a fresh model.
    pub fn new(config: FlavaConfig, out: &Path) -> Result<Self> {
        let model_config = config.validate()?;
        if config.datasets.is_empty() {
            return Err(FlavaError::Config {
                field: "datasets".into(),
                rule: "positivity",
                detail: "at least one dataset is required".into(),
            });
        }
        if config.train.budget > config.optim.total_updates {
            return Err(FlavaError::Config {
                field: "train.budget".into(),
                rule: "ordering",
                detail: format!(
                    "{} exceeds optim.total_updates {}",
                    config.train.budget, config.optim.total_updates
                ),
            });
        }
        let mut datasets = load_datasets(&config, None)?;
        let codebook = match &config.train.codebook {
            Some(p) => Codebook::load(Path::new(p))?,
            None => fit_codebook_from(&datasets, &config)?,
        };
        check_codebook(&codebook, &config)?;
        tokenize_all(&mut datasets, &codebook, config.model.patch_size)?;
        let eval = load_eval(&config)?;
        let model = FlavaModel::init(&config.model)?;
        let state = TrainState::new(model.params, datasets.len());
        Ok(Self {
            config,
            model_config,
            datasets,
            codebook,
            eval,
            state,
            out: out.to_path_buf(),
        })
    }

    /// Restores a run from one of its checkpoints.
    pub fn from_checkpoint(path: &Path, out: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let bad = |detail: &str| FlavaError::Checkpoint {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let extra = c.metadata.get("extra").ok_or_else(|| bad("no training metadata"))?;
        if extra.get("kind").and_then(|k| k.as_str()) != Some("train_state") {
            return Err(bad("not a training checkpoint"));
        }
        let config: FlavaConfig = serde_json::from_value(extra["config"].clone())?;
        let model_config = config.validate()?;
        let step: u64 = serde_json::from_value(extra["step"].clone())?;
        let cursors: Vec<Cursor> = serde_json::from_value(extra["cursors"].clone())?;
        let adam_steps: BTreeMap<String, u64> = serde_json::from_value(extra["adam_steps"].clone())?;
        let stats: RunningStats = serde_json::from_value(extra["stats"].clone())?;
        let best: Option<BestMetric> = serde_json::from_value(extra["best"].clone())?;
        let codebook = Codebook::from_container(&c)?;
        check_codebook(&codebook, &config)?;
        let model = FlavaModel::from_container(&c)?;
        let mut optim = AdamW::new();
        for (name, t) in &c.tensors {
            if let Some(n) = name.strip_prefix("optim.m.") {
                optim.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("optim.v.") {
                optim.v.insert(n.to_string(), t.clone());
            }
        }
        optim.steps = adam_steps;
        let datasets = load_datasets(&config, Some(&codebook))?;
        if cursors.len() != datasets.len() {
            return Err(bad("cursor count does not match the datasets"));
        }
        let eval = load_eval(&config)?;
        Ok(Self {
            config,
            model_config,
            datasets,
            codebook,
            eval,
            state: TrainState {
                step,
                params: model.params,
                optim,
                cursors,
                stats,
                best,
            },
            out: out.to_path_buf(),
        })
    }

    pub fn model(&self) -> FlavaModel {
        FlavaModel {
            config: self.model_config.clone(),
            params: self.state.params.clone(),
        }
    }

    /// The whole training state as a checkpoint container.
    pub fn to_container(&self) -> Result<Container> {
        let extra = serde_json::json!({
            "kind": "train_state",
            "config": self.config,
            "step": self.state.step,
            "cursors": self.state.cursors,
            "adam_steps": self.state.optim.steps,
            "stats": self.state.stats,
            "best": self.state.best,
        });
        let mut c = self.model().to_container(extra);
        for (n, t) in &self.state.optim.m {
            c.tensors.insert(format!("optim.m.{n}"), t.clone());
        }
        for (n, t) in &self.state.optim.v {
            c.tensors.insert(format!("optim.v.{n}"), t.clone());
        }
        c.tensors.extend(self.codebook.to_container().tensors);
        Ok(c)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Samples the next dataset and batch without touching the parameters.
    pub fn next_batch(&mut self) -> Result<(usize, StepBatch, String)> {
        let step = self.state.step + 1;
        let seed = self.config.model.seed;
        let probs: Vec<f64> = self.config.datasets.iter().map(|d| d.sampling_probability).collect();
        let di = round_robin_sample(&probs, &mut rng::stream(seed, &[step, TAG_SAMPLE]))?;
        let ds = &self.datasets[di];
        let cursor = &mut self.state.cursors[di];
        let epoch_before = cursor.epoch;
        let rows = cursor.next_rows(ds.len(), self.config.optim.batch_size, seed, di);
        let id = format!(
            "dataset={di} source={} epoch={} rows={rows:?}",
            ds.source,
            cursor.epoch.max(epoch_before)
        );
        let batch = match ds.kind {
            DatasetKind::MultimodalPairs => StepBatch::Pairs {
                pairs: ds.pair_batch(&rows)?,
                image_tokens: ds.tokens(&rows)?,
            },
            DatasetKind::UnimodalImages => StepBatch::Images {
                images: ds.image_batch(&rows)?,
                image_tokens: ds.tokens(&rows)?,
            },
            DatasetKind::UnimodalText => StepBatch::Texts(ds.text_batch(&rows)?),
        };
        Ok((di, batch, id))
    }

    /// One training step; a non-finite loss writes a diagnostic dump first.
    pub fn step(&mut self) -> Result<StepOutput> {
        let (di, batch, id) = self.next_batch()?;
        match train_step(&mut self.state, &self.config, &batch, di, &id) {
            Err(FlavaError::NonFinite { step, loss, batch_id, .. }) => {
                let path = self.out.join(format!("nonfinite_step{step}.json"));
                let dump = serde_json::json!({"step": step, "losses": loss, "batch_id": batch_id});
                std::fs::create_dir_all(&self.out).map_err(|e| FlavaError::io(&self.out, e))?;
                std::fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| FlavaError::io(&path, e))?;
                Err(FlavaError::NonFinite {
                    step,
                    loss,
                    batch_id,
                    dump: Some(path),
                })
            }
            other => other,
        }
    }

    pub fn evaluate(&self) -> Result<Option<RetrievalReport>> {
        match &self.eval {
            Some(p) => Ok(Some(evaluate_retrieval(&self.model(), &p.images, &p.texts)?)),
            None => Ok(None),
        }
    }

    fn append(&self, lines: &[String]) -> Result<()> {
        let path = self.out.join("metrics.log");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| FlavaError::io(&path, e))?;
        for l in lines {
            writeln!(f, "{l}").map_err(|e| FlavaError::io(&path, e))?;
        }
        Ok(())
    }

    /// Drops metric lines past the current step (left by an interrupted run).
    fn truncate_metrics(&self) -> Result<()> {
        let path = self.out.join("metrics.log");
        let Ok(text) = std::fs::read_to_string(&path) else { return Ok(()) };
        let kept: String = text
            .lines()
            .filter(|l| parse_step(l).is_some_and(|s| s <= self.state.step))
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(&path, kept).map_err(|e| FlavaError::io(&path, e))
    }

    fn write_run_files(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| FlavaError::io(&self.out, e))?;
        let cfg_path = self.out.join("resolved_config.toml");
        std::fs::write(&cfg_path, self.config.to_toml()).map_err(|e| FlavaError::io(&cfg_path, e))?;
        self.codebook.save(&self.out.join("codebook.ckpt"))
    }

    /// Trains up to the configured budget (or `stop_after`).
    pub fn run(&mut self, stop_after: Option<u64>) -> Result<PretrainSummary> {
        self.write_run_files()?;
        let budget = self.config.train.budget;
        let t = &self.config.train;
        let (eval_every, ckpt_every) = (t.eval_interval, t.checkpoint_interval);
        if self.state.step == 0 {
            std::fs::write(self.out.join("metrics.log"), "").map_err(|e| FlavaError::io(&self.out, e))?;
            self.save_checkpoint(&checkpoint_path(&self.out, 0))?;
        } else {
            self.truncate_metrics()?;
        }
        let mut stopped = false;
        while self.state.step < budget {
            if stop_after.is_some_and(|s| self.state.step >= s) {
                stopped = true;
                break;
            }
            let out = self.step()?;
            let mut lines = vec![out.log_line()];
            let step = out.step;
            if eval_every > 0 && step % eval_every == 0 {
                if let Some(r) = self.evaluate()? {
                    lines.push(format!(
                        "event=eval step={step} ir_r1={} ir_r5={} tr_r1={} tr_r5={} mean_r1={}",
                        r.ir_r1,
                        r.ir_r5,
                        r.tr_r1,
                        r.tr_r5,
                        r.mean_r1()
                    ));
                    if self.state.best.is_none_or(|b| r.mean_r1() > b.mean_r1) {
                        self.state.best = Some(BestMetric {
                            step,
                            mean_r1: r.mean_r1(),
                        });
                        self.save_checkpoint(&self.out.join("best.ckpt"))?;
                    }
                }
            }
            self.append(&lines)?;
            if (ckpt_every > 0 && step % ckpt_every == 0) || step == budget {
                self.save_checkpoint(&checkpoint_path(&self.out, step))?;
            }
        }
        let final_checkpoint = (!stopped).then(|| checkpoint_path(&self.out, self.state.step));
        if !stopped && self.state.best.is_none() {
            self.save_checkpoint(&self.out.join("best.ckpt"))?;
        }
        let summary = PretrainSummary {
            final_step: self.state.step,
            budget,
            stopped_early: stopped,
            best: self.state.best,
            final_checkpoint,
            loss_means: self.state.stats.means(),
        };
        let path = self.out.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| FlavaError::io(&path, e))?;
        Ok(summary)
    }
}

/// Fresh run of `config` into `out`.
pub fn pretrain(config: &FlavaConfig, out: &Path, opts: &PretrainOptions) -> Result<PretrainSummary> {
    let mut t = Trainer::new(config.clone(), out)?;
    t.state
        .load_pretrained_encoders(opts.image_init.as_deref(), opts.text_init.as_deref())?;
    t.run(opts.stop_after)
}

/// Continues the run saved in `checkpoint`, writing into `out`.
pub fn resume(checkpoint: &Path, out: &Path, opts: &PretrainOptions) -> Result<PretrainSummary> {
    let mut t = Trainer::from_checkpoint(checkpoint, out)?;
    t.run(opts.stop_after)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetSpec;
    use crate::params::model_specs;

    fn tiny() -> FlavaConfig {
        let mut c = FlavaConfig::desk();
        c.model.hidden_size = 16;
        c.model.num_heads = 2;
        c.model.intermediate_size = 32;
        c.model.image_layers = 1;
        c.model.text_layers = 1;
        c.model.multimodal_layers = 1;
        c.model.codebook_size = 16;
        c.model.text_vocab_size = 64;
        c.optim.batch_size = 4;
        c.optim.total_updates = 12;
        c.optim.warmup_updates = 2;
        c.train.budget = 12;
        c.train.eval_interval = 4;
        c.train.checkpoint_interval = 6;
        c.train.codebook_fit_images = 8;
        for d in &mut c.datasets {
            d.source = "synthetic:8".into();
        }
        c
    }

    #[test]
    fn sampler_rules() {
        let mut r = rng::stream(0, &[]);
        for _ in 0..100 {
            assert_eq!(round_robin_sample(&[1.0, 0.0, 0.0], &mut r).unwrap(), 0);
        }
        assert!(matches!(round_robin_sample(&[0.5, 0.6], &mut r), Err(FlavaError::Probabilities { .. })));
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[round_robin_sample(&[0.70, 0.15, 0.15], &mut r).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip([0.70, 0.15, 0.15]) {
            assert!((*c as f64 / 1e5 - p).abs() < 0.01);
        }
    }

    #[test]
    fn cursor_covers_each_epoch_without_repeats() {
        let mut c = Cursor::default();
        let mut seen = Vec::new();
        for _ in 0..3 {
            seen.extend(c.next_rows(10, 3, 1, 0));
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        let b = c.next_rows(10, 3, 1, 0);
        assert_eq!(c.epoch, 1);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn dispatch_by_kind() {
        let cfg = tiny();
        let ds = load_datasets(&cfg, None).unwrap();
        let cb = fit_codebook_from(&ds, &cfg).unwrap();
        let ds = load_datasets(&cfg, Some(&cb)).unwrap();
        let rows = [0, 1, 2, 3];
        let params = FlavaModel::init(&cfg.model).unwrap().params;
        let mut st = TrainState::new(params, 3);
        let text = StepBatch::Texts(ds[2].text_batch(&rows).unwrap());
        let out = train_step(&mut st, &cfg, &text, 2, "t").unwrap();
        assert_eq!(out.losses.names(), vec!["mlm"]);
        let pairs = StepBatch::Pairs {
            pairs: ds[0].pair_batch(&rows).unwrap(),
            image_tokens: ds[0].tokens(&rows).unwrap(),
        };
        let out = train_step(&mut st, &cfg, &pairs, 0, "p").unwrap();
        let names = out.losses.names();
        assert!(names.contains(&"gc") && names.contains(&"itm"));
        assert!(names.contains(&"mmm_image") || names.contains(&"mmm_text"));
        assert!(!names.contains(&"mim") && !names.contains(&"mlm"));
        let images = StepBatch::Images {
            images: ds[1].image_batch(&rows).unwrap(),
            image_tokens: ds[1].tokens(&rows).unwrap(),
        };
        let out = train_step(&mut st, &cfg, &images, 1, "i").unwrap();
        assert_eq!(out.losses.names(), vec!["mim"]);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn pretrained_encoders_leave_multimodal_alone() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut other = cfg.model.clone();
        other.seed = 99;
        let donor = FlavaModel::init(&other).unwrap();
        let ckpt = dir.path().join("donor.ckpt");
        donor.save(&ckpt, serde_json::Value::Null).unwrap();
        let fresh = FlavaModel::init(&cfg.model).unwrap().params;
        let mut p = fresh.clone();
        load_pretrained_encoders(&mut p, None, Some(&ckpt)).unwrap();
        for (n, v) in p.iter() {
            if n.starts_with("text.") {
                assert_eq!(v, donor.params.get(n).unwrap());
            } else {
                assert_eq!(v, fresh.get(n).unwrap(), "{n}");
            }
        }
        let mut wide = cfg.model.clone();
        wide.hidden_size = 32;
        FlavaModel::init(&wide).unwrap().save(&ckpt, serde_json::Value::Null).unwrap();
        let err = load_pretrained_encoders(&mut p, Some(&ckpt), None).unwrap_err();
        assert!(matches!(err, FlavaError::ParamShape { ref name, .. } if name.starts_with("image.")));
        assert_eq!(model_specs(&cfg.model).len(), p.len());
    }

    #[test]
    fn budget_zero_writes_initial_checkpoint_only() {
        let mut cfg = tiny();
        cfg.train.budget = 0;
        let dir = tempfile::tempdir().unwrap();
        let s = pretrain(&cfg, dir.path(), &PretrainOptions::default()).unwrap();
        assert_eq!(s.final_step, 0);
        let ckpts: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| {
                let n = e.unwrap().file_name().into_string().unwrap();
                n.starts_with("checkpoint_").then_some(n)
            })
            .collect();
        assert_eq!(ckpts, vec!["checkpoint_step0.ckpt".to_string()]);
        assert_eq!(std::fs::read_to_string(dir.path().join("metrics.log")).unwrap(), "");
    }

    #[test]
    fn run_resume_and_determinism() {
        let cfg = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        pretrain(&cfg, a.path(), &PretrainOptions::default()).unwrap();
        let log_a = std::fs::read_to_string(a.path().join("metrics.log")).unwrap();
        assert_eq!(log_a.lines().filter(|l| l.starts_with("event=train")).count(), 12);
        assert_eq!(log_a.lines().filter(|l| l.starts_with("event=eval")).count(), 3);
        let killed = PretrainOptions {
            stop_after: Some(8),
            ..Default::default()
        };
        let s = pretrain(&cfg, b.path(), &killed).unwrap();
        assert!(s.stopped_early);
        resume(&checkpoint_path(b.path(), 6), b.path(), &PretrainOptions::default()).unwrap();
        let log_b = std::fs::read_to_string(b.path().join("metrics.log")).unwrap();
        assert_eq!(log_a, log_b);
        let ca = Container::load(&checkpoint_path(a.path(), 12)).unwrap();
        let cb = Container::load(&checkpoint_path(b.path(), 12)).unwrap();
        assert_eq!(ca, cb);
        assert!(a.path().join("best.ckpt").exists());
        assert!(a.path().join("resolved_config.toml").exists());
        FlavaModel::load(&checkpoint_path(a.path(), 12)).unwrap();
    }

    #[test]
    fn eval_source_defaults() {
        let mut cfg = tiny();
        assert_eq!(default_eval_source(&cfg).as_deref(), Some("synthetic:8:9"));
        cfg.datasets = vec![DatasetSpec {
            kind: DatasetKind::UnimodalText,
            source: "synthetic:8".into(),
            sampling_probability: 1.0,
        }];
        assert_eq!(default_eval_source(&cfg), None);
        cfg.train.eval_source = Some("x.jsonl".into());
        assert_eq!(default_eval_source(&cfg).as_deref(), Some("x.jsonl"));
    }
}
