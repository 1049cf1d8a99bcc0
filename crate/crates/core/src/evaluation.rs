//! Zero-shot retrieval and classification, linear probing and fine-tuning.

use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::{ImageBatch, PairBatch, TextBatch};
use crate::config::{OptimConfig, Schedule};
use crate::encoders::{encode_image, encode_multimodal, encode_text, linear};
use crate::error::{FlavaError, Result};
use crate::graph::Var;
use crate::model::FlavaModel;
use crate::objectives::{gc_loss, itm_logits, make_itm_negatives};
use crate::optim::{lr_at, AdamW};
use crate::par;
use crate::params::{linear_specs, ParamSpec, ParamStore, Session};
use crate::rng;
use crate::text::WordTokenizer;

/// Iteration cap of the probe solver.
pub const PROBE_MAX_ITERS: u64 = 1000;
/// Hidden width of the two-layer multimodal classifier head.
pub const TWO_LAYER_HIDDEN: usize = 1536;

fn normalized(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut m = m.to_owned();
    for (i, mut r) in m.rows_mut().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(FlavaError::InvalidInput(format!("row {i} has zero or non-finite norm")));
        }
        r.mapv_inplace(|v| v / n);
    }
    Ok(m)
}

/// L2-normalized item embeddings with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    embeddings: Array2<f64>,
    ids: Vec<usize>,
}

impl RetrievalIndex {
    pub fn new(embeddings: ArrayView2<f64>, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != embeddings.nrows() {
            return Err(FlavaError::shape(format!("{} ids for {} items", ids.len(), embeddings.nrows())));
        }
        Ok(Self {
            embeddings: normalized(embeddings)?,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Item ids ranked by descending cosine similarity to `query`; ties go to
    /// the smaller item id.
    pub fn rank(&self, query: ndarray::ArrayView1<f64>) -> Vec<usize> {
        let sims = self.embeddings.dot(&query);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(self.ids[a].cmp(&self.ids[b])));
        order.into_iter().map(|i| self.ids[i]).collect()
    }
}

/// Fraction of queries whose gold item is among the top `k` items.
pub fn recall_at_k(index: &RetrievalIndex, queries: ArrayView2<f64>, gold: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > index.len() {
        return Err(FlavaError::InvalidInput(format!("k = {k} outside 1..={}", index.len())));
    }
    if gold.len() != queries.nrows() {
        return Err(FlavaError::shape(format!("{} gold ids for {} queries", gold.len(), queries.nrows())));
    }
    if queries.ncols() != index.embeddings.ncols() {
        return Err(FlavaError::shape(format!(
            "query dim {} vs index dim {}",
            queries.ncols(),
            index.embeddings.ncols()
        )));
    }
    if queries.nrows() == 0 {
        return Ok(0.0);
    }
    let q = normalized(queries)?;
    let hits = par::map_indexed(q.nrows(), |i| {
        let g = gold[i];
        let sims = index.embeddings.dot(&q.row(i));
        let Some(gi) = index.ids.iter().position(|&id| id == g) else {
            return false;
        };
        let gs = sims[gi];
        let ahead = (0..index.len())
            .filter(|&j| sims[j] > gs || (sims[j] == gs && index.ids[j] < g))
            .count();
        ahead < k
    });
    Ok(hits.iter().filter(|&&h| h).count() as f64 / q.nrows() as f64)
}

/// Image and text retrieval recall over aligned pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Image retrieval: text query, image items.
    pub ir_r1: f64,
    pub ir_r5: f64,
    /// Text retrieval: image query, text items.
    pub tr_r1: f64,
    pub tr_r5: f64,
}

impl RetrievalReport {
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.ir_r1 + self.tr_r1)
    }

    pub fn lines(&self) -> Vec<(String, f64)> {
        vec![
            ("IR@1".into(), self.ir_r1),
            ("IR@5".into(), self.ir_r5),
            ("TR@1".into(), self.tr_r1),
            ("TR@5".into(), self.tr_r5),
        ]
    }
}

/// Recall at 1 and 5 (capped at the pool size) for aligned embeddings.
pub fn retrieval_report(image_emb: &Array2<f64>, text_emb: &Array2<f64>) -> Result<RetrievalReport> {
    let n = image_emb.nrows();
    let ids: Vec<usize> = (0..n).collect();
    let images = RetrievalIndex::new(image_emb.view(), ids.clone())?;
    let texts = RetrievalIndex::new(text_emb.view(), ids.clone())?;
    let k5 = 5.min(n);
    Ok(RetrievalReport {
        ir_r1: recall_at_k(&images, text_emb.view(), &ids, 1)?,
        ir_r5: recall_at_k(&images, text_emb.view(), &ids, k5)?,
        tr_r1: recall_at_k(&texts, image_emb.view(), &ids, 1)?,
        tr_r5: recall_at_k(&texts, image_emb.view(), &ids, k5)?,
    })
}

pub fn evaluate_retrieval(model: &FlavaModel, images: &ImageBatch, texts: &TextBatch) -> Result<RetrievalReport> {
    retrieval_report(&model.embed_images(images)?, &model.embed_texts(texts)?)
}

/// Predicts the class whose normalized mean template embedding has the
/// highest cosine with each image; ties go to the lower class index.
pub fn zero_shot_classify(image_emb: ArrayView2<f64>, class_templates: &[Array2<f64>]) -> Result<Vec<usize>> {
    if class_templates.is_empty() {
        return Err(FlavaError::InvalidInput("no classes".into()));
    }
    let d = image_emb.ncols();
    let mut classes = Array2::<f64>::zeros((class_templates.len(), d));
    for (c, t) in class_templates.iter().enumerate() {
        if t.nrows() == 0 {
            return Err(FlavaError::InvalidInput(format!("class {c} has no templates")));
        }
        if t.ncols() != d {
            return Err(FlavaError::shape(format!("class {c} template dim {} vs image dim {d}", t.ncols())));
        }
        let mean = normalized(t.view())?.mean_axis(Axis(0)).expect("non-empty");
        classes.row_mut(c).assign(&mean);
    }
    let classes = normalized(classes.view())?;
    let imgs = normalized(image_emb)?;
    let sims = imgs.dot(&classes.t());
    Ok(sims
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for c in 1..r.len() {
                if r[c] > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Zero-shot classification with template strings such as
/// `"a photo of a {}."` filled with each class name.
pub fn zero_shot_with_model(
    model: &FlavaModel,
    images: &ImageBatch,
    class_names: &[String],
    templates: &[String],
) -> Result<Vec<usize>> {
    if templates.is_empty() {
        return Err(FlavaError::InvalidInput("empty template set".into()));
    }
    let tok = WordTokenizer::new(model.config.text_vocab_size, model.config.max_text_len);
    let mut per_class = Vec::with_capacity(class_names.len());
    for name in class_names {
        let filled: Vec<String> = templates.iter().map(|t| t.replace("{}", name)).collect();
        per_class.push(model.embed_texts(&tok.encode_batch(&filled))?);
    }
    zero_shot_classify(model.embed_images(images)?.view(), &per_class)
}

/// The 13 regularization strengths `1e-6, 1e-5, ..., 1e6`.
pub fn lambda_grid() -> Vec<f64> {
    (-6..=6).map(|e| format!("1e{e}").parse().expect("literal")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub best_accuracy: f64,
    pub best_lambda: f64,
    /// `(λ, validation accuracy)` in grid order.
    pub sweep: Vec<(f64, f64)>,
}

struct Logistic<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    classes: usize,
    lambda: f64,
}

impl Logistic<'_> {
    /// Weights `[d, c]` followed by biases `[c]`.
    fn unpack(&self, p: &[f64]) -> (Array2<f64>, Vec<f64>) {
        let (d, c) = (self.x.ncols(), self.classes);
        let w = Array2::from_shape_vec((d, c), p[..d * c].to_vec()).expect("length");
        (w, p[d * c..].to_vec())
    }

    /// Summed cross-entropy plus `λ/2 ‖W‖²` and its gradient.
    fn eval(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let (w, b) = self.unpack(p);
        let mut z = self.x.dot(&w);
        for mut r in z.rows_mut() {
            for (v, bi) in r.iter_mut().zip(&b) {
                *v += bi;
            }
        }
        let mut loss = 0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>();
        for (i, mut r) in z.rows_mut().into_iter().enumerate() {
            let m = r.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            r.mapv_inplace(|v| (v - m).exp());
            let s = r.sum();
            loss += s.ln() + m - (r[self.y[i]].ln() + m);
            r.mapv_inplace(|v| v / s);
            r[self.y[i]] -= 1.0;
        }
        let gw = self.x.t().dot(&z) + &w * self.lambda;
        let gb = z.sum_axis(Axis(0));
        let mut g: Vec<f64> = gw.iter().copied().collect();
        g.extend(gb.iter());
        (loss, g)
    }
}

impl CostFunction for Logistic<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p).0)
    }
}

impl Gradient for Logistic<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(p).1)
    }
}

/// Fits L2-regularized multinomial logistic regression; returns `[d + 1, c]`
/// (weights with the bias as the last row).
pub fn fit_logistic(x: ArrayView2<f64>, y: &[usize], classes: usize, lambda: f64) -> Result<Array2<f64>> {
    let problem = Logistic { x, y, classes, lambda };
    let d = x.ncols();
    let init = vec![0.0; (d + 1) * classes];
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(1e-8)
        .map_err(|e| FlavaError::InvalidInput(e.to_string()))?
        .with_tolerance_cost(1e-12)
        .map_err(|e| FlavaError::InvalidInput(e.to_string()))?;
    let res = Executor::new(problem, solver)
        .configure(|s| s.param(init.clone()).max_iters(PROBE_MAX_ITERS))
        .run();
    let p = match res {
        Ok(r) => r.state.best_param.unwrap_or(init),
        Err(e) => return Err(FlavaError::InvalidInput(format!("probe solver failed: {e}"))),
    };
    let mut out = Array2::<f64>::zeros((d + 1, classes));
    for (i, v) in out.iter_mut().enumerate() {
        *v = p[i];
    }
    Ok(out)
}

pub fn logistic_predict(w: &Array2<f64>, x: ArrayView2<f64>) -> Vec<usize> {
    let d = x.ncols();
    let z = x.dot(&w.slice(ndarray::s![..d, ..])) + &w.row(d);
    z.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for c in 1..r.len() {
                if r[c] > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64 / gold.len().max(1) as f64
}

/// Sweeps `lambdas` and reports the best validation accuracy (ties keep the
/// earlier λ).
pub fn linear_probe(
    train_x: ArrayView2<f64>,
    train_y: &[usize],
    val_x: ArrayView2<f64>,
    val_y: &[usize],
    lambdas: &[f64],
) -> Result<ProbeResult> {
    if train_y.len() != train_x.nrows() || val_y.len() != val_x.nrows() {
        return Err(FlavaError::shape("labels and features disagree in length".to_string()));
    }
    let classes = train_y.iter().chain(val_y).max().map_or(0, |m| m + 1);
    let mut seen = train_y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(FlavaError::InvalidInput("linear probe needs at least two classes".into()));
    }
    if lambdas.is_empty() {
        return Err(FlavaError::InvalidInput("empty λ grid".into()));
    }
    let fits = par::map_indexed(lambdas.len(), |i| fit_logistic(train_x, train_y, classes, lambdas[i]));
    let mut sweep = Vec::with_capacity(lambdas.len());
    for (l, w) in lambdas.iter().zip(fits) {
        let w = w?;
        sweep.push((*l, accuracy(&logistic_predict(&w, val_x), val_y)));
    }
    let (best_lambda, best_accuracy) = sweep
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, (l, a)| if a > best.1 { (l, a) } else { best });
    Ok(ProbeResult {
        best_accuracy,
        best_lambda,
        sweep,
    })
}

/// Deterministic shuffled split; returns `(train rows, validation rows)`.
pub fn split_rows(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng::stream(seed, &[0x5eed]));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let val = rows.split_off(n - n_val.min(n));
    (rows, val)
}

/// Probe features: the image encoder's final-layer CLS states, taken before
/// the multimodal encoder.
pub fn probe_features(model: &FlavaModel, images: &ImageBatch) -> Result<Array2<f64>> {
    let mut parts = Vec::new();
    for start in (0..images.batch()).step_by(crate::model::EMBED_CHUNK) {
        let rows: Vec<usize> = (start..(start + crate::model::EMBED_CHUNK).min(images.batch())).collect();
        parts.push(model.encode_image(&images.select(&rows))?.cls());
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| FlavaError::shape(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    VisionCls,
    TextCls,
    TextRegression,
    MultimodalCls,
    /// Classifier over concatenated image and text CLS states, without the
    /// multimodal encoder.
    ConcatBaseline,
}

impl Task {
    pub fn input_dim(self, hidden: usize) -> usize {
        match self {
            Task::ConcatBaseline => 2 * hidden,
            _ => hidden,
        }
    }

    pub fn is_regression(self) -> bool {
        self == Task::TextRegression
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    TwoLayer { hidden: usize },
}

/// A task head; parameters live under `task_head.`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub outputs: usize,
}

pub const HEAD_PREFIX: &str = "task_head";

impl ClassifierHead {
    pub fn new(kind: HeadKind, input_dim: usize, outputs: usize) -> Result<Self> {
        if input_dim == 0 || outputs == 0 {
            return Err(FlavaError::InvalidInput("head dimensions must be positive".into()));
        }
        Ok(Self { kind, input_dim, outputs })
    }

    /// The full-size multimodal head: two layers with 1536 hidden units.
    pub fn two_layer(input_dim: usize, outputs: usize) -> Self {
        Self {
            kind: HeadKind::TwoLayer { hidden: TWO_LAYER_HIDDEN },
            input_dim,
            outputs,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        match self.kind {
            HeadKind::Linear => linear_specs(&format!("{HEAD_PREFIX}.out"), self.input_dim, self.outputs),
            HeadKind::TwoLayer { hidden } => {
                let mut v = linear_specs(&format!("{HEAD_PREFIX}.fc1"), self.input_dim, hidden);
                v.extend(linear_specs(&format!("{HEAD_PREFIX}.fc2"), hidden, self.outputs));
                v
            }
        }
    }

    pub fn apply(&self, s: &mut Session, x: Var) -> Var {
        match self.kind {
            HeadKind::Linear => linear(s, x, &format!("{HEAD_PREFIX}.out")),
            HeadKind::TwoLayer { .. } => {
                let h = linear(s, x, &format!("{HEAD_PREFIX}.fc1"));
                let h = s.graph.gelu(h);
                linear(s, h, &format!("{HEAD_PREFIX}.fc2"))
            }
        }
    }
}

/// Logits of `head` over concatenated image and text CLS states.
pub fn concat_baseline_head(
    img_cls: &Array2<f64>,
    txt_cls: &Array2<f64>,
    head: &ClassifierHead,
    params: &ParamStore,
) -> Result<Array2<f64>> {
    if img_cls.nrows() != txt_cls.nrows() || img_cls.ncols() + txt_cls.ncols() != head.input_dim {
        return Err(FlavaError::shape(format!(
            "concat of {:?} and {:?} does not match head input {}",
            img_cls.dim(),
            txt_cls.dim(),
            head.input_dim
        )));
    }
    params.check(&head.specs())?;
    let x = ndarray::concatenate(Axis(1), &[img_cls.view(), txt_cls.view()]).map_err(|e| FlavaError::shape(e.to_string()))?;
    let mut s = Session::inference(params);
    let xv = s.graph.constant(x);
    let out = head.apply(&mut s, xv);
    Ok(s.graph.value(out).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecipe {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_updates: u64,
    pub total_updates: u64,
    /// Train only the head; the trunk stays fixed.
    pub freeze_trunk: bool,
}

impl FinetuneRecipe {
    /// VQA-style multimodal fine-tuning.
    pub fn vqa() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            warmup_updates: 2000,
            total_updates: 44_000,
            freeze_trunk: false,
        }
    }

    /// Entailment and meme-classification style fine-tuning.
    pub fn snli_ve() -> Self {
        Self {
            learning_rate: 1e-5,
            total_updates: 24_000,
            ..Self::vqa()
        }
    }

    pub fn hateful_memes() -> Self {
        Self::snli_ve()
    }

    /// Small recipe for desk-scale fixtures.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            warmup_updates: 10,
            total_updates: 120,
            freeze_trunk: false,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vqa" => Some(Self::vqa()),
            "snli_ve" => Some(Self::snli_ve()),
            "hateful_memes" => Some(Self::hateful_memes()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    fn optim(&self) -> OptimConfig {
        OptimConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            schedule: Schedule::WarmupCosine,
            warmup_updates: self.warmup_updates,
            total_updates: self.total_updates,
            weight_decay: self.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs and targets for a fine-tuning task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub images: Option<ImageBatch>,
    pub texts: Option<TextBatch>,
    pub targets: Targets,
}

impl TaskData {
    fn select(&self, rows: &[usize]) -> Self {
        Self {
            images: self.images.as_ref().map(|i| i.select(rows)),
            texts: self.texts.as_ref().map(|t| t.select(rows)),
            targets: match &self.targets {
                Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
                Targets::Values(v) => Targets::Values(rows.iter().map(|&r| v[r]).collect()),
            },
        }
    }

    fn check(&self, task: Task) -> Result<()> {
        let need_img = matches!(task, Task::VisionCls | Task::MultimodalCls | Task::ConcatBaseline);
        let need_txt = !matches!(task, Task::VisionCls);
        if need_img && self.images.is_none() || need_txt && self.texts.is_none() {
            return Err(FlavaError::InvalidInput(format!("task {task:?} is missing an input modality")));
        }
        match (&self.targets, task.is_regression()) {
            (Targets::Values(_), true) | (Targets::Classes(_), false) => Ok(()),
            _ => Err(FlavaError::InvalidInput(format!("task {task:?} does not match its target type"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneResult {
    /// Trunk plus `task_head.` parameters.
    pub params: ParamStore,
    pub head: ClassifierHead,
    pub task: Task,
    /// `accuracy` for classification, `mse` for regression.
    pub metric_name: &'static str,
    pub metric: f64,
}

fn task_features(s: &mut Session, model: &FlavaModel, task: Task, data: &TaskData) -> Result<Var> {
    let cfg = &model.config;
    match task {
        Task::VisionCls => {
            let e = encode_image(s, cfg, data.images.as_ref().expect("checked"), None)?;
            Ok(e.cls(s))
        }
        Task::TextCls | Task::TextRegression => {
            let e = encode_text(s, cfg, data.texts.as_ref().expect("checked"))?;
            Ok(e.cls(s))
        }
        Task::MultimodalCls => {
            let i = encode_image(s, cfg, data.images.as_ref().expect("checked"), None)?;
            let t = encode_text(s, cfg, data.texts.as_ref().expect("checked"))?;
            let m = encode_multimodal(s, cfg, &i, &t)?;
            Ok(m.cls(s))
        }
        Task::ConcatBaseline => {
            let i = encode_image(s, cfg, data.images.as_ref().expect("checked"), None)?;
            let t = encode_text(s, cfg, data.texts.as_ref().expect("checked"))?;
            let ci = i.cls(s);
            let ct = t.cls(s);
            let a = s.graph.transpose(ci);
            let b = s.graph.transpose(ct);
            let cat = s.graph.concat_rows(&[a, b]);
            Ok(s.graph.transpose(cat))
        }
    }
}

fn head_outputs(params: &ParamStore, model: &FlavaModel, head: &ClassifierHead, task: Task, data: &TaskData) -> Result<Array2<f64>> {
    let mut s = Session::inference(params);
    let x = task_features(&mut s, model, task, data)?;
    let out = head.apply(&mut s, x);
    Ok(s.graph.value(out).clone())
}

/// Scores `data` with fine-tuned parameters: accuracy or mean squared error.
pub fn evaluate_task(result: &FinetuneResult, model: &FlavaModel, data: &TaskData) -> Result<f64> {
    data.check(result.task)?;
    let mut preds = Vec::new();
    for start in (0..data.targets.len()).step_by(crate::model::EMBED_CHUNK) {
        let rows: Vec<usize> = (start..(start + crate::model::EMBED_CHUNK).min(data.targets.len())).collect();
        let out = head_outputs(&result.params, model, &result.head, result.task, &data.select(&rows))?;
        preds.extend(out.rows().into_iter().map(|r| r.to_owned()));
    }
    Ok(match &data.targets {
        Targets::Classes(c) => {
            let p: Vec<usize> = preds
                .iter()
                .map(|r| (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
                .collect();
            accuracy(&p, c)
        }
        Targets::Values(v) => preds.iter().zip(v).map(|(r, t)| (r[0] - t).powi(2)).sum::<f64>() / v.len() as f64,
    })
}

/// Fine-tunes `head` (and the trunk unless frozen) on `train`, then scores `eval`.
pub fn finetune_head(
    model: &FlavaModel,
    task: Task,
    head: ClassifierHead,
    recipe: &FinetuneRecipe,
    train: &TaskData,
    eval: &TaskData,
    seed: u64,
) -> Result<FinetuneResult> {
    train.check(task)?;
    eval.check(task)?;
    let hidden = model.config.hidden_size;
    if head.input_dim != task.input_dim(hidden) {
        return Err(FlavaError::shape(format!(
            "head input {} does not match task {task:?} input {}",
            head.input_dim,
            task.input_dim(hidden)
        )));
    }
    if task.is_regression() != (head.outputs == 1 && task.is_regression()) {
        return Err(FlavaError::InvalidInput("regression head must have one output".into()));
    }
    if let Targets::Classes(c) = &train.targets {
        if let Some(&bad) = c.iter().find(|&&c| c >= head.outputs) {
            return Err(FlavaError::InvalidInput(format!("class {bad} outside head outputs {}", head.outputs)));
        }
    }
    let mut params = model.params.clone();
    for (k, v) in ParamStore::init(&head.specs(), rng::derive(seed, &[0x4ead])).into_map() {
        params.insert(k, v);
    }
    let optim = recipe.optim();
    let mut opt = AdamW::new();
    let n = train.targets.len();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let frozen: &[&str] = if recipe.freeze_trunk {
        &["image.", "text.", "multimodal.", "heads."]
    } else {
        &["heads."]
    };
    for step in 1..=recipe.total_updates {
        let mut rows = Vec::with_capacity(recipe.batch_size);
        while rows.len() < recipe.batch_size.min(n) {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng::stream(seed, &[0xf1e, epoch]));
                epoch += 1;
                cursor = 0;
            }
            rows.push(order[cursor]);
            cursor += 1;
        }
        let batch = train.select(&rows);
        let grads = {
            let mut s = Session::training(&params).freeze(frozen);
            let x = task_features(&mut s, model, task, &batch)?;
            let out = head.apply(&mut s, x);
            let loss = match &batch.targets {
                Targets::Classes(c) => s.graph.cross_entropy(out, c.clone()),
                Targets::Values(v) => s.graph.mean_squared_error(out, v.clone()),
            };
            if !s.graph.scalar(loss).is_finite() {
                return Err(FlavaError::NonFinite {
                    step,
                    loss: format!("task={:?} value={}", task, s.graph.scalar(loss)),
                    batch_id: format!("finetune rows {rows:?}"),
                    dump: None,
                });
            }
            s.param_grads(loss)
        };
        opt.update(&mut params, &grads, lr_at(step, &optim)?, &optim);
    }
    let mut result = FinetuneResult {
        params,
        head,
        task,
        metric_name: if task.is_regression() { "mse" } else { "accuracy" },
        metric: 0.0,
    };
    result.metric = evaluate_task(&result, model, eval)?;
    Ok(result)
}

/// Model-level diagnostics on a set of aligned training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    /// Mean contrastive loss over batches of `batch_size`.
    pub gc_loss: f64,
    /// Matching accuracy with injected negatives.
    pub itm_accuracy: f64,
    pub retrieval: RetrievalReport,
}

/// Batches are drawn from a `seed`-shuffled order of the pairs, so they mix
/// items the way training batches do.
pub fn pair_diagnostics(
    model: &FlavaModel,
    pairs: &PairBatch,
    batch_size: usize,
    neg_fraction: f64,
    seed: u64,
) -> Result<PairDiagnostics> {
    let n = pairs.batch();
    let cfg = &model.config;
    let mut gc = Vec::new();
    let mut correct = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0xd1a9]));
    for (bi, rows) in order.chunks(batch_size.max(1)).enumerate() {
        let rows = rows.to_vec();
        let images = pairs.images.select(&rows);
        let texts = pairs.texts.select(&rows);
        let mut s = Session::inference(&model.params);
        let i = encode_image(&mut s, cfg, &images, None)?;
        let t = encode_text(&mut s, cfg, &texts)?;
        if rows.len() > 1 {
            let (l, _) = gc_loss(&mut s, &i, &t);
            gc.push(s.graph.scalar(l));
        }
        let sub = PairBatch::aligned(images, texts)?;
        let frac = if rows.len() > 1 { neg_fraction } else { 0.0 };
        let neg = make_itm_negatives(&sub, frac, &mut rng::stream(seed, &[bi as u64]))?;
        let tn = encode_text(&mut s, cfg, &neg.batch.texts)?;
        let m = encode_multimodal(&mut s, cfg, &i, &tn)?;
        let logits = itm_logits(&mut s, &m);
        let lv = s.graph.value(logits);
        correct += neg
            .batch
            .match_labels
            .iter()
            .enumerate()
            .filter(|&(r, &y)| (lv[[r, 0]] > 0.0) == y)
            .count();
    }
    Ok(PairDiagnostics {
        gc_loss: if gc.is_empty() { 0.0 } else { gc.iter().sum::<f64>() / gc.len() as f64 },
        itm_accuracy: correct as f64 / n.max(1) as f64,
        retrieval: evaluate_retrieval(model, &pairs.images, &pairs.texts)?,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut g = rng::stream(seed, &[]);
        Array2::from_shape_simple_fn((r, c), || g.sample(StandardNormal))
    }

    /// Ranks every item by an explicit sort and checks the gold position.
    fn sort_oracle(items: &Array2<f64>, ids: &[usize], queries: &Array2<f64>, gold: &[usize], k: usize) -> f64 {
        let mut hits = 0;
        for (qi, q) in queries.rows().into_iter().enumerate() {
            let qn = &q / q.dot(&q).sqrt();
            let mut scored: Vec<(f64, usize)> = items
                .rows()
                .into_iter()
                .zip(ids)
                .map(|(r, &id)| (r.dot(&qn) / r.dot(&r).sqrt(), id))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            if scored.iter().take(k).any(|&(_, id)| id == gold[qi]) {
                hits += 1;
            }
        }
        hits as f64 / queries.nrows() as f64
    }

    #[test]
    fn recall_basics() {
        let idx = RetrievalIndex::new(array![[1.0, 0.0]].view(), vec![0]).unwrap();
        assert_eq!(recall_at_k(&idx, array![[3.0, 1.0]].view(), &[0], 1).unwrap(), 1.0);
        let idx = RetrievalIndex::new(array![[1.0, 0.0], [0.9, 0.435889894354]].view(), vec![0, 1]).unwrap();
        assert_eq!(recall_at_k(&idx, array![[0.0, 1.0]].view(), &[0], 1).unwrap(), 0.0);
        assert!(recall_at_k(&idx, array![[0.0, 1.0]].view(), &[0], 3).is_err());
    }

    #[test]
    fn recall_matches_sort_oracle_and_is_monotone() {
        for f in 0..20u64 {
            let items = randn(f, 20, 4);
            let queries = randn(100 + f, 15, 4);
            let ids: Vec<usize> = (0..20).map(|i| (i * 7) % 20).collect();
            let gold: Vec<usize> = (0..15).map(|i| (i * 3) % 20).collect();
            let idx = RetrievalIndex::new(items.view(), ids.clone()).unwrap();
            let mut prev = 0.0;
            for k in 1..=20 {
                let r = recall_at_k(&idx, queries.view(), &gold, k).unwrap();
                assert_eq!(r, sort_oracle(&items, &ids, &queries, &gold, k));
                assert!(r >= prev);
                prev = r;
                let scaled = recall_at_k(&idx, (&queries * 5.0).view(), &gold, k).unwrap();
                assert_eq!(r, scaled);
            }
        }
    }

    #[test]
    fn ties_prefer_lower_item_id() {
        let idx = RetrievalIndex::new(array![[1.0, 0.0], [1.0, 0.0]].view(), vec![5, 2]).unwrap();
        assert_eq!(idx.rank(array![1.0, 0.0].view()), vec![2, 5]);
        assert_eq!(recall_at_k(&idx, array![[1.0, 0.0]].view(), &[2], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&idx, array![[1.0, 0.0]].view(), &[5], 1).unwrap(), 0.0);
    }

    #[test]
    fn zero_shot_rules() {
        let imgs = randn(1, 6, 3);
        assert_eq!(zero_shot_classify(imgs.view(), &[randn(2, 2, 3)]).unwrap(), vec![0; 6]);
        let classes: Vec<Array2<f64>> = (0..3).map(|c| Array2::from_shape_fn((1, 3), |(_, j)| f64::from(j == c))).collect();
        assert_eq!(zero_shot_classify(array![[0.1, 0.2, 5.0]].view(), &classes).unwrap(), vec![2]);
        assert_eq!(zero_shot_classify(array![[0.1, 0.2, 5.0]].view(), &classes).unwrap(),
            zero_shot_classify(array![[1.0, 2.0, 50.0]].view(), &classes).unwrap());
        assert!(zero_shot_classify(imgs.view(), &[Array2::zeros((0, 3))]).is_err());
        // Two templates averaged after normalization.
        let t = array![[2.0, 0.0], [0.0, 1.0]];
        let other = array![[1.0, -1.0]];
        let img = array![[0.70710678, 0.70710678]];
        assert_eq!(zero_shot_classify(img.view(), &[other, t]).unwrap(), vec![1]);
    }

    #[test]
    fn lambda_grid_endpoints() {
        let g = lambda_grid();
        assert_eq!(g.len(), 13);
        assert_eq!(g[0], 1e-6);
        assert_eq!(g[12], 1e6);
    }

    #[test]
    fn probe_on_separable_blobs() {
        let mut r = rng::stream(7, &[]);
        let n = 200;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let c = if i % 2 == 0 { -3.0 } else { 3.0 };
            c * if j == 0 { 1.0 } else { 0.5 } + r.sample::<f64, _>(StandardNormal) * 0.5
        });
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let (tr, va) = split_rows(n, 0.25, 1);
        let sel = |rows: &[usize]| (x.select(Axis(0), rows), rows.iter().map(|&i| y[i]).collect::<Vec<_>>());
        let (xt, yt) = sel(&tr);
        let (xv, yv) = sel(&va);
        let res = linear_probe(xt.view(), &yt, xv.view(), &yv, &[1e-6, 1e-3]).unwrap();
        assert_eq!(res.best_accuracy, 1.0);
        assert!(linear_probe(xt.view(), &vec![0; yt.len()], xv.view(), &yv, &[1.0]).is_err());
    }

    #[test]
    fn concat_head_uses_both_halves() {
        let head = ClassifierHead::new(HeadKind::Linear, 4, 2).unwrap();
        let params = ParamStore::init(&head.specs(), 3);
        let img = randn(1, 3, 2);
        let zero = Array2::zeros((3, 2));
        let logits = concat_baseline_head(&img, &zero, &head, &params).unwrap();
        let w = params.get("task_head.out.weight").unwrap();
        let b = params.get("task_head.out.bias").unwrap();
        let expected = img.dot(&w.slice(ndarray::s![..2, ..])) + b;
        assert!((logits - expected).iter().all(|v| v.abs() < 1e-12));
        assert!(concat_baseline_head(&img, &randn(2, 3, 3), &head, &params).is_err());
        assert_eq!(Task::ConcatBaseline.input_dim(768), 1536);
        assert_eq!(ClassifierHead::two_layer(768, 3).kind, HeadKind::TwoLayer { hidden: 1536 });
    }

    #[test]
    fn probe_on_random_labels_is_chance() {
        let n = 10_000;
        let x = randn(11, n, 8);
        let mut r = rng::stream(12, &[]);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let (tr, va) = split_rows(n, 0.25, 3);
        let yt: Vec<usize> = tr.iter().map(|&i| y[i]).collect();
        let yv: Vec<usize> = va.iter().map(|&i| y[i]).collect();
        let res = linear_probe(x.select(Axis(0), &tr).view(), &yt, x.select(Axis(0), &va).view(), &yv, &lambda_grid()).unwrap();
        assert!((0.45..=0.55).contains(&res.best_accuracy), "{res:?}");
        assert_eq!(res.sweep.len(), 13);
    }

    /// Product of Givens rotations on random axis pairs.
    fn rotation(d: usize, angles: &[(usize, usize, f64)]) -> Array2<f64> {
        let mut q = Array2::<f64>::eye(d);
        for &(i, j, t) in angles {
            let (i, j) = (i % d, j % d);
            if i == j {
                continue;
            }
            let mut g = Array2::<f64>::eye(d);
            g[[i, i]] = t.cos();
            g[[j, j]] = t.cos();
            g[[i, j]] = -t.sin();
            g[[j, i]] = t.sin();
            q = q.dot(&g);
        }
        q
    }

    #[test]
    fn finetune_warm_cool_fixture() {
        use crate::config::FlavaConfig;
        use crate::synthetic;
        let cfg = FlavaConfig::desk();
        let model = FlavaModel::init(&cfg.model).unwrap();
        let tok = WordTokenizer::new(cfg.model.text_vocab_size, cfg.model.max_text_len);
        // Warm colors (red, yellow) against cool ones (green, blue).
        let fixture = |n: usize, variant: u64| {
            let caps = synthetic::captions(n);
            let seqs: Vec<Vec<u32>> = caps.iter().map(|c| tok.encode(c)).collect();
            TaskData {
                images: Some(synthetic::images(n, cfg.model.image_size, variant).unwrap()),
                texts: Some(TextBatch::from_sequences(&seqs)),
                targets: Targets::Classes((0..n).map(|i| usize::from(matches!(synthetic::Scene::of(i).color, 1 | 2))).collect()),
            }
        };
        let train = fixture(200, 0);
        let eval = fixture(64, 9);
        let recipe = FinetuneRecipe::desk();
        let hidden = cfg.model.hidden_size;
        for task in [Task::MultimodalCls, Task::ConcatBaseline] {
            let head = ClassifierHead::new(HeadKind::Linear, task.input_dim(hidden), 2).unwrap();
            let res = finetune_head(&model, task, head, &recipe, &train, &eval, 0).unwrap();
            assert!(res.metric >= 0.95, "{task:?}: {}", res.metric);
        }
    }

    #[test]
    fn recipes() {
        let v = FinetuneRecipe::vqa();
        assert_eq!((v.learning_rate, v.total_updates, v.batch_size, v.warmup_updates), (1e-4, 44_000, 256, 2000));
        assert_eq!(v.weight_decay, 1e-2);
        assert_eq!(FinetuneRecipe::snli_ve().learning_rate, 1e-5);
        assert_eq!(FinetuneRecipe::hateful_memes().total_updates, 24_000);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]
        #[test]
        fn probe_is_rotation_invariant(seed in 0u64..1000, angles in proptest::collection::vec((0usize..4, 0usize..4, -3.0f64..3.0), 1..6)) {
            let n = 120;
            let mut r = rng::stream(seed, &[]);
            let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let x = Array2::from_shape_fn((n, 4), |(i, j)| {
                f64::from(u8::from(j == y[i])) * 1.5 + r.sample::<f64, _>(StandardNormal)
            });
            let q = rotation(4, &angles);
            let xr = x.dot(&q);
            let (tr, va) = split_rows(n, 0.3, seed);
            let yt: Vec<usize> = tr.iter().map(|&i| y[i]).collect();
            let yv: Vec<usize> = va.iter().map(|&i| y[i]).collect();
            let lambdas = [1e-2, 1.0, 1e2];
            let a = linear_probe(x.select(Axis(0), &tr).view(), &yt, x.select(Axis(0), &va).view(), &yv, &lambdas).unwrap();
            let b = linear_probe(xr.select(Axis(0), &tr).view(), &yt, xr.select(Axis(0), &va).view(), &yv, &lambdas).unwrap();
            proptest::prop_assert!((a.best_accuracy - b.best_accuracy).abs() <= 1e-3, "{:?} vs {:?}", a, b);
        }
    }
}
