//! Pretraining losses.
//!
//! Pair data trains the global contrastive loss (unmasked inputs), masked
//! multimodal modeling (masked inputs) and image-text matching (inputs with
//! injected negatives). Unimodal data trains masked image modeling and masked
//! language modeling on the respective encoders.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::PairBatch;
use crate::config::LossWeights;
use crate::encoders::{layer_norm, linear, Encoded};
use crate::error::{FlavaError, Result};
use crate::graph::{Graph, Var};
use crate::masking::MaskPlan;
use crate::params::Session;

/// Named scalar losses of one step; absent entries had no input.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub gc: Option<f64>,
    pub mmm_image: Option<f64>,
    pub mmm_text: Option<f64>,
    pub itm: Option<f64>,
    pub mim: Option<f64>,
    pub mlm: Option<f64>,
}

impl LossBundle {
    pub const NAMES: [&'static str; 6] = ["gc", "mmm_image", "mmm_text", "itm", "mim", "mlm"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "gc" => self.gc,
            "mmm_image" => self.mmm_image,
            "mmm_text" => self.mmm_text,
            "itm" => self.itm,
            "mim" => self.mim,
            "mlm" => self.mlm,
            _ => None,
        }
    }

    /// Present losses in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        Self::NAMES.iter().filter_map(|&n| self.get(n).map(|v| (n, v))).collect()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries().into_iter().map(|(n, _)| n).collect()
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        self.entries().iter().map(|&(n, v)| weight(w, n) * v).sum()
    }
}

pub fn weight(w: &LossWeights, name: &str) -> f64 {
    match name {
        "gc" => w.gc,
        "mmm_image" => w.mmm_image,
        "mmm_text" => w.mmm_text,
        "itm" => w.itm,
        "mim" => w.mim,
        "mlm" => w.mlm,
        _ => 0.0,
    }
}

/// Graph handles for the losses of one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossVars {
    pub gc: Option<Var>,
    pub mmm_image: Option<Var>,
    pub mmm_text: Option<Var>,
    pub itm: Option<Var>,
    pub mim: Option<Var>,
    pub mlm: Option<Var>,
}

impl LossVars {
    fn pairs(&self) -> [(&'static str, Option<Var>); 6] {
        [
            ("gc", self.gc),
            ("mmm_image", self.mmm_image),
            ("mmm_text", self.mmm_text),
            ("itm", self.itm),
            ("mim", self.mim),
            ("mlm", self.mlm),
        ]
    }

    pub fn bundle(&self, g: &Graph) -> LossBundle {
        let v = |x: Option<Var>| x.map(|x| g.scalar(x));
        LossBundle {
            gc: v(self.gc),
            mmm_image: v(self.mmm_image),
            mmm_text: v(self.mmm_text),
            itm: v(self.itm),
            mim: v(self.mim),
            mlm: v(self.mlm),
        }
    }

    /// Weighted sum of the present losses; `None` when nothing is present.
    pub fn total(&self, g: &mut Graph, w: &LossWeights) -> Option<Var> {
        let terms: Vec<(Var, f64)> = self
            .pairs()
            .iter()
            .filter_map(|&(n, v)| v.map(|v| (v, weight(w, n))))
            .collect();
        (!terms.is_empty()).then(|| g.weighted_sum(&terms))
    }
}

/// Symmetric contrastive loss inside a graph.
///
/// `scale` is a `[1, 1]` var multiplying the cosine similarities (the inverse
/// temperature). Returns `(loss, logits)` with `logits[i][j]` comparing image
/// `i` with text `j`.
pub fn contrastive_graph(g: &mut Graph, img: Var, txt: Var, scale: Var) -> (Var, Var) {
    let n = g.shape(img).0;
    let ni = g.l2_normalize_rows(img);
    let nt = g.l2_normalize_rows(txt);
    let sims = g.matmul_t(ni, nt);
    let logits = g.scale_by(sims, scale);
    let targets: Vec<usize> = (0..n).collect();
    let rows = g.cross_entropy(logits, targets.clone());
    let lt = g.transpose(logits);
    let cols = g.cross_entropy(lt, targets);
    (g.weighted_sum(&[(rows, 0.5), (cols, 0.5)]), logits)
}

/// Result of a standalone contrastive evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub logits: Array2<f64>,
    /// d loss / d raw image embeddings.
    pub grad_image: Array2<f64>,
    /// d loss / d raw text embeddings.
    pub grad_text: Array2<f64>,
}

pub fn check_embeddings(img: &Array2<f64>, txt: &Array2<f64>) -> Result<()> {
    if img.dim() != txt.dim() || img.nrows() == 0 {
        return Err(FlavaError::shape(format!(
            "contrastive inputs {:?} and {:?} must be equal and non-empty",
            img.dim(),
            txt.dim()
        )));
    }
    for (name, m) in [("image", img), ("text", txt)] {
        if let Some(r) = m.rows().into_iter().position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(FlavaError::InvalidInput(format!("{name} embedding {r} has zero norm")));
        }
    }
    Ok(())
}

/// Symmetric contrastive loss on raw embeddings at a fixed temperature.
pub fn contrastive_loss(img: &Array2<f64>, txt: &Array2<f64>, temperature: f64) -> Result<ContrastiveOutput> {
    check_embeddings(img, txt)?;
    if !(temperature > 0.0) {
        return Err(FlavaError::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    let mut g = Graph::new();
    let i = g.leaf(img.clone());
    let t = g.leaf(txt.clone());
    let scale = g.constant(Array2::from_elem((1, 1), 1.0 / temperature));
    let (loss, logits) = contrastive_graph(&mut g, i, t, scale);
    let mut grads = g.backward(loss);
    Ok(ContrastiveOutput {
        loss: g.scalar(loss),
        logits: g.value(logits).clone(),
        grad_image: grads.take(i).expect("image leaf"),
        grad_text: grads.take(t).expect("text leaf"),
    })
}

/// Dense → GELU → LayerNorm → decoder. A head without its own decoder weight
/// decodes against the text token embedding table.
pub fn prediction_head(s: &mut Session, x: Var, prefix: &str) -> Var {
    let h = linear(s, x, &format!("{prefix}.dense"));
    let h = s.graph.gelu(h);
    let h = layer_norm(s, h, &format!("{prefix}.ln"));
    let wname = format!("{prefix}.decoder.weight");
    if s.has(&wname) {
        linear(s, h, &format!("{prefix}.decoder"))
    } else {
        let table = s.param("text.token_embeddings");
        let logits = s.graph.matmul_t(h, table);
        let b = s.param(&format!("{prefix}.decoder.bias"));
        s.graph.add_row(logits, b)
    }
}

/// Cross-entropy of `head_prefix` predictions at the masked positions only.
/// `None` for an empty plan.
pub fn masked_prediction_loss(
    s: &mut Session,
    states: &Encoded,
    plan: &MaskPlan,
    head_prefix: &str,
) -> Result<Option<Var>> {
    plan.validate()?;
    if plan.batch != states.batch || plan.seq_len != states.seq {
        return Err(FlavaError::MaskPlan(format!(
            "plan for {}x{} applied to states {}x{}",
            plan.batch, plan.seq_len, states.batch, states.seq
        )));
    }
    if plan.is_empty() {
        return Ok(None);
    }
    let rows = s.graph.gather_rows(states.states, plan.positions.clone());
    let logits = prediction_head(s, rows, head_prefix);
    let classes = s.graph.shape(logits).1;
    if let Some(&l) = plan.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(FlavaError::TokenOutOfRange { id: l, vocab: classes });
    }
    let targets: Vec<usize> = plan.labels.iter().map(|&l| l as usize).collect();
    Ok(Some(s.graph.cross_entropy(logits, targets)))
}

pub fn mim_loss(s: &mut Session, image: &Encoded, plan: &MaskPlan) -> Result<Option<Var>> {
    masked_prediction_loss(s, image, plan, "heads.mim")
}

pub fn mlm_loss(s: &mut Session, text: &Encoded, plan: &MaskPlan) -> Result<Option<Var>> {
    masked_prediction_loss(s, text, plan, "heads.mlm")
}

/// Re-expresses unimodal image and text plans in multimodal sequence
/// coordinates (`[CLS_M] ++ image ++ text`).
pub fn multimodal_plans(
    image_plan: &MaskPlan,
    text_plan: &MaskPlan,
    mm_seq: usize,
) -> Result<(MaskPlan, MaskPlan)> {
    let si = image_plan.seq_len;
    if image_plan.batch != text_plan.batch || 1 + si + text_plan.seq_len != mm_seq {
        return Err(FlavaError::MaskPlan(format!(
            "plans {}x{} and {}x{} do not tile a multimodal sequence of {}",
            image_plan.batch, si, text_plan.batch, text_plan.seq_len, mm_seq
        )));
    }
    let remap = |p: &MaskPlan, offset: usize| MaskPlan {
        batch: p.batch,
        seq_len: mm_seq,
        positions: p
            .positions
            .iter()
            .map(|&q| (q / p.seq_len) * mm_seq + offset + q % p.seq_len)
            .collect(),
        labels: p.labels.clone(),
        replacements: p.replacements.clone(),
    };
    Ok((remap(image_plan, 1), remap(text_plan, 1 + si)))
}

/// Masked multimodal modeling: `(image component, text component)`.
pub fn mmm_loss(
    s: &mut Session,
    multimodal: &Encoded,
    image_plan: &MaskPlan,
    text_plan: &MaskPlan,
) -> Result<(Option<Var>, Option<Var>)> {
    let (ip, tp) = multimodal_plans(image_plan, text_plan, multimodal.seq)?;
    let image = masked_prediction_loss(s, multimodal, &ip, "heads.mmm_image")?;
    let text = masked_prediction_loss(s, multimodal, &tp, "heads.mmm_text")?;
    Ok((image, text))
}

/// Matching logits `[batch, 1]` from the multimodal CLS state.
pub fn itm_logits(s: &mut Session, multimodal: &Encoded) -> Var {
    let cls = multimodal.cls(s);
    linear(s, cls, "heads.itm")
}

/// Binary cross-entropy of the matching classifier; also returns the logits.
pub fn itm_loss(s: &mut Session, multimodal: &Encoded, labels: &[bool]) -> Result<(Var, Var)> {
    if labels.len() != multimodal.batch {
        return Err(FlavaError::shape(format!(
            "{} match labels for batch {}",
            labels.len(),
            multimodal.batch
        )));
    }
    let logits = itm_logits(s, multimodal);
    let loss = s.graph.binary_cross_entropy(logits, labels.to_vec());
    Ok((loss, logits))
}

/// Projected contrastive embeddings `(image, text)` from the CLS states.
pub fn contrastive_embeddings(s: &mut Session, image: &Encoded, text: &Encoded) -> (Var, Var) {
    let ci = image.cls(s);
    let ct = text.cls(s);
    let wi = s.param("heads.image_contrastive.weight");
    let wt = s.param("heads.text_contrastive.weight");
    (s.graph.matmul(ci, wi), s.graph.matmul(ct, wt))
}

/// Global contrastive loss of unmasked encodings with the learned temperature.
pub fn gc_loss(s: &mut Session, image: &Encoded, text: &Encoded) -> (Var, Var) {
    let (ei, et) = contrastive_embeddings(s, image, text);
    let ls = s.param("heads.logit_scale");
    let scale = s.graph.exp(ls);
    contrastive_graph(&mut s.graph, ei, et, scale)
}

/// A pair batch where a random subset of rows carries another row's text.
#[derive(Debug, Clone, PartialEq)]
pub struct ItmBatch {
    pub batch: PairBatch,
    /// Row of the original batch whose text each row now holds.
    pub text_source: Vec<usize>,
}

/// Replaces each row's text with probability `neg_fraction` by the text of a
/// uniformly chosen different row, flipping its label to `false`.
pub fn make_itm_negatives<R: Rng + ?Sized>(pairs: &PairBatch, neg_fraction: f64, rng: &mut R) -> Result<ItmBatch> {
    let b = pairs.batch();
    if !(0.0..=1.0).contains(&neg_fraction) {
        return Err(FlavaError::InvalidInput(format!("negative fraction {neg_fraction} outside [0, 1]")));
    }
    if neg_fraction > 0.0 && b < 2 {
        return Err(FlavaError::InvalidInput("negatives need a batch of at least 2".into()));
    }
    let mut source: Vec<usize> = (0..b).collect();
    let mut labels = pairs.match_labels.clone();
    for i in 0..b {
        if neg_fraction > 0.0 && rng.random_bool(neg_fraction) {
            let mut j = rng.random_range(0..b - 1);
            if j >= i {
                j += 1;
            }
            source[i] = j;
            labels[i] = false;
        }
    }
    let texts = pairs.texts.select(&source);
    Ok(ItmBatch {
        batch: PairBatch::new(pairs.images.clone(), texts, labels)?,
        text_source: source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{ImageBatch, TextBatch};
    use crate::graph::softmax_rows;
    use crate::params::{mlp_head_specs, ParamStore};
    use crate::rng;
    use ndarray::{array, Array4};
    use rand_distr::StandardNormal;

    fn randn(r: &mut rng::Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || r.sample(StandardNormal))
    }

    /// Materializes both softmaxes and averages the diagonal log-probabilities.
    fn brute_force(img: &Array2<f64>, txt: &Array2<f64>, t: f64) -> f64 {
        let norm = |m: &Array2<f64>| {
            let mut m = m.clone();
            for mut r in m.rows_mut() {
                let n = r.dot(&r).sqrt();
                r.mapv_inplace(|v| v / n);
            }
            m
        };
        let (a, b) = (norm(img), norm(txt));
        let n = a.nrows();
        let mut logits = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                logits[[i, j]] = a.row(i).dot(&b.row(j)) / t;
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| logits[[i, j]].exp()).sum();
            let col: f64 = (0..n).map(|j| logits[[j, i]].exp()).sum();
            total += -(logits[[i, i]].exp() / row).ln() - (logits[[i, i]].exp() / col).ln();
        }
        total / (2.0 * n as f64)
    }

    #[test]
    fn contrastive_anchors() {
        let one = contrastive_loss(&array![[1.0, 2.0]], &array![[3.0, -1.0]], 0.07).unwrap();
        assert!(one.loss.abs() < 1e-15);
        let e = Array2::<f64>::eye(2);
        let two = contrastive_loss(&e, &e, 1.0).unwrap();
        assert!((two.loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((two.loss - 0.3133).abs() < 1e-4);
        let z = array![[0.0, 0.0], [1.0, 0.0]];
        assert!(matches!(contrastive_loss(&z, &e, 1.0), Err(FlavaError::InvalidInput(_))));
    }

    #[test]
    fn contrastive_matches_brute_force_and_symmetries() {
        let mut r = rng::stream(11, &[]);
        for _ in 0..5 {
            let (a, b) = (randn(&mut r, 8, 6), randn(&mut r, 8, 6));
            let out = contrastive_loss(&a, &b, 0.2).unwrap();
            assert!((out.loss - brute_force(&a, &b, 0.2)).abs() < 1e-10);
            let scaled = contrastive_loss(&(&a * 3.7), &(&b * 0.2), 0.2).unwrap();
            assert!((out.loss - scaled.loss).abs() < 1e-10);
            let swapped = contrastive_loss(&b, &a, 0.2).unwrap();
            assert_eq!(swapped.logits, out.logits.t().to_owned());
        }
    }

    #[test]
    fn uniform_head_gives_log_classes() {
        let mut store = ParamStore::init(&mlp_head_specs("heads.mim", 64, 256, true), 0);
        store.get_mut("heads.mim.decoder.weight").unwrap().fill(0.0);
        let mut s = Session::inference(&store);
        let states = s.graph.constant(randn(&mut rng::stream(0, &[]), 2 * 5, 64));
        let enc = Encoded { states, batch: 2, seq: 5, key_mask: vec![true; 10] };
        let plan = MaskPlan {
            batch: 2,
            seq_len: 5,
            positions: vec![1, 3, 7],
            labels: vec![0, 17, 255],
            replacements: vec![crate::masking::Replacement::MaskToken; 3],
        };
        let loss = mim_loss(&mut s, &enc, &plan).unwrap().unwrap();
        assert!((s.graph.scalar(loss) - 256f64.ln()).abs() < 1e-12);
        assert!(mim_loss(&mut s, &enc, &MaskPlan::empty(2, 5)).unwrap().is_none());
        let bad = MaskPlan { labels: vec![0, 17, 256], ..plan };
        assert!(matches!(mim_loss(&mut s, &enc, &bad), Err(FlavaError::TokenOutOfRange { .. })));
    }

    #[test]
    fn itm_extremes() {
        let mut store = ParamStore::new();
        store.insert("heads.itm.weight", Array2::zeros((2, 1)));
        store.insert("heads.itm.bias", Array2::zeros((1, 1)));
        let mut s = Session::inference(&store);
        let states = s.graph.constant(array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        let enc = Encoded { states, batch: 2, seq: 2, key_mask: vec![true; 4] };
        let (loss, _) = itm_loss(&mut s, &enc, &[true, false]).unwrap();
        assert!((s.graph.scalar(loss) - 2f64.ln()).abs() < 1e-12);

        store.insert("heads.itm.weight", array![[20.0], [-20.0]]);
        let mut s = Session::inference(&store);
        let states = s.graph.constant(array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        let enc = Encoded { states, batch: 2, seq: 2, key_mask: vec![true; 4] };
        let (loss, _) = itm_loss(&mut s, &enc, &[true, false]).unwrap();
        assert!(s.graph.scalar(loss) < 1e-6);
    }

    #[test]
    fn mmm_plan_offsets() {
        let ip = MaskPlan {
            batch: 2,
            seq_len: 3,
            positions: vec![1, 5],
            labels: vec![4, 6],
            replacements: vec![crate::masking::Replacement::MaskToken; 2],
        };
        let tp = MaskPlan {
            batch: 2,
            seq_len: 4,
            positions: vec![2, 6],
            labels: vec![9, 8],
            replacements: vec![crate::masking::Replacement::MaskToken; 2],
        };
        let (a, b) = multimodal_plans(&ip, &tp, 8).unwrap();
        assert_eq!(a.positions, vec![2, 8 + 3]);
        assert_eq!(b.positions, vec![1 + 3 + 2, 8 + 1 + 3 + 2]);
        assert!(multimodal_plans(&ip, &tp, 9).is_err());
    }

    fn pairs(b: usize) -> PairBatch {
        let imgs = ImageBatch::new(Array4::zeros((b, 1, 2, 2))).unwrap();
        let texts = TextBatch::from_sequences(&(0..b).map(|i| vec![1, 5 + i as u32, 2]).collect::<Vec<_>>());
        PairBatch::aligned(imgs, texts).unwrap()
    }

    #[test]
    fn negatives() {
        let mut r = rng::stream(3, &[]);
        let p = pairs(2);
        let same = make_itm_negatives(&p, 0.0, &mut r).unwrap();
        assert_eq!(same.batch, p);
        let all = make_itm_negatives(&p, 1.0, &mut r).unwrap();
        assert_eq!(all.text_source, vec![1, 0]);
        assert_eq!(all.batch.match_labels, vec![false, false]);
        assert!(make_itm_negatives(&pairs(1), 0.5, &mut r).is_err());

        let big = pairs(10_000);
        let out = make_itm_negatives(&big, 0.5, &mut r).unwrap();
        let f = out.batch.match_labels.iter().filter(|&&l| !l).count() as f64;
        assert!((f - 5000.0).abs() < 4.0 * 50.0);
        for (i, &src) in out.text_source.iter().enumerate() {
            assert_eq!(src != i, !out.batch.match_labels[i]);
        }
    }

    #[test]
    fn softmax_helper_sanity() {
        let p = softmax_rows(&array![[0.0, 0.0]].view());
        assert_eq!(p, array![[0.5, 0.5]]);
    }
}
