//! Image, text and multimodal transformer encoders.
//!
//! All three share one pre-norm block:
//!
//! ```text
//! x = x + Attn(LN1(x))
//! x = x + MLP(LN2(x))
//! ```
//!
//! followed by a final layer norm. The image encoder embeds flattened pixel
//! patches; the text encoder embeds token ids; the multimodal encoder projects
//! both unimodal state sequences and fuses `[CLS_M] ++ image ++ text`.

use ndarray::{s, Array2, Array3, Axis};

use crate::batch::{ImageBatch, TextBatch};
use crate::config::ModelConfig;
use crate::error::{FlavaError, Result};
use crate::graph::{AttentionLayout, Var};
use crate::masking::MaskPlan;
use crate::params::Session;

/// An encoded batch inside a graph: `[batch * seq, hidden]` plus its key mask.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub states: Var,
    pub batch: usize,
    pub seq: usize,
    pub key_mask: Vec<bool>,
}

impl Encoded {
    /// Row indices of the position-0 (CLS) state of every item.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq).collect()
    }

    pub fn cls(&self, s: &mut Session) -> Var {
        s.graph.gather_rows(self.states, self.cls_rows())
    }
}

/// Hidden states materialized out of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    /// `[batch, seq, hidden]`
    pub states: Array3<f64>,
    /// `[batch, seq]`, `true` for real positions.
    pub mask: Array2<bool>,
}

pub type ImageHiddenStates = HiddenStates;
pub type TextHiddenStates = HiddenStates;
pub type MultimodalHiddenStates = HiddenStates;

impl HiddenStates {
    pub fn from_encoded(s: &Session, e: &Encoded) -> Self {
        let v = s.graph.value(e.states);
        let hidden = v.ncols();
        let states = v
            .clone()
            .into_shape_with_order((e.batch, e.seq, hidden))
            .expect("encoded rows = batch * seq");
        let mask = Array2::from_shape_vec((e.batch, e.seq), e.key_mask.clone()).expect("mask length");
        Self { states, mask }
    }

    pub fn batch(&self) -> usize {
        self.states.dim().0
    }

    pub fn seq(&self) -> usize {
        self.states.dim().1
    }

    pub fn hidden(&self) -> usize {
        self.states.dim().2
    }

    /// The position-0 state of every item, `[batch, hidden]`.
    pub fn cls(&self) -> Array2<f64> {
        self.states.index_axis(Axis(1), 0).to_owned()
    }

    /// Binds these states into a session as a constant.
    pub fn bind(&self, s: &mut Session) -> Encoded {
        let (b, l, d) = self.states.dim();
        let flat = self
            .states
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * l, d))
            .expect("contiguous");
        Encoded {
            states: s.graph.constant(flat),
            batch: b,
            seq: l,
            key_mask: self.mask.iter().copied().collect(),
        }
    }
}

pub fn linear(s: &mut Session, x: Var, prefix: &str) -> Var {
    let w = s.param(&format!("{prefix}.weight"));
    let b = s.param(&format!("{prefix}.bias"));
    let y = s.graph.matmul(x, w);
    s.graph.add_row(y, b)
}

pub fn layer_norm(s: &mut Session, x: Var, prefix: &str) -> Var {
    let g = s.param(&format!("{prefix}.gamma"));
    let b = s.param(&format!("{prefix}.beta"));
    s.graph.layer_norm(x, g, b)
}

fn block(s: &mut Session, prefix: &str, x: Var, layout: AttentionLayout, mask: &[bool]) -> Var {
    let h = layer_norm(s, x, &format!("{prefix}.ln1"));
    let q = linear(s, h, &format!("{prefix}.attn.query"));
    let k = linear(s, h, &format!("{prefix}.attn.key"));
    let v = linear(s, h, &format!("{prefix}.attn.value"));
    let a = s.graph.attention(q, k, v, layout, mask);
    let a = linear(s, a, &format!("{prefix}.attn.output"));
    let x = s.graph.add(x, a);
    let h = layer_norm(s, x, &format!("{prefix}.ln2"));
    let h = linear(s, h, &format!("{prefix}.mlp.fc1"));
    let h = s.graph.gelu(h);
    let h = linear(s, h, &format!("{prefix}.mlp.fc2"));
    s.graph.add(x, h)
}

/// Stack of pre-norm blocks plus the final layer norm.
pub fn transformer(
    s: &mut Session,
    prefix: &str,
    x: Var,
    layout: AttentionLayout,
    mask: &[bool],
    layers: usize,
) -> Var {
    let mut x = x;
    for i in 0..layers {
        x = block(s, &format!("{prefix}.layers.{i}"), x, layout, mask);
    }
    layer_norm(s, x, &format!("{prefix}.final_ln"))
}

/// Splits images into non-overlapping square patches.
///
/// Patches are ordered row-major over the patch grid; each patch vector is
/// channel-major, then row, then column (`channels * patch²` values).
pub fn patchify(images: &ImageBatch, patch: usize) -> Result<Array3<f64>> {
    let (b, c, h, w) = images.pixels.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(FlavaError::shape(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let mut out = Array3::<f64>::zeros((b, gh * gw, pd));
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                let mut dst = out.slice_mut(s![bi, py * gw + px, ..]);
                let src = images
                    .pixels
                    .slice(s![bi, .., py * patch..(py + 1) * patch, px * patch..(px + 1) * patch]);
                for (d, v) in dst.iter_mut().zip(src.iter()) {
                    *d = *v;
                }
            }
        }
    }
    Ok(out)
}

fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// 1-D bicubic resampling matrix `[out_len, in_len]` (half-pixel centers,
/// replicated borders). Rows sum to one.
pub fn bicubic_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        for k in -1i64..=2 {
            let idx = (base as i64 + k).clamp(0, in_len as i64 - 1) as usize;
            m[[o, idx]] += cubic_weight(k as f64 - t);
        }
    }
    m
}

/// Maps a `[1 + old², D]` position table (CLS first) to `[1 + new², D]` by
/// separable bicubic interpolation of the patch grid.
pub fn position_interpolation(old_grid: usize, new_grid: usize) -> Array2<f64> {
    let w = bicubic_matrix(old_grid, new_grid);
    let mut m = Array2::<f64>::zeros((1 + new_grid * new_grid, 1 + old_grid * old_grid));
    m[[0, 0]] = 1.0;
    for i in 0..new_grid {
        for j in 0..new_grid {
            for k in 0..old_grid {
                for l in 0..old_grid {
                    m[[1 + i * new_grid + j, 1 + k * old_grid + l]] = w[[i, k]] * w[[j, l]];
                }
            }
        }
    }
    m
}

fn check_image_plan(plan: &MaskPlan, batch: usize, seq: usize) -> Result<()> {
    if plan.batch != batch || plan.seq_len != seq {
        return Err(FlavaError::MaskPlan(format!(
            "plan for {}x{} applied to image sequence {}x{}",
            plan.batch, plan.seq_len, batch, seq
        )));
    }
    if plan.positions.iter().any(|&p| p >= batch * seq || p % seq == 0) {
        return Err(FlavaError::MaskPlan("image plan covers CLS or out-of-range position".into()));
    }
    Ok(())
}

/// Patch embeddings with `[CLS_I]` prepended and masked patches replaced by
/// the learned mask embedding; positions not yet added. `[B * (1 + N), D]`.
pub fn image_token_embeddings(
    s: &mut Session,
    cfg: &ModelConfig,
    images: &ImageBatch,
    plan: Option<&MaskPlan>,
) -> Result<Var> {
    if images.channels() != cfg.channels {
        return Err(FlavaError::shape(format!(
            "image has {} channels, model expects {}",
            images.channels(),
            cfg.channels
        )));
    }
    let patches = patchify(images, cfg.patch_size)?;
    let (b, n, pd) = patches.dim();
    let seq = 1 + n;
    if let Some(p) = plan {
        check_image_plan(p, b, seq)?;
    }
    let flat = patches.into_shape_with_order((b * n, pd)).expect("contiguous");
    let x = s.graph.constant(flat);
    let emb = linear(s, x, "image.patch_embed");
    let cls = s.param("image.cls_token");
    let mask_tok = s.param("image.mask_token");
    let all = s.graph.concat_rows(&[cls, mask_tok, emb]);
    let mut masked = vec![false; b * seq];
    if let Some(p) = plan {
        for &pos in &p.positions {
            masked[pos] = true;
        }
    }
    let idx: Vec<usize> = (0..b * seq)
        .map(|r| {
            let (bi, t) = (r / seq, r % seq);
            match (t, masked[r]) {
                (0, _) => 0,
                (_, true) => 1,
                _ => 2 + bi * n + (t - 1),
            }
        })
        .collect();
    Ok(s.graph.gather_rows(all, idx))
}

pub fn encode_image(
    s: &mut Session,
    cfg: &ModelConfig,
    images: &ImageBatch,
    plan: Option<&MaskPlan>,
) -> Result<Encoded> {
    let tokens = image_token_embeddings(s, cfg, images, plan)?;
    let b = images.batch();
    let grid = images.height() / cfg.patch_size;
    if images.height() != images.width() {
        return Err(FlavaError::shape("images must be square".to_string()));
    }
    let seq = 1 + grid * grid;
    let mut pos = s.param("image.position_embeddings");
    if grid != cfg.grid() {
        let m = s.graph.constant(position_interpolation(cfg.grid(), grid));
        pos = s.graph.matmul(m, pos);
    }
    let pos_rows = s.graph.gather_rows(pos, (0..b * seq).map(|r| r % seq).collect::<Vec<_>>());
    let x = s.graph.add(tokens, pos_rows);
    let key_mask = vec![true; b * seq];
    let layout = AttentionLayout {
        batch: b,
        seq,
        heads: cfg.num_heads,
    };
    let states = transformer(s, "image", x, layout, &key_mask, cfg.image_layers);
    Ok(Encoded {
        states,
        batch: b,
        seq,
        key_mask,
    })
}

pub fn encode_text(s: &mut Session, cfg: &ModelConfig, texts: &TextBatch) -> Result<Encoded> {
    texts.check_vocab(cfg.text_vocab_size)?;
    let (b, seq) = texts.token_ids.dim();
    if seq > cfg.max_text_len {
        return Err(FlavaError::shape(format!(
            "text length {seq} exceeds max_text_len {}",
            cfg.max_text_len
        )));
    }
    if texts.attention_mask.rows().into_iter().any(|r| !r.iter().any(|&m| m)) {
        return Err(FlavaError::InvalidInput("text row with no visible tokens".into()));
    }
    let table = s.param("text.token_embeddings");
    let ids: Vec<usize> = texts.token_ids.iter().map(|&i| i as usize).collect();
    let tok = s.graph.gather_rows(table, ids);
    let pos = s.param("text.position_embeddings");
    let pos_rows = s.graph.gather_rows(pos, (0..b * seq).map(|r| r % seq).collect::<Vec<_>>());
    let x = s.graph.add(tok, pos_rows);
    let key_mask: Vec<bool> = texts.attention_mask.iter().copied().collect();
    let layout = AttentionLayout {
        batch: b,
        seq,
        heads: cfg.num_heads,
    };
    let states = transformer(s, "text", x, layout, &key_mask, cfg.text_layers);
    Ok(Encoded {
        states,
        batch: b,
        seq,
        key_mask,
    })
}

/// Fuses projected image and text states as `[CLS_M] ++ image ++ text`.
pub fn encode_multimodal(
    s: &mut Session,
    cfg: &ModelConfig,
    img: &Encoded,
    txt: &Encoded,
) -> Result<Encoded> {
    if img.batch != txt.batch {
        return Err(FlavaError::shape(format!(
            "multimodal batch mismatch: {} images vs {} texts",
            img.batch, txt.batch
        )));
    }
    let b = img.batch;
    let (si, st) = (img.seq, txt.seq);
    let seq = 1 + si + st;
    let pi = linear(s, img.states, "multimodal.image_projection");
    let pt = linear(s, txt.states, "multimodal.text_projection");
    let cls = s.param("multimodal.cls_token");
    let all = s.graph.concat_rows(&[cls, pi, pt]);
    let mut idx = Vec::with_capacity(b * seq);
    let mut key_mask = Vec::with_capacity(b * seq);
    for bi in 0..b {
        idx.push(0);
        key_mask.push(true);
        for t in 0..si {
            idx.push(1 + bi * si + t);
            key_mask.push(img.key_mask[bi * si + t]);
        }
        for t in 0..st {
            idx.push(1 + b * si + bi * st + t);
            key_mask.push(txt.key_mask[bi * st + t]);
        }
    }
    let x = s.graph.gather_rows(all, idx);
    let layout = AttentionLayout {
        batch: b,
        seq,
        heads: cfg.num_heads,
    };
    let states = transformer(s, "multimodal", x, layout, &key_mask, cfg.multimodal_layers);
    Ok(Encoded {
        states,
        batch: b,
        seq,
        key_mask,
    })
}
