//! Mask plans for masked image and masked language modeling.
//!
//! Image masks are unions of random axis-aligned rectangles over the patch
//! grid (BEiT block masking). Text masks pick each maskable token
//! independently. A [`MaskPlan`] stores flat positions into a `[batch, seq]`
//! sequence, so image positions are offset by one for the leading CLS state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use ndarray::Array2;

use crate::batch::TextBatch;
use crate::config::MaskingConfig;
use crate::error::{FlavaError, Result};
use crate::text::{is_special, MASK, RESERVED_TOKENS};

/// Failed placement attempts before a single-patch block is used instead.
pub const MAX_BLOCK_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "token")]
pub enum Replacement {
    MaskToken,
    RandomToken(u32),
    Keep,
}

/// Masked positions of a `[batch, seq_len]` sequence with their targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub batch: usize,
    pub seq_len: usize,
    /// Flat indices `b * seq_len + t`, strictly increasing.
    pub positions: Vec<usize>,
    /// Ground-truth class per position.
    pub labels: Vec<u32>,
    pub replacements: Vec<Replacement>,
}

impl MaskPlan {
    pub fn empty(batch: usize, seq_len: usize) -> Self {
        Self {
            batch,
            seq_len,
            positions: Vec::new(),
            labels: Vec::new(),
            replacements: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.positions.len() || self.replacements.len() != self.positions.len() {
            return Err(FlavaError::MaskPlan("labels/replacements not aligned with positions".into()));
        }
        let total = self.batch * self.seq_len;
        for w in self.positions.windows(2) {
            if w[0] >= w[1] {
                return Err(FlavaError::MaskPlan("positions not strictly increasing".into()));
            }
        }
        if let Some(&last) = self.positions.last() {
            if last >= total {
                return Err(FlavaError::MaskPlan(format!("position {last} outside {total}")));
            }
        }
        Ok(())
    }

    /// Keeps only the entries for the given rows, renumbered in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = Self::empty(rows.len(), self.seq_len);
        for (new_b, &b) in rows.iter().enumerate() {
            for (i, &p) in self.positions.iter().enumerate() {
                if p / self.seq_len == b {
                    out.positions.push(new_b * self.seq_len + p % self.seq_len);
                    out.labels.push(self.labels[i]);
                    out.replacements.push(self.replacements[i]);
                }
            }
        }
        out
    }
}

/// A rectangle `(top, left, height, width)` on the patch grid.
pub type Block = (usize, usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major, `true` for masked patches.
    pub cells: Vec<bool>,
    pub blocks: Vec<Block>,
}

impl BlockMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn patches(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i]).collect()
    }

    fn new_cells(&self, (top, left, h, w): Block) -> usize {
        let mut n = 0;
        for r in top..top + h {
            for c in left..left + w {
                n += usize::from(!self.cells[r * self.grid_w + c]);
            }
        }
        n
    }

    fn paint(&mut self, (top, left, h, w): Block) {
        for r in top..top + h {
            for c in left..left + w {
                self.cells[r * self.grid_w + c] = true;
            }
        }
        self.blocks.push((top, left, h, w));
    }
}

/// Upper bound on the masked count for a target of `target` patches.
pub fn block_mask_cap(total: usize, target: f64) -> usize {
    let cap = (target.ceil() as usize).max((1.5 * target).floor() as usize);
    cap.min(total)
}

/// Samples rectangles until at least `target_ratio` of the grid is masked.
pub fn block_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    target_ratio: f64,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> BlockMask {
    let total = grid_h * grid_w;
    let mut mask = BlockMask {
        grid_h,
        grid_w,
        cells: vec![false; total],
        blocks: Vec::new(),
    };
    if total == 0 || target_ratio <= 0.0 {
        return mask;
    }
    if target_ratio >= 1.0 {
        mask.paint((0, 0, grid_h, grid_w));
        return mask;
    }
    let target = target_ratio * total as f64;
    let cap = block_mask_cap(total, target);
    let (log_lo, log_hi) = (cfg.min_aspect.ln(), cfg.max_aspect.ln());
    while (mask.count() as f64) < target {
        let remaining = cap - mask.count();
        let mut placed = false;
        if cfg.min_block_patches <= remaining {
            for _ in 0..MAX_BLOCK_ATTEMPTS {
                let area = rng.random_range(cfg.min_block_patches as f64..=remaining as f64);
                let aspect = rng.random_range(log_lo..=log_hi).exp();
                let h = ((area * aspect).sqrt().round() as usize).max(1);
                let w = ((area / aspect).sqrt().round() as usize).max(1);
                if h > grid_h || w > grid_w {
                    continue;
                }
                let top = rng.random_range(0..=grid_h - h);
                let left = rng.random_range(0..=grid_w - w);
                let fresh = mask.new_cells((top, left, h, w));
                if fresh > 0 && fresh <= remaining {
                    mask.paint((top, left, h, w));
                    placed = true;
                    break;
                }
            }
        }
        if !placed {
            let free: Vec<usize> = (0..total).filter(|&i| !mask.cells[i]).collect();
            let cell = free[rng.random_range(0..free.len())];
            mask.paint((cell / grid_w, cell % grid_w, 1, 1));
        }
    }
    mask
}

/// Block masks for every image with codebook indices as labels.
///
/// `tokens` is `[batch, n_patches]`; positions index the `[batch, 1 + n]`
/// image sequence.
pub fn image_mask_plan<R: Rng + ?Sized>(
    tokens: &Array2<u32>,
    grid: usize,
    ratio: f64,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    let (b, n) = tokens.dim();
    if n != grid * grid {
        return Err(FlavaError::MaskPlan(format!("{n} patch tokens for a {grid}x{grid} grid")));
    }
    let seq = 1 + n;
    let mut plan = MaskPlan::empty(b, seq);
    for bi in 0..b {
        let m = block_mask(grid, grid, ratio, cfg, rng);
        for p in m.patches() {
            plan.positions.push(bi * seq + 1 + p);
            plan.labels.push(tokens[[bi, p]]);
            plan.replacements.push(Replacement::MaskToken);
        }
    }
    Ok(plan)
}

/// Independently masks each non-special, non-padding token with probability `rate`.
///
/// With `mixed_replacement` the BERT 80/10/10 rule picks `[MASK]`, a random
/// non-reserved token, or the original token.
pub fn mlm_mask<R: Rng + ?Sized>(
    texts: &TextBatch,
    rate: f64,
    mixed_replacement: bool,
    vocab_size: usize,
    rng: &mut R,
) -> MaskPlan {
    let (b, s) = texts.token_ids.dim();
    let mut plan = MaskPlan::empty(b, s);
    for bi in 0..b {
        for t in 0..s {
            let id = texts.token_ids[[bi, t]];
            if !texts.attention_mask[[bi, t]] || is_special(id) {
                continue;
            }
            if !rng.random_bool(rate.clamp(0.0, 1.0)) {
                continue;
            }
            let replacement = if mixed_replacement {
                let u: f64 = rng.random();
                if u < 0.8 {
                    Replacement::MaskToken
                } else if u < 0.9 {
                    Replacement::RandomToken(rng.random_range(RESERVED_TOKENS..vocab_size as u32))
                } else {
                    Replacement::Keep
                }
            } else {
                Replacement::MaskToken
            };
            plan.positions.push(bi * s + t);
            plan.labels.push(id);
            plan.replacements.push(replacement);
        }
    }
    plan
}

fn check_text_plan(texts: &TextBatch, plan: &MaskPlan) -> Result<()> {
    plan.validate()?;
    if plan.batch != texts.batch() || plan.seq_len != texts.seq_len() {
        return Err(FlavaError::MaskPlan(format!(
            "plan for {}x{} applied to text batch {}x{}",
            plan.batch,
            plan.seq_len,
            texts.batch(),
            texts.seq_len()
        )));
    }
    Ok(())
}

/// Writes the replacement token at every planned position.
pub fn apply_text_mask(texts: &TextBatch, plan: &MaskPlan) -> Result<TextBatch> {
    check_text_plan(texts, plan)?;
    let mut out = texts.clone();
    let s = plan.seq_len;
    for (&p, r) in plan.positions.iter().zip(&plan.replacements) {
        let cell = &mut out.token_ids[[p / s, p % s]];
        match *r {
            Replacement::MaskToken => *cell = MASK,
            Replacement::RandomToken(id) => *cell = id,
            Replacement::Keep => {}
        }
    }
    Ok(out)
}

/// Inverse of [`apply_text_mask`]: writes the labels back.
pub fn restore_text(masked: &TextBatch, plan: &MaskPlan) -> Result<TextBatch> {
    check_text_plan(masked, plan)?;
    let mut out = masked.clone();
    let s = plan.seq_len;
    for (&p, &l) in plan.positions.iter().zip(&plan.labels) {
        out.token_ids[[p / s, p % s]] = l;
    }
    Ok(out)
}
