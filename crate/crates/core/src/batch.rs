//! The three sample types that flow through training and evaluation.

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{FlavaError, Result};
use crate::text::PAD;

/// Pixels `[batch, channels, height, width]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>) -> Result<Self> {
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(FlavaError::InvalidInput("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn batch(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().3
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            pixels: self.pixels.select(Axis(0), rows),
        }
    }

    pub fn stack(images: &[&ImageBatch]) -> Result<Self> {
        let views: Vec<_> = images.iter().map(|i| i.pixels.view()).collect();
        let pixels = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| FlavaError::shape(format!("stacking images: {e}")))?;
        Ok(Self { pixels })
    }
}

/// Token ids `[batch, seq_len]` with a padding mask (`true` = real token).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBatch {
    pub token_ids: Array2<u32>,
    pub attention_mask: Array2<bool>,
}

impl TextBatch {
    pub fn new(token_ids: Array2<u32>, attention_mask: Array2<bool>) -> Result<Self> {
        if token_ids.dim() != attention_mask.dim() {
            return Err(FlavaError::shape(format!(
                "token ids {:?} vs attention mask {:?}",
                token_ids.dim(),
                attention_mask.dim()
            )));
        }
        Ok(Self {
            token_ids,
            attention_mask,
        })
    }

    /// Right-pads variable-length sequences to the longest one.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Array2::from_elem((seqs.len(), len), PAD);
        let mut mask = Array2::from_elem((seqs.len(), len), false);
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.iter().enumerate() {
                ids[[b, t]] = id;
                mask[[b, t]] = true;
            }
        }
        Self {
            token_ids: ids,
            attention_mask: mask,
        }
    }

    pub fn batch(&self) -> usize {
        self.token_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.ncols()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.token_ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(FlavaError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            token_ids: self.token_ids.select(Axis(0), rows),
            attention_mask: self.attention_mask.select(Axis(0), rows),
        }
    }

    /// Real (non-padding) sequences, padding stripped.
    pub fn sequences(&self) -> Vec<Vec<u32>> {
        self.token_ids
            .rows()
            .into_iter()
            .zip(self.attention_mask.rows())
            .map(|(ids, m)| ids.iter().zip(m).filter(|(_, &m)| m).map(|(&i, _)| i).collect())
            .collect()
    }
}

/// Image-text pairs; `match_labels[i]` is true when row `i` is aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    pub images: ImageBatch,
    pub texts: TextBatch,
    pub match_labels: Vec<bool>,
}

impl PairBatch {
    pub fn new(images: ImageBatch, texts: TextBatch, match_labels: Vec<bool>) -> Result<Self> {
        if images.batch() != texts.batch() || texts.batch() != match_labels.len() {
            return Err(FlavaError::shape(format!(
                "pair batch sizes differ: images {}, texts {}, labels {}",
                images.batch(),
                texts.batch(),
                match_labels.len()
            )));
        }
        Ok(Self {
            images,
            texts,
            match_labels,
        })
    }

    /// All rows aligned.
    pub fn aligned(images: ImageBatch, texts: TextBatch) -> Result<Self> {
        let n = images.batch();
        Self::new(images, texts, vec![true; n])
    }

    pub fn batch(&self) -> usize {
        self.match_labels.len()
    }
}
