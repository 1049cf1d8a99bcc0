//! Special token ids and a deterministic word-level tokenizer.
//!
//! Words are lower-cased, split on anything that is not alphanumeric and
//! mapped into the non-reserved part of the vocabulary by FNV hashing. There is
//! no learned vocabulary, so any vocabulary size works and every run maps the
//! same word to the same id.

use crate::batch::TextBatch;
use crate::rng::hash_str;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const RESERVED_TOKENS: u32 = 5;

pub fn is_special(id: u32) -> bool {
    id < RESERVED_TOKENS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordTokenizer {
    vocab_size: usize,
    max_len: usize,
}

impl WordTokenizer {
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        assert!(vocab_size > RESERVED_TOKENS as usize);
        assert!(max_len >= 2);
        Self { vocab_size, max_len }
    }

    pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let span = self.vocab_size as u64 - RESERVED_TOKENS as u64;
        RESERVED_TOKENS + (hash_str(word) % span) as u32
    }

    /// `[CLS] w1 .. wn [SEP]`, truncated to `max_len`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![CLS];
        ids.extend(Self::words(text).take(self.max_len - 2).map(|w| self.word_id(&w)));
        ids.push(SEP);
        ids
    }

    /// Encodes and right-pads to the longest sequence in the batch.
    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S]) -> TextBatch {
        let seqs: Vec<Vec<u32>> = texts.iter().map(|t| self.encode(t.as_ref())).collect();
        TextBatch::from_sequences(&seqs)
    }
}
