//! Image-text corpus construction.
//!
//! Sources listed in a manifest are read as JSONL pair records, YFCC records
//! are filtered (English, more than two words; description first, then
//! title), duplicate `(image hash, caption)` pairs are dropped and the result
//! is written as JSONL shards plus a `manifest.json` carrying the statistics.
//! The output directory is itself a valid dataset source for training.
//!
//! Sources manifest format:
//!
//! ```json
//! {"sources": [{"tag": "yfcc100m", "path": "yfcc.jsonl"}, {"tag": "coco", "path": "coco.jsonl"}]}
//! ```
//!
//! Paths are relative to the manifest. Each record line carries `image` (a
//! path relative to its JSONL file) or `image_hash`, plus any of
//! `description`, `title`, `caption` and an optional `language` tag.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FlavaError, Result};
use crate::par;

/// Minimum whitespace-token count of an accepted YFCC caption.
pub const MIN_WORDS: usize = 3;
pub const DEFAULT_SHARD_SIZE: usize = 10_000;

/// One ingested image-text record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub image_hash: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub language: Option<String>,
}

impl PairRecord {
    pub fn validate(&self) -> Result<()> {
        if self.description.is_none() && self.title.is_none() && self.caption.is_none() {
            return Err(FlavaError::InvalidInput(
                "record has none of description, title, caption".into(),
            ));
        }
        if self.image.is_none() && self.image_hash.is_none() {
            return Err(FlavaError::InvalidInput("record has neither image nor image_hash".into()));
        }
        Ok(())
    }
}

/// Whether a text is English.
pub trait LanguageDetector: Sync {
    fn is_english(&self, text: &str) -> bool;
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "an", "and", "are", "as", "at", "be", "been", "but", "by", "for",
    "from", "had", "has", "have", "he", "her", "his", "i", "in", "into", "is", "it", "its", "me",
    "my", "near", "new", "of", "off", "on", "or", "our", "out", "over", "she", "so", "some",
    "that", "the", "their", "them", "there", "they", "this", "to", "under", "up", "was", "we",
    "were", "what", "when", "where", "while", "with", "you", "your",
];

/// ASCII-ratio plus English stopword heuristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicDetector {
    /// Minimum fraction of non-whitespace characters that are ASCII.
    pub min_ascii_ratio: f64,
}

impl Default for HeuristicDetector {
    fn default() -> Self {
        Self { min_ascii_ratio: 0.95 }
    }
}

impl LanguageDetector for HeuristicDetector {
    fn is_english(&self, text: &str) -> bool {
        let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        if chars.is_empty() {
            return false;
        }
        let ascii = chars.iter().filter(|c| c.is_ascii()).count();
        if (ascii as f64) < self.min_ascii_ratio * chars.len() as f64 {
            return false;
        }
        text.split_whitespace().any(|w| {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            STOPWORDS.binary_search(&w.as_str()).is_ok()
        })
    }
}

/// Which YFCC field supplied the caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionField {
    Description,
    Title,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    /// Neither field is present.
    Missing,
    /// The last considered field has two or fewer words.
    Length,
    /// The last considered field is not English.
    Language,
}

impl Rejection {
    pub fn reason(&self) -> &'static str {
        match self {
            Rejection::Missing => "missing",
            Rejection::Length => "length",
            Rejection::Language => "language",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterDecision {
    Accepted { text: String, field: CaptionField },
    Rejected(Rejection),
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn check_field(text: &str, language: Option<&str>, detector: &dyn LanguageDetector) -> Option<Rejection> {
    if word_count(text) < MIN_WORDS {
        return Some(Rejection::Length);
    }
    let english = match language {
        Some(tag) => {
            let tag = tag.trim().to_ascii_lowercase();
            tag == "en" || tag.starts_with("en-") || tag.starts_with("en_") || tag == "english"
        }
        None => detector.is_english(text),
    };
    (!english).then_some(Rejection::Language)
}

/// Applies the YFCC rules: the description is used if it passes, else the
/// title; otherwise the rejection of the last field considered is returned.
/// A language tag on the record, when present, overrides the detector.
pub fn yfcc_filter(record: &PairRecord, detector: &dyn LanguageDetector) -> FilterDecision {
    let lang = record.language.as_deref();
    let mut last = Rejection::Missing;
    for (field, text) in [
        (CaptionField::Description, &record.description),
        (CaptionField::Title, &record.title),
    ] {
        let Some(text) = text else { continue };
        match check_field(text, lang, detector) {
            None => {
                return FilterDecision::Accepted {
                    text: text.trim().to_string(),
                    field,
                }
            }
            Some(r) => last = r,
        }
    }
    FilterDecision::Rejected(last)
}

pub fn is_yfcc(source: &str) -> bool {
    source.to_ascii_lowercase().starts_with("yfcc")
}

/// Caption of a record under the per-source rules: YFCC records are
/// filtered, all other sources pass through with their first present field
/// among caption, description, title.
pub fn select_caption(record: &PairRecord, detector: &dyn LanguageDetector) -> std::result::Result<String, Rejection> {
    if is_yfcc(&record.source) {
        return match yfcc_filter(record, detector) {
            FilterDecision::Accepted { text, .. } => Ok(text),
            FilterDecision::Rejected(r) => Err(r),
        };
    }
    record
        .caption
        .as_ref()
        .or(record.description.as_ref())
        .or(record.title.as_ref())
        .map(|t| t.trim().to_string())
        .ok_or(Rejection::Missing)
}

/// One corpus pair as written to the output shards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPair {
    pub image: Option<String>,
    pub image_hash: String,
    pub caption: String,
    pub source: String,
}

/// Keeps the first occurrence of every `(image hash, caption)` pair.
pub fn dedupe(pairs: Vec<CorpusPair>) -> Vec<CorpusPair> {
    let mut seen = HashSet::new();
    pairs
        .into_iter()
        .filter(|p| seen.insert((p.image_hash.clone(), p.caption.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub unique_images: usize,
    /// Whitespace-token count averaged over pairs; 0 for an empty corpus.
    pub mean_caption_words: f64,
    pub per_source: BTreeMap<String, usize>,
}

pub fn corpus_stats(pairs: &[CorpusPair]) -> CorpusStats {
    let mut per_source = BTreeMap::new();
    let mut images = HashSet::new();
    let mut words = 0usize;
    for p in pairs {
        *per_source.entry(p.source.clone()).or_insert(0) += 1;
        images.insert(p.image_hash.as_str());
        words += word_count(&p.caption);
    }
    CorpusStats {
        pairs: pairs.len(),
        unique_images: images.len(),
        mean_caption_words: if pairs.is_empty() { 0.0 } else { words as f64 / pairs.len() as f64 },
        per_source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub tag: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcesManifest {
    pub sources: Vec<SourceEntry>,
}

/// Everything reported by a corpus build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub ingested: usize,
    pub rejected: BTreeMap<Rejection, usize>,
    pub duplicates: usize,
    pub stats: CorpusStats,
}

impl BuildReport {
    /// `key=value` summary lines.
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("ingested={}", self.ingested),
            format!("duplicates={}", self.duplicates),
            format!("pairs={}", self.stats.pairs),
            format!("unique_images={}", self.stats.unique_images),
            format!("mean_caption_words={}", self.stats.mean_caption_words),
        ];
        for (r, n) in &self.rejected {
            out.push(format!("rejected.{}={n}", r.reason()));
        }
        for (s, n) in &self.stats.per_source {
            out.push(format!("source.{s}={n}"));
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct OutputManifest {
    shards: Vec<String>,
    report: BuildReport,
}

fn read_source(entry: &SourceEntry, base: &Path) -> Result<Vec<(PathBuf, PairRecord)>> {
    let path = base.join(&entry.path);
    let text = std::fs::read_to_string(&path).map_err(|e| FlavaError::io(&path, e))?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut r: PairRecord = serde_json::from_str(line)
            .map_err(|e| FlavaError::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if r.source.is_empty() {
            r.source = entry.tag.clone();
        }
        r.validate()
            .map_err(|e| FlavaError::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push((dir.clone(), r));
    }
    Ok(out)
}

/// Resolves the image path and content hash of a record.
fn resolve_image(dir: &Path, r: &PairRecord) -> Result<(Option<String>, String)> {
    let path = r.image.as_ref().map(|i| dir.join(i));
    let hash = match (&r.image_hash, &path) {
        (Some(h), _) => h.clone(),
        (None, Some(p)) => sha256_hex(&std::fs::read(p).map_err(|e| FlavaError::io(p, e))?),
        (None, None) => unreachable!("validated records carry an image or a hash"),
    };
    let image = path.map(|p| std::path::absolute(&p).unwrap_or(p).to_string_lossy().into_owned());
    Ok((image, hash))
}

/// Filters, hashes and deduplicates records in input order.
pub fn process_records(
    records: &[(PathBuf, PairRecord)],
    detector: &dyn LanguageDetector,
) -> Result<(Vec<CorpusPair>, BuildReport)> {
    let decided = par::map_indexed(records.len(), |i| {
        let (dir, r) = &records[i];
        match select_caption(r, detector) {
            Ok(caption) => resolve_image(dir, r).map(|(image, image_hash)| {
                Ok(CorpusPair {
                    image,
                    image_hash,
                    caption,
                    source: r.source.clone(),
                })
            }),
            Err(rej) => Ok(Err(rej)),
        }
    });
    let mut rejected = BTreeMap::new();
    let mut kept = Vec::new();
    for d in decided {
        match d? {
            Ok(p) => kept.push(p),
            Err(r) => *rejected.entry(r).or_insert(0) += 1,
        }
    }
    let before = kept.len();
    let pairs = dedupe(kept);
    let report = BuildReport {
        ingested: records.len(),
        rejected,
        duplicates: before - pairs.len(),
        stats: corpus_stats(&pairs),
    };
    Ok((pairs, report))
}

/// Builds a corpus from a sources manifest into `out`.
pub fn build(manifest: &Path, out: &Path, shard_size: usize, detector: &dyn LanguageDetector) -> Result<BuildReport> {
    if shard_size == 0 {
        return Err(FlavaError::InvalidInput("shard size must be positive".into()));
    }
    let text = std::fs::read_to_string(manifest).map_err(|e| FlavaError::io(manifest, e))?;
    let m: SourcesManifest = serde_json::from_str(&text)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for entry in &m.sources {
        records.extend(read_source(entry, base)?);
    }
    let (pairs, report) = process_records(&records, detector)?;
    std::fs::create_dir_all(out).map_err(|e| FlavaError::io(out, e))?;
    let mut shards = Vec::new();
    for (i, chunk) in pairs.chunks(shard_size).enumerate() {
        let name = format!("shard_{i:05}.jsonl");
        let mut body = String::new();
        for p in chunk {
            body.push_str(&serde_json::to_string(p)?);
            body.push('\n');
        }
        let path = out.join(&name);
        std::fs::write(&path, body).map_err(|e| FlavaError::io(&path, e))?;
        shards.push(name);
    }
    let mpath = out.join("manifest.json");
    let manifest = OutputManifest { shards, report: report.clone() };
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| FlavaError::io(&mpath, e))?;
    Ok(report)
}
