//! In-memory datasets for training and evaluation.
//!
//! A source is one of:
//!
//! * `synthetic:<n>[:<variant>]` - the generated fixture of [`crate::synthetic`];
//! * a JSONL file whose records carry `image` (path relative to the file)
//!   and/or `caption` (or `text`);
//! * a corpus directory containing `manifest.json` with a `shards` list of
//!   JSONL files in the same format.
//!
//! Images are decoded, converted to RGB, resized to the model input size and
//! scaled to `[0, 1]`. Records may also carry a `label` (string or number)
//! for classification and regression evaluation; synthetic items are
//! labeled with their color name.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array4};
use serde::Deserialize;

use crate::batch::{ImageBatch, PairBatch, TextBatch};
use crate::config::{DatasetKind, ModelConfig};
use crate::error::{FlavaError, Result};
use crate::synthetic;
use crate::text::WordTokenizer;

/// Noise variant used for each kind when a synthetic source names none.
pub fn default_variant(kind: DatasetKind) -> u64 {
    match kind {
        DatasetKind::MultimodalPairs => 0,
        DatasetKind::UnimodalImages => 1,
        DatasetKind::UnimodalText => 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub source: String,
    /// All images, `[n, C, H, W]`, for pair and image datasets.
    pub images: Option<ImageBatch>,
    /// Raw captions for pair and text datasets.
    pub captions: Option<Vec<String>>,
    /// Tokenized captions.
    pub token_ids: Option<Vec<Vec<u32>>>,
    /// Visual codebook index per patch, `[n, n_patches]`, once assigned.
    pub image_tokens: Option<Array2<u32>>,
}

#[derive(Debug, Deserialize)]
struct Record {
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    label: Option<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct Manifest {
    shards: Vec<String>,
}

/// Loads one RGB image resized to `size × size`, `[3, size, size]` in `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<ndarray::Array3<f64>> {
    let img = image::open(path).map_err(|e| FlavaError::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    Ok(ndarray::Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

fn read_jsonl(path: &Path) -> Result<Vec<(PathBuf, Record)>> {
    let text = std::fs::read_to_string(path).map_err(|e| FlavaError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| {
            FlavaError::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push((base.clone(), r));
    }
    Ok(out)
}

fn read_records(source: &str) -> Result<Vec<(PathBuf, Record)>> {
    let path = Path::new(source);
    if !path.exists() {
        return Err(FlavaError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")));
    }
    if path.is_dir() {
        let mpath = path.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| FlavaError::io(&mpath, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let mut out = Vec::new();
        for shard in m.shards {
            out.extend(read_jsonl(&path.join(shard))?);
        }
        Ok(out)
    } else {
        read_jsonl(path)
    }
}

/// Per-record labels of a source, in record order.
pub fn load_labels(source: &str) -> Result<Vec<String>> {
    if let Some((n, _)) = synthetic::parse_source(source) {
        return Ok((0..n)
            .map(|i| synthetic::COLORS[synthetic::Scene::of(i).color].0.to_string())
            .collect());
    }
    read_records(source)?
        .into_iter()
        .enumerate()
        .map(|(i, (_, r))| match r.label {
            Some(serde_json::Value::String(s)) => Ok(s),
            Some(v @ serde_json::Value::Number(_)) => Ok(v.to_string()),
            _ => Err(FlavaError::InvalidInput(format!(
                "record {} in {source} has no string or numeric label",
                i + 1
            ))),
        })
        .collect()
}

impl Dataset {
    pub fn load(kind: DatasetKind, source: &str, cfg: &ModelConfig) -> Result<Self> {
        let tok = WordTokenizer::new(cfg.text_vocab_size, cfg.max_text_len);
        let wants_images = kind != DatasetKind::UnimodalText;
        let wants_text = kind != DatasetKind::UnimodalImages;
        let (images, captions) = if let Some((n, variant)) = synthetic::parse_source(source) {
            let variant = variant.unwrap_or_else(|| default_variant(kind));
            let images = if wants_images {
                Some(synthetic::images(n, cfg.image_size, variant)?)
            } else {
                None
            };
            (images, wants_text.then(|| synthetic::captions(n)))
        } else {
            let records = read_records(source)?;
            let mut pixels = Vec::new();
            let mut caps = Vec::new();
            for (base, r) in &records {
                if wants_images {
                    let rel = r.image.as_ref().ok_or_else(|| {
                        FlavaError::InvalidInput(format!("record in {source} has no image"))
                    })?;
                    pixels.push(load_image(&base.join(rel), cfg.image_size)?);
                }
                if wants_text {
                    let c = r.caption.clone().or_else(|| r.text.clone()).ok_or_else(|| {
                        FlavaError::InvalidInput(format!("record in {source} has no caption"))
                    })?;
                    caps.push(c);
                }
            }
            let images = if wants_images {
                let s = cfg.image_size;
                let mut arr = Array4::<f64>::zeros((pixels.len(), 3, s, s));
                for (i, p) in pixels.iter().enumerate() {
                    arr.index_axis_mut(ndarray::Axis(0), i).assign(p);
                }
                Some(ImageBatch::new(arr)?)
            } else {
                None
            };
            (images, wants_text.then_some(caps))
        };
        let token_ids = captions.as_ref().map(|c| c.iter().map(|t| tok.encode(t)).collect());
        let ds = Self {
            kind,
            source: source.to_string(),
            images,
            captions,
            token_ids,
            image_tokens: None,
        };
        if ds.is_empty() {
            return Err(FlavaError::InsufficientData(format!("dataset {source} is empty")));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        match (&self.images, &self.token_ids) {
            (Some(i), _) => i.batch(),
            (None, Some(t)) => t.len(),
            _ => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn require_images(&self) -> Result<&ImageBatch> {
        self.images
            .as_ref()
            .ok_or_else(|| FlavaError::InvalidInput(format!("dataset {} has no images", self.source)))
    }

    pub fn image_batch(&self, rows: &[usize]) -> Result<ImageBatch> {
        Ok(self.require_images()?.select(rows))
    }

    pub fn text_batch(&self, rows: &[usize]) -> Result<TextBatch> {
        let t = self
            .token_ids
            .as_ref()
            .ok_or_else(|| FlavaError::InvalidInput(format!("dataset {} has no text", self.source)))?;
        let seqs: Vec<Vec<u32>> = rows.iter().map(|&r| t[r].clone()).collect();
        Ok(TextBatch::from_sequences(&seqs))
    }

    pub fn pair_batch(&self, rows: &[usize]) -> Result<PairBatch> {
        PairBatch::aligned(self.image_batch(rows)?, self.text_batch(rows)?)
    }

    pub fn tokens(&self, rows: &[usize]) -> Result<Array2<u32>> {
        let t = self
            .image_tokens
            .as_ref()
            .ok_or_else(|| FlavaError::InvalidInput(format!("dataset {} is not tokenized", self.source)))?;
        Ok(t.select(ndarray::Axis(0), rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FlavaConfig;

    #[test]
    fn synthetic_kinds() {
        let cfg = FlavaConfig::desk().model;
        let p = Dataset::load(DatasetKind::MultimodalPairs, "synthetic:8", &cfg).unwrap();
        assert_eq!(p.len(), 8);
        let b = p.pair_batch(&[0, 3]).unwrap();
        assert_eq!(b.images.batch(), 2);
        let t = Dataset::load(DatasetKind::UnimodalText, "synthetic:8", &cfg).unwrap();
        assert!(t.images.is_none());
        let i = Dataset::load(DatasetKind::UnimodalImages, "synthetic:8", &cfg).unwrap();
        assert_ne!(i.images, p.images);
    }

    #[test]
    fn jsonl_with_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(10, 6, |x, _| image::Rgb([(x * 20) as u8, 0, 255]));
        img.save(dir.path().join("a.png")).unwrap();
        std::fs::write(
            dir.path().join("pairs.jsonl"),
            "{\"image\": \"a.png\", \"caption\": \"a blue thing\", \"label\": 3}\n",
        )
        .unwrap();
        let cfg = FlavaConfig::desk().model;
        let src = dir.path().join("pairs.jsonl");
        let d = Dataset::load(DatasetKind::MultimodalPairs, src.to_str().unwrap(), &cfg).unwrap();
        let im = d.images.as_ref().unwrap();
        assert_eq!(im.pixels.dim(), (1, 3, 32, 32));
        assert!((im.pixels[[0, 2, 5, 5]] - 1.0).abs() < 1e-12);
        assert_eq!(load_labels(src.to_str().unwrap()).unwrap(), vec!["3"]);
        assert_eq!(load_labels("synthetic:2").unwrap(), vec!["red", "red"]);
        let missing = Dataset::load(DatasetKind::MultimodalPairs, "/nonexistent.jsonl", &cfg);
        assert!(matches!(missing, Err(FlavaError::Io { .. })));
    }
}
