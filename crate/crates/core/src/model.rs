//! A configured model: validated hyperparameters plus a parameter store.

use std::path::Path;

use ndarray::{concatenate, Array2, Axis};

use crate::batch::{ImageBatch, TextBatch};
use crate::checkpoint::Container;
use crate::config::{validate_config, ModelConfig, ValidatedConfig};
use crate::encoders::{self, HiddenStates};
use crate::error::{FlavaError, Result};
use crate::objectives::contrastive_embeddings;
use crate::params::{model_specs, ParamStore, Session};

/// Tensor name prefixes that training checkpoints add beside the model.
pub const NON_MODEL_PREFIXES: [&str; 2] = ["optim.", "codebook."];

/// Items per forward pass when embedding large collections.
pub const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct FlavaModel {
    pub config: ValidatedConfig,
    pub params: ParamStore,
}

fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r.mapv_inplace(|v| v / n);
        }
    }
    m
}

impl FlavaModel {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let config = validate_config(config.clone())?;
        let params = ParamStore::init(&model_specs(&config), config.seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        let config = validate_config(config.clone())?;
        params.check(&model_specs(&config))?;
        Ok(Self { config, params })
    }

    pub fn encode_image(&self, images: &ImageBatch) -> Result<HiddenStates> {
        let mut s = Session::inference(&self.params);
        let e = encoders::encode_image(&mut s, &self.config, images, None)?;
        Ok(HiddenStates::from_encoded(&s, &e))
    }

    pub fn encode_text(&self, texts: &TextBatch) -> Result<HiddenStates> {
        let mut s = Session::inference(&self.params);
        let e = encoders::encode_text(&mut s, &self.config, texts)?;
        Ok(HiddenStates::from_encoded(&s, &e))
    }

    pub fn encode_multimodal(&self, image: &HiddenStates, text: &HiddenStates) -> Result<HiddenStates> {
        let mut s = Session::inference(&self.params);
        let i = image.bind(&mut s);
        let t = text.bind(&mut s);
        let e = encoders::encode_multimodal(&mut s, &self.config, &i, &t)?;
        Ok(HiddenStates::from_encoded(&s, &e))
    }

    fn project(&self, cls: Array2<f64>, head: &str) -> Array2<f64> {
        let w = self.params.get(head).expect("contrastive head");
        normalize_rows(cls.dot(w))
    }

    /// L2-normalized contrastive image embeddings.
    pub fn embed_images(&self, images: &ImageBatch) -> Result<Array2<f64>> {
        let mut parts = Vec::new();
        for start in (0..images.batch()).step_by(EMBED_CHUNK) {
            let rows: Vec<usize> = (start..(start + EMBED_CHUNK).min(images.batch())).collect();
            let h = self.encode_image(&images.select(&rows))?;
            parts.push(self.project(h.cls(), "heads.image_contrastive.weight"));
        }
        stack(parts, self.config.projection_dim)
    }

    /// L2-normalized contrastive text embeddings.
    pub fn embed_texts(&self, texts: &TextBatch) -> Result<Array2<f64>> {
        let mut parts = Vec::new();
        for start in (0..texts.batch()).step_by(EMBED_CHUNK) {
            let rows: Vec<usize> = (start..(start + EMBED_CHUNK).min(texts.batch())).collect();
            let h = self.encode_text(&texts.select(&rows))?;
            parts.push(self.project(h.cls(), "heads.text_contrastive.weight"));
        }
        stack(parts, self.config.projection_dim)
    }

    /// Contrastive embeddings computed in one graph, unnormalized; used by tests
    /// that compare against the training path.
    pub fn raw_contrastive_embeddings(&self, images: &ImageBatch, texts: &TextBatch) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut s = Session::inference(&self.params);
        let i = encoders::encode_image(&mut s, &self.config, images, None)?;
        let t = encoders::encode_text(&mut s, &self.config, texts)?;
        let (ei, et) = contrastive_embeddings(&mut s, &i, &t);
        Ok((s.graph.value(ei).clone(), s.graph.value(et).clone()))
    }

    pub fn temperature(&self) -> f64 {
        let ls = self.params.get("heads.logit_scale").expect("logit scale")[[0, 0]];
        (-ls).exp()
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Container {
        let meta = serde_json::json!({
            "kind": "flava_model",
            "config": &*self.config,
            "extra": extra,
        });
        let mut c = Container::new(meta);
        for (k, v) in self.params.iter() {
            c.tensors.insert(k.clone(), v.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg = c.metadata.get("config").ok_or_else(|| FlavaError::Checkpoint {
            path: Default::default(),
            detail: "no model config in metadata".into(),
        })?;
        let cfg: ModelConfig = serde_json::from_value(cfg.clone())?;
        let params = c
            .tensors
            .iter()
            .filter(|(k, _)| !NON_MODEL_PREFIXES.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self::from_params(&cfg, ParamStore::from_map(params))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_container(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        Self::from_container(&c).map_err(|e| match e {
            FlavaError::Checkpoint { detail, .. } => FlavaError::Checkpoint {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }
}

fn stack(parts: Vec<Array2<f64>>, dim: usize) -> Result<Array2<f64>> {
    if parts.is_empty() {
        return Ok(Array2::zeros((0, dim)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| FlavaError::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FlavaConfig;
    use crate::rng;
    use ndarray::Array4;
    use rand::Rng;

    fn model() -> FlavaModel {
        FlavaModel::init(&FlavaConfig::desk().model).unwrap()
    }

    fn images(b: usize, seed: u64) -> ImageBatch {
        let mut r = rng::stream(seed, &[]);
        ImageBatch::new(Array4::from_shape_simple_fn((b, 3, 32, 32), || r.random())).unwrap()
    }

    fn texts(seqs: &[Vec<u32>]) -> TextBatch {
        TextBatch::from_sequences(seqs)
    }

    #[test]
    fn desk_shapes() {
        let m = model();
        let hi = m.encode_image(&images(2, 0)).unwrap();
        assert_eq!(hi.states.dim(), (2, 17, 64));
        let ht = m.encode_text(&texts(&[vec![1, 5, 6, 7, 8, 9, 10, 2], vec![1, 11, 12, 13, 14, 15, 16, 2]])).unwrap();
        assert_eq!(ht.states.dim(), (2, 8, 64));
        let hm = m.encode_multimodal(&hi, &ht).unwrap();
        assert_eq!(hm.states.dim(), (2, 26, 64));
        assert!(hm.states.iter().all(|v| v.is_finite()));
        let one = m.encode_text(&texts(&[vec![1, 5, 2]])).unwrap();
        assert!(m.encode_multimodal(&hi, &one).is_err());
    }

    #[test]
    fn text_padding_independence_and_range() {
        let m = model();
        let short = m.encode_text(&texts(&[vec![1, 20, 21, 2]])).unwrap();
        let mut padded = texts(&[vec![1, 20, 21, 2, 0, 0, 0, 0]]);
        for t in 4..8 {
            padded.attention_mask[[0, t]] = false;
        }
        let long = m.encode_text(&padded).unwrap();
        for t in 0..4 {
            for d in 0..64 {
                assert!((short.states[[0, t, d]] - long.states[[0, t, d]]).abs() < 1e-6);
            }
        }
        let bad = texts(&[vec![1, 1000, 2]]);
        assert!(matches!(m.encode_text(&bad), Err(FlavaError::TokenOutOfRange { .. })));
    }

    #[test]
    fn batch_equivariance_of_multimodal() {
        let m = model();
        let imgs = images(3, 1);
        let t = texts(&[vec![1, 5, 6, 2], vec![1, 7, 2, 0], vec![1, 9, 10, 2]]);
        let hm = m.encode_multimodal(&m.encode_image(&imgs).unwrap(), &m.encode_text(&t).unwrap()).unwrap();
        let perm = [2, 0, 1];
        let hp = m
            .encode_multimodal(
                &m.encode_image(&imgs.select(&perm)).unwrap(),
                &m.encode_text(&t.select(&perm)).unwrap(),
            )
            .unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let d = &hp.states.index_axis(Axis(0), new) - &hm.states.index_axis(Axis(0), old);
            assert!(d.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn removing_last_block_changes_output() {
        let m = model();
        let imgs = images(1, 2);
        let full = m.encode_image(&imgs).unwrap();
        let mut cfg = m.config.clone().into_inner();
        cfg.image_layers = 1;
        let mut s = Session::inference(&m.params);
        let e = encoders::encode_image(&mut s, &cfg, &imgs, None).unwrap();
        let short = HiddenStates::from_encoded(&s, &e);
        let diff: f64 = (&full.states - &short.states).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p, serde_json::json!({"step": 3})).unwrap();
        let back = FlavaModel::load(&p).unwrap();
        assert_eq!(back, m);
        let e = m.embed_images(&images(3, 4)).unwrap();
        for r in e.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        }
    }
}
