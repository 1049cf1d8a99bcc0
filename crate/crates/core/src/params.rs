//! Named parameters, their shapes and initialization, and the [`Session`]
//! that binds them into a [`Graph`].
//!
//! Name scheme (`{enc}` is `image`, `text` or `multimodal`):
//!
//! ```text
//! image.patch_embed.{weight,bias}      image.cls_token   image.mask_token
//! image.position_embeddings
//! text.token_embeddings                text.position_embeddings
//! multimodal.{image,text}_projection.{weight,bias}       multimodal.cls_token
//! {enc}.layers.{i}.ln1.{gamma,beta}    {enc}.layers.{i}.ln2.{gamma,beta}
//! {enc}.layers.{i}.attn.{query,key,value,output}.{weight,bias}
//! {enc}.layers.{i}.mlp.{fc1,fc2}.{weight,bias}
//! {enc}.final_ln.{gamma,beta}
//! heads.{image,text}_contrastive.weight    heads.logit_scale
//! heads.itm.{weight,bias}
//! heads.{mim,mlm,mmm_image,mmm_text}.{dense.weight,dense.bias,ln.gamma,ln.beta,decoder.weight,decoder.bias}
//! ```
//!
//! Linear weights are stored `[in, out]`. Every parameter draws its initial
//! value from its own random stream keyed by `(seed, name)`, so initializing
//! one part of the model never shifts another.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::error::{FlavaError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::rng;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: (usize, usize), init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    /// Excluded from weight decay: biases, norms, the temperature.
    pub fn decays(name: &str) -> bool {
        !(name.ends_with(".bias")
            || name.ends_with(".gamma")
            || name.ends_with(".beta")
            || name == "heads.logit_scale")
    }
}

pub fn init_value(spec: &ParamSpec, seed: u64) -> Array2<f64> {
    match spec.init {
        Init::Zeros => Array2::zeros(spec.shape),
        Init::Ones => Array2::ones(spec.shape),
        Init::Constant(c) => Array2::from_elem(spec.shape, c),
        Init::TruncNormal(std) => {
            let mut r = rng::stream(seed, &[rng::hash_str(&spec.name)]);
            Array2::from_shape_simple_fn(spec.shape, || loop {
                let z: f64 = r.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
        }
    }
}

pub fn linear_specs(prefix: &str, input: usize, output: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), (input, output), Init::TruncNormal(INIT_STD)),
        ParamSpec::new(format!("{prefix}.bias"), (1, output), Init::Zeros),
    ]
}

pub fn layer_norm_specs(prefix: &str, width: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), (1, width), Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), (1, width), Init::Zeros),
    ]
}

pub fn transformer_specs(prefix: &str, hidden: usize, intermediate: usize, layers: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for i in 0..layers {
        let l = format!("{prefix}.layers.{i}");
        out.extend(layer_norm_specs(&format!("{l}.ln1"), hidden));
        for proj in ["query", "key", "value", "output"] {
            out.extend(linear_specs(&format!("{l}.attn.{proj}"), hidden, hidden));
        }
        out.extend(layer_norm_specs(&format!("{l}.ln2"), hidden));
        out.extend(linear_specs(&format!("{l}.mlp.fc1"), hidden, intermediate));
        out.extend(linear_specs(&format!("{l}.mlp.fc2"), intermediate, hidden));
    }
    out.extend(layer_norm_specs(&format!("{prefix}.final_ln"), hidden));
    out
}

/// Dense → GELU → LayerNorm → decoder prediction head.
pub fn mlp_head_specs(prefix: &str, hidden: usize, classes: usize, with_decoder_weight: bool) -> Vec<ParamSpec> {
    let mut out = linear_specs(&format!("{prefix}.dense"), hidden, hidden);
    out.extend(layer_norm_specs(&format!("{prefix}.ln"), hidden));
    if with_decoder_weight {
        out.extend(linear_specs(&format!("{prefix}.decoder"), hidden, classes));
    } else {
        out.push(ParamSpec::new(format!("{prefix}.decoder.bias"), (1, classes), Init::Zeros));
    }
    out
}

pub fn image_encoder_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.hidden_size;
    let mut out = linear_specs("image.patch_embed", c.patch_dim(), d);
    out.push(ParamSpec::new("image.cls_token", (1, d), Init::TruncNormal(INIT_STD)));
    out.push(ParamSpec::new("image.mask_token", (1, d), Init::TruncNormal(INIT_STD)));
    out.push(ParamSpec::new(
        "image.position_embeddings",
        (1 + c.num_patches(), d),
        Init::TruncNormal(INIT_STD),
    ));
    out.extend(transformer_specs("image", d, c.intermediate_size, c.image_layers));
    out
}

pub fn text_encoder_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.hidden_size;
    let mut out = vec![
        ParamSpec::new("text.token_embeddings", (c.text_vocab_size, d), Init::TruncNormal(INIT_STD)),
        ParamSpec::new("text.position_embeddings", (c.max_text_len, d), Init::TruncNormal(INIT_STD)),
    ];
    out.extend(transformer_specs("text", d, c.intermediate_size, c.text_layers));
    out
}

pub fn multimodal_encoder_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.hidden_size;
    let mut out = linear_specs("multimodal.image_projection", d, d);
    out.extend(linear_specs("multimodal.text_projection", d, d));
    out.push(ParamSpec::new("multimodal.cls_token", (1, d), Init::TruncNormal(INIT_STD)));
    out.extend(transformer_specs("multimodal", d, c.intermediate_size, c.multimodal_layers));
    out
}

pub fn head_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.hidden_size;
    let untied = !c.tie_text_embeddings;
    let mut out = vec![
        ParamSpec::new("heads.image_contrastive.weight", (d, c.projection_dim), Init::TruncNormal(INIT_STD)),
        ParamSpec::new("heads.text_contrastive.weight", (d, c.projection_dim), Init::TruncNormal(INIT_STD)),
        ParamSpec::new("heads.logit_scale", (1, 1), Init::Constant((1.0 / c.temperature_init).ln())),
    ];
    out.extend(linear_specs("heads.itm", d, 1));
    out.extend(mlp_head_specs("heads.mim", d, c.codebook_size, true));
    out.extend(mlp_head_specs("heads.mmm_image", d, c.codebook_size, true));
    out.extend(mlp_head_specs("heads.mlm", d, c.text_vocab_size, untied));
    out.extend(mlp_head_specs("heads.mmm_text", d, c.text_vocab_size, untied));
    out
}

pub fn model_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = image_encoder_specs(c);
    out.extend(text_encoder_specs(c));
    out.extend(multimodal_encoder_specs(c));
    out.extend(head_specs(c));
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    values: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let values = specs
            .iter()
            .map(|s| (s.name.clone(), init_value(s, seed)))
            .collect();
        Self { values }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.values.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.values.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.values.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.values.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Array2<f64>> {
        self.values
    }

    pub fn from_map(values: BTreeMap<String, Array2<f64>>) -> Self {
        Self { values }
    }

    /// Checks that every spec is present with its declared shape.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            let v = self.get(&s.name).ok_or_else(|| FlavaError::MissingParam(s.name.clone()))?;
            if v.dim() != s.shape {
                return Err(FlavaError::ParamShape {
                    name: s.name.clone(),
                    expected: s.shape,
                    found: v.dim(),
                });
            }
        }
        Ok(())
    }
}

/// A graph under construction plus the parameters bound into it.
///
/// Parameters become leaves (trainable) or constants (frozen) the first time
/// they are referenced; later references reuse the same node.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
    frozen_prefixes: Vec<String>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: HashMap::new(),
            trainable,
            frozen_prefixes: Vec::new(),
        }
    }

    /// Inference-only session: every parameter is a constant.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::new(params, false)
    }

    pub fn training(params: &'p ParamStore) -> Self {
        Self::new(params, true)
    }

    /// Parameters whose names start with any of `prefixes` are bound as constants.
    pub fn freeze(mut self, prefixes: &[&str]) -> Self {
        self.frozen_prefixes = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.get(name).is_some()
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"))
            .clone();
        let frozen = self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let v = if self.trainable && !frozen {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Gradients of `loss` for every bound trainable parameter that it
    /// depends on. Parameters the loss never touched are absent.
    pub fn param_grads(&self, loss: Var) -> BTreeMap<String, Array2<f64>> {
        let mut grads: Gradients = self.graph.backward(loss);
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if let Some(g) = grads.take(v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
