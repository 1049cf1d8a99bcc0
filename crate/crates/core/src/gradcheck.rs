//! Central finite-difference checks of parameter gradients.

use ndarray::{Array2, Array4};
use rand::seq::index::sample;
use rand::Rng;

use crate::batch::{ImageBatch, TextBatch};
use crate::config::FlavaConfig;
use crate::encoders::{encode_image, encode_multimodal, encode_text};
use crate::error::Result;
use crate::graph::Var;
use crate::masking::{apply_text_mask, image_mask_plan, mlm_mask};
use crate::model::FlavaModel;
use crate::objectives::{gc_loss, itm_loss, mim_loss, mlm_loss, mmm_loss};
use crate::params::{ParamStore, Session};
use crate::rng;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
}

/// Relative error with a floor on the denominator: `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the scalar built by `loss` against central
/// differences.
///
/// For every parameter in `names` the `top` coordinates with the largest
/// analytic magnitude and `random` further coordinates are checked. `floor`
/// bounds the relative-error denominator away from zero for coordinates whose
/// true gradient vanishes.
pub fn check<F>(store: &ParamStore, names: &[String], top: usize, random: usize, floor: f64, seed: u64, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::training(store);
    let l = loss(&mut s)?;
    let grads = s.param_grads(l);
    drop(s);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut s = Session::inference(p);
        let l = loss(&mut s)?;
        Ok(s.graph.scalar(l))
    };

    let mut work = store.clone();
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for name in names {
        let value = store.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let n = value.len();
        let zeros = ndarray::Array2::zeros(value.dim());
        let g = grads.get(name).unwrap_or(&zeros);
        let flat: Vec<f64> = g.iter().copied().collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
        let mut coords: Vec<usize> = order.into_iter().take(top.min(n)).collect();
        let mut r = rng::stream(seed, &[rng::hash_str(name)]);
        coords.extend(sample(&mut r, n, random.min(n)).into_iter());
        coords.sort_unstable();
        coords.dedup();
        let cols = value.ncols();
        for idx in coords {
            let (i, j) = (idx / cols, idx % cols);
            let orig = value[[i, j]];
            work.get_mut(name).unwrap()[[i, j]] = orig + STEP;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap()[[i, j]] = orig - STEP;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap()[[i, j]] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let e = rel_err(flat[idx], numeric, floor);
            out.checked += 1;
            if e > out.max_rel_err || out.worst.is_empty() {
                out.max_rel_err = e;
                out.worst = format!("{name}[{i},{j}] analytic={} numeric={numeric}", flat[idx]);
            }
        }
    }
    Ok(out)
}

/// Pretraining objectives covered by [`check_objective`].
pub const OBJECTIVES: [&str; 5] = ["gc", "itm", "mmm", "mim", "mlm"];

/// Parameters probed for each objective: its head plus encoder tensors at
/// the bottom, middle and top of the path the loss flows through.
pub fn probed_params(objective: &str) -> &'static [&'static str] {
    match objective {
        "gc" => &[
            "heads.logit_scale",
            "heads.image_contrastive.weight",
            "heads.text_contrastive.weight",
            "image.layers.1.attn.query.weight",
            "text.layers.0.mlp.fc1.weight",
            "image.patch_embed.weight",
        ],
        "itm" => &[
            "heads.itm.weight",
            "heads.itm.bias",
            "multimodal.layers.0.attn.key.weight",
            "multimodal.image_projection.weight",
            "multimodal.cls_token",
        ],
        "mmm" => &[
            "heads.mmm_image.decoder.weight",
            "heads.mmm_text.dense.weight",
            "multimodal.layers.1.ln1.gamma",
            "image.mask_token",
        ],
        "mim" => &[
            "heads.mim.decoder.weight",
            "heads.mim.ln.gamma",
            "image.layers.0.mlp.fc2.weight",
            "image.mask_token",
            "image.position_embeddings",
        ],
        "mlm" => &[
            "heads.mlm.decoder.weight",
            "heads.mlm.dense.bias",
            "text.token_embeddings",
            "text.layers.1.attn.value.weight",
        ],
        _ => &[],
    }
}

/// Checks one objective of the desk-scale model on a fixed two-item batch.
pub fn check_objective(objective: &str) -> Result<GradCheck> {
    let desk = FlavaConfig::desk();
    let model = FlavaModel::init(&desk.model)?;
    let cfg = model.config.clone();
    let mut r = rng::stream(42, &[]);
    let (c, h) = (cfg.channels, cfg.image_size);
    let images = ImageBatch::new(Array4::from_shape_simple_fn((2, c, h, h), || r.random()))?;
    let texts = TextBatch::from_sequences(&[vec![1, 10, 11, 12, 13, 2], vec![1, 20, 21, 22, 2]]);
    let n = cfg.num_patches();
    let tokens = Array2::from_shape_fn((2, n), |(b, p)| ((b * 7 + p * 13) % cfg.codebook_size) as u32);
    let mut r = rng::stream(1, &[]);
    let iplan = image_mask_plan(&tokens, cfg.grid(), 0.4, &desk.masking, &mut r)?;
    let tplan = mlm_mask(&texts, 0.5, false, cfg.text_vocab_size, &mut r);
    let names: Vec<String> = probed_params(objective).iter().map(|s| s.to_string()).collect();
    check(&model.params, &names, 3, 3, 1e-8, 0, |s| {
        Ok(match objective {
            "gc" => {
                let i = encode_image(s, &cfg, &images, None)?;
                let t = encode_text(s, &cfg, &texts)?;
                gc_loss(s, &i, &t).0
            }
            "itm" => {
                let i = encode_image(s, &cfg, &images, None)?;
                let t = encode_text(s, &cfg, &texts)?;
                let mm = encode_multimodal(s, &cfg, &i, &t)?;
                itm_loss(s, &mm, &[true, false])?.0
            }
            "mmm" => {
                let i = encode_image(s, &cfg, &images, Some(&iplan))?;
                let t = encode_text(s, &cfg, &apply_text_mask(&texts, &tplan)?)?;
                let mm = encode_multimodal(s, &cfg, &i, &t)?;
                let (a, b) = mmm_loss(s, &mm, &iplan, &tplan)?;
                let parts: Vec<(Var, f64)> = [a, b].into_iter().flatten().map(|v| (v, 1.0)).collect();
                s.graph.weighted_sum(&parts)
            }
            "mim" => {
                let i = encode_image(s, &cfg, &images, Some(&iplan))?;
                mim_loss(s, &i, &iplan)?.expect("plan masks patches")
            }
            "mlm" => {
                let t = encode_text(s, &cfg, &apply_text_mask(&texts, &tplan)?)?;
                mlm_loss(s, &t, &tplan)?.expect("plan masks tokens")
            }
            other => {
                return Err(crate::error::FlavaError::InvalidInput(format!("unknown objective `{other}`")))
            }
        })
    })
}
