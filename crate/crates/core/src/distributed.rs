//! Simulated data-parallel contrastive loss.
//!
//! A global batch of `B` pairs is split in order across `K` workers. Every
//! worker all-gathers both modalities and computes its share of the loss: the
//! image-to-text cross-entropy over its own rows and the text-to-image
//! cross-entropy over its own columns, each weighted `n_k / 2B`. The shares sum
//! to the full-batch loss.
//!
//! * global variant: gradients flow back through the gather, so each local
//!   embedding receives the sum of every worker's contribution (a
//!   reduce-scatter). This reproduces full-batch back-propagation.
//! * local variant: gathered remote embeddings are constants; a worker's local
//!   embeddings only receive gradient from its own share.

use ndarray::{concatenate, s, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FlavaError, Result};
use crate::graph::Graph;
use crate::objectives::{check_embeddings, contrastive_loss};
use crate::par;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerShard {
    pub worker_id: usize,
    pub image: Array2<f64>,
    pub text: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Global,
    Local,
}

/// Loss plus each worker's gradient with respect to its local embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardGradients {
    pub loss: f64,
    pub image: Vec<Array2<f64>>,
    pub text: Vec<Array2<f64>>,
}

impl ShardGradients {
    /// Worker gradients stacked back into global batch order.
    pub fn stacked(&self) -> (Array2<f64>, Array2<f64>) {
        let cat = |v: &[Array2<f64>]| {
            let views: Vec<_> = v.iter().map(|a| a.view()).collect();
            concatenate(Axis(0), &views).expect("consistent width")
        };
        (cat(&self.image), cat(&self.text))
    }
}

/// Splits a batch into `k` equal, in-order shards.
pub fn shard(image: &Array2<f64>, text: &Array2<f64>, k: usize) -> Result<Vec<WorkerShard>> {
    let b = image.nrows();
    if k == 0 || b % k != 0 || text.dim() != image.dim() {
        return Err(FlavaError::shape(format!(
            "batch {b} ({:?} / {:?}) cannot be split into {k} equal shards",
            image.dim(),
            text.dim()
        )));
    }
    let n = b / k;
    Ok((0..k)
        .map(|w| WorkerShard {
            worker_id: w,
            image: image.slice(s![w * n..(w + 1) * n, ..]).to_owned(),
            text: text.slice(s![w * n..(w + 1) * n, ..]).to_owned(),
        })
        .collect())
}

fn gather(shards: &[WorkerShard]) -> Result<(Array2<f64>, Array2<f64>, Vec<usize>)> {
    if shards.is_empty() {
        return Err(FlavaError::shape("no shards".to_string()));
    }
    let (n, d) = shards[0].image.dim();
    let mut offsets = Vec::with_capacity(shards.len());
    for (i, s) in shards.iter().enumerate() {
        if s.image.dim() != (n, d) || s.text.dim() != (n, d) {
            return Err(FlavaError::shape(format!(
                "ragged shard {i}: image {:?}, text {:?}, expected ({n}, {d})",
                s.image.dim(),
                s.text.dim()
            )));
        }
        offsets.push(i * n);
    }
    let iv: Vec<_> = shards.iter().map(|s| s.image.view()).collect();
    let tv: Vec<_> = shards.iter().map(|s| s.text.view()).collect();
    let img = concatenate(Axis(0), &iv).expect("checked shapes");
    let txt = concatenate(Axis(0), &tv).expect("checked shapes");
    check_embeddings(&img, &txt)?;
    Ok((img, txt, offsets))
}

/// One worker's loss share and its gradient w.r.t. all gathered embeddings.
fn worker_share(
    img: &Array2<f64>,
    txt: &Array2<f64>,
    rows: std::ops::Range<usize>,
    temperature: f64,
) -> (f64, Array2<f64>, Array2<f64>) {
    let b = img.nrows();
    let n = rows.len();
    let mut g = Graph::new();
    let i = g.leaf(img.clone());
    let t = g.leaf(txt.clone());
    let ni = g.l2_normalize_rows(i);
    let nt = g.l2_normalize_rows(t);
    let sims = g.matmul_t(ni, nt);
    let logits = g.scale(sims, 1.0 / temperature);
    let local: Vec<usize> = rows.collect();
    let own_rows = g.gather_rows(logits, local.clone());
    let row_ce = g.cross_entropy(own_rows, local.clone());
    let lt = g.transpose(logits);
    let own_cols = g.gather_rows(lt, local.clone());
    let col_ce = g.cross_entropy(own_cols, local);
    let w = n as f64 / (2.0 * b as f64);
    let loss = g.weighted_sum(&[(row_ce, w), (col_ce, w)]);
    let mut grads = g.backward(loss);
    (g.scalar(loss), grads.take(i).expect("leaf"), grads.take(t).expect("leaf"))
}

fn run(shards: &[WorkerShard], temperature: f64, variant: Variant) -> Result<ShardGradients> {
    if !(temperature > 0.0) {
        return Err(FlavaError::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    let (img, txt, offsets) = gather(shards)?;
    let n = shards[0].image.nrows();
    let shares = par::map_indexed(shards.len(), |w| worker_share(&img, &txt, offsets[w]..offsets[w] + n, temperature));
    let loss = shares.iter().map(|s| s.0).sum();
    let mut out = ShardGradients {
        loss,
        image: Vec::with_capacity(shards.len()),
        text: Vec::with_capacity(shards.len()),
    };
    for (w, &o) in offsets.iter().enumerate() {
        let rows = s![o..o + n, ..];
        match variant {
            Variant::Local => {
                out.image.push(shares[w].1.slice(rows).to_owned());
                out.text.push(shares[w].2.slice(rows).to_owned());
            }
            Variant::Global => {
                let mut gi = Array2::<f64>::zeros((n, img.ncols()));
                let mut gt = Array2::<f64>::zeros((n, img.ncols()));
                for share in &shares {
                    gi += &share.1.slice(rows);
                    gt += &share.2.slice(rows);
                }
                out.image.push(gi);
                out.text.push(gt);
            }
        }
    }
    Ok(out)
}

pub fn global_contrastive(shards: &[WorkerShard], temperature: f64) -> Result<ShardGradients> {
    run(shards, temperature, Variant::Global)
}

pub fn local_contrastive(shards: &[WorkerShard], temperature: f64) -> Result<ShardGradients> {
    run(shards, temperature, Variant::Local)
}

/// Gradient of a projection `W` shared by all workers, accumulated as
/// `Σ_k X_kᵀ g_k` from per-worker features `X_k` and embedding gradients.
pub fn shared_projection_gradient(features: &[Array2<f64>], embedding_grads: &[Array2<f64>]) -> Result<Array2<f64>> {
    if features.len() != embedding_grads.len() || features.is_empty() {
        return Err(FlavaError::shape("feature/gradient shard counts differ".to_string()));
    }
    let mut acc = Array2::<f64>::zeros((features[0].ncols(), embedding_grads[0].ncols()));
    for (x, g) in features.iter().zip(embedding_grads) {
        if x.nrows() != g.nrows() {
            return Err(FlavaError::shape(format!("{} feature rows vs {} gradient rows", x.nrows(), g.nrows())));
        }
        acc += &x.t().dot(g);
    }
    Ok(acc)
}

/// Largest elementwise relative difference, `|a - b| / (max(|a|, |b|) + 1e-12)`.
pub fn max_rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()) + 1e-12))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub workers: usize,
    pub batch: usize,
    pub global_max_rel_err: f64,
    pub global_loss_diff: f64,
    pub local_loss_diff: f64,
    pub local_vs_global_grad_norm: f64,
    pub local_max_rel_err: f64,
}

impl VerifyReport {
    pub fn global_pass(&self) -> bool {
        self.global_max_rel_err <= 1e-6 && self.global_loss_diff <= 1e-10
    }

    /// The local variant must agree in the forward pass and (for K > 1)
    /// disagree in its gradients.
    pub fn local_pass(&self) -> bool {
        self.local_loss_diff <= 1e-10 && (self.workers == 1) == (self.local_vs_global_grad_norm == 0.0)
    }

    pub fn pass(&self) -> bool {
        self.global_pass() && self.local_pass()
    }
}

/// Compares both variants against a single full-batch oracle on random
/// embeddings.
pub fn verify(workers: usize, batch: usize, dim: usize, temperature: f64, seed: u64) -> Result<VerifyReport> {
    let mut r = rng::stream(seed, &[]);
    let mut randn = |rows: usize| Array2::from_shape_simple_fn((rows, dim), || StandardNormal.sample(&mut r));
    let img = randn(batch);
    let txt = randn(batch);
    let oracle = contrastive_loss(&img, &txt, temperature)?;
    let shards = shard(&img, &txt, workers)?;
    let global = global_contrastive(&shards, temperature)?;
    let local = local_contrastive(&shards, temperature)?;
    let (gi, gt) = global.stacked();
    let (li, lt) = local.stacked();
    let diff_norm = ((&li - &gi).mapv(|v| v * v).sum() + (&lt - &gt).mapv(|v| v * v).sum()).sqrt();
    Ok(VerifyReport {
        workers,
        batch,
        global_max_rel_err: max_rel_diff(&gi, &oracle.grad_image).max(max_rel_diff(&gt, &oracle.grad_text)),
        global_loss_diff: (global.loss - oracle.loss).abs(),
        local_loss_diff: (local.loss - global.loss).abs(),
        local_vs_global_grad_norm: diff_norm,
        local_max_rel_err: max_rel_diff(&li, &oracle.grad_image).max(max_rel_diff(&lt, &oracle.grad_text)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn randn(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut r = rng::stream(seed, &[]);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut r))
    }

    #[test]
    fn single_worker_matches_plain_loss() {
        let (a, b) = (randn(1, 6, 4), randn(2, 6, 4));
        let oracle = contrastive_loss(&a, &b, 0.1).unwrap();
        let shards = shard(&a, &b, 1).unwrap();
        let g = global_contrastive(&shards, 0.1).unwrap();
        let l = local_contrastive(&shards, 0.1).unwrap();
        assert!((g.loss - oracle.loss).abs() < 1e-12);
        assert_eq!(g, l);
        assert!(max_rel_diff(&g.image[0], &oracle.grad_image) < 1e-12);
    }

    #[test]
    fn four_workers_thirty_two() {
        let rep = verify(4, 32, 16, 0.07, 5).unwrap();
        assert!(rep.global_max_rel_err < 1e-6, "{rep:?}");
        assert!(rep.local_loss_diff < 1e-10);
        assert!(rep.local_vs_global_grad_norm > 0.0);
        assert!(rep.pass());
    }

    #[test]
    fn ragged_and_indivisible_rejected() {
        let (a, b) = (randn(1, 6, 4), randn(2, 6, 4));
        assert!(shard(&a, &b, 4).is_err());
        let mut shards = shard(&a, &b, 2).unwrap();
        shards[1].image = randn(3, 2, 4);
        assert!(global_contrastive(&shards, 0.1).is_err());
    }

    #[test]
    fn shared_projection_sums_to_full_batch() {
        let (xi, xt) = (randn(7, 16, 5), randn(8, 16, 5));
        let (wi, wt) = (randn(9, 5, 3), randn(10, 5, 3));
        let mut g = Graph::new();
        let (xiv, xtv) = (g.constant(xi.clone()), g.constant(xt.clone()));
        let (wiv, wtv) = (g.leaf(wi.clone()), g.leaf(wt.clone()));
        let ei = g.matmul(xiv, wiv);
        let et = g.matmul(xtv, wtv);
        let scale = g.constant(Array2::from_elem((1, 1), 1.0 / 0.2));
        let (loss, _) = crate::objectives::contrastive_graph(&mut g, ei, et, scale);
        let grads = g.backward(loss);

        let shards = shard(&xi.dot(&wi), &xt.dot(&wt), 4).unwrap();
        let res = global_contrastive(&shards, 0.2).unwrap();
        let feats_i: Vec<_> = (0..4).map(|k| xi.slice(s![k * 4..(k + 1) * 4, ..]).to_owned()).collect();
        let feats_t: Vec<_> = (0..4).map(|k| xt.slice(s![k * 4..(k + 1) * 4, ..]).to_owned()).collect();
        let gwi = shared_projection_gradient(&feats_i, &res.image).unwrap();
        let gwt = shared_projection_gradient(&feats_t, &res.text).unwrap();
        assert!(max_rel_diff(&gwi, grads.get(wiv).unwrap()) < 1e-6);
        assert!(max_rel_diff(&gwt, grads.get(wtv).unwrap()) < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn global_is_independent_of_k_and_permutation_consistent(seed: u64, k_idx in 0usize..4) {
            let k = [1, 2, 4, 8][k_idx];
            let (a, b) = (randn(seed, 16, 6), randn(seed ^ 1, 16, 6));
            let full = global_contrastive(&shard(&a, &b, 1).unwrap(), 0.3).unwrap();
            let split = global_contrastive(&shard(&a, &b, k).unwrap(), 0.3).unwrap();
            prop_assert!((full.loss - split.loss).abs() < 1e-12);
            let (fi, ft) = full.stacked();
            let (si, st) = split.stacked();
            prop_assert!(max_rel_diff(&fi, &si) < 1e-9);
            prop_assert!(max_rel_diff(&ft, &st) < 1e-9);

            let mut shards = shard(&a, &b, k).unwrap();
            shards.reverse();
            let rev = global_contrastive(&shards, 0.3).unwrap();
            for w in 0..k {
                prop_assert!(max_rel_diff(&rev.image[w], &split.image[k - 1 - w]) < 1e-9);
                prop_assert!(max_rel_diff(&rev.text[w], &split.text[k - 1 - w]) < 1e-9);
            }
        }
    }
}
