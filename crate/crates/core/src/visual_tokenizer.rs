//! Discrete visual tokenizer: a k-means codebook over raw pixel patches.
//!
//! Fitting uses k-means++ seeding followed by Lloyd iterations. Tokenizing a
//! patch returns the index of its nearest entry in squared Euclidean
//! distance, breaking ties toward the lower index.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::batch::ImageBatch;
use crate::checkpoint::Container;
use crate::encoders::patchify;
use crate::error::{FlavaError, Result};
use crate::par;

pub const MAX_ITERATIONS: usize = 100;
const ENTRIES_KEY: &str = "codebook.entries";

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Array2<f64>,
}

/// Diagnostics from [`fit_codebook`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Total squared quantization error after each assignment step.
    pub errors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let k = entries.nrows();
        if k < 2 {
            return Err(FlavaError::InvalidInput(format!("codebook needs at least 2 entries, got {k}")));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(FlavaError::InvalidInput("codebook has non-finite entries".into()));
        }
        for i in 0..k {
            for j in i + 1..k {
                if entries.row(i) == entries.row(j) {
                    return Err(FlavaError::InvalidInput(format!("codebook entries {i} and {j} are identical")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn code_dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Nearest entry and its squared distance; ties go to the lower index.
    pub fn nearest(&self, x: ArrayView1<f64>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, e) in self.entries.axis_iter(Axis(0)).enumerate() {
            let d = sq_dist(x, e);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn quantize(&self, features: ArrayView2<f64>) -> Result<Vec<u32>> {
        if features.ncols() != self.code_dim() {
            return Err(FlavaError::shape(format!(
                "feature dim {} does not match codebook dim {}",
                features.ncols(),
                self.code_dim()
            )));
        }
        Ok(par::map_indexed(features.nrows(), |i| self.nearest(features.row(i)).0 as u32))
    }

    /// Codebook index of every patch, `[batch, n_patches]`.
    pub fn tokenize(&self, images: &ImageBatch, patch_size: usize) -> Result<Array2<u32>> {
        let p = patchify(images, patch_size)?;
        let (b, n, d) = p.dim();
        let flat = p.into_shape_with_order((b * n, d)).expect("contiguous");
        let ids = self.quantize(flat.view())?;
        Ok(Array2::from_shape_vec((b, n), ids).expect("b * n ids"))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({ "kind": "codebook" }));
        c.tensors.insert(ENTRIES_KEY.to_string(), self.entries.clone());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let entries = c
            .tensors
            .get(ENTRIES_KEY)
            .ok_or_else(|| FlavaError::MissingParam(ENTRIES_KEY.to_string()))?;
        Self::new(entries.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn assign(points: ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, f64) {
    let book = Codebook {
        entries: centroids.clone(),
    };
    let pairs = par::map_indexed(points.nrows(), |i| book.nearest(points.row(i)));
    let err = pairs.iter().map(|p| p.1).sum();
    (pairs.into_iter().map(|p| p.0).collect(), err)
}

fn seed_plus_plus<R: Rng + ?Sized>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> Result<Array2<f64>> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            Err(_) => {
                return Err(FlavaError::InsufficientData(format!(
                    "only {} distinct patch vectors for {k} codebook entries",
                    chosen.len()
                )))
            }
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    Ok(points.select(Axis(0), &chosen))
}

/// Fits a `k`-entry codebook to `features` (`[n, code_dim]`, `n ≥ k`).
pub fn fit_codebook<R: Rng + ?Sized>(
    features: ArrayView2<f64>,
    k: usize,
    rng: &mut R,
) -> Result<(Codebook, FitReport)> {
    let n = features.nrows();
    if k < 2 {
        return Err(FlavaError::InvalidInput(format!("codebook size must be at least 2, got {k}")));
    }
    if n < k {
        return Err(FlavaError::InsufficientData(format!("{n} patch vectors for {k} codebook entries")));
    }
    let mut centroids = seed_plus_plus(features, k, rng)?;
    let (mut labels, err) = assign(features, &centroids);
    let mut report = FitReport {
        errors: vec![err],
        iterations: 0,
        converged: false,
    };
    while report.iterations < MAX_ITERATIONS {
        let d = features.ncols();
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &features.row(i));
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        report.iterations += 1;
        let (next, err) = assign(features, &centroids);
        report.errors.push(err);
        if next == labels {
            report.converged = true;
            break;
        }
        labels = next;
    }
    Ok((Codebook::new(centroids)?, report))
}
