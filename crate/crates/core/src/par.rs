//! Data-parallel helpers. With the `parallel` feature the closures run on the
//! rayon pool; without it they run in order on the calling thread. Either way
//! results come back in index order, so callers stay deterministic.

use ndarray::{Array2, ArrayView2};

/// Row-chunk size for split matrix products. Fixed (not derived from the
/// thread count) so the split, and therefore every rounding, is the same on
/// every machine.
pub const MATMUL_ROW_CHUNK: usize = 64;

pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

pub fn matmul_seq(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    a.dot(b)
}

/// Matrix product split into fixed row chunks evaluated in parallel.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    use ndarray::{concatenate, s, Axis};
    use rayon::prelude::*;
    let rows = a.nrows();
    if rows <= MATMUL_ROW_CHUNK {
        return a.dot(b);
    }
    let chunks: Vec<Array2<f64>> = (0..rows.div_ceil(MATMUL_ROW_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * MATMUL_ROW_CHUNK;
            let hi = (lo + MATMUL_ROW_CHUNK).min(rows);
            a.slice(s![lo..hi, ..]).dot(b)
        })
        .collect();
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    concatenate(Axis(0), &views).expect("row chunks share column count")
}

pub fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    #[cfg(feature = "parallel")]
    {
        // Small products are cheaper on one thread; the split point does not
        // change the arithmetic.
        if a.nrows() * b.ncols() * a.ncols() >= 1 << 18 {
            return matmul_par(a, b);
        }
    }
    matmul_seq(a, b)
}
