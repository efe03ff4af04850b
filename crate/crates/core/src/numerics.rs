//! Dense-vector kernels shared by every other module.
//!
//! Everything here runs in `f64`. Random streams come from ChaCha8 seeded
//! through [`seeded_rng`]; the algorithm id is written into checkpoint headers
//! so a run can be replayed exactly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Generator used for every random draw in the crate.
pub type Rng = ChaCha8Rng;

/// Identifier of [`Rng`] recorded in checkpoint headers.
pub const RNG_ALGORITHM_ID: u32 = 1;
pub const RNG_ALGORITHM_NAME: &str = "chacha8";

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A unit-length embedding. Only constructible through [`l2_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec(Array1<f64>);

impl FeatureVec {
    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("owned 1-d array is contiguous")
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: ArrayView1<'_, f64>) -> Result<FeatureVec> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::param("v", "non-finite entry"));
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::Normalization);
    }
    Ok(FeatureVec(v.mapv(|x| x / n)))
}

/// Normalizes every row in place. Fails on the first zero row.
pub fn l2_normalize_rows(m: &mut Array2<f64>) -> Result<()> {
    for mut row in m.rows_mut() {
        let n = norm(row.view());
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Normalization);
        }
        row.mapv_inplace(|x| x / n);
    }
    Ok(())
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param("tau", format!("must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Entry (i, j) is the inner product of `a` row i and `b` row j.
pub fn pairwise_similarity(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.axis_iter(Axis(0)).enumerate() {
        for (j, rb) in b.axis_iter(Axis(0)).enumerate() {
            out[[i, j]] = dot(ra, rb);
        }
    }
    Ok(out)
}
