//! Per-patch importance scores read off an attention matrix.
//!
//! Col-Ln scores patch `j` by the ℓn-norm of attention column `j`, with the
//! `[CLS]` row included in the sum. For `n > 1` the Rényi entropy of the
//! same column is `n/(1−n)·ln ‖A[:,j]‖ₙ`, a strictly decreasing function of
//! the norm, so the top-K by norm and the bottom-K by entropy coincide.
//! [`renyi_column_entropy`] evaluates the entropy directly and exists to
//! check that claim; pruning never calls it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[serde(rename = "colln")]
    ColLn,
    Cls,
    Random,
    /// Column entropy; lower means more important.
    #[serde(rename = "renyi")]
    RenyiEntropyOracle,
}

impl Metric {
    pub fn higher_is_more_important(self) -> bool {
        !matches!(self, Metric::RenyiEntropyOracle)
    }
}

/// Scores for the live patches at positions `1..=N`, stored 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores<T> {
    pub metric: Metric,
    /// Norm or entropy order; `None` for `Cls` and `Random`.
    pub norm_order: Option<f64>,
    pub values: Vec<T>,
}

impl<T: Scalar> ImportanceScores<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Score of the patch at 1-based position `pos`.
    pub fn at_position(&self, pos: usize) -> T {
        self.values[pos - 1]
    }
}

/// `Σᵢ |A[i,j]|ⁿ` for every patch column `j = 1..=N`.
fn column_power_sums<T: Scalar>(a: &AttentionMatrix<T>, n: T) -> Vec<T> {
    let size = a.size();
    let mut sums = vec![T::zero(); size - 1];
    for i in 0..size {
        let row = &a.matrix().row(i)[1..];
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v.abs().powf(n);
        }
    }
    sums
}

/// Rényi entropy of order `n` of patch column `j` (natural log).
///
/// An all-zero column has no defined entropy and yields `+∞`; that cannot
/// happen for softmax output.
pub fn renyi_column_entropy<T: Scalar>(a: &AttentionMatrix<T>, j: usize, n: T) -> Result<T> {
    if j == 0 || j > a.patch_count() {
        return Err(Error::config(format!(
            "patch index {j} outside 1..={}",
            a.patch_count()
        )));
    }
    if !(n > T::one()) {
        return Err(Error::config("Rényi order must be > 1"));
    }
    let mut s = T::zero();
    for i in 0..a.size() {
        s += a.get(i, j).powf(n);
    }
    if s == T::zero() {
        return Ok(T::infinity());
    }
    Ok(s.ln() / (T::one() - n))
}

/// Entropies of every patch column, for verification.
pub fn renyi_entropies<T: Scalar>(a: &AttentionMatrix<T>, n: T) -> Result<ImportanceScores<T>> {
    let values = (1..=a.patch_count())
        .map(|j| renyi_column_entropy(a, j, n))
        .collect::<Result<_>>()?;
    Ok(ImportanceScores {
        metric: Metric::RenyiEntropyOracle,
        norm_order: Some(n.as_f64()),
        values,
    })
}

/// Column-wise ℓn-norms of the patch columns.
pub fn colln_scores<T: Scalar>(a: &AttentionMatrix<T>, n: T) -> Result<ImportanceScores<T>> {
    if !(n >= T::one()) {
        return Err(Error::config(format!("norm order must be >= 1, got {n}")));
    }
    let inv = T::one() / n;
    let values = column_power_sums(a, n)
        .into_iter()
        .map(|s| s.powf(inv))
        .collect();
    Ok(ImportanceScores {
        metric: Metric::ColLn,
        norm_order: Some(n.as_f64()),
        values,
    })
}

/// `[CLS]` attention to each patch: row 0, columns `1..=N`.
pub fn cls_scores<T: Scalar>(a: &AttentionMatrix<T>) -> Result<ImportanceScores<T>> {
    if a.size() < 2 {
        return Err(Error::config("[CLS] scores need at least one patch"));
    }
    Ok(ImportanceScores {
        metric: Metric::Cls,
        norm_order: None,
        values: a.matrix().row(0)[1..].to_vec(),
    })
}

/// Seeded uniform scores on `[0, 1)`.
///
/// Each value is a 24-bit fraction, exactly representable in `f32`, so the
/// sequence is the same for every scalar type.
pub fn random_scores<T: Scalar>(patch_count: usize, seed: u64) -> ImportanceScores<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (1u32 << 24) as f64;
    let values = (0..patch_count)
        .map(|_| T::lit((rng.gen::<u32>() >> 8) as f64 * scale))
        .collect();
    ImportanceScores {
        metric: Metric::Random,
        norm_order: None,
        values,
    }
}
