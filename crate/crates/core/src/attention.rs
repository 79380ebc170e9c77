//! Multi-head self-attention that also hands back the attention map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{linear, softmax_in_place, Matrix};

/// Square attention map over `[CLS]` plus the live patches.
///
/// Row 0 is the `[CLS]` query; column `j ≥ 1` is the attention that patch
/// `j` receives from every token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix<T> {
    m: Matrix<T>,
}

impl<T: Scalar> AttentionMatrix<T> {
    /// Accepts any square, finite, non-negative matrix. Row-stochasticity is
    /// not enforced so that synthetic fixtures (one-hot or all-zero columns)
    /// can be scored; see [`AttentionMatrix::is_row_stochastic`].
    pub fn new(m: Matrix<T>) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::config(format!(
                "attention matrix must be square, got {:?}",
                m.shape()
            )));
        }
        if m.rows() == 0 {
            return Err(Error::config("attention matrix is empty"));
        }
        if m.data().iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::config(
                "attention entries must be finite and non-negative",
            ));
        }
        Ok(Self { m })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Token count including `[CLS]`, i.e. `N + 1`.
    pub fn size(&self) -> usize {
        self.m.rows()
    }

    pub fn patch_count(&self) -> usize {
        self.m.rows() - 1
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.m.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.m
    }

    pub fn is_row_stochastic(&self, tol: T) -> bool {
        (0..self.size()).all(|r| {
            let s: T = self.m.row(r).iter().copied().sum();
            (s - T::one()).abs() <= tol
        })
    }
}

/// `[x_cls, x_1, …, x_N]` with the original patch index of every live patch.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    embeddings: Matrix<T>,
    patch_ids: Vec<usize>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(embeddings: Matrix<T>, patch_ids: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != patch_ids.len() + 1 {
            return Err(Error::config(format!(
                "token sequence has {} rows but {} patch ids (+1 for [CLS])",
                embeddings.rows(),
                patch_ids.len()
            )));
        }
        let mut seen = patch_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("duplicate patch ids in token sequence"));
        }
        Ok(Self {
            embeddings,
            patch_ids,
        })
    }

    /// Fresh sequence whose patches carry ids `0..N`.
    pub fn with_identity_ids(embeddings: Matrix<T>) -> Result<Self> {
        let n = embeddings
            .rows()
            .checked_sub(1)
            .ok_or_else(|| Error::config("token sequence needs at least the [CLS] row"))?;
        Self::new(embeddings, (0..n).collect())
    }

    /// Tokens including `[CLS]`.
    pub fn count(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn patch_count(&self) -> usize {
        self.patch_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn patch_ids(&self) -> &[usize] {
        &self.patch_ids
    }

    pub fn into_parts(self) -> (Matrix<T>, Vec<usize>) {
        (self.embeddings, self.patch_ids)
    }

    /// Same provenance, new embeddings.
    pub fn with_embeddings(&self, embeddings: Matrix<T>) -> Result<Self> {
        Self::new(embeddings, self.patch_ids.clone())
    }

    /// Keeps `[CLS]` plus the patches at the given 1-based positions, in the
    /// order given.
    pub fn gather(&self, positions: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(positions.len() + 1);
        rows.push(0);
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            if p == 0 || p > self.patch_count() {
                return Err(Error::config(format!(
                    "patch position {p} outside 1..={}",
                    self.patch_count()
                )));
            }
            rows.push(p);
            ids.push(self.patch_ids[p - 1]);
        }
        Self::new(self.embeddings.gather_rows(&rows)?, ids)
    }
}

/// How per-head attention maps are combined before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    #[default]
    Mean,
    /// Elementwise max over heads. Not row-stochastic; ablation only.
    Max,
}

/// Uniform elementwise mean of per-head maps.
pub fn head_average<T: Scalar>(per_head: &[Matrix<T>]) -> Result<AttentionMatrix<T>> {
    aggregate_heads(per_head, HeadAggregation::Mean)
}

pub fn aggregate_heads<T: Scalar>(
    per_head: &[Matrix<T>],
    how: HeadAggregation,
) -> Result<AttentionMatrix<T>> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::config("no attention heads to aggregate"))?;
    if per_head.iter().any(|h| h.shape() != first.shape()) {
        return Err(Error::config("attention heads differ in shape"));
    }
    let (r, c) = first.shape();
    let mut data = first.data().to_vec();
    for h in &per_head[1..] {
        for (acc, &v) in data.iter_mut().zip(h.data()) {
            match how {
                HeadAggregation::Mean => *acc += v,
                HeadAggregation::Max => *acc = acc.max(v),
            }
        }
    }
    if how == HeadAggregation::Mean {
        let k = T::lit(per_head.len() as f64);
        for v in &mut data {
            *v /= k;
        }
    }
    AttentionMatrix::new(Matrix::new(r, c, data)?)
}

/// Borrowed parameters of one attention sub-layer.
///
/// `qkv_w` is `3D × D` with the query, key and value projections stacked in
/// that order; `proj_w` is `D × D`. Both use the `out × in` layout.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a, T> {
    pub qkv_w: &'a Matrix<T>,
    pub qkv_b: &'a [T],
    pub proj_w: &'a Matrix<T>,
    pub proj_b: &'a [T],
}

/// Per-head attention maps and the projected output, before aggregation.
pub struct HeadOutputs<T> {
    pub heads: Vec<Matrix<T>>,
    pub output: Matrix<T>,
}

pub fn attention_heads<T: Scalar>(
    x: &Matrix<T>,
    w: &AttentionWeights<'_, T>,
    heads: usize,
) -> Result<HeadOutputs<T>> {
    let d = x.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "embedding dim {d} not divisible by {heads} heads"
        )));
    }
    if w.qkv_w.shape() != (3 * d, d) || w.proj_w.shape() != (d, d) {
        return Err(Error::config(format!(
            "attention weights {:?}/{:?} do not fit dim {d}",
            w.qkv_w.shape(),
            w.proj_w.shape()
        )));
    }
    let t = x.rows();
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let qkv = linear(x, w.qkv_w, Some(w.qkv_b))?;

    let mut concat = Matrix::zeros(t, d);
    let mut maps = Vec::with_capacity(heads);
    let mut logits = vec![T::zero(); t];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let mut a = Matrix::zeros(t, t);
        for i in 0..t {
            let q = &qkv.row(i)[qo..qo + dh];
            for (j, l) in logits.iter_mut().enumerate() {
                let k = &qkv.row(j)[ko..ko + dh];
                let mut s = T::zero();
                for (&qa, &kb) in q.iter().zip(k) {
                    s += qa * kb;
                }
                *l = s * scale;
            }
            softmax_in_place(&mut logits);
            a.row_mut(i).copy_from_slice(&logits);
        }
        for i in 0..t {
            for j in 0..t {
                let p = a.get(i, j);
                let v = &qkv.row(j)[vo..vo + dh];
                let out = &mut concat.row_mut(i)[h * dh..(h + 1) * dh];
                for (o, &vv) in out.iter_mut().zip(v) {
                    *o += p * vv;
                }
            }
        }
        maps.push(a);
    }
    let output = linear(&concat, w.proj_w, Some(w.proj_b))?;
    Ok(HeadOutputs {
        heads: maps,
        output,
    })
}

/// Multi-head self-attention over `x`.
///
/// Returns the projected attention output (the caller adds the residual) and
/// the per-head softmax maps combined by `how`, taken before the output
/// projection. Scaling is `1/√(D/heads)`.
pub fn mhsa_forward<T: Scalar>(
    x: &TokenSequence<T>,
    w: &AttentionWeights<'_, T>,
    heads: usize,
    how: HeadAggregation,
) -> Result<(TokenSequence<T>, AttentionMatrix<T>)> {
    let out = attention_heads(x.embeddings(), w, heads)?;
    let attn = aggregate_heads(&out.heads, how)?;
    Ok((x.with_embeddings(out.output)?, attn))
}
