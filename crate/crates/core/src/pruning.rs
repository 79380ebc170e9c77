//! Token selection: top-k, Col-Ln pruning, and Col-Ln correcting.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMatrix, HeadAggregation, TokenSequence};
use crate::error::{Error, Result};
use crate::metrics::{cls_scores, colln_scores, random_scores, ImportanceScores};
use crate::scalar::Scalar;

/// Default keep rate and rescue ratio.
pub const DEFAULT_KEEP_RATE: f64 = 0.7;
pub const DEFAULT_RESCUE_RATIO: f64 = 0.8;
pub const DEFAULT_NORM_ORDER: f64 = 2.0;

/// How many patches survive a pruning layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum KeepRule {
    /// Fraction of the current patches, rounded up.
    KeepRate(f64),
    KeepCount(usize),
    /// Remove this many patches at every scheduled layer.
    PruneCount(usize),
}

/// Selection strategy applied at scheduled layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(rename = "colln")]
    ColLn,
    Cls,
    Random,
    /// `[CLS]` top-k for part of the budget, Col-Ln for the rest.
    Correcting,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ColLn => "colln",
            Method::Cls => "cls",
            Method::Random => "random",
            Method::Correcting => "correcting",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "colln" | "col-ln" => Ok(Method::ColLn),
            "cls" => Ok(Method::Cls),
            "random" => Ok(Method::Random),
            "correcting" => Ok(Method::Correcting),
            other => Err(Error::config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub method: Method,
    pub norm_order: f64,
    pub keep_rule: KeepRule,
    pub rescue_ratio: f64,
    /// Layers where pruning fires, strictly increasing.
    pub schedule: Vec<usize>,
    /// Seed for [`Method::Random`]; layer `l` draws with `seed + l`.
    pub seed: u64,
    pub aggregation: HeadAggregation,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            method: Method::ColLn,
            norm_order: DEFAULT_NORM_ORDER,
            keep_rule: KeepRule::KeepRate(DEFAULT_KEEP_RATE),
            rescue_ratio: DEFAULT_RESCUE_RATIO,
            schedule: Vec::new(),
            seed: 0,
            aggregation: HeadAggregation::Mean,
        }
    }
}

impl PruneConfig {
    pub fn unpruned() -> Self {
        Self::default()
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if let KeepRule::KeepRate(r) = self.keep_rule {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("keep rate {r} outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.rescue_ratio) {
            return Err(Error::config(format!(
                "rescue ratio {} outside [0, 1]",
                self.rescue_ratio
            )));
        }
        if !(self.norm_order >= 1.0) || !self.norm_order.is_finite() {
            return Err(Error::config(format!(
                "norm order {} must be a finite value >= 1",
                self.norm_order
            )));
        }
        if self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "schedule {:?} must be strictly increasing",
                self.schedule
            )));
        }
        if let Some(&last) = self.schedule.last() {
            if last >= depth {
                return Err(Error::config(format!(
                    "schedule layer {last} beyond model depth {depth}"
                )));
            }
        }
        Ok(())
    }

    pub fn fires_at(&self, layer: usize) -> bool {
        self.schedule.binary_search(&layer).is_ok()
    }
}

/// Outcome of one pruning step.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneDecision<T> {
    pub layer: usize,
    /// Kept 1-based positions within the input sequence, ascending.
    pub kept_positions: Vec<usize>,
    /// Original patch ids of the kept positions, same order.
    pub kept_patch_ids: Vec<usize>,
    /// Scores that drove the selection (Col-Ln for the correcting rule).
    pub scores: ImportanceScores<T>,
}

/// Number of patches kept out of `current`.
pub fn keep_count(rule: KeepRule, current: usize) -> usize {
    let n = current.max(1);
    match rule {
        // Slack absorbs products like 0.7 * 10 = 7.000000000000001.
        KeepRule::KeepRate(r) => ((r * n as f64 - 1e-9).ceil() as usize).clamp(1, n),
        KeepRule::KeepCount(k) => k.clamp(1, n),
        KeepRule::PruneCount(p) => n.saturating_sub(p).max(1),
    }
}

/// `(k_cls, k_col)` budget split of the correcting rule.
pub fn correcting_split(r: usize, rescue_ratio: f64) -> (usize, usize) {
    let k_cls = ((r as f64) * (1.0 - rescue_ratio) + 1e-9).floor() as usize;
    let k_cls = k_cls.min(r);
    (k_cls, r - k_cls)
}

fn rank<T: Scalar>(values: &[T], a: usize, b: usize) -> Ordering {
    values[b]
        .partial_cmp(&values[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest values, ties to the lower index, returned in
/// ascending index order.
pub fn topk_indices<T: Scalar>(values: &[T], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::config(format!(
            "top-k with k={k} over {} values",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank(values, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

fn check_inputs<T: Scalar>(x: &TokenSequence<T>, a: &AttentionMatrix<T>, r: usize) -> Result<()> {
    if a.size() != x.count() {
        return Err(Error::config(format!(
            "attention size {} does not match {} tokens",
            a.size(),
            x.count()
        )));
    }
    let n = x.patch_count();
    if r == 0 || r > n {
        return Err(Error::config(format!("keep count {r} outside 1..={n}")));
    }
    Ok(())
}

fn apply<T: Scalar>(
    x: &TokenSequence<T>,
    mut positions: Vec<usize>,
    scores: ImportanceScores<T>,
) -> Result<(TokenSequence<T>, PruneDecision<T>)> {
    positions.sort_unstable();
    let out = x.gather(&positions)?;
    let decision = PruneDecision {
        layer: 0,
        kept_positions: positions,
        kept_patch_ids: out.patch_ids().to_vec(),
        scores,
    };
    Ok((out, decision))
}

/// Keeps the `r` patches with the highest scores.
pub fn prune_by_scores<T: Scalar>(
    x: &TokenSequence<T>,
    scores: ImportanceScores<T>,
    r: usize,
) -> Result<(TokenSequence<T>, PruneDecision<T>)> {
    if scores.len() != x.patch_count() {
        return Err(Error::config(format!(
            "{} scores for {} patches",
            scores.len(),
            x.patch_count()
        )));
    }
    let positions = topk_indices(&scores.values, r)?
        .into_iter()
        .map(|i| i + 1)
        .collect();
    apply(x, positions, scores)
}

/// Col-Ln pruning: `[x_cls] ++ gather(x, topk(‖A[:,j]‖ₙ, r))`.
pub fn prune_colln<T: Scalar>(
    x: &TokenSequence<T>,
    a: &AttentionMatrix<T>,
    r: usize,
    n: T,
) -> Result<(TokenSequence<T>, PruneDecision<T>)> {
    check_inputs(x, a, r)?;
    prune_by_scores(x, colln_scores(a, n)?, r)
}

pub fn prune_cls<T: Scalar>(
    x: &TokenSequence<T>,
    a: &AttentionMatrix<T>,
    r: usize,
) -> Result<(TokenSequence<T>, PruneDecision<T>)> {
    check_inputs(x, a, r)?;
    prune_by_scores(x, cls_scores(a)?, r)
}

pub fn prune_random<T: Scalar>(
    x: &TokenSequence<T>,
    r: usize,
    seed: u64,
) -> Result<(TokenSequence<T>, PruneDecision<T>)> {
    if r == 0 || r > x.patch_count() {
        return Err(Error::config(format!(
            "keep count {r} outside 1..={}",
            x.patch_count()
        )));
    }
    prune_by_scores(x, random_scores(x.patch_count(), seed), r)
}

/// Col-Ln correcting: `floor(r·(1−c))` patches by `[CLS]` attention, the
/// remaining budget by Col-Ln among the patches not already chosen.
pub fn prune_correcting<T: Scalar>(
    x: &TokenSequence<T>,
    a: &AttentionMatrix<T>,
    r: usize,
    n: T,
    rescue_ratio: f64,
) -> Result<(TokenSequence<T>, PruneDecision<T>)> {
    check_inputs(x, a, r)?;
    if !(0.0..=1.0).contains(&rescue_ratio) {
        return Err(Error::config(format!(
            "rescue ratio {rescue_ratio} outside [0, 1]"
        )));
    }
    let (k_cls, k_col) = correcting_split(r, rescue_ratio);
    let cls = cls_scores(a)?;
    let col = colln_scores(a, n)?;

    let by_cls = topk_indices(&cls.values, k_cls)?;
    let mut taken = vec![false; x.patch_count()];
    for &i in &by_cls {
        taken[i] = true;
    }
    let remaining: Vec<usize> = (0..x.patch_count()).filter(|&i| !taken[i]).collect();
    let rem_scores: Vec<T> = remaining.iter().map(|&i| col.values[i]).collect();
    let by_col = topk_indices(&rem_scores, k_col)?;

    let positions = by_cls
        .into_iter()
        .chain(by_col.into_iter().map(|k| remaining[k]))
        .map(|i| i + 1)
        .collect();
    apply(x, positions, col)
}

/// Runs the configured strategy with keep count `r` at `layer`.
pub fn prune_with<T: Scalar>(
    x: &TokenSequence<T>,
    a: &AttentionMatrix<T>,
    r: usize,
    cfg: &PruneConfig,
    layer: usize,
) -> Result<(TokenSequence<T>, PruneDecision<T>)> {
    let n = T::lit(cfg.norm_order);
    let (out, mut decision) = match cfg.method {
        Method::ColLn => prune_colln(x, a, r, n)?,
        Method::Cls => prune_cls(x, a, r)?,
        Method::Random => {
            check_inputs(x, a, r)?;
            prune_random(x, r, cfg.seed.wrapping_add(layer as u64))?
        }
        Method::Correcting => prune_correcting(x, a, r, n, cfg.rescue_ratio)?,
    };
    decision.layer = layer;
    Ok((out, decision))
}
