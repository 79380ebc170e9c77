//! Randomized property suite behind `colln verify`.
//!
//! Checks run in `f64` on synthetic row-stochastic matrices. The top-k
//! routine is injectable so that a deliberately broken selector can be shown
//! to fail the suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{head_average, AttentionMatrix, TokenSequence};
use crate::error::Result;
use crate::metrics::{cls_scores, colln_scores, renyi_column_entropy};
use crate::pruning::{correcting_split, prune_cls, prune_colln, prune_correcting, topk_indices};
use crate::tensor::{softmax_rows, Matrix};

pub type TopK = fn(&[f64], usize) -> Result<Vec<usize>>;

/// Column entropies and norms must agree to this absolute tolerance.
pub const LINK_TOLERANCE: f64 = 1e-6;
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
/// Minimum relative gap between sorted entropies for a matrix to count as
/// tie-free.
const TIE_GAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub trials: usize,
    pub min_n: usize,
    pub max_n: usize,
    pub norms: Vec<f64>,
    pub degenerate_cases: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 200,
            min_n: 4,
            max_n: 64,
            norms: vec![2.0, 3.0, 4.0],
            degenerate_cases: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Pass,
    Skipped(String),
    Fail {
        detail: String,
        /// Smallest matrix that reproduces the failure, when there is one.
        witness: Option<Matrix<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub checks: usize,
    pub outcome: Outcome,
    pub note: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        !matches!(self.outcome, Outcome::Fail { .. })
    }
}

/// Random row-stochastic matrix whose patch-column entropies are pairwise
/// separated for every order in `norms`.
pub fn tie_free_matrix(size: usize, norms: &[f64], rng: &mut ChaCha8Rng) -> AttentionMatrix<f64> {
    loop {
        let mut m = Matrix::zeros(size, size);
        for r in 0..size {
            let row: Vec<f64> = (0..size).map(|_| rng.gen::<f64>().powi(3) + 1e-6).collect();
            let s: f64 = row.iter().sum();
            for (c, v) in row.into_iter().enumerate() {
                m.set(r, c, v / s);
            }
        }
        let a = AttentionMatrix::new(m).expect("valid attention");
        let separated = norms.iter().filter(|&&n| n > 1.0).all(|&n| {
            let mut h: Vec<f64> = (1..size)
                .map(|j| renyi_column_entropy(&a, j, n).expect("valid column"))
                .collect();
            h.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
            h.windows(2)
                .all(|w| w[1] - w[0] > TIE_GAP * w[1].abs().max(1.0))
        });
        if separated {
            return a;
        }
    }
}

fn bottom_k_by_entropy(entropies: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..entropies.len()).collect();
    idx.sort_by(|&a, &b| entropies[a].partial_cmp(&entropies[b]).expect("finite"));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// First `K` at which `topk` disagrees with the entropy ranking.
fn equivalence_violation(a: &AttentionMatrix<f64>, order: f64, topk: TopK) -> Option<String> {
    let n_patches = a.patch_count();
    let scores = colln_scores(a, order).ok()?.values;
    let entropies: Vec<f64> = (1..=n_patches)
        .map(|j| renyi_column_entropy(a, j, order))
        .collect::<Result<_>>()
        .ok()?;
    (1..=n_patches).find_map(|k| {
        let by_norm = topk(&scores, k).ok()?;
        let by_entropy = bottom_k_by_entropy(&entropies, k);
        (by_norm != by_entropy).then(|| {
            format!(
                "N={n_patches} n={order} K={k}: top-K by norm {by_norm:?} != bottom-K by entropy {by_entropy:?}"
            )
        })
    })
}

/// Drops one token at a time (renormalizing rows) while the violation
/// persists.
fn shrink_witness(mut a: AttentionMatrix<f64>, order: f64, topk: TopK) -> AttentionMatrix<f64> {
    'outer: while a.size() > 2 {
        for drop in 1..a.size() {
            let keep: Vec<usize> = (0..a.size()).filter(|&i| i != drop).collect();
            let rows: Vec<Vec<f64>> = keep
                .iter()
                .map(|&r| {
                    let row: Vec<f64> = keep.iter().map(|&c| a.get(r, c)).collect();
                    let s: f64 = row.iter().sum();
                    row.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let Ok(smaller) = Matrix::from_rows(&rows).and_then(AttentionMatrix::new) else {
                continue;
            };
            if equivalence_violation(&smaller, order, topk).is_some() {
                a = smaller;
                continue 'outer;
            }
        }
        break;
    }
    a
}

fn fail(detail: String, witness: Option<Matrix<f64>>) -> Outcome {
    Outcome::Fail { detail, witness }
}

fn equivalence(opts: &VerifyOptions, topk: TopK) -> PropertyResult {
    let name = "entropy-norm equivalence";
    let orders: Vec<f64> = opts.norms.iter().copied().filter(|&n| n > 1.0).collect();
    let dropped: Vec<f64> = opts.norms.iter().copied().filter(|&n| n <= 1.0).collect();
    let note = (!dropped.is_empty())
        .then(|| format!("orders {dropped:?} skipped: n/(1-n) is negative only for n > 1"));
    if orders.is_empty() {
        return PropertyResult {
            name,
            checks: 0,
            outcome: Outcome::Skipped(
                "needs an order n > 1; for n <= 1 the entropy is not a decreasing function of the norm"
                    .into(),
            ),
            note: None,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = 0;
    for trial in 0..opts.trials {
        let n_patches = rng.gen_range(opts.min_n..=opts.max_n.max(opts.min_n));
        let order = orders[trial % orders.len()];
        let a = tie_free_matrix(n_patches + 1, &orders, &mut rng);
        checks += n_patches;
        if let Some(detail) = equivalence_violation(&a, order, topk) {
            let witness = shrink_witness(a, order, topk);
            let shrunk = equivalence_violation(&witness, order, topk).unwrap_or_default();
            return PropertyResult {
                name,
                checks,
                outcome: fail(
                    format!("trial {trial}: {detail}; minimal witness: {shrunk}"),
                    Some(witness.matrix().clone()),
                ),
                note,
            };
        }
    }
    PropertyResult {
        name,
        checks,
        outcome: Outcome::Pass,
        note,
    }
}

fn monotone_link(opts: &VerifyOptions) -> PropertyResult {
    let name = "entropy = n/(1-n) ln norm";
    let orders: Vec<f64> = opts.norms.iter().copied().filter(|&n| n > 1.0).collect();
    if orders.is_empty() {
        return PropertyResult {
            name,
            checks: 0,
            outcome: Outcome::Skipped("needs an order n > 1".into()),
            note: None,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut checks = 0;
    let mut worst = 0.0f64;
    for trial in 0..opts.trials {
        let n_patches = rng.gen_range(opts.min_n..=opts.max_n.max(opts.min_n));
        let order = orders[trial % orders.len()];
        let a = tie_free_matrix(n_patches + 1, &[], &mut rng);
        let s = colln_scores(&a, order).expect("valid order");
        for j in 1..=n_patches {
            checks += 1;
            let h = renyi_column_entropy(&a, j, order).expect("valid column");
            let err = (h - order / (1.0 - order) * s.at_position(j).ln()).abs();
            worst = worst.max(err);
            if !(err <= LINK_TOLERANCE) {
                return PropertyResult {
                    name,
                    checks,
                    outcome: fail(
                        format!("trial {trial}: column {j}, n={order}: |error| = {err:e}"),
                        Some(a.matrix().clone()),
                    ),
                    note: None,
                };
            }
        }
    }
    PropertyResult {
        name,
        checks,
        outcome: Outcome::Pass,
        note: Some(format!("max |error| {worst:.2e}")),
    }
}

fn correcting_degeneracies(opts: &VerifyOptions) -> PropertyResult {
    let name = "correcting degeneracies";
    if correcting_split(100, 0.8) != (20, 80) {
        return PropertyResult {
            name,
            checks: 1,
            outcome: fail(
                format!(
                    "split(100, 0.8) = {:?}, expected (20, 80)",
                    correcting_split(100, 0.8)
                ),
                None,
            ),
            note: None,
        };
    }
    let order = opts
        .norms
        .iter()
        .copied()
        .find(|&n| n >= 1.0)
        .unwrap_or(2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc0de);
    let mut checks = 1;
    for case in 0..opts.degenerate_cases {
        let n_patches = rng.gen_range(opts.min_n..=opts.max_n.max(opts.min_n));
        let r = rng.gen_range(1..=n_patches);
        let a = tie_free_matrix(n_patches + 1, &[], &mut rng);
        let x = TokenSequence::with_identity_ids(Matrix::<f64>::zeros(n_patches + 1, 1))
            .expect("valid sequence");
        let run = || -> Result<(bool, bool)> {
            let (_, col) = prune_colln(&x, &a, r, order)?;
            let (_, c1) = prune_correcting(&x, &a, r, order, 1.0)?;
            let (_, cls) = prune_cls(&x, &a, r)?;
            let (_, c0) = prune_correcting(&x, &a, r, order, 0.0)?;
            let direct: Vec<usize> = topk_indices(&cls_scores(&a)?.values, r)?
                .into_iter()
                .map(|i| i + 1)
                .collect();
            Ok((
                col.kept_positions == c1.kept_positions,
                cls.kept_positions == c0.kept_positions && c0.kept_positions == direct,
            ))
        };
        checks += 2;
        match run() {
            Ok((true, true)) => {}
            Ok((c1_ok, _)) => {
                let which = if c1_ok {
                    "c=0 vs [CLS] top-r"
                } else {
                    "c=1 vs Col-Ln"
                };
                return PropertyResult {
                    name,
                    checks,
                    outcome: fail(
                        format!("case {case}: N={n_patches} r={r}: {which} kept sets differ"),
                        Some(a.matrix().clone()),
                    ),
                    note: None,
                };
            }
            Err(e) => {
                return PropertyResult {
                    name,
                    checks,
                    outcome: fail(format!("case {case}: {e}"), Some(a.matrix().clone())),
                    note: None,
                }
            }
        }
    }
    PropertyResult {
        name,
        checks,
        outcome: Outcome::Pass,
        note: None,
    }
}

fn row_stochastic(opts: &VerifyOptions) -> PropertyResult {
    let name = "softmax rows and head mean are row-stochastic";
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x50f7);
    let mut checks = 0;
    for trial in 0..opts.trials {
        let size = rng.gen_range(opts.min_n..=opts.max_n.max(opts.min_n)) + 1;
        let magnitude = [1.0f32, 30.0, 1e4][trial % 3];
        let heads: Vec<Matrix<f32>> = (0..3)
            .map(|_| {
                let data = (0..size * size)
                    .map(|_| rng.gen_range(-magnitude..magnitude))
                    .collect();
                softmax_rows(&Matrix::new(size, size, data).expect("sized"))
            })
            .collect();
        let avg = head_average(&heads).expect("non-empty");
        for m in heads.iter().chain(std::iter::once(avg.matrix())) {
            for r in 0..size {
                checks += 1;
                let s: f64 = m.row(r).iter().map(|&v| v as f64).sum();
                if !((s - 1.0).abs() <= ROW_SUM_TOLERANCE) || !m.all_finite() {
                    return PropertyResult {
                        name,
                        checks,
                        outcome: fail(
                            format!("trial {trial}: row {r} sums to {s}"),
                            Some(m.cast()),
                        ),
                        note: None,
                    };
                }
            }
        }
    }
    PropertyResult {
        name,
        checks,
        outcome: Outcome::Pass,
        note: None,
    }
}

/// Runs every property with the library top-k.
pub fn run_suite(opts: &VerifyOptions) -> Vec<PropertyResult> {
    run_suite_with(opts, topk_indices::<f64>)
}

pub fn run_suite_with(opts: &VerifyOptions, topk: TopK) -> Vec<PropertyResult> {
    vec![
        equivalence(opts, topk),
        monotone_link(opts),
        correcting_degeneracies(opts),
        row_stochastic(opts),
    ]
}
