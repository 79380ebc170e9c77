use std::collections::BTreeSet;

use colln_core::attention::{head_average, AttentionMatrix, TokenSequence};
use colln_core::flops::schedule_macs;
use colln_core::metrics::{cls_scores, colln_scores, ImportanceScores, Metric};
use colln_core::model::ModelSpec;
use colln_core::pruning::{
    correcting_split, keep_count, prune_cls, prune_colln, prune_correcting, prune_random,
    topk_indices, KeepRule, PruneConfig,
};
use colln_core::tensor::{softmax_rows, Matrix};
use colln_core::viz::heatmap_levels;
use colln_core::weights::ModelBundle;
use proptest::prelude::*;

fn stochastic(size: usize) -> impl Strategy<Value = AttentionMatrix<f64>> {
    prop::collection::vec(0.001f64..1.0, size * size).prop_map(move |v| {
        let rows: Vec<Vec<f64>> = v
            .chunks(size)
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|x| x / s).collect()
            })
            .collect();
        AttentionMatrix::from_rows(&rows).unwrap()
    })
}

fn sized_stochastic() -> impl Strategy<Value = AttentionMatrix<f64>> {
    (3usize..20).prop_flat_map(stochastic)
}

fn tokens(size: usize) -> TokenSequence<f64> {
    let data = (0..size * 3).map(|i| i as f64 * 0.5).collect();
    TokenSequence::with_identity_ids(Matrix::new(size, 3, data).unwrap()).unwrap()
}

fn rule() -> impl Strategy<Value = KeepRule> {
    prop_oneof![
        (0.01f64..=1.0).prop_map(KeepRule::KeepRate),
        (0usize..300).prop_map(KeepRule::KeepCount),
        (0usize..300).prop_map(KeepRule::PruneCount),
    ]
}

proptest! {
    #[test]
    fn topk_matches_sort_oracle(values in prop::collection::vec(-100i32..100, 1..60), k_frac in 0.0f64..=1.0) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let k = ((values.len() as f64) * k_frac) as usize;
        let got = topk_indices(&values, k).unwrap();
        prop_assert_eq!(got.len(), k);
        prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let mut expect = idx[..k].to_vec();
        expect.sort_unstable();
        prop_assert_eq!(got, expect);
    }

    #[test]
    fn keep_count_bounds(rule in rule(), n in 1usize..300) {
        let k = keep_count(rule, n);
        prop_assert!((1..=n).contains(&k));
        if let KeepRule::KeepRate(r) = rule {
            prop_assert!(k as f64 >= r * n as f64 - 1e-6);
        }
    }

    #[test]
    fn correcting_split_partitions(r in 0usize..1000, c in 0.0f64..=1.0) {
        let (k_cls, k_col) = correcting_split(r, c);
        prop_assert_eq!(k_cls + k_col, r);
        prop_assert!(k_cls as f64 <= r as f64 * (1.0 - c) + 1e-6);
    }

    #[test]
    fn softmax_rows_are_stochastic(v in prop::collection::vec(-1e4f32..1e4, 1..12).prop_flat_map(|row| {
        let n = row.len();
        prop::collection::vec(-1e4f32..1e4, n * n)
    })) {
        let n = (v.len() as f64).sqrt() as usize;
        let m = softmax_rows(&Matrix::new(n, n, v).unwrap());
        for r in 0..n {
            let s: f64 = m.row(r).iter().map(|&x| f64::from(x)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(m.row(r).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn head_mean_is_stochastic(heads in (2usize..10).prop_flat_map(|n| prop::collection::vec(stochastic(n), 1..5))) {
        let mats: Vec<Matrix<f64>> = heads.iter().map(|a| a.matrix().clone()).collect();
        let avg = head_average(&mats).unwrap();
        prop_assert!(avg.is_row_stochastic(1e-12));
    }

    #[test]
    fn score_ranges(a in sized_stochastic(), n in 1.0f64..6.0) {
        let s = colln_scores(&a, n).unwrap();
        prop_assert_eq!(s.len(), a.patch_count());
        prop_assert!(s.values.iter().all(|&v| v >= 0.0));
        let c = cls_scores(&a).unwrap();
        prop_assert!(c.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn selections_keep_cls_first_and_r_patches(a in sized_stochastic(), frac in 0.0f64..=1.0, c in 0.0f64..=1.0, seed in any::<u64>()) {
        let size = a.size();
        let n_patches = size - 1;
        let r = 1 + ((n_patches - 1) as f64 * frac) as usize;
        let x = tokens(size);
        let runs = [
            prune_colln(&x, &a, r, 2.0).unwrap(),
            prune_cls(&x, &a, r).unwrap(),
            prune_random(&x, r, seed).unwrap(),
            prune_correcting(&x, &a, r, 2.0, c).unwrap(),
        ];
        for (kept, d) in &runs {
            prop_assert_eq!(kept.count(), r + 1);
            prop_assert_eq!(kept.embeddings().row(0), x.embeddings().row(0));
            prop_assert!(d.kept_positions.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(d.kept_positions.iter().all(|&p| (1..size).contains(&p)));
            prop_assert_eq!(kept.patch_ids(), &d.kept_patch_ids[..]);
        }
    }

    #[test]
    fn colln_selection_is_permutation_equivariant(a in sized_stochastic(), shift in 1usize..19) {
        let size = a.size();
        let n_patches = size - 1;
        // Rotate the patch tokens (rows and columns together), [CLS] fixed.
        let perm: Vec<usize> = std::iter::once(0)
            .chain((0..n_patches).map(|i| 1 + (i + shift) % n_patches))
            .collect();
        let rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&i| perm.iter().map(|&j| a.get(i, j)).collect())
            .collect();
        let b = AttentionMatrix::from_rows(&rows).unwrap();
        let sa = colln_scores(&a, 3.0).unwrap().values;
        let sb = colln_scores(&b, 3.0).unwrap().values;
        for (new, &old) in perm.iter().enumerate().skip(1) {
            prop_assert!((sb[new - 1] - sa[old - 1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn nested_selection_across_layers(a in sized_stochastic(), b_seed in any::<u64>()) {
        let x = tokens(a.size());
        let r1 = (a.patch_count() / 2).max(1);
        let (kept, d1) = prune_colln(&x, &a, r1, 2.0).unwrap();
        let (kept2, d2) = prune_random(&kept, (r1 / 2).max(1), b_seed).unwrap();
        let first: BTreeSet<usize> = d1.kept_patch_ids.iter().copied().collect();
        prop_assert!(d2.kept_patch_ids.iter().all(|id| first.contains(id)));
        prop_assert_eq!(kept2.count(), (r1 / 2).max(1) + 1);
    }

    #[test]
    fn heatmap_levels_span_and_order(values in prop::collection::vec(-50.0f32..50.0, 2..36)) {
        let n = values.len();
        let grid = (n as f64).sqrt().ceil() as usize;
        let ids: Vec<usize> = (0..n).collect();
        let scores = ImportanceScores { metric: Metric::ColLn, norm_order: Some(2.0), values: values.clone() };
        let levels = heatmap_levels(&scores, &ids, grid).unwrap();
        let distinct = values.iter().any(|&v| v != values[0]);
        if distinct {
            prop_assert_eq!(levels[..n].iter().max().copied(), Some(255));
            prop_assert_eq!(levels[..n].iter().min().copied(), Some(0));
        }
        for i in 0..n {
            for j in 0..n {
                if values[i] < values[j] {
                    prop_assert!(levels[i] <= levels[j]);
                }
            }
        }
        prop_assert!(levels[n..].iter().all(|&l| l == 0));
    }

    #[test]
    fn macs_never_increase_with_pruning(rule in rule(), layers in prop::collection::btree_set(0usize..12, 0..6)) {
        let spec = ModelSpec::vit_s16();
        let cfg = PruneConfig { keep_rule: rule, schedule: layers.into_iter().collect(), ..PruneConfig::default() };
        let pruned = schedule_macs(&spec, &cfg);
        prop_assert!(pruned.total <= schedule_macs(&spec, &PruneConfig::unpruned()).total);
        prop_assert!(pruned.layers.windows(2).all(|w| w[1].tokens_attn <= w[0].tokens_attn));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn weights_round_trip(seed in any::<u64>(), depth in 1usize..4, heads in 1usize..4, classes in 1usize..20) {
        let spec = ModelSpec { depth, heads, dim: 4 * heads, num_classes: classes, ..ModelSpec::tiny() };
        let b = ModelBundle::random(spec, seed).unwrap();
        let bytes = b.to_bytes();
        let back = ModelBundle::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &b);
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(b.tensor_count(), 8 + 12 * depth);
    }
}
