//! Analytic multiply-accumulate counts.
//!
//! Reported "GFLOPs" in the ViT pruning literature are giga-MACs: one
//! multiply-accumulate counts once. Element-wise work (LayerNorm, softmax,
//! GELU, residual adds) is ignored.

use serde::Serialize;

use crate::model::ModelSpec;
use crate::pruning::{keep_count, PruneConfig};

/// MACs of one encoder block at a fixed token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockMacs {
    /// QKV and output projections plus `QKᵀ` and `A·V`.
    pub attn: u64,
    pub mlp: u64,
}

pub fn block_macs(tokens: usize, dim: usize, mlp_ratio: usize) -> BlockMacs {
    let (t, d, m) = (tokens as u64, dim as u64, mlp_ratio as u64);
    BlockMacs {
        attn: 4 * t * d * d + 2 * t * t * d,
        mlp: 2 * m * t * d * d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerMacs {
    pub layer: usize,
    /// Tokens (with `[CLS]`) seen by attention.
    pub tokens_attn: usize,
    /// Tokens seen by the MLP, after any pruning in this layer.
    pub tokens_mlp: usize,
    pub attn: u64,
    pub mlp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub patch_embed: u64,
    pub layers: Vec<LayerMacs>,
    pub head: u64,
    pub total: u64,
}

impl FlopsReport {
    pub fn gmacs(&self) -> f64 {
        self.total as f64 / 1e9
    }

    pub fn attn_total(&self) -> u64 {
        self.layers.iter().map(|l| l.attn).sum()
    }

    pub fn mlp_total(&self) -> u64 {
        self.layers.iter().map(|l| l.mlp).sum()
    }
}

/// MACs of a forward pass under the pruning schedule in `cfg`.
///
/// The token timeline only depends on the keep rule and schedule, not on
/// which metric picks the tokens.
pub fn schedule_macs(spec: &ModelSpec, cfg: &PruneConfig) -> FlopsReport {
    let d = spec.dim;
    let patch_embed = (spec.num_patches() * d * spec.patch_dim()) as u64;
    let head = (d * spec.num_classes) as u64;
    let mut patches = spec.num_patches();
    let mut layers = Vec::with_capacity(spec.depth);
    for layer in 0..spec.depth {
        let tokens_attn = patches + 1;
        if cfg.fires_at(layer) {
            patches = keep_count(cfg.keep_rule, patches);
        }
        let tokens_mlp = patches + 1;
        layers.push(LayerMacs {
            layer,
            tokens_attn,
            tokens_mlp,
            attn: block_macs(tokens_attn, d, spec.mlp_ratio).attn,
            mlp: block_macs(tokens_mlp, d, spec.mlp_ratio).mlp,
        });
    }
    let total = patch_embed + head + layers.iter().map(|l| l.attn + l.mlp).sum::<u64>();
    FlopsReport {
        patch_embed,
        layers,
        head,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::KeepRule;

    fn rate(schedule: &[usize], r: f64) -> PruneConfig {
        PruneConfig {
            keep_rule: KeepRule::KeepRate(r),
            schedule: schedule.to_vec(),
            ..PruneConfig::default()
        }
    }

    fn within(value: f64, target: f64, tol: f64) -> bool {
        (value - target).abs() <= tol * target
    }

    #[test]
    fn single_token_closed_form() {
        let d = 384;
        let b = block_macs(1, d, 4);
        assert_eq!(b.attn, (4 * d * d + 2 * d) as u64);
        assert_eq!(b.mlp, (8 * d * d) as u64);
    }

    #[test]
    fn unpruned_totals() {
        let empty = PruneConfig::unpruned();
        assert!(within(
            schedule_macs(&ModelSpec::vit_s16(), &empty).gmacs(),
            4.6,
            0.03
        ));
        assert!(within(
            schedule_macs(&ModelSpec::vit_b16(), &empty).gmacs(),
            17.6,
            0.03
        ));
        assert!(within(
            schedule_macs(&ModelSpec::vit_l16(), &empty).gmacs(),
            61.6,
            0.03
        ));
    }

    #[test]
    fn empty_schedule_is_depth_times_block() {
        for spec in [ModelSpec::vit_s16(), ModelSpec::tiny()] {
            let b = block_macs(spec.num_patches() + 1, spec.dim, spec.mlp_ratio);
            let expect = spec.depth as u64 * (b.attn + b.mlp)
                + (spec.num_patches() * spec.dim * spec.patch_dim() + spec.dim * spec.num_classes)
                    as u64;
            assert_eq!(schedule_macs(&spec, &PruneConfig::unpruned()).total, expect);
        }
    }

    #[test]
    fn tiny_closed_form() {
        // N = 9, D = 16, p = 4, C = 10: per block 4·10·256 + 2·100·16 + 8·10·256.
        let r = schedule_macs(&ModelSpec::tiny(), &PruneConfig::unpruned());
        assert_eq!(r.total, 2 * (10_240 + 3_200 + 20_480) + 9 * 16 * 48 + 160);
    }

    #[test]
    fn keep_rate_schedules() {
        let s = ModelSpec::vit_s16();
        assert!(within(
            schedule_macs(&s, &rate(&[0, 3, 6], 0.7)).gmacs(),
            2.3,
            0.05
        ));
        assert!(within(
            schedule_macs(&s, &rate(&[3, 6, 9], 0.7)).gmacs(),
            3.0,
            0.05
        ));
        let b = ModelSpec::vit_b16();
        assert!(within(
            schedule_macs(&b, &rate(&[0, 3, 6], 0.7)).gmacs(),
            8.8,
            0.05
        ));
    }

    #[test]
    fn prune_count_schedules_follow_tables() {
        let early: Vec<usize> = (0..6).collect();
        let cfg = |p| PruneConfig {
            keep_rule: KeepRule::PruneCount(p),
            schedule: early.clone(),
            ..PruneConfig::default()
        };
        let s = ModelSpec::vit_s16();
        for (p, g) in [
            (4, 4.2),
            (8, 3.7),
            (12, 3.3),
            (16, 2.9),
            (20, 2.4),
            (24, 2.0),
        ] {
            assert!(within(schedule_macs(&s, &cfg(p)).gmacs(), g, 0.03), "p={p}");
        }
    }

    #[test]
    fn costs_shrink_with_tokens() {
        let r = schedule_macs(&ModelSpec::vit_b16(), &rate(&[0, 3, 6], 0.7));
        for w in r.layers.windows(2) {
            assert!(w[1].attn <= w[0].attn && w[1].mlp <= w[0].mlp);
        }
        assert_eq!(
            r.total,
            r.patch_embed + r.head + r.attn_total() + r.mlp_total()
        );
        assert_eq!(r.layers[0].tokens_mlp, 139);
    }
}
