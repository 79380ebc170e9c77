//! ViT encoder forward pass with scheduled token pruning.

use serde::{Deserialize, Serialize};

use crate::attention::{mhsa_forward, AttentionMatrix, AttentionWeights, TokenSequence};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::metrics::ImportanceScores;
use crate::pruning::{keep_count, prune_with, PruneConfig, PruneDecision};
use crate::tensor::{gelu, layer_norm, layer_norm_rows, linear, Matrix};
use crate::weights::ModelBundle;

fn default_mlp_ratio() -> usize {
    4
}

fn default_ln_eps() -> f32 {
    1e-6
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Per-channel normalization applied to `[0, 1]` pixels.
    pub mean: [f32; 3],
    pub std: [f32; 3],
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
}

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

impl ModelSpec {
    fn vit16(dim: usize, depth: usize, heads: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            dim,
            depth,
            heads,
            mlp_ratio: 4,
            num_classes: 1000,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            ln_eps: 1e-6,
        }
    }

    pub fn vit_s16() -> Self {
        Self::vit16(384, 12, 6)
    }

    pub fn vit_b16() -> Self {
        Self::vit16(768, 12, 12)
    }

    pub fn vit_l16() -> Self {
        Self::vit16(1024, 24, 16)
    }

    /// 12×12 input, 4×4 patches (N = 9), D = 16, two blocks of two heads.
    pub fn tiny() -> Self {
        Self {
            image_size: 12,
            patch_size: 4,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            num_classes: 10,
            mean: [0.5; 3],
            std: [0.5; 3],
            ln_eps: 1e-6,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vit-s16" => Some(Self::vit_s16()),
            "vit-b16" => Some(Self::vit_b16()),
            "vit-l16" => Some(Self::vit_l16()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(Error::config(
                "depth, mlp_ratio and num_classes must be positive",
            ));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) || !(self.ln_eps > 0.0) {
            return Err(Error::config("std and ln_eps must be positive"));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened length of one patch, `3·p²`.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }
}

/// Splits a normalized image into flattened patches, one row per patch in
/// row-major grid order. Each row is laid out channel-major, then patch row,
/// then patch column, matching a `[D, 3, p, p]` convolution kernel.
pub fn patchify(image: &RgbImage, spec: &ModelSpec) -> Result<Matrix<f32>> {
    if image.width() != spec.image_size || image.height() != spec.image_size {
        return Err(Error::Image(format!(
            "image is {}x{}, model expects {s}x{s}",
            image.width(),
            image.height(),
            s = spec.image_size
        )));
    }
    let (g, p) = (spec.grid(), spec.patch_size);
    let mut data = Vec::with_capacity(spec.num_patches() * spec.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for ky in 0..p {
                    for kx in 0..p {
                        let v = image.channel(gx * p + kx, gy * p + ky, c);
                        data.push((v - spec.mean[c]) / spec.std[c]);
                    }
                }
            }
        }
    }
    Matrix::new(spec.num_patches(), spec.patch_dim(), data)
}

/// How much per-layer state a forward pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceLevel {
    /// Token counts only.
    #[default]
    None,
    /// Plus pruning decisions and the live patch ids entering each layer.
    Decisions,
    /// Plus the attention map of every layer.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    /// Tokens (with `[CLS]`) entering the block.
    pub tokens_in: usize,
    /// Tokens leaving the block.
    pub tokens_out: usize,
    /// Original ids of the patches entering the block (`Decisions` and up).
    pub patch_ids_in: Option<Vec<usize>>,
    pub decision: Option<PruneDecision<f32>>,
    pub attention: Option<AttentionMatrix<f32>>,
}

impl LayerTrace {
    pub fn scores(&self) -> Option<&ImportanceScores<f32>> {
        self.decision.as_ref().map(|d| &d.scores)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub logits: Vec<f32>,
    /// Original ids of the patches alive after the last block.
    pub final_patch_ids: Vec<usize>,
}

impl ForwardTrace {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.logits.iter().enumerate() {
            if v > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Up to `k` `(class, logit)` pairs, highest first, ties to the lower class.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f32)> {
        let mut idx: Vec<usize> = (0..self.logits.len()).collect();
        idx.sort_by(|&a, &b| {
            self.logits[b]
                .partial_cmp(&self.logits[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.into_iter()
            .take(k)
            .map(|i| (i, self.logits[i]))
            .collect()
    }

    pub fn decisions(&self) -> impl Iterator<Item = &PruneDecision<f32>> {
        self.layers.iter().filter_map(|l| l.decision.as_ref())
    }
}

/// Patch embedding, `[CLS]` prepend, positional embedding.
pub fn embed(image: &RgbImage, bundle: &ModelBundle) -> Result<TokenSequence<f32>> {
    let spec = bundle.spec();
    let patches = patchify(image, spec)?;
    let emb = linear(
        &patches,
        bundle.get("patch_embed.w")?,
        Some(bundle.vector("patch_embed.b")?),
    )?;
    let d = spec.dim;
    let mut data = Vec::with_capacity((spec.num_patches() + 1) * d);
    data.extend_from_slice(bundle.get("cls_token")?.data());
    data.extend_from_slice(emb.data());
    let mut x = Matrix::new(spec.num_patches() + 1, d, data)?;
    x.add_assign(bundle.get("pos_embed")?)?;
    TokenSequence::with_identity_ids(x)
}

fn mlp(x: &Matrix<f32>, bundle: &ModelBundle, layer: usize) -> Result<Matrix<f32>> {
    let p = |s: &str| format!("blocks.{layer}.{s}");
    let h = linear(
        x,
        bundle.get(&p("mlp.fc1.w"))?,
        Some(bundle.vector(&p("mlp.fc1.b"))?),
    )?;
    let h = h.map(gelu);
    linear(
        &h,
        bundle.get(&p("mlp.fc2.w"))?,
        Some(bundle.vector(&p("mlp.fc2.b"))?),
    )
}

/// Full forward pass.
///
/// Blocks are pre-norm. At a scheduled layer the block's attention map
/// scores the live patches and the sequence is reduced after the attention
/// residual, before the MLP.
pub fn forward(
    image: &RgbImage,
    bundle: &ModelBundle,
    cfg: &PruneConfig,
    level: TraceLevel,
) -> Result<ForwardTrace> {
    let spec = bundle.spec();
    cfg.validate(spec.depth)?;
    let eps = spec.ln_eps;
    let mut x = embed(image, bundle)?;
    let mut layers = Vec::with_capacity(spec.depth);

    for l in 0..spec.depth {
        let p = |s: &str| format!("blocks.{l}.{s}");
        let tokens_in = x.count();
        let patch_ids_in = (level >= TraceLevel::Decisions).then(|| x.patch_ids().to_vec());

        let h = layer_norm_rows(
            x.embeddings(),
            bundle.vector(&p("ln1.g"))?,
            bundle.vector(&p("ln1.b"))?,
            eps,
        )?;
        let weights = AttentionWeights {
            qkv_w: bundle.get(&p("attn.qkv.w"))?,
            qkv_b: bundle.vector(&p("attn.qkv.b"))?,
            proj_w: bundle.get(&p("attn.proj.w"))?,
            proj_b: bundle.vector(&p("attn.proj.b"))?,
        };
        let (attn_out, attn) = mhsa_forward(
            &x.with_embeddings(h)?,
            &weights,
            spec.heads,
            cfg.aggregation,
        )?;
        let (mut emb, ids) = x.into_parts();
        emb.add_assign(attn_out.embeddings())?;
        x = TokenSequence::new(emb, ids)?;

        let mut decision = None;
        if cfg.fires_at(l) {
            let r = keep_count(cfg.keep_rule, x.patch_count());
            let (kept, d) = prune_with(&x, &attn, r, cfg, l)?;
            x = kept;
            if level >= TraceLevel::Decisions {
                decision = Some(d);
            }
        }

        let h = layer_norm_rows(
            x.embeddings(),
            bundle.vector(&p("ln2.g"))?,
            bundle.vector(&p("ln2.b"))?,
            eps,
        )?;
        let m = mlp(&h, bundle, l)?;
        let (mut emb, ids) = x.into_parts();
        emb.add_assign(&m)?;
        x = TokenSequence::new(emb, ids)?;

        layers.push(LayerTrace {
            layer: l,
            tokens_in,
            tokens_out: x.count(),
            patch_ids_in,
            decision,
            attention: (level == TraceLevel::Full).then_some(attn),
        });
    }

    let cls = layer_norm(
        x.embeddings().row(0),
        bundle.vector("ln_final.g")?,
        bundle.vector("ln_final.b")?,
        eps,
    )?;
    let logits = linear(
        &Matrix::row_vector(cls),
        bundle.get("head.w")?,
        Some(bundle.vector("head.b")?),
    )?
    .into_data();
    Ok(ForwardTrace {
        layers,
        logits,
        final_patch_ids: x.patch_ids().to_vec(),
    })
}

/// Seed of the in-tree tiny preset.
pub const TINY_SEED: u64 = 20_240_601;

/// Tiny model with fixed random weights.
pub fn tiny_bundle() -> ModelBundle {
    ModelBundle::random(ModelSpec::tiny(), TINY_SEED).expect("tiny preset is valid")
}

/// Deterministic 12×12 sample image for the tiny preset: a bright square on
/// a dim gradient.
pub fn tiny_sample_image() -> RgbImage {
    RgbImage::from_fn(12, 12, |x, y| {
        if (4..8).contains(&x) && (3..9).contains(&y) {
            [230, 200, 40]
        } else {
            [(x * 10) as u8, (y * 8) as u8, 60]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{KeepRule, Method};

    #[test]
    fn presets_are_consistent() {
        for name in ["vit-s16", "vit-b16", "vit-l16", "tiny"] {
            ModelSpec::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(ModelSpec::vit_b16().num_patches(), 196);
        assert_eq!(ModelSpec::tiny().num_patches(), 9);
        let mut bad = ModelSpec::tiny();
        bad.heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patchify_shapes() {
        let spec = ModelSpec::vit_b16();
        let img = RgbImage::from_fn(224, 224, |x, y| [(x % 256) as u8, (y % 256) as u8, 0]);
        let p = patchify(&img, &spec).unwrap();
        assert_eq!(p.shape(), (196, 768));

        let small = RgbImage::from_fn(10, 10, |_, _| [0, 0, 0]);
        assert!(matches!(patchify(&small, &spec), Err(Error::Image(_))));
    }

    #[test]
    fn patchify_constant_and_checkerboard() {
        let spec = ModelSpec::tiny();
        let flat = RgbImage::from_fn(12, 12, |_, _| [10, 20, 30]);
        let p = patchify(&flat, &spec).unwrap();
        for r in 1..9 {
            assert_eq!(p.row(r), p.row(0));
        }

        let check = RgbImage::from_fn(12, 12, |x, y| {
            if (x / 4 + y / 4) % 2 == 0 {
                [255, 255, 255]
            } else {
                [0, 0, 0]
            }
        });
        let p = patchify(&check, &spec).unwrap();
        assert_ne!(p.row(0), p.row(1));
        for gy in 0..3 {
            for gx in 0..3 {
                let expect = if (gx + gy) % 2 == 0 {
                    p.row(0)
                } else {
                    p.row(1)
                };
                assert_eq!(p.row(gy * 3 + gx), expect);
            }
        }
        // White normalizes to (1 - 0.5) / 0.5 = 1.
        assert!(p.row(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tiny_trace_counts() {
        let bundle = tiny_bundle();
        let cfg = PruneConfig {
            method: Method::ColLn,
            keep_rule: KeepRule::KeepCount(4),
            schedule: vec![0],
            ..PruneConfig::default()
        };
        let t = forward(&tiny_sample_image(), &bundle, &cfg, TraceLevel::Decisions).unwrap();
        let counts: Vec<(usize, usize)> = t
            .layers
            .iter()
            .map(|l| (l.tokens_in, l.tokens_out))
            .collect();
        assert_eq!(counts, vec![(10, 5), (5, 5)]);
        assert_eq!(t.logits.len(), 10);
        assert!(t.layers[1].decision.is_none());
        assert_eq!(
            t.layers[0].decision.as_ref().unwrap().kept_positions.len(),
            4
        );
        assert_eq!(
            t.final_patch_ids,
            t.layers[0].decision.as_ref().unwrap().kept_patch_ids
        );
    }

    #[test]
    fn noop_pruning_is_bitwise_identical() {
        let bundle = tiny_bundle();
        let img = tiny_sample_image();
        let base = forward(&img, &bundle, &PruneConfig::unpruned(), TraceLevel::None).unwrap();
        for method in [
            Method::ColLn,
            Method::Cls,
            Method::Random,
            Method::Correcting,
        ] {
            let cfg = PruneConfig {
                method,
                keep_rule: KeepRule::KeepRate(1.0),
                schedule: vec![0],
                ..PruneConfig::default()
            };
            let t = forward(&img, &bundle, &cfg, TraceLevel::None).unwrap();
            let a: Vec<u32> = base.logits.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.logits.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{method:?}");
        }
    }

    #[test]
    fn forward_is_deterministic_and_traces_attention() {
        let bundle = tiny_bundle();
        let cfg = PruneConfig {
            keep_rule: KeepRule::KeepRate(0.5),
            schedule: vec![0, 1],
            ..PruneConfig::default()
        };
        let a = forward(&tiny_sample_image(), &bundle, &cfg, TraceLevel::Full).unwrap();
        let b = forward(&tiny_sample_image(), &bundle, &cfg, TraceLevel::Full).unwrap();
        assert_eq!(a, b);
        // 9 → 5 → 3 patches.
        assert_eq!(a.layers[0].attention.as_ref().unwrap().size(), 10);
        assert_eq!(a.layers[1].attention.as_ref().unwrap().size(), 6);
        assert_eq!(a.layers[1].tokens_out, 4);
        for l in &a.layers {
            assert!(l.attention.as_ref().unwrap().is_row_stochastic(1e-5));
        }
    }

    #[test]
    fn schedule_beyond_depth_is_rejected() {
        let cfg = PruneConfig {
            schedule: vec![5],
            ..PruneConfig::default()
        };
        assert!(matches!(
            forward(&tiny_sample_image(), &tiny_bundle(), &cfg, TraceLevel::None),
            Err(Error::Config(_))
        ));
    }
}
