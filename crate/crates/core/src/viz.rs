//! Patch-grid heatmaps, kept-token masks (binary PGM) and CSV score dumps.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::ImportanceScores;
use crate::model::ForwardTrace;
use crate::pruning::PruneDecision;
use crate::scalar::Scalar;

/// Grey level of a constant score map.
pub const FLAT_LEVEL: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeatmapSpec {
    /// Patches per side.
    pub grid: usize,
    /// Pixels per patch side (nearest-neighbour).
    pub upscale: usize,
}

impl HeatmapSpec {
    pub fn new(grid: usize, upscale: usize) -> Self {
        Self {
            grid,
            upscale: upscale.max(1),
        }
    }
}

/// Encodes a `grid × grid` level map as a binary `P5` image.
pub fn encode_pgm(levels: &[u8], spec: HeatmapSpec) -> Vec<u8> {
    let side = spec.grid * spec.upscale;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.reserve(side * side);
    for y in 0..side {
        let row = &levels[(y / spec.upscale) * spec.grid..][..spec.grid];
        for x in 0..side {
            out.push(row[x / spec.upscale]);
        }
    }
    out
}

/// Min-max quantizes the live patch scores onto the grid; patches that are
/// not listed stay black. Brighter means more important (entropy scores are
/// flipped).
pub fn heatmap_levels<T: Scalar>(
    scores: &ImportanceScores<T>,
    patch_ids: &[usize],
    grid: usize,
) -> Result<Vec<u8>> {
    if scores.len() != patch_ids.len() {
        return Err(Error::config(format!(
            "{} scores for {} patch ids",
            scores.len(),
            patch_ids.len()
        )));
    }
    let cells = grid * grid;
    if patch_ids.len() > cells {
        return Err(Error::config(format!(
            "{} patches do not fit a {grid}x{grid} grid",
            patch_ids.len()
        )));
    }
    let vals: Vec<f64> = scores.values.iter().map(|v| v.as_f64()).collect();
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let flip = !scores.metric.higher_is_more_important();
    let mut levels = vec![0u8; cells];
    for (&id, &v) in patch_ids.iter().zip(&vals) {
        if id >= cells {
            return Err(Error::config(format!(
                "patch id {id} outside {grid}x{grid} grid"
            )));
        }
        levels[id] = if hi > lo {
            let t = (v - lo) / (hi - lo);
            let t = if flip { 1.0 - t } else { t };
            (t * 255.0).round() as u8
        } else {
            FLAT_LEVEL
        };
    }
    Ok(levels)
}

pub fn render_heatmap<T: Scalar>(
    scores: &ImportanceScores<T>,
    patch_ids: &[usize],
    spec: HeatmapSpec,
) -> Result<Vec<u8>> {
    Ok(encode_pgm(
        &heatmap_levels(scores, patch_ids, spec.grid)?,
        spec,
    ))
}

/// One white-on-black mask per decision. Each kept set must lie inside the
/// previous one.
pub fn render_kept_mask<T: Scalar>(
    decisions: &[&PruneDecision<T>],
    spec: HeatmapSpec,
) -> Result<Vec<Vec<u8>>> {
    let cells = spec.grid * spec.grid;
    let mut previous: Option<HashSet<usize>> = None;
    let mut out = Vec::with_capacity(decisions.len());
    for d in decisions {
        let kept: HashSet<usize> = d.kept_patch_ids.iter().copied().collect();
        if kept.len() != d.kept_patch_ids.len() {
            return Err(Error::Internal(format!(
                "layer {}: duplicate kept patch ids",
                d.layer
            )));
        }
        if let Some(&bad) = kept.iter().find(|&&id| id >= cells) {
            return Err(Error::Internal(format!(
                "layer {}: patch id {bad} outside the grid",
                d.layer
            )));
        }
        if let Some(prev) = &previous {
            if !kept.is_subset(prev) {
                return Err(Error::Internal(format!(
                    "layer {}: kept set revives a pruned patch",
                    d.layer
                )));
            }
        }
        let mut levels = vec![0u8; cells];
        for &id in &kept {
            levels[id] = 255;
        }
        out.push(encode_pgm(&levels, spec));
        previous = Some(kept);
    }
    Ok(out)
}

/// `layer,patch_id,score,kept` rows for every pruning layer of the trace.
pub fn trace_csv(trace: &ForwardTrace) -> Result<String> {
    let mut out = String::from("layer,patch_id,score,kept\n");
    for l in &trace.layers {
        let Some(d) = &l.decision else { continue };
        let ids = l.patch_ids_in.as_ref().ok_or_else(|| {
            Error::Internal(format!("layer {}: decision without patch ids", l.layer))
        })?;
        let kept: HashSet<usize> = d.kept_patch_ids.iter().copied().collect();
        for (&id, v) in ids.iter().zip(&d.scores.values) {
            writeln!(
                out,
                "{},{},{},{}",
                l.layer,
                id,
                v,
                u8::from(kept.contains(&id))
            )
            .expect("writing to a String");
        }
    }
    Ok(out)
}
