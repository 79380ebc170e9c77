//! `prune` and `scores`: single-image inference and its artifacts.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use colln_core::image::RgbImage;
use colln_core::metrics::{cls_scores, colln_scores};
use colln_core::model::{forward, ForwardTrace, TraceLevel};
use colln_core::pruning::{keep_count, topk_indices};
use colln_core::viz::{render_heatmap, render_kept_mask, trace_csv, HeatmapSpec};

use crate::args::{PruneArgs, ScoresArgs};
use crate::error::{CliError, Result};
use crate::manifest::{
    read_input, PruneRequest, RunConfig, RunManifest, ScoresRequest, MANIFEST_FILE,
};
use crate::{model_source, prune_config, LoadedModel, Outputs};

pub const LOGITS_FILE: &str = "logits.txt";
pub const TOP_CLASSES: usize = 5;

pub fn prune_request(args: &PruneArgs, model: &LoadedModel) -> Result<PruneRequest> {
    let spec = model.bundle.spec();
    Ok(PruneRequest {
        model: model_source(&args.model),
        image: args.image.clone(),
        config: prune_config(&args.flags, spec)?,
        trace: args.trace.into(),
        heatmaps: args.heatmaps,
        upscale: args.upscale.unwrap_or(spec.patch_size),
    })
}

pub fn scores_request(args: &ScoresArgs, model: &LoadedModel) -> Result<ScoresRequest> {
    let spec = model.bundle.spec();
    Ok(ScoresRequest {
        model: model_source(&args.model),
        image: args.image.clone(),
        config: prune_config(&args.flags, spec)?,
        norms: args.norms.clone(),
        upscale: args.upscale.unwrap_or(spec.patch_size),
    })
}

fn load_image(
    path: &Path,
    model: &LoadedModel,
) -> Result<(RgbImage, Vec<crate::manifest::InputDigest>)> {
    let (bytes, digest) = read_input(path, "image")?;
    let image = RgbImage::from_ppm(&bytes)?;
    let inputs = model.digest.iter().cloned().chain([digest]).collect();
    Ok((image, inputs))
}

/// Top classes, most likely first, as `rank,class,logit` lines.
pub fn logits_text(trace: &ForwardTrace) -> String {
    let mut s = String::from("rank,class,logit\n");
    for (rank, (class, v)) in trace.top_k(TOP_CLASSES).into_iter().enumerate() {
        writeln!(s, "{},{class},{v}", rank + 1).expect("writing to a String");
    }
    s
}

fn layers_csv(trace: &ForwardTrace) -> String {
    let mut s = String::from("layer,tokens_in,tokens_out\n");
    for l in &trace.layers {
        writeln!(s, "{},{},{}", l.layer, l.tokens_in, l.tokens_out).expect("writing to a String");
    }
    s
}

fn matrix_csv(rows: usize, row: impl Fn(usize) -> Vec<f32>) -> String {
    let mut s = String::new();
    for r in 0..rows {
        let cells: Vec<String> = row(r).iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", cells.join(",")).expect("writing to a String");
    }
    s
}

fn check_upscale(upscale: usize) -> Result<()> {
    if upscale == 0 {
        return Err(CliError::Config("--upscale must be positive".into()));
    }
    Ok(())
}

/// Writes `logits.txt` and `layers.csv`; with a decision trace also
/// `trace.csv` and one kept-patch mask per pruning layer; optionally score
/// heatmaps, and with a full trace the head-averaged attention maps.
pub fn run_prune(req: &PruneRequest, model: &LoadedModel, out_dir: &Path) -> Result<RunManifest> {
    check_upscale(req.upscale)?;
    if req.heatmaps && req.trace == TraceLevel::None {
        return Err(CliError::Config(
            "--heatmaps needs --trace decisions or full".into(),
        ));
    }
    let (image, inputs) = load_image(&req.image, model)?;
    let spec = model.bundle.spec();
    let trace = forward(&image, &model.bundle, &req.config, req.trace)?;
    let hm = HeatmapSpec::new(spec.grid(), req.upscale);

    let mut out = Outputs::create(out_dir)?;
    out.write(LOGITS_FILE, logits_text(&trace))?;
    out.write("layers.csv", layers_csv(&trace))?;
    if req.trace >= TraceLevel::Decisions {
        out.write("trace.csv", trace_csv(&trace)?)?;
        let decisions: Vec<_> = trace.decisions().collect();
        for (d, pgm) in decisions.iter().zip(render_kept_mask(&decisions, hm)?) {
            out.write(format!("mask_layer{:02}.pgm", d.layer), pgm)?;
        }
    }
    if req.heatmaps {
        for l in &trace.layers {
            if let (Some(d), Some(ids)) = (&l.decision, &l.patch_ids_in) {
                let pgm = render_heatmap(&d.scores, ids, hm)?;
                out.write(format!("heatmap_layer{:02}.pgm", l.layer), pgm)?;
            }
        }
    }
    if req.trace == TraceLevel::Full {
        for l in &trace.layers {
            if let Some(a) = &l.attention {
                let m = a.matrix();
                let csv = matrix_csv(m.rows(), |r| m.row(r).to_vec());
                out.write(format!("attention_layer{:02}.csv", l.layer), csv)?;
            }
        }
    }
    out.finish(RunConfig::Prune(req.clone()), inputs, MANIFEST_FILE)
}

fn norm_label(n: f64) -> String {
    format!("n{n}")
}

/// Per-layer `[CLS]` and Col-Ln heatmaps for every order in the sweep,
/// `scores.csv` with all values, and `agreement.csv` with the overlap of the
/// two top-k sets at the configured keep rule.
pub fn run_scores(req: &ScoresRequest, model: &LoadedModel, out_dir: &Path) -> Result<RunManifest> {
    check_upscale(req.upscale)?;
    if req.norms.is_empty() {
        return Err(CliError::Config("--norms needs at least one order".into()));
    }
    let (image, inputs) = load_image(&req.image, model)?;
    let spec = model.bundle.spec();
    let trace = forward(&image, &model.bundle, &req.config, TraceLevel::Full)?;
    let hm = HeatmapSpec::new(spec.grid(), req.upscale);

    let mut out = Outputs::create(out_dir)?;
    let mut table = String::from("layer,patch_id,cls");
    for &n in &req.norms {
        write!(table, ",colln_{}", norm_label(n)).expect("writing to a String");
    }
    table.push('\n');
    let mut agreement = String::from("layer,norm,k,overlap\n");

    for l in &trace.layers {
        let (Some(a), Some(ids)) = (&l.attention, &l.patch_ids_in) else {
            return Err(CliError::Core(colln_core::Error::Internal(format!(
                "layer {} has no attention in a full trace",
                l.layer
            ))));
        };
        let cls = cls_scores(a)?;
        out.write(
            format!("scores_layer{:02}_cls.pgm", l.layer),
            render_heatmap(&cls, ids, hm)?,
        )?;
        let k = keep_count(req.config.keep_rule, ids.len());
        let cls_top: HashSet<usize> = topk_indices(&cls.values, k)?.into_iter().collect();
        let mut columns = Vec::with_capacity(req.norms.len());
        for &n in &req.norms {
            let s = colln_scores(a, n as f32)?;
            out.write(
                format!("scores_layer{:02}_colln_{}.pgm", l.layer, norm_label(n)),
                render_heatmap(&s, ids, hm)?,
            )?;
            let top = topk_indices(&s.values, k)?;
            let shared = top.iter().filter(|i| cls_top.contains(i)).count();
            writeln!(
                agreement,
                "{},{n},{k},{:.4}",
                l.layer,
                shared as f64 / k as f64
            )
            .expect("writing to a String");
            columns.push(s.values);
        }
        for (i, id) in ids.iter().enumerate() {
            write!(table, "{},{id},{}", l.layer, cls.values[i]).expect("writing to a String");
            for c in &columns {
                write!(table, ",{}", c[i]).expect("writing to a String");
            }
            table.push('\n');
        }
    }
    out.write("scores.csv", table)?;
    out.write("agreement.csv", agreement)?;
    out.finish(RunConfig::Scores(req.clone()), inputs, MANIFEST_FILE)
}
