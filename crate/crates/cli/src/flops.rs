use std::fmt::Write as _;
use std::io::Write;

use colln_core::flops::{schedule_macs, FlopsReport};
use colln_core::model::ModelSpec;
use colln_core::pruning::{KeepRule, PruneConfig};

use crate::args::FlopsArgs;
use crate::error::{CliError, Result};
use crate::{emit, parse_schedule};

pub fn keep_rule_label(rule: KeepRule) -> String {
    match rule {
        KeepRule::KeepRate(r) => format!("keep-rate:{r}"),
        KeepRule::KeepCount(k) => format!("keep-count:{k}"),
        KeepRule::PruneCount(p) => format!("prune-count:{p}"),
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Aligned table followed by `key=value` lines.
pub fn render_report(model: &str, cfg: &PruneConfig, r: &FlopsReport) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "model {model}  schedule [{}]  {}",
        join(&cfg.schedule),
        keep_rule_label(cfg.keep_rule)
    )
    .expect("writing to a String");
    writeln!(
        s,
        "{:>5} {:>11} {:>10} {:>14} {:>14}",
        "layer", "tokens_attn", "tokens_mlp", "attn_macs", "mlp_macs"
    )
    .expect("writing to a String");
    for l in &r.layers {
        writeln!(
            s,
            "{:>5} {:>11} {:>10} {:>14} {:>14}",
            l.layer, l.tokens_attn, l.tokens_mlp, l.attn, l.mlp
        )
        .expect("writing to a String");
    }
    writeln!(s, "{:<12} {:>14}", "patch_embed", r.patch_embed).expect("writing to a String");
    writeln!(s, "{:<12} {:>14}", "head", r.head).expect("writing to a String");
    writeln!(
        s,
        "{:<12} {:>14}  ({:.3} GMACs)",
        "total",
        r.total,
        r.gmacs()
    )
    .expect("writing to a String");
    s.push('\n');
    writeln!(s, "model={model}").expect("writing to a String");
    writeln!(s, "schedule={}", join(&cfg.schedule)).expect("writing to a String");
    writeln!(s, "keep_rule={}", keep_rule_label(cfg.keep_rule)).expect("writing to a String");
    writeln!(
        s,
        "final_tokens={}",
        r.layers.last().map_or(0, |l| l.tokens_mlp)
    )
    .expect("writing to a String");
    writeln!(s, "patch_embed_macs={}", r.patch_embed).expect("writing to a String");
    writeln!(s, "attn_macs={}", r.attn_total()).expect("writing to a String");
    writeln!(s, "mlp_macs={}", r.mlp_total()).expect("writing to a String");
    writeln!(s, "head_macs={}", r.head).expect("writing to a String");
    writeln!(s, "total_macs={}", r.total).expect("writing to a String");
    writeln!(s, "gmacs={:.4}", r.gmacs()).expect("writing to a String");
    s
}

pub fn flops_report(args: &FlopsArgs) -> Result<(PruneConfig, FlopsReport)> {
    let spec = ModelSpec::preset(&args.model)
        .ok_or_else(|| CliError::Config(format!("unknown model `{}`", args.model)))?;
    let cfg = PruneConfig {
        keep_rule: args.keep.rule(),
        schedule: parse_schedule(&args.schedule, spec.depth)?,
        ..PruneConfig::default()
    };
    cfg.validate(spec.depth)?;
    let report = schedule_macs(&spec, &cfg);
    Ok((cfg, report))
}

pub fn run_flops(args: &FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, report) = flops_report(args)?;
    emit(out, &render_report(&args.model, &cfg, &report))
}
