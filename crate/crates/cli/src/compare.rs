//! `compare`: metrics × schedules × keep rates over an image directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use colln_core::flops::schedule_macs;
use colln_core::image::RgbImage;
use colln_core::model::{forward, TraceLevel};
use colln_core::pruning::{KeepRule, Method, PruneConfig};
use rayon::prelude::*;

use crate::args::CompareArgs;
use crate::error::{CliError, Result};
use crate::manifest::{read_input, CompareRequest, InputDigest, RunConfig, RunManifest};
use crate::{model_source, parse_schedule, LoadedModel, Outputs};

pub const THREADS_ENV: &str = "COLLN_THREADS";

pub const REPORT_HEADER: &str = "schedule,keep_rate,metric,norm,images,top1_agreement,accuracy,mean_overlap_colln,kept_tokens,macs,gmacs";

/// Returns the request and the directory the report goes to.
pub fn compare_request(
    args: &CompareArgs,
    model: &LoadedModel,
) -> Result<(CompareRequest, PathBuf)> {
    let depth = model.bundle.spec().depth;
    let schedules = args
        .schedules
        .split(';')
        .map(|s| parse_schedule(s, depth))
        .collect::<Result<Vec<_>>>()?;
    let report = args
        .out
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::Config(format!("bad --out path {}", args.out.display())))?
        .to_string();
    let dir = match args.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let req = CompareRequest {
        model: model_source(&args.model),
        image_dir: args.image_dir.clone(),
        metrics: args.metrics.clone(),
        norms: args.norms.clone(),
        schedules,
        keep_rates: args.keep_rates.clone(),
        base: PruneConfig {
            rescue_ratio: args.rescue_ratio,
            seed: args.seed,
            aggregation: args.aggregation.into(),
            ..PruneConfig::default()
        },
        labels: args.labels.clone(),
        report,
    };
    Ok((req, dir))
}

/// Threads for image-level parallelism; unset or 0 leaves the choice to rayon.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{THREADS_ENV}={v} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn uses_norm(m: Method) -> bool {
    matches!(m, Method::ColLn | Method::Correcting)
}

struct Variant {
    schedule: usize,
    rate: usize,
    metric: Method,
    norm: Option<f64>,
    config: PruneConfig,
    reported: bool,
}

fn variants(req: &CompareRequest) -> Vec<Variant> {
    let mut out = Vec::new();
    for (si, schedule) in req.schedules.iter().enumerate() {
        for (ri, &rate) in req.keep_rates.iter().enumerate() {
            let mut push = |metric: Method, norm: Option<f64>, reported: bool| {
                out.push(Variant {
                    schedule: si,
                    rate: ri,
                    metric,
                    norm,
                    config: PruneConfig {
                        method: metric,
                        norm_order: norm.unwrap_or(req.norms[0]),
                        keep_rule: KeepRule::KeepRate(rate),
                        schedule: schedule.clone(),
                        ..req.base.clone()
                    },
                    reported,
                })
            };
            for &m in &req.metrics {
                if uses_norm(m) {
                    for &n in &req.norms {
                        push(m, Some(n), true);
                    }
                } else {
                    push(m, None, true);
                }
            }
            // The overlap column needs Col-Ln runs even when not reported.
            if !req.metrics.contains(&Method::ColLn) {
                for &n in &req.norms {
                    push(Method::ColLn, Some(n), false);
                }
            }
        }
    }
    out
}

fn reference(vs: &[Variant], v: &Variant, first_norm: f64) -> usize {
    let norm = v.norm.unwrap_or(first_norm);
    vs.iter()
        .position(|r| {
            r.metric == Method::ColLn
                && r.schedule == v.schedule
                && r.rate == v.rate
                && r.norm == Some(norm)
        })
        .expect("a Col-Ln run exists for every schedule, rate and norm")
}

struct ImageResult {
    baseline: usize,
    runs: Vec<(usize, Vec<usize>)>,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let path = e.map_err(|e| CliError::io(dir, e))?.path();
        let is_ppm = path
            .extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| x.eq_ignore_ascii_case("ppm"));
        if is_ppm && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!(
            "no .ppm images in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

/// `file,label` lines keyed by file name.
pub fn parse_labels(text: &str) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = line
            .rsplit_once(',')
            .and_then(|(f, l)| Some((f.trim().to_string(), l.trim().parse::<usize>().ok()?)));
        let Some((file, label)) = parsed else {
            return Err(CliError::Format(format!("labels line {}: `{line}`", i + 1)));
        };
        out.insert(file, label);
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn overlap(ids: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return 1.0;
    }
    let r: HashSet<usize> = reference.iter().copied().collect();
    ids.iter().filter(|i| r.contains(i)).count() as f64 / reference.len() as f64
}

pub fn run_compare(
    req: &CompareRequest,
    model: &LoadedModel,
    out_dir: &Path,
) -> Result<RunManifest> {
    if req.metrics.is_empty() || req.norms.is_empty() || req.keep_rates.is_empty() {
        return Err(CliError::Config(
            "--metrics, --norms and --keep-rates need at least one value".into(),
        ));
    }
    let spec = model.bundle.spec();
    let vs = variants(req);
    for v in &vs {
        v.config.validate(spec.depth)?;
    }
    let paths = list_images(&req.image_dir)?;
    let mut inputs: Vec<InputDigest> = model.digest.iter().cloned().collect();
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        let (bytes, d) = read_input(p, "image")?;
        images.push(RgbImage::from_ppm(&bytes)?);
        inputs.push(d);
    }
    let names: Vec<String> = paths
        .iter()
        .map(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string()
        })
        .collect();
    let labels = match &req.labels {
        Some(path) => {
            let (bytes, d) = read_input(path, "labels")?;
            inputs.push(d);
            let text = String::from_utf8(bytes)
                .map_err(|_| CliError::Format(format!("{} is not UTF-8", path.display())))?;
            let map = parse_labels(&text)?;
            let labels = names
                .iter()
                .map(|n| {
                    map.get(n)
                        .copied()
                        .ok_or_else(|| CliError::Config(format!("no label for {n}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        }
        None => None,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let unpruned = PruneConfig {
        schedule: Vec::new(),
        ..req.base.clone()
    };
    // Results come back in image order whatever the scheduling.
    let results: Vec<ImageResult> = pool.install(|| {
        images
            .par_iter()
            .map(|img| {
                let base = forward(img, &model.bundle, &unpruned, TraceLevel::None)?;
                let runs = vs
                    .iter()
                    .map(|v| {
                        let t = forward(img, &model.bundle, &v.config, TraceLevel::None)?;
                        Ok((t.argmax(), t.final_patch_ids))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ImageResult {
                    baseline: base.argmax(),
                    runs,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let count = results.len();
    let accuracy = |pick: &dyn Fn(&ImageResult) -> usize| match &labels {
        Some(ls) => format!(
            "{:.4}",
            mean(
                results
                    .iter()
                    .zip(ls)
                    .map(|(r, &l)| f64::from(u8::from(pick(r) == l)))
            )
        ),
        None => String::new(),
    };
    let base_macs = schedule_macs(spec, &unpruned);
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    writeln!(
        csv,
        "none,1,unpruned,,{count},1.0000,{},,{},{},{:.4}",
        accuracy(&|r| r.baseline),
        spec.num_patches() + 1,
        base_macs.total,
        base_macs.gmacs()
    )
    .expect("writing to a String");
    for (i, v) in vs.iter().enumerate() {
        if !v.reported {
            continue;
        }
        let ref_idx = reference(&vs, v, req.norms[0]);
        let agreement = mean(
            results
                .iter()
                .map(|r| f64::from(u8::from(r.runs[i].0 == r.baseline))),
        );
        let overlap = mean(
            results
                .iter()
                .map(|r| overlap(&r.runs[i].1, &r.runs[ref_idx].1)),
        );
        let kept = mean(results.iter().map(|r| (r.runs[i].1.len() + 1) as f64));
        let macs = schedule_macs(spec, &v.config);
        let schedule: Vec<String> = v.config.schedule.iter().map(|l| l.to_string()).collect();
        writeln!(
            csv,
            "{},{},{},{},{count},{agreement:.4},{},{overlap:.4},{kept},{},{:.4}",
            schedule.join(" "),
            req.keep_rates[v.rate],
            v.metric.name(),
            v.norm.map(|n| n.to_string()).unwrap_or_default(),
            accuracy(&|r| r.runs[i].0),
            macs.total,
            macs.gmacs()
        )
        .expect("writing to a String");
    }

    let mut out = Outputs::create(out_dir)?;
    out.write(req.report.clone(), csv)?;
    let stem = Path::new(&req.report)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    out.finish(
        RunConfig::Compare(req.clone()),
        inputs,
        &format!("{stem}.manifest.json"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_parse() {
        let m = parse_labels("# file,label\na.ppm, 3\n\nb,c.ppm,7\n").unwrap();
        assert_eq!(m["a.ppm"], 3);
        assert_eq!(m["b,c.ppm"], 7);
        assert!(parse_labels("a.ppm").is_err());
    }

    #[test]
    fn overlap_fraction() {
        assert_eq!(overlap(&[1, 2, 3], &[2, 3, 4, 5]), 0.5);
        assert_eq!(overlap(&[], &[]), 1.0);
    }
}
