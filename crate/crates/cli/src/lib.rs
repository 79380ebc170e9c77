//! Library behind the `colln` binary. Every subcommand is a plain function
//! so tests can drive it without spawning a process.

pub mod args;
pub mod compare;
pub mod error;
pub mod flops;
pub mod manifest;
pub mod prune;
pub mod verify;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use colln_core::model::{tiny_bundle, tiny_sample_image, ModelSpec, TINY_SEED};
use colln_core::pruning::{topk_indices, PruneConfig};
use colln_core::weights::ModelBundle;

use crate::args::{Cli, Command, ModelArgs, PruneFlags};
pub use crate::error::{CliError, Result};
use crate::manifest::{
    check_inputs, read_input, InputDigest, ModelSource, RunConfig, RunManifest, ENGINE_VERSION,
    MANIFEST_FILE,
};

/// Layers pruned by the `early` schedule.
pub const EARLY_LAYERS: usize = 6;

/// Parses `0,3,6`, `early`, `all` or an empty string against a model depth.
pub fn parse_schedule(s: &str, depth: usize) -> Result<Vec<usize>> {
    match s.trim() {
        "" | "none" => Ok(Vec::new()),
        "early" => Ok((0..EARLY_LAYERS.min(depth)).collect()),
        "all" => Ok((0..depth).collect()),
        list => list
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Config(format!("bad schedule layer `{t}` in `{s}`")))
            })
            .collect(),
    }
}

pub fn model_source(m: &ModelArgs) -> ModelSource {
    match (&m.weights, &m.preset) {
        (Some(w), _) => ModelSource::Weights(w.clone()),
        (None, Some(p)) => ModelSource::Preset(p.clone()),
        (None, None) => unreachable!("clap requires one model source"),
    }
}

pub struct LoadedModel {
    pub bundle: ModelBundle,
    pub digest: Option<InputDigest>,
}

pub fn load_model(source: &ModelSource) -> Result<LoadedModel> {
    match source {
        ModelSource::Weights(path) => {
            let (bytes, digest) = read_input(path, "weights")?;
            Ok(LoadedModel {
                bundle: ModelBundle::from_bytes(&bytes)?,
                digest: Some(digest),
            })
        }
        ModelSource::Preset(name) => {
            let spec = ModelSpec::preset(name)
                .ok_or_else(|| CliError::Config(format!("unknown preset `{name}`")))?;
            Ok(LoadedModel {
                bundle: ModelBundle::random(spec, TINY_SEED)?,
                digest: None,
            })
        }
    }
}

/// Resolves pruning flags against a model, filling in every default.
pub fn prune_config(flags: &PruneFlags, spec: &ModelSpec) -> Result<PruneConfig> {
    let cfg = PruneConfig {
        method: flags.metric,
        norm_order: flags.n,
        keep_rule: flags.keep.rule(),
        rescue_ratio: flags.rescue_ratio,
        schedule: parse_schedule(&flags.schedule, spec.depth)?,
        seed: flags.seed,
        aggregation: flags.aggregation.into(),
    };
    cfg.validate(spec.depth)?;
    Ok(cfg)
}

/// Collects the files a run writes, then its manifest.
pub struct Outputs {
    dir: PathBuf,
    names: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            names: Vec::new(),
        })
    }

    pub fn write(&mut self, name: impl Into<String>, bytes: impl AsRef<[u8]>) -> Result<()> {
        let name = name.into();
        let path = self.dir.join(&name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.names.push(name);
        Ok(())
    }

    pub fn finish(
        self,
        run: RunConfig,
        inputs: Vec<InputDigest>,
        manifest_name: &str,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            engine_version: ENGINE_VERSION.to_string(),
            run,
            inputs,
            outputs: self.names,
        };
        let path = self.dir.join(manifest_name);
        fs::write(&path, manifest.to_json()).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn run_tiny_preset(out_dir: &Path) -> Result<RunManifest> {
    let mut out = Outputs::create(out_dir)?;
    out.write("tiny.vitw", tiny_bundle().to_bytes())?;
    out.write("tiny.ppm", tiny_sample_image().to_ppm())?;
    out.finish(RunConfig::TinyPreset, Vec::new(), MANIFEST_FILE)
}

/// Runs a recorded configuration into `out_dir`.
pub fn execute(run: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    match run {
        RunConfig::Prune(req) => prune::run_prune(req, &load_model(&req.model)?, out_dir),
        RunConfig::Scores(req) => prune::run_scores(req, &load_model(&req.model)?, out_dir),
        RunConfig::Compare(req) => compare::run_compare(req, &load_model(&req.model)?, out_dir),
        RunConfig::TinyPreset => run_tiny_preset(out_dir),
    }
}

/// Re-runs a manifest after checking that its inputs are unchanged.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::load(manifest_path)?;
    check_inputs(&manifest.inputs)?;
    execute(&manifest.run, out_dir)
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io("<stdout>", e))
}

fn summarize(out: &mut dyn Write, dir: &Path, manifest: &RunManifest) -> Result<()> {
    let mut s = String::new();
    for name in &manifest.outputs {
        s += &format!("wrote {}\n", dir.join(name).display());
    }
    emit(out, &s)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Verify(a) => verify::run_verify(&a, topk_indices::<f64>, out),
        Command::Flops(a) => flops::run_flops(&a, out),
        Command::Prune(a) => {
            let model = load_model(&model_source(&a.model))?;
            let req = prune::prune_request(&a, &model)?;
            let m = prune::run_prune(&req, &model, &a.out_dir)?;
            emit(
                out,
                &fs::read_to_string(a.out_dir.join(prune::LOGITS_FILE)).unwrap_or_default(),
            )?;
            summarize(out, &a.out_dir, &m)
        }
        Command::Scores(a) => {
            let model = load_model(&model_source(&a.model))?;
            let req = prune::scores_request(&a, &model)?;
            let m = prune::run_scores(&req, &model, &a.out_dir)?;
            summarize(out, &a.out_dir, &m)
        }
        Command::Compare(a) => {
            let model = load_model(&model_source(&a.model))?;
            let (req, dir) = compare::compare_request(&a, &model)?;
            let m = compare::run_compare(&req, &model, &dir)?;
            emit(
                out,
                &fs::read_to_string(dir.join(&req.report)).unwrap_or_default(),
            )?;
            summarize(out, &dir, &m)
        }
        Command::Replay(a) => {
            let m = replay(&a.manifest, &a.out_dir)?;
            summarize(out, &a.out_dir, &m)
        }
        Command::TinyPreset(a) => {
            let m = run_tiny_preset(&a.out_dir)?;
            summarize(out, &a.out_dir, &m)
        }
    }
}
