use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use colln_core::tensor::Matrix;
use colln_core::verify::{run_suite_with, Outcome, TopK, VerifyOptions};

use crate::args::VerifyArgs;
use crate::emit;
use crate::error::{CliError, Result};

/// Smallest patch count drawn by the suite.
pub const MIN_PATCHES: usize = 4;
pub const DEGENERATE_CASES: usize = 100;

fn witness_csv(m: &Matrix<f64>) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}", row.join(",")).expect("writing to a String");
    }
    s
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Runs the property suite with the given top-k selector. Failing
/// properties dump their witness matrix into the witness directory.
pub fn run_verify(args: &VerifyArgs, topk: TopK, out: &mut dyn Write) -> Result<()> {
    if args.max_n < MIN_PATCHES {
        return Err(CliError::Config(format!(
            "--max-n must be at least {MIN_PATCHES}"
        )));
    }
    if args.trials == 0 {
        return Err(CliError::Config("--trials must be positive".into()));
    }
    if let Some(n) = args.norms.iter().find(|n| !n.is_finite() || **n < 1.0) {
        return Err(CliError::Config(format!("norm order {n} must be >= 1")));
    }
    let opts = VerifyOptions {
        trials: args.trials,
        min_n: MIN_PATCHES,
        max_n: args.max_n,
        norms: args.norms.clone(),
        degenerate_cases: DEGENERATE_CASES,
        seed: args.seed,
    };
    let results = run_suite_with(&opts, topk);
    let mut failed = Vec::new();
    for r in &results {
        let mut line = match &r.outcome {
            Outcome::Pass => format!("PASS {} ({} checks)", r.name, r.checks),
            Outcome::Skipped(why) => format!("SKIP {}: {why}", r.name),
            Outcome::Fail { detail, witness } => {
                failed.push(r.name);
                let mut line = format!("FAIL {}: {detail}", r.name);
                if let Some(w) = witness {
                    let path: PathBuf = args
                        .witness_dir
                        .join(format!("witness_{}.csv", slug(r.name)));
                    fs::create_dir_all(&args.witness_dir)
                        .map_err(|e| CliError::io(&args.witness_dir, e))?;
                    fs::write(&path, witness_csv(w)).map_err(|e| CliError::io(&path, e))?;
                    line += &format!(" (witness: {})", path.display());
                }
                line
            }
        };
        if let Some(note) = &r.note {
            line += &format!(" [{note}]");
        }
        line.push('\n');
        emit(out, &line)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Property(failed.join(", ")))
    }
}
