use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use colln_cli::args::VerifyArgs;
use colln_cli::verify::run_verify;
use colln_cli::CliError;
use colln_core::model::{tiny_bundle, tiny_sample_image};
use colln_core::pruning::topk_indices;
use colln_core::Result as CoreResult;

fn colln(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colln"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn verify_args(dir: &Path) -> VerifyArgs {
    VerifyArgs {
        trials: 30,
        max_n: 24,
        norms: vec![2.0, 3.0, 4.0],
        seed: 1,
        witness_dir: dir.to_path_buf(),
    }
}

fn write_inputs(dir: &Path) -> (String, String) {
    let w = dir.join("tiny.vitw");
    let i = dir.join("tiny.ppm");
    fs::write(&w, tiny_bundle().to_bytes()).unwrap();
    fs::write(&i, tiny_sample_image().to_ppm()).unwrap();
    (w.display().to_string(), i.display().to_string())
}

#[test]
fn verify_defaults_pass() {
    let o = colln(&["verify"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}

#[test]
fn verify_norm_one_is_skipped_with_reason() {
    let o = colln(&["verify", "--norms", "1", "--trials", "20"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let line = out
        .lines()
        .find(|l| l.contains("entropy-norm equivalence"))
        .unwrap();
    assert!(line.starts_with("SKIP") && line.contains("n > 1"), "{line}");
}

fn reversed_topk(values: &[f64], k: usize) -> CoreResult<Vec<usize>> {
    let flipped: Vec<f64> = values.iter().map(|v| -v).collect();
    topk_indices(&flipped, k)
}

#[test]
fn flipped_topk_fails_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let mut out = Vec::new();
    let err = run_verify(&verify_args(dir.path()), reversed_topk, &mut out).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let text = String::from_utf8(out).unwrap();
    assert!(text.lines().any(|l| l.starts_with("FAIL entropy-norm")));
    let witness =
        fs::read_to_string(dir.path().join("witness_entropy_norm_equivalence.csv")).unwrap();
    let rows: Vec<Vec<f64>> = witness
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3, "shrunk to two patches");
    for r in &rows {
        assert_eq!(r.len(), 3);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn library_topk_passes_same_harness() {
    let dir = tempfile::tempdir().unwrap();
    let mut out = Vec::new();
    run_verify(&verify_args(dir.path()), topk_indices::<f64>, &mut out).unwrap();
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn verify_rejects_bad_flags() {
    assert_eq!(code(&colln(&["verify", "--max-n", "3"])), 2);
    assert_eq!(code(&colln(&["verify", "--norms", "0.5"])), 2);
    assert_eq!(code(&colln(&["verify", "--unknown"])), 2);
}

#[test]
fn flops_tiny_closed_form() {
    let o = colln(&["flops", "--model", "tiny"]);
    assert_eq!(code(&o), 0);
    // Two blocks of 10 tokens at D=16, plus patch embedding and head.
    let total = 2 * (4 * 10 * 256 + 2 * 100 * 16 + 8 * 10 * 256) + 9 * 16 * 48 + 16 * 10;
    assert!(stdout(&o).contains(&format!("total_macs={total}\n")));
}

#[test]
fn flops_key_values() {
    let o = colln(&[
        "flops",
        "--model",
        "vit-b16",
        "--schedule",
        "0,3,6",
        "--keep-rate",
        "0.7",
    ]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let g: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("gmacs="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((g - 8.8).abs() / 8.8 <= 0.05);
    assert!(out.contains("schedule=0,3,6\n"));
    assert!(out.contains("keep_rule=keep-rate:0.7\n"));
}

#[test]
fn flops_rejects_conflicting_rules_and_bad_models() {
    assert_eq!(
        code(&colln(&[
            "flops",
            "--keep-rate",
            "0.7",
            "--prune-count",
            "4"
        ])),
        2
    );
    assert_eq!(code(&colln(&["flops", "--model", "vit-h14"])), 2);
    assert_eq!(code(&colln(&["flops", "--schedule", "12"])), 2);
}

#[test]
fn prune_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (w, i) = write_inputs(dir.path());
    let out = dir.path().join("o").display().to_string();

    let mut bad = tiny_bundle().to_bytes();
    let n = bad.len();
    bad[n - 10] ^= 0xff;
    let bad_w = dir.path().join("bad.vitw");
    fs::write(&bad_w, bad).unwrap();
    let o = colln(&[
        "prune",
        "--weights",
        bad_w.to_str().unwrap(),
        "--image",
        &i,
        "--out-dir",
        &out,
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("weight format"));

    let bad_i = dir.path().join("bad.ppm");
    fs::write(&bad_i, b"P6\n8 8\n255\n").unwrap();
    let o = colln(&[
        "prune",
        "--weights",
        &w,
        "--image",
        bad_i.to_str().unwrap(),
        "--out-dir",
        &out,
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("image"));

    let o = colln(&[
        "prune",
        "--weights",
        &w,
        "--image",
        &i,
        "--keep-rate",
        "1.5",
        "--out-dir",
        &out,
    ]);
    assert_eq!(code(&o), 2);
    let o = colln(&[
        "prune",
        "--weights",
        &w,
        "--image",
        &i,
        "--metric",
        "entropy",
        "--out-dir",
        &out,
    ]);
    assert_eq!(code(&o), 2);
    let o = colln(&[
        "prune",
        "--weights",
        &w,
        "--preset",
        "tiny",
        "--image",
        &i,
        "--out-dir",
        &out,
    ]);
    assert_eq!(code(&o), 2);
    let o = colln(&[
        "prune",
        "--weights",
        &w,
        "--image",
        &i,
        "--trace",
        "none",
        "--heatmaps",
        "--out-dir",
        &out,
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn prune_no_op_schedule_matches_empty_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let (w, i) = write_inputs(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = colln(&[
        "prune",
        "--weights",
        &w,
        "--image",
        &i,
        "--schedule",
        "0",
        "--keep-count",
        "9",
        "--out-dir",
        a.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let o = colln(&[
        "prune",
        "--weights",
        &w,
        "--image",
        &i,
        "--schedule",
        "",
        "--out-dir",
        b.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(a.join("logits.txt")).unwrap(),
        fs::read(b.join("logits.txt")).unwrap()
    );
}

#[test]
fn prune_writes_top5_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (w, i) = write_inputs(dir.path());
    let out = dir.path().join("o");
    let o = colln(&[
        "prune",
        "--weights",
        &w,
        "--image",
        &i,
        "--schedule",
        "0,1",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let logits = fs::read_to_string(out.join("logits.txt")).unwrap();
    assert_eq!(logits.lines().count(), 6);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "prune");
    let cfg = &manifest["config"]["config"];
    assert_eq!(cfg["keep_rule"]["value"], 0.7);
    assert_eq!(cfg["rescue_ratio"], 0.8);
    assert_eq!(cfg["norm_order"], 2.0);
    assert_eq!(cfg["schedule"], serde_json::json!([0, 1]));
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    assert!(inputs
        .iter()
        .all(|d| d["sha256"].as_str().unwrap().len() == 64));
    let outputs: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(outputs.contains(&"mask_layer00.pgm") && outputs.contains(&"mask_layer01.pgm"));
    assert!(!manifest.to_string().contains("time"));
}

#[test]
fn replay_refuses_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (w, i) = write_inputs(dir.path());
    let out = dir.path().join("o");
    assert_eq!(
        code(&colln(&[
            "prune",
            "--weights",
            &w,
            "--image",
            &i,
            "--out-dir",
            out.to_str().unwrap()
        ])),
        0
    );
    let mut img = fs::read(&i).unwrap();
    let n = img.len();
    img[n - 1] ^= 1;
    fs::write(&i, img).unwrap();
    let o = colln(&[
        "replay",
        "--manifest",
        out.join("manifest.json").to_str().unwrap(),
        "--out-dir",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn scores_sweep_writes_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let (_, i) = write_inputs(dir.path());
    let out = dir.path().join("s");
    let o = colln(&[
        "scores",
        "--preset",
        "tiny",
        "--image",
        &i,
        "--norms",
        "1,2,4",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    for l in 0..2 {
        for name in ["cls", "colln_n1", "colln_n2", "colln_n4"] {
            let pgm = fs::read(out.join(format!("scores_layer{l:02}_{name}.pgm"))).unwrap();
            assert!(pgm.starts_with(b"P5\n12 12\n255\n"));
        }
    }
    let csv = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "layer,patch_id,cls,colln_n1,colln_n2,colln_n4"
    );
    assert_eq!(csv.lines().count(), 1 + 2 * 9);
}

fn compare_run(dir: &Path, threads: &str, out: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colln"))
        .env("COLLN_THREADS", threads)
        .args([
            "compare",
            "--weights",
            dir.join("tiny.vitw").to_str().unwrap(),
            "--image-dir",
            dir.join("imgs").to_str().unwrap(),
            "--schedules",
            "0;0,1",
            "--keep-rates",
            "0.5,0.7",
            "--metrics",
            "cls,random",
            "--labels",
            dir.join("labels.csv").to_str().unwrap(),
            "--out",
            dir.join(out).join("report.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap()
}

#[test]
fn compare_is_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let imgs = dir.path().join("imgs");
    fs::create_dir(&imgs).unwrap();
    let mut labels = String::new();
    for k in 0..5u8 {
        let img = colln_core::image::RgbImage::from_fn(12, 12, |x, y| {
            [k * 40, (x * 20) as u8, (y * 20 + usize::from(k)) as u8]
        });
        fs::write(imgs.join(format!("img{k}.ppm")), img.to_ppm()).unwrap();
        labels += &format!("img{k}.ppm,{}\n", k % 3);
    }
    fs::write(imgs.join("notes.txt"), "ignored").unwrap();
    fs::write(dir.path().join("labels.csv"), labels).unwrap();

    let one = compare_run(dir.path(), "1", "one");
    assert_eq!(code(&one), 0, "{}", String::from_utf8_lossy(&one.stderr));
    let four = compare_run(dir.path(), "4", "four");
    assert_eq!(code(&four), 0);
    let a = fs::read_to_string(dir.path().join("one/report.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("four/report.csv")).unwrap();
    assert_eq!(a, b);

    let header = a.lines().next().unwrap();
    assert_eq!(header, colln_cli::compare::REPORT_HEADER);
    // Baseline plus 2 schedules x 2 rates x 2 metrics.
    assert_eq!(a.lines().count(), 2 + 8);
    for line in a.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[4], "5");
        assert!(!cells[6].is_empty(), "accuracy column filled");
    }
    assert!(dir.path().join("one/report.manifest.json").exists());

    assert_eq!(code(&compare_run(dir.path(), "lots", "bad")), 2);
}

#[test]
fn help_documents_flags() {
    let o = colln(&["prune", "--help"]);
    let text = stdout(&o);
    for flag in [
        "--weights",
        "--preset",
        "--image",
        "--metric",
        "--n ",
        "--schedule",
        "--keep-rate",
        "--prune-count",
        "--keep-count",
        "--rescue-ratio",
        "--seed",
        "--aggregation",
        "--trace",
        "--heatmaps",
        "--upscale",
        "--out-dir",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    assert!(matches!(CliError::Config(String::new()).exit_code(), 2));
}

#[test]
fn tiny_preset_round_trips_through_loader() {
    let dir = tempfile::tempdir().unwrap();
    let o = colln(&["tiny-preset", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let b = colln_core::weights::load_bundle(dir.path().join("tiny.vitw")).unwrap();
    assert_eq!(b, tiny_bundle());
    let img = colln_core::image::load_ppm(dir.path().join("tiny.ppm")).unwrap();
    assert_eq!(img, tiny_sample_image());
}
