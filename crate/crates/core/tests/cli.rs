//! End-to-end runs of the `mcal` binary: file formats, reports and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use margin_calib::calibration::MarginOffsets;
use margin_calib::synth::SynthSpec;

fn mcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcal")).args(args).env("RUST_LOG", "warn").output().expect("mcal runs")
}

fn ok(args: &[&str]) -> String {
    let out = mcal(args);
    assert!(out.status.success(), "mcal {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_spec(dir: &Path) -> std::path::PathBuf {
    let spec = SynthSpec { images: 12, height: 12, width: 12, ..Default::default() };
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    path
}

#[test]
fn synth_stats_calibrate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let data = dir.path().join("data");
    let manifest = ok(&["synth", "--synth-spec", p(&spec), "--out", p(&data)]);
    let manifest = manifest.trim();
    assert!(Path::new(manifest).exists());

    let csv = ok(&["stats", "--manifest", manifest]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("class,n_k,p_k"));
    let counts: Vec<u64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(counts.len(), 3);
    assert_eq!(counts.iter().sum::<u64>(), 12 * 12 * 12);

    let stats_json = dir.path().join("stats.json");
    ok(&["stats", "--manifest", manifest, "--out", p(&stats_json)]);
    let from_json = ok(&["calibrate", "--stats", p(&stats_json), "--tau", "2"]);
    let from_manifest = ok(&["calibrate", "--manifest", manifest, "--tau", "2"]);
    assert_eq!(from_json, from_manifest);
    let offsets = MarginOffsets::from_text(&from_json).unwrap();
    let mean = offsets.rho_0k.iter().sum::<f64>() / 3.0;
    assert!((mean - 2.0).abs() < 1e-12);
}

#[test]
fn bound_report_shows_the_two_class_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("stats.json");
    fs::write(&stats, r#"{"pixel_counts":[90,10],"total":100,"pixels_per_image":100}"#).unwrap();
    let csv = ok(&["bound", "--stats", p(&stats), "--F", "0.001", "--trials", "50"]);
    assert!(csv.starts_with("class,n_k,p_k,rho_0k,rho_k0,mu_k,rho_ratio_to_max"));
    let row0: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let ratio: f64 = row0[6].parse().unwrap();
    assert!((ratio - 1.0 / 27.0).abs() < 1e-12);

    // Huge F: every class vacuous, flagged in the summary row.
    let csv = ok(&["bound", "--stats", p(&stats), "--F", "1e9"]);
    let summary = csv.lines().find(|l| l.starts_with("summary,")).unwrap();
    assert!(summary.ends_with(",undefined,1"), "{summary}");

    let out = dir.path().join("bound.csv");
    ok(&["bound", "--stats", p(&stats), "--F", "0.001", "--out", p(&out)]);
    let text = fs::read_to_string(out).unwrap();
    assert!(text.starts_with("# margin-calib "));
    assert!(text.contains("# config: "));
}

#[test]
fn train_then_eval_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let data = dir.path().join("data");
    let manifest = ok(&["synth", "--synth-spec", p(&spec), "--out", p(&data)]);
    let run = dir.path().join("run");
    ok(&[
        "train", "--manifest", manifest.trim(), "--loss", "mc", "--epochs", "3", "--warmup-epochs", "1", "--lr", "0.01",
        "--out", p(&run),
    ]);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("# margin-calib "));
    let body: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "epoch,train_loss,val_loss,train_miou,val_miou,loss");
    assert_eq!(body.len(), 4);
    assert!(body[1].ends_with(",ce") && body[3].ends_with(",mc"));

    let report = ok(&["eval", "--model", p(&run.join("model.mdl")), "--manifest", manifest.trim()]);
    assert!(report.lines().count() > 3);
}

#[test]
fn compare_and_gap_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let common = ["--synth-spec", p(&spec), "--split", "6,3,3", "--epochs", "2", "--seeds", "0,1"];

    let out = dir.path().join("compare");
    let mut args = vec!["compare", "--loss", "ce,mc,mc+dice"];
    args.extend(common);
    args.extend(["--out", p(&out)]);
    let summary = ok(&args);
    assert!(summary.lines().count() >= 4);
    let cells = fs::read_to_string(out.join("compare_cells.csv")).unwrap();
    assert_eq!(cells.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 2);

    let out = dir.path().join("gap");
    let mut args = vec!["gap"];
    args.extend(common);
    args.extend(["--out", p(&out)]);
    ok(&args);
    for f in ["gap.csv", "gap.svg", "miou.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(out.join("gap.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("stats.json");
    fs::write(&stats, r#"{"pixel_counts":[90,10],"total":100,"pixels_per_image":100}"#).unwrap();

    assert_eq!(mcal(&["calibrate", "--stats", p(&stats), "--upsilon", "-1"]).status.code(), Some(2));
    assert_eq!(mcal(&["calibrate", "--stats", p(&stats), "--classes", "3"]).status.code(), Some(2));
    assert_eq!(mcal(&["stats", "--manifest", p(&dir.path().join("missing.tsv"))]).status.code(), Some(3));
    assert_eq!(mcal(&["train", "--loss", "hinge", "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(mcal(&["frobnicate"]).status.code(), Some(2));
}
