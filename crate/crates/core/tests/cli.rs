use std::path::Path;
use std::process::{Command, Output};

use edt::amm::{build_amm, AmmParams, GridGeometry, ModulationMatrix};
use edt::harness::checkpoint::load_tensors;
use edt::harness::eval::EvalReport;
use edt::harness::image::Gray;
use edt::harness::sample::read_samples;
use edt::harness::train::read_loss_log;

fn edt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edt")).args(args).output().expect("spawn edt")
}

fn ok(args: &[&str]) -> String {
    let out = edt(args);
    assert!(
        out.status.success(),
        "edt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn amm_export_writes_csv_and_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("amm.csv");
    ok(&["amm", "export", "--grid", "4", "--scale", "0.5", "--radius", "3", "--out", s(&path)]);
    let m = ModulationMatrix::import(&path).unwrap();
    let g = GridGeometry::new(4).unwrap();
    let want = build_amm(g, AmmParams::new(g, 0.5, Some(3.0)).unwrap());
    assert_eq!(m, want);
    let csv = std::fs::read_to_string(&path).unwrap();
    assert_eq!(csv.lines().count(), 16);
    assert!(csv.lines().all(|l| l.split(',').count() == 16));
}

#[test]
fn amm_export_rejects_degenerate_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = edt(&["amm", "export", "--grid", "1", "--out", s(&dir.path().join("x.csv"))]);
    assert!(!out.status.success());
}

#[test]
fn flops_csv_reports_every_stage() {
    let csv = ok(&["flops", "--preset", "nano", "--format", "csv"]);
    assert!(csv.lines().count() > 5);
    let table = ok(&["flops", "--preset", "nano", "--oracle"]);
    assert!(!table.is_empty());
}

#[test]
fn flops_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let mut cfg = serde_json::to_value(edt::ModelConfig::nano()).unwrap();
    cfg["bogus"] = serde_json::json!(1);
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = edt(&["flops", "--config", s(&path)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn dataset_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--threads", "1", "dataset", "gen", "--count", "10", "--pgm", "--out", s(&a)]);
    ok(&["--threads", "3", "dataset", "gen", "--count", "10", "--out", s(&b)]);
    assert_eq!(
        std::fs::read(a.join("data.bin")).unwrap(),
        std::fs::read(b.join("data.bin")).unwrap()
    );
    let (t, m) = load_tensors::<f32>(&a.join("data")).unwrap();
    assert_eq!(t[0].1.shape(), &[10, 4, 16, 16]);
    assert_eq!(m.meta["labels"].as_array().unwrap().len(), 10);
    let pgm = Gray::load(&a.join("item_000003_class3.pgm")).unwrap();
    assert_eq!((pgm.width, pgm.height), (64, 16));
}

#[test]
fn train_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let common = ["--seed", "3", "train", "--model", "nano", "--batch-size", "2", "--train-items", "16"];
    let mut args = common.to_vec();
    args.extend(["--iterations", "2", "--out", s(&run)]);
    ok(&args);
    let mut args = common.to_vec();
    args.extend(["--iterations", "3", "--out", s(&run), "--resume", "latest"]);
    ok(&args);
    let log = read_loss_log(&run.join("loss.csv")).unwrap();
    assert_eq!(log.iter().map(|e| e.iteration).collect::<Vec<_>>(), [1, 2, 3]);

    let ckpt = run.join("checkpoints").join("step_0000003");
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    let sample = |out: &Path, amm: &str, threads: &str| {
        ok(&[
            "--seed", "9", "--threads", threads, "sample", "--checkpoint", s(&ckpt), "--steps", "3",
            "--cfg-scale", "2", "--class", "1,4", "--count", "2", "--amm", amm, "--out", s(out),
        ]);
    };
    sample(&x, "off", "1");
    sample(&y, "off", "2");
    let (gx, ox) = read_samples(&x).unwrap();
    let (gy, _) = read_samples(&y).unwrap();
    assert_eq!(gx.data(), gy.data());
    assert_eq!(ox.classes, [1, 1, 4, 4]);
    assert_eq!(ox.seed, 9);

    let z = dir.path().join("z");
    sample(&z, "on", "1");
    let (gz, oz) = read_samples(&z).unwrap();
    assert!(oz.amm);
    assert_ne!(gx.data(), gz.data());

    let report = dir.path().join("report.json");
    ok(&["eval", "--generated", s(&x), "--ref-factor", "2", "--out", s(&report)]);
    let text = std::fs::read_to_string(&report).unwrap();
    let parsed: EvalReport = serde_json::from_str(&text).unwrap();
    assert!(parsed.mmd.mmd.is_finite() && parsed.per_class.len() == 2);
}

#[test]
fn sample_rejects_foreign_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["dataset", "gen", "--count", "2", "--out", s(&data)]);
    let out = edt(&["sample", "--checkpoint", s(&data.join("data")), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
