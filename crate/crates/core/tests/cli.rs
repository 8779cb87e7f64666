use std::path::Path;
use std::process::{Command, Output};

use cin_core::pipeline::RunReport;
use serde_json::Value;

fn cin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cin"))
        .args(args)
        .env_remove("CIN_OUT_DIR")
        .output()
        .expect("spawn cin")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two classes of 12x12 glyphs, small enough for second-scale runs.
fn tiny_data(dir: &Path) {
    let o = cin(&[
        "gen-data",
        "--out",
        p(dir),
        "--num-classes",
        "2",
        "--n-source",
        "40",
        "--n-target",
        "40",
        "--height",
        "12",
        "--width",
        "12",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const QUICK: [&str; 8] = [
    "--source-epochs",
    "2",
    "--adapt-epochs",
    "2",
    "--examiner-passes",
    "1",
    "--examiner-pretrain-epochs",
    "1",
];

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&cin(&["--help"])), 0);
    assert_eq!(code(&cin(&["--version"])), 0);
    assert_eq!(code(&cin(&[])), 1);
    assert_eq!(code(&cin(&["train-everything"])), 1);
    assert_eq!(code(&cin(&["adapt", "--data", "x", "--frobnicate"])), 1);
    assert_eq!(code(&cin(&["adapt", "--data", "x", "--variant", "dann"])), 1);
    assert_eq!(code(&cin(&["ablate", "--seeds", "0,1"])), 1);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let o = cin(&["adapt", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let o = cin(&[
        "eval",
        "--data",
        p(&missing),
        "--checkpoint",
        p(&missing.join("base.ckpt")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_data_writes_dataset_sidecar_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    for f in ["source.cindata", "target.cindata", "dataset.json", "config.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let sidecar: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("dataset.json")).unwrap()).unwrap();
    assert_eq!(sidecar["generator"]["num_classes"], 2);
    assert_eq!(sidecar["generator"]["seed"], 3);
    let echo: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["command"], "gen-data");
    assert!(echo["format_version"].is_u64());
}

#[test]
fn out_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_cin"))
        .args([
            "gen-data",
            "--num-classes",
            "2",
            "--n-source",
            "8",
            "--n-target",
            "8",
            "--height",
            "8",
            "--width",
            "8",
        ])
        .env("CIN_OUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(target.join("source.cindata").exists());
}

#[test]
fn config_files_in_both_syntaxes() {
    let dir = tempfile::tempdir().unwrap();
    let kv = dir.path().join("data.cfg");
    std::fs::write(
        &kv,
        "# tiny\ndata.num_classes = 3\ndata.n_source=12\ndata.n_target=12\ndata.height=8\ndata.width=8\n",
    )
    .unwrap();
    let out = dir.path().join("kv");
    assert_eq!(code(&cin(&["gen-data", "--config", p(&kv), "--out", p(&out)])), 0);
    let json = dir.path().join("data.json");
    std::fs::write(
        &json,
        r#"{"data": {"num_classes": 3, "n_source": 12, "n_target": 12, "height": 8, "width": 8}}"#,
    )
    .unwrap();
    let out2 = dir.path().join("json");
    assert_eq!(code(&cin(&["gen-data", "--config", p(&json), "--out", p(&out2)])), 0);
    for f in ["source.cindata", "target.cindata"] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(out2.join(f)).unwrap()
        );
    }

    std::fs::write(&kv, "lambda3 = 1\n").unwrap();
    assert_eq!(code(&cin(&["adapt", "--data", p(&out), "--config", p(&kv)])), 1);
    std::fs::write(&kv, "batch_size = 1\n").unwrap();
    assert_eq!(code(&cin(&["adapt", "--data", p(&out), "--config", p(&kv)])), 1);
}

#[test]
fn pretrain_adapt_eval_project() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);

    let pre = dir.path().join("pre");
    let mut args = vec![
        "pretrain",
        "--data",
        p(&data),
        "--out",
        p(&pre),
        "--variant",
        "cin_pretrained",
    ];
    args.extend(QUICK);
    let o = cin(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(pre.join("base.ckpt").exists() && pre.join("examiner.ckpt").exists());

    let run = dir.path().join("run");
    let mut args = vec![
        "adapt",
        "--data",
        p(&data),
        "--checkpoint",
        p(&pre),
        "--out",
        p(&run),
        "--variant",
        "cin_pretrained",
        "--batch-size",
        "8",
        "--no-ac",
    ];
    args.extend(QUICK);
    let o = cin(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 1);
    let report = RunReport::load(&run.join("report.json")).unwrap();
    assert_eq!(report.accuracy_trajectory.len(), 2);
    assert_eq!(report.label_reads_during_adaptation, 0);
    assert!(report.head_unchanged);
    assert!(!report.config.enable_ac && report.config.enable_cmc);
    let echo: Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["batch_size"], 8);

    let ckpt = run.join("adapted.ckpt");
    let before: Vec<Vec<u8>> = [&ckpt, &data.join("target.cindata")]
        .iter()
        .map(|f| std::fs::read(f).unwrap())
        .collect();
    let ev = dir.path().join("eval");
    let o = cin(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&ev)]);
    assert_eq!(code(&o), 0);
    let e: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(e["evaluation"]["accuracy"].as_f64().unwrap(), report.final_accuracy);
    let after: Vec<Vec<u8>> = [&ckpt, &data.join("target.cindata")]
        .iter()
        .map(|f| std::fs::read(f).unwrap())
        .collect();
    assert_eq!(before, after, "eval changed its inputs");

    let pr = dir.path().join("proj");
    let o = cin(&["project", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&pr)]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(pr.join("projection.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cin(&["grad-check", "--points", "2", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("conv2d") && out.contains("im_loss") && !out.contains("FAIL"));
}
