use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evtrack::datamodel::load_sequence;
use evtrack::eval::ope_evaluate;
use evtrack::tracker::read_trajectory;
use evtrack_cli::load_dataset;

const TINY_DATA: &[&str] = &[
    "--set", "synth.n_frames=6",
    "--set", "synth.width=64",
    "--set", "synth.height=48",
    "--set", "synth.object_w=12",
    "--set", "synth.object_h=10",
];

const TINY_MODEL: &[&str] = &[
    "--set", "backbone.dim=8",
    "--set", "backbone.depth=1",
    "--set", "backbone.heads=2",
    "--set", "backbone.patch_size=8",
    "--set", "backbone.elim_blocks=[]",
    "--set", "model.template_size=16",
    "--set", "model.search_size=32",
    "--set", "uncert.heads=2",
    "--set", "head.channels=4",
    "--set", "train.batch_size=2",
];

fn evtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evtrack")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = evtrack(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", s(dir), "--n", "2", "--seed", "7"];
    args.extend_from_slice(TINY_DATA);
    args.extend_from_slice(extra);
    ok(&args);
}

fn train(dataset: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--dataset", s(dataset), "--out", s(out)];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(extra);
    ok(&args);
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, &["--misalign", "8,4,0"]);
    synth(&b, &["--misalign", "8,4,0"]);
    assert_eq!(files(&a), files(&b));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["misalignment"], serde_json::json!([8.0, 4.0, 0]));
    assert_eq!(manifest["sequences"].as_array().unwrap().len(), 2);
    assert!(manifest["config_hash"].as_str().unwrap().len() == 16);
    for seq in load_dataset(&a).unwrap() {
        seq.check_integrity().unwrap();
        assert_eq!(seq.len(), 6);
    }
    let refused = evtrack(&["synth", "--out", s(&a), "--n", "1"]);
    assert_eq!(refused.status.code(), Some(2));
    ok(&["synth", "--out", s(&a), "--n", "1", "--force", "--set", "synth.n_frames=3"]);
}

#[test]
fn bad_configuration_fails_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let run = tmp.path().join("run");
    for bad in ["backbone.nonsense=1", "backbone.dim=0", "train.batch_size=0"] {
        let out = evtrack(&["train", "--dataset", s(&data), "--out", s(&run), "--set", bad]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
        assert!(!run.exists());
    }
    let out = evtrack(&["synth", "--out", s(&run), "--misalign", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_and_records_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let (r1, r2, r3, r0) = (tmp.path().join("r1"), tmp.path().join("r2"), tmp.path().join("r3"), tmp.path().join("r0"));
    train(&data, &r1, &["--steps", "3", "--seed", "5"]);
    train(&data, &r2, &["--steps", "3", "--seed", "5"]);
    let log1 = fs::read_to_string(r1.join("train_log.jsonl")).unwrap();
    assert_eq!(log1, fs::read_to_string(r2.join("train_log.jsonl")).unwrap());
    assert_eq!(fs::read(r1.join("final.ckpt")).unwrap(), fs::read(r2.join("final.ckpt")).unwrap());
    assert_eq!(log1.lines().count(), 3);
    for line in log1.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["variant"], "full");
        assert!(v["total"].as_f64().unwrap().is_finite());
    }
    train(&data, &r3, &["--steps", "2", "--variant", "baseline"]);
    let log3 = fs::read_to_string(r3.join("train_log.jsonl")).unwrap();
    assert!(log3.lines().all(|l| l.contains("\"variant\":\"baseline\"")));
    train(&data, &r0, &["--steps", "0"]);
    assert!(r0.join("final.ckpt").is_file());
    assert!(fs::read_to_string(r0.join("train_log.jsonl")).unwrap().is_empty());
}

#[test]
fn track_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let run = tmp.path().join("run");
    train(&data, &run, &["--steps", "1"]);
    let ckpt = run.join("final.ckpt");
    let (t1, t2) = (tmp.path().join("t1"), tmp.path().join("t2"));
    ok(&["track", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&t1)]);
    ok(&["track", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&t2), "--workers", "2"]);
    let seqs = load_dataset(&data).unwrap();
    let mut trajs = Vec::new();
    for seq in &seqs {
        let a = fs::read_to_string(t1.join(format!("{}.txt", seq.name))).unwrap();
        assert_eq!(a, fs::read_to_string(t2.join(format!("{}.txt", seq.name))).unwrap());
        assert_eq!(a.lines().count(), seq.len());
        assert!(t1.join(format!("{}.timing.csv", seq.name)).is_file());
        trajs.push(read_trajectory(&t1.join(format!("{}.txt", seq.name))).unwrap());
    }
    assert_eq!(fs::read(t1.join("manifest.json")).unwrap(), fs::read(t2.join("manifest.json")).unwrap());

    let incompatible = evtrack(&[
        "track", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&tmp.path().join("t3")),
        "--set", "backbone.dim=16",
    ]);
    assert_eq!(incompatible.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&incompatible.stderr).contains("backbone.dim"));

    let report_dir = tmp.path().join("report");
    let out = ok(&["eval", "--dataset", s(&data), "--trajectories", s(&t1), "--out", s(&report_dir)]);
    let lib = ope_evaluate(&trajs, &seqs).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["overall"]["sr"].as_f64().unwrap(), lib.sr_auc);
    assert_eq!(report[0]["overall"]["pr"].as_f64().unwrap(), lib.pr_at_20);
    assert_eq!(report[0]["overall"]["npr"].as_f64().unwrap(), lib.npr);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PR"));
    for f in ["precision.svg", "success.svg", "curves_t1.csv"] {
        assert!(report_dir.join(f).is_file(), "{f}");
    }

    // groundtruth as a tracker from a different configuration
    let gt_dir = tmp.path().join("groundtruth");
    fs::create_dir_all(&gt_dir).unwrap();
    for seq in &seqs {
        fs::copy(data.join(&seq.name).join("groundtruth.txt"), gt_dir.join(format!("{}.txt", seq.name))).unwrap();
    }
    let manifest = fs::read_to_string(t1.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    fs::write(gt_dir.join("manifest.json"), manifest.replace(v["config_hash"].as_str().unwrap(), "0000000000000000")).unwrap();

    let mixed = evtrack(&[
        "eval", "--dataset", s(&data), "--trajectories", s(&t1), "--trajectories", s(&gt_dir), "--out",
        s(&tmp.path().join("mixed")),
    ]);
    assert_eq!(mixed.status.code(), Some(3));
    let cmp = tmp.path().join("cmp");
    let out = ok(&[
        "eval", "--dataset", s(&data), "--trajectories", s(&t1), "--trajectories", s(&gt_dir), "--out", s(&cmp),
        "--allow-mixed",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("groundtruth: PR 1.0000 NPR 1.0000 SR 1.0000"));
    let svg = fs::read_to_string(cmp.join("success.svg")).unwrap();
    assert!(svg.find("groundtruth").unwrap() < svg.find("t1 [").unwrap());

    fs::remove_file(gt_dir.join(format!("{}.txt", seqs[1].name))).unwrap();
    let missing = evtrack(&["eval", "--dataset", s(&data), "--trajectories", s(&gt_dir), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains(&seqs[1].name));
}

#[test]
fn stack_preview_renders_png() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let seq_dir = data.join(&load_dataset(&data).unwrap()[0].name);
    let png = tmp.path().join("ev.png");
    ok(&["stack-preview", "--sequence", s(&seq_dir), "--frame", "2", "--out", s(&png)]);
    let img = image_dims(&png);
    let seq = load_sequence(&seq_dir).unwrap();
    assert_eq!(img, seq.frame_size());
    let out = evtrack(&["stack-preview", "--sequence", s(&seq_dir), "--frame", "99", "--out", s(&png)]);
    assert_eq!(out.status.code(), Some(2));
}

fn image_dims(p: &Path) -> (u32, u32) {
    let bytes = fs::read(p).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let be = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
    (be(16), be(20))
}
