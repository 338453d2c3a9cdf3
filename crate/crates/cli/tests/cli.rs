use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stpt::data::Task;
use stpt::train::parse_log;

const TINY: &str = r#"
seed = 3
[data]
n_unlabeled = 40
n_supervised = 20
n_text = 40
n_dev = 6
n_test = 6
[train.stage1]
max_updates = 6
warmup = 2
[train.stage2]
max_updates = 24
warmup = 2
[train.stage3]
max_updates = 6
warmup = 2
[eval]
max_len = 12
[probe]
n_batches = 2
batch_size = 2
"#;

fn stpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stpt"))
        .args(args)
        .env("STPT_LOG", "warn")
        .output()
        .expect("spawn stpt")
}

fn ok(args: &[&str]) -> Output {
    let out = stpt(args);
    assert!(
        out.status.success(),
        "stpt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny config (pointing at `<root>/data`) and generates the corpus.
fn setup(root: &Path) -> String {
    let cfg = root.join("run.toml");
    let data = root.join("data");
    fs::write(&cfg, format!("data_dir = {:?}\n{TINY}", s(&data))).unwrap();
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    s(&cfg).to_string()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&c), "--seed", "4"]);
    assert_eq!(files(&a), files(&b));
    assert_ne!(fs::read(a.join("frames.bin")).unwrap(), fs::read(c.join("frames.bin")).unwrap());
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = stpt(&["gen-data", "--out", "/nonexistent", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let out = stpt(&["pretrain-joint", "--out", "x", "--ablate", "drop-everything"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("drop-s2t"), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = stpt(&["gen-data", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("width") && err.contains("model_dim"), "{err}");
}

#[test]
fn three_stage_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = setup(root);
    let p = |d: &str| root.join(d);
    ok(&["pretrain-t2t", "--config", &cfg, "--out", s(&p("s1"))]);
    ok(&["pretrain-joint", "--config", &cfg, "--out", s(&p("s2")), "--init", s(&p("s1/checkpoint.bin"))]);
    ok(&["finetune", "--config", &cfg, "--out", s(&p("s3")), "--init", s(&p("s2/checkpoint.bin"))]);

    let s1_text = fs::read_to_string(p("s1/run.log")).unwrap();
    let config_line = s1_text.lines().nth(1).unwrap().strip_prefix("#config\t").unwrap();
    let embedded: serde_json::Value = serde_json::from_str(config_line).unwrap();
    assert_eq!(embedded["seed"], 3);
    let s1 = parse_log(&s1_text).unwrap();
    assert_eq!(s1.len(), 6);
    assert!(s1.iter().all(|r| r.task == Task::T2t));
    let s3 = parse_log(&fs::read_to_string(p("s3/run.log")).unwrap()).unwrap();
    assert!(s3.iter().all(|r| matches!(r.task, Task::T2t | Task::S2t)));

    let out = ok(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        s(&p("s3")),
        "--checkpoint",
        s(&p("s3/checkpoint.bin")),
        "--split",
        "dev",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["splits"]["dev"]["n_samples"], 6);
    assert_eq!(report["config"]["seed"], 3);
    let log = fs::read_to_string(p("s3/run.log")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("#eval\t"));
    assert_eq!(parse_log(&log).unwrap().len(), s3.len());

    ok(&["grad-sim", "--config", &cfg, "--out", s(&p("gs")), "--checkpoint", s(&p("s2/checkpoint.bin"))]);
    let csv = fs::read_to_string(p("gs/shared.layer0.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("task,T2T,SSL,S2P,S2T"));
    assert!(p("gs/speech.layer1.svg").exists());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("gs/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["probe"]["n_batches"], 2);
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = setup(root);
    let a = root.join("a");
    let b = root.join("b");
    ok(&["pretrain-t2t", "--config", &cfg, "--out", s(&a)]);
    ok(&["pretrain-t2t", "--config", &cfg, "--out", s(&b)]);
    assert_eq!(files(&a), files(&b));
    let ck = stpt::train::Checkpoint::load(&a.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.run.unwrap()["seed"].as_integer(), Some(3));
}

#[test]
fn drop_s2t_never_schedules_s2t_in_joint_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = setup(root);
    let init = root.join("s1");
    ok(&["pretrain-t2t", "--config", &cfg, "--out", s(&init)]);
    let out = root.join("s2");
    ok(&[
        "pretrain-joint",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--ablate",
        "drop-s2t",
        "--init",
        s(&init.join("checkpoint.bin")),
    ]);
    let log = parse_log(&fs::read_to_string(out.join("run.log")).unwrap()).unwrap();
    assert_eq!(log.len(), 24);
    assert!(log.iter().all(|r| r.task != Task::S2t));
    assert!(log.iter().any(|r| r.task == Task::S2p));
}

#[test]
fn mismatched_inputs_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = setup(root);
    let s1 = root.join("s1");
    ok(&["pretrain-t2t", "--config", &cfg, "--out", s(&s1)]);
    let ck = s1.join("checkpoint.bin");

    let out = stpt(&["finetune", "--config", &cfg, "--out", s(&root.join("x"))]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
    assert_eq!(out.status.code(), Some(1));

    let out = stpt(&["eval", "--config", &cfg, "--out", s(&root.join("x")), "--checkpoint", s(&ck), "--variant", "pse"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model section"));

    let out = stpt(&["pretrain-t2t", "--config", &cfg, "--out", s(&root.join("x")), "--seed", "9"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));

    let mut bytes = fs::read(&ck).unwrap();
    bytes[0] = 99;
    let bad = root.join("bad.bin");
    fs::write(&bad, bytes).unwrap();
    let out = stpt(&["eval", "--config", &cfg, "--out", s(&root.join("x")), "--checkpoint", s(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}
