use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "corpus.n_train=12",
    "corpus.n_dev=4",
    "corpus.n_test=4",
    "encoder.d_model=16",
    "encoder.n_heads=2",
    "encoder.d_ff=32",
    "understand.epochs=1",
    "understand.lr=0.002",
    "generator.d_model=16",
    "generator.n_heads=2",
    "generator.d_ff=32",
    "generator.epochs=1",
    "generator.lr=0.002",
    "run.seeds=3",
];

fn mdug(args: &[&str], out_root: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mdug"));
    for kv in TINY {
        cmd.args(["--set", kv]);
    }
    cmd.arg("--set").arg(format!("run.output_dir={}", out_root.display()));
    cmd.args(args).output().expect("spawn mdug")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = mdug(&["gen-corpus", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = mdug(&["--set", "encoder.colour=blue", "gen-corpus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_on_empty_directory_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = mdug(&["report", "--dir", dir.path().to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn stages_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();

    ok(&mdug(&["gen-corpus", "--out", &p("corpus.jsonl")], root));
    assert!(root.join("corpus.jsonl").is_file());

    ok(&mdug(&["train-understand", "--mode", "multi", "--out", &p("under")], root));
    assert!(root.join("under/understanding.ckpt").is_file());

    ok(&mdug(&["eval-understand", "--model", &p("under"), "--out", &p("eval-u")], root));
    assert!(root.join("eval-u/predictions.jsonl").is_file());
    assert!(root.join("eval-u/report.json").is_file());

    ok(&mdug(&["eval-understand", "--predictions", &p("eval-u/predictions.jsonl"), "--out", &p("eval-p")], root));
    let a = std::fs::read_to_string(root.join("eval-u/report.json")).unwrap();
    let b = std::fs::read_to_string(root.join("eval-p/report.json")).unwrap();
    assert_eq!(a, b, "scoring a saved predictions file reproduces the model report");

    ok(&mdug(&["train-generate", "--variant", "full", "--understanding", &p("under"), "--out", &p("gen")], root));
    assert!(root.join("gen/generator.ckpt").is_file());

    ok(&mdug(&["infer", "--generator", &p("gen"), "--understanding", &p("under")], root));
    let responses = root.join("gen/test-responses.jsonl");
    assert_eq!(std::fs::read_to_string(&responses).unwrap().lines().count(), 4);

    ok(&mdug(&["eval-generate", "--responses", responses.to_str().unwrap(), "--out", &p("eval-g")], root));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("eval-g/report.json")).unwrap()).unwrap();
    assert!(report.is_object());

    let listed = mdug(&["report", "--dir", root.to_str().unwrap()], root);
    ok(&listed);
    let text = String::from_utf8_lossy(&listed.stdout);
    assert_eq!(text.matches("== ").count(), 3, "{text}");
}
