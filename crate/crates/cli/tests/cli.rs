use std::path::Path;
use std::process::{Command, Output};

fn tpg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpg"))
        .current_dir(dir)
        .env_remove("TPG_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("tpg runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tpg(dir, args);
    assert!(
        out.status.success(),
        "tpg {args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A run small enough for a test: tiny corpus, a handful of steps.
const TINY: [&str; 8] = [
    "--preset",
    "desk",
    "--corpus.per_class=3",
    "--stage1.steps=4",
    "--stage2.steps=3",
    "--stage2.eval_every=0",
    "--sde.steps=6",
    "--holdout=0.34",
];

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = Vec::new();
    v.extend_from_slice(extra);
    v.extend_from_slice(&TINY);
    v
}

fn sha_line(stdout: &str, prefix: &str) -> String {
    stdout
        .lines()
        .find(|l| l.starts_with(prefix) && l.contains("sha256"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap_or_else(|| panic!("no '{prefix}' hash in:\n{stdout}"))
        .to_string()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for cmd in ["synth", "train-priors", "train-diffusion", "restore", "eval", "ablate", "check"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn pipeline_is_deterministic_end_to_end() {
    let hashes = |dir: &Path| {
        let synth = ok(dir, &with(&["synth"]));
        let s1 = ok(dir, &with(&["train-priors"]));
        let s2 = ok(dir, &with(&["train-diffusion"]));
        (
            sha_line(&synth, "manifest"),
            sha_line(&s1, "checkpoint"),
            sha_line(&s2, "checkpoint"),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = hashes(a.path());
    assert_eq!(ha, hashes(b.path()));
    for f in ["runs/stage1_log.csv", "runs/stage2_log.csv", "runs/eval.csv", "runs/config.toml"] {
        assert!(a.path().join(f).exists(), "{f}");
    }

    // Restore one held-in sample to both output formats, then evaluate.
    let root = a.path();
    let sample = root.join("corpus/samples/00000");
    let lq = sample.join("lq.t");
    ok(root, &["restore", lq.to_str().unwrap(), "out.t", "--preset", "desk"]);
    ok(root, &["restore", lq.to_str().unwrap(), "out.png", "--preset", "desk"]);
    let restored = tpg_core::tensor::read_tensor(root.join("out.t")).unwrap();
    let gt = tpg_core::tensor::read_tensor(sample.join("gt.t")).unwrap();
    assert_eq!(restored.shape(), gt.shape());
    assert!(restored.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(root.join("out.png").exists());

    let report = ok(root, &["eval", "corpus/manifest.csv", "--out", "all.csv"]);
    assert!(report.contains("mean  PSNR"), "{report}");
    let rows = std::fs::read_to_string(root.join("all.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 5 * 3);
}

#[test]
fn seed_env_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let hash = |env: Option<&str>, extra: &[&str]| {
        let mut args = vec!["synth", "--out", "c", "--preset", "desk", "--corpus.per_class=2"];
        args.extend_from_slice(extra);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tpg"));
        cmd.current_dir(root).env_remove("TPG_SEED").args(&args);
        if let Some(s) = env {
            cmd.env("TPG_SEED", s);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        sha_line(&String::from_utf8(out.stdout).unwrap(), "manifest")
    };
    let base = hash(None, &[]);
    assert_eq!(base, hash(Some("0"), &[]));
    let seven = hash(Some("7"), &[]);
    assert_ne!(base, seven);
    assert_eq!(seven, hash(None, &["--seed=7"]));
    // An explicit seed wins over the environment.
    assert_eq!(base, hash(Some("7"), &["--seed=0"]));

    let bad = tpg(root, &["synth", "--preset", "desk", "--corpus.nonsense=1"]);
    assert!(!bad.status.success());
    let bad = tpg(root, &["synth", "--preset", "nope"]);
    assert!(!bad.status.success());
}

#[test]
fn architecture_mismatch_is_refused_with_a_diff() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &with(&["synth"]));
    ok(root, &with(&["train-priors"]));
    ok(root, &with(&["train-diffusion"]));
    let lq = "corpus/samples/00001/lq.t";
    let out = tpg(root, &["restore", lq, "x.t", "--preset", "desk", "--model.unet.base_channels=4"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.unet.base_channels"), "{err}");

    // A stage-1 checkpoint is not a restorer.
    let out = tpg(root, &["restore", lq, "x.t", "--checkpoint", "runs/stage1.ckpt"]);
    assert!(!out.status.success());
}

#[test]
fn missing_corpus_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = tpg(dir.path(), &with(&["train-priors"]));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tpg synth"));
}

#[test]
fn check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["check"]);
    assert!(!out.contains("FAIL"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 10);
}
