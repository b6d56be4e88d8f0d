use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dfwe");

fn dfwe(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn evaluator_config(dir: &Path, command: &[&str]) -> String {
    let path = dir.join("external.toml");
    let cmd: Vec<String> = command.iter().map(|c| format!("{c:?}")).collect();
    fs::write(
        &path,
        format!(
            "[evaluator]\nmode = \"external\"\ncommand = [{}]\ntimeout_secs = 60\n",
            cmd.join(", ")
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfwe(&["run", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfwe(&[
        "run",
        "--seed",
        "1",
        "--set",
        "train.nonsense=3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_reports_and_renders_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&dfwe(&["run", "--seed", "5", "--out", d]));
    for f in [
        "report.json",
        "report.txt",
        "report.csv",
        "config.toml",
        "merged/dfwe.ckpt",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let text = ok(&dfwe(&[
        "report",
        &format!("{d}/report.json"),
        "--format",
        "text",
    ]));
    assert_eq!(
        text,
        fs::read_to_string(dir.path().join("report.txt")).unwrap()
    );

    // The saved configuration reproduces the run.
    let again = tempfile::tempdir().unwrap();
    let a = again.path().to_str().unwrap();
    ok(&dfwe(&[
        "run",
        "--config",
        &format!("{d}/config.toml"),
        "--out",
        a,
    ]));
    let (mut r1, mut r2) = (report(dir.path()), report(again.path()));
    r1.as_object_mut().unwrap().remove("wall_clock_secs");
    r2.as_object_mut().unwrap().remove("wall_clock_secs");
    assert_eq!(r1, r2);
}

#[test]
fn external_evaluator_matches_builtin() {
    let builtin = tempfile::tempdir().unwrap();
    let external = tempfile::tempdir().unwrap();
    ok(&dfwe(&[
        "run",
        "--seed",
        "6",
        "--out",
        builtin.path().to_str().unwrap(),
    ]));
    let cfg = evaluator_config(external.path(), &[BIN, "evaluate", "--stdio"]);
    ok(&dfwe(&[
        "run",
        "--seed",
        "6",
        "--config",
        &cfg,
        "--out",
        external.path().to_str().unwrap(),
    ]));

    let (a, b) = (report(builtin.path()), report(external.path()));
    assert_eq!(a["tasks"], b["tasks"]);
    assert_eq!(a["manifest"], b["manifest"]);
}

#[test]
fn broken_evaluator_exits_with_protocol_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = evaluator_config(dir.path(), &["sh", "-c", "cat >/dev/null; echo not-json"]);
    let out = dfwe(&[
        "run",
        "--seed",
        "7",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let r = report(dir.path());
    assert_eq!(r["status"], "partial");
    assert_eq!(r["failure"]["stage"], "optimize");
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let seed = ["--seed", "8"];

    ok(&dfwe(
        &[&["gen", "--out", &p("family")][..], &seed].concat(),
    ));
    assert!(dir.path().join("family/family.json").exists());
    ok(&dfwe(
        &[
            &["train-experts", "--family", &p("family"), "--out", &p("s1")][..],
            &seed,
        ]
        .concat(),
    ));
    ok(&dfwe(
        &[
            &[
                "finetune",
                "--family",
                &p("family"),
                "--experts",
                &p("s1"),
                "--out",
                &p("s2"),
            ][..],
            &seed,
        ]
        .concat(),
    ));

    let index: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s2/experts.json")).unwrap())
            .unwrap();
    assert_eq!(index.len(), 5);

    let dev = dir.path().join("family/target.dev.ds");
    let line = ok(&dfwe(&[
        "optimize",
        "--experts",
        &p("s2"),
        "--dev",
        dev.to_str().unwrap(),
        "--out",
        &p("opt"),
    ]));
    let summary: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    let alphas: Vec<f64> = serde_json::from_value(summary["alpha_star"].clone()).unwrap();
    assert_eq!(alphas.len(), 5);

    // Merging by hand with the found weights and scoring gives the same dev score.
    let weights: Vec<String> = alphas.iter().map(|a| format!("{a:?}")).collect();
    let ckpts: Vec<String> = index
        .iter()
        .map(|e| p(&format!("s2/{}", e["path"].as_str().unwrap())))
        .collect();
    let mut args = vec![
        "merge".to_string(),
        "--weights".into(),
        weights.join(","),
        "--out".into(),
        p("hand.ckpt"),
    ];
    args.extend(ckpts);
    ok(&Command::new(BIN).args(&args).output().unwrap());
    let score = ok(&dfwe(&[
        "evaluate",
        "--checkpoint",
        &p("hand.ckpt"),
        "--dataset",
        dev.to_str().unwrap(),
    ]));
    let score: serde_json::Value = serde_json::from_str(score.trim()).unwrap();
    assert_eq!(score["score"], summary["dev_score"]);
}

#[test]
fn merge_rejects_weights_off_the_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&dfwe(&["run", "--seed", "9", "--out", d]));
    let a = format!("{d}/stage2/target.ckpt");
    let b = format!("{d}/stage2/target+sources.ckpt");
    let out = dfwe(&[
        "merge",
        "--weights",
        "0.7,0.7",
        "--out",
        &format!("{d}/x.ckpt"),
        &a,
        &b,
    ]);
    assert!(!out.status.success());
    assert!(!dir.path().join("x.ckpt").exists());
}
