use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rpo_core::cli::{Settings, EMBED_ENDPOINT_ENV};
use rpo_core::losses::Method;

fn rpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpo"))
        .args(args)
        .env_remove(EMBED_ENDPOINT_ENV)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(dir: &Path) -> Settings {
    toml::from_str(&fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic dataset plus a one-epoch SFT checkpoint.
struct Prepared {
    _root: tempfile::TempDir,
    root: PathBuf,
    pairs: PathBuf,
    oracle: PathBuf,
    model: PathBuf,
}

fn prepare() -> Prepared {
    let root = tempfile::tempdir().unwrap();
    let path = root.path().to_path_buf();
    let synth = path.join("synth");
    let out = rpo(&[
        "synth",
        "--out",
        s(&synth),
        "--num-clusters",
        "3",
        "--prompts-per-cluster",
        "8",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["pairs.jsonl", "unpaired.jsonl", "oracle.json", "manifest.toml"] {
        assert!(synth.join(f).exists(), "{f}");
    }
    let sft = path.join("sft");
    let pairs = synth.join("pairs.jsonl");
    let out = rpo(&["sft", "--out", s(&sft), "--data", s(&pairs), "--batch-size", "8"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    Prepared {
        _root: root,
        root: path,
        pairs,
        oracle: synth.join("oracle.json"),
        model: sft.join("model.bin"),
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&rpo(&["--help"])), 0);
    assert_eq!(code(&rpo(&["--version"])), 0);
    let out = rpo(&["align", "--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("--tau"));
}

#[test]
fn usage_errors_exit_one() {
    let out = rpo(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(code(&rpo(&[])), 1);
    assert_eq!(code(&rpo(&["sft", "--no-such-flag"])), 1);
    assert_eq!(code(&rpo(&["sft", "--tau", "abc"])), 1);
    assert_eq!(code(&rpo(&["sft", "--method", "ppo"])), 1);
}

#[test]
fn bad_config_and_missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "beta = \"high\"\n").unwrap();
    let out = rpo(&["sft", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 1);
    fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(
        code(&rpo(&["sft", "--config", s(&bad), "--out", s(&dir.path().join("o"))])),
        1
    );
    let out = rpo(&["sft", "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--data"));
    let missing = rpo(&[
        "sft",
        "--out",
        s(&dir.path().join("o")),
        "--data",
        s(&dir.path().join("none.jsonl")),
    ]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn gradcheck_passes_on_bundled_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpo(&["gradcheck", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("max_rel_error="));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-5);
    let m = manifest(dir.path());
    assert_eq!((m.window, m.embed_dim, m.hidden), (Some(4), Some(8), Some(16)));
}

#[test]
fn gradcheck_each_method() {
    let dir = tempfile::tempdir().unwrap();
    for method in ["dpo", "ipo", "kto"] {
        let out = rpo(&[
            "gradcheck",
            "--out",
            s(&dir.path().join(method)),
            "--method",
            method,
            "--hidden",
            "8",
        ]);
        assert_eq!(code(&out), 0, "{method}: {}", stderr(&out));
    }
}

#[test]
fn align_echoes_resolved_config() {
    let p = prepare();
    let out_dir = p.root.join("align");
    let out = rpo(&[
        "align",
        "--method",
        "rpo",
        "--strategy",
        "embedding",
        "--tau",
        "0.5",
        "--beta",
        "0.1",
        "--data",
        s(&p.pairs),
        "--init",
        s(&p.model),
        "--out",
        s(&out_dir),
        "--batch-size",
        "8",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("tau=0.5 beta=0.1"));
    let m = manifest(&out_dir);
    assert_eq!((m.tau, m.beta, m.method), (Some(0.5), 0.1, Method::Rpo));
    assert_eq!(m.command.as_deref(), Some("align"));
    assert!(out_dir.join("model.bin").exists() && out_dir.join("report.json").exists());
}

#[test]
fn unpaired_default_tau_is_recorded() {
    let p = prepare();
    let out_dir = p.root.join("unpaired");
    let unpaired = p.pairs.with_file_name("unpaired.jsonl");
    let out = rpo(&[
        "align",
        "--unpaired-data",
        s(&unpaired),
        "--init",
        s(&p.model),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(manifest(&out_dir).tau, Some(0.75));
}

#[test]
fn flags_beat_config_and_manifest_records_winner() {
    let p = prepare();
    let cfg = p.root.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "beta = 0.3\nepochs = 2\nbatch_size = 8\ndata = {:?}\ninit = {:?}\n",
            p.pairs, p.model
        ),
    )
    .unwrap();
    let out_dir = p.root.join("override");
    let out = rpo(&["align", "--config", s(&cfg), "--beta", "0.2", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = manifest(&out_dir);
    assert_eq!((m.beta, m.epochs, m.batch_size), (0.2, 2, 8));
}

#[test]
fn incompatible_method_and_data_exit_one() {
    let p = prepare();
    for method in [["--method", "dpo"], ["--strategy", "diagonal"]] {
        let out = rpo(&[
            "align",
            "--decompose",
            "--data",
            s(&p.pairs),
            "--init",
            s(&p.model),
            "--out",
            s(&p.root.join("bad")),
            method[0],
            method[1],
        ]);
        assert_eq!(code(&out), 1, "{}", stderr(&out));
    }
}

#[test]
fn embed_endpoint_env_applies_when_flag_absent() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "gradcheck",
            "--provider",
            "http",
            "--embed-timeout-secs",
            "2",
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_rpo"))
            .args(&args)
            .env(EMBED_ENDPOINT_ENV, "http://127.0.0.1:9")
            .output()
            .unwrap()
    };
    let from_env = dir.path().join("env");
    let out = run(&from_env, &[]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert_eq!(
        manifest(&from_env).embed_endpoint.as_deref(),
        Some("http://127.0.0.1:9")
    );
    let from_flag = dir.path().join("flag");
    let out = run(&from_flag, &["--embed-endpoint", "http://127.0.0.1:7"]);
    assert_eq!(code(&out), 2);
    assert_eq!(
        manifest(&from_flag).embed_endpoint.as_deref(),
        Some("http://127.0.0.1:7")
    );
    let out = rpo(&["gradcheck", "--provider", "http", "--out", s(&dir.path().join("none"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_and_sweep_write_tables() {
    let p = prepare();
    let eval_dir = p.root.join("eval");
    let out = rpo(&[
        "eval",
        "--init",
        s(&p.model),
        "--baseline",
        s(&p.model),
        "--oracle",
        s(&p.oracle),
        "--eval-prompts",
        "12",
        "--out",
        s(&eval_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(summary["tie_rate"], 1.0);
    assert_eq!(
        fs::read_to_string(eval_dir.join("eval_records.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );

    let sweep_dir = p.root.join("sweep");
    let out = rpo(&[
        "sweep",
        "--data",
        s(&p.pairs),
        "--init",
        s(&p.model),
        "--oracle",
        s(&p.oracle),
        "--sweep-axis",
        "batch_size",
        "--sweep-values",
        "4,0,8",
        "--eval-prompts",
        "8",
        "--out",
        s(&sweep_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows: Vec<serde_json::Value> = fs::read_to_string(sweep_dir.join("sweep.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1]["error"].is_string());
    assert!(rows[2]["win_rate"].is_number());
    let out = rpo(&[
        "sweep",
        "--data",
        s(&p.pairs),
        "--init",
        s(&p.model),
        "--oracle",
        s(&p.oracle),
        "--out",
        s(&sweep_dir),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn manifest_rerun_is_bit_identical() {
    let p = prepare();
    let first = p.root.join("first");
    let out = rpo(&[
        "align",
        "--data",
        s(&p.pairs),
        "--init",
        s(&p.model),
        "--out",
        s(&first),
        "--batch-size",
        "8",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let second = p.root.join("second");
    let manifest_path = first.join("manifest.toml");
    let out = rpo(&["align", "--config", s(&manifest_path), "--out", s(&second)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["model.bin", "report.json"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
    let mut a = manifest(&first);
    let b = manifest(&second);
    a.out = b.out.clone();
    assert_eq!(a, b);
}
