use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "
[data]
count = 40

[train]
total_steps = 20
checkpoint_every = 10
";

fn sent(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sent"))
        .args(["--config", dir.join("small.toml").to_str().unwrap()])
        .args(args)
        .env_remove("SENT_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn out_arg(dir: &Path, sub: &str) -> String {
    dir.join(sub).to_str().unwrap().to_string()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn prepared(dir: &Path, sub: &str) -> String {
    let out = out_arg(dir, sub);
    ok(&sent(dir, &["--seed", "4", "--out", &out, "gen-data"]));
    ok(&sent(dir, &["--seed", "4", "--out", &out, "se-profile"]));
    out
}

#[test]
fn seed_is_required() {
    let dir = workspace();
    let o = sent(dir.path(), &["--out", &out_arg(dir.path(), "o"), "gen-data"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = workspace();
    assert_eq!(sent(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(sent(dir.path(), &["--seed", "x", "gen-data"]).status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_errors() {
    let dir = workspace();
    std::fs::write(dir.path().join("small.toml"), "[train]\nstepz = 3\n").unwrap();
    let o = sent(dir.path(), &["--seed", "1", "gen-data"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
}

#[test]
fn datasets_depend_only_on_the_seed() {
    let dir = workspace();
    let p = dir.path();
    for (sub, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        ok(&sent(p, &["--seed", seed, "--out", &out_arg(p, sub), "gen-data"]));
    }
    let read = |s: &str| std::fs::read(p.join(s).join("dataset.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn out_dir_precedence() {
    let dir = workspace();
    let p = dir.path();
    let env_dir = p.join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_sent"))
        .args(["--config", p.join("small.toml").to_str().unwrap(), "--seed", "1", "gen-data"])
        .env("SENT_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    ok(&o);
    assert!(env_dir.join("dataset.jsonl").exists());
    let flag_dir = p.join("from_flag");
    let o = Command::new(env!("CARGO_BIN_EXE_sent"))
        .args(["--config", p.join("small.toml").to_str().unwrap(), "--seed", "1"])
        .args(["--out", flag_dir.to_str().unwrap(), "gen-data"])
        .env("SENT_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    ok(&o);
    assert!(flag_dir.join("dataset.jsonl").exists());
}

#[test]
fn sent_training_without_a_plan_names_the_missing_stage() {
    let dir = workspace();
    let out = prepared(dir.path(), "o");
    std::fs::remove_file(Path::new(&out).join("plan.json")).unwrap();
    let o = sent(dir.path(), &["--seed", "4", "--out", &out, "train", "--mode", "sent"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("se-profile") && err.contains("plan.json"), "{err}");
    // GRPO trains on the unsorted dataset and needs no plan
    ok(&sent(dir.path(), &["--seed", "4", "--out", &out, "train", "--mode", "grpo"]));
}

#[test]
fn unknown_mode_is_rejected() {
    let dir = workspace();
    let out = prepared(dir.path(), "o");
    let o = sent(dir.path(), &["--seed", "4", "--out", &out, "train", "--mode", "ppo"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("high_en"));
}

#[test]
fn every_mode_trains_and_writes_its_artifacts() {
    let dir = workspace();
    let out = prepared(dir.path(), "o");
    for mode in ["grpo", "en", "adv", "mask", "clip", "cov", "high_en", "sent"] {
        ok(&sent(dir.path(), &["--seed", "4", "--out", &out, "train", "--mode", mode]));
        let metrics = std::fs::read_to_string(Path::new(&out).join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 21, "{mode}");
    }
    let o = Path::new(&out);
    assert!(o.join("final_policy.txt").exists());
    assert!(o.join("checkpoints/step_000010.txt").exists());
    assert!(o.join("checkpoints/step_000020.txt").exists());
}

#[test]
fn eval_reports_each_requested_k() {
    let dir = workspace();
    let out = prepared(dir.path(), "o");
    ok(&sent(dir.path(), &["--seed", "4", "--out", &out, "train"]));
    let o = sent(dir.path(), &["--seed", "4", "--out", &out, "eval", "--k", "1,4,8"]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    for split in ["train", "hardest"] {
        for k in [1, 4, 8] {
            assert!(text.contains(&format!("{split} k={k} ")), "{text}");
        }
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(&out).join("eval.json")).unwrap()).unwrap();
    let ks: Vec<u64> = json["splits"][0]["metrics"].as_array().unwrap().iter().map(|m| m["k"].as_u64().unwrap()).collect();
    assert_eq!(ks, vec![1, 4, 8]);
    assert_eq!(sent(dir.path(), &["--seed", "4", "--out", &out, "eval", "--k", "0"]).status.code(), Some(1));
}

#[test]
fn training_is_byte_deterministic() {
    let dir = workspace();
    let a = prepared(dir.path(), "a");
    let b = prepared(dir.path(), "b");
    ok(&sent(dir.path(), &["--seed", "4", "--out", &a, "train"]));
    ok(&sent(dir.path(), &["--seed", "4", "--out", &b, "train"]));
    for f in ["metrics.csv", "final_policy.txt", "profiles.jsonl", "plan.json"] {
        let read = |d: &str| std::fs::read(Path::new(d).join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f}");
    }
}

#[test]
fn dump_batch_writes_selection_columns() {
    let dir = workspace();
    let out = prepared(dir.path(), "o");
    ok(&sent(dir.path(), &["--seed", "4", "--out", &out, "dump-batch"]));
    let text = std::fs::read_to_string(Path::new(&out).join("batch.csv")).unwrap();
    let header = text.lines().next().unwrap();
    for col in ["entropy", "cov", "beta_con", "in_low", "in_high_cov"] {
        assert!(header.split(',').any(|c| c == col), "{header}");
    }
}

#[test]
fn verify_dynamics_passes_and_writes_csv() {
    let dir = workspace();
    let out = out_arg(dir.path(), "o");
    let o = sent(dir.path(), &["--seed", "2", "--out", &out, "verify-dynamics"]);
    ok(&o);
    let csv = std::fs::read_to_string(Path::new(&out).join("dynamics.csv")).unwrap();
    assert!(csv.starts_with("instance,with_kl,eta,term1,term2,predicted,actual,error"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(&out).join("dynamics_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], true);
}
