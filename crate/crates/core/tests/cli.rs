use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn synthex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthex")).args(args).output().unwrap()
}

fn summary(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 1, "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_str(stdout.trim()).unwrap()
}

const TOY: &str = r#"
seed = 7
iterations = 2
log_trajectories = true
checkpoint_every = 2

[env]
backend = "shop"

[rollout]
group_size = 4
tasks_per_iter = 4

[optim]
lr = 5.0

[curriculum]
min_observed = 1

[eval]
episodes_per_task = 2
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Every artifact except the wall-clock sidecar, keyed by relative path.
fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_info.json" {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// `report.json` embeds the output directory; compare everything else.
fn without_out_dir(mut a: BTreeMap<String, Vec<u8>>) -> BTreeMap<String, Vec<u8>> {
    a.remove("report.json");
    a
}

#[test]
fn missing_config_is_a_user_error_naming_the_path() {
    let out = synthex(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/run.toml"), "{err}");
    let diag: Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(diag["kind"], "user");
}

#[test]
fn unknown_keys_and_bad_flags_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("{TOY}\n[rollout.extra]\nx = 1\n"));
    let out = synthex(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let typo = write(dir.path(), "t.toml", "seeed = 3\n");
    assert_eq!(synthex(&["train", "--config", typo.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(synthex(&["train", "--bogus"]).status.code(), Some(1));
    let remote = write(dir.path(), "r.toml", "[env]\nbackend = \"remote\"\n");
    let out = Command::new(env!("CARGO_BIN_EXE_synthex"))
        .args(["eval", "--config", remote.to_str().unwrap(), "--out-dir", dir.path().join("r").to_str().unwrap()])
        .env_remove("SYNTHEX_ENDPOINT")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_metrics_and_is_byte_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let run = |name: &str, workers: &str| {
        let out_dir = dir.path().join(name);
        let out = synthex(&[
            "train", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap(), "--workers", workers,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        (summary(&out), out_dir)
    };
    let (s, a) = run("a", "1");
    assert_eq!(s["command"], "train");
    assert_eq!(s["iterations"], 2);
    let metrics = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for f in ["report.json", "run_info.json", "trajectories/iter_0001.jsonl", "checkpoints/final/policy.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let (_, b) = run("b", "3");
    assert_eq!(without_out_dir(artifacts(&a)), without_out_dir(artifacts(&b)));
}

#[test]
fn resume_continues_exactly_like_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", &TOY.replace("iterations = 2", "iterations = 4"));
    let full = dir.path().join("full");
    let out = synthex(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", full.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let half = dir.path().join("half");
    let out = synthex(&[
        "train", "--config", cfg.to_str().unwrap(), "--out-dir", half.to_str().unwrap(), "--iterations", "2",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let resumed = dir.path().join("resumed");
    let ck = half.join("checkpoints/final");
    let out = synthex(&["train", "--resume", ck.to_str().unwrap(), "--iterations", "4", "--out-dir", resumed.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(full.join("metrics.jsonl")), read(resumed.join("metrics.jsonl")));
    for f in ["policy.json", "buffer.jsonl", "tasks.jsonl"] {
        assert_eq!(read(full.join("checkpoints/final").join(f)), read(resumed.join("checkpoints/final").join(f)), "{f}");
    }
    for f in ["trajectories/iter_0003.jsonl", "trajectories/iter_0004.jsonl"] {
        assert_eq!(read(full.join(f)), read(resumed.join(f)), "{f}");
    }

    // A checkpoint cannot be resumed under a different experiment.
    let other = write(dir.path(), "other.toml", &TOY.replace("seed = 7", "seed = 8"));
    let out = synthex(&["train", "--config", other.to_str().unwrap(), "--resume", ck.to_str().unwrap(), "--out-dir", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_of_untrained_policy_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = synthex(&["eval", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        (summary(&out), out_dir)
    };
    let (s, a) = run("a");
    let rate = s["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let (s2, b) = run("b");
    assert_eq!(s["success_rate"], s2["success_rate"]);
    assert_eq!(
        std::fs::read(a.join("eval_trajectories.jsonl")).unwrap(),
        std::fs::read(b.join("eval_trajectories.jsonl")).unwrap()
    );
}

#[test]
fn gen_tasks_without_challenging_tasks_generates_nothing() {
    let dir = tempfile::tempdir().unwrap();
    // One turn is never enough to buy anything, so every group is all-failure.
    let cfg = write(dir.path(), "g.toml", "max_turns = 1\nmin_observed = 1\n[env]\nbackend = \"shop\"\n");
    let out = synthex(&["gen-tasks", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().join("g").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(summary(&out)["generated"], 0);

    let cfg = write(dir.path(), "h.toml", "min_observed = 1\nper_seed = 2\n[env]\nbackend = \"shop\"\n");
    let out = synthex(&["gen-tasks", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out-dir", dir.path().join("h").to_str().unwrap()]);
    let s = summary(&out);
    let n = s["generated"].as_u64().unwrap();
    assert_eq!(n as usize, 2 * s["seeds"].as_array().unwrap().len());
    let generated = std::fs::read_to_string(dir.path().join("h/generated.jsonl")).unwrap();
    assert_eq!(generated.lines().count() as u64, n);
}

#[test]
fn verify_bounds_hundred_instances_has_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["simulation", "improvement"] {
        let out_dir = dir.path().join(kind);
        let out = synthex(&[
            "verify-bounds", "--kind", kind, "--instances", "100", "--gammas", "0.8,0.9,0.95", "--seed", "5",
            "--out-dir", out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let s = summary(&out);
        assert_eq!(s["violations"], 0);
        assert_eq!(s["instances"], 100);
        let lines = std::fs::read_to_string(out_dir.join("bounds.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 100);
    }
}

#[test]
fn prep_sft_builds_one_record_per_logged_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", &TOY.replace("iterations = 2", "iterations = 1"));
    let run = dir.path().join("run");
    assert_eq!(synthex(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", run.to_str().unwrap()]).status.code(), Some(0));
    let trajs = run.join("trajectories/iter_0001.jsonl");
    let n_steps: usize = std::fs::read_to_string(&trajs)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["steps"].as_array().unwrap().len())
        .sum();
    let prep = write(dir.path(), "prep.toml", &format!("trajectories = [{:?}]\nk = 2\n", trajs.to_str().unwrap()));
    let out_dir = dir.path().join("sft");
    let out = synthex(&["prep-sft", "--config", prep.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(summary(&out)["records"], n_steps);
    let sft = std::fs::read_to_string(out_dir.join("sft.jsonl")).unwrap();
    assert_eq!(sft.lines().count(), n_steps);
}
