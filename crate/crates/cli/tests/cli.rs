use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vthinker_core::datamodel::{read_records, read_shard, write_records, ImageStore};
use vthinker_core::executor::{CodeExecutor, InProcessExecutor};
use vthinker_core::fixtures;

fn vthinker(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vthinker"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn line_value<'a>(out: &'a str, prefix: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .unwrap_or_else(|| panic!("no {prefix:?} line in {out}"))
        .trim()
}

/// Writes seeds and a small mock config into `dir`; returns the config path.
fn setup(dir: &Path, name: &str, rounds: u32) -> PathBuf {
    fixtures::write_seed_files(&dir.join("seeds")).unwrap();
    let text = format!(
        r#"[run]
name = "{name}"
output = "runs"
seed = 4
budget = 4

[seeds]
knowledge = "seeds/knowledge.toml"
tools = "seeds/tools.toml"

[generator]
endpoint = "mock:4"
defect_rate = 0.2

[flywheel]
rounds = {rounds}

[rl]
group_size = 4
max_steps = 3
limit = 6
"#
    );
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str]) -> String {
    let o = vthinker(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

#[test]
fn evolve_writes_three_shards() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "three", 2);
    let out = run_ok(&["evolve", "-c", cfg.to_str().unwrap()]);
    assert!(out.contains("rounds 2"), "{out}");
    let run = dir.path().join("runs/three");
    for shard in ["d_init", "d_verified", "d_final"] {
        let samples = read_shard(&run.join(format!("{shard}.jsonl"))).unwrap();
        assert!(!samples.is_empty(), "{shard} is empty");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rounds"], 2);
    assert_eq!(
        manifest["shards"]["d_final"]["digest"].as_str().unwrap(),
        line_value(&out, "final digest ")
    );
    assert!(run.join("config.resolved.toml").is_file());
}

#[test]
fn missing_seed_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "noseed", 1);
    std::fs::remove_file(dir.path().join("seeds/tools.toml")).unwrap();
    let o = vthinker(&["evolve", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tool seeds"));
}

#[test]
fn unknown_override_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "badkey", 1);
    let o = vthinker(&["evolve", "-c", cfg.to_str().unwrap(), "--set", "flywheel.roundz=2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = setup(dir.path(), "straight", 3);
    let b = setup(dir.path(), "resumed", 3);
    let straight = run_ok(&["evolve", "-c", a.to_str().unwrap()]);
    let halted = run_ok(&["evolve", "-c", b.to_str().unwrap(), "--halt-after-round", "1"]);
    assert!(halted.contains("halted after round 1"), "{halted}");
    assert!(!dir.path().join("runs/resumed/d_final.jsonl").exists());
    let resumed = run_ok(&["evolve", "-c", b.to_str().unwrap(), "--resume"]);
    assert_eq!(line_value(&straight, "final digest "), line_value(&resumed, "final digest "));
    let fly = |run: &str| -> serde_json::Value {
        let text = std::fs::read_to_string(dir.path().join(format!("runs/{run}/manifest.json"))).unwrap();
        serde_json::from_str::<serde_json::Value>(&text).unwrap()["flywheel_digest"].clone()
    };
    assert_eq!(fly("straight"), fly("resumed"));
}

#[test]
fn resume_with_a_different_seed_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "reseed", 2);
    run_ok(&["evolve", "-c", cfg.to_str().unwrap(), "--halt-after-round", "1"]);
    let o = vthinker(&["evolve", "-c", cfg.to_str().unwrap(), "--resume", "--seed", "99"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn perception_writes_n_items() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "percept", 1);
    let out = run_ok(&["perception", "-c", cfg.to_str().unwrap(), "--n", "10"]);
    assert!(out.starts_with("10 perception items"), "{out}");
    let samples = read_shard(&dir.path().join("runs/percept/perception.jsonl")).unwrap();
    assert_eq!(samples.len(), 10);
    assert!(samples.iter().all(|s| s.perception_level.is_some() && !s.tags.is_empty()));
}

#[test]
fn rollout_after_evolve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "rl", 1);
    run_ok(&["evolve", "-c", cfg.to_str().unwrap()]);
    let out = run_ok(&["rollout", "-c", cfg.to_str().unwrap()]);
    let groups: usize = line_value(&out, "groups ").split_whitespace().next().unwrap().parse().unwrap();
    assert_eq!(groups, 6);
    let mean: f64 = out.split("mean reward ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!((0.0..=1.8).contains(&mean), "{mean}");
    let (records, _) =
        read_records::<serde_json::Value, _>(&dir.path().join("runs/rl/rollouts.jsonl"), |_, _| Ok(())).unwrap();
    assert_eq!(records.len(), 6);
    for r in &records {
        assert_eq!(r["group"]["outputs"].as_array().unwrap().len(), 4);
    }
}

#[test]
fn rollout_without_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "noinput", 1);
    let o = vthinker(&["rollout", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_prints_track_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "eval", 1);
    let bench_dir = dir.path().join("bench");
    let fx = fixtures::bench_fixture(&bench_dir, |d| {
        Box::new(InProcessExecutor::new(ImageStore::open(d).unwrap())) as Box<dyn CodeExecutor>
    })
    .unwrap();
    let cand = bench_dir.join("candidates.jsonl");
    write_records(&fx.candidates, &cand).unwrap();
    let out = run_ok(&[
        "eval",
        "-c",
        cfg.to_str().unwrap(),
        "--benchmark",
        fx.path.to_str().unwrap(),
        "--candidates",
        cand.to_str().unwrap(),
    ]);
    let mut lines = out.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("Model"), "{out}");
    let row: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(row, ["candidate", "75.0", "50.0", "75.0"]);
    assert!(lines.next().unwrap().starts_with("overall 66.7"));
    assert!(dir.path().join("runs/eval/report.json").is_file());
}

#[test]
fn stats_agree_with_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "stats", 2);
    let out = run_ok(&["evolve", "-c", cfg.to_str().unwrap()]);
    let run = dir.path().join("runs/stats");
    let stats = run_ok(&["stats", run.to_str().unwrap()]);
    for shard in ["d_init", "d_verified", "d_final"] {
        let n = read_shard(&run.join(format!("{shard}.jsonl"))).unwrap().len();
        assert!(stats.contains(&format!("{shard}\t{n}")), "{shard} {n} missing from\n{stats}");
        assert!(out.contains(&format!("{shard} {n}")), "{out}");
    }
    let growth = std::fs::read_to_string(run.join("growth.tsv")).unwrap();
    assert!(stats.contains(growth.trim_end()));
}

#[test]
fn stats_on_a_missing_dir_fails() {
    let o = vthinker(&["stats", "/nonexistent/run"]);
    assert!(!o.status.success());
}
