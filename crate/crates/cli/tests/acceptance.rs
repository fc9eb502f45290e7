//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p vthinker-cli --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vthinker_cli::{cmd_evolve, EvolveOptions, RunConfig};
use vthinker_core::calibration::{AuditAction, AuditLog, Calibrator};
use vthinker_core::datamodel::{read_shard, ExecStatus, ImageStore, Sample, SampleStatus, MAX_DIFFICULTY_DEPTH};
use vthinker_core::executor::{
    render_original, CodeExecutor, ExecutionRequest, InProcessExecutor, PoolConfig, WorkerLauncher, WorkerPool,
};
use vthinker_core::expansion::{expand_dataset, root_ancestor, ExpansionConfig};
use vthinker_core::fixtures::{self, BENCH_EXPECTED, BENCH_EXPECTED_OVERALL};
use vthinker_core::flywheel::{growth_report, run_evolution, Flywheel, FlywheelConfig, FlywheelState};
use vthinker_core::forest::{HashingEmbedder, KnowledgeForest, ToolSet};
use vthinker_core::gateway::{MockGenerator, Novelty};
use vthinker_core::perception::{make_questions, render_scene, sample_count, sample_scene, RelationKind};
use vthinker_core::rollout::{grpo_surrogate, reward_total, GrpoParams, RolloutGroup, RolloutOutput};
use vthinker_core::vtbench::{aggregate, evaluate, expert_vote_gate, load_benchmark, report_table, Track};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn worker_pool(store: ImageStore, workers: usize) -> WorkerPool {
    let launcher = WorkerLauncher::new(env!("CARGO_BIN_EXE_vthinker")).arg("stub-worker");
    let config = PoolConfig {
        workers,
        ..Default::default()
    };
    WorkerPool::spawn(launcher, config, store).expect("stub worker pool")
}

// Reward.

fn reward_table() -> Check {
    // (acc, format, tool) -> acc + 0.5 format + 0.3 [acc > 0] tool, by hand.
    let table = [
        (false, false, false, 0.0),
        (false, false, true, 0.0),
        (false, true, false, 0.5),
        (false, true, true, 0.5),
        (true, false, false, 1.0),
        (true, false, true, 1.3),
        (true, true, false, 1.5),
        (true, true, true, 1.8),
    ];
    let params = GrpoParams::default();
    for (a, f, t, want) in table {
        let got = reward_total(a, f, t, &params).total;
        ensure!(got == want, "({a}, {f}, {t}) gave {got}, expected {want}");
    }
    Ok("8/8 combinations exact".into())
}

// GRPO.

fn oracle(rewards: &[f64], lp: &[Vec<f64>], lr: &[Vec<f64>], el: f64, eh: f64) -> f64 {
    let g = rewards.len();
    let mut mean = 0.0;
    for r in rewards {
        mean += r;
    }
    mean /= g as f64;
    let mut var = 0.0;
    for r in rewards {
        var += (r - mean) * (r - mean);
    }
    let sd = (var / g as f64).sqrt();
    let denom = if sd > 1e-6 { sd } else { 1e-6 };
    let mut total = 0.0;
    let mut tokens = 0usize;
    for j in 0..g {
        let adv = (rewards[j] - mean) / denom;
        for t in 0..lp[j].len() {
            let ratio = (lp[j][t] - lr[j][t]).exp();
            let mut clipped = ratio;
            if clipped < 1.0 - el {
                clipped = 1.0 - el;
            }
            if clipped > 1.0 + eh {
                clipped = 1.0 + eh;
            }
            let a = ratio * adv;
            let b = clipped * adv;
            total += if a < b { a } else { b };
            tokens += 1;
        }
    }
    if tokens == 0 {
        0.0
    } else {
        total / tokens as f64
    }
}

fn output(reward: f64, lp: Vec<f64>, lr: Vec<f64>) -> RolloutOutput {
    let mut r = reward_total(false, false, false, &GrpoParams::default());
    r.total = reward;
    RolloutOutput {
        text: String::new(),
        logp_policy: lp,
        logp_ref: lr,
        reward: r,
    }
}

fn grpo_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6770);
    let totals = [0.0, 0.5, 1.0, 1.3, 1.5, 1.8];
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let g = rng.random_range(1..=4);
        let params = GrpoParams {
            eps_low: rng.random_range(0.05..0.4),
            eps_high: rng.random_range(0.05..0.4),
            ..Default::default()
        };
        let mut rewards = Vec::new();
        let (mut lps, mut lrs) = (Vec::new(), Vec::new());
        for _ in 0..g {
            let t = rng.random_range(1..=16);
            rewards.push(totals[rng.random_range(0..totals.len())]);
            let lr: Vec<f64> = (0..t).map(|_| rng.random_range(-4.0..-0.01)).collect();
            let lp: Vec<f64> = lr.iter().map(|v| v + rng.random_range(-0.6..0.6)).collect();
            lps.push(lp);
            lrs.push(lr);
        }
        let group = RolloutGroup {
            question: format!("case {case}"),
            outputs: (0..g).map(|j| output(rewards[j], lps[j].clone(), lrs[j].clone())).collect(),
        };
        let got = grpo_surrogate(&group, &params).map_err(|e| e.to_string())?;
        let want = oracle(&rewards, &lps, &lrs, params.eps_low, params.eps_high);
        let diff = (got - want).abs();
        worst = worst.max(diff);
        ensure!(diff <= 1e-9, "case {case}: surrogate {got} vs oracle {want}");
    }
    let params = GrpoParams::default();
    let flat = RolloutGroup {
        question: "flat".into(),
        outputs: (0..4).map(|_| output(1.0, vec![-0.7; 5], vec![-0.7; 5])).collect(),
    };
    let v = grpo_surrogate(&flat, &params).map_err(|e| e.to_string())?;
    ensure!(v == 0.0, "unit ratio with equal rewards gave {v}");
    let single = RolloutGroup {
        question: "single".into(),
        outputs: vec![output(1.8, vec![-0.2, -1.0, -3.0], vec![-0.9, -0.4, -2.0])],
    };
    let v = grpo_surrogate(&single, &params).map_err(|e| e.to_string())?;
    ensure!(v == 0.0, "single-output group gave {v}");
    Ok(format!("50 groups, max |diff| {worst:.1e}; degenerate cases exact"))
}

// Flywheel.

fn subset(a: &BTreeSet<String>, b: &BTreeSet<String>) -> bool {
    a.is_subset(b)
}

fn flywheel_run(dir: &Path, rounds: u32) -> Result<(FlywheelState, Vec<(BTreeSet<String>, BTreeSet<String>)>), String> {
    let ex = InProcessExecutor::new(ImageStore::open(dir).map_err(|e| e.to_string())?);
    let g = MockGenerator::new(11, Novelty::Fixed(1));
    let (k, t) = fixtures::seed_sets().map_err(|e| e.to_string())?;
    let cfg = FlywheelConfig {
        rounds,
        combos_per_side: 1,
        seed: 5,
        ..Default::default()
    };
    let embedder = HashingEmbedder::default();
    let fly = Flywheel::new(cfg, &g, &ex, &embedder);
    let mut state = FlywheelState::new(5, k, t);
    let ids = |s: &FlywheelState| -> (BTreeSet<String>, BTreeSet<String>) {
        (s.forest.ids().into_iter().collect(), s.tools.ids().into_iter().collect())
    };
    let mut snaps = vec![ids(&state)];
    for r in 1..=rounds {
        fly.run_until(&mut state, r).map_err(|e| e.to_string())?;
        snaps.push(ids(&state));
    }
    Ok((state, snaps))
}

fn flywheel_determinism() -> Check {
    const N: u32 = 3;
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, snaps) = flywheel_run(da.path(), N)?;
    let (b, _) = flywheel_run(db.path(), N)?;
    ensure!(!a.d_init.is_empty(), "no samples generated");
    ensure!(
        a.manifest_digest() == b.manifest_digest(),
        "digests differ: {} vs {}",
        a.manifest_digest(),
        b.manifest_digest()
    );
    for w in snaps.windows(2) {
        ensure!(subset(&w[0].0, &w[1].0), "K shrank between rounds");
        ensure!(subset(&w[0].1, &w[1].1), "T shrank between rounds");
    }
    let (k0, t0) = (&snaps[0].0, &snaps[0].1);
    let (kn, tn) = (&snaps[N as usize].0, &snaps[N as usize].1);
    ensure!(kn.len() - k0.len() == N as usize, "{} new concepts, expected {N}", kn.len() - k0.len());
    ensure!(tn.len() - t0.len() == N as usize, "{} new tools, expected {N}", tn.len() - t0.len());
    Ok(format!("digest {}, |D_init| {}, +{N} concepts, +{N} tools", &a.manifest_digest()[..12], a.d_init.len()))
}

fn cumulative(seed_k: usize, seed_t: usize, dir: &Path) -> Result<Vec<usize>, String> {
    let concepts = fixtures::seed_concepts();
    let tools = fixtures::seed_tools();
    let k = KnowledgeForest::from_seeds(&concepts[..seed_k]).map_err(|e| e.to_string())?;
    let t = ToolSet::from_seeds(&tools[..seed_t]).map_err(|e| e.to_string())?;
    let ex = InProcessExecutor::new(ImageStore::open(dir).map_err(|e| e.to_string())?);
    let g = MockGenerator::new(3, Novelty::Proportional { rate: 0.5 });
    let cfg = FlywheelConfig {
        rounds: 5,
        combos_per_side: 1,
        batch: 1,
        seed: 9,
        ..Default::default()
    };
    let state = run_evolution(cfg, &g, &ex, &HashingEmbedder::default(), k, t).map_err(|e| e.to_string())?;
    let mut acc = 0;
    Ok(growth_report(&state.history)
        .iter()
        .map(|r| {
            acc += r.delta_k + r.delta_t;
            acc
        })
        .collect())
}

fn seed_diversity() -> Check {
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let small = cumulative(2, 1, da.path())?;
    let large = cumulative(4, 2, db.path())?;
    ensure!(small.len() == 5 && large.len() == 5, "expected 5 rounds");
    for (r, (s, l)) in small.iter().zip(&large).enumerate() {
        ensure!(l >= s, "round {}: large seed {l} < small seed {s}", r + 1);
    }
    Ok(format!("small {small:?} <= large {large:?}"))
}

// Calibration.

fn calibration_routing() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let store = ImageStore::open(dir.path()).unwrap();
    let ex = InProcessExecutor::new(store.clone());
    let corpus = fixtures::defect_corpus(&ex).map_err(|e| e.to_string())?;
    let by_id: BTreeMap<&str, &Sample> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
    let mock = MockGenerator::new(1, Novelty::Fixed(0));
    let log = AuditLog::in_memory();
    let out = Calibrator::new(&mock, &mock, &store).with_max_iters(3).calibrate(corpus.clone(), &log);
    ensure!(
        out.verified.len() == 17 && out.rejected.len() == 3,
        "routed {} verified / {} rejected",
        out.verified.len(),
        out.rejected.len()
    );
    let mut repaired = 0;
    for s in &out.verified {
        let Some(src) = s.provenance.repaired_from.as_deref() else {
            continue;
        };
        repaired += 1;
        let orig = by_id.get(src).ok_or_else(|| format!("repair source {src} not in corpus"))?;
        ensure!(s.original_image == orig.original_image, "repair of {src} changed the original image");
        let a: Vec<_> = s.trajectory.steps.iter().map(|st| st.output_image.clone()).collect();
        let b: Vec<_> = orig.trajectory.steps.iter().map(|st| st.output_image.clone()).collect();
        ensure!(a == b, "repair of {src} changed step images");
    }
    ensure!(repaired == 5, "{repaired} repaired samples, expected 5");
    let mut checks: BTreeMap<String, u32> = BTreeMap::new();
    for e in log.entries() {
        ensure!(e.iteration <= 3, "iteration {} on {}", e.iteration, e.origin_id);
        if e.action != AuditAction::RepairFailed {
            *checks.entry(e.origin_id.clone()).or_default() += 1;
        }
    }
    let max = checks.values().copied().max().unwrap_or(0);
    ensure!(max <= 3, "an item was checked {max} times");
    Ok(format!("17 verified / 3 rejected, {repaired} repairs keep images, max {max} checks"))
}

// Expansion.

fn expansion_lineage() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let store = ImageStore::open(dir.path()).unwrap();
    let ex = InProcessExecutor::new(store.clone());
    let mock = MockGenerator::new(2, Novelty::Fixed(0));
    let audit = AuditLog::in_memory();
    let calibrator = Calibrator::new(&mock, &mock, &store);
    let corpus = fixtures::defect_corpus(&ex).map_err(|e| e.to_string())?;
    let mut dataset = calibrator.calibrate(corpus, &audit).verified;
    for pass in 0..5 {
        let cfg = ExpansionConfig {
            fraction: 1.0,
            seed: pass,
            ..Default::default()
        };
        dataset = expand_dataset(&dataset, &cfg, &mock, &calibrator, &ex, &audit).dataset;
    }
    let max = dataset.iter().map(|s| s.difficulty_depth).max().unwrap_or(0);
    ensure!(max == MAX_DIFFICULTY_DEPTH, "max depth {max}, expected {MAX_DIFFICULTY_DEPTH}");
    let mut expanded = 0;
    for s in dataset.iter().filter(|s| s.difficulty_depth > 0) {
        expanded += 1;
        let root = root_ancestor(s, &dataset).ok_or_else(|| format!("{} has a broken parent chain", s.id))?;
        ensure!(
            root.difficulty_depth == 0 && root.status == SampleStatus::Verified,
            "{} roots at depth {} with status {:?}",
            s.id,
            root.difficulty_depth,
            root.status
        );
    }
    Ok(format!("{} samples, {expanded} expanded, max depth {max}", dataset.len()))
}

// Perception.

fn perception_stats() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws: Vec<f64> = (0..10_000).map(|_| sample_count(&mut rng) as f64).collect();
    ensure!(draws.iter().all(|v| (2.0..=20.0).contains(v)), "draw outside [2, 20]");
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
    ensure!((7.9..=8.1).contains(&mean), "mean {mean:.3}");
    ensure!((1.85..=2.15).contains(&std), "std {std:.3}");
    Ok(format!("mean {mean:.3}, std {std:.3}"))
}

fn seg_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn perception_truth() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let store = ImageStore::open(dir.path()).unwrap();
    let pool = worker_pool(store, 2);
    let (mut surface, mut relations) = (0, 0);
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let spec = sample_scene(None, &mut rng);
        let rendered = render_scene(&spec, &pool).map_err(|e| format!("scene {i}: {e}"))?;
        for item in make_questions(&spec, &rendered.tags, &mut rng) {
            let Some(label) = item.question.strip_prefix("What are the pixel coordinates of point ") else {
                continue;
            };
            let label = label.split('?').next().unwrap_or_default();
            let el = spec.element(label).ok_or_else(|| format!("scene {i}: no point {label}"))?;
            let want = format!("({}, {})", el.params[0], el.params[1]);
            ensure!(item.answer == want, "scene {i}: {label} answered {} but tagged {want}", item.answer);
            surface += 1;
        }
        for rel in &spec.relations {
            let s = spec.element(&rel.subject).ok_or("missing subject")?;
            let o = spec.element(&rel.object).ok_or("missing object")?;
            let p = (f64::from(s.params[0]), f64::from(s.params[1]));
            let q: Vec<f64> = o.params.iter().map(|v| f64::from(*v)).collect();
            let ok = match rel.kind {
                RelationKind::PointOnLine => seg_distance(p, (q[0], q[1]), (q[2], q[3])) <= 0.5,
                RelationKind::PointOutsideCircle => (p.0 - q[0]).hypot(p.1 - q[1]) >= q[2] + 0.5,
                RelationKind::PointInsideCircle => (p.0 - q[0]).hypot(p.1 - q[1]) <= q[2] - 0.5,
            };
            ensure!(ok, "scene {i}: {:?} {} / {} violated", rel.kind, rel.subject, rel.object);
            relations += 1;
        }
    }
    ensure!(surface == 100, "{surface} surface questions for 100 scenes");
    Ok(format!("100 scenes, {surface} surface answers, {relations} relations"))
}

// Benchmark.

fn vote_gate() -> Check {
    for mask in 0u32..32 {
        let votes: Vec<bool> = (0..5).map(|b| mask & (1 << b) != 0).collect();
        let want = mask.count_ones() >= 3;
        let got = expert_vote_gate(&votes).map_err(|e| e.to_string())?;
        ensure!(got == want, "votes {votes:?}: gate {got}, expected {want}");
    }
    Ok("32/32 rows".into())
}

fn harness_fixture() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures::bench_fixture(dir.path(), |d| {
        Box::new(InProcessExecutor::new(ImageStore::open(d).expect("store"))) as Box<dyn CodeExecutor>
    })
    .map_err(|e| e.to_string())?;
    let bench = load_benchmark(&fx.path).map_err(|e| e.to_string())?;
    ensure!(bench.items.len() == 12, "{} items", bench.items.len());
    let pool = worker_pool(bench.store.clone(), 2);
    let judge = MockGenerator::new(0, Novelty::Fixed(0));
    let verdicts = evaluate(&bench, &fx.candidates, &pool, &judge, 4).map_err(|e| e.to_string())?;
    let report = aggregate(verdicts, "mock:0", "fixture").map_err(|e| e.to_string())?;
    // Hand counts: 3/4, 2/4, 3/4; 8/12 overall.
    for (track, want) in BENCH_EXPECTED {
        let got = report.tracks.get(&track).and_then(|s| s.accuracy);
        ensure!(got == Some(want), "{} accuracy {got:?}, expected {want}", track.as_str());
    }
    ensure!(report.overall == Some(BENCH_EXPECTED_OVERALL), "overall {:?}", report.overall);
    let table = report_table(&report, "fixture");
    let mut lines = table.lines();
    let header = lines.next().unwrap_or_default();
    let row = lines.next().unwrap_or_default();
    let cols: Vec<&str> = header.split_whitespace().collect();
    ensure!(cols.first() == Some(&"Model"), "header {header:?}");
    let mut at = 0;
    for t in Track::ALL {
        let pos = header[at..].find(t.heading()).ok_or_else(|| format!("header lacks {}", t.heading()))?;
        at += pos + t.heading().len();
    }
    let cells: Vec<&str> = row.split_whitespace().collect();
    ensure!(cells == ["fixture", "75.0", "50.0", "75.0"], "row {row:?}");
    Ok("75.0 / 50.0 / 75.0, overall 66.7, three track columns".into())
}

// End to end.

fn offline_e2e() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let (kp, tp) = fixtures::write_seed_files(&dir.path().join("seeds")).map_err(|e| e.to_string())?;
    let text = format!(
        r#"
[run]
name = "e2e"
output = "runs"
seed = 21
budget = 4

[seeds]
knowledge = {kp:?}
tools = {tp:?}

[generator]
endpoint = "mock:21"
defect_rate = 0.2

[flywheel]
rounds = 2
combos_per_side = 2

[expansion]
depth = 1

[executor]
kind = "pool"
workers = 2
worker = {worker:?}
worker_args = ["stub-worker"]
"#,
        worker = env!("CARGO_BIN_EXE_vthinker"),
    );
    let cfg = RunConfig::from_str_with(&text, dir.path(), &[], None).map_err(|e| e.to_string())?;
    let summary = cmd_evolve(&cfg, &EvolveOptions::default()).map_err(|e| format!("exit {}: {e}", e.exit_code()))?;
    let verified = read_shard(&summary.run_dir.join("d_verified.jsonl")).map_err(|e| e.to_string())?;
    ensure!(verified.len() >= 8, "{} verified samples", verified.len());
    let store = ImageStore::open(&summary.run_dir).map_err(|e| e.to_string())?;
    let pool = worker_pool(store, 2);
    let mut segments = 0;
    for s in &verified {
        let original = render_original(&pool, &s.original_code).map_err(|e| format!("{}: {e}", s.id))?;
        ensure!(Some(&original) == s.original_image.as_ref(), "{}: original rerenders differently", s.id);
        segments += 1;
        let mut current = original;
        for step in &s.trajectory.steps {
            let Some(code) = &step.code else { continue };
            let stored = step.execution.as_ref().map(|e| e.status);
            ensure!(stored == Some(ExecStatus::Ok), "{} step {}: recorded {stored:?}", s.id, step.index);
            let result = pool
                .execute(ExecutionRequest::new(code.clone()).with_input("current", current.clone()))
                .map_err(|e| e.to_string())?;
            ensure!(result.is_ok(), "{} step {}: {:?} {}", s.id, step.index, result.status, result.trace);
            segments += 1;
            if let Some(img) = &step.output_image {
                current = img.clone();
            }
        }
    }
    Ok(format!("exit 0, {} verified, {segments} segments executed ok", verified.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check, u64); 11] = [
        ("reward table exactness", reward_table, 1),
        ("GRPO oracle equivalence", grpo_oracle, 5),
        ("flywheel determinism and monotonicity", flywheel_determinism, 30),
        ("seed diversity growth", seed_diversity, 30),
        ("calibration routing", calibration_routing, 10),
        ("expansion cap and lineage", expansion_lineage, 30),
        ("perception sampler statistics", perception_stats, 5),
        ("perception ground truth", perception_truth, 120),
        ("vote gate truth table", vote_gate, 1),
        ("harness arithmetic", harness_fixture, 60),
        ("offline end to end", offline_e2e, 300),
    ];
    let mut failed = 0;
    for (name, f, limit) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > Duration::from_secs(limit) => Err(format!("{d} but took {took:.1?} (limit {limit} s)")),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS  {name}  [{took:.2?}]  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}  [{took:.2?}]  {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
