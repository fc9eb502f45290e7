//! Subcommand implementations. Each returns data for tests and prints
//! nothing; `main` owns the console.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::Serialize;
use vthinker_core::calibration::{AuditLog, Calibrator};
use vthinker_core::datamodel::{read_records, read_shard, write_shard, ImageStore, Sample, ShardManifest};
use vthinker_core::executor::{
    CodeExecutor, ExecError, ExecutionRequest, ExecutionResult, InProcessExecutor, PoolConfig, WorkerLauncher,
    WorkerPool,
};
use vthinker_core::expansion::{expand_dataset, ExpansionConfig};
use vthinker_core::flywheel::{self, growth_report, growth_table, Flywheel, FlywheelState, GrowthRow};
use vthinker_core::forest::{load_concept_seeds, load_tool_seeds, read_snapshot, write_snapshot, HashingEmbedder, Snapshot};
use vthinker_core::gateway::{
    ChatClient, Decoding, EndpointConfig, Generator, HttpChatClient, MockGenerator, ModelGenerator, Novelty, RetryPolicy,
    TokenBucket, TranscriptLog,
};
use vthinker_core::perception::{synth_perception, PerceptionConfig};
use vthinker_core::rollout::{
    build_group, export_groups, sample_group, targeted_filter, ChatPolicy, FilterConfig, GroupRecord, HashScorer,
    PolicyClient, PolicyRole,
};
use vthinker_core::util::derive_seed;
use vthinker_core::vtbench::{
    aggregate, evaluate, load_benchmark, report_table, write_verdicts, Candidate, EvalReport,
};

use crate::config::{parse_endpoint, Endpoint, EndpointSection, ExecutorKind, RunConfig};
use crate::mock_policy::mock_policy;
use crate::CliError;

pub const CHECKPOINT: &str = "checkpoint.json";
pub const MANIFEST: &str = "manifest.json";
pub const SNAPSHOT: &str = "forest.snapshot.jsonl";
pub const GROWTH: &str = "growth.tsv";

fn http_client(budget: usize) -> Result<Arc<dyn ChatClient>, CliError> {
    let endpoint = EndpointConfig::from_env().map_err(|e| CliError::Config(e.to_string()))?;
    let bucket = Arc::new(TokenBucket::new(budget as u32, budget as f64));
    Ok(Arc::new(HttpChatClient::new(endpoint, RetryPolicy::default(), bucket)))
}

pub fn build_generator(section: &EndpointSection, budget: usize) -> Result<Box<dyn Generator>, CliError> {
    match parse_endpoint(&section.endpoint).map_err(CliError::Config)? {
        Endpoint::Mock(seed) => {
            let novelty = match section.novelty_rate {
                Some(rate) => Novelty::Proportional { rate },
                None => Novelty::Fixed(section.novelty),
            };
            Ok(Box::new(MockGenerator::new(seed, novelty).with_defect_rate(section.defect_rate)))
        }
        Endpoint::Env => Ok(Box::new(ModelGenerator::new(http_client(budget)?))),
    }
}

/// Applies the configured limits to every request.
struct Limited {
    inner: Box<dyn CodeExecutor>,
    timeout_ms: u64,
    memory_mb: u64,
}

impl CodeExecutor for Limited {
    fn execute(&self, request: ExecutionRequest) -> Result<ExecutionResult, ExecError> {
        self.inner
            .execute(request.with_timeout_ms(self.timeout_ms).with_memory_mb(self.memory_mb))
    }

    fn store(&self) -> &ImageStore {
        self.inner.store()
    }
}

pub fn build_executor(cfg: &RunConfig, store: ImageStore) -> Result<Box<dyn CodeExecutor>, CliError> {
    let e = &cfg.executor;
    let inner: Box<dyn CodeExecutor> = match e.kind {
        ExecutorKind::InProcess => Box::new(InProcessExecutor::new(store)),
        ExecutorKind::Pool => {
            let (program, default_args) = match &e.worker {
                Some(p) => (p.clone(), Vec::new()),
                None => (
                    std::env::current_exe().map_err(CliError::stage("executor"))?,
                    vec!["stub-worker".to_string()],
                ),
            };
            let args = if e.worker_args.is_empty() { default_args } else { e.worker_args.clone() };
            let launcher = args.into_iter().fold(WorkerLauncher::new(program), WorkerLauncher::arg);
            let config = PoolConfig {
                workers: e.workers,
                ..Default::default()
            };
            Box::new(WorkerPool::spawn(launcher, config, store).map_err(CliError::stage("executor"))?)
        }
    };
    Ok(Box::new(Limited {
        inner,
        timeout_ms: e.timeout_ms,
        memory_mb: e.memory_mb,
    }))
}

/// Creates the run directory and echoes the resolved config into it.
pub fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(dir.join("transcripts")).map_err(CliError::stage("run-dir"))?;
    std::fs::write(dir.join("config.resolved.toml"), cfg.to_toml()).map_err(CliError::stage("run-dir"))?;
    std::fs::write(dir.join("config.digest"), format!("{}\n", cfg.digest())).map_err(CliError::stage("run-dir"))?;
    Ok(dir)
}

#[derive(Debug, Clone, Default)]
pub struct EvolveOptions {
    pub resume: bool,
    /// Stop after this many completed rounds, leaving a checkpoint.
    pub halt_after_round: Option<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvolveSummary {
    pub run_dir: PathBuf,
    pub halted: bool,
    pub rounds: u32,
    pub d_init: usize,
    pub d_verified: usize,
    pub d_final: usize,
    pub rejected: usize,
    /// Digest of the final shard.
    pub final_digest: String,
    pub growth: Vec<GrowthRow>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    run_id: String,
    config_digest: String,
    flywheel_digest: String,
    rounds: u32,
    shards: std::collections::BTreeMap<&'a str, ShardManifest>,
}

/// Flywheel, then calibration, then expansion.
pub fn cmd_evolve(cfg: &RunConfig, opts: &EvolveOptions) -> Result<EvolveSummary, CliError> {
    let dir = prepare_run_dir(cfg)?;
    let forest = load_concept_seeds(&cfg.seeds.knowledge).map_err(|e| CliError::Config(e.to_string()))?;
    let tools = load_tool_seeds(&cfg.seeds.tools).map_err(|e| CliError::Config(e.to_string()))?;
    let generator = build_generator(&cfg.generator, cfg.run.budget)?;
    let store = ImageStore::open(&dir).map_err(CliError::stage("run-dir"))?;
    let executor = build_executor(cfg, store.clone())?;
    let embedder = HashingEmbedder::default();
    let transcripts = TranscriptLog::open(&dir.join("transcripts/flywheel.jsonl")).map_err(CliError::stage("run-dir"))?;

    let ckpt = dir.join(CHECKPOINT);
    let mut state = if opts.resume && ckpt.is_file() {
        let state = flywheel::resume(&ckpt).map_err(CliError::stage("resume"))?;
        if state.seed != cfg.run.seed {
            return Err(CliError::Config(format!(
                "checkpoint was written with seed {} but the config says {}",
                state.seed, cfg.run.seed
            )));
        }
        info!("resuming at round {}", state.round);
        state
    } else {
        FlywheelState::new(cfg.run.seed, forest, tools)
    };
    let fly = Flywheel::new(cfg.flywheel.clone(), generator.as_ref(), executor.as_ref(), &embedder)
        .with_transcripts(&transcripts)
        .with_checkpoint(&ckpt);
    let stop = opts.halt_after_round.map_or(cfg.flywheel.rounds, |h| h.min(cfg.flywheel.rounds));
    fly.run_until(&mut state, stop).map_err(CliError::stage("flywheel"))?;
    flywheel::checkpoint(&state, &ckpt).map_err(CliError::stage("flywheel"))?;
    let growth = growth_report(&state.history);
    if opts.halt_after_round.is_some_and(|h| h < cfg.flywheel.rounds) {
        return Ok(EvolveSummary {
            run_dir: dir,
            halted: true,
            rounds: state.round,
            d_init: state.d_init.len(),
            d_verified: 0,
            d_final: 0,
            rejected: 0,
            final_digest: String::new(),
            growth,
        });
    }

    let mut shards = std::collections::BTreeMap::new();
    let write = |name: &str, samples: &[Sample]| write_shard(samples, &dir.join(format!("{name}.jsonl")));
    shards.insert("d_init", write("d_init", &state.d_init).map_err(CliError::stage("flywheel"))?);

    let audit = AuditLog::to_file(&dir.join("audit.jsonl")).map_err(CliError::stage("calibration"))?;
    let calibrator =
        Calibrator::new(generator.as_ref(), generator.as_ref(), &store).with_max_iters(cfg.calibration.max_iters);
    let calibrated = calibrator.calibrate(state.d_init.clone(), &audit);
    let verified = calibrated.verified;
    shards.insert("d_verified", write("d_verified", &verified).map_err(CliError::stage("calibration"))?);

    let mut dataset = verified.clone();
    for pass in 0..cfg.expansion.depth {
        let config = ExpansionConfig {
            fraction: cfg.expansion.fraction,
            parallel_share: cfg.expansion.parallel_share,
            seed: derive_seed(cfg.run.seed, &["expansion", &pass.to_string()]),
            budget: cfg.run.budget,
        };
        let out = expand_dataset(&dataset, &config, generator.as_ref(), &calibrator, executor.as_ref(), &audit);
        info!("expansion pass {pass}: {} children, {} failures", out.children, out.failures.len());
        dataset = out.dataset;
    }
    let final_manifest = write("d_final", &dataset).map_err(CliError::stage("expansion"))?;
    let final_digest = final_manifest.digest.clone();
    shards.insert("d_final", final_manifest);

    write_snapshot(
        &dir.join(SNAPSHOT),
        &Snapshot {
            round: state.round,
            forest: state.forest.clone(),
            tools: state.tools.clone(),
        },
    )
    .map_err(CliError::stage("report"))?;
    std::fs::write(dir.join(GROWTH), growth_table(&growth)).map_err(CliError::stage("report"))?;
    let manifest = RunManifest {
        run_id: cfg.run_id(),
        config_digest: cfg.digest(),
        flywheel_digest: state.manifest_digest(),
        rounds: state.round,
        shards,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(CliError::stage("report"))?;
    std::fs::write(dir.join(MANIFEST), json).map_err(CliError::stage("report"))?;
    Ok(EvolveSummary {
        run_dir: dir,
        halted: false,
        rounds: state.round,
        d_init: state.d_init.len(),
        d_verified: verified.len(),
        d_final: dataset.len(),
        rejected: calibrated.rejected.len(),
        final_digest,
        growth,
    })
}

pub fn cmd_perception(cfg: &RunConfig) -> Result<(PathBuf, usize), CliError> {
    let dir = prepare_run_dir(cfg)?;
    let forest = load_concept_seeds(&cfg.seeds.knowledge).map_err(|e| CliError::Config(e.to_string()))?;
    let store = ImageStore::open(&dir).map_err(CliError::stage("run-dir"))?;
    let executor = build_executor(cfg, store)?;
    let config = PerceptionConfig {
        seed: cfg.run.seed,
        budget: cfg.run.budget,
    };
    let out = synth_perception(cfg.perception.n, Some(&forest), &config, executor.as_ref())
        .map_err(CliError::stage("perception"))?;
    for f in &out.failures {
        warn!("scene failed: {f}");
    }
    let path = dir.join("perception.jsonl");
    write_shard(&out.samples, &path).map_err(CliError::stage("perception"))?;
    Ok((path, out.samples.len()))
}

/// Copies every image a sample references from `from` into `to`.
fn import_images(samples: &[Sample], from: &ImageStore, to: &ImageStore) -> Result<(), CliError> {
    if from.root() == to.root() {
        return Ok(());
    }
    for s in samples {
        for image in s.image_refs() {
            if !to.contains(&image.digest) {
                let bytes = from.get(image).map_err(CliError::stage("rollout"))?;
                to.put(&bytes).map_err(CliError::stage("rollout"))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutSummary {
    pub run_dir: PathBuf,
    pub groups: usize,
    pub mean_reward: f64,
    pub mean_surrogate: f64,
    pub targeted: usize,
}

fn build_policy(cfg: &RunConfig, samples: &[Sample], store: &ImageStore) -> Result<Box<dyn PolicyClient>, CliError> {
    match parse_endpoint(&cfg.rl.policy).map_err(CliError::Config)? {
        Endpoint::Mock(seed) => Ok(Box::new(mock_policy(samples, seed, store).map_err(CliError::stage("rollout"))?)),
        Endpoint::Env => Ok(Box::new(ChatPolicy::new(
            http_client(cfg.run.budget)?,
            Decoding {
                temperature: 1.0,
                max_tokens: 1024,
            },
            PolicyRole::Policy,
        ))),
    }
}

/// Rolls out groups for every sample, scores them and applies the targeted
/// filter.
pub fn cmd_rollout(cfg: &RunConfig) -> Result<RolloutSummary, CliError> {
    let input = cfg.rl.input.clone().unwrap_or_else(|| cfg.run_dir().join("d_final.jsonl"));
    if !input.is_file() {
        return Err(CliError::Config(format!("rollout input {} does not exist", input.display())));
    }
    let mut samples = read_shard(&input).map_err(CliError::stage("rollout"))?;
    if cfg.rl.limit > 0 {
        samples.truncate(cfg.rl.limit);
    }
    let dir = prepare_run_dir(cfg)?;
    let from = ImageStore::open(input.parent().unwrap_or(Path::new("."))).map_err(CliError::stage("rollout"))?;
    let store = ImageStore::open(&dir).map_err(CliError::stage("run-dir"))?;
    import_images(&samples, &from, &store)?;
    let executor = build_executor(cfg, store.clone())?;
    let policy = build_policy(cfg, &samples, &store)?;
    let params = cfg.rl.grpo();
    let (pscore, rscore) = (HashScorer { salt: 1 }, HashScorer { salt: 2 });

    let mut records = Vec::new();
    for s in &samples {
        let Some(image) = s.original_image.as_ref() else {
            continue;
        };
        let seed = derive_seed(cfg.run.seed, &["group", &s.id]);
        let results = sample_group(
            policy.as_ref(),
            &s.question,
            image,
            executor.as_ref(),
            cfg.rl.group_size,
            cfg.rl.max_steps,
            seed,
            cfg.run.budget,
        );
        let rollouts: Vec<_> = results
            .into_iter()
            .filter_map(|r| r.map_err(|e| warn!("rollout for {} failed: {e}", s.id)).ok())
            .collect();
        if rollouts.is_empty() {
            continue;
        }
        let group = build_group(&s.question, &s.answer, &rollouts, &params, &pscore, &rscore);
        let trajectories = rollouts.into_iter().map(|r| r.trajectory).collect();
        records.push(GroupRecord::new(&s.id, &s.answer, group, trajectories, &params).map_err(CliError::stage("rollout"))?);
    }
    export_groups(&records, &dir.join("rollouts.jsonl")).map_err(CliError::stage("rollout"))?;

    let filter = FilterConfig {
        max_steps: cfg.rl.max_steps,
        seed: cfg.run.seed,
        budget: cfg.run.budget,
    };
    let targeted = targeted_filter(&samples, policy.as_ref(), executor.as_ref(), &filter);
    write_shard(&targeted.kept, &dir.join("d_rl.jsonl")).map_err(CliError::stage("rollout"))?;

    let rewards: Vec<f64> = records.iter().flat_map(|r| r.group.rewards()).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let surrogates: Vec<f64> = records.iter().map(|r| r.surrogate).collect();
    Ok(RolloutSummary {
        run_dir: dir,
        groups: records.len(),
        mean_reward: mean(&rewards),
        mean_surrogate: mean(&surrogates),
        targeted: targeted.kept.len(),
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(EvalReport, String), CliError> {
    let (Some(bench_path), Some(cand_path)) = (&cfg.eval.benchmark, &cfg.eval.candidates) else {
        return Err(CliError::Config("eval needs eval.benchmark and eval.candidates".into()));
    };
    let bench = load_benchmark(bench_path).map_err(|e| CliError::Config(e.to_string()))?;
    let (candidates, _) =
        read_records::<Candidate, _>(cand_path, |_, _| Ok(())).map_err(|e| CliError::Config(e.to_string()))?;
    let dir = prepare_run_dir(cfg)?;
    let judge = build_generator(&cfg.judge, cfg.run.budget)?;
    let executor = build_executor(cfg, bench.store.clone())?;
    let verdicts = evaluate(&bench, &candidates, executor.as_ref(), judge.as_ref(), cfg.run.budget)
        .map_err(CliError::stage("eval"))?;
    write_verdicts(&verdicts, &dir.join("verdicts.jsonl")).map_err(CliError::stage("eval"))?;
    let report = aggregate(verdicts, judge.id(), &cfg.digest()).map_err(CliError::stage("eval"))?;
    let table = report_table(&report, &cfg.eval.model);
    std::fs::write(dir.join("report.txt"), &table).map_err(CliError::stage("eval"))?;
    let json = serde_json::to_string_pretty(&report).map_err(CliError::stage("eval"))?;
    std::fs::write(dir.join("report.json"), json).map_err(CliError::stage("eval"))?;
    Ok((report, table))
}

/// Forest statistics and per-round growth for an evolve run directory.
pub fn cmd_stats(run_dir: &Path) -> Result<String, CliError> {
    let snap_path = run_dir.join(SNAPSHOT);
    let ckpt_path = run_dir.join(CHECKPOINT);
    let (forest, tools, history) = if snap_path.is_file() {
        let snap = read_snapshot(&snap_path).map_err(CliError::stage("stats"))?;
        let history = if ckpt_path.is_file() {
            flywheel::resume(&ckpt_path).map_err(CliError::stage("stats"))?.history
        } else {
            Vec::new()
        };
        (snap.forest, snap.tools, history)
    } else if ckpt_path.is_file() {
        let state = flywheel::resume(&ckpt_path).map_err(CliError::stage("stats"))?;
        (state.forest, state.tools, state.history)
    } else {
        return Err(CliError::Config(format!("{} holds no evolve run", run_dir.display())));
    };
    let stats = forest.stats();
    let mut out = String::new();
    out.push_str(&format!(
        "concepts {}  max depth {}  domains {}  tools {}\n",
        stats.node_count,
        stats.max_depth,
        stats.domain_count,
        tools.len()
    ));
    out.push_str(&growth_table(&growth_report(&history)));
    let manifest = run_dir.join(MANIFEST);
    if let Ok(text) = std::fs::read_to_string(&manifest) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            if let Some(shards) = v.get("shards").and_then(|s| s.as_object()) {
                for (name, m) in shards {
                    out.push_str(&format!("{name}\t{}\n", m.get("records").and_then(|r| r.as_u64()).unwrap_or(0)));
                }
            }
        }
    }
    Ok(out)
}
