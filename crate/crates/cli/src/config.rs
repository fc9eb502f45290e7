//! Declarative run configuration with `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vthinker_core::datamodel::{canonical_json, sha256_hex};
use vthinker_core::flywheel::FlywheelConfig;
use vthinker_core::rollout::GrpoParams;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Run directory name under `output`; defaults to a config-digest prefix.
    pub name: Option<String>,
    pub output: PathBuf,
    pub seed: u64,
    /// Global bound on in-flight generator, judge and executor calls.
    pub budget: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: None,
            output: PathBuf::from("runs"),
            seed: 0,
            budget: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub knowledge: PathBuf,
    pub tools: PathBuf,
}

/// `mock:<seed>` or `env` (endpoint, key and model from the environment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSection {
    pub endpoint: String,
    /// Mock only: novel counterpart elements predicted per call.
    pub novelty: usize,
    /// Mock only: overrides `novelty` with `ceil(rate * set size)`.
    pub novelty_rate: Option<f64>,
    /// Mock only: share of generated samples with a planted wrong answer.
    pub defect_rate: f64,
}

impl Default for EndpointSection {
    fn default() -> Self {
        Self {
            endpoint: "mock:0".into(),
            novelty: 1,
            novelty_rate: None,
            defect_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub max_iters: u32,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { max_iters: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionSection {
    pub fraction: f64,
    pub parallel_share: f64,
    /// Expansion passes over the dataset; each adds at most one level.
    pub depth: u8,
}

impl Default for ExpansionSection {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            parallel_share: 0.5,
            depth: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionSection {
    pub n: usize,
}

impl Default for PerceptionSection {
    fn default() -> Self {
        Self { n: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    /// Worker processes speaking the frame protocol.
    Pool,
    /// The reference interpreter inside this process.
    InProcess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorSection {
    pub kind: ExecutorKind,
    pub workers: usize,
    pub timeout_ms: u64,
    pub memory_mb: u64,
    /// Worker program; defaults to this binary's `stub-worker` subcommand.
    pub worker: Option<PathBuf>,
    pub worker_args: Vec<String>,
}

impl Default for ExecutorSection {
    fn default() -> Self {
        Self {
            kind: ExecutorKind::Pool,
            workers: 2,
            timeout_ms: 10_000,
            memory_mb: 512,
            worker: None,
            worker_args: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    /// `mock:<seed>` or `env`.
    pub policy: String,
    pub group_size: usize,
    pub max_steps: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub std_floor: f64,
    pub lambda_format: f64,
    pub lambda_tool: f64,
    /// Recorded for external trainers only.
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    /// Sample shard to roll out; defaults to the evolve run's final shard.
    pub input: Option<PathBuf>,
    /// Cap on samples rolled out; 0 means all.
    pub limit: usize,
}

impl Default for RlSection {
    fn default() -> Self {
        let g = GrpoParams::default();
        Self {
            policy: "mock:0".into(),
            group_size: 8,
            max_steps: 4,
            eps_low: g.eps_low,
            eps_high: g.eps_high,
            std_floor: g.std_floor,
            lambda_format: g.lambda_format,
            lambda_tool: g.lambda_tool,
            learning_rate: 5e-7,
            warmup_ratio: 0.05,
            input: None,
            limit: 0,
        }
    }
}

impl RlSection {
    pub fn grpo(&self) -> GrpoParams {
        GrpoParams {
            eps_low: self.eps_low,
            eps_high: self.eps_high,
            std_floor: self.std_floor,
            lambda_format: self.lambda_format,
            lambda_tool: self.lambda_tool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub benchmark: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    /// Row label in the report table.
    pub model: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            benchmark: None,
            candidates: None,
            model: "candidate".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub seeds: SeedsSection,
    #[serde(default)]
    pub generator: EndpointSection,
    #[serde(default)]
    pub judge: EndpointSection,
    #[serde(default)]
    pub flywheel: FlywheelConfig,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub expansion: ExpansionSection,
    #[serde(default)]
    pub perception: PerceptionSection,
    #[serde(default)]
    pub executor: ExecutorSection,
    #[serde(default)]
    pub rl: RlSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses an override value as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("--set expects key=value, got {assignment:?}")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("{key}: {part} is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads `path`, applies overrides in order, resolves relative paths
    /// against the config file's directory and validates.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
            .unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        Self::from_str_with(&text, &base, overrides, seed)
    }

    pub fn from_str_with(text: &str, base: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("config: {e}")))?;
        if let Some(s) = seed {
            cfg.run.seed = s;
        }
        cfg.flywheel.seed = cfg.run.seed;
        cfg.flywheel.budget = cfg.run.budget;
        absolutize(base, &mut cfg.run.output);
        absolutize(base, &mut cfg.seeds.knowledge);
        absolutize(base, &mut cfg.seeds.tools);
        for p in [&mut cfg.rl.input, &mut cfg.eval.benchmark, &mut cfg.eval.candidates, &mut cfg.executor.worker]
            .into_iter()
            .flatten()
        {
            absolutize(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (what, p) in [("knowledge seeds", &self.seeds.knowledge), ("tool seeds", &self.seeds.tools)] {
            if !p.is_file() {
                return Err(config_err(format!("{what} file {} does not exist", p.display())));
            }
        }
        for (what, p) in [
            ("rl.input", &self.rl.input),
            ("eval.benchmark", &self.eval.benchmark),
            ("eval.candidates", &self.eval.candidates),
            ("executor.worker", &self.executor.worker),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(config_err(format!("{what} {} does not exist", p.display())));
                }
            }
        }
        for (what, e) in [("generator", &self.generator.endpoint), ("judge", &self.judge.endpoint), ("rl.policy", &self.rl.policy)] {
            parse_endpoint(e).map_err(|m| config_err(format!("{what}: {m}")))?;
        }
        self.flywheel.validate().map_err(|e| config_err(e.to_string()))?;
        self.rl.grpo().validate().map_err(|m| config_err(format!("rl: {m}")))?;
        if self.run.budget == 0 {
            return Err(config_err("run.budget must be at least 1"));
        }
        if self.executor.workers == 0 {
            return Err(config_err("executor.workers must be at least 1"));
        }
        if self.calibration.max_iters == 0 {
            return Err(config_err("calibration.max_iters must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.expansion.fraction) || !(0.0..=1.0).contains(&self.expansion.parallel_share) {
            return Err(config_err("expansion fraction and parallel_share must lie in [0, 1]"));
        }
        if self.expansion.depth > vthinker_core::datamodel::MAX_DIFFICULTY_DEPTH {
            return Err(config_err(format!(
                "expansion.depth {} exceeds the cap of {}",
                self.expansion.depth,
                vthinker_core::datamodel::MAX_DIFFICULTY_DEPTH
            )));
        }
        if self.rl.group_size == 0 || self.rl.max_steps == 0 {
            return Err(config_err("rl.group_size and rl.max_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Digest of the canonical JSON form of the resolved config.
    pub fn digest(&self) -> String {
        sha256_hex(canonical_json(self).expect("config serializes"))
    }

    pub fn run_id(&self) -> String {
        self.run
            .name
            .clone()
            .unwrap_or_else(|| format!("run-{}", &self.digest()[..12]))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.output.join(self.run_id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Mock(u64),
    Env,
}

pub fn parse_endpoint(s: &str) -> Result<Endpoint, String> {
    if s == "env" {
        return Ok(Endpoint::Env);
    }
    match s.strip_prefix("mock:") {
        Some(n) => n
            .parse()
            .map(Endpoint::Mock)
            .map_err(|_| format!("bad mock seed in {s:?}")),
        None => Err(format!("endpoint must be `mock:<seed>` or `env`, got {s:?}")),
    }
}
