//! The constructive co-evolution loop.
//!
//! Each round draws combos from the knowledge forest K and the tool set T
//! (both frozen at round start), asks the generator for samples plus
//! predicted counterparts, renders every candidate, and accumulates the
//! survivors into `D_init`. Only then are the expansions applied: ΔK from
//! the concepts predicted on the tool side, then ΔT from the tools predicted
//! on the knowledge side.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{canonical_json, canonicalize, sha256_hex, Sample, SampleBody};
use crate::executor::CodeExecutor;
use crate::forest::{
    ConceptProposal, Embedder, ExpandParams, ForestError, KnowledgeForest, ToolProposal, ToolSet,
    DEFAULT_ATTACH_THRESHOLD, DEFAULT_THRESHOLD,
};
use crate::gateway::{
    ElementContext, GatewayError, GenBatch, GenMode, GenPayload, GenRequest, Generator,
    TranscriptLog, DEFAULT_BATCH,
};
use crate::render::render_candidate;
use crate::util::{derive_seed, fan_out, DEFAULT_BUDGET};

pub const MAX_ROUNDS: u32 = 16;
/// Attempts per generation call when the output does not parse.
pub const PARSE_ATTEMPTS: u32 = 3;
const CHECKPOINT_KIND: &str = "vthinker-flywheel/1";

#[derive(Debug, thiserror::Error)]
pub enum FlywheelError {
    #[error("invalid flywheel config: {0}")]
    Config(String),
    #[error("round {round}: generator failed: {source}")]
    Generator {
        round: u32,
        #[source]
        source: GatewayError,
    },
    #[error("round {round}: {source}")]
    Forest {
        round: u32,
        #[source]
        source: ForestError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlywheelConfig {
    pub rounds: u32,
    /// Generation calls per side per round.
    pub combos_per_side: usize,
    /// Fixed combo arity; `None` draws 1..=3 per combo.
    pub arity: Option<usize>,
    pub threshold: f32,
    pub attach_threshold: f32,
    /// Samples requested per generation call.
    pub batch: usize,
    pub seed: u64,
    /// In-flight generator and render calls.
    pub budget: usize,
}

impl Default for FlywheelConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            combos_per_side: 1,
            arity: None,
            threshold: DEFAULT_THRESHOLD,
            attach_threshold: DEFAULT_ATTACH_THRESHOLD,
            batch: DEFAULT_BATCH,
            seed: 0,
            budget: DEFAULT_BUDGET,
        }
    }
}

impl FlywheelConfig {
    pub fn validate(&self) -> Result<(), FlywheelError> {
        let bad = |m: &str| Err(FlywheelError::Config(m.into()));
        if self.rounds > MAX_ROUNDS {
            return bad(&format!("rounds {} exceeds the cap of {MAX_ROUNDS}", self.rounds));
        }
        if self.arity == Some(0) {
            return bad("arity must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        Ok(())
    }
}

/// Per-round accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub delta_k: usize,
    pub delta_t: usize,
    pub accepted: usize,
    pub dropped: Vec<String>,
    pub k_size: usize,
    pub t_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlywheelState {
    /// Next round to run; equals the number of completed rounds.
    pub round: u32,
    pub seed: u64,
    pub forest: KnowledgeForest,
    pub tools: ToolSet,
    pub d_init: Vec<Sample>,
    pub history: Vec<RoundReport>,
}

impl FlywheelState {
    pub fn new(seed: u64, forest: KnowledgeForest, tools: ToolSet) -> Self {
        Self {
            round: 0,
            seed,
            forest,
            tools,
            d_init: Vec::new(),
            history: Vec::new(),
        }
    }

    /// Digest of `D_init` as a shard: SHA-256 over one canonical record per
    /// line, matching the shard manifest digest.
    pub fn manifest_digest(&self) -> String {
        let mut body = String::new();
        for s in &self.d_init {
            body.push_str(&canonical_json(s).expect("sample serializes"));
            body.push('\n');
        }
        sha256_hex(body)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    kind: String,
    digest: String,
    forest_digest: String,
    tools_digest: String,
    state: serde_json::Value,
}

/// Writes the state atomically (temp file then rename).
pub fn checkpoint(state: &FlywheelState, path: &Path) -> Result<(), FlywheelError> {
    let value = serde_json::to_value(state).map_err(|e| FlywheelError::Checkpoint(e.to_string()))?;
    let body = serde_json::to_string(&value).map_err(|e| FlywheelError::Checkpoint(e.to_string()))?;
    let file = CheckpointFile {
        kind: CHECKPOINT_KIND.into(),
        digest: sha256_hex(&body),
        forest_digest: state.forest.digest(),
        tools_digest: state.tools.digest(),
        state: value,
    };
    let text = serde_json::to_string(&file).map_err(|e| FlywheelError::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text + "\n")?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn resume(path: &Path) -> Result<FlywheelState, FlywheelError> {
    let bytes = std::fs::read(path)?;
    let file: CheckpointFile =
        serde_json::from_slice(&bytes).map_err(|e| FlywheelError::Checkpoint(e.to_string()))?;
    if file.kind != CHECKPOINT_KIND {
        return Err(FlywheelError::Checkpoint(format!("unknown kind {}", file.kind)));
    }
    let body = serde_json::to_string(&file.state).map_err(|e| FlywheelError::Checkpoint(e.to_string()))?;
    if sha256_hex(&body) != file.digest {
        return Err(FlywheelError::Checkpoint("state digest mismatch".into()));
    }
    let state: FlywheelState =
        serde_json::from_value(file.state).map_err(|e| FlywheelError::Checkpoint(e.to_string()))?;
    if state.forest.digest() != file.forest_digest || state.tools.digest() != file.tools_digest {
        return Err(FlywheelError::Checkpoint("set digest mismatch".into()));
    }
    Ok(state)
}

/// One row of the growth table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub round: u32,
    pub delta_k: usize,
    pub delta_t: usize,
    pub delta_d: usize,
    pub total_k: usize,
    pub total_t: usize,
    pub total_d: usize,
}

pub fn growth_report(history: &[RoundReport]) -> Vec<GrowthRow> {
    let mut total_d = 0;
    history
        .iter()
        .map(|r| {
            total_d += r.accepted;
            GrowthRow {
                round: r.round,
                delta_k: r.delta_k,
                delta_t: r.delta_t,
                delta_d: r.accepted,
                total_k: r.k_size,
                total_t: r.t_size,
                total_d,
            }
        })
        .collect()
}

pub fn growth_table(rows: &[GrowthRow]) -> String {
    let mut out = String::from("round\tdK\tdT\tdD\t|K|\t|T|\t|D|\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.round, r.delta_k, r.delta_t, r.delta_d, r.total_k, r.total_t, r.total_d
        ));
    }
    out
}

struct Call {
    side: GenMode,
    combo: Vec<String>,
    request: GenRequest,
}

pub struct Flywheel<'a> {
    pub config: FlywheelConfig,
    pub generator: &'a dyn Generator,
    pub executor: &'a dyn CodeExecutor,
    pub embedder: &'a dyn Embedder,
    pub transcripts: Option<&'a TranscriptLog>,
    /// Written after every completed round when set.
    pub checkpoint_path: Option<PathBuf>,
}

impl<'a> Flywheel<'a> {
    pub fn new(
        config: FlywheelConfig,
        generator: &'a dyn Generator,
        executor: &'a dyn CodeExecutor,
        embedder: &'a dyn Embedder,
    ) -> Self {
        Self {
            config,
            generator,
            executor,
            embedder,
            transcripts: None,
            checkpoint_path: None,
        }
    }

    pub fn with_transcripts(mut self, log: &'a TranscriptLog) -> Self {
        self.transcripts = Some(log);
        self
    }

    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    /// Runs rounds until `config.rounds` are complete.
    pub fn run(&self, mut state: FlywheelState) -> Result<FlywheelState, FlywheelError> {
        self.run_until(&mut state, self.config.rounds)?;
        Ok(state)
    }

    /// Runs rounds until `state.round == stop` (capped by `config.rounds`).
    pub fn run_until(&self, state: &mut FlywheelState, stop: u32) -> Result<(), FlywheelError> {
        self.config.validate()?;
        if state.forest.is_empty() || state.tools.is_empty() {
            return Err(FlywheelError::Config("K0 and T0 must be non-empty".into()));
        }
        while state.round < stop.min(self.config.rounds) {
            self.run_round(state)?;
            if let Some(path) = &self.checkpoint_path {
                checkpoint(state, path)?;
            }
        }
        Ok(())
    }

    fn requests(&self, state: &FlywheelState) -> Result<Vec<Call>, FlywheelError> {
        let n = state.round;
        let forest_err = |source| FlywheelError::Forest { round: n, source };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, &["flywheel", &n.to_string()]));
        let k_combos = state
            .forest
            .combos(self.config.arity.map(|a| a.min(state.forest.len())), self.config.combos_per_side, &mut rng)
            .map_err(forest_err)?;
        let t_combos = state
            .tools
            .combos(self.config.arity.map(|a| a.min(state.tools.len())), self.config.combos_per_side, &mut rng)
            .map_err(forest_err)?;
        let tool_names: Vec<String> = state.tools.tools().map(|t| t.name.clone()).collect();
        let concept_names: Vec<String> = state.forest.concepts().map(|c| c.name.clone()).collect();
        let mut calls = Vec::new();
        for (i, combo) in k_combos.into_iter().enumerate() {
            let elements = combo
                .iter()
                .filter_map(|id| state.forest.get(id))
                .map(|c| ElementContext {
                    id: c.id.clone(),
                    name: c.name.clone(),
                    description: c.description.clone(),
                    detail: c.domain.clone(),
                })
                .collect();
            let payload = GenPayload::Elements {
                elements,
                catalog: tool_names.clone(),
                set_size: state.forest.len(),
            };
            let seed = derive_seed(state.seed, &["gen", "k", &n.to_string(), &i.to_string()]);
            calls.push(Call {
                side: GenMode::FromKnowledge,
                combo,
                request: GenRequest::new(GenMode::FromKnowledge, payload)
                    .with_seed(seed)
                    .with_batch(self.config.batch),
            });
        }
        for (i, combo) in t_combos.into_iter().enumerate() {
            let elements = combo
                .iter()
                .filter_map(|id| state.tools.get(id))
                .map(|t| ElementContext {
                    id: t.id.clone(),
                    name: t.name.clone(),
                    description: t.description.clone(),
                    detail: t.signature.clone(),
                })
                .collect();
            let payload = GenPayload::Elements {
                elements,
                catalog: concept_names.clone(),
                set_size: state.tools.len(),
            };
            let seed = derive_seed(state.seed, &["gen", "t", &n.to_string(), &i.to_string()]);
            calls.push(Call {
                side: GenMode::FromTools,
                combo,
                request: GenRequest::new(GenMode::FromTools, payload)
                    .with_seed(seed)
                    .with_batch(self.config.batch),
            });
        }
        Ok(calls)
    }

    /// One generation call with parse retries. `Ok(None)` means the output
    /// never parsed and the call is skipped.
    fn call(&self, call: &Call) -> Result<Option<GenBatch>, GatewayError> {
        let mut request = call.request.clone();
        for attempt in 0..PARSE_ATTEMPTS {
            request.attempt = attempt;
            let outcome = self.generator.respond(&request);
            if let Some(log) = self.transcripts {
                if let Err(e) = log.record(self.generator.id(), &request, &outcome) {
                    warn!("transcript write failed: {e}");
                }
            }
            let text = outcome?;
            match crate::gateway::parse_gen_output(&text) {
                Ok(batch) => return Ok(Some(batch)),
                Err(e) => warn!("{} attempt {attempt}: unparseable output: {e}", request.mode.as_str()),
            }
        }
        Ok(None)
    }

    pub fn run_round(&self, state: &mut FlywheelState) -> Result<RoundReport, FlywheelError> {
        let n = state.round;
        let calls = self.requests(state)?;
        let batches = fan_out(calls.iter().collect(), self.config.budget, |c: &Call| self.call(c));

        let mut dropped = Vec::new();
        let mut predicted_concepts: Vec<ConceptProposal> = Vec::new();
        let mut predicted_tools: Vec<ToolProposal> = Vec::new();
        let mut candidates = Vec::new();
        for (call, batch) in calls.iter().zip(batches) {
            let batch = match batch {
                Ok(Some(b)) => b,
                Ok(None) => {
                    dropped.push(format!("{}: output never parsed", call.side.as_str()));
                    continue;
                }
                Err(source) => return Err(FlywheelError::Generator { round: n, source }),
            };
            let (knowledge_refs, tool_refs) = match call.side {
                GenMode::FromKnowledge => (
                    call.combo.clone(),
                    resolve(batch.predicted_tools.iter().map(|t| &t.name), |name| {
                        state.tools.find_by_name(name).map(|t| t.id.clone())
                    }),
                ),
                _ => (
                    resolve(batch.predicted_concepts.iter().map(|c| &c.name), |name| {
                        state.forest.find_by_name(name).map(|c| c.id.clone())
                    }),
                    call.combo.clone(),
                ),
            };
            for c in batch.samples {
                candidates.push((c, knowledge_refs.clone(), tool_refs.clone()));
            }
            match call.side {
                GenMode::FromKnowledge => predicted_tools.extend(batch.predicted_tools),
                _ => predicted_concepts.extend(batch.predicted_concepts),
            }
        }

        let generator = self.generator.id().to_string();
        let rendered = fan_out(candidates, self.config.budget, |(c, krefs, trefs)| {
            let (original, steps) = render_candidate(self.executor, &c).map_err(|e| e.to_string())?;
            let mut body = SampleBody::new(c.question, c.answer.clone(), c.original_code);
            body.original_image = Some(original);
            body.trajectory.steps = steps;
            body.trajectory.final_answer = c.answer;
            body.knowledge_refs = krefs;
            body.tool_refs = trefs;
            body.provenance.generator = generator.clone();
            body.provenance.round = n;
            canonicalize(body, self.executor.store()).map_err(|e| e.to_string())
        });
        let mut seen: BTreeSet<String> = state.d_init.iter().map(|s| s.id.clone()).collect();
        let mut accepted = 0;
        for result in rendered {
            match result {
                Ok(sample) => {
                    if seen.insert(sample.id.clone()) {
                        state.d_init.push(sample);
                        accepted += 1;
                    } else {
                        dropped.push(format!("duplicate sample {}", sample.id));
                    }
                }
                Err(reason) => {
                    warn!("round {n}: dropped candidate: {reason}");
                    dropped.push(reason);
                }
            }
        }

        let forest_err = |source| FlywheelError::Forest { round: n, source };
        let params = ExpandParams {
            threshold: self.config.threshold,
            attach_threshold: self.config.attach_threshold,
        };
        let delta_k = state
            .forest
            .expand(&predicted_concepts, self.embedder, params, n + 1)
            .map_err(forest_err)?;
        let delta_t = state
            .tools
            .expand(&predicted_tools, self.embedder, self.config.threshold, n + 1)
            .map_err(forest_err)?;
        let report = RoundReport {
            round: n + 1,
            delta_k: delta_k.len(),
            delta_t: delta_t.len(),
            accepted,
            dropped,
            k_size: state.forest.len(),
            t_size: state.tools.len(),
        };
        info!(
            "round {}: +{} samples, +{} concepts, +{} tools",
            report.round, report.accepted, report.delta_k, report.delta_t
        );
        state.history.push(report.clone());
        state.round = n + 1;
        Ok(report)
    }
}

fn resolve<'n>(
    names: impl Iterator<Item = &'n String>,
    lookup: impl Fn(&str) -> Option<String>,
) -> Vec<String> {
    let ids: BTreeSet<String> = names.filter_map(|n| lookup(n)).collect();
    ids.into_iter().collect()
}

/// Runs the loop from K0/T0 with a fresh state.
pub fn run_evolution(
    config: FlywheelConfig,
    generator: &dyn Generator,
    executor: &dyn CodeExecutor,
    embedder: &dyn Embedder,
    k0: KnowledgeForest,
    t0: ToolSet,
) -> Result<FlywheelState, FlywheelError> {
    let state = FlywheelState::new(config.seed, k0, t0);
    Flywheel::new(config, generator, executor, embedder).run(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ImageStore;
    use crate::executor::InProcessExecutor;
    use crate::forest::HashingEmbedder;
    use crate::gateway::{MockGenerator, Novelty};

    fn seeds() -> (KnowledgeForest, ToolSet) {
        let k = KnowledgeForest::from_seeds(&[
            ConceptProposal::new("triangle median", "segment from a vertex to the opposite midpoint"),
            ConceptProposal::new("rectangle", "quadrilateral with four right angles"),
        ])
        .unwrap();
        let t = ToolSet::from_seeds(&[ToolProposal::new("draw line", "connect two points")]).unwrap();
        (k, t)
    }

    #[test]
    fn zero_rounds_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ex = InProcessExecutor::new(ImageStore::open(dir.path()).unwrap());
        let g = MockGenerator::new(1, Novelty::Fixed(1));
        let (k, t) = seeds();
        let cfg = FlywheelConfig {
            rounds: 0,
            ..Default::default()
        };
        let s = run_evolution(cfg, &g, &ex, &HashingEmbedder::default(), k.clone(), t.clone()).unwrap();
        assert!(s.d_init.is_empty());
        assert_eq!((s.forest, s.tools), (k, t));
    }

    #[test]
    fn rounds_cap() {
        let cfg = FlywheelConfig {
            rounds: 17,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (k, t) = seeds();
        let path = dir.path().join("checkpoint.json");
        let state = FlywheelState::new(3, k, t);
        checkpoint(&state, &path).unwrap();
        assert_eq!(resume(&path).unwrap(), state);
        let mut bytes = std::fs::read(&path).unwrap();
        let pos = bytes.windows(8).position(|w| w == b"triangle").unwrap();
        bytes[pos] = b'T';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(resume(&path), Err(FlywheelError::Checkpoint(_))));
    }
}
