//! Difficulty expansion by parallel and sequential extensions.
//!
//! Entities are tracked through `# entity:` and `# ref:` comments in code.
//! A parallel extension may reference only entities of the original figure;
//! a sequential one must reference at least one entity introduced by an
//! earlier trajectory step. Every child is re-checked before it is merged,
//! and no sample goes past [`MAX_DIFFICULTY_DEPTH`] extensions.

use std::collections::{BTreeSet, HashSet};

use log::warn;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{AuditLog, Calibrator};
use crate::datamodel::{canonicalize, DataError, Sample, SampleStatus, MAX_DIFFICULTY_DEPTH};
use crate::executor::CodeExecutor;
use crate::gateway::{self, GatewayError, GenMode, GenPayload, GenRequest, Generator};
use crate::render::{execute_step_strict, sample_context, RenderError};
use crate::sketch::annotations;
use crate::util::{derive_seed, fan_out, DEFAULT_BUDGET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Parallel,
    Sequential,
}

impl Strategy {
    fn mode(self) -> GenMode {
        match self {
            Strategy::Parallel => GenMode::ExtendParallel,
            Strategy::Sequential => GenMode::ExtendSequential,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Parallel => "parallel",
            Strategy::Sequential => "sequential",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExpandError {
    #[error("sample status {0:?} cannot be extended")]
    Status(SampleStatus),
    #[error("sample is already at depth {0}")]
    DepthCap(u8),
    #[error("generator: {0}")]
    Generator(#[from] GatewayError),
    #[error("extension asked for {requested} but the plan is {got}")]
    StrategyMismatch { requested: &'static str, got: String },
    #[error("reference rule: {0}")]
    Reference(String),
    #[error("extension code: {0}")]
    Execution(#[from] RenderError),
    #[error("data: {0}")]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionPlan {
    pub strategy: Strategy,
    pub parent: String,
    pub new_code: String,
    pub new_reasoning: String,
    pub referenced: Vec<String>,
}

struct Entities {
    original: HashSet<String>,
    steps: HashSet<String>,
}

fn entities(sample: &Sample) -> Entities {
    let original = annotations(&sample.original_code)
        .labels()
        .map(str::to_string)
        .collect();
    let steps = sample
        .trajectory
        .steps
        .iter()
        .filter_map(|s| s.code.as_deref())
        .flat_map(|c| annotations(c).entities.into_iter().map(|e| e.label))
        .collect();
    Entities { original, steps }
}

/// Checks a plan against the reference rule for its strategy.
pub fn check_plan(sample: &Sample, plan: &ExtensionPlan) -> Result<(), ExpandError> {
    let known = entities(sample);
    match plan.strategy {
        Strategy::Parallel => {
            if let Some(bad) = plan.referenced.iter().find(|r| !known.original.contains(*r)) {
                return Err(ExpandError::Reference(format!(
                    "parallel extension references {bad:?}, which is not an original-figure entity"
                )));
            }
        }
        Strategy::Sequential => {
            if !plan.referenced.iter().any(|r| known.steps.contains(r)) {
                return Err(ExpandError::Reference(format!(
                    "sequential extension must reference an entity from an earlier step (refs: {:?})",
                    plan.referenced
                )));
            }
            if let Some(bad) = plan
                .referenced
                .iter()
                .find(|r| !known.steps.contains(*r) && !known.original.contains(*r))
            {
                return Err(ExpandError::Reference(format!("unknown entity {bad:?}")));
            }
        }
    }
    Ok(())
}

/// Asks for one extension and applies it, returning the child.
pub fn extend(
    sample: &Sample,
    strategy: Strategy,
    generator: &dyn Generator,
    executor: &dyn CodeExecutor,
    seed: u64,
) -> Result<Sample, ExpandError> {
    if !matches!(sample.status, SampleStatus::Verified | SampleStatus::Expanded) {
        return Err(ExpandError::Status(sample.status));
    }
    if sample.difficulty_depth >= MAX_DIFFICULTY_DEPTH {
        return Err(ExpandError::DepthCap(sample.difficulty_depth));
    }
    let store = executor.store();
    let request = GenRequest::new(strategy.mode(), GenPayload::Sample(sample_context(sample, store)?))
        .with_seed(seed);
    let draft = gateway::extend(generator, &request)?;
    if draft.strategy != strategy.as_str() {
        return Err(ExpandError::StrategyMismatch {
            requested: strategy.as_str(),
            got: draft.strategy,
        });
    }
    let plan = ExtensionPlan {
        strategy,
        parent: sample.id.clone(),
        referenced: annotations(&draft.code).refs,
        new_code: draft.code,
        new_reasoning: draft.thought,
    };
    check_plan(sample, &plan)?;
    let current = sample
        .current_image()
        .ok_or(DataError::MissingOriginalImage)?;
    let index = sample.trajectory.steps.len() as u32 + 1;
    let step = execute_step_strict(executor, index, &plan.new_reasoning, &plan.new_code, current)?;

    let mut body = sample.body.clone();
    body.trajectory.steps.push(step);
    body.question = draft.question;
    body.answer = draft.answer.clone();
    body.trajectory.final_answer = draft.answer;
    body.difficulty_depth += 1;
    body.status = SampleStatus::Expanded;
    body.provenance.parent = Some(sample.id.clone());
    body.provenance.repaired_from = None;
    body.provenance.verdict = None;
    body.provenance.generator = generator.id().to_string();
    match strategy {
        Strategy::Parallel => body.provenance.parallel_extensions += 1,
        Strategy::Sequential => body.provenance.sequential_extensions += 1,
    }
    Ok(canonicalize(body, store)?)
}

pub fn extend_parallel(
    sample: &Sample,
    generator: &dyn Generator,
    executor: &dyn CodeExecutor,
    seed: u64,
) -> Result<Sample, ExpandError> {
    extend(sample, Strategy::Parallel, generator, executor, seed)
}

pub fn extend_sequential(
    sample: &Sample,
    generator: &dyn Generator,
    executor: &dyn CodeExecutor,
    seed: u64,
) -> Result<Sample, ExpandError> {
    extend(sample, Strategy::Sequential, generator, executor, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    /// Share of the input that gets extended.
    pub fraction: f64,
    /// Probability of picking the parallel strategy per extension.
    pub parallel_share: f64,
    pub seed: u64,
    pub budget: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            parallel_share: 0.5,
            seed: 0,
            budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Default)]
pub struct ExpansionOutcome {
    /// Parents followed by surviving children.
    pub dataset: Vec<Sample>,
    pub children: usize,
    pub failures: Vec<(String, String)>,
}

/// Extends a sampled subset once each and merges the re-validated children
/// back with the input.
pub fn expand_dataset(
    verified: &[Sample],
    config: &ExpansionConfig,
    generator: &dyn Generator,
    calibrator: &Calibrator<'_>,
    executor: &dyn CodeExecutor,
    audit: &AuditLog,
) -> ExpansionOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["expand"]));
    let eligible: Vec<&Sample> = verified
        .iter()
        .filter(|s| {
            matches!(s.status, SampleStatus::Verified | SampleStatus::Expanded)
                && s.difficulty_depth < MAX_DIFFICULTY_DEPTH
        })
        .collect();
    let take = ((config.fraction.clamp(0.0, 1.0) * eligible.len() as f64).round() as usize).min(eligible.len());
    let mut picked = index::sample(&mut rng, eligible.len(), take).into_vec();
    picked.sort_unstable();
    let jobs: Vec<(&Sample, Strategy, u64)> = picked
        .into_iter()
        .map(|i| {
            let strategy = if rng.random_bool(config.parallel_share.clamp(0.0, 1.0)) {
                Strategy::Parallel
            } else {
                Strategy::Sequential
            };
            let seed = derive_seed(config.seed, &["extend", &eligible[i].id]);
            (eligible[i], strategy, seed)
        })
        .collect();

    let results = fan_out(jobs, config.budget, |(parent, strategy, seed)| {
        (parent.id.clone(), extend(parent, strategy, generator, executor, seed))
    });
    let mut out = ExpansionOutcome {
        dataset: verified.to_vec(),
        ..Default::default()
    };
    let mut children = Vec::new();
    for (parent, result) in results {
        match result {
            Ok(child) => children.push(child),
            Err(e) => {
                warn!("extension of {parent} failed: {e}");
                out.failures.push((parent, e.to_string()));
            }
        }
    }
    let checked = calibrator.calibrate(children, audit);
    for rejected in &checked.rejected {
        let parent = rejected.provenance.parent.clone().unwrap_or_default();
        out.failures.push((parent, "child failed re-validation".into()));
    }
    let mut seen: BTreeSet<String> = out.dataset.iter().map(|s| s.id.clone()).collect();
    for child in checked.verified {
        let mut body = child.into_body();
        body.status = SampleStatus::Expanded;
        let child = canonicalize(body, executor.store()).expect("verified child stays valid");
        if seen.insert(child.id.clone()) {
            out.dataset.push(child);
            out.children += 1;
        }
    }
    out
}

/// Walks `parent` links inside `dataset` and returns the root, if reachable.
pub fn root_ancestor<'a>(sample: &'a Sample, dataset: &'a [Sample]) -> Option<&'a Sample> {
    let by_id: std::collections::HashMap<&str, &Sample> =
        dataset.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut current = sample;
    for _ in 0..=MAX_DIFFICULTY_DEPTH {
        match current.provenance.parent.as_deref() {
            None => return Some(current),
            Some(p) => current = by_id.get(p)?,
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::calibrate;
    use crate::datamodel::ImageStore;
    use crate::executor::InProcessExecutor;
    use crate::flywheel::{run_evolution, FlywheelConfig};
    use crate::forest::{ConceptProposal, HashingEmbedder, KnowledgeForest, ToolProposal, ToolSet};
    use crate::gateway::{MockGenerator, Novelty};

    fn verified(ex: &InProcessExecutor, g: &MockGenerator) -> Vec<Sample> {
        let k = KnowledgeForest::from_seeds(&[ConceptProposal::new("median", "vertex to midpoint")]).unwrap();
        let t = ToolSet::from_seeds(&[ToolProposal::new("draw line", "connect two points")]).unwrap();
        let cfg = FlywheelConfig {
            rounds: 1,
            ..Default::default()
        };
        let state = run_evolution(cfg, g, ex, &HashingEmbedder::default(), k, t).unwrap();
        let out = calibrate(state.d_init, g, g, ex.store(), 3);
        assert!(!out.verified.is_empty());
        out.verified
    }

    #[test]
    fn parallel_then_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let ex = InProcessExecutor::new(ImageStore::open(dir.path()).unwrap());
        let g = MockGenerator::new(4, Novelty::Fixed(1));
        let parent = verified(&ex, &g).remove(0);
        let child = extend_parallel(&parent, &g, &ex, 1).unwrap();
        assert_eq!(child.difficulty_depth, parent.difficulty_depth + 1);
        assert_eq!(child.provenance.parent.as_deref(), Some(parent.id.as_str()));
        assert_eq!(child.trajectory.steps.len(), parent.trajectory.steps.len() + 1);
        assert_eq!(child.status, SampleStatus::Expanded);
        let grandchild = extend_sequential(&child, &g, &ex, 2).unwrap();
        assert_eq!(grandchild.provenance.parallel_extensions, 1);
        assert_eq!(grandchild.provenance.sequential_extensions, 1);
    }

    #[test]
    fn depth_and_status_gates() {
        let dir = tempfile::tempdir().unwrap();
        let ex = InProcessExecutor::new(ImageStore::open(dir.path()).unwrap());
        let g = MockGenerator::new(4, Novelty::Fixed(1));
        let mut s = verified(&ex, &g).remove(0);
        s.body.difficulty_depth = MAX_DIFFICULTY_DEPTH;
        assert!(matches!(extend_parallel(&s, &g, &ex, 1), Err(ExpandError::DepthCap(3))));
        s.body.difficulty_depth = 0;
        s.body.status = SampleStatus::Generated;
        assert!(matches!(extend_parallel(&s, &g, &ex, 1), Err(ExpandError::Status(_))));
    }

    #[test]
    fn sequential_needs_a_step_entity() {
        let dir = tempfile::tempdir().unwrap();
        let ex = InProcessExecutor::new(ImageStore::open(dir.path()).unwrap());
        let g = MockGenerator::new(4, Novelty::Fixed(1));
        let s = verified(&ex, &g).remove(0);
        let plan = ExtensionPlan {
            strategy: Strategy::Sequential,
            parent: s.id.clone(),
            new_code: String::new(),
            new_reasoning: String::new(),
            referenced: annotations(&s.original_code).labels().take(1).map(str::to_string).collect(),
        };
        assert!(matches!(check_plan(&s, &plan), Err(ExpandError::Reference(_))));
        let parallel = ExtensionPlan {
            strategy: Strategy::Parallel,
            ..plan
        };
        check_plan(&s, &parallel).unwrap();
    }
}
