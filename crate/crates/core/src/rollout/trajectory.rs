//! The interactive loop: policy turn, sandbox execution, observation.

use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::grpo::{grpo_surrogate, RolloutGroup, RolloutOutput, TokenScorer};
use super::policy::{parse_turn, PolicyClient};
use super::{compute_reward, GrpoParams};
use crate::datamodel::{
    canonicalize, write_records, DataError, DataRoute, ImageRef, Sample, ShardManifest, Step, Trajectory,
    TrajectoryOutcome,
};
use crate::executor::CodeExecutor;
use crate::gateway::{ContentPart, Message};
use crate::render::{data_url, execute_step};
use crate::util::{answers_match, derive_seed, fan_out, DEFAULT_BUDGET};

const SYSTEM: &str = "Solve the problem about the image. Each turn, think in plain text. To edit the figure, write one ```python block that loads the latest image with load(\"current\"), draws on it and calls save(img, name). When you are done, give the final answer as <answer>...</answer>.";

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("max_steps must be at least 1")]
    ZeroSteps,
    #[error("image: {0}")]
    Image(#[from] DataError),
    #[error("group: {0}")]
    Group(#[from] super::GrpoError),
}

/// A trajectory plus the raw policy turns that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub turns: Vec<String>,
}

impl Rollout {
    pub fn text(&self) -> String {
        self.turns.join("\n")
    }
}

fn observation(text: String, image: Option<String>) -> Message {
    let mut parts = vec![ContentPart::Text(text)];
    parts.extend(image.map(ContentPart::ImageUrl));
    Message {
        role: "user".into(),
        parts,
    }
}

pub fn run_rollout(
    policy: &dyn PolicyClient,
    question: &str,
    image: &ImageRef,
    executor: &dyn CodeExecutor,
    max_steps: usize,
    seed: u64,
) -> Result<Rollout, RolloutError> {
    if max_steps == 0 {
        return Err(RolloutError::ZeroSteps);
    }
    let store = executor.store();
    let mut context = vec![
        Message::text("system", SYSTEM),
        observation(question.to_string(), Some(data_url(store, image)?)),
    ];
    let mut current = image.clone();
    let mut trajectory = Trajectory {
        outcome: TrajectoryOutcome::Truncated,
        ..Default::default()
    };
    let mut turns = Vec::new();
    for t in 1..=max_steps {
        let text = match policy.next_turn(&context, derive_seed(seed, &["turn", &t.to_string()])) {
            Ok(text) => text,
            Err(e) => {
                warn!("policy {} failed at turn {t}: {e}", policy.id());
                trajectory.outcome = TrajectoryOutcome::Failed;
                break;
            }
        };
        context.push(Message::text("assistant", text.clone()));
        turns.push(text.clone());
        let parsed = parse_turn(&text);
        let index = t as u32;
        let mut step = match &parsed.code {
            Some(code) => {
                let step = execute_step(executor, index, &parsed.thought, code, &current);
                let summary = step.execution.as_ref().expect("code step has execution");
                match &step.output_image {
                    Some(img) => {
                        current = img.clone();
                        context.push(observation(
                            "Observation: the code ran and produced this image.".into(),
                            Some(data_url(store, img)?),
                        ));
                    }
                    None => context.push(observation(
                        format!("Observation: execution {:?}: {}", summary.status, summary.trace),
                        None,
                    )),
                }
                step
            }
            None => Step::thought_only(index, &parsed.thought),
        };
        if let Some(reason) = &parsed.malformed {
            step.malformed = true;
            if parsed.answer.is_none() {
                context.push(observation(format!("Observation: malformed turn ({reason})."), None));
            }
        }
        trajectory.steps.push(step);
        if let Some(answer) = parsed.answer {
            trajectory.final_answer = answer;
            trajectory.outcome = TrajectoryOutcome::Answered;
            break;
        }
    }
    Ok(Rollout { trajectory, turns })
}

/// `F(Q, I_0) -> (R, A)`: runs the loop and keeps only the trajectory.
pub fn run_trajectory(
    policy: &dyn PolicyClient,
    question: &str,
    image: &ImageRef,
    executor: &dyn CodeExecutor,
    max_steps: usize,
    seed: u64,
) -> Result<Trajectory, RolloutError> {
    run_rollout(policy, question, image, executor, max_steps, seed).map(|r| r.trajectory)
}

/// `g` rollouts of one question, concurrently.
#[allow(clippy::too_many_arguments)]
pub fn sample_group(
    policy: &dyn PolicyClient,
    question: &str,
    image: &ImageRef,
    executor: &dyn CodeExecutor,
    g: usize,
    max_steps: usize,
    seed: u64,
    budget: usize,
) -> Vec<Result<Rollout, RolloutError>> {
    fan_out((0..g).collect(), budget, |j: usize| {
        let s = derive_seed(seed, &["rollout", &j.to_string()]);
        run_rollout(policy, question, image, executor, max_steps, s)
    })
}

/// Scores every rollout and attaches token log-probs from both scorers.
pub fn build_group(
    question: &str,
    gold: &str,
    rollouts: &[Rollout],
    params: &GrpoParams,
    policy_scorer: &dyn TokenScorer,
    reference_scorer: &dyn TokenScorer,
) -> RolloutGroup {
    let outputs = rollouts
        .iter()
        .map(|r| {
            let text = r.text();
            RolloutOutput {
                logp_policy: policy_scorer.logprobs(question, &text),
                logp_ref: reference_scorer.logprobs(question, &text),
                reward: compute_reward(&r.trajectory, gold, params),
                text,
            }
        })
        .collect();
    RolloutGroup {
        question: question.to_string(),
        outputs,
    }
}

/// One line of the trainer export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub sample_id: String,
    pub gold: String,
    pub group: RolloutGroup,
    pub advantages: Vec<f64>,
    pub surrogate: f64,
    pub trajectories: Vec<Trajectory>,
}

impl GroupRecord {
    pub fn new(
        sample_id: &str,
        gold: &str,
        group: RolloutGroup,
        trajectories: Vec<Trajectory>,
        params: &GrpoParams,
    ) -> Result<Self, RolloutError> {
        let surrogate = grpo_surrogate(&group, params)?;
        Ok(Self {
            sample_id: sample_id.to_string(),
            gold: gold.to_string(),
            advantages: group.advantages(params),
            group,
            surrogate,
            trajectories,
        })
    }
}

pub fn export_groups(records: &[GroupRecord], path: &Path) -> Result<ShardManifest, DataError> {
    write_records(records, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub max_steps: usize,
    pub seed: u64,
    pub budget: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_steps: 1,
            seed: 0,
            budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Default)]
pub struct FilterOutcome {
    pub kept: Vec<Sample>,
    pub dropped: usize,
    pub skipped: Vec<(String, String)>,
}

enum Decision {
    Keep(Box<Sample>),
    Drop,
    Skip(String),
}

fn attempt(
    policy: &dyn PolicyClient,
    sample: &Sample,
    image: &ImageRef,
    executor: &dyn CodeExecutor,
    config: &FilterConfig,
) -> Result<bool, String> {
    let traj = run_trajectory(policy, &sample.question, image, executor, config.max_steps, config.seed)
        .map_err(|e| e.to_string())?;
    if traj.outcome == TrajectoryOutcome::Failed {
        return Err("policy failed".into());
    }
    Ok(answers_match(&traj.final_answer, &sample.answer))
}

/// Keeps samples the policy gets wrong on the original image but right on
/// the final edited image; one greedy attempt each.
pub fn targeted_filter(
    samples: &[Sample],
    policy: &dyn PolicyClient,
    executor: &dyn CodeExecutor,
    config: &FilterConfig,
) -> FilterOutcome {
    let decisions = fan_out(samples.iter().collect(), config.budget, |s: &Sample| {
        let (Some(original), Some(edited)) = (s.original_image.as_ref(), s.trajectory.final_image()) else {
            return Decision::Skip("no edited image".into());
        };
        let on_original = match attempt(policy, s, original, executor, config) {
            Ok(v) => v,
            Err(e) => return Decision::Skip(e),
        };
        if on_original {
            return Decision::Drop;
        }
        match attempt(policy, s, edited, executor, config) {
            Ok(true) => {
                let mut body = s.body.clone();
                body.route = Some(DataRoute::RlTargeted);
                match canonicalize(body, executor.store()) {
                    Ok(kept) => Decision::Keep(Box::new(kept)),
                    Err(e) => Decision::Skip(e.to_string()),
                }
            }
            Ok(false) => Decision::Drop,
            Err(e) => Decision::Skip(e),
        }
    });
    let mut out = FilterOutcome::default();
    for (s, d) in samples.iter().zip(decisions) {
        match d {
            Decision::Keep(k) => out.kept.push(*k),
            Decision::Drop => out.dropped += 1,
            Decision::Skip(reason) => {
                warn!("targeted filter skipped {}: {reason}", s.id);
                out.skipped.push((s.id.clone(), reason));
            }
        }
    }
    info!("targeted filter kept {} of {}", out.kept.len(), samples.len());
    out
}
