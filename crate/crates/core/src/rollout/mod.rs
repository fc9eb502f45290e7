//! Interactive rollouts, rewards and the clipped group-relative surrogate.
//!
//! Nothing here updates parameters. The surrogate value and its per-token
//! terms are exposed for an external trainer.

mod grpo;
mod policy;
mod trajectory;

pub use grpo::{
    group_advantages, grpo_surrogate, token_term, token_terms, GrpoError, HashScorer, RolloutGroup,
    RolloutOutput, TokenScorer,
};
pub use policy::{parse_turn, ChatPolicy, PolicyClient, PolicyRole, PolicyTurn, ScriptedPolicy};
pub use trajectory::{
    export_groups, build_group, run_rollout, run_trajectory, sample_group, targeted_filter, FilterConfig,
    FilterOutcome, GroupRecord, Rollout, RolloutError,
};

use serde::{Deserialize, Serialize};

use crate::datamodel::{ExecStatus, Trajectory, TrajectoryOutcome};
use crate::util::answers_match;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoParams {
    pub eps_low: f64,
    pub eps_high: f64,
    pub std_floor: f64,
    /// Weight of the format reward.
    pub lambda_format: f64,
    /// Weight of the tool reward, applied only when the answer is right.
    pub lambda_tool: f64,
}

impl Default for GrpoParams {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.2,
            std_floor: 1e-6,
            lambda_format: 0.5,
            lambda_tool: 0.3,
        }
    }
}

impl GrpoParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.eps_low > 0.0 && self.eps_high > 0.0) {
            return Err(format!("clip bounds must be positive (got {}, {})", self.eps_low, self.eps_high));
        }
        if !(self.eps_low < 1.0) {
            return Err(format!("eps_low must be below 1 (got {})", self.eps_low));
        }
        if !(self.std_floor > 0.0) {
            return Err(format!("std floor must be positive (got {})", self.std_floor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: u8,
    pub r_format: u8,
    pub r_tool: u8,
    pub total: f64,
}

/// `acc + λ1·format + λ2·[acc > 0]·tool`.
pub fn reward_total(acc: bool, format: bool, tool: bool, params: &GrpoParams) -> RewardBreakdown {
    let (a, f, t) = (u8::from(acc), u8::from(format), u8::from(tool));
    let gate = if a > 0 { 1.0 } else { 0.0 };
    RewardBreakdown {
        r_acc: a,
        r_format: f,
        r_tool: t,
        total: f64::from(a) + params.lambda_format * f64::from(f) + params.lambda_tool * gate * f64::from(t),
    }
}

/// Blocks balanced on every turn and an answer tag present.
pub fn well_formed(traj: &Trajectory) -> bool {
    traj.outcome == TrajectoryOutcome::Answered && traj.steps.iter().all(|s| !s.malformed)
}

/// At least one successful execution that saved an image.
pub fn used_tool(traj: &Trajectory) -> bool {
    traj.steps.iter().any(|s| {
        s.execution
            .as_ref()
            .is_some_and(|e| e.status == ExecStatus::Ok && e.output_count > 0)
    })
}

pub fn compute_reward(traj: &Trajectory, gold: &str, params: &GrpoParams) -> RewardBreakdown {
    let acc = traj.outcome == TrajectoryOutcome::Answered && answers_match(&traj.final_answer, gold);
    reward_total(acc, well_formed(traj), used_tool(traj), params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        let p = GrpoParams::default();
        assert_eq!(reward_total(true, true, true, &p).total, 1.8);
        assert_eq!(reward_total(false, true, true, &p).total, 0.5);
        assert_eq!(reward_total(false, false, false, &p).total, 0.0);
        assert_eq!(reward_total(true, false, true, &p).total, 1.3);
    }

    #[test]
    fn params_validation() {
        assert!(GrpoParams::default().validate().is_ok());
        let bad = GrpoParams {
            std_floor: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
