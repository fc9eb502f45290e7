//! Group-standardized advantages and the clipped ratio surrogate.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GrpoParams, RewardBreakdown};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("a rollout group needs at least one output")]
    EmptyGroup,
    #[error("output {index}: {policy} policy log-probs but {reference} reference log-probs")]
    LengthMismatch { index: usize, policy: usize, reference: usize },
    #[error("output {index} has a non-finite log-prob")]
    NonFinite { index: usize },
}

/// `(r - mean) / max(std, floor)` with the population std.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(std_floor);
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// `min(δ·A, clip(δ, 1-ε_l, 1+ε_h)·A)`.
pub fn token_term(delta: f64, advantage: f64, params: &GrpoParams) -> f64 {
    let clipped = delta.clamp(1.0 - params.eps_low, 1.0 + params.eps_high);
    (delta * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutput {
    pub text: String,
    pub logp_policy: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub reward: RewardBreakdown,
}

impl RolloutOutput {
    pub fn len(&self) -> usize {
        self.logp_policy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp_policy.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question: String,
    pub outputs: Vec<RolloutOutput>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.outputs.is_empty() {
            return Err(GrpoError::EmptyGroup);
        }
        for (index, o) in self.outputs.iter().enumerate() {
            if o.logp_policy.len() != o.logp_ref.len() {
                return Err(GrpoError::LengthMismatch {
                    index,
                    policy: o.logp_policy.len(),
                    reference: o.logp_ref.len(),
                });
            }
            if o.logp_policy.iter().chain(&o.logp_ref).any(|v| !v.is_finite()) {
                return Err(GrpoError::NonFinite { index });
            }
        }
        Ok(())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| o.reward.total).collect()
    }

    pub fn advantages(&self, params: &GrpoParams) -> Vec<f64> {
        group_advantages(&self.rewards(), params.std_floor)
    }
}

/// Per-token surrogate terms, one row per output.
pub fn token_terms(group: &RolloutGroup, params: &GrpoParams) -> Result<Vec<Vec<f64>>, GrpoError> {
    group.validate()?;
    let adv = group.advantages(params);
    Ok(group
        .outputs
        .iter()
        .zip(adv)
        .map(|(o, a)| {
            o.logp_policy
                .iter()
                .zip(&o.logp_ref)
                .map(|(p, r)| token_term((p - r).exp(), a, params))
                .collect()
        })
        .collect())
}

/// Token-count-normalized sum of the clipped terms over the whole group.
pub fn grpo_surrogate(group: &RolloutGroup, params: &GrpoParams) -> Result<f64, GrpoError> {
    let terms = token_terms(group, params)?;
    let tokens: usize = terms.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Ok(0.0);
    }
    Ok(terms.iter().flatten().sum::<f64>() / tokens as f64)
}

/// Source of per-token log-probs for an output given its context.
pub trait TokenScorer: Send + Sync {
    fn logprobs(&self, context: &str, output: &str) -> Vec<f64>;
}

/// Deterministic stand-in scorer: whitespace tokens, log-probs derived from
/// a hash of (salt, context, position, token).
#[derive(Debug, Clone, Copy, Default)]
pub struct HashScorer {
    pub salt: u64,
}

impl TokenScorer for HashScorer {
    fn logprobs(&self, context: &str, output: &str) -> Vec<f64> {
        output
            .split_whitespace()
            .enumerate()
            .map(|(i, tok)| {
                let mut h = Sha256::new();
                h.update(self.salt.to_be_bytes());
                h.update(context.as_bytes());
                h.update((i as u64).to_be_bytes());
                h.update(tok.as_bytes());
                let d = h.finalize();
                let v = u16::from_be_bytes([d[0], d[1]]);
                -0.01 - f64::from(v) / 65535.0 * 3.0
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::reward_total;

    fn output(reward: f64, logp: Vec<f64>) -> RolloutOutput {
        let mut r = reward_total(false, false, false, &GrpoParams::default());
        r.total = reward;
        RolloutOutput {
            text: String::new(),
            logp_ref: logp.clone(),
            logp_policy: logp,
            reward: r,
        }
    }

    #[test]
    fn two_output_advantages() {
        let a = group_advantages(&[1.8, 0.5], 1e-6);
        assert!((a[0] - 1.0).abs() < 1e-12 && (a[1] + 1.0).abs() < 1e-12);
        assert_eq!(group_advantages(&[0.7], 1e-6), vec![0.0]);
    }

    #[test]
    fn unit_ratio_closed_form() {
        let g = RolloutGroup {
            question: String::new(),
            outputs: vec![output(1.8, vec![-1.0; 3]), output(0.5, vec![-2.0; 5])],
        };
        let s = grpo_surrogate(&g, &GrpoParams::default()).unwrap();
        assert!((s - (3.0 - 5.0) / 8.0).abs() < 1e-12);
    }

    #[test]
    fn mismatch_is_an_error() {
        let mut o = output(1.0, vec![-1.0; 2]);
        o.logp_ref.pop();
        let g = RolloutGroup {
            question: String::new(),
            outputs: vec![o],
        };
        assert!(matches!(grpo_surrogate(&g, &GrpoParams::default()), Err(GrpoError::LengthMismatch { .. })));
    }

    #[test]
    fn scorer_is_deterministic() {
        let s = HashScorer { salt: 1 };
        assert_eq!(s.logprobs("c", "a b c"), s.logprobs("c", "a b c"));
        assert_eq!(s.logprobs("c", "a b c").len(), 3);
        assert!(s.logprobs("c", "a b").iter().all(|v| *v < 0.0));
    }
}
