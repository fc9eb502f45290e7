//! Pipelines behind the `vthinker` binary.

pub mod commands;
pub mod config;
pub mod mock_policy;

pub use commands::{
    cmd_eval, cmd_evolve, cmd_perception, cmd_rollout, cmd_stats, EvolveOptions, EvolveSummary, RolloutSummary,
};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }

    /// `map_err` adapter naming the failing stage.
    pub fn stage<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> CliError {
        move |e| CliError::Stage {
            stage,
            message: e.to_string(),
        }
    }
}
