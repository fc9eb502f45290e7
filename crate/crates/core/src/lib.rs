//! Core library for visual-interactive reasoning data synthesis, training
//! rollouts and benchmark scoring.

pub mod calibration;
pub mod datamodel;
pub mod executor;
pub mod expansion;
pub mod fixtures;
pub mod flywheel;
pub mod forest;
pub mod gateway;
pub mod perception;
pub mod render;
pub mod rollout;
pub mod sketch;
pub mod util;
pub mod vtbench;
