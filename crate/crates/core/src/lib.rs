//! Multi-agent reinforcement learning with a learned percentage Pigovian tax.
//!
//! A centralized tax planner observes the joint state, joint action, bank
//! balance and joint extrinsic reward, and emits per-agent tax rates, an
//! allowance split and a bank withdrawal ratio. The resulting shaping terms
//! are added to each agent's extrinsic reward before the agents learn.
//!
//! The crate ships two environments ([`escape_room`] and [`cleanup`]), an
//! exact brute-force externality oracle for normal-form games
//! ([`matrix_games`]), a small reverse-mode network core ([`nn`]), the
//! learners ([`agents`], [`planner`]), the training loop ([`trainer`]) and
//! experiment IO ([`expio`]).

pub mod agents;
pub mod cleanup;
pub mod envcore;
pub mod escape_room;
pub mod expio;
pub mod gradcheck;
pub mod matrix_games;
pub mod nn;
pub mod planner;
pub mod rng;
pub mod trainer;

mod error;

pub use envcore::{EnvError, EnvStepResult, Environment, JointTrajectory, Observation, TimestepRecord};
pub use error::Error;
pub use expio::ExperimentConfig;
pub use planner::{BankLedger, PlannerAction};

pub type Result<T, E = Error> = std::result::Result<T, E>;
