//! Environment contract and trajectory bookkeeping shared by both games.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{PlannerAction, PlannerObservation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called after the episode finished")]
    StepAfterDone,
    #[error("agent {agent}: action {action} out of range (0..{n_actions})")]
    InvalidAction { agent: usize, action: usize, n_actions: usize },
    #[error("expected {expected} actions, got {got}")]
    WrongActionCount { expected: usize, got: usize },
    #[error("map line {line}: {message}")]
    Map { line: usize, message: String },
    #[error("invalid environment parameter: {0}")]
    Params(String),
}

/// Per-agent network input. Each slot feeds one input branch of the agent's
/// network (for example, a local grid view and a vector of visible actions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub slots: Vec<Vec<f64>>,
}

impl Observation {
    pub fn single(v: Vec<f64>) -> Self {
        Self { slots: vec![v] }
    }
}

/// Shape of one observation slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotShape {
    Flat(usize),
    Grid { channels: usize, height: usize, width: usize },
}

impl SlotShape {
    pub fn len(&self) -> usize {
        match *self {
            SlotShape::Flat(n) => n,
            SlotShape::Grid { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Global state encoding handed to the planner.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalObservation {
    pub shape: SlotShape,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStepResult {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub info: BTreeMap<String, f64>,
}

/// Compact, serializable picture of the environment state at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum StateSnapshot {
    EscapeRoom {
        t: usize,
        positions: Vec<String>,
        opened: bool,
    },
    Cleanup {
        t: usize,
        apple_count: usize,
        waste_count: usize,
        waste_density: f64,
        /// (row, col, orientation glyph) per agent
        agents: Vec<(usize, usize, char)>,
    },
}

pub trait Environment: Send {
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn max_steps(&self) -> usize;
    /// Shapes of the per-agent observation slots.
    fn observation_shapes(&self) -> Vec<SlotShape>;
    /// Shape of the planner's global observation.
    fn global_shape(&self) -> SlotShape;

    fn reset(&mut self, seed: u64) -> Vec<Observation>;
    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStepResult, EnvError>;
    fn is_done(&self) -> bool;
    fn global_observation(&self) -> GlobalObservation;
    fn snapshot(&self) -> StateSnapshot;
    fn render(&self) -> String;
}

/// Validates a joint action against the agent and action counts.
pub fn check_joint_action(joint_action: &[usize], n_agents: usize, n_actions: usize) -> Result<(), EnvError> {
    if joint_action.len() != n_agents {
        return Err(EnvError::WrongActionCount { expected: n_agents, got: joint_action.len() });
    }
    for (agent, &action) in joint_action.iter().enumerate() {
        if action >= n_actions {
            return Err(EnvError::InvalidAction { agent, action, n_actions });
        }
    }
    Ok(())
}

/// What the planner saw and did at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerStep {
    pub observation: PlannerObservation,
    pub action: PlannerAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimestepRecord {
    pub state: StateSnapshot,
    pub observations: Vec<Observation>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// `None` when the planner is disabled.
    pub planner: Option<PlannerStep>,
    pub shaping: Vec<f64>,
    pub shaped_rewards: Vec<f64>,
    /// Bank balance after this step's deposit and withdrawal.
    pub bank: f64,
    pub tax: f64,
    pub allowance: f64,
}

impl TimestepRecord {
    pub fn n_agents(&self) -> usize {
        self.rewards.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JointTrajectory {
    pub steps: Vec<TimestepRecord>,
}

impl JointTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.steps.first().map_or(0, TimestepRecord::n_agents)
    }

    /// Undiscounted sum of all agents' extrinsic rewards.
    pub fn collective_extrinsic(&self) -> f64 {
        self.steps.iter().flat_map(|s| s.rewards.iter()).sum()
    }

    pub fn total_shaping(&self) -> f64 {
        self.steps.iter().flat_map(|s| s.shaping.iter()).sum()
    }

    pub fn total_tax(&self) -> f64 {
        self.steps.iter().map(|s| s.tax).sum()
    }

    pub fn total_allowance(&self) -> f64 {
        self.steps.iter().map(|s| s.allowance).sum()
    }

    pub fn final_bank(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.bank)
    }
}

/// Per-agent discounted return `sum_t gamma^t r_i^t`, using shaped rewards
/// when `use_shaped` is set.
pub fn episode_return(trajectory: &JointTrajectory, gamma: f64, use_shaped: bool) -> Result<Vec<f64>, crate::Error> {
    if trajectory.is_empty() {
        return Err(crate::Error::EmptyTrajectory);
    }
    let mut returns = vec![0.0; trajectory.n_agents()];
    let mut discount = 1.0;
    for step in &trajectory.steps {
        let rewards = if use_shaped { &step.shaped_rewards } else { &step.rewards };
        for (ret, r) in returns.iter_mut().zip(rewards) {
            *ret += discount * r;
        }
        discount *= gamma;
    }
    Ok(returns)
}

/// Reward-to-go `G_t = r_t + gamma * G_{t+1}` for one reward sequence.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}
