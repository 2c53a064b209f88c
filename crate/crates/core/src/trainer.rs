//! Training loop: rollouts with shaping, agent updates, planner update.
//!
//! Within an iteration every gradient is computed from the parameters the
//! rollouts were generated with, and all updates are applied together at
//! the end. Each episode draws from its own random stream keyed by the run
//! seed and the global episode index, so results do not depend on how
//! rollouts are spread across threads.

use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::AgentPolicy;
use crate::cleanup::Cleanup;
use crate::envcore::{Environment, JointTrajectory, PlannerStep, TimestepRecord};
use crate::escape_room::EscapeRoom;
use crate::expio::{EnvConfig, ExperimentConfig, MetricsRow};
use crate::nn::{clip_grad_norm, optimizer_step, Checkpoint, Network, OptimizerState};
use crate::planner::{apply_shaping_with, BankLedger, OverdraftPolicy, PlannerHyper, PlannerObservation, PlannerSettings, TaxPlanner};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub fn make_env(cfg: &EnvConfig) -> Result<Box<dyn Environment>> {
    Ok(match cfg {
        EnvConfig::EscapeRoom(c) => Box::new(EscapeRoom::new(c.clone())?),
        EnvConfig::Cleanup { params, .. } => Box::new(Cleanup::new(params.clone())?),
    })
}

/// Thread pool for rollouts, sized by `LOPT_THREADS` when set.
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("LOPT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
            b = b.num_threads(n);
        }
        b.build().expect("rollout thread pool")
    })
}

/// How agents and planner pick actions during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RolloutMode {
    /// Epsilon-greedy agents, sampling planner.
    Explore { epsilon: f64 },
    /// Most probable agent actions, planner distribution means.
    Greedy,
}

/// Frozen planner used by a rollout.
pub struct RolloutPlanner<'a> {
    pub planner: &'a TaxPlanner,
    pub initial_bank: f64,
    pub overdraft: OverdraftPolicy,
}

/// Plays one episode from `env.reset(env_seed)`.
pub fn rollout(
    env: &mut dyn Environment,
    env_seed: u64,
    agents: &[AgentPolicy],
    planner: Option<&RolloutPlanner<'_>>,
    mode: RolloutMode,
    rng: &mut Rng,
) -> Result<JointTrajectory> {
    let n = env.n_agents();
    if agents.len() != n {
        return Err(crate::envcore::EnvError::WrongActionCount { expected: n, got: agents.len() }.into());
    }
    let mut obs = env.reset(env_seed);
    let mut ledger = BankLedger::with_balance(planner.map_or(0.0, |p| p.initial_bank));
    let mut pstate = planner.map(|p| p.planner.initial_state());
    let mut steps = Vec::with_capacity(env.max_steps());
    while !env.is_done() {
        let mut actions = Vec::with_capacity(n);
        for (agent, o) in agents.iter().zip(&obs) {
            actions.push(match mode {
                RolloutMode::Explore { epsilon } => agent.select_action(o, epsilon, rng)?,
                RolloutMode::Greedy => agent.greedy_action(o)?,
            });
        }
        let state = env.snapshot();
        let global = planner.map(|_| env.global_observation().data);
        let res = env.step(&actions)?;
        let mut record = TimestepRecord {
            state,
            observations: obs,
            actions,
            rewards: res.rewards.clone(),
            planner: None,
            shaping: vec![0.0; n],
            shaped_rewards: res.rewards.clone(),
            bank: ledger.balance,
            tax: 0.0,
            allowance: 0.0,
        };
        if let (Some(p), Some(global)) = (planner, global) {
            let pobs = PlannerObservation { global, actions: record.actions.clone(), bank: ledger.balance, rewards: res.rewards.clone() };
            let s = pstate.take().expect("planner state");
            let (action, next) = match mode {
                RolloutMode::Explore { .. } => p.planner.act_sample(&pobs, &s, rng)?,
                RolloutMode::Greedy => p.planner.act_mean(&pobs, &s)?,
            };
            pstate = Some(next);
            let out = apply_shaping_with(&res.rewards, &action, &mut ledger, p.overdraft)?;
            record.shaping = out.shaping;
            record.shaped_rewards = out.shaped;
            record.bank = ledger.balance;
            record.tax = out.deposit;
            record.allowance = out.withdrawal;
            record.planner = Some(PlannerStep { observation: pobs, action });
        }
        steps.push(record);
        obs = res.observations;
    }
    Ok(JointTrajectory { steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_collective: f64,
    pub std_collective: f64,
    pub collective: Vec<f64>,
    pub mean_per_agent: Vec<f64>,
    pub mean_tax: f64,
    pub mean_allowance: f64,
}

impl EvalSummary {
    pub fn from_trajectories(trajs: &[JointTrajectory]) -> Self {
        let k = trajs.len() as f64;
        let collective: Vec<f64> = trajs.iter().map(JointTrajectory::collective_extrinsic).collect();
        let mean = collective.iter().sum::<f64>() / k;
        let var = collective.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / k;
        let n = trajs.first().map_or(0, JointTrajectory::n_agents);
        let mut per_agent = vec![0.0; n];
        for t in trajs {
            for s in &t.steps {
                per_agent.iter_mut().zip(&s.rewards).for_each(|(a, r)| *a += r / k);
            }
        }
        Self {
            episodes: trajs.len(),
            mean_collective: mean,
            std_collective: var.sqrt(),
            collective,
            mean_per_agent: per_agent,
            mean_tax: trajs.iter().map(JointTrajectory::total_tax).sum::<f64>() / k,
            mean_allowance: trajs.iter().map(JointTrajectory::total_allowance).sum::<f64>() / k,
        }
    }
}

struct AgentSlot {
    policy: AgentPolicy,
    opt: OptimizerState,
    value_opt: OptimizerState,
}

struct PlannerSlot {
    planner: TaxPlanner,
    opt: OptimizerState,
    value_opt: OptimizerState,
}

/// Everything that evolves during training.
pub struct TrainState {
    pub config: ExperimentConfig,
    pub iteration: u64,
    pub episodes: u64,
    /// Cumulative environment steps; the learning-rate schedules run on it.
    pub env_steps: u64,
    /// Bank carried between episodes when `planner.persist_bank` is set.
    pub bank: f64,
    agents: Vec<AgentSlot>,
    planner: Option<PlannerSlot>,
}

const EPISODE_STREAM: u64 = 0x5EED_0001;
const EVAL_STREAM: u64 = 0x5EED_00E7;

impl TrainState {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let env = make_env(&config.env)?;
        let shapes = env.observation_shapes();
        let mut init = rng::stream(config.train.seed, 0);
        let a = &config.agent;
        let agents = (0..env.n_agents())
            .map(|_| {
                Ok(AgentSlot {
                    policy: AgentPolicy::new(a.algorithm, &shapes, env.n_actions(), &a.hidden, a.activation, &mut init)?,
                    opt: OptimizerState::default(),
                    value_opt: OptimizerState::default(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let planner = if config.planner.enabled {
            let p = &config.planner;
            let settings = PlannerSettings { kappa: p.kappa, kappa_delta: p.kappa_delta, hidden_activation: p.activation, zero_heads: true };
            Some(PlannerSlot {
                planner: TaxPlanner::new(env.global_shape(), env.n_agents(), env.n_actions(), settings, &mut init)?,
                opt: OptimizerState::default(),
                value_opt: OptimizerState::default(),
            })
        } else {
            None
        };
        Ok(Self { config, iteration: 0, episodes: 0, env_steps: 0, bank: 0.0, agents, planner })
    }

    pub fn agents(&self) -> Vec<&AgentPolicy> {
        self.agents.iter().map(|a| &a.policy).collect()
    }

    pub fn planner(&self) -> Option<&TaxPlanner> {
        self.planner.as_ref().map(|p| &p.planner)
    }

    pub fn planner_mut(&mut self) -> Option<&mut TaxPlanner> {
        self.planner.as_mut().map(|p| &mut p.planner)
    }

    fn policies(&self) -> Vec<AgentPolicy> {
        self.agents.iter().map(|a| a.policy.clone()).collect()
    }

    fn rollout_planner(&self, initial_bank: f64) -> Option<RolloutPlanner<'_>> {
        self.planner.as_ref().map(|p| RolloutPlanner { planner: &p.planner, initial_bank, overdraft: self.config.planner.overdraft })
    }

    pub fn epsilon(&self) -> f64 {
        self.config.agent.exploration.epsilon(self.episodes)
    }

    /// One iteration: rollouts, gradients from the current parameters,
    /// then all updates at once. Returns one metrics row per episode.
    pub fn train_iteration(&mut self) -> Result<Vec<MetricsRow>> {
        let cfg = self.config.clone();
        let batch = cfg.train.episodes_per_iter;
        let policies = self.policies();
        let eps: Vec<f64> = (0..batch as u64).map(|k| cfg.agent.exploration.epsilon(self.episodes + k)).collect();
        let first = self.episodes;
        let seed = cfg.train.seed;
        let trajs: Vec<JointTrajectory> = if cfg.planner.persist_bank {
            // episodes depend on each other through the bank
            let mut out = Vec::with_capacity(batch);
            for k in 0..batch {
                let rp = self.rollout_planner(self.bank);
                let t = run_episode(&cfg.env, seed, first + k as u64, &policies, rp.as_ref(), RolloutMode::Explore { epsilon: eps[k] })?;
                self.bank = t.final_bank();
                out.push(t);
            }
            out
        } else {
            let rp = self.rollout_planner(0.0);
            pool().install(|| {
                (0..batch)
                    .into_par_iter()
                    .map(|k| run_episode(&cfg.env, seed, first + k as u64, &policies, rp.as_ref(), RolloutMode::Explore { epsilon: eps[k] }))
                    .collect::<Result<Vec<_>>>()
            })?
        };

        let gamma = cfg.train.gamma;
        let agent_grads = self
            .agents
            .par_iter()
            .enumerate()
            .map(|(i, a)| a.policy.gradients(&trajs, i, gamma, cfg.agent.entropy))
            .collect::<Result<Vec<_>>>()?;
        let planner_grads = match &self.planner {
            Some(p) if self.iteration >= cfg.planner.warmup_iterations => {
                let hp = PlannerHyper { gamma, beta: cfg.planner.entropy, eta: cfg.planner.eta };
                Some(p.planner.gradients(&trajs, hp)?)
            }
            _ => None,
        };

        let steps: u64 = trajs.iter().map(|t| t.len() as u64).sum();
        let clip = cfg.train.grad_clip;
        let agent_rate = cfg.agent.learning_rate.at(self.env_steps);
        for (i, (slot, mut g)) in self.agents.iter_mut().zip(agent_grads).enumerate() {
            clip_grad_norm(&mut g.policy, clip);
            optimizer_step(slot.policy.net.params_mut(), &g.policy, cfg.agent.optimizer, &mut slot.opt, agent_rate);
            if let (Some(v), Some(mut vg)) = (slot.policy.value.as_mut(), g.value) {
                clip_grad_norm(&mut vg, clip);
                optimizer_step(v.params_mut(), &vg, cfg.agent.optimizer, &mut slot.value_opt, agent_rate);
            }
            check_finite(&slot.policy.net, &format!("agent {i} policy"), self.iteration)?;
            if let Some(v) = &slot.policy.value {
                check_finite(v, &format!("agent {i} value"), self.iteration)?;
            }
        }
        if let (Some(slot), Some(mut g)) = (self.planner.as_mut(), planner_grads) {
            let rate = cfg.planner.learning_rate.at(self.env_steps);
            clip_grad_norm(&mut g.policy, clip);
            clip_grad_norm(&mut g.value, clip);
            optimizer_step(slot.planner.policy.params_mut(), &g.policy, cfg.planner.optimizer, &mut slot.opt, rate);
            optimizer_step(slot.planner.value.params_mut(), &g.value, cfg.planner.optimizer, &mut slot.value_opt, rate);
            slot.planner.penalty_baseline = 0.9 * slot.planner.penalty_baseline + 0.1 * g.mean_penalty;
            check_finite(&slot.planner.policy, "planner policy", self.iteration)?;
            check_finite(&slot.planner.value, "planner value", self.iteration)?;
        }

        let rows = trajs
            .iter()
            .enumerate()
            .map(|(k, t)| MetricsRow::from_trajectory(self.iteration, first + k as u64, t, eps[k]))
            .collect();
        self.iteration += 1;
        self.episodes += batch as u64;
        self.env_steps += steps;
        Ok(rows)
    }

    /// Greedy rollouts (agents take their most probable action, the
    /// planner its distribution means) on evaluation seeds.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalSummary> {
        Ok(EvalSummary::from_trajectories(&self.evaluation_rollouts(episodes)?))
    }

    pub fn evaluation_rollouts(&self, episodes: usize) -> Result<Vec<JointTrajectory>> {
        if episodes == 0 {
            return Err(crate::expio::ConfigError::Validation { field: "episodes".into(), message: "must be at least 1".into() }.into());
        }
        let policies = self.policies();
        let rp = self.rollout_planner(if self.config.planner.persist_bank { self.bank } else { 0.0 });
        let seed = rng::mix(self.config.train.seed, EVAL_STREAM);
        pool().install(|| {
            (0..episodes as u64)
                .into_par_iter()
                .map(|k| run_episode(&self.config.env, seed, k, &policies, rp.as_ref(), RolloutMode::Greedy))
                .collect()
        })
    }

    pub fn checkpoint(&self) -> TrainCheckpoint {
        TrainCheckpoint {
            version: 1,
            config: self.config.to_text(),
            iteration: self.iteration,
            episodes: self.episodes,
            env_steps: self.env_steps,
            bank: self.bank,
            agents: self
                .agents
                .iter()
                .map(|a| AgentCheckpoint { policy: a.policy.net.checkpoint(), value: a.policy.value.as_ref().map(Network::checkpoint) })
                .collect(),
            planner: self.planner.as_ref().map(|p| PlannerCheckpoint {
                policy: p.planner.policy.checkpoint(),
                value: p.planner.value.checkpoint(),
                penalty_baseline: p.planner.penalty_baseline,
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.checkpoint())?)?;
        Ok(())
    }

    /// Rebuilds a state from a checkpoint. Optimizer moments start afresh.
    pub fn from_checkpoint(ck: &TrainCheckpoint) -> Result<Self> {
        if ck.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let config = ExperimentConfig::parse(&ck.config)?;
        let mut state = Self::new(config)?;
        if ck.agents.len() != state.agents.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} agents, config {}", ck.agents.len(), state.agents.len())));
        }
        for (slot, a) in state.agents.iter_mut().zip(&ck.agents) {
            slot.policy.net.restore(&a.policy)?;
            match (slot.policy.value.as_mut(), &a.value) {
                (Some(v), Some(c)) => v.restore(c)?,
                (None, None) => {}
                _ => return Err(Error::Checkpoint("value network presence differs from config".into())),
            }
        }
        match (state.planner.as_mut(), &ck.planner) {
            (Some(slot), Some(p)) => {
                slot.planner.policy.restore(&p.policy)?;
                slot.planner.value.restore(&p.value)?;
                slot.planner.penalty_baseline = p.penalty_baseline;
            }
            (None, None) => {}
            _ => return Err(Error::Checkpoint("planner presence differs from config".into())),
        }
        state.iteration = ck.iteration;
        state.episodes = ck.episodes;
        state.env_steps = ck.env_steps;
        state.bank = ck.bank;
        Ok(state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: TrainCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ck)
    }
}

fn run_episode(
    env_cfg: &EnvConfig,
    seed: u64,
    episode: u64,
    agents: &[AgentPolicy],
    planner: Option<&RolloutPlanner<'_>>,
    mode: RolloutMode,
) -> Result<JointTrajectory> {
    let mut env = make_env(env_cfg)?;
    let mut rng = rng::stream(rng::mix(seed, EPISODE_STREAM), episode);
    rollout(env.as_mut(), rng::mix(seed, episode), agents, planner, mode, &mut rng)
}

fn check_finite(net: &Network, name: &str, iteration: u64) -> Result<()> {
    if net.params().iter().all(|p| p.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteParameters { network: name.to_string(), iteration })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub policy: Checkpoint,
    pub value: Option<Checkpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerCheckpoint {
    pub policy: Checkpoint,
    pub value: Checkpoint,
    pub penalty_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub version: u32,
    /// Full experiment config in the text format.
    pub config: String,
    pub iteration: u64,
    pub episodes: u64,
    pub env_steps: u64,
    pub bank: f64,
    pub agents: Vec<AgentCheckpoint>,
    pub planner: Option<PlannerCheckpoint>,
}

/// Runs `config.train.iterations` iterations, calling `on_rows` with each
/// iteration's metrics.
pub fn train(config: ExperimentConfig, mut on_rows: impl FnMut(&TrainState, &[MetricsRow]) -> Result<()>) -> Result<TrainState> {
    let mut state = TrainState::new(config)?;
    for _ in 0..state.config.train.iterations {
        let rows = state.train_iteration()?;
        on_rows(&state, &rows)?;
    }
    Ok(state)
}
