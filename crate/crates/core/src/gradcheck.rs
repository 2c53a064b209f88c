//! Finite-difference gradient suites, shared by the `gradcheck` command and
//! the test suite.
//!
//! Every suite uses smooth activations so that central differences are not
//! thrown off by ReLU kinks.

use rand::Rng as _;

use crate::agents::{AgentPolicy, Algorithm};
use crate::cleanup::{Cleanup, CleanupParams, CleanupSetting};
use crate::escape_room::{ERConfig, EscapeRoom};
use crate::envcore::{Environment, JointTrajectory};
use crate::nn::{grad_check, grad_check_five_point, network_grad_check, random_inputs, Activation, Branch, Layer, Network, Topology};
use crate::planner::{OverdraftPolicy, PlannerHyper, PlannerSettings, TaxPlanner};
use crate::rng::{stream, Rng};
use crate::trainer::{rollout, RolloutMode, RolloutPlanner};
use crate::Result;

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

/// Runs every suite.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        dense(seed)?,
        conv(seed)?,
        lstm(seed)?,
        agent(seed, Algorithm::Pg)?,
        agent(seed, Algorithm::Ac)?,
        agent_grid(seed)?,
        planner_dense(seed)?,
        planner_grid(seed)?,
    ])
}

fn network_suite(name: &'static str, topology: Topology, steps: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = stream(seed, 1);
    let net = Network::new(topology, &mut rng)?;
    let inputs: Vec<_> = (0..steps).map(|_| random_inputs(net.topology(), &mut rng)).collect();
    let rep = network_grad_check(&net, &inputs, &mut rng)?;
    Ok(SuiteResult { name, checked: net.param_count(), max_rel_err: rep.max_rel_err })
}

pub fn dense(seed: u64) -> Result<SuiteResult> {
    let t = Topology::mlp(5, &[7, 6], Activation::Tanh, &[(3, Activation::Linear), (2, Activation::Sigmoid), (4, Activation::Softmax)]);
    network_suite("dense", t, 1, seed)
}

pub fn conv(seed: u64) -> Result<SuiteResult> {
    let conv = Layer::Conv3x3 { channels: 2, height: 5, width: 4, filters: 3, activation: Activation::Tanh };
    let t = Topology {
        branches: vec![
            Branch { input: 0, input_len: 40, layers: vec![conv] },
            Branch { input: 1, input_len: 3, layers: vec![] },
        ],
        trunk: vec![Layer::dense(3 * 3 * 2 + 3, 4, Activation::Tanh)],
        heads: vec![vec![Layer::dense(4, 2, Activation::Linear)]],
    };
    network_suite("conv", t, 1, seed)
}

pub fn lstm(seed: u64) -> Result<SuiteResult> {
    let t = Topology {
        branches: vec![Branch { input: 0, input_len: 4, layers: vec![Layer::dense(4, 5, Activation::Tanh)] }],
        trunk: vec![Layer::Lstm { inputs: 5, cell: 6 }],
        heads: vec![vec![Layer::dense(6, 2, Activation::Linear)], vec![Layer::dense(6, 3, Activation::Softmax)]],
    };
    network_suite("lstm", t, 4, seed)
}

/// Agents and a sampling planner playing a few episodes.
fn episodes(env: &mut dyn Environment, agents: &[AgentPolicy], planner: Option<&TaxPlanner>, count: u64, seed: u64) -> Result<Vec<JointTrajectory>> {
    let mut rng = stream(seed, 2);
    (0..count)
        .map(|k| {
            let rp = planner.map(|p| RolloutPlanner { planner: p, initial_bank: 0.0, overdraft: OverdraftPolicy::ScaleRebates });
            rollout(env, seed + k, agents, rp.as_ref(), RolloutMode::Explore { epsilon: 0.3 }, &mut rng)
        })
        .collect()
}

fn smooth_planner(env: &dyn Environment, seed: u64) -> Result<TaxPlanner> {
    let settings = PlannerSettings { hidden_activation: Activation::Tanh, zero_heads: false, ..PlannerSettings::default() };
    let mut p = TaxPlanner::new(env.global_shape(), env.n_agents(), env.n_actions(), settings, &mut stream(seed, 3))?;
    p.penalty_baseline = 0.4;
    Ok(p)
}

fn agents_for(env: &dyn Environment, algorithm: Algorithm, seed: u64) -> Result<Vec<AgentPolicy>> {
    let mut rng = stream(seed, 4);
    (0..env.n_agents())
        .map(|_| Ok(AgentPolicy::new(algorithm, &env.observation_shapes(), env.n_actions(), &[8], Activation::Tanh, &mut rng)?))
        .collect()
}

/// Agent surrogate on Escape Room trajectories shaped by a random planner.
pub fn agent(seed: u64, algorithm: Algorithm) -> Result<SuiteResult> {
    let mut env = EscapeRoom::new(ERConfig::new(3, 2))?;
    let agents = agents_for(&env, algorithm, seed)?;
    let planner = smooth_planner(&env, seed)?;
    let trajs = episodes(&mut env, &agents, Some(&planner), 2, seed)?;
    let p = &agents[1];
    let g = p.gradients(&trajs, 1, 0.9, 0.1)?;
    let rep = grad_check(|w| p.surrogate_loss(w, &trajs, 1, 0.9, 0.1).expect("surrogate"), p.net.params(), g.policy);
    let name = match algorithm {
        Algorithm::Pg => "agent surrogate (pg)",
        Algorithm::Ac => "agent surrogate (ac)",
    };
    Ok(SuiteResult { name, checked: p.net.param_count(), max_rel_err: rep.max_rel_err })
}

fn short_cleanup() -> Result<Cleanup> {
    let mut params = CleanupParams::preset(CleanupSetting::Small7x7);
    params.max_steps = 6;
    Ok(Cleanup::new(params)?)
}

/// Agent surrogate with the convolutional view branch.
pub fn agent_grid(seed: u64) -> Result<SuiteResult> {
    let mut env = short_cleanup()?;
    let agents = agents_for(&env, Algorithm::Ac, seed)?;
    let trajs = episodes(&mut env, &agents, None, 2, seed)?;
    let p = &agents[0];
    let g = p.gradients(&trajs, 0, 0.95, 0.05)?;
    let rep = grad_check(|w| p.surrogate_loss(w, &trajs, 0, 0.95, 0.05).expect("surrogate"), p.net.params(), g.policy);
    Ok(SuiteResult { name: "agent surrogate (conv view)", checked: p.net.param_count(), max_rel_err: rep.max_rel_err })
}

/// Step for the planner suites, which use the five-point stencil: many of
/// their gradients are around 1e-6 to 1e-8 while the Beta log-densities
/// curve sharply, so two-point differences are either truncation- or
/// round-off-limited at every step.
const PLANNER_STEP: f64 = 1e-3;

/// Planner surrogate including the balance-penalty term, dense architecture.
pub fn planner_dense(seed: u64) -> Result<SuiteResult> {
    let mut env = EscapeRoom::new(ERConfig::new(2, 1))?;
    let agents = agents_for(&env, Algorithm::Pg, seed)?;
    let p = smooth_planner(&env, seed)?;
    let trajs = episodes(&mut env, &agents, Some(&p), 2, seed)?;
    let hp = PlannerHyper { gamma: 0.9, beta: 0.05, eta: 0.95 };
    let g = p.gradients(&trajs, hp)?;
    let all: Vec<usize> = (0..p.policy.param_count()).collect();
    let rep = grad_check_five_point(|w| p.surrogate_loss(w, &trajs, hp).expect("surrogate"), p.policy.params(), &g.policy, &all, PLANNER_STEP);
    Ok(SuiteResult { name: "planner surrogate (dense, with penalty)", checked: p.policy.param_count(), max_rel_err: rep.max_rel_err })
}

/// Planner surrogate on the convolutional/LSTM architecture. The network is
/// too large for a full sweep, so every head parameter and a random sample
/// of the rest are checked.
pub fn planner_grid(seed: u64) -> Result<SuiteResult> {
    let mut env = short_cleanup()?;
    let agents = agents_for(&env, Algorithm::Ac, seed)?;
    let p = smooth_planner(&env, seed)?;
    let trajs = episodes(&mut env, &agents, Some(&p), 1, seed)?;
    let hp = PlannerHyper { gamma: 0.9, beta: 0.05, eta: 0.95 };
    let g = p.gradients(&trajs, hp)?;
    let n = p.policy.param_count();
    let head_params: usize = p.policy.topology().heads.iter().flatten().map(Layer::param_count).sum();
    let mut rng: Rng = stream(seed, 5);
    let mut indices: Vec<usize> = (0..300).map(|_| rng.random_range(0..n - head_params)).collect();
    indices.extend(n - head_params..n);
    let rep = grad_check_five_point(|w| p.surrogate_loss(w, &trajs, hp).expect("surrogate"), p.policy.params(), &g.policy, &indices, PLANNER_STEP);
    Ok(SuiteResult { name: "planner surrogate (conv+lstm, with penalty)", checked: indices.len(), max_rel_err: rep.max_rel_err })
}
