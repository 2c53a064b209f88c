//! The centralized tax planner.
//!
//! Each step the planner sees the global state, the joint action, the bank
//! level and the agents' extrinsic rewards, and picks per-agent tax rates
//! `theta`, allowance weights `delta` (on the simplex) and the share of the
//! bank paid out this step. [`apply_shaping`] turns that into per-agent
//! shaping terms through a bank ledger.
//!
//! Ledger arithmetic is done on a dyadic grid (multiples of 2^-32), so the
//! conservation identity `sum r_hat = sum r - (balance' - balance)` holds
//! bit-exactly whenever the rewards themselves lie on that grid (integer
//! rewards always do).

use rand::Rng as _;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::envcore::{discounted_returns, JointTrajectory, SlotShape};
use crate::nn::{Activation, Branch, Layer, Network, NnError, RecurrentState, Topology};
use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapingError {
    #[error("planner action invalid: {0}")]
    InvalidAction(String),
    #[error("expected {expected} rewards, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("deposit {deposit} would drive bank balance {balance} negative")]
    NegativeBank { balance: f64, deposit: f64 },
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerObservation {
    pub global: Vec<f64>,
    pub actions: Vec<usize>,
    pub bank: f64,
    /// Extrinsic (pre-shaping) rewards of the step.
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerAction {
    pub theta: Vec<f64>,
    pub delta: Vec<f64>,
    pub bank_ratio: f64,
}

impl PlannerAction {
    /// No tax, no payout.
    pub fn neutral(n: usize) -> Self {
        Self { theta: vec![0.0; n], delta: vec![1.0 / n as f64; n], bank_ratio: 0.0 }
    }

    pub fn validate(&self, n: usize) -> Result<(), ShapingError> {
        let bad = |m: String| Err(ShapingError::InvalidAction(m));
        if self.theta.len() != n || self.delta.len() != n {
            return bad(format!("expected {n} rates, got theta {} delta {}", self.theta.len(), self.delta.len()));
        }
        if !self.theta.iter().all(|t| (0.0..=1.0).contains(t)) {
            return bad(format!("theta outside [0,1]: {:?}", self.theta));
        }
        if !(0.0..=1.0).contains(&self.bank_ratio) {
            return bad(format!("bank_ratio outside [0,1]: {}", self.bank_ratio));
        }
        if self.delta.iter().any(|d| !(*d >= 0.0)) || (self.delta.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("delta not on the simplex: {:?}", self.delta));
        }
        Ok(())
    }
}

/// What to do when negative rewards (rebates) would overdraw the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverdraftPolicy {
    /// Fail with [`ShapingError::NegativeBank`].
    #[default]
    Reject,
    /// Shrink the rebates proportionally so the balance lands at zero.
    ScaleRebates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub deposit: f64,
    pub withdrawal: f64,
    pub balance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BankLedger {
    pub balance: f64,
    pub entries: Vec<LedgerEntry>,
}

impl BankLedger {
    pub fn with_balance(balance: f64) -> Self {
        Self { balance: quantize(balance.max(0.0)), entries: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapingOutcome {
    pub shaping: Vec<f64>,
    pub shaped: Vec<f64>,
    /// Per-agent tax actually levied (negative for rebates).
    pub tax: Vec<f64>,
    pub allowance: Vec<f64>,
    pub deposit: f64,
    pub withdrawal: f64,
}

const GRID: f64 = 4_294_967_296.0; // 2^32

fn quantize(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

fn quantize_toward_zero(x: f64) -> f64 {
    (x * GRID).trunc() / GRID
}

fn quantize_down(x: f64) -> f64 {
    (x * GRID).floor() / GRID
}

/// Shaping with the default [`OverdraftPolicy::Reject`].
pub fn apply_shaping(rewards: &[f64], action: &PlannerAction, ledger: &mut BankLedger) -> Result<ShapingOutcome, ShapingError> {
    apply_shaping_with(rewards, action, ledger, OverdraftPolicy::Reject)
}

/// Collects `theta_i r_i` from every agent into the bank, pays out
/// `bank_ratio` of the post-deposit balance split by `delta`, and returns
/// `F_i = allowance_i - tax_i`. The ledger is left untouched on error.
pub fn apply_shaping_with(
    rewards: &[f64],
    action: &PlannerAction,
    ledger: &mut BankLedger,
    policy: OverdraftPolicy,
) -> Result<ShapingOutcome, ShapingError> {
    let n = rewards.len();
    action.validate(n)?;
    if let Some(&r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(ShapingError::NonFiniteReward(r));
    }
    let mut tax: Vec<f64> = rewards.iter().zip(&action.theta).map(|(r, t)| quantize(t * r)).collect();
    let mut deposit: f64 = tax.iter().sum();
    if ledger.balance + deposit < 0.0 {
        match policy {
            OverdraftPolicy::Reject => return Err(ShapingError::NegativeBank { balance: ledger.balance, deposit }),
            OverdraftPolicy::ScaleRebates => {
                let positive: f64 = tax.iter().filter(|t| **t > 0.0).sum();
                let negative: f64 = tax.iter().filter(|t| **t < 0.0).sum();
                let scale = (ledger.balance + positive) / -negative;
                for t in tax.iter_mut().filter(|t| **t < 0.0) {
                    *t = quantize_toward_zero(*t * scale);
                }
                deposit = tax.iter().sum();
            }
        }
    }
    let pool = ledger.balance + deposit;
    let withdrawal = quantize_down(action.bank_ratio * pool).clamp(0.0, pool);
    let mut allowance: Vec<f64> = action.delta.iter().map(|d| quantize_down(d * withdrawal)).collect();
    let residual = withdrawal - allowance.iter().sum::<f64>();
    let top = (0..n).fold(0, |best, i| if action.delta[i] > action.delta[best] { i } else { best });
    allowance[top] += residual;
    let shaping: Vec<f64> = allowance.iter().zip(&tax).map(|(a, t)| a - t).collect();
    let shaped = rewards.iter().zip(&shaping).map(|(r, f)| r + f).collect();
    ledger.balance = pool - withdrawal;
    ledger.entries.push(LedgerEntry { deposit, withdrawal, balance: ledger.balance });
    Ok(ShapingOutcome { shaping, shaped, tax, allowance, deposit, withdrawal })
}

/// `|sum_t sum_i F_i^t|`.
pub fn balance_penalty<'a>(shaping: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    shaping.into_iter().flatten().sum::<f64>().abs()
}

pub fn trajectory_balance_penalty(trajectory: &JointTrajectory) -> f64 {
    balance_penalty(trajectory.steps.iter().map(|s| s.shaping.as_slice()))
}

/// The planner's reward for a step: the agents' total extrinsic reward.
pub fn planner_reward(rewards: &[f64]) -> f64 {
    rewards.iter().sum()
}

/// Trigamma function by upward recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0 + x2 / x * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Keeps Beta/Dirichlet parameters away from degenerate values.
const MEAN_FLOOR: f64 = 1e-4;
const SAMPLE_FLOOR: f64 = 1e-9;

fn clamp_mean(mu: f64) -> (f64, bool) {
    let c = mu.clamp(MEAN_FLOOR, 1.0 - MEAN_FLOOR);
    (c, c == mu)
}

fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Beta with mean `mu` and concentration `kappa`: log-density of `x`, its
/// derivative in `mu`, the entropy and its derivative in `mu`.
fn beta_terms(mu: f64, kappa: f64, x: f64) -> (f64, f64, f64, f64) {
    let (m, live) = clamp_mean(mu);
    let (a, b) = (kappa * m, kappa * (1.0 - m));
    let logp = (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta_fn(a, b);
    let (da, db) = (x.ln() - digamma(a) + digamma(a + b), (1.0 - x).ln() - digamma(b) + digamma(a + b));
    let ent = ln_beta_fn(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) + (a + b - 2.0) * digamma(a + b);
    let t_ab = trigamma(a + b);
    let dha = -(a - 1.0) * trigamma(a) + (a + b - 2.0) * t_ab;
    let dhb = -(b - 1.0) * trigamma(b) + (a + b - 2.0) * t_ab;
    let live = if live { 1.0 } else { 0.0 };
    (logp, live * kappa * (da - db), ent, live * kappa * (dha - dhb))
}

/// Dirichlet with mean `p` and concentration `kappa`: log-density of `x`,
/// gradient in `p`, entropy and its gradient in `p`.
fn dirichlet_terms(p: &[f64], kappa: f64, x: &[f64]) -> (f64, Vec<f64>, f64, Vec<f64>) {
    let k = p.len() as f64;
    let alpha: Vec<f64> = p.iter().map(|&pi| kappa * pi.max(MEAN_FLOOR)).collect();
    let live: Vec<f64> = p.iter().map(|&pi| if pi >= MEAN_FLOOR { 1.0 } else { 0.0 }).collect();
    let a0: f64 = alpha.iter().sum();
    let (psi0, tri0) = (digamma(a0), trigamma(a0));
    let ln_b: f64 = alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(a0);
    let logp = -ln_b + alpha.iter().zip(x).map(|(a, xi)| (a - 1.0) * xi.ln()).sum::<f64>();
    let dlogp = alpha.iter().zip(x).zip(&live).map(|((&a, xi), l)| l * kappa * (psi0 - digamma(a) + xi.ln())).collect();
    let ent = ln_b + (a0 - k) * psi0 - alpha.iter().map(|&a| (a - 1.0) * digamma(a)).sum::<f64>();
    let dent = alpha.iter().zip(&live).map(|(&a, l)| l * kappa * ((a0 - k) * tri0 - (a - 1.0) * trigamma(a))).collect();
    (logp, dlogp, ent, dent)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerSettings {
    /// Concentration of the Beta distributions over `theta` and `bank_ratio`.
    pub kappa: f64,
    /// Concentration of the Dirichlet over `delta`.
    pub kappa_delta: f64,
    pub hidden_activation: Activation,
    /// Start from zeroed output layers (theta 0.5, uniform delta, ratio 0.5).
    pub zero_heads: bool,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self { kappa: 20.0, kappa_delta: 20.0, hidden_activation: Activation::Relu, zero_heads: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerHyper {
    pub gamma: f64,
    /// Entropy bonus weight.
    pub beta: f64,
    /// Weight of the balance penalty.
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerGradients {
    pub policy: Vec<f64>,
    pub value: Vec<f64>,
    pub mean_penalty: f64,
    pub mean_entropy: f64,
}

/// Stochastic planner policy with a separate value network.
#[derive(Debug, Clone, PartialEq)]
pub struct TaxPlanner {
    n_agents: usize,
    n_actions: usize,
    global_shape: SlotShape,
    pub settings: PlannerSettings,
    pub policy: Network,
    pub value: Network,
    /// Running baseline for the balance penalty.
    pub penalty_baseline: f64,
}

impl TaxPlanner {
    /// Flat global observations get the dense architecture; grid
    /// observations get a convolutional branch and an LSTM trunk.
    pub fn topology(global: &SlotShape, n_agents: usize, n_actions: usize, act: Activation, heads: &[(usize, Activation)]) -> Topology {
        let joint = n_agents * n_actions;
        match *global {
            SlotShape::Flat(len) => Topology {
                branches: vec![
                    Branch { input: 0, input_len: len, layers: vec![Layer::dense(len, 64, act)] },
                    Branch { input: 1, input_len: joint, layers: vec![Layer::dense(joint, 32, act)] },
                    Branch { input: 2, input_len: 1, layers: vec![Layer::dense(1, 32, act)] },
                    Branch { input: 3, input_len: n_agents, layers: vec![Layer::dense(n_agents, 32, act)] },
                ],
                trunk: vec![Layer::dense(64 + 96, 32, act)],
                heads: heads.iter().map(|&(n, a)| vec![Layer::dense(32, n, a)]).collect(),
            },
            SlotShape::Grid { channels, height, width } => {
                let conv_out = 6 * (height - 2) * (width - 2);
                let two = |n: usize| vec![Layer::dense(n, 32, act), Layer::dense(32, 32, act)];
                Topology {
                    branches: vec![
                        Branch {
                            input: 0,
                            input_len: channels * height * width,
                            layers: vec![Layer::Conv3x3 { channels, height, width, filters: 6, activation: act }],
                        },
                        Branch { input: 1, input_len: joint, layers: two(joint) },
                        Branch { input: 2, input_len: 1, layers: two(1) },
                        Branch { input: 3, input_len: n_agents, layers: two(n_agents) },
                    ],
                    trunk: vec![Layer::Lstm { inputs: conv_out + 96, cell: 128 }],
                    heads: heads.iter().map(|&(n, a)| vec![Layer::dense(128, n, a)]).collect(),
                }
            }
        }
    }

    pub fn new(global: SlotShape, n_agents: usize, n_actions: usize, settings: PlannerSettings, rng: &mut Rng) -> Result<Self, NnError> {
        let act = settings.hidden_activation;
        let heads = [(1, Activation::Sigmoid), (n_agents, Activation::Sigmoid), (n_agents, Activation::Softmax)];
        let mut policy = Network::new(Self::topology(&global, n_agents, n_actions, act, &heads), rng)?;
        if settings.zero_heads {
            policy.zero_head_outputs();
        }
        let value = Network::new(Self::topology(&global, n_agents, n_actions, act, &[(1, Activation::Linear)]), rng)?;
        Ok(Self { n_agents, n_actions, global_shape: global, settings, policy, value, penalty_baseline: 0.0 })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn global_shape(&self) -> &SlotShape {
        &self.global_shape
    }

    /// Network input slots: global state, one-hot joint action, bank
    /// (as `sign(b) ln(1+|b|)`), extrinsic rewards.
    pub fn encode(&self, obs: &PlannerObservation) -> Result<Vec<Vec<f64>>, NnError> {
        if obs.actions.len() != self.n_agents || obs.rewards.len() != self.n_agents {
            return Err(NnError::ShapeMismatch {
                what: "planner observation agents".into(),
                expected: self.n_agents,
                got: obs.actions.len().min(obs.rewards.len()),
            });
        }
        let mut joint = vec![0.0; self.n_agents * self.n_actions];
        for (i, &a) in obs.actions.iter().enumerate() {
            if a >= self.n_actions {
                return Err(NnError::ShapeMismatch { what: "planner observed action".into(), expected: self.n_actions, got: a });
            }
            joint[i * self.n_actions + a] = 1.0;
        }
        let bank = obs.bank.signum() * obs.bank.abs().ln_1p();
        Ok(vec![obs.global.clone(), joint, vec![bank], obs.rewards.clone()])
    }

    pub fn initial_state(&self) -> RecurrentState {
        self.policy.initial_state()
    }

    /// Distribution means for one observation.
    fn heads(&self, obs: &PlannerObservation, state: &RecurrentState) -> Result<(Vec<Vec<f64>>, RecurrentState), NnError> {
        self.policy.forward(&self.encode(obs)?, state)
    }

    /// Deterministic action: the mean of every distribution.
    pub fn act_mean(&self, obs: &PlannerObservation, state: &RecurrentState) -> Result<(PlannerAction, RecurrentState), NnError> {
        let (out, next) = self.heads(obs, state)?;
        Ok((PlannerAction { bank_ratio: out[0][0], theta: out[1].clone(), delta: out[2].clone() }, next))
    }

    /// Samples `theta`, `bank_ratio` from Beta and `delta` from Dirichlet
    /// distributions centred on the network outputs.
    pub fn act_sample(&self, obs: &PlannerObservation, state: &RecurrentState, rng: &mut Rng) -> Result<(PlannerAction, RecurrentState), NnError> {
        let (out, next) = self.heads(obs, state)?;
        let kappa = self.settings.kappa;
        let mut beta = |mu: f64| {
            let m = clamp_mean(mu).0;
            let x: f64 = Beta::new(kappa * m, kappa * (1.0 - m)).expect("valid beta").sample(rng);
            x.clamp(SAMPLE_FLOOR, 1.0 - SAMPLE_FLOOR)
        };
        let bank_ratio = beta(out[0][0]);
        let theta = out[1].iter().map(|&m| beta(m)).collect();
        let mut delta: Vec<f64> = out[2]
            .iter()
            .map(|&p| {
                let g: f64 = Gamma::new(self.settings.kappa_delta * p.max(MEAN_FLOOR), 1.0).expect("valid gamma").sample(rng);
                g.max(SAMPLE_FLOOR)
            })
            .collect();
        let total: f64 = delta.iter().sum();
        delta.iter_mut().for_each(|d| *d /= total);
        Ok((PlannerAction { theta, delta, bank_ratio }, next))
    }

    /// Log-probability of `action` and entropy, given head outputs, with
    /// the upstream gradients `coef_logp * dlogp + coef_ent * dent`.
    fn score(&self, out: &[Vec<f64>], action: &PlannerAction, coef_logp: f64, coef_ent: f64) -> (f64, f64, Vec<Vec<f64>>) {
        let kappa = self.settings.kappa;
        let mut logp = 0.0;
        let mut ent = 0.0;
        let mut up = vec![vec![0.0; 1], vec![0.0; self.n_agents], vec![0.0; self.n_agents]];
        let (l, dl, e, de) = beta_terms(out[0][0], kappa, action.bank_ratio);
        logp += l;
        ent += e;
        up[0][0] = coef_logp * dl + coef_ent * de;
        for i in 0..self.n_agents {
            let (l, dl, e, de) = beta_terms(out[1][i], kappa, action.theta[i]);
            logp += l;
            ent += e;
            up[1][i] = coef_logp * dl + coef_ent * de;
        }
        let (l, dl, e, de) = dirichlet_terms(&out[2], self.settings.kappa_delta, &action.delta);
        logp += l;
        ent += e;
        for i in 0..self.n_agents {
            up[2][i] = coef_logp * dl[i] + coef_ent * de[i];
        }
        (logp, ent, up)
    }

    fn episode_inputs<'a>(&self, traj: &'a JointTrajectory) -> Result<(Vec<Vec<Vec<f64>>>, Vec<&'a PlannerAction>), crate::Error> {
        let mut inputs = Vec::with_capacity(traj.len());
        let mut actions = Vec::with_capacity(traj.len());
        for s in &traj.steps {
            let p = s.planner.as_ref().ok_or_else(|| NnError::Topology("trajectory has no planner records".into()))?;
            inputs.push(self.encode(&p.observation)?);
            actions.push(&p.action);
        }
        Ok((inputs, actions))
    }

    /// Surrogate loss whose gradient in the policy parameters is the
    /// planner update direction, averaged over `trajectories`:
    /// `mean_t[-(A_t - eta (f - b)) log pi(a_t|o_t) - beta H_t]`, where
    /// `A_t` is the discounted planner return minus the value baseline,
    /// `f` the episode's balance penalty and `b` its running baseline.
    pub fn surrogate_loss(&self, policy_params: &[f64], trajectories: &[JointTrajectory], hp: PlannerHyper) -> Result<f64, crate::Error> {
        let net = Network::with_params(self.policy.topology().clone(), policy_params.to_vec())?;
        let mut total = 0.0;
        for traj in trajectories {
            let (inputs, actions) = self.episode_inputs(traj)?;
            let (adv, coef_f) = self.advantages(traj, &inputs, hp)?;
            let tape = net.forward_sequence(&inputs, &net.initial_state())?;
            let t = inputs.len() as f64;
            for (k, out) in tape.outputs.iter().enumerate() {
                let (logp, ent, _) = self.score(out, actions[k], 0.0, 0.0);
                total += (-(adv[k] - coef_f) * logp - hp.beta * ent) / t;
            }
        }
        Ok(total / trajectories.len() as f64)
    }

    fn advantages(&self, traj: &JointTrajectory, inputs: &[Vec<Vec<f64>>], hp: PlannerHyper) -> Result<(Vec<f64>, f64), crate::Error> {
        let rp: Vec<f64> = traj.steps.iter().map(|s| planner_reward(&s.rewards)).collect();
        let returns = discounted_returns(&rp, hp.gamma);
        let values = self.value.forward_sequence(inputs, &self.value.initial_state())?;
        let adv = returns.iter().zip(&values.outputs).map(|(g, v)| g - v[0][0]).collect();
        let f = trajectory_balance_penalty(traj);
        Ok((adv, hp.eta * (f - self.penalty_baseline)))
    }

    /// Policy and value gradients (to be descended) for a batch of
    /// episodes. Parameters are not modified.
    pub fn gradients(&self, trajectories: &[JointTrajectory], hp: PlannerHyper) -> Result<PlannerGradients, crate::Error> {
        if trajectories.is_empty() || trajectories.iter().any(JointTrajectory::is_empty) {
            return Err(crate::Error::EmptyTrajectory);
        }
        let mut policy = vec![0.0; self.policy.param_count()];
        let mut value = vec![0.0; self.value.param_count()];
        let mut mean_penalty = 0.0;
        let mut mean_entropy = 0.0;
        let batch = trajectories.len() as f64;
        for traj in trajectories {
            let (inputs, actions) = self.episode_inputs(traj)?;
            let t = inputs.len() as f64;
            let rp: Vec<f64> = traj.steps.iter().map(|s| planner_reward(&s.rewards)).collect();
            let returns = discounted_returns(&rp, hp.gamma);
            let vtape = self.value.forward_sequence(&inputs, &self.value.initial_state())?;
            let f = trajectory_balance_penalty(traj);
            let coef_f = hp.eta * (f - self.penalty_baseline);
            mean_penalty += f / batch;
            let tape = self.policy.forward_sequence(&inputs, &self.policy.initial_state())?;
            let mut upstream = Vec::with_capacity(inputs.len());
            let mut vup = Vec::with_capacity(inputs.len());
            for (k, out) in tape.outputs.iter().enumerate() {
                let v = vtape.outputs[k][0][0];
                let adv = returns[k] - v;
                let scale = 1.0 / (t * batch);
                let (_, ent, up) = self.score(out, actions[k], -(adv - coef_f) * scale, -hp.beta * scale);
                mean_entropy += ent / (t * batch);
                upstream.push(up);
                vup.push(vec![vec![(v - returns[k]) * scale]]);
            }
            self.policy.backward_sequence(&tape, &upstream, &mut policy)?;
            self.value.backward_sequence(&vtape, &vup, &mut value)?;
        }
        Ok(PlannerGradients { policy, value, mean_penalty, mean_entropy })
    }
}

/// Random valid planner action, for tests and benchmarks.
pub fn random_action(n: usize, rng: &mut Rng) -> PlannerAction {
    let theta = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut delta: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = delta.iter().sum();
    delta.iter_mut().for_each(|d| *d /= s);
    PlannerAction { theta, delta, bank_ratio: rng.random() }
}
