//! Policy-gradient learners for the general agents.
//!
//! Policies output logits; action probabilities are their softmax. `Pg`
//! is REINFORCE on discounted shaped returns, `Ac` subtracts a learned
//! value baseline. Both add an entropy bonus.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envcore::{discounted_returns, JointTrajectory, Observation, SlotShape};
use crate::nn::{log_softmax, softmax, Activation, Branch, Layer, Network, NnError, Topology};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Pg,
    Ac,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pg => "pg",
            Self::Ac => "ac",
        }
    }
}

/// Linearly decaying exploration rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_div: f64,
}

impl ExplorationSchedule {
    pub fn new(eps_start: f64, eps_end: f64, eps_div: f64) -> Self {
        Self { eps_start, eps_end, eps_div }
    }

    pub fn none() -> Self {
        Self::new(0.0, 0.0, 1.0)
    }

    pub fn epsilon(&self, episode: u64) -> f64 {
        (self.eps_start - (self.eps_start - self.eps_end) * episode as f64 / self.eps_div).max(self.eps_end)
    }
}

pub fn shaped_reward(extrinsic: f64, shaping: f64) -> f64 {
    extrinsic + shaping
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentGradients {
    pub policy: Vec<f64>,
    pub value: Option<Vec<f64>>,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentPolicy {
    pub algorithm: Algorithm,
    pub net: Network,
    pub value: Option<Network>,
    n_actions: usize,
}

impl AgentPolicy {
    /// Dense trunk for flat observations. A grid slot is first passed
    /// through a 3x3 convolution; other slots feed the trunk directly.
    pub fn topology(shapes: &[SlotShape], hidden: &[usize], act: Activation, outputs: usize) -> Topology {
        let mut branches = Vec::new();
        let mut width = 0;
        for (k, s) in shapes.iter().enumerate() {
            match *s {
                SlotShape::Flat(len) => {
                    branches.push(Branch { input: k, input_len: len, layers: vec![] });
                    width += len;
                }
                SlotShape::Grid { channels, height, width: w } => {
                    let conv = Layer::Conv3x3 { channels, height, width: w, filters: 6, activation: act };
                    width += conv.output_len();
                    branches.push(Branch { input: k, input_len: s.len(), layers: vec![conv] });
                }
            }
        }
        let mut trunk = Vec::new();
        for &h in hidden {
            trunk.push(Layer::dense(width, h, act));
            width = h;
        }
        Topology { branches, trunk, heads: vec![vec![Layer::dense(width, outputs, Activation::Linear)]] }
    }

    pub fn new(
        algorithm: Algorithm,
        shapes: &[SlotShape],
        n_actions: usize,
        hidden: &[usize],
        act: Activation,
        rng: &mut Rng,
    ) -> Result<Self, NnError> {
        let net = Network::new(Self::topology(shapes, hidden, act, n_actions), rng)?;
        let value = match algorithm {
            Algorithm::Pg => None,
            Algorithm::Ac => Some(Network::new(Self::topology(shapes, hidden, act, 1), rng)?),
        };
        Ok(Self { algorithm, net, value, n_actions })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn logits(&self, obs: &Observation) -> Result<Vec<f64>, NnError> {
        Ok(self.net.forward(&obs.slots, &self.net.initial_state())?.0.swap_remove(0))
    }

    pub fn probabilities(&self, obs: &Observation) -> Result<Vec<f64>, NnError> {
        Ok(softmax(&self.logits(obs)?))
    }

    /// Epsilon-greedy over the policy: with probability `eps` a uniform
    /// action, otherwise a sample from the softmax.
    pub fn select_action(&self, obs: &Observation, eps: f64, rng: &mut Rng) -> Result<usize, NnError> {
        let probs = self.probabilities(obs)?;
        if rng.random::<f64>() < eps {
            return Ok(rng.random_range(0..self.n_actions));
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(a);
            }
        }
        Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
    }

    /// Most probable action; ties go to the lowest index.
    pub fn greedy_action(&self, obs: &Observation) -> Result<usize, NnError> {
        let logits = self.logits(obs)?;
        Ok((0..logits.len()).fold(0, |best, a| if logits[a] > logits[best] { a } else { best }))
    }

    fn batch(trajectories: &[JointTrajectory], agent: usize, gamma: f64) -> Result<Vec<(Vec<&Observation>, Vec<usize>, Vec<f64>)>, crate::Error> {
        if trajectories.is_empty() || trajectories.iter().any(JointTrajectory::is_empty) {
            return Err(crate::Error::EmptyTrajectory);
        }
        Ok(trajectories
            .iter()
            .map(|t| {
                let obs = t.steps.iter().map(|s| &s.observations[agent]).collect();
                let actions = t.steps.iter().map(|s| s.actions[agent]).collect();
                let shaped: Vec<f64> = t.steps.iter().map(|s| s.shaped_rewards[agent]).collect();
                (obs, actions, discounted_returns(&shaped, gamma))
            })
            .collect())
    }

    fn baseline(&self, obs: &Observation) -> Result<f64, NnError> {
        match &self.value {
            Some(v) => Ok(v.forward(&obs.slots, &v.initial_state())?.0[0][0]),
            None => Ok(0.0),
        }
    }

    /// `mean_t[-A_t log pi(a_t|o_t) - beta H(pi(.|o_t))]` averaged over
    /// episodes, evaluated at `params`.
    pub fn surrogate_loss(&self, params: &[f64], trajectories: &[JointTrajectory], agent: usize, gamma: f64, beta: f64) -> Result<f64, crate::Error> {
        let net = Network::with_params(self.net.topology().clone(), params.to_vec())?;
        let batch = Self::batch(trajectories, agent, gamma)?;
        let mut total = 0.0;
        for (obs, actions, returns) in &batch {
            let t = obs.len() as f64;
            for k in 0..obs.len() {
                let z = net.forward(&obs[k].slots, &net.initial_state())?.0.swap_remove(0);
                let lp = log_softmax(&z);
                let ent: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
                let adv = returns[k] - self.baseline(obs[k])?;
                total += (-adv * lp[actions[k]] - beta * ent) / t;
            }
        }
        Ok(total / batch.len() as f64)
    }

    /// Gradients (to be descended) of the surrogate loss and of the value
    /// regression `mean_t (V(o_t) - G_t)^2 / 2`.
    pub fn gradients(&self, trajectories: &[JointTrajectory], agent: usize, gamma: f64, beta: f64) -> Result<AgentGradients, crate::Error> {
        let batch = Self::batch(trajectories, agent, gamma)?;
        let nb = batch.len() as f64;
        let mut policy = vec![0.0; self.net.param_count()];
        let mut value = self.value.as_ref().map(|v| vec![0.0; v.param_count()]);
        let mut mean_entropy = 0.0;
        let mut net = self.net.clone();
        let mut vnet = self.value.clone();
        for (obs, actions, returns) in &batch {
            let scale = 1.0 / (obs.len() as f64 * nb);
            for k in 0..obs.len() {
                let z = net.forward_cached(&obs[k].slots, &self.net.initial_state())?.0.swap_remove(0);
                let lp = log_softmax(&z);
                let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                let ent: f64 = -p.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
                mean_entropy += ent * scale;
                let v = match vnet.as_mut() {
                    Some(vn) => vn.forward_cached(&obs[k].slots, &vn.initial_state())?.0[0][0],
                    None => 0.0,
                };
                let adv = returns[k] - v;
                let up: Vec<f64> = (0..p.len())
                    .map(|j| {
                        let onehot = if j == actions[k] { 1.0 } else { 0.0 };
                        scale * (-adv * (onehot - p[j]) + beta * p[j] * (lp[j] + ent))
                    })
                    .collect();
                let g = net.backward(&[up])?;
                policy.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                if let (Some(vn), Some(vg)) = (vnet.as_mut(), value.as_mut()) {
                    let g = vn.backward(&[vec![(v - returns[k]) * scale]])?;
                    vg.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(AgentGradients { policy, value, mean_entropy })
    }
}
