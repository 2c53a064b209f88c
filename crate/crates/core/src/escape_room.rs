//! Escape Room ER(N, M).
//!
//! Each agent picks one of three locations per step. Moving costs
//! `move_cost`; every agent that ends the step at the door while at least
//! `M` agents end the step at the lever receives `door_reward`, and that
//! success ends the episode. Both conditions are evaluated on post-move
//! positions of the same step, and the door reward stacks with the move
//! cost of an agent that walked to the door.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envcore::{
    check_joint_action, EnvError, EnvStepResult, Environment, GlobalObservation, Observation, SlotShape,
    StateSnapshot,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Location {
    Start = 0,
    Lever = 1,
    Door = 2,
}

impl Location {
    pub const ALL: [Location; 3] = [Location::Start, Location::Lever, Location::Door];

    pub fn from_index(i: usize) -> Option<Location> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Location::Start => "start",
            Location::Lever => "lever",
            Location::Door => "door",
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ERConfig {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub door_reward: f64,
    pub move_cost: f64,
}

impl ERConfig {
    pub fn new(n: usize, m: usize) -> Self {
        Self { n, m, horizon: 5, door_reward: 10.0, move_cost: -1.0 }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.m < 1 || self.n <= self.m {
            return Err(EnvError::Params(format!("escape room needs N > M >= 1, got N={} M={}", self.n, self.m)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ERState {
    pub positions: Vec<Location>,
    pub t: usize,
    pub opened: bool,
}

impl ERState {
    pub fn initial(n: usize) -> Self {
        Self { positions: vec![Location::Start; n], t: 0, opened: false }
    }

    pub fn is_done(&self, config: &ERConfig) -> bool {
        self.opened || self.t >= config.horizon
    }

    /// Multi-hot global encoding: one 3-way one-hot block per agent.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = vec![0.0; 3 * self.positions.len()];
        for (i, loc) in self.positions.iter().enumerate() {
            v[3 * i + loc.index()] = 1.0;
        }
        v
    }
}

/// One simultaneous step. Returns the successor state, per-agent rewards and
/// whether the episode is over.
pub fn er_step(config: &ERConfig, state: &ERState, joint_action: &[Location]) -> Result<(ERState, Vec<f64>, bool), EnvError> {
    if state.is_done(config) {
        return Err(EnvError::StepAfterDone);
    }
    if joint_action.len() != state.positions.len() {
        return Err(EnvError::WrongActionCount { expected: state.positions.len(), got: joint_action.len() });
    }
    let at_lever = joint_action.iter().filter(|&&l| l == Location::Lever).count();
    let success = at_lever >= config.m && joint_action.contains(&Location::Door);
    let rewards = state
        .positions
        .iter()
        .zip(joint_action)
        .map(|(&from, &to)| {
            let mut r = if from == to { 0.0 } else { config.move_cost };
            if success && to == Location::Door {
                r += config.door_reward;
            }
            r
        })
        .collect();
    let next = ERState { positions: joint_action.to_vec(), t: state.t + 1, opened: success };
    let done = next.is_done(config);
    Ok((next, rewards, done))
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("exhaustive search limited to N <= {max_n} and horizon <= {max_horizon} (got N={n}, horizon={horizon})")]
pub struct SearchSpaceTooLarge {
    pub n: usize,
    pub horizon: usize,
    pub max_n: usize,
    pub max_horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePlan {
    pub collective_return: f64,
    /// Joint actions, one per step, up to and including the terminal step.
    pub plan: Vec<Vec<Location>>,
}

pub const ORACLE_MAX_N: usize = 5;
pub const ORACLE_MAX_HORIZON: usize = 6;

/// Best undiscounted collective return over all joint-action sequences.
///
/// Searches the full tree of joint actions from the initial state, memoizing
/// on (positions, t). Ties prefer the shorter plan, then the
/// lexicographically first one.
pub fn er_oracle(config: &ERConfig) -> Result<OraclePlan, SearchSpaceTooLarge> {
    if config.n > ORACLE_MAX_N || config.horizon > ORACLE_MAX_HORIZON {
        return Err(SearchSpaceTooLarge {
            n: config.n,
            horizon: config.horizon,
            max_n: ORACLE_MAX_N,
            max_horizon: ORACLE_MAX_HORIZON,
        });
    }
    let joint_actions = all_joint_actions(config.n);
    let mut memo = BTreeMap::new();
    let (value, plan) = best_from(config, &ERState::initial(config.n), &joint_actions, &mut memo);
    Ok(OraclePlan { collective_return: value, plan })
}

type Memo = BTreeMap<(Vec<Location>, usize), (f64, Vec<Vec<Location>>)>;

fn best_from(config: &ERConfig, state: &ERState, joint_actions: &[Vec<Location>], memo: &mut Memo) -> (f64, Vec<Vec<Location>>) {
    if state.is_done(config) {
        return (0.0, Vec::new());
    }
    let key = (state.positions.clone(), state.t);
    if let Some(hit) = memo.get(&key) {
        return hit.clone();
    }
    let mut best: Option<(f64, Vec<Vec<Location>>)> = None;
    for ja in joint_actions {
        let (next, rewards, done) = er_step(config, state, ja).expect("state not done");
        let immediate: f64 = rewards.iter().sum();
        let (future, tail) = if done { (0.0, Vec::new()) } else { best_from(config, &next, joint_actions, memo) };
        let value = immediate + future;
        let len = tail.len() + 1;
        if best.as_ref().is_none_or(|(v, p)| value > *v || (value == *v && len < p.len())) {
            let mut plan = Vec::with_capacity(tail.len() + 1);
            plan.push(ja.clone());
            plan.extend(tail);
            best = Some((value, plan));
        }
    }
    let best = best.expect("at least one joint action");
    memo.insert(key, best.clone());
    best
}

/// All joint actions in lexicographic order (agent 0 most significant).
pub fn all_joint_actions(n: usize) -> Vec<Vec<Location>> {
    let count = 3usize.pow(n as u32);
    (0..count)
        .map(|mut code| {
            let mut ja = vec![Location::Start; n];
            for slot in ja.iter_mut().rev() {
                *slot = Location::ALL[code % 3];
                code /= 3;
            }
            ja
        })
        .collect()
}

/// ER as an [`Environment`]. Agents observe the full multi-hot state.
#[derive(Debug, Clone)]
pub struct EscapeRoom {
    config: ERConfig,
    state: ERState,
}

impl EscapeRoom {
    pub fn new(config: ERConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let state = ERState::initial(config.n);
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &ERConfig {
        &self.config
    }

    pub fn state(&self) -> &ERState {
        &self.state
    }

    fn observations(&self) -> Vec<Observation> {
        let enc = self.state.encode();
        (0..self.config.n).map(|_| Observation::single(enc.clone())).collect()
    }
}

impl Environment for EscapeRoom {
    fn n_agents(&self) -> usize {
        self.config.n
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn max_steps(&self) -> usize {
        self.config.horizon
    }

    fn observation_shapes(&self) -> Vec<SlotShape> {
        vec![SlotShape::Flat(3 * self.config.n)]
    }

    fn global_shape(&self) -> SlotShape {
        SlotShape::Flat(3 * self.config.n)
    }

    fn reset(&mut self, _seed: u64) -> Vec<Observation> {
        self.state = ERState::initial(self.config.n);
        self.observations()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStepResult, EnvError> {
        if self.state.is_done(&self.config) {
            return Err(EnvError::StepAfterDone);
        }
        check_joint_action(joint_action, self.config.n, 3)?;
        let locs: Vec<Location> = joint_action.iter().map(|&a| Location::ALL[a]).collect();
        let (next, rewards, done) = er_step(&self.config, &self.state, &locs)?;
        self.state = next;
        let mut info = BTreeMap::new();
        info.insert("opened".to_string(), if self.state.opened { 1.0 } else { 0.0 });
        Ok(EnvStepResult { observations: self.observations(), rewards, done, info })
    }

    fn is_done(&self) -> bool {
        self.state.is_done(&self.config)
    }

    fn global_observation(&self) -> GlobalObservation {
        GlobalObservation { shape: self.global_shape(), data: self.state.encode() }
    }

    fn snapshot(&self) -> StateSnapshot {
        StateSnapshot::EscapeRoom {
            t: self.state.t,
            positions: self.state.positions.iter().map(|l| l.name().to_string()).collect(),
            opened: self.state.opened,
        }
    }

    fn render(&self) -> String {
        let mut out = format!("t={} opened={}\n", self.state.t, self.state.opened);
        for (i, loc) in self.state.positions.iter().enumerate() {
            out.push_str(&format!("{}: {}\n", i + 1, loc));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Location::*;

    fn cfg(n: usize, m: usize) -> ERConfig {
        ERConfig::new(n, m)
    }

    #[test]
    fn staying_put_is_free() {
        let (_, r, done) = er_step(&cfg(2, 1), &ERState::initial(2), &[Start, Start]).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
        assert!(!done);
    }

    #[test]
    fn lever_and_door_opens_in_one_step() {
        let (s, r, done) = er_step(&cfg(2, 1), &ERState::initial(2), &[Lever, Door]).unwrap();
        assert_eq!(r, vec![-1.0, 9.0]);
        assert!(done && s.opened);
    }

    #[test]
    fn door_without_lever_support_fails() {
        let (_, r, done) = er_step(&cfg(2, 1), &ERState::initial(2), &[Start, Door]).unwrap();
        assert_eq!(r, vec![0.0, -1.0]);
        assert!(!done);
    }

    #[test]
    fn three_agents_two_levers() {
        let (_, r, done) = er_step(&cfg(3, 2), &ERState::initial(3), &[Lever, Lever, Door]).unwrap();
        assert_eq!(r, vec![-1.0, -1.0, 9.0]);
        assert!(done);
        let (_, r, done) = er_step(&cfg(3, 2), &ERState::initial(3), &[Lever, Start, Door]).unwrap();
        assert_eq!(r, vec![-1.0, 0.0, -1.0]);
        assert!(!done);
    }

    #[test]
    fn stationary_door_agent_gets_full_reward() {
        let state = ERState { positions: vec![Lever, Door], t: 1, opened: false };
        let (_, r, done) = er_step(&cfg(2, 1), &state, &[Lever, Door]).unwrap();
        assert_eq!(r, vec![0.0, 10.0]);
        assert!(done);
    }

    #[test]
    fn step_after_done_is_rejected() {
        let state = ERState { positions: vec![Lever, Door], t: 1, opened: true };
        assert_eq!(er_step(&cfg(2, 1), &state, &[Start, Start]), Err(EnvError::StepAfterDone));
        let state = ERState { positions: vec![Start, Start], t: 5, opened: false };
        assert_eq!(er_step(&cfg(2, 1), &state, &[Start, Start]), Err(EnvError::StepAfterDone));
    }

    #[test]
    fn oracle_values() {
        let two = er_oracle(&cfg(2, 1)).unwrap();
        assert_eq!(two.collective_return, 8.0);
        assert_eq!(two.plan, vec![vec![Lever, Door]]);
        let three = er_oracle(&cfg(3, 2)).unwrap();
        assert_eq!(three.collective_return, 7.0);
        assert_eq!(three.plan, vec![vec![Lever, Lever, Door]]);
    }

    #[test]
    fn oracle_with_zero_horizon() {
        let mut c = cfg(2, 1);
        c.horizon = 0;
        let o = er_oracle(&c).unwrap();
        assert_eq!(o.collective_return, 0.0);
        assert!(o.plan.is_empty());
    }

    #[test]
    fn oracle_rejects_large_instances() {
        assert!(er_oracle(&cfg(6, 1)).is_err());
        let mut c = cfg(2, 1);
        c.horizon = 7;
        assert!(er_oracle(&c).is_err());
    }

    #[test]
    fn oracle_plan_replays_to_its_value() {
        for (n, m) in [(2, 1), (3, 1), (3, 2), (4, 2), (5, 3)] {
            let c = cfg(n, m);
            let o = er_oracle(&c).unwrap();
            let mut s = ERState::initial(n);
            let mut total = 0.0;
            for ja in &o.plan {
                let (next, r, _) = er_step(&c, &s, ja).unwrap();
                total += r.iter().sum::<f64>();
                s = next;
            }
            assert_eq!(total, o.collective_return, "ER({n},{m})");
        }
    }

    #[test]
    fn env_rejects_out_of_range_actions() {
        let mut env = EscapeRoom::new(cfg(2, 1)).unwrap();
        env.reset(7);
        assert!(matches!(env.step(&[0, 3]), Err(EnvError::InvalidAction { agent: 1, .. })));
    }

    #[test]
    fn env_reset_observes_start_state() {
        let mut env = EscapeRoom::new(cfg(2, 1)).unwrap();
        let obs = env.reset(7);
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].slots[0], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(obs[0], obs[1]);
    }

    #[test]
    fn env_ends_at_horizon() {
        let mut env = EscapeRoom::new(cfg(2, 1)).unwrap();
        env.reset(0);
        for t in 0..5 {
            let res = env.step(&[0, 0]).unwrap();
            assert_eq!(res.done, t == 4);
        }
        assert_eq!(env.step(&[0, 0]), Err(EnvError::StepAfterDone));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(EscapeRoom::new(cfg(2, 2)).is_err());
        assert!(EscapeRoom::new(ERConfig::new(2, 0)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn loc() -> impl Strategy<Value = Location> {
            (0usize..3).prop_map(|i| Location::ALL[i])
        }

        proptest! {
            #[test]
            fn rewards_stay_in_support(
                from in proptest::collection::vec(loc(), 3),
                to in proptest::collection::vec(loc(), 3),
            ) {
                let c = cfg(3, 1);
                let s = ERState { positions: from, t: 0, opened: false };
                let (_, r, _) = er_step(&c, &s, &to).unwrap();
                for x in r {
                    prop_assert!([0.0, -1.0, 10.0, 9.0].contains(&x));
                }
            }

            #[test]
            fn more_lever_agents_still_open(
                to in proptest::collection::vec(loc(), 3),
            ) {
                // Opening for N=3 implies opening when a fourth agent also pulls the lever.
                let c3 = cfg(3, 1);
                let c4 = cfg(4, 1);
                let (_, _, d3) = er_step(&c3, &ERState::initial(3), &to).unwrap();
                let mut to4 = to.clone();
                to4.push(Lever);
                let (s4, _, _) = er_step(&c4, &ERState::initial(4), &to4).unwrap();
                let s3 = er_step(&c3, &ERState::initial(3), &to).unwrap().0;
                if d3 && s3.opened {
                    prop_assert!(s4.opened);
                }
            }
        }
    }
}
