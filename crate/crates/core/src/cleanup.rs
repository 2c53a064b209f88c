//! Cleanup gridworld.
//!
//! Apples grow on spawn points at a rate that falls as the river fills with
//! waste; agents earn +1 per apple and can fire a cleaning beam at the river.
//! The five-agent setting adds a fining beam (-1 to the firer on a hit, -50 to
//! the agent hit).
//!
//! Within a step, effects resolve in this order: beams fire from the pre-move
//! poses, agents move or rotate, apples under agents are collected, waste
//! spawns, then apples spawn. Waste density is the fraction of river cells
//! holding waste and is measured once per step, after collection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envcore::{
    check_joint_action, EnvError, EnvStepResult, Environment, GlobalObservation, Observation, SlotShape,
    StateSnapshot,
};
use crate::rng::{self, Rng};

pub const MAP_7X7: &str = include_str!("../maps/cleanup_7x7.txt");
pub const MAP_10X10: &str = include_str!("../maps/cleanup_10x10.txt");
pub const MAP_18X25: &str = include_str!("../maps/cleanup_18x25.txt");

/// Number of one-hot channels in symbolic observations.
pub const CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terrain {
    Floor,
    River,
    AppleSpawn,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Content {
    Nothing,
    Apple,
    Waste,
}

/// Symbolic cell code used in observations; the discriminant is the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellCode {
    Empty = 0,
    Wall = 1,
    Apple = 2,
    Waste = 3,
    River = 4,
    Agent = 5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanupMap {
    pub height: usize,
    pub width: usize,
    pub terrain: Vec<Terrain>,
    /// Start cell of agent k at index k.
    pub starts: Vec<(usize, usize)>,
}

impl CleanupMap {
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let mut lines: Vec<&str> = text.lines().collect();
        while lines.last().is_some_and(|l| l.is_empty()) {
            lines.pop();
        }
        if lines.is_empty() {
            return Err(EnvError::Map { line: 1, message: "empty map".into() });
        }
        let height = lines.len();
        let width = lines.iter().map(|l| l.chars().count()).max().unwrap_or(0);
        let mut terrain = vec![Terrain::Floor; height * width];
        let mut starts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for (r, line) in lines.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                terrain[r * width + c] = match ch {
                    ' ' => Terrain::Floor,
                    'R' => Terrain::River,
                    'P' => Terrain::AppleSpawn,
                    'W' => Terrain::Wall,
                    '1'..='9' => {
                        let k = ch.to_digit(10).unwrap();
                        if starts.insert(k, (r, c)).is_some() {
                            return Err(EnvError::Map { line: r + 1, message: format!("duplicate start '{ch}'") });
                        }
                        Terrain::Floor
                    }
                    other => {
                        return Err(EnvError::Map { line: r + 1, message: format!("unknown glyph '{other}'") });
                    }
                };
            }
        }
        let mut ordered = Vec::with_capacity(starts.len());
        for (expect, (k, pos)) in (1u32..).zip(starts) {
            if k != expect {
                return Err(EnvError::Map { line: pos.0 + 1, message: format!("start {expect} missing") });
            }
            ordered.push(pos);
        }
        Ok(Self { height, width, terrain, starts: ordered })
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnvError::Map { line: 0, message: format!("{}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    pub fn terrain_at(&self, r: usize, c: usize) -> Terrain {
        self.terrain[r * self.width + c]
    }

    pub fn river_cells(&self) -> usize {
        self.terrain.iter().filter(|&&t| t == Terrain::River).count()
    }
}

/// The four Cleanup settings of the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CleanupSetting {
    Small7x7,
    Medium10x10,
    Medium10x10Fixed,
    Large18x25,
}

impl CleanupSetting {
    pub const ALL: [CleanupSetting; 4] =
        [Self::Small7x7, Self::Medium10x10, Self::Medium10x10Fixed, Self::Large18x25];

    pub fn name(self) -> &'static str {
        match self {
            Self::Small7x7 => "7x7",
            Self::Medium10x10 => "10x10",
            Self::Medium10x10Fixed => "10x10-fixed",
            Self::Large18x25 => "18x25",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanupParams {
    pub n_agents: usize,
    pub apple_respawn_probability: f64,
    pub waste_spawn_probability: f64,
    pub threshold_depletion: f64,
    pub threshold_restoration: f64,
    pub rotation_enabled: bool,
    pub view_size: usize,
    pub max_steps: usize,
    pub fining_enabled: bool,
    /// Cap the spawn formula at `apple_respawn_probability` instead of 1.
    pub cap_apple_spawn: bool,
    /// Per-cell probabilities used to lay out waste and apples at reset.
    pub initial_waste_probability: f64,
    pub initial_apple_probability: f64,
    pub map: CleanupMap,
}

impl CleanupParams {
    pub fn preset(setting: CleanupSetting) -> Self {
        let (map, n, apple, dep, rotation, view, steps, fining) = match setting {
            CleanupSetting::Small7x7 => (MAP_7X7, 2, 0.5, 0.6, true, 4, 50, false),
            CleanupSetting::Medium10x10 => (MAP_10X10, 2, 0.3, 0.4, true, 7, 50, false),
            CleanupSetting::Medium10x10Fixed => (MAP_10X10, 2, 0.3, 0.4, false, 7, 50, false),
            CleanupSetting::Large18x25 => (MAP_18X25, 5, 0.05, 0.4, true, 7, 1000, true),
        };
        Self {
            n_agents: n,
            apple_respawn_probability: apple,
            waste_spawn_probability: 0.5,
            threshold_depletion: dep,
            threshold_restoration: 0.0,
            rotation_enabled: rotation,
            view_size: view,
            max_steps: steps,
            fining_enabled: fining,
            cap_apple_spawn: false,
            initial_waste_probability: 0.5,
            initial_apple_probability: 0.5,
            map: CleanupMap::parse(map).expect("bundled map parses"),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let probs = [
            ("apple_respawn_probability", self.apple_respawn_probability),
            ("waste_spawn_probability", self.waste_spawn_probability),
            ("threshold_depletion", self.threshold_depletion),
            ("threshold_restoration", self.threshold_restoration),
            ("initial_waste_probability", self.initial_waste_probability),
            ("initial_apple_probability", self.initial_apple_probability),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(EnvError::Params(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.threshold_restoration > self.threshold_depletion {
            return Err(EnvError::Params("threshold_restoration exceeds threshold_depletion".into()));
        }
        if self.view_size < 1 {
            return Err(EnvError::Params("view_size must be >= 1".into()));
        }
        if self.max_steps < 1 {
            return Err(EnvError::Params("max_steps must be >= 1".into()));
        }
        if self.n_agents < 1 || self.n_agents > self.map.starts.len() {
            return Err(EnvError::Params(format!(
                "{} agents but the map has {} start cells",
                self.n_agents,
                self.map.starts.len()
            )));
        }
        if self.map.river_cells() == 0 {
            return Err(EnvError::Params("map has no river cells".into()));
        }
        Ok(())
    }

    pub fn actions(&self) -> Vec<CleanupAction> {
        use CleanupAction::*;
        let mut v = if self.rotation_enabled {
            vec![Forward, Backward, StepLeft, StepRight, RotateLeft, RotateRight, Stay, Clean]
        } else {
            vec![North, East, South, West, Stay, Clean]
        };
        if self.fining_enabled {
            v.push(Fine);
        }
        v
    }

    pub fn view_width(&self) -> usize {
        2 * self.view_size + 1
    }
}

/// Apple spawn probability for a given waste density.
///
/// Zero at or above the depletion threshold, the full respawn probability at
/// or below the restoration threshold, and otherwise
/// `(1 - density) * p / (depletion - restoration)` clamped to `[0, 1]`
/// (or to `[0, p]` when `cap_apple_spawn` is set).
pub fn apple_spawn_probability(waste_density: f64, params: &CleanupParams) -> f64 {
    let p = params.apple_respawn_probability;
    if waste_density >= params.threshold_depletion {
        0.0
    } else if waste_density <= params.threshold_restoration {
        p
    } else {
        let raw = (1.0 - waste_density) * p / (params.threshold_depletion - params.threshold_restoration);
        let upper = if params.cap_apple_spawn { p } else { 1.0 };
        raw.clamp(0.0, upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    Up,
    Right,
    Down,
    Left,
}

impl Orientation {
    pub fn delta(self) -> (isize, isize) {
        match self {
            Orientation::Up => (-1, 0),
            Orientation::Right => (0, 1),
            Orientation::Down => (1, 0),
            Orientation::Left => (0, -1),
        }
    }

    pub fn clockwise(self) -> Self {
        match self {
            Orientation::Up => Orientation::Right,
            Orientation::Right => Orientation::Down,
            Orientation::Down => Orientation::Left,
            Orientation::Left => Orientation::Up,
        }
    }

    pub fn counter_clockwise(self) -> Self {
        self.clockwise().clockwise().clockwise()
    }

    pub fn glyph(self) -> char {
        match self {
            Orientation::Up => '^',
            Orientation::Right => '>',
            Orientation::Down => 'v',
            Orientation::Left => '<',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CleanupAction {
    Forward,
    Backward,
    StepLeft,
    StepRight,
    RotateLeft,
    RotateRight,
    North,
    East,
    South,
    West,
    Stay,
    Clean,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPose {
    pub row: usize,
    pub col: usize,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanupState {
    pub content: Vec<Content>,
    pub agents: Vec<AgentPose>,
    pub last_actions: Vec<Option<usize>>,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeamKind {
    Cleaning,
    Fining,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BeamTrace {
    /// Cells the beam entered, nearest first, including the blocking cell.
    pub cells: Vec<(usize, usize)>,
    pub cleaned: Option<(usize, usize)>,
    pub hit_agents: Vec<usize>,
}

/// Local view of one agent: a square window of cell codes, rotated so the
/// agent faces the top row, plus the last actions of other agents inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalView {
    pub size: usize,
    pub codes: Vec<CellCode>,
    /// (agent index, view row, view col, last action)
    pub visible_actions: Vec<(usize, usize, usize, usize)>,
}

fn offset(map: &CleanupMap, r: usize, c: usize, dr: isize, dc: isize) -> Option<(usize, usize)> {
    let nr = r as isize + dr;
    let nc = c as isize + dc;
    if nr < 0 || nc < 0 || nr >= map.height as isize || nc >= map.width as isize {
        None
    } else {
        Some((nr as usize, nc as usize))
    }
}

impl CleanupState {
    pub fn apple_count(&self) -> usize {
        self.content.iter().filter(|&&c| c == Content::Apple).count()
    }

    pub fn waste_count(&self) -> usize {
        self.content.iter().filter(|&&c| c == Content::Waste).count()
    }

    pub fn waste_density(&self, map: &CleanupMap) -> f64 {
        self.waste_count() as f64 / map.river_cells() as f64
    }

    fn agent_at(&self, r: usize, c: usize) -> Option<usize> {
        self.agents.iter().position(|a| a.row == r && a.col == c)
    }

    /// Symbolic code of a map cell, ignoring agents.
    pub fn cell_code(&self, map: &CleanupMap, r: usize, c: usize) -> CellCode {
        match (map.terrain_at(r, c), self.content[r * map.width + c]) {
            (Terrain::Wall, _) => CellCode::Wall,
            (_, Content::Apple) => CellCode::Apple,
            (_, Content::Waste) => CellCode::Waste,
            (Terrain::River, _) => CellCode::River,
            _ => CellCode::Empty,
        }
    }
}

/// Traces a beam from `agent`'s pose along its facing direction.
pub fn beam_trace(state: &CleanupState, map: &CleanupMap, agent: usize, kind: BeamKind) -> BeamTrace {
    let pose = state.agents[agent];
    let (dr, dc) = pose.orientation.delta();
    let mut trace = BeamTrace::default();
    let (mut r, mut c) = (pose.row, pose.col);
    while let Some((nr, nc)) = offset(map, r, c, dr, dc) {
        if map.terrain_at(nr, nc) == Terrain::Wall {
            break;
        }
        trace.cells.push((nr, nc));
        match kind {
            BeamKind::Cleaning => {
                if state.content[nr * map.width + nc] == Content::Waste {
                    trace.cleaned = Some((nr, nc));
                    break;
                }
            }
            BeamKind::Fining => {
                if let Some(hit) = state.agent_at(nr, nc) {
                    trace.hit_agents.push(hit);
                    break;
                }
            }
        }
        r = nr;
        c = nc;
    }
    trace
}

/// Local observation window for `agent`. Off-map cells read as walls.
pub fn observe(state: &CleanupState, params: &CleanupParams, agent: usize) -> LocalView {
    let map = &params.map;
    let v = params.view_size as isize;
    let size = params.view_width();
    let pose = state.agents[agent];
    let (fr, fc) = pose.orientation.delta();
    let (rr, rc) = (fc, -fr);
    let mut codes = Vec::with_capacity(size * size);
    let mut visible_actions = Vec::new();
    for i in 0..size {
        for j in 0..size {
            let a = i as isize - v;
            let b = j as isize - v;
            let dr = -a * fr + b * rr;
            let dc = -a * fc + b * rc;
            let code = match offset(map, pose.row, pose.col, dr, dc) {
                None => CellCode::Wall,
                Some((r, c)) => match state.agent_at(r, c) {
                    Some(other) => {
                        if other != agent {
                            if let Some(act) = state.last_actions[other] {
                                visible_actions.push((other, i, j, act));
                            }
                        }
                        CellCode::Agent
                    }
                    None => state.cell_code(map, r, c),
                },
            };
            codes.push(code);
        }
    }
    LocalView { size, codes, visible_actions }
}

fn one_hot_grid(codes: &[CellCode]) -> Vec<f64> {
    let n = codes.len();
    let mut out = vec![0.0; CHANNELS * n];
    for (k, &code) in codes.iter().enumerate() {
        out[code as usize * n + k] = 1.0;
    }
    out
}

impl LocalView {
    /// Network encoding: channel-major one-hot grid, and for each other agent
    /// (in index order) a one-hot of its last action when visible.
    pub fn encode(&self, agent: usize, n_agents: usize, n_actions: usize) -> Observation {
        let grid = one_hot_grid(&self.codes);
        let mut actions = vec![0.0; (n_agents - 1) * n_actions];
        for &(other, _, _, act) in &self.visible_actions {
            let slot = if other < agent { other } else { other - 1 };
            actions[slot * n_actions + act] = 1.0;
        }
        Observation { slots: vec![grid, actions] }
    }
}

/// Cleanup as an [`Environment`].
#[derive(Debug, Clone)]
pub struct Cleanup {
    params: CleanupParams,
    actions: Vec<CleanupAction>,
    state: CleanupState,
    rng: Rng,
}

impl Cleanup {
    pub fn new(params: CleanupParams) -> Result<Self, EnvError> {
        params.validate()?;
        let actions = params.actions();
        let n = params.n_agents;
        let state = CleanupState {
            content: vec![Content::Nothing; params.map.height * params.map.width],
            agents: params.map.starts[..n]
                .iter()
                .map(|&(row, col)| AgentPose { row, col, orientation: Orientation::Up })
                .collect(),
            last_actions: vec![None; n],
            t: 0,
        };
        let mut env = Self { params, actions, state, rng: rng::stream(0, 0) };
        env.reset(0);
        Ok(env)
    }

    pub fn params(&self) -> &CleanupParams {
        &self.params
    }

    pub fn state(&self) -> &CleanupState {
        &self.state
    }

    pub fn action_set(&self) -> &[CleanupAction] {
        &self.actions
    }

    /// Overwrites the dynamic state; used by tests and tools.
    pub fn set_state(&mut self, state: CleanupState) {
        self.state = state;
    }

    pub fn observe(&self, agent: usize) -> LocalView {
        observe(&self.state, &self.params, agent)
    }

    fn observations(&self) -> Vec<Observation> {
        let n = self.params.n_agents;
        (0..n).map(|i| self.observe(i).encode(i, n, self.actions.len())).collect()
    }

    fn idx(&self, r: usize, c: usize) -> usize {
        r * self.params.map.width + c
    }

    fn target_of(&self, pose: AgentPose, action: CleanupAction) -> (Option<(usize, usize)>, Orientation) {
        let map = &self.params.map;
        let o = pose.orientation;
        let step = |d: (isize, isize)| offset(map, pose.row, pose.col, d.0, d.1);
        let (fr, fc) = o.delta();
        match action {
            CleanupAction::Forward => (step((fr, fc)), o),
            CleanupAction::Backward => (step((-fr, -fc)), o),
            CleanupAction::StepRight => (step((fc, -fr)), o),
            CleanupAction::StepLeft => (step((-fc, fr)), o),
            CleanupAction::North => (step((-1, 0)), o),
            CleanupAction::East => (step((0, 1)), o),
            CleanupAction::South => (step((1, 0)), o),
            CleanupAction::West => (step((0, -1)), o),
            CleanupAction::RotateLeft => (None, o.counter_clockwise()),
            CleanupAction::RotateRight => (None, o.clockwise()),
            CleanupAction::Stay | CleanupAction::Clean | CleanupAction::Fine => (None, o),
        }
    }

    /// Applies one joint action; the order of effects is documented at the
    /// module level.
    fn advance(&mut self, joint_action: &[usize]) -> (Vec<f64>, BTreeMap<String, f64>) {
        let n = self.params.n_agents;
        let map = self.params.map.clone();
        let acts: Vec<CleanupAction> = joint_action.iter().map(|&a| self.actions[a]).collect();
        let mut rewards = vec![0.0; n];
        let mut info = BTreeMap::new();

        // Beams, traced against the pre-step state.
        let mut cleaned = Vec::new();
        let mut fines = 0usize;
        for (i, &act) in acts.iter().enumerate() {
            match act {
                CleanupAction::Clean => {
                    if let Some(cell) = beam_trace(&self.state, &map, i, BeamKind::Cleaning).cleaned {
                        cleaned.push(cell);
                    }
                }
                CleanupAction::Fine => {
                    let trace = beam_trace(&self.state, &map, i, BeamKind::Fining);
                    if !trace.hit_agents.is_empty() {
                        rewards[i] -= 1.0;
                        fines += 1;
                    }
                    for hit in trace.hit_agents {
                        rewards[hit] -= 50.0;
                    }
                }
                _ => {}
            }
        }
        cleaned.sort_unstable();
        cleaned.dedup();
        for &(r, c) in &cleaned {
            let k = self.idx(r, c);
            self.state.content[k] = Content::Nothing;
        }

        // Movement. Conflicting moves (same target, swaps, blocked chains)
        // leave every involved agent in place.
        let mut targets: Vec<(usize, usize)> = Vec::with_capacity(n);
        for (i, &act) in acts.iter().enumerate() {
            let pose = self.state.agents[i];
            let (target, orientation) = self.target_of(pose, act);
            let orientation = if self.params.rotation_enabled { orientation } else { Orientation::Up };
            self.state.agents[i].orientation = orientation;
            let target = match target {
                Some((r, c)) if map.terrain_at(r, c) != Terrain::Wall => (r, c),
                _ => (pose.row, pose.col),
            };
            targets.push(target);
        }
        let current: Vec<(usize, usize)> = self.state.agents.iter().map(|a| (a.row, a.col)).collect();
        let wants: Vec<bool> = (0..n).map(|i| targets[i] != current[i]).collect();
        let mut moving = wants.clone();
        for i in 0..n {
            for j in 0..n {
                if i == j || !wants[i] || !wants[j] {
                    continue;
                }
                let same_target = targets[i] == targets[j];
                let swap = targets[i] == current[j] && targets[j] == current[i];
                if same_target || swap {
                    moving[i] = false;
                }
            }
        }
        // Moves into a cell that stays occupied fail; repeat until stable.
        loop {
            let mut changed = false;
            for i in 0..n {
                if !moving[i] {
                    continue;
                }
                let blocked = (0..n).any(|j| {
                    j != i && {
                        let final_j = if moving[j] { targets[j] } else { current[j] };
                        final_j == targets[i]
                    }
                });
                if blocked {
                    moving[i] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        for i in 0..n {
            if moving[i] {
                self.state.agents[i].row = targets[i].0;
                self.state.agents[i].col = targets[i].1;
            }
        }

        // Collection.
        let mut collected = 0usize;
        for i in 0..n {
            let k = self.idx(self.state.agents[i].row, self.state.agents[i].col);
            if self.state.content[k] == Content::Apple {
                self.state.content[k] = Content::Nothing;
                rewards[i] += 1.0;
                collected += 1;
            }
        }

        // Spawning. At most one waste cell per step.
        let density = self.state.waste_density(&map);
        let occupied: Vec<usize> = self.state.agents.iter().map(|a| a.row * map.width + a.col).collect();
        if density < self.params.threshold_depletion && self.params.waste_spawn_probability > 0.0 {
            let mut candidates: Vec<usize> = (0..map.terrain.len())
                .filter(|&k| {
                    map.terrain[k] == Terrain::River && self.state.content[k] == Content::Nothing && !occupied.contains(&k)
                })
                .collect();
            candidates.shuffle(&mut self.rng);
            for k in candidates {
                if self.rng.random::<f64>() < self.params.waste_spawn_probability {
                    self.state.content[k] = Content::Waste;
                    break;
                }
            }
        }
        let p_apple = apple_spawn_probability(density, &self.params);
        if p_apple > 0.0 {
            for k in 0..map.terrain.len() {
                if map.terrain[k] == Terrain::AppleSpawn
                    && self.state.content[k] == Content::Nothing
                    && !occupied.contains(&k)
                    && self.rng.random::<f64>() < p_apple
                {
                    self.state.content[k] = Content::Apple;
                }
            }
        }

        info.insert("apples_collected".into(), collected as f64);
        info.insert("waste_cleaned".into(), cleaned.len() as f64);
        info.insert("fines".into(), fines as f64);
        info.insert("waste_density".into(), density);
        info.insert("apple_spawn_probability".into(), p_apple);
        (rewards, info)
    }
}

impl Environment for Cleanup {
    fn n_agents(&self) -> usize {
        self.params.n_agents
    }

    fn n_actions(&self) -> usize {
        self.actions.len()
    }

    fn max_steps(&self) -> usize {
        self.params.max_steps
    }

    fn observation_shapes(&self) -> Vec<SlotShape> {
        let w = self.params.view_width();
        vec![
            SlotShape::Grid { channels: CHANNELS, height: w, width: w },
            SlotShape::Flat((self.params.n_agents - 1) * self.actions.len()),
        ]
    }

    fn global_shape(&self) -> SlotShape {
        SlotShape::Grid { channels: CHANNELS, height: self.params.map.height, width: self.params.map.width }
    }

    fn reset(&mut self, seed: u64) -> Vec<Observation> {
        self.rng = rng::stream(seed, 0);
        let map = &self.params.map;
        let mut content = vec![Content::Nothing; map.terrain.len()];
        for (k, t) in map.terrain.iter().enumerate() {
            match t {
                Terrain::River => {
                    if self.rng.random::<f64>() < self.params.initial_waste_probability {
                        content[k] = Content::Waste;
                    }
                }
                Terrain::AppleSpawn => {
                    if self.rng.random::<f64>() < self.params.initial_apple_probability {
                        content[k] = Content::Apple;
                    }
                }
                _ => {}
            }
        }
        for &(r, c) in &map.starts[..self.params.n_agents] {
            content[r * map.width + c] = Content::Nothing;
        }
        self.state = CleanupState {
            content,
            agents: map.starts[..self.params.n_agents]
                .iter()
                .map(|&(row, col)| AgentPose { row, col, orientation: Orientation::Up })
                .collect(),
            last_actions: vec![None; self.params.n_agents],
            t: 0,
        };
        self.observations()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<EnvStepResult, EnvError> {
        if self.is_done() {
            return Err(EnvError::StepAfterDone);
        }
        check_joint_action(joint_action, self.params.n_agents, self.actions.len())?;
        let (rewards, info) = self.advance(joint_action);
        self.state.t += 1;
        self.state.last_actions = joint_action.iter().map(|&a| Some(a)).collect();
        Ok(EnvStepResult { observations: self.observations(), rewards, done: self.is_done(), info })
    }

    fn is_done(&self) -> bool {
        self.state.t >= self.params.max_steps
    }

    fn global_observation(&self) -> GlobalObservation {
        let map = &self.params.map;
        let mut codes = Vec::with_capacity(map.terrain.len());
        for r in 0..map.height {
            for c in 0..map.width {
                codes.push(match self.state.agent_at(r, c) {
                    Some(_) => CellCode::Agent,
                    None => self.state.cell_code(map, r, c),
                });
            }
        }
        GlobalObservation { shape: self.global_shape(), data: one_hot_grid(&codes) }
    }

    fn snapshot(&self) -> StateSnapshot {
        StateSnapshot::Cleanup {
            t: self.state.t,
            apple_count: self.state.apple_count(),
            waste_count: self.state.waste_count(),
            waste_density: self.state.waste_density(&self.params.map),
            agents: self.state.agents.iter().map(|a| (a.row, a.col, a.orientation.glyph())).collect(),
        }
    }

    fn render(&self) -> String {
        render_grid(&self.state, &self.params.map)
    }
}

/// Fixed-width text picture using the map legend, `A`/`H` for apples and
/// waste, and agent digits.
pub fn render_grid(state: &CleanupState, map: &CleanupMap) -> String {
    let mut out = String::with_capacity((map.width + 1) * map.height);
    for r in 0..map.height {
        for c in 0..map.width {
            let ch = if let Some(i) = state.agent_at(r, c) {
                char::from_digit((i + 1) as u32 % 10, 10).unwrap()
            } else {
                match (map.terrain_at(r, c), state.content[r * map.width + c]) {
                    (Terrain::Wall, _) => 'W',
                    (_, Content::Apple) => 'A',
                    (_, Content::Waste) => 'H',
                    (Terrain::River, _) => 'R',
                    (Terrain::AppleSpawn, _) => 'P',
                    (Terrain::Floor, _) => ' ',
                }
            };
            out.push(ch);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_from(map: &str, n: usize) -> CleanupParams {
        let mut p = CleanupParams::preset(CleanupSetting::Small7x7);
        p.map = CleanupMap::parse(map).unwrap();
        p.n_agents = n;
        p.view_size = 1;
        p.initial_waste_probability = 0.0;
        p.initial_apple_probability = 0.0;
        p
    }

    fn spawn_params() -> CleanupParams {
        let mut p = CleanupParams::preset(CleanupSetting::Small7x7);
        p.apple_respawn_probability = 0.5;
        p.threshold_depletion = 0.6;
        p.threshold_restoration = 0.0;
        p
    }

    #[test]
    fn spawn_probability_branches() {
        let p = spawn_params();
        assert_eq!(apple_spawn_probability(0.0, &p), 0.5);
        assert_eq!(apple_spawn_probability(0.6, &p), 0.0);
        assert_eq!(apple_spawn_probability(0.9, &p), 0.0);
        let mid = apple_spawn_probability(0.3, &p);
        assert!((mid - 0.7 * 0.5 / 0.6).abs() < 1e-15);
    }

    #[test]
    fn spawn_probability_cap_is_selectable() {
        let mut p = spawn_params();
        p.cap_apple_spawn = true;
        assert_eq!(apple_spawn_probability(0.3, &p), 0.5);
    }

    #[test]
    fn map_parsing() {
        let m = CleanupMap::parse("RR\n1P\n W2\n").unwrap();
        assert_eq!((m.height, m.width), (3, 3));
        assert_eq!(m.starts, vec![(1, 0), (2, 2)]);
        assert_eq!(m.terrain_at(2, 1), Terrain::Wall);
        assert_eq!(m.terrain_at(2, 0), Terrain::Floor);
        assert_eq!(m.river_cells(), 2);
        assert!(matches!(CleanupMap::parse("RX\n"), Err(EnvError::Map { line: 1, .. })));
        assert!(matches!(CleanupMap::parse("R2\n"), Err(EnvError::Map { .. })));
    }

    #[test]
    fn bundled_maps_have_expected_sizes() {
        for (setting, h, w) in [
            (CleanupSetting::Small7x7, 7, 7),
            (CleanupSetting::Medium10x10, 10, 10),
            (CleanupSetting::Large18x25, 18, 25),
        ] {
            let p = CleanupParams::preset(setting);
            assert_eq!((p.map.height, p.map.width), (h, w));
            p.validate().unwrap();
        }
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let mut env = Cleanup::new(CleanupParams::preset(CleanupSetting::Small7x7)).unwrap();
        env.reset(1);
        let a = env.state().clone();
        env.reset(1);
        assert_eq!(&a, env.state());
        // Layout is a per-cell coin flip; different seeds should disagree somewhere.
        let differing = (2..12).filter(|&s| {
            env.reset(s);
            env.state().content != a.content
        });
        assert!(differing.count() >= 9);
    }

    #[test]
    fn collecting_an_apple() {
        let p = params_from("RRR\n   \n1P \n", 1);
        let mut env = Cleanup::new(p).unwrap();
        let mut s = env.state().clone();
        s.content[2 * 3 + 1] = Content::Apple;
        env.set_state(s);
        // rotation enabled, facing up: StepRight moves east
        let right = env.action_set().iter().position(|&a| a == CleanupAction::StepRight).unwrap();
        let res = env.step(&[right]).unwrap();
        assert_eq!(res.rewards, vec![1.0]);
        assert_eq!(env.state().agents[0].col, 1);
        assert_ne!(env.state().content[2 * 3 + 1], Content::Apple);
    }

    #[test]
    fn cleaning_stops_at_first_waste() {
        let p = params_from("R\nR\nR\n \n1\n", 1);
        let mut env = Cleanup::new(p).unwrap();
        let mut s = env.state().clone();
        s.content[0] = Content::Waste;
        s.content[2] = Content::Waste;
        env.set_state(s);
        let trace = beam_trace(env.state(), &env.params().map, 0, BeamKind::Cleaning);
        assert_eq!(trace.cells, vec![(3, 0), (2, 0)]);
        assert_eq!(trace.cleaned, Some((2, 0)));
        let clean = env.action_set().iter().position(|&a| a == CleanupAction::Clean).unwrap();
        env.step(&[clean]).unwrap();
        assert_eq!(env.state().content[2], Content::Nothing);
        assert_eq!(env.state().content[0], Content::Waste);
    }

    #[test]
    fn wall_directly_ahead_blocks_beam() {
        let p = params_from("R\nW\n1\n", 1);
        let env = Cleanup::new(p).unwrap();
        let trace = beam_trace(env.state(), &env.params().map, 0, BeamKind::Fining);
        assert!(trace.cells.is_empty() && trace.hit_agents.is_empty());
        // map edge behaves the same
        let p = params_from("1R\n", 1);
        let env = Cleanup::new(p).unwrap();
        assert!(beam_trace(env.state(), &env.params().map, 0, BeamKind::Cleaning).cells.is_empty());
    }

    #[test]
    fn fining_hits_only_the_nearest_agent() {
        let mut p = params_from("R\n3\n2\n \n1\n", 3);
        p.fining_enabled = true;
        let mut env = Cleanup::new(p).unwrap();
        let trace = beam_trace(env.state(), &env.params().map, 0, BeamKind::Fining);
        assert_eq!(trace.hit_agents, vec![1]);
        let fine = env.action_set().iter().position(|&a| a == CleanupAction::Fine).unwrap();
        let stay = env.action_set().iter().position(|&a| a == CleanupAction::Stay).unwrap();
        let res = env.step(&[fine, stay, stay]).unwrap();
        assert_eq!(res.rewards, vec![-1.0, -50.0, 0.0]);
    }

    #[test]
    fn missed_fine_costs_nothing() {
        let mut p = params_from("R \n 1\n2 \n", 2);
        p.fining_enabled = true;
        let mut env = Cleanup::new(p).unwrap();
        let fine = env.action_set().iter().position(|&a| a == CleanupAction::Fine).unwrap();
        let res = env.step(&[fine, fine]).unwrap();
        assert_eq!(res.rewards, vec![0.0, 0.0]);
    }

    #[test]
    fn all_stay_is_a_no_op() {
        let mut p = params_from("RR\n12\n", 2);
        p.initial_waste_probability = 1.0;
        let mut env = Cleanup::new(p).unwrap();
        env.reset(3);
        let before = env.state().clone();
        let stay = env.action_set().iter().position(|&a| a == CleanupAction::Stay).unwrap();
        let res = env.step(&[stay, stay]).unwrap();
        assert_eq!(res.rewards, vec![0.0, 0.0]);
        assert_eq!(env.state().content, before.content);
        assert_eq!(env.state().agents, before.agents);
        assert_eq!(env.state().t, 1);
    }

    #[test]
    fn same_target_collision_keeps_both() {
        let mut p = params_from("R  \n1 2\n", 2);
        p.rotation_enabled = false;
        let mut env = Cleanup::new(p).unwrap();
        let east = env.action_set().iter().position(|&a| a == CleanupAction::East).unwrap();
        let west = env.action_set().iter().position(|&a| a == CleanupAction::West).unwrap();
        env.step(&[east, west]).unwrap();
        assert_eq!((env.state().agents[0].col, env.state().agents[1].col), (0, 2));
    }

    #[test]
    fn swaps_are_blocked_and_chains_follow() {
        let mut p = params_from("R  \n12 \n", 2);
        p.rotation_enabled = false;
        let mut env = Cleanup::new(p.clone()).unwrap();
        let east = env.action_set().iter().position(|&a| a == CleanupAction::East).unwrap();
        let west = env.action_set().iter().position(|&a| a == CleanupAction::West).unwrap();
        env.step(&[east, west]).unwrap();
        assert_eq!((env.state().agents[0].col, env.state().agents[1].col), (0, 1));
        let mut env = Cleanup::new(p).unwrap();
        env.step(&[east, east]).unwrap();
        assert_eq!((env.state().agents[0].col, env.state().agents[1].col), (1, 2));
    }

    #[test]
    fn fixed_orientation_never_rotates() {
        let mut p = params_from("R  \n 1 \n", 1);
        p.rotation_enabled = false;
        let mut env = Cleanup::new(p).unwrap();
        for a in 0..env.n_actions() {
            env.reset(0);
            env.step(&[a]).unwrap();
            assert_eq!(env.state().agents[0].orientation, Orientation::Up);
        }
    }

    #[test]
    fn view_shape_and_padding() {
        let p = params_from("RRR\n 1 \n   \n", 1);
        let env = Cleanup::new(p).unwrap();
        let view = env.observe(0);
        assert_eq!(view.size, 3);
        assert_eq!(view.codes.len(), 9);
        assert_eq!(view.codes[4], CellCode::Agent);
        assert_eq!(view.codes[1], CellCode::River);

        let p = params_from("1R\n  \n", 1);
        let env = Cleanup::new(p).unwrap();
        let view = env.observe(0);
        // top row and left column fall off the map
        assert_eq!(&view.codes[0..3], &[CellCode::Wall; 3]);
        assert_eq!(view.codes[3], CellCode::Wall);
        assert_eq!(view.codes[5], CellCode::River);
    }

    #[test]
    fn view_rotates_with_orientation() {
        let mut p = params_from("   \n 1R\n   \n", 1);
        p.waste_spawn_probability = 0.0;
        let mut env = Cleanup::new(p).unwrap();
        let rot = env.action_set().iter().position(|&a| a == CleanupAction::RotateRight).unwrap();
        env.step(&[rot]).unwrap();
        assert_eq!(env.state().agents[0].orientation, Orientation::Right);
        // the river cell east of the agent is now straight ahead
        assert_eq!(env.observe(0).codes[1], CellCode::River);
    }

    #[test]
    fn visible_agents_report_actions() {
        let p = params_from("R  \n12 \n", 2);
        let mut env = Cleanup::new(p).unwrap();
        let stay = env.action_set().iter().position(|&a| a == CleanupAction::Stay).unwrap();
        let res = env.step(&[stay, 4]).unwrap();
        let view = env.observe(0);
        assert_eq!(view.visible_actions.len(), 1);
        assert_eq!(view.visible_actions[0].0, 1);
        assert_eq!(view.visible_actions[0].3, 4);
        let enc = &res.observations[0].slots[1];
        assert_eq!(enc.len(), env.n_actions());
        assert_eq!(enc[4], 1.0);
    }

    #[test]
    fn depletion_freezes_spawning() {
        let mut p = params_from("RR\nPP\n1 \n", 1);
        p.initial_waste_probability = 1.0;
        p.waste_spawn_probability = 1.0;
        p.apple_respawn_probability = 1.0;
        let mut env = Cleanup::new(p).unwrap();
        env.reset(9);
        let stay = env.action_set().iter().position(|&a| a == CleanupAction::Stay).unwrap();
        for _ in 0..10 {
            env.step(&[stay]).unwrap();
            assert_eq!(env.state().apple_count(), 0);
        }
    }

    #[test]
    fn one_waste_per_step() {
        let mut p = params_from("RRRRRRRRRR\n1         \n", 1);
        p.waste_spawn_probability = 1.0;
        p.threshold_depletion = 1.0;
        let mut env = Cleanup::new(p).unwrap();
        let stay = env.action_set().iter().position(|&a| a == CleanupAction::Stay).unwrap();
        for k in 1..=5 {
            env.step(&[stay]).unwrap();
            assert_eq!(env.state().waste_count(), k);
        }
    }

    #[test]
    fn step_after_done() {
        let mut p = params_from("R1\n", 1);
        p.max_steps = 2;
        let mut env = Cleanup::new(p).unwrap();
        env.step(&[0]).unwrap();
        assert!(env.step(&[0]).unwrap().done);
        assert_eq!(env.step(&[0]), Err(EnvError::StepAfterDone));
    }

    #[test]
    fn render_uses_legend() {
        let p = params_from("   \n 1 \n  R\n", 1);
        let mut env = Cleanup::new(p).unwrap();
        assert_eq!(env.render(), "   \n 1 \n  R\n");
        let mut s = env.state().clone();
        s.content[0] = Content::Apple;
        s.content[8] = Content::Waste;
        env.set_state(s);
        assert_eq!(env.render(), "A  \n 1 \n  H\n");
    }

    #[test]
    fn render_empty_map_is_blank() {
        let map = CleanupMap::parse("   \n   \n   \n").unwrap();
        let state = CleanupState { content: vec![Content::Nothing; 9], agents: Vec::new(), last_actions: Vec::new(), t: 0 };
        assert_eq!(render_grid(&state, &map), "   \n   \n   \n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn spawn_probability_is_monotone_in_the_middle(a in 0.0f64..0.6, b in 0.0f64..0.6) {
                let p = spawn_params();
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(apple_spawn_probability(lo, &p) >= apple_spawn_probability(hi, &p) || lo <= 0.0);
            }

            #[test]
            fn density_in_unit_interval_and_mass_reconciles(
                seed in 0u64..500,
                actions in proptest::collection::vec(0usize..8, 2 * 20),
            ) {
                let mut env = Cleanup::new(CleanupParams::preset(CleanupSetting::Small7x7)).unwrap();
                env.reset(seed);
                for ja in actions.chunks(2) {
                    let before = env.state().clone();
                    let res = env.step(ja).unwrap();
                    let after = env.state();
                    let d = after.waste_density(&env.params().map);
                    prop_assert!((0.0..=1.0).contains(&d));
                    let waste_delta = after.waste_count() as i64 - before.waste_count() as i64;
                    let cleaned = res.info["waste_cleaned"] as i64;
                    prop_assert!(waste_delta + cleaned == 0 || waste_delta + cleaned == 1);
                    let apple_delta = after.apple_count() as i64 - before.apple_count() as i64;
                    let collected = res.info["apples_collected"] as i64;
                    prop_assert!(apple_delta + collected >= 0);
                    if res.info["apple_spawn_probability"] == 0.0 {
                        prop_assert_eq!(apple_delta + collected, 0);
                    }
                    let rewards: f64 = res.rewards.iter().sum();
                    prop_assert_eq!(rewards as i64, collected);
                    // agents on distinct floor cells
                    let a = &after.agents;
                    prop_assert!(a[0].row != a[1].row || a[0].col != a[1].col);
                }
            }
        }
    }
}
