//! Experiment configuration, metrics CSV, rollout dumps and text rendering.
//!
//! Config files are flat `key = value` lines with dotted keys
//! (`env.`, `agent.`, `planner.`, `train.`). A `[section]` line prefixes
//! the keys that follow it. `#` starts a comment. Unknown keys are errors.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Algorithm, ExplorationSchedule};
use crate::cleanup::{CleanupMap, CleanupParams, CleanupSetting};
use crate::envcore::{JointTrajectory, StateSnapshot};
use crate::escape_room::ERConfig;
use crate::nn::{Activation, LearningRate, Optimizer};
use crate::planner::OverdraftPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

impl ConfigError {
    /// Field named by a validation error.
    pub fn field(&self) -> Option<&str> {
        match self {
            Self::Validation { field, .. } => Some(field),
            _ => None,
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvConfig {
    EscapeRoom(ERConfig),
    Cleanup {
        setting: CleanupSetting,
        /// Map file overriding the setting's bundled map.
        map_path: Option<PathBuf>,
        params: CleanupParams,
    },
}

impl EnvConfig {
    pub fn n_agents(&self) -> usize {
        match self {
            Self::EscapeRoom(c) => c.n,
            Self::Cleanup { params, .. } => params.n_agents,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::EscapeRoom(_) => "er",
            Self::Cleanup { .. } => "cleanup",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub learning_rate: LearningRate,
    pub optimizer: Optimizer,
    pub exploration: ExplorationSchedule,
    /// Entropy bonus weight.
    pub entropy: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub enabled: bool,
    pub learning_rate: LearningRate,
    pub optimizer: Optimizer,
    /// Weight of the balance penalty.
    pub eta: f64,
    pub entropy: f64,
    pub kappa: f64,
    pub kappa_delta: f64,
    pub activation: Activation,
    /// Iterations during which the planner acts but is not updated.
    pub warmup_iterations: u64,
    /// Carry the bank balance across episodes.
    pub persist_bank: bool,
    pub overdraft: OverdraftPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub iterations: u64,
    pub episodes_per_iter: usize,
    pub seed: u64,
    pub eval_episodes: usize,
    /// Evaluate every this many iterations (0 disables periodic evaluation).
    pub eval_every: u64,
    pub grad_clip: f64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub planner: PlannerConfig,
    pub train: TrainConfig,
}

fn table_schedule(pairs: &[(u64, f64)], base: f64) -> LearningRate {
    LearningRate { base, schedule: pairs.to_vec() }
}

impl ExperimentConfig {
    /// Default configuration for an environment, taken from the tuned
    /// hyperparameter tables: the LOPT column when the planner is on, the
    /// plain PG (Escape Room) or AC (Cleanup) column when it is off.
    pub fn defaults(env: EnvConfig, planner_enabled: bool, algorithm: Option<Algorithm>) -> Self {
        let adam = Optimizer::adam();
        let (algorithm_default, lr, eps, beta, planner_lr) = match &env {
            EnvConfig::EscapeRoom(_) => {
                let eps = ExplorationSchedule::new(0.5, 0.05, 100.0);
                // The planner's welfare gradient is mostly noise here; at the
                // agents' rate Adam drifts the shares away from even sharing.
                let planner_lr = LearningRate::constant(1e-4);
                if planner_enabled {
                    (Algorithm::Ac, LearningRate::constant(1e-3), eps, 0.01, planner_lr)
                } else {
                    (Algorithm::Pg, LearningRate::constant(1e-4), eps, 0.01, planner_lr)
                }
            }
            EnvConfig::Cleanup { setting, .. } => {
                let lopt_schedule = match setting {
                    CleanupSetting::Small7x7 => table_schedule(&[(500_000, 1.26e-3), (2_500_000, 1.26e-4)], 2.52e-3),
                    CleanupSetting::Medium10x10 | CleanupSetting::Medium10x10Fixed => {
                        table_schedule(&[(500_000, 1.26e-3), (10_000_000, 1.26e-4)], 2.52e-3)
                    }
                    CleanupSetting::Large18x25 => table_schedule(&[(25_000_000, 1.26e-4)], 1.26e-3),
                };
                let ac_div = match setting {
                    CleanupSetting::Small7x7 => 100.0,
                    _ => 5000.0,
                };
                let ac_beta = match setting {
                    CleanupSetting::Small7x7 => 0.1,
                    _ => 0.01,
                };
                if planner_enabled || *setting == CleanupSetting::Large18x25 {
                    (Algorithm::Ac, lopt_schedule.clone(), ExplorationSchedule::none(), 1.76e-3, lopt_schedule)
                } else {
                    (
                        Algorithm::Ac,
                        LearningRate::constant(1e-3),
                        ExplorationSchedule::new(0.5, 0.05, ac_div),
                        ac_beta,
                        lopt_schedule,
                    )
                }
            }
        };
        let hidden = match &env {
            EnvConfig::EscapeRoom(_) => vec![64, 32],
            EnvConfig::Cleanup { .. } => vec![64, 64],
        };
        Self {
            agent: AgentConfig {
                algorithm: algorithm.unwrap_or(algorithm_default),
                learning_rate: lr,
                optimizer: adam,
                exploration: eps,
                entropy: beta,
                hidden,
                activation: Activation::Relu,
            },
            planner: PlannerConfig {
                enabled: planner_enabled,
                learning_rate: planner_lr,
                optimizer: adam,
                eta: 0.95,
                entropy: beta,
                kappa: 20.0,
                kappa_delta: 20.0,
                activation: Activation::Relu,
                warmup_iterations: 0,
                persist_bank: false,
                overdraft: OverdraftPolicy::ScaleRebates,
            },
            train: TrainConfig {
                gamma: 0.99,
                iterations: match &env {
                    EnvConfig::EscapeRoom(_) => 5000,
                    EnvConfig::Cleanup { .. } => 2000,
                },
                episodes_per_iter: 1,
                seed: 0,
                eval_episodes: 100,
                eval_every: 0,
                grad_clip: 10.0,
                out: None,
            },
            env,
        }
    }

    pub fn escape_room(n: usize, m: usize) -> Self {
        Self::defaults(EnvConfig::EscapeRoom(ERConfig::new(n, m)), true, None)
    }

    pub fn cleanup(setting: CleanupSetting) -> Self {
        Self::defaults(EnvConfig::Cleanup { setting, map_path: None, params: CleanupParams::preset(setting) }, true, None)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let prob = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(field, format!("{v} is not a probability")))
            }
        };
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("{v} must be a finite non-negative number")))
            }
        };
        match &self.env {
            EnvConfig::EscapeRoom(c) => c.validate().map_err(|e| invalid("env", e.to_string()))?,
            EnvConfig::Cleanup { params, .. } => params.validate().map_err(|e| invalid("env", e.to_string()))?,
        }
        let g = self.train.gamma;
        if !(g > 0.0 && g <= 1.0) {
            return Err(invalid("train.gamma", format!("{g} outside (0, 1]")));
        }
        let e = &self.agent.exploration;
        prob("agent.eps_start", e.eps_start)?;
        prob("agent.eps_end", e.eps_end)?;
        if e.eps_end > e.eps_start {
            return Err(invalid("agent.eps_end", "must not exceed eps_start"));
        }
        if !(e.eps_div >= 1.0) {
            return Err(invalid("agent.eps_div", "must be at least 1"));
        }
        positive("agent.entropy", self.agent.entropy)?;
        positive("planner.entropy", self.planner.entropy)?;
        positive("planner.eta", self.planner.eta)?;
        for (field, lr) in [("agent.learning_rate", &self.agent.learning_rate), ("planner.learning_rate", &self.planner.learning_rate)] {
            positive(field, lr.base)?;
            for &(_, r) in &lr.schedule {
                positive(field, r)?;
            }
        }
        if !(self.planner.kappa > 0.0) {
            return Err(invalid("planner.kappa", "must be positive"));
        }
        if !(self.planner.kappa_delta > 0.0) {
            return Err(invalid("planner.kappa_delta", "must be positive"));
        }
        if self.train.episodes_per_iter == 0 {
            return Err(invalid("train.episodes_per_iter", "must be at least 1"));
        }
        if self.train.eval_episodes == 0 {
            return Err(invalid("train.eval_episodes", "must be at least 1"));
        }
        if !(self.train.grad_clip > 0.0) {
            return Err(invalid("train.grad_clip", "must be positive"));
        }
        if self.agent.hidden.contains(&0) {
            return Err(invalid("agent.hidden", "layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text` with `key = value` pairs replacing (or adding to) the
    /// file's entries. Overrides take part in choosing the defaults, so
    /// `planner.enabled = false` selects the baseline columns.
    pub fn parse_with_overrides(text: &str, overrides: &[(&str, String)]) -> Result<Self, ConfigError> {
        let mut entries = parse_entries(text)?;
        for (key, value) in overrides {
            entries.retain(|(k, _, _)| k != key);
            entries.push((key.to_string(), value.clone(), 0));
        }
        let get = |key: &str| entries.iter().find(|(k, _, _)| k == key).map(|(_, v, l)| (v.as_str(), *l));
        let kind = get("env.kind").map(|(v, _)| v).unwrap_or("er");
        let planner_enabled = match get("planner.enabled") {
            Some((v, l)) => parse_bool(v).ok_or_else(|| ConfigError::Parse { line: l, message: format!("bad boolean `{v}`") })?,
            None => true,
        };
        let algorithm = match get("agent.algorithm") {
            Some((v, _)) => Some(parse_algorithm(v).ok_or_else(|| invalid("agent.algorithm", format!("unknown algorithm `{v}`")))?),
            None => None,
        };
        let env = match kind {
            "er" => {
                let n = get("env.n").map(|(v, l)| parse_num::<usize>(v, l)).transpose()?.unwrap_or(2);
                let m = get("env.m").map(|(v, l)| parse_num::<usize>(v, l)).transpose()?.unwrap_or(1);
                EnvConfig::EscapeRoom(ERConfig::new(n, m))
            }
            "cleanup" => {
                let name = get("env.setting").map(|(v, _)| v).unwrap_or("7x7");
                let setting = CleanupSetting::from_name(name)
                    .ok_or_else(|| invalid("env.setting", format!("unknown setting `{name}`")))?;
                EnvConfig::Cleanup { setting, map_path: None, params: CleanupParams::preset(setting) }
            }
            other => return Err(invalid("env.kind", format!("unknown environment `{other}`"))),
        };
        let mut cfg = Self::defaults(env, planner_enabled, algorithm);
        for (key, value, line) in &entries {
            cfg.set(key, value, *line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<(), ConfigError> {
        let f = |v: &str| parse_num::<f64>(v, line);
        let b = |v: &str| parse_bool(v).ok_or_else(|| ConfigError::Parse { line, message: format!("bad boolean `{v}`") });
        match (&mut self.env, key) {
            (_, "env.kind" | "env.setting") => return Ok(()),
            (EnvConfig::EscapeRoom(c), _) if key.starts_with("env.") => match key {
                "env.n" => c.n = parse_num(v, line)?,
                "env.m" => c.m = parse_num(v, line)?,
                "env.horizon" => c.horizon = parse_num(v, line)?,
                "env.door_reward" => c.door_reward = f(v)?,
                "env.move_cost" => c.move_cost = f(v)?,
                _ => return Err(invalid(key, "unknown key")),
            },
            (EnvConfig::Cleanup { params: p, map_path, .. }, _) if key.starts_with("env.") => match key {
                "env.map" => {
                    let path = PathBuf::from(v);
                    p.map = CleanupMap::load(&path).map_err(|e| invalid(key, e.to_string()))?;
                    *map_path = Some(path);
                }
                "env.n_agents" => p.n_agents = parse_num(v, line)?,
                "env.apple_respawn_probability" => p.apple_respawn_probability = f(v)?,
                "env.waste_spawn_probability" => p.waste_spawn_probability = f(v)?,
                "env.threshold_depletion" => p.threshold_depletion = f(v)?,
                "env.threshold_restoration" => p.threshold_restoration = f(v)?,
                "env.rotation" => p.rotation_enabled = b(v)?,
                "env.view_size" => p.view_size = parse_num(v, line)?,
                "env.max_steps" => p.max_steps = parse_num(v, line)?,
                "env.fining" => p.fining_enabled = b(v)?,
                "env.cap_apple_spawn" => p.cap_apple_spawn = b(v)?,
                "env.initial_waste_probability" => p.initial_waste_probability = f(v)?,
                "env.initial_apple_probability" => p.initial_apple_probability = f(v)?,
                _ => return Err(invalid(key, "unknown key")),
            },
            (_, "agent.algorithm") => {
                self.agent.algorithm = parse_algorithm(v).ok_or_else(|| invalid(key, format!("unknown algorithm `{v}`")))?
            }
            (_, "agent.learning_rate") => self.agent.learning_rate.base = f(v)?,
            (_, "agent.lr_schedule") => self.agent.learning_rate.schedule = parse_schedule(v, line)?,
            (_, "agent.optimizer") => self.agent.optimizer = parse_optimizer(v).ok_or_else(|| invalid(key, format!("unknown optimizer `{v}`")))?,
            (_, "agent.eps_start") => self.agent.exploration.eps_start = f(v)?,
            (_, "agent.eps_end") => self.agent.exploration.eps_end = f(v)?,
            (_, "agent.eps_div") => self.agent.exploration.eps_div = f(v)?,
            (_, "agent.entropy") => self.agent.entropy = f(v)?,
            (_, "agent.hidden") => {
                self.agent.hidden = if v.trim().is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse_num::<usize>(s.trim(), line)).collect::<Result<_, _>>()?
                }
            }
            (_, "agent.activation") => self.agent.activation = parse_activation(v).ok_or_else(|| invalid(key, format!("unknown activation `{v}`")))?,
            (_, "planner.enabled") => self.planner.enabled = b(v)?,
            (_, "planner.learning_rate") => self.planner.learning_rate.base = f(v)?,
            (_, "planner.lr_schedule") => self.planner.learning_rate.schedule = parse_schedule(v, line)?,
            (_, "planner.optimizer") => {
                self.planner.optimizer = parse_optimizer(v).ok_or_else(|| invalid(key, format!("unknown optimizer `{v}`")))?
            }
            (_, "planner.eta") => self.planner.eta = f(v)?,
            (_, "planner.entropy") => self.planner.entropy = f(v)?,
            (_, "planner.kappa") => self.planner.kappa = f(v)?,
            (_, "planner.kappa_delta") => self.planner.kappa_delta = f(v)?,
            (_, "planner.activation") => {
                self.planner.activation = parse_activation(v).ok_or_else(|| invalid(key, format!("unknown activation `{v}`")))?
            }
            (_, "planner.warmup_iterations") => self.planner.warmup_iterations = parse_num(v, line)?,
            (_, "planner.persist_bank") => self.planner.persist_bank = b(v)?,
            (_, "planner.overdraft") => {
                self.planner.overdraft = match v {
                    "reject" => OverdraftPolicy::Reject,
                    "scale_rebates" => OverdraftPolicy::ScaleRebates,
                    _ => return Err(invalid(key, format!("unknown overdraft policy `{v}`"))),
                }
            }
            (_, "train.gamma") => self.train.gamma = f(v)?,
            (_, "train.iterations") => self.train.iterations = parse_num(v, line)?,
            (_, "train.episodes_per_iter") => self.train.episodes_per_iter = parse_num(v, line)?,
            (_, "train.seed") => self.train.seed = parse_num(v, line)?,
            (_, "train.eval_episodes") => self.train.eval_episodes = parse_num(v, line)?,
            (_, "train.eval_every") => self.train.eval_every = parse_num(v, line)?,
            (_, "train.grad_clip") => self.train.grad_clip = f(v)?,
            (_, "train.out") => self.train.out = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key, floats with 17 significant digits.
    pub fn to_text(&self) -> String {
        let fl = |x: f64| format!("{x:.16e}");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("env.kind", self.env.kind().into());
        match &self.env {
            EnvConfig::EscapeRoom(c) => {
                kv("env.n", c.n.to_string());
                kv("env.m", c.m.to_string());
                kv("env.horizon", c.horizon.to_string());
                kv("env.door_reward", fl(c.door_reward));
                kv("env.move_cost", fl(c.move_cost));
            }
            EnvConfig::Cleanup { setting, map_path, params: p } => {
                kv("env.setting", setting.name().into());
                if let Some(path) = map_path {
                    kv("env.map", path.display().to_string());
                }
                kv("env.n_agents", p.n_agents.to_string());
                kv("env.apple_respawn_probability", fl(p.apple_respawn_probability));
                kv("env.waste_spawn_probability", fl(p.waste_spawn_probability));
                kv("env.threshold_depletion", fl(p.threshold_depletion));
                kv("env.threshold_restoration", fl(p.threshold_restoration));
                kv("env.rotation", p.rotation_enabled.to_string());
                kv("env.view_size", p.view_size.to_string());
                kv("env.max_steps", p.max_steps.to_string());
                kv("env.fining", p.fining_enabled.to_string());
                kv("env.cap_apple_spawn", p.cap_apple_spawn.to_string());
                kv("env.initial_waste_probability", fl(p.initial_waste_probability));
                kv("env.initial_apple_probability", fl(p.initial_apple_probability));
            }
        }
        let a = &self.agent;
        kv("agent.algorithm", a.algorithm.name().into());
        kv("agent.learning_rate", fl(a.learning_rate.base));
        kv("agent.lr_schedule", schedule_text(&a.learning_rate));
        kv("agent.optimizer", optimizer_name(a.optimizer).into());
        kv("agent.eps_start", fl(a.exploration.eps_start));
        kv("agent.eps_end", fl(a.exploration.eps_end));
        kv("agent.eps_div", fl(a.exploration.eps_div));
        kv("agent.entropy", fl(a.entropy));
        kv("agent.hidden", a.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","));
        kv("agent.activation", activation_name(a.activation).into());
        let p = &self.planner;
        kv("planner.enabled", p.enabled.to_string());
        kv("planner.learning_rate", fl(p.learning_rate.base));
        kv("planner.lr_schedule", schedule_text(&p.learning_rate));
        kv("planner.optimizer", optimizer_name(p.optimizer).into());
        kv("planner.eta", fl(p.eta));
        kv("planner.entropy", fl(p.entropy));
        kv("planner.kappa", fl(p.kappa));
        kv("planner.kappa_delta", fl(p.kappa_delta));
        kv("planner.activation", activation_name(p.activation).into());
        kv("planner.warmup_iterations", p.warmup_iterations.to_string());
        kv("planner.persist_bank", p.persist_bank.to_string());
        kv(
            "planner.overdraft",
            match p.overdraft {
                OverdraftPolicy::Reject => "reject",
                OverdraftPolicy::ScaleRebates => "scale_rebates",
            }
            .into(),
        );
        let t = &self.train;
        kv("train.gamma", fl(t.gamma));
        kv("train.iterations", t.iterations.to_string());
        kv("train.episodes_per_iter", t.episodes_per_iter.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.eval_episodes", t.eval_episodes.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.grad_clip", fl(t.grad_clip));
        kv("train.out", t.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        out
    }
}

fn parse_entries(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut section = String::new();
    let mut entries: Vec<(String, String, usize)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = no + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Parse { line, message: "unterminated section header".into() })?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse { line, message: format!("expected `key = value`, got `{content}`") })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Parse { line, message: "empty key".into() });
        }
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        if entries.iter().any(|(e, _, _)| *e == key) {
            return Err(ConfigError::Parse { line, message: format!("duplicate key `{key}`") });
        }
        entries.push((key, v.trim().to_string(), line));
    }
    Ok(entries)
}

fn parse_num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| ConfigError::Parse { line, message: format!("bad number `{v}`: {e}") })
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_algorithm(v: &str) -> Option<Algorithm> {
    match v {
        "pg" => Some(Algorithm::Pg),
        "ac" => Some(Algorithm::Ac),
        _ => None,
    }
}

fn parse_optimizer(v: &str) -> Option<Optimizer> {
    match v {
        "sgd" => Some(Optimizer::Sgd),
        "adam" => Some(Optimizer::adam()),
        _ => None,
    }
}

fn optimizer_name(o: Optimizer) -> &'static str {
    match o {
        Optimizer::Sgd => "sgd",
        Optimizer::Adam { .. } => "adam",
    }
}

fn parse_activation(v: &str) -> Option<Activation> {
    match v {
        "linear" => Some(Activation::Linear),
        "relu" => Some(Activation::Relu),
        "tanh" => Some(Activation::Tanh),
        "sigmoid" => Some(Activation::Sigmoid),
        _ => None,
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Linear => "linear",
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
        Activation::Sigmoid => "sigmoid",
        Activation::Softmax => "softmax",
    }
}

/// `step:rate` pairs separated by commas.
fn parse_schedule(v: &str, line: usize) -> Result<Vec<(u64, f64)>, ConfigError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|pair| {
            let (s, r) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| ConfigError::Parse { line, message: format!("schedule entry `{pair}` is not `step:rate`") })?;
            let step: f64 = parse_num(s.trim(), line)?;
            if !(step >= 0.0 && step.fract() == 0.0) {
                return Err(ConfigError::Parse { line, message: format!("schedule step `{s}` must be a whole number") });
            }
            Ok((step as u64, parse_num(r.trim(), line)?))
        })
        .collect()
}

fn schedule_text(lr: &LearningRate) -> String {
    lr.schedule.iter().map(|(s, r)| format!("{s}:{r:.16e}")).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub episode: u64,
    pub collective_extrinsic: f64,
    pub extrinsic: Vec<f64>,
    pub shaped: Vec<f64>,
    pub tax_total: f64,
    pub allowance_total: f64,
    pub bank_end: f64,
    pub f_penalty: f64,
    pub epsilon: f64,
}

impl MetricsRow {
    pub fn header(n_agents: usize) -> Vec<String> {
        let mut h = vec!["iteration".to_string(), "episode".into(), "collective_extrinsic".into()];
        h.extend((0..n_agents).map(|i| format!("extrinsic_{i}")));
        h.extend((0..n_agents).map(|i| format!("shaped_{i}")));
        h.extend(["tax_total", "allowance_total", "bank_end", "f_penalty", "epsilon"].map(String::from));
        h
    }

    fn fields(&self) -> Vec<String> {
        let mut v = vec![self.iteration.to_string(), self.episode.to_string(), self.collective_extrinsic.to_string()];
        v.extend(self.extrinsic.iter().map(f64::to_string));
        v.extend(self.shaped.iter().map(f64::to_string));
        v.extend([self.tax_total, self.allowance_total, self.bank_end, self.f_penalty, self.epsilon].map(|x| x.to_string()));
        v
    }

    /// Summary of one episode.
    pub fn from_trajectory(iteration: u64, episode: u64, traj: &JointTrajectory, epsilon: f64) -> Self {
        let n = traj.n_agents();
        let mut extrinsic = vec![0.0; n];
        let mut shaped = vec![0.0; n];
        for s in &traj.steps {
            extrinsic.iter_mut().zip(&s.rewards).for_each(|(a, r)| *a += r);
            shaped.iter_mut().zip(&s.shaped_rewards).for_each(|(a, r)| *a += r);
        }
        Self {
            iteration,
            episode,
            collective_extrinsic: traj.collective_extrinsic(),
            extrinsic,
            shaped,
            tax_total: traj.total_tax(),
            allowance_total: traj.total_allowance(),
            bank_end: traj.final_bank(),
            f_penalty: traj.total_shaping().abs(),
            epsilon,
        }
    }
}

/// Append-only metrics CSV. The header is written only when the file is new
/// or empty.
pub struct MetricsSink {
    writer: csv::Writer<File>,
    n_agents: usize,
}

impl MetricsSink {
    pub fn open(path: &Path, n_agents: usize) -> Result<Self, crate::Error> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(MetricsRow::header(n_agents))?;
            writer.flush()?;
        }
        Ok(Self { writer, n_agents })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<(), crate::Error> {
        if row.extrinsic.len() != self.n_agents || row.shaped.len() != self.n_agents {
            return Err(crate::Error::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("metrics row for {} agents in a {}-agent sink", row.extrinsic.len(), self.n_agents),
            )));
        }
        self.writer.write_record(row.fields())?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn write_metrics(sink: &mut MetricsSink, row: &MetricsRow) -> Result<(), crate::Error> {
    sink.write(row)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub episode: u64,
    pub t: usize,
    pub state: StateSnapshot,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bank_ratio: Option<f64>,
    pub shaping: Vec<f64>,
    pub shaped_rewards: Vec<f64>,
    pub bank: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub apple_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub waste_count: Option<usize>,
}

pub fn rollout_records(episode: u64, traj: &JointTrajectory) -> Vec<RolloutRecord> {
    traj.steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let (apple_count, waste_count) = match s.state {
                StateSnapshot::Cleanup { apple_count, waste_count, .. } => (Some(apple_count), Some(waste_count)),
                StateSnapshot::EscapeRoom { .. } => (None, None),
            };
            RolloutRecord {
                episode,
                t,
                state: s.state.clone(),
                actions: s.actions.clone(),
                rewards: s.rewards.clone(),
                theta: s.planner.as_ref().map(|p| p.action.theta.clone()),
                delta: s.planner.as_ref().map(|p| p.action.delta.clone()),
                bank_ratio: s.planner.as_ref().map(|p| p.action.bank_ratio),
                shaping: s.shaping.clone(),
                shaped_rewards: s.shaped_rewards.clone(),
                bank: s.bank,
                apple_count,
                waste_count,
            }
        })
        .collect()
}

/// Writes one JSON line per timestep.
pub fn dump_rollout(sink: &mut impl std::io::Write, episode: u64, traj: &JointTrajectory) -> Result<(), crate::Error> {
    let mut w = BufWriter::new(sink);
    for rec in rollout_records(episode, traj) {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rollout(text: &str) -> Result<Vec<RolloutRecord>, crate::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Text picture of a Cleanup state.
pub fn render_ascii(state: &crate::cleanup::CleanupState, map: &CleanupMap) -> String {
    crate::cleanup::render_grid(state, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::tests::record;

    #[test]
    fn minimal_er_config_gets_table_defaults() {
        let cfg = ExperimentConfig::parse("env.kind = er\nenv.n = 2\nenv.m = 1\n").unwrap();
        assert_eq!(cfg.env, EnvConfig::EscapeRoom(ERConfig::new(2, 1)));
        assert_eq!(cfg.agent.learning_rate, LearningRate::constant(1e-3));
        assert_eq!(cfg.planner.eta, 0.95);
        assert_eq!(cfg.planner.learning_rate, LearningRate::constant(1e-4));
        assert_eq!(cfg.agent.exploration, ExplorationSchedule::new(0.5, 0.05, 100.0));
        assert_eq!(cfg.agent.entropy, 0.01);
        assert!(cfg.planner.enabled);
    }

    #[test]
    fn sections_and_comments() {
        let cfg = ExperimentConfig::parse("# ER(3,2)\n[env]\nkind = er\nn = 3 # three agents\nm = 2\n[train]\nseed = 7\n").unwrap();
        assert_eq!(cfg.env.n_agents(), 3);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn validation_errors_name_the_field() {
        let e = ExperimentConfig::parse("env.kind = er\ntrain.gamma = 1.5\n").unwrap_err();
        assert_eq!(e.field(), Some("train.gamma"));
        let e = ExperimentConfig::parse("env.kind = er\nfoo = 1\n").unwrap_err();
        assert_eq!(e.field(), Some("foo"));
        let e = ExperimentConfig::parse("env.kind = er\nagent.eps_start = 2\n").unwrap_err();
        assert_eq!(e.field(), Some("agent.eps_start"));
    }

    #[test]
    fn parse_errors_carry_lines() {
        let e = ExperimentConfig::parse("env.kind = er\n\nthis is not a pair\n").unwrap_err();
        assert_eq!(e, ConfigError::Parse { line: 3, message: "expected `key = value`, got `this is not a pair`".into() });
        assert!(matches!(ExperimentConfig::parse("env.n = two\n"), Err(ConfigError::Parse { line: 1, .. })));
    }

    #[test]
    fn cleanup_defaults() {
        let cfg = ExperimentConfig::parse("env.kind = cleanup\nenv.setting = 7x7\n").unwrap();
        assert_eq!(cfg.agent.learning_rate.base, 2.52e-3);
        assert_eq!(cfg.agent.learning_rate.schedule, vec![(500_000, 1.26e-3), (2_500_000, 1.26e-4)]);
        assert_eq!(cfg.agent.entropy, 1.76e-3);
        let base = ExperimentConfig::parse("env.kind = cleanup\nplanner.enabled = false\n").unwrap();
        assert_eq!(base.agent.learning_rate, LearningRate::constant(1e-3));
        assert_eq!(base.agent.entropy, 0.1);
        let big = ExperimentConfig::parse("env.kind = cleanup\nenv.setting = 18x25\n").unwrap();
        assert_eq!(big.env.n_agents(), 5);
        assert_eq!(big.planner.learning_rate.schedule, vec![(25_000_000, 1.26e-4)]);
    }

    #[test]
    fn round_trip() {
        for cfg in [
            ExperimentConfig::escape_room(3, 2),
            ExperimentConfig::cleanup(CleanupSetting::Medium10x10Fixed),
            ExperimentConfig::cleanup(CleanupSetting::Large18x25),
        ] {
            let mut cfg = cfg;
            cfg.train.gamma = 0.1 + 0.2;
            cfg.train.out = Some(PathBuf::from("runs/x"));
            let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn metrics_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = |i| MetricsRow {
            iteration: i,
            episode: i,
            collective_extrinsic: 8.0,
            extrinsic: vec![-1.0, 9.0],
            shaped: vec![4.0, 4.0],
            tax_total: 5.0,
            allowance_total: 5.0,
            bank_end: 0.0,
            f_penalty: 0.0,
            epsilon: 0.1 + 0.2,
        };
        {
            let mut sink = MetricsSink::open(&path, 2).unwrap();
            write_metrics(&mut sink, &row(0)).unwrap();
        }
        {
            let mut sink = MetricsSink::open(&path, 2).unwrap();
            write_metrics(&mut sink, &row(1)).unwrap();
            assert!(sink.write(&MetricsRow { extrinsic: vec![1.0], ..row(2) }).is_err());
        }
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        assert_eq!(rdr.headers().unwrap().len(), 12);
        let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.len() == 12));
        assert_eq!(rows[1][11].parse::<f64>().unwrap(), 0.1 + 0.2);
    }

    #[test]
    fn rollout_round_trip() {
        let steps = (0..5)
            .map(|t| {
                let mut r = record(vec![-1.0, 10.0 / 3.0]);
                r.shaping = vec![0.1 * t as f64, -1.0 / 7.0];
                r
            })
            .collect();
        let traj = JointTrajectory { steps };
        let mut buf = Vec::new();
        dump_rollout(&mut buf, 3, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        let back = read_rollout(&text).unwrap();
        for (rec, step) in back.iter().zip(&traj.steps) {
            assert_eq!(rec.shaping, step.shaping);
            assert_eq!(rec.episode, 3);
        }
    }

    #[test]
    fn cleanup_records_count_apples_and_waste() {
        let mut r = record(vec![0.0, 1.0]);
        r.state = StateSnapshot::Cleanup { t: 0, apple_count: 4, waste_count: 2, waste_density: 0.5, agents: vec![] };
        let recs = rollout_records(0, &JointTrajectory { steps: vec![r] });
        let json = serde_json::to_value(&recs[0]).unwrap();
        assert_eq!(json["apple_count"], 4);
        assert_eq!(json["waste_count"], 2);
    }
}
