//! Exact externality and Pigovian shaping for finite normal-form games.
//!
//! The welfare-maximizing joint action `a*` is found by exhaustive search
//! (ties go to the lexicographically first joint action). The externality of
//! player `i` choosing `a_i` is `Q(a*) - Q(a*_{-i}, a_i)`, which is never
//! negative. Shaping subtracts it from the player's payoff: a harmful
//! deviation is taxed by exactly the welfare it destroys. In cells where
//! several players deviate, each player is shaped by its own unilateral
//! externality against `a*_{-i}`.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("invalid joint action {0:?}")]
    InvalidJointAction(Vec<usize>),
    #[error("invalid player/action pair ({player}, {action})")]
    InvalidPlayerAction { player: usize, action: usize },
    #[error("player {player} action {action}: externality {externality} with zero reward has no tax rate")]
    ZeroRewardTax { player: usize, action: usize, externality: f64 },
    #[error("allowance needs a non-zero pool")]
    ZeroPool,
    #[error("grid check needs a 2-player game")]
    NotTwoPlayer,
    #[error("grid resolution must be in 1..=101, got {0}")]
    GridResolution(usize),
    #[error("game file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid game: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGame {
    action_counts: Vec<usize>,
    /// Indexed by the lexicographic joint-action index (player 0 most significant).
    payoffs: Vec<Vec<f64>>,
    labels: Vec<Vec<String>>,
}

impl MatrixGame {
    /// Builds a game from a payoff function over joint actions.
    pub fn from_fn(action_counts: Vec<usize>, mut payoff: impl FnMut(&[usize]) -> Vec<f64>) -> Result<Self, GameError> {
        if action_counts.is_empty() || action_counts.contains(&0) {
            return Err(GameError::Invalid("every player needs at least one action".into()));
        }
        let n = action_counts.len();
        let total: usize = action_counts.iter().product();
        let mut payoffs = Vec::with_capacity(total);
        for idx in 0..total {
            let ja = decode(&action_counts, idx);
            let p = payoff(&ja);
            if p.len() != n || p.iter().any(|x| !x.is_finite()) {
                return Err(GameError::Invalid(format!("payoff at {ja:?} must be {n} finite values")));
            }
            payoffs.push(p);
        }
        let labels = action_counts.iter().map(|&k| (0..k).map(|a| a.to_string()).collect()).collect();
        Ok(Self { action_counts, payoffs, labels })
    }

    /// Canonical Prisoner's Dilemma: (C,C) = (-1,-1), (C,D) = (-3,0),
    /// (D,C) = (0,-3), (D,D) = (-2,-2). Action 0 is Cooperate.
    pub fn prisoners_dilemma() -> Self {
        Self::two_player_symmetric(-1.0, -3.0, 0.0, -2.0)
    }

    /// Symmetric 2x2 game from the row player's (R, S, T, P) payoffs.
    pub fn two_player_symmetric(reward: f64, sucker: f64, temptation: f64, punishment: f64) -> Self {
        let table = [[reward, sucker], [temptation, punishment]];
        let mut g = Self::from_fn(vec![2, 2], |ja| vec![table[ja[0]][ja[1]], table[ja[1]][ja[0]]]).unwrap();
        g.labels = vec![vec!["Cooperate".into(), "Defect".into()]; 2];
        g
    }

    pub fn with_labels(mut self, labels: Vec<Vec<String>>) -> Result<Self, GameError> {
        if labels.len() != self.n_players() || labels.iter().zip(&self.action_counts).any(|(l, &k)| l.len() != k) {
            return Err(GameError::Invalid("label shape does not match action counts".into()));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn n_players(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn label(&self, player: usize, action: usize) -> &str {
        &self.labels[player][action]
    }

    pub fn joint_actions(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.payoffs.len()).map(|i| decode(&self.action_counts, i))
    }

    fn index(&self, ja: &[usize]) -> Result<usize, GameError> {
        if ja.len() != self.n_players() || ja.iter().zip(&self.action_counts).any(|(&a, &k)| a >= k) {
            return Err(GameError::InvalidJointAction(ja.to_vec()));
        }
        Ok(ja.iter().zip(&self.action_counts).fold(0, |acc, (&a, &k)| acc * k + a))
    }

    pub fn payoff(&self, ja: &[usize]) -> Result<&[f64], GameError> {
        Ok(&self.payoffs[self.index(ja)?])
    }

    /// Sum of all players' payoffs at a joint action.
    pub fn social_welfare(&self, ja: &[usize]) -> Result<f64, GameError> {
        Ok(self.payoff(ja)?.iter().sum())
    }

    /// Welfare-maximizing joint action and its welfare.
    pub fn optimal_joint(&self) -> (Vec<usize>, f64) {
        let mut best = 0;
        let mut best_w = f64::NEG_INFINITY;
        for (i, p) in self.payoffs.iter().enumerate() {
            let w: f64 = p.iter().sum();
            if w > best_w {
                best_w = w;
                best = i;
            }
        }
        (decode(&self.action_counts, best), best_w)
    }

    fn check_pair(&self, player: usize, action: usize) -> Result<(), GameError> {
        if player >= self.n_players() || action >= self.action_counts[player] {
            return Err(GameError::InvalidPlayerAction { player, action });
        }
        Ok(())
    }

    /// `a*` with player `i`'s action replaced by `a_i`.
    pub fn unilateral(&self, player: usize, action: usize) -> Result<Vec<usize>, GameError> {
        self.check_pair(player, action)?;
        let mut ja = self.optimal_joint().0;
        ja[player] = action;
        Ok(ja)
    }

    /// Externality `Q(a*) - Q(a*_{-i}, a_i)`.
    pub fn externality(&self, player: usize, action: usize) -> Result<f64, GameError> {
        let dev = self.unilateral(player, action)?;
        Ok(self.optimal_joint().1 - self.social_welfare(&dev)?)
    }

    pub fn pigovian_shaping(&self) -> ShapingReport {
        let (optimal_joint, welfare_opt) = self.optimal_joint();
        let externalities: Vec<Vec<f64>> = (0..self.n_players())
            .map(|i| (0..self.action_counts[i]).map(|a| self.externality(i, a).unwrap()).collect())
            .collect();
        let shaped = Self {
            action_counts: self.action_counts.clone(),
            labels: self.labels.clone(),
            payoffs: self
                .joint_actions()
                .zip(&self.payoffs)
                .map(|(ja, p)| p.iter().enumerate().map(|(i, r)| r - externalities[i][ja[i]]).collect())
                .collect(),
        };
        ShapingReport { optimal_joint, welfare_opt, externalities, shaped }
    }

    /// How `action` compares with every alternative of `player` against
    /// every opponent profile.
    pub fn dominance_check(&self, player: usize, action: usize) -> Result<Dominance, GameError> {
        self.check_pair(player, action)?;
        let mut strict = true;
        for ja in self.joint_actions().filter(|ja| ja[player] == action) {
            let mine = self.payoff(&ja)?[player];
            for alt in (0..self.action_counts[player]).filter(|&b| b != action) {
                let mut other = ja.clone();
                other[player] = alt;
                let theirs = self.payoff(&other)?[player];
                if mine < theirs {
                    return Ok(Dominance::None);
                }
                if mine == theirs {
                    strict = false;
                }
            }
        }
        Ok(if strict { Dominance::Strict } else { Dominance::Weak })
    }

    /// Pure-strategy Nash equilibria, in lexicographic order.
    pub fn pure_equilibria(&self) -> Vec<Vec<usize>> {
        self.joint_actions().filter(|ja| self.is_equilibrium(ja)).collect()
    }

    pub fn is_equilibrium(&self, ja: &[usize]) -> bool {
        let Ok(base) = self.payoff(ja) else { return false };
        (0..self.n_players()).all(|i| {
            (0..self.action_counts[i]).all(|b| {
                let mut dev = ja.to_vec();
                dev[i] = b;
                self.payoff(&dev).map(|p| p[i] <= base[i]).unwrap_or(false)
            })
        })
    }

    /// Game with every payoff replaced by its shaped value under constant
    /// percentage rates, using the same-step pool `sum_j theta_j r_j`.
    pub fn shaped_with_rates(&self, thetas: &[f64], deltas: &[f64]) -> Self {
        Self {
            action_counts: self.action_counts.clone(),
            labels: self.labels.clone(),
            payoffs: self
                .payoffs
                .iter()
                .map(|p| {
                    let f = percentage_shaping(p, thetas, deltas);
                    p.iter().zip(f).map(|(r, f)| r + f).collect()
                })
                .collect(),
        }
    }

    /// Rates that make the percentage shaping at `(a*_{-i}, a_i)` equal the
    /// optimal shaping `-E^i`. Harmful deviations are taxed at
    /// `E / r_i` with no allowance.
    pub fn solve_rates(&self, player: usize, action: usize) -> Result<Rates, GameError> {
        let e = self.externality(player, action)?;
        let dev = self.unilateral(player, action)?;
        let r = self.payoff(&dev)?[player];
        rates_for_externality(e, r, 0.0).map_err(|err| match err {
            GameError::ZeroRewardTax { externality, .. } => GameError::ZeroRewardTax { player, action, externality },
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self, GameError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GameError::Parse { line: 0, message: format!("{}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    /// Parses the text table format:
    ///
    /// ```text
    /// players 2
    /// actions 2 2
    /// labels 0 Cooperate Defect   # optional, one line per player
    /// 0 0 : -1 -1                 # joint action (indices or labels) : payoffs
    /// ```
    pub fn parse(text: &str) -> Result<Self, GameError> {
        let mut players: Option<usize> = None;
        let mut counts: Option<Vec<usize>> = None;
        let mut labels: Vec<Option<Vec<String>>> = Vec::new();
        let mut rows: Vec<(usize, Vec<String>, Vec<f64>)> = Vec::new();
        let perr = |line: usize, message: String| GameError::Parse { line, message };
        for (no, raw) in text.lines().enumerate() {
            let line_no = no + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            match words.next() {
                Some("players") => {
                    let n: usize = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| perr(line_no, "expected player count".into()))?;
                    players = Some(n);
                    labels = vec![None; n];
                }
                Some("actions") => {
                    let c: Result<Vec<usize>, _> = words.map(str::parse).collect();
                    counts = Some(c.map_err(|e| perr(line_no, format!("bad action count: {e}")))?);
                }
                Some("labels") => {
                    let p: usize = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| perr(line_no, "expected player index".into()))?;
                    let slot = labels.get_mut(p).ok_or_else(|| perr(line_no, format!("no player {p}")))?;
                    *slot = Some(words.map(String::from).collect());
                }
                _ => {
                    let (lhs, rhs) =
                        line.split_once(':').ok_or_else(|| perr(line_no, "expected `joint action : payoffs`".into()))?;
                    let pay: Result<Vec<f64>, _> = rhs.split_whitespace().map(str::parse).collect();
                    let pay = pay.map_err(|e| perr(line_no, format!("bad payoff: {e}")))?;
                    rows.push((line_no, lhs.split_whitespace().map(String::from).collect(), pay));
                }
            }
        }
        let n = players.ok_or_else(|| perr(0, "missing `players` line".into()))?;
        let counts = counts.ok_or_else(|| perr(0, "missing `actions` line".into()))?;
        if counts.len() != n || counts.contains(&0) {
            return Err(perr(0, format!("`actions` must list {n} positive counts")));
        }
        let labels: Vec<Vec<String>> = labels
            .into_iter()
            .zip(&counts)
            .enumerate()
            .map(|(p, (l, &k))| match l {
                Some(l) if l.len() == k => Ok(l),
                Some(_) => Err(perr(0, format!("player {p} needs {k} labels"))),
                None => Ok((0..k).map(|a| a.to_string()).collect()),
            })
            .collect::<Result<_, _>>()?;
        let total: usize = counts.iter().product();
        let mut table: Vec<Option<Vec<f64>>> = vec![None; total];
        for (line_no, keys, pay) in rows {
            if keys.len() != n || pay.len() != n {
                return Err(perr(line_no, format!("expected {n} actions and {n} payoffs")));
            }
            let mut idx = 0;
            for (p, key) in keys.iter().enumerate() {
                let a = labels[p]
                    .iter()
                    .position(|l| l == key)
                    .or_else(|| key.parse::<usize>().ok().filter(|&a| a < counts[p]))
                    .ok_or_else(|| perr(line_no, format!("unknown action `{key}` for player {p}")))?;
                idx = idx * counts[p] + a;
            }
            if table[idx].replace(pay).is_some() {
                return Err(perr(line_no, "duplicate joint action".into()));
            }
        }
        if let Some(missing) = table.iter().position(Option::is_none) {
            return Err(perr(0, format!("missing payoff row for joint action {:?}", decode(&counts, missing))));
        }
        let table: Vec<Vec<f64>> = table.into_iter().map(Option::unwrap).collect();
        let mut rows = table.into_iter();
        // from_fn visits joint actions in index order
        Self::from_fn(counts, |_| rows.next().unwrap_or_default()).and_then(|g| g.with_labels(labels))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("players {}\nactions", self.n_players());
        for k in &self.action_counts {
            let _ = write!(out, " {k}");
        }
        out.push('\n');
        for (p, l) in self.labels.iter().enumerate() {
            let _ = writeln!(out, "labels {p} {}", l.join(" "));
        }
        for (ja, pay) in self.joint_actions().zip(&self.payoffs) {
            let keys: Vec<&str> = ja.iter().enumerate().map(|(p, &a)| self.label(p, a)).collect();
            let vals: Vec<String> = pay.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{} : {}", keys.join(" "), vals.join(" "));
        }
        out
    }
}

fn decode(counts: &[usize], mut idx: usize) -> Vec<usize> {
    let mut ja = vec![0; counts.len()];
    for (slot, &k) in ja.iter_mut().zip(counts).rev() {
        *slot = idx % k;
        idx /= k;
    }
    ja
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dominance {
    /// Strictly better than every alternative against every opponent profile.
    Strict,
    /// Never worse than any alternative, but tied somewhere.
    Weak,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapingReport {
    pub optimal_joint: Vec<usize>,
    pub welfare_opt: f64,
    /// `externalities[i][a]` is `E^i(a)`.
    pub externalities: Vec<Vec<f64>>,
    pub shaped: MatrixGame,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub theta: f64,
    pub delta: f64,
}

/// Percentage shaping `F_i = -theta_i r_i + delta_i * sum_j theta_j r_j`.
pub fn percentage_shaping(rewards: &[f64], thetas: &[f64], deltas: &[f64]) -> Vec<f64> {
    let pool: f64 = rewards.iter().zip(thetas).map(|(r, t)| t * r).sum();
    rewards.iter().zip(thetas).zip(deltas).map(|((r, t), d)| -t * r + d * pool).collect()
}

/// Rates reproducing the optimal shaping `-externality` for one agent.
///
/// A positive externality value (harm) is taxed: `theta = E / r`,
/// `delta = 0`. A negative value (benefit) is paid as an allowance out of
/// `pool`, the tax collected from the other agents in the same step:
/// `theta = 0`, `delta = -E / pool`.
pub fn rates_for_externality(externality: f64, reward: f64, pool: f64) -> Result<Rates, GameError> {
    if externality == 0.0 {
        Ok(Rates { theta: 0.0, delta: 0.0 })
    } else if externality > 0.0 {
        if reward == 0.0 {
            return Err(GameError::ZeroRewardTax { player: 0, action: 0, externality });
        }
        Ok(Rates { theta: externality / reward, delta: 0.0 })
    } else {
        if pool == 0.0 {
            return Err(GameError::ZeroPool);
        }
        Ok(Rates { theta: 0.0, delta: -externality / pool })
    }
}

/// Outcome of the exhaustive rate search on a 2-player game.
#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub points_per_axis: usize,
    /// Worst-case welfare over the shaped game's pure equilibria, maximized
    /// over the grid (`-inf` when no grid point has a pure equilibrium).
    pub best_return: f64,
    /// First maximizing `(theta_0, theta_1, delta_0)`; `delta_1 = 1 - delta_0`.
    pub best_rates: (f64, f64, f64),
    pub maximizer_count: usize,
    /// `a*` is an equilibrium of the shaped game for every maximizer.
    pub optimum_is_equilibrium: bool,
    /// Some maximizer has both tax rates at zero.
    pub zero_rates_maximize: bool,
    pub unshaped_equilibria: Vec<Vec<usize>>,
    pub optimal_joint: Vec<usize>,
}

/// Grid search over constant rates `(theta_0, theta_1, delta_0)` with
/// `points_per_axis` evenly spaced values in `[0, 1]` (a single point means
/// only zero). The planner's return for a rate triple is the welfare the
/// agents reach when they play a pure equilibrium of the shaped game,
/// taking the worst such equilibrium.
pub fn theorem2_grid_check(game: &MatrixGame, points_per_axis: usize) -> Result<GridReport, GameError> {
    if game.n_players() != 2 {
        return Err(GameError::NotTwoPlayer);
    }
    if points_per_axis == 0 || points_per_axis > 101 {
        return Err(GameError::GridResolution(points_per_axis));
    }
    let axis: Vec<f64> = if points_per_axis == 1 {
        vec![0.0]
    } else {
        (0..points_per_axis).map(|k| k as f64 / (points_per_axis - 1) as f64).collect()
    };
    let (a_star, _) = game.optimal_joint();
    let mut results = Vec::with_capacity(axis.len().pow(3));
    for &t0 in &axis {
        for &t1 in &axis {
            for &d0 in &axis {
                let shaped = game.shaped_with_rates(&[t0, t1], &[d0, 1.0 - d0]);
                let eq = shaped.pure_equilibria();
                let ret = eq
                    .iter()
                    .map(|ja| game.social_welfare(ja).unwrap())
                    .fold(f64::INFINITY, f64::min);
                let ret = if eq.is_empty() { f64::NEG_INFINITY } else { ret };
                results.push(((t0, t1, d0), ret, shaped.is_equilibrium(&a_star)));
            }
        }
    }
    let best_return = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let maximizers: Vec<_> = results.iter().filter(|r| r.1 == best_return).collect();
    Ok(GridReport {
        points_per_axis,
        best_return,
        best_rates: maximizers[0].0,
        maximizer_count: maximizers.len(),
        optimum_is_equilibrium: maximizers.iter().all(|r| r.2),
        zero_rates_maximize: maximizers.iter().any(|r| r.0 .0 == 0.0 && r.0 .1 == 0.0),
        unshaped_equilibria: game.pure_equilibria(),
        optimal_joint: a_star,
    })
}

/// Actions dominant for every player, with the weakest strength among the
/// players. Only meaningful when players share an action set.
fn common_dominant(game: &MatrixGame) -> Vec<(usize, Dominance)> {
    let k = game.action_counts()[0];
    if game.action_counts().iter().any(|&c| c != k) {
        return Vec::new();
    }
    (0..k)
        .filter_map(|a| {
            let mut strength = Dominance::Strict;
            for p in 0..game.n_players() {
                match game.dominance_check(p, a).ok()? {
                    Dominance::None => return None,
                    Dominance::Weak => strength = Dominance::Weak,
                    Dominance::Strict => {}
                }
            }
            Some((a, strength))
        })
        .collect()
}

fn verdict(game: &MatrixGame, stage: &str) -> String {
    let dom = common_dominant(game);
    if dom.is_empty() {
        return format!("{stage}: no common dominant action");
    }
    let names: Vec<String> = dom.iter().map(|&(a, _)| game.label(0, a).to_string()).collect();
    let (a, strength) = dom[0];
    match strength {
        Dominance::Strict => format!("{stage}: {} strictly dominant", game.label(0, a)),
        _ if names.len() == 1 => format!("{stage}: {} dominant (weak)", names[0]),
        _ => format!("{stage}: {} dominant (weak; ties with {})", names[0], names[1..].join(", ")),
    }
}

fn write_matrix(out: &mut String, game: &MatrixGame) {
    for ja in game.joint_actions() {
        let keys: Vec<&str> = ja.iter().enumerate().map(|(p, &a)| game.label(p, a)).collect();
        let vals: Vec<String> = game.payoff(&ja).unwrap().iter().map(|v| format!("{v:>8.3}")).collect();
        let _ = writeln!(out, "  {:<24} {}", keys.join(", "), vals.join(" "));
    }
}

/// Human-readable shaping report: both payoff tables, externalities,
/// per-player dominance and a verdict line per stage.
pub fn shape_summary(game: &MatrixGame) -> String {
    let report = game.pigovian_shaping();
    let mut out = String::new();
    let opt: Vec<&str> = report.optimal_joint.iter().enumerate().map(|(p, &a)| game.label(p, a)).collect();
    let _ = writeln!(out, "social optimum: ({}) welfare {}", opt.join(", "), report.welfare_opt);
    out.push_str("original payoffs:\n");
    write_matrix(&mut out, game);
    out.push_str("externalities:\n");
    for (p, row) in report.externalities.iter().enumerate() {
        let vals: Vec<String> = row.iter().enumerate().map(|(a, e)| format!("{}={e}", game.label(p, a))).collect();
        let _ = writeln!(out, "  player {}: {}", p + 1, vals.join(" "));
    }
    out.push_str("shaped payoffs:\n");
    write_matrix(&mut out, &report.shaped);
    for (stage, g) in [("before shaping", game), ("after shaping", &report.shaped)] {
        for p in 0..g.n_players() {
            let mut parts = Vec::new();
            for a in 0..g.action_counts()[p] {
                match g.dominance_check(p, a).unwrap() {
                    Dominance::Strict => parts.push(format!("{} strict", g.label(p, a))),
                    Dominance::Weak => parts.push(format!("{} weak", g.label(p, a))),
                    Dominance::None => {}
                }
            }
            let list = if parts.is_empty() { "none".to_string() } else { parts.join(", ") };
            let _ = writeln!(out, "  {stage}, player {} dominant actions: {list}", p + 1);
        }
    }
    let _ = writeln!(out, "{}", verdict(game, "before shaping"));
    let _ = writeln!(out, "{}", verdict(&report.shaped, "after shaping"));
    out
}
