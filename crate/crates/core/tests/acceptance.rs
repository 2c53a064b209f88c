//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary (`cargo test --test acceptance`) and exits non-zero if any
//! criterion fails.

use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lopt_core::cleanup::{apple_spawn_probability, CleanupParams, CleanupSetting};
use lopt_core::escape_room::{er_oracle, ERConfig};
use lopt_core::expio::{write_metrics, EnvConfig, ExperimentConfig, MetricsSink};
use lopt_core::gradcheck;
use lopt_core::matrix_games::{percentage_shaping, theorem2_grid_check, Dominance, MatrixGame};
use lopt_core::planner::{apply_shaping, apply_shaping_with, balance_penalty, BankLedger, OverdraftPolicy, PlannerAction};
use lopt_core::trainer::TrainState;

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(results: &mut Vec<bool>, label: &str, start: Instant, outcome: Outcome) {
    let tag = if outcome.passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {label}: {} ({:.1} s)", outcome.detail, start.elapsed().as_secs_f64());
    results.push(outcome.passed);
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct Run {
    /// Greedy evaluation after the last iteration.
    final_return: f64,
    /// Mean over the periodic evaluations (every `eval_every` iterations,
    /// the last one included).
    curve_mean: f64,
}

fn train_and_eval(mut config: ExperimentConfig, seed: u64) -> Run {
    config.train.seed = seed;
    let episodes = config.train.eval_episodes;
    let every = config.train.eval_every;
    let mut state = TrainState::new(config).expect("config");
    let mut curve = Vec::new();
    for _ in 0..state.config.train.iterations {
        state.train_iteration().expect("iteration");
        if every > 0 && state.iteration % every == 0 {
            curve.push(state.evaluate(episodes).expect("evaluation").mean_collective);
        }
    }
    let final_return = state.evaluate(episodes).expect("evaluation").mean_collective;
    if curve.is_empty() {
        curve.push(final_return);
    }
    Run { final_return, curve_mean: curve.iter().sum::<f64>() / curve.len() as f64 }
}

/// One training run per (config, seed), in parallel threads.
fn run_all(configs: &[ExperimentConfig]) -> Vec<Vec<Run>> {
    thread::scope(|s| {
        let handles: Vec<Vec<_>> = configs
            .iter()
            .map(|c| SEEDS.iter().map(|&seed| s.spawn(move || train_and_eval(c.clone(), seed))).collect())
            .collect();
        handles.into_iter().map(|hs| hs.into_iter().map(|h| h.join().expect("training thread")).collect()).collect()
    })
}

fn finals(runs: &[Run]) -> Vec<f64> {
    runs.iter().map(|r| r.final_return).collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ")
}

fn er_config(n: usize, m: usize, planner: bool) -> ExperimentConfig {
    ExperimentConfig::defaults(EnvConfig::EscapeRoom(ERConfig::new(n, m)), planner, None)
}

fn escape_room(results: &mut Vec<bool>) {
    let budget = Duration::from_secs(600);
    let mut lopt_returns = Vec::new();
    for (k, (n, m)) in [(2, 1), (3, 2)].into_iter().enumerate() {
        let start = Instant::now();
        let optimum = er_oracle(&ERConfig::new(n, m)).unwrap().collective_return;
        let returns = finals(&run_all(&[er_config(n, m, true)]).remove(0));
        let hits = returns.iter().filter(|&&r| (r - optimum).abs() <= 0.5).count();
        let in_time = start.elapsed() <= budget;
        let label = format!("{}. ER({n},{m}) convergence", k + 1);
        let detail = format!("{hits}/3 seeds within 0.5 of optimum {optimum} (final greedy returns {})", fmt(&returns));
        report(results, &label, start, Outcome { passed: hits >= 2 && in_time, detail });
        lopt_returns.push(returns);
    }

    let start = Instant::now();
    let pg: Vec<Vec<f64>> = run_all(&[er_config(2, 1, false), er_config(3, 2, false)]).iter().map(|r| finals(r)).collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for ((pg, lopt), name) in pg.iter().zip(&lopt_returns).zip(["ER(2,1)", "ER(3,2)"]) {
        let good = pg.iter().zip(lopt).filter(|(p, l)| **p <= 0.0 && p < l).count();
        ok &= good >= 2;
        parts.push(format!("{name}: {good}/3 seeds non-positive and below LOPT (PG {})", fmt(pg)));
    }
    report(results, "3. PG baseline gap", start, Outcome { passed: ok, detail: parts.join("; ") });
}

/// Dominance by direct enumeration, independent of the library's check.
fn strictly_dominant(g: &MatrixGame, player: usize, action: usize) -> bool {
    g.joint_actions().filter(|ja| ja[player] == action).all(|ja| {
        (0..g.action_counts()[player]).filter(|&b| b != action).all(|b| {
            let mut alt = ja.clone();
            alt[player] = b;
            g.payoff(&ja).unwrap()[player] > g.payoff(&alt).unwrap()[player]
        })
    })
}

fn weakly_dominant(g: &MatrixGame, player: usize, action: usize) -> bool {
    g.joint_actions().filter(|ja| ja[player] == action).all(|ja| {
        (0..g.action_counts()[player]).filter(|&b| b != action).all(|b| {
            let mut alt = ja.clone();
            alt[player] = b;
            g.payoff(&ja).unwrap()[player] >= g.payoff(&alt).unwrap()[player]
        })
    })
}

fn prisoners_dilemma(results: &mut Vec<bool>) {
    let start = Instant::now();
    let (c, d) = (0, 1);
    let pd = MatrixGame::prisoners_dilemma();
    let shaped = pd.pigovian_shaping().shaped;
    let before = (0..2).all(|p| strictly_dominant(&pd, p, d) && pd.dominance_check(p, d).unwrap() == Dominance::Strict);
    let after = (0..2).all(|p| weakly_dominant(&shaped, p, c) && pd.dominance_check(p, c).unwrap() == Dominance::None);
    let lib_after = (0..2).all(|p| shaped.dominance_check(p, c).unwrap() != Dominance::None);
    let summary = lopt_core::matrix_games::shape_summary(&pd);
    let verdicts = summary.lines().filter(|l| l.starts_with("before shaping:") || l.starts_with("after shaping:")).collect::<Vec<_>>();
    let text_ok = verdicts.iter().any(|l| l.starts_with("before shaping: Defect strictly dominant"))
        && verdicts.iter().any(|l| l.starts_with("after shaping: Cooperate dominant"));
    report(
        results,
        "4. Prisoner's Dilemma flip",
        start,
        Outcome { passed: before && after && lib_after && text_ok, detail: verdicts.join(" | ") },
    );
}

fn random_game(rng: &mut ChaCha8Rng, counts: Vec<usize>) -> MatrixGame {
    MatrixGame::from_fn(counts, |_| {
        (0..2)
            .map(|_| {
                let magnitude = rng.random_range(0.1..10.0);
                if rng.random_bool(0.5) {
                    magnitude
                } else {
                    -magnitude
                }
            })
            .collect()
    })
    .unwrap()
}

fn exact_rates(results: &mut Vec<bool>) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for counts in [vec![2, 2], vec![2, 3]] {
        for _ in 0..200 {
            let g = random_game(&mut rng, counts.clone());
            // independent optimum: first welfare maximizer in enumeration order
            let all: Vec<Vec<usize>> = g.joint_actions().collect();
            let welfare = |ja: &Vec<usize>| g.payoff(ja).unwrap().iter().sum::<f64>();
            let best = all.iter().fold(&all[0], |b, ja| if welfare(ja) > welfare(b) { ja } else { b });
            for player in 0..2 {
                for action in 0..counts[player] {
                    let mut dev = best.clone();
                    dev[player] = action;
                    let target = -(welfare(best) - welfare(&dev));
                    let rates = g.solve_rates(player, action).unwrap();
                    let mut thetas = vec![0.0; 2];
                    let mut deltas = vec![0.0; 2];
                    thetas[player] = rates.theta;
                    deltas[player] = rates.delta;
                    let f = percentage_shaping(g.payoff(&dev).unwrap(), &thetas, &deltas)[player];
                    max_err = max_err.max((f - target).abs());
                    checked += 1;
                }
            }
        }
    }
    report(
        results,
        "5. Exact rate reconstruction",
        start,
        Outcome { passed: max_err < 1e-9, detail: format!("{checked} deviations in 400 random games, max |F - F*| = {max_err:.3e}") },
    );
}

fn rate_grid(results: &mut Vec<bool>) {
    let start = Instant::now();
    let r = theorem2_grid_check(&MatrixGame::prisoners_dilemma(), 21).unwrap();
    let fast = start.elapsed() < Duration::from_secs(10);
    let detail = format!(
        "{} maximizers of welfare {}, optimum {:?} an equilibrium at all of them: {}",
        r.maximizer_count, r.best_return, r.optimal_joint, r.optimum_is_equilibrium
    );
    report(results, "6. Constant-rate grid property", start, Outcome { passed: r.optimum_is_equilibrium && fast, detail });
}

fn gradients(results: &mut Vec<bool>) {
    let start = Instant::now();
    let suites = gradcheck::run_all(0).expect("gradient suites");
    let worst = suites.iter().map(|s| s.max_rel_err).fold(0.0, f64::max);
    let dense = suites.iter().find(|s| s.name == "dense").unwrap();
    let ok = suites.iter().all(|s| s.passed()) && dense.max_rel_err < 1e-5 && start.elapsed() < Duration::from_secs(60);
    let detail = format!("{} suites, worst relative error {worst:.3e}, dense {:.3e}", suites.len(), dense.max_rel_err);
    report(results, "7. Gradient fidelity", start, Outcome { passed: ok, detail });
}

fn random_action(rng: &mut ChaCha8Rng, n: usize) -> PlannerAction {
    let mut delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let s: f64 = delta.iter().sum();
    if s == 0.0 {
        delta = vec![1.0 / n as f64; n];
    } else {
        delta.iter_mut().for_each(|d| *d /= s);
    }
    PlannerAction { theta: (0..n).map(|_| rng.random_range(0.0..=1.0)).collect(), delta, bank_ratio: rng.random_range(0.0..=1.0) }
}

/// Episodes of random length sharing one ledger. Rewards are multiples of
/// 1/4, as environment rewards are (integers), so the bank's grid holds them
/// exactly.
fn conservation(results: &mut Vec<bool>) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut calls, mut rejected, mut violations) = (0, 0, 0);
    let mut episode = 0;
    while calls < 10_000 {
        let n = rng.random_range(1..=6);
        let reject = episode % 2 == 0;
        episode += 1;
        let mut ledger = BankLedger::with_balance(if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0..40) as f64 });
        let mut shaping_log: Vec<Vec<f64>> = Vec::new();
        for _ in 0..rng.random_range(1..=50) {
            calls += 1;
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-40i32..=40) as f64 / 4.0).collect();
            let action = random_action(&mut rng, n);
            let bank = ledger.balance;
            let entries = ledger.entries.len();
            let out = if reject {
                apply_shaping(&rewards, &action, &mut ledger)
            } else {
                apply_shaping_with(&rewards, &action, &mut ledger, OverdraftPolicy::ScaleRebates)
            };
            let Ok(out) = out else {
                rejected += 1;
                violations += usize::from(ledger.balance != bank || ledger.entries.len() != entries);
                continue;
            };
            let before: f64 = rewards.iter().sum();
            let after: f64 = out.shaped.iter().sum();
            let simplex = (action.delta.iter().sum::<f64>() - 1.0).abs() < 1e-12 && action.delta.iter().all(|d| (0.0..=1.0).contains(d));
            let bounded = action.theta.iter().all(|t| (0.0..=1.0).contains(t)) && (0.0..=1.0).contains(&action.bank_ratio);
            if after != before - (ledger.balance - bank) || !simplex || !bounded || ledger.balance < 0.0 {
                violations += 1;
            }
            shaping_log.push(out.shaping);
        }
        let total: f64 = shaping_log.iter().flatten().sum();
        if balance_penalty(shaping_log.iter().map(Vec::as_slice)) != total.abs() {
            violations += 1;
        }
    }
    report(
        results,
        "8. Conservation",
        start,
        Outcome { passed: violations == 0, detail: format!("{calls} calls in {episode} episodes, {rejected} rejected overdrafts, {violations} violations") },
    );
}

fn spawn_dynamics(results: &mut Vec<bool>) {
    let start = Instant::now();
    let mut max_err: f64 = 0.0;
    let mut branches = [0usize; 3];
    for setting in CleanupSetting::ALL {
        let p = CleanupParams::preset(setting);
        for k in 0..100 {
            let d = k as f64 / 99.0;
            let expected = if d >= p.threshold_depletion {
                branches[0] += 1;
                0.0
            } else if d <= p.threshold_restoration {
                branches[1] += 1;
                p.apple_respawn_probability
            } else {
                branches[2] += 1;
                ((1.0 - d) * p.apple_respawn_probability / (p.threshold_depletion - p.threshold_restoration)).clamp(0.0, 1.0)
            };
            max_err = max_err.max((apple_spawn_probability(d, &p) - expected).abs());
        }
    }
    let ok = max_err <= 1e-12 && branches.iter().all(|&b| b > 0);
    let detail = format!("400 points, max error {max_err:.3e}; depletion/restoration/formula points {branches:?}");
    report(results, "9. Spawn dynamics", start, Outcome { passed: ok, detail });
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cleanup(results: &mut Vec<bool>) {
    let start = Instant::now();
    let env = EnvConfig::Cleanup {
        setting: CleanupSetting::Small7x7,
        map_path: None,
        params: CleanupParams::preset(CleanupSetting::Small7x7),
    };
    let mut configs = [ExperimentConfig::defaults(env.clone(), true, None), ExperimentConfig::defaults(env, false, None)];
    for c in &mut configs {
        c.train.iterations = 2000;
        c.train.eval_every = 100;
        c.train.eval_episodes = 100;
    }
    let runs = run_all(&configs);
    let curve = |rs: &[Run]| rs.iter().map(|r| r.curve_mean).collect::<Vec<_>>();
    let (lopt, ac) = (curve(&runs[0]), curve(&runs[1]));
    let (lm, ls) = mean_std(&lopt);
    let (am, as_) = mean_std(&ac);
    let separated = lm - ls > am + as_;
    let in_time = start.elapsed() <= Duration::from_secs(3600);
    let detail = format!(
        "mean over evaluations every 100 iterations: LOPT {lm:.2} ± {ls:.2} ({}), AC {am:.2} ± {as_:.2} ({}); final evaluations LOPT ({}), AC ({})",
        fmt(&lopt),
        fmt(&ac),
        fmt(&finals(&runs[0])),
        fmt(&finals(&runs[1]))
    );
    report(results, "10a. Cleanup 7x7 LOPT above AC", start, Outcome { passed: separated && in_time, detail });

    let start = Instant::now();
    let mut big = ExperimentConfig::cleanup(CleanupSetting::Large18x25);
    big.train.iterations = 10;
    let smoke = (|| -> lopt_core::Result<f64> {
        let mut s = TrainState::new(big)?;
        for _ in 0..10 {
            s.train_iteration()?;
        }
        Ok(s.evaluate(1)?.mean_collective)
    })();
    let outcome = match smoke {
        Ok(r) => Outcome { passed: true, detail: format!("10 iterations with 5 agents, evaluation return {r:.2}") },
        Err(e) => Outcome { passed: false, detail: e.to_string() },
    };
    report(results, "10b. Cleanup 18x25 smoke", start, outcome);
}

fn metrics_bytes(config: &ExperimentConfig, path: &Path) -> Vec<u8> {
    let mut state = TrainState::new(config.clone()).unwrap();
    let mut sink = MetricsSink::open(path, config.env.n_agents()).unwrap();
    for _ in 0..config.train.iterations {
        for row in state.train_iteration().unwrap() {
            write_metrics(&mut sink, &row).unwrap();
        }
    }
    drop(sink);
    std::fs::read(path).unwrap()
}

fn determinism(results: &mut Vec<bool>) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut er = er_config(3, 2, true);
    er.train.iterations = 300;
    er.train.episodes_per_iter = 2;
    er.train.seed = 5;
    let mut cu = ExperimentConfig::cleanup(CleanupSetting::Small7x7);
    cu.train.iterations = 5;
    cu.train.seed = 5;
    let mut same = true;
    let mut sizes = Vec::new();
    for (k, c) in [er, cu].iter().enumerate() {
        let a = metrics_bytes(c, &dir.path().join(format!("a{k}.csv")));
        let b = metrics_bytes(c, &dir.path().join(format!("b{k}.csv")));
        same &= a == b;
        sizes.push(a.len());
    }
    report(
        results,
        "11. Determinism",
        start,
        Outcome { passed: same, detail: format!("metrics files of {sizes:?} bytes identical across repeated runs: {same}") },
    );
}

fn main() {
    let mut results = Vec::new();
    escape_room(&mut results);
    prisoners_dilemma(&mut results);
    exact_rates(&mut results);
    rate_grid(&mut results);
    gradients(&mut results);
    conservation(&mut results);
    spawn_dynamics(&mut results);
    cleanup(&mut results);
    determinism(&mut results);
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
