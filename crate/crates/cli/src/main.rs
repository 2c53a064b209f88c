use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lopt_core::escape_room::{er_oracle, ERConfig};
use lopt_core::expio::{dump_rollout, write_metrics, MetricsSink};
use lopt_core::gradcheck::{self, GRADCHECK_TOLERANCE};
use lopt_core::matrix_games::{shape_summary, theorem2_grid_check, MatrixGame};
use lopt_core::trainer::{EvalSummary, TrainState};
use lopt_core::ExperimentConfig;

#[derive(Parser)]
#[command(name = "lopt", version, about = "Multi-agent RL with a learned Pigovian tax planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleEnv {
    Er,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents (and the planner unless disabled) from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `train.out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `off` trains the unshaped baseline with the baseline defaults.
        #[arg(long, value_enum)]
        planner: Option<Switch>,
        /// Overrides `train.iterations`.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Greedy evaluation of a checkpoint; writes rollouts as JSON lines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Rollout dump path (default: `rollouts.jsonl` next to the checkpoint).
        #[arg(long)]
        rollouts: Option<PathBuf>,
    },
    /// Exact optimum of an Escape Room instance by exhaustive search.
    Oracle {
        #[arg(long, value_enum)]
        env: OracleEnv,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Pigovian shaping of a normal-form game with dominance verdicts.
    Shape {
        #[arg(long)]
        game: PathBuf,
        /// Points per axis of the constant-rate grid search (2-player games; 0 skips it).
        #[arg(long, default_value_t = 21)]
        grid: usize,
    },
    /// Runs every finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit code 1: bad input; 2: failure while running.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<lopt_core::Error> for Failure {
    fn from(e: lopt_core::Error) -> Self {
        match e {
            lopt_core::Error::Config(_) | lopt_core::Error::Game(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, seed, out, planner, iterations } => train(&config, seed, out, planner, iterations),
        Command::Eval { checkpoint, episodes, rollouts } => eval(&checkpoint, episodes, rollouts),
        Command::Oracle { env: OracleEnv::Er, n, m, horizon } => oracle(n, m, horizon),
        Command::Shape { game, grid } => shape(&game, grid),
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

fn train(path: &Path, seed: Option<u64>, out: Option<PathBuf>, planner: Option<Switch>, iterations: Option<u64>) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let mut overrides = Vec::new();
    if let Some(s) = seed {
        overrides.push(("train.seed", s.to_string()));
    }
    if let Some(p) = planner {
        overrides.push(("planner.enabled", matches!(p, Switch::On).to_string()));
    }
    if let Some(i) = iterations {
        overrides.push(("train.iterations", i.to_string()));
    }
    if let Some(o) = &out {
        overrides.push(("train.out", o.display().to_string()));
    }
    let config = ExperimentConfig::parse_with_overrides(&text, &overrides).map_err(lopt_core::Error::from)?;
    let dir = config
        .train
        .out
        .clone()
        .ok_or_else(|| Failure::Invalid("no output directory: pass --out or set train.out".into()))?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.ini"), config.to_text())?;

    let mut state = TrainState::new(config)?;
    let cfg = state.config.clone();
    let mut sink = MetricsSink::open(&dir.join("metrics.csv"), cfg.env.n_agents())?;
    let mut evals = BufWriter::new(File::create(dir.join("eval.csv"))?);
    writeln!(evals, "iteration,env_steps,mean_collective,std_collective")?;
    let checkpoint = dir.join("checkpoint.json");
    for _ in 0..cfg.train.iterations {
        for row in state.train_iteration()? {
            write_metrics(&mut sink, &row)?;
        }
        if cfg.train.eval_every > 0 && state.iteration % cfg.train.eval_every == 0 {
            let s = state.evaluate(cfg.train.eval_episodes)?;
            writeln!(evals, "{},{},{},{}", state.iteration, state.env_steps, s.mean_collective, s.std_collective)?;
            evals.flush()?;
            println!("iteration {:>6}  eval collective {:.3} ± {:.3}", state.iteration, s.mean_collective, s.std_collective);
            state.save(&checkpoint)?;
        }
    }
    let s = state.evaluate(cfg.train.eval_episodes)?;
    writeln!(evals, "{},{},{},{}", state.iteration, state.env_steps, s.mean_collective, s.std_collective)?;
    evals.flush()?;
    state.save(&checkpoint)?;
    println!("trained {} iterations ({} environment steps) into {}", state.iteration, state.env_steps, dir.display());
    print_summary(&s);
    Ok(())
}

fn print_summary(s: &EvalSummary) {
    println!("episodes: {}", s.episodes);
    println!("collective extrinsic return: {:.4} ± {:.4}", s.mean_collective, s.std_collective);
    let per: Vec<String> = s.mean_per_agent.iter().map(|r| format!("{r:.4}")).collect();
    println!("per-agent return: {}", per.join(" "));
    println!("mean tax: {:.4}  mean allowance: {:.4}", s.mean_tax, s.mean_allowance);
}

fn eval(checkpoint: &Path, episodes: usize, rollouts: Option<PathBuf>) -> Result<(), Failure> {
    if episodes == 0 {
        return Err(Failure::Invalid("--episodes must be at least 1".into()));
    }
    let state = TrainState::load(checkpoint)?;
    let trajs = state.evaluation_rollouts(episodes)?;
    let path = rollouts.unwrap_or_else(|| checkpoint.with_file_name("rollouts.jsonl"));
    let mut w = BufWriter::new(File::create(&path)?);
    for (k, t) in trajs.iter().enumerate() {
        dump_rollout(&mut w, k as u64, t)?;
    }
    w.flush()?;
    print_summary(&EvalSummary::from_trajectories(&trajs));
    println!("rollouts: {}", path.display());
    Ok(())
}

fn oracle(n: usize, m: usize, horizon: Option<usize>) -> Result<(), Failure> {
    let mut config = ERConfig::new(n, m);
    if let Some(h) = horizon {
        config.horizon = h;
    }
    config.validate().map_err(|e| Failure::Invalid(e.to_string()))?;
    let plan = er_oracle(&config).map_err(|e| Failure::Invalid(e.to_string()))?;
    println!("optimum {}", plan.collective_return);
    println!("plan ({} steps):", plan.plan.len());
    for (t, joint) in plan.plan.iter().enumerate() {
        let names: Vec<&str> = joint.iter().map(|l| l.name()).collect();
        println!("  t={}: {}", t + 1, names.join(" "));
    }
    Ok(())
}

fn shape(path: &Path, grid: usize) -> Result<(), Failure> {
    let game = MatrixGame::load(path).map_err(lopt_core::Error::from)?;
    print!("{}", shape_summary(&game));
    if grid > 0 && game.n_players() == 2 {
        let r = theorem2_grid_check(&game, grid).map_err(lopt_core::Error::from)?;
        let (t0, t1, d0) = r.best_rates;
        println!("rate grid ({grid} points per axis): best equilibrium welfare {}", r.best_return);
        println!("  first maximizer theta=({t0}, {t1}) delta=({d0}, {})", 1.0 - d0);
        println!("  social optimum is an equilibrium at every maximizer: {}", yes_no(r.optimum_is_equilibrium));
        println!("  zero rates among maximizers: {}", yes_no(r.zero_rates_maximize));
    }
    Ok(())
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn gradcheck(seed: u64) -> Result<(), Failure> {
    let results = gradcheck::run_all(seed)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{verdict:<4} {:<45} {:>6} params  max rel err {:.3e}", r.name, r.checked, r.max_rel_err);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} suite(s) above tolerance {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(())
}
