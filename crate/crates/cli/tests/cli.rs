use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lopt")).args(args).output().expect("run lopt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn no_arguments_is_a_usage_error() {
    let o = lopt(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn oracle_reports_the_optimum() {
    let o = lopt(&["oracle", "--env", "er", "--n", "2", "--m", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("optimum 8\n"), "{out}");
    assert!(out.contains("t=1:"));
    let o = lopt(&["oracle", "--env", "er", "--n", "3", "--m", "2"]);
    assert!(stdout(&o).starts_with("optimum 7\n"));
}

#[test]
fn oracle_rejects_impossible_instance() {
    let o = lopt(&["oracle", "--env", "er", "--n", "2", "--m", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shape_flips_the_prisoners_dilemma() {
    let game = repo_file("games/prisoners_dilemma.game");
    let o = lopt(&["shape", "--game", game.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("before shaping: Defect strictly dominant"), "{out}");
    assert!(out.contains("after shaping: Cooperate dominant"), "{out}");
    assert!(out.contains("social optimum is an equilibrium at every maximizer: yes"));
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[env]\nkind = er\nn = 2\nm = 5\n").unwrap();
    let out = dir.path().join("run");
    let o = lopt(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));

    let game = dir.path().join("bad.game");
    std::fs::write(&game, "players 2\nactions 2 2\n0 0 : 1\n").unwrap();
    assert_eq!(lopt(&["shape", "--game", game.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(lopt(&["train", "--config", "/nonexistent.ini", "--out", out.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = repo_file("configs/er_3_2.ini");
    let o = lopt(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3", "--iterations", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("collective extrinsic return"));
    for f in ["config.ini", "metrics.csv", "eval.csv", "checkpoint.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 21);

    let ckpt = out.join("checkpoint.json");
    let o = lopt(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("episodes: 3"));
    let dump = std::fs::read_to_string(out.join("rollouts.jsonl")).unwrap();
    assert!(!dump.is_empty());
}

#[test]
fn planner_off_switches_to_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = repo_file("configs/er_2_1.ini");
    let o = lopt(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--planner", "off", "--iterations", "5"]);
    assert!(o.status.success());
    let saved = std::fs::read_to_string(out.join("config.ini")).unwrap();
    assert!(saved.contains("enabled = false"), "{saved}");
    assert!(stdout(&o).contains("mean tax: 0.0000"));
}

#[test]
fn gradcheck_passes() {
    let o = lopt(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
