use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use lopt_core::cleanup::{Cleanup, CleanupParams, CleanupSetting};
use lopt_core::escape_room::{er_oracle, ERConfig, EscapeRoom};
use lopt_core::matrix_games::{theorem2_grid_check, MatrixGame};
use lopt_core::planner::{apply_shaping, random_action, BankLedger};
use lopt_core::rng::stream;
use lopt_core::trainer::TrainState;
use lopt_core::{Environment, ExperimentConfig};

fn shaping(c: &mut Criterion) {
    let mut rng = stream(0, 0);
    let actions: Vec<_> = (0..256).map(|_| random_action(5, &mut rng)).collect();
    let rewards = [1.0, -1.0, 0.5, 2.0, 0.0];
    c.bench_function("apply_shaping n=5", |b| {
        b.iter(|| {
            let mut ledger = BankLedger::with_balance(10.0);
            for a in &actions {
                let _ = black_box(apply_shaping(&rewards, a, &mut ledger));
            }
        })
    });
}

fn env_steps(c: &mut Criterion) {
    let mut er = EscapeRoom::new(ERConfig::new(3, 2)).unwrap();
    c.bench_function("escape room episode", |b| {
        b.iter(|| {
            er.reset(0);
            while !er.is_done() {
                black_box(er.step(&[0, 1, 2]).unwrap());
            }
        })
    });
    let mut cu = Cleanup::new(CleanupParams::preset(CleanupSetting::Large18x25)).unwrap();
    let mut k = 0usize;
    cu.reset(0);
    c.bench_function("cleanup 18x25 step", |b| {
        b.iter(|| {
            if cu.is_done() {
                cu.reset(k as u64);
            }
            k += 1;
            let joint: Vec<usize> = (0..5).map(|i| (k + i) % cu.n_actions()).collect();
            black_box(cu.step(&joint).unwrap());
        })
    });
}

fn oracle_and_grid(c: &mut Criterion) {
    c.bench_function("escape room oracle (3,2)", |b| b.iter(|| black_box(er_oracle(&ERConfig::new(3, 2)).unwrap())));
    let pd = MatrixGame::prisoners_dilemma();
    c.bench_function("rate grid 21 (PD)", |b| b.iter(|| black_box(theorem2_grid_check(&pd, 21).unwrap())));
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train iteration");
    group.sample_size(10);
    let mut er = TrainState::new(ExperimentConfig::escape_room(3, 2)).unwrap();
    group.bench_function("escape room (3,2) with planner", |b| b.iter(|| black_box(er.train_iteration().unwrap())));
    let mut cu = TrainState::new(ExperimentConfig::cleanup(CleanupSetting::Small7x7)).unwrap();
    group.bench_function("cleanup 7x7 with planner", |b| b.iter(|| black_box(cu.train_iteration().unwrap())));
    group.finish();
}

criterion_group!(benches, shaping, env_steps, oracle_and_grid, training);
criterion_main!(benches);
