//! Full-model rollouts trained with the simple model's Jacobians versus
//! gradients taped through every substep of the full model.
//!
//! cargo run --release --example surrogate_ablation -- [iterations] [hidden]

use diffquad::bptt::{train, BackwardModel, BpttConfig};
use diffquad::env::{mean, Env, EnvConfig, ModelMode};
use diffquad::policy::{init_params, AdamConfig, Architecture, HEAD_INIT_SCALE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let iterations = args.next().transpose()?.unwrap_or(20);
    let hidden = args.next().transpose()?.unwrap_or(32);
    let env = Env::new(EnvConfig { model: ModelMode::Full, ..Default::default() })?;
    let arch = Architecture::new(15, &[hidden, hidden], 4);
    for backward in [BackwardModel::Simple, BackwardModel::Full] {
        let params = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(1), HEAD_INIT_SCALE);
        let cfg = BpttConfig { iterations, backward, optimizer: AdamConfig { lr: 3e-3, ..Default::default() }, ..Default::default() };
        let out = train(&env, &cfg, 1, params, |_, _| Ok(()))?;
        let tail: Vec<f64> = out.records.iter().rev().take(5).map(|r| r.reward_mean).collect();
        let secs = out.records.last().map_or(0.0, |r| r.wall_clock) / iterations as f64;
        println!("{backward:?} backward: final reward {:>9.2}, {:.3} s/iteration", mean(&tail), secs);
    }
    Ok(())
}
