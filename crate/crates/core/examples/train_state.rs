//! Trains a state-feedback policy with BPTT and evaluates it on throws.
//!
//! cargo run --release --example train_state -- [iterations] [hidden]

use diffquad::bptt::{train, BpttConfig};
use diffquad::env::{Env, EnvConfig};
use diffquad::eval::{evaluate, SuccessCriterion};
use diffquad::policy::{init_params, AdamConfig, Architecture, HEAD_INIT_SCALE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let iterations = args.next().transpose()?.unwrap_or(60);
    let hidden = args.next().transpose()?.unwrap_or(64);
    let env = Env::new(EnvConfig::default())?;
    let params = init_params(&Architecture::new(15, &[hidden, hidden], 4), &mut ChaCha8Rng::seed_from_u64(1), HEAD_INIT_SCALE);
    let cfg = BpttConfig { iterations, optimizer: AdamConfig { lr: 3e-3, ..Default::default() }, ..Default::default() };

    let out = train(&env, &cfg, 1, params, |r, _| {
        if r.iteration % 10 == 0 {
            println!("iter {:>4}  reward {:>9.2}  grad {:>8.3}  {:>5.1}s", r.iteration, r.reward_mean, r.grad_norm, r.wall_clock);
        }
        Ok(())
    })?;

    let (report, _) = evaluate(&env, &out.params, 100, 7, 25, &SuccessCriterion::default());
    println!("eval: success {:.0}%  mean reward {:.2}", 100.0 * report.success_rate, report.mean_reward);
    Ok(())
}
