//! The model-free baseline: PPO on the same environments and reward.
//!
//! cargo run --release --example ppo_baseline -- [iterations] [hidden]

use diffquad::env::{Env, EnvConfig};
use diffquad::policy::Architecture;
use diffquad::ppo::{train, ActorCritic, PpoConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let iterations = args.next().transpose()?.unwrap_or(10);
    let hidden = args.next().transpose()?.unwrap_or(32);
    let env = Env::new(EnvConfig::default())?;
    let cfg = PpoConfig { iterations, ..Default::default() };
    let ac = ActorCritic::new(
        &Architecture::new(15, &[hidden, hidden], 4),
        &mut ChaCha8Rng::seed_from_u64(1),
        cfg.init_log_std,
        cfg.value_scale,
    );

    let out = train(&env, &cfg, 1, ac, |r, m| {
        let std: Vec<String> = m.log_std.iter().map(|s| format!("{:.2}", s.exp())).collect();
        println!("iter {:>4}  reward {:>9.2}  samples {:>8}  std [{}]", r.iteration, r.reward_mean, r.samples, std.join(" "));
        Ok(())
    })?;
    println!("final reward {:.2}", out.records.last().map_or(f64::NAN, |r| r.reward_mean));
    Ok(())
}
