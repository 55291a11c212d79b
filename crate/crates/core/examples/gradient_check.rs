//! Compares the BPTT gradient with central finite differences of the
//! objective along random parameter directions.
//!
//! cargo run --release --example gradient_check -- [horizon] [hidden]

use diffquad::bptt::{bptt_live, objective_of, BackwardModel};
use diffquad::env::{rollout, Env, EnvConfig};
use diffquad::policy::{init_params, Architecture, MlpParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let horizon = args.next().transpose()?.unwrap_or(10);
    let hidden = args.next().transpose()?.unwrap_or(8);
    let env = Env::new(EnvConfig { horizon, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // A non-trivial head so the trajectory actually depends on every layer.
    let params = init_params(&Architecture::new(15, &[hidden, hidden], 4), &mut rng, 0.5);
    let (n_envs, seed) = (4, 3);

    let g = bptt_live(&env, &params, seed, 0, n_envs, 2, BackwardModel::Simple)?.gradient;
    let objective = |p: &MlpParams| objective_of(&rollout(&env, p, seed, 0, n_envs, 2));

    println!("{} parameters, horizon {horizon}", params.num_params());
    println!("{:>4} {:>16} {:>16} {:>10}", "dir", "analytic", "finite diff", "rel err");
    let h = 1e-6;
    for k in 0..5 {
        let d: Vec<f64> = (0..g.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let shifted = |s: f64| {
            let flat: Vec<f64> = params.flat().iter().zip(&d).map(|(p, d)| p + s * d).collect();
            MlpParams::from_flat(&params.arch, &flat).expect("same shape")
        };
        let fd = (objective(&shifted(h)) - objective(&shifted(-h))) / (2.0 * h);
        let an: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        println!("{k:>4} {an:>16.9} {fd:>16.9} {:>10.2e}", (an - fd).abs() / fd.abs().max(1e-12));
    }
    Ok(())
}
