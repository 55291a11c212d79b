//! Representation pretraining for the feature-based task: regress the
//! state from feature observations, then move the trunk into a policy.
//!
//! cargo run --release --example pretrain_features -- [samples] [epochs] [hidden]

use diffquad::autodiff::Tensor;
use diffquad::env::{Env, EnvConfig, TaskMode};
use diffquad::policy::{init_params, squash, Architecture, HEAD_INIT_SCALE};
use diffquad::pretrain::{collect_dataset, extract_trunk, fit_representation, representation_arch, transplant, PretrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let samples = args.next().transpose()?.unwrap_or(5000);
    let epochs = args.next().transpose()?.unwrap_or(20);
    let hidden = args.next().transpose()?.unwrap_or(32);
    let env = Env::new(EnvConfig { task: TaskMode::Features, horizon: 100, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let arch = Architecture::new(env.obs_dim(), &[hidden, hidden], 4);
    let policy = init_params(&arch, &mut rng, HEAD_INIT_SCALE);

    let cfg = PretrainConfig { dataset_size: samples, epochs, ..Default::default() };
    let ds = collect_dataset(&env, &policy, samples, 1, &cfg)?;
    println!("{} pairs, {} train / {} holdout", ds.len(), ds.train.len(), ds.holdout.len());
    let net = init_params(&representation_arch(&arch), &mut rng, 1.0);
    let rep = fit_representation(&ds, net, &cfg, 1, |e| {
        if e.epoch % 5 == 0 {
            println!("epoch {:>3}  train {:.4}  holdout {:.4}", e.epoch, e.train_mse, e.holdout_mse);
        }
    })?;

    // Position estimate for one held-out sample, in meters.
    let i = ds.holdout[0];
    let est = rep.predict(&Tensor::from_vec(1, ds.obs_dim, ds.observation(i).to_vec())?)?;
    println!("true p {:.2?}  estimated {:.2?}", &ds.state(i)[..3], &est.as_slice()[..3]);

    let warm = transplant(&extract_trunk(&rep.net), &policy)?;
    let (u, _) = squash(&warm.forward(&Tensor::from_vec(1, ds.obs_dim, ds.observation(i).to_vec())?)?, &env.config.dynamics);
    println!("warm-started policy action {:.3?}", u.as_slice());
    Ok(())
}
