//! Model-free baseline: PPO with a tanh-squashed Gaussian actor.
//!
//! Rollouts go through the same [`ShardSim`] stepping, observation and reward
//! code as BPTT; only the action rule differs (a sample around the actor
//! mean instead of the mean itself).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::env::{mean, record_episode, std_dev, Env, Trajectory};
use crate::metrics::IterationRecord;
use crate::policy::{
    init_params, squash, Adam, AdamConfig, Architecture, Checkpoint, MlpParams, ParamVars, PolicyError, StepOutcome, HEAD_INIT_SCALE,
};

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_7;
const SHUFFLE_SALT: u64 = 0x7070_0000_0000_0001;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error("policy input {policy} does not match observation width {obs}")]
    ObsDim { policy: usize, obs: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("training aborted: {0}")]
    Aborted(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// Filled from the top level of a run config.
    #[serde(skip)]
    pub iterations: usize,
    #[serde(skip)]
    pub num_envs: usize,
    #[serde(skip)]
    pub shard_size: usize,
    /// Ratio clip; `None` (0 in config files) disables clipping.
    #[serde(with = "crate::policy::zero_is_none")]
    pub clip: Option<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Remaining epochs are skipped once an epoch's approximate KL exceeds this.
    pub max_kl: f64,
    pub init_log_std: f64,
    /// Critic output multiplier, so the value head works on order-one numbers.
    pub value_scale: f64,
    pub optimizer: AdamConfig,
    pub max_consecutive_skips: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            iterations: 1000,
            num_envs: 100,
            shard_size: 25,
            clip: Some(0.2),
            gamma: 0.99,
            lambda: 0.95,
            epochs: 10,
            minibatches: 8,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_kl: 0.15,
            init_log_std: -1.0,
            value_scale: 1000.0,
            optimizer: AdamConfig::default(),
            max_consecutive_skips: 3,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if let Some(c) = self.clip {
            if !(c > 0.0 && c < 1.0) {
                return bad("clip must lie in (0, 1)");
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("gamma and lambda must lie in (0, 1]");
        }
        if self.num_envs == 0 || self.shard_size == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("num_envs, shard_size, epochs and minibatches must be positive");
        }
        if !(self.value_scale > 0.0) || !self.init_log_std.is_finite() || !(self.max_kl > 0.0) {
            return bad("value_scale and max_kl must be positive, init_log_std finite");
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 || self.max_consecutive_skips == 0 {
            return bad("coefficients must be non-negative and max_consecutive_skips positive");
        }
        self.optimizer.validate().map_err(PpoError::Config)
    }
}

/// Gaussian actor with state-independent log-std plus a value network.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorCritic {
    pub actor: MlpParams,
    pub log_std: [f64; 4],
    pub critic: MlpParams,
    pub value_scale: f64,
}

impl ActorCritic {
    /// Actor initialized like a BPTT policy; the critic shares its trunk sizes.
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R, init_log_std: f64, value_scale: f64) -> Self {
        let actor = init_params(arch, rng, HEAD_INIT_SCALE);
        let critic = init_params(&arch.with_output(1), rng, 1.0);
        ActorCritic { actor, log_std: [init_log_std; 4], critic, value_scale }
    }

    /// Parameters in update order: actor, log-std, critic.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.actor.flat();
        v.extend_from_slice(&self.log_std);
        v.extend(self.critic.flat());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), PolicyError> {
        let na = self.actor.num_params();
        let nc = self.critic.num_params();
        if flat.len() != na + 4 + nc {
            return Err(PolicyError::FlatLength { got: flat.len(), want: na + 4 + nc });
        }
        self.actor.set_flat(&flat[..na])?;
        self.log_std.copy_from_slice(&flat[na..na + 4]);
        self.critic.set_flat(&flat[na + 4..])
    }

    pub fn num_params(&self) -> usize {
        self.actor.num_params() + 4 + self.critic.num_params()
    }

    pub fn values(&self, obs: &Tensor) -> Result<Vec<f64>, PolicyError> {
        Ok(self.critic.forward(obs)?.into_vec().into_iter().map(|v| v * self.value_scale).collect())
    }

    /// Checkpoint carrying the actor as the policy; evaluation uses its mean.
    pub fn to_checkpoint(&self, seed: u64, iteration: u64) -> Checkpoint {
        let mut c = Checkpoint::new(self.actor.clone(), seed, iteration);
        c.extras.push(("log_std".into(), self.log_std.to_vec()));
        c.extras.push(("value_scale".into(), vec![self.value_scale]));
        c.extras.push(("critic".into(), self.critic.flat()));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, PolicyError> {
        let missing = |n: &str| PolicyError::Format(format!("checkpoint lacks `{n}`"));
        let ls = c.extra("log_std").ok_or_else(|| missing("log_std"))?;
        let vs = c.extra("value_scale").ok_or_else(|| missing("value_scale"))?;
        let cr = c.extra("critic").ok_or_else(|| missing("critic"))?;
        if ls.len() != 4 || vs.len() != 1 {
            return Err(PolicyError::Format("malformed actor-critic extras".into()));
        }
        let critic = MlpParams::from_flat(&c.policy.arch.with_output(1), cr)?;
        Ok(ActorCritic { actor: c.policy.clone(), log_std: ls.try_into().expect("4"), critic, value_scale: vs[0] })
    }
}

/// Log-density of `y` under a diagonal Gaussian.
pub fn gaussian_log_prob(y: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((y, m), s)| {
            let z = (y - m) * (-s).exp();
            -0.5 * z * z - s - LOG_SQRT_2PI
        })
        .sum()
}

/// `sum ln(1 - tanh(y)^2)`, stable for large `|y|`.
pub fn tanh_log_det(y: &[f64]) -> f64 {
    y.iter()
        .map(|&y| {
            let x = -2.0 * y;
            let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
            2.0 * (std::f64::consts::LN_2 - y - softplus)
        })
        .sum()
}

/// Log-density of the squashed action `tanh(y)` for pre-squash sample `y`.
pub fn squashed_log_prob(y: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    gaussian_log_prob(y, mu, log_std) - tanh_log_det(y)
}

/// Entropy of the pre-squash Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| s + 0.5 + LOG_SQRT_2PI).sum()
}

/// Generalized advantage estimates for one fixed-horizon episode.
/// `values` has one more entry than `rewards`: the bootstrap value of the
/// state after the last step.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(values.len(), rewards.len() + 1, "need a bootstrap value");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// `min(r A, clip(r) A)` and its derivative in `r`.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: Option<f64>) -> (f64, f64) {
    let plain = ratio * adv;
    let Some(eps) = clip else { return (plain, adv) };
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if plain <= clipped {
        (plain, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Flattened on-policy samples, environment-major (`env * horizon + t`).
#[derive(Clone, Debug)]
pub struct PpoBatch {
    pub obs: Tensor,
    /// Pre-squash actions.
    pub pre: Tensor,
    pub log_prob: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Bootstrap value after the last step, one per environment.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episode_rewards: Vec<f64>,
    pub blowups: usize,
    pub trajectories: Vec<Trajectory>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.log_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_prob.is_empty()
    }

    /// Fills `advantages` and `returns` episode by episode.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        let n = self.trajectories.first().map_or(0, |t| t.rewards.len());
        self.advantages.clear();
        self.returns.clear();
        for (e, &last) in self.last_values.iter().enumerate() {
            let r = &self.rewards[e * n..(e + 1) * n];
            let mut v = self.values[e * n..(e + 1) * n].to_vec();
            v.push(last);
            let (a, ret) = gae_advantages(r, &v, gamma, lambda);
            self.advantages.extend(a);
            self.returns.extend(ret);
        }
    }
}

struct ShardSamples {
    trajs: Vec<Trajectory>,
    pre: Vec<Tensor>,
    means: Vec<Tensor>,
    values: Vec<Vec<f64>>,
    last_values: Vec<f64>,
}

/// Samples one episode per environment. With `deterministic` the actor mean
/// is used, which reproduces [`crate::env::rollout`] exactly.
pub fn collect_rollouts(
    env: &Env,
    ac: &ActorCritic,
    seed: u64,
    iteration: u64,
    num_envs: usize,
    shard_size: usize,
    deterministic: bool,
) -> PpoBatch {
    let dp = env.config.dynamics.clone();
    let std: Vec<f64> = ac.log_std.iter().map(|s| s.exp()).collect();
    let parts: Vec<ShardSamples> = Env::shards(num_envs, shard_size)
        .into_par_iter()
        .map(|range| {
            let mut sim = env.spawn(seed, iteration, range);
            let mut pre = Vec::new();
            let mut means = Vec::new();
            let mut values = Vec::new();
            let trajs = record_episode(&mut sim, |obs, sim| {
                let mu = ac.actor.forward(obs).expect("observation width matches policy");
                let mut y = mu.clone();
                if !deterministic {
                    for (i, slot) in sim.slots.iter_mut().enumerate() {
                        for (yj, s) in y.row_slice_mut(i).iter_mut().zip(&std) {
                            let z: f64 = StandardNormal.sample(&mut slot.rng);
                            *yj += s * z;
                        }
                    }
                }
                values.push(ac.values(obs).expect("observation width matches critic"));
                let out = squash(&y, &dp);
                pre.push(y);
                means.push(mu);
                out
            });
            let last_obs = sim.observe();
            let last_values = ac.values(&last_obs).expect("observation width matches critic");
            ShardSamples { trajs, pre, means, values, last_values }
        })
        .collect();

    let n = env.horizon();
    let d = env.obs_dim();
    let mut obs = Vec::with_capacity(num_envs * n * d);
    let mut pre = Vec::with_capacity(num_envs * n * 4);
    let mut log_prob = Vec::with_capacity(num_envs * n);
    let mut values = Vec::with_capacity(num_envs * n);
    let mut rewards = Vec::with_capacity(num_envs * n);
    let mut last_values = Vec::with_capacity(num_envs);
    let mut trajectories = Vec::with_capacity(num_envs);
    for part in parts {
        for (i, tr) in part.trajs.into_iter().enumerate() {
            obs.extend_from_slice(&tr.observations);
            for t in 0..n {
                let y = part.pre[t].row_slice(i);
                log_prob.push(squashed_log_prob(y, part.means[t].row_slice(i), &ac.log_std));
                pre.extend_from_slice(y);
                values.push(part.values[t][i]);
            }
            rewards.extend_from_slice(&tr.rewards);
            last_values.push(part.last_values[i]);
            trajectories.push(tr);
        }
    }
    let m = trajectories.len() * n;
    PpoBatch {
        obs: Tensor::from_vec(m, d, obs).expect("rows"),
        pre: Tensor::from_vec(m, 4, pre).expect("rows"),
        log_prob,
        values,
        rewards,
        last_values,
        advantages: Vec::new(),
        returns: Vec::new(),
        episode_rewards: trajectories.iter().map(Trajectory::episode_reward).collect(),
        blowups: trajectories.iter().filter(|t| t.blew_up).count(),
        trajectories,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinibatchStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean of `(r - 1) - ln r`.
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Gradient of the PPO loss (to be minimized) over the samples `idx`, in
/// [`ActorCritic::flat`] order. `advantages` is indexed like the batch.
pub fn loss_gradient(ac: &ActorCritic, batch: &PpoBatch, idx: &[usize], advantages: &[f64], cfg: &PpoConfig) -> (Vec<f64>, MinibatchStats) {
    let m = idx.len();
    let d = batch.obs.cols();
    let mut obs = Tensor::zeros(m, d);
    for (r, &i) in idx.iter().enumerate() {
        obs.row_slice_mut(r).copy_from_slice(batch.obs.row_slice(i));
    }
    let inv_m = 1.0 / m as f64;

    let mut tape = Tape::new();
    let o = tape.constant(obs.clone());
    let pa = ParamVars::register(&mut tape, &ac.actor);
    let mu = pa.forward(&mut tape, o);
    let mu_val = tape.value(mu).clone();
    let inv_var: Vec<f64> = ac.log_std.iter().map(|s| (-2.0 * s).exp()).collect();

    let mut seed_mu = Tensor::zeros(m, 4);
    let mut g_log_std = [-cfg.entropy_coef; 4];
    let mut stats = MinibatchStats { entropy: gaussian_entropy(&ac.log_std), ..Default::default() };
    for (r, &i) in idx.iter().enumerate() {
        let y = batch.pre.row_slice(i);
        let mu_r = mu_val.row_slice(r);
        let lp = squashed_log_prob(y, mu_r, &ac.log_std);
        let ratio = (lp - batch.log_prob[i]).exp();
        let (obj, dobj) = clipped_surrogate(ratio, advantages[i], cfg.clip);
        stats.policy_loss -= obj * inv_m;
        stats.approx_kl += ((ratio - 1.0) - ratio.ln()) * inv_m;
        if let Some(eps) = cfg.clip {
            if (ratio - 1.0).abs() > eps {
                stats.clip_fraction += inv_m;
            }
        }
        // d loss / d log-prob
        let g = -dobj * ratio * inv_m;
        if g == 0.0 {
            continue;
        }
        for j in 0..4 {
            let e = y[j] - mu_r[j];
            seed_mu.set(r, j, g * e * inv_var[j]);
            g_log_std[j] += g * (e * e * inv_var[j] - 1.0);
        }
    }
    let ga = tape.backward_seeded(mu, seed_mu).expect("seed matches head shape");
    let mut grad = pa.gradient(&ga);
    grad.extend_from_slice(&g_log_std);

    let mut tape = Tape::new();
    let o = tape.constant(obs);
    let pc = ParamVars::register(&mut tape, &ac.critic);
    let v = pc.forward(&mut tape, o);
    let v_val = tape.value(v).clone();
    let mut seed_v = Tensor::zeros(m, 1);
    for (r, &i) in idx.iter().enumerate() {
        let err = v_val.get(r, 0) * ac.value_scale - batch.returns[i];
        stats.value_loss += err * err * inv_m;
        seed_v.set(r, 0, cfg.value_coef * 2.0 * err * ac.value_scale * inv_m);
    }
    let gc = tape.backward_seeded(v, seed_v).expect("seed matches value shape");
    grad.extend(pc.gradient(&gc));
    (grad, stats)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub last: MinibatchStats,
    pub epochs_run: usize,
    pub steps_applied: usize,
    pub steps_skipped: usize,
    /// Mean pre-clip norm of the actor (and log-std) gradient.
    pub mean_grad_norm: f64,
    pub kl_stop: bool,
}

/// Separate Adam states for the actor (with log-std) and the critic, so the
/// value loss does not eat the actor's share of a global clip.
#[derive(Clone, Debug)]
pub struct PpoOptimizer {
    pub actor: Adam,
    pub critic: Adam,
}

impl PpoOptimizer {
    pub fn new(config: &AdamConfig, ac: &ActorCritic) -> Self {
        PpoOptimizer {
            actor: Adam::new(config.clone(), ac.actor.num_params() + 4),
            critic: Adam::new(config.clone(), ac.critic.num_params()),
        }
    }

    /// Applies a gradient in [`ActorCritic::flat`] order. Returns the actor
    /// gradient norm, or `None` if either half was skipped.
    pub fn step(&mut self, ac: &mut ActorCritic, grad: &[f64]) -> Result<Option<f64>, PolicyError> {
        let mut flat = ac.flat();
        let na = ac.actor.num_params() + 4;
        let (fa, fc) = flat.split_at_mut(na);
        let (ga, gc) = grad.split_at(na);
        let norm = match self.actor.step(fa, ga) {
            StepOutcome::Applied { grad_norm } => grad_norm,
            StepOutcome::Skipped { .. } => return Ok(None),
        };
        if let StepOutcome::Skipped { .. } = self.critic.step(fc, gc) {
            return Ok(None);
        }
        ac.set_flat(&flat)?;
        Ok(Some(norm))
    }
}

/// Clipped-objective epochs over `batch`, which must carry advantages.
pub fn ppo_update<R: Rng + ?Sized>(
    ac: &mut ActorCritic,
    opt: &mut PpoOptimizer,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    assert_eq!(batch.advantages.len(), batch.len(), "advantages not computed");
    let mu = mean(&batch.advantages);
    let sd = std_dev(&batch.advantages);
    let adv: Vec<f64> = batch.advantages.iter().map(|a| (a - mu) / (sd + 1e-8)).collect();

    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mb = batch.len().div_ceil(cfg.minibatches).max(1);
    let mut out = UpdateStats::default();
    let mut norm_sum = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut kl = 0.0;
        let mut count = 0;
        for idx in order.chunks(mb) {
            let (grad, stats) = loss_gradient(ac, batch, idx, &adv, cfg);
            kl += stats.approx_kl;
            count += 1;
            out.last = stats;
            match opt.step(ac, &grad)? {
                Some(n) => {
                    out.steps_applied += 1;
                    norm_sum += n;
                }
                None => out.steps_skipped += 1,
            }
        }
        out.epochs_run += 1;
        if kl / count as f64 > cfg.max_kl {
            log::info!("approximate KL {:.3} above {}; skipping remaining epochs", kl / count as f64, cfg.max_kl);
            out.kl_stop = true;
            break;
        }
    }
    out.mean_grad_norm = if out.steps_applied > 0 { norm_sum / out.steps_applied as f64 } else { f64::NAN };
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PpoOutcome {
    pub model: ActorCritic,
    pub records: Vec<IterationRecord>,
}

/// Collect, estimate advantages, update; one metrics record per iteration.
pub fn train(
    env: &Env,
    cfg: &PpoConfig,
    seed: u64,
    mut ac: ActorCritic,
    mut on_iteration: impl FnMut(&IterationRecord, &ActorCritic) -> anyhow::Result<()>,
) -> anyhow::Result<PpoOutcome> {
    cfg.validate()?;
    if ac.actor.arch.input != env.obs_dim() {
        return Err(PpoError::ObsDim { policy: ac.actor.arch.input, obs: env.obs_dim() }.into());
    }
    let mut opt = PpoOptimizer::new(&cfg.optimizer, &ac);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    let steps_per_iter = (cfg.num_envs * env.horizon()) as u64;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut skips = 0;
    for k in 0..cfg.iterations {
        let mut batch = collect_rollouts(env, &ac, seed, k as u64, cfg.num_envs, cfg.shard_size, false);
        batch.compute_advantages(cfg.gamma, cfg.lambda);
        let stats = ppo_update(&mut ac, &mut opt, &batch, cfg, &mut rng)?;
        let skipped = stats.steps_applied == 0;
        if skipped {
            skips += 1;
            if skips >= cfg.max_consecutive_skips {
                return Err(PpoError::Aborted(format!("{skips} consecutive iterations without an applied update")).into());
            }
        } else {
            skips = 0;
        }
        let rec = IterationRecord {
            iteration: k,
            reward_mean: mean(&batch.episode_rewards),
            reward_std: std_dev(&batch.episode_rewards),
            samples: steps_per_iter * (k as u64 + 1),
            wall_clock: start.elapsed().as_secs_f64(),
            grad_norm: stats.mean_grad_norm,
            skipped,
            blowups: batch.blowups,
        };
        on_iteration(&rec, &ac)?;
        records.push(rec);
    }
    Ok(PpoOutcome { model: ac, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout, EnvConfig, TaskMode};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_env(task: TaskMode, horizon: usize) -> Env {
        Env::new(EnvConfig { task, horizon, ..Default::default() }).unwrap()
    }

    fn small_ac(env: &Env, seed: u64) -> ActorCritic {
        ActorCritic::new(&Architecture::new(env.obs_dim(), &[8, 8], 4), &mut ChaCha8Rng::seed_from_u64(seed), -1.0, 10.0)
    }

    fn brute_force_gae(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        (0..r.len())
            .map(|t| {
                let mut a = 0.0;
                for k in 0..r.len() - t {
                    let delta = r[t + k] + gamma * v[t + k + 1] - v[t + k];
                    a += (gamma * lambda).powi(k as i32) * delta;
                }
                a
            })
            .collect()
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [1.0, -2.0, 0.5];
        let v = [0.3, 0.1, -0.4, 2.0];
        let (a, ret) = gae_advantages(&r, &v, 0.9, 0.0);
        for t in 0..3 {
            assert_eq!(a[t], r[t] + 0.9 * v[t + 1] - v[t]);
            assert_eq!(ret[t], a[t] + v[t]);
        }
    }

    #[test]
    fn gae_undiscounted_zero_values_is_suffix_sum() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let (a, _) = gae_advantages(&r, &[0.0; 5], 1.0, 1.0);
        assert_eq!(a, vec![10.0, 9.0, 7.0, 4.0]);
    }

    proptest! {
        #[test]
        fn gae_matches_brute_force(
            r in prop::collection::vec(-5.0..5.0f64, 10),
            v in prop::collection::vec(-5.0..5.0f64, 11),
            gamma in 0.5..1.0f64,
            lambda in 0.0..1.0f64,
        ) {
            let (a, _) = gae_advantages(&r, &v, gamma, lambda);
            for (x, y) in a.iter().zip(brute_force_gae(&r, &v, gamma, lambda)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_prob_matches_density_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ls: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..0.5)).collect();
            let mut density = 1.0;
            for j in 0..4 {
                let s = ls[j].exp();
                density *= (-(y[j] - mu[j]).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            }
            assert!((gaussian_log_prob(&y, &mu, &ls) - density.ln()).abs() < 1e-12);
            let jac: f64 = y.iter().map(|v| 1.0 - v.tanh().powi(2)).product();
            assert!((squashed_log_prob(&y, &mu, &ls) - (density / jac).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        // 1-D density of a = tanh(y), midpoint rule on (-1, 1).
        let (mu, ls) = ([0.4], [-0.3]);
        let n = 200_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n)
            .map(|k| {
                let a = -1.0 + (k as f64 + 0.5) * h;
                squashed_log_prob(&[a.atanh()], &mu, &ls).exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn clipping_flattens_the_objective() {
        let (v1, d1) = clipped_surrogate(1.5, 2.0, Some(0.2));
        let (v2, d2) = clipped_surrogate(3.0, 2.0, Some(0.2));
        assert_eq!((v1, d1), (2.4, 0.0));
        assert_eq!((v2, d2), (2.4, 0.0));
        assert_eq!(clipped_surrogate(1.1, 2.0, Some(0.2)), (1.1 * 2.0, 2.0));
        // negative advantage: flat below 1 - clip
        assert_eq!(clipped_surrogate(0.5, -1.0, Some(0.2)).1, 0.0);
        assert_eq!(clipped_surrogate(3.0, 2.0, None), (6.0, 2.0));
    }

    #[test]
    fn deterministic_collection_reproduces_rollout() {
        for task in [TaskMode::State, TaskMode::Features] {
            let env = small_env(task, 12);
            let ac = small_ac(&env, 1);
            let batch = collect_rollouts(&env, &ac, 5, 2, 6, 4, true);
            let plain = rollout(&env, &ac.actor, 5, 2, 6, 4);
            assert_eq!(batch.trajectories, plain.trajectories);
        }
    }

    #[test]
    fn zero_std_limit_samples_the_mean() {
        let env = small_env(TaskMode::State, 8);
        let mut ac = small_ac(&env, 2);
        ac.log_std = [-40.0; 4];
        let sampled = collect_rollouts(&env, &ac, 3, 0, 4, 4, false);
        let mean_run = collect_rollouts(&env, &ac, 3, 0, 4, 4, true);
        for (a, b) in sampled.trajectories.iter().zip(&mean_run.trajectories) {
            for (x, y) in a.actions.iter().zip(&b.actions) {
                for j in 0..4 {
                    assert!((x[j] - y[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stored_log_prob_matches_density_of_stored_sample() {
        let env = small_env(TaskMode::State, 6);
        let ac = small_ac(&env, 3);
        let b = collect_rollouts(&env, &ac, 1, 0, 3, 2, false);
        assert_eq!(b.len(), 18);
        for i in 0..b.len() {
            let mu = ac.actor.forward(&Tensor::row(b.obs.row_slice(i))).unwrap();
            let lp = squashed_log_prob(b.pre.row_slice(i), mu.as_slice(), &ac.log_std);
            assert_eq!(lp, b.log_prob[i]);
        }
    }

    fn prepared(seed: u64) -> (Env, ActorCritic, PpoBatch) {
        let env = small_env(TaskMode::State, 10);
        let ac = small_ac(&env, seed);
        let mut b = collect_rollouts(&env, &ac, seed, 0, 4, 2, false);
        b.compute_advantages(0.99, 0.95);
        (env, ac, b)
    }

    #[test]
    fn zero_advantages_leave_only_entropy() {
        let (_, ac, b) = prepared(1);
        let cfg = PpoConfig { entropy_coef: 0.01, value_coef: 0.0, ..Default::default() };
        let idx: Vec<usize> = (0..b.len()).collect();
        let (g, _) = loss_gradient(&ac, &b, &idx, &vec![0.0; b.len()], &cfg);
        let na = ac.actor.num_params();
        assert!(g[..na].iter().all(|&x| x == 0.0));
        assert_eq!(&g[na..na + 4], &[-0.01; 4]);
    }

    #[test]
    fn unclipped_gradient_is_the_policy_gradient() {
        let (_, ac, b) = prepared(2);
        let cfg = PpoConfig { clip: None, value_coef: 0.0, ..Default::default() };
        let idx: Vec<usize> = (0..b.len()).collect();
        let adv: Vec<f64> = b.advantages.clone();
        let (g, _) = loss_gradient(&ac, &b, &idx, &adv, &cfg);
        // Finite differences of -mean(A * log pi) over the actor parameters.
        let surrogate = |ac: &ActorCritic| -> f64 {
            let mu = ac.actor.forward(&b.obs).unwrap();
            -(0..b.len()).map(|i| adv[i] * squashed_log_prob(b.pre.row_slice(i), mu.row_slice(i), &ac.log_std)).sum::<f64>()
                / b.len() as f64
        };
        let flat = ac.flat();
        let n = ac.actor.num_params() + 4;
        let h = 1e-6;
        let mut fd = Vec::with_capacity(n);
        for k in 0..n {
            let (mut a, mut c) = (ac.clone(), ac.clone());
            let (mut fa, mut fc) = (flat.clone(), flat.clone());
            fa[k] += h;
            fc[k] -= h;
            a.set_flat(&fa).unwrap();
            c.set_flat(&fc).unwrap();
            fd.push((surrogate(&a) - surrogate(&c)) / (2.0 * h));
        }
        let dot: f64 = fd.iter().zip(&g[..n]).map(|(x, y)| x * y).sum();
        let cos = dot / (fd.iter().map(|x| x * x).sum::<f64>().sqrt() * g[..n].iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!(cos > 0.99, "cosine {cos}");
        let rel = fd.iter().zip(&g[..n]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let (_, ac, b) = prepared(3);
        let cfg = PpoConfig { value_coef: 0.5, ..Default::default() };
        let idx: Vec<usize> = (0..b.len()).step_by(3).collect();
        let (g, _) = loss_gradient(&ac, &b, &idx, &vec![0.0; b.len()], &cfg);
        let loss = |ac: &ActorCritic| {
            let (_, s) = loss_gradient(ac, &b, &idx, &vec![0.0; b.len()], &cfg);
            cfg.value_coef * s.value_loss
        };
        let flat = ac.flat();
        let off = ac.actor.num_params() + 4;
        for k in (off..flat.len()).step_by(7) {
            let (mut a, mut c) = (ac.clone(), ac.clone());
            let (mut fa, mut fc) = (flat.clone(), flat.clone());
            fa[k] += 1e-6;
            fc[k] -= 1e-6;
            a.set_flat(&fa).unwrap();
            c.set_flat(&fc).unwrap();
            let fd = (loss(&a) - loss(&c)) / 2e-6;
            assert!((fd - g[k]).abs() <= 1e-5 * fd.abs().max(1.0), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn kl_guard_stops_epochs() {
        let (_, mut ac, b) = prepared(4);
        let cfg = PpoConfig {
            epochs: 10,
            minibatches: 2,
            max_kl: 1e-9,
            optimizer: AdamConfig { lr: 1e-2, ..Default::default() },
            ..Default::default()
        };
        let mut opt = PpoOptimizer::new(&cfg.optimizer, &ac);
        let s = ppo_update(&mut ac, &mut opt, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.kl_stop);
        assert!(s.epochs_run < 10);
    }

    #[test]
    fn checkpoint_round_trip() {
        let env = small_env(TaskMode::State, 4);
        let ac = small_ac(&env, 9);
        let back = ActorCritic::from_checkpoint(&ac.to_checkpoint(1, 2)).unwrap();
        assert_eq!(back, ac);
    }

    #[test]
    fn training_is_reproducible_and_logs_every_iteration() {
        let env = small_env(TaskMode::State, 20);
        let cfg = PpoConfig { iterations: 3, num_envs: 6, shard_size: 4, epochs: 2, minibatches: 2, ..Default::default() };
        let run = || train(&env, &cfg, 7, small_ac(&env, 7), |_, _| Ok(())).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.records.len(), 3);
        assert_eq!(a.records.iter().map(|r| r.samples).collect::<Vec<_>>(), vec![120, 240, 360]);
        let strip = |o: &PpoOutcome| o.records.iter().map(IterationRecord::without_time).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.model, b.model);
    }
}
