//! State-representation pretraining for feature-based policies.
//!
//! A random policy flies feature-mode episodes; a network with the policy's
//! trunk learns to regress the simulator state from the observations, and
//! its hidden layers are then copied into the policy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::dynamics::STATE_DIM;
use crate::env::{rollout, Env, TaskMode};
use crate::policy::{Adam, AdamConfig, Architecture, Checkpoint, Layer, MlpParams, ParamVars, PolicyError, StepOutcome};

const MAGIC: &[u8; 8] = b"DQREPRDS";
const FORMAT_VERSION: u32 = 1;
const SPLIT_SALT: u64 = 0x5eed_0000_0000_0002;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("pretraining needs feature observations")]
    NotFeatureMode,
    #[error("invalid pretrain config: {0}")]
    Config(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("regression diverged at epoch {epoch}: holdout MSE {mse:.4e} > {factor} x initial {initial:.4e}")]
    Diverged { epoch: usize, mse: f64, initial: f64, factor: f64 },
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub dataset_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Environments per collection batch.
    pub num_envs: usize,
    pub shard_size: usize,
    pub optimizer: AdamConfig,
    /// Abort when the holdout MSE exceeds this multiple of its initial value.
    pub divergence_factor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            dataset_size: 100_000,
            epochs: 500,
            batch_size: 256,
            num_envs: 100,
            shard_size: 25,
            optimizer: AdamConfig { lr: 1e-3, ..Default::default() },
            divergence_factor: 10.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if self.dataset_size == 0 || self.batch_size == 0 || self.num_envs == 0 || self.shard_size == 0 {
            return Err(PretrainError::Config("sizes must be positive".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(PretrainError::Config("divergence_factor must exceed 1".into()));
        }
        self.optimizer.validate().map_err(PretrainError::Config)
    }
}

/// (state, observation) pairs with a fixed train/holdout split.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprDataset {
    pub obs_dim: usize,
    pub seed: u64,
    /// `count x 15`, row-major.
    pub states: Vec<f64>,
    /// `count x obs_dim`, row-major.
    pub observations: Vec<f64>,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl ReprDataset {
    pub fn len(&self) -> usize {
        self.states.len() / STATE_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * STATE_DIM..(i + 1) * STATE_DIM]
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    /// Every 10th sample (after a seeded shuffle) goes to the holdout split.
    fn split(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..count).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
        let n_hold = count / 10;
        let mut holdout = idx[..n_hold].to_vec();
        let mut train = idx[n_hold..].to_vec();
        holdout.sort_unstable();
        train.sort_unstable();
        (train, holdout)
    }

    /// Layout, little-endian:
    ///
    /// ```text
    /// magic "DQREPRDS" | version u32 | state_dim u32 | obs_dim u32 | count u64 | seed u64
    /// | n_holdout u64 | holdout index u64 * n_holdout
    /// | { state f64 * state_dim | observation f64 * obs_dim } * count
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), PretrainError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(STATE_DIM as u32).to_le_bytes())?;
        w.write_all(&(self.obs_dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.holdout.len() as u64).to_le_bytes())?;
        for &i in &self.holdout {
            w.write_all(&(i as u64).to_le_bytes())?;
        }
        for i in 0..self.len() {
            for x in self.state(i).iter().chain(self.observation(i)) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, PretrainError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PretrainError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(PretrainError::Format(format!("unsupported version {version}")));
        }
        let sd = read_u32(r)? as usize;
        if sd != STATE_DIM {
            return Err(PretrainError::Format(format!("state dimension {sd}, expected {STATE_DIM}")));
        }
        let obs_dim = read_u32(r)? as usize;
        let count = read_u64(r)? as usize;
        let seed = read_u64(r)?;
        let n_hold = read_u64(r)? as usize;
        if n_hold > count {
            return Err(PretrainError::Format("holdout larger than dataset".into()));
        }
        let mut holdout = Vec::with_capacity(n_hold);
        for _ in 0..n_hold {
            let i = read_u64(r)? as usize;
            if i >= count || holdout.last().is_some_and(|&p| p >= i) {
                return Err(PretrainError::Format("holdout indices must be sorted and in range".into()));
            }
            holdout.push(i);
        }
        let mut states = Vec::with_capacity(count * STATE_DIM);
        let mut observations = Vec::with_capacity(count * obs_dim);
        for _ in 0..count {
            for _ in 0..STATE_DIM {
                states.push(read_f64(r)?);
            }
            for _ in 0..obs_dim {
                observations.push(read_f64(r)?);
            }
        }
        let mut in_hold = vec![false; count];
        holdout.iter().for_each(|&i| in_hold[i] = true);
        let train = (0..count).filter(|&i| !in_hold[i]).collect();
        Ok(ReprDataset { obs_dim, seed, states, observations, train, holdout })
    }

    pub fn save(&self, path: &Path) -> Result<(), PretrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PretrainError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// Flies `policy` in feature mode and keeps the first `size` (state,
/// observation) pairs, ordered by batch, environment, then step.
pub fn collect_dataset(env: &Env, policy: &MlpParams, size: usize, seed: u64, cfg: &PretrainConfig) -> Result<ReprDataset, PretrainError> {
    if env.config.task != TaskMode::Features {
        return Err(PretrainError::NotFeatureMode);
    }
    if policy.arch.input != env.obs_dim() {
        return Err(PretrainError::Architecture(format!("policy input {} vs observation {}", policy.arch.input, env.obs_dim())));
    }
    let d = env.obs_dim();
    let mut states = Vec::with_capacity(size * STATE_DIM);
    let mut observations = Vec::with_capacity(size * d);
    let mut batch_index = 0u64;
    'outer: while states.len() < size * STATE_DIM {
        let batch = rollout(env, policy, seed, batch_index, cfg.num_envs, cfg.shard_size);
        for tr in &batch.trajectories {
            for t in 0..tr.rewards.len() {
                if !tr.alive[t] {
                    break;
                }
                states.extend_from_slice(&tr.states[t]);
                observations.extend_from_slice(&tr.observations[t * d..(t + 1) * d]);
                if states.len() == size * STATE_DIM {
                    break 'outer;
                }
            }
        }
        batch_index += 1;
    }
    let (train, holdout) = ReprDataset::split(size, seed);
    Ok(ReprDataset { obs_dim: d, seed, states, observations, train, holdout })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared error per standardized target entry.
    pub train_mse: f64,
    pub holdout_mse: f64,
}

/// Regression network plus the target standardization it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    pub net: MlpParams,
    pub target_mean: [f64; STATE_DIM],
    pub target_std: [f64; STATE_DIM],
    pub history: Vec<EpochRecord>,
}

impl Representation {
    /// Predicted states in physical units.
    pub fn predict(&self, obs: &Tensor) -> Result<Tensor, PolicyError> {
        let mut z = self.net.forward(obs)?;
        for r in 0..z.rows() {
            for (j, x) in z.row_slice_mut(r).iter_mut().enumerate() {
                *x = *x * self.target_std[j] + self.target_mean[j];
            }
        }
        Ok(z)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut c = Checkpoint::new(self.net.clone(), seed, self.history.len() as u64);
        c.meta = serde_json::json!({ "kind": "representation" }).to_string();
        c.extras.push(("target_mean".into(), self.target_mean.to_vec()));
        c.extras.push(("target_std".into(), self.target_std.to_vec()));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, PolicyError> {
        let get = |n: &str| -> Result<[f64; STATE_DIM], PolicyError> {
            c.extra(n).and_then(|v| v.try_into().ok()).ok_or_else(|| PolicyError::Format(format!("representation checkpoint lacks `{n}`")))
        };
        Ok(Representation { net: c.policy.clone(), target_mean: get("target_mean")?, target_std: get("target_std")?, history: Vec::new() })
    }
}

fn standardization(ds: &ReprDataset) -> ([f64; STATE_DIM], [f64; STATE_DIM]) {
    let n = ds.train.len().max(1) as f64;
    let mut mean = [0.0; STATE_DIM];
    for &i in &ds.train {
        ds.state(i).iter().zip(mean.iter_mut()).for_each(|(x, m)| *m += x / n);
    }
    let mut std = [0.0; STATE_DIM];
    for &i in &ds.train {
        for j in 0..STATE_DIM {
            std[j] += (ds.state(i)[j] - mean[j]).powi(2) / n;
        }
    }
    // Constant targets keep unit scale.
    std.iter_mut().for_each(|s| *s = if *s > 1e-16 { s.sqrt() } else { 1.0 });
    (mean, std)
}

struct Standardized {
    obs: Tensor,
    targets: Tensor,
}

fn gather(ds: &ReprDataset, idx: &[usize], mean: &[f64; STATE_DIM], std: &[f64; STATE_DIM]) -> Standardized {
    let mut obs = Tensor::zeros(idx.len(), ds.obs_dim);
    let mut targets = Tensor::zeros(idx.len(), STATE_DIM);
    for (r, &i) in idx.iter().enumerate() {
        obs.row_slice_mut(r).copy_from_slice(ds.observation(i));
        for (j, t) in targets.row_slice_mut(r).iter_mut().enumerate() {
            *t = (ds.state(i)[j] - mean[j]) / std[j];
        }
    }
    Standardized { obs, targets }
}

fn mse(net: &MlpParams, data: &Standardized) -> f64 {
    if data.obs.rows() == 0 {
        return f64::NAN;
    }
    let pred = net.forward(&data.obs).expect("dataset width matches network");
    pred.as_slice().iter().zip(data.targets.as_slice()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}

/// Minibatch regression of standardized states on observations. `net`
/// must map `obs_dim` inputs to 15 outputs.
pub fn fit_representation(
    ds: &ReprDataset,
    mut net: MlpParams,
    cfg: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Representation, PretrainError> {
    cfg.validate()?;
    if net.arch.input != ds.obs_dim || net.arch.output != STATE_DIM {
        return Err(PretrainError::Architecture(format!(
            "network {} -> {}, dataset {} -> {STATE_DIM}",
            net.arch.input, net.arch.output, ds.obs_dim
        )));
    }
    let (mean, std) = standardization(ds);
    let holdout = gather(ds, &ds.holdout, &mean, &std);
    let mut opt = Adam::new(cfg.optimizer.clone(), net.num_params());
    let mut flat = net.flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = ds.train.clone();
    let initial = mse(&net, &holdout);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sq = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mb = gather(ds, idx, &mean, &std);
            let mut tape = Tape::new();
            let o = tape.constant(mb.obs);
            let pv = ParamVars::register(&mut tape, &net);
            let y = pv.forward(&mut tape, o);
            let mut seed_y = tape.value(y).clone();
            let scale = 2.0 / seed_y.len() as f64;
            for (s, t) in seed_y.as_mut_slice().iter_mut().zip(mb.targets.as_slice()) {
                *s -= t;
                sq += *s * *s;
                *s *= scale;
            }
            let g = tape.backward_seeded(y, seed_y).expect("seed matches output shape");
            match opt.step(&mut flat, &pv.gradient(&g)) {
                StepOutcome::Applied { .. } => net.set_flat(&flat)?,
                StepOutcome::Skipped { .. } => flat = net.flat(),
            }
        }
        let rec = EpochRecord { epoch, train_mse: sq / (order.len().max(1) * STATE_DIM) as f64, holdout_mse: mse(&net, &holdout) };
        on_epoch(&rec);
        let diverged =
            if holdout.obs.rows() == 0 { !rec.train_mse.is_finite() } else { !(rec.holdout_mse <= cfg.divergence_factor * initial) };
        if diverged {
            return Err(PretrainError::Diverged { epoch, mse: rec.holdout_mse, initial, factor: cfg.divergence_factor });
        }
        history.push(rec);
    }
    Ok(Representation { net, target_mean: mean, target_std: std, history })
}

/// Hidden layers of `params`, without the head.
pub fn extract_trunk(params: &MlpParams) -> Vec<Layer> {
    params.layers[..params.layers.len() - 1].to_vec()
}

/// Copies `trunk` into the hidden layers of `policy`, keeping the policy's
/// own (freshly initialized) head.
pub fn transplant(trunk: &[Layer], policy: &MlpParams) -> Result<MlpParams, PretrainError> {
    let hidden = &policy.layers[..policy.layers.len() - 1];
    if trunk.len() != hidden.len() {
        return Err(PretrainError::Architecture(format!("trunk has {} layers, policy {}", trunk.len(), hidden.len())));
    }
    for (k, (a, b)) in trunk.iter().zip(hidden).enumerate() {
        if a.w.shape() != b.w.shape() || a.b.shape() != b.b.shape() {
            return Err(PretrainError::Architecture(format!("layer {k}: {:?} vs {:?}", a.w.shape(), b.w.shape())));
        }
    }
    let mut out = policy.clone();
    out.layers[..trunk.len()].clone_from_slice(trunk);
    Ok(out)
}

/// Representation network architecture matching a policy trunk.
pub fn representation_arch(policy: &Architecture) -> Architecture {
    policy.with_output(STATE_DIM)
}
