//! Batched environments shared by every trainer, the evaluator and the bench.
//!
//! Environments are grouped into shards of consecutive indices. Every random
//! draw of environment `i` in iteration `k` comes from its own stream, so the
//! results do not depend on how shards are scheduled onto threads.

use std::ops::Range;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dynamics::{
    full_step, sample_initial_state, simple_step, Action, DynamicsError, DynamicsParams, FullModelState, InitDistribution, QuadState,
    STATE_DIM,
};
use crate::observation::{
    CameraConfig, FeatureSensor, LayoutConfig, ObservationBuffer, ObservationError, FEATURE_OBS_DIM, FRAME_DIM, STATE_OBS_DIM,
};
use crate::policy::{squash, MlpParams};
use crate::reward::{reward, RewardError, RewardParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    State,
    Features,
}

/// Which model steps the environments forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Simple,
    Full,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("invalid environment setting: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub task: TaskMode,
    pub model: ModelMode,
    /// Control steps per episode.
    pub horizon: usize,
    pub dynamics: DynamicsParams,
    pub init: InitDistribution,
    pub camera: CameraConfig,
    pub layout: LayoutConfig,
    pub reward: RewardParams,
    /// An environment whose state leaves this box is frozen.
    pub blowup_threshold: f64,
    /// Per-step reward of a frozen environment.
    pub blowup_reward: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            task: TaskMode::State,
            model: ModelMode::Simple,
            horizon: 250,
            dynamics: DynamicsParams::default(),
            init: InitDistribution::default(),
            camera: CameraConfig::default(),
            layout: LayoutConfig::default(),
            reward: RewardParams::default(),
            blowup_threshold: 1e3,
            blowup_reward: -20.0,
        }
    }
}

/// Validated configuration plus derived sensor.
#[derive(Clone, Debug)]
pub struct Env {
    pub config: EnvConfig,
    sensor: FeatureSensor,
}

/// Independent stream for environment `env` in iteration `iteration`.
pub fn env_rng(seed: u64, iteration: u64, env: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration << 24) ^ env as u64);
    rng
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.dynamics.validate()?;
        config.reward.validate()?;
        if config.horizon == 0 {
            return Err(EnvError::Invalid("horizon must be at least 1".into()));
        }
        if !(config.blowup_threshold > 0.0) || !config.blowup_reward.is_finite() {
            return Err(EnvError::Invalid("blowup_threshold must be positive and blowup_reward finite".into()));
        }
        if !(config.init.scale >= 0.0) {
            return Err(EnvError::Invalid(format!("init.scale must be non-negative, got {}", config.init.scale)));
        }
        if !(config.camera.pixel_noise >= 0.0) {
            return Err(EnvError::Invalid("camera.pixel_noise must be non-negative".into()));
        }
        let sensor = FeatureSensor::new(&config.camera, &config.layout)?;
        Ok(Env { config, sensor })
    }

    pub fn obs_dim(&self) -> usize {
        match self.config.task {
            TaskMode::State => STATE_OBS_DIM,
            TaskMode::Features => FEATURE_OBS_DIM,
        }
    }

    pub fn sensor(&self) -> &FeatureSensor {
        &self.sensor
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Fresh environments `envs` for iteration `iteration`.
    pub fn spawn(&self, seed: u64, iteration: u64, envs: Range<usize>) -> ShardSim<'_> {
        let slots = envs
            .map(|i| {
                let mut rng = env_rng(seed, iteration, i);
                let ic = sample_initial_state(&mut rng, &self.config.init);
                EnvSlot {
                    full: ic.full_state(&self.config.dynamics),
                    buffer: ObservationBuffer::new(),
                    prev_action: Action::HOVER,
                    prev_normalized: None,
                    alive: true,
                    rng,
                }
            })
            .collect();
        ShardSim { env: self, slots, t: 0 }
    }

    /// Shards of `num_envs` environments with at most `shard_size` each.
    pub fn shards(num_envs: usize, shard_size: usize) -> Vec<Range<usize>> {
        let s = shard_size.max(1);
        (0..num_envs.div_ceil(s)).map(|k| k * s..((k + 1) * s).min(num_envs)).collect()
    }
}

/// One environment's mutable state.
#[derive(Clone, Debug)]
pub struct EnvSlot {
    /// Full-model state; only `core` is used by the simple model.
    pub full: FullModelState,
    pub buffer: ObservationBuffer,
    pub prev_action: Action,
    /// Normalized previous action, `None` before the first step.
    pub prev_normalized: Option<[f64; 4]>,
    /// False once the state has blown up; the state is then frozen.
    pub alive: bool,
    /// Remaining draws of this environment's stream (pixel noise, PPO sampling).
    pub rng: ChaCha8Rng,
}

/// A shard of environments stepping in lockstep.
#[derive(Clone, Debug)]
pub struct ShardSim<'a> {
    pub env: &'a Env,
    pub slots: Vec<EnvSlot>,
    t: usize,
}

impl<'a> ShardSim<'a> {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn states(&self) -> Tensor {
        let mut x = Tensor::zeros(self.len(), STATE_DIM);
        for (i, s) in self.slots.iter().enumerate() {
            x.row_slice_mut(i).copy_from_slice(&s.full.core.to_array());
        }
        x
    }

    /// Actual body rates (full model).
    pub fn rates(&self) -> Tensor {
        let mut w = Tensor::zeros(self.len(), 3);
        for (i, s) in self.slots.iter().enumerate() {
            w.row_slice_mut(i).copy_from_slice(s.full.omega_act.as_slice());
        }
        w
    }

    pub fn alive(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.alive).collect()
    }

    /// Current feature frames with pixel noise applied.
    pub fn frames(&mut self) -> Tensor {
        let sigma = self.env.config.camera.pixel_noise;
        let mut f = Tensor::zeros(self.len(), FRAME_DIM);
        for (i, s) in self.slots.iter_mut().enumerate() {
            let mut frame = self.env.sensor.frame(&s.full.core);
            if sigma > 0.0 {
                let n = Normal::new(0.0, sigma).expect("sigma is finite and positive");
                frame.iter_mut().for_each(|u| *u += n.sample(&mut s.rng));
            }
            f.row_slice_mut(i).copy_from_slice(&frame);
        }
        f
    }

    /// Policy observations; in feature mode this also advances the history
    /// buffers, so call it exactly once per step.
    pub fn observe(&mut self) -> Tensor {
        match self.env.config.task {
            TaskMode::State => self.states(),
            TaskMode::Features => {
                let frames = self.frames();
                self.observe_frames(&frames)
            }
        }
    }

    /// Feature observations from precomputed (possibly noisy) frames.
    pub fn observe_frames(&mut self, frames: &Tensor) -> Tensor {
        let mut obs = Tensor::zeros(self.len(), FEATURE_OBS_DIM);
        for (i, s) in self.slots.iter_mut().enumerate() {
            let mut frame = [0.0; FRAME_DIM];
            frame.copy_from_slice(frames.row_slice(i));
            match s.prev_normalized {
                Some(a) if s.buffer.is_initialized() => s.buffer.push(frame, a),
                _ => s.buffer.reset(frame),
            }
            obs.row_slice_mut(i).copy_from_slice(&s.buffer.flatten());
        }
        obs
    }

    /// Reward of taking `u` in the current states. Frozen environments
    /// receive the blow-up reward.
    pub fn rewards(&self, u: &Tensor) -> Vec<f64> {
        let cfg = &self.env.config;
        self.slots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if !s.alive {
                    return cfg.blowup_reward;
                }
                let a = Action::from_slice(u.row_slice(i)).expect("4 columns");
                let omega = match cfg.model {
                    ModelMode::Simple => a.omega,
                    ModelMode::Full => s.full.omega_act,
                };
                reward(&s.full.core, &a, &s.prev_action, &omega, &cfg.reward)
            })
            .collect()
    }

    fn blown_up(&self, s: &QuadState) -> bool {
        !s.is_finite() || s.max_abs() > self.env.config.blowup_threshold
    }

    /// Applies `u` (with normalized form `normalized`) to every live
    /// environment. Returns which environments blew up during this step.
    pub fn advance(&mut self, u: &Tensor, normalized: &Tensor) -> Vec<bool> {
        let cfg = &self.env.config;
        let mut died = vec![false; self.len()];
        for (i, dead) in died.iter_mut().enumerate() {
            let a = Action::from_slice(u.row_slice(i)).expect("4 columns");
            let mut norm = [0.0; 4];
            norm.copy_from_slice(normalized.row_slice(i));
            let slot = &self.slots[i];
            if slot.alive {
                let next = match cfg.model {
                    ModelMode::Simple => simple_step(&slot.full.core, &a, cfg.dynamics.dt).map(|core| {
                        let mut f = slot.full.clone();
                        f.core = core;
                        f
                    }),
                    ModelMode::Full => full_step(&slot.full, &a, &cfg.dynamics),
                };
                match next {
                    Ok(n) if n.is_finite() && !self.blown_up(&n.core) => self.slots[i].full = n,
                    _ => {
                        self.slots[i].alive = false;
                        *dead = true;
                    }
                }
            }
            let slot = &mut self.slots[i];
            slot.prev_action = a;
            slot.prev_normalized = Some(norm);
        }
        self.t += 1;
        died
    }

    /// Overwrites the rigid-body and actuator state of environment `i`,
    /// freezing it if the new state blew up. Returns true if it froze.
    pub fn set_state(&mut self, i: usize, core: QuadState, omega_act: Vector3<f64>, c_act: f64) -> bool {
        if !self.slots[i].alive {
            return false;
        }
        let bad = self.blown_up(&core) || !c_act.is_finite() || omega_act.iter().any(|w| !w.is_finite());
        if bad {
            self.slots[i].alive = false;
            return true;
        }
        let f = &mut self.slots[i].full;
        f.core = core;
        f.omega_act = omega_act;
        f.c_act = c_act;
        false
    }

    pub(crate) fn finish_step(&mut self, u: &Tensor, normalized: &Tensor) {
        for (i, s) in self.slots.iter_mut().enumerate() {
            s.prev_action = Action::from_slice(u.row_slice(i)).expect("4 columns");
            let mut norm = [0.0; 4];
            norm.copy_from_slice(normalized.row_slice(i));
            s.prev_normalized = Some(norm);
        }
        self.t += 1;
    }
}

/// One environment's episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    /// `N + 1` states, `x_0 .. x_N`.
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<[f64; 4]>,
    /// Actions in normalized form, as fed back into feature observations.
    pub normalized: Vec<[f64; 4]>,
    /// Observations, `N x obs_dim` flattened.
    pub observations: Vec<f64>,
    /// Noisy feature frames seen at each step (feature mode only).
    pub frames: Vec<[f64; FRAME_DIM]>,
    /// Rates penalized by the reward at each step.
    pub rates: Vec<[f64; 3]>,
    pub rewards: Vec<f64>,
    /// Whether the environment was live at each step.
    pub alive: Vec<bool>,
    /// Whether the environment was frozen by the end of the episode.
    pub blew_up: bool,
}

impl Trajectory {
    pub fn episode_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Recorded batch of fixed-horizon episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub horizon: usize,
    pub obs_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutBatch {
    pub fn num_envs(&self) -> usize {
        self.trajectories.len()
    }

    pub fn episode_rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::episode_reward).collect()
    }

    pub fn mean_episode_reward(&self) -> f64 {
        mean(&self.episode_rewards())
    }

    pub fn blowups(&self) -> usize {
        self.trajectories.iter().filter(|t| t.blew_up).count()
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Records one shard's episode under an arbitrary batched action rule.
/// `act` maps `(observations, sim)` to `(u, normalized u)`.
pub fn record_episode<'a>(sim: &mut ShardSim<'a>, mut act: impl FnMut(&Tensor, &mut ShardSim<'a>) -> (Tensor, Tensor)) -> Vec<Trajectory> {
    let n = sim.env.horizon();
    let mut trajs: Vec<Trajectory> = (0..sim.len()).map(|_| Trajectory::default()).collect();
    for _ in 0..n {
        let x = sim.states();
        let rates = sim.rates();
        let alive = sim.alive();
        let (obs, frames) = match sim.env.config.task {
            TaskMode::State => (sim.observe(), None),
            TaskMode::Features => {
                let f = sim.frames();
                (sim.observe_frames(&f), Some(f))
            }
        };
        let (u, un) = act(&obs, sim);
        let r = sim.rewards(&u);
        for (i, tr) in trajs.iter_mut().enumerate() {
            tr.states.push(row_array(&x, i));
            tr.actions.push(row_array(&u, i));
            tr.normalized.push(row_array(&un, i));
            tr.observations.extend_from_slice(obs.row_slice(i));
            if let Some(f) = &frames {
                tr.frames.push(row_array(f, i));
            }
            tr.rates.push(match sim.env.config.model {
                ModelMode::Simple => u.row_slice(i)[1..].try_into().expect("3 rates"),
                ModelMode::Full => row_array(&rates, i),
            });
            tr.rewards.push(r[i]);
            tr.alive.push(alive[i]);
        }
        sim.advance(&u, &un);
    }
    let x = sim.states();
    for (i, tr) in trajs.iter_mut().enumerate() {
        tr.states.push(row_array(&x, i));
        tr.blew_up = !sim.slots[i].alive;
    }
    trajs
}

pub(crate) fn row_array<const K: usize>(t: &Tensor, r: usize) -> [f64; K] {
    t.row_slice(r).try_into().expect("row width")
}

/// Deterministic rollout of `params` on `num_envs` fresh environments.
pub fn rollout(env: &Env, params: &MlpParams, seed: u64, iteration: u64, num_envs: usize, shard_size: usize) -> RolloutBatch {
    use rayon::prelude::*;
    let shards = Env::shards(num_envs, shard_size);
    let dp = env.config.dynamics.clone();
    let parts: Vec<Vec<Trajectory>> = shards
        .into_par_iter()
        .map(|range| {
            let mut sim = env.spawn(seed, iteration, range);
            record_episode(&mut sim, |obs, _| squash(&params.forward(obs).expect("observation width matches policy"), &dp))
        })
        .collect();
    RolloutBatch { horizon: env.horizon(), obs_dim: env.obs_dim(), trajectories: parts.into_iter().flatten().collect() }
}
