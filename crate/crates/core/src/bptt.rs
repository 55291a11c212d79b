//! Backpropagation through time.
//!
//! The objective is the mean over environments and steps of the reward,
//! `J = 1 / (B N) sum_i sum_t r(x_t^i, u_t^i)`, and its gradient is obtained
//! by taping whole episodes. With [`BackwardModel::Simple`] every transition
//! enters the tape as a link carrying the simple model's Jacobians at the
//! recorded `(x_t, u_t)`, whatever model produced `x_{t+1}`. With
//! [`BackwardModel::Full`] the full model is taped substep by substep.
//!
//! Environments whose state blows up are frozen: their later rewards are
//! replaced by a constant and no gradient flows through them.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dynamics::{simple_step_jacobians, Action, QuadState, GRAVITY, STATE_DIM};
use crate::env::{mean, std_dev, Env, ModelMode, RolloutBatch, ShardSim, TaskMode, Trajectory};
use crate::metrics::IterationRecord;
use crate::observation::{FRAME_DIM, HISTORY_ACTIONS, HISTORY_FRAMES};
use crate::policy::{squash_on_tape, Adam, AdamConfig, MlpParams, ParamVars, StepOutcome};
use crate::reward::{reward_on_tape, RateSource};
use crate::so3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardModel {
    /// Simple-model Jacobians at the recorded transitions.
    Simple,
    /// The full model taped with primitives (requires the full forward model).
    Full,
}

#[derive(Debug, Error)]
pub enum BpttError {
    #[error("full-model backward requires the full forward model")]
    FullBackwardNeedsFullModel,
    #[error("policy expects {want} inputs but the task provides {got}")]
    ObsDim { got: usize, want: usize },
    #[error("training aborted: {0}")]
    Aborted(String),
    #[error("{0}")]
    Config(String),
}

/// Gradient of the objective over one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BpttOutput {
    /// `dJ/dtheta` in flat parameter order (ascent direction).
    pub gradient: Vec<f64>,
    pub objective: f64,
    /// Summed reward per environment, floors included.
    pub episode_rewards: Vec<f64>,
    /// Largest single-shard tape, bytes.
    pub peak_tape_bytes: usize,
    pub blowups: usize,
}

impl BpttOutput {
    pub fn mean_episode_reward(&self) -> f64 {
        mean(&self.episode_rewards)
    }
}

/// Source of transitions for the surrogate-gradient recorder.
trait Transitions {
    fn len(&self) -> usize;
    fn states(&self) -> Tensor;
    fn alive(&self) -> Vec<bool>;
    fn frames(&mut self) -> Tensor;
    fn rates(&self) -> Tensor;
    fn advance(&mut self, u: &Tensor, normalized: &Tensor);
}

impl Transitions for ShardSim<'_> {
    fn len(&self) -> usize {
        ShardSim::len(self)
    }
    fn states(&self) -> Tensor {
        ShardSim::states(self)
    }
    fn alive(&self) -> Vec<bool> {
        ShardSim::alive(self)
    }
    fn frames(&mut self) -> Tensor {
        ShardSim::frames(self)
    }
    fn rates(&self) -> Tensor {
        ShardSim::rates(self)
    }
    fn advance(&mut self, u: &Tensor, normalized: &Tensor) {
        ShardSim::advance(self, u, normalized);
    }
}

/// Replays recorded trajectories.
struct Replay<'b> {
    trajs: &'b [Trajectory],
    t: usize,
}

impl Replay<'_> {
    fn gather<const K: usize>(&self, f: impl Fn(&Trajectory) -> [f64; K]) -> Tensor {
        let mut out = Tensor::zeros(self.trajs.len(), K);
        for (i, tr) in self.trajs.iter().enumerate() {
            out.row_slice_mut(i).copy_from_slice(&f(tr));
        }
        out
    }
}

impl Transitions for Replay<'_> {
    fn len(&self) -> usize {
        self.trajs.len()
    }
    fn states(&self) -> Tensor {
        self.gather(|tr| tr.states[self.t])
    }
    fn alive(&self) -> Vec<bool> {
        self.trajs.iter().map(|tr| tr.alive.get(self.t).copied().unwrap_or(!tr.blew_up)).collect()
    }
    fn frames(&mut self) -> Tensor {
        self.gather(|tr| tr.frames[self.t])
    }
    fn rates(&self) -> Tensor {
        self.gather(|tr| tr.rates[self.t])
    }
    fn advance(&mut self, _u: &Tensor, _normalized: &Tensor) {
        self.t += 1;
    }
}

fn repeat_row(rows: usize, row: &[f64]) -> Tensor {
    let mut t = Tensor::zeros(rows, row.len());
    for r in 0..rows {
        t.row_slice_mut(r).copy_from_slice(row);
    }
    t
}

fn mask_column(alive: &[bool]) -> Tensor {
    Tensor::column(&alive.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect::<Vec<_>>())
}

/// Observation history on the tape (feature mode).
struct TapedHistory {
    frames: VecDeque<Var>,
    actions: VecDeque<Var>,
}

/// Common per-step recording: observation, policy, reward.
struct StepRecorder<'e> {
    env: &'e Env,
    pv: ParamVars,
    history: Option<TapedHistory>,
    acc: Option<Var>,
    episode: Vec<f64>,
}

struct PolicyStep {
    u: Var,
    normalized: Var,
}

impl<'e> StepRecorder<'e> {
    fn new(tape: &mut Tape, env: &'e Env, params: &MlpParams, rows: usize) -> Self {
        StepRecorder { env, pv: ParamVars::register(tape, params), history: None, acc: None, episode: vec![0.0; rows] }
    }

    /// Observation node for states `x` (values `x_val`) with noisy `frames`.
    fn observe(&mut self, tape: &mut Tape, x: Var, x_val: &Tensor, alive: &[bool], frames: Option<Tensor>, prev_norm: Option<Var>) -> Var {
        if self.env.config.task == TaskMode::State {
            return x;
        }
        let frames = frames.expect("feature mode provides frames");
        let rows = x_val.rows();
        let mut blocks = vec![0.0; rows * FRAME_DIM * STATE_DIM];
        for i in 0..rows {
            if !alive[i] {
                continue;
            }
            let s = QuadState::from_slice(x_val.row_slice(i)).expect("15 columns");
            let (_, j) = self.env.sensor().frame_with_jacobian(&s);
            let block = &mut blocks[i * FRAME_DIM * STATE_DIM..(i + 1) * FRAME_DIM * STATE_DIM];
            for r in 0..FRAME_DIM {
                for c in 0..STATE_DIM {
                    block[r * STATE_DIM + c] = j[(r, c)];
                }
            }
        }
        let f = tape.custom_link(&[x], frames).expect("frame rows match state rows");
        tape.inject_row_jacobians(x, f, blocks).expect("frame Jacobian shape");
        match (self.history.as_mut(), prev_norm) {
            (Some(h), Some(a)) => {
                h.frames.push_front(f);
                h.frames.truncate(HISTORY_FRAMES);
                h.actions.push_front(a);
                h.actions.truncate(HISTORY_ACTIONS);
            }
            _ => {
                let zero = tape.constant(Tensor::zeros(rows, 4));
                self.history = Some(TapedHistory {
                    frames: std::iter::repeat_n(f, HISTORY_FRAMES).collect(),
                    actions: std::iter::repeat_n(zero, HISTORY_ACTIONS).collect(),
                });
            }
        }
        let h = self.history.as_ref().expect("history initialized above");
        let parts: Vec<Var> = h.frames.iter().chain(h.actions.iter()).copied().collect();
        tape.concat_cols(&parts)
    }

    fn act(&self, tape: &mut Tape, obs: Var) -> PolicyStep {
        let y = self.pv.forward(tape, obs);
        let (u, normalized) = squash_on_tape(tape, y, &self.env.config.dynamics);
        PolicyStep { u, normalized }
    }

    fn reward(&mut self, tape: &mut Tape, x: Var, u: Var, prev_u: Var, rate: RateSource, alive: &[bool]) {
        let mut r = reward_on_tape(tape, x, u, prev_u, rate, &self.env.config.reward);
        if alive.iter().any(|a| !a) {
            let m = tape.constant(mask_column(alive));
            r = tape.mul_col(r, m);
        }
        let floor = self.env.config.blowup_reward;
        for (i, e) in self.episode.iter_mut().enumerate() {
            *e += if alive[i] { tape.value(r).as_slice()[i] } else { floor };
        }
        self.acc = Some(match self.acc {
            None => r,
            Some(a) => tape.add(a, r),
        });
    }

    fn objective(&self, tape: &mut Tape, total_envs: usize) -> Var {
        let acc = self.acc.expect("horizon is at least one step");
        let s = tape.sum(acc);
        tape.scale(s, 1.0 / (total_envs * self.env.horizon()) as f64)
    }
}

struct ShardOutput {
    gradient: Vec<f64>,
    objective: f64,
    episode: Vec<f64>,
    tape_bytes: usize,
    blowups: usize,
}

fn finish(tape: &Tape, rec: StepRecorder<'_>, objective: Var, blowups: usize) -> ShardOutput {
    let grads = tape.backward(objective).expect("objective is a scalar on this tape");
    ShardOutput {
        gradient: rec.pv.gradient(&grads),
        objective: tape.value(objective).item(),
        episode: rec.episode,
        tape_bytes: tape.memory_bytes(),
        blowups,
    }
}

fn record_surrogate(env: &Env, params: &MlpParams, src: &mut impl Transitions, total_envs: usize) -> ShardOutput {
    let cfg = &env.config;
    let n = cfg.horizon;
    let rows = src.len();
    let dt = cfg.dynamics.dt;
    let mut tape = Tape::new();
    let mut rec = StepRecorder::new(&mut tape, env, params, rows);
    let mut x_val = src.states();
    let mut x = tape.constant(x_val.clone());
    let mut prev_u = tape.constant(repeat_row(rows, &Action::HOVER.to_array()));
    let mut prev_norm = None;
    let mut alive = src.alive();
    for t in 0..n {
        let frames = (cfg.task == TaskMode::Features).then(|| src.frames());
        let obs = rec.observe(&mut tape, x, &x_val, &alive, frames, prev_norm);
        let PolicyStep { u, normalized } = rec.act(&mut tape, obs);
        let rate = match cfg.model {
            ModelMode::Simple => RateSource::Action,
            ModelMode::Full => RateSource::Var(tape.constant(src.rates())),
        };
        rec.reward(&mut tape, x, u, prev_u, rate, &alive);
        let u_val = tape.value(u).clone();
        src.advance(&u_val, tape.value(normalized));
        let alive_next = src.alive();
        if t + 1 < n {
            let next = src.states();
            let mut jx = vec![0.0; rows * STATE_DIM * STATE_DIM];
            let mut ju = vec![0.0; rows * STATE_DIM * 4];
            for i in 0..rows {
                if !(alive[i] && alive_next[i]) {
                    continue;
                }
                let s = QuadState::from_slice(x_val.row_slice(i)).expect("15 columns");
                let a = Action::from_slice(u_val.row_slice(i)).expect("4 columns");
                let (dx, du) = simple_step_jacobians(&s, &a, dt).expect("live states are finite");
                write_row_major(&mut jx[i * 225..(i + 1) * 225], dx.as_slice(), STATE_DIM, STATE_DIM);
                write_row_major(&mut ju[i * 60..(i + 1) * 60], du.as_slice(), STATE_DIM, 4);
            }
            let xn = tape.custom_link(&[x, u], next.clone()).expect("rows match");
            tape.inject_row_jacobians(x, xn, jx).expect("state Jacobian shape");
            tape.inject_row_jacobians(u, xn, ju).expect("action Jacobian shape");
            x = xn;
            x_val = next;
        }
        prev_u = u;
        prev_norm = Some(normalized);
        alive = alive_next;
    }
    let blowups = alive.iter().filter(|a| !**a).count();
    let obj = rec.objective(&mut tape, total_envs);
    finish(&tape, rec, obj, blowups)
}

/// Converts a column-major `rows x cols` buffer into row-major order.
fn write_row_major(dst: &mut [f64], col_major: &[f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[r * cols + c] = col_major[c * rows + r];
        }
    }
}

/// Per-row link that passes live rows through `value` with identity
/// Jacobian and pins frozen rows to `frozen` with zero Jacobian.
fn freeze_link(tape: &mut Tape, input: Var, mut value: Tensor, frozen: &Tensor, live: &[bool]) -> Var {
    let k = value.cols();
    if live.iter().all(|&a| a) {
        let out = tape.custom_link(&[input], value).expect("rows match");
        tape.inject_jacobian(input, out, Tensor::identity(k)).expect("square identity");
        return out;
    }
    let mut blocks = vec![0.0; live.len() * k * k];
    for (i, &a) in live.iter().enumerate() {
        if a {
            for d in 0..k {
                blocks[i * k * k + d * k + d] = 1.0;
            }
        } else {
            value.row_slice_mut(i).copy_from_slice(frozen.row_slice(i));
        }
    }
    let out = tape.custom_link(&[input], value).expect("rows match");
    tape.inject_row_jacobians(input, out, blocks).expect("block shape");
    out
}

fn record_full(env: &Env, params: &MlpParams, sim: &mut ShardSim<'_>, total_envs: usize) -> ShardOutput {
    let cfg = &env.config;
    let dp = &cfg.dynamics;
    let n = cfg.horizon;
    let rows = sim.len();
    let h = dp.sim_dt;
    let kc = crate::dynamics::DynamicsParams::lag_gain(dp.tau_thrust, h);
    let kw = crate::dynamics::DynamicsParams::lag_gain(dp.tau_rate, h);

    let mut tape = Tape::new();
    let mut rec = StepRecorder::new(&mut tape, env, params, rows);
    let mut x = tape.constant(sim.states());
    let c0: Vec<f64> = sim.slots.iter().map(|s| s.full.c_act).collect();
    let mut c = tape.constant(Tensor::column(&c0));
    let mut w = tape.constant(sim.rates());
    let hover = tape.constant(repeat_row(rows, &Action::HOVER.to_array()));
    let mut queue: VecDeque<Var> = std::iter::repeat_n(hover, dp.delay_steps).collect();
    let gravity = tape.constant(Tensor::row(&[0.0, 0.0, -GRAVITY]));
    let mut prev_u = hover;
    let mut prev_norm = None;

    for t in 0..n {
        let alive = sim.alive();
        let x_val = tape.value(x).clone();
        let frames = (cfg.task == TaskMode::Features).then(|| sim.frames());
        let obs = rec.observe(&mut tape, x, &x_val, &alive, frames, prev_norm);
        let PolicyStep { u, normalized } = rec.act(&mut tape, obs);
        rec.reward(&mut tape, x, u, prev_u, RateSource::Var(w), &alive);
        let u_val = tape.value(u).clone();
        let norm_val = tape.value(normalized).clone();
        let cmd = if queue.is_empty() {
            u
        } else {
            queue.push_back(u);
            queue.pop_front().expect("non-empty")
        };
        if t + 1 < n {
            let (c_prev, w_prev) = (tape.value(c).clone(), tape.value(w).clone());
            let cc = tape.slice_cols(cmd, 0, 1);
            let cw = tape.slice_cols(cmd, 1, 3);
            let mut p = tape.slice_cols(x, 0, 3);
            let mut r = tape.slice_cols(x, 3, 9);
            let mut v = tape.slice_cols(x, 12, 3);
            for _ in 0..dp.substeps() {
                let e = tape.sub(cc, c);
                let e = tape.scale(e, kc);
                c = tape.add(c, e);
                let e = tape.sub(cw, w);
                let e = tape.scale(e, kw);
                w = tape.add(w, e);
                let z = tape.slice_cols(r, 6, 3);
                let a = tape.mul_col(z, c);
                let a = tape.add_row(a, gravity);
                let drag = tape.scale(v, dp.drag);
                let a = tape.sub(a, drag);
                let dv = tape.scale(a, h);
                v = tape.add(v, dv);
                let dp_ = tape.scale(v, h);
                p = tape.add(p, dp_);
                let phi = tape.scale(w, h);
                let rot = tape.so3_exp(phi);
                r = tape.row_matmul3(r, rot);
            }
            let raw = tape.concat_cols(&[p, r, v]);
            let mut next = tape.value(raw).clone();
            let (c_val, w_val) = (tape.value(c).clone(), tape.value(w).clone());
            for i in 0..rows {
                let row = next.row_slice_mut(i);
                let mut s = QuadState::from_slice(row).expect("15 columns");
                s.r = so3::orthonormalize(&s.r);
                row.copy_from_slice(&s.to_array());
                let wi = nalgebra::Vector3::from_row_slice(w_val.row_slice(i));
                sim.set_state(i, s, wi, c_val.as_slice()[i]);
            }
            let live = sim.alive();
            x = freeze_link(&mut tape, raw, next, &x_val, &live);
            if live.iter().any(|a| !a) {
                c = freeze_link(&mut tape, c, c_val, &c_prev, &live);
                w = freeze_link(&mut tape, w, w_val, &w_prev, &live);
            }
        }
        sim.finish_step(&u_val, &norm_val);
        prev_u = u;
        prev_norm = Some(normalized);
    }
    let blowups = sim.alive().iter().filter(|a| !**a).count();
    let obj = rec.objective(&mut tape, total_envs);
    finish(&tape, rec, obj, blowups)
}

fn reduce(parts: Vec<ShardOutput>) -> BpttOutput {
    let mut gradient = vec![0.0; parts.first().map_or(0, |p| p.gradient.len())];
    let mut objective = 0.0;
    let mut episode_rewards = Vec::new();
    let mut peak = 0;
    let mut blowups = 0;
    for p in parts {
        gradient.iter_mut().zip(&p.gradient).for_each(|(a, b)| *a += b);
        objective += p.objective;
        episode_rewards.extend(p.episode);
        peak = peak.max(p.tape_bytes);
        blowups += p.blowups;
    }
    BpttOutput { gradient, objective, episode_rewards, peak_tape_bytes: peak, blowups }
}

fn check_dims(env: &Env, params: &MlpParams) -> Result<(), BpttError> {
    if params.arch.input != env.obs_dim() {
        return Err(BpttError::ObsDim { got: env.obs_dim(), want: params.arch.input });
    }
    Ok(())
}

/// Gradient from a recorded batch, with simple-model Jacobians at every
/// recorded transition.
pub fn bptt_gradient(env: &Env, params: &MlpParams, batch: &RolloutBatch, shard_size: usize) -> Result<BpttOutput, BpttError> {
    check_dims(env, params)?;
    if batch.horizon != env.horizon() {
        return Err(BpttError::Config(format!("batch horizon {} vs env horizon {}", batch.horizon, env.horizon())));
    }
    let total = batch.num_envs();
    let parts = Env::shards(total, shard_size)
        .into_par_iter()
        .map(|range| record_surrogate(env, params, &mut Replay { trajs: &batch.trajectories[range], t: 0 }, total))
        .collect();
    Ok(reduce(parts))
}

/// Steps fresh environments and tapes them in the same pass.
pub fn bptt_live(
    env: &Env,
    params: &MlpParams,
    seed: u64,
    iteration: u64,
    num_envs: usize,
    shard_size: usize,
    backward: BackwardModel,
) -> Result<BpttOutput, BpttError> {
    check_dims(env, params)?;
    if backward == BackwardModel::Full && env.config.model != ModelMode::Full {
        return Err(BpttError::FullBackwardNeedsFullModel);
    }
    let parts = Env::shards(num_envs, shard_size)
        .into_par_iter()
        .map(|range| {
            let mut sim = env.spawn(seed, iteration, range);
            match backward {
                BackwardModel::Simple => record_surrogate(env, params, &mut sim, num_envs),
                BackwardModel::Full => record_full(env, params, &mut sim, num_envs),
            }
        })
        .collect();
    Ok(reduce(parts))
}

/// Objective evaluated without a tape; equals [`BpttOutput::objective`] of
/// the same batch.
pub fn objective_of(batch: &RolloutBatch) -> f64 {
    let n = (batch.num_envs() * batch.horizon) as f64;
    batch.trajectories.iter().map(|tr| tr.rewards.iter().zip(&tr.alive).filter(|(_, a)| **a).map(|(r, _)| r).sum::<f64>()).sum::<f64>() / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpttConfig {
    /// Filled from the top level of a run config.
    #[serde(skip)]
    pub iterations: usize,
    #[serde(skip)]
    pub num_envs: usize,
    /// Environments per shard; fixes the reduction order.
    #[serde(skip)]
    pub shard_size: usize,
    pub backward: BackwardModel,
    pub optimizer: AdamConfig,
    /// Consecutive skipped updates that abort training.
    pub max_consecutive_skips: usize,
}

impl Default for BpttConfig {
    fn default() -> Self {
        BpttConfig {
            iterations: 1000,
            num_envs: 100,
            shard_size: 25,
            backward: BackwardModel::Simple,
            optimizer: AdamConfig::default(),
            max_consecutive_skips: 3,
        }
    }
}

impl BpttConfig {
    pub fn validate(&self) -> Result<(), BpttError> {
        if self.num_envs == 0 || self.shard_size == 0 {
            return Err(BpttError::Config("num_envs and shard_size must be positive".into()));
        }
        self.optimizer.validate().map_err(BpttError::Config)?;
        if self.max_consecutive_skips == 0 {
            return Err(BpttError::Config("max_consecutive_skips must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub records: Vec<IterationRecord>,
}

/// Iterates rollout, gradient and update. `on_iteration` sees every record
/// together with the parameters after that iteration's update.
pub fn train(
    env: &Env,
    cfg: &BpttConfig,
    seed: u64,
    mut params: MlpParams,
    mut on_iteration: impl FnMut(&IterationRecord, &MlpParams) -> anyhow::Result<()>,
) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    check_dims(env, &params)?;
    let mut opt = Adam::new(cfg.optimizer.clone(), params.num_params());
    let mut flat = params.flat();
    let mut records = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    let steps_per_iter = (cfg.num_envs * env.horizon()) as u64;
    let mut skips = 0;
    for k in 0..cfg.iterations {
        let out = bptt_live(env, &params, seed, k as u64, cfg.num_envs, cfg.shard_size, cfg.backward)?;
        let descent: Vec<f64> = out.gradient.iter().map(|g| -g).collect();
        let (grad_norm, skipped) = if out.objective.is_finite() {
            match opt.step(&mut flat, &descent) {
                StepOutcome::Applied { grad_norm } => (grad_norm, false),
                StepOutcome::Skipped { .. } => (f64::NAN, true),
            }
        } else {
            log::warn!("iteration {k}: non-finite objective, update skipped");
            (f64::NAN, true)
        };
        if skipped {
            skips += 1;
            if skips >= cfg.max_consecutive_skips {
                return Err(BpttError::Aborted(format!("{skips} consecutive skipped updates ending at iteration {k}")).into());
            }
        } else {
            skips = 0;
            params.set_flat(&flat)?;
        }
        let rec = IterationRecord {
            iteration: k,
            reward_mean: out.mean_episode_reward(),
            reward_std: std_dev(&out.episode_rewards),
            samples: steps_per_iter * (k as u64 + 1),
            wall_clock: start.elapsed().as_secs_f64(),
            grad_norm,
            skipped,
            blowups: out.blowups,
        };
        on_iteration(&rec, &params)?;
        records.push(rec);
    }
    Ok(TrainOutcome { params, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout, EnvConfig};
    use crate::policy::{init_params, squash, Architecture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env_with(task: TaskMode, model: ModelMode, horizon: usize) -> Env {
        Env::new(EnvConfig { task, model, horizon, ..Default::default() }).unwrap()
    }

    fn params(env: &Env, hidden: &[usize], seed: u64, head: f64) -> MlpParams {
        init_params(&Architecture::new(env.obs_dim(), hidden, 4), &mut ChaCha8Rng::seed_from_u64(seed), head)
    }

    /// Objective of a fresh deterministic rollout, no tape involved.
    fn objective(env: &Env, p: &MlpParams, seed: u64, n_envs: usize) -> f64 {
        objective_of(&rollout(env, p, seed, 0, n_envs, 4))
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    fn fd_gradient(env: &Env, p: &MlpParams, seed: u64, n_envs: usize) -> Vec<f64> {
        let flat = p.flat();
        let h = 1e-6;
        (0..flat.len())
            .map(|k| {
                let (mut a, mut b) = (flat.clone(), flat.clone());
                a[k] += h;
                b[k] -= h;
                let fa = objective(env, &MlpParams::from_flat(&p.arch, &a).unwrap(), seed, n_envs);
                let fb = objective(env, &MlpParams::from_flat(&p.arch, &b).unwrap(), seed, n_envs);
                (fa - fb) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn live_and_replayed_gradients_are_identical() {
        for model in [ModelMode::Simple, ModelMode::Full] {
            for task in [TaskMode::State, TaskMode::Features] {
                let env = env_with(task, model, 12);
                let p = params(&env, &[8], 1, 0.3);
                let live = bptt_live(&env, &p, 4, 0, 5, 2, BackwardModel::Simple).unwrap();
                let batch = rollout(&env, &p, 4, 0, 5, 2);
                let replay = bptt_gradient(&env, &p, &batch, 3).unwrap();
                assert_eq!(live.gradient.len(), p.num_params());
                for (a, b) in live.gradient.iter().zip(&replay.gradient) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-3), "{model:?} {task:?}");
                }
                for (a, b) in live.episode_rewards.iter().zip(batch.episode_rewards()) {
                    assert!((a - b).abs() < 1e-9);
                }
                assert!((replay.objective - objective_of(&batch)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_gradient_is_reward_through_policy() {
        let env = env_with(TaskMode::State, ModelMode::Simple, 1);
        let p = params(&env, &[6], 2, 0.5);
        let out = bptt_live(&env, &p, 1, 0, 1, 1, BackwardModel::Simple).unwrap();
        // d r / d theta by hand: the reward only sees u through the policy.
        let x0 = env.spawn(1, 0, 0..1).states();
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &p);
        let o = tape.constant(x0.clone());
        let y = pv.forward(&mut tape, o);
        let (u, _) = squash_on_tape(&mut tape, y, &env.config.dynamics);
        let hover = tape.constant(Tensor::row(&Action::HOVER.to_array()));
        let r = reward_on_tape(&mut tape, o, u, hover, RateSource::Action, &env.config.reward);
        let root = tape.sum(r);
        let g = pv.gradient(&tape.backward(root).unwrap());
        assert_eq!(out.gradient, g);
        let (uu, _) = squash(&p.forward(&x0).unwrap(), &env.config.dynamics);
        let a = Action::from_slice(uu.row_slice(0)).unwrap();
        let s = QuadState::from_slice(x0.row_slice(0)).unwrap();
        assert_eq!(out.objective, crate::reward::reward(&s, &a, &Action::HOVER, &a.omega, &env.config.reward));
    }

    #[test]
    fn simple_model_gradient_matches_finite_differences() {
        for task in [TaskMode::State, TaskMode::Features] {
            // Features clamped at the image border carry no gradient by
            // design, so the feature-mode oracle uses throws that keep every
            // feature in view.
            let mut cfg = EnvConfig { task, horizon: 10, ..Default::default() };
            if task == TaskMode::Features {
                cfg.init.scale = 0.5;
            }
            let env = Env::new(cfg).unwrap();
            let p = params(&env, &[8], 3, 0.5);
            let out = bptt_live(&env, &p, 7, 0, 3, 2, BackwardModel::Simple).unwrap();
            let fd = fd_gradient(&env, &p, 7, 3);
            let rel = out.gradient.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                / fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(cosine(&out.gradient, &fd) > 0.999, "{task:?}");
            assert!(rel < 1e-3, "{task:?}: relative error {rel}");
        }
    }

    #[test]
    fn full_backward_matches_finite_differences_of_full_model() {
        let env = env_with(TaskMode::State, ModelMode::Full, 8);
        let p = params(&env, &[8], 4, 0.5);
        let out = bptt_live(&env, &p, 2, 0, 2, 2, BackwardModel::Full).unwrap();
        let fd = fd_gradient(&env, &p, 2, 2);
        assert!(cosine(&out.gradient, &fd) > 0.999);
        let simple = bptt_live(&env, &p, 2, 0, 2, 2, BackwardModel::Simple).unwrap();
        assert_eq!(simple.episode_rewards.len(), 2);
        for (a, b) in simple.episode_rewards.iter().zip(&out.episode_rewards) {
            assert!((a - b).abs() < 1e-9, "both modes step the same full model");
        }
    }

    #[test]
    fn full_backward_requires_full_model() {
        let env = env_with(TaskMode::State, ModelMode::Simple, 3);
        let p = params(&env, &[4], 0, 0.1);
        assert!(matches!(bptt_live(&env, &p, 0, 0, 1, 1, BackwardModel::Full), Err(BpttError::FullBackwardNeedsFullModel)));
    }

    #[test]
    fn gradient_is_independent_of_thread_count() {
        let env = env_with(TaskMode::State, ModelMode::Full, 10);
        let p = params(&env, &[8], 5, 0.5);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| bptt_live(&env, &p, 3, 1, 9, 2, BackwardModel::Simple).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn frozen_environments_contribute_no_gradient() {
        let mut cfg = EnvConfig { horizon: 30, ..Default::default() };
        cfg.blowup_threshold = 2.0;
        let env = Env::new(cfg).unwrap();
        let p = params(&env, &[8], 6, 3.0);
        let out = bptt_live(&env, &p, 1, 0, 6, 3, BackwardModel::Simple).unwrap();
        assert!(out.gradient.iter().all(|g| g.is_finite()));
        assert!(out.blowups > 0);
        let fd = fd_gradient(&env, &p, 1, 6);
        assert!(cosine(&out.gradient, &fd) > 0.99);
    }

    #[test]
    fn training_improves_and_is_reproducible() {
        let mut cfg = EnvConfig { horizon: 40, ..Default::default() };
        cfg.init.scale = 0.5;
        let env = Env::new(cfg).unwrap();
        let p = params(&env, &[16], 7, 0.01);
        let tc = BpttConfig {
            iterations: 30,
            num_envs: 8,
            shard_size: 4,
            optimizer: AdamConfig { lr: 3e-3, ..Default::default() },
            ..Default::default()
        };
        let a = train(&env, &tc, 11, p.clone(), |_, _| Ok(())).unwrap();
        let b = train(&env, &tc, 11, p, |_, _| Ok(())).unwrap();
        let strip = |o: &TrainOutcome| o.records.iter().map(|r| r.without_time()).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.params, b.params);
        let first = a.records[0].reward_mean;
        let best = a.records.iter().map(|r| r.reward_mean).fold(f64::MIN, f64::max);
        assert!(best > first);
        assert_eq!(a.records.last().unwrap().samples, 30 * 8 * 40);
    }
}
