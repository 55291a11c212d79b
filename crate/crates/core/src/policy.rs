//! MLP policy, action squashing, initialization, Adam, and checkpoints.
//!
//! Parameters are stored per layer as `W: in x out` and `b: 1 x out`, so a
//! batch of observations (one per row) maps through `tanh(X W + b)`. The flat
//! parameter order is `W0, b0, W1, b1, ..` with each tensor row-major.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::dynamics::{DynamicsParams, ACTION_DIM};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("observation has {got} columns, network expects {want}")]
    InputDim { got: usize, want: usize },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("flat parameter vector has {got} entries, expected {want}")]
    FlatLength { got: usize, want: usize },
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl Architecture {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Architecture { input, hidden: hidden.to_vec(), output }
    }

    pub fn state_policy() -> Self {
        Architecture::new(crate::observation::STATE_OBS_DIM, &[512, 512], ACTION_DIM)
    }

    pub fn feature_policy() -> Self {
        Architecture::new(crate::observation::FEATURE_OBS_DIM, &[1024, 1024], ACTION_DIM)
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Same trunk, different head width.
    pub fn with_output(&self, output: usize) -> Self {
        Architecture { output, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.input == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(PolicyError::Architecture(format!("zero-width layer in {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch.layer_dims().into_iter().map(|(i, o)| Layer { w: Tensor::zeros(i, o), b: Tensor::zeros(1, o) }).collect();
        MlpParams { arch: arch.clone(), layers }
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), PolicyError> {
        if flat.len() != self.num_params() {
            return Err(PolicyError::FlatLength { got: flat.len(), want: self.num_params() });
        }
        let mut k = 0;
        for l in &mut self.layers {
            for t in [&mut l.w, &mut l.b] {
                let n = t.len();
                t.as_mut_slice().copy_from_slice(&flat[k..k + n]);
                k += n;
            }
        }
        Ok(())
    }

    pub fn from_flat(arch: &Architecture, flat: &[f64]) -> Result<Self, PolicyError> {
        let mut p = MlpParams::zeros(arch);
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.is_finite() && l.b.is_finite())
    }

    fn check_input(&self, obs_cols: usize) -> Result<(), PolicyError> {
        if obs_cols != self.arch.input {
            return Err(PolicyError::InputDim { got: obs_cols, want: self.arch.input });
        }
        Ok(())
    }

    /// Activations of the last hidden layer.
    pub fn hidden(&self, obs: &Tensor) -> Result<Tensor, PolicyError> {
        self.check_input(obs.cols())?;
        let mut x = obs.clone();
        for l in &self.layers[..self.layers.len() - 1] {
            x = affine(&x, l).map(f64::tanh);
        }
        Ok(x)
    }

    /// Head output before any squashing, one row per observation.
    pub fn forward(&self, obs: &Tensor) -> Result<Tensor, PolicyError> {
        let h = self.hidden(obs)?;
        Ok(affine(&h, self.layers.last().expect("at least one layer")))
    }
}

fn affine(x: &Tensor, l: &Layer) -> Tensor {
    let mut y = x.matmul(&l.w).expect("layer shapes are consistent");
    for r in 0..y.rows() {
        for (a, b) in y.row_slice_mut(r).iter_mut().zip(l.b.as_slice()) {
            *a += b;
        }
    }
    y
}

/// Squashing maps `y` to `u` with `c = c_max (tanh y0 + 1) / 2` and
/// `omega_i = omega_max tanh y_i`. Returns `(u, tanh y)`; `tanh y` doubles as
/// the normalized action fed back into feature observations.
pub fn squash(y: &Tensor, params: &DynamicsParams) -> (Tensor, Tensor) {
    let t = y.map(f64::tanh);
    let (scale, offset) = squash_coefficients(params);
    let mut u = t.clone();
    for r in 0..u.rows() {
        for ((a, s), o) in u.row_slice_mut(r).iter_mut().zip(&scale).zip(&offset) {
            *a = *a * s + o;
        }
    }
    (u, t)
}

pub fn squash_coefficients(params: &DynamicsParams) -> ([f64; 4], [f64; 4]) {
    let h = params.c_max / 2.0;
    let w = params.omega_max;
    ([h, w, w, w], [h, 0.0, 0.0, 0.0])
}

/// Parameter leaves of one network on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<(Var, Var)>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &MlpParams) -> Self {
        let vars = params.layers.iter().map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone()))).collect();
        ParamVars { vars }
    }

    /// Flat gradient in [`MlpParams::flat`] order; absent adjoints are zero.
    pub fn gradient(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for &(w, b) in &self.vars {
            out.extend(grads.wrt(w).into_vec());
            out.extend(grads.wrt(b).into_vec());
        }
        out
    }

    fn layer(&self, tape: &mut Tape, x: Var, k: usize) -> Var {
        let (w, b) = self.vars[k];
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn hidden(&self, tape: &mut Tape, obs: Var) -> Var {
        let mut x = obs;
        for k in 0..self.vars.len() - 1 {
            let y = self.layer(tape, x, k);
            x = tape.tanh(y);
        }
        x
    }

    /// Taped counterpart of [`MlpParams::forward`].
    pub fn forward(&self, tape: &mut Tape, obs: Var) -> Var {
        let h = self.hidden(tape, obs);
        self.layer(tape, h, self.vars.len() - 1)
    }
}

/// Taped counterpart of [`squash`]: returns `(u, tanh y)`.
pub fn squash_on_tape(tape: &mut Tape, y: Var, params: &DynamicsParams) -> (Var, Var) {
    let (scale, offset) = squash_coefficients(params);
    let t = tape.tanh(y);
    let s = tape.constant(Tensor::row(&scale));
    let o = tape.constant(Tensor::row(&offset));
    let u = tape.mul_row(t, s);
    (tape.add_row(u, o), t)
}

/// LeCun-uniform weights (`U(-a, a)`, `a = sqrt(3 / fan_in)`, so the weight
/// variance is `1 / fan_in`), zero biases, last layer scaled by `head_scale`.
pub fn init_params<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R, head_scale: f64) -> MlpParams {
    let mut p = MlpParams::zeros(arch);
    let n = p.layers.len();
    for (k, l) in p.layers.iter_mut().enumerate() {
        let a = (3.0 / l.w.rows() as f64).sqrt();
        let s = if k + 1 == n { head_scale } else { 1.0 };
        for x in l.w.as_mut_slice() {
            *x = rng.gen_range(-a..a) * s;
        }
    }
    p
}

pub const HEAD_INIT_SCALE: f64 = 0.01;

/// Optional positive settings in config files, where 0 stands for "off"
/// since TOML has no null.
pub(crate) mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` (0 in config files) disables clipping.
    #[serde(with = "zero_is_none")]
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(format!("invalid optimizer settings {self:?}"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err("clip_norm must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    /// Norm of the gradient before clipping.
    Applied {
        grad_norm: f64,
    },
    Skipped {
        reason: String,
    },
}

/// Adam minimizing a loss; callers maximizing an objective pass `-grad`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Adam { config, m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> StepOutcome {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            log::warn!("skipping optimizer step {}: non-finite gradient", self.step + 1);
            return StepOutcome::Skipped { reason: "non-finite gradient".into() };
        }
        let c = &self.config;
        let clip = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i] * clip;
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        StepOutcome::Applied { grad_norm: norm }
    }
}

const MAGIC: &[u8; 8] = b"DQPOLICY";
const FORMAT_VERSION: u32 = 1;

/// Policy checkpoint.
///
/// Layout, all integers and floats little-endian:
///
/// ```text
/// magic "DQPOLICY" | version u32 | seed u64 | iteration u64
/// | meta_len u32 | meta (UTF-8 JSON)
/// | input u32 | n_hidden u32 | hidden u32 * n_hidden | output u32
/// | n_params u64 | params f64 * n_params
/// | n_extras u32 | { name_len u32 | name | len u64 | f64 * len } * n_extras
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub policy: MlpParams,
    pub seed: u64,
    pub iteration: u64,
    /// Free-form run description, JSON by convention.
    pub meta: String,
    /// Named auxiliary arrays (log-std, normalization statistics, ..).
    pub extras: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(policy: MlpParams, seed: u64, iteration: u64) -> Self {
        Checkpoint { policy, seed, iteration, meta: String::new(), extras: Vec::new() }
    }

    pub fn extra(&self, name: &str) -> Option<&[f64]> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), PolicyError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.iteration.to_le_bytes())?;
        write_bytes(w, self.meta.as_bytes())?;
        let a = &self.policy.arch;
        w.write_all(&(a.input as u32).to_le_bytes())?;
        w.write_all(&(a.hidden.len() as u32).to_le_bytes())?;
        for &h in &a.hidden {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        w.write_all(&(a.output as u32).to_le_bytes())?;
        write_f64s(w, &self.policy.flat())?;
        w.write_all(&(self.extras.len() as u32).to_le_bytes())?;
        for (name, data) in &self.extras {
            write_bytes(w, name.as_bytes())?;
            write_f64s(w, data)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, PolicyError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PolicyError::Format("not a policy checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(PolicyError::Format(format!("unsupported version {version}")));
        }
        let seed = read_u64(r)?;
        let iteration = read_u64(r)?;
        let meta = String::from_utf8(read_bytes(r)?).map_err(|_| PolicyError::Format("meta is not UTF-8".into()))?;
        let input = read_u32(r)? as usize;
        let n_hidden = read_u32(r)? as usize;
        if n_hidden > 64 {
            return Err(PolicyError::Format(format!("implausible layer count {n_hidden}")));
        }
        let hidden = (0..n_hidden).map(|_| read_u32(r).map(|h| h as usize)).collect::<Result<Vec<_>, _>>()?;
        let output = read_u32(r)? as usize;
        let arch = Architecture { input, hidden, output };
        arch.validate()?;
        let flat = read_f64s(r)?;
        let policy = MlpParams::from_flat(&arch, &flat)?;
        let n_extras = read_u32(r)?;
        let mut extras = Vec::new();
        for _ in 0..n_extras {
            let name = String::from_utf8(read_bytes(r)?).map_err(|_| PolicyError::Format("extra name is not UTF-8".into()))?;
            extras.push((name, read_f64s(r)?));
        }
        Ok(Checkpoint { policy, seed, iteration, meta, extras })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Checkpoint::read_from(&mut f)
    }
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
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

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>, PolicyError> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(PolicyError::Format(format!("string of {n} bytes")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_f64s(r: &mut impl Read) -> Result<Vec<f64>, PolicyError> {
    let n = read_u64(r)? as usize;
    if n > 1 << 32 {
        return Err(PolicyError::Format(format!("array of {n} floats")));
    }
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_obs(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Tensor {
        Tensor::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_mid_thrust() {
        let dp = DynamicsParams::default();
        let p = MlpParams::zeros(&Architecture::new(15, &[8, 8], 4));
        let obs = random_obs(&mut ChaCha8Rng::seed_from_u64(0), 3, 15, 1.0);
        let (u, _) = squash(&p.forward(&obs).unwrap(), &dp);
        for r in 0..3 {
            assert_eq!(u.row_slice(r), &[dp.c_max / 2.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn input_dim_is_checked() {
        let p = MlpParams::zeros(&Architecture::new(15, &[4], 4));
        assert!(matches!(p.forward(&Tensor::zeros(1, 14)), Err(PolicyError::InputDim { got: 14, want: 15 })));
    }

    #[test]
    fn taped_forward_matches_plain_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dp = DynamicsParams::default();
        let arch = Architecture::new(15, &[16, 16], 4);
        let p = init_params(&arch, &mut rng, 1.0);
        let obs = random_obs(&mut rng, 7, 15, 2.0);
        let (u, t) = squash(&p.forward(&obs).unwrap(), &dp);
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &p);
        let o = tape.constant(obs.clone());
        let y = vars.forward(&mut tape, o);
        let (uv, tv) = squash_on_tape(&mut tape, y, &dp);
        assert_eq!(tape.value(uv), &u);
        assert_eq!(tape.value(tv), &t);
        let hv = vars.hidden(&mut tape, o);
        assert_eq!(tape.value(hv), &p.hidden(&obs).unwrap());
    }

    #[test]
    fn action_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dp = DynamicsParams::default();
        let arch = Architecture::new(3, &[2], 4);
        for _ in 0..10 {
            let p = init_params(&arch, &mut rng, 1.0);
            let obs = random_obs(&mut rng, 1, 3, 1.0);
            let wsum: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let objective = |p: &MlpParams| -> f64 {
                let (u, _) = squash(&p.forward(&obs).unwrap(), &dp);
                u.as_slice().iter().zip(&wsum).map(|(a, b)| a * b).sum()
            };
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, &p);
            let o = tape.constant(obs.clone());
            let y = vars.forward(&mut tape, o);
            let (u, _) = squash_on_tape(&mut tape, y, &dp);
            let g = tape.backward_seeded(u, Tensor::row(&wsum)).unwrap();
            let grad = vars.gradient(&g);
            let flat = p.flat();
            let h = 1e-6;
            for k in 0..flat.len() {
                let (mut a, mut b) = (flat.clone(), flat.clone());
                a[k] += h;
                b[k] -= h;
                let fd = (objective(&MlpParams::from_flat(&arch, &a).unwrap()) - objective(&MlpParams::from_flat(&arch, &b).unwrap()))
                    / (2.0 * h);
                assert!((fd - grad[k]).abs() <= 1e-6 * fd.abs().max(1e-2), "param {k}: {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_variance_scaled() {
        let arch = Architecture::new(15, &[64, 64], 4);
        let a = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(3), HEAD_INIT_SCALE);
        let b = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(3), HEAD_INIT_SCALE);
        assert_eq!(a, b);
        let dims = arch.layer_dims();
        let mut sums = vec![(0.0, 0usize); dims.len()];
        for seed in 0..100 {
            let p = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(seed), HEAD_INIT_SCALE);
            for (k, l) in p.layers.iter().enumerate() {
                sums[k].0 += l.w.as_slice().iter().map(|x| x * x).sum::<f64>();
                sums[k].1 += l.w.len();
                assert!(l.b.as_slice().iter().all(|&x| x == 0.0));
            }
        }
        for (k, (fan_in, _)) in dims.iter().enumerate() {
            let head = if k + 1 == dims.len() { HEAD_INIT_SCALE } else { 1.0 };
            let target = head / (*fan_in as f64).sqrt();
            let std = (sums[k].0 / sums[k].1 as f64).sqrt();
            assert!((std / target - 1.0).abs() < 0.1, "layer {k}: std {std} vs {target}");
        }
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for g in [1e-3, 0.5, -7.0] {
            let mut opt = Adam::new(AdamConfig { clip_norm: None, ..Default::default() }, 1);
            let mut x = [2.0];
            opt.step(&mut x, &[g]);
            assert_relative_eq!((x[0] - 2.0).abs(), 3e-4, max_relative = 1e-5);
            assert_eq!((x[0] - 2.0).signum(), -g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut opt = Adam::new(AdamConfig::default(), 3);
        let mut x = [1.0, -2.0, 3.0];
        opt.step(&mut x, &[0.0; 3]);
        assert_eq!(x, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_skips_non_finite_gradients() {
        let mut opt = Adam::new(AdamConfig::default(), 2);
        let mut x = [1.0, 1.0];
        assert!(matches!(opt.step(&mut x, &[f64::NAN, 0.0]), StepOutcome::Skipped { .. }));
        assert_eq!(x, [1.0, 1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn adam_clips_global_norm() {
        let mut a = Adam::new(AdamConfig::default(), 2);
        let mut b = Adam::new(AdamConfig::default(), 2);
        let (mut x, mut y) = ([0.0; 2], [0.0; 2]);
        let out = a.step(&mut x, &[30.0, 40.0]);
        b.step(&mut y, &[0.6, 0.8]);
        assert_eq!(out, StepOutcome::Applied { grad_norm: 50.0 });
        assert_eq!(x, y);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut opt = Adam::new(AdamConfig::default(), 4);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut x = vec![0.0; 4];
            let mut trace = Vec::new();
            for _ in 0..50 {
                let g: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                opt.step(&mut x, &g);
                trace.push(x.clone());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = Architecture::new(82, &[12, 9], 4);
        let p = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(4), 1.0);
        let mut ck = Checkpoint::new(p, 77, 12);
        ck.meta = "{\"task\":\"features\"}".into();
        ck.extras.push(("log_std".into(), vec![-0.5, -0.25, 0.0, 1.0]));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"DQPOLICY");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.extra("log_std"), Some(&[-0.5, -0.25, 0.0, 1.0][..]));
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::read_from(&mut &b"NOTACKPTxxxxxxxx"[..]).is_err());
        let p = MlpParams::zeros(&Architecture::new(2, &[2], 1));
        let mut buf = Vec::new();
        Checkpoint::new(p, 0, 0).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn squashed_actions_stay_in_bounds(seed in any::<u64>(), scale in 0.1..50.0f64) {
            let dp = DynamicsParams::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let arch = Architecture::new(15, &[8], 4);
            let p = init_params(&arch, &mut rng, scale);
            let obs = random_obs(&mut rng, 16, 15, 10.0);
            let (u, _) = squash(&p.forward(&obs).unwrap(), &dp);
            for r in 0..16 {
                let row = u.row_slice(r);
                prop_assert!((0.0..=dp.c_max).contains(&row[0]));
                prop_assert!(row[1..].iter().all(|w| w.abs() <= dp.omega_max));
            }
        }
    }
}
