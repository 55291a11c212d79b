//! Quadrotor models.
//!
//! * The **simple model** integrates `p' = v`, `R' = R [w]x`, `v' = R c + g`
//!   with one semi-implicit Euler step per control period and the exact
//!   exponential map for rotation. It is cheap and has closed-form Jacobians
//!   ([`simple_step_jacobians`]), which the trainers use on the backward pass.
//! * The **full model** adds a first-order thrust lag, first-order body-rate
//!   tracking, linear drag and a command delay line, integrated at 1 kHz.
//!   It is only ever stepped forward (or taped primitive-by-primitive for
//!   comparison benchmarks).
//!
//! States are flattened as `x = [p; vec(R); v]` with column-major `vec`.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3;

pub const GRAVITY: f64 = 9.81;
pub const STATE_DIM: usize = 15;
pub const ACTION_DIM: usize = 4;

pub type StateJacobian = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type ActionJacobian = SMatrix<f64, STATE_DIM, ACTION_DIM>;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid dynamics parameter: {0}")]
    InvalidParam(String),
}

pub fn gravity_vector() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

/// Position, attitude and velocity, all in the world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadState {
    pub p: Vector3<f64>,
    /// Body-to-world rotation.
    pub r: Matrix3<f64>,
    pub v: Vector3<f64>,
}

impl QuadState {
    pub fn hover_at(p: Vector3<f64>) -> Self {
        QuadState { p, r: Matrix3::identity(), v: Vector3::zeros() }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut x = [0.0; STATE_DIM];
        x[..3].copy_from_slice(self.p.as_slice());
        x[3..12].copy_from_slice(self.r.as_slice());
        x[12..].copy_from_slice(self.v.as_slice());
        x
    }

    pub fn from_slice(x: &[f64]) -> Result<Self, DynamicsError> {
        if x.len() != STATE_DIM {
            return Err(DynamicsError::Length { expected: STATE_DIM, got: x.len() });
        }
        Ok(QuadState {
            p: Vector3::from_column_slice(&x[..3]),
            r: Matrix3::from_column_slice(&x[3..12]),
            v: Vector3::from_column_slice(&x[12..]),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.r.iter()).chain(self.v.iter()).all(|x| x.is_finite())
    }

    /// `||R^T R - I||_F`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.r.transpose() * self.r - Matrix3::identity()).norm()
    }

    /// Largest absolute entry of the flattened state.
    pub fn max_abs(&self) -> f64 {
        self.to_array().iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Angle between body z and world z, radians.
    pub fn tilt(&self) -> f64 {
        self.r[(2, 2)].clamp(-1.0, 1.0).acos()
    }
}

/// Mass-normalized collective thrust (m/s^2) and body rates (rad/s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub c: f64,
    pub omega: Vector3<f64>,
}

impl Action {
    /// Thrust exactly cancelling gravity, zero rates.
    pub const HOVER: Action = Action { c: GRAVITY, omega: Vector3::new(0.0, 0.0, 0.0) };

    pub fn new(c: f64, wx: f64, wy: f64, wz: f64) -> Self {
        Action { c, omega: Vector3::new(wx, wy, wz) }
    }

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [self.c, self.omega.x, self.omega.y, self.omega.z]
    }

    pub fn from_slice(u: &[f64]) -> Result<Self, DynamicsError> {
        if u.len() != ACTION_DIM {
            return Err(DynamicsError::Length { expected: ACTION_DIM, got: u.len() });
        }
        Ok(Action::new(u[0], u[1], u[2], u[3]))
    }

    pub fn is_finite(&self) -> bool {
        self.c.is_finite() && self.omega.iter().all(|x| x.is_finite())
    }

    pub fn clamped(&self, params: &DynamicsParams) -> Action {
        let w = params.omega_max;
        Action { c: self.c.clamp(0.0, params.c_max), omega: self.omega.map(|x| x.clamp(-w, w)) }
    }

    pub fn within(&self, params: &DynamicsParams) -> bool {
        (0.0..=params.c_max).contains(&self.c) && self.omega.iter().all(|x| x.abs() <= params.omega_max)
    }
}

/// Model parameters. Setting a time constant to zero makes that loop
/// instantaneous; `drag = 0` and `delay_steps = 0` switch the other effects off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsParams {
    /// Control period, seconds.
    pub dt: f64,
    /// Full-model integration step, seconds.
    pub sim_dt: f64,
    pub tau_thrust: f64,
    pub tau_rate: f64,
    /// Linear drag coefficient, 1/s.
    pub drag: f64,
    /// Command transmission delay in control periods.
    pub delay_steps: usize,
    pub c_max: f64,
    pub omega_max: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams {
            dt: 0.02,
            sim_dt: 0.001,
            tau_thrust: 0.03,
            tau_rate: 0.05,
            drag: 0.3,
            delay_steps: 1,
            c_max: 2.0 * GRAVITY,
            omega_max: 5.0,
        }
    }
}

impl DynamicsParams {
    /// Full model with every extra effect disabled (instant loops, no drag,
    /// no delay); it then agrees with the simple model up to substepping.
    pub fn idealized() -> Self {
        DynamicsParams { tau_thrust: 0.0, tau_rate: 0.0, drag: 0.0, delay_steps: 0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: String| Err(DynamicsError::InvalidParam(m));
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.sim_dt > 0.0) || self.sim_dt > self.dt {
            return bad(format!("sim_dt must be in (0, dt], got {}", self.sim_dt));
        }
        if self.tau_thrust < 0.0 || self.tau_rate < 0.0 || self.drag < 0.0 {
            return bad("time constants and drag must be non-negative".into());
        }
        if !(self.c_max > GRAVITY) {
            return bad(format!("c_max must exceed gravity, got {}", self.c_max));
        }
        if !(self.omega_max > 0.0) {
            return bad(format!("omega_max must be positive, got {}", self.omega_max));
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        ((self.dt / self.sim_dt).round() as usize).max(1)
    }

    /// Per-substep blend factor of the exactly discretized first-order lag.
    pub fn lag_gain(tau: f64, h: f64) -> f64 {
        if tau <= 0.0 {
            1.0
        } else {
            1.0 - (-h / tau).exp()
        }
    }
}

fn check_inputs(state: &QuadState, action: &Action, dt: f64) -> Result<(), DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !action.is_finite() {
        return Err(DynamicsError::NonFinite("action"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynamicsError::InvalidParam(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

/// Simple-model step without the final re-orthonormalization. This is the map
/// whose derivatives [`simple_step_jacobians`] returns.
pub fn simple_step_raw(state: &QuadState, action: &Action, dt: f64) -> Result<QuadState, DynamicsError> {
    check_inputs(state, action, dt)?;
    let thrust = state.r.column(2) * action.c;
    let v = state.v + (thrust + gravity_vector()) * dt;
    let p = state.p + v * dt;
    let r = state.r * so3::exp(&(action.omega * dt));
    Ok(QuadState { p, r, v })
}

/// One control period of the simple model.
pub fn simple_step(state: &QuadState, action: &Action, dt: f64) -> Result<QuadState, DynamicsError> {
    let mut next = simple_step_raw(state, action, dt)?;
    next.r = so3::orthonormalize(&next.r);
    Ok(next)
}

/// Jacobians of [`simple_step_raw`] with respect to `x = [p; vec(R); v]` and
/// `u = [c, w]`. Re-orthonormalization is treated as the identity.
pub fn simple_step_jacobians(state: &QuadState, action: &Action, dt: f64) -> Result<(StateJacobian, ActionJacobian), DynamicsError> {
    check_inputs(state, action, dt)?;
    let mut dx = StateJacobian::zeros();
    let mut du = ActionJacobian::zeros();
    let c = action.c;
    let e3 = state.r.column(2).into_owned();

    // v' = v + (R e3 c + g) dt
    for i in 0..3 {
        dx[(12 + i, 12 + i)] = 1.0;
        dx[(12 + i, 9 + i)] = c * dt;
        du[(12 + i, 0)] = e3[i] * dt;
    }
    // p' = p + v' dt
    for i in 0..3 {
        dx[(i, i)] = 1.0;
        dx[(i, 12 + i)] = dt;
        dx[(i, 9 + i)] = c * dt * dt;
        du[(i, 0)] = e3[i] * dt * dt;
    }
    // R' = R E, E = exp([w dt]x): column j of R' is sum_k R[:, k] E[k, j].
    let phi = action.omega * dt;
    let e = so3::exp(&phi);
    for j in 0..3 {
        for k in 0..3 {
            for i in 0..3 {
                dx[(3 + 3 * j + i, 3 + 3 * k + i)] = e[(k, j)];
            }
        }
    }
    let de = so3::exp_derivatives(&phi);
    for (a, de_a) in de.iter().enumerate() {
        let dr = state.r * de_a * dt;
        for (n, val) in dr.as_slice().iter().enumerate() {
            du[(3 + n, 1 + a)] = *val;
        }
    }
    Ok((dx, du))
}

/// Full-model state: rigid body plus actuator internals and delay line.
#[derive(Clone, Debug, PartialEq)]
pub struct FullModelState {
    pub core: QuadState,
    /// Actual body rates, body frame.
    pub omega_act: Vector3<f64>,
    /// Actual mass-normalized thrust.
    pub c_act: f64,
    /// Pending commands, oldest first; length equals the configured delay.
    pub cmd_queue: VecDeque<Action>,
}

impl FullModelState {
    /// Vehicle in `core` with the actuators settled at hover thrust, the
    /// given actual rates, and the delay line filled with hover commands.
    pub fn at_rest(core: QuadState, omega_act: Vector3<f64>, params: &DynamicsParams) -> Self {
        FullModelState { core, omega_act, c_act: GRAVITY, cmd_queue: std::iter::repeat_n(Action::HOVER, params.delay_steps).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.core.is_finite() && self.c_act.is_finite() && self.omega_act.iter().all(|x| x.is_finite())
    }
}

/// Pops the command that reaches the vehicle this period and enqueues `action`.
pub fn advance_delay_line(queue: &mut VecDeque<Action>, action: Action) -> Action {
    if queue.is_empty() {
        return action;
    }
    queue.push_back(action);
    queue.pop_front().expect("non-empty queue")
}

/// One 1 kHz integration step of the full model with command `cmd`.
pub fn full_substep(state: &mut FullModelState, cmd: &Action, params: &DynamicsParams) {
    let h = params.sim_dt;
    let kc = DynamicsParams::lag_gain(params.tau_thrust, h);
    let kw = DynamicsParams::lag_gain(params.tau_rate, h);
    state.c_act += kc * (cmd.c - state.c_act);
    state.omega_act += (cmd.omega - state.omega_act) * kw;
    let core = &mut state.core;
    let acc = core.r.column(2) * state.c_act + gravity_vector() - core.v * params.drag;
    core.v += acc * h;
    core.p += core.v * h;
    core.r *= so3::exp(&(state.omega_act * h));
}

/// One control period of the full model.
pub fn full_step(state: &FullModelState, action: &Action, params: &DynamicsParams) -> Result<FullModelState, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !action.is_finite() {
        return Err(DynamicsError::NonFinite("action"));
    }
    let mut next = state.clone();
    let cmd = advance_delay_line(&mut next.cmd_queue, action.clamped(params));
    for _ in 0..params.substeps() {
        full_substep(&mut next, &cmd, params);
    }
    next.core.r = so3::orthonormalize(&next.core.r);
    Ok(next)
}

/// Initial-condition distribution for thrown-vehicle recovery. `scale`
/// shrinks every spread uniformly; `scale = 0` yields exact hover at `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitDistribution {
    pub scale: f64,
    pub center: [f64; 3],
    /// Half-widths of the horizontal position box, meters.
    pub xy_half_width: f64,
    /// Vertical offsets relative to `center`, meters.
    pub z_range: [f64; 2],
    pub max_speed: f64,
    pub max_tilt_deg: f64,
    /// Radius of the actual body-rate ball (full model), rad/s.
    pub max_rate: f64,
}

impl Default for InitDistribution {
    fn default() -> Self {
        InitDistribution {
            scale: 1.0,
            center: [0.0, 0.0, 1.0],
            xy_half_width: 1.0,
            z_range: [-0.2, 0.5],
            max_speed: 3.0,
            max_tilt_deg: 60.0,
            max_rate: 2.0,
        }
    }
}

/// Sampled start: rigid-body state plus actual body rates for the full model.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialCondition {
    pub state: QuadState,
    pub omega: Vector3<f64>,
}

impl InitialCondition {
    pub fn full_state(&self, params: &DynamicsParams) -> FullModelState {
        FullModelState::at_rest(self.state.clone(), self.omega, params)
    }
}

fn uniform_ball<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Vector3<f64> {
    let x: f64 = StandardNormal.sample(rng);
    let y: f64 = StandardNormal.sample(rng);
    let z: f64 = StandardNormal.sample(rng);
    let dir = Vector3::new(x, y, z);
    let n = dir.norm();
    let u: f64 = rng.gen();
    if n == 0.0 {
        return Vector3::zeros();
    }
    dir / n * (radius * u.cbrt())
}

pub fn sample_initial_state<R: Rng + ?Sized>(rng: &mut R, dist: &InitDistribution) -> InitialCondition {
    let s = dist.scale;
    let offset = Vector3::new(
        rng.gen_range(-1.0..=1.0) * dist.xy_half_width,
        rng.gen_range(-1.0..=1.0) * dist.xy_half_width,
        rng.gen_range(dist.z_range[0]..=dist.z_range[1]),
    );
    let p = Vector3::from(dist.center) + offset * s;
    let v = uniform_ball(rng, dist.max_speed * s);
    let tilt = rng.gen_range(0.0..=1.0) * dist.max_tilt_deg.to_radians() * s;
    let axis_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let yaw = rng.gen_range(-1.0..=1.0) * std::f64::consts::PI * s;
    let tilt_axis = Vector3::new(axis_angle.cos(), axis_angle.sin(), 0.0);
    let r = so3::exp(&(Vector3::z() * yaw)) * so3::exp(&(tilt_axis * tilt));
    let omega = uniform_ball(rng, dist.max_rate * s);
    InitialCondition { state: QuadState { p, r, v }, omega }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hover() -> QuadState {
        QuadState::hover_at(Vector3::new(0.0, 0.0, 1.0))
    }

    fn random_state(rng: &mut ChaCha8Rng) -> QuadState {
        let dist = InitDistribution { max_tilt_deg: 170.0, ..Default::default() };
        sample_initial_state(rng, &dist).state
    }

    fn random_action(rng: &mut ChaCha8Rng, params: &DynamicsParams) -> Action {
        let w = params.omega_max;
        Action::new(rng.gen_range(0.0..params.c_max), rng.gen_range(-w..w), rng.gen_range(-w..w), rng.gen_range(-w..w))
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let next = simple_step(&hover(), &Action::HOVER, 0.02).unwrap();
        assert_eq!(next, hover());
    }

    #[test]
    fn free_fall_arithmetic() {
        let next = simple_step(&hover(), &Action::new(0.0, 0.0, 0.0, 0.0), 0.02).unwrap();
        assert_relative_eq!(next.v, Vector3::new(0.0, 0.0, -0.1962), epsilon = 1e-15);
        assert_relative_eq!(next.p, Vector3::new(0.0, 0.0, 1.0 - 0.003924), epsilon = 1e-15);
    }

    #[test]
    fn yaw_rate_rotates_about_z() {
        let next = simple_step(&hover(), &Action::new(GRAVITY, 0.0, 0.0, 1.0), 0.02).unwrap();
        let (s, c) = 0.02_f64.sin_cos();
        let want = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(next.r, want, epsilon = 1e-15);
    }

    #[test]
    fn rejects_non_finite_inputs() {
        let mut bad = hover();
        bad.v.x = f64::NAN;
        assert_eq!(simple_step(&bad, &Action::HOVER, 0.02), Err(DynamicsError::NonFinite("state")));
        let act = Action::new(f64::INFINITY, 0.0, 0.0, 0.0);
        assert_eq!(simple_step(&hover(), &act, 0.02), Err(DynamicsError::NonFinite("action")));
        assert!(simple_step_jacobians(&hover(), &act, 0.02).is_err());
        let full = FullModelState::at_rest(bad, Vector3::zeros(), &DynamicsParams::default());
        assert!(full_step(&full, &Action::HOVER, &DynamicsParams::default()).is_err());
    }

    #[test]
    fn jacobian_structure_at_hover() {
        let dt = 0.02;
        let (dx, du) = simple_step_jacobians(&hover(), &Action::HOVER, dt).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let eye = if i == j { 1.0 } else { 0.0 };
                assert_eq!(dx[(i, j)], eye);
                assert_eq!(dx[(i, 12 + j)], eye * dt);
            }
        }
        assert_eq!(du[(12, 0)], 0.0);
        assert_eq!(du[(13, 0)], 0.0);
        assert_eq!(du[(14, 0)], dt);
    }

    /// Finite-difference Jacobians of the pre-projection step.
    fn fd_jacobians(state: &QuadState, action: &Action, dt: f64) -> (StateJacobian, ActionJacobian) {
        let h = 1e-6;
        let x0 = state.to_array();
        let u0 = action.to_array();
        let f = |x: &[f64], u: &[f64]| {
            let s = QuadState::from_slice(x).unwrap();
            simple_step_raw(&s, &Action::from_slice(u).unwrap(), dt).unwrap().to_array()
        };
        let mut dx = StateJacobian::zeros();
        let mut du = ActionJacobian::zeros();
        for k in 0..STATE_DIM {
            let (mut a, mut b) = (x0, x0);
            a[k] += h;
            b[k] -= h;
            let (fa, fb) = (f(&a, &u0), f(&b, &u0));
            for i in 0..STATE_DIM {
                dx[(i, k)] = (fa[i] - fb[i]) / (2.0 * h);
            }
        }
        for k in 0..ACTION_DIM {
            let (mut a, mut b) = (u0, u0);
            a[k] += h;
            b[k] -= h;
            let (fa, fb) = (f(&x0, &a), f(&x0, &b));
            for i in 0..STATE_DIM {
                du[(i, k)] = (fa[i] - fb[i]) / (2.0 * h);
            }
        }
        (dx, du)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let params = DynamicsParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let s = random_state(&mut rng);
            let a = random_action(&mut rng, &params);
            let (dx, du) = simple_step_jacobians(&s, &a, params.dt).unwrap();
            let (fx, fu) = fd_jacobians(&s, &a, params.dt);
            assert!((dx - fx).abs().max() / fx.abs().max() < 1e-5);
            assert!((du - fu).abs().max() / fu.abs().max() < 1e-5);
        }
    }

    #[test]
    fn rotation_stays_orthonormal_over_long_chains() {
        let params = DynamicsParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = hover();
        for _ in 0..10_000 {
            let a = random_action(&mut rng, &params);
            s = simple_step(&s, &a, params.dt).unwrap();
            // keep translation bounded; only the attitude is under test
            s.p = Vector3::zeros();
            s.v = Vector3::zeros();
        }
        assert!(s.orthonormality_error() < 1e-6);
        assert!((s.r.determinant() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ballistic_velocity_accumulates_linearly() {
        let dt = 0.02;
        let mut s = QuadState { v: Vector3::new(0.5, -1.0, 2.0), ..hover() };
        let v0 = s.v;
        let n = 137;
        for _ in 0..n {
            s = simple_step(&s, &Action::new(0.0, 0.0, 0.0, 0.0), dt).unwrap();
        }
        assert_relative_eq!(s.v, v0 + gravity_vector() * (n as f64 * dt), epsilon = 1e-12);
    }

    #[test]
    fn idealized_full_model_tracks_simple_model() {
        let params = DynamicsParams { tau_thrust: 1e-4, tau_rate: 1e-4, drag: 0.0, delay_steps: 0, ..Default::default() };
        let full = FullModelState::at_rest(hover(), Vector3::zeros(), &params);
        let next = full_step(&full, &Action::HOVER, &params).unwrap();
        let simple = simple_step(&hover(), &Action::HOVER, params.dt).unwrap();
        let diff = next.core.to_array().iter().zip(simple.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-3);

        // Substepping shifts position by about 1.9e-4 * |a| and velocity by
        // about c * |w| * dt^2 / 2 per period (thrust axis turns during the
        // period), so the comparison stays near hover.
        let near_hover = InitDistribution { max_tilt_deg: 10.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let s = sample_initial_state(&mut rng, &near_hover).state;
            let a = Action::new(rng.gen_range(9.0..10.6), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            let mut f = FullModelState::at_rest(s.clone(), a.omega, &params);
            f.c_act = a.c;
            let n = full_step(&f, &a, &params).unwrap();
            let m = simple_step(&s, &a, params.dt).unwrap();
            let diff = n.core.to_array().iter().zip(m.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-3, "diff {diff}");
        }
    }

    #[test]
    fn thrust_lag_settles() {
        let params = DynamicsParams::default();
        let mut s = FullModelState::at_rest(hover(), Vector3::zeros(), &params);
        s.c_act = 0.0;
        for _ in 0..50 {
            s = full_step(&s, &Action::HOVER, &params).unwrap();
        }
        assert!((s.c_act - GRAVITY).abs() < 0.01 * GRAVITY);
        assert!(s.c_act >= 0.0);
    }

    #[test]
    fn drag_decays_exponentially() {
        let params = DynamicsParams { drag: 0.3, ..Default::default() };
        let mut s = FullModelState::at_rest(hover(), Vector3::zeros(), &params);
        s.core.v = Vector3::new(1.0, 0.0, 0.0);
        for k in 1..=100 {
            s = full_step(&s, &Action::HOVER, &params).unwrap();
            let t = k as f64 * params.dt;
            let want = (-params.drag * t).exp();
            // explicit Euler on the decay: relative error ~ k_d^2 h t / 2
            assert!((s.core.v.x - want).abs() < 1e-3 * want, "t={t}: {} vs {want}", s.core.v.x);
        }
    }

    #[test]
    fn delay_line_keeps_its_length() {
        let params = DynamicsParams { delay_steps: 3, ..Default::default() };
        let mut s = FullModelState::at_rest(hover(), Vector3::zeros(), &params);
        for i in 0..10 {
            s = full_step(&s, &Action::new(i as f64, 0.0, 0.0, 0.0), &params).unwrap();
            assert_eq!(s.cmd_queue.len(), 3);
        }
        assert_eq!(s.cmd_queue[0].c, 7.0);
    }

    #[test]
    fn zero_scale_sampler_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dist = InitDistribution { scale: 0.0, ..Default::default() };
        let ic = sample_initial_state(&mut rng, &dist);
        assert_eq!(ic.state, hover());
        assert_eq!(ic.omega, Vector3::zeros());
    }

    #[test]
    fn sampler_respects_support_and_seed() {
        let dist = InitDistribution::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100_000 {
            let ic = sample_initial_state(&mut rng, &dist);
            assert!(ic.state.tilt() <= 60f64.to_radians() + 1e-9);
            assert!(ic.state.v.norm() <= 3.0 + 1e-12);
            assert!(ic.omega.norm() <= 2.0 + 1e-12);
            let p = ic.state.p;
            assert!(p.x.abs() <= 1.0 && p.y.abs() <= 1.0 && (0.8..=1.5).contains(&p.z));
            assert!(ic.state.orthonormality_error() < 1e-12);
        }
        let a: Vec<_> = (0..5).map(|_| sample_initial_state(&mut ChaCha8Rng::seed_from_u64(5), &dist)).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }
}
