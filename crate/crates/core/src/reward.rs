//! Stabilization reward.
//!
//! ```text
//! r = -w_p L(s_p (p - p_des)) - w_v L(v) - w_w L(omega)
//!     - w_u L(u - u_hover) - w_du L(u - u_prev)
//! ```
//!
//! with `L` the elementwise Huber loss summed over components.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{huber_scalar, Tape, Tensor, Var};
use crate::dynamics::{Action, QuadState};

pub const POSITION_WEIGHT: f64 = 0.2;
pub const POSITION_SCALE: f64 = 5.0;
pub const VELOCITY_WEIGHT: f64 = 0.1;
pub const RATE_WEIGHT: f64 = 0.1;
pub const HOVER_WEIGHT: f64 = 0.5;
pub const SMOOTHNESS_WEIGHT: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
#[error("invalid reward parameter: {0}")]
pub struct RewardError(String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub p_des: [f64; 3],
    pub huber_delta: f64,
    pub position_weight: f64,
    pub position_scale: f64,
    pub velocity_weight: f64,
    pub rate_weight: f64,
    pub hover_weight: f64,
    pub smoothness_weight: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            p_des: [0.0, 0.0, 1.0],
            huber_delta: 1.0,
            position_weight: POSITION_WEIGHT,
            position_scale: POSITION_SCALE,
            velocity_weight: VELOCITY_WEIGHT,
            rate_weight: RATE_WEIGHT,
            hover_weight: HOVER_WEIGHT,
            smoothness_weight: SMOOTHNESS_WEIGHT,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), RewardError> {
        let w =
            [self.position_weight, self.position_scale, self.velocity_weight, self.rate_weight, self.hover_weight, self.smoothness_weight];
        if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(RewardError(format!("weights must be positive and finite, got {w:?}")));
        }
        if !(self.huber_delta > 0.0) {
            return Err(RewardError(format!("huber_delta must be positive, got {}", self.huber_delta)));
        }
        if self.p_des.iter().any(|x| !x.is_finite()) {
            return Err(RewardError("p_des must be finite".into()));
        }
        Ok(())
    }
}

/// Elementwise Huber loss, summed.
pub fn huber(x: &[f64], delta: f64) -> f64 {
    x.iter().map(|&z| huber_scalar(z, delta)).sum()
}

/// Reward for one transition. `omega` is the rate penalized by the rate term:
/// the commanded rate for the simple model, the actual rate for the full one.
pub fn reward(state: &QuadState, action: &Action, prev_action: &Action, omega: &Vector3<f64>, params: &RewardParams) -> f64 {
    let d = params.huber_delta;
    let ep = (state.p - Vector3::from(params.p_des)) * params.position_scale;
    let u = action.to_array();
    let h = Action::HOVER.to_array();
    let up = prev_action.to_array();
    let du_h: Vec<f64> = (0..4).map(|i| u[i] - h[i]).collect();
    let du_p: Vec<f64> = (0..4).map(|i| u[i] - up[i]).collect();
    -params.position_weight * huber(ep.as_slice(), d)
        - params.velocity_weight * huber(state.v.as_slice(), d)
        - params.rate_weight * huber(omega.as_slice(), d)
        - params.hover_weight * huber(&du_h, d)
        - params.smoothness_weight * huber(&du_p, d)
}

/// Where the rate term reads its input from on the tape.
#[derive(Clone, Copy, Debug)]
pub enum RateSource {
    /// Columns 1..4 of the action.
    Action,
    /// A separate `n x 3` node, typically a constant.
    Var(Var),
}

/// Taped batched reward, one row per environment. `state` is `n x 15`,
/// `action` and `prev_action` are `n x 4`. Returns `n x 1`.
pub fn reward_on_tape(tape: &mut Tape, state: Var, action: Var, prev_action: Var, rate: RateSource, params: &RewardParams) -> Var {
    let d = params.huber_delta;
    let p = tape.slice_cols(state, 0, 3);
    let v = tape.slice_cols(state, 12, 3);
    let neg_goal = tape.constant(Tensor::row(&params.p_des.map(|x| -x)));
    let ep = tape.add_row(p, neg_goal);
    let ep = tape.scale(ep, params.position_scale);
    let omega = match rate {
        RateSource::Action => tape.slice_cols(action, 1, 3),
        RateSource::Var(w) => w,
    };
    let neg_hover = tape.constant(Tensor::row(&Action::HOVER.to_array().map(|x| -x)));
    let du_h = tape.add_row(action, neg_hover);
    let du_p = tape.sub(action, prev_action);

    let mut terms = Vec::with_capacity(5);
    for (x, w) in [
        (ep, params.position_weight),
        (v, params.velocity_weight),
        (omega, params.rate_weight),
        (du_h, params.hover_weight),
        (du_p, params.smoothness_weight),
    ] {
        let l = tape.huber(x, d);
        let l = tape.sum_rows(l);
        terms.push(tape.scale(l, -w));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    total
}
