//! Policy observations.
//!
//! State mode observes `[p; vec(R); v]` directly. Feature mode observes the
//! normalized image coordinates of seven ground features over the last five
//! frames plus the last three actions, through a double-sphere camera that is
//! mounted looking straight down. Feature observations are 82-dimensional:
//!
//! ```text
//! [frame_t (14), frame_{t-1}, .., frame_{t-4}, a_{t-1} (4), a_{t-2}, a_{t-3}]
//! ```
//!
//! where each frame lists `(u, v)` per feature in layout order and actions
//! are normalized to `[-1, 1]` (hover maps to zero).

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Action, DynamicsParams, QuadState, STATE_DIM};

pub const NUM_FEATURES: usize = 7;
pub const FRAME_DIM: usize = 2 * NUM_FEATURES;
pub const HISTORY_FRAMES: usize = 5;
pub const HISTORY_ACTIONS: usize = 3;
pub const FEATURE_OBS_DIM: usize = HISTORY_FRAMES * FRAME_DIM + HISTORY_ACTIONS * 4;
pub const STATE_OBS_DIM: usize = STATE_DIM;

/// Normalized coordinates are clamped to this box.
pub const PIXEL_LIMIT: f64 = 1.2;

/// Minimum projection denominator considered valid.
const MIN_DENOMINATOR: f64 = 1e-3;

pub type FrameJacobian = SMatrix<f64, FRAME_DIM, STATE_DIM>;

#[derive(Debug, Error, PartialEq)]
pub enum ObservationError {
    #[error("invalid camera parameter: {0}")]
    Camera(String),
    #[error("invalid feature layout: {0}")]
    Layout(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    DoubleSphere,
    Pinhole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub projection: ProjectionKind,
    /// Full field of view in degrees; sets the focal length so the border of
    /// the normalized image sits at half this angle off-axis.
    pub fov_deg: f64,
    pub xi: f64,
    pub alpha: f64,
    /// Focal length in normalized units; overrides `fov_deg` when set.
    pub focal: Option<f64>,
    pub principal_point: [f64; 2],
    /// Camera center in the body frame, meters.
    pub mount_translation: [f64; 3],
    /// Std of zero-mean Gaussian noise on normalized pixels.
    pub pixel_noise: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            projection: ProjectionKind::DoubleSphere,
            fov_deg: 150.0,
            xi: -0.2,
            alpha: 0.6,
            focal: None,
            principal_point: [0.0, 0.0],
            mount_translation: [0.0, 0.0, 0.0],
            pixel_noise: 0.0,
        }
    }
}

impl CameraConfig {
    pub fn pinhole(focal: f64) -> Self {
        CameraConfig { projection: ProjectionKind::Pinhole, focal: Some(focal), ..Default::default() }
    }
}

/// Downward-looking camera with a double-sphere projection in normalized
/// image units. Pinhole is the special case `xi = alpha = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub xi: f64,
    pub alpha: f64,
    pub focal: f64,
    pub principal_point: [f64; 2],
    /// Maps camera-frame coordinates into the body frame.
    pub body_from_camera: Matrix3<f64>,
    pub mount_translation: Vector3<f64>,
}

/// Camera x along body x, camera y along body -y, optical axis along body -z.
pub fn nadir_mount() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

impl CameraModel {
    pub fn from_config(cfg: &CameraConfig) -> Result<Self, ObservationError> {
        let (xi, alpha) = match cfg.projection {
            ProjectionKind::DoubleSphere => (cfg.xi, cfg.alpha),
            ProjectionKind::Pinhole => (0.0, 0.0),
        };
        if !(0.0..=1.0).contains(&alpha) || !xi.is_finite() {
            return Err(ObservationError::Camera(format!("alpha must be in [0, 1] and xi finite (alpha={alpha}, xi={xi})")));
        }
        let mut cam = CameraModel {
            xi,
            alpha,
            focal: 1.0,
            principal_point: cfg.principal_point,
            body_from_camera: nadir_mount(),
            mount_translation: Vector3::from(cfg.mount_translation),
        };
        cam.focal = match cfg.focal {
            Some(f) => f,
            None => {
                let half = (cfg.fov_deg / 2.0).to_radians();
                if !(half > 0.0) || half >= std::f64::consts::PI {
                    return Err(ObservationError::Camera(format!("fov_deg out of range: {}", cfg.fov_deg)));
                }
                let p = Vector3::new(half.sin(), 0.0, half.cos());
                match cam.normalized_projection(&p) {
                    Some((m, _)) if m[0] > 0.0 => 1.0 / m[0],
                    _ => return Err(ObservationError::Camera(format!("fov {} deg not representable", cfg.fov_deg))),
                }
            }
        };
        if !(cam.focal > 0.0) {
            return Err(ObservationError::Camera(format!("focal must be positive, got {}", cam.focal)));
        }
        Ok(cam)
    }

    fn valid_region(&self, z: f64, d1: f64) -> bool {
        let a = self.alpha;
        let w1 = if a <= 0.5 { a / (1.0 - a) } else { (1.0 - a) / a };
        let w2 = (w1 + self.xi) / (2.0 * w1 * self.xi + self.xi * self.xi + 1.0).sqrt();
        z > -w2 * d1
    }

    /// Projection onto the unit-focal plane, `m = (x, y) / D`, with `dm/dP`.
    /// `None` outside the valid region.
    fn normalized_projection(&self, pc: &Vector3<f64>) -> Option<([f64; 2], SMatrix<f64, 2, 3>)> {
        let (x, y, z) = (pc.x, pc.y, pc.z);
        let d1 = pc.norm();
        let gamma = self.xi * d1 + z;
        let d2 = (x * x + y * y + gamma * gamma).sqrt();
        let den = self.alpha * d2 + (1.0 - self.alpha) * gamma;
        if !(den >= MIN_DENOMINATOR) || !self.valid_region(z, d1) || d1 == 0.0 {
            return None;
        }
        let dd1 = pc / d1;
        let dgamma = dd1 * self.xi + Vector3::z();
        let dd2 = (Vector3::new(x, y, 0.0) + dgamma * gamma) / d2;
        let dden = dd2 * self.alpha + dgamma * (1.0 - self.alpha);
        let mut jac = SMatrix::<f64, 2, 3>::zeros();
        for k in 0..3 {
            jac[(0, k)] = -x * dden[k] / (den * den);
            jac[(1, k)] = -y * dden[k] / (den * den);
        }
        jac[(0, 0)] += 1.0 / den;
        jac[(1, 1)] += 1.0 / den;
        Some(([x / den, y / den], jac))
    }

    /// Feature position in the camera frame and its derivative with respect
    /// to the flattened state.
    fn camera_point(&self, state: &QuadState, feature: &Vector3<f64>) -> (Vector3<f64>, SMatrix<f64, 3, STATE_DIM>) {
        let d = feature - state.p;
        let pb = state.r.transpose() * d - self.mount_translation;
        let cb = self.body_from_camera.transpose();
        let pc = cb * pb;
        // pb_k = sum_i R[i, k] d_i - t_k
        let mut dpb = SMatrix::<f64, 3, STATE_DIM>::zeros();
        for k in 0..3 {
            for i in 0..3 {
                dpb[(k, i)] = -state.r[(i, k)];
                dpb[(k, 3 + 3 * k + i)] = d[i];
            }
        }
        (pc, cb * dpb)
    }
}

/// Projected feature in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureProjection {
    pub uv: [f64; 2],
    /// False when the point is outside the camera's valid region.
    pub valid: bool,
}

fn clamp_limit(x: f64) -> f64 {
    x.clamp(-PIXEL_LIMIT, PIXEL_LIMIT)
}

/// Projects one world point. Invalid points land on the frame border in the
/// direction of their lateral offset; in-range coordinates are unclamped.
pub fn project_feature(camera: &CameraModel, state: &QuadState, feature: &Vector3<f64>) -> FeatureProjection {
    project_feature_with_jacobian(camera, state, feature).0
}

/// [`project_feature`] plus `d(u, v) / dx`. Rows of clamped or invalid
/// coordinates are zero.
pub fn project_feature_with_jacobian(
    camera: &CameraModel,
    state: &QuadState,
    feature: &Vector3<f64>,
) -> (FeatureProjection, SMatrix<f64, 2, STATE_DIM>) {
    let (pc, dpc) = camera.camera_point(state, feature);
    let mut jac = SMatrix::<f64, 2, STATE_DIM>::zeros();
    match camera.normalized_projection(&pc) {
        Some((m, dm)) => {
            let raw = [camera.focal * m[0] + camera.principal_point[0], camera.focal * m[1] + camera.principal_point[1]];
            let full = dm * dpc * camera.focal;
            let mut uv = [0.0; 2];
            for k in 0..2 {
                uv[k] = clamp_limit(raw[k]);
                if raw[k].abs() <= PIXEL_LIMIT {
                    jac.set_row(k, &full.row(k));
                }
            }
            (FeatureProjection { uv, valid: true }, jac)
        }
        None => {
            let lateral = (pc.x * pc.x + pc.y * pc.y).sqrt();
            let uv = if lateral > 0.0 {
                let s = PIXEL_LIMIT / (pc.x.abs().max(pc.y.abs()) / lateral) / lateral;
                [clamp_limit(pc.x * s), clamp_limit(pc.y * s)]
            } else {
                [PIXEL_LIMIT, PIXEL_LIMIT]
            };
            (FeatureProjection { uv, valid: false }, jac)
        }
    }
}

/// Ground features, all on `z = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayout {
    points: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutConfig {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig { center: [0.0, 0.0], radius: 1.5 }
    }
}

impl FeatureLayout {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, ObservationError> {
        if points.len() != NUM_FEATURES {
            return Err(ObservationError::Layout(format!("need {NUM_FEATURES} features, got {}", points.len())));
        }
        if points.iter().any(|p| p.z != 0.0 || !p.iter().all(|x| x.is_finite())) {
            return Err(ObservationError::Layout("features must be finite and on z = 0".into()));
        }
        for i in 0..points.len() {
            for j in 0..i {
                if (points[i] - points[j]).norm() < 1e-9 {
                    return Err(ObservationError::Layout(format!("features {j} and {i} coincide")));
                }
            }
        }
        Ok(FeatureLayout { points })
    }

    /// Center point followed by a regular hexagon around it.
    pub fn hexagon(cfg: &LayoutConfig) -> Result<Self, ObservationError> {
        let c = Vector3::new(cfg.center[0], cfg.center[1], 0.0);
        let mut points = vec![c];
        for k in 0..6 {
            let a = k as f64 * std::f64::consts::FRAC_PI_3;
            points.push(c + Vector3::new(a.cos(), a.sin(), 0.0) * cfg.radius);
        }
        FeatureLayout::new(points)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }
}

/// Camera plus layout: everything needed to render a feature frame.
#[derive(Clone, Debug)]
pub struct FeatureSensor {
    pub camera: CameraModel,
    pub layout: FeatureLayout,
}

impl FeatureSensor {
    pub fn new(camera: &CameraConfig, layout: &LayoutConfig) -> Result<Self, ObservationError> {
        Ok(FeatureSensor { camera: CameraModel::from_config(camera)?, layout: FeatureLayout::hexagon(layout)? })
    }

    pub fn frame(&self, state: &QuadState) -> [f64; FRAME_DIM] {
        let mut out = [0.0; FRAME_DIM];
        for (i, f) in self.layout.points().iter().enumerate() {
            let pr = project_feature(&self.camera, state, f);
            out[2 * i..2 * i + 2].copy_from_slice(&pr.uv);
        }
        out
    }

    pub fn frame_with_jacobian(&self, state: &QuadState) -> ([f64; FRAME_DIM], FrameJacobian) {
        let mut out = [0.0; FRAME_DIM];
        let mut jac = FrameJacobian::zeros();
        for (i, f) in self.layout.points().iter().enumerate() {
            let (pr, j) = project_feature_with_jacobian(&self.camera, state, f);
            out[2 * i..2 * i + 2].copy_from_slice(&pr.uv);
            jac.fixed_view_mut::<2, STATE_DIM>(2 * i, 0).copy_from(&j);
        }
        (out, jac)
    }
}

pub fn observe_state(state: &QuadState) -> [f64; STATE_OBS_DIM] {
    state.to_array()
}

/// Scales an action into `[-1, 1]` per component; hover maps to zero.
pub fn normalize_action(a: &Action, params: &DynamicsParams) -> [f64; 4] {
    let s = action_normalization(params);
    let u = a.to_array();
    [u[0] * s.0[0] + s.1[0], u[1] * s.0[1], u[2] * s.0[2], u[3] * s.0[3]]
}

/// `(scale, offset)` such that `normalized = u * scale + offset`.
pub fn action_normalization(params: &DynamicsParams) -> ([f64; 4], [f64; 4]) {
    let w = 1.0 / params.omega_max;
    ([2.0 / params.c_max, w, w, w], [-1.0, 0.0, 0.0, 0.0])
}

/// Ring buffers for the feature observation, newest entries first.
#[derive(Clone, Debug, Default)]
pub struct ObservationBuffer {
    frames: VecDeque<[f64; FRAME_DIM]>,
    actions: VecDeque<[f64; 4]>,
}

impl ObservationBuffer {
    pub fn new() -> Self {
        ObservationBuffer::default()
    }

    pub fn is_initialized(&self) -> bool {
        !self.frames.is_empty()
    }

    /// Episode start: `first` fills every frame slot, actions read as hover.
    pub fn reset(&mut self, first: [f64; FRAME_DIM]) {
        self.frames = std::iter::repeat_n(first, HISTORY_FRAMES).collect();
        self.actions = std::iter::repeat_n([0.0; 4], HISTORY_ACTIONS).collect();
    }

    pub fn push(&mut self, frame: [f64; FRAME_DIM], normalized_action: [f64; 4]) {
        self.frames.push_front(frame);
        self.frames.truncate(HISTORY_FRAMES);
        self.actions.push_front(normalized_action);
        self.actions.truncate(HISTORY_ACTIONS);
    }

    pub fn flatten(&self) -> [f64; FEATURE_OBS_DIM] {
        let mut out = [0.0; FEATURE_OBS_DIM];
        let mut k = 0;
        for f in &self.frames {
            out[k..k + FRAME_DIM].copy_from_slice(f);
            k += FRAME_DIM;
        }
        for a in &self.actions {
            out[k..k + 4].copy_from_slice(a);
            k += 4;
        }
        out
    }
}

/// Pushes the current frame (and the action that led to it, if any) and
/// returns the flattened observation. The first call after construction or
/// [`ObservationBuffer::reset`]-free start replicates the frame.
pub fn build_feature_observation(
    buffer: &mut ObservationBuffer,
    sensor: &FeatureSensor,
    state: &QuadState,
    last_action: Option<&Action>,
    params: &DynamicsParams,
) -> [f64; FEATURE_OBS_DIM] {
    let frame = sensor.frame(state);
    match (buffer.is_initialized(), last_action) {
        (true, Some(a)) => buffer.push(frame, normalize_action(a, params)),
        _ => buffer.reset(frame),
    }
    buffer.flatten()
}
