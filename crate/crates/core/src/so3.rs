//! Rotation helpers: skew-symmetric matrices, the Rodrigues exponential map and
//! its derivative with respect to the rotation vector.
//!
//! Matrices are flattened column-major whenever they are written into a
//! 9-vector (`vec(R)`), which is also nalgebra's storage order.

use nalgebra::{Matrix3, Vector3};

/// Rotation angles below this use Taylor series for the Rodrigues coefficients.
const SMALL_ANGLE: f64 = 1e-4;

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Coefficients `(a, b)` of `exp([phi]x) = I + a K + b K^2` with `K = [phi]x`,
/// i.e. `a = sin t / t` and `b = (1 - cos t) / t^2` for `t = |phi|`.
fn coefficients(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    }
}

/// `(a'(t)/t, b'(t)/t)`, the radial derivatives of the coefficients divided by t.
fn coefficient_slopes(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (-1.0 / 3.0 + t2 / 30.0, -1.0 / 12.0 + t2 / 180.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        ((theta * c - s) / (t2 * theta), (theta * s - 2.0 * (1.0 - c)) / (t2 * t2))
    }
}

/// Matrix exponential of `[phi]x`.
pub fn exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let k = hat(phi);
    let (a, b) = coefficients(phi.norm());
    Matrix3::identity() + k * a + k * k * b
}

/// Partial derivatives `d exp([phi]x) / d phi_i` for `i = 0, 1, 2`.
pub fn exp_derivatives(phi: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    let (a, b) = coefficients(theta);
    let (da, db) = coefficient_slopes(theta);
    let mut out = [Matrix3::zeros(); 3];
    for (i, d) in out.iter_mut().enumerate() {
        let ei = hat(&Vector3::ith(i, 1.0));
        *d = k * (da * phi[i]) + ei * a + k2 * (db * phi[i]) + (ei * k + k * ei) * b;
    }
    out
}

/// Nearest rotation matrix via Newton iterations on the polar factor.
///
/// Converges quadratically for inputs that are already close to orthonormal,
/// which is the only situation it is used in (drift removal after integration).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let mut q = *r;
    for _ in 0..3 {
        let err = (q.transpose() * q - Matrix3::identity()).norm();
        if err < 1e-15 {
            break;
        }
        q = q * 1.5 - q * q.transpose() * q * 0.5;
    }
    q
}

/// Rotation about a unit axis by `angle` radians.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    exp(&(axis.normalize() * angle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Truncated power series of the matrix exponential, independent of Rodrigues.
    fn series_exp(m: &Matrix3<f64>) -> Matrix3<f64> {
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for k in 1..40 {
            term = term * m / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn exp_matches_power_series() {
        for phi in
            [Vector3::new(0.0, 0.0, 0.02), Vector3::new(0.3, -1.2, 0.7), Vector3::new(1e-6, 2e-6, -3e-6), Vector3::new(2.5, 0.1, -0.4)]
        {
            let want = series_exp(&hat(&phi));
            assert_relative_eq!(exp(&phi), want, epsilon = 1e-13);
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for phi in [Vector3::new(0.3, -1.2, 0.7), Vector3::new(2e-5, -1e-5, 3e-5), Vector3::new(0.0, 0.0, 0.0)] {
            let d = exp_derivatives(&phi);
            for i in 0..3 {
                let mut plus = phi;
                let mut minus = phi;
                plus[i] += h;
                minus[i] -= h;
                let fd = (exp(&plus) - exp(&minus)) / (2.0 * h);
                assert_relative_eq!(d[i], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn orthonormalize_removes_drift() {
        let r = axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.8);
        let drifted = r + Matrix3::from_element(1e-7);
        let q = orthonormalize(&drifted);
        assert!((q.transpose() * q - Matrix3::identity()).norm() < 1e-14);
        assert!((q.determinant() - 1.0).abs() < 1e-14);
        assert!((q - r).norm() < 1e-6);
    }
}
