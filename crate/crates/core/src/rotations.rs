//! SO(3) utilities on plain nalgebra matrices.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-4;
/// Distance from π at which `logm_so3` switches to the symmetric-part branch.
pub const NEAR_PI: f64 = 1e-6;

/// Skew-symmetric matrix with `hat(v) * w == v.cross(&w)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// `(sin θ / θ, (1 − cos θ) / θ²)` with series limits near zero.
fn rodrigues_coeffs(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    }
}

/// Exponential map from an axis-angle vector.
pub fn expm_so3(delta: &Vec3) -> Mat3 {
    let (s, c) = rodrigues_coeffs(delta.norm());
    let k = hat(delta);
    Mat3::identity() + k * s + k * k * c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Log {
    pub delta: Vec3,
    /// The symmetric-part branch was used (angle within [`NEAR_PI`] of π).
    pub near_pi: bool,
}

/// Principal logarithm (‖δ‖ ≤ π) with a near-π status flag.
pub fn logm_so3_checked(r: &Mat3) -> Log {
    let w = vee(r);
    let sin_t = w.norm();
    let cos_t = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_t.atan2(cos_t);
    if theta < SMALL_ANGLE {
        return Log { delta: w * (1.0 + theta * theta / 6.0), near_pi: false };
    }
    if std::f64::consts::PI - theta > NEAR_PI {
        return Log { delta: w * (theta / sin_t), near_pi: false };
    }
    // Symmetric part is cos θ·I + (1 − cos θ)·a aᵀ.
    let sym = (r + r.transpose()) * 0.5;
    let aat = (sym - Mat3::identity() * cos_t) / (1.0 - cos_t);
    let k = (0..3)
        .max_by(|&i, &j| aat[(i, i)].total_cmp(&aat[(j, j)]))
        .unwrap_or(0);
    let mut axis: Vec3 = aat.column(k).into();
    axis /= aat[(k, k)].max(f64::MIN_POSITIVE).sqrt();
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    Log { delta: axis * theta, near_pi: true }
}

pub fn logm_so3(r: &Mat3) -> Vec3 {
    logm_so3_checked(r).delta
}

/// Angle in [0, π] between two nonzero vectors.
pub fn angle_between(a: &Vec3, b: &Vec3) -> Result<f64> {
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return Err(Error::Domain("angle between zero-length vectors"));
    }
    Ok(a.cross(b).norm().atan2(a.dot(b)))
}

/// Planar angle in [0, π] between two nonzero 2-vectors.
pub fn angle_between_2d(a: &[f64; 2], b: &[f64; 2]) -> Result<f64> {
    angle_between(&Vec3::new(a[0], a[1], 0.0), &Vec3::new(b[0], b[1], 0.0))
}

/// Nearest rotation matrix (polar projection via SVD).
pub fn renormalize(m: &Mat3) -> Result<Mat3> {
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Integration("SVD failed during renormalization".into())),
    };
    let r = u * vt;
    if r.determinant() <= 0.0 {
        return Err(Error::Integration("reflection after orthonormal projection".into()));
    }
    if (r - m).norm() > 0.1 {
        return Err(Error::Integration(format!(
            "matrix is {:.3e} away from SO(3)",
            (r - m).norm()
        )));
    }
    Ok(r)
}

/// ‖RᵀR − I‖_F.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    orthonormality_error(r) < tol && (r.determinant() - 1.0).abs() < tol
}

/// Minimal-angle rotation taking the direction of `a` onto the direction of `b`.
///
/// For antiparallel inputs the rotation is by π about `fallback_axis`
/// (projected orthogonal to `a`).
pub fn minimal_rotation(a: &Vec3, b: &Vec3, fallback_axis: &Vec3) -> Result<Mat3> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("minimal rotation between zero-length vectors"));
    }
    let a = a / na;
    let b = b / nb;
    let axis = a.cross(&b);
    let s = axis.norm();
    let c = a.dot(&b);
    let theta = s.atan2(c);
    if std::f64::consts::PI - theta < 1e-9 {
        let mut k = fallback_axis - a * a.dot(fallback_axis);
        if k.norm() < 1e-9 {
            k = a.cross(&Vec3::x());
            if k.norm() < 1e-9 {
                k = a.cross(&Vec3::y());
            }
        }
        return Ok(expm_so3(&(k.normalize() * std::f64::consts::PI)));
    }
    if s < 1e-300 {
        return Ok(Mat3::identity());
    }
    Ok(expm_so3(&(axis * (theta / s))))
}
