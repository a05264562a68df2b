//! Surge and orientation references from the stacked NSB velocity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::PathFrame;
use crate::rotations::{expm_so3, hat, minimal_rotation, Mat3, Vec3};
use crate::vehicle::AffineCoeffs;

/// Vectors shorter than this have no usable direction.
pub const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    /// Gain of the term rotating `v̄` onto `R_dᵀῡ` [rad/s].
    #[serde(default = "default_align")]
    pub k_align: f64,
    /// Surge-reference acceleration limit [m/s²] (full mode only).
    #[serde(default = "default_rate_limit")]
    pub u_rate_limit: f64,
    /// Time constant of the surge-reference filter [s] (full mode only).
    #[serde(default = "default_u_tau")]
    pub u_tau: f64,
    /// Below this body speed `R_d` is held [m/s].
    #[serde(default = "default_launch")]
    pub launch_speed: f64,
    /// Smallest accepted `det(I + A_ω)`.
    #[serde(default = "default_det_floor")]
    pub det_floor: f64,
}

fn default_align() -> f64 {
    1.0
}
fn default_rate_limit() -> f64 {
    0.5
}
fn default_u_tau() -> f64 {
    0.5
}
fn default_launch() -> f64 {
    1e-3
}
fn default_det_floor() -> f64 {
    1e-3
}

impl Default for ReferenceParams {
    fn default() -> Self {
        Self {
            k_align: default_align(),
            u_rate_limit: default_rate_limit(),
            u_tau: default_u_tau(),
            launch_speed: default_launch(),
            det_floor: default_det_floor(),
        }
    }
}

/// `(υ2max + √(Σ(v²+w²) + u_min²)) / (1 − k_NSB)`.
pub fn u_los(sway_heave: &[(f64, f64)], upsilon2_max: f64, u_min: f64, k_nsb: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&k_nsb) {
        return Err(Error::Config(vec![format!("k_NSB = {k_nsb} must lie in [0, 1)")]));
    }
    let s: f64 = sway_heave.iter().map(|(v, w)| v * v + w * w).sum();
    Ok((upsilon2_max + (s + u_min * u_min).sqrt()) / (1.0 - k_nsb))
}

/// ∂U_LOS/∂(v_i, w_i) contracted with the rates: returns U̇.
pub fn u_los_rate(sway_heave: &[(f64, f64)], rates: &[(f64, f64)], u_min: f64, k_nsb: f64) -> f64 {
    let s: f64 = sway_heave.iter().map(|(v, w)| v * v + w * w).sum();
    let num: f64 = sway_heave.iter().zip(rates).map(|((v, w), (vd, wd))| v * vd + w * wd).sum();
    num / ((s + u_min * u_min).sqrt() * (1.0 - k_nsb))
}

/// Surge reference and whether the speed condition holds.
pub fn surge_reference(upsilon: &Vec3, v: f64, w: f64, u_min: f64) -> (f64, bool) {
    let lateral = v * v + w * w;
    let total = upsilon.norm_squared();
    if total >= u_min * u_min + lateral {
        ((total - lateral).sqrt(), true)
    } else {
        (u_min, false)
    }
}

/// `x̄ × d/dt x̄ = (x × ẋ)/‖x‖²`.
pub fn pseudo_angular_velocity(x: &Vec3, x_dot: &Vec3) -> Result<Vec3> {
    let n2 = x.norm_squared();
    if !(n2.sqrt() > DEGENERATE_NORM) {
        return Err(Error::Domain("pseudo-angular velocity of a near-zero vector"));
    }
    Ok(x.cross(x_dot) / n2)
}

/// `e_p = e₁ + κ × p_f`.
pub fn e_p(frame: &PathFrame, p_f: &Vec3) -> Vec3 {
    Vec3::x() + frame.kappa.cross(p_f)
}

/// On-manifold NSB velocity `U R_p e_p`.
pub fn nominal_nsb_velocity(frame: &PathFrame, p_f: &Vec3, u_los: f64) -> Vec3 {
    frame.r * e_p(frame, p_f) * u_los
}

/// Time derivative of [`nominal_nsb_velocity`] with `ξ̇ = U/‖∂p/∂ξ‖`:
/// `U̇ R_p e_p + U² R_p (κ × e_p + (ι/‖∂p/∂ξ‖) × p_f)`.
pub fn nominal_nsb_velocity_derivative(frame: &PathFrame, p_f: &Vec3, u_los: f64, u_los_dot: f64) -> Vec3 {
    let e = e_p(frame, p_f);
    frame.r * (e * u_los_dot + (frame.kappa.cross(&e) + (frame.iota / frame.speed).cross(p_f)) * (u_los * u_los))
}

/// How the surge row of `v̇` is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurgeRow {
    /// `u = √(‖υ‖² − v² − w²)` tracked exactly: `u̇ = (υᵀυ̇ − v v̇ − w ẇ)/u`.
    Nominal { upsilon_dot_upsilon: f64 },
    /// `u̇` given.
    Known(f64),
}

/// `ω_v = A_ω ω + ω_0` and the raw pieces it is built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineLoop {
    pub a_hat: Mat3,
    pub omega0_hat: Vec3,
    pub a: Mat3,
    pub omega0: Vec3,
    /// det(I + A_ω).
    pub det: f64,
}

impl AffineLoop {
    /// `v̇` for a given angular velocity.
    pub fn v_dot(&self, omega: &Vec3) -> Vec3 {
        self.a_hat * omega + self.omega0_hat
    }

    pub fn omega_v(&self, omega: &Vec3) -> Vec3 {
        self.a * omega + self.omega0
    }
}

/// `Â_ω` and `ω̂_0` of `v̇ = Â_ω ω + ω̂_0` for body velocity `v` and body current `vc`.
pub fn affine_parts(coeffs: &AffineCoeffs, v: &Vec3, vc: &Vec3, surge: SurgeRow) -> Result<(Mat3, Vec3)> {
    let (u, sv, hv) = (v.x, v.y, v.z);
    let (ur, vr, wr) = (u - vc.x, sv - vc.y, hv - vc.z);
    let c = coeffs;
    let row_v = [vc.z + c.z_v1 * wr, 0.0, c.x_v0 + c.x_v1 * ur - vc.x];
    let row_w = [c.z_w1 * vr - vc.y, c.x_w0 + c.x_w1 * ur + vc.x, 0.0];
    let o_v = (c.y_v0 + c.y_v1 * ur) * vr + c.z_v0 * wr;
    let o_w = (c.y_w0 + c.y_w1 * ur) * wr + c.z_w0 * vr;
    let (row_u, o_u) = match surge {
        SurgeRow::Nominal { upsilon_dot_upsilon } => {
            if !(u.abs() > DEGENERATE_NORM) {
                return Err(Error::Domain("surge row undefined at zero surge"));
            }
            (
                [
                    -(sv * row_v[0] + hv * row_w[0]) / u,
                    -(sv * row_v[1] + hv * row_w[1]) / u,
                    -(sv * row_v[2] + hv * row_w[2]) / u,
                ],
                (upsilon_dot_upsilon - sv * o_v - hv * o_w) / u,
            )
        }
        SurgeRow::Known(u_dot) => ([0.0; 3], u_dot),
    };
    let a_hat = Mat3::new(
        row_u[0], row_u[1], row_u[2], row_v[0], row_v[1], row_v[2], row_w[0], row_w[1], row_w[2],
    );
    Ok((a_hat, Vec3::new(o_u, o_v, o_w)))
}

/// Affine form of `ω_v` in the vehicle angular velocity.
pub fn affine_loop(coeffs: &AffineCoeffs, v: &Vec3, vc: &Vec3, surge: SurgeRow, u_min: f64) -> Result<AffineLoop> {
    if v.x < u_min {
        return Err(Error::Domain("affine loop needs u ≥ u_min"));
    }
    let (a_hat, omega0_hat) = affine_parts(coeffs, v, vc, surge)?;
    let n2 = v.norm_squared();
    let a = hat(v) * a_hat / n2;
    let omega0 = v.cross(&omega0_hat) / n2;
    let det = (Mat3::identity() + a).determinant();
    Ok(AffineLoop { a_hat, omega0_hat, a, omega0, det })
}

/// Solves `(I + A)ω_d = R_dᵀω_υ − ω_0 − A f` so that
/// `ω_d + ω_v(ω_d + f) = R_dᵀω_υ`.
pub fn desired_angular_velocity(
    lp: &AffineLoop,
    r_d: &Mat3,
    omega_ups: &Vec3,
    feedback: &Vec3,
    det_floor: f64,
) -> Result<Vec3> {
    if !(lp.det > det_floor) {
        return Err(Error::LoopUnresolvable(format!("det(I + A) = {:.3e}", lp.det)));
    }
    let rhs = r_d.transpose() * omega_ups - lp.omega0 - lp.a * feedback;
    (Mat3::identity() + lp.a)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::LoopUnresolvable("singular I + A".into()))
}

/// `‖(ω_d + ω_v − R_dᵀω_υ) × v̄‖` with `ω_v` evaluated at the vehicle rate `omega`.
pub fn loop_residual(lp: &AffineLoop, r_d: &Mat3, omega_ups: &Vec3, omega_d: &Vec3, omega: &Vec3, v: &Vec3) -> f64 {
    (omega_d + lp.omega_v(omega) - r_d.transpose() * omega_ups).cross(&v.normalize()).norm()
}

/// Rotates `v̄` towards `R_dᵀῡ`.
pub fn alignment_feedback(r_d: &Mat3, v: &Vec3, upsilon: &Vec3, k_align: f64) -> Vec3 {
    let (nv, nu) = (v.norm(), upsilon.norm());
    if nv <= DEGENERATE_NORM || nu <= DEGENERATE_NORM {
        return Vec3::zeros();
    }
    (v / nv).cross(&(r_d.transpose() * upsilon / nu)) * k_align
}

pub fn step_reference_orientation(r_d: &Mat3, omega_d: &Vec3, dt: f64) -> Mat3 {
    r_d * expm_so3(&(omega_d * dt))
}

/// `Q R` with `Q` the minimal rotation taking `R v̄` onto `ῡ`, so `R_d v̄ = ῡ`.
///
/// Antiparallel directions rotate by π about the body y axis.
pub fn initialize_reference(r: &Mat3, v: &Vec3, upsilon: &Vec3) -> Result<Mat3> {
    let q = minimal_rotation(&(r * v), upsilon, &(r * Vec3::y()))?;
    Ok(q * r)
}

/// Rate of the filtered surge reference: `a tanh((target − u_d)/(a τ))`.
pub fn surge_reference_rate(target: f64, u_d: f64, params: &ReferenceParams) -> f64 {
    let a = params.u_rate_limit;
    a * ((target - u_d) / (a * params.u_tau)).tanh()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::PathSpec;
    use crate::rotations::{angle_between, logm_so3};
    use crate::vehicle::ModelParams;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn u_los_examples() {
        assert!((u_los(&[(0.0, 0.0); 3], 0.5, 0.1, 0.2).unwrap() - 0.75).abs() < 1e-15);
        assert!(u_los(&[(0.0, 0.0)], 0.5, 0.1, 0.0).unwrap() >= 0.6);
        assert!(u_los(&[(0.0, 0.0)], 0.5, 0.1, 1.0).is_err());
        let a = u_los(&[(0.1, 0.0), (0.0, 0.2)], 0.5, 0.1, 0.3).unwrap();
        let b = u_los(&[(0.1 + 1e-6, 0.0), (0.0, 0.2)], 0.5, 0.1, 0.3).unwrap();
        assert!(b > a);
    }

    #[test]
    fn u_los_rate_matches_fd() {
        let vw = [(0.1, -0.2), (0.05, 0.3)];
        let rates = [(0.4, 0.1), (-0.2, 0.7)];
        let h = 1e-6;
        let plus: Vec<(f64, f64)> = vw.iter().zip(&rates).map(|((v, w), (a, b))| (v + h * a, w + h * b)).collect();
        let minus: Vec<(f64, f64)> = vw.iter().zip(&rates).map(|((v, w), (a, b))| (v - h * a, w - h * b)).collect();
        let fd = (u_los(&plus, 0.5, 0.1, 0.3).unwrap() - u_los(&minus, 0.5, 0.1, 0.3).unwrap()) / (2.0 * h);
        assert!((u_los_rate(&vw, &rates, 0.1, 0.3) - fd).abs() < 1e-8);
    }

    #[test]
    fn surge_reference_examples() {
        let (u, ok) = surge_reference(&Vec3::new(1.0, 0.0, 0.0), 0.6, 0.0, 0.1);
        assert!(ok && (u - 0.8).abs() < 1e-15);
        let (u, ok) = surge_reference(&Vec3::new(0.3, 0.0, 0.0), 0.6, 0.0, 0.1);
        assert!(!ok && u == 0.1);
    }

    #[test]
    fn pseudo_angular_examples() {
        assert_eq!(pseudo_angular_velocity(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(2.0, 4.0, 6.0)).unwrap(), Vec3::zeros());
        assert_eq!(pseudo_angular_velocity(&Vec3::x(), &Vec3::y()).unwrap(), Vec3::z());
        assert!(pseudo_angular_velocity(&Vec3::zeros(), &Vec3::x()).is_err());
    }

    #[test]
    fn nominal_derivative_examples() {
        let line = PathSpec::straight_line(Vec3::zeros(), Vec3::x()).evaluate(0.0).unwrap();
        let pf = Vec3::new(0.0, 10.0, 5.0);
        assert_eq!(nominal_nsb_velocity_derivative(&line, &pf, 1.5, 0.0), Vec3::zeros());
        assert_eq!(e_p(&line, &Vec3::zeros()), Vec3::x());
        // Finite-difference oracle along the path at constant U.
        let path = PathSpec::spiral(Vec3::new(0.0, -40.0, 25.0), 40.0, 20.0, PI / 100.0);
        let (u, xi) = (1.6, 37.0);
        let f = path.evaluate(xi).unwrap();
        let h = 1e-4;
        let at = |x: f64| nominal_nsb_velocity(&path.evaluate(x).unwrap(), &pf, u);
        let fd = (at(xi + h) - at(xi - h)) / (2.0 * h) * (u / f.speed);
        let an = nominal_nsb_velocity_derivative(&f, &pf, u, 0.0);
        assert!((an - fd).norm() < 1e-3 * an.norm(), "{an:?} vs {fd:?}");
        // U̇ term
        let an2 = nominal_nsb_velocity_derivative(&f, &pf, u, 0.3);
        assert!((an2 - an - f.r * e_p(&f, &pf) * 0.3).norm() < 1e-15);
    }

    fn coeffs() -> AffineCoeffs {
        ModelParams::torpedo().affine()
    }

    #[test]
    fn affine_parts_reproduce_dynamics() {
        let c = coeffs();
        let v = Vec3::new(1.3, 0.1, -0.2);
        let vc = Vec3::new(0.05, -0.1, 0.02);
        let om = Vec3::new(0.1, -0.2, 0.3);
        let (a_hat, o) = affine_parts(&c, &v, &vc, SurgeRow::Known(0.7)).unwrap();
        let vd = a_hat * om + o;
        let (sv, hv) = crate::vehicle::underactuated_rates(&c, v.x, v.y, v.z, &om, &vc);
        assert!((vd - Vec3::new(0.7, sv, hv)).norm() < 1e-15);
        // Nominal surge row keeps ‖v‖ consistent with υᵀυ̇.
        let ud = 0.42;
        let (a_hat, o) = affine_parts(&c, &v, &vc, SurgeRow::Nominal { upsilon_dot_upsilon: ud }).unwrap();
        let vd = a_hat * om + o;
        assert!((v.dot(&vd) - ud).abs() < 1e-14);
    }

    #[test]
    fn affine_loop_structure() {
        let zero = AffineCoeffs::default();
        let v = Vec3::new(1.5, 0.0, 0.0);
        let lp = affine_loop(&zero, &v, &Vec3::zeros(), SurgeRow::Nominal { upsilon_dot_upsilon: 0.3 }, 0.1).unwrap();
        assert!(lp.omega0.dot(&v).abs() < 1e-15);
        assert_eq!(lp.a, Mat3::zeros());
        assert!((lp.det - 1.0).abs() < 1e-15);
        assert!(affine_loop(&zero, &Vec3::new(0.05, 0.0, 0.0), &Vec3::zeros(), SurgeRow::Known(0.0), 0.1).is_err());
        // Determinant agrees with a direct evaluation.
        let v = Vec3::new(0.8, 0.2, -0.15);
        let vc = Vec3::new(0.03, 0.1, -0.05);
        let lp = affine_loop(&coeffs(), &v, &vc, SurgeRow::Nominal { upsilon_dot_upsilon: 0.0 }, 0.1).unwrap();
        let direct = (Mat3::identity() + hat(&v) * lp.a_hat / v.norm_squared()).determinant();
        assert!((lp.det - direct).abs() < 1e-14);
    }

    #[test]
    fn desired_angular_velocity_examples() {
        let lp0 = AffineLoop { a_hat: Mat3::zeros(), omega0_hat: Vec3::zeros(), a: Mat3::zeros(), omega0: Vec3::zeros(), det: 1.0 };
        let rd = expm_so3(&Vec3::new(0.1, 0.2, -0.3));
        let wu = Vec3::new(0.01, -0.02, 0.03);
        let wd = desired_angular_velocity(&lp0, &rd, &wu, &Vec3::zeros(), 1e-3).unwrap();
        assert!((wd - rd.transpose() * wu).norm() < 1e-16);
        let v = Vec3::new(1.1, 0.15, -0.1);
        let vc = Vec3::new(0.0, 0.12, 0.04);
        let lp = affine_loop(&coeffs(), &v, &vc, SurgeRow::Nominal { upsilon_dot_upsilon: 0.05 }, 0.1).unwrap();
        let f = Vec3::new(0.01, 0.0, -0.02);
        let wd = desired_angular_velocity(&lp, &rd, &wu, &f, 1e-3).unwrap();
        assert!(loop_residual(&lp, &rd, &wu, &wd, &(wd + f), &v) < 1e-12);
        let bad = AffineLoop { det: 1e-4, ..lp };
        assert!(matches!(desired_angular_velocity(&bad, &rd, &wu, &f, 1e-3), Err(Error::LoopUnresolvable(_))));
    }

    #[test]
    fn reference_orientation_steps() {
        let rd = expm_so3(&Vec3::new(0.3, 0.0, 0.1));
        assert_eq!(step_reference_orientation(&rd, &Vec3::zeros(), 0.1), rd);
        let q = step_reference_orientation(&Mat3::identity(), &Vec3::new(0.0, 0.0, FRAC_PI_2), 1.0);
        assert!((q * Vec3::x() - Vec3::y()).norm() < 1e-15);
        let w = Vec3::new(0.2, -0.1, 0.4);
        let err = |dt: f64| (step_reference_orientation(&rd, &w, dt) - rd * (Mat3::identity() + hat(&w) * dt)).norm();
        assert!(err(1e-3) / err(1e-2) < 0.011);
    }

    #[test]
    fn initialize_reference_examples() {
        let i = Mat3::identity();
        assert_eq!(initialize_reference(&i, &Vec3::x(), &Vec3::x()).unwrap(), i);
        let q = initialize_reference(&i, &Vec3::x(), &Vec3::y()).unwrap();
        assert!((q - expm_so3(&Vec3::new(0.0, 0.0, FRAC_PI_2))).norm() < 1e-15);
        let flip = initialize_reference(&i, &Vec3::x(), &-Vec3::x()).unwrap();
        assert!((logm_so3(&flip) - Vec3::new(0.0, PI, 0.0)).norm() < 1e-9 || (logm_so3(&flip) + Vec3::new(0.0, PI, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn surge_filter_is_rate_limited() {
        let p = ReferenceParams::default();
        assert!(surge_reference_rate(10.0, 0.0, &p) <= p.u_rate_limit);
        assert!(surge_reference_rate(-10.0, 0.0, &p) >= -p.u_rate_limit);
        assert_eq!(surge_reference_rate(1.0, 1.0, &p), 0.0);
    }

    proptest! {
        #[test]
        fn pseudo_angular_orthogonal(x in proptest::array::uniform3(-10.0f64..10.0), y in proptest::array::uniform3(-10.0f64..10.0)) {
            let x = Vec3::from(x);
            prop_assume!(x.norm() > 1e-3);
            let w = pseudo_angular_velocity(&x, &Vec3::from(y)).unwrap();
            prop_assert!(w.dot(&x).abs() < 1e-12 * (1.0 + x.norm() * Vec3::from(y).norm()));
        }

        #[test]
        fn initialize_maps_direction(a in proptest::array::uniform3(-1.0f64..1.0), b in proptest::array::uniform3(-1.0f64..1.0),
                                     rv in proptest::array::uniform3(-2.0f64..2.0)) {
            let (a, b) = (Vec3::from(a), Vec3::from(b));
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let r = expm_so3(&Vec3::from(rv));
            let rd = initialize_reference(&r, &a, &b).unwrap();
            prop_assert!((rd * a.normalize() - b.normalize()).norm() < 1e-12);
            let angle = logm_so3(&(rd * r.transpose())).norm();
            let expect = angle_between(&(r * a), &b).unwrap();
            prop_assume!(expect < PI - 1e-6);
            prop_assert!((angle - expect).abs() < 1e-9);
        }
    }
}
