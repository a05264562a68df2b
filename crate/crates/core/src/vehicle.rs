//! 6DOF underactuated vehicle model in NED axes (z down).
//!
//! Structure (port-starboard and top-bottom symmetric torpedo):
//! - `M = blockdiag(diag(m11, m22, m33), I_o)`
//! - `C(ν) = [[0, −S(M11 v)], [−S(M11 v), −S(I_o ω)]]`
//! - linear `D` with sway coupled only to yaw rate and heave only to pitch rate
//! - `g(R) = [0; −W·(r_g × Rᵀe₃)]`, neutral buoyancy, centre of buoyancy at the origin
//!
//! Eliminating the sway and heave rows gives the affine coefficients
//! `X_v = −(d26 + m11 u_r)/m22`, `Y_v = −d22/m22`, `Z_v = (m33/m22) p`,
//! `X_w = (m11 u_r − d35)/m33`, `Y_w = −d33/m33`, `Z_w = −(m22/m33) p`.

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotations::{hat, Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Inertial position [m].
    pub p: Vec3,
    /// Body-to-inertial rotation.
    pub r: Mat3,
    /// Body linear velocity (u, v, w) [m/s].
    pub v: Vec3,
    /// Body angular velocity (p, q, r) [rad/s].
    pub w: Vec3,
}

impl VehicleState {
    pub fn new(p: Vec3, r: Mat3, v: Vec3, w: Vec3) -> Self {
        Self { p, r, v, w }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.r.iter()).chain(self.v.iter()).chain(self.w.iter()).all(|x| x.is_finite())
    }
}

/// Coefficients of the affine sway/heave form.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineCoeffs {
    pub x_v0: f64,
    pub x_v1: f64,
    pub y_v0: f64,
    pub y_v1: f64,
    pub z_v0: f64,
    pub z_v1: f64,
    pub x_w0: f64,
    pub x_w1: f64,
    pub y_w0: f64,
    pub y_w1: f64,
    pub z_w0: f64,
    pub z_w1: f64,
}

impl AffineCoeffs {
    pub fn x_v(&self, ur: f64) -> f64 {
        self.x_v0 + self.x_v1 * ur
    }
    pub fn y_v(&self, ur: f64) -> f64 {
        self.y_v0 + self.y_v1 * ur
    }
    pub fn z_v(&self, p: f64) -> f64 {
        self.z_v0 + self.z_v1 * p
    }
    pub fn x_w(&self, ur: f64) -> f64 {
        self.x_w0 + self.x_w1 * ur
    }
    pub fn y_w(&self, ur: f64) -> f64 {
        self.y_w0 + self.y_w1 * ur
    }
    pub fn z_w(&self, p: f64) -> f64 {
        self.z_w0 + self.z_w1 * p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Linear mass plus added mass `(m11, m22, m33)` [kg].
    pub mass: [f64; 3],
    /// Rotational inertia plus added inertia (symmetric) [kg·m²].
    pub inertia: [[f64; 3]; 3],
    /// Linear damping `(d11, d22, d33)`.
    pub damping_linear: [f64; 3],
    /// Rotational damping block.
    pub damping_angular: [[f64; 3]; 3],
    /// Sway–yaw coupling `(d26, d62)`.
    pub sway_yaw: [f64; 2],
    /// Heave–pitch coupling `(d35, d53)`.
    pub heave_pitch: [f64; 2],
    /// Weight, equal to buoyancy [N].
    pub weight: f64,
    /// Vertical distance of the centre of gravity below the centre of buoyancy [m].
    pub cg_offset: f64,
    /// Minimum manoeuvring surge [m/s].
    pub u_min: f64,
    /// Surge reference cap [m/s].
    pub u_max: f64,
    /// Replaces the derived affine coefficients (mismatch experiments only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine_override: Option<AffineCoeffs>,
}

impl ModelParams {
    /// Default torpedo-shaped vehicle at the 18 kg scale.
    pub fn torpedo() -> Self {
        Self {
            mass: [19.0, 37.0, 37.0],
            inertia: [[0.1, 0.0, 0.0], [0.0, 3.5, 0.0], [0.0, 0.0, 3.5]],
            damping_linear: [10.0, 30.0, 30.0],
            damping_angular: [[0.5, 0.0, 0.0], [0.0, 8.0, 0.0], [0.0, 0.0, 8.0]],
            sway_yaw: [-5.0, 5.0],
            heave_pitch: [5.0, -5.0],
            weight: 18.0 * 9.81,
            cg_offset: 0.01,
            u_min: 0.1,
            u_max: 3.0,
            affine_override: None,
        }
    }

    pub fn mass_matrix(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        for i in 0..3 {
            m[(i, i)] = self.mass[i];
            for j in 0..3 {
                m[(3 + i, 3 + j)] = self.inertia[i][j];
            }
        }
        m
    }

    pub fn damping_matrix(&self) -> Matrix6<f64> {
        let mut d = Matrix6::zeros();
        for i in 0..3 {
            d[(i, i)] = self.damping_linear[i];
            for j in 0..3 {
                d[(3 + i, 3 + j)] = self.damping_angular[i][j];
            }
        }
        d[(1, 5)] = self.sway_yaw[0];
        d[(5, 1)] = self.sway_yaw[1];
        d[(2, 4)] = self.heave_pitch[0];
        d[(4, 2)] = self.heave_pitch[1];
        d
    }

    fn inertia_matrix(&self) -> Mat3 {
        Mat3::from_fn(|i, j| self.inertia[i][j])
    }

    /// Affine coefficients derived from `M` and `D` (or the override).
    pub fn affine(&self) -> AffineCoeffs {
        self.affine_override.unwrap_or_else(|| self.derived_affine())
    }

    pub fn derived_affine(&self) -> AffineCoeffs {
        let [m11, m22, m33] = self.mass;
        AffineCoeffs {
            x_v0: -self.sway_yaw[0] / m22,
            x_v1: -m11 / m22,
            y_v0: -self.damping_linear[1] / m22,
            y_v1: 0.0,
            z_v0: 0.0,
            z_v1: m33 / m22,
            x_w0: -self.heave_pitch[0] / m33,
            x_w1: m11 / m33,
            y_w0: -self.damping_linear[2] / m33,
            y_w1: 0.0,
            z_w0: 0.0,
            z_w1: -m22 / m33,
        }
    }

    /// Scales every damping coefficient.
    pub fn scale_damping(&mut self, k: f64) {
        for x in self.damping_linear.iter_mut() {
            *x *= k;
        }
        for row in self.damping_angular.iter_mut() {
            for x in row.iter_mut() {
                *x *= k;
            }
        }
        for x in self.sway_yaw.iter_mut().chain(self.heave_pitch.iter_mut()) {
            *x *= k;
        }
    }

    /// Field-level validation messages (empty when valid).
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let scalars = [self.weight, self.cg_offset, self.u_min, self.u_max];
        let mut all = self
            .mass
            .iter()
            .chain(self.inertia.iter().flatten())
            .chain(self.damping_linear.iter())
            .chain(self.damping_angular.iter().flatten())
            .chain(self.sway_yaw.iter())
            .chain(self.heave_pitch.iter())
            .chain(scalars.iter());
        if all.any(|x| !x.is_finite()) {
            errs.push("model: non-finite parameter".into());
            return errs;
        }
        let m = self.mass_matrix();
        if (m - m.transpose()).norm() > 1e-12 {
            errs.push("model.inertia: mass matrix is not symmetric".into());
        } else if SymmetricEigen::new(m).eigenvalues.min() <= 0.0 {
            errs.push("model: mass matrix is not positive definite".into());
        }
        let d = self.damping_matrix();
        let dsym = (d + d.transpose()) * 0.5;
        if SymmetricEigen::new(dsym).eigenvalues.min() < 0.0 {
            errs.push("model: damping matrix has an indefinite symmetric part".into());
        }
        let a = self.affine();
        if a.y_v0 >= 0.0 || a.y_w0 >= 0.0 {
            errs.push("model: sway/heave damping must be dissipative".into());
        }
        if self.weight < 0.0 || self.cg_offset < 0.0 {
            errs.push("model: weight and cg_offset must be non-negative".into());
        }
        if self.u_min <= 0.0 {
            errs.push("model.u_min: must be positive".into());
        }
        if self.u_max <= self.u_min {
            errs.push("model.u_max: must exceed u_min".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OceanCurrent {
    /// Constant inertial current [m/s].
    pub v_c: Vec3,
}

/// Current in body axes, `Rᵀ V_c`.
pub fn body_current(r: &Mat3, current: &OceanCurrent) -> Vec3 {
    r.transpose() * current.v_c
}

/// Time derivative of the body-axes current, `v_c × ω`.
pub fn current_body_derivative(v_c: &Vec3, w: &Vec3) -> Vec3 {
    v_c.cross(w)
}

/// Actuation in the acceleration space where sway and heave entries vanish.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneralizedForce {
    pub f_u: f64,
    pub t_p: f64,
    pub t_q: f64,
    pub t_r: f64,
}

impl GeneralizedForce {
    /// `M⁻¹ B f`.
    pub fn accel(&self) -> Vector6<f64> {
        Vector6::new(self.f_u, 0.0, 0.0, self.t_p, self.t_q, self.t_r)
    }
}

pub fn allocate(f_u: f64, t_p: f64, t_q: f64, t_r: f64) -> GeneralizedForce {
    GeneralizedForce { f_u, t_p, t_q, t_r }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub p_dot: Vec3,
    /// Body rate generating `Ṙ = R·hat(ω)`.
    pub omega: Vec3,
    pub v_dot: Vec3,
    pub w_dot: Vec3,
}

pub fn coriolis(params: &ModelParams, nu: &Vector6<f64>) -> Matrix6<f64> {
    let v = nu.fixed_rows::<3>(0).into_owned();
    let w = nu.fixed_rows::<3>(3).into_owned();
    let m11v = Vec3::new(params.mass[0] * v.x, params.mass[1] * v.y, params.mass[2] * v.z);
    let s1 = -hat(&m11v);
    let s2 = -hat(&(params.inertia_matrix() * w));
    let mut c = Matrix6::zeros();
    c.fixed_view_mut::<3, 3>(0, 3).copy_from(&s1);
    c.fixed_view_mut::<3, 3>(3, 0).copy_from(&s1);
    c.fixed_view_mut::<3, 3>(3, 3).copy_from(&s2);
    c
}

pub fn restoring(params: &ModelParams, r: &Mat3) -> Vector6<f64> {
    let rg = Vec3::new(0.0, 0.0, params.cg_offset);
    let m = -rg.cross(&(r.transpose() * Vec3::z())) * params.weight;
    Vector6::new(0.0, 0.0, 0.0, m.x, m.y, m.z)
}

/// Acceleration `ν̇` without actuation, i.e. the drift of the rigid-body model.
pub fn drift_accel(state: &VehicleState, current: &OceanCurrent, params: &ModelParams) -> Vector6<f64> {
    let vc = body_current(&state.r, current);
    let vr = state.v - vc;
    let nu_r = Vector6::new(vr.x, vr.y, vr.z, state.w.x, state.w.y, state.w.z);
    let m = params.mass_matrix();
    let rhs = -(coriolis(params, &nu_r) + params.damping_matrix()) * nu_r - restoring(params, &state.r);
    let minv = m.try_inverse().unwrap_or_else(Matrix6::zeros);
    let mut acc = minv * rhs;
    let vc_dot = current_body_derivative(&vc, &state.w);
    acc[0] += vc_dot.x;
    acc[1] += vc_dot.y;
    acc[2] += vc_dot.z;
    acc
}

pub fn dynamics_derivative(
    state: &VehicleState,
    force: &GeneralizedForce,
    current: &OceanCurrent,
    params: &ModelParams,
) -> Result<StateDerivative> {
    if !state.is_finite() {
        return Err(Error::Integration("non-finite vehicle state".into()));
    }
    let acc = drift_accel(state, current, params) + force.accel();
    Ok(StateDerivative {
        p_dot: state.r * state.v,
        omega: state.w,
        v_dot: acc.fixed_rows::<3>(0).into_owned(),
        w_dot: acc.fixed_rows::<3>(3).into_owned(),
    })
}

/// Sway and heave accelerations from the affine form; any angular rate may be supplied.
pub fn underactuated_rates(a: &AffineCoeffs, u: f64, v: f64, w: f64, omega: &Vec3, vc: &Vec3) -> (f64, f64) {
    let (ur, vr, wr) = (u - vc.x, v - vc.y, w - vc.z);
    let (p, q, r) = (omega.x, omega.y, omega.z);
    let v_dot = a.x_v(ur) * r + a.y_v(ur) * vr + a.z_v(p) * wr + vc.z * p - vc.x * r;
    let w_dot = a.x_w(ur) * q + a.y_w(ur) * wr + a.z_w(p) * vr + vc.x * q - vc.y * p;
    (v_dot, w_dot)
}

pub fn underactuated_derivative(state: &VehicleState, current: &OceanCurrent, params: &ModelParams) -> (f64, f64) {
    let vc = body_current(&state.r, current);
    underactuated_rates(&params.affine(), state.v.x, state.v.y, state.v.z, &state.w, &vc)
}

/// Kinetic energy of the relative motion, `½ ν_rᵀ M ν_r`.
pub fn kinetic_energy(state: &VehicleState, current: &OceanCurrent, params: &ModelParams) -> f64 {
    let vr = state.v - body_current(&state.r, current);
    let nu = Vector6::new(vr.x, vr.y, vr.z, state.w.x, state.w.y, state.w.z);
    0.5 * nu.dot(&(params.mass_matrix() * nu))
}

/// Potential of the restoring moment, `W h (1 − R₃₃)`.
pub fn restoring_potential(state: &VehicleState, params: &ModelParams) -> f64 {
    params.weight * params.cg_offset * (1.0 - state.r[(2, 2)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotations::expm_so3;
    use std::f64::consts::FRAC_PI_2;

    fn rest() -> VehicleState {
        VehicleState::new(Vec3::zeros(), Mat3::identity(), Vec3::zeros(), Vec3::zeros())
    }

    #[test]
    fn body_current_examples() {
        let c = OceanCurrent { v_c: Vec3::new(0.0, 0.15, 0.05) };
        assert_eq!(body_current(&Mat3::identity(), &c), Vec3::new(0.0, 0.15, 0.05));
        let r = expm_so3(&Vec3::new(0.3, -1.0, 2.0));
        assert_eq!(body_current(&r, &OceanCurrent::default()), Vec3::zeros());
        let q = expm_so3(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        let b = body_current(&q, &OceanCurrent { v_c: Vec3::x() });
        assert!((b - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn current_derivative_examples() {
        assert_eq!(current_body_derivative(&Vec3::new(1.0, 2.0, 3.0), &Vec3::zeros()), Vec3::zeros());
        assert_eq!(current_body_derivative(&Vec3::x(), &Vec3::z()), Vec3::new(0.0, -1.0, 0.0));
        let d = current_body_derivative(&Vec3::new(0.0, 0.15, 0.05), &Vec3::new(0.1, 0.0, 0.2));
        assert!((d - Vec3::new(0.03, 0.005, -0.015)).norm() < 1e-15);
    }

    #[test]
    fn rest_is_equilibrium() {
        let p = ModelParams::torpedo();
        let d = dynamics_derivative(&rest(), &GeneralizedForce::default(), &OceanCurrent::default(), &p).unwrap();
        assert_eq!(d.v_dot, Vec3::zeros());
        assert_eq!(d.w_dot, Vec3::zeros());
        assert_eq!(underactuated_derivative(&rest(), &OceanCurrent::default(), &p), (0.0, 0.0));
    }

    #[test]
    fn surge_force_from_rest() {
        let p = ModelParams::torpedo();
        let d = dynamics_derivative(&rest(), &allocate(0.7, 0.0, 0.0, 0.0), &OceanCurrent::default(), &p).unwrap();
        assert_eq!(d.v_dot, Vec3::new(0.7, 0.0, 0.0));
        assert_eq!(d.w_dot, Vec3::zeros());
    }

    #[test]
    fn damping_only_decay_signs() {
        let p = ModelParams::torpedo();
        let s = VehicleState::new(Vec3::zeros(), Mat3::identity(), Vec3::new(1.0, 0.2, -0.3), Vec3::zeros());
        let (vd, wd) = underactuated_derivative(&s, &OceanCurrent::default(), &p);
        assert!(vd < 0.0 && wd > 0.0);
        let a = p.affine();
        assert_eq!((vd, wd), (a.y_v0 * 0.2, a.y_w0 * -0.3));
    }

    #[test]
    fn allocation_is_structural() {
        assert_eq!(allocate(0.0, 0.0, 0.0, 0.0), GeneralizedForce::default());
        let a = allocate(1.0, 0.0, 0.0, 0.0).accel();
        assert_eq!((a[1], a[2]), (0.0, 0.0));
    }

    #[test]
    fn restoring_is_neutral() {
        let p = ModelParams::torpedo();
        assert_eq!(restoring(&p, &Mat3::identity()), Vector6::zeros());
        let g = restoring(&p, &expm_so3(&Vec3::new(0.4, -0.3, 1.2)));
        assert_eq!((g[0], g[1], g[2]), (0.0, 0.0, 0.0));
        assert!(g.fixed_rows::<3>(3).norm() > 0.0);
    }

    #[test]
    fn override_breaks_consistency() {
        let mut p = ModelParams::torpedo();
        let s = VehicleState::new(Vec3::zeros(), Mat3::identity(), Vec3::new(1.0, 0.1, 0.1), Vec3::new(0.1, 0.2, 0.3));
        let c = OceanCurrent::default();
        let full = dynamics_derivative(&s, &GeneralizedForce::default(), &c, &p).unwrap();
        assert!((underactuated_derivative(&s, &c, &p).0 - full.v_dot.y).abs() < 1e-12);
        let mut a = p.derived_affine();
        a.x_v1 *= 1.5;
        p.affine_override = Some(a);
        assert!((underactuated_derivative(&s, &c, &p).0 - full.v_dot.y).abs() > 1e-3);
    }

    #[test]
    fn torpedo_validates() {
        assert!(ModelParams::torpedo().validate().is_empty());
        let mut bad = ModelParams::torpedo();
        bad.mass[1] = -1.0;
        assert!(!bad.validate().is_empty());
    }
}
