//! Surge and attitude tracking layer.
//!
//! Surge is feedback-linearized, `ũ̇ = −k_u ũ`. The attitude law imposes
//! `ω̃̇ = −k_R δ − k_ω ω̃` on the error rate; with `δ = logm(R_dᵀR)` the
//! function `½k_R‖δ‖² + ½‖ω̃‖²` is non-increasing, so errors starting inside
//! `‖δ‖ < π` stay there and decay.

use serde::{Deserialize, Serialize};

use crate::rotations::{hat, logm_so3, Mat3, Vec3};
use crate::vehicle::{allocate, drift_accel, GeneralizedForce, ModelParams, OceanCurrent, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlGains {
    pub k_u: f64,
    pub k_r: f64,
    pub k_omega: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self { k_u: 2.0, k_r: 5.0, k_omega: 3.0 }
    }
}

impl ControlGains {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("k_u", self.k_u), ("k_r", self.k_r), ("k_omega", self.k_omega)] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("gains.{name}: must be positive"));
            }
        }
        errs
    }
}

/// What the tracking layer is asked to follow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingCommand {
    pub u_d: f64,
    pub u_d_dot: f64,
    pub r_d: Mat3,
    pub omega_d: Vec3,
    pub omega_d_dot: Vec3,
}

impl TrackingCommand {
    pub fn hold(u_d: f64, r_d: Mat3) -> Self {
        Self { u_d, u_d_dot: 0.0, r_d, omega_d: Vec3::zeros(), omega_d_dot: Vec3::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingError {
    pub u_tilde: f64,
    /// `logm(R_dᵀR)`.
    pub delta: Vec3,
    /// `ω − R̃ᵀω_d`.
    pub omega_tilde: Vec3,
}

impl TrackingError {
    pub fn norm(&self) -> f64 {
        (self.u_tilde * self.u_tilde + self.delta.norm_squared() + self.omega_tilde.norm_squared()).sqrt()
    }
}

pub fn tracking_error(state: &VehicleState, cmd: &TrackingCommand) -> TrackingError {
    let rt = cmd.r_d.transpose() * state.r;
    TrackingError {
        u_tilde: state.v.x - cmd.u_d,
        delta: logm_so3(&rt),
        omega_tilde: state.w - rt.transpose() * cmd.omega_d,
    }
}

pub fn control(
    state: &VehicleState,
    cmd: &TrackingCommand,
    current: &OceanCurrent,
    params: &ModelParams,
    gains: &ControlGains,
) -> GeneralizedForce {
    let drift = drift_accel(state, current, params);
    let e = tracking_error(state, cmd);
    let f_u = -drift[0] + cmd.u_d_dot - gains.k_u * e.u_tilde;
    let rt = cmd.r_d.transpose() * state.r;
    let ff = rt.transpose() * cmd.omega_d_dot - hat(&e.omega_tilde) * (rt.transpose() * cmd.omega_d);
    let drift_w = Vec3::new(drift[3], drift[4], drift[5]);
    let t = -drift_w + ff - e.delta * gains.k_r - e.omega_tilde * gains.k_omega;
    allocate(f_u, t.x, t.y, t.z)
}

/// Kinematic override `(u, R, ω) := (u_d, R_d, ω_d)`; sway and heave untouched.
pub fn ideal_actuation(state: &VehicleState, cmd: &TrackingCommand) -> VehicleState {
    VehicleState {
        p: state.p,
        r: cmd.r_d,
        v: Vec3::new(cmd.u_d, state.v.y, state.v.z),
        w: cmd.omega_d,
    }
}
