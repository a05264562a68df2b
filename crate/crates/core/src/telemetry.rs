//! Per-step telemetry records and their CSV form.
//!
//! Floats are written with 17 significant digits so a reload reproduces the
//! bits; absent values (no obstacles, V̇ outside nominal mode) are empty cells.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotations::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub p: Vec3,
    /// Rotation vector of R.
    pub attitude: Vec3,
    /// Body velocity `(u, v, w)`.
    pub v: Vec3,
    /// Body angular velocity `(p, q, r)`.
    pub w: Vec3,
    pub u_d: f64,
    /// Commanded angular velocity.
    pub omega_d: Vec3,
    /// ‖(ũ, δ, ω̃)‖.
    pub x_tilde: f64,
    /// det(I + A_ω), absent when the affine loop is undefined.
    pub det: Option<f64>,
    /// ‖(ω_d + ω_v − R_dᵀω_υ) × v̄‖ with ω_v at the commanded rate.
    pub residual: Option<f64>,
    pub surge_fallback: bool,
    pub loop_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub t: f64,
    pub xi: f64,
    pub xi_dot: f64,
    pub u_los: f64,
    /// Barycenter error in path axes.
    pub p_b_path: Vec3,
    pub sigma2: Vec<f64>,
    pub colav: bool,
    /// Governing obstacle index and turning sign (+1 clockwise).
    pub oa: Option<(usize, i8)>,
    /// −1 too shallow, +1 too deep, 0 inside.
    pub depth: i8,
    /// Smallest inter-vehicle distance, absent for a single vehicle.
    pub min_distance: Option<f64>,
    /// ‖p_rel‖ − (r_o + r_f) for the closest obstacle.
    pub obstacle_clearance: Option<f64>,
    pub v: f64,
    pub vdot: Option<f64>,
    pub vehicles: Vec<VehicleRecord>,
}

impl TelemetryRecord {
    pub fn surge_fallback(&self) -> bool {
        self.vehicles.iter().any(|v| v.surge_fallback)
    }

    pub fn is_finite(&self) -> bool {
        let mut xs = vec![self.t, self.xi, self.xi_dot, self.u_los, self.v];
        xs.extend(self.min_distance.iter());
        xs.extend(self.p_b_path.iter());
        xs.extend(self.sigma2.iter());
        xs.extend(self.obstacle_clearance.iter());
        xs.extend(self.vdot.iter());
        for v in &self.vehicles {
            xs.extend(v.p.iter().chain(v.attitude.iter()).chain(v.v.iter()).chain(v.w.iter()).chain(v.omega_d.iter()));
            xs.extend([v.u_d, v.x_tilde]);
            xs.extend(v.det.iter().chain(v.residual.iter()));
        }
        xs.iter().all(|x| x.is_finite())
    }
}

/// Column names for `n` vehicles.
pub fn header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "xi", "xi_dot", "u_los", "pbp_x", "pbp_y", "pbp_z"].iter().map(|s| s.to_string()).collect();
    for k in 0..3 * n.saturating_sub(1) {
        h.push(format!("sigma2_{k}"));
    }
    for s in ["V", "Vdot", "colav", "oa", "oa_obstacle", "oa_dir", "depth", "surge_fallback", "min_distance", "obstacle_clearance"] {
        h.push(s.into());
    }
    for i in 0..n {
        for s in [
            "x", "y", "z", "att_x", "att_y", "att_z", "u", "v", "w", "p", "q", "r", "u_d", "omega_d_x", "omega_d_y",
            "omega_d_z", "xtilde", "det", "residual", "surge_fallback", "loop_fallback",
        ] {
            h.push(format!("v{i}_{s}"));
        }
    }
    h
}

fn f(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.into()
}

pub fn row(r: &TelemetryRecord) -> Vec<String> {
    let mut out = vec![f(r.t), f(r.xi), f(r.xi_dot), f(r.u_los)];
    out.extend(r.p_b_path.iter().map(|&x| f(x)));
    out.extend(r.sigma2.iter().map(|&x| f(x)));
    out.push(f(r.v));
    out.push(opt(r.vdot));
    out.push(flag(r.colav));
    out.push(flag(r.oa.is_some()));
    out.push(r.oa.map(|o| o.0.to_string()).unwrap_or_default());
    out.push(r.oa.map(|o| o.1.to_string()).unwrap_or_default());
    out.push(r.depth.to_string());
    out.push(flag(r.surge_fallback()));
    out.push(opt(r.min_distance));
    out.push(opt(r.obstacle_clearance));
    for v in &r.vehicles {
        for x in v.p.iter().chain(v.attitude.iter()).chain(v.v.iter()).chain(v.w.iter()) {
            out.push(f(*x));
        }
        out.push(f(v.u_d));
        out.extend(v.omega_d.iter().map(|&x| f(x)));
        out.push(f(v.x_tilde));
        out.push(opt(v.det));
        out.push(opt(v.residual));
        out.push(flag(v.surge_fallback));
        out.push(flag(v.loop_fallback));
    }
    out
}

/// Writes header and rows.
pub fn write_csv<W: Write>(w: W, records: &[TelemetryRecord]) -> Result<()> {
    let n = records.first().map_or(0, |r| r.vehicles.len());
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Integration(format!("telemetry write failed: {e}"));
    wr.write_record(header(n)).map_err(io)?;
    for r in records {
        wr.write_record(row(r)).map_err(io)?;
    }
    wr.flush().map_err(|e| Error::Integration(format!("telemetry write failed: {e}")))?;
    Ok(())
}
