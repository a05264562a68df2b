//! Closed-loop simulation of the fleet.
//!
//! The whole stack (guidance, references, control) is evaluated at every
//! Runge–Kutta stage. Rotations are integrated with the Munthe-Kaas form of
//! classical RK4, `R = R₀ expm(θ)`. The discrete guidance mode is frozen inside
//! a step; switches are located by bisection and the step is restarted from
//! the switching instant.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{lyapunov, vdot_analytic, LyapunovPoint};
use crate::error::{Error, Result};
use crate::guidance::{
    barycenter, formation_radius, guidance_velocities, update_memory, AvoidanceMemory, DepthState, GuidanceOutput,
    Mode, TurnDirection,
};
use crate::lowlevel::{control, tracking_error, TrackingCommand};
use crate::path::PathFrame;
use crate::reference::{
    affine_loop, alignment_feedback, desired_angular_velocity, initialize_reference, loop_residual,
    pseudo_angular_velocity, surge_reference, surge_reference_rate, u_los, u_los_rate, AffineLoop, SurgeRow,
};
use crate::rotations::{expm_so3, logm_so3, minimal_rotation, orthonormality_error, renormalize, Mat3, Vec3};
use crate::scenario::{Derived, ScenarioConfig, SimMode};
use crate::telemetry::{TelemetryRecord, VehicleRecord};
use crate::vehicle::{dynamics_derivative, underactuated_rates, OceanCurrent, VehicleState};

/// Step of the directional finite difference for υ̇ [s].
const FD_STEP: f64 = 1e-5;
/// Relative step of the finite difference in U_LOS.
const FD_U_REL: f64 = 1e-4;
/// Bisection iterations when locating a mode switch.
const BISECTIONS: usize = 40;
/// Depth episodes closer than this are counted as one [s].
pub const DEPTH_MERGE_GAP: f64 = 20.0;
/// Time after an obstacle-avoidance switch treated as a transient [s].
pub const OA_TRANSIENT: f64 = 10.0;

/// Continuous state.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetState {
    pub p: Vec<Vec3>,
    pub r: Vec<Mat3>,
    pub v: Vec<Vec3>,
    pub w: Vec<Vec3>,
    pub r_d: Vec<Mat3>,
    /// Filtered surge references (full mode).
    pub u_d: Vec<f64>,
    pub xi: f64,
}

/// Tangent-space rates; rotation entries are body angular velocities.
#[derive(Debug, Clone)]
struct Rates {
    p: Vec<Vec3>,
    r: Vec<Vec3>,
    v: Vec<Vec3>,
    w: Vec<Vec3>,
    r_d: Vec<Vec3>,
    u_d: Vec<f64>,
    xi: f64,
}

impl Rates {
    fn combine(parts: &[(&Rates, f64)]) -> Rates {
        let first = parts[0].0;
        let n = first.p.len();
        let mut out = Rates {
            p: vec![Vec3::zeros(); n],
            r: vec![Vec3::zeros(); n],
            v: vec![Vec3::zeros(); n],
            w: vec![Vec3::zeros(); n],
            r_d: vec![Vec3::zeros(); n],
            u_d: vec![0.0; n],
            xi: 0.0,
        };
        for (k, c) in parts {
            for i in 0..n {
                out.p[i] += k.p[i] * *c;
                out.r[i] += k.r[i] * *c;
                out.v[i] += k.v[i] * *c;
                out.w[i] += k.w[i] * *c;
                out.r_d[i] += k.r_d[i] * *c;
                out.u_d[i] += k.u_d[i] * *c;
            }
            out.xi += k.xi * *c;
        }
        out
    }

    /// Maps body rates to rates of the exponential coordinates at `θ = h·base`:
    /// `θ̇ = ω + ½θ×ω + (1/12)θ×(θ×ω)`.
    fn dexpinv(mut self, base: &Rates, h: f64) -> Rates {
        let f = |w: &Vec3, th: Vec3| w + th.cross(w) * 0.5 + th.cross(&th.cross(w)) / 12.0;
        for i in 0..self.p.len() {
            self.r[i] = f(&self.r[i], base.r[i] * h);
            self.r_d[i] = f(&self.r_d[i], base.r_d[i] * h);
        }
        self
    }
}

impl FleetState {
    fn advance(&self, k: &Rates, h: f64) -> FleetState {
        let n = self.p.len();
        FleetState {
            p: (0..n).map(|i| self.p[i] + k.p[i] * h).collect(),
            r: (0..n).map(|i| self.r[i] * expm_so3(&(k.r[i] * h))).collect(),
            v: (0..n).map(|i| self.v[i] + k.v[i] * h).collect(),
            w: (0..n).map(|i| self.w[i] + k.w[i] * h).collect(),
            r_d: (0..n).map(|i| self.r_d[i] * expm_so3(&(k.r_d[i] * h))).collect(),
            u_d: (0..n).map(|i| self.u_d[i] + k.u_d[i] * h).collect(),
            xi: self.xi + k.xi * h,
        }
    }

    fn sway_heave(&self) -> Vec<(f64, f64)> {
        self.v.iter().map(|v| (v.y, v.z)).collect()
    }
}

/// Reference-layer quantities of one vehicle.
#[derive(Debug, Clone, Copy)]
struct VehicleRef {
    /// Body velocity the references are built for.
    vbar: Vec3,
    omega_d: Vec3,
    omega_eff: Vec3,
    omega_ups: Vec3,
    lp: Option<AffineLoop>,
    surge_ok: bool,
    fallback: bool,
}

/// Quantities of one right-hand-side evaluation kept for telemetry.
#[derive(Debug, Clone)]
pub struct StageInfo {
    pub frame: PathFrame,
    pub guidance: GuidanceOutput,
    pub u_los: f64,
    pub u_los_dot: f64,
    /// Vehicle states as seen by the dynamics (ideal mode applies the override).
    pub vehicles: Vec<VehicleState>,
    pub u_d: Vec<f64>,
    pub omega_d: Vec<Vec3>,
    pub omega_ups: Vec<Vec3>,
    pub det: Vec<Option<f64>>,
    pub omega0: Vec<Option<Vec3>>,
    pub residual: Vec<Option<f64>>,
    pub surge_ok: Vec<bool>,
    pub fallback: Vec<bool>,
    pub r_d: Vec<Mat3>,
}

/// A located guidance-mode switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeEvent {
    pub t: f64,
    pub from: Mode,
    pub to: Mode,
}

/// Simulation state between steps.
#[derive(Debug, Clone)]
pub struct World {
    pub step: usize,
    pub t: f64,
    pub state: FleetState,
    pub memory: AvoidanceMemory,
    /// Lateral path axis carried across vertical tangents.
    pub prev_y: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: SimMode,
    pub dt: f64,
    pub steps: usize,
    pub final_time: f64,
    /// Absent for a single vehicle.
    pub min_inter_vehicle_distance: Option<f64>,
    pub min_obstacle_clearance: Option<f64>,
    /// Minimum clearance more than the transient window after any OA switch.
    pub min_obstacle_clearance_settled: Option<f64>,
    pub max_depth_excursion: f64,
    pub min_surge: f64,
    pub max_sway_heave: f64,
    pub max_orthonormality_error: f64,
    pub max_loop_residual: f64,
    pub max_tracking_error: f64,
    pub colav_intervals: Vec<Interval>,
    pub oa_intervals: Vec<Interval>,
    pub depth_intervals: Vec<Interval>,
    /// Depth intervals merged across gaps shorter than the merge gap.
    pub depth_episodes: usize,
    pub mode_switches: usize,
    pub surge_fallback_steps: usize,
    pub loop_fallback_steps: usize,
    pub final_barycenter: Vec3,
    pub final_sigma_norm: f64,
    /// Last time ‖σ̃₂‖ exceeded 1 m (None if it never did).
    pub formation_settled_at: Option<f64>,
    /// Last time ‖p_b^p‖ exceeded 1 m (None if it never did).
    pub path_settled_at: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<TelemetryRecord>,
    pub events: Vec<ModeEvent>,
    pub summary: RunSummary,
}

impl RunOutput {
    pub fn lyapunov_points(&self) -> Vec<LyapunovPoint> {
        self.records
            .iter()
            .map(|r| LyapunovPoint {
                t: r.t,
                v: r.v,
                vdot: r.vdot,
                sigma_norm: (r.sigma2.iter().map(|x| x * x).sum::<f64>() + r.p_b_path.norm_squared()).sqrt(),
                u_los: r.u_los,
            })
            .collect()
    }
}

pub struct Simulator<'a> {
    cfg: &'a ScenarioConfig,
    derived: Derived,
    current: OceanCurrent,
    mode: SimMode,
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a ScenarioConfig) -> Result<Self> {
        let derived = cfg.prepare()?;
        Ok(Self { cfg, derived, current: cfg.ocean_current(), mode: cfg.sim.mode })
    }

    pub fn derived(&self) -> &Derived {
        &self.derived
    }

    fn frame(&self, xi: f64, prev_y: &Vec3) -> Result<PathFrame> {
        self.cfg.path.evaluate_with_prev(xi, Some(prev_y))
    }

    fn u_los(&self, y: &FleetState) -> Result<f64> {
        u_los(&y.sway_heave(), self.derived.upsilon2_max_eff, self.cfg.model.u_min, self.derived.k_nsb)
    }

    /// Mode-frozen υ_NSB rates: `υ̇ = a + b U̇`.
    #[allow(clippy::too_many_arguments)]
    fn upsilon_rates(
        &self,
        y: &FleetState,
        g: &GuidanceOutput,
        frame: &PathFrame,
        p_dot: &[Vec3],
        u: f64,
        t: f64,
        mode: &Mode,
        prev_y: &Vec3,
    ) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        let gc = &self.cfg.guidance;
        let h = FD_STEP;
        let eval = |s: f64| -> Result<GuidanceOutput> {
            let pos: Vec<Vec3> = y.p.iter().zip(p_dot).map(|(p, d)| p + d * (s * h)).collect();
            let fr = self.frame(y.xi + s * h * g.xi_dot, prev_y)?;
            guidance_velocities(gc, &pos, &fr, u, t + s * h, mode)
        };
        let (gp, gm) = (eval(1.0)?, eval(-1.0)?);
        let a = gp.upsilon.iter().zip(&gm.upsilon).map(|(p, m)| (p - m) / (2.0 * h)).collect();
        let hu = FD_U_REL * u;
        let up = guidance_velocities(gc, &y.p, frame, u + hu, t, mode)?;
        let um = guidance_velocities(gc, &y.p, frame, u - hu, t, mode)?;
        let b = up.upsilon.iter().zip(&um.upsilon).map(|(p, m)| (p - m) / (2.0 * hu)).collect();
        Ok((a, b))
    }

    /// Orientation reference of one vehicle for a given U̇.
    #[allow(clippy::too_many_arguments)]
    fn vehicle_ref(
        &self,
        ups: &Vec3,
        ups_dot: &Vec3,
        vbar: &Vec3,
        r_d: &Mat3,
        vc: &Vec3,
        surge_ok: bool,
        known_u_dot: Option<f64>,
        measured_omega: Option<&Vec3>,
    ) -> VehicleRef {
        let rp = &self.cfg.reference;
        let u_min = self.cfg.model.u_min;
        let coeffs = &self.derived.affine;
        let hold = VehicleRef {
            vbar: *vbar,
            omega_d: Vec3::zeros(),
            omega_eff: Vec3::zeros(),
            omega_ups: Vec3::zeros(),
            lp: None,
            surge_ok,
            fallback: true,
        };
        if vbar.norm() < rp.launch_speed {
            return hold;
        }
        let Ok(omega_ups) = pseudo_angular_velocity(ups, ups_dot) else {
            return hold;
        };
        let row = match known_u_dot {
            Some(ud) => SurgeRow::Known(ud),
            None if surge_ok => SurgeRow::Nominal { upsilon_dot_upsilon: ups.dot(ups_dot) },
            None => SurgeRow::Known(0.0),
        };
        let f = alignment_feedback(r_d, vbar, ups, rp.k_align);
        let lp = affine_loop(coeffs, vbar, vc, row, u_min).ok();
        let target = r_d.transpose() * omega_ups;
        let solved = lp.as_ref().and_then(|lp| desired_angular_velocity(lp, r_d, &omega_ups, &f, rp.det_floor).ok());
        let (omega_d, fallback) = match solved {
            Some(wd) => (wd, false),
            None => {
                let omega_v = match (measured_omega, known_u_dot) {
                    (Some(w), Some(ud)) => {
                        let (sv, sw) = underactuated_rates(coeffs, vbar.x, vbar.y, vbar.z, w, vc);
                        vbar.cross(&Vec3::new(ud, sv, sw)) / vbar.norm_squared()
                    }
                    _ => lp.map_or(Vec3::zeros(), |lp| lp.omega0),
                };
                (target - omega_v, true)
            }
        };
        VehicleRef { vbar: *vbar, omega_d, omega_eff: omega_d + f, omega_ups, lp, surge_ok, fallback }
    }

    /// Right-hand side with the mode frozen.
    fn rhs(&self, y: &FleetState, t: f64, mode: &Mode, prev_y: &Vec3, want_info: bool) -> Result<(Rates, Option<StageInfo>)> {
        let cfg = self.cfg;
        let n = y.p.len();
        let u_min = cfg.model.u_min;
        let coeffs = &self.derived.affine;
        let frame = self.frame(y.xi, prev_y)?;
        let sw = y.sway_heave();
        let u = self.u_los(y)?;
        let g = guidance_velocities(&cfg.guidance, &y.p, &frame, u, t, mode)?;

        let ideal = self.mode == SimMode::Ideal;
        let mut surge = Vec::with_capacity(n);
        let mut rot = Vec::with_capacity(n);
        let mut vbar = Vec::with_capacity(n);
        for i in 0..n {
            let (ud, ok) = surge_reference(&g.upsilon[i], y.v[i].y, y.v[i].z, u_min);
            surge.push((ud, ok));
            if ideal {
                rot.push(y.r_d[i]);
                vbar.push(Vec3::new(ud, y.v[i].y, y.v[i].z));
            } else {
                rot.push(y.r[i]);
                vbar.push(y.v[i]);
            }
        }
        let p_dot: Vec<Vec3> = (0..n).map(|i| rot[i] * vbar[i]).collect();
        let vc: Vec<Vec3> = rot.iter().map(|r| r.transpose() * self.current.v_c).collect();
        let (a, b) = self.upsilon_rates(y, &g, &frame, &p_dot, u, t, mode, prev_y)?;

        let refs_for = |u_dot: f64, known: &[Option<f64>], measured: bool| -> Vec<VehicleRef> {
            (0..n)
                .map(|i| {
                    let ups_dot = a[i] + b[i] * u_dot;
                    self.vehicle_ref(
                        &g.upsilon[i],
                        &ups_dot,
                        &vbar[i],
                        &y.r_d[i],
                        &vc[i],
                        surge[i].1,
                        known[i],
                        measured.then_some(&y.w[i]),
                    )
                })
                .collect()
        };
        let rates_with = |refs: &[VehicleRef]| -> Vec<(f64, f64)> {
            (0..n)
                .map(|i| underactuated_rates(coeffs, vbar[i].x, vbar[i].y, vbar[i].z, &refs[i].omega_eff, &vc[i]))
                .collect()
        };

        let mut k = Rates {
            p: p_dot.clone(),
            r: vec![Vec3::zeros(); n],
            v: vec![Vec3::zeros(); n],
            w: vec![Vec3::zeros(); n],
            r_d: vec![Vec3::zeros(); n],
            u_d: vec![0.0; n],
            xi: g.xi_dot,
        };
        let mut states = Vec::with_capacity(n);
        let mut u_d_log = Vec::with_capacity(n);
        let (u_dot, refs) = if ideal {
            // U̇ enters ω_eff affinely and ω_eff enters U̇ affinely.
            let none = vec![None; n];
            let r0 = refs_for(0.0, &none, false);
            let r1 = refs_for(1.0, &none, false);
            let g0 = u_los_rate(&sw, &rates_with(&r0), u_min, self.derived.k_nsb);
            let g1 = u_los_rate(&sw, &rates_with(&r1), u_min, self.derived.k_nsb);
            let slope = g1 - g0;
            if !((1.0 - slope).abs() > 1e-9) {
                return Err(Error::LoopUnresolvable(format!("U̇ fixed point has slope {slope}")));
            }
            let u_dot = g0 / (1.0 - slope);
            let refs = refs_for(u_dot, &none, false);
            let lat = rates_with(&refs);
            for i in 0..n {
                k.r[i] = refs[i].omega_eff;
                k.r_d[i] = refs[i].omega_eff;
                k.v[i] = Vec3::new(0.0, lat[i].0, lat[i].1);
                states.push(VehicleState::new(y.p[i], y.r_d[i], vbar[i], refs[i].omega_eff));
                u_d_log.push(vbar[i].x);
            }
            (u_dot, refs)
        } else {
            let lat: Vec<(f64, f64)> = (0..n)
                .map(|i| underactuated_rates(coeffs, y.v[i].x, y.v[i].y, y.v[i].z, &y.w[i], &vc[i]))
                .collect();
            let u_dot = u_los_rate(&sw, &lat, u_min, self.derived.k_nsb);
            let mut ud_dot = vec![0.0; n];
            let mut known = vec![None; n];
            for i in 0..n {
                let target = surge[i].0.min(cfg.model.u_max);
                ud_dot[i] = surge_reference_rate(target, y.u_d[i], &cfg.reference);
                known[i] = Some(ud_dot[i] - cfg.gains.k_u * (y.v[i].x - y.u_d[i]));
            }
            let refs = refs_for(u_dot, &known, true);
            for i in 0..n {
                let s = VehicleState::new(y.p[i], y.r[i], y.v[i], y.w[i]);
                let cmd = TrackingCommand {
                    u_d: y.u_d[i],
                    u_d_dot: ud_dot[i],
                    r_d: y.r_d[i],
                    omega_d: refs[i].omega_eff,
                    omega_d_dot: Vec3::zeros(),
                };
                let force = control(&s, &cmd, &self.current, &cfg.model, &cfg.gains);
                let d = dynamics_derivative(&s, &force, &self.current, &cfg.model)?;
                k.p[i] = d.p_dot;
                k.r[i] = d.omega;
                k.v[i] = d.v_dot;
                k.w[i] = d.w_dot;
                k.r_d[i] = refs[i].omega_eff;
                k.u_d[i] = ud_dot[i];
                states.push(s);
                u_d_log.push(y.u_d[i]);
            }
            (u_dot, refs)
        };

        let info = want_info.then(|| StageInfo {
            frame,
            u_los: u,
            u_los_dot: u_dot,
            vehicles: states,
            u_d: u_d_log,
            omega_d: refs.iter().map(|r| r.omega_eff).collect(),
            omega_ups: refs.iter().map(|r| r.omega_ups).collect(),
            det: refs.iter().map(|r| r.lp.map(|lp| lp.det)).collect(),
            omega0: refs.iter().map(|r| r.lp.map(|lp| lp.omega0)).collect(),
            residual: refs
                .iter()
                .zip(&y.r_d)
                .map(|(r, rd)| {
                    r.lp.filter(|_| !r.fallback)
                        .map(|lp| loop_residual(&lp, rd, &r.omega_ups, &r.omega_d, &r.omega_eff, &r.vbar))
                })
                .collect(),
            surge_ok: refs.iter().map(|r| r.surge_ok).collect(),
            fallback: refs.iter().map(|r| r.fallback).collect(),
            r_d: y.r_d.clone(),
            guidance: g,
        });
        Ok((k, info))
    }

    /// One Runge–Kutta–Munthe-Kaas step of size `h`.
    fn rk(&self, y: &FleetState, t: f64, h: f64, mode: &Mode, prev_y: &Vec3, want_info: bool) -> Result<(FleetState, Option<StageInfo>)> {
        let (k1, info) = self.rhs(y, t, mode, prev_y, want_info)?;
        let (k2, _) = self.rhs(&y.advance(&k1, h / 2.0), t + h / 2.0, mode, prev_y, false)?;
        let k2 = k2.dexpinv(&k1, h / 2.0);
        let (k3, _) = self.rhs(&y.advance(&k2, h / 2.0), t + h / 2.0, mode, prev_y, false)?;
        let k3 = k3.dexpinv(&k2, h / 2.0);
        let (k4, _) = self.rhs(&y.advance(&k3, h), t + h, mode, prev_y, false)?;
        let k4 = k4.dexpinv(&k3, h);
        let k = Rates::combine(&[(&k1, 1.0 / 6.0), (&k2, 1.0 / 3.0), (&k3, 1.0 / 3.0), (&k4, 1.0 / 6.0)]);
        Ok((y.advance(&k, h), info))
    }

    fn detect(&self, y: &FleetState, t: f64, memory: &AvoidanceMemory, prev_y: &Vec3, grid_step: bool) -> Result<AvoidanceMemory> {
        let frame = self.frame(y.xi, prev_y)?;
        let u = self.u_los(y)?;
        update_memory(&self.cfg.guidance, &y.p, &frame, u, t, memory, grid_step)
    }

    /// Rotates each `R_d` so that `R_d v̄` points along the new `υ_NSB`.
    fn realign(&self, y: &mut FleetState, t: f64, mode: &Mode, prev_y: &Vec3) -> Result<()> {
        let frame = self.frame(y.xi, prev_y)?;
        let u = self.u_los(y)?;
        let g = guidance_velocities(&self.cfg.guidance, &y.p, &frame, u, t, mode)?;
        for i in 0..y.p.len() {
            let vbar = match self.mode {
                SimMode::Ideal => {
                    let (ud, _) = surge_reference(&g.upsilon[i], y.v[i].y, y.v[i].z, self.cfg.model.u_min);
                    Vec3::new(ud, y.v[i].y, y.v[i].z)
                }
                SimMode::Full => y.v[i],
            };
            if vbar.norm() < self.cfg.reference.launch_speed || g.upsilon[i].norm() < 1e-9 {
                continue;
            }
            let q = minimal_rotation(&(y.r_d[i] * vbar), &g.upsilon[i], &(y.r_d[i] * Vec3::y()))?;
            y.r_d[i] = q * y.r_d[i];
            if self.mode == SimMode::Ideal {
                y.r[i] = y.r_d[i];
            }
        }
        Ok(())
    }

    pub fn initial_world(&self) -> Result<World> {
        let cfg = self.cfg;
        let n = cfg.n();
        let init: Vec<VehicleState> = cfg.vehicles.iter().map(|v| v.state()).collect();
        let frame0 = cfg.path.evaluate(cfg.xi0)?;
        let prev_y: Vec3 = frame0.r.column(1).into();
        let mut state = FleetState {
            p: init.iter().map(|s| s.p).collect(),
            r: init.iter().map(|s| s.r).collect(),
            v: init.iter().map(|s| s.v).collect(),
            w: init.iter().map(|s| s.w).collect(),
            r_d: init.iter().map(|s| s.r).collect(),
            u_d: init.iter().map(|s| s.v.x).collect(),
            xi: cfg.xi0,
        };
        let memory = self.detect(&state, 0.0, &AvoidanceMemory::new(n, cfg.guidance.obstacles.len()), &prev_y, false)?;
        let u = self.u_los(&state)?;
        let g = guidance_velocities(&cfg.guidance, &state.p, &frame0, u, 0.0, &memory.mode)?;
        for i in 0..n {
            let vbar = match self.mode {
                SimMode::Ideal => {
                    let (ud, _) = surge_reference(&g.upsilon[i], state.v[i].y, state.v[i].z, cfg.model.u_min);
                    state.v[i].x = ud;
                    state.u_d[i] = ud;
                    state.v[i]
                }
                SimMode::Full => state.v[i],
            };
            if vbar.norm() >= cfg.reference.launch_speed && g.upsilon[i].norm() > 1e-9 {
                state.r_d[i] = initialize_reference(&state.r[i], &vbar, &g.upsilon[i])?;
            }
            if self.mode == SimMode::Ideal {
                state.r[i] = state.r_d[i];
            }
        }
        Ok(World { step: 0, t: 0.0, state, memory, prev_y })
    }

    /// Advances one grid step, returning the stage information at its start.
    pub fn step(&self, w: &mut World, events: &mut Vec<ModeEvent>) -> Result<StageInfo> {
        let dt = self.cfg.sim.dt;
        let t_end = (w.step + 1) as f64 * dt;
        let mut t0 = w.t;
        let mut info = None;
        let mut switches = 0;
        loop {
            let h = t_end - t0;
            let (y1, inf) = self.rk(&w.state, t0, h, &w.memory.mode, &w.prev_y, info.is_none())?;
            if info.is_none() {
                info = inf;
            }
            let m1 = self.detect(&y1, t_end, &w.memory, &w.prev_y, false)?;
            if m1.mode == w.memory.mode || switches >= self.cfg.sim.max_events_per_step {
                w.state = y1;
                break;
            }
            let (mut lo, mut hi) = (0.0, h);
            for _ in 0..BISECTIONS {
                let mid = 0.5 * (lo + hi);
                let (ym, _) = self.rk(&w.state, t0, mid, &w.memory.mode, &w.prev_y, false)?;
                let mm = self.detect(&ym, t0 + mid, &w.memory, &w.prev_y, false)?;
                if mm.mode != w.memory.mode {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let (yh, _) = self.rk(&w.state, t0, hi, &w.memory.mode, &w.prev_y, false)?;
            let mh = self.detect(&yh, t0 + hi, &w.memory, &w.prev_y, false)?;
            w.state = yh;
            t0 += hi;
            events.push(ModeEvent { t: t0, from: w.memory.mode.clone(), to: mh.mode.clone() });
            w.memory = mh;
            self.realign(&mut w.state, t0, &w.memory.mode, &w.prev_y)?;
            switches += 1;
            if t_end - t0 <= 1e-12 * dt {
                break;
            }
        }
        w.step += 1;
        w.t = t_end;
        let m = self.detect(&w.state, w.t, &w.memory, &w.prev_y, true)?;
        if m.mode != w.memory.mode {
            events.push(ModeEvent { t: w.t, from: w.memory.mode.clone(), to: m.mode.clone() });
            w.memory = m;
            self.realign(&mut w.state, w.t, &w.memory.mode, &w.prev_y)?;
        } else {
            w.memory = m;
        }
        if w.step % self.cfg.sim.renormalize_every == 0 {
            for r in w.state.r.iter_mut().chain(w.state.r_d.iter_mut()) {
                *r = renormalize(r)?;
            }
        }
        w.prev_y = self.frame(w.state.xi, &w.prev_y)?.r.column(1).into();
        info.ok_or_else(|| Error::Integration("missing stage information".into()))
    }

    /// Stage information at the current state without stepping.
    pub fn observe(&self, w: &World) -> Result<StageInfo> {
        let (_, info) = self.rhs(&w.state, w.t, &w.memory.mode, &w.prev_y, true)?;
        info.ok_or_else(|| Error::Integration("missing stage information".into()))
    }

    pub fn record(&self, w: &World, info: &StageInfo, mode: &Mode) -> TelemetryRecord {
        let cfg = self.cfg;
        let g = &info.guidance;
        let n = w.state.p.len();
        let mut min_distance = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                min_distance = min_distance.min((w.state.p[i] - w.state.p[j]).norm());
            }
        }
        let r_f = formation_radius(&w.state.p);
        let pb = barycenter(&w.state.p);
        let obstacle_clearance = cfg
            .guidance
            .obstacles
            .iter()
            .map(|ob| {
                let po = ob.position_at(w.t);
                (po.xy() - pb.xy()).norm() - ob.radius - r_f
            })
            .reduce(f64::min);
        let v = lyapunov(&g.sigma2_tilde, &g.p_b_path);
        let fg = &cfg.guidance.formation_gains;
        let vdot = mode.is_nominal().then(|| {
            vdot_analytic(&g.sigma2_tilde, &g.p_b_path, fg.lambda2, fg.upsilon2_max, info.u_los, cfg.guidance.k_xi, g.delta, g.d)
        });
        let vehicles = (0..n)
            .map(|i| {
                let s = &info.vehicles[i];
                let cmd = TrackingCommand {
                    u_d: info.u_d[i],
                    u_d_dot: 0.0,
                    r_d: info.r_d[i],
                    omega_d: info.omega_d[i],
                    omega_d_dot: Vec3::zeros(),
                };
                VehicleRecord {
                    p: s.p,
                    attitude: logm_so3(&s.r),
                    v: s.v,
                    w: s.w,
                    u_d: info.u_d[i],
                    omega_d: info.omega_d[i],
                    x_tilde: tracking_error(s, &cmd).norm(),
                    det: info.det[i],
                    residual: info.residual[i],
                    surge_fallback: !info.surge_ok[i],
                    loop_fallback: info.fallback[i],
                }
            })
            .collect();
        TelemetryRecord {
            t: w.t,
            xi: w.state.xi,
            xi_dot: g.xi_dot,
            u_los: info.u_los,
            p_b_path: g.p_b_path,
            sigma2: g.sigma2_tilde.iter().copied().collect(),
            colav: mode.colav_active(),
            oa: mode.oa.map(|(k, d)| (k, if d == TurnDirection::Clockwise { 1 } else { -1 })),
            depth: match mode.depth {
                DepthState::Inside => 0,
                DepthState::TooShallow => -1,
                DepthState::TooDeep => 1,
            },
            min_distance: min_distance.is_finite().then_some(min_distance),
            obstacle_clearance,
            v,
            vdot,
            vehicles,
        }
    }

    /// Runs the configured duration.
    pub fn run(&self) -> Result<RunOutput> {
        self.run_with(|_, _| {})
    }

    /// Runs the configured duration, calling `inspect` after every logged record.
    pub fn run_with<F: FnMut(&World, &StageInfo)>(&self, mut inspect: F) -> Result<RunOutput> {
        let at = |w: &World, e: Error| Error::AtStep { step: w.step, t: w.t, source: Box::new(e) };
        let mut w = self.initial_world().map_err(|e| Error::AtStep { step: 0, t: 0.0, source: Box::new(e) })?;
        let mut events = Vec::new();
        let mut records = Vec::with_capacity(self.derived.steps + 1);
        let mut max_orth = 0.0f64;
        for _ in 0..self.derived.steps {
            let snapshot = w.clone();
            let info = self.step(&mut w, &mut events).map_err(|e| at(&snapshot, e))?;
            let rec = self.record(&snapshot, &info, &snapshot.memory.mode);
            if !rec.is_finite() {
                return Err(at(&snapshot, Error::Integration("non-finite telemetry".into())));
            }
            max_orth = max_orth.max(orth_error(&snapshot.state));
            inspect(&snapshot, &info);
            records.push(rec);
        }
        let info = self.observe(&w).map_err(|e| at(&w, e))?;
        max_orth = max_orth.max(orth_error(&w.state));
        inspect(&w, &info);
        records.push(self.record(&w, &info, &w.memory.mode));
        let summary = self.summarize(&records, &events, max_orth, &w);
        Ok(RunOutput { records, events, summary })
    }

    fn summarize(&self, records: &[TelemetryRecord], events: &[ModeEvent], max_orth: f64, w: &World) -> RunSummary {
        let cfg = self.cfg;
        let lim = &cfg.guidance.depth;
        let intervals = |pred: &dyn Fn(&TelemetryRecord) -> bool| -> Vec<Interval> {
            let mut out: Vec<Interval> = Vec::new();
            let mut open: Option<f64> = None;
            for r in records {
                match (pred(r), open) {
                    (true, None) => open = Some(r.t),
                    (false, Some(s)) => {
                        out.push(Interval { start: s, end: r.t });
                        open = None;
                    }
                    _ => {}
                }
            }
            if let (Some(s), Some(last)) = (open, records.last()) {
                out.push(Interval { start: s, end: last.t });
            }
            out
        };
        let colav_intervals = intervals(&|r| r.colav);
        let oa_intervals = intervals(&|r| r.oa.is_some());
        let depth_intervals = intervals(&|r| r.depth != 0);
        let mut depth_episodes = 0;
        let mut last_end = f64::NEG_INFINITY;
        for iv in &depth_intervals {
            if iv.start - last_end >= DEPTH_MERGE_GAP {
                depth_episodes += 1;
            }
            last_end = iv.end;
        }
        let oa_switch_times: Vec<f64> = events.iter().filter(|e| e.from.oa != e.to.oa).map(|e| e.t).collect();
        let settled = |t: f64| oa_switch_times.iter().all(|&s| !(t >= s && t < s + OA_TRANSIENT));
        let fold_min = |it: &mut dyn Iterator<Item = f64>| it.fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.min(x))));
        let vehicles = || records.iter().flat_map(|r| r.vehicles.iter());
        let last_above = |f: &dyn Fn(&TelemetryRecord) -> f64| records.iter().rev().find(|r| f(r) > 1.0).map(|r| r.t);
        let sigma_norm = |r: &TelemetryRecord| r.sigma2.iter().map(|x| x * x).sum::<f64>().sqrt();
        let last = records.last();
        RunSummary {
            name: cfg.name.clone(),
            mode: self.mode,
            dt: cfg.sim.dt,
            steps: self.derived.steps,
            final_time: w.t,
            min_inter_vehicle_distance: records.iter().filter_map(|r| r.min_distance).reduce(f64::min),
            min_obstacle_clearance: fold_min(&mut records.iter().filter_map(|r| r.obstacle_clearance)),
            min_obstacle_clearance_settled: fold_min(
                &mut records.iter().filter(|r| settled(r.t)).filter_map(|r| r.obstacle_clearance),
            ),
            max_depth_excursion: vehicles()
                .map(|v| (lim.z_min - v.p.z).max(v.p.z - lim.z_max).max(0.0))
                .fold(0.0, f64::max),
            min_surge: vehicles().map(|v| v.v.x).fold(f64::INFINITY, f64::min),
            max_sway_heave: vehicles().map(|v| v.v.y.hypot(v.v.z)).fold(0.0, f64::max),
            max_orthonormality_error: max_orth,
            max_loop_residual: vehicles().filter_map(|v| v.residual).fold(0.0, f64::max),
            max_tracking_error: vehicles().map(|v| v.x_tilde).fold(0.0, f64::max),
            depth_episodes,
            colav_intervals,
            oa_intervals,
            depth_intervals,
            mode_switches: events.len(),
            surge_fallback_steps: records.iter().filter(|r| r.surge_fallback()).count(),
            loop_fallback_steps: records.iter().filter(|r| r.vehicles.iter().any(|v| v.loop_fallback)).count(),
            final_barycenter: barycenter(&w.state.p),
            final_sigma_norm: last.map_or(0.0, sigma_norm),
            formation_settled_at: last_above(&sigma_norm),
            path_settled_at: last_above(&|r| r.p_b_path.norm()),
        }
    }
}

fn orth_error(s: &FleetState) -> f64 {
    s.r.iter().chain(s.r_d.iter()).map(orthonormality_error).fold(0.0, f64::max)
}

/// Convenience wrapper: validate, simulate, summarize.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput> {
    Simulator::new(cfg)?.run()
}
