//! Scenario configuration: loading, validation and derived constants.

use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsSettings;
use crate::error::{Error, Result};
use crate::guidance::{formation_feedback_gain, GuidanceConfig, COINCIDENT_DIST};
use crate::lowlevel::ControlGains;
use crate::path::{k_nsb, CurvatureSup, PathSpec, XiGrid};
use crate::reference::ReferenceParams;
use crate::rotations::{expm_so3, Vec3};
use crate::vehicle::{AffineCoeffs, ModelParams, OceanCurrent, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Dynamics plus the low-level controller.
    Full,
    /// Kinematic override `(u, R, ω) := (u_d, R_d, ω_d)`.
    Ideal,
}

impl std::str::FromStr for SimMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(SimMode::Full),
            "ideal" | "ideal-actuation" => Ok(SimMode::Ideal),
            other => Err(format!("unknown mode `{other}` (expected full or ideal)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub position: Vec3,
    /// Rotation vector of the body-to-NED rotation [rad].
    #[serde(default)]
    pub attitude: Vec3,
    /// Body linear velocity `(u, v, w)` [m/s].
    #[serde(default)]
    pub velocity: Vec3,
    /// Body angular velocity [rad/s].
    #[serde(default)]
    pub angular_velocity: Vec3,
}

impl InitialState {
    pub fn state(&self) -> VehicleState {
        VehicleState::new(self.position, expm_so3(&self.attitude), self.velocity, self.angular_velocity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    pub dt: f64,
    pub duration: f64,
    pub mode: SimMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_renormalize")]
    pub renormalize_every: usize,
    /// Mode switches located inside one step before giving up on bisection.
    #[serde(default = "default_max_events")]
    pub max_events_per_step: usize,
}

fn default_renormalize() -> usize {
    1000
}

fn default_max_events() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub vehicles: Vec<InitialState>,
    #[serde(default = "ModelParams::torpedo")]
    pub model: ModelParams,
    pub path: PathSpec,
    /// Initial path parameter.
    pub xi0: f64,
    /// Grid for regularity checks and curvature suprema.
    pub xi_grid: XiGrid,
    pub guidance: GuidanceConfig,
    /// Required inter-vehicle separation [m].
    pub d_min: f64,
    /// Safety margin; `d_COLAV = d_min + d_sec`.
    pub d_sec: f64,
    #[serde(default)]
    pub current: Vec3,
    #[serde(default)]
    pub reference: ReferenceParams,
    #[serde(default)]
    pub gains: ControlGains,
    pub sim: SimSettings,
    #[serde(default)]
    pub diagnostics: DiagnosticsSettings,
}

/// Constants computed once from a validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub k_nsb: f64,
    /// `υ2max` scaled by the per-vehicle gain of `J₂†`.
    pub upsilon2_max_eff: f64,
    pub affine: AffineCoeffs,
    pub curvature: CurvatureSup,
    pub steps: usize,
}

fn positive(errs: &mut Vec<String>, name: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errs.push(format!("{name}: must be positive and finite (got {v})"));
    }
}

fn finite_vec(errs: &mut Vec<String>, name: &str, v: &Vec3) {
    if !v.iter().all(|x| x.is_finite()) {
        errs.push(format!("{name}: must be finite"));
    }
}

impl ScenarioConfig {
    /// Parses JSON; schema errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(vec![format!("{path}: {}", e.into_inner())])
        })?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn n(&self) -> usize {
        self.vehicles.len()
    }

    pub fn ocean_current(&self) -> OceanCurrent {
        OceanCurrent { v_c: self.current }
    }

    /// Every violated invariant, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let n = self.vehicles.len();
        if n == 0 {
            errs.push("vehicles: at least one vehicle is required".into());
        }
        if n != self.guidance.formation.n() {
            errs.push(format!("vehicles: {n} initial states but {} formation offsets", self.guidance.formation.n()));
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            for (name, x) in [("position", v.position), ("attitude", v.attitude), ("velocity", v.velocity)] {
                finite_vec(&mut errs, &format!("vehicles[{i}].{name}"), &x);
            }
            finite_vec(&mut errs, &format!("vehicles[{i}].angular_velocity"), &v.angular_velocity);
            for j in 0..i {
                let d = (v.position - self.vehicles[j].position).norm();
                if d <= COINCIDENT_DIST {
                    errs.push(format!("vehicles[{i}].position: coincides with vehicles[{j}]"));
                }
            }
        }
        errs.extend(self.model.validate());
        errs.extend(self.gains.validate());

        let s = &self.sim;
        if !(s.dt > 0.0 && s.dt <= 0.1) {
            errs.push(format!("sim.dt: must lie in (0, 0.1] (got {})", s.dt));
        }
        positive(&mut errs, "sim.duration", s.duration);
        if s.renormalize_every == 0 {
            errs.push("sim.renormalize_every: must be at least 1".into());
        }

        let g = &self.guidance;
        positive(&mut errs, "guidance.formation_gains.lambda2", g.formation_gains.lambda2);
        positive(&mut errs, "guidance.formation_gains.upsilon2_max", g.formation_gains.upsilon2_max);
        positive(&mut errs, "guidance.delta0", g.delta0);
        positive(&mut errs, "guidance.k_xi", g.k_xi);
        positive(&mut errs, "guidance.colav.d_colav", g.colav.d_colav);
        positive(&mut errs, "guidance.colav.u_colav", g.colav.u_colav);
        positive(&mut errs, "guidance.colav.lambda1", g.colav.lambda1);
        if !(g.colav.release_factor >= 1.0) {
            errs.push("guidance.colav.release_factor: must be at least 1".into());
        }
        if !(g.alpha_min >= 0.0 && g.alpha_min < std::f64::consts::FRAC_PI_2) {
            errs.push(format!("guidance.alpha_min: must lie in [0, π/2) rad (got {})", g.alpha_min));
        }
        if !(g.depth.z_min < g.depth.z_max) {
            errs.push(format!(
                "guidance.depth: z_min ({}) must be smaller than z_max ({})",
                g.depth.z_min, g.depth.z_max
            ));
        }
        positive(&mut errs, "guidance.depth.upsilon_z", g.depth.upsilon_z);
        if !(g.depth.band >= 0.0) {
            errs.push("guidance.depth.band: must be non-negative".into());
        }
        if g.oa_reset_steps == 0 {
            errs.push("guidance.oa_reset_steps: must be at least 1".into());
        }
        for (k, ob) in g.obstacles.iter().enumerate() {
            positive(&mut errs, &format!("guidance.obstacles[{k}].radius"), ob.radius);
            finite_vec(&mut errs, &format!("guidance.obstacles[{k}].position"), &ob.position);
            finite_vec(&mut errs, &format!("guidance.obstacles[{k}].velocity"), &ob.velocity);
        }

        positive(&mut errs, "d_min", self.d_min);
        if !(self.d_sec >= 0.0) {
            errs.push("d_sec: must be non-negative".into());
        }
        if (self.d_min + self.d_sec - g.colav.d_colav).abs() > 1e-9 * g.colav.d_colav.abs().max(1.0) {
            errs.push(format!(
                "guidance.colav.d_colav: must equal d_min + d_sec = {} (got {})",
                self.d_min + self.d_sec,
                g.colav.d_colav
            ));
        }
        finite_vec(&mut errs, "current", &self.current);

        let r = &self.reference;
        positive(&mut errs, "reference.k_align", r.k_align);
        positive(&mut errs, "reference.u_rate_limit", r.u_rate_limit);
        positive(&mut errs, "reference.u_tau", r.u_tau);
        positive(&mut errs, "reference.launch_speed", r.launch_speed);
        if !(r.det_floor > 0.0 && r.det_floor < 1.0) {
            errs.push("reference.det_floor: must lie in (0, 1)".into());
        }
        errs.extend(self.diagnostics.validate());

        let grid = &self.xi_grid;
        if !(grid.xi_min < grid.xi_max) || grid.points < 2 {
            errs.push("xi_grid: needs xi_min < xi_max and at least two points".into());
        } else {
            if !(self.xi0 >= grid.xi_min && self.xi0 <= grid.xi_max) {
                errs.push(format!("xi0: {} lies outside xi_grid [{}, {}]", self.xi0, grid.xi_min, grid.xi_max));
            }
            match self.path.check_regular(grid) {
                Err(e) => errs.push(format!("path: {e}")),
                Ok(()) => match k_nsb(&self.path, &g.formation, g.k_xi, grid) {
                    Err(Error::Config(m)) => errs.extend(m.into_iter().map(|m| format!("path: {m}"))),
                    Err(e) => errs.push(format!("path: {e}")),
                    Ok(_) => {}
                },
            }
        }
        errs
    }

    /// Validates and computes the derived constants.
    pub fn prepare(&self) -> Result<Derived> {
        let errs = self.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let g = &self.guidance;
        Ok(Derived {
            k_nsb: k_nsb(&self.path, &g.formation, g.k_xi, &self.xi_grid)?,
            upsilon2_max_eff: g.formation_gains.upsilon2_max * formation_feedback_gain(self.n()),
            affine: self.model.affine(),
            curvature: self.path.curvature_sup(&self.xi_grid)?,
            steps: (self.sim.duration / self.sim.dt).round() as usize,
        })
    }
}
