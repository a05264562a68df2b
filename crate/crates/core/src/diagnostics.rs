//! Closed-loop analysis made checkable: Lyapunov decrease, perturbation
//! bounds, the appendix bound constants and the sway/heave boundedness test.
//!
//! Suprema over ξ are taken on the configured grid and inflated; suprema over
//! the vehicle state are taken over an explicit box (surge range, sway/heave
//! disk, angular-rate ball, current of fixed magnitude in any direction).

use nalgebra::{DVector, Matrix2, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::guidance::saturate;
use crate::path::PathFrame;
use crate::reference::{affine_loop, surge_reference, u_los, u_los_rate, SurgeRow};
use crate::rotations::{expm_so3, Mat3, Vec3};
use crate::scenario::{Derived, ScenarioConfig, SimMode};
use crate::simulator::RunOutput;
use crate::telemetry::TelemetryRecord;
use crate::vehicle::{underactuated_rates, AffineCoeffs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSettings {
    /// Radius of the per-vehicle `(v, w)` disk of the state box [m/s].
    #[serde(default = "one")]
    pub lateral_max: f64,
    /// Radius of the angular-rate ball of the state box [rad/s].
    #[serde(default = "one")]
    pub omega_max: f64,
    /// Ceiling on max ‖(v_i, w_i)‖ over a run [m/s].
    #[serde(default = "one")]
    pub sway_heave_ceiling: f64,
    /// Relative inflation of grid suprema.
    #[serde(default = "default_inflation")]
    pub inflation: f64,
    /// Random states for the bound-domination audit.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Absolute tolerance of the analytic-vs-finite-difference V̇ check.
    #[serde(default = "default_vdot_abs")]
    pub vdot_abs_tol: f64,
    /// Relative tolerance of the same check.
    #[serde(default = "default_vdot_rel")]
    pub vdot_rel_tol: f64,
    /// Slack in `V̇ ≤ −k_r‖σ̃‖² + tol`.
    #[serde(default = "default_vdot_abs")]
    pub decrease_tol: f64,
}

fn one() -> f64 {
    1.0
}
fn default_inflation() -> f64 {
    0.1
}
fn default_samples() -> usize {
    100_000
}
fn default_vdot_abs() -> f64 {
    1e-6
}
fn default_vdot_rel() -> f64 {
    1e-3
}

impl Default for DiagnosticsSettings {
    fn default() -> Self {
        Self {
            lateral_max: one(),
            omega_max: one(),
            sway_heave_ceiling: one(),
            inflation: default_inflation(),
            samples: default_samples(),
            vdot_abs_tol: default_vdot_abs(),
            vdot_rel_tol: default_vdot_rel(),
            decrease_tol: default_vdot_abs(),
        }
    }
}

impl DiagnosticsSettings {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("lateral_max", self.lateral_max),
            ("omega_max", self.omega_max),
            ("sway_heave_ceiling", self.sway_heave_ceiling),
            ("vdot_abs_tol", self.vdot_abs_tol),
            ("vdot_rel_tol", self.vdot_rel_tol),
            ("decrease_tol", self.decrease_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("diagnostics.{name}: must be positive"));
            }
        }
        if !(self.inflation >= 0.0) {
            errs.push("diagnostics.inflation: must be non-negative".into());
        }
        errs
    }
}

// ---------------------------------------------------------------------------
// Lyapunov analysis

/// `½(‖σ̃₂‖² + ‖p_b^p‖²)`.
pub fn lyapunov(sigma2: &DVector<f64>, p_b_path: &Vec3) -> f64 {
    0.5 * (sigma2.norm_squared() + p_b_path.norm_squared())
}

/// Nominal-mode `V̇`:
/// `−υ2max σ̃₂ᵀsat(Λ₂σ̃₂) − U(k_ξ x²/√(1+x²) + (y² + z²)/D)`.
#[allow(clippy::too_many_arguments)]
pub fn vdot_analytic(
    sigma2: &DVector<f64>,
    p_b_path: &Vec3,
    lambda2: f64,
    upsilon2_max: f64,
    u_los: f64,
    k_xi: f64,
    _delta: f64,
    d: f64,
) -> f64 {
    let (x, y, z) = (p_b_path.x, p_b_path.y, p_b_path.z);
    let formation = upsilon2_max * sigma2.dot(&saturate(&(sigma2 * lambda2)));
    let path = u_los * (k_xi * x * x / (1.0 + x * x).sqrt() + (y * y + z * z) / d);
    -formation - path
}

/// Decrease rate on the ball `‖σ̃‖ ≤ r`:
/// `min{υ2max λ₂ tanh(λ* r)/(λ* r), U k_ξ/√(1+r²), U/√(Δ0² + 2r²)}`, `λ* = max(λ₂, 1)`.
///
/// For `λ₂ ≤ 1` the first term is `υ2max λ₂ tanh(r)/r`.
pub fn k_r(r: f64, upsilon2_max: f64, lambda2_min: f64, u_los: f64, k_xi: f64, delta0: f64) -> f64 {
    let ls = lambda2_min.max(1.0);
    let sat = if r * ls < 1e-8 { 1.0 } else { (ls * r).tanh() / (ls * r) };
    let a = upsilon2_max * lambda2_min * sat;
    let b = u_los * k_xi / (1.0 + r * r).sqrt();
    let c = u_los / (delta0 * delta0 + 2.0 * r * r).sqrt();
    a.min(b).min(c)
}

/// Perturbation of the barycenter dynamics caused by tracking errors,
/// `g = s δ×υ + c δ×(δ×υ) + R(ũ, 0, 0)`, and its bound
/// `‖υ‖(1 + √2/2)‖δ‖ + |ũ|`.
pub fn perturbation(delta: &Vec3, u_tilde: f64, r: &Mat3, upsilon: &Vec3) -> (Vec3, f64) {
    let th = delta.norm();
    let (s, c) = if th < 1e-4 {
        (1.0 - th * th / 6.0, 0.5 - th * th / 24.0)
    } else {
        (th.sin() / th, (1.0 - th.cos()) / (th * th))
    };
    let dxu = delta.cross(upsilon);
    let g = dxu * s + delta.cross(&dxu) * c + r * Vec3::new(u_tilde, 0.0, 0.0);
    let bound = upsilon.norm() * (1.0 + std::f64::consts::FRAC_1_SQRT_2) * th + u_tilde.abs();
    (g, bound)
}

/// Least-squares line through `(t, ln y)`: returns `(slope, intercept)`.
pub fn log_linear_fit(ts: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = ts.iter().zip(ys).filter(|(_, &y)| y > 0.0).map(|(&t, &y)| (t, y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mt, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, y) in &pts {
        sxy += (t - mt) * (y - my);
        sxx += (t - mt) * (t - mt);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mt))
}

/// Envelope `‖e(t)‖ ≤ C‖e(0)‖exp(−λt)` with λ from a log-linear fit and the
/// smallest `C` that makes the envelope hold at every sample.
pub fn exponential_envelope(ts: &[f64], es: &[f64]) -> Option<(f64, f64)> {
    let (slope, _) = log_linear_fit(ts, es)?;
    let lambda = -slope;
    let e0 = *es.first()?;
    if !(e0 > 0.0) {
        return None;
    }
    let c = ts.iter().zip(es).map(|(&t, &e)| e * (lambda * (t - ts[0])).exp() / e0).fold(0.0, f64::max);
    Some((lambda, c))
}

// ---------------------------------------------------------------------------
// det(I + A_ω)

/// Individual terms of the numerator of `det(I + A_ω)` (denominator
/// `u(u² + v² + w²)`), in the order of the appendix expansion.
pub fn det_numerator_terms(c: &AffineCoeffs, v: &Vec3, vc: &Vec3) -> [f64; 22] {
    let (u, sv, hv) = (v.x, v.y, v.z);
    let (uc, vcc, wc) = (vc.x, vc.y, vc.z);
    let ur = u - uc;
    let n2 = u * u + sv * sv + hv * hv;
    let (xv0, xv1, xw0, xw1, zv1, zw1) = (c.x_v0, c.x_v1, c.x_w0, c.x_w1, c.z_v1, c.z_w1);
    [
        u * n2,
        -uc * n2,
        -(uc * u + vcc * sv + wc * hv) * ur,
        xv0 * (u * u + sv * sv),
        -xw0 * (u * u + hv * hv),
        (xv1 - xw1) * u * ur * ur,
        (xv1 + zw1) * sv * sv * ur,
        -(xw1 + zv1) * hv * hv * ur,
        -xv0 * xw0 * u,
        -xv0 * (u * uc + sv * vcc),
        xw0 * (u * uc + hv * wc),
        -xv0 * (xw1 * u * u - zw1 * sv * sv),
        -xw0 * (xv1 * u * u - zv1 * hv * hv),
        -xv1 * xw1 * u * ur * ur,
        -(xv1 + zw1) * sv * vcc * ur,
        (xw1 + zv1) * hv * wc * ur,
        xv1 * zw1 * sv * sv * ur,
        xw1 * zv1 * hv * hv * ur,
        xv0 * (xw1 * u * uc - zw1 * sv * vcc),
        xw0 * (xv1 * u * uc - zv1 * hv * wc),
        -xv1 * zw1 * sv * vcc * ur,
        -xw1 * zv1 * hv * wc * ur,
    ]
}

/// `det(I + A_ω)` assembled from [`det_numerator_terms`].
pub fn det_expansion(c: &AffineCoeffs, v: &Vec3, vc: &Vec3) -> f64 {
    let s: f64 = det_numerator_terms(c, v, vc).iter().sum();
    s / (v.x * v.norm_squared())
}

/// The closed-form constant printed beside the determinant expansion, with
/// every current component replaced by `‖V_c‖`.
///
/// It is reported for reference only: the display bounds the determinant from
/// above, so it cannot certify `det ≥ 1 − k_a`.
pub fn k_a_printed(c: &AffineCoeffs, u_min: f64, u_max: f64, vc_norm: f64) -> f64 {
    let uc = vc_norm;
    let (xv0, xv1, xw0, xw1, zv1, zw1) = (c.x_v0.abs(), c.x_v1, c.x_w0.abs(), c.x_w1, c.z_v1, c.z_w1);
    let um2 = u_min * u_min;
    uc / u_min
        + 3.0 * uc * (u_min + uc) / um2
        + (xv0 + xw0) / u_min
        + 2.0 * (c.x_v1 - c.x_w1 - c.x_v1 * c.x_w1).abs() * (um2 + uc * uc) / um2
        + (xv1 + zw1 + xv1 * zw1).abs().max((xw1 + zv1 + xw1 * zv1).abs()) * (u_min + uc) / u_min
        + xv0 * xw0 / um2
        + xv0.max(xw0) * (um2 + vc_norm * vc_norm) / (um2 * u_min)
        + (xv0 * xw1.abs().max(zw1.abs()) + xw0 * xv1.abs().max(zv1.abs())) / u_min
        + (xv1 + zw1 - xv1 * zw1).abs() * uc * (u_max + uc) / (u_max * u_max)
        + (xw1 + zv1 - xw1 * zv1).abs() * uc * (u_max + uc) / (u_max * u_max)
        + (xv0 * ((xw1 * uc).abs() + (zw1 * uc).abs()) + xw0 * ((xv1 * uc).abs() + (zv1 * uc).abs())) / um2
}

// ---------------------------------------------------------------------------
// Bound constants

/// The state box over which suprema are taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub u_min: f64,
    /// Largest surge reachable on the manifold, `max(u_max, Ū·max‖e_p‖)`.
    pub u_hi: f64,
    pub lateral_max: f64,
    pub omega_max: f64,
    /// ‖V_c‖.
    pub current: f64,
}

impl StateBox {
    /// Relative surge range `[u_min − ‖V_c‖, u_hi + ‖V_c‖]`.
    pub fn ur_range(&self) -> (f64, f64) {
        (self.u_min - self.current, self.u_hi + self.current)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// `k_a ≥ 1`: the loop cannot be certified resolvable.
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub state_box: StateBox,
    pub k_nsb: f64,
    pub upsilon2_max_eff: f64,
    /// max ‖e_p‖.
    pub e_p_max: f64,
    /// max ‖κ × e_p + (ι/‖∂p/∂ξ‖) × p_f‖.
    pub e_d_max: f64,
    pub c_nsb: f64,
    pub a_nsb: f64,
    pub b_nsb: f64,
    /// Upper bound on U_LOS over the box.
    pub u_los_max: f64,
    /// max ‖[[Y_v, Z_v0], [Z_w0, Y_w]]‖₂ over the relative-surge range.
    pub m1: f64,
    /// Per-vehicle gain of ‖(v̇, ẇ)‖ in ‖(v_r, w_r)‖.
    pub l1: f64,
    /// Stacked constant part of ‖v̇_u‖.
    pub l0: f64,
    pub det_min: f64,
    pub k_a: f64,
    pub k_a_printed: f64,
    pub a_v: f64,
    pub b_v: f64,
    pub y_min: f64,
    pub x_max: f64,
    /// `(a_NSB + a_v)/(1 − k_a)`, absent when `k_a ≥ 1`.
    pub a: Option<f64>,
    pub verdict: Verdict,
}

fn offsets_grid_sup<F: Fn(&PathFrame, &Vec3) -> f64>(cfg: &ScenarioConfig, f: F) -> Result<f64> {
    let mut best = 0.0f64;
    let mut prev: Option<Vec3> = None;
    for xi in cfg.xi_grid.iter() {
        let frame = cfg.path.evaluate_with_prev(xi, prev.as_ref())?;
        prev = Some(frame.r.column(1).into());
        for pf in cfg.guidance.formation.offsets() {
            best = best.max(f(&frame, pf));
        }
    }
    Ok(best)
}

fn e_d(frame: &PathFrame, pf: &Vec3) -> Vec3 {
    let ep = Vec3::x() + frame.kappa.cross(pf);
    frame.kappa.cross(&ep) + (frame.iota / frame.speed).cross(pf)
}

fn lateral_block_norm(c: &AffineCoeffs, ur: f64) -> f64 {
    Matrix2::new(c.y_v(ur), c.z_v0, c.z_w0, c.y_w(ur)).svd(false, false).singular_values.max()
}

/// λ_min of the symmetric part of `−[[Y_v(u_r), Z_v(p)], [Z_w(p), Y_w(u_r)]]`.
fn damping_margin(c: &AffineCoeffs, ur: f64, p: f64) -> f64 {
    let off = -0.5 * (c.z_v(p) + c.z_w(p));
    let m = Matrix2::new(-c.y_v(ur), off, off, -c.y_w(ur));
    SymmetricEigen::new(m).eigenvalues.min()
}

fn fibonacci_sphere(k: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..k)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / k as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Smallest `det(I + A_ω)` over the box for either surge-row form.
fn det_at(c: &AffineCoeffs, v: &Vec3, vc: &Vec3, u_min: f64) -> f64 {
    let mut d = f64::INFINITY;
    for row in [SurgeRow::Nominal { upsilon_dot_upsilon: 0.0 }, SurgeRow::Known(0.0)] {
        if let Ok(lp) = affine_loop(c, v, vc, row, u_min) {
            d = d.min(lp.det);
        }
    }
    d
}

/// Grid search plus pattern-search refinement of min det(I + A_ω).
pub fn det_minimum(c: &AffineCoeffs, bx: &StateBox) -> f64 {
    let us: Vec<f64> = (0..16).map(|k| bx.u_min * (bx.u_hi / bx.u_min).powf(k as f64 / 15.0)).collect();
    let mut lat = vec![(0.0, 0.0)];
    for ring in 1..=4 {
        let r = bx.lateral_max * ring as f64 / 4.0;
        for a in 0..12 {
            let th = a as f64 * std::f64::consts::PI / 6.0;
            lat.push((r * th.cos(), r * th.sin()));
        }
    }
    let dirs = if bx.current > 0.0 { fibonacci_sphere(40) } else { vec![Vec3::zeros()] };
    let mut cand: Vec<(f64, [f64; 6])> = Vec::new();
    for &u in &us {
        for &(v, w) in &lat {
            for d in &dirs {
                let vc = d * bx.current;
                let x = [u, v, w, vc.x, vc.y, vc.z];
                cand.push((det_at(c, &Vec3::new(u, v, w), &vc, bx.u_min), x));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0));
    let project = |x: &mut [f64; 6]| {
        x[0] = x[0].clamp(bx.u_min, bx.u_hi);
        let l = (x[1] * x[1] + x[2] * x[2]).sqrt();
        if l > bx.lateral_max {
            x[1] *= bx.lateral_max / l;
            x[2] *= bx.lateral_max / l;
        }
        let cn = (x[3] * x[3] + x[4] * x[4] + x[5] * x[5]).sqrt();
        if cn > 0.0 {
            for xk in &mut x[3..6] {
                *xk *= bx.current / cn;
            }
        }
    };
    let eval = |x: &[f64; 6]| det_at(c, &Vec3::new(x[0], x[1], x[2]), &Vec3::new(x[3], x[4], x[5]), bx.u_min);
    let mut best = cand[0].0;
    for (mut f, mut x) in cand.into_iter().take(5) {
        let mut step = [
            0.1 * (bx.u_hi - bx.u_min),
            0.1 * bx.lateral_max,
            0.1 * bx.lateral_max,
            0.2 * bx.current,
            0.2 * bx.current,
            0.2 * bx.current,
        ];
        for _ in 0..60 {
            let mut improved = false;
            for k in 0..6 {
                for sgn in [-1.0, 1.0] {
                    let mut y = x;
                    y[k] += sgn * step[k];
                    project(&mut y);
                    let fy = eval(&y);
                    if fy < f {
                        f = fy;
                        x = y;
                        improved = true;
                    }
                }
            }
            if !improved {
                for s in step.iter_mut() {
                    *s *= 0.5;
                }
            }
        }
        best = best.min(f);
    }
    best
}

/// Assembles every constant and the boundedness verdict.
pub fn bound_constants(cfg: &ScenarioConfig, derived: &Derived) -> Result<BoundConstants> {
    let s = &cfg.diagnostics;
    let infl = 1.0 + s.inflation;
    let c = &derived.affine;
    let k = derived.k_nsb;
    let n = cfg.n() as f64;
    let u_min = cfg.model.u_min;
    let u2 = derived.upsilon2_max_eff;
    let vc = cfg.current.norm();

    let e_p_max = infl * offsets_grid_sup(cfg, |f, pf| (Vec3::x() + f.kappa.cross(pf)).norm())?;
    let e_d_max = infl * offsets_grid_sup(cfg, |f, pf| e_d(f, pf).norm())?;
    let c_nsb = infl
        * offsets_grid_sup(cfg, |f, pf| {
            let ep = (Vec3::x() + f.kappa.cross(pf)).norm();
            f.kappa.norm() + (f.iota / f.speed).cross(pf).norm() * (1.0 + ep) / ep
        })?;
    let a_nsb = c_nsb / (1.0 - k);
    let b_nsb = (u2 + u_min) * c_nsb / (1.0 - k);

    let u_los_max = (u2 + (n * s.lateral_max * s.lateral_max + u_min * u_min).sqrt()) / (1.0 - k);
    let bx = StateBox {
        u_min,
        u_hi: cfg.model.u_max.max(u_los_max * e_p_max),
        lateral_max: s.lateral_max,
        omega_max: s.omega_max,
        current: vc,
    };
    let (ur_lo, ur_hi) = bx.ur_range();
    let m1 = lateral_block_norm(c, ur_lo).max(lateral_block_norm(c, ur_hi));
    let x_max = [c.x_v(ur_lo), c.x_v(ur_hi), c.x_w(ur_lo), c.x_w(ur_hi)].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let l1 = m1 + c.z_v1.abs().max(c.z_w1.abs()) * s.omega_max;
    let l0 = n.sqrt() * (l1 * vc + std::f64::consts::SQRT_2 * (x_max + 2.0 * vc) * s.omega_max);

    let a_v = (e_p_max * l1 / (1.0 - k) + u_los_max * e_d_max / (1.0 - k) + 2.0 * m1) / u_min;
    let b_v = (e_p_max * l0 / (1.0 - k) + u_los_max * e_d_max * (u2 + u_min) / (1.0 - k) + 2.0 * m1 * vc) / u_min;

    let det_min = det_minimum(c, &bx);
    let k_a = (infl * (1.0 - det_min)).max(0.0);
    let y_min = [(ur_lo, -s.omega_max), (ur_lo, s.omega_max), (ur_hi, -s.omega_max), (ur_hi, s.omega_max)]
        .iter()
        .map(|&(ur, p)| damping_margin(c, ur, p))
        .fold(f64::INFINITY, f64::min);
    // a ≥ a_NSB + a_v for every admissible k_a, so failing with that floor is
    // decisive even when k_a ≥ 1.
    let a = (k_a < 1.0).then(|| (a_nsb + a_v) / (1.0 - k_a));
    // a ≥ a_NSB + a_v for every admissible k_a, so failing with that floor is
    // decisive even when k_a ≥ 1; without coupling the condition always holds.
    let verdict = if x_max == 0.0 && y_min > 0.0 {
        Verdict::Pass
    } else if y_min <= (a_nsb + a_v) * x_max {
        Verdict::Fail
    } else {
        match a {
            None => Verdict::Indeterminate,
            Some(a) if y_min > a * x_max => Verdict::Pass,
            Some(_) => Verdict::Fail,
        }
    };
    Ok(BoundConstants {
        state_box: bx,
        k_nsb: k,
        upsilon2_max_eff: u2,
        e_p_max,
        e_d_max,
        c_nsb,
        a_nsb,
        b_nsb,
        u_los_max,
        m1,
        l1,
        l0,
        det_min,
        k_a,
        k_a_printed: k_a_printed(c, u_min, cfg.model.u_max, vc),
        a_v,
        b_v,
        y_min,
        x_max,
        a,
        verdict,
    })
}

// ---------------------------------------------------------------------------
// Bound-domination audit on the nominal manifold

/// Manifold quantities at one state: `σ̃ = 0`, `u = u_d`, `R = R_d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldSample {
    pub vu_norm: f64,
    pub omega_ups: f64,
    pub omega0: f64,
    pub det: f64,
}

/// Evaluates vehicle `i` on the manifold at path parameter `xi` for stacked
/// sway/heave `sw`, angular rates `omegas` and body currents `vcs`.
pub fn manifold_sample(
    cfg: &ScenarioConfig,
    derived: &Derived,
    frame: &PathFrame,
    i: usize,
    sw: &[(f64, f64)],
    omegas: &[Vec3],
    vcs: &[Vec3],
) -> Result<ManifoldSample> {
    let c = &derived.affine;
    let k = derived.k_nsb;
    let u_min = cfg.model.u_min;
    let u = u_los(sw, derived.upsilon2_max_eff, u_min, k)?;
    let offsets = cfg.guidance.formation.offsets();
    let mut rates = Vec::with_capacity(sw.len());
    let mut surge = Vec::with_capacity(sw.len());
    for (j, pf) in offsets.iter().enumerate() {
        let ups = frame.r * (Vec3::x() + frame.kappa.cross(pf)) * u;
        let (ud, ok) = surge_reference(&ups, sw[j].0, sw[j].1, u_min);
        surge.push((ud, ok));
        rates.push(underactuated_rates(c, ud, sw[j].0, sw[j].1, &omegas[j], &vcs[j]));
    }
    let u_dot = u_los_rate(sw, &rates, u_min, k);
    let pf = offsets[i];
    let ep = Vec3::x() + frame.kappa.cross(&pf);
    let ups = frame.r * ep * u;
    let ups_dot = frame.r * (ep * u_dot + e_d(frame, &pf) * (u * u));
    let omega_ups = ups.cross(&ups_dot).norm() / ups.norm_squared();
    let (ud, ok) = surge[i];
    let v = Vec3::new(ud, sw[i].0, sw[i].1);
    let row = if ok { SurgeRow::Nominal { upsilon_dot_upsilon: ups.dot(&ups_dot) } } else { SurgeRow::Known(0.0) };
    let lp = affine_loop(c, &v, &vcs[i], row, u_min)?;
    let vu_norm = sw.iter().map(|(a, b)| a * a + b * b).sum::<f64>().sqrt();
    Ok(ManifoldSample { vu_norm, omega_ups, omega0: lp.omega0.norm(), det: lp.det })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DominationAudit {
    pub samples: usize,
    pub omega_ups_violations: usize,
    pub omega0_violations: usize,
    pub det_violations: usize,
    /// Largest ratio ‖ω_υ‖/(a_NSB‖v_u‖ + b_NSB).
    pub omega_ups_ratio: f64,
    /// Largest ratio ‖ω_0‖/(a_v‖v_u‖ + b_v).
    pub omega0_ratio: f64,
    pub det_min_seen: f64,
}

impl DominationAudit {
    pub fn add(&mut self, s: &ManifoldSample, b: &BoundConstants) {
        self.samples += 1;
        let r1 = s.omega_ups / (b.a_nsb * s.vu_norm + b.b_nsb);
        let r2 = s.omega0 / (b.a_v * s.vu_norm + b.b_v);
        self.omega_ups_ratio = self.omega_ups_ratio.max(r1);
        self.omega0_ratio = self.omega0_ratio.max(r2);
        self.omega_ups_violations += usize::from(r1 > 1.0);
        self.omega0_violations += usize::from(r2 > 1.0);
        if self.samples == 1 {
            self.det_min_seen = s.det;
        }
        self.det_min_seen = self.det_min_seen.min(s.det);
        self.det_violations += usize::from(s.det < 1.0 - b.k_a);
    }

    pub fn violations(&self) -> usize {
        self.omega_ups_violations + self.omega0_violations + self.det_violations
    }
}

fn random_disk<R: Rng>(rng: &mut R, r: f64) -> (f64, f64) {
    let rho = r * rng.gen::<f64>().sqrt();
    let th = rng.gen::<f64>() * std::f64::consts::TAU;
    (rho * th.cos(), rho * th.sin())
}

fn random_ball<R: Rng>(rng: &mut R, r: f64) -> Vec3 {
    loop {
        let x = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if x.norm_squared() <= 1.0 {
            return x * r;
        }
    }
}

fn random_direction<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let x = random_ball(rng, 1.0);
        let n = x.norm();
        if n > 1e-3 {
            return x / n;
        }
    }
}

/// Random states from the box, seeded by the scenario.
pub fn sampled_domination(cfg: &ScenarioConfig, derived: &Derived, b: &BoundConstants, count: usize) -> Result<DominationAudit> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed);
    let n = cfg.n();
    let mut audit = DominationAudit::default();
    let (lo, hi) = (cfg.xi_grid.xi_min, cfg.xi_grid.xi_max);
    for _ in 0..count {
        let xi = rng.gen_range(lo..=hi);
        let frame = cfg.path.evaluate(xi)?;
        let sw: Vec<(f64, f64)> = (0..n).map(|_| random_disk(&mut rng, b.state_box.lateral_max)).collect();
        let omegas: Vec<Vec3> = (0..n).map(|_| random_ball(&mut rng, b.state_box.omega_max)).collect();
        let vcs: Vec<Vec3> = (0..n).map(|_| random_direction(&mut rng) * b.state_box.current).collect();
        let i = rng.gen_range(0..n);
        let s = manifold_sample(cfg, derived, &frame, i, &sw, &omegas, &vcs)?;
        audit.add(&s, b);
    }
    Ok(audit)
}

/// Projects every logged state onto the manifold: path frame at the logged ξ,
/// logged sway/heave and angular rates, current rotated into each body frame.
pub fn trajectory_domination(
    cfg: &ScenarioConfig,
    derived: &Derived,
    b: &BoundConstants,
    records: &[TelemetryRecord],
) -> Result<DominationAudit> {
    let mut audit = DominationAudit::default();
    for r in records {
        let frame = cfg.path.evaluate(r.xi)?;
        let sw: Vec<(f64, f64)> = r.vehicles.iter().map(|v| (v.v.y, v.v.z)).collect();
        let omegas: Vec<Vec3> = r.vehicles.iter().map(|v| v.w).collect();
        let vcs: Vec<Vec3> = r.vehicles.iter().map(|v| expm_so3(&v.attitude).transpose() * cfg.current).collect();
        for i in 0..r.vehicles.len() {
            audit.add(&manifold_sample(cfg, derived, &frame, i, &sw, &omegas, &vcs)?, b);
        }
    }
    Ok(audit)
}

/// Condensed Lyapunov audit for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSummary {
    pub checked_steps: usize,
    pub fd_mismatches: usize,
    pub max_fd_error: f64,
    pub violations: usize,
    pub analytic_violations: usize,
    pub log_slope: Option<f64>,
    pub r_obs: f64,
}

impl From<&LyapunovAudit> for LyapunovSummary {
    fn from(a: &LyapunovAudit) -> Self {
        Self {
            checked_steps: a.checked_steps,
            fd_mismatches: a.fd_mismatches,
            max_fd_error: a.max_fd_error,
            violations: a.violations,
            analytic_violations: a.analytic_violations,
            log_slope: a.log_slope,
            r_obs: a.r_obs,
        }
    }
}

/// Everything the stability checks say about one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub bounds: BoundConstants,
    pub sampled: DominationAudit,
    pub trajectory: Option<DominationAudit>,
    pub lyapunov: Option<LyapunovSummary>,
    /// Largest ‖(v_i, w_i)‖ of the run.
    pub max_sway_heave: Option<f64>,
    /// False when a passing verdict is contradicted by the sway/heave ceiling.
    pub consistent: bool,
    pub warnings: Vec<String>,
}

impl StabilityReport {
    /// Bounds, verdict and sampled domination; no run required.
    pub fn precheck(cfg: &ScenarioConfig, derived: &Derived) -> Result<Self> {
        let bounds = bound_constants(cfg, derived)?;
        let sampled = sampled_domination(cfg, derived, &bounds, cfg.diagnostics.samples)?;
        let mut warnings = Vec::new();
        if bounds.k_a >= 1.0 {
            warnings.push(format!("k_a = {:.4} >= 1: loop resolvability is not guaranteed by the bound", bounds.k_a));
        }
        match bounds.verdict {
            Verdict::Fail => warnings.push(format!(
                "boundedness condition fails: Y_min = {:.4} <= a·X_max with a >= {:.4}, X_max = {:.4}",
                bounds.y_min,
                bounds.a_nsb + bounds.a_v,
                bounds.x_max
            )),
            Verdict::Indeterminate => warnings.push("boundedness condition indeterminate".into()),
            Verdict::Pass => {}
        }
        Ok(Self { bounds, sampled, trajectory: None, lyapunov: None, max_sway_heave: None, consistent: true, warnings })
    }

    /// Adds the audits that need a finished run.
    pub fn attach_run(&mut self, cfg: &ScenarioConfig, derived: &Derived, run: &RunOutput) -> Result<()> {
        self.trajectory = Some(trajectory_domination(cfg, derived, &self.bounds, &run.records)?);
        if cfg.sim.mode == SimMode::Ideal {
            self.lyapunov = Some((&lyapunov_audit(&run.lyapunov_points(), cfg)).into());
        }
        let m = run.summary.max_sway_heave;
        self.max_sway_heave = Some(m);
        let ceiling = cfg.diagnostics.sway_heave_ceiling;
        if self.bounds.verdict == Verdict::Pass && m >= ceiling {
            self.consistent = false;
            self.warnings.push(format!("boundedness verdict passed but max sway/heave {m:.4} reached the ceiling {ceiling}"));
        }
        Ok(())
    }

    pub fn domination_violations(&self) -> usize {
        self.sampled.violations() + self.trajectory.map_or(0, |t| t.violations())
    }
}

// ---------------------------------------------------------------------------
// Lyapunov audit of a run

/// One logged step as seen by the Lyapunov audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovPoint {
    pub t: f64,
    pub v: f64,
    /// Analytic V̇, present only in nominal mode.
    pub vdot: Option<f64>,
    pub sigma_norm: f64,
    pub u_los: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovAudit {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub vdot_analytic: Vec<Option<f64>>,
    pub vdot_fd: Vec<Option<f64>>,
    pub k_r: Vec<Option<f64>>,
    /// max ‖σ̃‖ over the run.
    pub r_obs: f64,
    /// Steps where the analytic and finite-difference V̇ disagree.
    pub fd_mismatches: usize,
    pub max_fd_error: f64,
    /// Steps where the finite-difference V̇ exceeds −k_r‖σ̃‖² + tol.
    pub violations: usize,
    /// Same test with the analytic V̇.
    pub analytic_violations: usize,
    pub log_slope: Option<f64>,
    pub checked_steps: usize,
}

pub fn lyapunov_audit(points: &[LyapunovPoint], cfg: &ScenarioConfig) -> LyapunovAudit {
    let s = &cfg.diagnostics;
    let g = &cfg.guidance;
    let r_obs = points.iter().map(|p| p.sigma_norm).fold(0.0, f64::max);
    let n = points.len();
    let mut out = LyapunovAudit {
        t: points.iter().map(|p| p.t).collect(),
        v: points.iter().map(|p| p.v).collect(),
        vdot_analytic: points.iter().map(|p| p.vdot).collect(),
        vdot_fd: vec![None; n],
        k_r: vec![None; n],
        r_obs,
        fd_mismatches: 0,
        max_fd_error: 0.0,
        violations: 0,
        analytic_violations: 0,
        log_slope: None,
        checked_steps: 0,
    };
    let (mut ts, mut vs) = (Vec::new(), Vec::new());
    for k in 0..n {
        let p = &points[k];
        let Some(vd) = p.vdot else { continue };
        ts.push(p.t);
        vs.push(p.v);
        let kr = k_r(r_obs, g.formation_gains.upsilon2_max, g.formation_gains.lambda2, p.u_los, g.k_xi, g.delta0);
        out.k_r[k] = Some(kr);
        let bound = -kr * p.sigma_norm * p.sigma_norm + s.decrease_tol;
        out.analytic_violations += usize::from(vd > bound);
        if k == 0 || k + 1 == n || points[k - 1].vdot.is_none() || points[k + 1].vdot.is_none() {
            continue;
        }
        let fd = (points[k + 1].v - points[k - 1].v) / (points[k + 1].t - points[k - 1].t);
        out.vdot_fd[k] = Some(fd);
        out.checked_steps += 1;
        let err = (fd - vd).abs();
        out.max_fd_error = out.max_fd_error.max(err / s.vdot_abs_tol.max(s.vdot_rel_tol * vd.abs()));
        out.fd_mismatches += usize::from(err > s.vdot_abs_tol.max(s.vdot_rel_tol * vd.abs()));
        out.violations += usize::from(fd > bound);
    }
    out.log_slope = log_linear_fit(&ts, &vs).map(|f| f.0);
    out
}

/// Applies a random rotation error of at most `max_angle` to `r`.
pub fn random_rotation_error<R: Rng>(rng: &mut R, r: &Mat3, max_angle: f64) -> Mat3 {
    r * expm_so3(&(random_direction(rng) * rng.gen_range(0.0..max_angle)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::affine_loop;
    use crate::vehicle::ModelParams;
    use proptest::prelude::*;
    use rand::Rng;

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn lyapunov_examples() {
        assert_eq!(lyapunov(&dv(&[0.0; 6]), &Vec3::zeros()), 0.0);
        assert!((lyapunov(&dv(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &Vec3::zeros()) - 0.5).abs() < 1e-15);
        let s = dv(&[0.3, -1.2, 2.0]);
        let p = Vec3::new(-0.7, 0.1, 4.0);
        let norm2 = s.iter().chain(p.iter()).map(|x| x * x).sum::<f64>();
        assert!((lyapunov(&s, &p) - 0.5 * norm2).abs() < 1e-14);
    }

    #[test]
    fn vdot_examples() {
        assert_eq!(vdot_analytic(&dv(&[0.0; 3]), &Vec3::zeros(), 0.1, 0.5, 1.0, 0.2, 5.0, 5.0), 0.0);
        let x = 2.0f64;
        let v = vdot_analytic(&dv(&[0.0; 3]), &Vec3::new(x, 0.0, 0.0), 0.1, 0.5, 1.3, 0.2, 5.0, 5.0);
        assert!((v + 1.3 * 0.2 * x * x / (1.0 + x * x).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn k_r_limits_and_monotone() {
        let k0 = k_r(1e-12, 0.5, 0.1, 1.5, 0.2, 5.0);
        assert!((k0 - (0.5f64 * 0.1).min(1.5 * 0.2).min(1.5 / 5.0)).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for i in 0..2000 {
            let r = 0.05 * i as f64;
            let k = k_r(r, 0.5, 0.1, 1.5, 0.2, 5.0);
            assert!(k <= prev + 1e-15);
            prev = k;
        }
    }

    #[test]
    fn perturbation_examples() {
        let r = expm_so3(&Vec3::new(0.1, 0.2, -0.3));
        let ups = Vec3::new(1.0, 0.2, 0.1);
        let (g, _) = perturbation(&Vec3::zeros(), 0.0, &r, &ups);
        assert_eq!(g.norm(), 0.0);
        let (g, b) = perturbation(&Vec3::zeros(), 0.1, &r, &ups);
        assert!((g.norm() - 0.1).abs() < 1e-15 && (b - 0.1).abs() < 1e-15);
    }

    #[test]
    fn perturbation_is_rotation_error() {
        let delta = Vec3::new(0.4, -0.3, 1.1);
        let ups = Vec3::new(1.0, -0.5, 0.2);
        let (g, _) = perturbation(&delta, 0.0, &Mat3::identity(), &ups);
        assert!((g - (expm_so3(&delta) - Mat3::identity()) * ups).norm() < 1e-14);
    }

    proptest! {
        #[test]
        fn perturbation_bound_holds(
            d in prop::array::uniform3(-1.8f64..1.8), ut in -1.0f64..1.0,
            ux in -2.0f64..2.0, uy in -2.0f64..2.0, uz in -2.0f64..2.0, rr in prop::array::uniform3(-3.0f64..3.0),
        ) {
            let (g, b) = perturbation(&Vec3::from(d), ut, &expm_so3(&Vec3::from(rr)), &Vec3::new(ux, uy, uz));
            prop_assert!(g.norm() <= b + 1e-12);
        }

        #[test]
        fn vdot_nonpositive(s in prop::collection::vec(-5.0f64..5.0, 6), p in prop::array::uniform3(-20.0f64..20.0)) {
            let pb = Vec3::from(p);
            let delta = (25.0 + pb.norm_squared()).sqrt();
            let d = (delta * delta + pb.y * pb.y + pb.z * pb.z).sqrt();
            let v = vdot_analytic(&DVector::from_vec(s.clone()), &pb, 0.1, 0.5, 1.2, 0.2, delta, d);
            prop_assert!(v <= 0.0);
            let zero = s.iter().all(|x| *x == 0.0) && pb.norm() == 0.0;
            prop_assert!(zero || v < 0.0);
        }

        #[test]
        fn decrease_bound_on_ball(s in prop::collection::vec(-3.0f64..3.0, 6), p in prop::array::uniform3(-3.0f64..3.0)) {
            let pb = Vec3::from(p);
            let sig = DVector::from_vec(s);
            let r2 = sig.norm_squared() + pb.norm_squared();
            let delta = (25.0 + pb.norm_squared()).sqrt();
            let d = (delta * delta + pb.y * pb.y + pb.z * pb.z).sqrt();
            let v = vdot_analytic(&sig, &pb, 0.1, 0.5, 1.2, 0.2, delta, d);
            let r = 9.0;
            prop_assert!(v <= -k_r(r, 0.5, 0.1, 1.2, 0.2, 5.0) * r2 + 1e-12);
        }

        #[test]
        fn det_expansion_matches_matrix(
            u in 0.1f64..3.0, v in -1.0f64..1.0, w in -1.0f64..1.0, c in prop::array::uniform3(-0.3f64..0.3),
        ) {
            let coeffs = ModelParams::torpedo().affine();
            let vel = Vec3::new(u, v, w);
            let vc = Vec3::from(c);
            let lp = affine_loop(&coeffs, &vel, &vc, SurgeRow::Nominal { upsilon_dot_upsilon: 0.0 }, 0.1).unwrap();
            let e = det_expansion(&coeffs, &vel, &vc);
            prop_assert!((e - lp.det).abs() < 1e-9 * (1.0 + lp.det.abs()), "{} vs {}", e, lp.det);
        }
    }

    /// Coefficients with only the named entries nonzero.
    fn only(entries: &[(&str, f64)]) -> AffineCoeffs {
        let mut c = AffineCoeffs {
            x_v0: 0.0, x_v1: 0.0, y_v0: 0.0, y_v1: 0.0, z_v0: 0.0, z_v1: 0.0,
            x_w0: 0.0, x_w1: 0.0, y_w0: 0.0, y_w1: 0.0, z_w0: 0.0, z_w1: 0.0,
        };
        for &(k, v) in entries {
            match k {
                "x_v0" => c.x_v0 = v,
                "x_v1" => c.x_v1 = v,
                "x_w0" => c.x_w0 = v,
                "x_w1" => c.x_w1 = v,
                "z_v1" => c.z_v1 = v,
                "z_w1" => c.z_w1 = v,
                _ => unreachable!(),
            }
        }
        c
    }

    fn matrix_det(c: &AffineCoeffs, v: &Vec3, vc: &Vec3) -> f64 {
        affine_loop(c, v, vc, SurgeRow::Nominal { upsilon_dot_upsilon: 0.0 }, 1e-3).unwrap().det
    }

    /// Each group of expansion terms checked against the matrix determinant
    /// with every other coefficient switched off.
    #[test]
    fn det_terms_by_coefficient_group() {
        let v = Vec3::new(1.3, 0.4, -0.6);
        let vc = Vec3::new(0.07, -0.11, 0.05);
        type Group = (Vec<(&'static str, f64)>, Vec<usize>);
        let groups: Vec<Group> = vec![
            (vec![], vec![0, 1, 2]),
            (vec![("x_v0", 0.3)], vec![0, 1, 2, 3, 9]),
            (vec![("x_w0", -0.4)], vec![0, 1, 2, 4, 10]),
            (vec![("x_v1", -0.5)], vec![0, 1, 2, 5, 6, 14]),
            (vec![("x_w1", 0.6)], vec![0, 1, 2, 5, 7, 15]),
            (vec![("z_w1", -0.7)], vec![0, 1, 2, 6, 14]),
            (vec![("z_v1", 0.8)], vec![0, 1, 2, 7, 15]),
            (vec![("x_v0", 0.3), ("x_w0", -0.4)], vec![0, 1, 2, 3, 4, 8, 9, 10]),
            (vec![("x_v1", -0.5), ("x_w1", 0.6)], vec![0, 1, 2, 5, 6, 7, 13, 14, 15]),
            (vec![("x_v1", -0.5), ("z_w1", -0.7)], vec![0, 1, 2, 5, 6, 14, 16, 20]),
            (vec![("x_w1", 0.6), ("z_v1", 0.8)], vec![0, 1, 2, 5, 7, 15, 17, 21]),
            (vec![("x_v0", 0.3), ("x_w1", 0.6), ("z_w1", -0.7)], vec![0, 1, 2, 3, 5, 6, 7, 9, 11, 14, 15, 18]),
            (vec![("x_w0", -0.4), ("x_v1", -0.5), ("z_v1", 0.8)], vec![0, 1, 2, 4, 5, 6, 7, 10, 12, 14, 15, 19]),
        ];
        for (entries, terms) in groups {
            let c = only(&entries);
            let t = det_numerator_terms(&c, &v, &vc);
            let active: f64 = terms.iter().map(|&k| t[k]).sum();
            let rest: f64 = (0..22).filter(|k| !terms.contains(k)).map(|k| t[k].abs()).sum();
            assert!(rest < 1e-15, "{entries:?}: unexpected terms");
            let d = active / (v.x * v.norm_squared());
            assert!((d - matrix_det(&c, &v, &vc)).abs() < 1e-12, "{entries:?}: {d} vs {}", matrix_det(&c, &v, &vc));
        }
    }

    #[test]
    fn det_minimum_is_attained_below_samples() {
        let c = ModelParams::torpedo().affine();
        let bx = StateBox { u_min: 0.1, u_hi: 3.0, lateral_max: 1.0, omega_max: 1.0, current: 0.16 };
        let dmin = det_minimum(&c, &bx);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let u = rng.gen_range(0.1..3.0);
            let (v, w) = random_disk(&mut rng, 1.0);
            let vc = random_direction(&mut rng) * 0.16;
            assert!(det_at(&c, &Vec3::new(u, v, w), &vc, 0.1) >= dmin - 1e-12);
        }
    }

    #[test]
    fn envelope_of_pure_exponential() {
        let ts: Vec<f64> = (0..100).map(|k| k as f64 * 0.1).collect();
        let es: Vec<f64> = ts.iter().map(|t| 2.0 * (-0.7 * t).exp()).collect();
        let (l, c) = exponential_envelope(&ts, &es).unwrap();
        assert!((l - 0.7).abs() < 1e-9 && (c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn damping_margin_of_diagonal_block() {
        let c = ModelParams::torpedo().affine();
        let m = damping_margin(&c, 1.0, 0.0);
        let expect = (-c.y_v(1.0)).min(-c.y_w(1.0));
        // Off-diagonal Z_v0 + Z_w0 vanishes for the torpedo model at p = 0.
        assert!((m - expect).abs() < 1e-12);
    }
}
