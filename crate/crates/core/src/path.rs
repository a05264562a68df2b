//! Parametric paths, the path-tangential frame and the ξ update law.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::FormationSpec;
use crate::rotations::{logm_so3, Mat3, Vec3};

/// Tangents whose horizontal part is shorter than this are treated as vertical.
pub const VERTICAL_TOL: f64 = 1e-6;
/// Minimum admissible ‖∂p/∂ξ‖.
pub const MIN_SPEED: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathSpec {
    StraightLine {
        origin: Vec3,
        direction: Vec3,
    },
    /// `origin + (ξ, a cos fξ, b sin fξ)`.
    Spiral {
        origin: Vec3,
        a: f64,
        b: f64,
        spatial_frequency: f64,
    },
    Generic(GenericPath),
}

/// Evaluated path point with its frame and curvature quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathFrame {
    pub xi: f64,
    pub p: Vec3,
    /// ∂p/∂ξ.
    pub d1: Vec3,
    /// ‖∂p/∂ξ‖.
    pub speed: f64,
    pub r: Mat3,
    /// Angular velocity of the frame per unit ξ, in path axes.
    pub omega: Vec3,
    /// ω_p / speed.
    pub kappa: Vec3,
    /// ∂κ/∂ξ.
    pub iota: Vec3,
}

impl PathFrame {
    pub fn tangent(&self) -> Vec3 {
        self.r.column(0).into()
    }

    /// Local contribution `‖κ‖·r_max·(1 + k_ξ)` to k_NSB.
    pub fn k_nsb_local(&self, r_max: f64, k_xi: f64) -> f64 {
        self.kappa.norm() * r_max * (1.0 + k_xi)
    }
}

/// Uniform ξ grid used for suprema and regularity checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiGrid {
    pub xi_min: f64,
    pub xi_max: f64,
    #[serde(default = "default_grid_points")]
    pub points: usize,
}

fn default_grid_points() -> usize {
    10_000
}

impl XiGrid {
    pub fn new(xi_min: f64, xi_max: f64, points: usize) -> Self {
        Self { xi_min, xi_max, points }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.points.max(2);
        let step = (self.xi_max - self.xi_min) / (n - 1) as f64;
        (0..n).map(move |k| self.xi_min + step * k as f64)
    }
}

/// Suprema of curvature-related quantities over a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSup {
    pub kappa: f64,
    /// sup ‖ι‖/speed.
    pub iota_over_speed: f64,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl PathSpec {
    pub fn straight_line(origin: Vec3, direction: Vec3) -> Self {
        PathSpec::StraightLine { origin, direction }
    }

    pub fn spiral(origin: Vec3, a: f64, b: f64, spatial_frequency: f64) -> Self {
        PathSpec::Spiral { origin, a, b, spatial_frequency }
    }

    /// Position and first three derivatives.
    pub fn derivatives(&self, xi: f64) -> Result<[Vec3; 4]> {
        match self {
            PathSpec::StraightLine { origin, direction } => {
                Ok([origin + direction * xi, *direction, Vec3::zeros(), Vec3::zeros()])
            }
            PathSpec::Spiral { origin, a, b, spatial_frequency: f } => {
                let (s, c) = (f * xi).sin_cos();
                Ok([
                    origin + Vec3::new(xi, a * c, b * s),
                    Vec3::new(1.0, -a * f * s, b * f * c),
                    Vec3::new(0.0, -a * f * f * c, -b * f * f * s),
                    Vec3::new(0.0, a * f * f * f * s, -b * f * f * f * c),
                ])
            }
            PathSpec::Generic(g) => g.derivatives(xi),
        }
    }

    pub fn evaluate(&self, xi: f64) -> Result<PathFrame> {
        self.evaluate_with_prev(xi, None)
    }

    /// Like [`evaluate`](Self::evaluate), carrying `prev_y` forward at vertical tangents.
    pub fn evaluate_with_prev(&self, xi: f64, prev_y: Option<&Vec3>) -> Result<PathFrame> {
        let [p, d1, d2, d3] = self.derivatives(xi)?;
        match self {
            PathSpec::Generic(g) => {
                let h = g.fd_step();
                let mut f = frame_from_derivatives(xi, p, d1, d2, d3, prev_y)?;
                let omega_at = |x: f64| -> Result<(Vec3, f64)> {
                    let [_, a1, a2, _] = g.derivatives(x - h)?;
                    let [_, b1, b2, _] = g.derivatives(x + h)?;
                    let [_, c1, _, _] = g.derivatives(x)?;
                    let ra = frame_axes(&a1, &a2, prev_y)?;
                    let rb = frame_axes(&b1, &b2, prev_y)?;
                    Ok((logm_so3(&(ra.transpose() * rb)) / (2.0 * h), c1.norm()))
                };
                let (om, s) = omega_at(xi)?;
                let (om_m, s_m) = omega_at(xi - h)?;
                let (om_p, s_p) = omega_at(xi + h)?;
                f.omega = om;
                f.kappa = om / s;
                f.iota = (om_p / s_p - om_m / s_m) / (2.0 * h);
                Ok(f)
            }
            _ => frame_from_derivatives(xi, p, d1, d2, d3, prev_y),
        }
    }

    /// Rejects the path if ‖∂p/∂ξ‖ drops below [`MIN_SPEED`] anywhere on the grid.
    pub fn check_regular(&self, grid: &XiGrid) -> Result<()> {
        for xi in grid.iter() {
            let speed = self.derivatives(xi)?[1].norm();
            if !(speed >= MIN_SPEED) {
                return Err(Error::Regularity { xi, speed });
            }
        }
        Ok(())
    }

    pub fn curvature_sup(&self, grid: &XiGrid) -> Result<CurvatureSup> {
        let mut out = CurvatureSup {
            kappa: 0.0,
            iota_over_speed: 0.0,
            speed_min: f64::INFINITY,
            speed_max: 0.0,
        };
        let mut prev_y: Option<Vec3> = None;
        for xi in grid.iter() {
            let f = self.evaluate_with_prev(xi, prev_y.as_ref())?;
            prev_y = Some(f.r.column(1).into());
            out.kappa = out.kappa.max(f.kappa.norm());
            out.iota_over_speed = out.iota_over_speed.max(f.iota.norm() / f.speed);
            out.speed_min = out.speed_min.min(f.speed);
            out.speed_max = out.speed_max.max(f.speed);
        }
        Ok(out)
    }
}

/// R_p from the first two derivatives: x = tangent, y horizontal, z = x × y.
fn frame_axes(d1: &Vec3, _d2: &Vec3, prev_y: Option<&Vec3>) -> Result<Mat3> {
    let speed = d1.norm();
    if !(speed >= MIN_SPEED) {
        return Err(Error::Regularity { xi: f64::NAN, speed });
    }
    let t = d1 / speed;
    let rho = t.x.hypot(t.y);
    let y = if rho >= VERTICAL_TOL {
        Vec3::new(-t.y, t.x, 0.0) / rho
    } else {
        let seed = prev_y.copied().unwrap_or_else(Vec3::y);
        let mut y = seed - t * t.dot(&seed);
        if y.norm() < 1e-9 {
            y = Vec3::x() - t * t.x;
        }
        y.normalize()
    };
    let z = t.cross(&y);
    Ok(Mat3::from_columns(&[t, y, z]))
}

/// Frame, angular velocity and curvature derivative from analytic derivatives.
pub fn frame_from_derivatives(
    xi: f64,
    p: Vec3,
    d1: Vec3,
    d2: Vec3,
    d3: Vec3,
    prev_y: Option<&Vec3>,
) -> Result<PathFrame> {
    let speed = d1.norm();
    if !(speed >= MIN_SPEED) {
        return Err(Error::Regularity { xi, speed });
    }
    let r = frame_axes(&d1, &d2, prev_y)?;
    let t: Vec3 = r.column(0).into();
    let y: Vec3 = r.column(1).into();
    let z: Vec3 = r.column(2).into();
    let rho = t.x.hypot(t.y);
    let vertical = rho < VERTICAL_TOL;

    let s2 = speed * speed;
    let s_dot = t.dot(&d2);
    let kz = y.dot(&d2) / s2;
    let ky = -z.dot(&d2) / s2;
    let kx = if vertical { 0.0 } else { t.z * kz / rho };
    let kappa = Vec3::new(kx, ky, kz);
    let omega = kappa * speed;

    // Frame rates per unit ξ: y' = −ω_z x + ω_x z, z' = ω_y x − ω_x y.
    let t_dot = (d2 - t * s_dot) / speed;
    let y_dot = -t * omega.z + z * omega.x;
    let z_dot = t * omega.y - y * omega.x;
    let s3 = s2 * speed;
    let kz_dot = (y_dot.dot(&d2) + y.dot(&d3)) / s2 - 2.0 * y.dot(&d2) * s_dot / s3;
    let ky_dot = -(z_dot.dot(&d2) + z.dot(&d3)) / s2 + 2.0 * z.dot(&d2) * s_dot / s3;
    let kx_dot = if vertical {
        0.0
    } else {
        let rho_dot = (t.x * t_dot.x + t.y * t_dot.y) / rho;
        (t_dot.z * kz + t.z * kz_dot) / rho - t.z * kz * rho_dot / (rho * rho)
    };
    Ok(PathFrame {
        xi,
        p,
        d1,
        speed,
        r,
        omega,
        kappa,
        iota: Vec3::new(kx_dot, ky_dot, kz_dot),
    })
}

/// `R_pᵀ (p_b − p_p(ξ))`.
pub fn path_error(p_b: &Vec3, frame: &PathFrame) -> Vec3 {
    frame.r.transpose() * (p_b - frame.p)
}

/// ξ̇ = U (Δ/D + k_ξ x/√(1+x²)) / ‖∂p/∂ξ‖.
pub fn xi_rate(frame: &PathFrame, x_b: f64, u_los: f64, delta: f64, d: f64, k_xi: f64) -> f64 {
    u_los * (delta / d + k_xi * x_b / (1.0 + x_b * x_b).sqrt()) / frame.speed
}

/// sup over the grid of ‖κ‖·max‖p_f‖·(1 + k_ξ); errors when it reaches 1.
pub fn k_nsb(path: &PathSpec, formation: &FormationSpec, k_xi: f64, grid: &XiGrid) -> Result<f64> {
    let r_max = formation.max_offset();
    let sup = path.curvature_sup(grid)?;
    let k = sup.kappa * r_max * (1.0 + k_xi);
    if !(k < 1.0) {
        return Err(Error::Config(vec![format!(
            "k_NSB = {k:.4} >= 1 (sup curvature {:.4e}, formation radius {r_max}); the LOS speed law is undefined",
            sup.kappa
        )]));
    }
    Ok(k)
}

/// Natural cubic spline through samples `(ξ_k, p_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GenericSamples", into = "GenericSamples")]
pub struct GenericPath {
    xi: Vec<f64>,
    points: Vec<Vec3>,
    /// Second derivatives at the knots.
    m: Vec<Vec3>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenericSamples {
    pub xi: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl TryFrom<GenericSamples> for GenericPath {
    type Error = Error;
    fn try_from(s: GenericSamples) -> Result<Self> {
        GenericPath::new(s.xi, s.points)
    }
}

impl From<GenericPath> for GenericSamples {
    fn from(g: GenericPath) -> Self {
        GenericSamples { xi: g.xi, points: g.points }
    }
}

impl GenericPath {
    pub fn new(xi: Vec<f64>, points: Vec<Vec3>) -> Result<Self> {
        let n = xi.len();
        if n < 3 || points.len() != n {
            return Err(Error::Config(vec!["generic path needs at least 3 samples with matching ξ".into()]));
        }
        if xi.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(vec!["generic path ξ samples must be strictly increasing".into()]));
        }
        // Thomas algorithm for the natural-spline moment system.
        let mut m = vec![Vec3::zeros(); n];
        let mut c_prime = vec![0.0; n];
        let mut d_prime = vec![Vec3::zeros(); n];
        for i in 1..n - 1 {
            let h0 = xi[i] - xi[i - 1];
            let h1 = xi[i + 1] - xi[i];
            let rhs = ((points[i + 1] - points[i]) / h1 - (points[i] - points[i - 1]) / h0) * 6.0;
            let diag = 2.0 * (h0 + h1) - h0 * c_prime[i - 1];
            c_prime[i] = h1 / diag;
            d_prime[i] = (rhs - d_prime[i - 1] * h0) / diag;
        }
        for i in (1..n - 1).rev() {
            m[i] = d_prime[i] - m[i + 1] * c_prime[i];
        }
        Ok(Self { xi, points, m })
    }

    fn fd_step(&self) -> f64 {
        let span = self.xi[self.xi.len() - 1] - self.xi[0];
        1e-4 * span / (self.xi.len() - 1) as f64
    }

    pub fn derivatives(&self, x: f64) -> Result<[Vec3; 4]> {
        let n = self.xi.len();
        if !(x >= self.xi[0] && x <= self.xi[n - 1]) {
            return Err(Error::Domain("ξ outside the generic path support"));
        }
        let k = self.xi.partition_point(|&v| v <= x).clamp(1, n - 1) - 1;
        let h = self.xi[k + 1] - self.xi[k];
        let a = (self.xi[k + 1] - x) / h;
        let b = (x - self.xi[k]) / h;
        let (p0, p1, m0, m1) = (self.points[k], self.points[k + 1], self.m[k], self.m[k + 1]);
        let p = p0 * a + p1 * b + (m0 * (a * a * a - a) + m1 * (b * b * b - b)) * (h * h / 6.0);
        let d1 = (p1 - p0) / h + (m1 * (3.0 * b * b - 1.0) - m0 * (3.0 * a * a - 1.0)) * (h / 6.0);
        let d2 = m0 * a + m1 * b;
        let d3 = (m1 - m0) / h;
        Ok([p, d1, d2, d3])
    }
}
