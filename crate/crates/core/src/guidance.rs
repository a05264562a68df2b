//! NSB tasks, null-space composition, obstacle avoidance and depth limiting.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::{xi_rate, PathFrame};
use crate::rotations::{angle_between_2d, hat, Vec3};

pub type Vec2 = Vector2<f64>;

/// Relative singular-value cutoff for pseudoinverses.
pub const PINV_RCOND: f64 = 1e-8;
/// Vehicles closer than this are treated as coincident.
pub const COINCIDENT_DIST: f64 = 1e-6;

/// Displacements of the vehicles from the barycenter, in the formation frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec3>", into = "Vec<Vec3>")]
pub struct FormationSpec {
    offsets: Vec<Vec3>,
}

impl TryFrom<Vec<Vec3>> for FormationSpec {
    type Error = Error;
    fn try_from(v: Vec<Vec3>) -> Result<Self> {
        FormationSpec::new(v)
    }
}

impl From<FormationSpec> for Vec<Vec3> {
    fn from(f: FormationSpec) -> Self {
        f.offsets
    }
}

impl FormationSpec {
    pub fn new(offsets: Vec<Vec3>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::Config(vec!["formation needs at least one vehicle".into()]));
        }
        let sum: Vec3 = offsets.iter().sum();
        let scale = offsets.iter().map(|p| p.norm()).fold(1.0, f64::max);
        if sum.norm() > 1e-12 * scale {
            return Err(Error::Config(vec![format!(
                "formation offsets must sum to zero (sum = [{:.3e}, {:.3e}, {:.3e}])",
                sum.x, sum.y, sum.z
            )]));
        }
        Ok(Self { offsets })
    }

    pub fn n(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }

    pub fn max_offset(&self) -> f64 {
        self.offsets.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }
}

pub fn barycenter(positions: &[Vec3]) -> Vec3 {
    positions.iter().sum::<Vec3>() / positions.len() as f64
}

/// Max planar distance from the barycenter.
pub fn formation_radius(positions: &[Vec3]) -> f64 {
    let b = barycenter(positions);
    positions.iter().map(|p| (p.x - b.x).hypot(p.y - b.y)).fold(0.0, f64::max)
}

pub fn stack(vs: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(vs.len() * 3, vs.iter().flat_map(|v| [v.x, v.y, v.z]))
}

pub fn unstack(x: &DVector<f64>) -> Vec<Vec3> {
    (0..x.len() / 3).map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])).collect()
}

/// `x tanh(‖x‖)/‖x‖`, zero at the origin.
pub fn saturate(x: &DVector<f64>) -> DVector<f64> {
    let n = x.norm();
    if n == 0.0 {
        return x.clone();
    }
    x * (n.tanh() / n)
}

/// Moore–Penrose pseudoinverse plus the relative smallest singular value.
pub fn pinv_with_rcond(j: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    if j.nrows() == 0 || j.ncols() == 0 {
        return (DMatrix::zeros(j.ncols(), j.nrows()), 1.0);
    }
    let svd = j.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rel = if smax > 0.0 { smin / smax } else { 0.0 };
    let pinv = svd
        .pseudo_inverse(PINV_RCOND * smax.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(j.ncols(), j.nrows()));
    // One Newton–Schulz step, X ← 2X − XJX: the SVD alone only reaches ~1e-11.
    let refined = &pinv * 2.0 - &pinv * j * &pinv;
    (refined, rel)
}

/// Pseudoinverse that rejects rank-deficient Jacobians.
pub fn pinv(j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, rel) = pinv_with_rcond(j);
    if j.nrows() > 0 && rel <= PINV_RCOND {
        return Err(Error::IllConditioned { min_sv: rel });
    }
    Ok(p)
}

/// Null-space projector `I − J†J`.
pub fn null_projector(j: &DMatrix<f64>, j_pinv: &DMatrix<f64>) -> DMatrix<f64> {
    let n = j.ncols();
    DMatrix::identity(n, n) - j_pinv * j
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutput {
    pub upsilon: DVector<f64>,
    pub j: DMatrix<f64>,
    pub active: bool,
    /// σ − σ_d.
    pub sigma_tilde: DVector<f64>,
}

impl TaskOutput {
    fn inactive(dim: usize) -> Self {
        Self {
            upsilon: DVector::zeros(dim),
            j: DMatrix::zeros(0, dim),
            active: false,
            sigma_tilde: DVector::zeros(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColavParams {
    pub d_colav: f64,
    pub u_colav: f64,
    /// Scalar CLIK gain (Λ₁ = λ₁ I).
    #[serde(default = "one")]
    pub lambda1: f64,
    /// Active pairs release above `release_factor · d_colav`.
    #[serde(default = "default_release")]
    pub release_factor: f64,
}

fn one() -> f64 {
    1.0
}

fn default_release() -> f64 {
    1.05
}

/// Pair list in lexicographic order `(0,1), (0,2), …, (n−2,n−1)`.
pub fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Pair activation with hysteresis; `prev` is empty or one flag per pair.
pub fn colav_activation(positions: &[Vec3], params: &ColavParams, prev: &[bool]) -> Result<Vec<bool>> {
    pairs(positions.len())
        .into_iter()
        .enumerate()
        .map(|(k, (i, j))| {
            let dist = (positions[i] - positions[j]).norm();
            if dist < COINCIDENT_DIST {
                return Err(Error::Coincident { i, j, dist });
            }
            let was = prev.get(k).copied().unwrap_or(false);
            Ok(dist < params.d_colav || (was && dist <= params.release_factor * params.d_colav))
        })
        .collect()
}

/// COLAV velocity for the given active pairs.
///
/// Active pairs are driven towards a target beyond the release distance, so
/// the normalized velocity keeps its direction until the pair is released.
pub fn colav_task(positions: &[Vec3], params: &ColavParams, active: &[bool]) -> Result<TaskOutput> {
    let n = positions.len();
    let rows: Vec<(usize, usize)> = pairs(n)
        .into_iter()
        .zip(active.iter().copied().chain(std::iter::repeat(false)))
        .filter_map(|(p, a)| a.then_some(p))
        .collect();
    if rows.is_empty() {
        return Ok(TaskOutput::inactive(3 * n));
    }
    let sigma_d = colav_target(params);
    let mut j = DMatrix::zeros(rows.len(), 3 * n);
    let mut sigma_tilde = DVector::zeros(rows.len());
    for (r, &(a, b)) in rows.iter().enumerate() {
        let diff = positions[a] - positions[b];
        let dist = diff.norm();
        if dist < COINCIDENT_DIST {
            return Err(Error::Coincident { i: a, j: b, dist });
        }
        let e = diff / dist;
        for k in 0..3 {
            j[(r, 3 * a + k)] = e[k];
            j[(r, 3 * b + k)] = -e[k];
        }
        sigma_tilde[r] = dist - sigma_d;
    }
    let clik = pinv(&j)? * (-&sigma_tilde * params.lambda1);
    let norm = clik.norm();
    let upsilon = if norm > 0.0 { clik * (params.u_colav / norm) } else { clik };
    Ok(TaskOutput { upsilon, j, active: true, sigma_tilde })
}

/// CLIK target distance: the release distance plus the same hysteresis margin.
pub fn colav_target(params: &ColavParams) -> f64 {
    params.d_colav * (2.0 * params.release_factor - 1.0)
}

/// Formation Jacobian: rows `p_i − p_b` for `i < n`.
pub fn formation_jacobian(n: usize) -> DMatrix<f64> {
    let m = n.saturating_sub(1);
    DMatrix::from_fn(3 * m, 3 * n, |r, c| {
        if r % 3 != c % 3 {
            return 0.0;
        }
        let (i, j) = (r / 3, c / 3);
        (if i == j { 1.0 } else { 0.0 }) - 1.0 / n as f64
    })
}

/// Closed-form pseudoinverse of [`formation_jacobian`]: block `i < n` is the
/// identity selector, block `n` is minus the sum.
pub fn formation_jacobian_pinv(n: usize) -> DMatrix<f64> {
    let m = n.saturating_sub(1);
    DMatrix::from_fn(3 * n, 3 * m, |r, c| {
        if r % 3 != c % 3 {
            return 0.0;
        }
        let (i, j) = (r / 3, c / 3);
        if i == n - 1 {
            -1.0
        } else if i == j {
            1.0
        } else {
            0.0
        }
    })
}

/// max_i ‖block_i(J₂†)‖₂: the per-vehicle gain applied to the saturated feedback.
pub fn formation_feedback_gain(n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        ((n - 1) as f64).sqrt().max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormationParams {
    /// Scalar gain (Λ₂ = λ₂ I).
    pub lambda2: f64,
    pub upsilon2_max: f64,
}

/// Formation-keeping velocity `J₂†σ̇_d − υ2max J₂† sat(Λ₂σ̃₂)`.
pub fn formation_task(
    positions: &[Vec3],
    formation: &FormationSpec,
    frame: &PathFrame,
    xi_dot: f64,
    params: &FormationParams,
) -> TaskOutput {
    let n = positions.len();
    if n < 2 {
        return TaskOutput::inactive(3 * n);
    }
    let pb = barycenter(positions);
    let m = n - 1;
    let mut sigma_tilde = DVector::zeros(3 * m);
    let mut sigma_d_dot = DVector::zeros(3 * m);
    let rw = frame.r * hat(&frame.omega) * xi_dot;
    for (i, (p, pf)) in positions.iter().zip(formation.offsets()).take(m).enumerate() {
        let e = p - pb - frame.r * pf;
        let d = rw * pf;
        sigma_tilde.rows_mut(3 * i, 3).copy_from(&e);
        sigma_d_dot.rows_mut(3 * i, 3).copy_from(&d);
    }
    let jp = formation_jacobian_pinv(n);
    let sat = saturate(&(&sigma_tilde * params.lambda2));
    let upsilon = &jp * sigma_d_dot - &jp * sat * params.upsilon2_max;
    TaskOutput { upsilon, j: formation_jacobian(n), active: true, sigma_tilde }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LosOutput {
    pub upsilon_los: Vec3,
    pub delta: f64,
    pub d: f64,
}

/// Error-dependent lookahead LOS velocity for the barycenter.
pub fn los_velocity(p_b_path: &Vec3, frame: &PathFrame, delta0: f64, u_los: f64) -> LosOutput {
    let (x, y, z) = (p_b_path.x, p_b_path.y, p_b_path.z);
    let delta = (delta0 * delta0 + x * x + y * y + z * z).sqrt();
    let d = (delta * delta + y * y + z * z).sqrt();
    let upsilon_los = frame.r * Vec3::new(delta, -y, -z) * (u_los / d);
    LosOutput { upsilon_los, delta, d }
}

/// LOS task: `υ₃ = 1_n ⊗ υ_LOS`.
pub fn los_task(p_b_path: &Vec3, frame: &PathFrame, delta0: f64, u_los: f64, n: usize) -> (TaskOutput, f64, f64) {
    let los = los_velocity(p_b_path, frame, delta0, u_los);
    let upsilon = stack(&vec![los.upsilon_los; n]);
    let out = TaskOutput {
        upsilon,
        j: DMatrix::zeros(0, 3 * n),
        active: true,
        sigma_tilde: DVector::from_column_slice(p_b_path.as_slice()),
    };
    (out, los.delta, los.d)
}

/// `υ₁ + N₁(υ₂ + N₂υ₃)`; an empty `j1` means COLAV is inactive.
pub fn compose(
    upsilon1: &DVector<f64>,
    j1: &DMatrix<f64>,
    upsilon2: &DVector<f64>,
    j2: &DMatrix<f64>,
    upsilon3: &DVector<f64>,
) -> Result<DVector<f64>> {
    compose_with_pinv(upsilon1, j1, upsilon2, j2, &pinv(j2)?, upsilon3)
}

/// [`compose`] with a precomputed `J₂†`.
pub fn compose_with_pinv(
    upsilon1: &DVector<f64>,
    j1: &DMatrix<f64>,
    upsilon2: &DVector<f64>,
    j2: &DMatrix<f64>,
    j2_pinv: &DMatrix<f64>,
    upsilon3: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = upsilon3.len();
    if upsilon1.len() != n
        || upsilon2.len() != n
        || j2.ncols() != n
        || j1.ncols() != n
        || j2_pinv.shape() != (j2.ncols(), j2.nrows())
    {
        return Err(Error::Domain("inconsistent task dimensions"));
    }
    let inner = upsilon2 + upsilon3 - j2_pinv * (j2 * upsilon3);
    if j1.nrows() == 0 {
        return Ok(upsilon1 + inner);
    }
    let j1p = pinv(j1)?;
    Ok(upsilon1 + &inner - &j1p * (j1 * &inner))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub position: Vec3,
    #[serde(default)]
    pub velocity: Vec3,
    pub radius: f64,
}

impl Obstacle {
    pub fn position_at(&self, t: f64) -> Vec3 {
        self.position + self.velocity * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeResult {
    pub alpha: f64,
    pub in_conflict: bool,
    pub oa_required: bool,
    /// ‖p_rel‖ < r_o + r_f.
    pub separation_violated: bool,
}

/// Collision-cone conflict test with the cone-angle switching rule.
pub fn collision_cone(p_rel: &Vec2, v_rel: &Vec2, r_o: f64, r_f: f64, alpha_min: f64) -> ConeResult {
    let dist = p_rel.norm();
    let reach = r_o + r_f;
    if dist < reach {
        return ConeResult {
            alpha: std::f64::consts::FRAC_PI_2,
            in_conflict: true,
            oa_required: true,
            separation_violated: true,
        };
    }
    let alpha = (reach / dist).asin();
    let in_conflict = angle_between_2d(&[p_rel.x, p_rel.y], &[v_rel.x, v_rel.y])
        .map(|a| a <= alpha)
        .unwrap_or(false);
    ConeResult {
        alpha,
        in_conflict,
        oa_required: in_conflict && alpha >= alpha_min,
        separation_violated: false,
    }
}

/// In NED (x north, y east) a clockwise turn seen from above increases the heading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnDirection {
    Clockwise,
    CounterClockwise,
}

impl TurnDirection {
    pub fn sign(self) -> f64 {
        match self {
            TurnDirection::Clockwise => 1.0,
            TurnDirection::CounterClockwise => -1.0,
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r + two_pi
    } else {
        r
    }
}

/// Branch whose heading is closer to `v_rel`; ties go clockwise.
pub fn choose_direction(p_rel: &Vec2, v_rel: &Vec2, alpha: f64) -> TurnDirection {
    let bearing = p_rel.y.atan2(p_rel.x);
    let heading = v_rel.y.atan2(v_rel.x);
    let cw = wrap_angle(bearing + alpha - heading).abs();
    let ccw = wrap_angle(bearing - alpha - heading).abs();
    if ccw < cw - 1e-12 {
        TurnDirection::CounterClockwise
    } else {
        TurnDirection::Clockwise
    }
}

/// Planar avoidance velocity along the chosen cone edge plus the obstacle drift.
pub fn obstacle_avoidance_velocity(
    p_rel: &Vec2,
    v_rel: &Vec2,
    obstacle_velocity: &Vec2,
    alpha: f64,
    direction: TurnDirection,
) -> Vec2 {
    let psi = p_rel.y.atan2(p_rel.x) + direction.sign() * alpha;
    Vec2::new(psi.cos(), psi.sin()) * v_rel.norm() + obstacle_velocity
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthState {
    #[default]
    Inside,
    TooShallow,
    TooDeep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthLimits {
    pub z_min: f64,
    pub z_max: f64,
    pub upsilon_z: f64,
    /// Release hysteresis; zero gives the memoryless rule.
    #[serde(default = "default_band")]
    pub band: f64,
}

fn default_band() -> f64 {
    0.5
}

/// Depth-limiting mode transition.
pub fn depth_state(zs: &[f64], limits: &DepthLimits, prev: DepthState) -> Result<DepthState> {
    let zmin_obs = zs.iter().copied().fold(f64::INFINITY, f64::min);
    let zmax_obs = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shallow = zmin_obs <= limits.z_min;
    let deep = zmax_obs >= limits.z_max;
    Ok(match (shallow, deep) {
        (true, true) => return Err(Error::DepthLimits { zmin_obs, zmax_obs }),
        (true, false) => DepthState::TooShallow,
        (false, true) => DepthState::TooDeep,
        (false, false) => match prev {
            DepthState::TooShallow if zmin_obs < limits.z_min + limits.band => DepthState::TooShallow,
            DepthState::TooDeep if zmax_obs > limits.z_max - limits.band => DepthState::TooDeep,
            _ => DepthState::Inside,
        },
    })
}

/// Memoryless depth-limiting velocity.
pub fn depth_limit(zs: &[f64], z_los_dot: f64, limits: &DepthLimits) -> Result<f64> {
    let memoryless = DepthLimits { band: 0.0, ..*limits };
    Ok(depth_velocity(depth_state(zs, &memoryless, DepthState::Inside)?, z_los_dot, limits))
}

pub fn depth_velocity(state: DepthState, z_los_dot: f64, limits: &DepthLimits) -> f64 {
    match state {
        DepthState::Inside => z_los_dot,
        DepthState::TooShallow => limits.upsilon_z,
        DepthState::TooDeep => -limits.upsilon_z,
    }
}

/// Everything needed to evaluate the guidance layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub formation: FormationSpec,
    pub colav: ColavParams,
    pub formation_gains: FormationParams,
    pub delta0: f64,
    pub k_xi: f64,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub alpha_min: f64,
    pub depth: DepthLimits,
    /// Grid steps without an avoidance request before the turning direction is forgotten.
    #[serde(default = "default_oa_reset")]
    pub oa_reset_steps: usize,
    #[serde(default = "yes")]
    pub enable_colav: bool,
    #[serde(default = "yes")]
    pub enable_oa: bool,
    #[serde(default = "yes")]
    pub enable_depth: bool,
}

fn default_oa_reset() -> usize {
    10
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OaMemory {
    pub direction: Option<TurnDirection>,
    pub idle_steps: usize,
}

/// Discrete guidance mode.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Mode {
    pub colav_pairs: Vec<bool>,
    /// Governing obstacle and its turning direction.
    pub oa: Option<(usize, TurnDirection)>,
    pub depth: DepthState,
}

impl Mode {
    pub fn colav_active(&self) -> bool {
        self.colav_pairs.iter().any(|&a| a)
    }

    /// No COLAV, obstacle avoidance or depth limiting.
    pub fn is_nominal(&self) -> bool {
        !self.colav_active() && self.oa.is_none() && self.depth == DepthState::Inside
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AvoidanceMemory {
    pub mode: Mode,
    pub oa: Vec<OaMemory>,
}

impl AvoidanceMemory {
    pub fn new(n: usize, obstacles: usize) -> Self {
        Self {
            mode: Mode { colav_pairs: vec![false; n * n.saturating_sub(1) / 2], oa: None, depth: DepthState::Inside },
            oa: vec![OaMemory::default(); obstacles],
        }
    }
}

/// Geometry shared by the switching logic and the continuous velocities.
struct Geometry {
    pb: Vec3,
    p_b_path: Vec3,
    los: LosOutput,
}

fn geometry(positions: &[Vec3], frame: &PathFrame, delta0: f64, u_los: f64) -> Geometry {
    let pb = barycenter(positions);
    let p_b_path = crate::path::path_error(&pb, frame);
    let los = los_velocity(&p_b_path, frame, delta0, u_los);
    Geometry { pb, p_b_path, los }
}

fn obstacle_relative(ob: &Obstacle, t: f64, pb: &Vec3, v_los: &Vec3) -> (Vec2, Vec2) {
    let po = ob.position_at(t);
    let p_rel = Vec2::new(po.x - pb.x, po.y - pb.y);
    let v_rel = Vec2::new(v_los.x - ob.velocity.x, v_los.y - ob.velocity.y);
    (p_rel, v_rel)
}

/// Switching logic: returns the memory after observing the current state.
///
/// `grid_step` advances the obstacle-memory idle counters.
pub fn update_memory(
    cfg: &GuidanceConfig,
    positions: &[Vec3],
    frame: &PathFrame,
    u_los: f64,
    t: f64,
    memory: &AvoidanceMemory,
    grid_step: bool,
) -> Result<AvoidanceMemory> {
    let g = geometry(positions, frame, cfg.delta0, u_los);
    let mut next = memory.clone();
    next.mode.colav_pairs = if cfg.enable_colav {
        colav_activation(positions, &cfg.colav, &memory.mode.colav_pairs)?
    } else {
        vec![false; pairs(positions.len()).len()]
    };

    next.mode.oa = None;
    if cfg.enable_oa && !cfg.obstacles.is_empty() {
        let r_f = formation_radius(positions);
        let mut best: Option<(f64, usize, f64, Vec2, Vec2)> = None;
        for (k, ob) in cfg.obstacles.iter().enumerate() {
            let (p_rel, v_rel) = obstacle_relative(ob, t, &g.pb, &g.los.upsilon_los);
            let cone = collision_cone(&p_rel, &v_rel, ob.radius, r_f, cfg.alpha_min);
            let mem = &mut next.oa[k];
            if cone.oa_required {
                mem.idle_steps = 0;
                let margin = p_rel.norm() - ob.radius - r_f;
                if best.map_or(true, |b| margin < b.0) {
                    best = Some((margin, k, cone.alpha, p_rel, v_rel));
                }
            } else if grid_step && mem.direction.is_some() {
                mem.idle_steps += 1;
                if mem.idle_steps >= cfg.oa_reset_steps {
                    *mem = OaMemory::default();
                }
            }
        }
        if let Some((_, k, alpha, p_rel, v_rel)) = best {
            let dir = *next.oa[k].direction.get_or_insert_with(|| choose_direction(&p_rel, &v_rel, alpha));
            next.mode.oa = Some((k, dir));
        }
    }

    next.mode.depth = if cfg.enable_depth {
        let zs: Vec<f64> = positions.iter().map(|p| p.z).collect();
        depth_state(&zs, &cfg.depth, memory.mode.depth)?
    } else {
        DepthState::Inside
    };
    Ok(next)
}

/// Continuous guidance quantities for a frozen mode.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceOutput {
    /// Per-vehicle υ_NSB,i.
    pub upsilon: Vec<Vec3>,
    pub upsilon1: DVector<f64>,
    pub upsilon2: DVector<f64>,
    pub upsilon3: DVector<f64>,
    pub j1: DMatrix<f64>,
    pub j2: DMatrix<f64>,
    /// Nominal LOS velocity (before avoidance and depth overrides).
    pub upsilon_los: Vec3,
    /// LOS velocity actually used in υ₃.
    pub upsilon_los_eff: Vec3,
    pub p_b: Vec3,
    pub p_b_path: Vec3,
    pub delta: f64,
    pub d: f64,
    pub xi_dot: f64,
    pub sigma2_tilde: DVector<f64>,
    pub colav_sigma_tilde: DVector<f64>,
}

pub fn guidance_velocities(
    cfg: &GuidanceConfig,
    positions: &[Vec3],
    frame: &PathFrame,
    u_los: f64,
    t: f64,
    mode: &Mode,
) -> Result<GuidanceOutput> {
    let n = positions.len();
    let g = geometry(positions, frame, cfg.delta0, u_los);
    let xi_dot = xi_rate(frame, g.p_b_path.x, u_los, g.los.delta, g.los.d, cfg.k_xi);

    let mut v_los = g.los.upsilon_los;
    if let Some((k, dir)) = mode.oa {
        let ob = &cfg.obstacles[k];
        let (p_rel, v_rel) = obstacle_relative(ob, t, &g.pb, &g.los.upsilon_los);
        let cone = collision_cone(&p_rel, &v_rel, ob.radius, formation_radius(positions), cfg.alpha_min);
        let oa = obstacle_avoidance_velocity(&p_rel, &v_rel, &ob.velocity.xy(), cone.alpha, dir);
        v_los.x = oa.x;
        v_los.y = oa.y;
    }
    v_los.z = depth_velocity(mode.depth, v_los.z, &cfg.depth);

    let t1 = colav_task(positions, &cfg.colav, &mode.colav_pairs)?;
    let t2 = formation_task(positions, &cfg.formation, frame, xi_dot, &cfg.formation_gains);
    let u3 = stack(&vec![v_los; n]);
    let total = if n >= 2 {
        compose_with_pinv(&t1.upsilon, &t1.j, &t2.upsilon, &t2.j, &formation_jacobian_pinv(n), &u3)?
    } else {
        &t1.upsilon + &u3
    };
    Ok(GuidanceOutput {
        upsilon: unstack(&total),
        upsilon1: t1.upsilon,
        upsilon2: t2.upsilon,
        upsilon3: u3,
        j1: t1.j,
        j2: t2.j,
        upsilon_los: g.los.upsilon_los,
        upsilon_los_eff: v_los,
        p_b: g.pb,
        p_b_path: g.p_b_path,
        delta: g.los.delta,
        d: g.los.d,
        xi_dot,
        sigma2_tilde: t2.sigma_tilde,
        colav_sigma_tilde: t1.sigma_tilde,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::PathSpec;
    use crate::rotations::Mat3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn triangle() -> FormationSpec {
        FormationSpec::new(vec![Vec3::new(0.0, 10.0, 5.0), Vec3::new(0.0, -10.0, 5.0), Vec3::new(0.0, 0.0, -10.0)])
            .unwrap()
    }

    fn line_frame() -> PathFrame {
        PathSpec::straight_line(Vec3::zeros(), Vec3::x()).evaluate(0.0).unwrap()
    }

    fn colav() -> ColavParams {
        ColavParams { d_colav: 10.0, u_colav: 1.0, lambda1: 1.0, release_factor: 1.05 }
    }

    #[test]
    fn saturate_examples() {
        assert_eq!(saturate(&DVector::zeros(3)), DVector::zeros(3));
        let x = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        assert!((saturate(&x) - &x * 1f64.tanh()).norm() < 1e-16);
        let s = saturate(&DVector::from_vec(vec![3.0, 4.0, 0.0]));
        let k = 5f64.tanh() / 5.0;
        assert!((s[0] - 3.0 * k).abs() < 1e-15 && (s[1] - 4.0 * k).abs() < 1e-15);
        assert!((s[0] - 0.59995).abs() < 1e-5 && (s[1] - 0.79993).abs() < 1e-5);
    }

    #[test]
    fn formation_spec_validation() {
        assert!(FormationSpec::new(vec![Vec3::x(), Vec3::x()]).is_err());
        assert_eq!(triangle().max_offset(), 125f64.sqrt());
    }

    #[test]
    fn formation_radius_examples() {
        assert_eq!(formation_radius(&[Vec3::new(1.0, 2.0, 3.0)]), 0.0);
        assert_eq!(formation_radius(&[Vec3::zeros(), Vec3::new(0.0, 10.0, 0.0)]), 5.0);
        let pts: Vec<Vec3> = triangle().offsets().to_vec();
        assert!((formation_radius(&pts) - 10.0).abs() < 1e-15);
    }

    #[test]
    fn colav_inactive_when_far() {
        let pos = [Vec3::zeros(), Vec3::new(20.0, 0.0, 0.0)];
        let act = colav_activation(&pos, &colav(), &[]).unwrap();
        let out = colav_task(&pos, &colav(), &act).unwrap();
        assert!(!out.active);
        assert_eq!(out.upsilon.norm(), 0.0);
    }

    #[test]
    fn colav_pushes_apart() {
        let pos = [Vec3::zeros(), Vec3::new(4.0, 0.0, 0.0)];
        let act = colav_activation(&pos, &colav(), &[]).unwrap();
        let out = colav_task(&pos, &colav(), &act).unwrap();
        assert!(out.active);
        assert!((out.upsilon.norm() - 1.0).abs() < 1e-15);
        assert!(out.upsilon[0] < 0.0 && out.upsilon[3] > 0.0);
        assert!((out.upsilon[0] + out.upsilon[3]).abs() < 1e-15);
        assert!(out.upsilon[1].abs() + out.upsilon[2].abs() < 1e-15);
    }

    #[test]
    fn colav_single_pair_of_three() {
        let pos = [Vec3::zeros(), Vec3::new(3.0, 4.0, 0.0), Vec3::new(50.0, 0.0, 0.0)];
        let act = colav_activation(&pos, &colav(), &[]).unwrap();
        assert_eq!(act, vec![true, false, false]);
        let out = colav_task(&pos, &colav(), &act).unwrap();
        assert_eq!(out.j.shape(), (1, 9));
        assert!(out.j.columns(6, 3).norm() == 0.0);
        let jj = &out.j * pinv(&out.j).unwrap();
        assert!((jj[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn colav_hysteresis_and_coincidence() {
        let pos = [Vec3::zeros(), Vec3::new(10.2, 0.0, 0.0)];
        assert_eq!(colav_activation(&pos, &colav(), &[false]).unwrap(), vec![false]);
        assert_eq!(colav_activation(&pos, &colav(), &[true]).unwrap(), vec![true]);
        let far = [Vec3::zeros(), Vec3::new(10.6, 0.0, 0.0)];
        assert_eq!(colav_activation(&far, &colav(), &[true]).unwrap(), vec![false]);
        let same = [Vec3::zeros(), Vec3::new(1e-7, 0.0, 0.0)];
        assert!(matches!(colav_activation(&same, &colav(), &[]), Err(Error::Coincident { .. })));
    }

    #[test]
    fn formation_jacobian_n3() {
        let j = formation_jacobian(3);
        let i3 = Mat3::identity();
        let expect = [[2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0], [-1.0 / 3.0, 2.0 / 3.0, -1.0 / 3.0]];
        for (r, row) in expect.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert!((j.fixed_view::<3, 3>(3 * r, 3 * c) - i3 * v).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn formation_pinv_closed_form() {
        for n in 2..7 {
            let j = formation_jacobian(n);
            let (num, _) = pinv_with_rcond(&j);
            // Iterative SVD is only accurate to ~1e-12 here; the closed form is exact.
            assert!((num - formation_jacobian_pinv(n)).norm() < 1e-11);
            let gain = (0..n)
                .map(|i| formation_jacobian_pinv(n).rows(3 * i, 3).into_owned().svd(false, false).singular_values.max())
                .fold(0.0, f64::max);
            assert!((gain - formation_feedback_gain(n)).abs() < 1e-12);
        }
    }

    #[test]
    fn formation_zero_when_in_formation_on_line() {
        let f = triangle();
        let offset = Vec3::new(3.0, -1.0, 2.0);
        let pos: Vec<Vec3> = f.offsets().iter().map(|p| p + offset).collect();
        let gains = FormationParams { lambda2: 0.1, upsilon2_max: 0.5 };
        let out = formation_task(&pos, &f, &line_frame(), 1.3, &gains);
        assert!(out.upsilon.norm() < 1e-15);
    }

    #[test]
    fn los_examples() {
        let frame = line_frame();
        let los = los_velocity(&Vec3::zeros(), &frame, 5.0, 1.5);
        assert_eq!(los.delta, 5.0);
        assert_eq!(los.d, 5.0);
        assert!((los.upsilon_los - Vec3::new(1.5, 0.0, 0.0)).norm() < 1e-15);
        let far = los_velocity(&Vec3::new(0.0, 1e4, 0.0), &frame, 5.0, 1.5);
        assert!((far.upsilon_los.norm() - 1.5).abs() < 1e-12);
        assert!(far.upsilon_los.y < -1.0, "must tilt back toward the path");
    }

    #[test]
    fn compose_examples() {
        let n = 3;
        let j2 = formation_jacobian(n);
        let u1 = DVector::from_fn(9, |i, _| i as f64 * 0.1);
        let z = DVector::zeros(9);
        let j1 = DMatrix::from_fn(1, 9, |_, c| if c == 0 { 1.0 } else if c == 3 { -1.0 } else { 0.0 });
        assert!((compose(&u1, &j1, &z, &j2, &z).unwrap() - &u1).norm() < 1e-15);
        let u2 = DVector::from_fn(9, |i, _| (i as f64).sin());
        let u3 = stack(&[Vec3::new(1.0, 0.5, -0.2); 3]);
        let none = DMatrix::zeros(0, 9);
        let out = compose(&z, &none, &u2, &j2, &u3).unwrap();
        assert!((out - (&u2 + &u3)).norm() < 1e-12);
        assert!(compose(&z, &none, &u2, &j2, &DVector::zeros(6)).is_err());
        let exact = compose_with_pinv(&z, &none, &u2, &j2, &formation_jacobian_pinv(n), &u3).unwrap();
        assert!((exact - (&u2 + &u3)).norm() < 1e-15);
    }

    #[test]
    fn collision_cone_examples() {
        let c = collision_cone(&Vec2::new(10.0, 0.0), &Vec2::new(1.0, 0.0), 3.0, 2.0, 15f64.to_radians());
        assert!((c.alpha - PI / 6.0).abs() < 1e-15);
        assert!(c.in_conflict && c.oa_required);
        let away = collision_cone(&Vec2::new(10.0, 0.0), &Vec2::new(-1.0, 0.0), 3.0, 2.0, 0.1);
        assert!(!away.in_conflict);
        let s = (10f64.to_radians()).sin() * 20.0;
        let narrow = collision_cone(&Vec2::new(20.0, 0.0), &Vec2::new(1.0, 0.0), s, 0.0, 15f64.to_radians());
        assert!(narrow.in_conflict && !narrow.oa_required);
        let inside = collision_cone(&Vec2::new(2.0, 0.0), &Vec2::new(0.0, 1.0), 3.0, 2.0, 0.1);
        assert!(inside.separation_violated && inside.in_conflict);
        assert_eq!(inside.alpha, PI / 2.0);
    }

    #[test]
    fn oa_direction_and_velocity() {
        // Dead ahead: tie broken clockwise (towards +y, east).
        let p = Vec2::new(10.0, 0.0);
        let v = Vec2::new(1.0, 0.0);
        assert_eq!(choose_direction(&p, &v, 0.5), TurnDirection::Clockwise);
        assert_eq!(choose_direction(&p, &Vec2::new(1.0, -0.1), 0.5), TurnDirection::CounterClockwise);
        let oa = obstacle_avoidance_velocity(&p, &v, &Vec2::zeros(), PI / 6.0, TurnDirection::Clockwise);
        assert!((oa - Vec2::new((PI / 6.0).cos(), (PI / 6.0).sin())).norm() < 1e-15);
        let moving = obstacle_avoidance_velocity(&p, &v, &Vec2::new(0.0, 0.3), PI / 6.0, TurnDirection::Clockwise);
        assert!((moving - oa - Vec2::new(0.0, 0.3)).norm() < 1e-15);
    }

    #[test]
    fn oa_memory_holds_direction() {
        let mut cfg = config();
        cfg.obstacles = vec![Obstacle { position: Vec3::new(30.0, 0.0, 0.0), velocity: Vec3::zeros(), radius: 10.0 }];
        cfg.enable_colav = false;
        cfg.enable_depth = false;
        let frame = line_frame();
        let pos: Vec<Vec3> = cfg.formation.offsets().iter().map(|p| p + Vec3::new(0.0, 0.0, 20.0)).collect();
        let mem = AvoidanceMemory::new(3, 1);
        let m1 = update_memory(&cfg, &pos, &frame, 1.5, 0.0, &mem, true).unwrap();
        assert_eq!(m1.mode.oa, Some((0, TurnDirection::Clockwise)));
        // Geometry now favours counter-clockwise, but the episode keeps its branch.
        let shifted: Vec<Vec3> = pos.iter().map(|p| p + Vec3::new(0.0, 2.0, 0.0)).collect();
        let fresh = update_memory(&cfg, &shifted, &frame, 1.5, 0.0, &mem, true).unwrap();
        assert_eq!(fresh.mode.oa, Some((0, TurnDirection::CounterClockwise)));
        let m2 = update_memory(&cfg, &shifted, &frame, 1.5, 0.0, &m1, true).unwrap();
        assert_eq!(m2.mode.oa, Some((0, TurnDirection::Clockwise)));
        // Memory resets after the configured number of idle grid steps.
        let past: Vec<Vec3> = pos.iter().map(|p| p + Vec3::new(100.0, 0.0, 0.0)).collect();
        let mut m = m2;
        for k in 0..cfg.oa_reset_steps {
            m = update_memory(&cfg, &past, &frame, 1.5, 0.0, &m, true).unwrap();
            assert_eq!(m.mode.oa, None);
            assert_eq!(m.oa[0].direction.is_some(), k + 1 < cfg.oa_reset_steps);
        }
    }

    #[test]
    fn depth_examples() {
        let lim = DepthLimits { z_min: 1.0, z_max: 49.0, upsilon_z: 0.3, band: 0.0 };
        assert_eq!(depth_limit(&[0.5, 10.0], 0.1, &lim).unwrap(), 0.3);
        assert_eq!(depth_limit(&[20.0, 49.5], 0.1, &lim).unwrap(), -0.3);
        assert_eq!(depth_limit(&[20.0, 30.0], 0.1, &lim).unwrap(), 0.1);
        assert!(matches!(depth_limit(&[0.5, 49.5], 0.1, &lim), Err(Error::DepthLimits { .. })));
        let banded = DepthLimits { band: 0.5, ..lim };
        assert_eq!(depth_state(&[48.7], &banded, DepthState::TooDeep).unwrap(), DepthState::TooDeep);
        assert_eq!(depth_state(&[48.4], &banded, DepthState::TooDeep).unwrap(), DepthState::Inside);
        assert_eq!(depth_state(&[48.7], &banded, DepthState::Inside).unwrap(), DepthState::Inside);
    }

    fn config() -> GuidanceConfig {
        GuidanceConfig {
            formation: triangle(),
            colav: colav(),
            formation_gains: FormationParams { lambda2: 0.1, upsilon2_max: 0.5 },
            delta0: 5.0,
            k_xi: 0.2,
            obstacles: vec![],
            alpha_min: 15f64.to_radians(),
            depth: DepthLimits { z_min: 1.0, z_max: 49.0, upsilon_z: 0.3, band: 0.5 },
            oa_reset_steps: 10,
            enable_colav: true,
            enable_oa: true,
            enable_depth: true,
        }
    }

    #[test]
    fn nominal_guidance_is_formation_plus_los() {
        let cfg = config();
        let frame = PathSpec::spiral(Vec3::new(0.0, -40.0, 25.0), 40.0, 20.0, PI / 100.0).evaluate(3.0).unwrap();
        let pos: Vec<Vec3> = cfg.formation.offsets().iter().map(|p| frame.p + frame.r * p + Vec3::new(1.0, -2.0, 0.5)).collect();
        let mode = update_memory(&cfg, &pos, &frame, 1.6, 0.0, &AvoidanceMemory::new(3, 0), true).unwrap().mode;
        assert!(mode.is_nominal());
        let out = guidance_velocities(&cfg, &pos, &frame, 1.6, 0.0, &mode).unwrap();
        let direct = &out.upsilon2 + &out.upsilon3;
        assert!((stack(&out.upsilon) - direct).norm() < 1e-12);
    }

    #[test]
    fn collision_cone_soundness() {
        // Straight-line extrapolation oracle: conflict iff the closest approach is inside r_o + r_f.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let p = Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
            let v = Vec2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let reach = rng.gen_range(1.0..20.0);
            if p.norm() <= reach + 1e-6 || v.norm() < 1e-6 {
                continue;
            }
            let cone = collision_cone(&p, &v, reach, 0.0, 0.0);
            let t_star = (p.dot(&v) / v.norm_squared()).max(0.0);
            let closest = (p - v * t_star).norm();
            let margin = (closest - reach).abs();
            if margin > 1e-6 {
                assert_eq!(cone.in_conflict, closest < reach, "p={p:?} v={v:?} reach={reach}");
            }
        }
    }

    proptest! {
        #[test]
        fn saturate_norm_below_one(x in proptest::collection::vec(-1e3f64..1e3, 1..9)) {
            let v = DVector::from_vec(x);
            let s = saturate(&v);
            // tanh rounds to exactly 1 for large arguments.
            prop_assert!(s.norm() < 1.0 || (v.norm() > 18.0 && s.norm() <= 1.0 + 1e-15));
            prop_assert!((s.norm() - v.norm().tanh()).abs() < 1e-12);
        }

        #[test]
        fn formation_null_space(x in -1e3f64..1e3, y in -1e3f64..1e3, z in -1e3f64..1e3, n in 2usize..7) {
            let v = stack(&vec![Vec3::new(x, y, z); n]);
            prop_assert!((formation_jacobian(n) * v).norm() <= 1e-12 * (1.0 + x.abs() + y.abs() + z.abs()));
        }

        #[test]
        fn projector_idempotent(seed in 0u64..1000, rows in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = DMatrix::from_fn(rows, 9, |_, _| rng.gen_range(-1.0..1.0));
            let p = null_projector(&j, &pinv(&j).unwrap());
            prop_assert!((&p * &p - &p).norm() < 1e-12);
        }

        #[test]
        fn los_speed_is_commanded_speed(x in -100.0f64..100.0, y in -100.0f64..100.0, z in -100.0f64..100.0, u in 0.1f64..3.0) {
            let los = los_velocity(&Vec3::new(x, y, z), &line_frame(), 5.0, u);
            prop_assert!((los.upsilon_los.norm() - u).abs() < 1e-12);
        }

        #[test]
        fn depth_output_is_one_of_three(z1 in -5.0f64..55.0, z2 in -5.0f64..55.0, zl in -1.0f64..1.0) {
            let lim = DepthLimits { z_min: 1.0, z_max: 49.0, upsilon_z: 0.3, band: 0.0 };
            if let Ok(v) = depth_limit(&[z1, z2], zl, &lim) {
                prop_assert!(v == 0.3 || v == -0.3 || v == zl);
            }
        }

        #[test]
        fn feedback_bound(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = triangle();
            let pos: Vec<Vec3> = (0..3).map(|_| Vec3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(0.0..50.0))).collect();
            let gains = FormationParams { lambda2: 0.1, upsilon2_max: 0.5 };
            let out = formation_task(&pos, &f, &line_frame(), 0.0, &gains);
            for v in unstack(&out.upsilon) {
                prop_assert!(v.norm() <= 0.5 * formation_feedback_gain(3) + 1e-12);
            }
        }
    }
}
