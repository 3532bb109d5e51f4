//! Workspaces, collision predicates, discrete steering and path feasibility.
//!
//! Everything else in the crate treats these predicates as ground truth. Obstacles
//! are closed axis-aligned boxes and the complement of the workspace bounds is
//! closed as well, so touching a boundary counts as a collision.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Steering resolution used while searching.
pub const PLAN_STEP: f64 = 0.05;
/// Steering resolution used by acceptance gates.
pub const STRICT_STEP: f64 = 0.005;
/// Workspace units per radian in the SE(2) metric.
pub const ANGLE_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rigid2d workspace requires a rigid body")]
    MissingBody,
    #[error("rigid body supplied for a point-robot workspace")]
    UnexpectedBody,
    #[error("steering step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("path must contain at least one state")]
    EmptyPath,
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid workspace: {0}")]
    InvalidWorkspace(String),
    #[error("invalid rigid body: {0}")]
    InvalidBody(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r >= PI {
        r -= 2.0 * PI;
    }
    r
}

/// One robot state: a point in 2D/3D or an SE(2) pose `(x, y, theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Config(Vec<f64>);

impl Config {
    pub fn new(coords: Vec<f64>) -> Self {
        Config(coords)
    }

    /// SE(2) pose with the heading wrapped into `[-pi, pi)`.
    pub fn pose(x: f64, y: f64, theta: f64) -> Self {
        Config(vec![x, y, wrap_angle(theta)])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Config {
    fn from(v: Vec<f64>) -> Self {
        Config(v)
    }
}

impl std::ops::Index<usize> for Config {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Axis-aligned box. Used for obstacles, workspace bounds and normalization ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub type Obstacle = Aabb;
pub type Bounds = Aabb;

impl Aabb {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        let b = Aabb { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() || self.min.is_empty() {
            return Err(GeometryError::InvalidBox(format!(
                "corner lengths {} and {}",
                self.min.len(),
                self.max.len()
            )));
        }
        for (i, (lo, hi)) in self.min.iter().zip(&self.max).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(GeometryError::InvalidBox(format!(
                    "axis {i}: min {lo} must be below max {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn extent(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(a, b)| b - a).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Boundary included.
    pub fn contains_closed(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Boundary excluded.
    pub fn contains_open(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(v, (lo, hi))| *v > *lo && *v < *hi)
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains_closed(&other.min) && self.contains_closed(&other.max)
    }

    /// Box grown by `margin` on every side.
    pub fn inflated(&self, margin: &[f64]) -> Aabb {
        Aabb {
            min: self.min.iter().zip(margin).map(|(v, m)| v - m).collect(),
            max: self.max.iter().zip(margin).map(|(v, m)| v + m).collect(),
        }
    }

    /// Componentwise intersection, `None` when empty or degenerate.
    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        let min: Vec<f64> = self.min.iter().zip(&other.min).map(|(a, b)| a.max(*b)).collect();
        let max: Vec<f64> = self.max.iter().zip(&other.max).map(|(a, b)| a.min(*b)).collect();
        min.iter().zip(&max).all(|(a, b)| a < b).then_some(Aabb { min, max })
    }

    pub fn volume(&self) -> f64 {
        self.extent().iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkspaceKind {
    Simple2d,
    Complex2d,
    Complex3d,
    Rigid2d,
}

impl WorkspaceKind {
    pub const ALL: [WorkspaceKind; 4] = [
        WorkspaceKind::Simple2d,
        WorkspaceKind::Complex2d,
        WorkspaceKind::Complex3d,
        WorkspaceKind::Rigid2d,
    ];

    pub fn workspace_dim(self) -> usize {
        match self {
            WorkspaceKind::Complex3d => 3,
            _ => 2,
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            WorkspaceKind::Simple2d | WorkspaceKind::Complex2d => 2,
            WorkspaceKind::Complex3d | WorkspaceKind::Rigid2d => 3,
        }
    }

    pub fn is_rigid(self) -> bool {
        self == WorkspaceKind::Rigid2d
    }

    pub fn metric(self) -> Metric {
        if self.is_rigid() {
            Metric::Se2 {
                angle_weight: ANGLE_WEIGHT,
            }
        } else {
            Metric::Euclidean
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WorkspaceKind::Simple2d => "simple2d",
            WorkspaceKind::Complex2d => "complex2d",
            WorkspaceKind::Complex3d => "complex3d",
            WorkspaceKind::Rigid2d => "rigid2d",
        }
    }
}

impl std::fmt::Display for WorkspaceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for WorkspaceKind {
    type Err = GeometryError;
    fn from_str(s: &str) -> Result<Self> {
        WorkspaceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GeometryError::InvalidWorkspace(format!("unknown kind {s:?}")))
    }
}

/// Distance and interpolation rule on configuration space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Euclidean,
    /// Euclidean on `(x, y, w * theta)` with the heading difference taken along the shortest arc.
    Se2 { angle_weight: f64 },
}

impl Metric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Se2 { angle_weight } => {
                let dx = b[0] - a[0];
                let dy = b[1] - a[1];
                let dt = angle_weight * wrap_angle(b[2] - a[2]);
                (dx * dx + dy * dy + dt * dt).sqrt()
            }
        }
    }

    /// `(1 - t) a + t b`; SE(2) headings follow the shortest arc and are re-wrapped.
    pub fn interpolate(&self, a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; a.len()];
        self.interpolate_into(a, b, t, &mut out);
        out
    }

    fn interpolate_into(&self, a: &[f64], b: &[f64], t: f64, out: &mut [f64]) {
        match *self {
            Metric::Euclidean => {
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    *o = (1.0 - t) * x + t * y;
                }
            }
            Metric::Se2 { .. } => {
                let b_theta = a[2] + wrap_angle(b[2] - a[2]);
                out[0] = (1.0 - t) * a[0] + t * b[0];
                out[1] = (1.0 - t) * a[1] + t * b[1];
                out[2] = wrap_angle((1.0 - t) * a[2] + t * b_theta);
            }
        }
    }
}

/// Convex polygon in the body frame, counterclockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidBody {
    pub vertices: Vec<[f64; 2]>,
}

impl RigidBody {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let body = RigidBody { vertices };
        body.validate()?;
        Ok(body)
    }

    /// Axis-aligned `width x height` rectangle centred on the body origin.
    pub fn rectangle(width: f64, height: f64) -> Result<Self> {
        let (hw, hh) = (0.5 * width, 0.5 * height);
        RigidBody::new(vec![[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if n < 3 {
            return Err(GeometryError::InvalidBody(format!("{n} vertices, need at least 3")));
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidBody("non-finite vertex".into()));
        }
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross <= 0.0 {
                return Err(GeometryError::InvalidBody(format!(
                    "vertex {} is not a strict left turn (convex, counterclockwise required)",
                    (i + 1) % n
                )));
            }
        }
        Ok(())
    }

    /// Distance from the body origin to the farthest vertex.
    pub fn circumradius(&self) -> f64 {
        self.vertices
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }

    /// Vertices placed in the world by pose `(x, y, theta)`.
    pub fn placed(&self, pose: &[f64]) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.vertices.len());
        self.place_into(pose, &mut out);
        out
    }

    fn place_into(&self, pose: &[f64], out: &mut Vec<[f64; 2]>) {
        let (s, c) = pose[2].sin_cos();
        out.clear();
        out.extend(
            self.vertices
                .iter()
                .map(|v| [pose[0] + c * v[0] - s * v[1], pose[1] + s * v[0] + c * v[1]]),
        );
    }
}

/// Separating-axis test between a convex polygon and a closed 2D box.
/// Touching shapes count as intersecting.
pub fn polygon_intersects_box(poly: &[[f64; 2]], b: &Aabb) -> bool {
    let span = |axis: [f64; 2], pts: &mut dyn Iterator<Item = [f64; 2]>| {
        pts.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let d = p[0] * axis[0] + p[1] * axis[1];
            (lo.min(d), hi.max(d))
        })
    };
    for i in 0..2 {
        let (lo, hi) = poly
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[i]), hi.max(p[i])));
        if hi < b.min[i] || b.max[i] < lo {
            return false;
        }
    }
    let corners = [
        [b.min[0], b.min[1]],
        [b.max[0], b.min[1]],
        [b.max[0], b.max[1]],
        [b.min[0], b.max[1]],
    ];
    (0..poly.len()).all(|i| {
        let (a, c) = (poly[i], poly[(i + 1) % poly.len()]);
        let axis = [c[1] - a[1], a[0] - c[0]];
        let (p_lo, p_hi) = span(axis, &mut poly.iter().copied());
        let (b_lo, b_hi) = span(axis, &mut corners.iter().copied());
        p_hi >= b_lo && b_hi >= p_lo
    })
}

/// Bounded region with box obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub dim: usize,
    pub kind: WorkspaceKind,
    pub bounds: Bounds,
    pub obstacles: Vec<Obstacle>,
}

impl Workspace {
    pub fn new(kind: WorkspaceKind, bounds: Bounds, obstacles: Vec<Obstacle>) -> Result<Self> {
        let w = Workspace {
            dim: kind.workspace_dim(),
            kind,
            bounds,
            obstacles,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != self.kind.workspace_dim() {
            return Err(GeometryError::InvalidWorkspace(format!(
                "{} workspaces are {}-dimensional, got dim {}",
                self.kind,
                self.kind.workspace_dim(),
                self.dim
            )));
        }
        self.bounds.validate()?;
        if self.bounds.dim() != self.dim {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim,
                got: self.bounds.dim(),
            });
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            o.validate()?;
            if o.dim() != self.dim {
                return Err(GeometryError::DimensionMismatch {
                    expected: self.dim,
                    got: o.dim(),
                });
            }
            if !self.bounds.contains_box(o) {
                return Err(GeometryError::InvalidWorkspace(format!(
                    "obstacle {i} leaves the workspace bounds"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, WorkspaceParseError> {
        let w: Workspace = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("workspace serializes")
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn metric(&self) -> Metric {
        self.kind.metric()
    }

    /// Configuration-space box: workspace bounds, plus `[-pi, pi]` for the heading of rigid bodies.
    pub fn state_bounds(&self) -> Bounds {
        let mut b = self.bounds.clone();
        if self.kind.is_rigid() {
            b.min.push(-PI);
            b.max.push(PI);
        }
        b
    }

    fn check_compat(&self, x: &Config, body: Option<&RigidBody>) -> Result<()> {
        if x.dim() != self.state_dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.state_dim(),
                got: x.dim(),
            });
        }
        match (self.kind.is_rigid(), body.is_some()) {
            (true, false) => Err(GeometryError::MissingBody),
            (false, true) => Err(GeometryError::UnexpectedBody),
            _ => Ok(()),
        }
    }

    /// Membership test without the compatibility checks.
    fn free_unchecked(&self, x: &[f64], body: Option<&RigidBody>) -> bool {
        match body {
            None => {
                self.bounds.contains_open(x)
                    && !self.obstacles.iter().any(|o| o.contains_closed(x))
            }
            Some(body) => {
                let poly = body.placed(x);
                poly.iter().all(|v| self.bounds.contains_open(v))
                    && !self
                        .obstacles
                        .iter()
                        .any(|o| polygon_intersects_box(&poly, o))
            }
        }
    }

}

#[derive(Debug, Error)]
pub enum WorkspaceParseError {
    #[error("malformed workspace JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Ordered list of states from start toward goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Path {
    pub states: Vec<Config>,
}

impl Path {
    pub fn new(states: Vec<Config>) -> Result<Self> {
        let first = states.first().ok_or(GeometryError::EmptyPath)?;
        if let Some(bad) = states.iter().find(|s| s.dim() != first.dim()) {
            return Err(GeometryError::DimensionMismatch {
                expected: first.dim(),
                got: bad.dim(),
            });
        }
        Ok(Path { states })
    }

    pub fn single(x: Config) -> Self {
        Path { states: vec![x] }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first(&self) -> &Config {
        &self.states[0]
    }

    pub fn last(&self) -> &Config {
        self.states.last().expect("path is nonempty")
    }
}

/// Ball of goal states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: Config,
    pub radius: f64,
}

impl GoalRegion {
    pub fn new(center: Config, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::InvalidWorkspace(format!(
                "goal radius must be positive, got {radius}"
            )));
        }
        Ok(GoalRegion { center, radius })
    }

    pub fn contains(&self, x: &Config, metric: Metric) -> bool {
        metric.distance(x.coords(), self.center.coords()) <= self.radius
    }
}

/// True iff `x` lies in the free space of `w` (for rigid bodies: the placed polygon).
pub fn point_in_free_space(x: &Config, w: &Workspace, body: Option<&RigidBody>) -> Result<bool> {
    w.check_compat(x, body)?;
    Ok(w.free_unchecked(x.coords(), body))
}

/// Number of intervals used to discretize a segment of length `len`.
///
/// Always a power of two, so halving the step yields a grid that contains the
/// coarser one, and the grid is the same whichever endpoint it starts from.
pub fn segment_intervals(len: f64, step: f64) -> u64 {
    if len <= 0.0 {
        return 0;
    }
    let raw = (len / step).ceil();
    let raw = if raw < 1.0 { 1 } else { raw.min((1u64 << 62) as f64) as u64 };
    raw.next_power_of_two()
}

/// Discrete straight-line steering check between `x1` and `x2`.
pub fn segment_collision_free(
    x1: &Config,
    x2: &Config,
    w: &Workspace,
    step: f64,
    body: Option<&RigidBody>,
) -> Result<bool> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(GeometryError::InvalidStep(step));
    }
    w.check_compat(x1, body)?;
    w.check_compat(x2, body)?;
    Ok(segment_free_unchecked(x1.coords(), x2.coords(), w, step, body))
}

pub(crate) fn segment_free_unchecked(
    a: &[f64],
    b: &[f64],
    w: &Workspace,
    step: f64,
    body: Option<&RigidBody>,
) -> bool {
    let metric = w.metric();
    let n = segment_intervals(metric.distance(a, b), step);
    if !w.free_unchecked(a, body) {
        return false;
    }
    if n == 0 {
        return true;
    }
    if !w.free_unchecked(b, body) {
        return false;
    }
    let inv = 1.0 / n as f64;
    let sample_free = |k: u64| w.free_unchecked(&metric.interpolate(a, b, k as f64 * inv), body);
    let reach = body.map_or(0.0, RigidBody::circumradius);
    let dim = w.kind.workspace_dim();
    let inside = |x: &[f64]| {
        (0..dim).all(|i| {
            let m = reach + CULL_MARGIN * (1.0 + w.bounds.min[i].abs().max(w.bounds.max[i].abs()));
            x[i] > w.bounds.min[i] + m && x[i] < w.bounds.max[i] - m
        })
    };
    if !(inside(a) && inside(b)) {
        return (1..n).all(sample_free);
    }
    // Every sample stays inside the bounds, and only samples whose position can come
    // within `reach` of an obstacle are tested against it.
    let (mut x, mut poly) = (vec![0.0; a.len()], Vec::new());
    let mut hits = |o: &Aabb, k: u64| {
        metric.interpolate_into(a, b, k as f64 * inv, &mut x);
        match body {
            None => o.contains_closed(&x),
            Some(body) => {
                body.place_into(&x, &mut poly);
                polygon_intersects_box(&poly, o)
            }
        }
    };
    w.obstacles.iter().all(|o| {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for i in 0..dim {
            let m = reach + CULL_MARGIN * (1.0 + o.min[i].abs().max(o.max[i].abs()).max(a[i].abs()).max(b[i].abs()));
            let (lo, hi) = (o.min[i] - m, o.max[i] + m);
            let d = b[i] - a[i];
            if d == 0.0 {
                if a[i] < lo || a[i] > hi {
                    return true;
                }
            } else {
                let (u, v) = ((lo - a[i]) / d, (hi - a[i]) / d);
                t0 = t0.max(u.min(v));
                t1 = t1.min(u.max(v));
            }
            if t0 > t1 {
                return true;
            }
        }
        let first = ((t0 * n as f64).floor() as u64).saturating_sub(1).max(1);
        let last = ((t1 * n as f64).ceil() as u64 + 1).min(n - 1);
        (first..=last).all(|k| !hits(o, k))
    })
}

/// Relative slack when culling samples far from every obstacle.
const CULL_MARGIN: f64 = 1e-9;

/// True iff every consecutive pair of `path` is steerable at `step`.
pub fn path_feasible(
    path: &Path,
    w: &Workspace,
    step: f64,
    body: Option<&RigidBody>,
) -> Result<bool> {
    if path.states.is_empty() {
        return Err(GeometryError::EmptyPath);
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(GeometryError::InvalidStep(step));
    }
    for s in &path.states {
        w.check_compat(s, body)?;
    }
    if path.len() == 1 {
        return Ok(w.free_unchecked(path.states[0].coords(), body));
    }
    Ok(path
        .states
        .windows(2)
        .all(|p| segment_free_unchecked(p[0].coords(), p[1].coords(), w, step, body)))
}

/// Sum of metric distances between consecutive states.
pub fn path_cost(path: &Path, metric: Metric) -> f64 {
    path.states
        .windows(2)
        .map(|p| metric.distance(p[0].coords(), p[1].coords()))
        .sum()
}
