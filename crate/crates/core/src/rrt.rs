//! RRT*: expert demonstrator, benchmark baseline and the classical half of hybrid replanning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    self, path_feasible, segment_free_unchecked, Aabb, Config, GeometryError, GoalRegion, Metric,
    Path, RigidBody, Workspace, PLAN_STEP, STRICT_STEP,
};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrtConfig {
    pub max_iters: usize,
    /// Extension step.
    pub eta: f64,
    pub goal_bias: f64,
    /// Rewire-radius scale.
    pub gamma: f64,
    pub seed: u64,
    /// Resolution for tree edges.
    pub check_step: f64,
    /// Resolution a returned path must pass.
    pub validate_step: f64,
    /// Restricts position sampling to this workspace-space box (intersected with the bounds).
    #[serde(default)]
    pub sample_region: Option<Aabb>,
    /// Return as soon as one validated solution exists instead of spending the whole budget.
    #[serde(default)]
    pub stop_at_first: bool,
}

impl RrtConfig {
    pub fn for_dim(workspace_dim: usize) -> Self {
        RrtConfig {
            max_iters: 5000,
            eta: if workspace_dim == 3 { 2.0 } else { 1.0 },
            goal_bias: 0.05,
            gamma: 6.0,
            seed: 0,
            check_step: PLAN_STEP,
            validate_step: STRICT_STEP,
            sample_region: None,
            stop_at_first: false,
        }
    }

    /// Defaults for `w`, with the rewire scale set from the volume of its state space.
    pub fn for_workspace(w: &Workspace) -> Self {
        RrtConfig {
            gamma: optimal_gamma(&w.state_bounds()),
            ..Self::for_dim(w.dim)
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.max_iters > 0
            && self.eta > 0.0
            && (0.0..1.0).contains(&self.goal_bias)
            && self.gamma > 0.0
            && self.check_step > 0.0
            && self.validate_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidWorkspace(format!(
                "invalid RRT* settings: {self:?}"
            )))
        }
    }
}

/// Smallest rewire scale with the asymptotic-optimality guarantee, for a sampling box `b`:
/// `2 (1 + 1/d)^(1/d) (vol(b) / vol(unit ball))^(1/d)`.
pub fn optimal_gamma(b: &Aabb) -> f64 {
    let d = b.dim() as f64;
    let unit_ball = std::f64::consts::PI.powf(d / 2.0) / gamma_fn(d / 2.0 + 1.0);
    2.0 * (1.0 + 1.0 / d).powf(1.0 / d) * (b.volume() / unit_ball).powf(1.0 / d)
}

/// Gamma function for half-integer arguments.
fn gamma_fn(x: f64) -> f64 {
    if (x - 1.0).abs() < 1e-12 {
        1.0
    } else if (x - 0.5).abs() < 1e-12 {
        std::f64::consts::PI.sqrt()
    } else {
        (x - 1.0) * gamma_fn(x - 1.0)
    }
}

/// Search tree with flat node storage.
#[derive(Debug, Clone, PartialEq)]
pub struct RrtTree {
    dim: usize,
    coords: Vec<f64>,
    pub parent: Vec<Option<usize>>,
    pub cost: Vec<f64>,
    children: Vec<Vec<usize>>,
}

impl RrtTree {
    fn new(root: &[f64]) -> Self {
        RrtTree {
            dim: root.len(),
            coords: root.to_vec(),
            parent: vec![None],
            cost: vec![0.0],
            children: vec![Vec::new()],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    fn push(&mut self, x: &[f64], parent: usize, cost: f64) -> usize {
        let id = self.len();
        self.coords.extend_from_slice(x);
        self.parent.push(Some(parent));
        self.cost.push(cost);
        self.children.push(Vec::new());
        self.children[parent].push(id);
        id
    }

    fn reparent(&mut self, node: usize, new_parent: usize, new_cost: f64) {
        if let Some(old) = self.parent[node] {
            self.children[old].retain(|&c| c != node);
        }
        self.parent[node] = Some(new_parent);
        self.children[new_parent].push(node);
        let delta = new_cost - self.cost[node];
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            self.cost[n] += delta;
            stack.extend_from_slice(&self.children[n]);
        }
    }

    /// Root-to-node path.
    pub fn path_to(&self, mut i: usize) -> Path {
        let mut states = vec![Config::new(self.node(i).to_vec())];
        while let Some(p) = self.parent[i] {
            states.push(Config::new(self.node(p).to_vec()));
            i = p;
        }
        states.reverse();
        Path { states }
    }

    /// Acyclic parents reaching the root and exact cost recursion.
    pub fn check_invariants(&self, metric: Metric) -> bool {
        if self.parent[0].is_some() || self.cost[0] != 0.0 {
            return false;
        }
        for i in 1..self.len() {
            let Some(p) = self.parent[i] else {
                return false;
            };
            let expected = self.cost[p] + metric.distance(self.node(p), self.node(i));
            if (self.cost[i] - expected).abs() > 1e-9 * expected.max(1.0) {
                return false;
            }
            let mut cur = i;
            let mut hops = 0;
            while let Some(q) = self.parent[cur] {
                cur = q;
                hops += 1;
                if hops > self.len() {
                    return false;
                }
            }
            if cur != 0 {
                return false;
            }
        }
        true
    }
}

/// Uniform bucket grid over the positional coordinates of tree nodes.
///
/// Positional distance never exceeds the configuration-space metric, so the grid
/// yields candidate supersets; ties are broken by node index, matching a linear scan.
#[derive(Debug, Clone)]
struct NodeGrid {
    dim: usize,
    origin: Vec<f64>,
    cell: f64,
    shape: Vec<usize>,
    buckets: Vec<Vec<usize>>,
}

impl NodeGrid {
    fn new(bounds: &Aabb, dim: usize, cell: f64) -> Self {
        let shape: Vec<usize> = (0..dim)
            .map(|i| (((bounds.max[i] - bounds.min[i]) / cell).ceil() as usize).max(1))
            .collect();
        let total = shape.iter().product();
        NodeGrid {
            dim,
            origin: bounds.min[..dim].to_vec(),
            cell,
            shape,
            buckets: vec![Vec::new(); total],
        }
    }

    fn cell_of(&self, x: &[f64]) -> Vec<i64> {
        (0..self.dim)
            .map(|i| {
                let c = ((x[i] - self.origin[i]) / self.cell).floor() as i64;
                c.clamp(0, self.shape[i] as i64 - 1)
            })
            .collect()
    }

    fn flat(&self, c: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for i in (0..self.dim).rev() {
            if c[i] < 0 || c[i] >= self.shape[i] as i64 {
                return None;
            }
            idx = idx * self.shape[i] + c[i] as usize;
        }
        Some(idx)
    }

    fn insert(&mut self, x: &[f64], id: usize) {
        let c = self.cell_of(x);
        let f = self.flat(&c).expect("clamped cell");
        self.buckets[f].push(id);
    }

    /// Calls `f` on every node in cells at Chebyshev distance exactly `ring` from `center`.
    fn for_ring(&self, center: &[i64], ring: i64, f: &mut impl FnMut(usize)) {
        let mut offset = vec![-ring; self.dim];
        loop {
            if offset.iter().any(|o| o.abs() == ring) {
                let c: Vec<i64> = center.iter().zip(&offset).map(|(a, b)| a + b).collect();
                if let Some(flat) = self.flat(&c) {
                    self.buckets[flat].iter().for_each(|&id| f(id));
                }
            }
            let mut k = 0;
            loop {
                if k == self.dim {
                    return;
                }
                offset[k] += 1;
                if offset[k] <= ring {
                    break;
                }
                offset[k] = -ring;
                k += 1;
            }
        }
    }

    fn max_ring(&self) -> i64 {
        self.shape.iter().copied().max().unwrap_or(1) as i64
    }
}

/// Incremental RRT* search.
pub struct RrtStar<'a> {
    w: &'a Workspace,
    body: Option<&'a RigidBody>,
    goal: &'a GoalRegion,
    cfg: &'a RrtConfig,
    metric: Metric,
    region: Aabb,
    rng: RngStream,
    pub tree: RrtTree,
    grid: NodeGrid,
    goal_nodes: Vec<usize>,
    pub iterations: usize,
}

impl<'a> RrtStar<'a> {
    pub fn new(
        w: &'a Workspace,
        x_init: &Config,
        goal: &'a GoalRegion,
        cfg: &'a RrtConfig,
        body: Option<&'a RigidBody>,
    ) -> Result<Self, GeometryError> {
        cfg.validate()?;
        if !geometry::point_in_free_space(x_init, w, body)? {
            return Err(GeometryError::InvalidWorkspace(
                "start state is in collision".into(),
            ));
        }
        if goal.center.dim() != w.state_dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: w.state_dim(),
                got: goal.center.dim(),
            });
        }
        let mut region = w.state_bounds();
        if let Some(r) = &cfg.sample_region {
            let pos = Aabb {
                min: region.min[..w.dim].to_vec(),
                max: region.max[..w.dim].to_vec(),
            };
            if let Some(clipped) = pos.intersection(r) {
                region.min[..w.dim].copy_from_slice(&clipped.min);
                region.max[..w.dim].copy_from_slice(&clipped.max);
            }
        }
        let metric = w.metric();
        let mut grid = NodeGrid::new(&w.bounds, w.dim, cfg.eta);
        grid.insert(x_init.coords(), 0);
        let mut s = RrtStar {
            w,
            body,
            goal,
            cfg,
            metric,
            region,
            rng: RngStream::new(cfg.seed),
            tree: RrtTree::new(x_init.coords()),
            grid,
            goal_nodes: Vec::new(),
            iterations: 0,
        };
        if goal.contains(x_init, metric) {
            s.goal_nodes.push(0);
        }
        Ok(s)
    }

    fn sample(&mut self) -> Vec<f64> {
        if self.rng.gen::<f64>() < self.cfg.goal_bias {
            return self.goal.center.coords().to_vec();
        }
        self.region
            .min
            .iter()
            .zip(&self.region.max)
            .map(|(lo, hi)| self.rng.gen_range(*lo..*hi))
            .collect()
    }

    fn nearest(&self, x: &[f64]) -> usize {
        let center = self.grid.cell_of(x);
        let mut best = (f64::INFINITY, usize::MAX);
        let mut visited_cells = 0usize;
        for ring in 0..=self.grid.max_ring() {
            let cells = (2 * ring + 1).pow(self.grid.dim as u32) as usize;
            visited_cells += cells;
            if visited_cells > 4 * self.tree.len() + 64 {
                return self.nearest_linear(x);
            }
            self.grid.for_ring(&center, ring, &mut |id| {
                let d = self.metric.distance(self.tree.node(id), x);
                if (d, id) < best {
                    best = (d, id);
                }
            });
            // Cells beyond this ring are at least `ring * cell` away.
            if best.1 != usize::MAX && best.0 < ring as f64 * self.grid.cell {
                return best.1;
            }
        }
        if best.1 == usize::MAX {
            self.nearest_linear(x)
        } else {
            best.1
        }
    }

    fn nearest_linear(&self, x: &[f64]) -> usize {
        (0..self.tree.len())
            .map(|i| (self.metric.distance(self.tree.node(i), x), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, i)| i)
            .expect("tree has a root")
    }

    /// Nodes within `radius` (at most one cell) of `x`, ascending by index.
    fn near(&self, x: &[f64], radius: f64) -> Vec<(usize, f64)> {
        let center = self.grid.cell_of(x);
        let mut out = Vec::new();
        for ring in 0..=1 {
            self.grid.for_ring(&center, ring, &mut |id| {
                let d = self.metric.distance(self.tree.node(id), x);
                if d <= radius {
                    out.push((id, d));
                }
            });
        }
        out.sort_by_key(|e| e.0);
        out
    }

    fn edge_free(&self, a: &[f64], b: &[f64]) -> bool {
        segment_free_unchecked(a, b, self.w, self.cfg.check_step, self.body)
    }

    /// One sample-extend-rewire round. Returns true if a node was added.
    pub fn iterate(&mut self) -> bool {
        self.iterations += 1;
        let target = self.sample();
        let near_id = self.nearest(&target);
        let from = self.tree.node(near_id).to_vec();
        let dist = self.metric.distance(&from, &target);
        if dist == 0.0 {
            return false;
        }
        let new = if dist <= self.cfg.eta {
            target
        } else {
            self.metric.interpolate(&from, &target, self.cfg.eta / dist)
        };
        if !self.edge_free(&from, &new) {
            return false;
        }
        let n = (self.tree.len() + 1) as f64;
        let d = new.len() as f64;
        let radius = (self.cfg.gamma * (n.ln() / n).powf(1.0 / d)).min(self.cfg.eta);
        let near = self.near(&new, radius);

        let mut parent = near_id;
        let mut best = self.tree.cost[near_id] + self.metric.distance(&from, &new);
        for &(i, dd) in &near {
            let c = self.tree.cost[i] + dd;
            if c < best && i != near_id && self.edge_free(self.tree.node(i), &new) {
                parent = i;
                best = c;
            }
        }
        let id = self.tree.push(&new, parent, best);
        self.grid.insert(&new, id);

        for &(i, dd) in &near {
            if i == parent || i == 0 {
                continue;
            }
            let c = best + dd;
            if c < self.tree.cost[i] && self.edge_free(&new, self.tree.node(i)) {
                self.tree.reparent(i, id, c);
            }
        }
        if self.goal.contains(&Config::new(new), self.metric) {
            self.goal_nodes.push(id);
        }
        true
    }

    /// Cheapest goal node by current tree cost.
    pub fn best_cost(&self) -> Option<f64> {
        self.goal_nodes
            .iter()
            .map(|&i| self.tree.cost[i])
            .min_by(f64::total_cmp)
    }

    /// Cheapest goal-reaching path that also passes the validation step.
    pub fn best_validated(&self) -> Option<(Path, f64)> {
        let mut candidates: Vec<usize> = self.goal_nodes.clone();
        candidates.sort_by(|a, b| self.tree.cost[*a].total_cmp(&self.tree.cost[*b]));
        candidates.into_iter().find_map(|i| {
            let path = self.tree.path_to(i);
            path_feasible(&path, self.w, self.cfg.validate_step, self.body)
                .unwrap_or(false)
                .then(|| (path, self.tree.cost[i]))
        })
    }

    pub fn run(&mut self) -> Option<(Path, f64)> {
        if self.goal_nodes.contains(&0) {
            return Some((Path::single(Config::new(self.tree.node(0).to_vec())), 0.0));
        }
        let mut known = self.goal_nodes.len();
        while self.iterations < self.cfg.max_iters {
            self.iterate();
            if self.cfg.stop_at_first && self.goal_nodes.len() > known {
                known = self.goal_nodes.len();
                if let Some(found) = self.best_validated() {
                    return Some(found);
                }
            }
        }
        self.best_validated()
    }
}

/// Plans from `x_init` into `goal`. `Ok(None)` when the budget ends without a solution.
pub fn rrtstar_plan(
    w: &Workspace,
    x_init: &Config,
    goal: &GoalRegion,
    cfg: &RrtConfig,
    body: Option<&RigidBody>,
) -> Result<Option<(Path, f64)>, GeometryError> {
    Ok(RrtStar::new(w, x_init, goal, cfg, body)?.run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{path_cost, WorkspaceKind};

    fn open_ws(half: f64) -> Workspace {
        Workspace::new(
            WorkspaceKind::Simple2d,
            Aabb::new(vec![-half, -half], vec![half, half]).unwrap(),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn start_in_goal_is_trivial() {
        let w = open_ws(10.0);
        let x = Config::new(vec![1.0, 1.0]);
        let goal = GoalRegion::new(Config::new(vec![1.2, 1.0]), 0.5).unwrap();
        let (p, c) = rrtstar_plan(&w, &x, &goal, &RrtConfig::for_dim(2), None)
            .unwrap()
            .unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn enclosed_goal_is_unreachable() {
        let w = Workspace::new(
            WorkspaceKind::Simple2d,
            Aabb::new(vec![-10.0, -10.0], vec![10.0, 10.0]).unwrap(),
            vec![
                Aabb::new(vec![3.0, 3.0], vec![7.0, 4.0]).unwrap(),
                Aabb::new(vec![3.0, 6.0], vec![7.0, 7.0]).unwrap(),
                Aabb::new(vec![3.0, 3.0], vec![4.0, 7.0]).unwrap(),
                Aabb::new(vec![6.0, 3.0], vec![7.0, 7.0]).unwrap(),
            ],
        )
        .unwrap();
        let goal = GoalRegion::new(Config::new(vec![5.0, 5.0]), 0.5).unwrap();
        let cfg = RrtConfig {
            max_iters: 2000,
            ..RrtConfig::for_dim(2)
        };
        let r = rrtstar_plan(&w, &Config::new(vec![-5.0, -5.0]), &goal, &cfg, None).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn start_in_collision_is_rejected() {
        let w = Workspace::new(
            WorkspaceKind::Simple2d,
            Aabb::new(vec![-10.0, -10.0], vec![10.0, 10.0]).unwrap(),
            vec![Aabb::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()],
        )
        .unwrap();
        let goal = GoalRegion::new(Config::new(vec![5.0, 5.0]), 0.5).unwrap();
        assert!(rrtstar_plan(&w, &Config::new(vec![0.0, 0.0]), &goal, &RrtConfig::for_dim(2), None).is_err());
    }

    #[test]
    fn tree_invariants_and_anytime_monotonicity() {
        let w = Workspace::new(
            WorkspaceKind::Simple2d,
            Aabb::new(vec![-10.0, -10.0], vec![10.0, 10.0]).unwrap(),
            vec![Aabb::new(vec![-2.0, -6.0], vec![2.0, 6.0]).unwrap()],
        )
        .unwrap();
        let goal = GoalRegion::new(Config::new(vec![7.0, 0.0]), 0.3).unwrap();
        let cfg = RrtConfig {
            max_iters: 1500,
            seed: 4,
            ..RrtConfig::for_dim(2)
        };
        let start = Config::new(vec![-7.0, 0.0]);
        let mut rrt = RrtStar::new(&w, &start, &goal, &cfg, None).unwrap();
        let mut last = f64::INFINITY;
        for it in 0..cfg.max_iters {
            rrt.iterate();
            if it % 100 == 0 {
                assert!(rrt.tree.check_invariants(w.metric()));
            }
            if let Some(c) = rrt.best_cost() {
                assert!(c <= last + 1e-12);
                last = c;
            }
        }
        assert!(rrt.tree.check_invariants(w.metric()));
        for i in 1..rrt.tree.len() {
            let p = rrt.tree.parent[i].unwrap();
            assert!(segment_free_unchecked(rrt.tree.node(p), rrt.tree.node(i), &w, PLAN_STEP, None));
        }
        let (path, cost) = rrt.best_validated().expect("solved");
        assert_eq!(path.first(), &start);
        assert!(goal.contains(path.last(), w.metric()));
        assert!(path_feasible(&path, &w, STRICT_STEP, None).unwrap());
        assert!((path_cost(&path, w.metric()) - cost).abs() < 1e-9);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let w = open_ws(10.0);
        let goal = GoalRegion::new(Config::new(vec![5.0, 5.0]), 0.2).unwrap();
        let cfg = RrtConfig {
            max_iters: 800,
            seed: 9,
            ..RrtConfig::for_dim(2)
        };
        let start = Config::new(vec![-5.0, -5.0]);
        let mut a = RrtStar::new(&w, &start, &goal, &cfg, None).unwrap();
        let mut b = RrtStar::new(&w, &start, &goal, &cfg, None).unwrap();
        assert_eq!(a.run(), b.run());
        assert_eq!(a.tree, b.tree);
    }

    #[test]
    fn rigid_body_planning_succeeds() {
        let w = Workspace::new(
            WorkspaceKind::Rigid2d,
            Aabb::new(vec![-10.0, -10.0], vec![10.0, 10.0]).unwrap(),
            vec![Aabb::new(vec![-1.0, -3.0], vec![1.0, 10.0]).unwrap()],
        )
        .unwrap();
        let body = RigidBody::rectangle(3.0, 1.0).unwrap();
        let goal = GoalRegion::new(Config::pose(6.0, 5.0, 1.0), 0.5).unwrap();
        let cfg = RrtConfig {
            max_iters: 4000,
            seed: 2,
            stop_at_first: true,
            ..RrtConfig::for_dim(2)
        };
        let (path, _) = rrtstar_plan(&w, &Config::pose(-6.0, 5.0, 0.0), &goal, &cfg, Some(&body))
            .unwrap()
            .expect("solved");
        assert!(path_feasible(&path, &w, STRICT_STEP, Some(&body)).unwrap());
    }

    #[test]
    fn gamma_matches_closed_form() {
        let square = Aabb::new(vec![0.0, 0.0], vec![20.0, 20.0]).unwrap();
        let expect = 2.0 * 1.5f64.sqrt() * (400.0 / std::f64::consts::PI).sqrt();
        assert!((optimal_gamma(&square) - expect).abs() < 1e-9);
        let cube = Aabb::new(vec![0.0; 3], vec![2.0; 3]).unwrap();
        let expect = 2.0 * (4.0f64 / 3.0).cbrt() * (8.0 / (4.0 * std::f64::consts::PI / 3.0)).cbrt();
        assert!((optimal_gamma(&cube) - expect).abs() < 1e-9);
    }

    #[test]
    fn grid_nearest_matches_linear_scan() {
        let w = Workspace::new(
            WorkspaceKind::Complex3d,
            Aabb::new(vec![-10.0; 3], vec![10.0; 3]).unwrap(),
            vec![Aabb::new(vec![-2.0; 3], vec![2.0; 3]).unwrap()],
        )
        .unwrap();
        let goal = GoalRegion::new(Config::new(vec![8.0, 8.0, 8.0]), 0.5).unwrap();
        let cfg = RrtConfig {
            max_iters: 600,
            ..RrtConfig::for_workspace(&w)
        };
        let mut s = RrtStar::new(&w, &Config::new(vec![-8.0; 3]), &goal, &cfg, None).unwrap();
        let mut rng = RngStream::new(77);
        for _ in 0..600 {
            s.iterate();
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
            assert_eq!(s.nearest(&q), s.nearest_linear(&q));
        }
    }

    #[test]
    fn open_space_cost_near_straight_line() {
        let w = open_ws(10.0);
        let goal = GoalRegion::new(Config::new(vec![5.0, 0.0]), 0.01).unwrap();
        let start = Config::new(vec![-5.0, 0.0]);
        let mut good = 0;
        for seed in 0..20 {
            let cfg = RrtConfig {
                seed,
                ..RrtConfig::for_workspace(&w)
            };
            let (_, cost) = rrtstar_plan(&w, &start, &goal, &cfg, None).unwrap().unwrap();
            if cost <= 10.5 {
                good += 1;
            }
        }
        assert!(good >= 19, "{good} of 20 within 5%");
    }
}
