//! Online planning: bidirectional neural path generation, lazy states contraction,
//! and neural or hybrid replanning of broken segments.

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, path_feasible, segment_free_unchecked, Aabb, Config, GeometryError, GoalRegion, Path,
    RigidBody, Workspace, PLAN_STEP, STRICT_STEP,
};
use crate::models::{EncoderModel, ModelError, PlannerModel};
use crate::pointcloud::PointCloud;
use crate::rng::{derive_seed, RngStream};
use crate::rrt::{RrtConfig, RrtStar};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid planning request: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PlanError>;

/// Anything that proposes the next state from `x_t` toward `x_goal`.
pub trait StepModel {
    fn state_dim(&self) -> usize;

    fn latent_dim(&self) -> usize;

    fn step(
        &self,
        latent: &[f64],
        x_t: &Config,
        x_goal: &Config,
        rng: &mut RngStream,
        stochastic: bool,
    ) -> std::result::Result<Config, ModelError>;
}

impl StepModel for PlannerModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn step(
        &self,
        latent: &[f64],
        x_t: &Config,
        x_goal: &Config,
        rng: &mut RngStream,
        stochastic: bool,
    ) -> std::result::Result<Config, ModelError> {
        PlannerModel::step(self, latent, x_t, x_goal, rng, stochastic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplanMode {
    /// Neural replanning only.
    Nr,
    /// Neural replanning, then RRT* on segments it leaves broken.
    Hr,
}

impl std::fmt::Display for ReplanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReplanMode::Nr => "nr",
            ReplanMode::Hr => "hr",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpnetConfig {
    /// Iteration bound of one bidirectional generation.
    pub bidir_iters: usize,
    /// Recursion limit of neural replanning.
    pub replan_depth: usize,
    pub mode: ReplanMode,
    pub plan_step: f64,
    pub strict_step: f64,
    /// Keep dropout active at inference.
    pub stochastic: bool,
    pub seed: u64,
    /// Cap on network calls per query.
    pub pnet_budget: usize,
    /// Fallback planner settings for hybrid replanning.
    pub hybrid: RrtConfig,
    /// Margin around a broken segment, as a fraction of the workspace extent.
    pub region_inflate: f64,
    /// Retry a failed local repair over the whole workspace.
    pub full_fallback: bool,
}

impl MpnetConfig {
    pub fn for_workspace(w: &Workspace) -> Self {
        MpnetConfig {
            bidir_iters: 80,
            replan_depth: 6,
            mode: ReplanMode::Hr,
            plan_step: PLAN_STEP,
            strict_step: STRICT_STEP,
            stochastic: true,
            seed: 0,
            pnet_budget: 5000,
            hybrid: RrtConfig {
                max_iters: 20_000,
                stop_at_first: true,
                ..RrtConfig::for_workspace(w)
            },
            region_inflate: 0.25,
            full_fallback: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.bidir_iters > 0
            && self.replan_depth >= 1
            && self.plan_step > 0.0
            && self.strict_step > 0.0
            && self.region_inflate >= 0.0;
        if !ok {
            return Err(PlanError::Invalid(format!("bad planner settings: {self:?}")));
        }
        self.hybrid.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStats {
    pub pnet_calls: usize,
    pub nonfinite_outputs: usize,
    pub steer_checks: usize,
    pub bidir_calls: usize,
    /// Extensions of the list rooted at the start of a bidirectional call.
    pub extensions_start: usize,
    /// Extensions of the list rooted at its goal.
    pub extensions_goal: usize,
    pub replans: usize,
    pub fallback_calls: usize,
    pub fallback_used: bool,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub path: Option<Path>,
    pub succeeded: bool,
    pub cost: Option<f64>,
    pub encode_us: u64,
    pub plan_us: u64,
    pub stats: PlanStats,
}

impl PlanResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan results serialize")
    }
}

/// Greedy shortcutting: from each kept state jump to the farthest state it can steer to.
pub fn lazy_states_contraction(
    path: &Path,
    w: &Workspace,
    step: f64,
    body: Option<&RigidBody>,
) -> Result<Path> {
    if !(step > 0.0) {
        return Err(GeometryError::InvalidStep(step).into());
    }
    for s in &path.states {
        geometry::point_in_free_space(s, w, body).map(|_| ())?;
    }
    Ok(contract(path, |a, b| segment_free_unchecked(a, b, w, step, body)).0)
}

/// Also reports whether `steer` accepted every kept pair.
fn contract(path: &Path, mut steer: impl FnMut(&[f64], &[f64]) -> bool) -> (Path, bool) {
    let s = &path.states;
    let mut out = vec![s[0].clone()];
    let mut verified = true;
    let mut i = 0;
    while i + 1 < s.len() {
        let next = (i + 2..s.len())
            .rev()
            .find(|&j| steer(s[i].coords(), s[j].coords()))
            .unwrap_or_else(|| {
                verified = false;
                i + 1
            });
        out.push(s[next].clone());
        i = next;
    }
    (Path { states: out }, verified)
}

/// One planning query's working state.
struct Session<'a, M: StepModel + ?Sized> {
    w: &'a Workspace,
    body: Option<&'a RigidBody>,
    model: &'a M,
    latent: &'a [f64],
    cfg: &'a MpnetConfig,
    rng: &'a mut RngStream,
    stats: PlanStats,
}

impl<M: StepModel + ?Sized> Session<'_, M> {
    fn steer(&mut self, a: &Config, b: &Config, step: f64) -> bool {
        self.stats.steer_checks += 1;
        segment_free_unchecked(a.coords(), b.coords(), self.w, step, self.body)
    }

    fn free(&self, x: &Config) -> bool {
        geometry::point_in_free_space(x, self.w, self.body).unwrap_or(false)
    }

    /// Replanning connects at the strict step: its output must pass the strict gate.
    fn bidir(&mut self, start: &Config, goal: &Config) -> Option<Path> {
        self.bidir_partial(start, goal, self.cfg.strict_step).ok()
    }

    /// On failure returns both lists joined through their unconnectable ends.
    fn bidir_partial(&mut self, start: &Config, goal: &Config, connect_step: f64) -> std::result::Result<Path, Path> {
        self.stats.bidir_calls += 1;
        let mut from_start = vec![start.clone()];
        let mut from_goal = vec![goal.clone()];
        let mut start_active = true;
        for _ in 0..self.cfg.bidir_iters {
            if self.stats.pnet_calls >= self.cfg.pnet_budget {
                self.stats.budget_exhausted = true;
                break;
            }
            let (active, other) = if start_active {
                (&mut from_start, &from_goal)
            } else {
                (&mut from_goal, &from_start)
            };
            self.stats.pnet_calls += 1;
            let proposal = self.model.step(
                self.latent,
                active.last().expect("nonempty"),
                other.last().expect("nonempty"),
                self.rng,
                self.cfg.stochastic,
            );
            match proposal {
                Ok(x) if x.is_finite() => {
                    active.push(x);
                    if start_active {
                        self.stats.extensions_start += 1;
                    } else {
                        self.stats.extensions_goal += 1;
                    }
                    let (a, b) = (
                        from_start.last().expect("nonempty").clone(),
                        from_goal.last().expect("nonempty").clone(),
                    );
                    if self.steer(&a, &b, connect_step) {
                        from_start.extend(from_goal.into_iter().rev());
                        return Ok(Path { states: from_start });
                    }
                }
                _ => self.stats.nonfinite_outputs += 1,
            }
            start_active = !start_active;
        }
        from_start.extend(from_goal.into_iter().rev());
        Err(Path { states: from_start })
    }

    /// Drops interior states in collision; no feasible path can pass through them.
    fn prune(&self, path: Path) -> Vec<Config> {
        let n = path.states.len();
        path.states
            .into_iter()
            .enumerate()
            .filter(|(i, s)| *i == 0 || *i + 1 == n || self.free(s))
            .map(|(_, s)| s)
            .collect()
    }

    /// Best-effort neural path from `a` to `b`; may still contain broken pairs.
    fn repair_neural(&mut self, a: &Config, b: &Config, depth: usize) -> Option<Vec<Config>> {
        if depth == 0 {
            return None;
        }
        let coarse = match self.bidir(a, b) {
            Some(p) => self.prune(p),
            None => return self.repair_neural(a, b, depth - 1),
        };
        Some(self.stitch(&coarse, depth - 1))
    }

    /// Keeps steerable pairs and neurally repairs the rest, leaving unrepaired pairs as is.
    fn stitch(&mut self, states: &[Config], depth: usize) -> Vec<Config> {
        let step = self.cfg.strict_step;
        let mut out = vec![states[0].clone()];
        for pair in states.windows(2) {
            if !self.steer(&pair[0], &pair[1], step) {
                if let Some(mini) = self.repair_neural(&pair[0], &pair[1], depth) {
                    out.extend(mini.into_iter().skip(1));
                    continue;
                }
            }
            out.push(pair[1].clone());
        }
        out
    }

    fn replan(&mut self, path: Path, depth: usize) -> Option<Path> {
        self.stats.replans += 1;
        let pruned = self.prune(path);
        let repaired = self.stitch(&pruned, depth);
        let step = self.cfg.strict_step;
        let mut out = vec![repaired[0].clone()];
        let mut j = 1;
        while j < repaired.len() {
            let a = out.last().expect("nonempty").clone();
            if self.steer(&a, &repaired[j], step) {
                out.push(repaired[j].clone());
                j += 1;
                continue;
            }
            if self.cfg.mode == ReplanMode::Nr {
                return None;
            }
            // A state the fallback cannot reach is skipped in favour of the next one.
            match self.repair_classical(&a, &repaired[j]) {
                Some(mini) => out.extend(mini.states.into_iter().skip(1)),
                None if j + 1 < repaired.len() => {}
                None => return None,
            }
            j += 1;
        }
        Some(Path { states: out })
    }

    fn repair_classical(&mut self, a: &Config, b: &Config) -> Option<Path> {
        if !self.free(a) || !self.free(b) {
            return None;
        }
        self.stats.fallback_used = true;
        let d = self.w.dim;
        let lo: Vec<f64> = (0..d).map(|i| a[i].min(b[i])).collect();
        let hi: Vec<f64> = (0..d).map(|i| a[i].max(b[i])).collect();
        let margin: Vec<f64> = self
            .w
            .bounds
            .extent()
            .iter()
            .map(|e| e * self.cfg.region_inflate)
            .collect();
        let local = Aabb { min: lo, max: hi }.inflated(&margin);
        let goal = GoalRegion::new(b.clone(), 1e-9).ok()?;
        let mut regions = vec![Some(local)];
        if self.cfg.full_fallback {
            regions.push(None);
        }
        for region in regions {
            self.stats.fallback_calls += 1;
            let cfg = RrtConfig {
                seed: derive_seed(self.rng.next_u64(), self.stats.fallback_calls as u64),
                sample_region: region,
                check_step: self.cfg.plan_step,
                validate_step: self.cfg.strict_step,
                ..self.cfg.hybrid.clone()
            };
            let found = RrtStar::new(self.w, a, &goal, &cfg, self.body)
                .ok()
                .and_then(|mut s| s.run());
            if let Some((path, _)) = found {
                return Some(path);
            }
        }
        None
    }
}

fn check_request<M: StepModel + ?Sized>(
    w: &Workspace,
    latent: &[f64],
    x_init: &Config,
    goal: &GoalRegion,
    model: &M,
    cfg: &MpnetConfig,
    body: Option<&RigidBody>,
) -> Result<()> {
    cfg.validate()?;
    if model.state_dim() != w.state_dim() || model.latent_dim() != latent.len() {
        return Err(PlanError::Invalid(format!(
            "model expects {}-dimensional states and {} latents; workspace has {} and encoding {}",
            model.state_dim(),
            model.latent_dim(),
            w.state_dim(),
            latent.len()
        )));
    }
    if !geometry::point_in_free_space(x_init, w, body)? {
        return Err(PlanError::Invalid("start state is in collision".into()));
    }
    if !geometry::point_in_free_space(&goal.center, w, body)? {
        return Err(PlanError::Invalid("goal center is in collision".into()));
    }
    Ok(())
}

/// Bidirectional neural generation between two states. Counters go to `stats`.
#[allow(clippy::too_many_arguments)]
pub fn neural_planner_bidir<M: StepModel + ?Sized>(
    x_start: &Config,
    x_goal: &Config,
    latent: &[f64],
    model: &M,
    w: &Workspace,
    cfg: &MpnetConfig,
    body: Option<&RigidBody>,
    rng: &mut RngStream,
    stats: &mut PlanStats,
) -> Option<Path> {
    let mut s = Session {
        w,
        body,
        model,
        latent,
        cfg,
        rng,
        stats: std::mem::take(stats),
    };
    let out = s.bidir(x_start, x_goal);
    *stats = s.stats;
    out
}

/// Repairs every pair of `path` that fails strict steering.
#[allow(clippy::too_many_arguments)]
pub fn replan<M: StepModel + ?Sized>(
    path: Path,
    latent: &[f64],
    model: &M,
    w: &Workspace,
    cfg: &MpnetConfig,
    depth: usize,
    body: Option<&RigidBody>,
    rng: &mut RngStream,
    stats: &mut PlanStats,
) -> Option<Path> {
    let mut s = Session {
        w,
        body,
        model,
        latent,
        cfg,
        rng,
        stats: std::mem::take(stats),
    };
    let out = s.replan(path, depth);
    *stats = s.stats;
    out
}

/// Full query given a precomputed obstacle encoding.
#[allow(clippy::too_many_arguments)]
pub fn plan_with_latent<M: StepModel + ?Sized>(
    w: &Workspace,
    latent: &[f64],
    x_init: &Config,
    goal: &GoalRegion,
    model: &M,
    cfg: &MpnetConfig,
    body: Option<&RigidBody>,
    rng: &mut RngStream,
) -> Result<PlanResult> {
    check_request(w, latent, x_init, goal, model, cfg, body)?;
    let started = Instant::now();
    let mut s = Session {
        w,
        body,
        model,
        latent,
        cfg,
        rng,
        stats: PlanStats::default(),
    };
    let path = solve(&mut s, x_init, goal);
    let cost = path.as_ref().map(|p| geometry::path_cost(p, w.metric()));
    Ok(PlanResult {
        succeeded: path.is_some(),
        path,
        cost,
        encode_us: 0,
        plan_us: started.elapsed().as_micros() as u64,
        stats: s.stats,
    })
}

fn solve<M: StepModel + ?Sized>(
    s: &mut Session<'_, M>,
    x_init: &Config,
    goal: &GoalRegion,
) -> Option<Path> {
    if goal.contains(x_init, s.w.metric()) {
        return Some(Path::single(x_init.clone()));
    }
    let strict = s.cfg.strict_step;
    // A pair already accepted by contraction was checked at the strict step.
    let accept = |s: &Session<'_, M>, p: &Path, verified: bool| -> bool {
        (verified && p.len() > 1 || path_feasible(p, s.w, strict, s.body).unwrap_or(false))
            && p.first() == x_init
            && goal.contains(p.last(), s.w.metric())
    };
    let tau = match s.bidir_partial(x_init, &goal.center, s.cfg.plan_step) {
        Ok(tau) => tau,
        // Hybrid mode hands the unconnected halves to replanning.
        Err(partial) if s.cfg.mode == ReplanMode::Hr => partial,
        Err(_) => return None,
    };
    let (tau, verified) = contract(&tau, |a, b| {
        s.stats.steer_checks += 1;
        segment_free_unchecked(a, b, s.w, strict, s.body)
    });
    if accept(s, &tau, verified) {
        return Some(tau);
    }
    let fresh = s.replan(tau, s.cfg.replan_depth)?;
    let (fresh, verified) = contract(&fresh, |a, b| {
        s.stats.steer_checks += 1;
        segment_free_unchecked(a, b, s.w, strict, s.body)
    });
    accept(s, &fresh, verified).then_some(fresh)
}

/// Encodes `cloud`, then plans from `x_init` into `goal`.
#[allow(clippy::too_many_arguments)]
pub fn mpnet_plan<M: StepModel + ?Sized>(
    w: &Workspace,
    cloud: &PointCloud,
    x_init: &Config,
    goal: &GoalRegion,
    encoder: &EncoderModel,
    model: &M,
    cfg: &MpnetConfig,
    body: Option<&RigidBody>,
    rng: &mut RngStream,
) -> Result<PlanResult> {
    if encoder.format.workspace_dim != w.dim {
        return Err(PlanError::Invalid(format!(
            "encoder expects a {}-dimensional workspace, got {}",
            encoder.format.workspace_dim, w.dim
        )));
    }
    let t0 = Instant::now();
    let latent = encoder.encode(cloud)?;
    let encode_us = t0.elapsed().as_micros() as u64;
    let mut r = plan_with_latent(w, &latent, x_init, goal, model, cfg, body, rng)?;
    r.encode_us = encode_us;
    Ok(r)
}
