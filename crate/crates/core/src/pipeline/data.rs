//! Workspace generation, expert demonstrations and the on-disk dataset.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path as FsPath;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{read_json, sha256_file, sha256_hex, write_json, FileRef, PipelineError, Result};
use crate::geometry::{
    path_cost, path_feasible, point_in_free_space, segment_collision_free, Aabb, Config,
    GoalRegion, Path, RigidBody, Workspace, WorkspaceKind,
};
use crate::planner::lazy_states_contraction;
use crate::pointcloud::{sample_obstacle_cloud, PointCloud};
use crate::rng::{derive_seed, RngStream};
use crate::rrt::{rrtstar_plan, RrtConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub count_min: usize,
    pub count_max: usize,
    pub side_min: f64,
    pub side_max: f64,
    /// Equal sides on every axis.
    pub cubic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceSpec {
    pub kind: WorkspaceKind,
    pub bounds: Aabb,
    pub obstacles: ObstacleSpec,
    pub n_train: usize,
    pub n_unseen: usize,
    /// Clearance kept by the corner-to-corner connectivity grid.
    pub clearance: f64,
    pub grid_cell: f64,
    pub body: Option<RigidBody>,
    /// Rejection attempts allowed per workspace.
    pub max_attempts: usize,
    pub seed: u64,
}

impl WorkspaceSpec {
    pub fn desk(kind: WorkspaceKind, n_train: usize, n_unseen: usize, seed: u64) -> Self {
        let square = ObstacleSpec {
            count_min: 7,
            count_max: 7,
            side_min: 5.0,
            side_max: 5.0,
            cubic: true,
        };
        let (bounds, obstacles) = match kind {
            WorkspaceKind::Simple2d | WorkspaceKind::Rigid2d => (box_of(2, 20.0), square),
            WorkspaceKind::Complex2d => (
                box_of(2, 20.0),
                ObstacleSpec {
                    count_min: 10,
                    count_max: 10,
                    side_min: 2.0,
                    side_max: 8.0,
                    cubic: false,
                },
            ),
            WorkspaceKind::Complex3d => (
                box_of(3, 20.0),
                ObstacleSpec {
                    count_min: 10,
                    count_max: 10,
                    side_min: 4.0,
                    side_max: 10.0,
                    cubic: false,
                },
            ),
        };
        let body = kind
            .is_rigid()
            .then(|| RigidBody::rectangle(3.0, 1.0).expect("valid rectangle"));
        let clearance = body.as_ref().map_or(0.5, RigidBody::circumradius);
        WorkspaceSpec {
            kind,
            bounds,
            obstacles,
            n_train,
            n_unseen,
            clearance,
            grid_cell: 1.0,
            body,
            max_attempts: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.obstacles;
        let min_extent = self.bounds.extent().into_iter().fold(f64::INFINITY, f64::min);
        let problems = [
            (self.n_train == 0, "n_train must be positive"),
            (self.n_unseen == 0, "n_unseen must be positive"),
            (o.count_min > o.count_max, "obstacle count range is empty"),
            (
                !(o.side_min > 0.0 && o.side_min <= o.side_max),
                "obstacle side range is empty",
            ),
            (o.side_max >= min_extent, "obstacles do not fit within bounds"),
            (self.bounds.dim() != self.kind.workspace_dim(), "bounds dimension"),
            (self.kind.is_rigid() != self.body.is_some(), "body iff rigid"),
            (!(self.grid_cell > 0.0), "grid cell must be positive"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(PipelineError::Config(format!("workspace spec: {msg}"))),
            None => Ok(()),
        }
    }
}

fn box_of(dim: usize, half: f64) -> Aabb {
    Aabb::new(vec![-half; dim], vec![half; dim]).expect("valid box")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
    /// Extra clouds for encoder training only.
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedWorkspace {
    pub id: String,
    pub split: Split,
    pub workspace: Workspace,
}

fn sample_obstacles(spec: &WorkspaceSpec, rng: &mut RngStream) -> Vec<Aabb> {
    let o = &spec.obstacles;
    let d = spec.bounds.dim();
    let count = rng.gen_range(o.count_min..=o.count_max);
    (0..count)
        .map(|_| {
            let first = rng.gen_range(o.side_min..=o.side_max);
            let sides: Vec<f64> = (0..d)
                .map(|i| {
                    if o.cubic || i == 0 {
                        first
                    } else {
                        rng.gen_range(o.side_min..=o.side_max)
                    }
                })
                .collect();
            let min: Vec<f64> = (0..d)
                .map(|i| rng.gen_range(spec.bounds.min[i]..=spec.bounds.max[i] - sides[i]))
                .collect();
            let max = min.iter().zip(&sides).map(|(m, s)| m + s).collect();
            Aabb { min, max }
        })
        .collect()
}

/// True iff a grid path with `clearance` to every obstacle joins the lowest and highest corners.
pub fn corners_connected(w: &Workspace, cell: f64, clearance: f64) -> bool {
    let d = w.dim;
    let inner: Vec<f64> = w.bounds.extent().iter().map(|e| e - 2.0 * clearance).collect();
    if inner.iter().any(|e| *e < 0.0) {
        return false;
    }
    let shape: Vec<usize> = inner
        .iter()
        .map(|e| (e / cell).ceil() as usize + 1)
        .collect();
    let point = |idx: &[usize]| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let h = if shape[i] > 1 { inner[i] / (shape[i] - 1) as f64 } else { 0.0 };
                w.bounds.min[i] + clearance + idx[i] as f64 * h
            })
            .collect()
    };
    let margin = vec![clearance; d];
    let grown: Vec<Aabb> = w.obstacles.iter().map(|o| o.inflated(&margin)).collect();
    let free = |idx: &[usize]| {
        let p = point(idx);
        !grown.iter().any(|g| g.contains_closed(&p))
    };
    let total: usize = shape.iter().product();
    let encode = |idx: &[usize]| {
        let mut f = 0;
        for i in (0..d).rev() {
            f = f * shape[i] + idx[i];
        }
        f
    };
    let start = vec![0; d];
    let goal: Vec<usize> = shape.iter().map(|s| s - 1).collect();
    if !free(&start) || !free(&goal) {
        return false;
    }
    let mut seen = vec![false; total];
    seen[encode(&start)] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(cur) = queue.pop_front() {
        if cur == goal {
            return true;
        }
        for axis in 0..d {
            for up in [false, true] {
                if (!up && cur[axis] == 0) || (up && cur[axis] + 1 == shape[axis]) {
                    continue;
                }
                let mut next = cur.clone();
                next[axis] = if up { cur[axis] + 1 } else { cur[axis] - 1 };
                let f = encode(&next);
                if !seen[f] && free(&next) {
                    seen[f] = true;
                    queue.push_back(next);
                }
            }
        }
    }
    false
}

fn generate_one(spec: &WorkspaceSpec, rng: &mut RngStream, id: &str) -> Result<Workspace> {
    for _ in 0..spec.max_attempts {
        let obstacles = sample_obstacles(spec, rng);
        let w = Workspace::new(spec.kind, spec.bounds.clone(), obstacles)?;
        if corners_connected(&w, spec.grid_cell, spec.clearance) {
            return Ok(w);
        }
    }
    Err(PipelineError::Rejection(format!(
        "{id}: no connected workspace after {} attempts; use fewer or smaller obstacles",
        spec.max_attempts
    )))
}

/// Seen (training) then unseen workspaces, rejection-sampled for connectivity.
pub fn gen_workspaces(spec: &WorkspaceSpec) -> Result<Vec<GeneratedWorkspace>> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let plan = (0..spec.n_train)
        .map(|i| (format!("{}-seen-{i:03}", spec.kind), Split::Seen))
        .chain((0..spec.n_unseen).map(|i| (format!("{}-unseen-{i:03}", spec.kind), Split::Unseen)));
    plan.map(|(id, split)| {
        let workspace = generate_one(spec, &mut rng, &id)?;
        Ok(GeneratedWorkspace { id, split, workspace })
    })
    .collect()
}

/// Workspaces whose clouds only feed encoder training.
pub fn gen_auxiliary(spec: &WorkspaceSpec, count: usize) -> Result<Vec<GeneratedWorkspace>> {
    let mut rng = RngStream::new(derive_seed(spec.seed, 0xA0C5));
    (0..count)
        .map(|i| {
            let id = format!("{}-aux-{i:03}", spec.kind);
            let obstacles = sample_obstacles(spec, &mut rng);
            let workspace = Workspace::new(spec.kind, spec.bounds.clone(), obstacles)?;
            Ok(GeneratedWorkspace {
                id,
                split: Split::Auxiliary,
                workspace,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPath {
    pub start: Config,
    pub goal: GoalRegion,
    pub path: Path,
    /// Cost of the planner's path before contraction.
    pub raw_cost: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSettings {
    pub rrt: RrtConfig,
    pub goal_radius: f64,
    /// Minimum start-goal distance as a fraction of the workspace diagonal.
    pub min_separation: f64,
    /// Attempts allowed per requested path.
    pub retries_per_path: usize,
}

fn sample_free(w: &Workspace, body: Option<&RigidBody>, rng: &mut RngStream) -> Result<Config> {
    let b = w.state_bounds();
    for _ in 0..100_000 {
        let x = Config::new(
            b.min
                .iter()
                .zip(&b.max)
                .map(|(lo, hi)| rng.gen_range(*lo..*hi))
                .collect(),
        );
        if point_in_free_space(&x, w, body)? {
            return Ok(x);
        }
    }
    Err(PipelineError::ExpertBudget(
        "could not sample a free state; the workspace is nearly full".into(),
    ))
}

/// Feasible start/goal queries solved by RRT*, contracted and strictly validated.
pub fn gen_expert_paths(
    w: &Workspace,
    count: usize,
    settings: &ExpertSettings,
    seed: u64,
    body: Option<&RigidBody>,
) -> Result<Vec<ExpertPath>> {
    let mut rng = RngStream::new(seed);
    let diagonal = w.bounds.extent().iter().map(|e| e * e).sum::<f64>().sqrt();
    let min_sep = settings.min_separation * diagonal;
    let strict = settings.rrt.validate_step;
    let budget = count * settings.retries_per_path.max(1);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts == budget {
            return Err(PipelineError::ExpertBudget(format!(
                "only {} of {count} expert paths after {budget} attempts",
                out.len()
            )));
        }
        attempts += 1;
        let start = sample_free(w, body, &mut rng)?;
        let goal_center = sample_free(w, body, &mut rng)?;
        let sep = start.coords()[..w.dim]
            .iter()
            .zip(&goal_center.coords()[..w.dim])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if sep < min_sep {
            continue;
        }
        let goal = GoalRegion::new(goal_center, settings.goal_radius)?;
        let cfg = RrtConfig {
            seed: rng.gen(),
            ..settings.rrt.clone()
        };
        let Some((raw, _)) = rrtstar_plan(w, &start, &goal, &cfg, body)? else {
            continue;
        };
        let mut states = raw.states;
        let last = states.last().expect("nonempty").clone();
        if last != goal.center && segment_collision_free(&last, &goal.center, w, strict, body)? {
            states.push(goal.center.clone());
        }
        let raw = Path::new(states)?;
        let raw_cost = path_cost(&raw, w.metric());
        let path = lazy_states_contraction(&raw, w, strict, body)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if !path_feasible(&path, w, strict, body)? {
            continue;
        }
        let cost = path_cost(&path, w.metric());
        out.push(ExpertPath {
            start,
            goal,
            path,
            raw_cost,
            cost,
        });
    }
    Ok(out)
}

/// One benchmark query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub workspace_id: String,
    pub start: Config,
    pub goal: GoalRegion,
    /// Cost of the contracted expert solution that certifies solvability.
    pub expert_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub aux_clouds: usize,
    pub paths_per_workspace: usize,
    pub seen_problems_per_workspace: usize,
    pub unseen_problems_per_workspace: usize,
    pub n_pc: usize,
    pub expert: ExpertSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceEntry {
    pub id: String,
    pub split: Split,
    pub workspace: FileRef,
    pub cloud: FileRef,
    pub paths: Option<FileRef>,
    pub path_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: WorkspaceKind,
    pub spec: WorkspaceSpec,
    pub settings: DataConfig,
    pub workspaces: Vec<WorkspaceEntry>,
    pub problems_seen: FileRef,
    pub problems_unseen: FileRef,
    /// Hash of everything above; models record it to pin their training data.
    pub fingerprint: String,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

impl DatasetManifest {
    fn compute_fingerprint(&self) -> String {
        let mut unsigned = self.clone();
        unsigned.fingerprint.clear();
        sha256_hex(serde_json::to_string(&unsigned).expect("manifest serializes").as_bytes())
    }

    pub fn ids(&self, split: Split) -> BTreeSet<&str> {
        self.workspaces
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }

    /// Checks split disjointness, the fingerprint and every file hash under `dir`.
    pub fn verify(&self, dir: &FsPath) -> Result<()> {
        let seen = self.ids(Split::Seen);
        let unseen = self.ids(Split::Unseen);
        if let Some(id) = seen.intersection(&unseen).next() {
            return Err(PipelineError::Discipline(format!("{id} is both seen and unseen")));
        }
        if self.compute_fingerprint() != self.fingerprint {
            return Err(PipelineError::Fingerprint {
                expected: self.fingerprint.clone(),
                got: self.compute_fingerprint(),
            });
        }
        let files = self
            .workspaces
            .iter()
            .flat_map(|e| [Some(&e.workspace), Some(&e.cloud), e.paths.as_ref()])
            .flatten()
            .chain([&self.problems_seen, &self.problems_unseen]);
        for f in files {
            if sha256_file(&dir.join(&f.path))? != f.sha256 {
                return Err(PipelineError::HashMismatch(f.path.clone()));
            }
        }
        Ok(())
    }

    pub fn load(dir: &FsPath) -> Result<Self> {
        let m: DatasetManifest = read_json(&dir.join(DATASET_MANIFEST))?;
        m.verify(dir)?;
        Ok(m)
    }

    pub fn entry(&self, id: &str) -> Result<&WorkspaceEntry> {
        self.workspaces
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| PipelineError::Config(format!("unknown workspace {id}")))
    }

    pub fn workspace(&self, dir: &FsPath, id: &str) -> Result<Workspace> {
        let w: Workspace = read_json(&dir.join(&self.entry(id)?.workspace.path))?;
        w.validate()?;
        Ok(w)
    }

    pub fn cloud(&self, dir: &FsPath, id: &str) -> Result<PointCloud> {
        read_json(&dir.join(&self.entry(id)?.cloud.path))
    }

    pub fn paths(&self, dir: &FsPath, id: &str) -> Result<Vec<ExpertPath>> {
        match &self.entry(id)?.paths {
            Some(f) => read_json(&dir.join(&f.path)),
            None => Ok(Vec::new()),
        }
    }

    pub fn problems(&self, dir: &FsPath, split: Split) -> Result<Vec<Problem>> {
        match split {
            Split::Seen => read_json(&dir.join(&self.problems_seen.path)),
            Split::Unseen => read_json(&dir.join(&self.problems_unseen.path)),
            Split::Auxiliary => Ok(Vec::new()),
        }
    }
}

fn problems_from(
    ws: &GeneratedWorkspace,
    count: usize,
    settings: &DataConfig,
    seed: u64,
    body: Option<&RigidBody>,
) -> Result<Vec<Problem>> {
    let solved = gen_expert_paths(&ws.workspace, count, &settings.expert, seed, body)?;
    Ok(solved
        .into_iter()
        .enumerate()
        .map(|(i, e)| Problem {
            id: format!("{}-q{i:03}", ws.id),
            workspace_id: ws.id.clone(),
            start: e.start,
            goal: e.goal,
            expert_cost: e.cost,
        })
        .collect())
}

/// Generates every workspace, cloud, expert path and test problem of one kind into `dir`.
pub fn gen_dataset(spec: &WorkspaceSpec, settings: &DataConfig, dir: &FsPath) -> Result<DatasetManifest> {
    let body = spec.body.as_ref();
    let mut generated = gen_workspaces(spec)?;
    generated.extend(gen_auxiliary(spec, settings.aux_clouds)?);
    let mut entries = Vec::new();
    let mut seen_problems = Vec::new();
    let mut unseen_problems = Vec::new();
    for (i, g) in generated.iter().enumerate() {
        let seed = derive_seed(spec.seed, 1 + i as u64);
        log::info!("{}: generating {:?} data", g.id, g.split);
        let workspace = write_json(dir, &format!("workspaces/{}.json", g.id), &g.workspace)?;
        let pc = sample_obstacle_cloud(&g.workspace, &g.id, settings.n_pc, derive_seed(seed, 1))?;
        let cloud = write_json(dir, &format!("clouds/{}.json", g.id), &pc)?;
        let (paths, path_count) = match g.split {
            Split::Seen => {
                let experts = gen_expert_paths(
                    &g.workspace,
                    settings.paths_per_workspace,
                    &settings.expert,
                    derive_seed(seed, 2),
                    body,
                )?;
                let n = experts.len();
                seen_problems.extend(problems_from(
                    g,
                    settings.seen_problems_per_workspace,
                    settings,
                    derive_seed(seed, 3),
                    body,
                )?);
                (Some(write_json(dir, &format!("paths/{}.json", g.id), &experts)?), n)
            }
            Split::Unseen => {
                unseen_problems.extend(problems_from(
                    g,
                    settings.unseen_problems_per_workspace,
                    settings,
                    derive_seed(seed, 3),
                    body,
                )?);
                (None, 0)
            }
            Split::Auxiliary => (None, 0),
        };
        entries.push(WorkspaceEntry {
            id: g.id.clone(),
            split: g.split,
            workspace,
            cloud,
            paths,
            path_count,
        });
    }
    let mut manifest = DatasetManifest {
        kind: spec.kind,
        spec: spec.clone(),
        settings: settings.clone(),
        workspaces: entries,
        problems_seen: write_json(dir, "problems/seen.json", &seen_problems)?,
        problems_unseen: write_json(dir, "problems/unseen.json", &unseen_problems)?,
        fingerprint: String::new(),
    };
    manifest.fingerprint = manifest.compute_fingerprint();
    write_json(dir, DATASET_MANIFEST, &manifest)?;
    Ok(manifest)
}
