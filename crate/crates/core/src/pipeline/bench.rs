//! Benchmark harness: every planner on the same problems with matched seeds.

use std::collections::BTreeMap;
use std::path::Path as FsPath;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{DatasetManifest, Problem, Split};
use super::{write_bytes, write_json, PipelineError, Result};
use crate::geometry::{Path, RigidBody, Workspace};
use crate::models::ModelBundle;
use crate::planner::{plan_with_latent, MpnetConfig, PlanStats, ReplanMode, StepModel};
use crate::rng::{derive_seed, RngStream};
use crate::rrt::{rrtstar_plan, RrtConfig};

pub const REPORT: &str = "report.json";
pub const ROWS_CSV: &str = "rows.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PlannerKind {
    #[serde(rename = "mpnet-nr")]
    MpnetNr,
    #[serde(rename = "mpnet-hr")]
    MpnetHr,
    #[serde(rename = "rrtstar")]
    RrtStar,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 3] = [PlannerKind::MpnetNr, PlannerKind::MpnetHr, PlannerKind::RrtStar];

    pub fn name(self) -> &'static str {
        match self {
            PlannerKind::MpnetNr => "mpnet-nr",
            PlannerKind::MpnetHr => "mpnet-hr",
            PlannerKind::RrtStar => "rrtstar",
        }
    }
}

impl std::fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub planners: Vec<PlannerKind>,
    pub bidir_iters: usize,
    pub replan_depth: usize,
    pub pnet_budget: usize,
    pub stochastic: bool,
    /// Iteration budget of the hybrid fallback.
    pub fallback_iters: usize,
    /// Baseline RRT* budget.
    pub rrt_iters: usize,
    /// Time the baseline to its first validated solution rather than the full budget.
    pub rrt_stop_at_first: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            planners: PlannerKind::ALL.to_vec(),
            bidir_iters: 80,
            replan_depth: 6,
            pnet_budget: 5000,
            stochastic: true,
            fallback_iters: 20_000,
            rrt_iters: 5000,
            rrt_stop_at_first: true,
        }
    }
}

impl BenchConfig {
    pub fn mpnet(&self, w: &Workspace, mode: ReplanMode, seed: u64) -> MpnetConfig {
        let base = MpnetConfig::for_workspace(w);
        MpnetConfig {
            bidir_iters: self.bidir_iters,
            replan_depth: self.replan_depth,
            mode,
            stochastic: self.stochastic,
            seed,
            pnet_budget: self.pnet_budget,
            hybrid: RrtConfig {
                max_iters: self.fallback_iters,
                ..base.hybrid.clone()
            },
            ..base
        }
    }

    pub fn rrt(&self, w: &Workspace, seed: u64) -> RrtConfig {
        RrtConfig {
            max_iters: self.rrt_iters,
            stop_at_first: self.rrt_stop_at_first,
            seed,
            ..RrtConfig::for_workspace(w)
        }
    }
}

/// Outcome of one planner on one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub path: Option<Path>,
    pub cost: Option<f64>,
    pub time_us: u64,
    pub stats: PlanStats,
}

/// Runs `planner` on `problem`. MPNet variants need the workspace latent.
#[allow(clippy::too_many_arguments)]
pub fn solve_problem<M: StepModel + ?Sized>(
    planner: PlannerKind,
    w: &Workspace,
    latent: &[f64],
    problem: &Problem,
    model: &M,
    cfg: &BenchConfig,
    body: Option<&RigidBody>,
    seed: u64,
) -> Result<Attempt> {
    let mode = match planner {
        PlannerKind::MpnetNr => ReplanMode::Nr,
        PlannerKind::MpnetHr => ReplanMode::Hr,
        PlannerKind::RrtStar => {
            let started = Instant::now();
            let found = rrtstar_plan(w, &problem.start, &problem.goal, &cfg.rrt(w, seed), body)?;
            let time_us = started.elapsed().as_micros() as u64;
            return Ok(Attempt {
                cost: found.as_ref().map(|(_, c)| *c),
                path: found.map(|(p, _)| p),
                time_us,
                stats: PlanStats::default(),
            });
        }
    };
    let mcfg = cfg.mpnet(w, mode, seed);
    let r = plan_with_latent(
        w,
        latent,
        &problem.start,
        &problem.goal,
        model,
        &mcfg,
        body,
        &mut RngStream::new(seed),
    )?;
    Ok(Attempt {
        path: r.path,
        cost: r.cost,
        time_us: r.plan_us,
        stats: r.stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub problem_id: String,
    pub test_set: Split,
    pub planner: PlannerKind,
    pub success: bool,
    pub time_us: u64,
    pub cost: Option<f64>,
    pub states: usize,
    pub pnet_calls: usize,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub planner: PlannerKind,
    pub test_set: Split,
    pub problems: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub time_mean_us: f64,
    pub time_std_us: f64,
    pub time_median_us: f64,
    /// Mean over successful problems only.
    pub cost_mean: Option<f64>,
}

/// Baseline time over MPNet-NR time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub test_set: Split,
    pub mean_ratio: f64,
    pub median_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub kind: String,
    pub fingerprint: String,
    pub seed: u64,
    pub timing_note: String,
    /// Encoding time per workspace, excluded from planning times.
    pub encode_us: BTreeMap<String, u64>,
    pub summaries: Vec<Summary>,
    pub speedups: Vec<Speedup>,
    pub rows: Vec<BenchRow>,
}

pub const TIMING_NOTE: &str = "times are single-query wall-clock microseconds, \
not CPU time; encoding is measured separately and excluded";

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn summarize(rows: &[BenchRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(PlannerKind, Split), Vec<&BenchRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.planner, r.test_set)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((planner, test_set), rs)| {
            let n = rs.len() as f64;
            let mut times: Vec<f64> = rs.iter().map(|r| r.time_us as f64).collect();
            let mean = times.iter().sum::<f64>() / n;
            let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
            let costs: Vec<f64> = rs.iter().filter(|r| r.success).filter_map(|r| r.cost).collect();
            let successes = rs.iter().filter(|r| r.success).count();
            Summary {
                planner,
                test_set,
                problems: rs.len(),
                successes,
                success_rate: successes as f64 / n,
                time_mean_us: mean,
                time_std_us: var.sqrt(),
                time_median_us: median(&mut times),
                cost_mean: (!costs.is_empty()).then(|| costs.iter().sum::<f64>() / costs.len() as f64),
            }
        })
        .collect()
}

fn speedups(summaries: &[Summary]) -> Vec<Speedup> {
    [Split::Seen, Split::Unseen]
        .into_iter()
        .filter_map(|set| {
            let find = |p| summaries.iter().find(|s| s.planner == p && s.test_set == set);
            let (base, nr) = (find(PlannerKind::RrtStar)?, find(PlannerKind::MpnetNr)?);
            Some(Speedup {
                test_set: set,
                mean_ratio: base.time_mean_us / nr.time_mean_us.max(1.0),
                median_ratio: base.time_median_us / nr.time_median_us.max(1.0),
            })
        })
        .collect()
}

impl BenchReport {
    pub fn from_rows(kind: String, fingerprint: String, seed: u64, encode_us: BTreeMap<String, u64>, mut rows: Vec<BenchRow>) -> Self {
        rows.sort_by(|a, b| (&a.problem_id, a.planner).cmp(&(&b.problem_id, b.planner)));
        let summaries = summarize(&rows);
        BenchReport {
            kind,
            fingerprint,
            seed,
            timing_note: TIMING_NOTE.into(),
            encode_us,
            speedups: speedups(&summaries),
            summaries,
            rows,
        }
    }

    pub fn summary(&self, planner: PlannerKind, set: Split) -> Option<&Summary> {
        self.summaries
            .iter()
            .find(|s| s.planner == planner && s.test_set == set)
    }

    /// Copy with every wall-clock field zeroed; what reproducibility checks compare.
    pub fn without_timings(&self) -> BenchReport {
        let mut r = self.clone();
        r.encode_us.values_mut().for_each(|t| *t = 0);
        r.rows.iter_mut().for_each(|row| row.time_us = 0);
        r.summaries = summarize(&r.rows);
        r.speedups.clear();
        r
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        #[derive(Serialize)]
        struct CsvRow<'a> {
            problem_id: &'a str,
            planner: PlannerKind,
            success: bool,
            time_us: u64,
            cost: Option<f64>,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                problem_id: &r.problem_id,
                planner: r.planner,
                success: r.success,
                time_us: r.time_us,
                cost: r.cost,
            })
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn write(&self, dir: &FsPath) -> Result<()> {
        write_json(dir, REPORT, self)?;
        write_bytes(&dir.join(ROWS_CSV), self.to_csv().as_bytes())
    }
}

/// Runs every configured planner on both test sets of `manifest`.
pub fn run_benchmark(
    manifest: &DatasetManifest,
    data_dir: &FsPath,
    bundle: &ModelBundle,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<BenchReport> {
    if bundle.dataset_fingerprint != manifest.fingerprint {
        return Err(PipelineError::Fingerprint {
            expected: manifest.fingerprint.clone(),
            got: bundle.dataset_fingerprint.clone(),
        });
    }
    let body = manifest.spec.body.as_ref();
    let mut jobs: Vec<(Split, Problem)> = Vec::new();
    for set in [Split::Seen, Split::Unseen] {
        jobs.extend(manifest.problems(data_dir, set)?.into_iter().map(|p| (set, p)));
    }
    let mut workspaces = BTreeMap::new();
    let mut latents = BTreeMap::new();
    let mut encode_us = BTreeMap::new();
    for (_, p) in &jobs {
        if workspaces.contains_key(&p.workspace_id) {
            continue;
        }
        let w = manifest.workspace(data_dir, &p.workspace_id)?;
        let cloud = manifest.cloud(data_dir, &p.workspace_id)?;
        let t0 = Instant::now();
        let z = bundle.encoder.encode(&cloud)?;
        encode_us.insert(p.workspace_id.clone(), t0.elapsed().as_micros() as u64);
        latents.insert(p.workspace_id.clone(), z);
        workspaces.insert(p.workspace_id.clone(), w);
    }
    log::info!("{}: benchmarking {} problems", manifest.kind, jobs.len());
    // Planner-major order: each planner sweeps the whole problem set in turn.
    let mut rows = Vec::with_capacity(jobs.len() * cfg.planners.len());
    for &planner in &cfg.planners {
        let batch: Vec<BenchRow> = jobs
            .par_iter()
            .enumerate()
            .map(|(i, (set, p))| {
                let a = solve_problem(
                    planner,
                    &workspaces[&p.workspace_id],
                    &latents[&p.workspace_id],
                    p,
                    &bundle.planner,
                    cfg,
                    body,
                    derive_seed(seed, i as u64),
                )?;
                Ok(BenchRow {
                    problem_id: p.id.clone(),
                    test_set: *set,
                    planner,
                    success: a.path.is_some(),
                    time_us: a.time_us,
                    cost: a.cost,
                    states: a.path.as_ref().map_or(0, Path::len),
                    pnet_calls: a.stats.pnet_calls,
                    fallback_used: a.stats.fallback_used,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(batch);
    }
    Ok(BenchReport::from_rows(
        manifest.kind.to_string(),
        manifest.fingerprint.clone(),
        seed,
        encode_us,
        rows,
    ))
}
