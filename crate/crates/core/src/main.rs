use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mpnet::geometry::{Config, GoalRegion, WorkspaceKind};
use mpnet::pipeline::bench::{solve_problem, PlannerKind};
use mpnet::pipeline::render::{render_svg, Stroke};
use mpnet::pipeline::{self, Layout, PipelineConfig, PipelineError, Problem, Split};

#[derive(Parser)]
#[command(name = "mpnet", version, about = "Neural motion planning: data, training, planning, benchmarks")]
struct Cli {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate workspaces, clouds, expert paths and test problems.
    GenData(Kinds),
    /// Train the obstacle encoder.
    TrainCae(Kinds),
    /// Train the planning network (needs a trained encoder).
    TrainPnet(Kinds),
    /// Run every planner on both test sets.
    Bench(Kinds),
    /// Every stage in order, then write the index.
    Run(Kinds),
    /// Plan one query in a generated workspace and print the result as JSON.
    Plan {
        #[arg(long)]
        kind: WorkspaceKind,
        #[arg(long)]
        workspace: String,
        /// Comma-separated start state.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        start: Vec<f64>,
        /// Comma-separated goal state.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        goal: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        radius: f64,
        #[arg(long, value_enum, default_value_t = Planner::Hr)]
        planner: Planner,
    },
    /// Draw MPNet-HR (red) and RRT* (blue) solutions of a test problem as SVG.
    Render {
        #[arg(long)]
        kind: WorkspaceKind,
        #[arg(long)]
        problem: String,
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Kinds {
    /// Restrict to these kinds (default: all configured).
    #[arg(long)]
    kind: Vec<WorkspaceKind>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Planner {
    Nr,
    Hr,
    Rrt,
}

impl From<Planner> for PlannerKind {
    fn from(p: Planner) -> Self {
        match p {
            Planner::Nr => PlannerKind::MpnetNr,
            Planner::Hr => PlannerKind::MpnetHr,
            Planner::Rrt => PlannerKind::RrtStar,
        }
    }
}

fn kinds(cfg: &PipelineConfig, k: &Kinds) -> Vec<WorkspaceKind> {
    if k.kind.is_empty() {
        cfg.kinds.clone()
    } else {
        k.kind.clone()
    }
}

fn find_problem(out: &Layout, kind: WorkspaceKind, id: &str) -> Result<Problem, PipelineError> {
    let (manifest, _) = pipeline::load_models(out, kind)?;
    for set in [Split::Seen, Split::Unseen] {
        if let Some(p) = manifest
            .problems(&out.data(kind), set)?
            .into_iter()
            .find(|p| p.id == id)
        {
            return Ok(p);
        }
    }
    Err(PipelineError::Config(format!("no problem {id} for {kind}")))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = Layout::new(&cli.out);
    match &cli.command {
        Command::GenData(k) => {
            for kind in kinds(&cfg, k) {
                let m = pipeline::stage_gen_data(&cfg, &out, kind)?;
                println!("{kind}: dataset {}", m.fingerprint);
            }
        }
        Command::TrainCae(k) => {
            for kind in kinds(&cfg, k) {
                let h = pipeline::stage_train_cae(&cfg, &out, kind)?;
                let (first, last) = (&h[0], &h[h.len() - 1]);
                println!("{kind}: encoder loss {:.6} -> {:.6}", first.train_loss, last.train_loss);
            }
        }
        Command::TrainPnet(k) => {
            for kind in kinds(&cfg, k) {
                let h = pipeline::stage_train_pnet(&cfg, &out, kind)?;
                let (first, last) = (&h[0], &h[h.len() - 1]);
                println!("{kind}: planner loss {:.6} -> {:.6}", first.train_loss, last.train_loss);
            }
        }
        Command::Bench(k) | Command::Run(k) => {
            let is_run = matches!(cli.command, Command::Run(_));
            for kind in kinds(&cfg, k) {
                if is_run {
                    pipeline::stage_gen_data(&cfg, &out, kind)?;
                    pipeline::stage_train_cae(&cfg, &out, kind)?;
                    pipeline::stage_train_pnet(&cfg, &out, kind)?;
                }
                let r = pipeline::stage_bench(&cfg, &out, kind)?;
                for s in &r.summaries {
                    println!(
                        "{kind} {:?} {}: success {:.3}, median {:.0} us, mean {:.0} ± {:.0} us",
                        s.test_set, s.planner, s.success_rate, s.time_median_us, s.time_mean_us, s.time_std_us
                    );
                }
            }
            pipeline::write_index(&cfg, &out)?;
        }
        Command::Plan {
            kind,
            workspace,
            start,
            goal,
            radius,
            planner,
        } => {
            let (manifest, bundle) = pipeline::load_models(&out, *kind)?;
            let data = out.data(*kind);
            let w = manifest.workspace(&data, workspace)?;
            let latent = bundle.encoder.encode(&manifest.cloud(&data, workspace)?)?;
            let problem = Problem {
                id: "cli".into(),
                workspace_id: workspace.clone(),
                start: Config::new(start.clone()),
                goal: GoalRegion::new(Config::new(goal.clone()), *radius)?,
                expert_cost: f64::NAN,
            };
            let a = solve_problem(
                (*planner).into(),
                &w,
                &latent,
                &problem,
                &bundle.planner,
                &cfg.bench,
                manifest.spec.body.as_ref(),
                cfg.seed,
            )?;
            println!("{}", serde_json::to_string_pretty(&a).expect("attempts serialize"));
        }
        Command::Render { kind, problem, file } => {
            let p = find_problem(&out, *kind, problem)?;
            let (manifest, bundle) = pipeline::load_models(&out, *kind)?;
            let data = out.data(*kind);
            let w = manifest.workspace(&data, &p.workspace_id)?;
            let latent = bundle.encoder.encode(&manifest.cloud(&data, &p.workspace_id)?)?;
            let body = manifest.spec.body.as_ref();
            let mut strokes = Vec::new();
            let solve = |planner| {
                solve_problem(planner, &w, &latent, &p, &bundle.planner, &cfg.bench, body, cfg.seed)
            };
            let mp = solve(PlannerKind::MpnetHr)?;
            let rrt = solve(PlannerKind::RrtStar)?;
            if let Some(path) = &mp.path {
                strokes.push(Stroke { path, color: "red" });
            }
            if let Some(path) = &rrt.path {
                strokes.push(Stroke { path, color: "blue" });
            }
            let svg = render_svg(&w, &strokes, Some(&p.start), Some((&p.goal.center, p.goal.radius)), body);
            let file = file
                .clone()
                .unwrap_or_else(|| out.root.join("render").join(format!("{problem}.svg")));
            pipeline::write_svg(&file, &svg)?;
            println!("wrote {}", file.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
