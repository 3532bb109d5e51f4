//! Dataset generation, training and benchmark stages, and the artifact layout they share.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! <out>/index.json                 hashes of every artifact
//! <out>/<kind>/data/dataset.json   workspaces, clouds, expert paths, test problems
//! <out>/<kind>/models/models.json  encoder, decoder and planner weights
//! <out>/<kind>/bench/report.json   summaries and per-problem rows (+ rows.csv)
//! ```

pub mod bench;
pub mod data;
pub mod render;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{GeometryError, Workspace, WorkspaceKind};
use crate::models::{
    self, init_planner, train_cae, train_pnet, CaeArch, CloudFormat, DecoderModel, EncoderModel,
    EpochLoss, ImitationDataset, ModelBundle, ModelError, PnetArch, TrainConfig,
};
use crate::nn;
use crate::planner::PlanError;
use crate::pointcloud::{flatten_cloud, CloudError};
use crate::rng::derive_seed;
use crate::rrt::RrtConfig;

pub use bench::{run_benchmark, BenchConfig, BenchReport, PlannerKind};
pub use data::{
    gen_dataset, gen_expert_paths, gen_workspaces, DataConfig, DatasetManifest, ExpertSettings,
    Problem, Split, WorkspaceSpec,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {msg}")]
    Json { path: PathBuf, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("workspace generation failed: {0}")]
    Rejection(String),
    #[error("expert generation failed: {0}")]
    ExpertBudget(String),
    #[error("{0} does not match its recorded hash")]
    HashMismatch(String),
    #[error("fingerprint mismatch: expected {expected}, got {got}")]
    Fingerprint { expected: String, got: String },
    #[error("seen/unseen discipline violated: {0}")]
    Discipline(String),
    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl From<nn::NnError> for PipelineError {
    fn from(e: nn::NnError) -> Self {
        PipelineError::Model(e.into())
    }
}

/// A file relative to its manifest's directory, with its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &FsPath) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

fn read_bytes(path: &FsPath) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_bytes(path: &FsPath, bytes: &[u8]) -> Result<()> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

/// Pretty JSON at `dir/rel`; returns its reference.
pub fn write_json<T: Serialize + ?Sized>(dir: &FsPath, rel: &str, value: &T) -> Result<FileRef> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    write_bytes(&dir.join(rel), text.as_bytes())?;
    Ok(FileRef {
        path: rel.to_string(),
        sha256: sha256_hex(text.as_bytes()),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &FsPath) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub cae_hidden: Vec<usize>,
    /// `None` picks 28 latents in 2D and 64 in 3D.
    pub latent_dim: Option<usize>,
    pub cae: TrainConfig,
    pub pnet: PnetArch,
    pub pnet_train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            cae_hidden: CaeArch::desk(2).hidden,
            latent_dim: None,
            cae: TrainConfig {
                epochs: 100,
                batch_size: 16,
                lambda: 1e-3,
                ..TrainConfig::default()
            },
            pnet: PnetArch::desk(),
            pnet_train: TrainConfig {
                epochs: 150,
                batch_size: 64,
                ..TrainConfig::default()
            },
        }
    }
}

impl TrainSettings {
    pub fn cae_arch(&self, workspace_dim: usize) -> CaeArch {
        CaeArch {
            hidden: self.cae_hidden.clone(),
            latent_dim: self
                .latent_dim
                .unwrap_or_else(|| CaeArch::desk(workspace_dim).latent_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub n_train: usize,
    pub n_unseen: usize,
    pub aux_clouds: usize,
    pub paths_per_workspace: usize,
    pub seen_problems_per_workspace: usize,
    pub unseen_problems_per_workspace: usize,
    pub n_pc: usize,
    pub expert_iters: usize,
    pub goal_radius: f64,
}

impl Default for Scale {
    fn default() -> Self {
        Scale {
            n_train: 20,
            n_unseen: 2,
            aux_clouds: 100,
            paths_per_workspace: 150,
            seen_problems_per_workspace: 10,
            unseen_problems_per_workspace: 50,
            n_pc: crate::pointcloud::DEFAULT_N_PC,
            expert_iters: 5000,
            goal_radius: 0.5,
        }
    }
}

/// The JSON file accepted by `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub kinds: Vec<WorkspaceKind>,
    pub scale: Scale,
    pub train: TrainSettings,
    pub bench: BenchConfig,
    /// Replaces the default workspace spec of the matching kind. Seeds are overwritten.
    pub specs: Vec<WorkspaceSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            kinds: WorkspaceKind::ALL.to_vec(),
            scale: Scale::default(),
            train: TrainSettings::default(),
            bench: BenchConfig::default(),
            specs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Data = 1,
    Cae = 2,
    Pnet = 3,
    Bench = 4,
}

impl PipelineConfig {
    pub fn load(path: &FsPath) -> Result<Self> {
        read_json(path)
    }

    fn kind_seed(&self, kind: WorkspaceKind, stage: Stage) -> u64 {
        let k = WorkspaceKind::ALL.iter().position(|x| *x == kind).unwrap_or(0) as u64;
        derive_seed(derive_seed(self.seed, 100 + k), stage as u64)
    }

    pub fn spec(&self, kind: WorkspaceKind) -> WorkspaceSpec {
        let seed = self.kind_seed(kind, Stage::Data);
        match self.specs.iter().find(|s| s.kind == kind) {
            Some(s) => WorkspaceSpec { seed, ..s.clone() },
            None => WorkspaceSpec::desk(kind, self.scale.n_train, self.scale.n_unseen, seed),
        }
    }

    pub fn data_config(&self, spec: &WorkspaceSpec) -> Result<DataConfig> {
        let probe = Workspace::new(spec.kind, spec.bounds.clone(), vec![])?;
        Ok(DataConfig {
            aux_clouds: self.scale.aux_clouds,
            paths_per_workspace: self.scale.paths_per_workspace,
            seen_problems_per_workspace: self.scale.seen_problems_per_workspace,
            unseen_problems_per_workspace: self.scale.unseen_problems_per_workspace,
            n_pc: self.scale.n_pc,
            expert: ExpertSettings {
                rrt: RrtConfig {
                    max_iters: self.scale.expert_iters,
                    ..RrtConfig::for_workspace(&probe)
                },
                goal_radius: self.scale.goal_radius,
                min_separation: 0.25,
                retries_per_path: 20,
            },
        })
    }
}

/// Directory layout of one run.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self, kind: WorkspaceKind) -> PathBuf {
        self.root.join(kind.name()).join("data")
    }

    pub fn models(&self, kind: WorkspaceKind) -> PathBuf {
        self.root.join(kind.name()).join("models")
    }

    pub fn bench(&self, kind: WorkspaceKind) -> PathBuf {
        self.root.join(kind.name()).join("bench")
    }

    pub fn index(&self) -> PathBuf {
        self.root.join(INDEX)
    }
}

pub const INDEX: &str = "index.json";

pub fn stage_gen_data(cfg: &PipelineConfig, out: &Layout, kind: WorkspaceKind) -> Result<DatasetManifest> {
    let spec = cfg.spec(kind);
    let settings = cfg.data_config(&spec)?;
    gen_dataset(&spec, &settings, &out.data(kind))
}

fn cloud_format(manifest: &DatasetManifest) -> CloudFormat {
    CloudFormat {
        n_pc: manifest.settings.n_pc,
        workspace_dim: manifest.kind.workspace_dim(),
        bounds: manifest.spec.bounds.clone(),
    }
}

/// Trains the encoder on seen and auxiliary clouds. Unseen clouds are never read.
pub fn stage_train_cae(cfg: &PipelineConfig, out: &Layout, kind: WorkspaceKind) -> Result<Vec<EpochLoss>> {
    let data_dir = out.data(kind);
    let manifest = DatasetManifest::load(&data_dir)?;
    let format = cloud_format(&manifest);
    let mut clouds = Vec::new();
    for e in manifest.workspaces.iter().filter(|e| e.split != Split::Unseen) {
        clouds.push(flatten_cloud(&manifest.cloud(&data_dir, &e.id)?, &format.bounds));
    }
    let train = TrainConfig {
        seed: cfg.kind_seed(kind, Stage::Cae),
        ..cfg.train.cae.clone()
    };
    let arch = cfg.train.cae_arch(format.workspace_dim);
    log::info!("{kind}: training encoder on {} clouds", clouds.len());
    let (enc, dec, history) = train_cae(&clouds, &format, &arch, &train)?;
    let dir = out.models(kind);
    let created = format!("seed-{}", train.seed);
    write_json(&dir, "encoder_format.json", &format)?;
    nn::save_params(&enc.net, train.seed, &created, &dir.join("encoder.json"))?;
    nn::save_params(&dec.net, train.seed, &created, &dir.join("decoder.json"))?;
    write_json(&dir, "cae_history.json", &history)?;
    Ok(history)
}

/// Imitation dataset from every seen workspace's expert paths.
pub fn imitation_dataset(manifest: &DatasetManifest, data_dir: &FsPath) -> Result<ImitationDataset> {
    let format = cloud_format(manifest);
    let mut ds = ImitationDataset::default();
    for e in manifest.workspaces.iter().filter(|e| e.split == Split::Seen) {
        let w = manifest.workspace(data_dir, &e.id)?;
        let bounds = w.state_bounds();
        for (i, p) in manifest.paths(data_dir, &e.id)?.iter().enumerate() {
            ds.add_path(&e.id, i, &p.path, &bounds);
        }
        ds.clouds.insert(
            e.id.clone(),
            flatten_cloud(&manifest.cloud(data_dir, &e.id)?, &format.bounds),
        );
    }
    let unseen = manifest.ids(Split::Unseen);
    let leaked: Vec<&str> = ds
        .workspace_ids()
        .into_iter()
        .chain(ds.clouds.keys().map(String::as_str))
        .filter(|id| unseen.contains(id))
        .collect();
    if !leaked.is_empty() {
        return Err(PipelineError::Discipline(format!(
            "unseen workspaces in training data: {leaked:?}"
        )));
    }
    Ok(ds)
}

pub fn load_encoder(dir: &FsPath) -> Result<(EncoderModel, DecoderModel)> {
    let (enc, _) = nn::load_params(&dir.join("encoder.json"))?;
    let (dec, _) = nn::load_params(&dir.join("decoder.json"))?;
    let format: CloudFormat = read_json(&dir.join("encoder_format.json"))?;
    Ok((
        EncoderModel {
            latent_dim: enc.output_dim(),
            net: enc,
            format,
        },
        DecoderModel { net: dec },
    ))
}

/// Trains the planning network with the encoder frozen and writes the model bundle.
pub fn stage_train_pnet(cfg: &PipelineConfig, out: &Layout, kind: WorkspaceKind) -> Result<Vec<EpochLoss>> {
    let data_dir = out.data(kind);
    let manifest = DatasetManifest::load(&data_dir)?;
    let dir = out.models(kind);
    let (encoder, decoder) = load_encoder(&dir)?;
    let ds = imitation_dataset(&manifest, &data_dir)?;
    let probe = Workspace::new(kind, manifest.spec.bounds.clone(), vec![])?;
    let seed = cfg.kind_seed(kind, Stage::Pnet);
    let planner = init_planner(
        &cfg.train.pnet,
        kind.state_dim(),
        encoder.latent_dim,
        probe.state_bounds(),
        kind.is_rigid(),
        seed,
    )?;
    let train = TrainConfig {
        seed,
        ..cfg.train.pnet_train.clone()
    };
    log::info!("{kind}: training planner on {} transitions", ds.records.len());
    let (planner, history) = train_pnet(&ds, &encoder, planner, &train)?;
    let bundle = ModelBundle {
        encoder,
        planner,
        dataset_fingerprint: manifest.fingerprint.clone(),
    };
    bundle.save(&dir, Some(&decoder), seed)?;
    write_json(&dir, "pnet_history.json", &history)?;
    Ok(history)
}

pub fn stage_bench(cfg: &PipelineConfig, out: &Layout, kind: WorkspaceKind) -> Result<BenchReport> {
    let data_dir = out.data(kind);
    let manifest = DatasetManifest::load(&data_dir)?;
    let (bundle, _) = ModelBundle::load(&out.models(kind))?;
    let report = run_benchmark(
        &manifest,
        &data_dir,
        &bundle,
        &cfg.bench,
        cfg.kind_seed(kind, Stage::Bench),
    )?;
    report.write(&out.bench(kind))?;
    Ok(report)
}

/// Hashes of every artifact under the output root. Reports are hashed without wall times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub seed: u64,
    pub config_sha256: String,
    pub artifacts: BTreeMap<String, String>,
}

fn collect_files(dir: &FsPath, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let path = entry
            .map_err(|source| PipelineError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn write_index(cfg: &PipelineConfig, out: &Layout) -> Result<RunIndex> {
    let mut files = Vec::new();
    if out.root.exists() {
        collect_files(&out.root, &mut files)?;
    }
    files.sort();
    let mut artifacts = BTreeMap::new();
    for f in files {
        let rel = f
            .strip_prefix(&out.root)
            .expect("collected under root")
            .to_string_lossy()
            .replace('\\', "/");
        let hash = match f.file_name().and_then(|n| n.to_str()) {
            Some(INDEX) => continue,
            Some(bench::REPORT) => {
                let r: BenchReport = read_json(&f)?;
                sha256_hex(r.without_timings().to_json().as_bytes())
            }
            Some(bench::ROWS_CSV) => continue,
            _ => sha256_file(&f)?,
        };
        artifacts.insert(rel, hash);
    }
    let index = RunIndex {
        seed: cfg.seed,
        config_sha256: sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes()),
        artifacts,
    };
    write_json(&out.root, INDEX, &index)?;
    Ok(index)
}

/// Every stage for every configured kind, then the index.
pub fn run_all(cfg: &PipelineConfig, out: &Layout) -> Result<RunIndex> {
    for &kind in &cfg.kinds {
        stage_gen_data(cfg, out, kind)?;
        stage_train_cae(cfg, out, kind)?;
        stage_train_pnet(cfg, out, kind)?;
        stage_bench(cfg, out, kind)?;
    }
    write_index(cfg, out)
}

/// Reloads the bundle for `kind` and checks it against the dataset.
pub fn load_models(out: &Layout, kind: WorkspaceKind) -> Result<(DatasetManifest, ModelBundle)> {
    let manifest = DatasetManifest::load(&out.data(kind))?;
    let (bundle, _) = models::ModelBundle::load(&out.models(kind))?;
    if bundle.dataset_fingerprint != manifest.fingerprint {
        return Err(PipelineError::Fingerprint {
            expected: manifest.fingerprint,
            got: bundle.dataset_fingerprint,
        });
    }
    Ok((manifest, bundle))
}

pub fn write_svg(path: &FsPath, svg: &str) -> Result<()> {
    write_bytes(path, svg.as_bytes())
}
