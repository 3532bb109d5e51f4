//! Encoder (trained through an encoder-decoder reconstruction objective) and planning
//! network (trained by imitation of expert transitions), plus their inference calls.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path as FsPath;
use std::sync::OnceLock;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Bounds, Config, Path};
use crate::nn::{self, stack_specs, Adam, AdamConfig, InferenceMlp, Mlp, Mode, NnError};
use crate::pointcloud::{flatten_cloud, normalize, denormalize, PointCloud};
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged (non-finite loss) at epoch {epoch} with seed {seed}")]
    Diverged { seed: u64, epoch: usize },
    #[error("planning network produced a non-finite state for x_t={x_t:?}, x_goal={x_goal:?}")]
    NonFinite { x_t: Vec<f64>, x_goal: Vec<f64> },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            lambda: 1e-3,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ModelError::Invalid("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) {
            return Err(ModelError::Invalid(
                "learning rate must be positive and lambda non-negative".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(ModelError::Invalid(format!(
                "validation fraction {} outside (0, 0.5]",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Loss recorded after `epoch` passes over the data (epoch 0 is the initialization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Encoder widths. The last hidden layer feeds a linear layer to the latent code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaeArch {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl CaeArch {
    /// Three PReLU layers then the latent output; 28 latents in 2D, 64 in 3D.
    pub fn desk(workspace_dim: usize) -> Self {
        CaeArch {
            hidden: vec![512, 256, 128],
            latent_dim: if workspace_dim == 3 { 64 } else { 28 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnetArch {
    pub hidden: Vec<usize>,
    pub dropout_p: f64,
}

impl Default for PnetArch {
    fn default() -> Self {
        PnetArch {
            hidden: vec![512, 512, 384, 384, 256, 256, 128, 128, 64, 64, 32, 32],
            dropout_p: 0.5,
        }
    }
}

impl PnetArch {
    /// Narrower layers and lighter dropout, trainable on a few thousand transitions.
    pub fn desk() -> Self {
        PnetArch {
            hidden: vec![256, 256, 192, 192, 128, 128, 96, 96, 64, 64, 32, 32],
            dropout_p: 0.2,
        }
    }
}

/// Shape of the clouds an encoder accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudFormat {
    pub n_pc: usize,
    pub workspace_dim: usize,
    pub bounds: Bounds,
}

impl CloudFormat {
    pub fn input_len(&self) -> usize {
        self.n_pc * self.workspace_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub net: Mlp,
    pub latent_dim: usize,
    pub format: CloudFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerModel {
    pub net: Mlp,
    pub state_dim: usize,
    pub latent_dim: usize,
    pub dropout_p: f64,
    /// Configuration-space normalization range.
    pub bounds: Bounds,
    /// Last coordinate is a heading and is wrapped after denormalization.
    pub heading: bool,
    /// Single-precision copy of `net`, built on the first `step`. Reset it after editing `net`.
    pub fast: InferenceCache,
}

#[derive(Debug, Clone, Default)]
pub struct InferenceCache(OnceLock<InferenceMlp>);

impl InferenceCache {
    pub fn reset(&mut self) {
        self.0 = OnceLock::new();
    }
}

/// A cache never distinguishes two models.
impl PartialEq for InferenceCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

fn rows(data: &[&[f64]]) -> Array2<f64> {
    let cols = data.first().map_or(0, |r| r.len());
    let mut a = Array2::zeros((data.len(), cols));
    for (mut row, src) in a.rows_mut().into_iter().zip(data) {
        row.assign(&ndarray::ArrayView1::from(*src));
    }
    a
}

/// Trains encoder and decoder from random initialization.
pub fn train_cae(
    clouds: &[Vec<f64>],
    format: &CloudFormat,
    arch: &CaeArch,
    cfg: &TrainConfig,
) -> Result<(EncoderModel, DecoderModel, Vec<EpochLoss>)> {
    let mut rng = RngStream::new(cfg.seed);
    let mut dec_hidden = arch.hidden.clone();
    dec_hidden.reverse();
    let enc = Mlp::new(
        stack_specs(format.input_len(), &arch.hidden, arch.latent_dim, 0.0),
        &mut rng,
    )?;
    let dec = Mlp::new(
        stack_specs(arch.latent_dim, &dec_hidden, format.input_len(), 0.0),
        &mut rng,
    )?;
    train_cae_from(enc, dec, clouds, format, cfg)
}

fn reconstruction_objective(enc: &Mlp, dec: &Mlp, data: &Array2<f64>, lambda: f64) -> Result<f64> {
    let mut r = RngStream::new(0);
    let (z, _) = enc.forward(data.view(), Mode::DeterministicInfer, &mut r)?;
    let (xhat, _) = dec.forward(z.view(), Mode::DeterministicInfer, &mut r)?;
    Ok(nn::cae_loss(data.view(), xhat.view(), enc, lambda, data.nrows())?)
}

/// Trains the given encoder/decoder pair on flattened clouds.
///
/// History entry `k` is the full-dataset objective after `k` epochs.
pub fn train_cae_from(
    mut enc: Mlp,
    mut dec: Mlp,
    clouds: &[Vec<f64>],
    format: &CloudFormat,
    cfg: &TrainConfig,
) -> Result<(EncoderModel, DecoderModel, Vec<EpochLoss>)> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(ModelError::Invalid("no clouds to train on".into()));
    }
    if let Some(bad) = clouds.iter().find(|c| c.len() != format.input_len()) {
        return Err(ModelError::Shape(format!(
            "cloud of length {} but the format needs {}",
            bad.len(),
            format.input_len()
        )));
    }
    if enc.input_dim() != format.input_len() || dec.input_dim() != enc.output_dim() {
        return Err(ModelError::Shape("encoder/decoder do not chain".into()));
    }
    let data = rows(&clouds.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let mut rng = RngStream::new(cfg.seed ^ 0xCAE);
    let mut enc_opt = Adam::new(&enc, cfg.adam());
    let mut dec_opt = Adam::new(&dec, cfg.adam());
    let mut order: Vec<usize> = (0..clouds.len()).collect();

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let record = |epoch, enc: &Mlp, dec: &Mlp, history: &mut Vec<EpochLoss>| -> Result<()> {
        let loss = reconstruction_objective(enc, dec, &data, cfg.lambda)?;
        if !loss.is_finite() {
            return Err(ModelError::Diverged {
                seed: cfg.seed,
                epoch,
            });
        }
        history.push(EpochLoss {
            epoch,
            train_loss: loss,
            val_loss: None,
        });
        Ok(())
    };
    record(0, &enc, &dec, &mut history)?;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(ndarray::Axis(0), chunk);
            let (z, enc_cache) = enc.forward(batch.view(), Mode::Train, &mut rng)?;
            let (xhat, dec_cache) = dec.forward(z.view(), Mode::Train, &mut rng)?;
            let g = nn::mse_grad(xhat.view(), batch.view(), batch.nrows());
            let (dec_grads, g_latent) = dec.backward(&dec_cache, g.view())?;
            let (mut enc_grads, _) = enc.backward(&enc_cache, g_latent.view())?;
            nn::add_weight_penalty_grad(&mut enc_grads, &enc, cfg.lambda);
            enc_opt.update(&mut enc, &enc_grads)?;
            dec_opt.update(&mut dec, &dec_grads)?;
        }
        record(epoch, &enc, &dec, &mut history)?;
    }
    let latent_dim = enc.output_dim();
    Ok((
        EncoderModel {
            net: enc,
            latent_dim,
            format: format.clone(),
        },
        DecoderModel { net: dec },
        history,
    ))
}

impl EncoderModel {
    /// Latent code of a cloud. Deterministic.
    pub fn encode(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        if cloud.points.len() != self.format.n_pc || cloud.dim() != self.format.workspace_dim {
            return Err(ModelError::Shape(format!(
                "cloud has {} points of dimension {}, encoder expects {} of dimension {}",
                cloud.points.len(),
                cloud.dim(),
                self.format.n_pc,
                self.format.workspace_dim
            )));
        }
        self.encode_flat(&flatten_cloud(cloud, &self.format.bounds))
    }

    pub fn encode_flat(&self, flat: &[f64]) -> Result<Vec<f64>> {
        let z = self
            .net
            .forward_one(flat, Mode::DeterministicInfer, &mut RngStream::new(0))?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Shape("encoder produced a non-finite latent".into()));
        }
        Ok(z)
    }
}

/// One expert transition, stored normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationRecord {
    pub workspace_id: String,
    pub path_id: usize,
    pub step: usize,
    pub x_t: Vec<f64>,
    pub x_goal: Vec<f64>,
    pub x_next: Vec<f64>,
}

/// Expert transitions plus the flattened cloud of every workspace they come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImitationDataset {
    pub clouds: BTreeMap<String, Vec<f64>>,
    pub records: Vec<ImitationRecord>,
}

impl ImitationDataset {
    /// Adds every consecutive pair of `path` with the path's last state as goal.
    pub fn add_path(&mut self, workspace_id: &str, path_id: usize, path: &Path, bounds: &Bounds) {
        let goal = normalize(path.last().coords(), bounds);
        for (step, pair) in path.states.windows(2).enumerate() {
            self.records.push(ImitationRecord {
                workspace_id: workspace_id.to_string(),
                path_id,
                step,
                x_t: normalize(pair[0].coords(), bounds),
                x_goal: goal.clone(),
                x_next: normalize(pair[1].coords(), bounds),
            });
        }
    }

    pub fn workspace_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.workspace_id.as_str()).collect()
    }
}

/// Splits workspace ids into (train, validation); validation takes
/// `floor(fraction * n)` workspaces chosen by `seed`.
pub fn split_by_workspace(
    ids: &BTreeSet<&str>,
    fraction: f64,
    seed: u64,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut all: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    all.shuffle(&mut RngStream::new(seed ^ 0x5EED));
    let n_val = (fraction * all.len() as f64).floor() as usize;
    let n_val = n_val.min(all.len().saturating_sub(1));
    let val = all[..n_val].iter().cloned().collect();
    let train = all[n_val..].iter().cloned().collect();
    (train, val)
}

pub fn init_planner(
    arch: &PnetArch,
    state_dim: usize,
    latent_dim: usize,
    bounds: Bounds,
    heading: bool,
    seed: u64,
) -> Result<PlannerModel> {
    let mut specs = stack_specs(latent_dim + 2 * state_dim, &arch.hidden, state_dim, arch.dropout_p);
    if specs.len() >= 2 {
        let last_hidden = specs.len() - 2;
        specs[last_hidden].dropout_p = 0.0;
    }
    let net = Mlp::new(specs, &mut RngStream::new(seed))?;
    Ok(PlannerModel {
        net,
        state_dim,
        latent_dim,
        dropout_p: arch.dropout_p,
        bounds,
        heading,
        fast: InferenceCache::default(),
    })
}

struct Batchable {
    inputs: Array2<f64>,
    targets: Array2<f64>,
}

fn assemble(records: &[&ImitationRecord], latents: &BTreeMap<String, Vec<f64>>) -> Batchable {
    let m = latents.values().next().map_or(0, Vec::len);
    let d = records.first().map_or(0, |r| r.x_t.len());
    let mut inputs = Array2::zeros((records.len(), m + 2 * d));
    let mut targets = Array2::zeros((records.len(), d));
    for (i, r) in records.iter().enumerate() {
        let z = &latents[&r.workspace_id];
        let mut row = inputs.row_mut(i);
        row.slice_mut(s![..m]).assign(&ndarray::ArrayView1::from(z.as_slice()));
        row.slice_mut(s![m..m + d])
            .assign(&ndarray::ArrayView1::from(r.x_t.as_slice()));
        row.slice_mut(s![m + d..])
            .assign(&ndarray::ArrayView1::from(r.x_goal.as_slice()));
        targets
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(r.x_next.as_slice()));
    }
    Batchable { inputs, targets }
}

fn eval_mse(net: &Mlp, data: &Batchable) -> Result<Option<f64>> {
    if data.inputs.nrows() == 0 {
        return Ok(None);
    }
    let (out, _) = net.forward(
        data.inputs.view(),
        Mode::DeterministicInfer,
        &mut RngStream::new(0),
    )?;
    Ok(Some(nn::mse_loss(
        out.view(),
        data.targets.view(),
        data.inputs.nrows(),
    )?))
}

/// Trains the planning network with the encoder frozen.
pub fn train_pnet(
    ds: &ImitationDataset,
    enc: &EncoderModel,
    planner: PlannerModel,
    cfg: &TrainConfig,
) -> Result<(PlannerModel, Vec<EpochLoss>)> {
    cfg.validate()?;
    if ds.records.is_empty() {
        return Err(ModelError::Invalid("empty imitation dataset".into()));
    }
    if planner.latent_dim != enc.latent_dim {
        return Err(ModelError::Shape(format!(
            "planner expects {} latents, encoder produces {}",
            planner.latent_dim, enc.latent_dim
        )));
    }
    if let Some(r) = ds.records.iter().find(|r| {
        r.x_t.len() != planner.state_dim
            || r.x_goal.len() != planner.state_dim
            || r.x_next.len() != planner.state_dim
    }) {
        return Err(ModelError::Shape(format!(
            "record {}/{} does not match state dimension {}",
            r.workspace_id, r.path_id, planner.state_dim
        )));
    }
    let mut latents = BTreeMap::new();
    for id in ds.workspace_ids() {
        let flat = ds
            .clouds
            .get(id)
            .ok_or_else(|| ModelError::Invalid(format!("no cloud for workspace {id}")))?;
        latents.insert(id.to_string(), enc.encode_flat(flat)?);
    }

    let (train_ids, val_ids) = split_by_workspace(&ds.workspace_ids(), cfg.validation_fraction, cfg.seed);
    let train: Vec<&ImitationRecord> = ds
        .records
        .iter()
        .filter(|r| train_ids.contains(&r.workspace_id))
        .collect();
    let val: Vec<&ImitationRecord> = ds
        .records
        .iter()
        .filter(|r| val_ids.contains(&r.workspace_id))
        .collect();
    let train_all = assemble(&train, &latents);
    let val_all = assemble(&val, &latents);

    let PlannerModel { mut net, .. } = planner.clone();
    let mut opt = Adam::new(&net, cfg.adam());
    let mut rng = RngStream::new(cfg.seed ^ 0x9E7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let record = |epoch: usize, net: &Mlp, history: &mut Vec<EpochLoss>| -> Result<()> {
        let train_loss = eval_mse(net, &train_all)?.unwrap_or(0.0);
        let val_loss = eval_mse(net, &val_all)?;
        if !train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(ModelError::Diverged {
                seed: cfg.seed,
                epoch,
            });
        }
        log::debug!("pnet epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        Ok(())
    };
    record(0, &net, &mut history)?;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_all.inputs.select(ndarray::Axis(0), chunk);
            let y = train_all.targets.select(ndarray::Axis(0), chunk);
            let (out, cache) = net.forward(x.view(), Mode::Train, &mut rng)?;
            let g = nn::mse_grad(out.view(), y.view(), chunk.len());
            let (grads, _) = net.backward(&cache, g.view())?;
            opt.update(&mut net, &grads)?;
        }
        record(epoch, &net, &mut history)?;
    }
    Ok((
        PlannerModel {
            net,
            fast: InferenceCache::default(),
            ..planner
        },
        history,
    ))
}

impl PlannerModel {
    /// Predicts the next state from `x_t` toward `x_goal` in workspace coordinates.
    pub fn step(
        &self,
        latent: &[f64],
        x_t: &Config,
        x_goal: &Config,
        rng: &mut RngStream,
        stochastic: bool,
    ) -> Result<Config> {
        if latent.len() != self.latent_dim
            || x_t.dim() != self.state_dim
            || x_goal.dim() != self.state_dim
        {
            return Err(ModelError::Shape(format!(
                "planner expects {} latents and {}-dimensional states",
                self.latent_dim, self.state_dim
            )));
        }
        let mut input = Vec::with_capacity(self.latent_dim + 2 * self.state_dim);
        input.extend_from_slice(latent);
        input.extend(normalize(x_t.coords(), &self.bounds));
        input.extend(normalize(x_goal.coords(), &self.bounds));
        let mode = if stochastic {
            Mode::StochasticInfer
        } else {
            Mode::DeterministicInfer
        };
        let fast = self.fast.0.get_or_init(|| InferenceMlp::new(&self.net));
        let out = fast.forward(&input, mode, rng)?;
        let mut x = denormalize(&out, &self.bounds);
        if self.heading {
            if let Some(t) = x.last_mut() {
                *t = wrap_angle(*t);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                x_t: x_t.coords().to_vec(),
                x_goal: x_goal.coords().to_vec(),
            });
        }
        Ok(Config::new(x))
    }
}

/// Encoder and planner persisted side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub encoder_weights: String,
    pub planner_weights: String,
    pub decoder_weights: Option<String>,
    pub latent_dim: usize,
    pub n_pc: usize,
    pub workspace_dim: usize,
    pub cloud_bounds: Bounds,
    pub state_dim: usize,
    pub state_bounds: Bounds,
    pub heading: bool,
    pub dropout_p: f64,
    pub normalization: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: EncoderModel,
    pub planner: PlannerModel,
    pub dataset_fingerprint: String,
}

pub const MODEL_MANIFEST: &str = "models.json";

impl ModelBundle {
    pub fn save(&self, dir: &FsPath, decoder: Option<&DecoderModel>, seed: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        let created = format!("seed-{seed}");
        nn::save_params(&self.encoder.net, seed, &created, &dir.join("encoder.json"))?;
        nn::save_params(&self.planner.net, seed, &created, &dir.join("planner.json"))?;
        if let Some(d) = decoder {
            nn::save_params(&d.net, seed, &created, &dir.join("decoder.json"))?;
        }
        let manifest = ModelManifest {
            encoder_weights: "encoder.json".into(),
            planner_weights: "planner.json".into(),
            decoder_weights: decoder.map(|_| "decoder.json".into()),
            latent_dim: self.encoder.latent_dim,
            n_pc: self.encoder.format.n_pc,
            workspace_dim: self.encoder.format.workspace_dim,
            cloud_bounds: self.encoder.format.bounds.clone(),
            state_dim: self.planner.state_dim,
            state_bounds: self.planner.bounds.clone(),
            heading: self.planner.heading,
            dropout_p: self.planner.dropout_p,
            normalization: "affine bounds -> [-1, 1]".into(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            seed,
        };
        fs::write(
            dir.join(MODEL_MANIFEST),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }

    pub fn load(dir: &FsPath) -> Result<(ModelBundle, ModelManifest)> {
        let text = fs::read_to_string(dir.join(MODEL_MANIFEST))?;
        let m: ModelManifest =
            serde_json::from_str(&text).map_err(|e| ModelError::Manifest(e.to_string()))?;
        let (enc, _) = nn::load_params(&dir.join(&m.encoder_weights))?;
        let (pl, _) = nn::load_params(&dir.join(&m.planner_weights))?;
        if enc.output_dim() != m.latent_dim
            || enc.input_dim() != m.n_pc * m.workspace_dim
            || pl.input_dim() != m.latent_dim + 2 * m.state_dim
            || pl.output_dim() != m.state_dim
        {
            return Err(ModelError::Manifest(
                "weight shapes disagree with the model manifest".into(),
            ));
        }
        let bundle = ModelBundle {
            encoder: EncoderModel {
                net: enc,
                latent_dim: m.latent_dim,
                format: CloudFormat {
                    n_pc: m.n_pc,
                    workspace_dim: m.workspace_dim,
                    bounds: m.cloud_bounds.clone(),
                },
            },
            planner: PlannerModel {
                net: pl,
                state_dim: m.state_dim,
                latent_dim: m.latent_dim,
                dropout_p: m.dropout_p,
                bounds: m.state_bounds.clone(),
                heading: m.heading,
                fast: InferenceCache::default(),
            },
            dataset_fingerprint: m.dataset_fingerprint.clone(),
        };
        Ok((bundle, m))
    }
}
