//! Dense network engine: PReLU stacks with inverted dropout, exact backpropagation,
//! the two training losses, an adaptive-moment optimizer and weight files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("cache does not match the network: {0}")]
    CacheMismatch(String),
    #[error("weight file {path}: layer {layer:?}: {msg}")]
    Format {
        path: PathBuf,
        layer: Option<usize>,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Prelu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub dropout_p: f64,
}

/// Hidden PReLU layers with dropout `p`, then a linear output layer without dropout.
pub fn stack_specs(input: usize, hidden: &[usize], output: usize, dropout_p: f64) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input;
    for &h in hidden {
        specs.push(LayerSpec {
            in_dim: prev,
            out_dim: h,
            activation: Activation::Prelu,
            dropout_p,
        });
        prev = h;
    }
    specs.push(LayerSpec {
        in_dim: prev,
        out_dim: output,
        activation: Activation::Identity,
        dropout_p: 0.0,
    });
    specs
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let last = specs
        .last()
        .ok_or_else(|| NnError::InvalidSpec("no layers".into()))?;
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(NnError::InvalidSpec(format!("layer {i} has a zero dimension")));
        }
        if !(0.0..=1.0).contains(&s.dropout_p) {
            return Err(NnError::InvalidSpec(format!(
                "layer {i} dropout {} outside [0, 1]",
                s.dropout_p
            )));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(NnError::InvalidSpec(format!(
                "layer {i} expects {} inputs but layer {} produces {}",
                s.in_dim,
                i - 1,
                specs[i - 1].out_dim
            )));
        }
    }
    if last.activation != Activation::Identity || last.dropout_p != 0.0 {
        return Err(NnError::InvalidSpec(
            "output layer must be linear without dropout".into(),
        ));
    }
    Ok(())
}

/// Parameters of one dense layer. The PReLU slope is shared by every unit of the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub slope: f64,
}

/// Network topology plus parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    StochasticInfer,
    DeterministicInfer,
}

impl Mode {
    fn drops(self) -> bool {
        !matches!(self, Mode::DeterministicInfer)
    }
}

/// Everything backward needs from a forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

#[inline]
pub fn prelu(x: f64, a: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        a * x
    }
}

impl Mlp {
    /// Uniform `±sqrt(6 / (in + out))` weights, zero biases, slopes 0.25.
    pub fn new(specs: Vec<LayerSpec>, rng: &mut RngStream) -> Result<Self> {
        validate_specs(&specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((s.out_dim, s.in_dim), || {
                        rng.gen_range(-limit..limit)
                    }),
                    bias: Array1::zeros(s.out_dim),
                    slope: 0.25,
                }
            })
            .collect();
        Ok(Mlp { specs, layers })
    }

    pub fn zeros(specs: Vec<LayerSpec>) -> Result<Self> {
        validate_specs(&specs)?;
        let layers = specs
            .iter()
            .map(|s| Layer {
                weight: Array2::zeros((s.out_dim, s.in_dim)),
                bias: Array1::zeros(s.out_dim),
                slope: 0.0,
            })
            .collect();
        Ok(Mlp { specs, layers })
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp::zeros(self.specs.clone()).expect("specs already validated")
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs.last().expect("nonempty").out_dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len() + 1)
            .sum()
    }

    /// Weights row-major, then bias, then slope, layer by layer.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| {
            l.weight
                .iter()
                .chain(l.bias.iter())
                .chain(std::iter::once(&l.slope))
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| {
            l.weight
                .iter_mut()
                .chain(l.bias.iter_mut())
                .chain(std::iter::once(&mut l.slope))
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    /// Sum of squared weight-matrix entries (biases and slopes excluded).
    pub fn weight_sq_sum(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Batched forward pass over the rows of `input`.
    pub fn forward(
        &self,
        input: ArrayView2<f64>,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.ncols(),
            });
        }
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut x = input.to_owned();
        for (spec, layer) in self.specs.iter().zip(&self.layers) {
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            let mut a = match spec.activation {
                Activation::Prelu => z.mapv(|v| prelu(v, layer.slope)),
                Activation::Identity => z.clone(),
            };
            let mask = if mode.drops() && spec.dropout_p > 0.0 {
                let p = spec.dropout_p;
                let keep = if p < 1.0 { 1.0 / (1.0 - p) } else { 0.0 };
                let m = Array2::from_shape_simple_fn(a.raw_dim(), || {
                    if rng.gen::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                a *= &m;
                Some(m)
            } else {
                None
            };
            cache.inputs.push(x);
            cache.pre.push(z);
            cache.masks.push(mask);
            x = a;
        }
        Ok((x, cache))
    }

    /// Single-vector inference without a cache. Matches [`Mlp::forward`] on a one-row
    /// batch, drawing dropout masks in the same order.
    pub fn forward_one(&self, input: &[f64], mode: Mode, rng: &mut RngStream) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut x = Array1::from(input.to_vec());
        for (spec, layer) in self.specs.iter().zip(&self.layers) {
            let mut a = layer.weight.dot(&x);
            a += &layer.bias;
            if spec.activation == Activation::Prelu {
                a.mapv_inplace(|v| prelu(v, layer.slope));
            }
            if mode.drops() && spec.dropout_p > 0.0 {
                let p = spec.dropout_p;
                let keep = if p < 1.0 { 1.0 / (1.0 - p) } else { 0.0 };
                a.mapv_inplace(|v| if rng.gen::<f64>() < p { 0.0 } else { v * keep });
            }
            x = a;
        }
        Ok(x.to_vec())
    }

    /// Exact gradients of a scalar loss given its gradient at the network output.
    /// Returns parameter gradients and the gradient with respect to the input rows.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<(Mlp, Array2<f64>)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(NnError::CacheMismatch(format!(
                "{} cached layers for a {}-layer network",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        for (i, (x, spec)) in cache.inputs.iter().zip(&self.specs).enumerate() {
            if x.ncols() != spec.in_dim {
                return Err(NnError::CacheMismatch(format!(
                    "layer {i} cached input width {} but expects {}",
                    x.ncols(),
                    spec.in_dim
                )));
            }
        }
        let last = &cache.pre[self.layers.len() - 1];
        if output_grad.dim() != last.dim() {
            return Err(NnError::CacheMismatch(format!(
                "output gradient shape {:?} vs output {:?}",
                output_grad.dim(),
                last.dim()
            )));
        }
        let mut grads = self.zeros_like();
        let mut upstream = output_grad.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if let Some(m) = &cache.masks[i] {
                upstream *= m;
            }
            let z = &cache.pre[i];
            let dz = match self.specs[i].activation {
                Activation::Prelu => {
                    let mut slope_grad = 0.0;
                    let mut dz = upstream;
                    ndarray::Zip::from(&mut dz).and(z).for_each(|g, &zv| {
                        if zv < 0.0 {
                            slope_grad += *g * zv;
                            *g *= layer.slope;
                        }
                    });
                    grads.layers[i].slope = slope_grad;
                    dz
                }
                Activation::Identity => upstream,
            };
            grads.layers[i].weight = dz.t().dot(&cache.inputs[i]);
            grads.layers[i].bias = dz.sum_axis(Axis(0));
            upstream = dz.dot(&layer.weight);
        }
        Ok((grads, upstream))
    }
}

/// Adds the gradient of `lambda * sum(W^2)` (weight matrices only) into `grads`.
pub fn add_weight_penalty_grad(grads: &mut Mlp, params: &Mlp, lambda: f64) {
    for (g, p) in grads.layers.iter_mut().zip(&params.layers) {
        g.weight.scaled_add(2.0 * lambda, &p.weight);
    }
}

fn check_pair(pred: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Result<()> {
    if pred.nrows() == 0 {
        return Err(NnError::EmptyBatch);
    }
    if pred.dim() != target.dim() {
        return Err(NnError::DimensionMismatch {
            expected: target.len(),
            got: pred.len(),
        });
    }
    Ok(())
}

/// `(1 / n_p) * sum ||pred - target||^2` over the rows.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, n_p: usize) -> Result<f64> {
    check_pair(&pred, &target)?;
    if n_p == 0 {
        return Err(NnError::EmptyBatch);
    }
    let sq: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / n_p as f64)
}

/// Gradient of [`mse_loss`] with respect to `pred`.
pub fn mse_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>, n_p: usize) -> Array2<f64> {
    (&pred - &target) * (2.0 / n_p as f64)
}

/// Reconstruction error averaged over `n_obs` clouds plus `lambda * sum(W_enc^2)`.
pub fn cae_loss(
    batch: ArrayView2<f64>,
    reconstructed: ArrayView2<f64>,
    encoder: &Mlp,
    lambda: f64,
    n_obs: usize,
) -> Result<f64> {
    Ok(mse_loss(reconstructed, batch, n_obs)? + lambda * encoder.weight_sq_sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: &Mlp, config: AdamConfig) -> Self {
        let n = params.param_count();
        Adam {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut Mlp, grads: &Mlp) -> Result<()> {
        if grads.param_count() != self.m.len() || params.param_count() != self.m.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.m.len(),
                got: grads.param_count(),
            });
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .params_mut()
            .zip(grads.params())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub spec: Vec<LayerSpec>,
    pub seed: u64,
    pub created: String,
    pub blob: String,
    pub values: usize,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> NnError + '_ {
    move |source| NnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Path of the binary blob that accompanies the manifest at `manifest`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes a JSON manifest at `path` and little-endian f64 values next to it.
pub fn save_params(params: &Mlp, seed: u64, created: &str, path: &Path) -> Result<()> {
    let blob = blob_path(path);
    let manifest = WeightManifest {
        spec: params.specs.clone(),
        seed,
        created: created.to_string(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        values: params.param_count(),
    };
    let bytes: Vec<u8> = params.params().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&blob, bytes).map_err(io_err(&blob))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(Mlp, WeightManifest)> {
    let fmt = |layer: Option<usize>, msg: String| NnError::Format {
        path: path.to_path_buf(),
        layer,
        msg,
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: WeightManifest =
        serde_json::from_str(&text).map_err(|e| fmt(None, format!("manifest: {e}")))?;
    validate_specs(&manifest.spec).map_err(|e| fmt(None, e.to_string()))?;
    let mut mlp = Mlp::zeros(manifest.spec.clone()).expect("validated");
    if manifest.values != mlp.param_count() {
        return Err(fmt(
            None,
            format!(
                "declares {} values but the layer specs need {}",
                manifest.values,
                mlp.param_count()
            ),
        ));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(io_err(&blob))?;
    if bytes.len() != 8 * mlp.param_count() {
        // Locate the first layer the blob cannot fill.
        let mut offset = 0;
        let mut layer = None;
        for (i, l) in mlp.layers.iter().enumerate() {
            offset += 8 * (l.weight.len() + l.bias.len() + 1);
            if offset > bytes.len() {
                layer = Some(i);
                break;
            }
        }
        return Err(fmt(
            layer,
            format!(
                "blob holds {} bytes, shapes require {}",
                bytes.len(),
                8 * mlp.param_count()
            ),
        ));
    }
    for (p, chunk) in mlp.params_mut().zip(bytes.chunks_exact(8)) {
        *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok((mlp, manifest))
}

/// Single-precision copy of an [`Mlp`] for single-vector inference.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceMlp {
    layers: Vec<InferenceLayer>,
}

#[derive(Debug, Clone, PartialEq)]
struct InferenceLayer {
    in_dim: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
    slope: f32,
    prelu: bool,
    dropout_p: f64,
}

impl InferenceMlp {
    pub fn new(net: &Mlp) -> Self {
        let layers = net
            .specs
            .iter()
            .zip(&net.layers)
            .map(|(spec, layer)| InferenceLayer {
                in_dim: spec.in_dim,
                weight: layer.weight.iter().map(|&v| v as f32).collect(),
                bias: layer.bias.iter().map(|&v| v as f32).collect(),
                slope: layer.slope as f32,
                prelu: spec.activation == Activation::Prelu,
                dropout_p: spec.dropout_p,
            })
            .collect();
        InferenceMlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    /// Same dropout draws as [`Mlp::forward_one`].
    pub fn forward(&self, input: &[f64], mode: Mode, rng: &mut RngStream) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut x: Vec<f32> = input.iter().map(|&v| v as f32).collect();
        for layer in &self.layers {
            let mut a = matvec_f32(&layer.weight, &x);
            for (v, b) in a.iter_mut().zip(&layer.bias) {
                *v += b;
                if layer.prelu && *v < 0.0 {
                    *v *= layer.slope;
                }
            }
            if mode.drops() && layer.dropout_p > 0.0 {
                let p = layer.dropout_p;
                let keep = if p < 1.0 { (1.0 / (1.0 - p)) as f32 } else { 0.0 };
                for v in &mut a {
                    *v = if rng.gen::<f64>() < p { 0.0 } else { *v * keep };
                }
            }
            x = a;
        }
        Ok(x.into_iter().map(f64::from).collect())
    }
}

/// Row-major `w · x` with sixteen independent accumulators per row.
fn matvec_f32(w: &[f32], x: &[f32]) -> Vec<f32> {
    let n = x.len();
    let split = n - n % 16;
    w.chunks_exact(n)
        .map(|row| {
            let mut acc = [0.0f32; 16];
            for (r, v) in row[..split].chunks_exact(16).zip(x[..split].chunks_exact(16)) {
                for k in 0..16 {
                    acc[k] += r[k] * v[k];
                }
            }
            let mut sum: f32 = acc.iter().sum();
            for (r, v) in row[split..].iter().zip(&x[split..]) {
                sum += r * v;
            }
            sum
        })
        .collect()
}
