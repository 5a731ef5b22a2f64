//! Learned forward solvers mapping (bathymetry, boundary condition) to a
//! steady velocity field: a PCA-reduced dense network, a convolutional
//! encoder–decoder and its variational twin.

mod norm;
mod pca;

pub use norm::Normalizer;
pub use pca::{pca_fit, AsFlat, PcaBasis};

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{self, Blobs};
use crate::error::{Error, Result};
use crate::fields::{rmse_velocity, BoundaryCondition, Grid, ScalarField, VectorField};
use crate::nn::{Activation, Adam, Architecture, BatchStats, LayerSpec, LayerStack, Mode, Tensor};
use crate::rng::RngSeed;

pub use crate::nn::reparameterize as sve_reparameterize;

pub const MODEL_MAGIC: &[u8; 4] = b"RSUR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    PcaDnn,
    Se,
    Sve,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::PcaDnn, ModelKind::Se, ModelKind::Sve];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PcaDnn => "pca-dnn",
            ModelKind::Se => "se",
            ModelKind::Sve => "sve",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca-dnn" | "pca_dnn" => Ok(ModelKind::PcaDnn),
            "se" => Ok(ModelKind::Se),
            "sve" => Ok(ModelKind::Sve),
            _ => Err(Error::invalid(format!("unknown model kind `{s}` (expected pca-dnn, se or sve)"))),
        }
    }
}

const LEARNING_RATES: [f64; 3] = [0.01, 0.001, 1e-4];
const REG_COEFFS: [f64; 7] = [0.0, 1e-5, 1e-4, 1e-3, 1e-2, 0.1, 1.0];
const KL_WEIGHTS: [f64; 3] = [1e-4, 1e-3, 1e-2];
/// 0 stands for full-batch training.
const BATCH_SIZES: [usize; 4] = [8, 32, 256, 0];
const CONV_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub latent_dim: usize,
    /// Dense hidden layers for pca-dnn; conv + transposed-conv layers for se/sve.
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation_hidden: Activation,
    pub activation_out: Activation,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub reg_easting: f64,
    pub reg_northing: f64,
    pub batch_norm: bool,
    pub data_normalization: bool,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub kl_weight: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams::for_kind(ModelKind::Se)
    }
}

impl Hyperparams {
    /// Final selections of the reference tuning grid for each model.
    pub fn for_kind(kind: ModelKind) -> Self {
        let (hidden_layers, reg_easting, reg_northing) = match kind {
            ModelKind::PcaDnn => (1, 0.01, 0.01),
            ModelKind::Se => (6, 1e-4, 1e-4),
            ModelKind::Sve => (6, 1e-4, 1e-3),
        };
        Hyperparams {
            latent_dim: 50,
            hidden_layers,
            hidden_width: 128,
            activation_hidden: Activation::Tanh,
            activation_out: Activation::Linear,
            batch_size: 32,
            learning_rate: 0.001,
            reg_easting,
            reg_northing,
            batch_norm: false,
            data_normalization: true,
            epochs: 100,
            patience: None,
            kl_weight: 1e-3,
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let in_set = |v: f64, set: &[f64]| set.iter().any(|s| (v - s).abs() <= 1e-12 * s.abs().max(1.0));
        if self.latent_dim == 0 || self.hidden_width == 0 {
            return bad("latent_dim and hidden_width must be at least 1".into());
        }
        match kind {
            ModelKind::PcaDnn if !(1..=6).contains(&self.hidden_layers) => {
                return bad(format!("pca-dnn hidden_layers must be 1..=6, got {}", self.hidden_layers))
            }
            ModelKind::Se | ModelKind::Sve if ![4, 6].contains(&self.hidden_layers) => {
                return bad(format!("conv models take 4 or 6 hidden layers, got {}", self.hidden_layers))
            }
            _ => {}
        }
        if !matches!(self.activation_hidden, Activation::Tanh | Activation::Relu) {
            return bad("hidden activation must be tanh or relu".into());
        }
        if !matches!(self.activation_out, Activation::Linear | Activation::Sigmoid) {
            return bad("output activation must be linear or sigmoid".into());
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            return bad(format!("batch_size must be one of 8, 32, 256 or 0 (full), got {}", self.batch_size));
        }
        if !in_set(self.learning_rate, &LEARNING_RATES) {
            return bad(format!("learning_rate must be one of {LEARNING_RATES:?}"));
        }
        if !in_set(self.reg_easting, &REG_COEFFS) || !in_set(self.reg_northing, &REG_COEFFS) {
            return bad(format!("regularization coefficients must be in {REG_COEFFS:?}"));
        }
        if kind == ModelKind::Sve && !in_set(self.kl_weight, &KL_WEIGHTS) {
            return bad(format!("kl_weight must be one of {KL_WEIGHTS:?}"));
        }
        Ok(())
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub bathy: ScalarField,
    pub bc: BoundaryCondition,
    pub velocity: VectorField,
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    hyper: Hyperparams,
    grid: Grid,
    stack: LayerStack,
    norm: Normalizer,
    pca_in: Option<PcaBasis>,
    pca_out: Option<PcaBasis>,
    /// Spread of each latent coordinate (pca-dnn only).
    lat_in_scale: Vec<f64>,
    lat_out_scale: Vec<f64>,
}

fn pca_dnn_arch(h: &Hyperparams) -> Architecture {
    let mut layers = vec![LayerSpec::ConcatSide];
    for _ in 0..h.hidden_layers {
        layers.push(LayerSpec::Dense { units: h.hidden_width });
        if h.batch_norm {
            layers.push(LayerSpec::BatchNorm { momentum: 0.1, eps: 1e-5 });
        }
        layers.push(LayerSpec::Activation { func: h.activation_hidden });
    }
    layers.push(LayerSpec::Dense { units: h.latent_dim });
    layers.push(LayerSpec::Activation { func: h.activation_out });
    Architecture { input_shape: vec![h.latent_dim], side_width: 2, layers }
}

fn conv_arch(kind: ModelKind, h: &Hyperparams, grid: &Grid) -> Result<Architecture> {
    let levels = h.hidden_layers / 2;
    let f = 1 << levels;
    if grid.nx % f != 0 || grid.ny % f != 0 {
        return Err(Error::Config(format!(
            "grid {}x{} must be divisible by {f} for {levels} stride-2 levels",
            grid.nx, grid.ny
        )));
    }
    let chans = &CONV_CHANNELS[..levels];
    let mut layers = Vec::new();
    let hidden = |layers: &mut Vec<LayerSpec>| {
        if h.batch_norm {
            layers.push(LayerSpec::BatchNorm { momentum: 0.1, eps: 1e-5 });
        }
        layers.push(LayerSpec::Activation { func: h.activation_hidden });
    };
    for &c in chans {
        layers.push(LayerSpec::Conv2d { filters: c, kernel: 3, stride: 2, padding: 1 });
        hidden(&mut layers);
    }
    layers.push(LayerSpec::Flatten);
    if kind == ModelKind::Sve {
        layers.push(LayerSpec::Dense { units: 2 * h.latent_dim });
        layers.push(LayerSpec::Sampling { kl_weight: h.kl_weight });
    } else {
        layers.push(LayerSpec::Dense { units: h.latent_dim });
    }
    layers.push(LayerSpec::ConcatSide);
    let (ch, hh, ww) = (chans[levels - 1], grid.ny / f, grid.nx / f);
    layers.push(LayerSpec::Dense { units: ch * hh * ww });
    layers.push(LayerSpec::Activation { func: h.activation_hidden });
    layers.push(LayerSpec::Reshape { shape: vec![ch, hh, ww] });
    for &c in chans[..levels - 1].iter().rev() {
        layers.push(LayerSpec::ConvTranspose2d { filters: c, kernel: 3, stride: 2, padding: 1, output_padding: 1 });
        hidden(&mut layers);
    }
    layers.push(LayerSpec::ConvTranspose2d { filters: 2, kernel: 3, stride: 2, padding: 1, output_padding: 1 });
    layers.push(LayerSpec::Activation { func: h.activation_out });
    Ok(Architecture { input_shape: vec![1, grid.ny, grid.nx], side_width: 2, layers })
}

pub fn build_model(kind: ModelKind, hyper: &Hyperparams, grid: &Grid, init: RngSeed) -> Result<Model> {
    hyper.validate(kind)?;
    grid.validate()?;
    let arch = match kind {
        ModelKind::PcaDnn => pca_dnn_arch(hyper),
        ModelKind::Se | ModelKind::Sve => conv_arch(kind, hyper, grid)?,
    };
    let stack = LayerStack::new(arch, init)?;
    Ok(Model {
        kind,
        hyper: hyper.clone(),
        grid: *grid,
        stack,
        norm: Normalizer::identity(grid),
        pca_in: None,
        pca_out: None,
        lat_in_scale: Vec::new(),
        lat_out_scale: Vec::new(),
    })
}

/// Normalized model inputs for a batch.
struct Batch {
    input: Tensor,
    side: Tensor,
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn pca_bases(&self) -> Option<(&PcaBasis, &PcaBasis)> {
        self.pca_in.as_ref().zip(self.pca_out.as_ref())
    }

    /// Fits normalization statistics (and PCA bases) on a training split.
    fn fit_data(&mut self, train: &[Sample]) -> Result<()> {
        if self.hyper.data_normalization {
            let b: Vec<&ScalarField> = train.iter().map(|s| &s.bathy).collect();
            let c: Vec<BoundaryCondition> = train.iter().map(|s| s.bc).collect();
            let v: Vec<&VectorField> = train.iter().map(|s| &s.velocity).collect();
            self.norm = Normalizer::fit(&b, &c, &v)?;
        }
        if self.kind == ModelKind::PcaDnn {
            let k = self.hyper.latent_dim;
            if train.len() < k {
                return Err(Error::Config(format!("pca-dnn needs at least {k} training samples, got {}", train.len())));
            }
            let xin: Vec<Vec<f64>> = train.iter().map(|s| self.norm.bathy(&s.bathy)).collect();
            let xout: Vec<Vec<f64>> = train.iter().map(|s| self.norm.velocity(&s.velocity)).collect();
            let pin = pca_fit(&xin, k)?;
            let pout = pca_fit(&xout, k)?;
            // Directions without spread keep unit scale instead of
            // amplifying rounding noise.
            let scale = |p: &PcaBasis| -> Vec<f64> {
                let top = p.singular_values.first().copied().unwrap_or(0.0);
                p.singular_values
                    .iter()
                    .map(|s| if *s > 1e-6 * top && *s > 0.0 { s / (train.len() as f64).sqrt() } else { 1.0 })
                    .collect()
            };
            self.lat_in_scale = scale(&pin);
            self.lat_out_scale = scale(&pout);
            self.pca_in = Some(pin);
            self.pca_out = Some(pout);
        }
        Ok(())
    }

    fn encode(&self, items: &[(&ScalarField, &BoundaryCondition)]) -> Result<Batch> {
        let mut input = Vec::new();
        let mut side = Vec::with_capacity(2 * items.len());
        for (b, bc) in items {
            if b.grid() != &self.grid {
                return Err(Error::shape("bathymetry grid differs from the model grid"));
            }
            let x = self.norm.bathy(b);
            match &self.pca_in {
                Some(p) if self.kind == ModelKind::PcaDnn => {
                    let z = p.project(&x)?;
                    input.extend(z.iter().zip(&self.lat_in_scale).map(|(a, s)| a / s));
                }
                None if self.kind == ModelKind::PcaDnn => {
                    return Err(Error::Missing("pca-dnn model has no fitted PCA basis (train it first)".into()))
                }
                _ => input.extend(x),
            }
            side.extend(self.norm.bc(bc));
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(self.stack.input_shape());
        Ok(Batch { input: Tensor::new(shape, input)?, side: Tensor::new(vec![items.len(), 2], side)? })
    }

    /// Stack output of one item → normalized flat velocity.
    fn decode_item(&self, out: &[f64]) -> Result<Vec<f64>> {
        match &self.pca_out {
            Some(p) => {
                let z: Vec<f64> = out.iter().zip(&self.lat_out_scale).map(|(a, s)| a * s).collect();
                p.reconstruct(&z)
            }
            None => Ok(out.to_vec()),
        }
    }

    /// Gradient wrt normalized field → gradient wrt stack output.
    fn decode_grad(&self, g: &[f64]) -> Vec<f64> {
        match &self.pca_out {
            Some(p) => p
                .components
                .iter()
                .zip(&self.lat_out_scale)
                .map(|(c, s)| s * c.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
                .collect(),
            None => g.to_vec(),
        }
    }

    pub fn predict(&self, bathy: &ScalarField, bc: &BoundaryCondition) -> Result<VectorField> {
        Ok(self.predict_many(&[(bathy, bc)])?.pop().expect("one item"))
    }

    /// Evaluation-mode predictions (the variational model uses its mean).
    pub fn predict_many(&self, items: &[(&ScalarField, &BoundaryCondition)]) -> Result<Vec<VectorField>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(64) {
            let batch = self.encode(chunk)?;
            let y = self.stack.predict(&batch.input, Some(&batch.side))?;
            for b in 0..chunk.len() {
                out.push(self.norm.denorm_velocity(&self.grid, &self.decode_item(y.item(b))?)?);
            }
        }
        Ok(out)
    }

    /// Weighted squared norm of the output-layer parameters that produce
    /// each velocity channel, and its gradient over all parameters.
    fn penalty(&self, with_grad: bool) -> (f64, Option<Vec<Vec<f64>>>) {
        let (le, ln) = (self.hyper.reg_easting, self.hyper.reg_northing);
        let mut grads = with_grad.then(|| self.stack.params().iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>());
        if le == 0.0 && ln == 0.0 {
            return (0.0, grads);
        }
        let Some(last) = self.stack.last_param_layer() else { return (0.0, grads) };
        let range = self.stack.param_range(last);
        let params = self.stack.params();
        let mut total = 0.0;
        match self.kind {
            // A dense map onto PCA coordinates mixes both channels.
            ModelKind::PcaDnn => {
                let lam = 0.5 * (le + ln);
                for pi in range {
                    for (j, v) in params[pi].iter().enumerate() {
                        total += lam * v * v;
                        if let Some(g) = grads.as_mut() {
                            g[pi][j] = 2.0 * lam * v;
                        }
                    }
                }
            }
            ModelKind::Se | ModelKind::Sve => {
                // Transposed-conv weights are (in, out = 2, k, k); bias has 2 entries.
                let (wi, bi) = (range.start, range.start + 1);
                let kk = 9;
                for (j, v) in params[wi].iter().enumerate() {
                    let lam = if (j / kk) % 2 == 0 { le } else { ln };
                    total += lam * v * v;
                    if let Some(g) = grads.as_mut() {
                        g[wi][j] = 2.0 * lam * v;
                    }
                }
                for (c, v) in params[bi].iter().enumerate() {
                    let lam = if c == 0 { le } else { ln };
                    total += lam * v * v;
                    if let Some(g) = grads.as_mut() {
                        g[bi][c] = 2.0 * lam * v;
                    }
                }
            }
        }
        (total, grads)
    }

    /// Training objective without the KL term: MSE of normalized velocity
    /// components plus the output-layer penalty.
    pub fn loss(&self, pred: &VectorField, target: &VectorField) -> Result<f64> {
        if pred.grid() != target.grid() {
            return Err(Error::shape("prediction and target grids differ"));
        }
        let a = self.norm.velocity(pred);
        let b = self.norm.velocity(target);
        let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        let l = mse + self.penalty(false).0;
        if !l.is_finite() {
            return Err(Error::Blowup("non-finite loss".into()));
        }
        Ok(l)
    }

    /// Loss of one batch, its MSE part, parameter gradients and the
    /// batch-norm statistics of the pass (training mode).
    fn batch_step(&self, batch: &Batch, targets: &[&[f64]], rng: RngSeed) -> Result<(f64, f64, Vec<Vec<f64>>, BatchStats)> {
        let (y, tape) = self.stack.forward(&batch.input, Some(&batch.side), Mode::Train, rng)?;
        let scale = 1.0 / (targets.len() * targets[0].len()) as f64;
        let mut mse = 0.0;
        let mut gout = Vec::with_capacity(y.data().len());
        for (b, t) in targets.iter().enumerate() {
            let pred = self.decode_item(y.item(b))?;
            let g: Vec<f64> = pred
                .iter()
                .zip(t.iter())
                .map(|(p, q)| {
                    mse += (p - q) * (p - q) * scale;
                    2.0 * (p - q) * scale
                })
                .collect();
            gout.extend(self.decode_grad(&g));
        }
        let aux = tape.aux_loss();
        let stats = tape.batch_stats();
        let (pen, pen_grad) = self.penalty(true);
        let grads = self.stack.backward(tape, &Tensor::new(y.shape().to_vec(), gout)?)?;
        let mut total = grads.params;
        for (g, p) in total.iter_mut().zip(pen_grad.expect("requested")) {
            g.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        Ok((mse + pen + aux, mse, total, stats))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = serde_json::Map::new();
        meta.insert("kind".into(), json!(self.kind));
        meta.insert("hyper".into(), json!(self.hyper));
        meta.insert("grid".into(), json!(self.grid));
        meta.insert(
            "norm".into(),
            json!({
                "bathy_scale": self.norm.bathy_scale,
                "bc_mean": self.norm.bc_mean,
                "bc_scale": self.norm.bc_scale,
                "vel_scale": self.norm.vel_scale,
            }),
        );
        meta.insert("lat_in_scale".into(), json!(self.lat_in_scale));
        meta.insert("lat_out_scale".into(), json!(self.lat_out_scale));
        let mut blobs = Blobs::new();
        blobs.push("norm.bathy_mean", self.norm.bathy_mean.clone());
        blobs.push("norm.vel_mean", self.norm.vel_mean.clone());
        for (name, basis) in [("pca_in", &self.pca_in), ("pca_out", &self.pca_out)] {
            if let Some(p) = basis {
                meta.insert(name.into(), json!({ "k": p.k(), "dim": p.dim() }));
                blobs.push(format!("{name}.mean"), p.data_mean.clone());
                blobs.push(format!("{name}.components"), p.components.iter().flatten().copied().collect());
                blobs.push(format!("{name}.singular_values"), p.singular_values.clone());
            }
        }
        self.stack.export("stack", &mut meta, &mut blobs);
        container::write(path, MODEL_MAGIC, &Value::Object(meta), &blobs)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let (meta, mut blobs) = container::read(path, MODEL_MAGIC)?;
        let kind: ModelKind = serde_json::from_value(meta["kind"].clone())?;
        let hyper: Hyperparams = serde_json::from_value(meta["hyper"].clone())?;
        let grid: Grid = serde_json::from_value(meta["grid"].clone())?;
        let mut model = build_model(kind, &hyper, &grid, RngSeed::new(0, 0))?;
        let expected = model.stack.architecture().clone();
        model.stack = LayerStack::import("stack", &meta, &mut blobs, Some(&expected))?;
        let nm = &meta["norm"];
        model.norm = Normalizer {
            bathy_mean: blobs.take("norm.bathy_mean")?,
            bathy_scale: serde_json::from_value(nm["bathy_scale"].clone())?,
            bc_mean: serde_json::from_value(nm["bc_mean"].clone())?,
            bc_scale: serde_json::from_value(nm["bc_scale"].clone())?,
            vel_mean: blobs.take("norm.vel_mean")?,
            vel_scale: serde_json::from_value(nm["vel_scale"].clone())?,
        };
        if model.norm.bathy_mean.len() != grid.len() || model.norm.vel_mean.len() != 2 * grid.len() {
            return Err(Error::Config("normalization blobs do not match the grid".into()));
        }
        model.lat_in_scale = serde_json::from_value(meta["lat_in_scale"].clone())?;
        model.lat_out_scale = serde_json::from_value(meta["lat_out_scale"].clone())?;
        for name in ["pca_in", "pca_out"] {
            if meta.get(name).is_none() {
                continue;
            }
            let dim = meta[name]["dim"].as_u64().unwrap_or(0) as usize;
            let mean = blobs.take(&format!("{name}.mean"))?;
            let flat = blobs.take(&format!("{name}.components"))?;
            if dim == 0 || mean.len() != dim || flat.len() % dim != 0 {
                return Err(Error::Config(format!("{name} blob sizes are inconsistent")));
            }
            let basis = PcaBasis {
                data_mean: mean,
                components: flat.chunks_exact(dim).map(<[f64]>::to_vec).collect(),
                singular_values: blobs.take(&format!("{name}.singular_values"))?,
            };
            if name == "pca_in" {
                model.pca_in = Some(basis);
            } else {
                model.pca_out = Some(basis);
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch objective (MSE + penalty + KL).
    pub train_loss: f64,
    /// Mean batch MSE of normalized velocity components.
    pub train_mse: f64,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub best_val_rmse: f64,
}

/// Velocity-magnitude RMSE (m/s) over all cells of all samples.
pub fn split_rmse(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let items: Vec<(&ScalarField, &BoundaryCondition)> = samples.iter().map(|s| (&s.bathy, &s.bc)).collect();
    let preds = model.predict_many(&items)?;
    let mut ss = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        ss += rmse_velocity(p, &s.velocity)?.powi(2);
    }
    Ok((ss / samples.len() as f64).sqrt())
}

/// Mean flow speed (m/s) over all cells of all samples.
pub fn mean_speed(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.velocity.mean_speed()).sum::<f64>() / samples.len() as f64
}

/// Mini-batch Adam training on the `train` split. The returned model holds
/// the parameters of the epoch with the lowest validation RMSE.
pub fn train(model: Model, data: &Splits, rng: RngSeed) -> Result<(Model, Vec<EpochRecord>)> {
    let mut model = model;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    model.fit_data(&data.train)?;
    let hyper = model.hyper.clone();
    let mut history = Vec::with_capacity(hyper.epochs);
    if hyper.epochs == 0 {
        return Ok((model, history));
    }
    let targets: Vec<Vec<f64>> = data.train.iter().map(|s| model.norm.velocity(&s.velocity)).collect();
    let mut opt = Adam::new(hyper.learning_rate);
    let bs = if hyper.batch_size == 0 { data.train.len() } else { hyper.batch_size };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best = (f64::INFINITY, model.stack.clone());
    let mut since_best = 0;
    for epoch in 0..hyper.epochs {
        let ep_rng = rng.child(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut ep_rng.purpose("shuffle").rng());
        let (mut loss_sum, mut mse_sum, mut batches) = (0.0, 0.0, 0);
        for (bi, idx) in order.chunks(bs).enumerate() {
            let items: Vec<(&ScalarField, &BoundaryCondition)> =
                idx.iter().map(|&i| (&data.train[i].bathy, &data.train[i].bc)).collect();
            let tgt: Vec<&[f64]> = idx.iter().map(|&i| &targets[i][..]).collect();
            let batch = model.encode(&items)?;
            let (loss, mse, grads, stats) = model.batch_step(&batch, &tgt, ep_rng.child(bi as u64))?;
            if !loss.is_finite() {
                return Err(Error::Blowup(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            opt.step_stack(&mut model.stack, &grads)
                .map_err(|e| Error::Blowup(format!("epoch {epoch}, batch {bi}: {e}")))?;
            if hyper.batch_norm {
                model.stack.absorb_batch_stats(&stats);
            }
            loss_sum += loss;
            mse_sum += mse;
            batches += 1;
        }
        let train_rmse = split_rmse(&model, &data.train)?;
        let val_rmse = split_rmse(&model, &data.val)?;
        if val_rmse < best.0 {
            best = (val_rmse, model.stack.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_mse: mse_sum / batches as f64,
            train_rmse,
            val_rmse,
            best_val_rmse: best.0,
        });
        if hyper.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    model.stack = best.1;
    Ok((model, history))
}
