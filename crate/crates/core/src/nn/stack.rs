use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::layer::{Cache, Layer, LayerSpec, Mode};
use super::tensor::Tensor;
use crate::container::{self, Blobs};
use crate::error::{Error, Result};
use crate::rng::RngSeed;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RNNC";

/// Everything needed to rebuild a stack's shape, without parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub side_width: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("architecture serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Record of one forward pass. It is tied to the parameter generation it
/// was produced under and is consumed by `backward`.
pub struct Tape {
    generation: u64,
    caches: Vec<Cache>,
    aux_loss: f64,
}

/// Batch-norm statistics of one training pass, per layer.
#[derive(Debug, Clone, Default)]
pub struct BatchStats(Vec<Option<(Vec<f64>, Vec<f64>)>>);

impl Tape {
    pub fn batch_stats(&self) -> BatchStats {
        BatchStats(
            self.caches
                .iter()
                .map(|c| match c {
                    Cache::Norm { train: true, batch_mean, batch_var, .. } => Some((batch_mean.clone(), batch_var.clone())),
                    _ => None,
                })
                .collect(),
        )
    }

    /// Extra loss contributed by the stack itself (the KL term of sampling
    /// layers); gradients of it are included by `backward`.
    pub fn aux_loss(&self) -> f64 {
        self.aux_loss
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per parameter tensor, in `LayerStack::params` order.
    pub params: Vec<Vec<f64>>,
    pub input: Tensor,
    pub side: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    arch: Architecture,
    layers: Vec<Layer>,
    generation: u64,
}

impl LayerStack {
    pub fn new(arch: Architecture, init: RngSeed) -> Result<Self> {
        let mut shape = arch.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("invalid input shape {shape:?}")));
        }
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.iter().enumerate() {
            let layer = Layer::build(spec, &shape, arch.side_width, init.child(i as u64)).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("layer {i}: {m}")),
                Error::InvalidArgument(m) => Error::InvalidArgument(format!("layer {i}: {m}")),
                other => other,
            })?;
            shape = layer.out_shape.clone();
            layers.push(layer);
        }
        Ok(LayerStack { arch, layers, generation: next_generation() })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map(|l| &l.out_shape[..]).unwrap_or(&self.arch.input_shape)
    }

    /// Per-item output shape of every layer.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.out_shape.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params.iter().map(|p| &p[..])).collect()
    }

    /// Mutable parameter access. Any tape recorded before this call
    /// becomes stale.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.generation = next_generation();
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    /// Index range into `params()` of the parameters owned by layer `i`.
    pub fn param_range(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.layers[..i].iter().map(|l| l.params.len()).sum();
        start..start + self.layers[i].params.len()
    }

    /// Index of the last layer that owns parameters.
    pub fn last_param_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| !l.params.is_empty())
    }

    pub fn forward(&self, input: &Tensor, side: Option<&Tensor>, mode: Mode, rng: RngSeed) -> Result<(Tensor, Tape)> {
        if input.shape().len() != self.arch.input_shape.len() + 1 || input.shape()[1..] != self.arch.input_shape[..] {
            return Err(Error::shape(format!(
                "layer 0: input {:?} does not match declared per-item shape {:?}",
                input.shape(),
                self.arch.input_shape
            )));
        }
        if let Some(s) = side {
            if s.batch() != input.batch() || s.item_len() != self.arch.side_width {
                return Err(Error::shape(format!(
                    "side input {:?} does not match batch {} and width {}",
                    s.shape(),
                    input.batch(),
                    self.arch.side_width
                )));
            }
        }
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut aux = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, c) = layer.forward(x, side, mode, rng.child(i as u64), &mut aux).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("layer {i}: {m}")),
                Error::InvalidArgument(m) => Error::InvalidArgument(format!("layer {i}: {m}")),
                other => other,
            })?;
            caches.push(c);
            x = y;
        }
        Ok((x, Tape { generation: self.generation, caches, aux_loss: aux }))
    }

    /// Deterministic evaluation-mode pass.
    pub fn predict(&self, input: &Tensor, side: Option<&Tensor>) -> Result<Tensor> {
        self.forward(input, side, Mode::Eval, RngSeed::new(0, 0)).map(|(y, _)| y)
    }

    pub fn backward(&self, tape: Tape, grad_out: &Tensor) -> Result<Gradients> {
        if tape.generation != self.generation {
            return Err(Error::StaleTape(format!(
                "tape from parameter generation {} used with generation {}",
                tape.generation, self.generation
            )));
        }
        if tape.caches.len() != self.layers.len() {
            return Err(Error::StaleTape("tape belongs to a different stack".into()));
        }
        let mut expect = vec![grad_out.batch()];
        expect.extend_from_slice(self.output_shape());
        if grad_out.shape() != &expect[..] {
            return Err(Error::shape(format!("output gradient {:?}, expected {expect:?}", grad_out.shape())));
        }
        let mut grads: Vec<Vec<f64>> =
            self.layers.iter().flat_map(|l| l.params.iter().map(|p| vec![0.0; p.len()])).collect();
        let mut g = grad_out.clone();
        let mut side = None;
        let mut hi = grads.len();
        for (layer, cache) in self.layers.iter().zip(tape.caches).rev() {
            let lo = hi - layer.params.len();
            let (dx, ds) = layer.backward(cache, g, &mut grads[lo..hi]);
            if let Some(ds) = ds {
                side = Some(match side {
                    None => ds,
                    Some(prev) => {
                        let mut acc: Tensor = prev;
                        acc.data_mut().iter_mut().zip(ds.data()).for_each(|(a, b)| *a += b);
                        acc
                    }
                });
            }
            g = dx;
            hi = lo;
        }
        Ok(Gradients { params: grads, input: g, side })
    }

    /// Moves batch-norm running statistics toward a training batch.
    pub fn absorb_batch_stats(&mut self, stats: &BatchStats) {
        for (l, s) in self.layers.iter_mut().zip(&stats.0) {
            if let Some((m, v)) = s {
                l.absorb(m, v);
            }
        }
    }

    fn buffers(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.buffers.iter().flatten().copied()).collect()
    }

    /// Adds this stack under `prefix` to a container header and blob set.
    pub fn export(&self, prefix: &str, meta: &mut serde_json::Map<String, Value>, blobs: &mut Blobs) {
        meta.insert(
            prefix.to_string(),
            json!({ "architecture": self.arch, "arch_sha256": self.arch.hash() }),
        );
        blobs.push(format!("{prefix}.params"), self.params().into_iter().flatten().copied().collect());
        blobs.push(format!("{prefix}.buffers"), self.buffers());
    }

    pub fn import(prefix: &str, meta: &Value, blobs: &mut Blobs, expected: Option<&Architecture>) -> Result<Self> {
        let entry = meta.get(prefix).ok_or_else(|| Error::Missing(format!("stack `{prefix}` in checkpoint")))?;
        let arch: Architecture = serde_json::from_value(entry["architecture"].clone())?;
        let stored = entry["arch_sha256"].as_str().unwrap_or_default();
        if stored != arch.hash() {
            return Err(Error::Config(format!("architecture hash mismatch for `{prefix}`")));
        }
        if let Some(exp) = expected {
            if exp.hash() != stored {
                return Err(Error::Config(format!("checkpoint architecture for `{prefix}` differs from the expected one")));
            }
        }
        let mut stack = LayerStack::new(arch, RngSeed::new(0, 0))?;
        let flat = blobs.take(&format!("{prefix}.params"))?;
        let buf = blobs.take(&format!("{prefix}.buffers"))?;
        if flat.len() != stack.param_count() || buf.len() != stack.buffers().len() {
            return Err(Error::Config(format!("parameter blob size mismatch for `{prefix}`")));
        }
        let mut it = flat.into_iter();
        for p in stack.params_mut() {
            p.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        }
        let mut it = buf.into_iter();
        for l in &mut stack.layers {
            for b in &mut l.buffers {
                b.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
            }
        }
        Ok(stack)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = serde_json::Map::new();
        let mut blobs = Blobs::new();
        self.export("stack", &mut meta, &mut blobs);
        container::write(path, CHECKPOINT_MAGIC, &Value::Object(meta), &blobs)
    }

    pub fn load(path: &Path, expected: Option<&Architecture>) -> Result<Self> {
        let (meta, mut blobs) = container::read(path, CHECKPOINT_MAGIC)?;
        LayerStack::import("stack", &meta, &mut blobs, expected)
    }
}
