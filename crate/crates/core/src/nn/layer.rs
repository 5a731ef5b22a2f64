use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngSeed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the output y = f(x) (and x for relu).
    fn slope(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }
}

/// Architecture description of one layer; shapes of weights follow from
/// the incoming per-item shape at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Conv2d { filters: usize, kernel: usize, stride: usize, padding: usize },
    ConvTranspose2d { filters: usize, kernel: usize, stride: usize, padding: usize, output_padding: usize },
    Activation { func: Activation },
    Flatten,
    Reshape { shape: Vec<usize> },
    /// Appends the side input (one vector per item) to a flat input.
    ConcatSide,
    BatchNorm { momentum: f64, eps: f64 },
    /// Splits a flat input into (mean, log-variance) halves and draws
    /// mean + exp(logvar/2)·ε in training mode; passes the mean in eval.
    Sampling { kl_weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: Vec<Vec<f64>>,
    /// Non-trained state (batch-norm running statistics).
    pub buffers: Vec<Vec<f64>>,
}

pub(crate) enum Cache {
    Input(Tensor),
    Act { input: Tensor, output: Tensor },
    Shape(Vec<usize>),
    Concat { width: usize },
    Norm { xhat: Vec<f64>, inv_std: Vec<f64>, train: bool, batch_mean: Vec<f64>, batch_var: Vec<f64> },
    Sample { eps: Vec<f64>, mu: Vec<f64>, logvar: Vec<f64>, k: usize },
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

fn convt_out(n: usize, k: usize, s: usize, p: usize, op: usize) -> Option<usize> {
    ((n - 1) * s + k + op).checked_sub(2 * p)
}

fn xavier(fan_in: usize, fan_out: usize, n: usize, rng: RngSeed) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
    let mut r = rng.rng();
    (0..n).map(|_| r.sample(dist)).collect()
}

impl Layer {
    pub fn build(spec: &LayerSpec, in_shape: &[usize], side_width: usize, rng: RngSeed) -> Result<Layer> {
        let bad = |m: String| Error::shape(m);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let out_shape = match spec {
            LayerSpec::Dense { units } => {
                let [n_in] = in_shape else {
                    return Err(bad(format!("dense expects a flat input, got {in_shape:?}")));
                };
                if *units == 0 {
                    return Err(Error::invalid("dense layer needs at least one unit"));
                }
                params.push(xavier(*n_in, *units, n_in * units, rng));
                params.push(vec![0.0; *units]);
                vec![*units]
            }
            LayerSpec::Conv2d { filters, kernel, stride, padding } => {
                let [c, h, w] = in_shape else {
                    return Err(bad(format!("conv2d expects (channels, height, width), got {in_shape:?}")));
                };
                check_kernel(*kernel, *stride, *filters)?;
                let (Some(ho), Some(wo)) =
                    (conv_out(*h, *kernel, *stride, *padding), conv_out(*w, *kernel, *stride, *padding))
                else {
                    return Err(bad(format!("kernel {kernel} larger than padded input {h}x{w}")));
                };
                let kk = kernel * kernel;
                params.push(xavier(c * kk, filters * kk, filters * c * kk, rng));
                params.push(vec![0.0; *filters]);
                vec![*filters, ho, wo]
            }
            LayerSpec::ConvTranspose2d { filters, kernel, stride, padding, output_padding } => {
                let [c, h, w] = in_shape else {
                    return Err(bad(format!("transposed conv expects (channels, height, width), got {in_shape:?}")));
                };
                check_kernel(*kernel, *stride, *filters)?;
                if output_padding >= stride {
                    return Err(Error::invalid("output_padding must be smaller than stride"));
                }
                let (Some(ho), Some(wo)) = (
                    convt_out(*h, *kernel, *stride, *padding, *output_padding),
                    convt_out(*w, *kernel, *stride, *padding, *output_padding),
                ) else {
                    return Err(bad("padding exceeds transposed-conv output".into()));
                };
                if ho == 0 || wo == 0 {
                    return Err(bad("empty transposed-conv output".into()));
                }
                let kk = kernel * kernel;
                params.push(xavier(c * kk, filters * kk, c * filters * kk, rng));
                params.push(vec![0.0; *filters]);
                vec![*filters, ho, wo]
            }
            LayerSpec::Activation { .. } => in_shape.to_vec(),
            LayerSpec::Flatten => vec![in_shape.iter().product()],
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != in_shape.iter().product::<usize>() {
                    return Err(bad(format!("cannot reshape {in_shape:?} to {shape:?}")));
                }
                shape.clone()
            }
            LayerSpec::ConcatSide => {
                let [n] = in_shape else {
                    return Err(bad(format!("side concatenation expects a flat input, got {in_shape:?}")));
                };
                if side_width == 0 {
                    return Err(Error::invalid("side concatenation in a stack without side input"));
                }
                vec![n + side_width]
            }
            LayerSpec::BatchNorm { momentum, eps } => {
                if !(0.0..=1.0).contains(momentum) || !(*eps > 0.0) {
                    return Err(Error::invalid("batch norm needs momentum in [0, 1] and eps > 0"));
                }
                let c = *in_shape.first().ok_or_else(|| bad("batch norm on empty shape".into()))?;
                params.push(vec![1.0; c]);
                params.push(vec![0.0; c]);
                buffers.push(vec![0.0; c]);
                buffers.push(vec![1.0; c]);
                in_shape.to_vec()
            }
            LayerSpec::Sampling { kl_weight } => {
                let [n] = in_shape else {
                    return Err(bad(format!("sampling expects a flat input, got {in_shape:?}")));
                };
                if n % 2 != 0 || *n == 0 {
                    return Err(bad(format!("sampling needs an even width (mean ‖ logvar), got {n}")));
                }
                if !(*kl_weight >= 0.0) {
                    return Err(Error::invalid("kl_weight must be non-negative"));
                }
                vec![n / 2]
            }
        };
        Ok(Layer { spec: spec.clone(), in_shape: in_shape.to_vec(), out_shape, params, buffers })
    }

    pub fn forward(
        &self,
        x: Tensor,
        side: Option<&Tensor>,
        mode: Mode,
        rng: RngSeed,
        aux: &mut f64,
    ) -> Result<(Tensor, Cache)> {
        let b = x.batch();
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&self.out_shape);
        match &self.spec {
            LayerSpec::Dense { units } => {
                let n_in = self.in_shape[0];
                let (w, bias) = (&self.params[0], &self.params[1]);
                let mut y = vec![0.0; b * units];
                for s in 0..b {
                    let xi = x.item(s);
                    for o in 0..*units {
                        let row = &w[o * n_in..(o + 1) * n_in];
                        y[s * units + o] = bias[o] + row.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
                    }
                }
                Ok((Tensor::raw(out_shape, y), Cache::Input(x)))
            }
            LayerSpec::Conv2d { filters, kernel, stride, padding } => {
                let y = conv2d(&x, &self.params[0], &self.params[1], &self.in_shape, &self.out_shape, *filters, *kernel, *stride, *padding);
                Ok((Tensor::raw(out_shape, y), Cache::Input(x)))
            }
            LayerSpec::ConvTranspose2d { filters, kernel, stride, padding, .. } => {
                let y = convt2d(&x, &self.params[0], &self.params[1], &self.in_shape, &self.out_shape, *filters, *kernel, *stride, *padding);
                Ok((Tensor::raw(out_shape, y), Cache::Input(x)))
            }
            LayerSpec::Activation { func } => {
                let y: Vec<f64> = x.data().iter().map(|v| func.apply(*v)).collect();
                let output = Tensor::raw(out_shape, y);
                Ok((output.clone(), Cache::Act { input: x, output }))
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                let in_full = x.shape().to_vec();
                Ok((x.reshaped(out_shape)?, Cache::Shape(in_full)))
            }
            LayerSpec::ConcatSide => {
                let side = side.ok_or_else(|| Error::invalid("side input required by concatenation layer"))?;
                let width = side.item_len();
                if side.batch() != b || width + self.in_shape[0] != self.out_shape[0] {
                    return Err(Error::shape(format!(
                        "side input {:?} does not fit batch {b} and width {}",
                        side.shape(),
                        self.out_shape[0] - self.in_shape[0]
                    )));
                }
                let mut y = Vec::with_capacity(b * self.out_shape[0]);
                for s in 0..b {
                    y.extend_from_slice(x.item(s));
                    y.extend_from_slice(side.item(s));
                }
                Ok((Tensor::raw(out_shape, y), Cache::Concat { width }))
            }
            LayerSpec::BatchNorm { eps, .. } => {
                let c = self.in_shape[0];
                let sp: usize = self.in_shape[1..].iter().product();
                let (gamma, beta) = (&self.params[0], &self.params[1]);
                let train = mode == Mode::Train;
                let (mean, var) = if train {
                    let cnt = (b * sp) as f64;
                    let mut m = vec![0.0; c];
                    let mut v = vec![0.0; c];
                    for s in 0..b {
                        for ch in 0..c {
                            let seg = &x.item(s)[ch * sp..(ch + 1) * sp];
                            m[ch] += seg.iter().sum::<f64>();
                        }
                    }
                    m.iter_mut().for_each(|a| *a /= cnt);
                    for s in 0..b {
                        for ch in 0..c {
                            let seg = &x.item(s)[ch * sp..(ch + 1) * sp];
                            v[ch] += seg.iter().map(|a| (a - m[ch]).powi(2)).sum::<f64>();
                        }
                    }
                    v.iter_mut().for_each(|a| *a /= cnt);
                    (m, v)
                } else {
                    (self.buffers[0].clone(), self.buffers[1].clone())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = vec![0.0; x.data().len()];
                let mut y = vec![0.0; x.data().len()];
                let n = c * sp;
                for s in 0..b {
                    for ch in 0..c {
                        for q in 0..sp {
                            let i = s * n + ch * sp + q;
                            xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                            y[i] = gamma[ch] * xhat[i] + beta[ch];
                        }
                    }
                }
                Ok((
                    Tensor::raw(out_shape, y),
                    Cache::Norm { xhat, inv_std, train, batch_mean: mean, batch_var: var },
                ))
            }
            LayerSpec::Sampling { kl_weight } => {
                let k = self.out_shape[0];
                let mut mu = Vec::with_capacity(b * k);
                let mut logvar = Vec::with_capacity(b * k);
                for s in 0..b {
                    mu.extend_from_slice(&x.item(s)[..k]);
                    logvar.extend_from_slice(&x.item(s)[k..]);
                }
                let eps: Vec<f64> = match mode {
                    Mode::Train => {
                        let mut r = rng.rng();
                        (0..b * k).map(|_| r.sample(StandardNormal)).collect()
                    }
                    Mode::Eval => vec![0.0; b * k],
                };
                let z: Vec<f64> = (0..b * k).map(|i| mu[i] + (0.5 * logvar[i]).exp() * eps[i]).collect();
                let kl: f64 = (0..b * k).map(|i| 0.5 * (logvar[i].exp() + mu[i] * mu[i] - 1.0 - logvar[i])).sum();
                *aux += kl_weight * kl / b as f64;
                Ok((Tensor::raw(out_shape, z), Cache::Sample { eps, mu, logvar, k }))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient (plus the side-input gradient for concatenation).
    pub fn backward(&self, cache: Cache, g: Tensor, grads: &mut [Vec<f64>]) -> (Tensor, Option<Tensor>) {
        let b = g.batch();
        match (&self.spec, cache) {
            (LayerSpec::Dense { units }, Cache::Input(x)) => {
                let n_in = self.in_shape[0];
                let w = &self.params[0];
                let mut dx = vec![0.0; b * n_in];
                for s in 0..b {
                    let xi = x.item(s);
                    let gi = g.item(s);
                    let dxi = &mut dx[s * n_in..(s + 1) * n_in];
                    for o in 0..*units {
                        let go = gi[o];
                        if go == 0.0 {
                            continue;
                        }
                        grads[1][o] += go;
                        let dw = &mut grads[0][o * n_in..(o + 1) * n_in];
                        let row = &w[o * n_in..(o + 1) * n_in];
                        for i in 0..n_in {
                            dw[i] += go * xi[i];
                            dxi[i] += go * row[i];
                        }
                    }
                }
                (Tensor::raw(x.shape().to_vec(), dx), None)
            }
            (LayerSpec::Conv2d { filters, kernel, stride, padding }, Cache::Input(x)) => {
                let dx = conv2d_back(&x, &g, &self.params[0], grads, &self.in_shape, &self.out_shape, *filters, *kernel, *stride, *padding);
                (Tensor::raw(x.shape().to_vec(), dx), None)
            }
            (LayerSpec::ConvTranspose2d { filters, kernel, stride, padding, .. }, Cache::Input(x)) => {
                let dx = convt2d_back(&x, &g, &self.params[0], grads, &self.in_shape, &self.out_shape, *filters, *kernel, *stride, *padding);
                (Tensor::raw(x.shape().to_vec(), dx), None)
            }
            (LayerSpec::Activation { func }, Cache::Act { input, output }) => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(input.data().iter().zip(output.data()))
                    .map(|(gv, (xv, yv))| gv * func.slope(*xv, *yv))
                    .collect();
                (Tensor::raw(input.shape().to_vec(), dx), None)
            }
            (LayerSpec::Flatten | LayerSpec::Reshape { .. }, Cache::Shape(shape)) => {
                (g.reshaped(shape).expect("same element count"), None)
            }
            (LayerSpec::ConcatSide, Cache::Concat { width }) => {
                let n = self.in_shape[0];
                let mut dx = Vec::with_capacity(b * n);
                let mut ds = Vec::with_capacity(b * width);
                for s in 0..b {
                    let gi = g.item(s);
                    dx.extend_from_slice(&gi[..n]);
                    ds.extend_from_slice(&gi[n..]);
                }
                (Tensor::raw(vec![b, n], dx), Some(Tensor::raw(vec![b, width], ds)))
            }
            (LayerSpec::BatchNorm { .. }, Cache::Norm { xhat, inv_std, train, .. }) => {
                let c = self.in_shape[0];
                let sp: usize = self.in_shape[1..].iter().product();
                let n = c * sp;
                let gamma = &self.params[0];
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..b {
                    for ch in 0..c {
                        for q in 0..sp {
                            let i = s * n + ch * sp + q;
                            sum_g[ch] += g.data()[i];
                            sum_gx[ch] += g.data()[i] * xhat[i];
                        }
                    }
                }
                for ch in 0..c {
                    grads[0][ch] += sum_gx[ch];
                    grads[1][ch] += sum_g[ch];
                }
                let cnt = (b * sp) as f64;
                let mut dx = vec![0.0; g.data().len()];
                for s in 0..b {
                    for ch in 0..c {
                        for q in 0..sp {
                            let i = s * n + ch * sp + q;
                            let gi = g.data()[i] * gamma[ch];
                            dx[i] = if train {
                                // dxhat = g·γ; the batch mean and variance depend on x too.
                                inv_std[ch] * (gi - gamma[ch] * (sum_g[ch] + xhat[i] * sum_gx[ch]) / cnt)
                            } else {
                                gi * inv_std[ch]
                            };
                        }
                    }
                }
                (Tensor::raw(g.shape().to_vec(), dx), None)
            }
            (LayerSpec::Sampling { kl_weight }, Cache::Sample { eps, mu, logvar, k }) => {
                let kw = kl_weight / b as f64;
                let mut dx = vec![0.0; b * 2 * k];
                for s in 0..b {
                    for j in 0..k {
                        let i = s * k + j;
                        let gz = g.data()[i];
                        let sd = (0.5 * logvar[i]).exp();
                        dx[s * 2 * k + j] = gz + kw * mu[i];
                        dx[s * 2 * k + k + j] = gz * eps[i] * 0.5 * sd + kw * 0.5 * (logvar[i].exp() - 1.0);
                    }
                }
                (Tensor::raw(vec![b, 2 * k], dx), None)
            }
            _ => unreachable!("cache kind always matches the layer that produced it"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Moves the running statistics toward a training batch's statistics.
    pub fn absorb(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        if let LayerSpec::BatchNorm { momentum, .. } = &self.spec {
            for ch in 0..batch_mean.len() {
                self.buffers[0][ch] = (1.0 - momentum) * self.buffers[0][ch] + momentum * batch_mean[ch];
                self.buffers[1][ch] = (1.0 - momentum) * self.buffers[1][ch] + momentum * batch_var[ch];
            }
        }
    }
}

fn check_kernel(kernel: usize, stride: usize, filters: usize) -> Result<()> {
    if kernel % 2 == 0 {
        return Err(Error::invalid(format!("convolution kernels must be odd-sized, got {kernel}")));
    }
    if stride == 0 || filters == 0 {
        return Err(Error::invalid("stride and filter count must be positive"));
    }
    Ok(())
}

// Conv weights are laid out (out, in, ky, kx); transposed-conv weights
// (in, out, ky, kx).

#[allow(clippy::too_many_arguments)]
fn conv2d(x: &Tensor, w: &[f64], bias: &[f64], ins: &[usize], outs: &[usize], co_n: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
    let (ci_n, h, wd) = (ins[0], ins[1], ins[2]);
    let (ho, wo) = (outs[1], outs[2]);
    let b = x.batch();
    let mut y = vec![0.0; b * co_n * ho * wo];
    for bi in 0..b {
        let xi = x.item(bi);
        for co in 0..co_n {
            let yo = &mut y[(bi * co_n + co) * ho * wo..(bi * co_n + co + 1) * ho * wo];
            yo.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..ci_n {
                let xp = &xi[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((co * ci_n + ci) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &xp[iy as usize * wd..(iy as usize + 1) * wd];
                            let yr = &mut yo[oy * wo..(oy + 1) * wo];
                            for (ox, yv) in yr.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < wd as isize {
                                    *yv += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv2d_back(
    x: &Tensor,
    g: &Tensor,
    w: &[f64],
    grads: &mut [Vec<f64>],
    ins: &[usize],
    outs: &[usize],
    co_n: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Vec<f64> {
    let (ci_n, h, wd) = (ins[0], ins[1], ins[2]);
    let (ho, wo) = (outs[1], outs[2]);
    let b = x.batch();
    let mut dx = vec![0.0; x.data().len()];
    let (gw, gb) = grads.split_at_mut(1);
    let (gw, gb) = (&mut gw[0], &mut gb[0]);
    for bi in 0..b {
        let xi = x.item(bi);
        let gi = g.item(bi);
        let dxi = &mut dx[bi * ci_n * h * wd..(bi + 1) * ci_n * h * wd];
        for co in 0..co_n {
            let go = &gi[co * ho * wo..(co + 1) * ho * wo];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..ci_n {
                let xp = &xi[ci * h * wd..(ci + 1) * h * wd];
                let dxp = &mut dxi[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((co * ci_n + ci) * k + ky) * k + kx;
                        let wv = w[wi];
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = iy as usize * wd;
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < wd as isize {
                                    let gv = go[oy * wo + ox];
                                    acc += gv * xp[base + ix as usize];
                                    dxp[base + ix as usize] += gv * wv;
                                }
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn convt2d(x: &Tensor, w: &[f64], bias: &[f64], ins: &[usize], outs: &[usize], co_n: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
    let (ci_n, h, wd) = (ins[0], ins[1], ins[2]);
    let (ho, wo) = (outs[1], outs[2]);
    let b = x.batch();
    let mut y = vec![0.0; b * co_n * ho * wo];
    for bi in 0..b {
        let xi = x.item(bi);
        let yb = &mut y[bi * co_n * ho * wo..(bi + 1) * co_n * ho * wo];
        for co in 0..co_n {
            yb[co * ho * wo..(co + 1) * ho * wo].iter_mut().for_each(|v| *v = bias[co]);
        }
        for ci in 0..ci_n {
            let xp = &xi[ci * h * wd..(ci + 1) * h * wd];
            for co in 0..co_n {
                let yo = &mut yb[co * ho * wo..(co + 1) * ho * wo];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((ci * co_n + co) * k + ky) * k + kx];
                        for iy in 0..h {
                            let oy = (iy * s + ky) as isize - p as isize;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            let yr = &mut yo[oy as usize * wo..(oy as usize + 1) * wo];
                            let xr = &xp[iy * wd..(iy + 1) * wd];
                            for (ix, xv) in xr.iter().enumerate() {
                                let ox = (ix * s + kx) as isize - p as isize;
                                if ox >= 0 && ox < wo as isize {
                                    yr[ox as usize] += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn convt2d_back(
    x: &Tensor,
    g: &Tensor,
    w: &[f64],
    grads: &mut [Vec<f64>],
    ins: &[usize],
    outs: &[usize],
    co_n: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Vec<f64> {
    let (ci_n, h, wd) = (ins[0], ins[1], ins[2]);
    let (ho, wo) = (outs[1], outs[2]);
    let b = x.batch();
    let mut dx = vec![0.0; x.data().len()];
    let (gw, gb) = grads.split_at_mut(1);
    let (gw, gb) = (&mut gw[0], &mut gb[0]);
    for bi in 0..b {
        let xi = x.item(bi);
        let gi = g.item(bi);
        for co in 0..co_n {
            gb[co] += gi[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
        }
        let dxi = &mut dx[bi * ci_n * h * wd..(bi + 1) * ci_n * h * wd];
        for ci in 0..ci_n {
            let xp = &xi[ci * h * wd..(ci + 1) * h * wd];
            let dxp = &mut dxi[ci * h * wd..(ci + 1) * h * wd];
            for co in 0..co_n {
                let go = &gi[co * ho * wo..(co + 1) * ho * wo];
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((ci * co_n + co) * k + ky) * k + kx;
                        let wv = w[wi];
                        let mut acc = 0.0;
                        for iy in 0..h {
                            let oy = (iy * s + ky) as isize - p as isize;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            let gr = &go[oy as usize * wo..(oy as usize + 1) * wo];
                            for ix in 0..wd {
                                let ox = (ix * s + kx) as isize - p as isize;
                                if ox >= 0 && ox < wo as isize {
                                    let gv = gr[ox as usize];
                                    acc += gv * xp[iy * wd + ix];
                                    dxp[iy * wd + ix] += gv * wv;
                                }
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    dx
}
