//! A flat convolutional noise predictor with a learned per-step embedding,
//! trained by hand-written backpropagation and Adam.
//!
//! Input channels are `[x_t, upsampled LR, terrain]`; the output is a single
//! noise channel of the same spatial size. Every layer but the last is
//! followed by SiLU. The embedding row for step `t` is added to the first
//! layer's pre-activation.
//!
//! Convolutions are lowered to matrix products (im2col), which keeps the
//! backward pass three GEMMs per layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, Conditioning, NoisePredictor, NoiseSchedule, NormStats};
use crate::error::{Error, Result};
use crate::grid::{Field2D, PatchPair};
use crate::grid::upsample_bilinear;

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Zero,
    Wrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    /// When false the terrain channel is fed as zeros.
    pub terrain_conditioning: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden_channels: 32,
            kernel: 3,
            terrain_conditioning: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_channels == 0 {
            return Err(Error::InvalidConfig(
                "model.layers and model.hidden_channels must be positive".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "model.kernel {} must be odd",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        (0..self.layers)
            .map(|l| LayerShape {
                in_ch: if l == 0 { INPUT_CHANNELS } else { self.hidden_channels },
                out_ch: if l + 1 == self.layers { 1 } else { self.hidden_channels },
                kernel: self.kernel,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl LayerShape {
    /// Columns of the lowered weight matrix.
    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.patch_len()
    }
}

/// Trainable tensors. Also used for gradients and optimizer moments.
///
/// Weights are `[out][in][ky][kx]`; the embedding is `[step][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub time_embedding: Vec<f64>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            time_embedding: vec![0.0; self.time_embedding.len()],
        }
    }

    pub fn segments(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.weights.len() + 1);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        out.push(&self.time_embedding);
        out
    }

    pub fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.weights.len() + 1);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.time_embedding);
        out
    }

    pub fn len(&self) -> usize {
        self.segments().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.segments().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    shapes: Vec<LayerShape>,
    pub params: Params,
    steps: usize,
    norm: NormStats,
    padding: Padding,
    terrain_conditioning: bool,
}

/// One training tuple; `x0` and the conditioning are in normalized units.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub x0: &'a Field2D,
    pub cond: &'a Conditioning,
    pub t: usize,
    pub eps: &'a Field2D,
}

struct LayerCache {
    col: Vec<f64>,
    pre: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `c = alpha·op(a)·op(b) + beta·c`, all row-major, transposes via strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Source index along one axis for output position `pos` and offset `d`.
#[inline]
fn source_index(pos: usize, d: isize, n: usize, padding: Padding) -> Option<usize> {
    let s = pos as isize + d;
    match padding {
        Padding::Zero => (0..n as isize).contains(&s).then_some(s as usize),
        Padding::Wrap => Some(s.rem_euclid(n as isize) as usize),
    }
}

fn im2col(input: &[f64], shape: &LayerShape, h: usize, w: usize, padding: Padding) -> Vec<f64> {
    let (k, hw) = (shape.kernel, h * w);
    let half = (k / 2) as isize;
    let mut col = vec![0.0; shape.patch_len() * hw];
    for i in 0..shape.in_ch {
        let plane = &input[i * hw..(i + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((i * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - half, kx as isize - half);
                for y in 0..h {
                    let Some(sy) = source_index(y, dy, h, padding) else { continue };
                    let src = &plane[sy * w..(sy + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        if let Some(sx) = source_index(x, dx, w, padding) {
                            *d = src[sx];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Transpose of [`im2col`]: scatters column gradients back onto the input.
fn col2im(col: &[f64], shape: &LayerShape, h: usize, w: usize, padding: Padding) -> Vec<f64> {
    let (k, hw) = (shape.kernel, h * w);
    let half = (k / 2) as isize;
    let mut out = vec![0.0; shape.in_ch * hw];
    for i in 0..shape.in_ch {
        let plane = &mut out[i * hw..(i + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((i * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - half, kx as isize - half);
                for y in 0..h {
                    let Some(sy) = source_index(y, dy, h, padding) else { continue };
                    let src = &row[y * w..(y + 1) * w];
                    for (x, g) in src.iter().enumerate() {
                        if let Some(sx) = source_index(x, dx, w, padding) {
                            plane[sy * w + sx] += g;
                        }
                    }
                }
            }
        }
    }
    out
}

impl DenoiserModel {
    /// He-initialized network; the last layer starts 10x smaller and the
    /// embedding at zero.
    pub fn init(cfg: &ModelConfig, steps: usize, norm: NormStats, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if steps == 0 {
            return Err(Error::InvalidSchedule("model needs at least one step".into()));
        }
        let shapes = cfg.layer_shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = shapes.len() - 1;
        let weights = shapes
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let mut std = (2.0 / s.patch_len() as f64).sqrt();
                if l == last {
                    std *= 0.1;
                }
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..s.weight_len()).map(|_| rng.sample(normal)).collect()
            })
            .collect();
        let biases = shapes.iter().map(|s| vec![0.0; s.out_ch]).collect();
        let time_embedding = vec![0.0; steps * shapes[0].out_ch];
        Ok(Self {
            shapes,
            params: Params {
                weights,
                biases,
                time_embedding,
            },
            steps,
            norm,
            padding: Padding::Zero,
            terrain_conditioning: cfg.terrain_conditioning,
        })
    }

    /// Assembles a model from raw parts, checking every shape.
    pub fn from_parts(
        shapes: Vec<LayerShape>,
        params: Params,
        steps: usize,
        norm: NormStats,
        terrain_conditioning: bool,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::Malformed(m));
        if shapes.is_empty() || shapes[0].in_ch != INPUT_CHANNELS {
            return bad("first layer must take 3 input channels".into());
        }
        if shapes.last().map(|s| s.out_ch) != Some(1) {
            return bad("last layer must produce 1 channel".into());
        }
        for (l, pair) in shapes.windows(2).enumerate() {
            if pair[0].out_ch != pair[1].in_ch {
                return bad(format!("layer {l} output does not feed layer {}", l + 1));
            }
        }
        if shapes.iter().any(|s| s.kernel % 2 == 0) {
            return bad("kernels must be odd".into());
        }
        if params.weights.len() != shapes.len() || params.biases.len() != shapes.len() {
            return bad("parameter count does not match layer count".into());
        }
        for (l, s) in shapes.iter().enumerate() {
            if params.weights[l].len() != s.weight_len() || params.biases[l].len() != s.out_ch {
                return bad(format!("layer {l} parameter shape mismatch"));
            }
        }
        if params.time_embedding.len() != steps * shapes[0].out_ch {
            return bad("time embedding shape mismatch".into());
        }
        if !params.all_finite() {
            return bad("non-finite parameter".into());
        }
        Ok(Self {
            shapes,
            params,
            steps,
            norm,
            padding: Padding::Zero,
            terrain_conditioning,
        })
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn norm(&self) -> NormStats {
        self.norm
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn set_padding(&mut self, padding: Padding) {
        self.padding = padding;
    }

    pub fn terrain_conditioning(&self) -> bool {
        self.terrain_conditioning
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps,
            });
        }
        Ok(())
    }

    fn stack_inputs(&self, xt: &Field2D, cond: &Conditioning) -> Result<Vec<f64>> {
        xt.ensure_same_shape(&cond.lr_upsampled)?;
        xt.ensure_same_shape(&cond.terrain)?;
        let hw = xt.len();
        let mut input = Vec::with_capacity(INPUT_CHANNELS * hw);
        input.extend_from_slice(xt.values());
        input.extend_from_slice(cond.lr_upsampled.values());
        if self.terrain_conditioning {
            input.extend_from_slice(cond.terrain.values());
        } else {
            input.resize(INPUT_CHANNELS * hw, 0.0);
        }
        Ok(input)
    }

    fn run(&self, input: Vec<f64>, h: usize, w: usize, t: usize, mut cache: Option<&mut Vec<LayerCache>>) -> Vec<f64> {
        let hw = h * w;
        let last = self.shapes.len() - 1;
        let mut act = input;
        for (l, shape) in self.shapes.iter().enumerate() {
            let col = im2col(&act, shape, h, w, self.padding);
            let mut out = vec![0.0; shape.out_ch * hw];
            let emb = (l == 0).then(|| {
                &self.params.time_embedding[(t - 1) * shape.out_ch..t * shape.out_ch]
            });
            for (o, plane) in out.chunks_exact_mut(hw).enumerate() {
                let b = self.params.biases[l][o] + emb.map_or(0.0, |e| e[o]);
                plane.iter_mut().for_each(|v| *v = b);
            }
            gemm(shape.out_ch, shape.patch_len(), hw, &self.params.weights[l], false, &col, false, 1.0, &mut out);
            if l == last {
                if let Some(c) = cache.as_deref_mut() {
                    c.push(LayerCache { col, pre: Vec::new() });
                }
                act = out;
            } else {
                let next: Vec<f64> = out.iter().map(|&v| silu(v)).collect();
                if let Some(c) = cache.as_deref_mut() {
                    c.push(LayerCache { col, pre: out });
                }
                act = next;
            }
        }
        act
    }

    /// Predicted noise for `x_t` under `cond` at step `t`.
    pub fn forward(&self, xt: &Field2D, cond: &Conditioning, t: usize) -> Result<Field2D> {
        self.check_step(t)?;
        let input = self.stack_inputs(xt, cond)?;
        let out = self.run(input, xt.rows(), xt.cols(), t, None);
        xt.with_values(out)
    }

    /// Accumulates `∂L/∂θ` for one example into `grads`, given `∂L/∂output`.
    fn backprop(&self, caches: &[LayerCache], grad_out: Vec<f64>, h: usize, w: usize, t: usize, grads: &mut Params) {
        let hw = h * w;
        let last = self.shapes.len() - 1;
        let mut g = grad_out;
        for l in (0..=last).rev() {
            let shape = &self.shapes[l];
            let cache = &caches[l];
            if l != last {
                g.iter_mut().zip(&cache.pre).for_each(|(gv, &p)| *gv *= silu_grad(p));
            }
            for (o, plane) in g.chunks_exact(hw).enumerate() {
                let s: f64 = plane.iter().sum();
                grads.biases[l][o] += s;
                if l == 0 {
                    grads.time_embedding[(t - 1) * shape.out_ch + o] += s;
                }
            }
            gemm(shape.out_ch, hw, shape.patch_len(), &g, false, &cache.col, true, 1.0, &mut grads.weights[l]);
            if l > 0 {
                let mut gcol = vec![0.0; shape.patch_len() * hw];
                gemm(shape.patch_len(), shape.out_ch, hw, &self.params.weights[l], true, &g, false, 0.0, &mut gcol);
                g = col2im(&gcol, shape, h, w, self.padding);
            }
        }
    }

    /// Batch-mean noise-prediction loss and its gradient.
    pub fn backward(&self, batch: &[TrainExample<'_>], sched: &NoiseSchedule) -> Result<(Params, f64)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        for ex in batch {
            self.check_step(ex.t)?;
            ex.x0.ensure_same_shape(ex.eps)?;
            let xt = forward_sample(ex.x0, ex.t, ex.eps, sched)?;
            let input = self.stack_inputs(&xt, ex.cond)?;
            let (h, w) = xt.shape();
            let mut caches = Vec::with_capacity(self.shapes.len());
            let pred = self.run(input, h, w, ex.t, Some(&mut caches));
            let scale = 2.0 / (pred.len() as f64 * batch.len() as f64);
            let mut sq = 0.0;
            let grad_out: Vec<f64> = pred
                .iter()
                .zip(ex.eps.values())
                .map(|(p, e)| {
                    let d = p - e;
                    sq += d * d;
                    scale * d
                })
                .collect();
            total += sq / pred.len() as f64;
            self.backprop(&caches, grad_out, h, w, ex.t, &mut grads);
        }
        Ok((grads, total / batch.len() as f64))
    }

    /// Batch-mean loss without gradients.
    pub fn batch_loss(&self, batch: &[TrainExample<'_>], sched: &NoiseSchedule) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            total += crate::diffusion::training_loss(self, ex.x0, ex.cond, ex.t, ex.eps, sched)?;
        }
        Ok(total / batch.len() as f64)
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, xt: &Field2D, cond: &Conditioning, t: usize) -> Result<Field2D> {
        self.forward(xt, cond, t)
    }

    fn norm_stats(&self) -> NormStats {
        self.norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("train.learning_rate must be >= 0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidConfig("train.beta1/beta2 must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("train.epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Params,
    v: Params,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(params: &Params, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Params) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        for (((p, g), m), v) in params
            .segments_mut()
            .into_iter()
            .zip(grads.segments())
            .zip(self.m.segments_mut())
            .zip(self.v.segments_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// A training pair prepared in normalized units.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub x0: Field2D,
    pub cond: Conditioning,
}

/// Normalizes a patch pair: target HR wind, bilinearly upsampled LR, terrain.
pub fn prepare_pair(pair: &PatchPair, stats: &NormStats) -> Result<PreparedPair> {
    let lr_up = upsample_bilinear(&pair.lr, pair.factor())?;
    Ok(PreparedPair {
        x0: stats.normalize_wind(&pair.hr),
        cond: Conditioning::from_physical(&lr_up, &pair.terrain, stats)?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub losses: Vec<f64>,
}

/// Stochastic ε-prediction training, deterministic in `cfg.seed`.
///
/// Normalization statistics are fitted on the dataset's HR wind and terrain
/// and stored in the returned model.
pub fn train(
    dataset: &[PatchPair],
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let stats = NormStats::fit(dataset.iter().map(|p| &p.hr), dataset.iter().map(|p| &p.terrain));
    let prepared = dataset
        .iter()
        .map(|p| prepare_pair(p, &stats))
        .collect::<Result<Vec<_>>>()?;
    let mut model = DenoiserModel::init(model_cfg, sched.steps(), stats, cfg.seed)?;
    let mut opt = Adam::new(&model.params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let picks: Vec<(usize, usize, Field2D)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..prepared.len());
                let t = rng.random_range(1..=sched.steps());
                let x0 = &prepared[i].x0;
                let eps = x0
                    .with_values((0..x0.len()).map(|_| rng.sample(StandardNormal)).collect())
                    .expect("normal draws are finite");
                (i, t, eps)
            })
            .collect();
        let batch: Vec<TrainExample<'_>> = picks
            .iter()
            .map(|(i, t, eps)| TrainExample {
                x0: &prepared[*i].x0,
                cond: &prepared[*i].cond,
                t: *t,
                eps,
            })
            .collect();
        let (grads, loss) = model.backward(&batch, sched)?;
        opt.update(&mut model.params, &grads);
        if !model.params.all_finite() {
            return Err(Error::InvalidConfig(
                "training diverged (non-finite parameters); lower train.learning_rate".into(),
            ));
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { model, losses })
}
