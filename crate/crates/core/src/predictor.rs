//! Graph-convolutional ranking predictor with hand-written backpropagation.
//!
//! Each graph convolution computes `H_g = relu(N H_{g-1} W_g)` with the
//! one-sided normalization `N = D^{-1/2} (A + I)`, where `D` holds the row sums
//! of `A + I`. The last convolution is mean-pooled over layers and fed to a
//! single linear output neuron. Higher scores mean lower predicted error.
//!
//! Training minimizes the pairwise cross-entropy
//! `-[y ln s(f_i - f_j) + (1 - y) ln(1 - s(f_i - f_j))]`, with `y = 1` when
//! architecture `i` has the lower mean validation error, using momentum SGD on
//! a cosine-by-step learning-rate schedule.
//!
//! All arithmetic is `f64`.

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::arch_space::Architecture;
use crate::seeding::rng_from_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid predictor config: {0}")]
    Config(String),
    #[error("training set needs at least two architectures")]
    TooFewExamples,
    #[error("no ranking signal: every training error is tied")]
    NoRankingSignal,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorConfig {
    pub gcn_layers: usize,
    pub hidden_width: usize,
    /// Feature width `d` of the search space.
    pub input_width: usize,
    pub activation: Activation,
}

impl PredictorConfig {
    pub fn new(gcn_layers: usize, hidden_width: usize, input_width: usize) -> Result<Self, PredictorError> {
        if gcn_layers == 0 || hidden_width == 0 || input_width == 0 {
            return Err(PredictorError::Config(format!(
                "gcn_layers={gcn_layers}, hidden_width={hidden_width}, input_width={input_width} must all be >= 1"
            )));
        }
        Ok(Self {
            gcn_layers,
            hidden_width,
            input_width,
            activation: Activation::Relu,
        })
    }

    fn layer_shape(&self, g: usize) -> (usize, usize) {
        let rows = if g == 0 { self.input_width } else { self.hidden_width };
        (rows, self.hidden_width)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// `out (n x m) = a (n x k) * b (k x m)`, overwriting `out`.
fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    out.fill(0.0);
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out (k x m) += a^T * b` with `a: n x k`, `b: n x m`.
fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out (n x k) = a (n x m) * b^T` with `b: k x m`, overwriting `out`.
fn matmul_a_bt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// All trainable weights; also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    /// `W_1 (d x h)`, then `W_g (h x h)`.
    pub layers: Vec<Matrix>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl PredictorParams {
    pub fn zeros(config: &PredictorConfig) -> Self {
        Self {
            layers: (0..config.gcn_layers)
                .map(|g| {
                    let (r, c) = config.layer_shape(g);
                    Matrix::zeros(r, c)
                })
                .collect(),
            w_out: vec![0.0; config.hidden_width],
            b_out: 0.0,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(config: &PredictorConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        for m in &mut p.layers {
            let bound = (6.0 / (m.rows + m.cols) as f64).sqrt();
            for v in &mut m.data {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        let bound = (6.0 / (config.hidden_width + 1) as f64).sqrt();
        for v in &mut p.w_out {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn check(&self, config: &PredictorConfig) -> Result<(), PredictorError> {
        if self.layers.len() != config.gcn_layers || self.w_out.len() != config.hidden_width {
            return Err(PredictorError::Shape(format!(
                "params have {} layers / width {}, config wants {} / {}",
                self.layers.len(),
                self.w_out.len(),
                config.gcn_layers,
                config.hidden_width
            )));
        }
        for (g, m) in self.layers.iter().enumerate() {
            if (m.rows, m.cols) != config.layer_shape(g) {
                return Err(PredictorError::Shape(format!(
                    "layer {g} is {}x{}, expected {:?}",
                    m.rows,
                    m.cols,
                    config.layer_shape(g)
                )));
            }
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(|m| m.data.len()).sum::<usize>() + self.w_out.len() + 1
    }

    /// Flat view: layer weights in order, then `w_out`, then `b_out`.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|m| m.data.iter_mut())
            .chain(self.w_out.iter_mut())
            .chain(std::iter::once(&mut self.b_out))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|m| m.data.iter())
            .chain(self.w_out.iter())
            .chain(std::iter::once(&self.b_out))
    }

    fn add_scaled(&mut self, other: &PredictorParams, k: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += k * b;
        }
    }

    fn fill_zero(&mut self) {
        for v in self.values_mut() {
            *v = 0.0;
        }
    }

    /// Versioned text checkpoint storing every value as its IEEE-754 bit
    /// pattern, so a round trip is exact.
    pub fn to_checkpoint(&self, config: &PredictorConfig) -> String {
        let mut out = format!(
            "pbnas-predictor 1\nconfig {} {} {}\n",
            config.gcn_layers, config.hidden_width, config.input_width
        );
        for m in &self.layers {
            out.push_str(&format!("layer {} {}\n", m.rows, m.cols));
            out.push_str(&hex_row(&m.data));
        }
        out.push_str(&format!("out {}\n", self.w_out.len()));
        out.push_str(&hex_row(&self.w_out));
        out.push_str(&format!("bias\n{:016x}\n", self.b_out.to_bits()));
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<(PredictorConfig, Self), PredictorError> {
        let bad = |m: &str| PredictorError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("pbnas-predictor 1") {
            return Err(bad("unknown header"));
        }
        let nums = |line: Option<&str>, tag: &str| -> Result<Vec<usize>, PredictorError> {
            let line = line.ok_or_else(|| bad("truncated"))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(tag) {
                return Err(bad(&format!("expected `{tag}`")));
            }
            it.map(|t| t.parse().map_err(|_| bad("bad count"))).collect()
        };
        let values = |line: Option<&str>, n: usize| -> Result<Vec<f64>, PredictorError> {
            let line = line.ok_or_else(|| bad("truncated"))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| u64::from_str_radix(t, 16).map(f64::from_bits).map_err(|_| bad("bad value")))
                .collect::<Result<_, _>>()?;
            if v.len() != n {
                return Err(bad("wrong value count"));
            }
            Ok(v)
        };
        let c = nums(lines.next(), "config")?;
        let [g, h, d] = c[..] else {
            return Err(bad("config needs three counts"));
        };
        let config = PredictorConfig::new(g, h, d).map_err(|e| bad(&e.to_string()))?;
        let mut params = Self::zeros(&config);
        for m in &mut params.layers {
            let dims = nums(lines.next(), "layer")?;
            if dims != [m.rows, m.cols] {
                return Err(bad("layer shape mismatch"));
            }
            m.data = values(lines.next(), m.rows * m.cols)?;
        }
        if nums(lines.next(), "out")? != [h] {
            return Err(bad("output width mismatch"));
        }
        params.w_out = values(lines.next(), h)?;
        nums(lines.next(), "bias")?;
        params.b_out = values(lines.next(), 1)?[0];
        Ok((config, params))
    }
}

fn hex_row(xs: &[f64]) -> String {
    let mut s: String = xs
        .iter()
        .map(|x| format!("{:016x}", x.to_bits()))
        .collect::<Vec<_>>()
        .join(" ");
    s.push('\n');
    s
}

/// Everything the backward passes need from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub num_layers: usize,
    /// `A + I`.
    pub adjacency_tilde: Vec<f64>,
    /// Row sums of `A + I`.
    pub degree: Vec<f64>,
    /// `D^{-1/2} (A + I)`.
    pub norm: Vec<f64>,
    /// `H_0 .. H_G`; `H_0` is the feature matrix.
    pub activations: Vec<Vec<f64>>,
    /// `N H_{g-1}` per convolution.
    pub aggregated: Vec<Vec<f64>>,
    /// `N H_{g-1} W_g` per convolution.
    pub pre_activations: Vec<Vec<f64>>,
    /// Mean over layers of `H_G`.
    pub pooled: Vec<f64>,
    pub score: f64,
}

/// `D^{-1/2} (A + I)` with row-sum degrees. Also returns `A + I` and the
/// degrees.
pub fn normalize_adjacency(adjacency: &[f64], l: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut tilde = adjacency.to_vec();
    for i in 0..l {
        tilde[i * l + i] += 1.0;
    }
    let degree: Vec<f64> = (0..l).map(|i| tilde[i * l..(i + 1) * l].iter().sum()).collect();
    let mut norm = tilde.clone();
    for i in 0..l {
        let s = degree[i].sqrt().recip();
        for v in &mut norm[i * l..(i + 1) * l] {
            *v *= s;
        }
    }
    (norm, tilde, degree)
}

fn check_input(config: &PredictorConfig, adjacency: &[f64], features: &[f64], l: usize) -> Result<(), PredictorError> {
    if l == 0 || adjacency.len() != l * l || features.len() != l * config.input_width {
        return Err(PredictorError::Shape(format!(
            "adjacency of length {} and features of length {} do not match L={l}, d={}",
            adjacency.len(),
            features.len(),
            config.input_width
        )));
    }
    Ok(())
}

/// Forward pass on real-valued (possibly relaxed) matrices. Adjacency entries
/// are expected to be non-negative so every degree stays positive.
pub fn forward_relaxed(
    params: &PredictorParams,
    config: &PredictorConfig,
    adjacency: &[f64],
    features: &[f64],
    num_layers: usize,
) -> Result<ForwardCache, PredictorError> {
    params.check(config)?;
    check_input(config, adjacency, features, num_layers)?;
    let l = num_layers;
    let h = config.hidden_width;
    let (norm, adjacency_tilde, degree) = normalize_adjacency(adjacency, l);
    let mut activations = vec![features.to_vec()];
    let mut aggregated = Vec::with_capacity(config.gcn_layers);
    let mut pre_activations = Vec::with_capacity(config.gcn_layers);
    for w in &params.layers {
        let k = w.rows;
        let input = activations.last().expect("at least the input");
        let mut m = vec![0.0; l * k];
        matmul(&norm, input, &mut m, l, l, k);
        let mut z = vec![0.0; l * h];
        matmul(&m, &w.data, &mut z, l, k, h);
        let act: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        aggregated.push(m);
        pre_activations.push(z);
        activations.push(act);
    }
    let last = activations.last().expect("at least one layer");
    let mut pooled = vec![0.0; h];
    for row in last.chunks(h) {
        for (p, &v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    for p in &mut pooled {
        *p /= l as f64;
    }
    let score = pooled.iter().zip(&params.w_out).map(|(a, b)| a * b).sum::<f64>() + params.b_out;
    Ok(ForwardCache {
        num_layers: l,
        adjacency_tilde,
        degree,
        norm,
        activations,
        aggregated,
        pre_activations,
        pooled,
        score,
    })
}

pub fn forward(
    params: &PredictorParams,
    config: &PredictorConfig,
    arch: &Architecture,
) -> Result<ForwardCache, PredictorError> {
    if arch.num_ops() != config.input_width {
        return Err(PredictorError::Shape(format!(
            "architecture has d={}, predictor expects {}",
            arch.num_ops(),
            config.input_width
        )));
    }
    forward_relaxed(
        params,
        config,
        &arch.adjacency_f64(),
        &arch.features_f64(),
        arch.num_layers(),
    )
}

/// Gradients of `upstream * score` with respect to the relaxed inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradients {
    /// `L x L`, every entry (diagonal and lower triangle included).
    pub adjacency: Vec<f64>,
    /// `L x d`.
    pub features: Vec<f64>,
}

fn check_cache(cache: &ForwardCache, params: &PredictorParams, config: &PredictorConfig) -> Result<(), PredictorError> {
    params.check(config)?;
    let l = cache.num_layers;
    let ok = cache.pre_activations.len() == config.gcn_layers
        && cache.activations.len() == config.gcn_layers + 1
        && cache.pooled.len() == config.hidden_width
        && cache.norm.len() == l * l
        && cache.activations[0].len() == l * config.input_width;
    if ok {
        Ok(())
    } else {
        Err(PredictorError::Shape("cache does not match params/config".into()))
    }
}

fn backward(
    cache: &ForwardCache,
    params: &PredictorParams,
    config: &PredictorConfig,
    upstream: f64,
    grads: Option<&mut PredictorParams>,
    want_inputs: bool,
) -> Result<Option<InputGradients>, PredictorError> {
    check_cache(cache, params, config)?;
    let l = cache.num_layers;
    let h = config.hidden_width;
    let mut grads = grads;
    if let Some(g) = grads.as_deref_mut() {
        for (gw, p) in g.w_out.iter_mut().zip(&cache.pooled) {
            *gw += upstream * p;
        }
        g.b_out += upstream;
    }
    // d score / d H_G: each row gets w_out / L
    let mut d_act: Vec<f64> = (0..l)
        .flat_map(|_| params.w_out.iter().map(|&w| upstream * w / l as f64))
        .collect();
    let mut d_norm = if want_inputs { vec![0.0; l * l] } else { Vec::new() };
    for g in (0..config.gcn_layers).rev() {
        let w = &params.layers[g];
        let k = w.rows;
        let z = &cache.pre_activations[g];
        let d_z: Vec<f64> = d_act
            .iter()
            .zip(z)
            .map(|(&d, &zv)| if zv > 0.0 { d } else { 0.0 })
            .collect();
        if let Some(gr) = grads.as_deref_mut() {
            matmul_at_b_acc(&cache.aggregated[g], &d_z, &mut gr.layers[g].data, l, k, h);
        }
        if g == 0 && !want_inputs {
            break;
        }
        if want_inputs {
            // Z = N (H W): dN += dZ (H W)^T
            let mut hw = vec![0.0; l * h];
            matmul(&cache.activations[g], &w.data, &mut hw, l, k, h);
            let mut dn = vec![0.0; l * l];
            matmul_a_bt(&d_z, &hw, &mut dn, l, h, l);
            for (a, b) in d_norm.iter_mut().zip(&dn) {
                *a += b;
            }
        }
        // dM = dZ W^T, dH_{g-1} = N^T dM
        let mut d_m = vec![0.0; l * k];
        matmul_a_bt(&d_z, &w.data, &mut d_m, l, h, k);
        let mut d_prev = vec![0.0; l * k];
        matmul_at_b_acc(&cache.norm, &d_m, &mut d_prev, l, l, k);
        d_act = d_prev;
    }
    if !want_inputs {
        return Ok(None);
    }
    // N_ij = At_ij * deg_i^{-1/2}, deg_i = sum_j At_ij
    let mut d_adj = vec![0.0; l * l];
    for i in 0..l {
        let deg = cache.degree[i];
        let inv_sqrt = deg.sqrt().recip();
        let row = i * l..(i + 1) * l;
        let coupling: f64 = d_norm[row.clone()]
            .iter()
            .zip(&cache.adjacency_tilde[row.clone()])
            .map(|(d, a)| d * a)
            .sum::<f64>()
            * (-0.5)
            * inv_sqrt
            / deg;
        for j in 0..l {
            d_adj[i * l + j] = d_norm[i * l + j] * inv_sqrt + coupling;
        }
    }
    Ok(Some(InputGradients {
        adjacency: d_adj,
        features: d_act,
    }))
}

/// Exact gradient of `upstream * score` with respect to every parameter.
pub fn backward_params(
    cache: &ForwardCache,
    params: &PredictorParams,
    config: &PredictorConfig,
    upstream: f64,
) -> Result<PredictorParams, PredictorError> {
    let mut g = PredictorParams::zeros(config);
    backward(cache, params, config, upstream, Some(&mut g), false)?;
    Ok(g)
}

/// Exact gradient of `upstream * score` with respect to the relaxed
/// adjacency and feature matrices, differentiating through the degree
/// normalization.
pub fn backward_inputs(
    cache: &ForwardCache,
    params: &PredictorParams,
    config: &PredictorConfig,
    upstream: f64,
) -> Result<InputGradients, PredictorError> {
    Ok(backward(cache, params, config, upstream, None, true)?.expect("inputs requested"))
}

/// Reusable buffers for cache-free scoring.
struct Scratch {
    norm: Vec<f64>,
    cur: Vec<f64>,
    agg: Vec<f64>,
    next: Vec<f64>,
}

impl Scratch {
    fn new() -> Self {
        Self {
            norm: Vec::new(),
            cur: Vec::new(),
            agg: Vec::new(),
            next: Vec::new(),
        }
    }

    fn score(&mut self, params: &PredictorParams, config: &PredictorConfig, arch: &Architecture) -> f64 {
        let l = arch.num_layers();
        let h = config.hidden_width;
        let adj = arch.adjacency();
        self.norm.clear();
        for i in 0..l {
            let row = &adj[i * l..(i + 1) * l];
            let deg = 1.0 + row.iter().map(|&b| b as f64).sum::<f64>();
            let s = deg.sqrt().recip();
            self.norm
                .extend(row.iter().enumerate().map(|(j, &b)| (b as f64 + u8::from(i == j) as f64) * s));
        }
        self.cur.clear();
        self.cur.extend(arch.features().iter().map(|&b| b as f64));
        for w in &params.layers {
            let k = w.rows;
            self.agg.resize(l * k, 0.0);
            matmul(&self.norm, &self.cur, &mut self.agg, l, l, k);
            self.next.resize(l * h, 0.0);
            matmul(&self.agg, &w.data, &mut self.next, l, k, h);
            for v in &mut self.next {
                *v = v.max(0.0);
            }
            std::mem::swap(&mut self.cur, &mut self.next);
        }
        let mut s = 0.0;
        for row in self.cur.chunks(h) {
            s += row.iter().zip(&params.w_out).map(|(a, b)| a * b).sum::<f64>();
        }
        s / l as f64 + params.b_out
    }
}

/// Score of a single architecture without keeping a cache.
pub fn score(params: &PredictorParams, config: &PredictorConfig, arch: &Architecture) -> f64 {
    Scratch::new().score(params, config, arch)
}

/// Scores a list in order. Work is spread over the current rayon pool; the
/// output does not depend on the thread count.
pub fn score_set(params: &PredictorParams, config: &PredictorConfig, archs: &[Architecture]) -> Vec<f64> {
    archs
        .par_iter()
        .with_min_len(256)
        .map_init(Scratch::new, |s, a| s.score(params, config, a))
        .collect()
}

/// Softplus `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise cross-entropy for `p(y = 1) = s(score_i - score_j)`.
/// Returns `(loss, dL/dscore_i, dL/dscore_j)`.
pub fn pairwise_loss(score_i: f64, score_j: f64, y: bool) -> (f64, f64, f64) {
    let delta = score_i - score_j;
    let (loss, target) = if y {
        (softplus(-delta), 1.0)
    } else {
        (softplus(delta), 0.0)
    };
    let g = sigmoid(delta) - target;
    (loss, g, -g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Upper bound on ordered pairs drawn per epoch.
    pub pairs_per_epoch: usize,
    pub batch_pairs: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 0.01,
            momentum: 0.9,
            pairs_per_epoch: 512,
            batch_pairs: 64,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn check(&self) -> Result<(), PredictorError> {
        if self.epochs == 0 || self.pairs_per_epoch == 0 || self.batch_pairs == 0 {
            return Err(PredictorError::Config(
                "epochs, pairs_per_epoch and batch_pairs must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(PredictorError::Config(format!(
                "need lr > 0 and 0 <= momentum < 1, got lr={} momentum={}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to zero at the last step.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / (total_steps - 1) as f64).cos())
}

/// Per-step and per-epoch mean pair losses recorded during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "mean_pair_loss"])?;
        for (e, loss) in self.epoch_losses.iter().enumerate() {
            w.write_record([e.to_string(), loss.to_string()])?;
        }
        w.flush()
    }
}

/// Trains on `(architecture, mean validation error)` pairs, starting from
/// `params`. Fully determined by `hyper.seed`.
pub fn train(
    mut params: PredictorParams,
    config: &PredictorConfig,
    hyper: &TrainHyper,
    train_set: &[(Architecture, f64)],
) -> Result<(PredictorParams, TrainLog), PredictorError> {
    params.check(config)?;
    hyper.check()?;
    let n = train_set.len();
    if n < 2 {
        return Err(PredictorError::TooFewExamples);
    }
    let first = train_set[0].1;
    if train_set.iter().all(|(_, e)| *e == first) {
        return Err(PredictorError::NoRankingSignal);
    }
    let inputs: Vec<(Vec<f64>, Vec<f64>, usize)> = train_set
        .iter()
        .map(|(a, _)| {
            if a.num_ops() != config.input_width {
                return Err(PredictorError::Shape(format!(
                    "training architecture has d={}, predictor expects {}",
                    a.num_ops(),
                    config.input_width
                )));
            }
            Ok((a.adjacency_f64(), a.features_f64(), a.num_layers()))
        })
        .collect::<Result<_, _>>()?;

    let total_pairs = n * (n - 1);
    let per_epoch = hyper.pairs_per_epoch.min(total_pairs);
    let steps_per_epoch = per_epoch.div_ceil(hyper.batch_pairs);
    let total_steps = hyper.epochs * steps_per_epoch;

    let mut rng = rng_from_seed(hyper.seed);
    let mut velocity = PredictorParams::zeros(config);
    let mut grad = PredictorParams::zeros(config);
    let mut slot: Vec<Option<usize>> = vec![None; n];
    let mut caches: Vec<ForwardCache> = Vec::new();
    let mut members: Vec<usize> = Vec::new();
    let mut upstream: Vec<f64> = Vec::new();
    let mut log = TrainLog::default();
    let mut step = 0;

    for _ in 0..hyper.epochs {
        let picks = index::sample(&mut rng, total_pairs, per_epoch).into_vec();
        let mut epoch_loss = 0.0;
        let mut epoch_pairs = 0usize;
        for batch in picks.chunks(hyper.batch_pairs) {
            let pairs: Vec<(usize, usize, bool)> = batch
                .iter()
                .filter_map(|&idx| {
                    let i = idx / (n - 1);
                    let r = idx % (n - 1);
                    let j = if r < i { r } else { r + 1 };
                    let (ei, ej) = (train_set[i].1, train_set[j].1);
                    (ei != ej).then_some((i, j, ei < ej))
                })
                .collect();
            let lr = cosine_lr(hyper.lr, step, total_steps);
            log.learning_rates.push(lr);
            step += 1;
            if pairs.is_empty() {
                log.step_losses.push(f64::NAN);
                continue;
            }
            for &m in &members {
                slot[m] = None;
            }
            members.clear();
            caches.clear();
            upstream.clear();
            for &(i, j, _) in &pairs {
                for idx in [i, j] {
                    if slot[idx].is_none() {
                        slot[idx] = Some(members.len());
                        members.push(idx);
                        let (adj, feat, l) = &inputs[idx];
                        caches.push(forward_relaxed(&params, config, adj, feat, *l)?);
                        upstream.push(0.0);
                    }
                }
            }
            let inv = 1.0 / pairs.len() as f64;
            let mut batch_loss = 0.0;
            for &(i, j, y) in &pairs {
                let (si, sj) = (slot[i].expect("slotted"), slot[j].expect("slotted"));
                let (loss, gi, gj) = pairwise_loss(caches[si].score, caches[sj].score, y);
                batch_loss += loss;
                upstream[si] += gi * inv;
                upstream[sj] += gj * inv;
            }
            grad.fill_zero();
            for (cache, &u) in caches.iter().zip(&upstream) {
                if u != 0.0 {
                    backward(cache, &params, config, u, Some(&mut grad), false)?;
                }
            }
            // v <- momentum * v + g ; theta <- theta - lr * v
            for (v, g) in velocity.values_mut().zip(grad.values()) {
                *v = hyper.momentum * *v + g;
            }
            params.add_scaled(&velocity, -lr);
            log.step_losses.push(batch_loss * inv);
            epoch_loss += batch_loss;
            epoch_pairs += pairs.len();
        }
        log.epoch_losses.push(if epoch_pairs > 0 {
            epoch_loss / epoch_pairs as f64
        } else {
            f64::NAN
        });
    }
    Ok((params, log))
}

/// Kendall rank correlation (tau-a) between two equally long sequences.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    assert_eq!(n, ys.len(), "kendall_tau needs equal lengths");
    let mut s = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = (xs[i] - xs[j]).signum() as i64 * ((xs[i] - xs[j]) != 0.0) as i64;
            let b = (ys[i] - ys[j]).signum() as i64 * ((ys[i] - ys[j]) != 0.0) as i64;
            s += a * b;
        }
    }
    s as f64 / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_space::{random_architecture, SpaceSpec};
    use crate::seeding::rng_from_seed;

    fn small() -> PredictorConfig {
        PredictorConfig::new(2, 4, 3).unwrap()
    }

    #[test]
    fn normalization_of_empty_graph_is_identity() {
        let (n, _, d) = normalize_adjacency(&[0.0; 9], 3);
        assert_eq!(n, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(d, vec![1.0; 3]);
    }

    #[test]
    fn normalization_of_two_node_chain() {
        let (n, _, _) = normalize_adjacency(&[0.0, 1.0, 0.0, 0.0], 2);
        let r = 0.5f64.sqrt();
        assert!((n[0] - r).abs() < 1e-15 && (n[1] - r).abs() < 1e-15);
        assert_eq!(&n[2..], &[0.0, 1.0]);
    }

    #[test]
    fn normalized_rows_sum_to_root_degree() {
        let spec = SpaceSpec::new(6, 2, 0, true).unwrap();
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let a = random_architecture(&spec, &mut rng).unwrap();
            let (n, _, deg) = normalize_adjacency(&a.adjacency_f64(), 6);
            for i in 0..6 {
                let s: f64 = n[i * 6..(i + 1) * 6].iter().sum();
                assert!((s - deg[i].sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_score_is_bias() {
        let cfg = small();
        let mut p = PredictorParams::zeros(&cfg);
        p.b_out = 0.75;
        let spec = SpaceSpec::new(5, 3, 0, true).unwrap();
        let mut rng = rng_from_seed(1);
        for _ in 0..10 {
            let a = random_architecture(&spec, &mut rng).unwrap();
            assert_eq!(forward(&p, &cfg, &a).unwrap().score, 0.75);
            assert_eq!(score(&p, &cfg, &a), 0.75);
        }
    }

    #[test]
    fn single_node_hand_calculation() {
        // L=1, d=1, one 1x1 convolution: N = [1], H1 = relu(x * w),
        // pooled = H1, score = w_out * pooled + b.
        let cfg = PredictorConfig::new(1, 1, 1).unwrap();
        let p = PredictorParams {
            layers: vec![Matrix { rows: 1, cols: 1, data: vec![2.0] }],
            w_out: vec![-1.5],
            b_out: 0.25,
        };
        let c = forward_relaxed(&p, &cfg, &[0.0], &[0.5], 1).unwrap();
        assert_eq!(c.score, -1.5 * (0.5 * 2.0) + 0.25);
        let c = forward_relaxed(&p, &cfg, &[0.0], &[-0.5], 1).unwrap();
        assert_eq!(c.score, 0.25);
    }

    #[test]
    fn cached_and_scratch_scores_agree() {
        let cfg = PredictorConfig::new(3, 8, 3).unwrap();
        let spec = SpaceSpec::new(5, 3, 0, true).unwrap();
        let mut rng = rng_from_seed(2);
        let p = PredictorParams::init(&cfg, &mut rng);
        let archs: Vec<_> = (0..50).map(|_| random_architecture(&spec, &mut rng).unwrap()).collect();
        let scores = score_set(&p, &cfg, &archs);
        for (a, s) in archs.iter().zip(&scores) {
            let c = forward(&p, &cfg, a).unwrap();
            assert!((c.score - s).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn shape_errors() {
        let cfg = small();
        let p = PredictorParams::zeros(&cfg);
        let a = Architecture::from_edges(2, 1, &[(0, 1)], &[0, 0]).unwrap();
        assert!(matches!(forward(&p, &cfg, &a), Err(PredictorError::Shape(_))));
        let other = PredictorConfig::new(3, 4, 3).unwrap();
        assert!(matches!(
            forward_relaxed(&p, &other, &[0.0; 4], &[0.0; 6], 2),
            Err(PredictorError::Shape(_))
        ));
        let spec = SpaceSpec::new(4, 3, 0, true).unwrap();
        let arch = random_architecture(&spec, &mut rng_from_seed(0)).unwrap();
        let cache = forward(&p, &cfg, &arch).unwrap();
        let bigger = PredictorConfig::new(2, 5, 3).unwrap();
        assert!(backward_params(&cache, &PredictorParams::zeros(&bigger), &bigger, 1.0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small();
        let mut rng = rng_from_seed(5);
        let p = PredictorParams::init(&cfg, &mut rng);
        let spec = SpaceSpec::new(4, 3, 0, true).unwrap();
        let a = random_architecture(&spec, &mut rng).unwrap();
        let c = forward(&p, &cfg, &a).unwrap();
        let g = backward_params(&c, &p, &cfg, 0.0).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
        let gi = backward_inputs(&c, &p, &cfg, 0.0).unwrap();
        assert!(gi.adjacency.iter().chain(&gi.features).all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_upstream() {
        let cfg = small();
        let mut rng = rng_from_seed(6);
        let p = PredictorParams::init(&cfg, &mut rng);
        let spec = SpaceSpec::new(4, 3, 0, true).unwrap();
        let a = random_architecture(&spec, &mut rng).unwrap();
        let c = forward(&p, &cfg, &a).unwrap();
        assert_eq!(backward_params(&c, &p, &cfg, -2.5).unwrap().b_out, -2.5);
    }

    #[test]
    fn zero_weights_give_zero_input_gradients() {
        let cfg = small();
        let p = PredictorParams::zeros(&cfg);
        let c = forward_relaxed(&p, &cfg, &[0.0, 0.3, 0.0, 0.0], &[0.2, 0.5, 0.3, 0.1, 0.1, 0.8], 2).unwrap();
        let g = backward_inputs(&c, &p, &cfg, 1.0).unwrap();
        assert!(g.adjacency.iter().chain(&g.features).all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_input_has_symmetric_feature_gradient() {
        // nodes 1 and 2 are interchangeable: 0 -> {1, 2} -> 3, same op on 1 and 2
        let cfg = PredictorConfig::new(3, 6, 2).unwrap();
        let p = PredictorParams::init(&cfg, &mut rng_from_seed(8));
        let a = Architecture::from_edges(4, 2, &[(0, 1), (0, 2), (1, 3), (2, 3)], &[0, 1, 1, 0]).unwrap();
        let c = forward(&p, &cfg, &a).unwrap();
        let g = backward_inputs(&c, &p, &cfg, 1.0).unwrap();
        for k in 0..2 {
            assert!((g.features[2 + k] - g.features[4 + k]).abs() < 1e-12);
        }
        assert!((g.adjacency[1] - g.adjacency[2]).abs() < 1e-12);
        assert!((g.adjacency[7] - g.adjacency[11]).abs() < 1e-12);
    }

    #[test]
    fn loss_reference_values() {
        let (l, gi, gj) = pairwise_loss(0.3, 0.3, true);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((gi + 0.5).abs() < 1e-15 && (gj - 0.5).abs() < 1e-15);
        let (l, _, _) = pairwise_loss(1.0, 0.0, true);
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.313262).abs() < 1e-6);
        let (l, _, _) = pairwise_loss(1.0, 0.0, false);
        assert!((l - (1.0 + 1.0f64.exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_is_overflow_safe() {
        let (l, gi, _) = pairwise_loss(800.0, 0.0, true);
        assert_eq!(l, 0.0);
        assert_eq!(gi, 0.0);
        let (l, gi, _) = pairwise_loss(-800.0, 0.0, true);
        assert_eq!(l, 800.0);
        assert_eq!(gi, -1.0);
        let (l, _, _) = pairwise_loss(60.0, 0.0, false);
        assert!((l - 60.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_shape() {
        let total = 100;
        assert_eq!(cosine_lr(0.01, 0, total), 0.01);
        assert!(cosine_lr(0.01, total - 1, total) <= 0.01 * 1e-3);
        for s in 1..total {
            assert!(cosine_lr(0.01, s, total) <= cosine_lr(0.01, s - 1, total));
        }
        assert_eq!(cosine_lr(0.01, 0, 1), 0.01);
    }

    #[test]
    fn train_rejects_degenerate_sets() {
        let cfg = small();
        let spec = SpaceSpec::new(4, 3, 0, true).unwrap();
        let mut rng = rng_from_seed(0);
        let a = random_architecture(&spec, &mut rng).unwrap();
        let b = random_architecture(&spec, &mut rng).unwrap();
        let p = PredictorParams::zeros(&cfg);
        let hyper = TrainHyper { epochs: 1, ..TrainHyper::default() };
        assert_eq!(
            train(p.clone(), &cfg, &hyper, &[(a.clone(), 0.1)]).unwrap_err(),
            PredictorError::TooFewExamples
        );
        assert_eq!(
            train(p, &cfg, &hyper, &[(a, 0.1), (b, 0.1)]).unwrap_err(),
            PredictorError::NoRankingSignal
        );
    }

    #[test]
    fn two_architectures_get_ordered() {
        let cfg = PredictorConfig::new(3, 16, 3).unwrap();
        let spec = SpaceSpec::new(5, 3, 0, true).unwrap();
        let mut rng = rng_from_seed(21);
        let a = random_architecture(&spec, &mut rng).unwrap();
        let mut b = random_architecture(&spec, &mut rng).unwrap();
        while b == a {
            b = random_architecture(&spec, &mut rng).unwrap();
        }
        let p = PredictorParams::init(&cfg, &mut rng);
        let hyper = TrainHyper { epochs: 500, seed: 4, ..TrainHyper::default() };
        // b is better (lower error) so it must end with the higher score
        let (p, _) = train(p, &cfg, &hyper, &[(a.clone(), 0.4), (b.clone(), 0.1)]).unwrap();
        assert!(score(&p, &cfg, &b) > score(&p, &cfg, &a));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = PredictorConfig::new(3, 5, 4).unwrap();
        let p = PredictorParams::init(&cfg, &mut rng_from_seed(77));
        let text = p.to_checkpoint(&cfg);
        let (c2, p2) = PredictorParams::from_checkpoint(&text).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, p);
        assert!(PredictorParams::from_checkpoint("nope").is_err());
        assert!(PredictorParams::from_checkpoint(&text.replace("layer 5 5", "layer 5 4")).is_err());
    }

    #[test]
    fn kendall_tau_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x), 1.0);
        assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]), -1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]), 1.0 / 3.0);
    }

    #[test]
    fn score_set_handles_empty_and_duplicates() {
        let cfg = small();
        let p = PredictorParams::init(&cfg, &mut rng_from_seed(1));
        assert!(score_set(&p, &cfg, &[]).is_empty());
        let spec = SpaceSpec::new(4, 3, 0, true).unwrap();
        let a = random_architecture(&spec, &mut rng_from_seed(2)).unwrap();
        let s = score_set(&p, &cfg, &[a.clone(), a]);
        assert_eq!(s[0], s[1]);
    }
}
