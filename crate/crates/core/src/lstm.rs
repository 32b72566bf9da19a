//! Stacked LSTM regressor trained from scratch.
//!
//! Gates are stored stacked in the order input, forget, output, candidate,
//! so a layer with hidden size `h` holds `W: 4h × d_in`, `U: 4h × h` and
//! `b: 4h`. A batch is processed as matrices with one column per window and
//! time blocks laid side by side: column `t·B + j` is step `t` of window `j`.
//!
//! Gradients are reduced over fixed-size chunks of a batch in chunk order,
//! and each chunk draws its dropout masks from its own seeded stream, so
//! results are identical for any thread count.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cva::Standardizer;
use crate::error::{Error, Result};
use crate::labeling::WindowedDataset;

/// Windows per gradient chunk.
pub const CHUNK_SIZE: usize = 16;
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    pub hidden: usize,
    #[serde(with = "crate::linalg::matrix_serde")]
    pub w: DMatrix<f64>,
    #[serde(with = "crate::linalg::matrix_serde")]
    pub u: DMatrix<f64>,
    pub b: Vec<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            hidden,
            w: DMatrix::zeros(4 * hidden, input_dim),
            u: DMatrix::zeros(4 * hidden, hidden),
            b: vec![0.0; 4 * hidden],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn input_weights(&self, gate: Gate) -> DMatrix<f64> {
        self.w.rows(gate as usize * self.hidden, self.hidden).into_owned()
    }

    pub fn recurrent_weights(&self, gate: Gate) -> DMatrix<f64> {
        self.u.rows(gate as usize * self.hidden, self.hidden).into_owned()
    }

    pub fn bias(&self, gate: Gate) -> &[f64] {
        let h = self.hidden;
        &self.b[gate as usize * h..(gate as usize + 1) * h]
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden;
        if self.w.nrows() != 4 * h || self.u.shape() != (4 * h, h) || self.b.len() != 4 * h {
            return Err(Error::Shape {
                expected: format!("stacked gate parameters for hidden size {h}"),
                got: format!(
                    "W {:?}, U {:?}, b {}",
                    self.w.shape(),
                    self.u.shape(),
                    self.b.len()
                ),
            });
        }
        Ok(())
    }
}

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LstmLayerParams>,
    pub head_w: DVector<f64>,
    pub head_b: f64,
}

impl Gradients {
    fn zeros_like(model: &LstmRegressor) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LstmLayerParams::zeros(l.input_dim(), l.hidden))
                .collect(),
            head_w: DVector::zeros(model.head_w.len()),
            head_b: 0.0,
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.u.as_slice());
            out.push(&l.b);
        }
        out.push(self.head_w.as_slice());
        out.push(std::slice::from_ref(&self.head_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.u.as_mut_slice());
            out.push(&mut l.b);
        }
        out.push(self.head_w.as_mut_slice());
        out.push(std::slice::from_mut(&mut self.head_b));
        out
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmRegressor {
    pub layers: Vec<LstmLayerParams>,
    /// One ratio per gap between consecutive layers.
    pub dropout_ratios: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
    /// Outputs are `output_scale · (w·h + b)`; training sets it to the label cap.
    pub output_scale: f64,
    pub seed: u64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LayerCache {
    /// Layer input after dropout, `d × LB`.
    x: DMatrix<f64>,
    /// Activated gates, `4h × LB`.
    gates: DMatrix<f64>,
    c: DMatrix<f64>,
    tanh_c: DMatrix<f64>,
    h: DMatrix<f64>,
}

/// Activations kept from a batched forward pass for backpropagation.
pub struct ForwardCache {
    batch: usize,
    steps: usize,
    layers: Vec<LayerCache>,
    /// Scaled dropout masks feeding layer `i + 1`.
    masks: Vec<Option<DMatrix<f64>>>,
}

impl LstmRegressor {
    /// Uniform `[−1/√h, 1/√h]` weights, zero biases except the forget gate.
    pub fn new(input_dim: usize, hidden_sizes: &[usize], dropout_ratios: &[f64], seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_sizes.is_empty() || hidden_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "invalid architecture: input {input_dim}, hidden {hidden_sizes:?}"
            )));
        }
        if dropout_ratios.len() != hidden_sizes.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers need {} dropout ratios, got {}",
                hidden_sizes.len(),
                hidden_sizes.len() - 1,
                dropout_ratios.len()
            )));
        }
        if dropout_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config(format!("dropout ratios {dropout_ratios:?} must lie in [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden_sizes.len());
        let mut d = input_dim;
        for &h in hidden_sizes {
            let bound = 1.0 / (h as f64).sqrt();
            let mut l = LstmLayerParams::zeros(d, h);
            for v in l.w.iter_mut().chain(l.u.iter_mut()) {
                *v = rng.random_range(-bound..=bound);
            }
            l.b[h..2 * h].fill(FORGET_BIAS_INIT);
            layers.push(l);
            d = h;
        }
        let bound = 1.0 / (d as f64).sqrt();
        let head_w = (0..d).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Self {
            layers,
            dropout_ratios: dropout_ratios.to_vec(),
            head_w,
            head_b: 0.0,
            output_scale: 1.0,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.hidden).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.u.len() + l.b.len())
            .sum::<usize>()
            + self.head_w.len()
            + 1
    }

    /// Shape and finiteness checks.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        if self.dropout_ratios.len() + 1 != self.layers.len() {
            return Err(Error::Config("dropout count must be layer count − 1".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.check()?;
            if i > 0 && l.input_dim() != self.layers[i - 1].hidden {
                return Err(Error::Shape {
                    expected: format!("layer {i} input {}", self.layers[i - 1].hidden),
                    got: format!("{}", l.input_dim()),
                });
            }
        }
        if self.head_w.len() != self.layers.last().map_or(0, |l| l.hidden) {
            return Err(Error::Shape {
                expected: "head width equal to the top hidden size".into(),
                got: format!("{}", self.head_w.len()),
            });
        }
        if self.param_slices().iter().any(|t| t.iter().any(|v| !v.is_finite())) || !self.output_scale.is_finite() {
            return Err(Error::Numeric("model has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.u.as_slice());
            out.push(&l.b);
        }
        out.push(&self.head_w);
        out.push(std::slice::from_ref(&self.head_b));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.u.as_mut_slice());
            out.push(&mut l.b);
        }
        out.push(&mut self.head_w);
        out.push(std::slice::from_mut(&mut self.head_b));
        out
    }

    fn steps_of(&self, windows: &[&[f64]]) -> Result<usize> {
        let m = self.input_dim();
        let first = windows.first().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
        if first.is_empty() || first.len() % m != 0 {
            return Err(Error::Shape {
                expected: format!("a multiple of {m} values per window"),
                got: format!("{}", first.len()),
            });
        }
        if let Some(w) = windows.iter().find(|w| w.len() != first.len()) {
            return Err(Error::Shape {
                expected: format!("{} values per window", first.len()),
                got: format!("{}", w.len()),
            });
        }
        Ok(first.len() / m)
    }

    /// Batched forward pass. Dropout is applied only when `dropout_rng` is given.
    pub fn forward_batch(&self, windows: &[&[f64]], mut dropout_rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<f64>, ForwardCache)> {
        let steps = self.steps_of(windows)?;
        let bsz = windows.len();
        let m = self.input_dim();
        let mut x = DMatrix::zeros(m, steps * bsz);
        for (j, w) in windows.iter().enumerate() {
            for t in 0..steps {
                let col = t * bsz + j;
                x.column_mut(col).copy_from_slice(&w[t * m..(t + 1) * m]);
            }
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.dropout_ratios.len());
        for (li, p) in self.layers.iter().enumerate() {
            let cache = layer_forward(p, x, steps, bsz, li)?;
            if li + 1 < self.layers.len() {
                let ratio = self.dropout_ratios[li];
                let mut next = cache.h.clone();
                match dropout_rng.as_deref_mut() {
                    Some(rng) if ratio > 0.0 => {
                        let keep = 1.0 / (1.0 - ratio);
                        let mask = DMatrix::from_fn(next.nrows(), next.ncols(), |_, _| {
                            if rng.random::<f64>() < ratio {
                                0.0
                            } else {
                                keep
                            }
                        });
                        next.component_mul_assign(&mask);
                        masks.push(Some(mask));
                    }
                    _ => masks.push(None),
                }
                x = next;
            } else {
                x = DMatrix::zeros(0, 0);
            }
            layers.push(cache);
        }
        let top = layers.last().expect("at least one layer");
        let last = top.h.columns((steps - 1) * bsz, bsz);
        let y: Vec<f64> = last
            .column_iter()
            .map(|c| self.output_scale * (c.iter().zip(&self.head_w).map(|(a, b)| a * b).sum::<f64>() + self.head_b))
            .collect();
        if let Some(j) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite output for window {j}")));
        }
        Ok((y, ForwardCache { batch: bsz, steps, layers, masks }))
    }

    /// Single-window forward pass.
    pub fn forward(&self, window: &[f64], dropout_rng: Option<&mut ChaCha8Rng>) -> Result<(f64, ForwardCache)> {
        let (y, cache) = self.forward_batch(&[window], dropout_rng)?;
        Ok((y[0], cache))
    }

    /// Sum of squared errors over the batch and its parameter gradients.
    fn sse_and_gradients(&self, windows: &[&[f64]], targets: &[f64], dropout_rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Gradients)> {
        let (y, cache) = self.forward_batch(windows, dropout_rng)?;
        let bsz = cache.batch;
        let steps = cache.steps;
        let resid: Vec<f64> = y.iter().zip(targets).map(|(a, b)| a - b).collect();
        let sse = resid.iter().map(|r| r * r).sum();

        let mut grads = Gradients::zeros_like(self);
        // d sse / d (w·h + b) per window.
        let dz: Vec<f64> = resid.iter().map(|r| 2.0 * r * self.output_scale).collect();
        let top = cache.layers.last().expect("at least one layer");
        let h_top = self.layers.last().expect("at least one layer").hidden;
        let mut dh = DMatrix::zeros(h_top, steps * bsz);
        for j in 0..bsz {
            let col = (steps - 1) * bsz + j;
            for k in 0..h_top {
                grads.head_w[k] += dz[j] * top.h[(k, col)];
                dh[(k, col)] = dz[j] * self.head_w[k];
            }
            grads.head_b += dz[j];
        }
        for li in (0..self.layers.len()).rev() {
            let dx = layer_backward(&self.layers[li], &cache.layers[li], dh, steps, bsz, &mut grads.layers[li]);
            if li > 0 {
                dh = match &cache.masks[li - 1] {
                    Some(mask) => dx.component_mul(mask),
                    None => dx,
                };
            } else {
                dh = dx;
            }
        }
        let _ = dh;
        if grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok((sse, grads))
    }

    /// Mean squared error over the batch and its exact gradient. Dropout is
    /// active when `dropout_seed` is given; each chunk of [`CHUNK_SIZE`]
    /// windows draws masks from a stream derived from that seed.
    pub fn loss_and_gradients(&self, windows: &[&[f64]], targets: &[f64], dropout_seed: Option<u64>) -> Result<(f64, Gradients)> {
        if windows.is_empty() || windows.len() != targets.len() {
            return Err(Error::Shape {
                expected: format!("{} targets for a nonempty batch", windows.len()),
                got: format!("{}", targets.len()),
            });
        }
        let parts: Vec<Result<(f64, Gradients)>> = windows
            .par_chunks(CHUNK_SIZE)
            .zip(targets.par_chunks(CHUNK_SIZE))
            .enumerate()
            .map(|(ci, (w, t))| {
                let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(mix(s, ci as u64)));
                self.sse_and_gradients(w, t, rng.as_mut())
            })
            .collect();
        let mut total = 0.0;
        let mut acc: Option<Gradients> = None;
        for part in parts {
            let (sse, g) = part?;
            total += sse;
            match acc.as_mut() {
                Some(a) => a.add(&g),
                None => acc = Some(g),
            }
        }
        let mut grads = acc.expect("nonempty batch");
        let n = windows.len() as f64;
        grads.scale(1.0 / n);
        Ok((total / n, grads))
    }

    /// Inference-mode outputs without clamping.
    pub fn predict_raw_batch(&self, windows: &[&[f64]]) -> Result<Vec<f64>> {
        let parts: Vec<Result<Vec<f64>>> = windows
            .par_chunks(CHUNK_SIZE)
            .map(|w| self.forward_batch(w, None).map(|(y, _)| y))
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Inference output clamped to `[0, cap]`.
    pub fn predict(&self, window: &[f64], cap: f64) -> Result<f64> {
        Ok(clamp_rul(self.forward(window, None)?.0, cap))
    }

    pub fn predict_batch(&self, windows: &[&[f64]], cap: f64) -> Result<Vec<f64>> {
        Ok(self.predict_raw_batch(windows)?.into_iter().map(|v| clamp_rul(v, cap)).collect())
    }
}

pub fn clamp_rul(y: f64, cap: f64) -> f64 {
    y.clamp(0.0, cap)
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 31)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 29)
}

fn layer_forward(p: &LstmLayerParams, x: DMatrix<f64>, steps: usize, bsz: usize, layer: usize) -> Result<LayerCache> {
    let h = p.hidden;
    let mut pre = &p.w * &x;
    for mut col in pre.column_iter_mut() {
        for (v, b) in col.iter_mut().zip(&p.b) {
            *v += b;
        }
    }
    let n = steps * bsz;
    let mut gates = DMatrix::zeros(4 * h, n);
    let mut c_all = DMatrix::zeros(h, n);
    let mut tc_all = DMatrix::zeros(h, n);
    let mut h_all = DMatrix::zeros(h, n);
    let mut h_prev = DMatrix::zeros(h, bsz);
    let mut c_prev = DMatrix::<f64>::zeros(h, bsz);
    let mut a = DMatrix::zeros(4 * h, bsz);
    for t in 0..steps {
        a.copy_from(&pre.columns(t * bsz, bsz));
        a.gemm(1.0, &p.u, &h_prev, 1.0);
        for j in 0..bsz {
            let col = t * bsz + j;
            for k in 0..h {
                let i = sigmoid(a[(k, j)]);
                let f = sigmoid(a[(h + k, j)]);
                let o = sigmoid(a[(2 * h + k, j)]);
                let g = a[(3 * h + k, j)].tanh();
                let c = f * c_prev[(k, j)] + i * g;
                let tc = c.tanh();
                let hv = o * tc;
                gates[(k, col)] = i;
                gates[(h + k, col)] = f;
                gates[(2 * h + k, col)] = o;
                gates[(3 * h + k, col)] = g;
                c_all[(k, col)] = c;
                tc_all[(k, col)] = tc;
                h_all[(k, col)] = hv;
                c_prev[(k, j)] = c;
                h_prev[(k, j)] = hv;
            }
        }
        if h_prev.iter().any(|v| !v.is_finite()) || c_prev.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activation at layer {layer}, step {}", t + 1)));
        }
    }
    Ok(LayerCache {
        x,
        gates,
        c: c_all,
        tanh_c: tc_all,
        h: h_all,
    })
}

/// Accumulates parameter gradients into `g` and returns `d loss / d x`.
fn layer_backward(
    p: &LstmLayerParams,
    cache: &LayerCache,
    dh_ext: DMatrix<f64>,
    steps: usize,
    bsz: usize,
    g: &mut LstmLayerParams,
) -> DMatrix<f64> {
    let h = p.hidden;
    let n = steps * bsz;
    let mut da_all = DMatrix::zeros(4 * h, n);
    let mut dh_next = DMatrix::<f64>::zeros(h, bsz);
    let mut dc_next = DMatrix::<f64>::zeros(h, bsz);
    let mut da = DMatrix::zeros(4 * h, bsz);
    for t in (0..steps).rev() {
        for j in 0..bsz {
            let col = t * bsz + j;
            for k in 0..h {
                let i = cache.gates[(k, col)];
                let f = cache.gates[(h + k, col)];
                let o = cache.gates[(2 * h + k, col)];
                let gg = cache.gates[(3 * h + k, col)];
                let tc = cache.tanh_c[(k, col)];
                let c_prev = if t > 0 { cache.c[(k, col - bsz)] } else { 0.0 };
                let dh = dh_ext[(k, col)] + dh_next[(k, j)];
                let dc = dc_next[(k, j)] + dh * o * (1.0 - tc * tc);
                da[(k, j)] = dc * gg * i * (1.0 - i);
                da[(h + k, j)] = dc * c_prev * f * (1.0 - f);
                da[(2 * h + k, j)] = dh * tc * o * (1.0 - o);
                da[(3 * h + k, j)] = dc * i * (1.0 - gg * gg);
                dc_next[(k, j)] = dc * f;
            }
        }
        dh_next.gemm_tr(1.0, &p.u, &da, 0.0);
        da_all.columns_mut(t * bsz, bsz).copy_from(&da);
    }
    g.w.gemm(1.0, &da_all, &cache.x.transpose(), 1.0);
    if steps > 1 {
        let da_later = da_all.columns(bsz, n - bsz);
        let h_earlier = cache.h.columns(0, n - bsz);
        g.u.gemm(1.0, &da_later, &h_earlier.transpose(), 1.0);
    }
    for (k, b) in g.b.iter_mut().enumerate() {
        *b += da_all.row(k).sum();
    }
    p.w.tr_mul(&da_all)
}

/// `s ← ρ·s + (1−ρ)·g²`, `θ ← θ − lr·g/√(s + ε)`.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], state: &mut [f64], lr: f64, decay: f64, eps: f64) {
    for ((p, g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        *s = decay * *s + (1.0 - decay) * g * g;
        *p -= lr * g / (*s + eps).sqrt();
    }
}

/// Bias-corrected Adam update; `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Rmsprop,
    Adam,
}

pub const RMSPROP_DECAY: f64 = 0.9;
pub const OPTIMIZER_EPS: f64 = 1e-8;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);

/// Per-parameter optimizer accumulators.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &LstmRegressor) -> Self {
        let zeros: Vec<Vec<f64>> = model.param_slices().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            kind,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn apply(&mut self, model: &mut LstmRegressor, grads: &Gradients, lr: f64) {
        self.step += 1;
        let gs = grads.tensors();
        for (i, p) in model.param_slices_mut().into_iter().enumerate() {
            match self.kind {
                OptimizerKind::Rmsprop => rmsprop_step(p, gs[i], &mut self.second[i], lr, RMSPROP_DECAY, OPTIMIZER_EPS),
                OptimizerKind::Adam => adam_step(
                    p,
                    gs[i],
                    &mut self.first[i],
                    &mut self.second[i],
                    self.step,
                    lr,
                    ADAM_BETAS.0,
                    ADAM_BETAS.1,
                    OPTIMIZER_EPS,
                ),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub hidden_sizes: Vec<usize>,
    pub dropout_ratios: Vec<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Targets are divided by this during training.
    pub output_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 50,
            hidden_sizes: vec![256, 128, 32],
            dropout_ratios: vec![0.2, 0.1],
            learning_rate: 0.001,
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerKind::Rmsprop,
            seed: 42,
            clip_norm: Some(5.0),
            output_scale: 130.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 || self.batch_size == 0 {
            return bad("seq_len and batch_size must be positive".into());
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad(format!("hidden_sizes {:?} must be nonempty and positive", self.hidden_sizes));
        }
        if self.dropout_ratios.len() + 1 != self.hidden_sizes.len() {
            return bad(format!(
                "{} layers need {} dropout ratios",
                self.hidden_sizes.len(),
                self.hidden_sizes.len() - 1
            ));
        }
        if self.dropout_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad(format!("dropout ratios {:?} must lie in [0, 1)", self.dropout_ratios));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return bad(format!("output_scale {} must be positive", self.output_scale));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode MSE over the epoch's batches, in target units.
    pub train_mse: f64,
    pub train_rmse: f64,
    pub clipped_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub n_windows: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Mini-batch training with per-epoch seeded shuffling. `epochs = 0`
/// returns the initialized model with an empty history.
pub fn train(data: &WindowedDataset, config: &TrainConfig) -> Result<(LstmRegressor, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if data.seq_len != config.seq_len {
        return Err(Error::Shape {
            expected: format!("windows of length {}", config.seq_len),
            got: format!("{}", data.seq_len),
        });
    }
    let mut model = LstmRegressor::new(data.n_features, &config.hidden_sizes, &config.dropout_ratios, config.seed)?;
    model.output_scale = config.output_scale;
    let mut opt = OptimizerState::new(config.optimizer, &model);
    let mut history = TrainHistory {
        config: config.clone(),
        n_windows: data.len(),
        epochs: Vec::new(),
    };
    // Optimise MSE in scaled units so the clip threshold and the optimizer
    // epsilon do not depend on the label range.
    let grad_scale = 1.0 / (config.output_scale * config.output_scale);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        let mut clipped = 0;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let windows: Vec<&[f64]> = batch.iter().map(|&i| data.window(i)).collect();
            let targets: Vec<f64> = batch.iter().map(|&i| data.targets[i]).collect();
            let dropout_seed = mix(mix(config.seed, epoch as u64), bi as u64 + 1);
            let (mse, mut grads) = model.loss_and_gradients(&windows, &targets, Some(dropout_seed))?;
            if !mse.is_finite() {
                return Err(Error::Numeric(format!("training diverged at epoch {epoch}, batch {bi}")));
            }
            sse += mse * batch.len() as f64;
            grads.scale(grad_scale);
            if let Some(c) = config.clip_norm {
                let norm = grads.norm();
                if norm > c {
                    grads.scale(c / norm);
                    clipped += 1;
                }
            }
            opt.apply(&mut model, &grads, config.learning_rate);
        }
        let train_mse = sse / data.len() as f64;
        if !train_mse.is_finite() {
            return Err(Error::Numeric(format!("training loss non-finite at epoch {epoch}")));
        }
        log::info!("epoch {epoch}/{}: train rmse {:.4}", config.epochs, train_mse.sqrt());
        history.epochs.push(EpochRecord {
            epoch,
            train_mse,
            train_rmse: train_mse.sqrt(),
            clipped_batches: clipped,
        });
    }
    model.validate()?;
    Ok((model, history))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RULLSTM1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild inputs for a model at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dataset: String,
    pub seq_len: usize,
    pub channels: Vec<String>,
    pub label_cap: f64,
    pub standardizer: Option<Standardizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    input_dim: usize,
    hidden_sizes: Vec<usize>,
    dropout_ratios: Vec<f64>,
    output_scale: f64,
    seed: u64,
    n_params: usize,
    meta: CheckpointMeta,
}

/// Magic, u32 LE header length, JSON header, then every parameter as f64 LE
/// in layer order (`W`, `U`, `b` column-major), head weights, head bias.
pub fn checkpoint_bytes(model: &LstmRegressor, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    model.validate()?;
    let header = CheckpointHeader {
        format: "rulcp-lstm".into(),
        version: CHECKPOINT_VERSION,
        input_dim: model.input_dim(),
        hidden_sizes: model.hidden_sizes(),
        dropout_ratios: model.dropout_ratios.clone(),
        output_scale: model.output_scale,
        seed: model.seed,
        n_params: model.n_params(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * header.n_params);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.param_slices() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(LstmRegressor, CheckpointMeta)> {
    let corrupt = |m: &str| Error::Integrity(format!("checkpoint: {m}"));
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
    if header.format != "rulcp-lstm" || header.version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut model = LstmRegressor::new(header.input_dim, &header.hidden_sizes, &header.dropout_ratios, header.seed)
        .map_err(|e| corrupt(&e.to_string()))?;
    model.output_scale = header.output_scale;
    let payload = &bytes[12 + hlen..];
    if model.n_params() != header.n_params || payload.len() != 8 * header.n_params {
        return Err(corrupt(&format!(
            "payload holds {} bytes, architecture needs {} parameters",
            payload.len(),
            model.n_params()
        )));
    }
    let mut vals = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in model.param_slices_mut() {
        for v in t.iter_mut() {
            *v = vals.next().expect("length checked");
        }
    }
    model.validate()?;
    Ok((model, header.meta))
}

pub fn save_checkpoint(path: &Path, model: &LstmRegressor, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(LstmRegressor, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{piecewise_rul_labels, sliding_windows};
    use rand_distr::StandardNormal;

    fn random_model(input: usize, hidden: &[usize], seed: u64, scale: f64) -> LstmRegressor {
        let mut m = LstmRegressor::new(input, hidden, &vec![0.0; hidden.len() - 1], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for t in m.param_slices_mut() {
            for v in t.iter_mut() {
                *v = scale * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        m
    }

    fn random_windows(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..len).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    fn refs(w: &[Vec<f64>]) -> Vec<&[f64]> {
        w.iter().map(|v| v.as_slice()).collect()
    }

    #[test]
    fn zero_parameters_give_head_bias() {
        let mut m = LstmRegressor::new(3, &[4, 2], &[0.3], 1).unwrap();
        for t in m.param_slices_mut() {
            t.fill(0.0);
        }
        m.head_b = 2.5;
        let (y, _) = m.forward(&[0.3; 12], None).unwrap();
        assert_eq!(y, 2.5);
    }

    #[test]
    fn single_cell_matches_hand_recurrence() {
        let mut m = LstmRegressor::new(1, &[1], &[], 0).unwrap();
        let l = &mut m.layers[0];
        // Gate order i, f, o, g.
        l.w.copy_from_slice(&[0.5, -0.3, 0.8, 0.2]);
        l.u.copy_from_slice(&[0.1, 0.4, -0.2, 0.6]);
        l.b = vec![0.05, 1.0, -0.1, 0.0];
        m.head_w = vec![1.7];
        m.head_b = -0.2;
        let xs = [0.9, -0.4];
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        for &x in &xs {
            let i = s(0.5 * x + 0.1 * h + 0.05);
            let f = s(-0.3 * x + 0.4 * h + 1.0);
            let o = s(0.8 * x - 0.2 * h - 0.1);
            let g = (0.2 * x + 0.6 * h).tanh();
            c = f * c + i * g;
            h = o * c.tanh();
        }
        let (y, _) = m.forward(&xs, None).unwrap();
        assert!((y - (1.7 * h - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn zero_dropout_train_equals_inference() {
        let m = LstmRegressor::new(3, &[5, 4], &[0.0], 7).unwrap();
        let w = random_windows(1, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, _) = m.forward(&w[0], Some(&mut rng)).unwrap();
        let (b, _) = m.forward(&w[0], None).unwrap();
        assert_eq!(a, b);
    }

    pub(crate) fn gradient_check(model: &LstmRegressor, windows: &[&[f64]], targets: &[f64], eps: f64) -> Vec<f64> {
        let (_, grads) = model.loss_and_gradients(windows, targets, None).unwrap();
        let analytic = grads.tensors();
        let mut errs = Vec::new();
        for (ti, a) in analytic.iter().enumerate() {
            let mut num = vec![0.0; a.len()];
            for k in 0..a.len() {
                let mut plus = model.clone();
                plus.param_slices_mut()[ti][k] += eps;
                let mut minus = model.clone();
                minus.param_slices_mut()[ti][k] -= eps;
                let lp = plus.loss_and_gradients(windows, targets, None).unwrap().0;
                let lm = minus.loss_and_gradients(windows, targets, None).unwrap().0;
                num[k] = (lp - lm) / (2.0 * eps);
            }
            let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + num.iter().map(|x| x * x).sum::<f64>().sqrt();
            errs.push(if scale > 0.0 { diff / scale } else { 0.0 });
        }
        errs
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = random_model(2, &[3], 5, 0.6);
        let w = random_windows(3, 2 * 2, 8);
        let errs = gradient_check(&m, &refs(&w), &[0.3, -1.2, 0.8], 1e-5);
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
    }

    #[test]
    fn stacked_gradients_match_finite_differences() {
        let m = random_model(3, &[4, 3], 9, 0.5);
        let w = random_windows(4, 5 * 3, 10);
        let errs = gradient_check(&m, &refs(&w), &[1.0, 0.0, -0.5, 2.0], 1e-5);
        assert_eq!(errs.len(), 8);
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
    }

    #[test]
    fn perfect_predictions_have_zero_head_gradient() {
        let m = random_model(2, &[3], 2, 0.4);
        let w = random_windows(5, 8, 1);
        let r = refs(&w);
        let y = m.predict_raw_batch(&r).unwrap();
        let (mse, g) = m.loss_and_gradients(&r, &y, None).unwrap();
        assert_eq!(mse, 0.0);
        assert!(g.head_w.iter().all(|&v| v == 0.0) && g.head_b == 0.0);
    }

    #[test]
    fn shifting_targets_shifts_bias_gradient() {
        let m = random_model(2, &[3], 4, 0.4);
        let w = random_windows(6, 6, 2);
        let r = refs(&w);
        let t: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
        let t2: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        let g1 = m.loss_and_gradients(&r, &t, None).unwrap().1;
        let g2 = m.loss_and_gradients(&r, &t2, None).unwrap().1;
        // d/db of mean (ŷ − y)² is 2·mean(ŷ − y); doubling y moves it by −2·mean(y).
        let mean_t = t.iter().sum::<f64>() / 6.0;
        assert!((g2.head_b - g1.head_b - (-2.0 * mean_t)).abs() < 1e-12);
    }

    #[test]
    fn gradients_independent_of_chunking_threads() {
        let m = LstmRegressor::new(2, &[6, 3], &[0.3], 3).unwrap();
        let w = random_windows(40, 10, 5);
        let r = refs(&w);
        let t = vec![1.0; 40];
        let a = m.loss_and_gradients(&r, &t, Some(9)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| m.loss_and_gradients(&r, &t, Some(9)).unwrap());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn rmsprop_examples() {
        let mut p = vec![1.0, -2.0];
        let mut s = vec![0.0, 0.0];
        rmsprop_step(&mut p, &[0.0, 0.0], &mut s, 0.001, 0.9, 1e-8);
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![0.0];
        let mut s = vec![0.0];
        rmsprop_step(&mut p, &[1.0], &mut s, 0.001, 0.9, 1e-8);
        assert!((p[0] - (-0.001 / (0.1f64 + 1e-8).sqrt())).abs() < 1e-15);

        let mut p = vec![0.0];
        let mut s = vec![0.0];
        let mut last = 0.0;
        for _ in 0..500 {
            let before = p[0];
            rmsprop_step(&mut p, &[3.0], &mut s, 0.001, 0.9, 1e-8);
            last = before - p[0];
        }
        assert!((last - 0.001).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![0.0, 0.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.5, -4.0], &mut m, &mut v, 1, 0.01, 0.9, 0.999, 1e-8);
        assert!((p[0] + 0.01).abs() < 1e-8 && (p[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let m = LstmRegressor::new(3, &[6, 4], &[0.3], 11).unwrap();
        let w = random_windows(1, 15, 4);
        let (_, clean) = m.forward(&w[0], None).unwrap();
        let reference = clean.layers[0].h.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 10_000;
        let mut acc = DMatrix::zeros(reference.nrows(), reference.ncols());
        for _ in 0..draws {
            let (_, c) = m.forward(&w[0], Some(&mut rng)).unwrap();
            acc += &c.layers[1].x;
        }
        acc /= draws as f64;
        let rel = (&acc - &reference).norm() / reference.norm();
        assert!(rel < 0.01, "relative deviation {rel}");
    }

    #[test]
    fn dropout_output_expectation_near_inference() {
        // Small weights keep the network close to linear, where inverted
        // dropout leaves the output mean unchanged.
        let mut m = random_model(3, &[6, 4], 21, 0.05);
        m.dropout_ratios = vec![0.2];
        m.head_w = vec![1.0, 1.0, 1.0, 1.0];
        m.head_b = 0.0;
        let w: Vec<f64> = (0..15).map(|i| 1.0 + 0.1 * i as f64).collect();
        let (clean, _) = m.forward(&w, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws = 20_000;
        let mean = (0..draws).map(|_| m.forward(&w, Some(&mut rng)).unwrap().0).sum::<f64>() / draws as f64;
        assert!(((mean - clean) / clean).abs() < 0.01, "{mean} vs {clean}");
    }

    #[test]
    fn predict_clamps() {
        let mut m = LstmRegressor::new(1, &[1], &[], 0).unwrap();
        for t in m.param_slices_mut() {
            t.fill(0.0);
        }
        m.head_b = 180.0;
        assert_eq!(m.predict(&[0.0; 4], 130.0).unwrap(), 130.0);
        m.head_b = -4.0;
        assert_eq!(m.predict(&[0.0; 4], 130.0).unwrap(), 0.0);
        assert!(m.predict(&[0.0; 3], 130.0).is_ok());
        let m2 = LstmRegressor::new(2, &[3], &[], 1).unwrap();
        assert!(m2.predict(&[0.0; 3], 130.0).is_err());
    }

    fn toy_dataset(n_units: usize, len: usize, seed: u64) -> WindowedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = WindowedDataset::empty(len, 2);
        for u in 0..n_units {
            let k_max = 40 + 5 * u;
            let labels = piecewise_rul_labels(u as u32 + 1, k_max, Some(k_max / 3), 130).unwrap();
            let x = DMatrix::from_fn(2, k_max, |i, k| {
                let rul = labels.labels[k];
                let sign = if i == 0 { -1.0 } else { 1.0 };
                sign * (1.0 - rul / 30.0) + 0.05 * rng.sample::<f64, _>(StandardNormal)
            });
            ds.extend(&sliding_windows(&x, &labels, len, 1).unwrap()).unwrap();
        }
        ds
    }

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            seq_len: 10,
            hidden_sizes: vec![16, 8],
            dropout_ratios: vec![0.1],
            learning_rate: 0.005,
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerKind::Rmsprop,
            seed,
            clip_norm: Some(5.0),
            output_scale: 30.0,
        }
    }

    #[test]
    fn learns_linear_degradation() {
        let ds = toy_dataset(6, 10, 1);
        assert!(ds.len() >= 200, "{}", ds.len());
        let cfg = small_config(3);
        let (model, hist) = train(&ds, &cfg).unwrap();
        let all: Vec<&[f64]> = (0..ds.len()).map(|i| ds.window(i)).collect();
        let pred = model.predict_raw_batch(&all).unwrap();
        let rmse = (pred.iter().zip(&ds.targets).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ds.len() as f64).sqrt();
        let range = ds.targets.iter().cloned().fold(f64::MIN, f64::max) - ds.targets.iter().cloned().fold(f64::MAX, f64::min);
        assert!(rmse < 0.2 * range, "rmse {rmse}, range {range}");
        assert_eq!(hist.epochs.len(), 30);
    }

    #[test]
    fn early_loss_decreases_for_most_seeds() {
        let ds = toy_dataset(6, 10, 2);
        let good = (0..10)
            .filter(|&s| {
                let mut cfg = small_config(100 + s);
                cfg.learning_rate = 0.001;
                cfg.epochs = 5;
                let (_, h) = train(&ds, &cfg).unwrap();
                h.epochs.windows(2).all(|w| w[1].train_mse < w[0].train_mse)
            })
            .count();
        assert!(good >= 9, "{good}/10 runs decreased monotonically");
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = toy_dataset(2, 10, 3);
        let mut cfg = small_config(4);
        cfg.epochs = 0;
        let (model, hist) = train(&ds, &cfg).unwrap();
        assert!(hist.epochs.is_empty());
        let mut init = LstmRegressor::new(2, &[16, 8], &[0.1], 4).unwrap();
        init.output_scale = 30.0;
        assert_eq!(model, init);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let ds = toy_dataset(3, 10, 4);
        let mut cfg = small_config(8);
        cfg.epochs = 3;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (a, ha) = pool.install(|| train(&ds, &cfg).unwrap());
        let (b, hb) = pool.install(|| train(&ds, &cfg).unwrap());
        let (c, _) = train(&ds, &cfg).unwrap();
        assert_eq!(checkpoint_bytes(&a, &meta()).unwrap(), checkpoint_bytes(&b, &meta()).unwrap());
        assert_eq!(a, c);
        assert_eq!(ha, hb);
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            dataset: "FD001".into(),
            seq_len: 10,
            channels: vec!["s2".into(), "s3".into()],
            label_cap: 130.0,
            standardizer: Some(Standardizer::identity(2)),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = LstmRegressor::new(2, &[5, 3], &[0.2], 12).unwrap();
        let bytes = checkpoint_bytes(&m, &meta()).unwrap();
        let (back, meta2) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta());
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Integrity(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = TrainConfig::default();
        c.dropout_ratios = vec![0.2];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert!(LstmRegressor::new(3, &[4, 2], &[1.0], 0).is_err());
    }

    #[test]
    fn gate_accessors_slice_stacked_blocks() {
        let m = LstmRegressor::new(2, &[3], &[], 1).unwrap();
        let l = &m.layers[0];
        assert_eq!(l.input_weights(Gate::Forget), l.w.rows(3, 3).into_owned());
        assert_eq!(l.recurrent_weights(Gate::Candidate), l.u.rows(9, 3).into_owned());
        assert_eq!(l.bias(Gate::Forget), &[1.0, 1.0, 1.0]);
        assert_eq!(l.bias(Gate::Input), &[0.0, 0.0, 0.0]);
    }
}
