//! Stacked LSTM regressor with a fully-connected head, trained by full BPTT
//! and ADAM.
//!
//! Internals are 64-bit. Gate order inside every weight block is
//! input, forget, cell candidate, output. The head reads the top layer's
//! hidden state at the last observed timestep.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgr::{frame, read_f32s, split_frame};
use crate::fusion::{epoch_batches, SequenceSet};
use crate::models::adam::{Adam, AdamConfig};
use crate::models::scaler::FeatureScaler;

pub const LSM_MAGIC: &[u8; 4] = b"LSM1";
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Samples per gradient chunk; chunks are reduced in index order.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOrder {
    /// FC1 → batch-norm → ReLU → FC2
    #[default]
    BnRelu,
    /// FC1 → ReLU → batch-norm → FC2
    ReluBn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmParams {
    pub hidden: usize,
    pub layers: usize,
    pub fc_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
    pub head_order: HeadOrder,
}

impl Default for LstmParams {
    fn default() -> Self {
        LstmParams {
            hidden: 128,
            layers: 2,
            fc_hidden: 128,
            learning_rate: 0.001,
            batch_size: 1024,
            epochs: 50,
            patience: 8,
            adam: AdamConfig::default(),
            clip_norm: None,
            head_order: HeadOrder::BnRelu,
        }
    }
}

impl LstmParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.fc_hidden == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Model("LSTM sizes, batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Model(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.patience == 0 || self.patience >= self.epochs {
            return Err(Error::Model(format!(
                "patience ({}) must be positive and below epochs ({})",
                self.patience, self.epochs
            )));
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub input: usize,
    pub hidden: usize,
    pub fc: usize,
    /// Per layer: input weights `4H × I`, recurrent weights `4H × H`, bias `4H`.
    pub w: Vec<usize>,
    pub u: Vec<usize>,
    pub b: Vec<usize>,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub gamma: usize,
    pub beta: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(input: usize, hidden: usize, layers: usize, fc: usize) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let (mut w, mut u, mut b) = (Vec::new(), Vec::new(), Vec::new());
        for l in 0..layers {
            let i = if l == 0 { input } else { hidden };
            w.push(take(4 * hidden * i));
            u.push(take(4 * hidden * hidden));
            b.push(take(4 * hidden));
        }
        let fc1_w = take(fc * hidden);
        let fc1_b = take(fc);
        let gamma = take(fc);
        let beta = take(fc);
        let fc2_w = take(fc);
        let fc2_b = take(1);
        Layout {
            input,
            hidden,
            fc,
            w,
            u,
            b,
            fc1_w,
            fc1_b,
            gamma,
            beta,
            fc2_w,
            fc2_b,
            len: off,
        }
    }

    pub fn layers(&self) -> usize {
        self.w.len()
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.input
        } else {
            self.hidden
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward state of one sequence, kept for backpropagation.
struct SeqCache {
    steps: usize,
    /// `steps × F` standardized inputs
    x: Vec<f64>,
    /// Per layer, `(steps + 1) × H`; row 0 is the zero initial state.
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    /// Per layer, `steps × H` of tanh(c_t).
    tc: Vec<Vec<f64>>,
    /// Per layer, `steps × 4H` activated gates.
    gates: Vec<Vec<f64>>,
}

impl SeqCache {
    fn readout(&self, hidden: usize) -> &[f64] {
        let top = self.h.last().unwrap();
        &top[self.steps * hidden..(self.steps + 1) * hidden]
    }
}

fn last_observed(mask: &[bool]) -> Result<usize> {
    mask.iter().rposition(|m| *m).ok_or(Error::AllMasked)
}

fn lstm_forward(lay: &Layout, theta: &[f64], x: Vec<f64>, steps: usize) -> SeqCache {
    let hd = lay.hidden;
    let mut cache = SeqCache {
        steps,
        x,
        h: Vec::new(),
        c: Vec::new(),
        tc: Vec::new(),
        gates: Vec::new(),
    };
    for l in 0..lay.layers() {
        let ni = lay.layer_input(l);
        let w = &theta[lay.w[l]..lay.w[l] + 4 * hd * ni];
        let u = &theta[lay.u[l]..lay.u[l] + 4 * hd * hd];
        let b = &theta[lay.b[l]..lay.b[l] + 4 * hd];
        let mut h = vec![0.0; (steps + 1) * hd];
        let mut c = vec![0.0; (steps + 1) * hd];
        let mut tc = vec![0.0; steps * hd];
        let mut gates = vec![0.0; steps * 4 * hd];
        for t in 0..steps {
            let input: &[f64] = if l == 0 {
                &cache.x[t * ni..(t + 1) * ni]
            } else {
                &cache.h[l - 1][(t + 1) * hd..(t + 2) * hd]
            };
            let hp = &h[t * hd..(t + 1) * hd];
            let g = &mut gates[t * 4 * hd..(t + 1) * 4 * hd];
            for k in 0..4 * hd {
                let z = b[k] + dot(&w[k * ni..(k + 1) * ni], input) + dot(&u[k * hd..(k + 1) * hd], hp);
                g[k] = if (2 * hd..3 * hd).contains(&k) { z.tanh() } else { sigmoid(z) };
            }
            for j in 0..hd {
                let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let cn = f * c[t * hd + j] + i * gg;
                c[(t + 1) * hd + j] = cn;
                tc[t * hd + j] = cn.tanh();
                h[(t + 1) * hd + j] = o * tc[t * hd + j];
            }
        }
        cache.h.push(h);
        cache.c.push(c);
        cache.tc.push(tc);
        cache.gates.push(gates);
    }
    cache
}

/// Accumulates parameter gradients of one sequence given dL/d(readout).
fn lstm_backward(lay: &Layout, theta: &[f64], cache: &SeqCache, d_readout: &[f64], grad: &mut [f64]) {
    let hd = lay.hidden;
    let steps = cache.steps;
    // dL/dh for each timestep of the layer currently being processed
    let mut dh_in = vec![0.0; steps * hd];
    dh_in[(steps - 1) * hd..].copy_from_slice(d_readout);
    let mut dz = vec![0.0; 4 * hd];
    for l in (0..lay.layers()).rev() {
        let ni = lay.layer_input(l);
        let (h, c, tc, gates) = (&cache.h[l], &cache.c[l], &cache.tc[l], &cache.gates[l]);
        let w = &theta[lay.w[l]..lay.w[l] + 4 * hd * ni];
        let u = &theta[lay.u[l]..lay.u[l] + 4 * hd * hd];
        let mut dx = vec![0.0; if l > 0 { steps * hd } else { 0 }];
        let mut dh_rec = vec![0.0; hd];
        let mut dc_rec = vec![0.0; hd];
        for t in (0..steps).rev() {
            let g = &gates[t * 4 * hd..(t + 1) * 4 * hd];
            for j in 0..hd {
                let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let dh = dh_in[t * hd + j] + dh_rec[j];
                let tcj = tc[t * hd + j];
                let dc = dc_rec[j] + dh * o * (1.0 - tcj * tcj);
                dz[j] = dc * gg * i * (1.0 - i);
                dz[hd + j] = dc * c[t * hd + j] * f * (1.0 - f);
                dz[2 * hd + j] = dc * i * (1.0 - gg * gg);
                dz[3 * hd + j] = dh * tcj * o * (1.0 - o);
                dc_rec[j] = dc * f;
            }
            let input: &[f64] = if l == 0 {
                &cache.x[t * ni..(t + 1) * ni]
            } else {
                &cache.h[l - 1][(t + 1) * hd..(t + 2) * hd]
            };
            let hp = &h[t * hd..(t + 1) * hd];
            dh_rec.fill(0.0);
            for k in 0..4 * hd {
                let d = dz[k];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad[lay.w[l] + k * ni..lay.w[l] + (k + 1) * ni];
                for (gv, xv) in gw.iter_mut().zip(input) {
                    *gv += d * xv;
                }
                let gu = &mut grad[lay.u[l] + k * hd..lay.u[l] + (k + 1) * hd];
                for (gv, hv) in gu.iter_mut().zip(hp) {
                    *gv += d * hv;
                }
                grad[lay.b[l] + k] += d;
                for (r, uv) in dh_rec.iter_mut().zip(&u[k * hd..(k + 1) * hd]) {
                    *r += d * uv;
                }
                if l > 0 {
                    for (r, wv) in dx[t * hd..(t + 1) * hd].iter_mut().zip(&w[k * ni..(k + 1) * ni]) {
                        *r += d * wv;
                    }
                }
            }
        }
        if l > 0 {
            dh_in = dx;
        }
    }
}

/// Batch-norm statistics used by a head pass.
enum BnStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

struct HeadPass {
    pred: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Head forward (and backward when `dpred` is given) over a batch of readouts.
fn head(
    lay: &Layout,
    theta: &[f64],
    order: HeadOrder,
    readouts: &[&[f64]],
    stats: BnStats<'_>,
    backward: Option<(&dyn Fn(&[f64]) -> Vec<f64>, &mut [f64], &mut Vec<Vec<f64>>)>,
) -> HeadPass {
    let (hd, d) = (lay.hidden, lay.fc);
    let n = readouts.len();
    let w1 = &theta[lay.fc1_w..lay.fc1_w + d * hd];
    let b1 = &theta[lay.fc1_b..lay.fc1_b + d];
    let gamma = &theta[lay.gamma..lay.gamma + d];
    let beta = &theta[lay.beta..lay.beta + d];
    let w2 = &theta[lay.fc2_w..lay.fc2_w + d];
    let b2 = theta[lay.fc2_b];

    let z1: Vec<Vec<f64>> = readouts
        .iter()
        .map(|h| (0..d).map(|k| b1[k] + dot(&w1[k * hd..(k + 1) * hd], h)).collect())
        .collect();
    let relu = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x.max(0.0)).collect() };
    let bn_in: Vec<Vec<f64>> = match order {
        HeadOrder::BnRelu => z1.clone(),
        HeadOrder::ReluBn => z1.iter().map(|v| relu(v)).collect(),
    };
    let (mean, var): (Vec<f64>, Vec<f64>) = match stats {
        BnStats::Batch => {
            let mean: Vec<f64> = (0..d).map(|k| bn_in.iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
            let var = (0..d)
                .map(|k| bn_in.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / n as f64)
                .collect();
            (mean, var)
        }
        BnStats::Running { mean, var } => (mean.to_vec(), var.to_vec()),
    };
    let inv_sd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let xhat: Vec<Vec<f64>> = bn_in
        .iter()
        .map(|v| (0..d).map(|k| (v[k] - mean[k]) * inv_sd[k]).collect())
        .collect();
    let bn_out: Vec<Vec<f64>> = xhat
        .iter()
        .map(|v| (0..d).map(|k| gamma[k] * v[k] + beta[k]).collect())
        .collect();
    let a: Vec<Vec<f64>> = match order {
        HeadOrder::BnRelu => bn_out.iter().map(|v| relu(v)).collect(),
        HeadOrder::ReluBn => bn_out.clone(),
    };
    let pred: Vec<f64> = a.iter().map(|v| b2 + dot(w2, v)).collect();

    if let Some((loss_grad, grad, d_readouts)) = backward {
        let dpred = loss_grad(&pred);
        grad[lay.fc2_b] += dpred.iter().sum::<f64>();
        let mut da: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (s, dp) in dpred.iter().enumerate() {
            for k in 0..d {
                grad[lay.fc2_w + k] += dp * a[s][k];
            }
            da.push(w2.iter().map(|w| dp * w).collect());
        }
        // through the ReLU that follows batch-norm
        if order == HeadOrder::BnRelu {
            for (s, v) in da.iter_mut().enumerate() {
                for k in 0..d {
                    if bn_out[s][k] <= 0.0 {
                        v[k] = 0.0;
                    }
                }
            }
        }
        // batch-norm with batch statistics
        let mut d_bn_in = vec![vec![0.0; d]; n];
        for k in 0..d {
            let (mut sum_d, mut sum_dx) = (0.0, 0.0);
            for s in 0..n {
                grad[lay.gamma + k] += da[s][k] * xhat[s][k];
                grad[lay.beta + k] += da[s][k];
                let dxh = da[s][k] * gamma[k];
                sum_d += dxh;
                sum_dx += dxh * xhat[s][k];
            }
            for s in 0..n {
                let dxh = da[s][k] * gamma[k];
                d_bn_in[s][k] = inv_sd[k] / n as f64 * (n as f64 * dxh - sum_d - xhat[s][k] * sum_dx);
            }
        }
        if order == HeadOrder::ReluBn {
            for (s, v) in d_bn_in.iter_mut().enumerate() {
                for k in 0..d {
                    if z1[s][k] <= 0.0 {
                        v[k] = 0.0;
                    }
                }
            }
        }
        d_readouts.clear();
        for (s, dz1) in d_bn_in.iter().enumerate() {
            let mut dh = vec![0.0; hd];
            for k in 0..d {
                let g = dz1[k];
                grad[lay.fc1_b + k] += g;
                let row = &w1[k * hd..(k + 1) * hd];
                for j in 0..hd {
                    grad[lay.fc1_w + k * hd + j] += g * readouts[s][j];
                    dh[j] += g * row[j];
                }
            }
            d_readouts.push(dh);
        }
    }
    HeadPass {
        pred,
        batch_mean: mean,
        batch_var: var,
    }
}

/// One standardized, truncated sequence ready for the recurrent layers.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub steps: usize,
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LstmHeader {
    params: LstmParams,
    input: usize,
    n_params: usize,
    scaler: FeatureScaler,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    history: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub valid_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub params: LstmParams,
    pub layout: Layout,
    pub theta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub scaler: FeatureScaler,
    pub history: Vec<EpochLog>,
}

/// Result of a train-mode pass over one batch.
pub struct BatchGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl LstmModel {
    /// Uniform(±1/√hidden) recurrent weights, uniform(±1/√fan_in) dense
    /// layers, γ = 1, β = 0, output bias at `target_mean`.
    pub fn init(params: LstmParams, input: usize, scaler: FeatureScaler, target_mean: f64, seed: u64) -> Self {
        let lay = Layout::new(input, params.hidden, params.layers, params.fc_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; lay.len];
        let k = 1.0 / (params.hidden as f64).sqrt();
        for v in theta[..lay.fc1_w].iter_mut() {
            *v = rng.gen_range(-k..k);
        }
        for v in theta[lay.fc1_w..lay.gamma].iter_mut() {
            *v = rng.gen_range(-k..k);
        }
        let k2 = 1.0 / (params.fc_hidden as f64).sqrt();
        for v in theta[lay.gamma..lay.beta].iter_mut() {
            *v = 1.0;
        }
        for v in theta[lay.fc2_w..lay.fc2_b].iter_mut() {
            *v = rng.gen_range(-k2..k2);
        }
        theta[lay.fc2_b] = target_mean;
        LstmModel {
            running_mean: vec![0.0; params.fc_hidden],
            running_var: vec![1.0; params.fc_hidden],
            params,
            layout: lay,
            theta,
            scaler,
            history: Vec::new(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.layout.input
    }

    /// Standardizes a `[t][f]` sequence and cuts it after the last observed step.
    pub fn prepare(&self, values: &[f32], mask: &[bool], y: f64) -> Result<Prepared> {
        let nf = self.input_size();
        if values.len() != mask.len() * nf {
            return Err(Error::ColumnMismatch {
                expected: nf,
                got: values.len() / mask.len().max(1),
            });
        }
        let steps = last_observed(mask)? + 1;
        let mut x = vec![0.0; mask.len() * nf];
        self.scaler.transform_into(values, mask, &mut x);
        x.truncate(steps * nf);
        Ok(Prepared { steps, x, y })
    }

    pub fn prepare_set(&self, set: &SequenceSet) -> Result<Vec<Prepared>> {
        if set.n_features != self.input_size() {
            return Err(Error::ColumnMismatch {
                expected: self.input_size(),
                got: set.n_features,
            });
        }
        (0..set.len())
            .into_par_iter()
            .map(|i| {
                let (v, m) = set.sample(i);
                self.prepare(v, m, set.target[i])
            })
            .collect()
    }

    /// Eval-mode prediction of one prepared sequence.
    pub fn predict_prepared(&self, p: &Prepared) -> f64 {
        let cache = lstm_forward(&self.layout, &self.theta, p.x.clone(), p.steps);
        let r = cache.readout(self.layout.hidden);
        head(
            &self.layout,
            &self.theta,
            self.params.head_order,
            &[r],
            BnStats::Running {
                mean: &self.running_mean,
                var: &self.running_var,
            },
            None,
        )
        .pred[0]
    }

    /// Eval-mode prediction of a raw `[t][f]` sequence.
    pub fn predict_one(&self, values: &[f32], mask: &[bool]) -> Result<f64> {
        Ok(self.predict_prepared(&self.prepare(values, mask, 0.0)?))
    }

    pub fn predict(&self, set: &SequenceSet) -> Result<Vec<f64>> {
        let prepared = self.prepare_set(set)?;
        Ok(prepared.par_iter().map(|p| self.predict_prepared(p)).collect())
    }

    /// Train-mode MSE and its gradient over `batch` at parameters `theta`.
    pub fn batch_grad(&self, theta: &[f64], batch: &[&Prepared]) -> BatchGrad {
        let lay = &self.layout;
        let caches: Vec<SeqCache> = batch
            .par_iter()
            .map(|p| lstm_forward(lay, theta, p.x.clone(), p.steps))
            .collect();
        let readouts: Vec<&[f64]> = caches.iter().map(|c| c.readout(lay.hidden)).collect();
        let y: Vec<f64> = batch.iter().map(|p| p.y).collect();
        let n = batch.len() as f64;
        let mut grad = vec![0.0; lay.len];
        let mut d_readouts = Vec::new();
        let loss_grad = |pred: &[f64]| -> Vec<f64> { pred.iter().zip(&y).map(|(p, t)| 2.0 * (p - t) / n).collect() };
        let hp = head(
            lay,
            theta,
            self.params.head_order,
            &readouts,
            BnStats::Batch,
            Some((&loss_grad, &mut grad, &mut d_readouts)),
        );
        let loss = hp.pred.iter().zip(&y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        let chunk_grads: Vec<Vec<f64>> = caches
            .par_chunks(CHUNK)
            .zip(d_readouts.par_chunks(CHUNK))
            .map(|(cs, ds)| {
                let mut g = vec![0.0; lay.len];
                for (c, d) in cs.iter().zip(ds) {
                    lstm_backward(lay, theta, c, d, &mut g);
                }
                g
            })
            .collect();
        for g in chunk_grads {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        BatchGrad {
            loss,
            grad,
            batch_mean: hp.batch_mean,
            batch_var: hp.batch_var,
        }
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64], n: usize) {
        // a single-sample batch has no variance estimate; keep the old one
        for k in 0..mean.len() {
            self.running_mean[k] = (1.0 - BN_MOMENTUM) * self.running_mean[k] + BN_MOMENTUM * mean[k];
            if n > 1 {
                let unbiased = var[k] * n as f64 / (n - 1) as f64;
                self.running_var[k] = (1.0 - BN_MOMENTUM) * self.running_var[k] + BN_MOMENTUM * unbiased;
            }
        }
    }

    fn mse(&self, data: &[Prepared]) -> f64 {
        let se: Vec<f64> = data
            .par_iter()
            .map(|p| {
                let e = self.predict_prepared(p) - p.y;
                e * e
            })
            .collect();
        se.iter().sum::<f64>() / data.len() as f64
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = LstmHeader {
            params: self.params,
            input: self.input_size(),
            n_params: self.theta.len(),
            scaler: self.scaler.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            history: self.history.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = frame(LSM_MAGIC, &header, self.theta.len() * 4);
        for v in &self.theta {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_frame("LSM", LSM_MAGIC, bytes)?;
        let h: LstmHeader = serde_json::from_slice(header)?;
        let layout = Layout::new(h.input, h.params.hidden, h.params.layers, h.params.fc_hidden);
        if layout.len != h.n_params || payload.len() != h.n_params * 4 {
            return Err(Error::Format {
                format: "LSM",
                reason: "parameter count does not match the declared shapes".into(),
            });
        }
        let theta = read_f32s("LSM", payload, h.n_params)?.into_iter().map(f64::from).collect();
        Ok(LstmModel {
            params: h.params,
            layout,
            theta,
            running_mean: h.running_mean,
            running_var: h.running_var,
            scaler: h.scaler,
            history: h.history,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        LstmModel::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Trains on `train`, early-stopping on `valid`, and returns the
/// best-validation weights. Feature standardization is fitted on `train` only.
pub fn lstm_fit(train: &SequenceSet, valid: &SequenceSet, params: &LstmParams, seed: u64) -> Result<LstmModel> {
    params.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Model("LSTM needs non-empty training and validation sets".into()));
    }
    let scaler = FeatureScaler::fit(train);
    let y_mean = train.target.iter().sum::<f64>() / train.len() as f64;
    let mut model = LstmModel::init(*params, train.n_features, scaler, y_mean, seed);
    let tr = model.prepare_set(train)?;
    let va = model.prepare_set(valid)?;
    let mut opt = Adam::new(model.theta.len(), params.adam);
    let mut best = (model.mse(&va), model.theta.clone(), model.running_mean.clone(), model.running_var.clone());
    let mut since = 0;
    for epoch in 0..params.epochs {
        let mut se = 0.0;
        for idx in epoch_batches(tr.len(), params.batch_size, seed, epoch as u64) {
            let batch: Vec<&Prepared> = idx.iter().map(|i| &tr[*i]).collect();
            let mut bg = model.batch_grad(&model.theta, &batch);
            if !bg.loss.is_finite() || bg.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            se += bg.loss * batch.len() as f64;
            if let Some(c) = params.clip_norm {
                clip(&mut bg.grad, c);
            }
            opt.step(&mut model.theta, &bg.grad, params.learning_rate);
            model.update_running(&bg.batch_mean, &bg.batch_var, batch.len());
        }
        let v = model.mse(&va);
        if !v.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        model.history.push(EpochLog {
            epoch,
            train_mse: se / tr.len() as f64,
            valid_mse: v,
        });
        if v < best.0 {
            best = (v, model.theta.clone(), model.running_mean.clone(), model.running_var.clone());
            since = 0;
        } else {
            since += 1;
            if since >= params.patience {
                break;
            }
        }
    }
    model.theta = best.1;
    model.running_mean = best.2;
    model.running_var = best.3;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::s2::TIMESTEPS;

    fn tiny(hidden: usize, input: usize, fc: usize, order: HeadOrder, seed: u64) -> LstmModel {
        let params = LstmParams {
            hidden,
            fc_hidden: fc,
            head_order: order,
            ..LstmParams::default()
        };
        let mut m = LstmModel::init(params, input, FeatureScaler::identity(input), 0.0, seed);
        // move every parameter off its structured initial value
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for v in m.theta.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
        m
    }

    fn random_batch(n: usize, steps: usize, input: usize, seed: u64) -> Vec<Prepared> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Prepared {
                steps,
                x: (0..steps * input).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                y: rng.gen_range(-2.0..2.0),
            })
            .collect()
    }

    fn grad_check(order: HeadOrder, draws: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for draw in 0..draws {
            let m = tiny(8, 6, 8, order, draw);
            let data = random_batch(5, 3, 6, 100 + draw);
            let batch: Vec<&Prepared> = data.iter().collect();
            let analytic = m.batch_grad(&m.theta, &batch).grad;
            let h = 1e-5;
            let mut theta = m.theta.clone();
            for k in 0..theta.len() {
                let orig = theta[k];
                theta[k] = orig + h;
                let up = m.batch_grad(&theta, &batch).loss;
                theta[k] = orig - h;
                let down = m.batch_grad(&theta, &batch).loss;
                theta[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                // the floor sits above finite-difference rounding noise (~eps*|L|/h);
                // FC1 biases ahead of batch-norm have an exactly zero gradient
                let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-5);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let worst = grad_check(HeadOrder::BnRelu, 20);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_relu_first() {
        let worst = grad_check(HeadOrder::ReluBn, 5);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_network_predicts_output_bias() {
        let mut m = tiny(4, 3, 5, HeadOrder::BnRelu, 1);
        m.theta.iter_mut().for_each(|v| *v = 0.0);
        m.theta[m.layout.fc2_b] = 6.25;
        let values = vec![1.0f32; TIMESTEPS * 3];
        let mask = vec![true; TIMESTEPS];
        assert_eq!(m.predict_one(&values, &mask).unwrap(), 6.25);
    }

    #[test]
    fn masked_tail_does_not_change_readout() {
        let m = tiny(6, 3, 5, HeadOrder::BnRelu, 2);
        let mut values: Vec<f32> = (0..TIMESTEPS * 3).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut mask = vec![true; TIMESTEPS];
        mask[10..].iter_mut().for_each(|m| *m = false);
        let a = m.predict_one(&values, &mask).unwrap();
        values[11 * 3..].iter_mut().for_each(|v| *v = 42.0);
        assert_eq!(m.predict_one(&values, &mask).unwrap(), a);
        // masked values before the readout are replaced by zeros too
        mask[3] = false;
        let b = m.predict_one(&values, &mask).unwrap();
        values[3 * 3] = -7.0;
        assert_eq!(m.predict_one(&values, &mask).unwrap(), b);
        assert!(matches!(m.predict_one(&values, &[false; TIMESTEPS]), Err(Error::AllMasked)));
    }

    #[test]
    fn eval_mode_ignores_batch_composition() {
        let mut m = tiny(6, 4, 5, HeadOrder::BnRelu, 3);
        m.running_mean = vec![0.3, -0.2, 0.1, 0.0, 0.5];
        m.running_var = vec![1.5, 0.7, 2.0, 1.0, 0.9];
        let data: Vec<f32> = (0..8 * TIMESTEPS * 4).map(|i| (i as f32 * 0.11).cos()).collect();
        let set = SequenceSet {
            n_features: 4,
            values: data,
            mask: vec![true; 8 * TIMESTEPS],
            target: vec![0.0; 8],
        };
        let all = m.predict(&set).unwrap();
        for i in 0..8 {
            let (v, mk) = set.sample(i);
            assert_eq!(m.predict_one(v, mk).unwrap(), all[i]);
        }
    }

    #[test]
    fn serialization_round_trip() {
        let m = tiny(4, 3, 5, HeadOrder::ReluBn, 4);
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LSM1");
        let back = LstmModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.layout, m.layout);
        assert_eq!(back.params, m.params);
        for (a, b) in back.theta.iter().zip(&m.theta) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    fn toy_sets(n: usize, seed: u64) -> (SequenceSet, SequenceSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |n: usize| {
            let mut values = Vec::new();
            let mut target = Vec::new();
            for _ in 0..n {
                let a: f32 = rng.gen_range(0.0..1.0);
                let b: f32 = rng.gen_range(0.0..1.0);
                for t in 0..TIMESTEPS {
                    values.push(a * (t as f32 / 6.0).sin());
                    values.push(b + 100.0);
                }
                target.push(5.0 + 3.0 * a as f64 - 2.0 * b as f64);
            }
            SequenceSet {
                n_features: 2,
                values,
                mask: (0..n * TIMESTEPS).map(|i| (4..16).contains(&(i % TIMESTEPS))).collect(),
                target,
            }
        };
        (make(n), make(n / 4))
    }

    fn small_params() -> LstmParams {
        LstmParams {
            hidden: 8,
            fc_hidden: 8,
            batch_size: 32,
            epochs: 6,
            patience: 3,
            learning_rate: 0.01,
            ..LstmParams::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (tr, va) = toy_sets(256, 5);
        let p = small_params();
        let a = lstm_fit(&tr, &va, &p, 11).unwrap();
        let b = lstm_fit(&tr, &va, &p, 11).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.running_var, b.running_var);
        let var = {
            let m = va.target.iter().sum::<f64>() / va.len() as f64;
            va.target.iter().map(|y| (y - m).powi(2)).sum::<f64>() / va.len() as f64
        };
        let best = a.history.iter().map(|e| e.valid_mse).fold(f64::INFINITY, f64::min);
        assert!(best < 0.5 * var, "valid mse {best} vs variance {var}");
        assert!(a.running_var.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn scaler_uses_training_rows_only() {
        let (tr, va) = toy_sets(64, 6);
        let p = LstmParams {
            epochs: 2,
            patience: 1,
            ..small_params()
        };
        let a = lstm_fit(&tr, &va, &p, 1).unwrap();
        let mut va2 = va.clone();
        va2.values.iter_mut().for_each(|v| *v *= 3.0);
        let b = lstm_fit(&tr, &va2, &p, 1).unwrap();
        assert_eq!(a.scaler, b.scaler);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let (mut tr, va) = toy_sets(64, 7);
        tr.target[0] = f64::INFINITY;
        let err = lstm_fit(&tr, &va, &small_params(), 1).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0 }));
    }
}
