//! LSTM-based regressor over static and dynamic monthly features: an
//! LSTM branch consumes the per-month dynamic window, a dense tanh
//! branch the static features; the concatenated states pass through a
//! tanh merge layer and a linear head. Trained with Adam on mean
//! squared loss plus L2 weight decay (biases excluded).
//!
//! Parameters live in one flat vector addressed through [`Layout`],
//! which keeps the optimizer and the finite-difference checks simple.

pub mod data;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

/// One training sample: a T x d_dyn dynamic window (oldest month
/// first), a static feature vector, and the scalar target.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqSample {
    pub dynamic: Vec<Vec<f64>>,
    pub static_feats: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { alpha: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeqNetParams {
    pub hidden_lstm: usize,
    pub hidden_static: usize,
    pub hidden_merge: usize,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for SeqNetParams {
    fn default() -> Self {
        SeqNetParams {
            hidden_lstm: 32,
            hidden_static: 16,
            hidden_merge: 32,
            l2_lambda: 0.001,
            batch_size: 512,
            epochs: 5,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

impl SeqNetParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_lstm == 0 || self.hidden_static == 0 || self.hidden_merge == 0 {
            return Err(Error::Config("all hidden sizes must be >= 1".into()));
        }
        if self.l2_lambda < 0.0 {
            return Err(Error::Config("l2_lambda must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

pub const GATES: usize = 4; // input, forget, output, candidate

/// Offsets of each weight block in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub d_dyn: usize,
    pub d_static: usize,
    pub hidden_lstm: usize,
    pub hidden_static: usize,
    pub hidden_merge: usize,
}

impl Layout {
    pub fn new(d_dyn: usize, d_static: usize, p: &SeqNetParams) -> Self {
        Layout {
            d_dyn,
            d_static,
            hidden_lstm: p.hidden_lstm,
            hidden_static: p.hidden_static,
            hidden_merge: p.hidden_merge,
        }
    }

    fn sizes(&self) -> [usize; 10] {
        let (d, s, h, hs, hm) = (
            self.d_dyn,
            self.d_static,
            self.hidden_lstm,
            self.hidden_static,
            self.hidden_merge,
        );
        [
            GATES * h * d, // w_gates (stacked i,f,o,g)
            GATES * h * h, // u_gates
            GATES * h,     // b_gates
            hs * s,        // w_static
            hs,            // b_static
            hm * (h + hs), // w_merge
            hm,            // b_merge
            hm,            // w_out
            1,             // b_out
            0,
        ]
    }

    fn offset(&self, block: usize) -> usize {
        self.sizes()[..block].iter().sum()
    }

    pub fn n_params(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn w_gates(&self) -> Range<usize> {
        self.offset(0)..self.offset(1)
    }
    pub fn u_gates(&self) -> Range<usize> {
        self.offset(1)..self.offset(2)
    }
    pub fn b_gates(&self) -> Range<usize> {
        self.offset(2)..self.offset(3)
    }
    pub fn w_static(&self) -> Range<usize> {
        self.offset(3)..self.offset(4)
    }
    pub fn b_static(&self) -> Range<usize> {
        self.offset(4)..self.offset(5)
    }
    pub fn w_merge(&self) -> Range<usize> {
        self.offset(5)..self.offset(6)
    }
    pub fn b_merge(&self) -> Range<usize> {
        self.offset(6)..self.offset(7)
    }
    pub fn w_out(&self) -> Range<usize> {
        self.offset(7)..self.offset(8)
    }
    pub fn b_out(&self) -> Range<usize> {
        self.offset(8)..self.offset(9)
    }

    /// Ranges of the weight matrices subject to L2 decay (no biases).
    pub fn weight_ranges(&self) -> [Range<usize>; 5] {
        [self.w_gates(), self.u_gates(), self.w_static(), self.w_merge(), self.w_out()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqNetModel {
    pub layout: Layout,
    pub hyper: SeqNetParams,
    pub params: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-timestep activations cached for backpropagation.
#[derive(Debug, Clone, Default)]
struct StepCache {
    gates: [Vec<f64>; GATES], // i, f, o, g (post-activation)
    c: Vec<f64>,
    h: Vec<f64>,
}

/// One LSTM cell step. Gate order in the stacked weights is
/// input, forget, output, candidate.
pub fn lstm_cell(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    w_gates: &[f64],
    u_gates: &[f64],
    b_gates: &[f64],
    hidden: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = x.len();
    if h_prev.len() != hidden
        || c_prev.len() != hidden
        || w_gates.len() != GATES * hidden * d
        || u_gates.len() != GATES * hidden * hidden
        || b_gates.len() != GATES * hidden
    {
        return Err(Error::Validation("lstm cell shape mismatch".into()));
    }
    let cache = cell_step(x, h_prev, c_prev, w_gates, u_gates, b_gates, hidden);
    Ok((cache.h, cache.c))
}

fn cell_step(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    w_gates: &[f64],
    u_gates: &[f64],
    b_gates: &[f64],
    hidden: usize,
) -> StepCache {
    let d = x.len();
    let mut cache = StepCache::default();
    let mut pre = [vec![0.0; hidden], vec![0.0; hidden], vec![0.0; hidden], vec![0.0; hidden]];
    for gate in 0..GATES {
        for u in 0..hidden {
            let mut z = b_gates[gate * hidden + u];
            let w_row = &w_gates[(gate * hidden + u) * d..(gate * hidden + u + 1) * d];
            for (wx, xv) in w_row.iter().zip(x) {
                z += wx * xv;
            }
            let u_row = &u_gates[(gate * hidden + u) * hidden..(gate * hidden + u + 1) * hidden];
            for (uw, hv) in u_row.iter().zip(h_prev) {
                z += uw * hv;
            }
            pre[gate][u] = z;
        }
    }
    for gate in 0..3 {
        cache.gates[gate] = pre[gate].iter().map(|&z| sigmoid(z)).collect();
    }
    cache.gates[3] = pre[3].iter().map(|&z| z.tanh()).collect();
    cache.c = (0..hidden)
        .map(|u| cache.gates[1][u] * c_prev[u] + cache.gates[0][u] * cache.gates[3][u])
        .collect();
    cache.h = (0..hidden).map(|u| cache.gates[2][u] * cache.c[u].tanh()).collect();
    cache
}

struct ForwardCache {
    steps: Vec<StepCache>,
    static_hidden: Vec<f64>, // tanh activated
    merged: Vec<f64>,        // tanh activated
    prediction: f64,
}

fn forward_one(model: &SeqNetModel, sample: &SeqSample) -> ForwardCache {
    let l = &model.layout;
    let p = &model.params;
    let h = l.hidden_lstm;
    let w_gates = &p[l.w_gates()];
    let u_gates = &p[l.u_gates()];
    let b_gates = &p[l.b_gates()];

    let mut steps = Vec::with_capacity(sample.dynamic.len());
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for x in &sample.dynamic {
        let cache = cell_step(x, &h_prev, &c_prev, w_gates, u_gates, b_gates, h);
        h_prev = cache.h.clone();
        c_prev = cache.c.clone();
        steps.push(cache);
    }

    let w_static = &p[l.w_static()];
    let b_static = &p[l.b_static()];
    let static_hidden: Vec<f64> = (0..l.hidden_static)
        .map(|u| {
            let mut z = b_static[u];
            for (w, x) in w_static[u * l.d_static..(u + 1) * l.d_static]
                .iter()
                .zip(&sample.static_feats)
            {
                z += w * x;
            }
            z.tanh()
        })
        .collect();

    let merge_in: Vec<f64> = h_prev.iter().chain(&static_hidden).copied().collect();
    let w_merge = &p[l.w_merge()];
    let b_merge = &p[l.b_merge()];
    let width = h + l.hidden_static;
    let merged: Vec<f64> = (0..l.hidden_merge)
        .map(|u| {
            let mut z = b_merge[u];
            for (w, x) in w_merge[u * width..(u + 1) * width].iter().zip(&merge_in) {
                z += w * x;
            }
            z.tanh()
        })
        .collect();

    let w_out = &p[l.w_out()];
    let b_out = p[l.b_out()][0];
    let prediction = b_out + w_out.iter().zip(&merged).map(|(w, m)| w * m).sum::<f64>();
    ForwardCache { steps, static_hidden, merged, prediction }
}

/// Batch predictions.
pub fn forward(model: &SeqNetModel, batch: &[SeqSample]) -> Vec<f64> {
    batch.par_iter().map(|s| forward_one(model, s).prediction).collect()
}

/// Mean squared error plus `l2_lambda` times the sum of squared weight
/// matrix entries (biases excluded).
pub fn loss(predictions: &[f64], targets: &[f64], model: &SeqNetModel, l2_lambda: f64) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    let n = predictions.len() as f64;
    let mse = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let penalty: f64 = model
        .layout
        .weight_ranges()
        .iter()
        .map(|r| model.params[r.clone()].iter().map(|w| w * w).sum::<f64>())
        .sum();
    mse + l2_lambda * penalty
}

/// Gradient of `d_loss/d_prediction` backpropagated through one
/// sample; accumulates into `grads`.
fn backward_one(model: &SeqNetModel, sample: &SeqSample, cache: &ForwardCache, d_pred: f64, grads: &mut [f64]) {
    let l = &model.layout;
    let p = &model.params;
    let h = l.hidden_lstm;
    let hs = l.hidden_static;
    let hm = l.hidden_merge;
    let width = h + hs;

    // Head.
    let w_out = &p[l.w_out()];
    let (out_w_range, out_b_range) = (l.w_out(), l.b_out());
    for u in 0..hm {
        grads[out_w_range.start + u] += d_pred * cache.merged[u];
    }
    grads[out_b_range.start] += d_pred;

    // Merge layer.
    let merge_in: Vec<f64> =
        cache.steps.last().map_or(vec![0.0; h], |s| s.h.clone()).iter().chain(&cache.static_hidden).copied().collect();
    let w_merge = &p[l.w_merge()];
    let (mw, mb) = (l.w_merge(), l.b_merge());
    let mut d_merge_in = vec![0.0; width];
    for u in 0..hm {
        let dz = d_pred * w_out[u] * (1.0 - cache.merged[u] * cache.merged[u]);
        grads[mb.start + u] += dz;
        for v in 0..width {
            grads[mw.start + u * width + v] += dz * merge_in[v];
            d_merge_in[v] += dz * w_merge[u * width + v];
        }
    }

    // Static branch.
    let (sw, sb) = (l.w_static(), l.b_static());
    for u in 0..hs {
        let sh = cache.static_hidden[u];
        let dz = d_merge_in[h + u] * (1.0 - sh * sh);
        grads[sb.start + u] += dz;
        for v in 0..l.d_static {
            grads[sw.start + u * l.d_static + v] += dz * sample.static_feats[v];
        }
    }

    // LSTM branch, backward through time.
    let u_gates = &p[l.u_gates()];
    let (gw, gu, gb) = (l.w_gates(), l.u_gates(), l.b_gates());
    let d = l.d_dyn;
    let t_len = cache.steps.len();
    let mut dh: Vec<f64> = d_merge_in[..h].to_vec();
    let mut dc = vec![0.0; h];
    for t in (0..t_len).rev() {
        let step = &cache.steps[t];
        let c_prev: Vec<f64> =
            if t == 0 { vec![0.0; h] } else { cache.steps[t - 1].c.clone() };
        let h_prev: Vec<f64> =
            if t == 0 { vec![0.0; h] } else { cache.steps[t - 1].h.clone() };
        let x = &sample.dynamic[t];

        let mut dz = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        for u in 0..h {
            let tanh_c = step.c[u].tanh();
            let (i, f, o, g) =
                (step.gates[0][u], step.gates[1][u], step.gates[2][u], step.gates[3][u]);
            let d_o = dh[u] * tanh_c;
            let d_c = dc[u] + dh[u] * o * (1.0 - tanh_c * tanh_c);
            let d_i = d_c * g;
            let d_f = d_c * c_prev[u];
            let d_g = d_c * i;
            dz[0][u] = d_i * i * (1.0 - i);
            dz[1][u] = d_f * f * (1.0 - f);
            dz[2][u] = d_o * o * (1.0 - o);
            dz[3][u] = d_g * (1.0 - g * g);
            dc[u] = d_c * f;
        }
        let mut dh_prev = vec![0.0; h];
        for gate in 0..GATES {
            for u in 0..h {
                let z = dz[gate][u];
                grads[gb.start + gate * h + u] += z;
                let w_off = gw.start + (gate * h + u) * d;
                for v in 0..d {
                    grads[w_off + v] += z * x[v];
                }
                let u_off = gu.start + (gate * h + u) * h;
                for v in 0..h {
                    grads[u_off + v] += z * h_prev[v];
                    dh_prev[v] += z * u_gates[(gate * h + u) * h + v];
                }
            }
        }
        dh = dh_prev;
    }
}

/// Exact batch gradients of [`loss`] for every parameter. Returns the
/// loss value alongside.
pub fn backward(model: &SeqNetModel, batch: &[SeqSample], l2_lambda: f64) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    // Per-sample work in parallel, reduced in index order so results
    // are bit-reproducible.
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|sample| {
            let cache = forward_one(model, sample);
            let mut grads = vec![0.0; model.layout.n_params()];
            let d_pred = 2.0 * (cache.prediction - sample.target) / n;
            backward_one(model, sample, &cache, d_pred, &mut grads);
            let sq = (cache.prediction - sample.target).powi(2);
            (sq, grads)
        })
        .collect();

    let mut grads = vec![0.0; model.layout.n_params()];
    let mut sq_sum = 0.0;
    for (sq, g) in partials {
        sq_sum += sq;
        for (acc, v) in grads.iter_mut().zip(g) {
            *acc += v;
        }
    }
    for range in model.layout.weight_ranges() {
        for i in range {
            grads[i] += 2.0 * l2_lambda * model.params[i];
        }
    }
    let total = sq_sum / n
        + l2_lambda
            * model
                .layout
                .weight_ranges()
                .iter()
                .map(|r| model.params[r.clone()].iter().map(|w| w * w).sum::<f64>())
                .sum::<f64>();
    (total, grads)
}

/// Seeded uniform +-1/sqrt(fan_in) initialization per weight block,
/// zero biases.
pub fn init_model(d_dyn: usize, d_static: usize, hyper: &SeqNetParams) -> Result<SeqNetModel> {
    hyper.validate()?;
    let layout = Layout::new(d_dyn, d_static, hyper);
    let mut params = vec![0.0; layout.n_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let h = hyper.hidden_lstm;
    let fan_ins = [
        (layout.w_gates(), d_dyn),
        (layout.u_gates(), h),
        (layout.w_static(), d_static.max(1)),
        (layout.w_merge(), h + hyper.hidden_static),
        (layout.w_out(), hyper.hidden_merge),
    ];
    for (range, fan_in) in fan_ins {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for i in range {
            params[i] = rng.gen_range(-bound..bound);
        }
    }
    Ok(SeqNetModel { layout, hyper: *hyper, params })
}

/// Per-epoch train/validation RMSE.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochLog {
    pub train_rmse: Vec<f64>,
    pub val_rmse: Vec<f64>,
}

fn rmse_of(preds: &[f64], targets: &[f64]) -> f64 {
    let n = preds.len() as f64;
    (preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt()
}

/// Adam training over shuffled mini-batches; the final incomplete
/// batch is trained on as-is.
pub fn train(
    train_samples: &[SeqSample],
    val_samples: &[SeqSample],
    hyper: &SeqNetParams,
) -> Result<(SeqNetModel, EpochLog)> {
    hyper.validate()?;
    if train_samples.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    let d_dyn = train_samples[0].dynamic.first().map_or(0, |x| x.len());
    let d_static = train_samples[0].static_feats.len();
    let mut model = init_model(d_dyn, d_static, hyper)?;

    let n_params = model.layout.n_params();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut step = 0u64;
    // Distinct stream from the init rng so adding epochs never
    // perturbs the initial weights.
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = EpochLog::default();
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    for _epoch in 0..hyper.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<SeqSample> =
                chunk.iter().map(|&i| train_samples[i].clone()).collect();
            let (batch_loss, grads) = backward(&model, &batch, hyper.l2_lambda);
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: batch loss {batch_loss} at step {step}"
                )));
            }
            step += 1;
            let a = hyper.adam;
            let bias1 = 1.0 - a.beta1.powi(step as i32);
            let bias2 = 1.0 - a.beta2.powi(step as i32);
            for i in 0..n_params {
                m1[i] = a.beta1 * m1[i] + (1.0 - a.beta1) * grads[i];
                m2[i] = a.beta2 * m2[i] + (1.0 - a.beta2) * grads[i] * grads[i];
                let m_hat = m1[i] / bias1;
                let v_hat = m2[i] / bias2;
                model.params[i] -= a.alpha * m_hat / (v_hat.sqrt() + a.epsilon);
            }
        }
        let train_preds = forward(&model, train_samples);
        let train_targets: Vec<f64> = train_samples.iter().map(|s| s.target).collect();
        log.train_rmse.push(rmse_of(&train_preds, &train_targets));
        if !val_samples.is_empty() {
            let val_preds = forward(&model, val_samples);
            let val_targets: Vec<f64> = val_samples.iter().map(|s| s.target).collect();
            log.val_rmse.push(rmse_of(&val_preds, &val_targets));
        }
    }
    Ok((model, log))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

pub fn save_model(model: &SeqNetModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(model)
        .map_err(|e| Error::Validation(format!("serialize seqnet model: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SeqNetModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("parse seqnet model {path:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_samples(n: usize, t: usize, d_dyn: usize, d_static: usize) -> Vec<SeqSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        (0..n)
            .map(|_| SeqSample {
                dynamic: (0..t)
                    .map(|_| (0..d_dyn).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
                static_feats: (0..d_static).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target: rng.gen_range(-2.0..2.0),
            })
            .collect()
    }

    fn tiny_hyper() -> SeqNetParams {
        SeqNetParams {
            hidden_lstm: 3,
            hidden_static: 2,
            hidden_merge: 2,
            l2_lambda: 0.01,
            batch_size: 4,
            epochs: 2,
            seed: 7,
            ..SeqNetParams::default()
        }
    }

    #[test]
    fn cell_matches_scalar_recurrence() {
        // hidden=1, d=1: every gate collapses to a scalar expression we
        // can recompute directly.
        let (x, h0, c0) = (0.5, 0.2, -0.3);
        let w = [0.1, -0.2, 0.3, 0.4]; // i,f,o,g input weights
        let u = [0.5, 0.6, -0.7, 0.8];
        let b = [0.01, 0.02, 0.03, 0.04];
        let (h, c) = lstm_cell(&[x], &[h0], &[c0], &w, &u, &b, 1).unwrap();
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = s(w[0] * x + u[0] * h0 + b[0]);
        let f = s(w[1] * x + u[1] * h0 + b[1]);
        let o = s(w[2] * x + u[2] * h0 + b[2]);
        let g = (w[3] * x + u[3] * h0 + b[3]).tanh();
        let c_ref = f * c0 + i * g;
        assert_relative_eq!(c[0], c_ref, epsilon = 1e-12);
        assert_relative_eq!(h[0], o * c_ref.tanh(), epsilon = 1e-12);
    }

    #[test]
    fn cell_shape_mismatch_rejected() {
        let err = lstm_cell(&[0.0], &[0.0, 0.0], &[0.0], &[0.0; 4], &[0.0; 4], &[0.0; 4], 1);
        assert!(err.is_err());
    }

    #[test]
    fn cell_saturated_forget_preserves_state() {
        // Huge forget bias, tiny input gate: c stays ~c_prev.
        let (h, c) = lstm_cell(
            &[1.0],
            &[0.0],
            &[0.9],
            &[0.0; 4],
            &[0.0; 4],
            &[-30.0, 30.0, 0.0, 0.0],
            1,
        )
        .unwrap();
        assert_relative_eq!(c[0], 0.9, epsilon = 1e-9);
        assert_relative_eq!(h[0], 0.5 * 0.9f64.tanh(), epsilon = 1e-9);
    }

    #[test]
    fn forward_hand_check_zero_weights() {
        // All-zero parameters: every activation is tanh(0)=0, so the
        // prediction is exactly the output bias.
        let hyper = tiny_hyper();
        let mut model = init_model(2, 2, &hyper).unwrap();
        model.params.iter_mut().for_each(|p| *p = 0.0);
        let b_out = model.layout.b_out().start;
        model.params[b_out] = 1.25;
        let preds = forward(&model, &tiny_samples(3, 4, 2, 2));
        assert!(preds.iter().all(|&p| (p - 1.25).abs() < 1e-12));
    }

    #[test]
    fn loss_penalty_excludes_biases() {
        let hyper = tiny_hyper();
        let mut model = init_model(2, 2, &hyper).unwrap();
        model.params.iter_mut().for_each(|p| *p = 0.0);
        for r in [model.layout.b_gates(), model.layout.b_static(), model.layout.b_merge(), model.layout.b_out()] {
            for i in r {
                model.params[i] = 5.0;
            }
        }
        let base = loss(&[0.0], &[0.0], &model, 0.0);
        let with_l2 = loss(&[0.0], &[0.0], &model, 1.0);
        // Large biases contribute nothing to the penalty term itself,
        // though they do shift the prediction (computed separately here).
        assert_relative_eq!(with_l2, base, epsilon = 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let hyper = tiny_hyper();
        let samples = tiny_samples(3, 3, 2, 2);
        let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
        let model = init_model(2, 2, &hyper).unwrap();
        let (analytic_loss, grads) = backward(&model, &samples, hyper.l2_lambda);
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..model.layout.n_params() {
            let mut plus = model.clone();
            plus.params[i] += eps;
            let mut minus = model.clone();
            minus.params[i] -= eps;
            let lp = loss(&forward(&plus, &samples), &targets, &plus, hyper.l2_lambda);
            let lm = loss(&forward(&minus, &samples), &targets, &minus, hyper.l2_lambda);
            let numeric = (lp - lm) / (2.0 * eps);
            worst = worst.max((numeric - grads[i]).abs());
        }
        assert!(worst < 1e-7, "max grad error {worst}");
        let direct = loss(&forward(&model, &samples), &targets, &model, hyper.l2_lambda);
        assert_relative_eq!(analytic_loss, direct, epsilon = 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let hyper = SeqNetParams { epochs: 30, batch_size: 8, ..tiny_hyper() };
        let samples = tiny_samples(16, 3, 2, 2);
        let (model_a, log_a) = train(&samples, &samples, &hyper).unwrap();
        let (model_b, log_b) = train(&samples, &samples, &hyper).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(model_a.params, model_b.params);
        assert!(log_a.train_rmse.last().unwrap() < log_a.train_rmse.first().unwrap());
        assert_eq!(log_a.val_rmse.len(), hyper.epochs);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let hyper = SeqNetParams {
            adam: AdamParams { alpha: 0.0, ..AdamParams::default() },
            ..tiny_hyper()
        };
        let samples = tiny_samples(6, 3, 2, 2);
        let init = init_model(2, 2, &hyper).unwrap();
        let (trained, _) = train(&samples, &[], &hyper).unwrap();
        assert_eq!(init.params, trained.params);
    }

    #[test]
    fn batch_forward_matches_single_forward() {
        let model = init_model(2, 2, &tiny_hyper()).unwrap();
        let samples = tiny_samples(5, 3, 2, 2);
        let batched = forward(&model, &samples);
        for (s, &p) in samples.iter().zip(&batched) {
            assert_eq!(forward(&model, std::slice::from_ref(s))[0], p);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let hyper = tiny_hyper();
        let mut samples = tiny_samples(4, 3, 2, 2);
        samples[0].target = f64::NAN;
        match train(&samples, &[], &hyper) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("diverged")),
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn model_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seqnet.json");
        let model = init_model(3, 4, &tiny_hyper()).unwrap();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
        let samples = tiny_samples(2, 3, 3, 4);
        assert_eq!(forward(&model, &samples), forward(&back, &samples));
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let bad = SeqNetParams { hidden_lstm: 0, ..SeqNetParams::default() };
        assert!(init_model(2, 2, &bad).is_err());
        let bad = SeqNetParams { l2_lambda: -0.1, ..SeqNetParams::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn layout_blocks_tile_the_parameter_vector() {
        let l = Layout::new(5, 7, &SeqNetParams::default());
        let ranges = [
            l.w_gates(),
            l.u_gates(),
            l.b_gates(),
            l.w_static(),
            l.b_static(),
            l.w_merge(),
            l.b_merge(),
            l.w_out(),
            l.b_out(),
        ];
        let mut end = 0;
        for r in &ranges {
            assert_eq!(r.start, end);
            end = r.end;
        }
        assert_eq!(end, l.n_params());
    }
}
