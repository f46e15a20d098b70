//! Quantization-aware training: hard (integer) forward on the quantized
//! model, surrogate-gradient backward into the full-precision shadow,
//! momentum update, re-quantization after every batch.
//!
//! Classification heads are trained through a per-cell softmax over the
//! surrogate rates `clamp(v / theta, 0, N_max)` rather than raw integer
//! counts; the box head is trained by masked MSE directly on its
//! potentials.

use std::path::Path;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{labels_to_targets, pointcloud_to_bev, BEVGrid, GroundTruthMaps, BOX_CHANNELS};
use crate::codec::{encode_rate, encode_rate_grad, BoxNorm, EncoderParams};
use crate::config::{LossWeights, TrainConfig};
use crate::dataset::SceneRecord;
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::grid::{Grid2, Grid3};
use crate::model::SpklModel;
use crate::net::{
    accumulate_f64, build_network, grad_wrt_input, grad_wrt_params, ForwardTrace, NetworkGraph,
};
use crate::qtensor::ShadowParams;

const PROB_EPS: f64 = 1e-7;
/// Positive-cell weight cap for the keypoint focal loss.
const POS_WEIGHT_CAP: f64 = 100.0;
/// Floor keeping encoder scales positive through updates.
const ALPHA_FLOOR: f64 = 1e-3;
/// Box targets span this many spike windows of potential so they sit in
/// the natural magnitude range of integer head accumulators.
const BOX_TARGET_WINDOWS: u32 = 1;
/// Initial firing threshold (accumulator units).
const THETA_INIT: f64 = 24.0;
/// Initial bias in quantized accumulator units; keeps resting potentials
/// non-negative so surrogate gates start open.
const BIAS_INIT_Q: f64 = 8.0;
/// Numerical floor for gradient normalization.
const GRAD_RMS_EPS: f64 = 1e-12;
/// Keypoint supervision weight for the 8 neighbors of a center cell
/// relative to the positive-cell weight. A single positive cell per
/// object is too sparse a signal to shape the trunk; the decoder's 3x3
/// peak rule makes neighbor foregrounds harmless.
const KP_RING_WEIGHT: f64 = 0.3;
/// Softmax temperature on surrogate rates. Confidence must cost a
/// margin of several integer spikes: the decoder compares floor(v/theta)
/// counts, and an un-tempered softmax is satisfied by sub-spike margins
/// the integer readout cannot see.
const SOFTMAX_TEMP: f64 = 8.0;
/// Surrogate slope outside the active rate region. A hard gate makes
/// total silence absorbing (zero gradient everywhere); the leak keeps a
/// recovery path open.
const SURROGATE_LEAK: f64 = 0.1;

/// Leaky surrogate rate and its partials w.r.t. potential and threshold:
/// slope 1 inside `[0, n_max]`, `SURROGATE_LEAK` outside.
#[inline]
fn leaky_rate(v: f64, th: f64, n_max: f64) -> (f64, f64, f64) {
    let r = v / th;
    let (value, slope) = if r < 0.0 {
        (SURROGATE_LEAK * r, SURROGATE_LEAK)
    } else if r > n_max {
        (n_max + SURROGATE_LEAK * (r - n_max), SURROGATE_LEAK)
    } else {
        (r, 1.0)
    };
    (value, slope / th, -slope * v / (th * th))
}

/// Focal loss for one cell: `-alpha * (1 - p_t)^gamma * ln(p_t)` with
/// `p_t = p` for a positive target and `1 - p` otherwise. The probability
/// is clamped away from 0 and 1 before the logarithm.
pub fn focal_loss(pred_prob: f64, target: bool, gamma: f64, alpha: f64) -> f64 {
    let p_t = if target { pred_prob } else { 1.0 - pred_prob };
    let p_t = p_t.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -alpha * (1.0 - p_t).powf(gamma) * p_t.ln()
}

/// Masked mean-squared error over box channels: mean over keypoint cells
/// and the five channels; zero when the mask is empty.
pub fn mse_loss(pred_potentials: &Grid3<f64>, target_boxes: &Grid3<f64>, keypoint_mask: &Grid2<u8>) -> f64 {
    let (ch, h, w) = pred_potentials.shape();
    debug_assert_eq!(ch, BOX_CHANNELS);
    let mut sum = 0.0;
    let mut cells = 0usize;
    for r in 0..h {
        for c in 0..w {
            if *keypoint_mask.get(r, c) == 0 {
                continue;
            }
            cells += 1;
            for k in 0..ch {
                let d = pred_potentials.get(k, r, c) - target_boxes.get(k, r, c);
                sum += d * d;
            }
        }
    }
    if cells == 0 {
        0.0
    } else {
        sum / (cells * ch) as f64
    }
}

/// Per-layer parameter gradients (or optimizer moments, which share the
/// shape).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub alphas: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(shadow: &ShadowParams) -> Self {
        Self {
            layers: shadow
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                    thresholds: vec![0.0; l.thresholds.len()],
                })
                .collect(),
            alphas: vec![0.0; shadow.encoder_alpha.len()],
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += y;
            }
            for (x, y) in a.thresholds.iter_mut().zip(&b.thresholds) {
                *x += y;
            }
        }
        for (x, y) in self.alphas.iter_mut().zip(&other.alphas) {
            *x += y;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in self.layers.iter_mut() {
            l.weights.iter_mut().for_each(|x| *x *= k);
            l.biases.iter_mut().for_each(|x| *x *= k);
            l.thresholds.iter_mut().for_each(|x| *x *= k);
        }
        self.alphas.iter_mut().for_each(|x| *x *= k);
    }

    pub fn l2_norm(&self) -> f64 {
        let mut sq = 0.0;
        for l in &self.layers {
            sq += l.weights.iter().map(|x| x * x).sum::<f64>();
            sq += l.biases.iter().map(|x| x * x).sum::<f64>();
            sq += l.thresholds.iter().map(|x| x * x).sum::<f64>();
        }
        sq += self.alphas.iter().map(|x| x * x).sum::<f64>();
        sq.sqrt()
    }
}

/// Activations of one forward pass in the shape the backward pass
/// consumes, hard (integer trace) or soft (real surrogate).
pub struct BackwardStates {
    /// Per-layer input rates, execution order.
    pub inputs: Vec<Grid3<f64>>,
    /// Per-layer pre-activation accumulators.
    pub accs: Vec<Grid3<f64>>,
    /// Pre-clamp skip-merge sums per decoder stage.
    pub merges: Vec<Grid3<f64>>,
    /// Thresholds the forward used (quantized or shadow).
    pub thetas: Vec<Vec<f64>>,
    /// Accumulator-unit weights the forward used (quantized integers, or
    /// shadow weights over frozen scales).
    pub weights: Vec<Vec<f64>>,
    /// Frozen per-output-channel scales for the weight-update chain.
    pub scales: Vec<Vec<f64>>,
}

impl BackwardStates {
    /// Lift an integer forward trace into backward form.
    pub fn from_trace(net: &NetworkGraph, trace: &ForwardTrace) -> Self {
        Self {
            inputs: trace.inputs.iter().map(|g| g.map(|v| v as f64)).collect(),
            accs: trace.accs.iter().map(|g| g.map(|v| v as f64)).collect(),
            merges: trace.merges.iter().map(|g| g.map(|v| v as f64)).collect(),
            thetas: net
                .layers
                .iter()
                .map(|l| l.thresholds.quantized().iter().map(|&t| t as f64).collect())
                .collect(),
            weights: net
                .layers
                .iter()
                .map(|l| l.weights.q.iter().map(|&q| q as f64).collect())
                .collect(),
            scales: net.layers.iter().map(|l| l.weights.scale.clone()).collect(),
        }
    }
}

/// Run the soft surrogate forward: real arithmetic, shadow parameters in
/// accumulator units over the frozen scales of the (synced) quantized
/// graph, clamps kept, floors and roundings dropped. This is the
/// function whose exact derivatives the backward pass implements.
pub fn soft_states(net: &NetworkGraph, shadow: &ShadowParams, bev: &BEVGrid) -> Result<BackwardStates> {
    let n_max = net.window_max as f64;
    let (c, h, w) = bev.data.shape();
    let mut rates = Grid3::<f64>::zeros(c, h, w);
    for ch in 0..c {
        let alpha = shadow.encoder_alpha[ch];
        let src = bev.data.channel(ch);
        let dst = rates.channel_mut(ch);
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (alpha * v).clamp(0.0, n_max);
        }
    }

    let n = net.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut accs = Vec::with_capacity(n);
    let mut thetas = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    for (layer, sh) in net.layers.iter().zip(&shadow.layers) {
        let per = layer.weights.per_channel();
        let mut w_eff = vec![0.0; sh.weights.len()];
        for oc in 0..layer.out_channels() {
            let s = layer.weights.scale[oc];
            for i in 0..per {
                w_eff[oc * per + i] = sh.weights[oc * per + i] / s;
            }
        }
        weights.push(w_eff);
        scales.push(layer.weights.scale.clone());
        thetas.push(sh.thresholds.iter().map(|&t| t.clamp(1.0, 31.0)).collect());
        inputs.push(Grid3::zeros(0, 0, 0)); // placeholders, filled below
        accs.push(Grid3::zeros(0, 0, 0));
    }

    // re-walk in execution order, mirroring NetworkGraph::forward_traced
    let run = |li: usize, input: &Grid3<f64>| -> Grid3<f64> {
        let layer = &net.layers[li];
        let sh = &shadow.layers[li];
        let per = layer.weights.per_channel();
        let mut b_eff = vec![0.0; sh.biases.len()];
        for oc in 0..layer.out_channels() {
            b_eff[oc] = sh.biases[oc] / layer.weights.scale[oc];
        }
        let mut w_eff = vec![0.0; sh.weights.len()];
        for oc in 0..layer.out_channels() {
            let s = layer.weights.scale[oc];
            for i in 0..per {
                w_eff[oc * per + i] = sh.weights[oc * per + i] / s;
            }
        }
        accumulate_f64(
            layer.kind,
            &w_eff,
            layer.weights.shape,
            &b_eff,
            layer.stride,
            layer.padding,
            input,
        )
    };
    let act = |li: usize, acc: &Grid3<f64>, thetas: &[Vec<f64>]| -> Grid3<f64> {
        let mut out = acc.clone();
        for ch in 0..out.channels() {
            let th = thetas[li][ch];
            for v in out.channel_mut(ch) {
                *v = leaky_rate(*v, th, n_max).0;
            }
        }
        out
    };

    let d = net.depth;
    let mut merges = vec![Grid3::<f64>::zeros(0, 0, 0); d];

    let stem_acc = run(net.stem(), &rates);
    inputs[net.stem()] = rates;
    let stem_out = act(net.stem(), &stem_acc, &thetas);
    accs[net.stem()] = stem_acc;

    let mut enc_outs: Vec<Grid3<f64>> = Vec::with_capacity(d);
    let mut cur = stem_out.clone();
    for i in 0..d {
        let li = net.enc(i);
        let acc = run(li, &cur);
        inputs[li] = cur.clone();
        cur = act(li, &acc, &thetas);
        accs[li] = acc;
        enc_outs.push(cur.clone());
    }
    for j in (0..d).rev() {
        let li = net.dec(j);
        let acc = run(li, &cur);
        inputs[li] = cur.clone();
        let dec_out = act(li, &acc, &thetas);
        accs[li] = acc;
        let skip = if j == 0 { &stem_out } else { &enc_outs[j - 1] };
        let mut pre = dec_out;
        for (m, &s) in pre.as_mut_slice().iter_mut().zip(skip.as_slice()) {
            *m += s;
        }
        merges[j] = pre.clone();
        cur = pre.map(|v| if v > n_max { n_max + SURROGATE_LEAK * (v - n_max) } else { v });
    }
    for li in [net.head_kp(), net.head_box(), net.head_rot()] {
        let acc = run(li, &cur);
        inputs[li] = cur.clone();
        accs[li] = acc;
    }

    Ok(BackwardStates {
        inputs,
        accs,
        merges,
        thetas,
        weights,
        scales,
    })
}

/// Loss values and the gradients flowing into the three head
/// accumulators (loss weights already applied).
pub struct LossOutput {
    pub total: f64,
    pub kp: f64,
    pub box_: f64,
    pub rot: f64,
    pub grad_kp_acc: Grid3<f64>,
    pub grad_box_acc: Grid3<f64>,
    pub grad_rot_acc: Grid3<f64>,
    pub grad_kp_theta: Vec<f64>,
    pub grad_rot_theta: Vec<f64>,
}

/// Softmax-focal machinery shared by the keypoint and rotation heads.
/// Returns per-channel log-probabilities for one cell.
fn log_softmax(rates: &[f64]) -> Vec<f64> {
    let m = rates.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = rates.iter().map(|&s| (s - m).exp()).sum();
    let ln_z = m + z.ln();
    rates.iter().map(|&s| s - ln_z).collect()
}

/// `d(focal)/d(rate_j)` factor: gradient of the focal term w.r.t. the
/// softmax inputs is `g * (delta_tj - p_j)` with the bounded prefactor
/// `g = -alpha * ((1-p_t)^gamma - gamma * p_t * (1-p_t)^(gamma-1) * ln p_t)`.
fn focal_softmax_prefactor(log_p: &[f64], target: usize, gamma: f64, alpha: f64) -> f64 {
    let p_t = log_p[target].exp();
    // 1 - p_t computed from the other channels to survive p_t ~ 1
    let omp: f64 = log_p
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, &lp)| lp.exp())
        .sum();
    let term1 = omp.powf(gamma);
    let term2 = if gamma > 0.0 {
        gamma * p_t * omp.powf(gamma - 1.0) * log_p[target]
    } else {
        0.0
    };
    -alpha * (term1 - term2)
}

fn focal_value(log_p: &[f64], target: usize, gamma: f64, alpha: f64) -> f64 {
    let omp: f64 = log_p
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, &lp)| lp.exp())
        .sum();
    -alpha * omp.powf(gamma) * log_p[target]
}

/// Assemble the detection loss from head states.
///
/// Keypoint head: focal loss over a 2-way softmax of surrogate rates at
/// every cell, positives reweighted by the negative/positive cell ratio
/// (capped). Rotation head: focal loss over an R-way softmax at keypoint
/// cells. Box head: masked MSE directly on potentials against normalized
/// targets.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    kp_acc: &Grid3<f64>,
    box_acc: &Grid3<f64>,
    rot_acc: &Grid3<f64>,
    kp_theta: &[f64],
    rot_theta: &[f64],
    targets: &GroundTruthMaps,
    box_norm: &BoxNorm,
    lw: &LossWeights,
    window_max: u32,
) -> LossOutput {
    let (_, h, w) = kp_acc.shape();
    let r_bins = rot_acc.channels();
    let mut grad_kp_acc = Grid3::<f64>::zeros(2, h, w);
    let mut grad_box_acc = Grid3::<f64>::zeros(BOX_CHANNELS, h, w);
    let mut grad_rot_acc = Grid3::<f64>::zeros(r_bins, h, w);
    let mut grad_kp_theta = vec![0.0; 2];
    let mut grad_rot_theta = vec![0.0; r_bins];

    let kp_cells = targets.keypoint_cells();
    let n_pos = kp_cells.len();
    let n_neg = h * w - n_pos;
    let w_pos = if n_pos == 0 {
        1.0
    } else {
        (n_neg as f64 / n_pos as f64).min(POS_WEIGHT_CAP)
    };
    // foreground supervision splat: centers at full positive weight, their
    // 3x3 ring at a fraction; everything else is background
    let mut cell_weight = vec![1.0f64; h * w];
    let mut cell_positive = vec![false; h * w];
    for &(r, c) in &kp_cells {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let idx = nr as usize * w + nc as usize;
                let wgt = if dr == 0 && dc == 0 { w_pos } else { KP_RING_WEIGHT * w_pos };
                if !cell_positive[idx] || wgt > cell_weight[idx] {
                    cell_positive[idx] = true;
                    cell_weight[idx] = cell_weight[idx].max(wgt);
                }
            }
        }
    }
    let weight_total: f64 = cell_weight.iter().sum();

    let n_max = window_max as f64;
    let rate = |v: f64, th: f64| leaky_rate(v, th, n_max).0 / SOFTMAX_TEMP;
    let rate_grad = |v: f64, th: f64| -> (f64, f64) {
        let (_, dv, dth) = leaky_rate(v, th, n_max);
        (dv / SOFTMAX_TEMP, dth / SOFTMAX_TEMP)
    };

    // keypoint head, every cell
    let mut loss_kp = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = [*kp_acc.get(0, r, c), *kp_acc.get(1, r, c)];
            let s = [rate(v[0], kp_theta[0]), rate(v[1], kp_theta[1])];
            let log_p = log_softmax(&s);
            let positive = cell_positive[r * w + c];
            let target = usize::from(positive);
            let cell_w = cell_weight[r * w + c];
            loss_kp += cell_w * focal_value(&log_p, target, lw.focal_gamma, lw.focal_alpha);
            let g = focal_softmax_prefactor(&log_p, target, lw.focal_gamma, lw.focal_alpha);
            let upstream = lw.w_kp * cell_w / weight_total;
            for j in 0..2 {
                let delta = if j == target { 1.0 } else { 0.0 };
                let ds = g * (delta - log_p[j].exp());
                let (dv, dth) = rate_grad(v[j], kp_theta[j]);
                *grad_kp_acc.get_mut(j, r, c) += upstream * ds * dv;
                grad_kp_theta[j] += upstream * ds * dth;
            }
        }
    }
    loss_kp /= weight_total;

    // rotation head, keypoint cells only
    let mut loss_rot = 0.0;
    if n_pos > 0 && lw.w_rot > 0.0 {
        for &(r, c) in &kp_cells {
            let target = *targets.rotation_map.get(r, c) as usize;
            let v: Vec<f64> = (0..r_bins).map(|b| *rot_acc.get(b, r, c)).collect();
            let s: Vec<f64> = v
                .iter()
                .zip(rot_theta)
                .map(|(&vv, &th)| rate(vv, th))
                .collect();
            let log_p = log_softmax(&s);
            loss_rot += focal_value(&log_p, target, lw.focal_gamma, lw.focal_alpha);
            let g = focal_softmax_prefactor(&log_p, target, lw.focal_gamma, lw.focal_alpha);
            let upstream = lw.w_rot / n_pos as f64;
            for j in 0..r_bins {
                let delta = if j == target { 1.0 } else { 0.0 };
                let ds = g * (delta - log_p[j].exp());
                let (dv, dth) = rate_grad(v[j], rot_theta[j]);
                *grad_rot_acc.get_mut(j, r, c) += upstream * ds * dv;
                grad_rot_theta[j] += upstream * ds * dth;
            }
        }
        loss_rot /= n_pos as f64;
    }

    // box head, keypoint cells only, potentials against normalized
    // targets; residuals are measured in units of the target span so the
    // regression term shares a scale with the focal terms
    let mut loss_box = 0.0;
    if n_pos > 0 && lw.w_box > 0.0 {
        let span = (window_max * BOX_TARGET_WINDOWS) as f64;
        let denom = (n_pos * BOX_CHANNELS) as f64 * span * span;
        for &(r, c) in &kp_cells {
            for k in 0..BOX_CHANNELS {
                let target = box_norm.encode(k, *targets.box_map.get(k, r, c));
                let diff = box_acc.get(k, r, c) - target;
                loss_box += diff * diff;
                *grad_box_acc.get_mut(k, r, c) += lw.w_box * 2.0 * diff / denom;
            }
        }
        loss_box /= denom;
    }

    LossOutput {
        total: lw.w_kp * loss_kp + lw.w_box * loss_box + lw.w_rot * loss_rot,
        kp: loss_kp,
        box_: loss_box,
        rot: loss_rot,
        grad_kp_acc,
        grad_box_acc,
        grad_rot_acc,
        grad_kp_theta,
        grad_rot_theta,
    }
}

/// Backward rule through a spiking activation given the pre-activation
/// accumulator. In straight-through mode the potential path copies the
/// upstream gradient over the active region (the training rule); in exact
/// mode it takes the soft derivative `1/theta` (the surrogate the
/// finite-difference oracle differentiates). The threshold path is the
/// surrogate derivative in both modes.
fn act_backward(
    acc: &Grid3<f64>,
    theta: &[f64],
    n_max: f64,
    upstream: &Grid3<f64>,
    ste_copy: bool,
) -> (Grid3<f64>, Vec<f64>) {
    let (c, h, w) = acc.shape();
    let mut grad_acc = Grid3::<f64>::zeros(c, h, w);
    let mut grad_theta = vec![0.0; c];
    for ch in 0..c {
        let th = theta[ch];
        let vs = acc.channel(ch);
        let ups = upstream.channel(ch);
        let ga = grad_acc.channel_mut(ch);
        let mut gt = 0.0;
        for i in 0..vs.len() {
            if ste_copy {
                // straight-through copy with clamp gating
                let r = vs[i] / th;
                if (0.0..=n_max).contains(&r) {
                    ga[i] = ups[i];
                    gt += -ups[i] * vs[i] / (th * th);
                }
            } else {
                let (_, dv, dth) = leaky_rate(vs[i], th, n_max);
                ga[i] = ups[i] * dv;
                gt += ups[i] * dth;
            }
        }
        grad_theta[ch] = gt;
    }
    (grad_acc, grad_theta)
}

/// Full backward pass from head-accumulator gradients down to shadow
/// parameter gradients.
pub fn backward(
    net: &NetworkGraph,
    states: &BackwardStates,
    bev: &BEVGrid,
    alphas: &[f64],
    loss: &LossOutput,
    ste_copy: bool,
) -> Result<Gradients> {
    let n_max = net.window_max as f64;
    let mut grads = Gradients {
        layers: net
            .layers
            .iter()
            .map(|l| LayerGrads {
                weights: vec![0.0; l.weights.q.len()],
                biases: vec![0.0; l.out_channels()],
                thresholds: vec![0.0; l.out_channels()],
            })
            .collect(),
        alphas: vec![0.0; alphas.len()],
    };

    let apply_params = |grads: &mut Gradients, li: usize, grad_acc: &Grid3<f64>, input: &Grid3<f64>| {
        let layer = &net.layers[li];
        let (gw, gb) = grad_wrt_params(
            layer.kind,
            layer.weights.shape,
            layer.stride,
            layer.padding,
            grad_acc,
            input,
        );
        let per = layer.weights.per_channel();
        let dst = &mut grads.layers[li];
        for oc in 0..layer.out_channels() {
            let s = states.scales[li][oc];
            for i in 0..per {
                dst.weights[oc * per + i] += gw[oc * per + i] / s;
            }
            dst.biases[oc] += gb[oc] / s;
        }
    };
    let input_grad = |li: usize, grad_acc: &Grid3<f64>, in_dims: (usize, usize)| -> Grid3<f64> {
        let layer = &net.layers[li];
        grad_wrt_input(
            layer.kind,
            &states.weights[li],
            layer.weights.shape,
            layer.stride,
            layer.padding,
            grad_acc,
            in_dims,
        )
    };

    // heads: loss gradients arrive on the accumulators directly
    let trunk = &states.inputs[net.head_kp()];
    let trunk_dims = (trunk.height(), trunk.width());
    let mut grad_trunk = Grid3::<f64>::zeros(trunk.channels(), trunk_dims.0, trunk_dims.1);
    for (li, grad_acc, theta_grad) in [
        (net.head_kp(), &loss.grad_kp_acc, Some(&loss.grad_kp_theta)),
        (net.head_box(), &loss.grad_box_acc, None),
        (net.head_rot(), &loss.grad_rot_acc, Some(&loss.grad_rot_theta)),
    ] {
        apply_params(&mut grads, li, grad_acc, &states.inputs[li]);
        if let Some(tg) = theta_grad {
            for (dst, &g) in grads.layers[li].thresholds.iter_mut().zip(tg.iter()) {
                *dst += g;
            }
        }
        let gi = input_grad(li, grad_acc, trunk_dims);
        for (a, &b) in grad_trunk.as_mut_slice().iter_mut().zip(gi.as_slice()) {
            *a += b;
        }
    }

    // spike-output gradients waiting for each trunk layer
    let mut pending: Vec<Option<Grid3<f64>>> = vec![None; net.layers.len()];
    let add_pending = |pending: &mut Vec<Option<Grid3<f64>>>, li: usize, g: &Grid3<f64>| {
        match &mut pending[li] {
            Some(existing) => {
                for (a, &b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.clone()),
        }
    };

    // decoder stages, last-executed first
    let mut grad_merged = grad_trunk;
    for j in 0..net.depth {
        let li = net.dec(j);
        // saturation gate of the skip merge (leaky above the cap)
        let mut grad_pre = grad_merged;
        for (g, &pre) in grad_pre.as_mut_slice().iter_mut().zip(states.merges[j].as_slice()) {
            if pre > n_max {
                *g *= SURROGATE_LEAK;
            }
        }
        add_pending(&mut pending, net.skip_source(j), &grad_pre);
        let (grad_acc, grad_theta) =
            act_backward(&states.accs[li], &states.thetas[li], n_max, &grad_pre, ste_copy);
        for (dst, g) in grads.layers[li].thresholds.iter_mut().zip(grad_theta) {
            *dst += g;
        }
        apply_params(&mut grads, li, &grad_acc, &states.inputs[li]);
        let in_dims = (states.inputs[li].height(), states.inputs[li].width());
        let gi = input_grad(li, &grad_acc, in_dims);
        if j + 1 < net.depth {
            grad_merged = gi;
        } else {
            add_pending(&mut pending, net.enc(net.depth - 1), &gi);
            grad_merged = Grid3::zeros(0, 0, 0);
        }
    }

    // encoder stages and stem
    for i in (0..net.depth).rev() {
        let li = net.enc(i);
        let upstream = pending[li]
            .take()
            .ok_or_else(|| Error::invariant(format!("no gradient reached enc{i}")))?;
        let (grad_acc, grad_theta) =
            act_backward(&states.accs[li], &states.thetas[li], n_max, &upstream, ste_copy);
        for (dst, g) in grads.layers[li].thresholds.iter_mut().zip(grad_theta) {
            *dst += g;
        }
        apply_params(&mut grads, li, &grad_acc, &states.inputs[li]);
        let in_dims = (states.inputs[li].height(), states.inputs[li].width());
        let gi = input_grad(li, &grad_acc, in_dims);
        let below = if i == 0 { net.stem() } else { net.enc(i - 1) };
        add_pending(&mut pending, below, &gi);
    }
    let li = net.stem();
    let upstream = pending[li]
        .take()
        .ok_or_else(|| Error::invariant("no gradient reached the stem".to_string()))?;
    let (grad_acc, grad_theta) =
        act_backward(&states.accs[li], &states.thetas[li], n_max, &upstream, ste_copy);
    for (dst, g) in grads.layers[li].thresholds.iter_mut().zip(grad_theta) {
        *dst += g;
    }
    apply_params(&mut grads, li, &grad_acc, &states.inputs[li]);
    let in_dims = (states.inputs[li].height(), states.inputs[li].width());
    let grad_rates = input_grad(li, &grad_acc, in_dims);

    // spike coder
    let params = EncoderParams::new(alphas.to_vec(), net.window_max)?;
    let (_grad_bev, grad_alpha) = encode_rate_grad(bev, &params, &grad_rates)?;
    grads.alphas = grad_alpha;
    Ok(grads)
}

/// One training sample: rasterized input and its target maps.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub bev: BEVGrid,
    pub targets: GroundTruthMaps,
}

/// Optimizer and shadow state; fully serializable so checkpoints resume
/// bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub shadow: ShadowParams,
    pub moments: Gradients,
    pub step: u64,
    pub epochs_done: usize,
    pub loss_history: Vec<f64>,
    /// Per-step (keypoint, box, rotation) loss components.
    pub component_history: Vec<[f64; 3]>,
    pub seed: u64,
    pub epoch_logs: Vec<EpochLog>,
}

/// Fan-in-scaled uniform initialization; thresholds start mid-range,
/// encoder scales at the window maximum so unit input saturates.
pub fn init_shadow(net: &NetworkGraph, seed: u64) -> ShadowParams {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shadow = net.shadow_template();
    for (sh, layer) in shadow.layers.iter_mut().zip(&net.layers) {
        let fan_in = (layer.in_channels() * layer.kernel() * layer.kernel()) as f64;
        let bound = 1.0 / fan_in.sqrt();
        // heavy-tailed fan-in-scaled init: quantization normalizes weight
        // magnitude away (integer weights always span the 4-bit range), so
        // what matters is the magnitude SHAPE; u^3 keeps most quantized
        // weights small and initial accumulators inside the spike window
        for w in sh.weights.iter_mut() {
            let u: f64 = rng.gen_range(-1.0..1.0);
            *w = bound * u * u * u;
        }
        for t in sh.thresholds.iter_mut() {
            *t = THETA_INIT;
        }
        // positive resting bias keeps surrogate gates open at silence
        let per = layer.weights.per_channel();
        for (oc, b) in sh.biases.iter_mut().enumerate() {
            let max_abs = sh.weights[oc * per..(oc + 1) * per]
                .iter()
                .fold(0.0f64, |m, &w| m.max(w.abs()));
            let scale = if max_abs > 0.0 { max_abs / 7.0 } else { 1.0 };
            *b = BIAS_INIT_Q * scale;
        }
    }
    shadow.encoder_alpha = vec![net.window_max as f64; net.in_channels];
    shadow
}

pub fn new_train_state(net: &NetworkGraph, seed: u64) -> TrainState {
    let shadow = init_shadow(net, seed);
    let moments = Gradients::zeros_like(&shadow);
    TrainState {
        shadow,
        moments,
        step: 0,
        epochs_done: 0,
        loss_history: Vec::new(),
        component_history: Vec::new(),
        seed,
        epoch_logs: Vec::new(),
    }
}

/// One quantization-aware step over a batch: sync, hard forward, surrogate
/// backward, momentum update on the shadow, re-sync. Returns the
/// pre-update batch loss.
pub fn train_step(
    net: &mut NetworkGraph,
    state: &mut TrainState,
    cfg: &TrainConfig,
    box_norm: &BoxNorm,
    batch: &[TrainSample],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("empty training batch".to_string()));
    }
    net.sync_from_shadow(&state.shadow)?;
    let encoder = EncoderParams::new(state.shadow.encoder_alpha.clone(), net.window_max)?;

    let mut total_loss = 0.0;
    let mut parts = [0.0f64; 3];
    let mut batch_grads = Gradients::zeros_like(&state.shadow);
    for sample in batch {
        let spikes = encode_rate(&sample.bev, &encoder)?;
        let trace = net.forward_traced(&spikes)?;
        let states = BackwardStates::from_trace(net, &trace);
        let loss = detection_loss(
            &states.accs[net.head_kp()],
            &states.accs[net.head_box()],
            &states.accs[net.head_rot()],
            &states.thetas[net.head_kp()],
            &states.thetas[net.head_rot()],
            &sample.targets,
            box_norm,
            &cfg.loss,
            net.window_max,
        );
        if !loss.total.is_finite() {
            return Err(Error::invariant(format!(
                "non-finite loss at step {}: kp {} box {} rot {}",
                state.step, loss.kp, loss.box_, loss.rot
            )));
        }
        total_loss += loss.total;
        parts[0] += loss.kp;
        parts[1] += loss.box_;
        parts[2] += loss.rot;
        // exact surrogate derivative (1/theta) on hidden activations: the
        // plain copy rule ignores theta and the integer-weight backward
        // gain (~sqrt(fan_in) * w_rms ~ 26x per layer) then compounds into
        // a gradient explosion over depth; 1/theta keeps the per-layer
        // gain near one and matches the surrogate the loss differentiates
        let grads = backward(net, &states, &sample.bev, &state.shadow.encoder_alpha, &loss, false)?;
        batch_grads.add(&grads);
    }
    let inv = 1.0 / batch.len() as f64;
    batch_grads.scale(inv);
    let loss = total_loss * inv;

    // Momentum SGD with per-group normalized steps measured in
    // quantization quanta: each parameter group's gradient is scaled to
    // unit RMS and the step is lr * quantum, where the quantum is the
    // per-channel weight scale (weights, biases), one integer (thresholds)
    // or one count per unit input (alphas). Raw gradient magnitudes vary
    // over orders of magnitude between layers while the quantized model
    // only changes when a shadow value crosses a rounding boundary, so
    // fixed-rate steps in quantum units converge where plain SGD stalls
    // or diverges.
    let (lr, mu) = (cfg.lr, cfg.momentum);
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt();
    for (li, ((sh, m), g)) in state
        .shadow
        .layers
        .iter_mut()
        .zip(state.moments.layers.iter_mut())
        .zip(batch_grads.layers.iter())
        .enumerate()
    {
        let per = net.layers[li].weights.per_channel();
        let scales = &net.layers[li].weights.scale;
        let w_rms = rms(&g.weights) + GRAD_RMS_EPS;
        for (i, (w, gw)) in sh.weights.iter_mut().zip(&g.weights).enumerate() {
            let mi = &mut m.weights[i];
            *mi = mu * *mi + gw / w_rms;
            *w -= lr * scales[i / per] * *mi;
        }
        let b_rms = rms(&g.biases) + GRAD_RMS_EPS;
        for (i, (b, gb)) in sh.biases.iter_mut().zip(&g.biases).enumerate() {
            let mi = &mut m.biases[i];
            *mi = mu * *mi + gb / b_rms;
            *b -= lr * scales[i] * *mi;
        }
        let t_rms = rms(&g.thresholds) + GRAD_RMS_EPS;
        for (i, (t, gt)) in sh.thresholds.iter_mut().zip(&g.thresholds).enumerate() {
            let mi = &mut m.thresholds[i];
            *mi = mu * *mi + gt / t_rms;
            *t -= lr * *mi;
        }
    }
    let a_rms = rms(&batch_grads.alphas) + GRAD_RMS_EPS;
    for i in 0..state.shadow.encoder_alpha.len() {
        let mi = &mut state.moments.alphas[i];
        *mi = mu * *mi + batch_grads.alphas[i] / a_rms;
        state.shadow.encoder_alpha[i] =
            (state.shadow.encoder_alpha[i] - lr * *mi).max(ALPHA_FLOOR);
    }

    net.sync_from_shadow(&state.shadow)?;
    state.step += 1;
    state.loss_history.push(loss);
    state.component_history.push([parts[0] * inv, parts[1] * inv, parts[2] * inv]);
    Ok(loss)
}

/// Box-potential normalization from training targets: per channel,
/// `meters = potential * (range / N_max) + mean`, so the full metric range
/// of each target spans the spike window.
pub fn box_norm_from_targets(samples: &[TrainSample], window_max: u32) -> BoxNorm {
    let mut mean = [0.0; BOX_CHANNELS];
    let mut lo = [f64::INFINITY; BOX_CHANNELS];
    let mut hi = [f64::NEG_INFINITY; BOX_CHANNELS];
    let mut count = 0usize;
    for sample in samples {
        for (r, c) in sample.targets.keypoint_cells() {
            count += 1;
            for k in 0..BOX_CHANNELS {
                let v = *sample.targets.box_map.get(k, r, c);
                mean[k] += v;
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
    }
    if count == 0 {
        return BoxNorm::identity();
    }
    let mut scale = [1.0; BOX_CHANNELS];
    let span = (window_max * BOX_TARGET_WINDOWS) as f64;
    for k in 0..BOX_CHANNELS {
        mean[k] /= count as f64;
        scale[k] = ((hi[k] - lo[k]).max(1e-6)) / span;
    }
    BoxNorm { mean, scale }
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub loss_kp: f64,
    pub loss_box: f64,
    pub loss_rot: f64,
    pub ap50: f64,
    pub ap70: f64,
    pub layer_sparsity: Vec<f64>,
}

/// Deterministic training report (no wall-clock fields; timing lives in a
/// sidecar so reports are byte-reproducible).
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    pub final_loss: f64,
    pub final_ap50: f64,
    pub final_ap70: f64,
}

pub fn samples_from_records(
    records: &[SceneRecord],
    meta: &crate::bev::GridMeta,
    rotation_bins: usize,
) -> Result<Vec<TrainSample>> {
    records
        .iter()
        .map(|rec| {
            Ok(TrainSample {
                bev: pointcloud_to_bev(&rec.cloud, meta)?,
                targets: labels_to_targets(&rec.label, meta, rotation_bins)?,
            })
        })
        .collect()
}

/// Assemble the runnable model view of the current training state.
pub fn model_view(net: &NetworkGraph, state: &TrainState, box_norm: &BoxNorm) -> Result<SpklModel> {
    Ok(SpklModel {
        net: net.clone(),
        encoder: EncoderParams::new(state.shadow.encoder_alpha.clone(), net.window_max)?,
        box_norm: box_norm.clone(),
    })
}

pub fn save_state(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(state).map_err(|e| Error::format(format!("state serialization: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Full training run. Writes `checkpoint-NNN.spkl` / `.state.json` every
/// `checkpoint_interval` epochs into `out_dir`, plus the final
/// `model.spkl`. Resumes bit-exactly from a saved state: an interrupted
/// and resumed run produces the same bytes as an uninterrupted one.
pub fn train(
    cfg: &TrainConfig,
    train_records: &[SceneRecord],
    val_records: &[SceneRecord],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<(SpklModel, TrainReport)> {
    cfg.validate()?;
    if train_records.is_empty() {
        return Err(Error::config("training dataset is empty".to_string()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut net = build_network(&cfg.arch)?;
    let mut state = match resume {
        Some(path) => load_state(path)?,
        None => new_train_state(&net, cfg.seed),
    };
    let samples = samples_from_records(train_records, &cfg.meta, cfg.arch.rotation_bins)?;
    let box_norm = box_norm_from_targets(&samples, cfg.arch.window_max);
    net.sync_from_shadow(&state.shadow)?;

    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(state.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let comp_start = state.component_history.len();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            epoch_loss += train_step(&mut net, &mut state, cfg, &box_norm, &batch)?;
            batches += 1;
        }
        epoch_loss /= batches.max(1) as f64;
        let mut comp_mean = [0.0f64; 3];
        let comp = &state.component_history[comp_start..];
        for c in comp {
            for k in 0..3 {
                comp_mean[k] += c[k];
            }
        }
        for k in 0..3 {
            comp_mean[k] /= comp.len().max(1) as f64;
        }

        let model = model_view(&net, &state, &box_norm)?;
        let (ap50, ap70, sparsity) = if val_records.is_empty() {
            (0.0, 0.0, Vec::new())
        } else {
            let outcome = evaluate_model(&model, val_records, &cfg.meta, cfg.min_margin, &[0.5, 0.7], 1)?;
            let easy = crate::bev::Difficulty::Easy;
            (
                outcome.results[0].by_difficulty[&easy].ap,
                outcome.results[1].by_difficulty[&easy].ap,
                outcome.activity.layers.iter().map(|l| l.sparsity).collect(),
            )
        };
        state.epochs_done = epoch + 1;
        state.epoch_logs.push(EpochLog {
            epoch,
            mean_loss: epoch_loss,
            loss_kp: comp_mean[0],
            loss_box: comp_mean[1],
            loss_rot: comp_mean[2],
            ap50,
            ap70,
            layer_sparsity: sparsity,
        });

        if (epoch + 1) % cfg.checkpoint_interval == 0 || epoch + 1 == cfg.epochs {
            let model_path = out_dir.join(format!("checkpoint-{:03}.spkl", epoch + 1));
            crate::model::write_model(&model_path, &model)?;
            save_state(out_dir.join(format!("checkpoint-{:03}.state.json", epoch + 1)), &state)?;
        }
    }

    let model = model_view(&net, &state, &box_norm)?;
    crate::model::write_model(out_dir.join("model.spkl"), &model)?;
    let last = state.epoch_logs.last();
    let report = TrainReport {
        steps: state.step,
        final_loss: last.map_or(0.0, |l| l.mean_loss),
        final_ap50: last.map_or(0.0, |l| l.ap50),
        final_ap70: last.map_or(0.0, |l| l.ap70),
        epochs: state.epoch_logs.clone(),
    };
    Ok((model, report))
}
