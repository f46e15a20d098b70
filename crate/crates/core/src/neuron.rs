//! Integrate-and-Fire membrane dynamics and the potential-to-spike-count
//! activation with its straight-through backward rules.
//!
//! The neuron model is leak-free: a membrane potential is the running sum
//! of its weighted inputs, nothing decays. One inference window accumulates
//! once, fires once, and resets — there is no state carried across windows.

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::qtensor::round_half_away;

/// Membrane potentials, one per (channel, row, col).
pub type PotentialGrid = Grid3<f64>;

/// Quantized threshold range: positive half of the signed 6-bit range.
/// A zero threshold would make `floor(v / theta)` fire unboundedly.
pub const THETA_MIN: i32 = 1;
pub const THETA_MAX: i32 = 31;

/// Per-output-channel firing thresholds: a full-precision shadow copy and
/// the 6-bit quantized value actually used by the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector {
    theta_fp: Vec<f64>,
    theta_q: Vec<i32>,
}

impl ThresholdVector {
    /// Build from full-precision thresholds, quantizing each to `[1, 31]`.
    pub fn from_fp(theta_fp: Vec<f64>) -> Self {
        let theta_q = theta_fp
            .iter()
            .map(|&t| (round_half_away(t) as i32).clamp(THETA_MIN, THETA_MAX))
            .collect();
        Self { theta_fp, theta_q }
    }

    /// Build from already-quantized thresholds (model file load path).
    pub fn from_quantized(theta_q: Vec<i32>) -> Result<Self> {
        if let Some(&bad) = theta_q.iter().find(|&&t| !(THETA_MIN..=THETA_MAX).contains(&t)) {
            return Err(Error::invariant(format!(
                "threshold {bad} outside [{THETA_MIN}, {THETA_MAX}]"
            )));
        }
        let theta_fp = theta_q.iter().map(|&t| t as f64).collect();
        Ok(Self { theta_fp, theta_q })
    }

    pub fn len(&self) -> usize {
        self.theta_q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta_q.is_empty()
    }

    pub fn fp(&self) -> &[f64] {
        &self.theta_fp
    }

    pub fn quantized(&self) -> &[i32] {
        &self.theta_q
    }
}

/// Accumulate weighted input into the membrane: `v_new = v_prev + input`.
///
/// The leak term of the full LIF model is dropped; accumulation is the
/// entire dynamics.
pub fn if_integrate(v_prev: &PotentialGrid, weighted_input: &PotentialGrid) -> Result<PotentialGrid> {
    if !v_prev.same_shape(weighted_input) {
        return Err(Error::shape(format!(
            "if_integrate: {:?} vs {:?}",
            v_prev.shape(),
            weighted_input.shape()
        )));
    }
    let mut out = v_prev.clone();
    for (o, &w) in out.as_mut_slice().iter_mut().zip(weighted_input.as_slice()) {
        *o += w;
    }
    Ok(out)
}

/// Convert accumulated membrane potential into an output spike count:
/// `clamp(floor(v / theta), 0, n_max)` per channel, then reset the
/// potential to zero (single-window semantics).
///
/// Returns raw counts; wrapping them into a `SpikeGrid` is the caller's
/// job since the codec owns that type.
pub fn spike_act(v: &mut PotentialGrid, theta: &ThresholdVector, n_max: u32) -> Result<Grid3<u32>> {
    let (c, h, w) = v.shape();
    if theta.len() != c {
        return Err(Error::shape(format!(
            "spike_act: {} thresholds for {c} channels",
            theta.len()
        )));
    }
    let mut counts = Grid3::<u32>::zeros(c, h, w);
    for ch in 0..c {
        let th = theta.quantized()[ch] as f64;
        let src = v.channel_mut(ch);
        let dst = counts.channel_mut(ch);
        for (d, s) in dst.iter_mut().zip(src.iter_mut()) {
            let rate = (*s / th).floor();
            *d = if rate <= 0.0 {
                0
            } else if rate >= n_max as f64 {
                n_max
            } else {
                rate as u32
            };
            *s = 0.0;
        }
    }
    Ok(counts)
}

/// Integer twin of [`spike_act`] for the exact inference path. Does not
/// reset: integer accumulators are per-window temporaries, not state.
pub fn spike_act_int(acc: &Grid3<i64>, theta: &ThresholdVector, n_max: u32) -> Grid3<u32> {
    let (c, h, w) = acc.shape();
    debug_assert_eq!(theta.len(), c);
    let mut counts = Grid3::<u32>::zeros(c, h, w);
    for ch in 0..c {
        let th = theta.quantized()[ch] as i64;
        let src = acc.channel(ch);
        let dst = counts.channel_mut(ch);
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            let rate = s.div_euclid(th);
            *d = rate.clamp(0, n_max as i64) as u32;
        }
    }
    counts
}

/// Backward rule for [`spike_act`].
///
/// The forward is a staircase, so gradients use the soft surrogate
/// `clamp(v / theta, 0, n_max)`: the potential path copies the upstream
/// gradient wherever `0 <= v/theta <= n_max` (straight-through), and the
/// threshold path takes the surrogate's own derivative `-v / theta^2`
/// over the same active region, accumulated per channel.
pub fn spike_act_grad(
    v: &PotentialGrid,
    theta: &ThresholdVector,
    n_max: u32,
    upstream: &Grid3<f64>,
) -> Result<(Grid3<f64>, Vec<f64>)> {
    if !v.same_shape(upstream) {
        return Err(Error::shape(format!(
            "spike_act_grad: {:?} vs {:?}",
            v.shape(),
            upstream.shape()
        )));
    }
    let (c, h, w) = v.shape();
    if theta.len() != c {
        return Err(Error::shape(format!(
            "spike_act_grad: {} thresholds for {c} channels",
            theta.len()
        )));
    }
    let mut grad_v = Grid3::<f64>::zeros(c, h, w);
    let mut grad_theta = vec![0.0; c];
    for ch in 0..c {
        let th = theta.quantized()[ch] as f64;
        let vs = v.channel(ch);
        let ups = upstream.channel(ch);
        let gv = grad_v.channel_mut(ch);
        let mut gt = 0.0;
        for i in 0..vs.len() {
            let rate = vs[i] / th;
            if (0.0..=n_max as f64).contains(&rate) {
                gv[i] = ups[i];
                gt += -ups[i] * vs[i] / (th * th);
            }
        }
        grad_theta[ch] = gt;
    }
    Ok((grad_v, grad_theta))
}

/// Soft surrogate rate `clamp(v / theta, 0, n_max)` and its partials.
/// This is the differentiable stand-in the training loss reads in place
/// of integer spike counts.
#[inline]
pub fn soft_rate(v: f64, theta: f64, n_max: u32) -> f64 {
    (v / theta).clamp(0.0, n_max as f64)
}

/// `(d/dv, d/dtheta)` of [`soft_rate`], zero outside the active region.
#[inline]
pub fn soft_rate_grad(v: f64, theta: f64, n_max: u32) -> (f64, f64) {
    let rate = v / theta;
    if (0.0..=n_max as f64).contains(&rate) {
        (1.0 / theta, -v / (theta * theta))
    } else {
        (0.0, 0.0)
    }
}
