//! Quantization machinery: 4-bit signed weights with per-output-channel
//! scales, 6-bit thresholds, nibble packing, and the full-precision shadow
//! parameters the optimizer updates.
//!
//! Rounding everywhere is half-away-from-zero so results are
//! bit-reproducible across implementations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::ThresholdVector;

/// 4-bit signed weight range.
pub const Q_MIN: i8 = -8;
pub const Q_MAX: i8 = 7;

/// Bias range (16-bit signed, symmetric).
pub const BIAS_MAX: i64 = 32767;

/// Round half away from zero: `0.5 -> 1`, `-3.5 -> -4`.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    // f64::round is specified as half-away-from-zero
    x.round()
}

/// Quantized convolution weights: integers in `[-8, 7]` plus one positive
/// scale per output channel. `q ~= w_fp / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QWeights {
    /// `out_ch x in_ch x kh x kw`, out-channel major.
    pub q: Vec<i8>,
    pub shape: [usize; 4],
    /// Per-output-channel scale, always > 0.
    pub scale: Vec<f64>,
}

impl QWeights {
    pub fn out_channels(&self) -> usize {
        self.shape[0]
    }

    pub fn per_channel(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// Dequantized weight at flat index `i`.
    #[inline]
    pub fn dequant(&self, i: usize) -> f64 {
        self.q[i] as f64 * self.scale[i / self.per_channel()]
    }
}

/// Quantize full-precision weights to 4-bit signed integers with a
/// symmetric per-output-channel scale `max|w| / 7`. A channel with no
/// nonzero entry gets scale 1.
pub fn quantize_weights(w_fp: &[f64], shape: [usize; 4]) -> Result<QWeights> {
    let per = shape[1] * shape[2] * shape[3];
    if w_fp.len() != shape[0] * per {
        return Err(Error::shape(format!(
            "quantize_weights: {} values for shape {:?}",
            w_fp.len(),
            shape
        )));
    }
    let mut q = vec![0i8; w_fp.len()];
    let mut scale = vec![1.0f64; shape[0]];
    for oc in 0..shape[0] {
        let chunk = &w_fp[oc * per..(oc + 1) * per];
        let max_abs = chunk.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
        let s = if max_abs > 0.0 { max_abs / 7.0 } else { 1.0 };
        scale[oc] = s;
        for (i, &w) in chunk.iter().enumerate() {
            let r = round_half_away(w / s);
            q[oc * per + i] = r.clamp(Q_MIN as f64, Q_MAX as f64) as i8;
        }
    }
    Ok(QWeights { q, shape, scale })
}

/// Quantize bias values into accumulator units (`b_fp / scale` per output
/// channel), clamped to the symmetric 16-bit range.
pub fn quantize_biases(b_fp: &[f64], scale: &[f64]) -> Vec<i16> {
    b_fp.iter()
        .zip(scale.iter())
        .map(|(&b, &s)| round_half_away(b / s).clamp(-(BIAS_MAX as f64), BIAS_MAX as f64) as i16)
        .collect()
}

/// Quantize thresholds to `[1, 31]` integers.
pub fn quantize_thresholds(t_fp: &[f64]) -> ThresholdVector {
    ThresholdVector::from_fp(t_fp.to_vec())
}

/// Pack 4-bit values as two's-complement nibbles, low nibble first,
/// padding an odd count with a zero nibble.
pub fn pack_weights(q: &[i8]) -> Result<Vec<u8>> {
    if let Some(&bad) = q.iter().find(|&&v| !(Q_MIN..=Q_MAX).contains(&v)) {
        return Err(Error::invariant(format!(
            "pack_weights: entry {bad} outside [{Q_MIN}, {Q_MAX}]"
        )));
    }
    let mut bytes = Vec::with_capacity((q.len() + 1) / 2);
    for pair in q.chunks(2) {
        let lo = (pair[0] as u8) & 0x0F;
        let hi = if pair.len() == 2 { (pair[1] as u8) & 0x0F } else { 0 };
        bytes.push(lo | (hi << 4));
    }
    Ok(bytes)
}

/// Inverse of [`pack_weights`]: sign-extend `count` nibbles.
pub fn unpack_weights(bytes: &[u8], count: usize) -> Result<Vec<i8>> {
    if bytes.len() != (count + 1) / 2 {
        return Err(Error::format(format!(
            "unpack_weights: {} bytes cannot hold {count} nibbles",
            bytes.len()
        )));
    }
    let mut q = Vec::with_capacity(count);
    for i in 0..count {
        let byte = bytes[i / 2];
        let nib = if i % 2 == 0 { byte & 0x0F } else { byte >> 4 };
        // sign-extend 4 bits
        let v = if nib & 0x8 != 0 { (nib as i8) - 16 } else { nib as i8 };
        q.push(v);
    }
    Ok(q)
}

/// Full-precision shadow of one convolution layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerShadow {
    /// `out_ch x in_ch x kh x kw`.
    pub shape: [usize; 4],
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl LayerShadow {
    pub fn weight_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The full-precision clone of every trainable parameter. The optimizer
/// updates this copy; the quantized model is re-derived from it after
/// every step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowParams {
    pub layers: Vec<LayerShadow>,
    /// Spike-coder scale, one per BEV input channel.
    pub encoder_alpha: Vec<f64>,
}

/// Quantized snapshot of one layer's parameters, as derived from shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct QLayerParams {
    pub weights: QWeights,
    pub biases: Vec<i16>,
    pub thresholds: ThresholdVector,
}

/// Quantize one shadow layer. This is the per-layer body of the
/// shadow-to-model sync; the network graph applies it layer by layer.
pub fn quantize_layer(shadow: &LayerShadow) -> Result<QLayerParams> {
    let weights = quantize_weights(&shadow.weights, shadow.shape)?;
    if shadow.biases.len() != shadow.shape[0] || shadow.thresholds.len() != shadow.shape[0] {
        return Err(Error::shape(format!(
            "quantize_layer: {} biases / {} thresholds for {} output channels",
            shadow.biases.len(),
            shadow.thresholds.len(),
            shadow.shape[0]
        )));
    }
    let biases = quantize_biases(&shadow.biases, &weights.scale);
    let thresholds = quantize_thresholds(&shadow.thresholds);
    Ok(QLayerParams {
        weights,
        biases,
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_scales_by_channel_max() {
        let qw = quantize_weights(&[0.7, -0.35, 0.0], [1, 3, 1, 1]).unwrap();
        assert!((qw.scale[0] - 0.1).abs() < 1e-12);
        assert_eq!(qw.q, vec![7, -4, 0]); // -3.5 rounds away from zero
    }

    #[test]
    fn quantize_zero_channel_defaults_scale() {
        let qw = quantize_weights(&[0.0, 0.0], [1, 2, 1, 1]).unwrap();
        assert_eq!(qw.scale[0], 1.0);
        assert_eq!(qw.q, vec![0, 0]);
    }

    #[test]
    fn quantize_single_negative_hits_minus_seven() {
        let qw = quantize_weights(&[-0.7], [1, 1, 1, 1]).unwrap();
        assert_eq!(qw.q, vec![-7]);
    }

    #[test]
    fn quantize_error_bounded_by_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let qw = quantize_weights(&w, [4, 4, 2, 2]).unwrap();
        for (i, &orig) in w.iter().enumerate() {
            let deq = qw.dequant(i);
            let s = qw.scale[i / qw.per_channel()];
            assert!(
                (deq - orig).abs() <= s / 2.0 + 1e-12,
                "entry {i}: |{deq} - {orig}| > {}/2",
                s
            );
        }
    }

    #[test]
    fn threshold_quantization_clamps() {
        assert_eq!(quantize_thresholds(&[3.4]).quantized(), &[3]);
        assert_eq!(quantize_thresholds(&[0.2]).quantized(), &[1]);
        assert_eq!(quantize_thresholds(&[100.0]).quantized(), &[31]);
    }

    #[test]
    fn pack_nibble_layout() {
        assert_eq!(pack_weights(&[7, -8]).unwrap(), vec![0x87]);
        assert_eq!(pack_weights(&[0]).unwrap(), vec![0x00]);
        assert_eq!(pack_weights(&[-1, 1, -2]).unwrap(), vec![0x1F, 0x0E]);
    }

    #[test]
    fn pack_rejects_out_of_range() {
        assert!(pack_weights(&[8]).is_err());
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let n = rng.gen_range(1..1000);
            let q: Vec<i8> = (0..n).map(|_| rng.gen_range(-8..=7)).collect();
            let packed = pack_weights(&q).unwrap();
            let back = unpack_weights(&packed, n).unwrap();
            assert_eq!(q, back, "trial {trial} len {n}");
        }
    }

    #[test]
    fn quantize_layer_is_idempotent() {
        let shadow = LayerShadow {
            shape: [2, 2, 1, 1],
            weights: vec![0.3, -0.9, 0.05, 0.41],
            biases: vec![1.5, -0.2],
            thresholds: vec![4.2, 0.4],
        };
        let a = quantize_layer(&shadow).unwrap();
        let b = quantize_layer(&shadow).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_shadow_moves_leave_quantized_unchanged() {
        let mut shadow = LayerShadow {
            shape: [1, 2, 1, 1],
            weights: vec![0.7, 0.31],
            biases: vec![0.0],
            thresholds: vec![4.0],
        };
        let before = quantize_layer(&shadow).unwrap();
        // 0.31/0.1 = 3.1; nudging to 3.4 stays in the same rounding interval
        shadow.weights[1] = 0.34;
        let after = quantize_layer(&shadow).unwrap();
        assert_eq!(before.weights.q, after.weights.q);
        // crossing 3.5 steps the quantized value by exactly one
        shadow.weights[1] = 0.36;
        let crossed = quantize_layer(&shadow).unwrap();
        assert_eq!(crossed.weights.q[1] - after.weights.q[1], 1);
    }
}
