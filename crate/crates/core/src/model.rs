//! The packed binary model format ("SPKL v1") and the model-file audit.
//!
//! Layout, all multi-byte integers little-endian:
//!
//! ```text
//! magic  "SPKL" (53 50 4B 4C)
//! u16    version = 1
//! u16    layer count
//! u16    spike window maximum
//! per layer:
//!   u8   layer-type tag: 0 stem conv (s1), 1 encoder conv (s2),
//!        2 transposed conv (s2), 3 head conv (1x1, s1)
//!   u8   shape dim count (always 4)
//!   u16  x4 shape: out_ch, in_ch, kh, kw
//!   f64  x out_ch per-channel weight scales
//!   4-bit two's-complement weight nibbles, low nibble first,
//!        zero-padded to a whole byte
//!   i16  x out_ch biases
//!   u8   x out_ch thresholds
//! trailing records:
//!   f64  x3 encoder alphas
//!   f64  x10 box normalization (5 channel means, then 5 channel scales)
//! ```

use std::path::Path;

use crate::bev::{BEVGrid, BOX_CHANNELS};
use crate::codec::{
    decode_boxes, decode_keypoints, encode_rate, BoxNorm, Detection, EncoderParams, HeadReadout,
};
use crate::error::{Error, Result};
use crate::net::{ActivityRecord, LayerKind, NetworkGraph, QConvLayer};
use crate::neuron::ThresholdVector;
use crate::qtensor::{pack_weights, unpack_weights, QWeights};

pub const SPKL_MAGIC: [u8; 4] = [0x53, 0x50, 0x4B, 0x4C];
pub const SPKL_VERSION: u16 = 1;

const TAG_STEM: u8 = 0;
const TAG_ENC: u8 = 1;
const TAG_DEC: u8 = 2;
const TAG_HEAD: u8 = 3;

/// A complete runnable model: quantized graph, spike-coder scales and the
/// box-potential denormalization.
#[derive(Debug, Clone)]
pub struct SpklModel {
    pub net: NetworkGraph,
    pub encoder: EncoderParams,
    pub box_norm: BoxNorm,
}

impl SpklModel {
    /// Full inference: rate-encode a BEV grid, run the graph, decode
    /// detections. Returns detections, per-layer activity, and the count
    /// of keypoints dropped for non-positive decoded dimensions.
    pub fn detect(
        &self,
        bev: &BEVGrid,
        min_margin: i64,
    ) -> Result<(Vec<Detection>, Vec<ActivityRecord>, usize)> {
        let (readout, activity) = self.run(bev)?;
        let keypoints = decode_keypoints(&readout, min_margin);
        let (detections, dropped) = decode_boxes(&readout, &keypoints, &bev.meta, &self.box_norm);
        Ok((detections, activity, dropped))
    }

    /// Encode and run the graph without decoding.
    pub fn run(&self, bev: &BEVGrid) -> Result<(HeadReadout, Vec<ActivityRecord>)> {
        let spikes = encode_rate(bev, &self.encoder)?;
        self.net.forward(&spikes)
    }
}

fn layer_tag(layer: &QConvLayer) -> Result<u8> {
    match (layer.kind, layer.stride, layer.kernel()) {
        (LayerKind::Conv, 1, 1) => Ok(TAG_HEAD),
        (LayerKind::Conv, 1, _) => Ok(TAG_STEM),
        (LayerKind::Conv, 2, _) => Ok(TAG_ENC),
        (LayerKind::Transposed, 2, _) => Ok(TAG_DEC),
        _ => Err(Error::invariant(format!(
            "{}: no SPKL tag for kind {:?} stride {}",
            layer.name, layer.kind, layer.stride
        ))),
    }
}

fn layer_from_tag(tag: u8, name: String, shape: [usize; 4]) -> Result<QConvLayer> {
    let (kind, stride, padding) = match tag {
        TAG_STEM => (LayerKind::Conv, 1, shape[2] / 2),
        TAG_ENC => (LayerKind::Conv, 2, shape[2] / 2),
        TAG_DEC => (LayerKind::Transposed, 2, 0),
        TAG_HEAD => (LayerKind::Conv, 1, 0),
        other => return Err(Error::format(format!("unknown layer tag {other}"))),
    };
    Ok(QConvLayer::empty(name, kind, shape, stride, padding))
}

/// Serialize a model to SPKL bytes.
pub fn to_bytes(model: &SpklModel) -> Result<Vec<u8>> {
    let net = &model.net;
    if model.encoder.alphas.len() != 3 {
        return Err(Error::invariant(format!(
            "SPKL stores exactly 3 encoder alphas, model has {}",
            model.encoder.alphas.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&SPKL_MAGIC);
    out.extend_from_slice(&SPKL_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u16).to_le_bytes());
    out.extend_from_slice(&(net.window_max as u16).to_le_bytes());
    for layer in &net.layers {
        out.push(layer_tag(layer)?);
        out.push(4u8);
        for &d in &layer.weights.shape {
            if d > u16::MAX as usize {
                return Err(Error::invariant(format!("{}: dim {d} exceeds u16", layer.name)));
            }
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        for &s in &layer.weights.scale {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&pack_weights(&layer.weights.q)?);
        for &b in &layer.biases {
            out.extend_from_slice(&b.to_le_bytes());
        }
        for &t in layer.thresholds.quantized() {
            out.push(t as u8);
        }
    }
    for &a in &model.encoder.alphas {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for &m in &model.box_norm.mean {
        out.extend_from_slice(&m.to_le_bytes());
    }
    for &s in &model.box_norm.scale {
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("unexpected end of file".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Deserialize a model from SPKL bytes, validating structure and ranges.
pub fn from_bytes(bytes: &[u8]) -> Result<SpklModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != SPKL_MAGIC {
        return Err(Error::format("not a SPKL file".to_string()));
    }
    let version = cur.u16()?;
    if version != SPKL_VERSION {
        return Err(Error::format(format!(
            "unsupported SPKL version {version}, expected {SPKL_VERSION}"
        )));
    }
    let layer_count = cur.u16()? as usize;
    if layer_count < 4 {
        return Err(Error::format(format!(
            "SPKL needs at least 4 layers (stem + heads), found {layer_count}"
        )));
    }
    let window_max = cur.u16()? as u32;
    if window_max == 0 {
        return Err(Error::format("window max must be >= 1".to_string()));
    }

    let mut tags = Vec::with_capacity(layer_count);
    let mut layers: Vec<QConvLayer> = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        let tag = cur.u8()?;
        let ndims = cur.u8()?;
        if ndims != 4 {
            return Err(Error::format(format!("layer {li}: shape has {ndims} dims, expected 4")));
        }
        let mut shape = [0usize; 4];
        for d in shape.iter_mut() {
            *d = cur.u16()? as usize;
        }
        if shape.iter().any(|&d| d == 0) || shape[2] != shape[3] {
            return Err(Error::format(format!("layer {li}: bad shape {shape:?}")));
        }
        let out_ch = shape[0];
        let n_weights: usize = shape.iter().product();
        let mut layer = layer_from_tag(tag, format!("layer{li}"), shape)?;

        let mut scales = Vec::with_capacity(out_ch);
        for si in 0..out_ch {
            let s = cur.f64()?;
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::format(format!("layer {li}: scale {si} = {s} not positive finite")));
            }
            scales.push(s);
        }
        let packed = cur.take((n_weights + 1) / 2)?;
        let q = unpack_weights(packed, n_weights)?;
        let mut biases = Vec::with_capacity(out_ch);
        for bi in 0..out_ch {
            let b = cur.i16()?;
            if b == i16::MIN {
                return Err(Error::format(format!(
                    "layer {li}: bias {bi} exceeds the symmetric 16-bit range"
                )));
            }
            biases.push(b);
        }
        let mut thresholds = Vec::with_capacity(out_ch);
        for ti in 0..out_ch {
            let t = cur.u8()? as i32;
            if !(crate::neuron::THETA_MIN..=crate::neuron::THETA_MAX).contains(&t) {
                return Err(Error::format(format!(
                    "layer {li}: threshold {ti} = {t} outside [1, 31]"
                )));
            }
            thresholds.push(t);
        }
        layer.weights = QWeights { q, shape, scale: scales };
        layer.biases = biases;
        layer.thresholds = ThresholdVector::from_quantized(thresholds)?;
        tags.push(tag);
        layers.push(layer);
    }

    let mut alphas = Vec::with_capacity(3);
    for ai in 0..3 {
        let a = cur.f64()?;
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::format(format!("encoder alpha {ai} = {a} not positive finite")));
        }
        alphas.push(a);
    }
    let mut mean = [0.0; BOX_CHANNELS];
    let mut scale = [0.0; BOX_CHANNELS];
    for m in mean.iter_mut() {
        *m = cur.f64()?;
        if !m.is_finite() {
            return Err(Error::format("non-finite box normalization mean".to_string()));
        }
    }
    for s in scale.iter_mut() {
        *s = cur.f64()?;
        if !(s.is_finite() && *s != 0.0) {
            return Err(Error::format("box normalization scale must be finite nonzero".to_string()));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after SPKL records",
            bytes.len() - cur.pos
        )));
    }

    let net = graph_from_layers(layers, &tags, window_max)?;
    Ok(SpklModel {
        net,
        encoder: EncoderParams::new(alphas, window_max)?,
        box_norm: BoxNorm { mean, scale },
    })
}

/// Rebuild the graph wiring from the tag sequence:
/// stem, D encoders, D decoders, 3 heads (kp, box, rot).
fn graph_from_layers(mut layers: Vec<QConvLayer>, tags: &[u8], window_max: u32) -> Result<NetworkGraph> {
    let n = layers.len();
    let depth = tags.iter().filter(|&&t| t == TAG_ENC).count();
    let dec_count = tags.iter().filter(|&&t| t == TAG_DEC).count();
    let expected: Vec<u8> = std::iter::once(TAG_STEM)
        .chain(std::iter::repeat(TAG_ENC).take(depth))
        .chain(std::iter::repeat(TAG_DEC).take(depth))
        .chain(std::iter::repeat(TAG_HEAD).take(3))
        .collect();
    if depth == 0 || dec_count != depth || tags != expected.as_slice() || n != 4 + 2 * depth {
        return Err(Error::format(format!(
            "layer tag sequence {tags:?} is not stem + {depth} enc + {depth} dec + 3 heads"
        )));
    }
    // channel chaining
    let in_channels = layers[0].weights.shape[1];
    let trunk_width = layers[0].weights.shape[0];
    if layers[n - 3].weights.shape[0] != 2 || layers[n - 2].weights.shape[0] != BOX_CHANNELS {
        return Err(Error::format(
            "head channel counts must be 2 (keypoint) and 5 (box)".to_string(),
        ));
    }
    let rotation_bins = layers[n - 1].weights.shape[0];
    if rotation_bins < 2 {
        return Err(Error::format(format!("rotation head has {rotation_bins} bins, need >= 2")));
    }
    for hi in [n - 3, n - 2, n - 1] {
        if layers[hi].weights.shape[1] != trunk_width {
            return Err(Error::format(format!(
                "head layer {hi} input width {} != trunk width {trunk_width}",
                layers[hi].weights.shape[1]
            )));
        }
    }
    // rename by role for readable reports
    layers[0].name = "stem".to_string();
    for i in 0..depth {
        layers[1 + i].name = format!("enc{i}");
        layers[1 + depth + i].name = format!("dec{}", depth - 1 - i);
    }
    layers[n - 3].name = "head_kp".to_string();
    layers[n - 2].name = "head_box".to_string();
    layers[n - 1].name = "head_rot".to_string();

    let net = NetworkGraph {
        layers,
        depth,
        rotation_bins,
        window_max,
        in_channels,
    };
    net.audit()?;
    Ok(net)
}

pub fn write_model(path: impl AsRef<Path>, model: &SpklModel) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<SpklModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Outcome of a model-file audit.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AuditReport {
    pub passed: bool,
    pub violations: Vec<String>,
}

/// Audit a model file: structural parse, range invariants, pack/unpack
/// round trip and byte-exact re-serialization.
pub fn audit_bytes(bytes: &[u8]) -> AuditReport {
    let mut violations = Vec::new();
    let model = match from_bytes(bytes) {
        Ok(m) => m,
        Err(e) => {
            return AuditReport {
                passed: false,
                violations: vec![e.to_string()],
            }
        }
    };
    if let Err(e) = model.net.audit() {
        violations.push(e.to_string());
    }
    for (li, layer) in model.net.layers.iter().enumerate() {
        match pack_weights(&layer.weights.q) {
            Ok(packed) => match unpack_weights(&packed, layer.weights.q.len()) {
                Ok(back) => {
                    if back != layer.weights.q {
                        violations.push(format!("layer {li}: pack/unpack round trip mismatch"));
                    }
                }
                Err(e) => violations.push(format!("layer {li}: {e}")),
            },
            Err(e) => violations.push(format!("layer {li}: {e}")),
        }
    }
    match to_bytes(&model) {
        Ok(rewritten) => {
            if rewritten != bytes {
                violations.push("re-serialization differs from the original bytes".to_string());
            }
        }
        Err(e) => violations.push(e.to_string()),
    }
    AuditReport {
        passed: violations.is_empty(),
        violations,
    }
}

pub fn audit_file(path: impl AsRef<Path>) -> Result<AuditReport> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(audit_bytes(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArchConfig;
    use crate::net::build_network;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64) -> SpklModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ArchConfig { widths: vec![4, 6], depth: 2, ..Default::default() };
        let mut net = build_network(&cfg).unwrap();
        let mut shadow = net.shadow_template();
        for l in shadow.layers.iter_mut() {
            for w in l.weights.iter_mut() {
                *w = rng.gen_range(-1.0..1.0);
            }
            for b in l.biases.iter_mut() {
                *b = rng.gen_range(-3.0..3.0);
            }
            for t in l.thresholds.iter_mut() {
                *t = rng.gen_range(1.0..8.0);
            }
        }
        net.sync_from_shadow(&shadow).unwrap();
        SpklModel {
            net,
            encoder: EncoderParams::new(vec![63.0, 50.0, 40.0], 63).unwrap(),
            box_norm: BoxNorm {
                mean: [1.5, 1.7, 4.0, 0.0, 0.0],
                scale: [0.02, 0.02, 0.04, 0.02, 0.02],
            },
        }
    }

    #[test]
    fn magic_bytes_spell_spkl() {
        assert_eq!(&SPKL_MAGIC, b"SPKL");
    }

    #[test]
    fn round_trip_preserves_everything() {
        let model = random_model(61);
        let bytes = to_bytes(&model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(model.net.layers.len(), back.net.layers.len());
        for (a, b) in model.net.layers.iter().zip(back.net.layers.iter()) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.biases, b.biases);
            assert_eq!(a.thresholds.quantized(), b.thresholds.quantized());
            assert_eq!((a.kind, a.stride, a.padding), (b.kind, b.stride, b.padding));
        }
        assert_eq!(model.encoder, back.encoder);
        assert_eq!(model.box_norm, back.box_norm);
        // write -> read -> write is byte-identical
        let again = to_bytes(&back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn bad_magic_is_rejected_early() {
        let model = random_model(62);
        let mut bytes = to_bytes(&model).unwrap();
        bytes[0] = b'X';
        let err = from_bytes(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "format error: not a SPKL file");
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let model = random_model(63);
        let mut bytes = to_bytes(&model).unwrap();
        bytes[4] = 9;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn truncated_file_reports_eof() {
        let model = random_model(64);
        let bytes = to_bytes(&model).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("unexpected end of file"), "{err}");
    }

    #[test]
    fn audit_passes_on_clean_model() {
        let model = random_model(65);
        let report = audit_bytes(&to_bytes(&model).unwrap());
        assert!(report.passed, "violations: {:?}", report.violations);
    }

    #[test]
    fn audit_names_layer_of_corrupted_threshold() {
        let model = random_model(66);
        let bytes = to_bytes(&model).unwrap();
        // find the first layer's threshold block: header 10 bytes, then
        // tag(1) + ndims(1) + shape(8) + scales + nibbles + biases
        let l0 = &model.net.layers[0];
        let offset = 10
            + 1
            + 1
            + 8
            + 8 * l0.out_channels()
            + (l0.weights.q.len() + 1) / 2
            + 2 * l0.out_channels();
        let mut corrupt = bytes.clone();
        corrupt[offset] = 0; // threshold 0 is outside [1, 31]
        let report = audit_bytes(&corrupt);
        assert!(!report.passed);
        assert!(
            report.violations[0].contains("layer 0") && report.violations[0].contains("threshold 0"),
            "got {:?}",
            report.violations
        );
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let model = random_model(67);
        let mut bytes = to_bytes(&model).unwrap();
        bytes.push(0);
        assert!(from_bytes(&bytes).is_err());
    }
}
