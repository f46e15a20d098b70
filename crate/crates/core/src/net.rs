//! Spiking convolution layers and the encoder–decoder detection graph.
//!
//! Inference is exact integer arithmetic end to end: spike counts flow in,
//! 4-bit weights multiply them into wide accumulators, quantized
//! thresholds convert accumulators back into counts. The only non-spiking
//! output is the box-regression head, which exposes raw accumulator
//! potentials.
//!
//! Convolutions are computed scatter-style over nonzero input cells, so
//! work scales with spike activity and the synaptic-operation count falls
//! out of the traversal itself.

use serde::{Deserialize, Serialize};

use crate::codec::{HeadReadout, SpikeGrid};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::neuron::{spike_act_int, ThresholdVector};
use crate::qtensor::{quantize_layer, LayerShadow, QWeights, ShadowParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Transposed,
}

/// One quantized (transposed-)convolution layer with spiking activation.
#[derive(Debug, Clone, PartialEq)]
pub struct QConvLayer {
    pub name: String,
    pub kind: LayerKind,
    /// `out_ch x in_ch x k x k`, kernels square.
    pub weights: QWeights,
    /// Accumulator-unit biases.
    pub biases: Vec<i16>,
    pub thresholds: ThresholdVector,
    pub stride: usize,
    pub padding: usize,
}

impl QConvLayer {
    /// Zero-initialized layer of the given geometry.
    pub fn empty(
        name: impl Into<String>,
        kind: LayerKind,
        shape: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Self {
        let n: usize = shape.iter().product();
        Self {
            name: name.into(),
            kind,
            weights: QWeights {
                q: vec![0; n],
                shape,
                scale: vec![1.0; shape[0]],
            },
            biases: vec![0; shape[0]],
            thresholds: ThresholdVector::from_quantized(vec![4; shape[0]]).unwrap(),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape[2]
    }

    /// Output spatial size for an input of `ih x iw`.
    pub fn out_dims(&self, ih: usize, iw: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        match self.kind {
            LayerKind::Conv => {
                if ih + 2 * self.padding < k || iw + 2 * self.padding < k {
                    return Err(Error::shape(format!(
                        "{}: input {ih}x{iw} smaller than kernel {k}",
                        self.name
                    )));
                }
                Ok((
                    (ih + 2 * self.padding - k) / self.stride + 1,
                    (iw + 2 * self.padding - k) / self.stride + 1,
                ))
            }
            LayerKind::Transposed => {
                Ok(((ih - 1) * self.stride + k, (iw - 1) * self.stride + k))
            }
        }
    }
}

/// Spike bookkeeping for one layer in one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivityRecord {
    pub layer: String,
    pub input_spikes: u64,
    pub output_spikes: u64,
    /// Nonzero-input multiply-accumulates plus nonzero-bias applications.
    pub synaptic_ops: u64,
    pub output_neurons: u64,
    pub zero_outputs: u64,
}

/// Integer accumulation of spike counts through quantized weights.
/// Returns the accumulator grid and the synaptic-operation count.
pub fn accumulate_int(layer: &QConvLayer, input: &Grid3<u32>) -> Result<(Grid3<i64>, u64)> {
    let (in_ch, ih, iw) = input.shape();
    if in_ch != layer.in_channels() {
        return Err(Error::shape(format!(
            "{}: got {in_ch} input channels, expected {}",
            layer.name,
            layer.in_channels()
        )));
    }
    let (oh, ow) = layer.out_dims(ih, iw)?;
    let oc_n = layer.out_channels();
    let k = layer.kernel();
    let s = layer.stride;
    let p = layer.padding;
    let mut acc = Grid3::<i64>::zeros(oc_n, oh, ow);
    let mut synops = 0u64;

    for (oc, &b) in layer.biases.iter().enumerate() {
        if b != 0 {
            acc.channel_mut(oc).fill(b as i64);
            synops += (oh * ow) as u64;
        }
    }

    // nonzero input cells per channel
    let mut nonzero: Vec<Vec<(usize, usize, i64)>> = vec![Vec::new(); in_ch];
    for ic in 0..in_ch {
        for r in 0..ih {
            let row = input.row(ic, r);
            for (c, &cnt) in row.iter().enumerate() {
                if cnt != 0 {
                    nonzero[ic].push((r, c, cnt as i64));
                }
            }
        }
    }

    // valid scatter taps of one input cell: (kh, kw) -> (or, ocol)
    let taps_of = |r: usize, c: usize| -> Vec<(usize, usize, usize)> {
        let mut taps = Vec::with_capacity(k * k);
        match layer.kind {
            LayerKind::Conv => {
                for kh in 0..k {
                    let t = r + p;
                    if t < kh {
                        continue;
                    }
                    let t = t - kh;
                    if t % s != 0 {
                        continue;
                    }
                    let or = t / s;
                    if or >= oh {
                        continue;
                    }
                    for kw in 0..k {
                        let u = c + p;
                        if u < kw {
                            continue;
                        }
                        let u = u - kw;
                        if u % s != 0 {
                            continue;
                        }
                        let ocol = u / s;
                        if ocol >= ow {
                            continue;
                        }
                        taps.push((kh * k + kw, or, ocol));
                    }
                }
            }
            LayerKind::Transposed => {
                for kh in 0..k {
                    let or = r * s + kh;
                    if or >= oh {
                        continue;
                    }
                    for kw in 0..k {
                        let ocol = c * s + kw;
                        if ocol >= ow {
                            continue;
                        }
                        taps.push((kh * k + kw, or, ocol));
                    }
                }
            }
        }
        taps
    };

    let kk = k * k;
    for ic in 0..in_ch {
        for &(r, c, cnt) in &nonzero[ic] {
            let taps = taps_of(r, c);
            synops += (taps.len() * oc_n) as u64;
            for oc in 0..oc_n {
                let wbase = (oc * in_ch + ic) * kk;
                let acc_ch = acc.channel_mut(oc);
                for &(kidx, or, ocol) in &taps {
                    let w = layer.weights.q[wbase + kidx] as i64;
                    acc_ch[or * ow + ocol] += cnt * w;
                }
            }
        }
    }
    Ok((acc, synops))
}

fn record_from(
    layer: &QConvLayer,
    input_spikes: u64,
    synops: u64,
    spikes: Option<&Grid3<u32>>,
    acc: &Grid3<i64>,
) -> ActivityRecord {
    let (output_spikes, zero_outputs) = match spikes {
        Some(sp) => (
            sp.as_slice().iter().map(|&v| v as u64).sum(),
            sp.as_slice().iter().filter(|&&v| v == 0).count() as u64,
        ),
        // potential-readout head: zero means a silent neuron
        None => (0, acc.as_slice().iter().filter(|&&v| v == 0).count() as u64),
    };
    ActivityRecord {
        layer: layer.name.clone(),
        input_spikes,
        output_spikes,
        synaptic_ops: synops,
        output_neurons: acc.len() as u64,
        zero_outputs,
    }
}

/// Spiking convolution forward: integer accumulation, spike activation,
/// and activity accounting. Returns output spikes, the pre-activation
/// potentials (heads read them), and the activity record.
pub fn spike_conv_forward(
    layer: &QConvLayer,
    spikes_in: &SpikeGrid,
) -> Result<(SpikeGrid, Grid3<f64>, ActivityRecord)> {
    let (acc, synops) = accumulate_int(layer, &spikes_in.counts)?;
    let out = spike_act_int(&acc, &layer.thresholds, spikes_in.window_max);
    let record = record_from(layer, spikes_in.total(), synops, Some(&out), &acc);
    let potentials = acc.map(|v| v as f64);
    Ok((SpikeGrid::new(out, spikes_in.window_max), potentials, record))
}

/// Transposed-convolution twin of [`spike_conv_forward`].
pub fn spike_deconv_forward(
    layer: &QConvLayer,
    spikes_in: &SpikeGrid,
) -> Result<(SpikeGrid, Grid3<f64>, ActivityRecord)> {
    if layer.kind != LayerKind::Transposed {
        return Err(Error::config(format!("{} is not a transposed layer", layer.name)));
    }
    spike_conv_forward(layer, spikes_in)
}

/// Fold batch-norm statistics into convolution weights and bias:
/// `w' = w * gamma / sqrt(var + eps)`, `b' = beta - gamma * mean / sqrt(var + eps)`
/// per output channel. Applied to shadow parameters before quantized
/// export; the quantized graph itself is BN-free.
pub fn fold_batchnorm(
    conv_w_fp: &[f64],
    shape: [usize; 4],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let oc_n = shape[0];
    let per = shape[1] * shape[2] * shape[3];
    if conv_w_fp.len() != oc_n * per {
        return Err(Error::shape(format!(
            "fold_batchnorm: {} weights for shape {shape:?}",
            conv_w_fp.len()
        )));
    }
    if [mean.len(), var.len(), gamma.len(), beta.len()] != [oc_n; 4] {
        return Err(Error::shape("fold_batchnorm: per-channel stats length mismatch".to_string()));
    }
    if var.iter().any(|&v| v < 0.0) {
        return Err(Error::invariant("fold_batchnorm: negative variance".to_string()));
    }
    let mut w = vec![0.0; conv_w_fp.len()];
    let mut b = vec![0.0; oc_n];
    for oc in 0..oc_n {
        let factor = gamma[oc] / (var[oc] + eps).sqrt();
        for i in 0..per {
            w[oc * per + i] = conv_w_fp[oc * per + i] * factor;
        }
        b[oc] = beta[oc] - factor * mean[oc];
    }
    Ok((w, b))
}

/// Index layout of the layer list built by [`build_network`]:
/// stem, D encoder stages, D decoder stages (deepest first), then the
/// keypoint, box and rotation heads.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    pub layers: Vec<QConvLayer>,
    pub depth: usize,
    pub rotation_bins: usize,
    pub window_max: u32,
    pub in_channels: usize,
}

impl NetworkGraph {
    pub fn stem(&self) -> usize {
        0
    }

    pub fn enc(&self, i: usize) -> usize {
        1 + i
    }

    /// Decoder stage `j` (j = depth-1 is the deepest, applied first).
    pub fn dec(&self, j: usize) -> usize {
        1 + self.depth + (self.depth - 1 - j)
    }

    pub fn head_kp(&self) -> usize {
        1 + 2 * self.depth
    }

    pub fn head_box(&self) -> usize {
        2 + 2 * self.depth
    }

    pub fn head_rot(&self) -> usize {
        3 + 2 * self.depth
    }

    /// Skip partner of decoder stage `j`: the stem for j = 0, otherwise
    /// encoder stage `j - 1`. Outputs are width- and shape-compatible by
    /// construction.
    pub fn skip_source(&self, j: usize) -> usize {
        if j == 0 {
            self.stem()
        } else {
            self.enc(j - 1)
        }
    }

    /// Overwrite quantized parameters from the full-precision shadow.
    /// Idempotent: syncing twice from the same shadow is a no-op.
    pub fn sync_from_shadow(&mut self, shadow: &ShadowParams) -> Result<()> {
        if shadow.layers.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "shadow has {} layers, graph has {}",
                shadow.layers.len(),
                self.layers.len()
            )));
        }
        for (layer, sh) in self.layers.iter_mut().zip(shadow.layers.iter()) {
            if sh.shape != layer.weights.shape {
                return Err(Error::shape(format!(
                    "{}: shadow shape {:?} vs layer {:?}",
                    layer.name, sh.shape, layer.weights.shape
                )));
            }
            let q = quantize_layer(sh)?;
            layer.weights = q.weights;
            layer.biases = q.biases;
            layer.thresholds = q.thresholds;
        }
        Ok(())
    }

    /// Shadow skeleton matching this graph's shapes (all zeros).
    pub fn shadow_template(&self) -> ShadowParams {
        ShadowParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerShadow {
                    shape: l.weights.shape,
                    weights: vec![0.0; l.weights.q.len()],
                    biases: vec![0.0; l.out_channels()],
                    thresholds: vec![0.0; l.out_channels()],
                })
                .collect(),
            encoder_alpha: vec![0.0; self.in_channels],
        }
    }

    /// Verify every stored parameter is in its quantized range.
    pub fn audit(&self) -> Result<()> {
        for (li, layer) in self.layers.iter().enumerate() {
            for (i, &q) in layer.weights.q.iter().enumerate() {
                if !(crate::qtensor::Q_MIN..=crate::qtensor::Q_MAX).contains(&q) {
                    return Err(Error::invariant(format!(
                        "layer {li} ({}): weight {i} = {q} outside 4-bit range",
                        layer.name
                    )));
                }
            }
            for (i, &t) in layer.thresholds.quantized().iter().enumerate() {
                if !(crate::neuron::THETA_MIN..=crate::neuron::THETA_MAX).contains(&t) {
                    return Err(Error::invariant(format!(
                        "layer {li} ({}): threshold {i} = {t} outside [1, 31]",
                        layer.name
                    )));
                }
            }
            for (i, &s) in layer.weights.scale.iter().enumerate() {
                if !(s.is_finite() && s > 0.0) {
                    return Err(Error::invariant(format!(
                        "layer {li} ({}): scale {i} = {s} not positive finite",
                        layer.name
                    )));
                }
            }
            for (i, &b) in layer.biases.iter().enumerate() {
                if b == i16::MIN {
                    return Err(Error::invariant(format!(
                        "layer {li} ({}): bias {i} exceeds the symmetric 16-bit range",
                        layer.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Run one inference window.
    pub fn forward(&self, input: &SpikeGrid) -> Result<(HeadReadout, Vec<ActivityRecord>)> {
        let trace = self.forward_traced(input)?;
        Ok((trace.readout, trace.activity))
    }

    /// Forward pass retaining per-layer inputs, accumulators and merge
    /// sums for the backward pass.
    pub fn forward_traced(&self, input: &SpikeGrid) -> Result<ForwardTrace> {
        if input.counts.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels,
                input.counts.channels()
            )));
        }
        if input.window_max != self.window_max {
            return Err(Error::shape(format!(
                "input window max {} != network window max {}",
                input.window_max, self.window_max
            )));
        }
        let n = self.layers.len();
        let mut inputs: Vec<Grid3<u32>> = Vec::with_capacity(n);
        let mut accs: Vec<Grid3<i64>> = Vec::with_capacity(n);
        let mut spikes_out: Vec<Option<Grid3<u32>>> = Vec::with_capacity(n);
        let mut activity: Vec<ActivityRecord> = Vec::with_capacity(n);

        let mut run_layer = |idx: usize, grid: &Grid3<u32>, fire: bool| -> Result<Option<Grid3<u32>>> {
            let layer = &self.layers[idx];
            let (acc, synops) = accumulate_int(layer, grid)?;
            let in_total: u64 = grid.as_slice().iter().map(|&v| v as u64).sum();
            let out = if fire {
                let out = spike_act_int(&acc, &layer.thresholds, self.window_max);
                activity.push(record_from(layer, in_total, synops, Some(&out), &acc));
                Some(out)
            } else {
                activity.push(record_from(layer, in_total, synops, None, &acc));
                None
            };
            inputs.push(grid.clone());
            accs.push(acc);
            spikes_out.push(out.clone());
            Ok(out)
        };

        // encoder
        let stem_out = run_layer(self.stem(), &input.counts, true)?.unwrap();
        let mut enc_outs: Vec<Grid3<u32>> = Vec::with_capacity(self.depth);
        let mut cur = stem_out.clone();
        for i in 0..self.depth {
            cur = run_layer(self.enc(i), &cur, true)?.unwrap();
            enc_outs.push(cur.clone());
        }

        // decoder with saturating skip merges, deepest stage first
        let mut merges: Vec<Grid3<u32>> = vec![Grid3::zeros(0, 0, 0); self.depth];
        for j in (0..self.depth).rev() {
            let dec_out = run_layer(self.dec(j), &cur, true)?.unwrap();
            let skip = if j == 0 { &stem_out } else { &enc_outs[j - 1] };
            if !dec_out.same_shape(skip) {
                return Err(Error::shape(format!(
                    "decoder stage {j}: {:?} vs skip {:?}",
                    dec_out.shape(),
                    skip.shape()
                )));
            }
            let mut pre = dec_out.clone();
            for (m, &s) in pre.as_mut_slice().iter_mut().zip(skip.as_slice()) {
                *m += s;
            }
            merges[j] = pre.clone();
            cur = pre.map(|v| v.min(self.window_max));
        }

        // heads: keypoint and rotation fire spikes, box reads potentials
        let trunk = cur;
        let kp_out = run_layer(self.head_kp(), &trunk, true)?.unwrap();
        run_layer(self.head_box(), &trunk, false)?;
        let rot_out = run_layer(self.head_rot(), &trunk, true)?.unwrap();
        drop(run_layer);
        let box_potentials = accs[self.head_box()].map(|v| v as f64);

        Ok(ForwardTrace {
            inputs,
            accs,
            spikes: spikes_out,
            merges,
            readout: HeadReadout {
                keypoint_spikes: kp_out,
                rotation_spikes: rot_out,
                box_potentials,
            },
            activity,
        })
    }
}

/// Everything the backward pass needs from one forward run.
///
/// `inputs`, `accs` and `spikes` are indexed in execution order:
/// stem, encoders, decoders (deepest first), keypoint head, box head,
/// rotation head. `merges[j]` holds the pre-clamp skip sums of decoder
/// stage `j`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Vec<Grid3<u32>>,
    pub accs: Vec<Grid3<i64>>,
    pub spikes: Vec<Option<Grid3<u32>>>,
    pub merges: Vec<Grid3<u32>>,
    pub readout: HeadReadout,
    pub activity: Vec<ActivityRecord>,
}

/// Build the detection graph: a stem convolution, `depth` stride-2
/// encoder stages, `depth` stride-2 transposed-convolution decoder stages
/// merging skip spikes by saturating addition, and three 1x1 heads at the
/// input resolution.
pub fn build_network(cfg: &ArchConfig) -> Result<NetworkGraph> {
    cfg.validate()?;
    let d = cfg.depth;
    let w0 = cfg.widths[0];
    let mut layers = Vec::with_capacity(4 + 2 * d);
    layers.push(QConvLayer::empty(
        "stem",
        LayerKind::Conv,
        [w0, cfg.in_channels, cfg.stem_kernel, cfg.stem_kernel],
        1,
        cfg.stem_kernel / 2,
    ));
    for i in 0..d {
        let in_w = if i == 0 { w0 } else { cfg.widths[i - 1] };
        layers.push(QConvLayer::empty(
            format!("enc{i}"),
            LayerKind::Conv,
            [cfg.widths[i], in_w, cfg.enc_kernel, cfg.enc_kernel],
            2,
            cfg.enc_kernel / 2,
        ));
    }
    for j in (0..d).rev() {
        let in_w = cfg.widths[j];
        let out_w = if j == 0 { w0 } else { cfg.widths[j - 1] };
        layers.push(QConvLayer::empty(
            format!("dec{j}"),
            LayerKind::Transposed,
            [out_w, in_w, cfg.dec_kernel, cfg.dec_kernel],
            2,
            0,
        ));
    }
    layers.push(QConvLayer::empty("head_kp", LayerKind::Conv, [2, w0, 1, 1], 1, 0));
    layers.push(QConvLayer::empty("head_box", LayerKind::Conv, [5, w0, 1, 1], 1, 0));
    layers.push(QConvLayer::empty(
        "head_rot",
        LayerKind::Conv,
        [cfg.rotation_bins, w0, 1, 1],
        1,
        0,
    ));
    Ok(NetworkGraph {
        layers,
        depth: d,
        rotation_bins: cfg.rotation_bins,
        window_max: cfg.window_max,
        in_channels: cfg.in_channels,
    })
}

// ---------------------------------------------------------------------
// Real-valued convolution kernels shared by the backward pass and the
// soft (surrogate) forward used for gradient verification.
// ---------------------------------------------------------------------

/// Dense real accumulation with arbitrary weights; same geometry as
/// [`accumulate_int`].
pub fn accumulate_f64(
    kind: LayerKind,
    weights: &[f64],
    shape: [usize; 4],
    biases: &[f64],
    stride: usize,
    padding: usize,
    input: &Grid3<f64>,
) -> Grid3<f64> {
    let (in_ch, ih, iw) = input.shape();
    debug_assert_eq!(in_ch, shape[1]);
    let k = shape[2];
    let (oh, ow) = match kind {
        LayerKind::Conv => (
            (ih + 2 * padding - k) / stride + 1,
            (iw + 2 * padding - k) / stride + 1,
        ),
        LayerKind::Transposed => ((ih - 1) * stride + k, (iw - 1) * stride + k),
    };
    let oc_n = shape[0];
    let kk = k * k;
    let mut acc = Grid3::<f64>::zeros(oc_n, oh, ow);
    for oc in 0..oc_n {
        acc.channel_mut(oc).fill(biases[oc]);
    }
    for ic in 0..in_ch {
        for r in 0..ih {
            let row = input.row(ic, r);
            for (c, &v) in row.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for oc in 0..oc_n {
                    let wbase = (oc * in_ch + ic) * kk;
                    let acc_ch = acc.channel_mut(oc);
                    match kind {
                        LayerKind::Conv => {
                            for kh in 0..k {
                                let t = r + padding;
                                if t < kh {
                                    continue;
                                }
                                let t = t - kh;
                                if t % stride != 0 {
                                    continue;
                                }
                                let or = t / stride;
                                if or >= oh {
                                    continue;
                                }
                                for kw in 0..k {
                                    let u = c + padding;
                                    if u < kw {
                                        continue;
                                    }
                                    let u = u - kw;
                                    if u % stride != 0 {
                                        continue;
                                    }
                                    let ocol = u / stride;
                                    if ocol >= ow {
                                        continue;
                                    }
                                    acc_ch[or * ow + ocol] += v * weights[wbase + kh * k + kw];
                                }
                            }
                        }
                        LayerKind::Transposed => {
                            for kh in 0..k {
                                let or = r * stride + kh;
                                if or >= oh {
                                    continue;
                                }
                                for kw in 0..k {
                                    let ocol = c * stride + kw;
                                    if ocol >= ow {
                                        continue;
                                    }
                                    acc_ch[or * ow + ocol] += v * weights[wbase + kh * k + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    acc
}

/// Gradient of the accumulation w.r.t. its input:
/// `grad_in[ic] = sum_oc correlate(grad_acc[oc], w[oc][ic])`.
pub fn grad_wrt_input(
    kind: LayerKind,
    weights: &[f64],
    shape: [usize; 4],
    stride: usize,
    padding: usize,
    grad_acc: &Grid3<f64>,
    in_dims: (usize, usize),
) -> Grid3<f64> {
    let (oc_n, oh, ow) = grad_acc.shape();
    debug_assert_eq!(oc_n, shape[0]);
    let in_ch = shape[1];
    let k = shape[2];
    let kk = k * k;
    let (ih, iw) = in_dims;
    let mut grad_in = Grid3::<f64>::zeros(in_ch, ih, iw);
    for ic in 0..in_ch {
        let gi_ch = grad_in.channel_mut(ic);
        for oc in 0..oc_n {
            let wbase = (oc * in_ch + ic) * kk;
            let ga_ch = grad_acc.channel(oc);
            for r in 0..ih {
                for c in 0..iw {
                    let mut g = 0.0;
                    match kind {
                        LayerKind::Conv => {
                            for kh in 0..k {
                                let t = r + padding;
                                if t < kh {
                                    continue;
                                }
                                let t = t - kh;
                                if t % stride != 0 {
                                    continue;
                                }
                                let or = t / stride;
                                if or >= oh {
                                    continue;
                                }
                                for kw in 0..k {
                                    let u = c + padding;
                                    if u < kw {
                                        continue;
                                    }
                                    let u = u - kw;
                                    if u % stride != 0 {
                                        continue;
                                    }
                                    let ocol = u / stride;
                                    if ocol >= ow {
                                        continue;
                                    }
                                    g += ga_ch[or * ow + ocol] * weights[wbase + kh * k + kw];
                                }
                            }
                        }
                        LayerKind::Transposed => {
                            for kh in 0..k {
                                let or = r * stride + kh;
                                if or >= oh {
                                    continue;
                                }
                                for kw in 0..k {
                                    let ocol = c * stride + kw;
                                    if ocol >= ow {
                                        continue;
                                    }
                                    g += ga_ch[or * ow + ocol] * weights[wbase + kh * k + kw];
                                }
                            }
                        }
                    }
                    gi_ch[r * iw + c] += g;
                }
            }
        }
    }
    grad_in
}

/// Gradients of the accumulation w.r.t. weights and biases.
pub fn grad_wrt_params(
    kind: LayerKind,
    shape: [usize; 4],
    stride: usize,
    padding: usize,
    grad_acc: &Grid3<f64>,
    input: &Grid3<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let (oc_n, oh, ow) = grad_acc.shape();
    let (in_ch, ih, _iw) = input.shape();
    debug_assert_eq!(oc_n, shape[0]);
    debug_assert_eq!(in_ch, shape[1]);
    let k = shape[2];
    let kk = k * k;
    let mut grad_w = vec![0.0; shape.iter().product()];
    let mut grad_b = vec![0.0; oc_n];
    for oc in 0..oc_n {
        grad_b[oc] = grad_acc.channel(oc).iter().sum();
    }
    for ic in 0..in_ch {
        for r in 0..ih {
            let row = input.row(ic, r);
            for (c, &v) in row.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for oc in 0..oc_n {
                    let wbase = (oc * in_ch + ic) * kk;
                    let ga_ch = grad_acc.channel(oc);
                    match kind {
                        LayerKind::Conv => {
                            for kh in 0..k {
                                let t = r + padding;
                                if t < kh {
                                    continue;
                                }
                                let t = t - kh;
                                if t % stride != 0 {
                                    continue;
                                }
                                let or = t / stride;
                                if or >= oh {
                                    continue;
                                }
                                for kw in 0..k {
                                    let u = c + padding;
                                    if u < kw {
                                        continue;
                                    }
                                    let u = u - kw;
                                    if u % stride != 0 {
                                        continue;
                                    }
                                    let ocol = u / stride;
                                    if ocol >= ow {
                                        continue;
                                    }
                                    grad_w[wbase + kh * k + kw] += v * ga_ch[or * ow + ocol];
                                }
                            }
                        }
                        LayerKind::Transposed => {
                            for kh in 0..k {
                                let or = r * stride + kh;
                                if or >= oh {
                                    continue;
                                }
                                for kw in 0..k {
                                    let ocol = c * stride + kw;
                                    if ocol >= ow {
                                        continue;
                                    }
                                    grad_w[wbase + kh * k + kw] += v * ga_ch[or * ow + ocol];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer_1x1(weight: i8, theta: i32, bias: i16) -> QConvLayer {
        let mut l = QConvLayer::empty("t", LayerKind::Conv, [1, 1, 1, 1], 1, 0);
        l.weights.q = vec![weight];
        l.biases = vec![bias];
        l.thresholds = ThresholdVector::from_quantized(vec![theta]).unwrap();
        l
    }

    fn spikes_from(vals: &[u32], h: usize, w: usize, n_max: u32) -> SpikeGrid {
        SpikeGrid::new(Grid3::from_vec(1, h, w, vals.to_vec()).unwrap(), n_max)
    }

    #[test]
    fn zero_input_zero_bias_is_fully_silent() {
        let layer = layer_1x1(2, 1, 0);
        let input = spikes_from(&[0, 0, 0, 0], 2, 2, 63);
        let (out, potentials, record) = spike_conv_forward(&layer, &input).unwrap();
        assert_eq!(out.total(), 0);
        assert!(potentials.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(record.synaptic_ops, 0);
        assert_eq!(record.zero_outputs, 4);
    }

    #[test]
    fn single_mac_by_hand() {
        let layer = layer_1x1(2, 1, 0);
        let input = spikes_from(&[3], 1, 1, 63);
        let (out, potentials, record) = spike_conv_forward(&layer, &input).unwrap();
        assert_eq!(potentials.as_slice(), &[6.0]);
        assert_eq!(out.counts.as_slice(), &[6]);
        assert_eq!(record.synaptic_ops, 1);
    }

    #[test]
    fn all_ones_3x3_kernel_sums_patch() {
        let mut layer = QConvLayer::empty("t", LayerKind::Conv, [1, 1, 3, 3], 1, 1);
        layer.weights.q = vec![1; 9];
        layer.thresholds = ThresholdVector::from_quantized(vec![4]).unwrap();
        // 3x3 input patch summing to 10; center output sees the full patch
        let input = spikes_from(&[1, 2, 0, 3, 1, 1, 0, 2, 0], 3, 3, 63);
        let (out, potentials, _) = spike_conv_forward(&layer, &input).unwrap();
        assert_eq!(*potentials.get(0, 1, 1), 10.0);
        assert_eq!(*out.counts.get(0, 1, 1), 2); // floor(10/4)
    }

    #[test]
    fn deconv_scatters_single_spike() {
        let mut layer = QConvLayer::empty("t", LayerKind::Transposed, [1, 1, 2, 2], 2, 0);
        layer.weights.q = vec![3; 4];
        layer.thresholds = ThresholdVector::from_quantized(vec![1]).unwrap();
        let input = spikes_from(&[1], 1, 1, 63);
        let (out, potentials, _) = spike_deconv_forward(&layer, &input).unwrap();
        assert_eq!(potentials.shape(), (1, 2, 2));
        assert!(potentials.as_slice().iter().all(|&v| v == 3.0));
        assert!(out.counts.as_slice().iter().all(|&v| v == 3));
    }

    #[test]
    fn deconv_doubles_spatial_dims() {
        let layer = QConvLayer::empty("t", LayerKind::Transposed, [1, 1, 2, 2], 2, 0);
        assert_eq!(layer.out_dims(5, 7).unwrap(), (10, 14));
    }

    #[test]
    fn bias_only_path_counts_bias_ops() {
        let layer = layer_1x1(2, 1, 5);
        let input = spikes_from(&[0, 0, 0, 0], 2, 2, 63);
        let (out, _, record) = spike_conv_forward(&layer, &input).unwrap();
        assert_eq!(record.synaptic_ops, 4); // one bias application per neuron
        assert!(out.counts.as_slice().iter().all(|&v| v == 5));
    }

    #[test]
    fn raising_threshold_never_raises_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..50 {
            let mut layer = QConvLayer::empty("t", LayerKind::Conv, [2, 1, 3, 3], 1, 1);
            for q in layer.weights.q.iter_mut() {
                *q = rng.gen_range(-8..=7);
            }
            let t1: i32 = rng.gen_range(1..=15);
            let t2 = (t1 * 2).min(31);
            let vals: Vec<u32> = (0..36).map(|_| rng.gen_range(0..8)).collect();
            let input = spikes_from(&vals, 6, 6, 63);
            layer.thresholds = ThresholdVector::from_quantized(vec![t1; 2]).unwrap();
            let (lo, _, _) = spike_conv_forward(&layer, &input).unwrap();
            layer.thresholds = ThresholdVector::from_quantized(vec![t2; 2]).unwrap();
            let (hi, _, _) = spike_conv_forward(&layer, &input).unwrap();
            assert!(hi.total() <= lo.total(), "theta {t1}->{t2}");
        }
    }

    #[test]
    fn fold_batchnorm_cases() {
        // identity
        let (w, b) = fold_batchnorm(&[0.5, -0.25], [1, 2, 1, 1], &[0.0], &[1.0], &[1.0], &[0.0], 0.0).unwrap();
        assert_eq!(w, vec![0.5, -0.25]);
        assert_eq!(b, vec![0.0]);
        // gamma 2, var 3, eps 1 -> factor 1
        let (w, _) = fold_batchnorm(&[0.5], [1, 1, 1, 1], &[0.0], &[3.0], &[2.0], &[0.0], 1.0).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12);
        // mean 5, var 0, eps 1 -> bias -5
        let (_, b) = fold_batchnorm(&[0.5], [1, 1, 1, 1], &[5.0], &[0.0], &[1.0], &[0.0], 1.0).unwrap();
        assert!((b[0] + 5.0).abs() < 1e-12);
    }

    fn default_net() -> NetworkGraph {
        build_network(&ArchConfig::default()).unwrap()
    }

    #[test]
    fn default_graph_heads_are_input_resolution() {
        let net = default_net();
        let input = SpikeGrid::zeros(3, 64, 64, 63);
        let (readout, activity) = net.forward(&input).unwrap();
        assert_eq!(readout.keypoint_spikes.shape(), (2, 64, 64));
        assert_eq!(readout.box_potentials.shape(), (5, 64, 64));
        assert_eq!(readout.rotation_spikes.shape(), (8, 64, 64));
        assert_eq!(activity.len(), net.layers.len());
    }

    #[test]
    fn minimal_depth_one_net_runs() {
        let cfg = ArchConfig { widths: vec![8], depth: 1, ..Default::default() };
        let net = build_network(&cfg).unwrap();
        // stem + 1 encoder + 1 decoder + 3 heads
        assert_eq!(net.layers.len(), 6);
        let input = SpikeGrid::zeros(3, 16, 16, 63);
        let (readout, _) = net.forward(&input).unwrap();
        assert_eq!(readout.keypoint_spikes.shape(), (2, 16, 16));
    }

    #[test]
    fn default_graph_passes_range_audit() {
        let net = default_net();
        net.audit().unwrap();
        for layer in &net.layers {
            assert!(layer.weights.q.iter().all(|&q| (-8..=7).contains(&q)));
            assert!(layer.thresholds.quantized().iter().all(|&t| (1..=31).contains(&t)));
        }
    }

    #[test]
    fn mismatched_widths_fail_to_build() {
        let cfg = ArchConfig { widths: vec![16], depth: 2, ..Default::default() };
        assert!(build_network(&cfg).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut net = default_net();
        let mut shadow = net.shadow_template();
        for l in shadow.layers.iter_mut() {
            for w in l.weights.iter_mut() {
                *w = rng.gen_range(-0.2..0.2);
            }
            for t in l.thresholds.iter_mut() {
                *t = rng.gen_range(1.0..6.0);
            }
        }
        net.sync_from_shadow(&shadow).unwrap();
        let vals: Vec<u32> = (0..3 * 64 * 64).map(|_| rng.gen_range(0..8)).collect();
        let input = SpikeGrid::new(Grid3::from_vec(3, 64, 64, vals).unwrap(), 63);
        let (a, _) = net.forward(&input).unwrap();
        let (b, _) = net.forward(&input).unwrap();
        assert_eq!(a.keypoint_spikes, b.keypoint_spikes);
        assert_eq!(a.rotation_spikes, b.rotation_spikes);
        assert_eq!(a.box_potentials, b.box_potentials);
    }

    #[test]
    fn sync_from_shadow_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut net = default_net();
        let mut shadow = net.shadow_template();
        for l in shadow.layers.iter_mut() {
            for w in l.weights.iter_mut() {
                *w = rng.gen_range(-1.0..1.0);
            }
            for t in l.thresholds.iter_mut() {
                *t = rng.gen_range(0.0..40.0);
            }
            for b in l.biases.iter_mut() {
                *b = rng.gen_range(-2.0..2.0);
            }
        }
        net.sync_from_shadow(&shadow).unwrap();
        let snapshot: Vec<_> = net.layers.clone();
        net.sync_from_shadow(&shadow).unwrap();
        assert_eq!(snapshot, net.layers);
        net.audit().unwrap();
    }

    /// Independent dense O(n^4) reference convolution used as the oracle
    /// for the integer path.
    fn naive_conv_reference(layer: &QConvLayer, input: &Grid3<u32>) -> Grid3<i64> {
        let (in_ch, ih, iw) = input.shape();
        let (oh, ow) = layer.out_dims(ih, iw).unwrap();
        let k = layer.kernel();
        let mut acc = Grid3::<i64>::zeros(layer.out_channels(), oh, ow);
        for oc in 0..layer.out_channels() {
            for or in 0..oh {
                for ocol in 0..ow {
                    let mut sum = layer.biases[oc] as i64;
                    for ic in 0..in_ch {
                        for kh in 0..k {
                            for kw in 0..k {
                                let (r, c) = match layer.kind {
                                    LayerKind::Conv => {
                                        let r = or * layer.stride + kh;
                                        let c = ocol * layer.stride + kw;
                                        if r < layer.padding || c < layer.padding {
                                            continue;
                                        }
                                        (r - layer.padding, c - layer.padding)
                                    }
                                    LayerKind::Transposed => {
                                        if or < kh || ocol < kw {
                                            continue;
                                        }
                                        let (t, u) = (or - kh, ocol - kw);
                                        if t % layer.stride != 0 || u % layer.stride != 0 {
                                            continue;
                                        }
                                        (t / layer.stride, u / layer.stride)
                                    }
                                };
                                if r >= ih || c >= iw {
                                    continue;
                                }
                                let w = layer.weights.q
                                    [((oc * in_ch + ic) * k + kh) * k + kw]
                                    as i64;
                                sum += *input.get(ic, r, c) as i64 * w;
                            }
                        }
                    }
                    *acc.get_mut(oc, or, ocol) = sum;
                }
            }
        }
        acc
    }

    #[test]
    fn scatter_path_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for trial in 0..200 {
            let kind = if rng.gen_bool(0.5) { LayerKind::Conv } else { LayerKind::Transposed };
            let (k, stride, padding) = match kind {
                LayerKind::Conv => {
                    let k = *[1usize, 3].iter().nth(rng.gen_range(0..2)).unwrap();
                    (k, rng.gen_range(1..=2), k / 2)
                }
                LayerKind::Transposed => (2, 2, 0),
            };
            let in_ch = rng.gen_range(1..=3);
            let oc_n = rng.gen_range(1..=3);
            let ih = rng.gen_range(k.max(2)..=8);
            let iw = rng.gen_range(k.max(2)..=8);
            let mut layer = QConvLayer::empty("t", kind, [oc_n, in_ch, k, k], stride, padding);
            for q in layer.weights.q.iter_mut() {
                *q = rng.gen_range(-8..=7);
            }
            for b in layer.biases.iter_mut() {
                *b = rng.gen_range(-5..=5);
            }
            let vals: Vec<u32> = (0..in_ch * ih * iw)
                .map(|_| if rng.gen_bool(0.4) { rng.gen_range(1..8) } else { 0 })
                .collect();
            let input = Grid3::from_vec(in_ch, ih, iw, vals).unwrap();
            let (acc, _) = accumulate_int(&layer, &input).unwrap();
            let reference = naive_conv_reference(&layer, &input);
            assert_eq!(acc, reference, "trial {trial} kind {kind:?} k {k} s {stride}");
        }
    }

    #[test]
    fn f64_kernels_match_integer_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..50 {
            let kind = if rng.gen_bool(0.5) { LayerKind::Conv } else { LayerKind::Transposed };
            let (k, stride, padding) = match kind {
                LayerKind::Conv => (3, rng.gen_range(1..=2), 1),
                LayerKind::Transposed => (2, 2, 0),
            };
            let mut layer = QConvLayer::empty("t", kind, [2, 2, k, k], stride, padding);
            for q in layer.weights.q.iter_mut() {
                *q = rng.gen_range(-8..=7);
            }
            for b in layer.biases.iter_mut() {
                *b = rng.gen_range(-4..=4);
            }
            let vals: Vec<u32> = (0..2 * 6 * 6).map(|_| rng.gen_range(0..6)).collect();
            let input = Grid3::from_vec(2, 6, 6, vals).unwrap();
            let (acc_int, _) = accumulate_int(&layer, &input).unwrap();
            let w_f: Vec<f64> = layer.weights.q.iter().map(|&q| q as f64).collect();
            let b_f: Vec<f64> = layer.biases.iter().map(|&b| b as f64).collect();
            let acc_f = accumulate_f64(
                kind,
                &w_f,
                layer.weights.shape,
                &b_f,
                stride,
                padding,
                &input.map(|v| v as f64),
            );
            let same = acc_int
                .as_slice()
                .iter()
                .zip(acc_f.as_slice())
                .all(|(&a, &b)| a as f64 == b);
            assert!(same);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for &kind in &[LayerKind::Conv, LayerKind::Transposed] {
            let (k, stride, padding) = match kind {
                LayerKind::Conv => (3, 2, 1),
                LayerKind::Transposed => (2, 2, 0),
            };
            let shape = [2, 2, k, k];
            let mut w: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let vals: Vec<f64> = (0..2 * 5 * 5).map(|_| rng.gen_range(0.0..3.0)).collect();
            let mut input = Grid3::from_vec(2, 5, 5, vals).unwrap();
            // scalar objective: weighted sum of outputs
            let acc0 = accumulate_f64(kind, &w, shape, &b, stride, padding, &input);
            let obj_w: Vec<f64> = (0..acc0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let objective = |acc: &Grid3<f64>| -> f64 {
                acc.as_slice().iter().zip(&obj_w).map(|(a, o)| a * o).sum()
            };
            let grad_acc = Grid3::from_vec(acc0.channels(), acc0.height(), acc0.width(), obj_w.clone()).unwrap();
            let grad_in = grad_wrt_input(kind, &w, shape, stride, padding, &grad_acc, (5, 5));
            let (grad_w, grad_b) = grad_wrt_params(kind, shape, stride, padding, &grad_acc, &input);
            let eps = 1e-6;
            for trial in 0..20 {
                let wi = rng.gen_range(0..w.len());
                let orig = w[wi];
                w[wi] = orig + eps;
                let hi = objective(&accumulate_f64(kind, &w, shape, &b, stride, padding, &input));
                w[wi] = orig - eps;
                let lo = objective(&accumulate_f64(kind, &w, shape, &b, stride, padding, &input));
                w[wi] = orig;
                let fd = (hi - lo) / (2.0 * eps);
                assert!(
                    (grad_w[wi] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                    "{kind:?} w[{wi}] trial {trial}: {} vs {fd}",
                    grad_w[wi]
                );
                let ii = rng.gen_range(0..input.len());
                let orig = input.as_slice()[ii];
                input.as_mut_slice()[ii] = orig + eps;
                let hi = objective(&accumulate_f64(kind, &w, shape, &b, stride, padding, &input));
                input.as_mut_slice()[ii] = orig - eps;
                let lo = objective(&accumulate_f64(kind, &w, shape, &b, stride, padding, &input));
                input.as_mut_slice()[ii] = orig;
                let fd = (hi - lo) / (2.0 * eps);
                assert!(
                    (grad_in.as_slice()[ii] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                    "{kind:?} in[{ii}]: {} vs {fd}",
                    grad_in.as_slice()[ii]
                );
            }
            let sum_b: f64 = grad_b.iter().sum();
            let fd_total: f64 = grad_acc.as_slice().iter().sum();
            assert!((sum_b - fd_total).abs() < 1e-9);
        }
    }
}
