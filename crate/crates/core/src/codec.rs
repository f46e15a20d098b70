//! Spike codec: rate-encode BEV grids into spike counts through a
//! learnable scale, and decode network head outputs back into detections.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::{BEVGrid, BoxDims, GridMeta, GroundTruthMaps, BEV_CHANNELS, BOX_CHANNELS};
use crate::error::{Error, Result};
use crate::grid::Grid3;

/// Spike counts per (channel, row, col): the inter-layer currency of the
/// whole network. Counts never exceed the window maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeGrid {
    pub counts: Grid3<u32>,
    pub window_max: u32,
}

impl SpikeGrid {
    pub fn new(counts: Grid3<u32>, window_max: u32) -> Self {
        debug_assert!(counts.as_slice().iter().all(|&c| c <= window_max));
        Self { counts, window_max }
    }

    pub fn zeros(channels: usize, height: usize, width: usize, window_max: u32) -> Self {
        Self {
            counts: Grid3::zeros(channels, height, width),
            window_max,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.as_slice().iter().map(|&c| c as u64).sum()
    }
}

/// Learnable spike-coder parameters: one positive scale per BEV channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub alphas: Vec<f64>,
    pub window_max: u32,
}

impl EncoderParams {
    pub fn new(alphas: Vec<f64>, window_max: u32) -> Result<Self> {
        if alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invariant("encoder alpha must be > 0".to_string()));
        }
        if window_max < 1 {
            return Err(Error::invariant("window max must be >= 1".to_string()));
        }
        Ok(Self { alphas, window_max })
    }
}

/// Rate-encode a BEV grid: `count = clamp(floor(alpha * value), 0, N_max)`
/// per channel and cell. Monotone in both the value and the scale.
pub fn encode_rate(bev: &BEVGrid, p: &EncoderParams) -> Result<SpikeGrid> {
    let (c, h, w) = bev.data.shape();
    if p.alphas.len() != c {
        return Err(Error::shape(format!(
            "encoder has {} alphas for {c} BEV channels",
            p.alphas.len()
        )));
    }
    let mut counts = Grid3::<u32>::zeros(c, h, w);
    for ch in 0..c {
        let alpha = p.alphas[ch];
        let src = bev.data.channel(ch);
        let dst = counts.channel_mut(ch);
        for (d, &v) in dst.iter_mut().zip(src.iter()) {
            let rate = (alpha * v).floor();
            *d = if rate <= 0.0 {
                0
            } else if rate >= p.window_max as f64 {
                p.window_max
            } else {
                rate as u32
            };
        }
    }
    Ok(SpikeGrid::new(counts, p.window_max))
}

/// Backward rule for the coder through its soft surrogate
/// `clamp(alpha * value, 0, N_max)`: inside the clamp interior the value
/// path scales by `alpha` and the alpha path by the value; outside both
/// are zero.
pub fn encode_rate_grad(
    bev: &BEVGrid,
    p: &EncoderParams,
    upstream: &Grid3<f64>,
) -> Result<(Grid3<f64>, Vec<f64>)> {
    let (c, h, w) = bev.data.shape();
    if !bev.data.same_shape(upstream) {
        return Err(Error::shape(format!(
            "encode_rate_grad: {:?} vs {:?}",
            bev.data.shape(),
            upstream.shape()
        )));
    }
    if p.alphas.len() != c {
        return Err(Error::shape(format!(
            "encoder has {} alphas for {c} BEV channels",
            p.alphas.len()
        )));
    }
    let mut grad_bev = Grid3::<f64>::zeros(c, h, w);
    let mut grad_alpha = vec![0.0; c];
    for ch in 0..c {
        let alpha = p.alphas[ch];
        let src = bev.data.channel(ch);
        let ups = upstream.channel(ch);
        let gb = grad_bev.channel_mut(ch);
        let mut ga = 0.0;
        for i in 0..src.len() {
            let pre = alpha * src[i];
            if pre > 0.0 && pre < p.window_max as f64 {
                gb[i] = ups[i] * alpha;
                ga += ups[i] * src[i];
            }
        }
        grad_alpha[ch] = ga;
    }
    Ok((grad_bev, grad_alpha))
}

/// Raw head outputs of one forward pass: spike counts for the two
/// classification heads and membrane potentials for the regression head.
#[derive(Debug, Clone)]
pub struct HeadReadout {
    /// `2 x H x W`: background / foreground.
    pub keypoint_spikes: Grid3<u32>,
    /// `R x H x W`.
    pub rotation_spikes: Grid3<u32>,
    /// `5 x H x W`, in accumulator units (pre-activation, never spiking).
    pub box_potentials: Grid3<f64>,
}

/// A decoded BEV detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub dims: BoxDims,
    pub yaw_bin: usize,
    /// Foreground evidence in `[0, 1]`.
    pub score: f64,
}

/// A keypoint surviving the local-maximum test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Affine map between box-head potentials and metric targets:
/// `meters = potential * scale + mean` per box channel. Stored with the
/// model; derived from training-set statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxNorm {
    pub mean: [f64; BOX_CHANNELS],
    pub scale: [f64; BOX_CHANNELS],
}

impl BoxNorm {
    /// Identity map (potentials read as meters directly).
    pub fn identity() -> Self {
        Self {
            mean: [0.0; BOX_CHANNELS],
            scale: [1.0; BOX_CHANNELS],
        }
    }

    pub fn decode(&self, channel: usize, potential: f64) -> f64 {
        potential * self.scale[channel] + self.mean[channel]
    }

    pub fn encode(&self, channel: usize, meters: f64) -> f64 {
        (meters - self.mean[channel]) / self.scale[channel]
    }
}

/// Extract keypoints: a cell qualifies when its foreground margin
/// `fg - bg` reaches `min_margin` and its foreground count is the maximum
/// of its 3x3 neighborhood (ties go to the lowest row-major index).
/// Score is `fg / (fg + bg)`, zero when both are zero.
pub fn decode_keypoints(readout: &HeadReadout, min_margin: i64) -> Vec<Keypoint> {
    let (ch, h, w) = readout.keypoint_spikes.shape();
    debug_assert_eq!(ch, 2);
    let mut keypoints = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let bg = *readout.keypoint_spikes.get(0, r, c) as i64;
            let fg = *readout.keypoint_spikes.get(1, r, c) as i64;
            if fg - bg < min_margin {
                continue;
            }
            let idx = r * w + c;
            let mut is_peak = true;
            'nbhd: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let nr = r as i64 + dr;
                    let nc = c as i64 + dc;
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let nfg = *readout.keypoint_spikes.get(1, nr as usize, nc as usize) as i64;
                    let nidx = nr as usize * w + nc as usize;
                    if nfg > fg || (nfg == fg && nidx < idx) {
                        is_peak = false;
                        break 'nbhd;
                    }
                }
            }
            if !is_peak {
                continue;
            }
            let score = if fg + bg == 0 {
                0.0
            } else {
                fg as f64 / (fg + bg) as f64
            };
            keypoints.push(Keypoint { row: r, col: c, score });
        }
    }
    keypoints
}

/// Decode detections at keypoint cells: dimensions and sub-cell offsets
/// come from the denormalized box potentials, the heading from the argmax
/// rotation channel (ties to the lowest bin). Detections with a
/// non-positive dimension are dropped; the second return value counts
/// them.
pub fn decode_boxes(
    readout: &HeadReadout,
    keypoints: &[Keypoint],
    meta: &GridMeta,
    norm: &BoxNorm,
) -> (Vec<Detection>, usize) {
    let r_bins = readout.rotation_spikes.channels();
    let mut detections = Vec::with_capacity(keypoints.len());
    let mut dropped = 0;
    for kp in keypoints {
        let read = |ch: usize| norm.decode(ch, *readout.box_potentials.get(ch, kp.row, kp.col));
        let dims = BoxDims { h: read(0), w: read(1), l: read(2) };
        if !(dims.h > 0.0 && dims.w > 0.0 && dims.l > 0.0) {
            dropped += 1;
            continue;
        }
        let (ccx, ccy) = meta.cell_center(kp.row, kp.col);
        let mut yaw_bin = 0;
        let mut best = 0i64;
        for b in 0..r_bins {
            let spikes = *readout.rotation_spikes.get(b, kp.row, kp.col) as i64;
            if spikes > best {
                best = spikes;
                yaw_bin = b;
            }
        }
        detections.push(Detection {
            cx: ccx + read(3) * meta.cell_size,
            cy: ccy + read(4) * meta.cell_size,
            dims,
            yaw_bin,
            score: kp.score,
        });
    }
    (detections, dropped)
}

/// Render ground truth into the readout a perfectly trained network would
/// produce: saturated foreground spikes at keypoints, one-hot rotation
/// spikes, and exact (normalized) box potentials. Used by decoder tests
/// and oracle-injection evaluation.
pub fn render_ideal_readout(
    maps: &GroundTruthMaps,
    norm: &BoxNorm,
    window_max: u32,
) -> HeadReadout {
    let h = maps.keypoint_map.height();
    let w = maps.keypoint_map.width();
    let mut kp = Grid3::<u32>::zeros(2, h, w);
    let mut rot = Grid3::<u32>::zeros(maps.rotation_bins, h, w);
    let mut boxes = Grid3::<f64>::zeros(BOX_CHANNELS, h, w);
    for r in 0..h {
        for c in 0..w {
            if *maps.keypoint_map.get(r, c) != 0 {
                *kp.get_mut(1, r, c) = window_max;
                let bin = *maps.rotation_map.get(r, c) as usize;
                *rot.get_mut(bin, r, c) = window_max;
                for ch in 0..BOX_CHANNELS {
                    *boxes.get_mut(ch, r, c) = norm.encode(ch, *maps.box_map.get(ch, r, c));
                }
            } else {
                *kp.get_mut(0, r, c) = window_max;
            }
        }
    }
    HeadReadout {
        keypoint_spikes: kp,
        rotation_spikes: rot,
        box_potentials: boxes,
    }
}

/// Serialize detections to the line format `cx cy h w l yaw_bin score`,
/// reals with four decimal places.
pub fn format_detections(detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        out.push_str(&format!(
            "{:.4} {:.4} {:.4} {:.4} {:.4} {} {:.4}\n",
            d.cx, d.cy, d.dims.h, d.dims.w, d.dims.l, d.yaw_bin, d.score
        ));
    }
    out
}

pub fn write_detections(path: impl AsRef<Path>, detections: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(format_detections(detections).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Parse the detection line format back.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut detections = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::format(format!(
                "detection line {}: expected 7 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::format(format!("detection line {}: bad number {:?}", lineno + 1, fields[i])))
        };
        detections.push(Detection {
            cx: num(0)?,
            cy: num(1)?,
            dims: BoxDims { h: num(2)?, w: num(3)?, l: num(4)? },
            yaw_bin: fields[5]
                .parse()
                .map_err(|_| Error::format(format!("detection line {}: bad bin {:?}", lineno + 1, fields[5])))?,
            score: num(6)?,
        });
    }
    Ok(detections)
}

/// Default input channel count the codec serves.
pub const ENCODER_CHANNELS: usize = BEV_CHANNELS;
