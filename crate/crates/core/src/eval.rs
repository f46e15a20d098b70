//! Detection evaluation: rotated BEV IoU via convex polygon clipping,
//! interpolated Average Precision with KITTI-style difficulty pools, and
//! spike-activity aggregation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::bev::{bin_center_yaw, pointcloud_to_bev, Difficulty, GridMeta, LabeledObject, SceneLabel};
use crate::codec::Detection;
use crate::dataset::SceneRecord;
use crate::error::{Error, Result};
use crate::model::SpklModel;
use crate::net::ActivityRecord;

/// A yaw-rotated rectangle in the BEV plane. `l` runs along the heading,
/// `w` across it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

impl BevBox {
    pub fn from_object(obj: &LabeledObject) -> Self {
        Self {
            cx: obj.center[0],
            cy: obj.center[1],
            w: obj.dims.w,
            l: obj.dims.l,
            yaw: obj.yaw,
        }
    }

    /// Detections carry a rotation bin; the box heading is that bin's
    /// center.
    pub fn from_detection(det: &Detection, r_bins: usize) -> Self {
        Self {
            cx: det.cx,
            cy: det.cy,
            w: det.dims.w,
            l: det.dims.l,
            yaw: bin_center_yaw(det.yaw_bin, r_bins),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let rot = |u: f64, v: f64| [self.cx + u * c - v * s, self.cy + u * s + v * c];
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }

    /// Whether a point lies inside the rectangle (boundary inclusive).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0
    }
}

/// Signed doubled area of a polygon (shoelace).
fn shoelace2(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x1, y1] = poly[i];
        let [x2, y2] = poly[(i + 1) % n];
        acc += x1 * y2 - x2 * y1;
    }
    acc
}

/// Clip `subject` against one directed edge `a -> b`, keeping the left
/// half-plane (Sutherland–Hodgman step; clip polygon must be CCW).
fn clip_edge(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
    let intersect = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        let num = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
        let den = dx * (p[1] - q[1]) - dy * (p[0] - q[0]);
        let t = num / den;
        [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
    };
    let mut out = Vec::with_capacity(subject.len() + 1);
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let cur_in = inside(cur);
        let prev_in = inside(prev);
        if cur_in {
            if !prev_in {
                out.push(intersect(prev, cur));
            }
            out.push(cur);
        } else if prev_in {
            out.push(intersect(prev, cur));
        }
    }
    out
}

/// Intersection area of two convex CCW polygons.
fn convex_intersection_area(subject: &[[f64; 2]; 4], clip: &[[f64; 2]; 4]) -> f64 {
    let mut poly: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_edge(&poly, clip[i], clip[(i + 1) % 4]);
    }
    if poly.len() < 3 {
        return 0.0;
    }
    shoelace2(&poly).abs() / 2.0
}

fn box_key(b: &BevBox) -> [f64; 5] {
    [b.cx, b.cy, b.w, b.l, b.yaw]
}

/// Intersection-over-union of two rotated BEV rectangles.
///
/// Degenerate (non-positive area) boxes score 0. Arguments are put into a
/// canonical order before clipping so the result is exactly symmetric.
pub fn rotated_iou(a: &BevBox, b: &BevBox) -> f64 {
    if !(a.area() > 0.0) || !(b.area() > 0.0) {
        return 0.0;
    }
    let ka = box_key(a);
    let kb = box_key(b);
    let swap = ka
        .iter()
        .zip(kb.iter())
        .find_map(|(x, y)| {
            let ord = x.total_cmp(y);
            (ord != std::cmp::Ordering::Equal).then_some(ord == std::cmp::Ordering::Greater)
        })
        .unwrap_or(false);
    let (p, q) = if swap { (b, a) } else { (a, b) };
    let inter = convex_intersection_area(&p.corners(), &q.corners());
    let union = p.area() + q.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// One point of a precision–recall curve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Evaluation outcome for one difficulty bucket at one IoU threshold.
#[derive(Debug, Clone, Serialize)]
pub struct DifficultyResult {
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt_count: usize,
    /// Set when the bucket has no ground truth at all.
    pub no_gt: bool,
    pub curve: Vec<PrPoint>,
}

/// Evaluation outcome at one IoU threshold across difficulty buckets.
#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub iou_thresh: f64,
    pub by_difficulty: BTreeMap<Difficulty, DifficultyResult>,
}

/// Detections and ground truth for one scene.
#[derive(Debug, Clone)]
pub struct SceneEval {
    pub detections: Vec<Detection>,
    pub label: SceneLabel,
}

/// Number of recall points of the interpolated AP.
const AP_RECALL_POINTS: usize = 40;

fn ap_from_curve(curve: &[PrPoint]) -> f64 {
    let mut total = 0.0;
    for i in 1..=AP_RECALL_POINTS {
        let r = i as f64 / AP_RECALL_POINTS as f64;
        let p = curve
            .iter()
            .filter(|pt| pt.recall >= r - 1e-12)
            .map(|pt| pt.precision)
            .fold(0.0f64, f64::max);
        total += p;
    }
    total / AP_RECALL_POINTS as f64
}

/// Average Precision over a set of scenes at one IoU threshold.
///
/// Detections are ranked by descending score (ties keep insertion order)
/// and greedily matched to the highest-IoU unmatched ground truth of the
/// evaluated difficulty pool. Ground truth harder than the evaluated
/// bucket is ignored: a detection matching only ignored boxes counts
/// neither as true nor as false positive. AP is the 40-point interpolated
/// area under the precision–recall curve.
pub fn average_precision(scenes: &[SceneEval], iou_thresh: f64, r_bins: usize) -> EvalResult {
    let mut by_difficulty = BTreeMap::new();
    for level in [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard] {
        by_difficulty.insert(level, evaluate_level(scenes, iou_thresh, level, r_bins));
    }
    EvalResult {
        iou_thresh,
        by_difficulty,
    }
}

fn evaluate_level(
    scenes: &[SceneEval],
    iou_thresh: f64,
    level: Difficulty,
    r_bins: usize,
) -> DifficultyResult {
    // (scene, det index, score) ranked by descending score, stable
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for (di, det) in scene.detections.iter().enumerate() {
            ranked.push((si, di, det.score));
        }
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));

    // Per scene: required pool (difficulty <= level), ignored pool (harder
    // GT plus DontCare-style regions).
    let mut required: Vec<Vec<(BevBox, bool)>> = Vec::with_capacity(scenes.len());
    let mut ignored: Vec<Vec<BevBox>> = Vec::with_capacity(scenes.len());
    let mut gt_count = 0usize;
    for scene in scenes {
        let mut req = Vec::new();
        let mut ign = Vec::new();
        for obj in &scene.label.objects {
            if obj.difficulty <= level {
                req.push((BevBox::from_object(obj), false));
            } else {
                ign.push(BevBox::from_object(obj));
            }
        }
        for region in &scene.label.ignored {
            ign.push(BevBox {
                cx: region.center[0],
                cy: region.center[1],
                w: region.w,
                l: region.l,
                yaw: region.yaw,
            });
        }
        gt_count += req.len();
        required.push(req);
        ignored.push(ign);
    }

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (si, di, _) in &ranked {
        let det_box = BevBox::from_detection(&scenes[*si].detections[*di], r_bins);
        let pool = &mut required[*si];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gt_box, matched)) in pool.iter().enumerate() {
            if *matched {
                continue;
            }
            let iou = rotated_iou(&det_box, gt_box);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            pool[gi].1 = true;
            tp += 1;
        } else if ignored[*si]
            .iter()
            .any(|ig| ig.area() > 0.0 && rotated_iou(&det_box, ig) >= iou_thresh)
        {
            // matches only ignorable ground truth: drop from the ranking
            continue;
        } else {
            fp += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = if gt_count > 0 { tp as f64 / gt_count as f64 } else { 0.0 };
        curve.push(PrPoint { precision, recall });
    }

    let ap = if gt_count == 0 { 0.0 } else { ap_from_curve(&curve) };
    DifficultyResult {
        ap,
        tp,
        fp,
        fn_: gt_count - tp,
        gt_count,
        no_gt: gt_count == 0,
        curve,
    }
}

/// Per-layer activity in a report.
#[derive(Debug, Clone, Serialize)]
pub struct LayerActivity {
    pub layer: String,
    pub input_spikes: u64,
    pub output_spikes: u64,
    pub synaptic_ops: u64,
    pub output_neurons: u64,
    pub zero_outputs: u64,
    /// Fraction of output neurons that stayed at zero.
    pub sparsity: f64,
}

/// Aggregated spike-activity report for one or more forward passes.
#[derive(Debug, Clone, Serialize)]
pub struct ActivityReport {
    pub layers: Vec<LayerActivity>,
    pub total_input_spikes: u64,
    pub total_output_spikes: u64,
    pub total_synaptic_ops: u64,
    /// Documented proxy only: one synaptic operation is one
    /// nonzero-input multiply-accumulate. No joules are claimed.
    pub energy_proxy_synops: u64,
    pub mean_sparsity: f64,
}

/// Aggregate per-layer records into a report. Records from several passes
/// of the same network may be concatenated; they are grouped by layer name
/// in first-seen order.
pub fn activity_report(records: &[ActivityRecord]) -> ActivityReport {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, LayerActivity> = BTreeMap::new();
    for rec in records {
        if !acc.contains_key(&rec.layer) {
            order.push(rec.layer.clone());
            acc.insert(
                rec.layer.clone(),
                LayerActivity {
                    layer: rec.layer.clone(),
                    input_spikes: 0,
                    output_spikes: 0,
                    synaptic_ops: 0,
                    output_neurons: 0,
                    zero_outputs: 0,
                    sparsity: 0.0,
                },
            );
        }
        let entry = acc.get_mut(&rec.layer).unwrap();
        entry.input_spikes += rec.input_spikes;
        entry.output_spikes += rec.output_spikes;
        entry.synaptic_ops += rec.synaptic_ops;
        entry.output_neurons += rec.output_neurons;
        entry.zero_outputs += rec.zero_outputs;
    }
    let mut layers = Vec::with_capacity(order.len());
    let (mut tin, mut tout, mut tops, mut tneurons, mut tzero) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for name in order {
        let mut layer = acc.remove(&name).unwrap();
        layer.sparsity = if layer.output_neurons > 0 {
            layer.zero_outputs as f64 / layer.output_neurons as f64
        } else {
            1.0
        };
        tin += layer.input_spikes;
        tout += layer.output_spikes;
        tops += layer.synaptic_ops;
        tneurons += layer.output_neurons;
        tzero += layer.zero_outputs;
        layers.push(layer);
    }
    ActivityReport {
        layers,
        total_input_spikes: tin,
        total_output_spikes: tout,
        total_synaptic_ops: tops,
        energy_proxy_synops: tops,
        mean_sparsity: if tneurons > 0 { tzero as f64 / tneurons as f64 } else { 1.0 },
    }
}

/// Per-scene inference output inside a dataset evaluation.
#[derive(Debug, Clone)]
pub struct SceneOutcome {
    pub name: String,
    pub detections: Vec<Detection>,
    pub activity: Vec<ActivityRecord>,
    pub latency_ms: f64,
    pub dropped: usize,
}

/// Dataset-level evaluation of a model.
#[derive(Debug)]
pub struct ModelEvalOutcome {
    /// One entry per requested IoU threshold, in request order.
    pub results: Vec<EvalResult>,
    pub activity: ActivityReport,
    pub mean_latency_ms: f64,
    pub dropped: usize,
    pub scenes: Vec<SceneOutcome>,
}

/// Run a model over every scene of a dataset and score it at each IoU
/// threshold. Scene-level parallelism is opt-in via `threads`; results
/// are collected in input order so the thread count never changes them.
pub fn evaluate_model(
    model: &SpklModel,
    records: &[SceneRecord],
    meta: &GridMeta,
    min_margin: i64,
    ious: &[f64],
    threads: usize,
) -> Result<ModelEvalOutcome> {
    let run_scene = |rec: &SceneRecord| -> Result<SceneOutcome> {
        let bev = pointcloud_to_bev(&rec.cloud, meta)?;
        let start = std::time::Instant::now();
        let (detections, activity, dropped) = model.detect(&bev, min_margin)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(SceneOutcome {
            name: rec.name.clone(),
            detections,
            activity,
            latency_ms,
            dropped,
        })
    };
    let scenes: Vec<SceneOutcome> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| records.par_iter().map(run_scene).collect::<Result<Vec<_>>>())?
    } else {
        records.iter().map(run_scene).collect::<Result<Vec<_>>>()?
    };

    let scene_evals: Vec<SceneEval> = scenes
        .iter()
        .zip(records)
        .map(|(out, rec)| SceneEval {
            detections: out.detections.clone(),
            label: rec.label.clone(),
        })
        .collect();
    let results: Vec<EvalResult> = ious
        .iter()
        .map(|&iou| average_precision(&scene_evals, iou, model.net.rotation_bins))
        .collect();
    let all_records: Vec<ActivityRecord> = scenes.iter().flat_map(|s| s.activity.clone()).collect();
    let activity = activity_report(&all_records);
    let mean_latency_ms = if scenes.is_empty() {
        0.0
    } else {
        scenes.iter().map(|s| s.latency_ms).sum::<f64>() / scenes.len() as f64
    };
    let dropped = scenes.iter().map(|s| s.dropped).sum();
    Ok(ModelEvalOutcome {
        results,
        activity,
        mean_latency_ms,
        dropped,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::{BoxDims, ObjectClass};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square(cx: f64, cy: f64) -> BevBox {
        BevBox { cx, cy, w: 1.0, l: 1.0, yaw: 0.0 }
    }

    #[test]
    fn identical_boxes_score_one() {
        let b = BevBox { cx: 3.0, cy: -1.0, w: 1.8, l: 4.2, yaw: 0.7 };
        assert!((rotated_iou(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_boxes_score_zero() {
        let a = unit_square(0.0, 0.0);
        let b = unit_square(10.0, 10.0);
        assert_eq!(rotated_iou(&a, &b), 0.0);
    }

    #[test]
    fn offset_unit_squares_score_one_third() {
        let a = unit_square(0.0, 0.0);
        let b = unit_square(0.5, 0.0);
        assert!((rotated_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_box_scores_zero() {
        let a = unit_square(0.0, 0.0);
        let b = BevBox { cx: 0.0, cy: 0.0, w: 0.0, l: 1.0, yaw: 0.0 };
        assert_eq!(rotated_iou(&a, &b), 0.0);
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BevBox {
        BevBox {
            cx: rng.gen_range(-3.0..3.0),
            cy: rng.gen_range(-3.0..3.0),
            w: rng.gen_range(0.5..4.0),
            l: rng.gen_range(0.5..6.0),
            yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        }
    }

    #[test]
    fn iou_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..300 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let ab = rotated_iou(&a, &b);
            let ba = rotated_iou(&b, &a);
            assert!((ab - ba).abs() < 1e-12, "asymmetry: {ab} vs {ba}");
        }
    }

    #[test]
    fn iou_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let base = rotated_iou(&a, &b);
            let phi: f64 = rng.gen_range(-3.0..3.0);
            let (s, c) = phi.sin_cos();
            let rot = |bx: &BevBox| BevBox {
                cx: bx.cx * c - bx.cy * s,
                cy: bx.cx * s + bx.cy * c,
                w: bx.w,
                l: bx.l,
                yaw: bx.yaw + phi,
            };
            let rotated = rotated_iou(&rot(&a), &rot(&b));
            assert!((base - rotated).abs() < 1e-9, "{base} vs {rotated}");
        }
    }

    /// Independent Monte-Carlo IoU estimate used as a test oracle.
    fn mc_iou(a: &BevBox, b: &BevBox, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let radius = |bx: &BevBox| (bx.w.hypot(bx.l)) / 2.0;
        let x_lo = (a.cx - radius(a)).min(b.cx - radius(b));
        let x_hi = (a.cx + radius(a)).max(b.cx + radius(b));
        let y_lo = (a.cy - radius(a)).min(b.cy - radius(b));
        let y_hi = (a.cy + radius(a)).max(b.cy + radius(b));
        let mut inter = 0u64;
        let mut union = 0u64;
        for _ in 0..samples {
            let x = rng.gen_range(x_lo..x_hi);
            let y = rng.gen_range(y_lo..y_hi);
            let in_a = a.contains(x, y);
            let in_b = b.contains(x, y);
            inter += (in_a && in_b) as u64;
            union += (in_a || in_b) as u64;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_agrees_with_monte_carlo_spot_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for trial in 0..10 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let exact = rotated_iou(&a, &b);
            let approx = mc_iou(&a, &b, 200_000, 1000 + trial);
            assert!(
                (exact - approx).abs() < 0.02,
                "trial {trial}: exact {exact} vs MC {approx}"
            );
        }
    }

    fn car_at(cx: f64, cy: f64, yaw: f64) -> LabeledObject {
        LabeledObject {
            center: [cx, cy, 0.8],
            dims: BoxDims { h: 1.5, w: 1.8, l: 4.2 },
            yaw,
            class: ObjectClass::Car,
            difficulty: Difficulty::Easy,
        }
    }

    fn det_for(obj: &LabeledObject, score: f64, r_bins: usize) -> Detection {
        Detection {
            cx: obj.center[0],
            cy: obj.center[1],
            dims: obj.dims,
            yaw_bin: crate::bev::rotation_bin(obj.yaw, r_bins),
            score,
        }
    }

    #[test]
    fn single_match_gives_ap_one() {
        let gt = car_at(5.0, 0.0, 0.2);
        let scenes = vec![SceneEval {
            detections: vec![det_for(&gt, 0.9, 8)],
            label: SceneLabel { objects: vec![gt], ignored: vec![] },
        }];
        let result = average_precision(&scenes, 0.5, 8);
        let easy = &result.by_difficulty[&Difficulty::Easy];
        assert!((easy.ap - 1.0).abs() < 1e-12);
        assert_eq!((easy.tp, easy.fp, easy.fn_), (1, 0, 0));
    }

    #[test]
    fn no_detections_gives_ap_zero() {
        let gt = car_at(5.0, 0.0, 0.2);
        let scenes = vec![SceneEval {
            detections: vec![],
            label: SceneLabel { objects: vec![gt], ignored: vec![] },
        }];
        let result = average_precision(&scenes, 0.5, 8);
        assert_eq!(result.by_difficulty[&Difficulty::Easy].ap, 0.0);
        assert!(!result.by_difficulty[&Difficulty::Easy].no_gt);
    }

    #[test]
    fn empty_everything_sets_no_gt_flag() {
        let scenes = vec![SceneEval {
            detections: vec![],
            label: SceneLabel::default(),
        }];
        let result = average_precision(&scenes, 0.5, 8);
        let easy = &result.by_difficulty[&Difficulty::Easy];
        assert_eq!(easy.ap, 0.0);
        assert!(easy.no_gt);
    }

    #[test]
    fn trailing_false_positive_keeps_interpolated_ap_at_one() {
        let gt = car_at(5.0, 0.0, 0.2);
        let miss = Detection {
            cx: 12.0,
            cy: 5.0,
            dims: BoxDims { h: 1.5, w: 1.8, l: 4.2 },
            yaw_bin: 0,
            score: 0.8,
        };
        let scenes = vec![SceneEval {
            detections: vec![det_for(&gt, 0.9, 8), miss],
            label: SceneLabel { objects: vec![gt], ignored: vec![] },
        }];
        let result = average_precision(&scenes, 0.5, 8);
        let easy = &result.by_difficulty[&Difficulty::Easy];
        assert!((easy.ap - 1.0).abs() < 1e-12, "ap = {}", easy.ap);
        // brute-force check: integrate max-precision-at-recall>=r directly
        let brute: f64 = (1..=40)
            .map(|i| {
                let r = i as f64 / 40.0;
                easy.curve
                    .iter()
                    .filter(|p| p.recall >= r)
                    .map(|p| p.precision)
                    .fold(0.0f64, f64::max)
            })
            .sum::<f64>()
            / 40.0;
        assert!((easy.ap - brute).abs() < 1e-12);
        assert_eq!((easy.tp, easy.fp), (1, 1));
    }

    #[test]
    fn appending_a_true_positive_never_decreases_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..50 {
            let gts: Vec<LabeledObject> = (0..3)
                .map(|i| car_at(4.0 + 5.0 * i as f64, rng.gen_range(-4.0..4.0), rng.gen_range(-1.5..1.5)))
                .collect();
            let mut dets: Vec<Detection> = Vec::new();
            // one true positive, one false positive with random scores
            dets.push(det_for(&gts[0], rng.gen_range(0.2..1.0), 8));
            dets.push(Detection {
                cx: 40.0,
                cy: 0.0,
                dims: BoxDims { h: 1.5, w: 1.8, l: 4.2 },
                yaw_bin: 0,
                score: rng.gen_range(0.2..1.0),
            });
            let scenes = |d: Vec<Detection>| {
                vec![SceneEval {
                    detections: d,
                    label: SceneLabel { objects: gts.clone(), ignored: vec![] },
                }]
            };
            let before = average_precision(&scenes(dets.clone()), 0.5, 8)
                .by_difficulty[&Difficulty::Easy]
                .ap;
            // append a lowest-score detection matching an unmatched gt
            let min_score = dets.iter().map(|d| d.score).fold(f64::INFINITY, f64::min);
            dets.push(det_for(&gts[1], min_score / 2.0, 8));
            let after = average_precision(&scenes(dets), 0.5, 8).by_difficulty[&Difficulty::Easy].ap;
            assert!(
                after >= before - 1e-12,
                "AP regressed from {before} to {after}"
            );
        }
    }

    #[test]
    fn harder_gt_is_ignored_not_counted() {
        let mut hard = car_at(5.0, 0.0, 0.0);
        hard.difficulty = Difficulty::Hard;
        let det = det_for(&hard, 0.9, 8);
        let scenes = vec![SceneEval {
            detections: vec![det],
            label: SceneLabel { objects: vec![hard], ignored: vec![] },
        }];
        let result = average_precision(&scenes, 0.5, 8);
        // at easy level the hard gt is ignorable: no tp, no fp, no gt
        let easy = &result.by_difficulty[&Difficulty::Easy];
        assert_eq!((easy.tp, easy.fp, easy.gt_count), (0, 0, 0));
        // at hard level it is required and matched
        let hard_res = &result.by_difficulty[&Difficulty::Hard];
        assert_eq!((hard_res.tp, hard_res.fp), (1, 0));
    }

    #[test]
    fn activity_report_aggregates_and_rates() {
        let records = vec![
            ActivityRecord {
                layer: "stem".into(),
                input_spikes: 100,
                output_spikes: 50,
                synaptic_ops: 900,
                output_neurons: 10,
                zero_outputs: 4,
            },
            ActivityRecord {
                layer: "head".into(),
                input_spikes: 50,
                output_spikes: 0,
                synaptic_ops: 200,
                output_neurons: 10,
                zero_outputs: 10,
            },
        ];
        let report = activity_report(&records);
        assert_eq!(report.layers.len(), 2);
        assert!((report.layers[0].sparsity - 0.4).abs() < 1e-12);
        assert!((report.layers[1].sparsity - 1.0).abs() < 1e-12);
        assert_eq!(report.total_synaptic_ops, 1100);
        assert_eq!(report.energy_proxy_synops, 1100);
        assert_eq!(report.total_input_spikes, 150);
    }

    #[test]
    fn all_zero_pass_reports_full_sparsity() {
        let records = vec![ActivityRecord {
            layer: "stem".into(),
            input_spikes: 0,
            output_spikes: 0,
            synaptic_ops: 0,
            output_neurons: 16,
            zero_outputs: 16,
        }];
        let report = activity_report(&records);
        assert_eq!(report.total_output_spikes, 0);
        assert_eq!(report.mean_sparsity, 1.0);
    }
}
