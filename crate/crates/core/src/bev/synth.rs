//! Deterministic synthetic scenes: car-like boxes on flat ground clutter,
//! the desk-scale stand-in for real LiDAR training data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::{BoxDims, Difficulty, GridMeta, LabeledObject, ObjectClass, Point, PointCloud, SceneLabel};
use crate::error::{Error, Result};
use crate::eval::{rotated_iou, BevBox};

/// Placement attempts per object before giving up.
const MAX_PLACEMENT_TRIES: usize = 200;
/// Clearance added around each box when checking overlap, meters.
const CLEARANCE_M: f64 = 0.6;
/// Keep box centers this far from the BEV border so every surface point
/// lands on the grid (largest box half-diagonal is ~2.51 m).
const EDGE_MARGIN_M: f64 = 2.6;
/// Ground clutter returns per scene.
const CLUTTER_POINTS: usize = 320;
/// Surface returns sampled per object (well above the 20-point floor).
const BOX_POINTS_MIN: usize = 60;
const BOX_POINTS_MAX: usize = 110;

fn inflate(b: &BevBox, by: f64) -> BevBox {
    BevBox {
        w: b.w + by,
        l: b.l + by,
        ..*b
    }
}

/// Generate one scene: `n_objects` non-overlapping car-like boxes with
/// surface returns, plus low ground clutter. Bit-identical output for a
/// given seed.
pub fn generate_synthetic_scene(
    seed: u64,
    n_objects: usize,
    meta: &GridMeta,
) -> Result<(PointCloud, SceneLabel)> {
    meta.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_lo = meta.x_min + EDGE_MARGIN_M;
    let x_hi = meta.x_max - EDGE_MARGIN_M;
    let y_lo = meta.y_min + EDGE_MARGIN_M;
    let y_hi = meta.y_max - EDGE_MARGIN_M;
    if x_lo >= x_hi || y_lo >= y_hi {
        return Err(Error::config(
            "BEV extent too small for synthetic object placement".to_string(),
        ));
    }

    let mut objects: Vec<LabeledObject> = Vec::with_capacity(n_objects);
    let mut footprints: Vec<BevBox> = Vec::with_capacity(n_objects);
    for idx in 0..n_objects {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let dims = BoxDims {
                h: rng.gen_range(1.3..1.8),
                w: rng.gen_range(1.5..2.0),
                l: rng.gen_range(3.5..4.6),
            };
            let cx = rng.gen_range(x_lo..x_hi);
            let cy = rng.gen_range(y_lo..y_hi);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let fp = BevBox { cx, cy, w: dims.w, l: dims.l, yaw };
            let clear = footprints
                .iter()
                .all(|other| rotated_iou(&inflate(&fp, CLEARANCE_M), &inflate(other, CLEARANCE_M)) == 0.0);
            if clear {
                objects.push(LabeledObject {
                    center: [cx, cy, dims.h / 2.0],
                    dims,
                    yaw,
                    class: ObjectClass::Car,
                    difficulty: Difficulty::Easy,
                });
                footprints.push(fp);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::config(format!(
                "could not place object {idx} of {n_objects} after {MAX_PLACEMENT_TRIES} tries"
            )));
        }
    }

    let mut points = Vec::new();
    for obj in &objects {
        sample_box_surface(&mut rng, obj, &mut points);
    }
    for _ in 0..CLUTTER_POINTS {
        points.push(Point {
            x: rng.gen_range(meta.x_min..meta.x_max),
            y: rng.gen_range(meta.y_min..meta.y_max),
            z: rng.gen_range(0.0..0.12),
            intensity: rng.gen_range(0.05..0.30),
        });
    }

    Ok((
        PointCloud { points },
        SceneLabel { objects, ignored: vec![] },
    ))
}

/// Sample LiDAR-like returns on the four side faces and the top face.
fn sample_box_surface(rng: &mut ChaCha8Rng, obj: &LabeledObject, out: &mut Vec<Point>) {
    let BoxDims { h, w, l } = obj.dims;
    let (s, c) = obj.yaw.sin_cos();
    let base_intensity: f64 = rng.gen_range(0.40..0.90);
    let count = rng.gen_range(BOX_POINTS_MIN..=BOX_POINTS_MAX);
    // face areas: 2 long sides, 2 short sides, top
    let areas = [l * h, l * h, w * h, w * h, l * w];
    let total: f64 = areas.iter().sum();
    for _ in 0..count {
        let pick = rng.gen_range(0.0..total);
        // local box coords: u along length, v across, z up from ground
        let (u, v, z) = if pick < areas[0] {
            (rng.gen_range(-l / 2.0..l / 2.0), w / 2.0, rng.gen_range(0.0..h))
        } else if pick < areas[0] + areas[1] {
            (rng.gen_range(-l / 2.0..l / 2.0), -w / 2.0, rng.gen_range(0.0..h))
        } else if pick < areas[0] + areas[1] + areas[2] {
            (l / 2.0, rng.gen_range(-w / 2.0..w / 2.0), rng.gen_range(0.0..h))
        } else if pick < areas[0] + areas[1] + areas[2] + areas[3] {
            (-l / 2.0, rng.gen_range(-w / 2.0..w / 2.0), rng.gen_range(0.0..h))
        } else {
            (
                rng.gen_range(-l / 2.0..l / 2.0),
                rng.gen_range(-w / 2.0..w / 2.0),
                h,
            )
        };
        out.push(Point {
            x: obj.center[0] + u * c - v * s,
            y: obj.center[1] + u * s + v * c,
            z,
            intensity: (base_intensity + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
        });
    }
}
