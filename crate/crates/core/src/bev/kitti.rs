//! KITTI file-format support: velodyne `.bin` point clouds and devkit
//! label text files.

use std::path::Path;

use crate::bev::{BoxDims, Difficulty, IgnoreRegion, LabeledObject, ObjectClass, Point, PointCloud, SceneLabel};
use crate::error::{Error, Result};

/// Bytes per velodyne record: four little-endian f32 (x, y, z, intensity).
const RECORD_BYTES: usize = 16;

/// Load a velodyne `.bin` point cloud.
///
/// Non-finite points are dropped; the second element of the return value
/// reports how many. Intensities are clamped to `[0, 1]`.
pub fn load_kitti_pointcloud(path: impl AsRef<Path>) -> Result<(PointCloud, usize)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pointcloud(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Decode the velodyne record layout from raw bytes.
pub fn decode_pointcloud(bytes: &[u8]) -> Result<(PointCloud, usize)> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::format(format!(
            "length {} is not a multiple of the {RECORD_BYTES}-byte point record",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    let mut dropped = 0usize;
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
        let (x, y, z, i) = (f(0), f(1), f(2), f(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && i.is_finite()) {
            dropped += 1;
            continue;
        }
        points.push(Point {
            x: x as f64,
            y: y as f64,
            z: z as f64,
            intensity: (i as f64).clamp(0.0, 1.0),
        });
    }
    Ok((PointCloud { points }, dropped))
}

/// Write a point cloud in the velodyne `.bin` layout.
pub fn write_kitti_pointcloud(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(pc.points.len() * RECORD_BYTES);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rigid transform from the LiDAR frame to the camera frame, as used by
/// the KITTI devkit (`Tr_velo_to_cam`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KittiCalib {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl KittiCalib {
    /// The nominal axis permutation between KITTI's camera and LiDAR
    /// frames: `x_cam = -y_velo`, `y_cam = -z_velo`, `z_cam = x_velo`.
    pub fn nominal() -> Self {
        Self {
            rotation: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Map a camera-frame point into the LiDAR frame (inverse transform;
    /// the rotation is orthonormal so its inverse is its transpose).
    pub fn cam_to_velo(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }
}

fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut y = (yaw + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if y >= std::f64::consts::PI {
        y -= two_pi;
    }
    y
}

/// KITTI difficulty assignment from 2D box height, occlusion and
/// truncation.
fn difficulty_of(bbox_height: f64, occlusion: i64, truncation: f64) -> Difficulty {
    if bbox_height >= 40.0 && occlusion == 0 && truncation <= 0.15 {
        Difficulty::Easy
    } else if bbox_height >= 25.0 && occlusion <= 1 && truncation <= 0.30 {
        Difficulty::Moderate
    } else {
        Difficulty::Hard
    }
}

/// Parse a KITTI devkit label file into LiDAR-frame objects.
///
/// Only `Car` objects populate `objects`; `DontCare` and `Van` entries are
/// retained as ignore regions (the devkit convention for car evaluation);
/// other classes are skipped.
pub fn load_kitti_labels(path: impl AsRef<Path>, calib: &KittiCalib) -> Result<SceneLabel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_labels(&text, calib)
        .map_err(|e| match e {
            Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
            other => other,
        })
}

/// Parse label text (one object per line).
pub fn parse_kitti_labels(text: &str, calib: &KittiCalib) -> Result<SceneLabel> {
    let mut label = SceneLabel::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 15 {
            return Err(Error::format(format!(
                "line {}: expected >= 15 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| {
                Error::format(format!("line {}: field {} ({:?}) is not a number", lineno + 1, i, fields[i]))
            })
        };
        let kind = fields[0];
        let truncation = num(1)?;
        let occlusion = num(2)? as i64;
        let bbox_top = num(5)?;
        let bbox_bottom = num(7)?;
        let dims = BoxDims { h: num(8)?, w: num(9)?, l: num(10)? };
        let loc_cam = [num(11)?, num(12)?, num(13)?];
        let rotation_y = num(14)?;

        // Camera-frame location is the bottom face center.
        let bottom = calib.cam_to_velo(loc_cam);
        let center = [bottom[0], bottom[1], bottom[2] + dims.h / 2.0];
        let yaw = normalize_yaw(-rotation_y - std::f64::consts::FRAC_PI_2);

        match kind {
            "Car" => {
                label.objects.push(LabeledObject {
                    center,
                    dims,
                    yaw,
                    class: ObjectClass::Car,
                    difficulty: difficulty_of(bbox_bottom - bbox_top, occlusion, truncation),
                });
            }
            "DontCare" | "Van" => {
                label.ignored.push(IgnoreRegion {
                    center: [center[0], center[1]],
                    w: dims.w.max(0.0),
                    l: dims.l.max(0.0),
                    yaw,
                });
            }
            _ => {}
        }
    }
    Ok(label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointcloud_round_trip() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (pc, dropped) = decode_pointcloud(&bytes).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(pc.points.len(), 2);
        assert_eq!(pc.points[0], Point { x: 1.0, y: 2.0, z: 3.0, intensity: 0.5 });
        assert_eq!(pc.points[1], Point { x: 4.0, y: 5.0, z: 6.0, intensity: 0.25 });
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let (pc, dropped) = decode_pointcloud(&[]).unwrap();
        assert!(pc.points.is_empty());
        assert_eq!(dropped, 0);
    }

    #[test]
    fn bad_record_length_is_a_format_error() {
        let err = decode_pointcloud(&[0u8; 17]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }

    #[test]
    fn non_finite_points_are_dropped_and_counted() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, f32::NAN, 5.0, 6.0, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (pc, dropped) = decode_pointcloud(&bytes).unwrap();
        assert_eq!(pc.points.len(), 1);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn car_line_passes_dims_through() {
        let text = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.50 1.60 3.90 2.57 1.57 9.51 0.10\n";
        let label = parse_kitti_labels(text, &KittiCalib::nominal()).unwrap();
        assert_eq!(label.objects.len(), 1);
        let obj = &label.objects[0];
        assert_eq!(obj.dims, BoxDims { h: 1.50, w: 1.60, l: 3.90 });
        // nominal frame: x_velo = z_cam, y_velo = -x_cam, z_velo = -y_cam + h/2
        assert!((obj.center[0] - 9.51).abs() < 1e-9);
        assert!((obj.center[1] + 2.57).abs() < 1e-9);
        assert!((obj.center[2] - (-1.57 + 0.75)).abs() < 1e-9);
        assert!(obj.yaw >= -std::f64::consts::PI && obj.yaw < std::f64::consts::PI);
    }

    #[test]
    fn dontcare_goes_into_ignore_list() {
        let text = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n";
        let label = parse_kitti_labels(text, &KittiCalib::nominal()).unwrap();
        assert!(label.objects.is_empty());
        assert_eq!(label.ignored.len(), 1);
    }

    #[test]
    fn three_cars_parse_to_three_objects() {
        let line = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.50 1.60 3.90 2.57 1.57 9.51 0.10\n";
        let label = parse_kitti_labels(&line.repeat(3), &KittiCalib::nominal()).unwrap();
        assert_eq!(label.objects.len(), 3);
    }

    #[test]
    fn unparsable_line_names_its_number() {
        let text = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.50 1.60 3.90 2.57 1.57 9.51 0.10\nCar bogus\n";
        let err = parse_kitti_labels(text, &KittiCalib::nominal()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "got: {msg}");
    }

    #[test]
    fn difficulty_thresholds() {
        assert_eq!(difficulty_of(45.0, 0, 0.1), Difficulty::Easy);
        assert_eq!(difficulty_of(30.0, 1, 0.2), Difficulty::Moderate);
        assert_eq!(difficulty_of(30.0, 2, 0.2), Difficulty::Hard);
        assert_eq!(difficulty_of(10.0, 0, 0.0), Difficulty::Hard);
    }
}
