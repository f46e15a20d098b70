//! LiDAR point-cloud ingestion: rasterization into 3-channel bird's-eye-view
//! grids and conversion of object labels into per-cell training targets.

pub mod kitti;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2, Grid3};

/// BEV channel layout.
pub const CH_HEIGHT: usize = 0;
pub const CH_INTENSITY: usize = 1;
pub const CH_MASK: usize = 2;
pub const BEV_CHANNELS: usize = 3;

/// Number of box-regression target channels: h, w, l, dx, dy.
pub const BOX_CHANNELS: usize = 5;

/// Geometry of the BEV raster: metric extent and cell size.
///
/// Rows follow x (forward), columns follow y (left). Points with
/// `x in [x_min, x_max)`, `y in [y_min, y_max)` and `z in [z_min, z_max]`
/// land on the grid; everything else is discarded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Meters per cell.
    pub cell_size: f64,
}

impl GridMeta {
    /// 16 m x 16 m at 0.25 m/cell: a 64x64 grid that keeps toy training
    /// in seconds.
    pub fn desk_scale() -> Self {
        Self {
            x_min: 0.0,
            x_max: 16.0,
            y_min: -8.0,
            y_max: 8.0,
            z_min: -0.5,
            z_max: 2.5,
            cell_size: 0.25,
        }
    }

    /// 80 m x 40 m at 0.1 m/cell for real LiDAR sweeps.
    pub fn full_scale() -> Self {
        Self {
            x_min: 0.0,
            x_max: 80.0,
            y_min: -20.0,
            y_max: 20.0,
            z_min: -2.5,
            z_max: 1.5,
            cell_size: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) {
            return Err(Error::config(format!("cell_size must be > 0, got {}", self.cell_size)));
        }
        if self.x_max <= self.x_min || self.y_max <= self.y_min || self.z_max <= self.z_min {
            return Err(Error::config("degenerate BEV ranges".to_string()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell_size).round() as usize
    }

    pub fn cols(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell_size).round() as usize
    }

    /// Cell containing metric point `(x, y)`, if inside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < self.x_min || x >= self.x_max || y < self.y_min || y >= self.y_max {
            return None;
        }
        let r = (((x - self.x_min) / self.cell_size) as usize).min(self.rows() - 1);
        let c = (((y - self.y_min) / self.cell_size) as usize).min(self.cols() - 1);
        Some((r, c))
    }

    /// Metric center of cell `(r, c)`.
    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            self.x_min + (r as f64 + 0.5) * self.cell_size,
            self.y_min + (c as f64 + 0.5) * self.cell_size,
        )
    }
}

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance in `[0, 1]`.
    pub intensity: f64,
}

/// A LiDAR sweep. Loaders guarantee finite coordinates and intensities
/// clamped to `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

/// Three-channel BEV raster: normalized max height, intensity of the
/// highest return, and an occupancy mask. Empty cells are zero in all
/// channels.
#[derive(Debug, Clone)]
pub struct BEVGrid {
    /// `3 x H x W`, channels ordered height / intensity / mask.
    pub data: Grid3<f64>,
    pub meta: GridMeta,
}

impl BEVGrid {
    pub fn zeros(meta: GridMeta) -> Self {
        Self {
            data: Grid3::zeros(BEV_CHANNELS, meta.rows(), meta.cols()),
            meta,
        }
    }

    pub fn height(&self, r: usize, c: usize) -> f64 {
        *self.data.get(CH_HEIGHT, r, c)
    }

    pub fn intensity(&self, r: usize, c: usize) -> f64 {
        *self.data.get(CH_INTENSITY, r, c)
    }

    pub fn mask(&self, r: usize, c: usize) -> f64 {
        *self.data.get(CH_MASK, r, c)
    }
}

/// Box dimensions in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDims {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
}

/// One labeled object in the LiDAR frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledObject {
    /// Box center (x, y, z) in meters.
    pub center: [f64; 3],
    pub dims: BoxDims,
    /// Heading in `[-pi, pi)`.
    pub yaw: f64,
    pub class: ObjectClass,
    pub difficulty: Difficulty,
}

/// An axis-extent region evaluators must ignore (KITTI DontCare).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgnoreRegion {
    pub center: [f64; 2],
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

/// Ground-truth objects for one scene.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneLabel {
    pub objects: Vec<LabeledObject>,
    pub ignored: Vec<IgnoreRegion>,
}

/// Per-cell training targets derived from a [`SceneLabel`].
#[derive(Debug, Clone)]
pub struct GroundTruthMaps {
    /// 1 at object-center cells.
    pub keypoint_map: Grid2<u8>,
    /// `5 x H x W`: (h, w, l) meters and (dx, dy) sub-cell center offsets,
    /// valid only where `keypoint_map` is set.
    pub box_map: Grid3<f64>,
    /// Rotation bin index in `[0, R)`; valid only at keypoints.
    pub rotation_map: Grid2<u16>,
    pub rotation_bins: usize,
}

impl GroundTruthMaps {
    pub fn keypoint_cells(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.keypoint_map.height(), self.keypoint_map.width());
        let mut cells = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if *self.keypoint_map.get(r, c) != 0 {
                    cells.push((r, c));
                }
            }
        }
        cells
    }
}

/// Rasterize a point cloud into the 3-channel BEV grid.
///
/// Cell aggregation keeps the highest return: height is the cell's max z
/// normalized by the z range, intensity belongs to that max-z point.
/// A z-tie is broken toward the higher intensity so the result does not
/// depend on point order.
pub fn pointcloud_to_bev(pc: &PointCloud, meta: &GridMeta) -> Result<BEVGrid> {
    meta.validate()?;
    let mut bev = BEVGrid::zeros(*meta);
    let (rows, cols) = (meta.rows(), meta.cols());
    // (z, intensity) of the winning point per cell
    let mut best: Vec<Option<(f64, f64)>> = vec![None; rows * cols];
    for p in &pc.points {
        if p.z < meta.z_min || p.z > meta.z_max {
            continue;
        }
        let Some((r, c)) = meta.cell_of(p.x, p.y) else {
            continue;
        };
        let cand = (p.z, p.intensity);
        let slot = &mut best[r * cols + c];
        match slot {
            Some(cur) if *cur >= cand => {}
            _ => *slot = Some(cand),
        }
    }
    let z_span = meta.z_max - meta.z_min;
    for r in 0..rows {
        for c in 0..cols {
            if let Some((z, i)) = best[r * cols + c] {
                *bev.data.get_mut(CH_HEIGHT, r, c) = ((z - meta.z_min) / z_span).clamp(0.0, 1.0);
                *bev.data.get_mut(CH_INTENSITY, r, c) = i;
                *bev.data.get_mut(CH_MASK, r, c) = 1.0;
            }
        }
    }
    Ok(bev)
}

/// Rotation bin for a heading. A BEV box is symmetric under a half-turn,
/// so yaw is folded into `[0, pi)` before binning.
pub fn rotation_bin(yaw: f64, r_bins: usize) -> usize {
    let folded = yaw.rem_euclid(std::f64::consts::PI);
    let bin = (folded / (std::f64::consts::PI / r_bins as f64)) as usize;
    bin.min(r_bins - 1)
}

/// Bin-center heading for a rotation bin, the inverse used at decode and
/// evaluation time.
pub fn bin_center_yaw(bin: usize, r_bins: usize) -> f64 {
    let step = std::f64::consts::PI / r_bins as f64;
    bin as f64 * step + step / 2.0
}

/// Convert scene labels into per-cell target maps. Objects whose center
/// falls outside the BEV extent are skipped.
pub fn labels_to_targets(label: &SceneLabel, meta: &GridMeta, r_bins: usize) -> Result<GroundTruthMaps> {
    if r_bins < 2 {
        return Err(Error::config(format!("rotation bins must be >= 2, got {r_bins}")));
    }
    meta.validate()?;
    let (rows, cols) = (meta.rows(), meta.cols());
    let mut maps = GroundTruthMaps {
        keypoint_map: Grid2::zeros(rows, cols),
        box_map: Grid3::zeros(BOX_CHANNELS, rows, cols),
        rotation_map: Grid2::zeros(rows, cols),
        rotation_bins: r_bins,
    };
    for obj in &label.objects {
        let Some((r, c)) = meta.cell_of(obj.center[0], obj.center[1]) else {
            continue;
        };
        let (ccx, ccy) = meta.cell_center(r, c);
        *maps.keypoint_map.get_mut(r, c) = 1;
        *maps.box_map.get_mut(0, r, c) = obj.dims.h;
        *maps.box_map.get_mut(1, r, c) = obj.dims.w;
        *maps.box_map.get_mut(2, r, c) = obj.dims.l;
        *maps.box_map.get_mut(3, r, c) = (obj.center[0] - ccx) / meta.cell_size;
        *maps.box_map.get_mut(4, r, c) = (obj.center[1] - ccy) / meta.cell_size;
        *maps.rotation_map.get_mut(r, c) = rotation_bin(obj.yaw, r_bins) as u16;
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> GridMeta {
        GridMeta::desk_scale()
    }

    #[test]
    fn desk_meta_is_64x64() {
        assert_eq!(desk().rows(), 64);
        assert_eq!(desk().cols(), 64);
    }

    #[test]
    fn empty_cloud_rasterizes_to_zero() {
        let bev = pointcloud_to_bev(&PointCloud::default(), &desk()).unwrap();
        assert!(bev.data.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_point_lands_in_one_cell() {
        let meta = desk();
        let pc = PointCloud {
            points: vec![Point {
                x: 10.0,
                y: 0.0,
                z: 1.0, // midpoint of [-0.5, 2.5]
                intensity: 0.5,
            }],
        };
        let bev = pointcloud_to_bev(&pc, &meta).unwrap();
        let occupied: Vec<usize> = bev
            .data
            .channel(CH_MASK)
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(occupied.len(), 1);
        let (r, c) = (occupied[0] / meta.cols(), occupied[0] % meta.cols());
        assert_eq!((r, c), (40, 32));
        assert!((bev.height(r, c) - 0.5).abs() < 1e-12);
        assert!((bev.intensity(r, c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn max_z_point_wins_the_cell() {
        let meta = desk();
        let pc = PointCloud {
            points: vec![
                Point { x: 5.0, y: 1.0, z: meta.z_min, intensity: 0.2 },
                Point { x: 5.0, y: 1.0, z: meta.z_max, intensity: 0.9 },
            ],
        };
        let bev = pointcloud_to_bev(&pc, &meta).unwrap();
        let (r, c) = meta.cell_of(5.0, 1.0).unwrap();
        assert_eq!(bev.height(r, c), 1.0);
        assert_eq!(bev.intensity(r, c), 0.9);
    }

    #[test]
    fn masked_zero_coupling_and_permutation_invariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let meta = desk();
        let points: Vec<Point> = (0..500)
            .map(|_| Point {
                x: rng.gen_range(-2.0..18.0),
                y: rng.gen_range(-10.0..10.0),
                z: rng.gen_range(-1.0..3.0),
                intensity: rng.gen_range(0.0..1.0),
            })
            .collect();
        let bev = pointcloud_to_bev(&PointCloud { points: points.clone() }, &meta).unwrap();
        for r in 0..meta.rows() {
            for c in 0..meta.cols() {
                if bev.mask(r, c) == 0.0 {
                    assert_eq!(bev.height(r, c), 0.0);
                    assert_eq!(bev.intensity(r, c), 0.0);
                }
            }
        }
        let mut shuffled = points;
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let bev2 = pointcloud_to_bev(&PointCloud { points: shuffled }, &meta).unwrap();
        assert_eq!(bev.data, bev2.data, "rasterization must not depend on point order");
    }

    #[test]
    fn rotation_binning() {
        assert_eq!(rotation_bin(0.0, 8), 0);
        assert_eq!(rotation_bin(std::f64::consts::FRAC_PI_2 + 0.01, 8), 4);
        // pi-symmetry: yaw and yaw - pi share a bin
        assert_eq!(rotation_bin(-0.1, 8), rotation_bin(-0.1 + std::f64::consts::PI, 8));
    }

    #[test]
    fn object_at_cell_center_has_zero_offsets() {
        let meta = desk();
        let (cx, cy) = meta.cell_center(10, 20);
        let label = SceneLabel {
            objects: vec![LabeledObject {
                center: [cx, cy, 0.8],
                dims: BoxDims { h: 1.5, w: 1.7, l: 4.0 },
                yaw: 0.3,
                class: ObjectClass::Car,
                difficulty: Difficulty::Easy,
            }],
            ignored: vec![],
        };
        let maps = labels_to_targets(&label, &meta, 8).unwrap();
        assert_eq!(*maps.keypoint_map.get(10, 20), 1);
        assert_eq!(*maps.box_map.get(3, 10, 20), 0.0);
        assert_eq!(*maps.box_map.get(4, 10, 20), 0.0);
        assert_eq!(maps.keypoint_cells(), vec![(10, 20)]);
    }

    #[test]
    fn out_of_range_object_is_skipped() {
        let meta = desk();
        let label = SceneLabel {
            objects: vec![LabeledObject {
                center: [100.0, 0.0, 0.8],
                dims: BoxDims { h: 1.5, w: 1.7, l: 4.0 },
                yaw: 0.0,
                class: ObjectClass::Car,
                difficulty: Difficulty::Easy,
            }],
            ignored: vec![],
        };
        let maps = labels_to_targets(&label, &meta, 8).unwrap();
        assert!(maps.keypoint_cells().is_empty());
    }
}
