//! Ego-frame geometry: 3D boxes, pinhole cameras, BEV grids.
//!
//! Conventions (used everywhere downstream):
//!
//! * Ego frame: x forward, y left, z up; yaw is counter-clockwise about +z
//!   measured from +x, normalized to `(-pi, pi]`.
//! * Box size is `[w, l, h]`: `l` along the heading (local x), `w` across
//!   (local y), `h` vertical.
//! * Camera frame: z along the optical axis, x right, y down (standard
//!   pinhole); `cam_to_ego` is a rigid transform.
//! * BEV grids are half-open `[min, max)` in both axes with square cells;
//!   grid row indexes y and column indexes x, so cell `(0, 0)` touches the
//!   `(x_min, y_min)` corner.

pub mod augment;
pub mod calib;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("intrinsics invalid: {0}")]
    BadIntrinsics(String),
    #[error("extrinsics are not a rigid transform: {0}")]
    NotRigid(String),
    #[error("bad BEV grid: {0}")]
    BadGrid(String),
    #[error("bad calibration file: {0}")]
    BadCalibration(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Wrap an angle to `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Oriented 3D box with velocity, class and attribute labels.
/// `score` is set on predictions and `None` on ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `[w, l, h]` — width (across heading), length (along), height.
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: u32,
    pub attribute_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Box3D {
    /// The eight corners; bottom face first, counter-clockwise starting at
    /// the front-left corner, then the top face in the same order.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (hw, hl, hh) = (self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0);
        let (s, c) = self.yaw.sin_cos();
        // local (along, across) offsets
        let local = [
            (hl, hw),
            (hl, -hw),
            (-hl, -hw),
            (-hl, hw),
        ];
        let mut out = [[0.0; 3]; 8];
        for (i, (dx, dy)) in local.iter().enumerate() {
            let x = self.center[0] + c * dx - s * dy;
            let y = self.center[1] + s * dx + c * dy;
            out[i] = [x, y, self.center[2] - hh];
            out[i + 4] = [x, y, self.center[2] + hh];
        }
        out
    }

    /// BEV footprint corners (the bottom face, projected to the ground plane).
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let c = self.corners();
        [
            [c[0][0], c[0][1]],
            [c[1][0], c[1][1]],
            [c[2][0], c[2][1]],
            [c[3][0], c[3][1]],
        ]
    }

    /// BEV center distance to another box (the matching metric).
    pub fn bev_distance(&self, other: &Box3D) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// True if `(x, y)` lies inside the footprint inflated by `factor`
    /// about the box center.
    pub fn bev_contains(&self, x: f64, y: f64, factor: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        // rotate into the box frame (along, across)
        let along = c * dx + s * dy;
        let across = -s * dx + c * dy;
        along.abs() <= factor * self.size[1] / 2.0 && across.abs() <= factor * self.size[0] / 2.0
    }
}

/// Outcome of projecting an ego point through a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// In front of the camera plane; `u`/`v` are pixel coordinates (may lie
    /// outside the image bounds) and `depth` is the camera-frame z.
    InFront { u: f64, v: f64, depth: f64 },
    /// At or behind the camera plane; no meaningful pixel exists.
    Behind,
}

impl Projection {
    pub fn in_image(&self, width: u32, height: u32) -> bool {
        match self {
            Projection::InFront { u, v, .. } => {
                *u >= 0.0 && *u < width as f64 && *v >= 0.0 && *v < height as f64
            }
            Projection::Behind => false,
        }
    }
}

/// Calibrated pinhole camera with a rigid mount.
#[derive(Debug, Clone)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    intrinsics_inv: Matrix3<f64>,
    cam_to_ego: Matrix4<f64>,
    ego_to_cam: Matrix4<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        cam_to_ego: Matrix4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let (fx, fy) = (intrinsics[(0, 0)], intrinsics[(1, 1)]);
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::BadIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        let bottom = intrinsics.row(2);
        if (bottom[0], bottom[1], bottom[2]) != (0.0, 0.0, 1.0) {
            return Err(GeometryError::BadIntrinsics(
                "third row must be [0, 0, 1]".to_string(),
            ));
        }
        let last = cam_to_ego.row(3);
        if (last[0], last[1], last[2], last[3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(GeometryError::NotRigid(
                "bottom row must be [0, 0, 0, 1]".to_string(),
            ));
        }
        let r = cam_to_ego.fixed_view::<3, 3>(0, 0).into_owned();
        let should_be_identity = r * r.transpose();
        if (should_be_identity - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(GeometryError::NotRigid(
                "rotation block is not orthonormal".to_string(),
            ));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::NotRigid(
                "rotation block must have determinant +1".to_string(),
            ));
        }
        let t = cam_to_ego.fixed_view::<3, 1>(0, 3).into_owned();
        let rt = r.transpose();
        let mut ego_to_cam = Matrix4::identity();
        ego_to_cam.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        ego_to_cam.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rt * t));
        let intrinsics_inv = intrinsics.try_inverse().ok_or_else(|| {
            GeometryError::BadIntrinsics("intrinsics are singular".to_string())
        })?;
        Ok(CameraModel {
            intrinsics,
            intrinsics_inv,
            cam_to_ego,
            ego_to_cam,
            width,
            height,
        })
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn cam_to_ego(&self) -> &Matrix4<f64> {
        &self.cam_to_ego
    }

    pub fn ego_to_cam(&self) -> &Matrix4<f64> {
        &self.ego_to_cam
    }

    /// Project an ego-frame point to pixel coordinates.
    pub fn project(&self, p_ego: [f64; 3]) -> Projection {
        let p = self.ego_to_cam * Vector4::new(p_ego[0], p_ego[1], p_ego[2], 1.0);
        let z = p[2];
        if z <= 1e-9 {
            return Projection::Behind;
        }
        let uvw = self.intrinsics * Vector3::new(p[0], p[1], p[2]);
        Projection::InFront {
            u: uvw[0] / z,
            v: uvw[1] / z,
            depth: z,
        }
    }

    /// Inverse of [`CameraModel::project`]: pixel plus camera-frame depth
    /// back to an ego point.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let ray = self.intrinsics_inv * Vector3::new(u, v, 1.0);
        let p_cam = ray * depth; // third component is exactly `depth`
        let p = self.cam_to_ego * Vector4::new(p_cam[0], p_cam[1], p_cam[2], 1.0);
        [p[0], p[1], p[2]]
    }
}

/// Square-celled, half-open BEV grid. Row indexes y, column indexes x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
}

impl BevGridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, cell: f64) -> Result<Self> {
        let spec = BevGridSpec {
            x_min,
            x_max,
            y_min,
            y_max,
            cell,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0 && self.cell.is_finite()) {
            return Err(GeometryError::BadGrid(format!(
                "cell size must be positive, got {}",
                self.cell
            )));
        }
        if self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(GeometryError::BadGrid(format!(
                "extents must be increasing: x [{}, {}), y [{}, {})",
                self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        for (lo, hi, axis) in [
            (self.x_min, self.x_max, "x"),
            (self.y_min, self.y_max, "y"),
        ] {
            let cells = (hi - lo) / self.cell;
            if (cells - cells.round()).abs() > 1e-9 || cells.round() < 1.0 {
                return Err(GeometryError::BadGrid(format!(
                    "{axis} extent {lo}..{hi} is not a whole number of {} m cells",
                    self.cell
                )));
            }
        }
        Ok(())
    }

    /// Number of rows (y cells).
    pub fn rows(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell).round() as usize
    }

    /// Number of columns (x cells).
    pub fn cols(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell).round() as usize
    }

    /// Cell containing the ego point, or `None` outside the half-open
    /// extents (a point exactly on `x_max`/`y_max` is outside).
    pub fn cell_index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let col = ((x - self.x_min) / self.cell).floor() as usize;
        let row = ((y - self.y_min) / self.cell).floor() as usize;
        // guard against edge-of-extent float artifacts
        Some((row.min(self.rows() - 1), col.min(self.cols() - 1)))
    }

    /// Flat index of a (row, col) pair.
    pub fn flat(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    /// Ego coordinates of a cell's center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell,
            self.y_min + (row as f64 + 0.5) * self.cell,
        )
    }

    /// Continuous (column, row) coordinates of an ego point, in cells.
    /// Used by the detection head for sub-cell offsets.
    pub fn continuous_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.x_min) / self.cell,
            (y - self.y_min) / self.cell,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level_front_camera() -> CameraModel {
        // optical axis along ego +x, camera x to ego -y, camera y to ego -z
        let k = Matrix3::new(500.0, 0.0, 352.0, 0.0, 500.0, 128.0, 0.0, 0.0, 1.0);
        #[rustfmt::skip]
        let t = Matrix4::new(
            0.0, 0.0, 1.0, 1.5,
            -1.0, 0.0, 0.0, 0.0,
            0.0, -1.0, 0.0, 1.6,
            0.0, 0.0, 0.0, 1.0,
        );
        CameraModel::new(k, t, 704, 256).unwrap()
    }

    #[test]
    fn project_unproject_round_trip() {
        let cam = level_front_camera();
        let p = [12.3, -2.1, 0.8];
        match cam.project(p) {
            Projection::InFront { u, v, depth } => {
                let q = cam.unproject(u, v, depth);
                for i in 0..3 {
                    assert!((p[i] - q[i]).abs() < 1e-6, "axis {i}: {} vs {}", p[i], q[i]);
                }
            }
            Projection::Behind => panic!("point ahead of the camera projected as behind"),
        }
    }

    #[test]
    fn points_behind_are_marked() {
        let cam = level_front_camera();
        assert_eq!(cam.project([-5.0, 0.0, 1.0]), Projection::Behind);
        // point exactly on the camera plane also counts as behind
        assert_eq!(cam.project([1.5, 3.0, 1.6]), Projection::Behind);
    }

    #[test]
    fn non_rigid_extrinsics_rejected() {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        let mut t = Matrix4::identity();
        t[(0, 0)] = 2.0; // scaling, not rigid
        assert!(matches!(
            CameraModel::new(k, t, 100, 100),
            Err(GeometryError::NotRigid(_))
        ));
    }

    #[test]
    fn grid_cell_indexing_is_half_open() {
        let g = BevGridSpec::new(-40.0, 40.0, -40.0, 40.0, 0.4).unwrap();
        assert_eq!(g.rows(), 200);
        assert_eq!(g.cols(), 200);
        assert_eq!(g.cell_index(0.0, 0.0), Some((100, 100)));
        assert_eq!(g.cell_index(-40.0, -40.0), Some((0, 0)));
        assert_eq!(g.cell_index(40.0, 0.0), None); // x_max excluded
        assert_eq!(g.cell_index(0.0, 39.999), Some((199, 100)));
        assert_eq!(g.cell_index(-40.1, 0.0), None);
    }

    #[test]
    fn grid_divisibility_cases() {
        assert!(BevGridSpec::new(0.0, 10.0, 0.0, 10.0, 0.5).is_ok());
        assert!(BevGridSpec::new(0.0, 10.0, 0.0, 10.3, 0.5).is_err());
        assert!(BevGridSpec::new(0.0, -10.0, 0.0, 10.0, 0.5).is_err());
    }

    #[test]
    fn box_corners_align_with_yaw() {
        let b = Box3D {
            center: [10.0, 0.0, 1.0],
            size: [2.0, 4.0, 1.5],
            yaw: std::f64::consts::FRAC_PI_2, // heading along +y
            velocity: [0.0, 0.0],
            class_id: 0,
            attribute_id: 0,
            score: None,
        };
        let c = b.corners();
        // at yaw 90 degrees the length axis lies along y
        let ys: Vec<f64> = c.iter().map(|p| p[1]).collect();
        let xs: Vec<f64> = c.iter().map(|p| p[0]).collect();
        let y_extent = ys.iter().cloned().fold(f64::MIN, f64::max)
            - ys.iter().cloned().fold(f64::MAX, f64::min);
        let x_extent = xs.iter().cloned().fold(f64::MIN, f64::max)
            - xs.iter().cloned().fold(f64::MAX, f64::min);
        assert!((y_extent - 4.0).abs() < 1e-12);
        assert!((x_extent - 2.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_angle_wraps_to_half_open_pi() {
        assert!((normalize_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((normalize_angle(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((normalize_angle(0.3) - 0.3).abs() < 1e-15);
    }
}
