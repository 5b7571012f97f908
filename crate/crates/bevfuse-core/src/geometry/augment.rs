//! 3D augmentation applied jointly to radar points, boxes and BEV features.
//!
//! One parameter set describes a similarity transform of the ego plane:
//! uniform scale, then axis flips, then rotation about the ego origin
//! (applied in that order). Radar positions, box centers/yaws/velocities and
//! signed radial speeds all transform consistently; BEV feature maps are
//! warped with the recorded transform so the camera branch sees the same
//! world as the labels.

use serde::{Deserialize, Serialize};

use super::{normalize_angle, BevGridSpec, Box3D};

/// Similarity transform of the ego plane: `p' = R(rotation) * F * (scale * p)`
/// where `F` negates x and/or y according to the flip flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation: f64,
    pub scale: f64,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation: 0.0,
            scale: 1.0,
            flip_x: false,
            flip_y: false,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.scale == 1.0 && !self.flip_x && !self.flip_y
    }

    /// Transform a ground-plane point.
    pub fn apply_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut x, mut y) = (x * self.scale, y * self.scale);
        if self.flip_x {
            x = -x;
        }
        if self.flip_y {
            y = -y;
        }
        let (s, c) = self.rotation.sin_cos();
        (c * x - s * y, s * x + c * y)
    }

    /// Inverse ground-plane transform (used for feature warping).
    pub fn apply_xy_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (mut x, mut y) = (c * x + s * y, -s * x + c * y);
        if self.flip_x {
            x = -x;
        }
        if self.flip_y {
            y = -y;
        }
        (x / self.scale, y / self.scale)
    }

    /// Transform a planar velocity (rotates/flips like a direction, scales
    /// with the map).
    pub fn apply_velocity(&self, vx: f64, vy: f64) -> (f64, f64) {
        self.apply_xy(vx, vy)
    }

    /// Transform a signed radial speed. Rotations and flips are orthogonal,
    /// so the radial projection is unchanged; only the scale survives.
    pub fn apply_radial_speed(&self, v_d: f64) -> f64 {
        v_d * self.scale
    }

    pub fn apply_yaw(&self, yaw: f64) -> f64 {
        let mut yaw = yaw;
        if self.flip_x {
            yaw = std::f64::consts::PI - yaw;
        }
        if self.flip_y {
            yaw = -yaw;
        }
        normalize_angle(yaw + self.rotation)
    }

    /// Transform a box in place: center, size, yaw and velocity.
    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let (x, y) = self.apply_xy(b.center[0], b.center[1]);
        let (vx, vy) = self.apply_velocity(b.velocity[0], b.velocity[1]);
        Box3D {
            center: [x, y, b.center[2] * self.scale],
            size: [
                b.size[0] * self.scale,
                b.size[1] * self.scale,
                b.size[2] * self.scale,
            ],
            yaw: self.apply_yaw(b.yaw),
            velocity: [vx, vy],
            ..b.clone()
        }
    }

    /// Nearest-cell warp table for BEV feature maps on `grid`: entry `i` is
    /// the source cell whose (inverse-transformed) location feeds output
    /// cell `i`, or `None` when the source falls outside the grid. Feed the
    /// result to `gather_cells`.
    pub fn bev_warp_index(&self, grid: &BevGridSpec) -> Vec<Option<u32>> {
        let rows = grid.rows();
        let cols = grid.cols();
        let mut index = Vec::with_capacity(rows * cols);
        for row in 0..rows {
            for col in 0..cols {
                let (x, y) = grid.cell_center(row, col);
                let (sx, sy) = self.apply_xy_inverse(x, y);
                index.push(
                    grid.cell_index(sx, sy)
                        .map(|(r, c)| grid.flat(r, c) as u32),
                );
            }
        }
        index
    }
}
