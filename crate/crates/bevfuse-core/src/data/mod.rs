//! On-disk formats and synthetic data: the binary radar-sweep file, PPM
//! images, an ASCII point-cloud importer, the dataset directory layout with
//! a checksummed manifest, and a fully deterministic scene generator.
//!
//! A dataset directory looks like
//!
//! ```text
//! dataset/
//!   manifest.json          seed, config echo, per-file SHA-256 checksums
//!   calib.json             camera intrinsics/extrinsics (shared by samples)
//!   samples/<id>/
//!     cam<i>.ppm           rendered camera images (P6, 8-bit)
//!     radar_<k>.rswp       one binary file per sweep, newest k = 0
//!     boxes.json           ground-truth boxes, current ego frame
//!     meta.json            description, timestamps, per-sweep ego poses
//! ```

mod dataset;
mod pcd;
mod ppm;
mod rswp;
mod scene;

use thiserror::Error;

use crate::geometry::{Box3D, CameraModel, GeometryError};
use crate::radar::{RadarError, RadarPoint, RadarSweep};

pub use dataset::{
    load_sample, read_manifest, verify_dataset, write_dataset, CameraCalib, DatasetManifest,
    SampleMeta, SweepMeta,
};
pub use pcd::{import_ascii_pcd, PcdFieldMap};
pub use ppm::{read_ppm, write_ppm, Image};
pub use rswp::{read_sweep, write_sweep, RSWP_HEADER_LEN, RSWP_RECORD_LEN, RSWP_VERSION};
pub use scene::{
    doppler_from_velocity, generate_scene, render_box_mask, silhouette_iou, CameraMount,
    ClassSpec, SceneGenConfig, Weather, DOPPLER_APPROACHING_SIGN,
};
pub(crate) use scene::camera_from_mount;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("sweep file magic {found:?} is not \"RSWP\"")]
    BadMagic { found: [u8; 4] },
    #[error("sweep file version {0} unsupported (expected {RSWP_VERSION})")]
    UnsupportedVersion(u16),
    #[error("sweep file length {actual} bytes, expected {expected}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("non-finite value in field {field} of record {index}")]
    NonFiniteRecord { field: &'static str, index: usize },
    #[error("image: {0}")]
    BadImage(String),
    #[error("point cloud: {0}")]
    BadPointCloud(String),
    #[error("point cloud field \"{0}\" not present in file")]
    MissingField(String),
    #[error("binary point-cloud payloads are not supported; convert to ascii")]
    BinaryPcd,
    #[error("could not place object {index} without overlap after {retries} retries")]
    InfeasiblePlacement { index: usize, retries: usize },
    #[error("{0}")]
    BadConfig(String),
    #[error("dataset: {0}")]
    BadDataset(String),
    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Radar(#[from] RadarError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Everything one training/eval step needs for a single sample.
#[derive(Debug, Clone)]
pub struct SampleBundle {
    pub id: String,
    /// Scene description; filtering matches substrings ("rain", "night").
    pub description: String,
    /// One image per camera, same order as `cameras`.
    pub images: Vec<Image>,
    pub cameras: Vec<CameraModel>,
    /// Raw sweeps, newest first, with their ego poses.
    pub sweeps: Vec<RadarSweep>,
    /// Motion-compensated aggregate of `sweeps` in the current ego frame.
    pub points: Vec<RadarPoint>,
    /// Ground truth in the current ego frame.
    pub ground_truth: Vec<Box3D>,
}

impl SampleBundle {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(DataError::BadConfig("sample needs at least one camera".into()));
        }
        if self.images.len() != self.cameras.len() {
            return Err(DataError::BadConfig(format!(
                "{} images for {} cameras",
                self.images.len(),
                self.cameras.len()
            )));
        }
        for (img, cam) in self.images.iter().zip(&self.cameras) {
            if (img.width, img.height) != (cam.width as usize, cam.height as usize) {
                return Err(DataError::BadConfig(format!(
                    "image {}x{} does not match camera {}x{}",
                    img.width, img.height, cam.width, cam.height
                )));
            }
        }
        Ok(())
    }
}
