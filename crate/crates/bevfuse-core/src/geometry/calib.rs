//! Camera calibration files.
//!
//! JSON layout: `{"cameras": [{"name", "intrinsics": [9 floats, row-major
//! 3x3], "extrinsics": [16 floats, row-major 4x4 camera-to-ego], "width",
//! "height"}, ...]}`. Loading validates each camera (positive focal
//! lengths, rigid extrinsics) via [`CameraModel::new`].

use std::path::Path;

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use super::{CameraModel, GeometryError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraCalib {
    pub name: String,
    /// Row-major 3x3.
    pub intrinsics: Vec<f64>,
    /// Row-major 4x4 camera-to-ego.
    pub extrinsics: Vec<f64>,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub cameras: Vec<CameraCalib>,
}

impl CameraCalib {
    pub fn from_model(name: &str, model: &CameraModel) -> Self {
        CameraCalib {
            name: name.to_string(),
            intrinsics: model.intrinsics().transpose().as_slice().to_vec(),
            extrinsics: model.cam_to_ego().transpose().as_slice().to_vec(),
            width: model.width,
            height: model.height,
        }
    }

    pub fn to_model(&self) -> Result<CameraModel> {
        if self.intrinsics.len() != 9 {
            return Err(GeometryError::BadCalibration(format!(
                "camera {:?}: intrinsics must have 9 entries, got {}",
                self.name,
                self.intrinsics.len()
            )));
        }
        if self.extrinsics.len() != 16 {
            return Err(GeometryError::BadCalibration(format!(
                "camera {:?}: extrinsics must have 16 entries, got {}",
                self.name,
                self.extrinsics.len()
            )));
        }
        let k = Matrix3::from_row_slice(&self.intrinsics);
        let t = Matrix4::from_row_slice(&self.extrinsics);
        CameraModel::new(k, t, self.width, self.height)
    }
}

pub fn save<P: AsRef<Path>>(path: P, calib: &CalibrationFile) -> Result<()> {
    let json = serde_json::to_string_pretty(calib)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<CalibrationFile> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Load and validate all cameras into models, preserving file order.
pub fn load_models<P: AsRef<Path>>(path: P) -> Result<Vec<(String, CameraModel)>> {
    let calib = load(path)?;
    calib
        .cameras
        .iter()
        .map(|c| Ok((c.name.clone(), c.to_model()?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_matrices() {
        let k = Matrix3::new(420.0, 0.0, 100.0, 0.0, 410.0, 60.0, 0.0, 0.0, 1.0);
        #[rustfmt::skip]
        let t = Matrix4::new(
            0.0, 0.0, 1.0, 2.0,
            -1.0, 0.0, 0.0, 0.5,
            0.0, -1.0, 0.0, 1.4,
            0.0, 0.0, 0.0, 1.0,
        );
        let model = CameraModel::new(k, t, 200, 120).unwrap();
        let calib = CameraCalib::from_model("front", &model);
        // row-major storage round trips through the constructor
        let back = calib.to_model().unwrap();
        assert_eq!(back.intrinsics(), model.intrinsics());
        assert_eq!(back.cam_to_ego(), model.cam_to_ego());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.json");
        save(&path, &CalibrationFile { cameras: vec![calib] }).unwrap();
        let loaded = load_models(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].0, "front");
        assert_eq!(loaded[0].1.width, 200);
    }

    #[test]
    fn wrong_entry_counts_are_rejected() {
        let calib = CameraCalib {
            name: "bad".into(),
            intrinsics: vec![1.0; 8],
            extrinsics: vec![0.0; 16],
            width: 10,
            height: 10,
        };
        assert!(matches!(
            calib.to_model(),
            Err(GeometryError::BadCalibration(_))
        ));
    }
}
