//! On-disk dataset layout, manifest, and loaders.
//!
//! ```text
//! <root>/
//!   manifest.json            seed, config echo, sample ids, file checksums
//!   calib.json               per-camera intrinsics + mounting
//!   samples/<id>/
//!     cam<i>.ppm             one render per camera
//!     radar_<k>.rswp         sweeps, newest first
//!     boxes.json             ground-truth boxes
//!     meta.json              description + per-sweep poses and timestamps
//! ```
//!
//! Sweep files carry no pose (the format is pose-free); `meta.json` is the
//! authority for per-sweep ego poses, and its timestamps must agree with the
//! sweep files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::CameraModel;
use crate::radar::{aggregate_sweeps, EgoPose};

use super::{
    generate_scene, read_ppm, read_sweep, write_ppm, write_sweep, DataError, Result,
    SampleBundle, SceneGenConfig,
};

/// Serializable camera description (plain arrays, row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraCalib {
    pub intrinsics: [[f64; 3]; 3],
    pub cam_to_ego: [[f64; 4]; 4],
    pub width: u32,
    pub height: u32,
}

impl CameraCalib {
    pub fn from_model(m: &CameraModel) -> CameraCalib {
        let k = m.intrinsics();
        let e = m.cam_to_ego();
        let mut intrinsics = [[0.0; 3]; 3];
        let mut cam_to_ego = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                intrinsics[r][c] = k[(r, c)];
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                cam_to_ego[r][c] = e[(r, c)];
            }
        }
        CameraCalib { intrinsics, cam_to_ego, width: m.width, height: m.height }
    }

    pub fn to_model(&self) -> Result<CameraModel> {
        let k = Matrix3::from_fn(|r, c| self.intrinsics[r][c]);
        let e = Matrix4::from_fn(|r, c| self.cam_to_ego[r][c]);
        Ok(CameraModel::new(k, e, self.width, self.height)?)
    }
}

/// Pose and timing of one stored sweep file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub file: String,
    pub timestamp_us: u64,
    pub pose_x: f64,
    pub pose_y: f64,
    pub pose_yaw: f64,
}

/// Per-sample sidecar: everything not stored in the binary payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub description: String,
    pub sweeps: Vec<SweepMeta>,
}

/// Top-level index: how the data was made and what it should hash to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub start: u64,
    pub scenes: u64,
    pub class_names: Vec<String>,
    pub config: SceneGenConfig,
    pub samples: Vec<String>,
    /// Relative path -> lowercase hex SHA-256 of the file bytes.
    pub files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(map: &mut BTreeMap<String, String>, root: &Path, rel: &str) -> Result<()> {
    let bytes = fs::read(root.join(rel))?;
    map.insert(rel.to_string(), sha256_hex(&bytes));
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    Ok(fs::write(path, text)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| DataError::BadDataset(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Generate scenes `start .. start + count` of `cfg` under `root` and write
/// the manifest. Returns the manifest that was written.
pub fn write_dataset(
    root: &Path,
    cfg: &SceneGenConfig,
    start: u64,
    count: u64,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(root.join("samples"))?;
    let mut files = BTreeMap::new();

    let calib: Vec<CameraCalib> = cfg
        .camera_models()?
        .iter()
        .map(CameraCalib::from_model)
        .collect();
    write_json(&root.join("calib.json"), &calib)?;
    hash_file(&mut files, root, "calib.json")?;

    let mut samples = Vec::with_capacity(count as usize);
    for t in start..start + count {
        let bundle = generate_scene(cfg, t)?;
        let id = bundle.id.clone();
        let dir = root.join("samples").join(&id);
        fs::create_dir_all(&dir)?;

        for (i, img) in bundle.images.iter().enumerate() {
            let rel = format!("samples/{id}/cam{i}.ppm");
            write_ppm(img, &root.join(&rel))?;
            hash_file(&mut files, root, &rel)?;
        }
        let mut sweep_meta = Vec::with_capacity(bundle.sweeps.len());
        for (k, sweep) in bundle.sweeps.iter().enumerate() {
            let rel = format!("samples/{id}/radar_{k}.rswp");
            write_sweep(sweep, &root.join(&rel))?;
            hash_file(&mut files, root, &rel)?;
            sweep_meta.push(SweepMeta {
                file: format!("radar_{k}.rswp"),
                timestamp_us: sweep.timestamp_us,
                pose_x: sweep.pose.x,
                pose_y: sweep.pose.y,
                pose_yaw: sweep.pose.yaw,
            });
        }
        let boxes_rel = format!("samples/{id}/boxes.json");
        write_json(&root.join(&boxes_rel), &bundle.ground_truth)?;
        hash_file(&mut files, root, &boxes_rel)?;

        let meta = SampleMeta { id: id.clone(), description: bundle.description.clone(), sweeps: sweep_meta };
        let meta_rel = format!("samples/{id}/meta.json");
        write_json(&root.join(&meta_rel), &meta)?;
        hash_file(&mut files, root, &meta_rel)?;

        log::debug!("wrote sample {id}");
        samples.push(id);
    }

    let manifest = DatasetManifest {
        seed: cfg.seed,
        start,
        scenes: count,
        class_names: cfg.class_names(),
        config: cfg.clone(),
        samples,
        files,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    log::info!("dataset at {} holds {count} samples", root.display());
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    read_json(&root.join("manifest.json"))
}

/// Re-hash every file the manifest lists; the first mismatch is an error.
pub fn verify_dataset(root: &Path) -> Result<DatasetManifest> {
    let manifest = read_manifest(root)?;
    for (rel, expected) in &manifest.files {
        let bytes = fs::read(root.join(rel))
            .map_err(|e| DataError::BadDataset(format!("{rel}: {e}")))?;
        let actual = sha256_hex(&bytes);
        if actual != *expected {
            return Err(DataError::ChecksumMismatch { path: rel.clone() });
        }
    }
    Ok(manifest)
}

/// Load one sample back into memory, attaching poses from `meta.json` and
/// re-aggregating the radar sweeps.
pub fn load_sample(root: &Path, id: &str) -> Result<SampleBundle> {
    let dir: PathBuf = root.join("samples").join(id);
    let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
    let calib: Vec<CameraCalib> = read_json(&root.join("calib.json"))?;
    let cameras: Vec<CameraModel> = calib.iter().map(CameraCalib::to_model).collect::<Result<_>>()?;

    let mut images = Vec::with_capacity(cameras.len());
    for i in 0..cameras.len() {
        images.push(read_ppm(&dir.join(format!("cam{i}.ppm")))?);
    }

    let mut sweeps = Vec::with_capacity(meta.sweeps.len());
    for sm in &meta.sweeps {
        let mut sweep = read_sweep(&dir.join(&sm.file))?;
        if sweep.timestamp_us != sm.timestamp_us {
            return Err(DataError::BadDataset(format!(
                "{id}/{}: timestamp {} disagrees with meta {}",
                sm.file, sweep.timestamp_us, sm.timestamp_us
            )));
        }
        sweep.pose = EgoPose { x: sm.pose_x, y: sm.pose_y, yaw: sm.pose_yaw };
        sweeps.push(sweep);
    }
    let points = aggregate_sweeps(&sweeps, sweeps.len())?;

    let ground_truth = read_json(&dir.join("boxes.json"))?;
    let bundle = SampleBundle {
        id: meta.id,
        description: meta.description,
        images,
        cameras,
        sweeps,
        points,
        ground_truth,
    };
    bundle.validate()?;
    Ok(bundle)
}
