//! Model assembly and run drivers.
//!
//! A [`Model`] wires the stages together: camera backbone → depth head →
//! view transform → (optional radar encoder → concat/1×1 fusion) → shared
//! BEV encoder → detection head. Camera-only and fusion models built from
//! the same seed share identical camera-branch initialization, so any score
//! difference comes from the radar branch, not the draw.
//!
//! [`train`], [`eval_frames`]/[`evaluate_model`] and [`bench_model`] are the
//! drivers the CLI and the acceptance suite call. All of them are
//! deterministic given (config, data, seed) — timings excepted.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Image, SampleBundle};
use crate::fusion::{bev_encoder, bev_encoder_config, fuse, BevFeature, FuseParams, FusionError};
use crate::geometry::augment::AugmentParams;
use crate::geometry::{BevGridSpec, Box3D, CameraModel, GeometryError};
use crate::head::{
    decode, gaussian_focal_loss, make_targets, regression_l1_loss, DecodeConfig,
    DetectionHeadParams, DetectionSet, HeadError, HeadOutput, LossConfig, TargetConfig,
};
use crate::metrics::{evaluate, EvalConfig, EvalFrame, MetricsError, MetricsReport};
use crate::radar::featurenet::stream_rng;
use crate::radar::{
    bev_feature_net, radar_grid_map, BevFeatureNetConfig, BevFeatureNetParams, RadarError,
    RadarPoint,
};
use crate::scalar::Scalar;
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::nn::{BackboneConfig, NamedTensors, ResNetBackbone, StageSpec};
use crate::tensor::optim::AdamW;
use crate::tensor::{gather_cells, BnMode, Tensor, TensorError, TransportRecord};
use crate::view::{
    column_records, lift_splat, matrixvt_transform, transport_records, DepthHead, ViewError,
    ViewTransformConfig,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    BadConfig(String),
    #[error("data does not match config: {0}")]
    DataMismatch(String),
    #[error("loss became non-finite at epoch {epoch}, sample {sample}")]
    Diverged { epoch: usize, sample: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Radar(#[from] RadarError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RadarEncoderKind {
    None,
    GridMap,
    BevFeatureNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewKind {
    LiftSplat,
    MatrixVt,
}

/// Everything needed to build and train one model. Serializable so a
/// checkpoint can carry its own architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub grid: BevGridSpec,
    /// Expected input image size (pre-flight check against the dataset).
    pub image_width: usize,
    pub image_height: usize,
    // Camera branch.
    pub cam_base_channels: usize,
    /// Residual blocks per stage; every stage halves resolution, so the
    /// feature stride is `2^len`.
    pub cam_stage_blocks: Vec<usize>,
    /// Camera BEV feature channels (backbone projection output).
    pub cam_channels: usize,
    pub depth_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub view: ViewKind,
    // Radar branch.
    pub radar: RadarEncoderKind,
    /// Embedding channels of the learned radar encoder.
    pub radar_channels: usize,
    /// B: occupied cells kept per sample (learned encoder).
    pub radar_max_cells: usize,
    /// N_p: points kept per cell (learned encoder).
    pub radar_max_points: usize,
    /// Sweeps aggregated per sample (bookkeeping, echoed into the encoder).
    pub sweeps: usize,
    // Shared trunk and head.
    pub bev_blocks: usize,
    pub head_channels: usize,
    pub classes: usize,
    // Losses and targets.
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub reg_weight: f64,
    pub rot_weight: f64,
    pub min_overlap: f64,
    pub min_radius: usize,
    // Decoding.
    pub score_thresh: f64,
    pub max_dets: usize,
    // Optimization.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub augment: bool,
    /// Max |rotation| drawn per sample, radians.
    pub augment_rotation: f64,
    /// Max relative scale deviation drawn per sample.
    pub augment_scale: f64,
    pub augment_flip: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            grid: BevGridSpec { x_min: -16.0, x_max: 16.0, y_min: -16.0, y_max: 16.0, cell: 0.5 },
            image_width: 704,
            image_height: 256,
            cam_base_channels: 8,
            cam_stage_blocks: vec![1, 1, 1],
            cam_channels: 32,
            depth_bins: 59,
            d_min: 1.0,
            d_max: 60.0,
            view: ViewKind::LiftSplat,
            radar: RadarEncoderKind::BevFeatureNet,
            radar_channels: 32,
            radar_max_cells: 2000,
            radar_max_points: 10,
            sweeps: 3,
            bev_blocks: 2,
            head_channels: 64,
            classes: 3,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            reg_weight: 0.25,
            rot_weight: 0.25,
            min_overlap: 0.1,
            min_radius: 1,
            score_thresh: 0.1,
            max_dets: 128,
            epochs: 20,
            lr: 2e-4,
            weight_decay: 1e-2,
            augment: false,
            augment_rotation: std::f64::consts::PI / 12.0,
            augment_scale: 0.05,
            augment_flip: true,
        }
    }
}

impl PipelineConfig {
    /// Feature-map stride implied by the camera backbone.
    pub fn stride(&self) -> usize {
        1 << self.cam_stage_blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::BadConfig(m));
        self.grid.validate()?;
        if self.cam_stage_blocks.is_empty() || self.cam_stage_blocks.contains(&0) {
            return bad("camera stages must be nonempty with at least one block each".into());
        }
        let stride = self.stride();
        if self.image_width % stride != 0 || self.image_height % stride != 0 {
            return bad(format!(
                "image {}x{} not divisible by feature stride {stride}",
                self.image_width, self.image_height
            ));
        }
        if self.cam_base_channels == 0 || self.cam_channels == 0 || self.head_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.depth_bins == 0 || !(self.d_min > 0.0) || self.d_max <= self.d_min {
            return bad(format!("bad depth range [{}, {})", self.d_min, self.d_max));
        }
        if self.radar != RadarEncoderKind::None
            && matches!(self.radar, RadarEncoderKind::BevFeatureNet)
            && (self.radar_channels == 0 || self.radar_max_cells == 0 || self.radar_max_points == 0)
        {
            return bad("learned radar encoder needs positive channel/cell/point caps".into());
        }
        if self.bev_blocks == 0 || self.classes == 0 {
            return bad("bev_blocks and classes must be positive".into());
        }
        if self.focal_alpha <= 0.0 || self.focal_beta <= 0.0 {
            return bad("focal exponents must be positive".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.epochs == 0 {
            return bad("bad optimizer settings".into());
        }
        if !(0.0..1.0).contains(&self.min_overlap) || self.max_dets == 0 {
            return bad("bad target/decode settings".into());
        }
        if self.augment_rotation < 0.0 || self.augment_scale < 0.0 || self.augment_scale >= 1.0 {
            return bad("bad augmentation ranges".into());
        }
        Ok(())
    }

    /// True when no radar branch is configured.
    pub fn is_camera_only(&self) -> bool {
        self.radar == RadarEncoderKind::None
    }

    fn radar_bev_channels(&self) -> usize {
        match self.radar {
            RadarEncoderKind::None => 0,
            RadarEncoderKind::GridMap => 4,
            RadarEncoderKind::BevFeatureNet => self.radar_channels,
        }
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.focal_alpha,
            beta: self.focal_beta,
            reg_weight: self.reg_weight,
            rot_weight: self.rot_weight,
        }
    }

    fn target_config(&self) -> TargetConfig {
        TargetConfig { min_overlap: self.min_overlap, min_radius: self.min_radius }
    }

    fn decode_config(&self) -> DecodeConfig {
        DecodeConfig { score_thresh: self.score_thresh, max_dets: self.max_dets }
    }

    fn view_config(&self) -> ViewTransformConfig {
        ViewTransformConfig {
            depth_bins: self.depth_bins,
            d_min: self.d_min,
            d_max: self.d_max,
            cameras: 0, // filled per rig by TransportCache
            stride: self.stride(),
            channels: self.cam_channels,
            grid: self.grid,
        }
    }

    fn featurenet_config(&self) -> BevFeatureNetConfig {
        BevFeatureNetConfig {
            max_cells: self.radar_max_cells,
            max_points: self.radar_max_points,
            channels: self.radar_channels,
            grid: self.grid,
            sweeps: self.sweeps,
        }
    }
}

/// Precomputed view-transform geometry for one camera rig: the sparse
/// (camera, pixel, bin) → cell records. Depends only on calibration and
/// config, so it is built once per dataset.
pub struct TransportCache {
    pub view_cfg: ViewTransformConfig,
    pub kind: ViewKind,
    pub records: Vec<TransportRecord>,
    /// Rays that left the BEV grid (bookkeeping).
    pub dropped: usize,
    pub feat_hw: (usize, usize),
}

impl TransportCache {
    pub fn build(cfg: &PipelineConfig, cams: &[CameraModel]) -> Result<Self> {
        cfg.validate()?;
        if cams.is_empty() {
            return Err(PipelineError::BadConfig("no cameras".into()));
        }
        for cam in cams {
            if cam.width as usize != cfg.image_width || cam.height as usize != cfg.image_height {
                return Err(PipelineError::DataMismatch(format!(
                    "camera is {}x{}, config expects {}x{}",
                    cam.width, cam.height, cfg.image_width, cfg.image_height
                )));
            }
        }
        let stride = cfg.stride();
        let feat_hw = (cfg.image_height / stride, cfg.image_width / stride);
        let mut view_cfg = cfg.view_config();
        view_cfg.cameras = cams.len();
        let (records, dropped) = match cfg.view {
            ViewKind::LiftSplat => transport_records(cams, feat_hw, &view_cfg)?,
            ViewKind::MatrixVt => column_records(cams, feat_hw.1, &view_cfg)?,
        };
        Ok(TransportCache { view_cfg, kind: cfg.view, records, dropped, feat_hw })
    }
}

enum RadarBranch<S: Scalar> {
    None,
    GridMap,
    FeatureNet { params: BevFeatureNetParams<S>, cfg: BevFeatureNetConfig },
}

/// The assembled two-branch network.
pub struct Model<S: Scalar> {
    pub cfg: PipelineConfig,
    backbone: ResNetBackbone<S>,
    depth_head: DepthHead<S>,
    radar: RadarBranch<S>,
    fuse: Option<FuseParams<S>>,
    bev_encoder: ResNetBackbone<S>,
    head: DetectionHeadParams<S>,
}

/// Wall-clock seconds spent in each stage of one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageSeconds {
    pub camera: f64,
    pub radar: f64,
    pub fusion: f64,
    pub head: f64,
}

impl<S: Scalar> Model<S> {
    /// Build a model from its config. All initialization randomness derives
    /// from `cfg.seed` through fixed per-component streams, so camera-only
    /// and fusion configs sharing a seed share camera-branch weights.
    pub fn new(cfg: &PipelineConfig) -> Result<Model<S>> {
        cfg.validate()?;
        let backbone_cfg = BackboneConfig {
            in_channels: 3,
            base_channels: cfg.cam_base_channels,
            stages: cfg
                .cam_stage_blocks
                .iter()
                .map(|&blocks| StageSpec { blocks, downsample: true })
                .collect(),
            out_channels: Some(cfg.cam_channels),
        };
        let backbone = ResNetBackbone::new(backbone_cfg, &mut stream_rng(cfg.seed, 1))?;
        let depth_head = DepthHead::new(cfg.cam_channels, cfg.depth_bins, &mut stream_rng(cfg.seed, 2))?;
        let radar = match cfg.radar {
            RadarEncoderKind::None => RadarBranch::None,
            RadarEncoderKind::GridMap => RadarBranch::GridMap,
            RadarEncoderKind::BevFeatureNet => RadarBranch::FeatureNet {
                params: BevFeatureNetParams::new(cfg.radar_channels, &mut stream_rng(cfg.seed, 3))?,
                cfg: cfg.featurenet_config(),
            },
        };
        let fuse = if cfg.is_camera_only() {
            None
        } else {
            Some(FuseParams::identity(cfg.cam_channels, cfg.radar_bev_channels())?)
        };
        let bev_encoder = ResNetBackbone::new(
            bev_encoder_config(cfg.cam_channels, cfg.bev_blocks),
            &mut stream_rng(cfg.seed, 4),
        )?;
        let head = DetectionHeadParams::new(
            cfg.cam_channels,
            cfg.head_channels,
            cfg.classes,
            &mut stream_rng(cfg.seed, 5),
        )?;
        Ok(Model { cfg: cfg.clone(), backbone, depth_head, radar, fuse, bev_encoder, head })
    }

    /// All parameters and buffers, with stable names. The flag marks
    /// trainable tensors (running statistics are carried but not optimized).
    pub fn named_tensors(&self) -> NamedTensors<S> {
        let mut out = self.backbone.named_tensors("camera");
        out.extend(self.depth_head.named_tensors("depth"));
        if let RadarBranch::FeatureNet { params, .. } = &self.radar {
            out.extend(params.named_tensors("radar"));
        }
        if let Some(fuse) = &self.fuse {
            out.extend(fuse.named_tensors("fuse"));
        }
        out.extend(self.bev_encoder.named_tensors("bev"));
        out.extend(self.head.named_tensors("head"));
        out
    }

    /// Camera branch: images → backbone features → depth → BEV.
    pub fn camera_stage(
        &self,
        images: &[Image],
        cache: &TransportCache,
        mode: BnMode,
    ) -> Result<BevFeature<S>> {
        let x = images_to_tensor(images)?;
        let feats = self.backbone.forward(&x, mode)?;
        let fs = feats.shape().to_vec();
        if (fs[2], fs[3]) != cache.feat_hw {
            return Err(PipelineError::DataMismatch(format!(
                "feature map {}x{} vs cached transport {}x{}",
                fs[2], fs[3], cache.feat_hw.0, cache.feat_hw.1
            )));
        }
        let depth = self.depth_head.forward(&feats)?;
        let bev = match cache.kind {
            ViewKind::LiftSplat => {
                lift_splat(&feats, &depth, &cache.records, &self.cfg.grid)?
            }
            ViewKind::MatrixVt => {
                matrixvt_transform(&feats, &depth, &cache.records, &cache.view_cfg)?
            }
        };
        Ok(BevFeature::new(bev, self.cfg.grid)?)
    }

    /// Radar branch, if configured. `sample_seed` drives the learned
    /// encoder's deterministic cell subsampling.
    pub fn radar_stage(
        &self,
        points: &[RadarPoint],
        mode: BnMode,
        sample_seed: u64,
    ) -> Result<Option<BevFeature<S>>> {
        let tensor = match &self.radar {
            RadarBranch::None => return Ok(None),
            RadarBranch::GridMap => radar_grid_map(points, &self.cfg.grid)?,
            RadarBranch::FeatureNet { params, cfg } => {
                bev_feature_net(points, cfg, params, mode, sample_seed)?
            }
        };
        Ok(Some(BevFeature::new(tensor, self.cfg.grid)?))
    }

    /// Concat + 1×1 fuse, or pass-through for camera-only models.
    pub fn fusion_stage(
        &self,
        cam: BevFeature<S>,
        radar: Option<BevFeature<S>>,
    ) -> Result<BevFeature<S>> {
        match (radar, &self.fuse) {
            (Some(radar), Some(params)) => Ok(fuse(&cam, &radar, params)?.feature),
            (None, None) => Ok(cam),
            (Some(_), None) => Err(PipelineError::BadConfig(
                "radar features produced but no fusion parameters".into(),
            )),
            (None, Some(_)) => Err(PipelineError::BadConfig(
                "fusion parameters present but no radar branch".into(),
            )),
        }
    }

    /// Shared BEV encoder + detection head.
    pub fn head_stage(&self, bev: &BevFeature<S>, mode: BnMode) -> Result<HeadOutput<S>> {
        let encoded = bev_encoder(&self.bev_encoder, bev, mode)?;
        Ok(self.head.forward(&encoded.tensor, mode)?)
    }

    /// Full forward pass, returning per-stage wall times. `aug` warps the
    /// camera BEV features onto the augmented world; the caller is expected
    /// to have transformed radar points and boxes with the same parameters.
    pub fn forward_timed(
        &self,
        images: &[Image],
        points: &[RadarPoint],
        cache: &TransportCache,
        mode: BnMode,
        aug: &AugmentParams,
        sample_seed: u64,
    ) -> Result<(HeadOutput<S>, StageSeconds)> {
        let mut times = StageSeconds::default();
        let t0 = Instant::now();
        let mut cam = self.camera_stage(images, cache, mode)?;
        if !aug.is_identity() {
            let index = aug.bev_warp_index(&self.cfg.grid);
            let warped = gather_cells(
                &cam.tensor,
                &index,
                (self.cfg.grid.rows(), self.cfg.grid.cols()),
            )?;
            cam = BevFeature::new(warped, self.cfg.grid)?;
        }
        times.camera = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let radar = self.radar_stage(points, mode, sample_seed)?;
        times.radar = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let fused = self.fusion_stage(cam, radar)?;
        times.fusion = t2.elapsed().as_secs_f64();

        let t3 = Instant::now();
        let out = self.head_stage(&fused, mode)?;
        times.head = t3.elapsed().as_secs_f64();
        Ok((out, times))
    }

    pub fn forward(
        &self,
        images: &[Image],
        points: &[RadarPoint],
        cache: &TransportCache,
        mode: BnMode,
        aug: &AugmentParams,
        sample_seed: u64,
    ) -> Result<HeadOutput<S>> {
        Ok(self
            .forward_timed(images, points, cache, mode, aug, sample_seed)?
            .0)
    }

    /// Persist every named tensor (parameters and running statistics).
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let entries: Vec<(String, Tensor<S>)> = self
            .named_tensors()
            .into_iter()
            .map(|(name, tensor, _)| (name, tensor))
            .collect();
        Ok(checkpoint::save(path, &entries)?)
    }

    /// Load a checkpoint saved from an identically configured model.
    pub fn load_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let entries: Vec<(String, Tensor<S>)> = self
            .named_tensors()
            .into_iter()
            .map(|(name, tensor, _)| (name, tensor))
            .collect();
        Ok(checkpoint::restore(checkpoint::load(path)?, &entries)?)
    }

    /// Persist a self-describing checkpoint: a JSON architecture header
    /// followed by the weight records, so a model can be rebuilt from the
    /// file alone. See [`load_bundle`].
    pub fn save_bundle(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let header = serde_json::to_vec(&self.cfg)
            .map_err(|e| PipelineError::BadConfig(format!("unserializable config: {e}")))?;
        let entries: Vec<(String, Tensor<S>)> = self
            .named_tensors()
            .into_iter()
            .map(|(name, tensor, _)| (name, tensor))
            .collect();
        let file = std::fs::File::create(path).map_err(CheckpointError::Io)?;
        let mut w = std::io::BufWriter::new(file);
        (|| -> std::result::Result<(), CheckpointError> {
            w.write_all(BUNDLE_MAGIC)?;
            w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u32).to_le_bytes())?;
            w.write_all(&header)?;
            checkpoint::write_records(&mut w, &entries)?;
            w.flush()?;
            Ok(())
        })()?;
        Ok(())
    }
}

/// First bytes of a self-describing model file.
pub const BUNDLE_MAGIC: &[u8; 4] = b"BFPK";
pub const BUNDLE_VERSION: u16 = 1;

/// Rebuild a model from a [`Model::save_bundle`] file: reads the embedded
/// architecture description, builds a fresh model from it and restores the
/// weights.
pub fn load_bundle<S: Scalar>(path: &std::path::Path) -> Result<(PipelineConfig, Model<S>)> {
    use std::io::Read;
    let file = std::fs::File::open(path).map_err(CheckpointError::Io)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(CheckpointError::Io)?;
    if &magic != BUNDLE_MAGIC {
        return Err(PipelineError::BadConfig(
            "not a model bundle (bad magic)".into(),
        ));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v).map_err(CheckpointError::Io)?;
    let version = u16::from_le_bytes(v);
    if version != BUNDLE_VERSION {
        return Err(PipelineError::BadConfig(format!(
            "unsupported model bundle version {version}"
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(CheckpointError::Io)?;
    let header_len = u32::from_le_bytes(len) as usize;
    if header_len > 1 << 20 {
        return Err(PipelineError::BadConfig(format!(
            "implausible bundle header length {header_len}"
        )));
    }
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(CheckpointError::Io)?;
    let cfg: PipelineConfig = serde_json::from_slice(&header)
        .map_err(|e| PipelineError::BadConfig(format!("bad bundle header: {e}")))?;
    cfg.validate()?;
    let model = Model::<S>::new(&cfg)?;
    let entries: Vec<(String, Tensor<S>)> = model
        .named_tensors()
        .into_iter()
        .map(|(name, tensor, _)| (name, tensor))
        .collect();
    let records = checkpoint::read_records(&mut r)?;
    checkpoint::restore(records, &entries)?;
    Ok((cfg, model))
}

fn images_to_tensor<S: Scalar>(images: &[Image]) -> Result<Tensor<S>> {
    if images.is_empty() {
        return Err(PipelineError::DataMismatch("sample has no images".into()));
    }
    let (w, h) = (images[0].width, images[0].height);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.width != w || img.height != h {
            return Err(PipelineError::DataMismatch(
                "images in one sample differ in size".into(),
            ));
        }
        // Interleaved RGB rows -> planar channels.
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(S::from_f64_lossy(img.data[3 * (y * w + x) + c] as f64));
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data)?)
}

/// Per-epoch mean losses, in the order they appear in the CSV log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub heatmap_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

/// Render training stats as the CSV log the `train` command writes.
pub fn stats_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,heatmap_loss,reg_loss,total\n");
    for s in stats {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            s.epoch, s.heatmap_loss, s.reg_loss, s.total
        ));
    }
    out
}

fn preflight(model_cfg: &PipelineConfig, data: &[SampleBundle]) -> Result<()> {
    if data.is_empty() {
        return Err(PipelineError::DataMismatch("no samples".into()));
    }
    for sample in data {
        for img in &sample.images {
            if img.width != model_cfg.image_width || img.height != model_cfg.image_height {
                return Err(PipelineError::DataMismatch(format!(
                    "sample {} image {}x{} vs config {}x{}",
                    sample.id, img.width, img.height, model_cfg.image_width, model_cfg.image_height
                )));
            }
        }
        if let Some(b) = sample
            .ground_truth
            .iter()
            .find(|b| b.class_id as usize >= model_cfg.classes)
        {
            return Err(PipelineError::DataMismatch(format!(
                "sample {} has class {} but config knows {} classes",
                sample.id, b.class_id, model_cfg.classes
            )));
        }
    }
    Ok(())
}

fn draw_augment(rng: &mut rand_chacha::ChaCha8Rng, cfg: &PipelineConfig) -> AugmentParams {
    if !cfg.augment {
        return AugmentParams::identity();
    }
    AugmentParams {
        rotation: rng.gen_range(-cfg.augment_rotation..=cfg.augment_rotation),
        scale: 1.0 + rng.gen_range(-cfg.augment_scale..=cfg.augment_scale),
        flip_x: cfg.augment_flip && rng.gen_bool(0.5),
        flip_y: cfg.augment_flip && rng.gen_bool(0.5),
    }
}

fn augment_points(points: &[RadarPoint], aug: &AugmentParams) -> Vec<RadarPoint> {
    points
        .iter()
        .map(|p| {
            let (x, y) = aug.apply_xy(p.x, p.y);
            RadarPoint { x, y, v_d: aug.apply_radial_speed(p.v_d), ..*p }
        })
        .collect()
}

/// Train `model` on `data` for `model.cfg.epochs` epochs of single-sample
/// steps. `progress` fires after every epoch. Sample order reshuffles each
/// epoch from the config seed.
pub fn train<S: Scalar>(
    model: &Model<S>,
    data: &[SampleBundle],
    mut progress: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    preflight(&model.cfg, data)?;
    let cache = TransportCache::build(&model.cfg, &data[0].cameras)?;
    let loss_cfg = model.cfg.loss_config();
    let target_cfg = model.cfg.target_config();
    let trainable: Vec<Tensor<S>> = model
        .named_tensors()
        .into_iter()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(_, t, _)| t)
        .collect();
    let mut opt = AdamW::new(trainable, model.cfg.lr, model.cfg.weight_decay);

    let mut stats = Vec::with_capacity(model.cfg.epochs);
    for epoch in 0..model.cfg.epochs {
        // Half-cosine learning-rate decay over the run: full rate on the
        // first epoch, approaching a tenth of it on the last.
        let progress_frac = if model.cfg.epochs > 1 {
            epoch as f64 / (model.cfg.epochs - 1) as f64
        } else {
            0.0
        };
        let floor = 0.1 * model.cfg.lr;
        let span = model.cfg.lr - floor;
        opt.lr = S::from_f64_lossy(
            floor + span * 0.5 * (1.0 + (std::f64::consts::PI * progress_frac).cos()),
        );
        let mut rng = stream_rng(model.cfg.seed, 0x7261_696e_0000_0000 | epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for &i in &order {
            let sample = &data[i];
            let aug = draw_augment(&mut rng, &model.cfg);
            let points = augment_points(&sample.points, &aug);
            let boxes: Vec<Box3D> = sample.ground_truth.iter().map(|b| aug.apply_box(b)).collect();

            let out = model.forward(
                &sample.images,
                &points,
                &cache,
                BnMode::Train,
                &aug,
                i as u64,
            )?;
            let targets = make_targets::<S>(&boxes, &model.cfg.grid, model.cfg.classes, &target_cfg)?;
            let heat = gaussian_focal_loss(&out.heatmap, &targets.heatmap, targets.n_objects, &loss_cfg)?;
            let reg = regression_l1_loss(&out.regression, &targets.regression, &targets.reg_mask)?;
            let rot = regression_l1_loss(&out.rotation, &targets.rotation, &targets.rot_mask)?;
            let reg_total = reg
                .scale(loss_cfg.reg_weight)?
                .add(&rot.scale(loss_cfg.rot_weight)?)?;
            let total = heat.add(&reg_total)?;

            let (h_v, r_v, t_v) = (
                S::to_f64_lossy(heat.item()?),
                S::to_f64_lossy(reg_total.item()?),
                S::to_f64_lossy(total.item()?),
            );
            if !t_v.is_finite() {
                return Err(PipelineError::Diverged { epoch, sample: i });
            }
            opt.zero_grad();
            total.backward()?;
            opt.step();
            sums = (sums.0 + h_v, sums.1 + r_v, sums.2 + t_v);
        }
        let n = data.len() as f64;
        let s = EpochStats {
            epoch,
            heatmap_loss: sums.0 / n,
            reg_loss: sums.1 / n,
            total: sums.2 / n,
        };
        log::info!(
            "epoch {}: heatmap {:.4}, reg {:.4}, total {:.4}",
            s.epoch, s.heatmap_loss, s.reg_loss, s.total
        );
        progress(&s);
        stats.push(s);
    }
    Ok(stats)
}

/// Moving/stationary attribute inferred from a predicted velocity, matching
/// the ground-truth labeling convention.
fn velocity_attribute(b: &Box3D) -> u32 {
    if b.velocity[0].hypot(b.velocity[1]) > 0.25 {
        1
    } else {
        0
    }
}

/// Run inference on one sample and decode detections.
pub fn predict<S: Scalar>(
    model: &Model<S>,
    cache: &TransportCache,
    sample: &SampleBundle,
    sample_seed: u64,
) -> Result<DetectionSet> {
    let out = model.forward(
        &sample.images,
        &sample.points,
        cache,
        BnMode::Eval,
        &AugmentParams::identity(),
        sample_seed,
    )?;
    let mut dets = decode(&out, &model.cfg.grid, &model.cfg.decode_config(), None)?;
    for b in dets.boxes.iter_mut() {
        b.attribute_id = velocity_attribute(b);
    }
    Ok(dets)
}

/// Inference over a whole split, producing evaluation frames in input order.
pub fn eval_frames<S: Scalar>(
    model: &Model<S>,
    samples: &[SampleBundle],
) -> Result<Vec<EvalFrame>> {
    if samples.is_empty() {
        return Err(PipelineError::DataMismatch("no samples".into()));
    }
    preflight(&model.cfg, samples)?;
    let cache = TransportCache::build(&model.cfg, &samples[0].cameras)?;
    let mut frames = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let dets = predict(model, &cache, sample, i as u64)?;
        frames.push(EvalFrame {
            predictions: dets.boxes,
            ground_truth: sample.ground_truth.clone(),
        });
    }
    Ok(frames)
}

/// Full evaluation: inference + metric computation.
pub fn evaluate_model<S: Scalar>(
    model: &Model<S>,
    samples: &[SampleBundle],
    eval_cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let frames = eval_frames(model, samples)?;
    Ok(evaluate(&frames, eval_cfg)?)
}

/// Median and 90th percentile of a series, nearest-rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub median_ms: f64,
    pub p90_ms: f64,
}

fn stage_stats(samples: &mut [f64]) -> StageStats {
    if samples.is_empty() {
        return StageStats { median_ms: 0.0, p90_ms: 0.0 };
    }
    samples.sort_by(f64::total_cmp);
    let pick = |q: f64| {
        let rank = (q * samples.len() as f64).ceil() as usize;
        samples[rank.clamp(1, samples.len()) - 1] * 1e3
    };
    StageStats { median_ms: pick(0.5), p90_ms: pick(0.9) }
}

/// Per-stage latency over a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub camera: StageStats,
    pub radar: StageStats,
    pub fusion: StageStats,
    pub head: StageStats,
    pub total: StageStats,
    /// (radar + fusion median) / (camera + head median): the fraction the
    /// radar branch adds on top of a camera-only pipeline.
    pub radar_overhead: f64,
}

impl BenchReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("frames: {}\n", self.frames));
        out.push_str("stage        median_ms      p90_ms\n");
        for (name, s) in [
            ("camera", &self.camera),
            ("radar", &self.radar),
            ("fusion", &self.fusion),
            ("head", &self.head),
            ("total", &self.total),
        ] {
            out.push_str(&format!("{name:<10} {:>11.3} {:>11.3}\n", s.median_ms, s.p90_ms));
        }
        out.push_str(&format!(
            "radar branch overhead: {:.1}% of camera-only latency\n",
            self.radar_overhead * 100.0
        ));
        out
    }
}

/// Time eval-mode forward passes, cycling `samples` until at least
/// `min_frames` frames have been measured.
pub fn bench_model<S: Scalar>(
    model: &Model<S>,
    samples: &[SampleBundle],
    min_frames: usize,
) -> Result<BenchReport> {
    if samples.is_empty() {
        return Err(PipelineError::DataMismatch("no samples".into()));
    }
    preflight(&model.cfg, samples)?;
    let cache = TransportCache::build(&model.cfg, &samples[0].cameras)?;
    let frames = min_frames.max(1);
    let mut camera = Vec::with_capacity(frames);
    let mut radar = Vec::with_capacity(frames);
    let mut fusion = Vec::with_capacity(frames);
    let mut head = Vec::with_capacity(frames);
    let mut total = Vec::with_capacity(frames);
    for i in 0..frames {
        let sample = &samples[i % samples.len()];
        let (_, t) = model.forward_timed(
            &sample.images,
            &sample.points,
            &cache,
            BnMode::Eval,
            &AugmentParams::identity(),
            i as u64,
        )?;
        camera.push(t.camera);
        radar.push(t.radar);
        fusion.push(t.fusion);
        head.push(t.head);
        total.push(t.camera + t.radar + t.fusion + t.head);
    }
    let camera = stage_stats(&mut camera);
    let radar = stage_stats(&mut radar);
    let fusion = stage_stats(&mut fusion);
    let head = stage_stats(&mut head);
    let total = stage_stats(&mut total);
    let base = camera.median_ms + head.median_ms;
    let radar_overhead = if base > 0.0 {
        (radar.median_ms + fusion.median_ms) / base
    } else {
        0.0
    };
    Ok(BenchReport { frames, camera, radar, fusion, head, total, radar_overhead })
}

/// Worker-thread cap honored by the parallel drivers: `BEVFUSE_THREADS`
/// when set to a positive integer, otherwise the machine's parallelism.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("BEVFUSE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, CameraMount, SceneGenConfig};

    fn tiny_scene_cfg() -> SceneGenConfig {
        let mut cfg = SceneGenConfig {
            image_width: 48,
            image_height: 16,
            cameras: vec![CameraMount { position: [1.0, 0.0, 1.4], yaw: 0.0 }],
            extent: 7.0,
            ..SceneGenConfig::default()
        };
        cfg.seed = 7;
        for c in cfg.classes.iter_mut() {
            c.count = (1, 1);
        }
        cfg.classes.retain(|c| c.name != "truck");
        cfg.clutter = (1, 3);
        cfg
    }

    fn tiny_pipeline_cfg() -> PipelineConfig {
        PipelineConfig {
            seed: 21,
            grid: BevGridSpec { x_min: -8.0, x_max: 8.0, y_min: -8.0, y_max: 8.0, cell: 1.0 },
            image_width: 48,
            image_height: 16,
            cam_base_channels: 4,
            cam_stage_blocks: vec![1, 1, 1],
            cam_channels: 8,
            depth_bins: 5,
            d_min: 1.0,
            d_max: 11.0,
            radar_channels: 8,
            radar_max_cells: 64,
            radar_max_points: 4,
            bev_blocks: 1,
            head_channels: 16,
            epochs: 2,
            lr: 1e-3,
            ..PipelineConfig::default()
        }
    }

    fn tiny_data(n: usize) -> Vec<SampleBundle> {
        let cfg = tiny_scene_cfg();
        (0..n as u64).map(|t| generate_scene(&cfg, t).unwrap()).collect()
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut cfg = tiny_pipeline_cfg();
        cfg.image_width = 50; // not divisible by stride 8
        assert!(matches!(cfg.validate(), Err(PipelineError::BadConfig(_))));
        let mut cfg = tiny_pipeline_cfg();
        cfg.classes = 0;
        assert!(cfg.validate().is_err());
        assert!(tiny_pipeline_cfg().validate().is_ok());
    }

    #[test]
    fn camera_branch_is_shared_between_modes() {
        let fusion_cfg = tiny_pipeline_cfg();
        let mut camera_cfg = fusion_cfg.clone();
        camera_cfg.radar = RadarEncoderKind::None;
        let fusion_model: Model<f32> = Model::new(&fusion_cfg).unwrap();
        let camera_model: Model<f32> = Model::new(&camera_cfg).unwrap();

        let by_name = |m: &Model<f32>| -> std::collections::BTreeMap<String, Vec<f32>> {
            m.named_tensors()
                .into_iter()
                .map(|(n, t, _)| (n, t.values()))
                .collect()
        };
        let f = by_name(&fusion_model);
        let c = by_name(&camera_model);
        for (name, values) in &c {
            assert_eq!(Some(values), f.get(name).map(|v| v), "{name} differs");
        }
        assert!(f.keys().any(|k| k.starts_with("radar.")));
        assert!(f.keys().any(|k| k.starts_with("fuse.")));
        assert!(!c.keys().any(|k| k.starts_with("radar.") || k.starts_with("fuse.")));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny_pipeline_cfg();
        let model: Model<f32> = Model::new(&cfg).unwrap();
        let data = tiny_data(1);
        let cache = TransportCache::build(&cfg, &data[0].cameras).unwrap();
        let out = model
            .forward(
                &data[0].images,
                &data[0].points,
                &cache,
                BnMode::Eval,
                &AugmentParams::identity(),
                0,
            )
            .unwrap();
        let (h, w) = (cfg.grid.rows(), cfg.grid.cols());
        assert_eq!(out.heatmap.shape(), &[cfg.classes, h, w]);
        assert_eq!(out.regression.shape(), &[8, h, w]);
        assert_eq!(out.rotation.shape(), &[2, h, w]);

        let model2: Model<f32> = Model::new(&cfg).unwrap();
        let out2 = model2
            .forward(
                &data[0].images,
                &data[0].points,
                &cache,
                BnMode::Eval,
                &AugmentParams::identity(),
                0,
            )
            .unwrap();
        assert_eq!(out.heatmap.values(), out2.heatmap.values());
    }

    #[test]
    fn training_runs_and_logs_finite_losses() {
        let cfg = tiny_pipeline_cfg();
        let model: Model<f32> = Model::new(&cfg).unwrap();
        let data = tiny_data(3);
        let mut seen = 0;
        let stats = train(&model, &data, |_| seen += 1).unwrap();
        assert_eq!(stats.len(), cfg.epochs);
        assert_eq!(seen, cfg.epochs);
        for s in &stats {
            assert!(s.total.is_finite() && s.total > 0.0);
            assert!((s.heatmap_loss + s.reg_loss - s.total).abs() < 1e-6);
        }
        let csv = stats_csv(&stats);
        assert!(csv.starts_with("epoch,heatmap_loss,reg_loss,total\n"));
        assert_eq!(csv.lines().count(), 1 + cfg.epochs);

        // Identical rerun from a fresh model gives identical losses.
        let model_b: Model<f32> = Model::new(&cfg).unwrap();
        let stats_b = train(&model_b, &data, |_| {}).unwrap();
        assert_eq!(stats, stats_b);
    }

    #[test]
    fn augmented_training_stays_finite() {
        let mut cfg = tiny_pipeline_cfg();
        cfg.augment = true;
        cfg.epochs = 1;
        let model: Model<f32> = Model::new(&cfg).unwrap();
        let stats = train(&model, &tiny_data(3), |_| {}).unwrap();
        assert!(stats[0].total.is_finite());
    }

    #[test]
    fn checkpoint_round_trips_exact_outputs() {
        let cfg = tiny_pipeline_cfg();
        let model: Model<f32> = Model::new(&cfg).unwrap();
        let data = tiny_data(2);
        train(&model, &data, |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bfck");
        model.save_checkpoint(&path).unwrap();

        let restored: Model<f32> = Model::new(&cfg).unwrap();
        restored.load_checkpoint(&path).unwrap();

        let cache = TransportCache::build(&cfg, &data[0].cameras).unwrap();
        let a = predict(&model, &cache, &data[0], 0).unwrap();
        let b = predict(&restored, &cache, &data[0], 0).unwrap();
        assert_eq!(a, b);

        // A camera-only model must reject this checkpoint (extra tensors).
        let mut cam_cfg = cfg.clone();
        cam_cfg.radar = RadarEncoderKind::None;
        let cam_model: Model<f32> = Model::new(&cam_cfg).unwrap();
        assert!(matches!(
            cam_model.load_checkpoint(&path),
            Err(PipelineError::Checkpoint(_))
        ));
    }

    #[test]
    fn bundle_rebuilds_the_model_from_the_file_alone() {
        let cfg = tiny_pipeline_cfg();
        let model: Model<f32> = Model::new(&cfg).unwrap();
        let data = tiny_data(2);
        train(&model, &data, |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bfpk");
        model.save_bundle(&path).unwrap();

        let (loaded_cfg, restored) = load_bundle::<f32>(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        let cache = TransportCache::build(&cfg, &data[0].cameras).unwrap();
        let a = predict(&model, &cache, &data[0], 0).unwrap();
        let b = predict(&restored, &cache, &data[0], 0).unwrap();
        assert_eq!(a, b);

        // Not-a-bundle files are reported as config errors, not panics.
        let junk = dir.path().join("junk.bfpk");
        std::fs::write(&junk, b"BFXXnope").unwrap();
        assert!(matches!(
            load_bundle::<f32>(&junk),
            Err(PipelineError::BadConfig(_))
        ));
    }

    #[test]
    fn evaluation_produces_a_report() {
        let cfg = tiny_pipeline_cfg();
        let model: Model<f32> = Model::new(&cfg).unwrap();
        let data = tiny_data(3);
        let eval_cfg = EvalConfig {
            class_names: vec!["car".into(), "pedestrian".into(), "truck".into()],
            ..EvalConfig::default()
        };
        let report = evaluate_model(&model, &data, &eval_cfg).unwrap();
        assert!(report.nds.is_finite());
        assert!((0.0..=1.0).contains(&report.map));
        let dets = predict(
            &model,
            &TransportCache::build(&cfg, &data[0].cameras).unwrap(),
            &data[0],
            0,
        )
        .unwrap();
        assert!(dets.boxes.len() <= cfg.max_dets);
        for b in &dets.boxes {
            let s = b.score.unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn bench_reports_all_stages() {
        let cfg = tiny_pipeline_cfg();
        let model: Model<f32> = Model::new(&cfg).unwrap();
        let data = tiny_data(2);
        let report = bench_model(&model, &data, 10).unwrap();
        assert_eq!(report.frames, 10);
        assert!(report.camera.median_ms > 0.0);
        assert!(report.radar.median_ms > 0.0);
        assert!(report.radar_overhead >= 0.0);
        assert!(report.render_table().contains("radar branch overhead"));

        let mut cam_cfg = cfg.clone();
        cam_cfg.radar = RadarEncoderKind::None;
        let cam_model: Model<f32> = Model::new(&cam_cfg).unwrap();
        let cam_report = bench_model(&cam_model, &data, 10).unwrap();
        // The skipped stages still cost a few nanoseconds of clock reads.
        assert!(cam_report.radar.median_ms < 0.01);
        assert!(cam_report.radar_overhead < 0.05);
    }
}
