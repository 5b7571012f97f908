//! Radar/camera BEV fusion and the shared post-fusion BEV encoder.
//!
//! Fusion is concatenation on the channel axis followed by a 1x1 conv that
//! reduces back to the camera channel count, so every downstream module
//! (BEV encoder, detection heads) is byte-for-byte shape-compatible with the
//! camera-only configuration. The 1x1 conv starts as an identity on the
//! camera channels and zeros on the radar channels: at initialization the
//! fused network computes exactly what the camera-only network computes.

use thiserror::Error;

use crate::geometry::BevGridSpec;
use crate::scalar::Scalar;
use crate::tensor::nn::{BackboneConfig, Conv2d, NamedTensors, ResNetBackbone, StageSpec};
use crate::tensor::{concat, BnMode, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("BEV grids differ: {0}")]
    GridMismatch(String),
    #[error("BEV shapes differ: camera {cam:?} vs radar {radar:?}")]
    ShapeMismatch { cam: Vec<usize>, radar: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// A `(C, H, W)` BEV feature map together with the grid it lives on, so
/// consumers can verify geometric compatibility instead of trusting it.
#[derive(Debug, Clone)]
pub struct BevFeature<S: Scalar> {
    pub tensor: Tensor<S>,
    pub grid: BevGridSpec,
}

impl<S: Scalar> BevFeature<S> {
    pub fn new(tensor: Tensor<S>, grid: BevGridSpec) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 3 || shape[1] != grid.rows() || shape[2] != grid.cols() {
            return Err(FusionError::Tensor(TensorError::ShapeMismatch {
                op: "bev_feature",
                detail: format!(
                    "tensor {:?} does not cover the {}x{} grid",
                    shape,
                    grid.rows(),
                    grid.cols()
                ),
            }));
        }
        Ok(BevFeature { tensor, grid })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }
}

/// Fused feature map plus a record of where it came from.
#[derive(Debug, Clone)]
pub struct FusedBev<S: Scalar> {
    pub feature: BevFeature<S>,
    pub cam_channels: usize,
    pub radar_channels: usize,
}

/// The 1x1 reduction conv applied after concatenation.
pub struct FuseParams<S: Scalar> {
    pub conv: Conv2d<S>,
    cam_channels: usize,
    radar_channels: usize,
}

impl<S: Scalar> FuseParams<S> {
    /// Identity-on-camera initialization: `out[c] = cam[c]` at step zero.
    pub fn identity(cam_channels: usize, radar_channels: usize) -> Result<Self> {
        let total = cam_channels + radar_channels;
        let mut w = vec![S::zero(); cam_channels * total];
        for c in 0..cam_channels {
            w[c * total + c] = S::one();
        }
        let weight = Tensor::leaf(&[cam_channels, total, 1, 1], w)?;
        let bias = Tensor::leaf(&[cam_channels], vec![S::zero(); cam_channels])?;
        Ok(FuseParams {
            conv: Conv2d::from_parts(weight, Some(bias), 1, 0),
            cam_channels,
            radar_channels,
        })
    }

    pub fn named_tensors(&self, prefix: &str) -> NamedTensors<S> {
        self.conv.named_tensors(&format!("{prefix}.conv"))
    }
}

/// Concatenate camera and radar BEV features on the channel axis and reduce
/// back to the camera channel count with the 1x1 conv. Grids must be
/// structurally identical; nothing is ever resampled silently.
pub fn fuse<S: Scalar>(
    cam: &BevFeature<S>,
    radar: &BevFeature<S>,
    params: &FuseParams<S>,
) -> Result<FusedBev<S>> {
    if cam.grid != radar.grid {
        return Err(FusionError::GridMismatch(format!(
            "camera {:?} vs radar {:?}",
            cam.grid, radar.grid
        )));
    }
    let (cs, rs) = (cam.tensor.shape(), radar.tensor.shape());
    if cs[1..] != rs[1..] {
        return Err(FusionError::ShapeMismatch { cam: cs.to_vec(), radar: rs.to_vec() });
    }
    if cs[0] != params.cam_channels || rs[0] != params.radar_channels {
        return Err(FusionError::Tensor(TensorError::ShapeMismatch {
            op: "fuse",
            detail: format!(
                "params expect {}+{} channels, got {}+{}",
                params.cam_channels, params.radar_channels, cs[0], rs[0]
            ),
        }));
    }
    let (h, w) = (cs[1], cs[2]);
    let stacked = concat(&[cam.tensor.clone(), radar.tensor.clone()], 0)?
        .reshape(&[1, cs[0] + rs[0], h, w])?;
    let reduced = params
        .conv
        .forward(&stacked)?
        .reshape(&[params.cam_channels, h, w])?;
    Ok(FusedBev {
        feature: BevFeature::new(reduced, cam.grid)?,
        cam_channels: cs[0],
        radar_channels: rs[0],
    })
}

/// Config for the shared post-fusion BEV encoder: a resolution-preserving
/// residual stack (no downsampling), identical between camera-only and
/// fusion modes.
pub fn bev_encoder_config(channels: usize, blocks: usize) -> BackboneConfig {
    BackboneConfig {
        in_channels: channels,
        base_channels: channels,
        stages: vec![StageSpec { blocks, downsample: false }],
        out_channels: None,
    }
}

/// Run the shared BEV encoder on a fused (or camera-only) BEV map.
pub fn bev_encoder<S: Scalar>(
    net: &ResNetBackbone<S>,
    feature: &BevFeature<S>,
    mode: BnMode,
) -> Result<BevFeature<S>> {
    let (c, h, w) = (
        feature.tensor.shape()[0],
        feature.tensor.shape()[1],
        feature.tensor.shape()[2],
    );
    let x = feature.tensor.reshape(&[1, c, h, w])?;
    let y = net.forward(&x, mode)?;
    let out_c = y.shape()[1];
    BevFeature::new(y.reshape(&[out_c, h, w])?, feature.grid)
}
