//! Radar branch: sweep aggregation, BEV grid encodings, and the small
//! residual backbone that brings radar features to the camera-BEV shape.
//!
//! Two interchangeable encoders produce the initial radar BEV map:
//!
//! * [`radar_grid_map`] — a fixed 4-channel occupancy-style encoding
//!   (count, max RCS, min/max signed Doppler per cell).
//! * [`featurenet`] — a learned per-point embedding (shared 1x1 conv +
//!   batchnorm + relu, max-pooled per cell) scattered back onto the grid.
//!
//! Both operate on motion-compensated points in the latest ego frame as
//! produced by [`aggregate_sweeps`]. The optional [`grid_map_blur`] and
//! [`doppler_skew`] hooks are documented input shaping stages; both are
//! identity when disabled.

use thiserror::Error;

use crate::geometry::BevGridSpec;
use crate::scalar::Scalar;
use crate::tensor::nn::{BackboneConfig, ResNetBackbone, StageSpec};
use crate::tensor::{BnMode, Tensor, TensorError};

pub mod featurenet;

pub use featurenet::{bev_feature_net, BevFeatureNetConfig, BevFeatureNetParams, DenseCells};

#[derive(Debug, Error)]
pub enum RadarError {
    #[error("no radar sweeps supplied")]
    EmptySweeps,
    #[error("sweep count must be at least 1")]
    ZeroCount,
    #[error("sweeps must be ordered newest first (timestamps non-increasing)")]
    UnorderedSweeps,
    #[error("non-finite radar point field: {0}")]
    NonFinitePoint(&'static str),
    #[error("spatial dims {h}x{w} not divisible by backbone reduction {reduction}")]
    IndivisibleInput { h: usize, w: usize, reduction: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

pub type Result<T> = std::result::Result<T, RadarError>;

/// One radar detection after aggregation, in the latest ego frame.
///
/// `v_d` is the signed, ego-motion-compensated radial (Doppler) speed of the
/// target; approaching targets are negative. `t_s` is the age of the sweep
/// the point came from, in seconds relative to the newest sweep (>= 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub rcs: f64,
    pub v_d: f64,
    pub t_s: f64,
}

impl RadarPoint {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.x, "x"),
            (self.y, "y"),
            (self.rcs, "rcs"),
            (self.v_d, "v_d"),
            (self.t_s, "t_s"),
        ] {
            if !v.is_finite() {
                return Err(RadarError::NonFinitePoint(name));
            }
        }
        if self.t_s < 0.0 {
            return Err(RadarError::NonFinitePoint("t_s < 0"));
        }
        Ok(())
    }
}

/// One raw return inside a single sweep, in that sweep's ego frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarReturn {
    pub x: f64,
    pub y: f64,
    pub rcs: f64,
    pub v_d: f64,
}

/// Planar ego pose (map frame): translation plus heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl EgoPose {
    pub const IDENTITY: EgoPose = EgoPose { x: 0.0, y: 0.0, yaw: 0.0 };

    /// Ego frame -> map frame.
    pub fn to_map(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * x - s * y + self.x, s * x + c * y + self.y)
    }

    /// Map frame -> ego frame.
    pub fn from_map(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.x;
        let dy = y - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// One radar sweep: capture time, the ego pose at capture time, and the raw
/// returns in that pose's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarSweep {
    pub timestamp_us: u64,
    pub pose: EgoPose,
    pub points: Vec<RadarReturn>,
}

/// Concatenate up to `count` newest sweeps into the newest sweep's ego frame.
///
/// `sweeps` must be ordered newest first. Positions are motion-compensated
/// through the per-sweep map poses; `v_d` is kept as measured (it is already
/// ego-motion compensated per point), and `t_s` is set to the age of the
/// source sweep relative to the newest one.
pub fn aggregate_sweeps(sweeps: &[RadarSweep], count: usize) -> Result<Vec<RadarPoint>> {
    if sweeps.is_empty() {
        return Err(RadarError::EmptySweeps);
    }
    if count == 0 {
        return Err(RadarError::ZeroCount);
    }
    if sweeps.windows(2).any(|w| w[0].timestamp_us < w[1].timestamp_us) {
        return Err(RadarError::UnorderedSweeps);
    }
    let latest = &sweeps[0];
    let mut out = Vec::new();
    for sweep in sweeps.iter().take(count) {
        let age_us = latest.timestamp_us - sweep.timestamp_us;
        let t_s = age_us as f64 * 1e-6;
        for r in &sweep.points {
            let (mx, my) = sweep.pose.to_map(r.x, r.y);
            let (x, y) = latest.pose.from_map(mx, my);
            let p = RadarPoint { x, y, rcs: r.rcs, v_d: r.v_d, t_s };
            p.validate()?;
            out.push(p);
        }
    }
    Ok(out)
}

/// Fixed 4-channel BEV encoding of a point list: per cell the detection
/// count, the maximum RCS, and the minimum and maximum signed Doppler speed.
/// Cells without points are all-zero; points outside the grid are dropped.
pub fn radar_grid_map<S: Scalar>(
    points: &[RadarPoint],
    grid: &BevGridSpec,
) -> Result<Tensor<S>> {
    let (h, w) = (grid.rows(), grid.cols());
    let n = h * w;
    let mut count = vec![0.0f64; n];
    let mut max_rcs = vec![0.0f64; n];
    let mut min_vd = vec![0.0f64; n];
    let mut max_vd = vec![0.0f64; n];
    for p in points {
        let Some((row, col)) = grid.cell_index(p.x, p.y) else { continue };
        let i = grid.flat(row, col);
        if count[i] == 0.0 {
            max_rcs[i] = p.rcs;
            min_vd[i] = p.v_d;
            max_vd[i] = p.v_d;
        } else {
            max_rcs[i] = max_rcs[i].max(p.rcs);
            min_vd[i] = min_vd[i].min(p.v_d);
            max_vd[i] = max_vd[i].max(p.v_d);
        }
        count[i] += 1.0;
    }
    let mut data = Vec::with_capacity(4 * n);
    for ch in [&count, &max_rcs, &min_vd, &max_vd] {
        data.extend(ch.iter().map(|&v| S::from_f64_lossy(v)));
    }
    Ok(Tensor::from_vec(&[4, h, w], data)?)
}

/// Blur hook configuration. When enabled, each occupied cell spreads
/// attenuated copies of its value channels to its 8 neighbors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurConfig {
    pub enabled: bool,
    /// Attenuation strength; a source cell with `n` points contributes its
    /// values scaled by `kappa * n / (n + 1)` to each neighbor.
    pub kappa: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        BlurConfig { enabled: false, kappa: 0.5 }
    }
}

/// Spread grid-map values into neighboring cells.
///
/// Declared kernel: for every occupied source cell with count `n`, each of
/// its 8 neighbors receives candidate values `w * v` with
/// `w = kappa * n / (n + 1)` for the max-RCS, min-Doppler and max-Doppler
/// channels. A destination cell combines its own value (if occupied) with
/// all candidates using the channel's own aggregation (max for channels 1
/// and 3, min for channel 2). The count channel is left unchanged, so cell
/// occupancy is still readable after blurring. Disabled configs return the
/// input unchanged.
pub fn grid_map_blur<S: Scalar>(grid_map: &Tensor<S>, cfg: &BlurConfig) -> Result<Tensor<S>> {
    if !cfg.enabled {
        return Ok(grid_map.clone());
    }
    let shape = grid_map.shape().to_vec();
    if shape.len() != 3 || shape[0] != 4 {
        return Err(RadarError::Tensor(TensorError::ShapeMismatch {
            op: "grid_map_blur",
            detail: format!("expected [4, H, W], got {shape:?}"),
        }));
    }
    let (h, w) = (shape[1], shape[2]);
    let n = h * w;
    let vals = grid_map.values();
    let count = &vals[..n];
    let mut out = vals.clone();
    // occupied[i] tracks whether destination channel slots hold data yet:
    // unoccupied cells start from "no value" rather than from literal zero.
    let mut has_value: Vec<bool> = count.iter().map(|&c| c.to_f64_lossy() > 0.0).collect();
    for row in 0..h {
        for col in 0..w {
            let src = row * w + col;
            let c = count[src].to_f64_lossy();
            if c <= 0.0 {
                continue;
            }
            let wgt = S::from_f64_lossy(cfg.kappa * c / (c + 1.0));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (row as i64 + dr, col as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let dst = nr as usize * w + nc as usize;
                    let cand_rcs = vals[n + src] * wgt;
                    let cand_min = vals[2 * n + src] * wgt;
                    let cand_max = vals[3 * n + src] * wgt;
                    if has_value[dst] {
                        out[n + dst] = out[n + dst].max(cand_rcs);
                        out[2 * n + dst] = out[2 * n + dst].min(cand_min);
                        out[3 * n + dst] = out[3 * n + dst].max(cand_max);
                    } else {
                        out[n + dst] = cand_rcs;
                        out[2 * n + dst] = cand_min;
                        out[3 * n + dst] = cand_max;
                        has_value[dst] = true;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&shape, out)?)
}

/// Doppler skew hook configuration; identity when disabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewConfig {
    pub enabled: bool,
    pub gamma: f64,
}

impl Default for SkewConfig {
    fn default() -> Self {
        SkewConfig { enabled: false, gamma: 2.0 }
    }
}

/// Odd, monotone, invertible remap that stretches Doppler values near zero:
/// `sign(v) * ((1 + |v|)^gamma - 1)`. Identity when disabled.
pub fn doppler_skew(v: f64, cfg: &SkewConfig) -> f64 {
    if !cfg.enabled {
        return v;
    }
    v.signum() * ((1.0 + v.abs()).powf(cfg.gamma) - 1.0)
}

/// Inverse of [`doppler_skew`].
pub fn doppler_unskew(v: f64, cfg: &SkewConfig) -> f64 {
    if !cfg.enabled {
        return v;
    }
    v.signum() * ((1.0 + v.abs()).powf(1.0 / cfg.gamma) - 1.0)
}

/// Optional shaping applied around [`radar_grid_map`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GridMapOptions {
    pub skew: SkewConfig,
    pub blur: BlurConfig,
}

/// Grid-map encoding with the optional hooks applied: Doppler values are
/// skewed per point before binning, and the finished map is blurred.
pub fn encode_grid_map<S: Scalar>(
    points: &[RadarPoint],
    grid: &BevGridSpec,
    opts: &GridMapOptions,
) -> Result<Tensor<S>> {
    let map = if opts.skew.enabled {
        let skewed: Vec<RadarPoint> = points
            .iter()
            .map(|p| RadarPoint { v_d: doppler_skew(p.v_d, &opts.skew), ..*p })
            .collect();
        radar_grid_map(&skewed, grid)?
    } else {
        radar_grid_map(points, grid)?
    };
    grid_map_blur(&map, &opts.blur)
}

/// Backbone configuration used for the radar branch: 16 conv layers (stem,
/// seven two-conv residual blocks, 1x1 output head) with two downsampling
/// stages, so spatial dims shrink 4x while channels double twice.
pub fn radar_backbone_config(
    in_channels: usize,
    base_channels: usize,
    out_channels: usize,
) -> BackboneConfig {
    BackboneConfig {
        in_channels,
        base_channels,
        stages: vec![
            StageSpec { blocks: 3, downsample: false },
            StageSpec { blocks: 2, downsample: true },
            StageSpec { blocks: 2, downsample: true },
        ],
        out_channels: Some(out_channels),
    }
}

/// Run the radar backbone, first checking the input spatial dims divide by
/// the configured reduction so every downsampling stage halves exactly.
pub fn radar_backbone<S: Scalar>(
    net: &ResNetBackbone<S>,
    input: &Tensor<S>,
    mode: BnMode,
) -> Result<Tensor<S>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(RadarError::Tensor(TensorError::ShapeMismatch {
            op: "radar_backbone",
            detail: format!("expected NCHW input, got {shape:?}"),
        }));
    }
    let reduction = net.config.reduction();
    let (h, w) = (shape[2], shape[3]);
    if h % reduction != 0 || w % reduction != 0 {
        return Err(RadarError::IndivisibleInput { h, w, reduction });
    }
    Ok(net.forward(input, mode)?)
}
