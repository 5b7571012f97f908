//! Center-based detection head: per-class sigmoid heatmaps whose peaks mark
//! object centers, plus dense regression maps read out at those peaks.
//!
//! Layout of the dense outputs (all `(channels, H_bev, W_bev)`):
//!
//! * heatmap — K class channels, sigmoid activated, strictly inside (0,1);
//! * regression — 8 channels `[dx, dy, z, log w, log l, log h, vx, vy]`
//!   (sub-cell offset, height above ground, log-space dimensions, velocity);
//! * rotation — 2 channels `[sin yaw, cos yaw]`, kept as a separate map so
//!   the regression block stays at its 8 metric channels.
//!
//! Training targets paint one axis-aligned Gaussian per object into the
//! object's class channel (elementwise max where Gaussians overlap; the
//! center cell is exactly 1) and define regression/rotation values only at
//! those center cells, selected by a validity mask. The heatmap is trained
//! with the Gaussian focal loss, the dense maps with masked-mean L1
//! (subgradient of |x| at 0 is taken as 0).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, BevGridSpec, Box3D};
use crate::scalar::Scalar;
use crate::tensor::nn::{BatchNorm2d, Conv2d, NamedTensors};
use crate::tensor::{BnMode, Tensor, TensorError};

/// Regression channels: `[dx, dy, z, log w, log l, log h, vx, vy]`.
pub const REG_CHANNELS: usize = 8;
/// Rotation channels: `[sin yaw, cos yaw]`.
pub const ROT_CHANNELS: usize = 2;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("class id {class} outside the {classes}-class head")]
    ClassOutOfRange { class: u32, classes: usize },
    #[error("box {index} has non-positive size {size:?}")]
    BadBoxSize { index: usize, size: [f64; 3] },
    #[error("{0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("detection serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HeadError>;

/// Dense maps produced by one forward pass.
pub struct HeadOutput<S: Scalar> {
    /// `(K, H, W)`, sigmoid-activated.
    pub heatmap: Tensor<S>,
    /// `(8, H, W)`.
    pub regression: Tensor<S>,
    /// `(2, H, W)`.
    pub rotation: Tensor<S>,
}

/// Focal and L1 weighting knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub reg_weight: f64,
    pub rot_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 2.0, beta: 4.0, reg_weight: 0.25, rot_weight: 0.25 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(HeadError::BadConfig(format!(
                "alpha and beta must be positive, got {} / {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Gaussian painting knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetConfig {
    /// Minimum footprint overlap the radius rule must preserve.
    pub min_overlap: f64,
    /// Floor on the integer window radius, in cells.
    pub min_radius: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig { min_overlap: 0.1, min_radius: 1 }
    }
}

/// Radius (in cells) of the target Gaussian for a footprint of
/// `l_cells x w_cells`, such that any candidate center inside the radius
/// keeps at least `min_overlap` IoU with the true footprint. Declared rule:
/// the smallest root of the three quadratic overlap cases (corner inside,
/// corner outside, both shifted), as used by center-based detectors.
pub fn gaussian_radius(l_cells: f64, w_cells: f64, min_overlap: f64) -> f64 {
    let (h, w) = (l_cells, w_cells);

    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let sq1 = (b1 * b1 - 4.0 * c1).max(0.0).sqrt();
    let r1 = (b1 - sq1) / 2.0;

    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let sq2 = (b2 * b2 - 16.0 * c2).max(0.0).sqrt();
    let r2 = (b2 - sq2) / 4.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let sq3 = (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt();
    let r3 = (-b3 + sq3) / (2.0 * a3);

    r1.min(r2).min(r3)
}

/// Training targets for one sample.
pub struct Targets<S: Scalar> {
    /// `(K, H, W)` Gaussian heatmap in `[0, 1]`.
    pub heatmap: Tensor<S>,
    /// `(8, H, W)`; defined only where `reg_mask` is 1.
    pub regression: Tensor<S>,
    /// `(2, H, W)`; defined only where `rot_mask` is 1.
    pub rotation: Tensor<S>,
    /// `(8, H, W)` 0/1 mask (all channels of a valid cell set).
    pub reg_mask: Tensor<S>,
    /// `(2, H, W)` 0/1 mask.
    pub rot_mask: Tensor<S>,
    /// Center cells, one per in-grid object, in input order.
    pub center_cells: Vec<(u32, usize, usize)>,
    /// Number of objects whose center fell inside the grid.
    pub n_objects: usize,
    /// Boxes skipped because their center was outside the grid.
    pub skipped: usize,
}

/// Paint per-object Gaussians and per-center regression targets.
///
/// Out-of-grid centers are skipped and counted. When two objects share a
/// center cell the regression targets of the later box win (input order);
/// the heatmap keeps the max.
pub fn make_targets<S: Scalar>(
    boxes: &[Box3D],
    grid: &BevGridSpec,
    classes: usize,
    cfg: &TargetConfig,
) -> Result<Targets<S>> {
    let (h, w) = (grid.rows(), grid.cols());
    let n = h * w;
    let mut heat = vec![0.0f64; classes * n];
    let mut reg = vec![0.0f64; REG_CHANNELS * n];
    let mut rot = vec![0.0f64; ROT_CHANNELS * n];
    let mut mask = vec![false; n];
    let mut center_cells = Vec::new();
    let mut skipped = 0usize;

    for (index, b) in boxes.iter().enumerate() {
        if b.class_id as usize >= classes {
            return Err(HeadError::ClassOutOfRange { class: b.class_id, classes });
        }
        if b.size.iter().any(|&s| !(s > 0.0)) {
            return Err(HeadError::BadBoxSize { index, size: b.size });
        }
        let Some((row, col)) = grid.cell_index(b.center[0], b.center[1]) else {
            skipped += 1;
            continue;
        };
        let radius = gaussian_radius(b.size[1] / grid.cell, b.size[0] / grid.cell, cfg.min_overlap);
        let r = (radius.floor() as usize).max(cfg.min_radius);
        let sigma = (2.0 * r as f64 + 1.0) / 6.0;
        let k = b.class_id as usize;
        for gr in row.saturating_sub(r)..=(row + r).min(h - 1) {
            for gc in col.saturating_sub(r)..=(col + r).min(w - 1) {
                let dr = gr as f64 - row as f64;
                let dc = gc as f64 - col as f64;
                let v = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
                let cell = &mut heat[k * n + gr * w + gc];
                *cell = cell.max(v);
            }
        }
        heat[k * n + row * w + col] = 1.0;

        let cell = row * w + col;
        let targets = [
            (b.center[0] - grid.x_min) / grid.cell - col as f64,
            (b.center[1] - grid.y_min) / grid.cell - row as f64,
            b.center[2],
            b.size[0].ln(),
            b.size[1].ln(),
            b.size[2].ln(),
            b.velocity[0],
            b.velocity[1],
        ];
        for (ch, &t) in targets.iter().enumerate() {
            reg[ch * n + cell] = t;
        }
        rot[cell] = b.yaw.sin();
        rot[n + cell] = b.yaw.cos();
        mask[cell] = true;
        center_cells.push((b.class_id, row, col));
    }

    let to_tensor = |shape: &[usize], data: Vec<f64>| -> Result<Tensor<S>> {
        Ok(Tensor::from_vec(
            shape,
            data.into_iter().map(S::from_f64_lossy).collect(),
        )?)
    };
    let expand_mask = |channels: usize| -> Vec<f64> {
        let mut out = vec![0.0; channels * n];
        for ch in 0..channels {
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    out[ch * n + i] = 1.0;
                }
            }
        }
        out
    };

    Ok(Targets {
        heatmap: to_tensor(&[classes, h, w], heat)?,
        regression: to_tensor(&[REG_CHANNELS, h, w], reg)?,
        rotation: to_tensor(&[ROT_CHANNELS, h, w], rot)?,
        reg_mask: to_tensor(&[REG_CHANNELS, h, w], expand_mask(REG_CHANNELS))?,
        rot_mask: to_tensor(&[ROT_CHANNELS, h, w], expand_mask(ROT_CHANNELS))?,
        n_objects: center_cells.len(),
        center_cells,
        skipped,
    })
}

/// Gaussian focal loss over a sigmoid heatmap:
/// at cells where the target is exactly 1, `-(1-p)^alpha * ln p`;
/// elsewhere `-(1-y)^beta * p^alpha * ln(1-p)`; summed and divided by the
/// object count (by 1 when the frame is empty). Predictions are clamped to
/// `[1e-6, 1 - 1e-6]` before the logs; inside the clamp the gradient matches
/// finite differences of the exact expression.
pub fn gaussian_focal_loss<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    n_objects: usize,
    cfg: &LossConfig,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    if pred.shape() != target.shape() {
        return Err(HeadError::Tensor(TensorError::ShapeMismatch {
            op: "gaussian_focal_loss",
            detail: format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        }));
    }
    let pos_mask: Vec<S> = target
        .values()
        .iter()
        .map(|&y| if y.to_f64_lossy() == 1.0 { S::one() } else { S::zero() })
        .collect();
    let pos_mask = Tensor::from_vec(pred.shape(), pos_mask)?;

    let p = pred.clamp(1e-6, 1.0 - 1e-6)?;
    let pos_term = p
        .rsub_scalar(1.0)?
        .pow_scalar(cfg.alpha)?
        .mul(&p.log()?)?
        .mul(&pos_mask)?;
    let neg_term = target
        .rsub_scalar(1.0)?
        .pow_scalar(cfg.beta)?
        .mul(&p.pow_scalar(cfg.alpha)?)?
        .mul(&p.rsub_scalar(1.0)?.log()?)?;
    let total = pos_term.sum_all()?.add(&neg_term.sum_all()?)?;
    Ok(total.neg()?.scale(1.0 / n_objects.max(1) as f64)?)
}

/// Mean absolute error over the masked entries (mask is 0/1 per entry,
/// already expanded across channels). Defined as constant 0 when the mask is
/// empty.
pub fn regression_l1_loss<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    mask: &Tensor<S>,
) -> Result<Tensor<S>> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(HeadError::Tensor(TensorError::ShapeMismatch {
            op: "regression_l1_loss",
            detail: format!(
                "pred {:?} vs target {:?} vs mask {:?}",
                pred.shape(),
                target.shape(),
                mask.shape()
            ),
        }));
    }
    let count: f64 = mask.values().iter().map(|&m| m.to_f64_lossy()).sum();
    if count == 0.0 {
        return Ok(Tensor::scalar(S::zero()));
    }
    let diff = pred.sub(target)?.abs()?.mul(mask)?;
    Ok(diff.sum_all()?.scale(1.0 / count)?)
}

/// The head network: a shared 3x3 conv + batchnorm + relu trunk, then one
/// 1x1 conv per output map. The heatmap conv's bias starts at
/// `-ln((1 - 0.1) / 0.1)` so the initial sigmoid output sits near 0.1
/// everywhere (stable focal-loss start).
pub struct DetectionHeadParams<S: Scalar> {
    pub trunk: Conv2d<S>,
    pub trunk_bn: BatchNorm2d<S>,
    pub heatmap: Conv2d<S>,
    pub regression: Conv2d<S>,
    pub rotation: Conv2d<S>,
    pub classes: usize,
}

impl<S: Scalar> DetectionHeadParams<S> {
    pub fn new(
        in_channels: usize,
        trunk_channels: usize,
        classes: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let heatmap = Conv2d::new(trunk_channels, classes, 1, 1, 0, true, rng)?;
        let prior = -((1.0f64 - 0.1) / 0.1).ln();
        if let Some(b) = &heatmap.bias {
            b.load_data(&vec![S::from_f64_lossy(prior); classes])?;
        }
        Ok(DetectionHeadParams {
            trunk: Conv2d::new(in_channels, trunk_channels, 3, 1, 1, false, rng)?,
            trunk_bn: BatchNorm2d::new(trunk_channels)?,
            heatmap,
            regression: Conv2d::new(trunk_channels, REG_CHANNELS, 1, 1, 0, true, rng)?,
            rotation: Conv2d::new(trunk_channels, ROT_CHANNELS, 1, 1, 0, true, rng)?,
            classes,
        })
    }

    /// Forward over a `(C, H, W)` BEV feature map.
    pub fn forward(&self, bev: &Tensor<S>, mode: BnMode) -> Result<HeadOutput<S>> {
        let s = bev.shape().to_vec();
        if s.len() != 3 {
            return Err(HeadError::Tensor(TensorError::ShapeMismatch {
                op: "detection_head",
                detail: format!("need (C, H, W) input, got {s:?}"),
            }));
        }
        let (h, w) = (s[1], s[2]);
        let x = bev.reshape(&[1, s[0], h, w])?;
        let t = self.trunk_bn.forward(&self.trunk.forward(&x)?, mode)?.relu()?;
        let heat = self
            .heatmap
            .forward(&t)?
            .sigmoid()?
            .reshape(&[self.classes, h, w])?;
        let reg = self.regression.forward(&t)?.reshape(&[REG_CHANNELS, h, w])?;
        let rot = self.rotation.forward(&t)?.reshape(&[ROT_CHANNELS, h, w])?;
        Ok(HeadOutput { heatmap: heat, regression: reg, rotation: rot })
    }

    pub fn named_tensors(&self, prefix: &str) -> NamedTensors<S> {
        let mut out = self.trunk.named_tensors(&format!("{prefix}.trunk"));
        out.extend(self.trunk_bn.named_tensors(&format!("{prefix}.trunk_bn")));
        out.extend(self.heatmap.named_tensors(&format!("{prefix}.heatmap")));
        out.extend(self.regression.named_tensors(&format!("{prefix}.regression")));
        out.extend(self.rotation.named_tensors(&format!("{prefix}.rotation")));
        out
    }
}

/// Decoding knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub max_dets: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_thresh: 0.1, max_dets: 128 }
    }
}

/// Decoded detections for one sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub boxes: Vec<Box3D>,
}

/// Read boxes out of dense head outputs: a cell is a peak when it equals
/// the max of its 3x3 neighborhood in its class channel and clears the score
/// threshold; the top `max_dets` peaks by score survive (no rotated NMS).
pub fn decode<S: Scalar>(
    output: &HeadOutput<S>,
    grid: &BevGridSpec,
    cfg: &DecodeConfig,
    class_attributes: Option<&[u32]>,
) -> Result<DetectionSet> {
    let hs = output.heatmap.shape().to_vec();
    let (classes, h, w) = (hs[0], hs[1], hs[2]);
    if h != grid.rows() || w != grid.cols() {
        return Err(HeadError::Tensor(TensorError::ShapeMismatch {
            op: "decode",
            detail: format!("heatmap {hs:?} vs grid {}x{}", grid.rows(), grid.cols()),
        }));
    }
    let n = h * w;
    let heat = output.heatmap.values();
    let reg = output.regression.values();
    let rot = output.rotation.values();

    // (score, class, row, col), deterministic order.
    let mut peaks: Vec<(f64, usize, usize, usize)> = Vec::new();
    for k in 0..classes {
        let plane = &heat[k * n..(k + 1) * n];
        for row in 0..h {
            for col in 0..w {
                let v = plane[row * w + col].to_f64_lossy();
                if v <= cfg.score_thresh {
                    continue;
                }
                let mut is_peak = true;
                'nb: for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (row as i64 + dr, col as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        if plane[nr as usize * w + nc as usize].to_f64_lossy() > v {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if is_peak {
                    peaks.push((v, k, row, col));
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    peaks.truncate(cfg.max_dets);

    let at = |map: &[S], ch: usize, row: usize, col: usize| {
        map[ch * n + row * w + col].to_f64_lossy()
    };
    let boxes = peaks
        .into_iter()
        .map(|(score, k, row, col)| {
            let dx = at(&reg, 0, row, col);
            let dy = at(&reg, 1, row, col);
            Box3D {
                center: [
                    grid.x_min + (col as f64 + dx) * grid.cell,
                    grid.y_min + (row as f64 + dy) * grid.cell,
                    at(&reg, 2, row, col),
                ],
                size: [
                    at(&reg, 3, row, col).exp(),
                    at(&reg, 4, row, col).exp(),
                    at(&reg, 5, row, col).exp(),
                ],
                yaw: normalize_angle(at(&rot, 0, row, col).atan2(at(&rot, 1, row, col))),
                velocity: [at(&reg, 6, row, col), at(&reg, 7, row, col)],
                class_id: k as u32,
                attribute_id: class_attributes.map_or(0, |a| a[k]),
                score: Some(score),
            }
        })
        .collect();
    Ok(DetectionSet { boxes })
}

/// One detection as serialized to JSON lines.
#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    class: String,
    #[serde(flatten)]
    boxed: Box3D,
}

/// Serialize one sample's detections, one JSON object per line, carrying
/// every box field plus the class name.
pub fn to_jsonl(set: &DetectionSet, class_names: &[String]) -> Result<String> {
    let mut out = String::new();
    for b in &set.boxes {
        let class = class_names
            .get(b.class_id as usize)
            .cloned()
            .unwrap_or_else(|| format!("class_{}", b.class_id));
        out.push_str(&serde_json::to_string(&DetectionRecord { class, boxed: b.clone() })?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse detections written by [`to_jsonl`].
pub fn from_jsonl(text: &str) -> Result<DetectionSet> {
    let mut boxes = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(line)?;
        boxes.push(rec.boxed);
    }
    Ok(DetectionSet { boxes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> BevGridSpec {
        BevGridSpec::new(-16.0, 16.0, -16.0, 16.0, 0.5).unwrap()
    }

    fn car_at(x: f64, y: f64, yaw: f64, vx: f64, vy: f64) -> Box3D {
        Box3D {
            center: [x, y, 0.8],
            size: [1.9, 4.5, 1.6],
            yaw,
            velocity: [vx, vy],
            class_id: 0,
            attribute_id: 0,
            score: None,
        }
    }

    #[test]
    fn no_boxes_give_empty_targets() {
        let t = make_targets::<f64>(&[], &grid(), 3, &TargetConfig::default()).unwrap();
        assert_eq!(t.n_objects, 0);
        assert!(t.heatmap.values().iter().all(|&v| v == 0.0));
        assert!(t.reg_mask.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_box_peaks_at_one_with_symmetric_neighbors() {
        let g = grid();
        // Cell centers sit at -0.25/+0.25 offsets; (0.25, 0.25) is exact.
        let b = car_at(0.25, 0.25, 0.3, 0.0, 0.0);
        let t = make_targets::<f64>(&[b], &g, 1, &TargetConfig::default()).unwrap();
        let (row, col) = g.cell_index(0.25, 0.25).unwrap();
        let v = t.heatmap.values();
        let w = g.cols();
        assert_eq!(v[row * w + col], 1.0);
        let neighbors = [
            v[(row - 1) * w + col],
            v[(row + 1) * w + col],
            v[row * w + col - 1],
            v[row * w + col + 1],
        ];
        assert!(neighbors.iter().all(|&x| x > 0.0 && x < 1.0));
        for n in &neighbors[1..] {
            assert!((n - neighbors[0]).abs() < 1e-12, "4-neighbors equal by symmetry");
        }
        // Monotone decay along the axes away from the peak.
        for step in 1..4 {
            assert!(v[row * w + col + step] <= v[row * w + col + step - 1]);
            assert!(v[(row + step) * w + col] <= v[(row + step - 1) * w + col]);
        }
    }

    #[test]
    fn overlapping_gaussians_take_cellwise_max() {
        let g = grid();
        let a = car_at(0.25, 0.25, 0.0, 0.0, 0.0);
        let b = car_at(2.25, 0.25, 0.0, 0.0, 0.0);
        let both = make_targets::<f64>(&[a.clone(), b.clone()], &g, 1, &TargetConfig::default())
            .unwrap();
        let only_a = make_targets::<f64>(&[a], &g, 1, &TargetConfig::default()).unwrap();
        let only_b = make_targets::<f64>(&[b], &g, 1, &TargetConfig::default()).unwrap();
        let (va, vb, vboth) = (
            only_a.heatmap.values(),
            only_b.heatmap.values(),
            both.heatmap.values(),
        );
        for i in 0..va.len() {
            assert!((vboth[i] - va[i].max(vb[i])).abs() < 1e-12);
        }
        assert_eq!(both.n_objects, 2);
    }

    #[test]
    fn out_of_grid_boxes_are_skipped_and_counted() {
        let g = grid();
        let t = make_targets::<f64>(
            &[car_at(0.25, 0.25, 0.0, 0.0, 0.0), car_at(100.0, 0.0, 0.0, 0.0, 0.0)],
            &g,
            1,
            &TargetConfig::default(),
        )
        .unwrap();
        assert_eq!(t.n_objects, 1);
        assert_eq!(t.skipped, 1);
    }

    #[test]
    fn focal_loss_matches_hand_computed_single_cell() {
        let y = Tensor::from_vec(&[1, 1, 1], vec![1.0f64]).unwrap();
        let p = Tensor::from_vec(&[1, 1, 1], vec![0.5f64]).unwrap();
        let loss = gaussian_focal_loss(&p, &y, 1, &LossConfig::default()).unwrap();
        let expect = 0.25 * std::f64::consts::LN_2;
        assert!((loss.item().unwrap() - expect).abs() < 1e-9, "{}", loss.item().unwrap());
    }

    #[test]
    fn focal_loss_is_near_zero_for_perfect_prediction() {
        let g = grid();
        let t = make_targets::<f64>(
            &[car_at(0.25, 0.25, 0.0, 0.0, 0.0)],
            &g,
            1,
            &TargetConfig::default(),
        )
        .unwrap();
        // Prediction: 1-eps at the peak, eps at exact zeros, target value
        // elsewhere (the Gaussian ring contributes (1-y)^beta terms only).
        let pred: Vec<f64> = t
            .heatmap
            .values()
            .iter()
            .map(|&y| if y == 1.0 { 1.0 - 1e-6 } else { 1e-6f64.max(y * 0.0) })
            .collect();
        let p = Tensor::from_vec(t.heatmap.shape(), pred).unwrap();
        let loss = gaussian_focal_loss(&p, &t.heatmap, t.n_objects, &LossConfig::default())
            .unwrap();
        assert!(loss.item().unwrap() < 1e-4, "{}", loss.item().unwrap());
    }

    #[test]
    fn focal_loss_gradient_matches_finite_differences() {
        let y = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.6, 0.0, 0.2]).unwrap();
        let base: Vec<f64> = vec![0.7, 0.3, 0.2, 0.4];
        let cfg = LossConfig::default();
        let p = Tensor::leaf(&[1, 2, 2], base.clone()).unwrap();
        let loss = gaussian_focal_loss(&p, &y, 1, &cfg).unwrap();
        loss.backward().unwrap();
        let grad = p.grad().unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let lp = gaussian_focal_loss(&Tensor::from_vec(&[1, 2, 2], plus).unwrap(), &y, 1, &cfg)
                .unwrap()
                .item()
                .unwrap();
            let lm =
                gaussian_focal_loss(&Tensor::from_vec(&[1, 2, 2], minus).unwrap(), &y, 1, &cfg)
                    .unwrap()
                    .item()
                    .unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "channel {i}: autodiff {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn l1_loss_masked_mean_and_subgradient() {
        let n = 4usize; // 2x2 grid, 8 channels
        let target = Tensor::<f64>::from_vec(&[8, 2, 2], vec![0.0; 8 * n]).unwrap();
        let mut mask_v = vec![0.0; 8 * n];
        for ch in 0..8 {
            mask_v[ch * n] = 1.0; // cell (0,0) valid
        }
        let mask = Tensor::from_vec(&[8, 2, 2], mask_v).unwrap();

        let mut pred_v = vec![0.0; 8 * n];
        pred_v[0] = 2.0; // channel 0 off by 2 at the valid cell
        let pred = Tensor::leaf(&[8, 2, 2], pred_v).unwrap();
        let loss = regression_l1_loss(&pred, &target, &mask).unwrap();
        assert!((loss.item().unwrap() - 0.25).abs() < 1e-12, "2 / 8 entries");
        loss.backward().unwrap();
        let g = pred.grad().unwrap();
        assert!((g[0] - 1.0 / 8.0).abs() < 1e-12, "sign / count");
        assert_eq!(g[1], 0.0, "masked-out entries get no gradient");

        let equal = regression_l1_loss(&target, &target, &mask).unwrap();
        assert_eq!(equal.item().unwrap(), 0.0);

        let empty = Tensor::from_vec(&[8, 2, 2], vec![0.0; 8 * n]).unwrap();
        let zero = regression_l1_loss(&pred, &target, &empty).unwrap();
        assert_eq!(zero.item().unwrap(), 0.0, "empty mask defined as zero");
    }

    #[test]
    fn decode_round_trips_targets() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let boxes: Vec<Box3D> = (0..6)
            .map(|i| {
                let x = -12.0 + 4.5 * i as f64 + rng.gen_range(-0.2..0.2);
                let y = rng.gen_range(-10.0..10.0);
                let mut b = car_at(x, y, rng.gen_range(-3.0..3.0), 0.0, 0.0);
                b.yaw = normalize_angle(b.yaw);
                b.velocity = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
                b.class_id = i % 3;
                b
            })
            .collect();
        let t = make_targets::<f64>(&boxes, &g, 3, &TargetConfig::default()).unwrap();
        let out = HeadOutput {
            heatmap: t.heatmap.clone(),
            regression: t.regression.clone(),
            rotation: t.rotation.clone(),
        };
        let dets = decode(&out, &g, &DecodeConfig { score_thresh: 0.99, max_dets: 32 }, None)
            .unwrap();
        assert_eq!(dets.boxes.len(), boxes.len());
        for b in &boxes {
            let hit = dets
                .boxes
                .iter()
                .filter(|d| d.class_id == b.class_id)
                .min_by(|a, c| a.bev_distance(b).total_cmp(&c.bev_distance(b)))
                .unwrap();
            assert!(hit.bev_distance(b) < g.cell / 2.0, "position within half a cell");
            for i in 0..3 {
                assert!((hit.size[i] - b.size[i]).abs() < 1e-3);
                assert!((hit.center[i] - b.center[i]).abs() < g.cell / 2.0);
            }
            assert!((normalize_angle(hit.yaw - b.yaw)).abs() < 1e-3);
            assert!((hit.velocity[0] - b.velocity[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_empty_heatmap_and_max_dets() {
        let g = BevGridSpec::new(-4.0, 4.0, -4.0, 4.0, 1.0).unwrap();
        let zeros = HeadOutput {
            heatmap: Tensor::from_vec(&[1, 8, 8], vec![0.0f64; 64]).unwrap(),
            regression: Tensor::from_vec(&[8, 8, 8], vec![0.0; 8 * 64]).unwrap(),
            rotation: Tensor::from_vec(&[2, 8, 8], vec![0.0; 2 * 64]).unwrap(),
        };
        let dets = decode(&zeros, &g, &DecodeConfig::default(), None).unwrap();
        assert!(dets.boxes.is_empty());

        let mut heat = vec![0.0f64; 64];
        heat[2 * 8 + 2] = 0.9;
        heat[5 * 8 + 5] = 0.6;
        let mut rot = vec![0.0; 2 * 64];
        for v in rot.iter_mut().skip(64) {
            *v = 1.0; // cos = 1 so yaw decodes to 0
        }
        let two = HeadOutput {
            heatmap: Tensor::from_vec(&[1, 8, 8], heat).unwrap(),
            regression: Tensor::from_vec(&[8, 8, 8], vec![0.0; 8 * 64]).unwrap(),
            rotation: Tensor::from_vec(&[2, 8, 8], rot).unwrap(),
        };
        let best = decode(&two, &g, &DecodeConfig { score_thresh: 0.1, max_dets: 1 }, None)
            .unwrap();
        assert_eq!(best.boxes.len(), 1);
        assert!((best.boxes[0].score.unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn head_forward_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = DetectionHeadParams::<f64>::new(6, 8, 4, &mut rng).unwrap();
        let bev = Tensor::from_vec(&[6, 8, 8], vec![0.1; 6 * 64]).unwrap();
        let out = head.forward(&bev, BnMode::Eval).unwrap();
        assert_eq!(out.heatmap.shape(), &[4, 8, 8]);
        assert_eq!(out.regression.shape(), &[8, 8, 8]);
        assert_eq!(out.rotation.shape(), &[2, 8, 8]);
        assert!(out
            .heatmap
            .values()
            .iter()
            .all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn jsonl_round_trip_keeps_all_fields() {
        let set = DetectionSet {
            boxes: vec![Box3D {
                center: [1.0, -2.0, 0.5],
                size: [1.9, 4.5, 1.7],
                yaw: 0.7,
                velocity: [3.0, -1.0],
                class_id: 1,
                attribute_id: 2,
                score: Some(0.83),
            }],
        };
        let names = vec!["car".to_string(), "truck".to_string()];
        let text = to_jsonl(&set, &names).unwrap();
        assert!(text.contains("\"class\":\"truck\""));
        let back = from_jsonl(&text).unwrap();
        assert_eq!(back, set);
    }
}
