//! Detection evaluation: center-distance matching, per-class average
//! precision at several distance thresholds, true-positive error metrics,
//! and the composite detection score.
//!
//! The conventions follow the public benchmark exactly where it publishes
//! them (external-standard constants, kept together in [`EvalConfig`]):
//! matches are greedy in descending score order against the nearest
//! unmatched same-class ground-truth box strictly inside the distance
//! threshold; AP is the 101-point interpolated precision–recall area with
//! recall and precision floors of 0.1, normalized by the remaining 0.81
//! area; translation/scale/orientation/velocity/attribute errors are
//! averaged over the matches at the 2 m threshold, defaulting to the worst
//! value 1.0 for classes that were never matched; the composite score is
//! `(5·mAP + Σ (1 − min(1, err))) / 10`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, Box3D};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    BadConfig(String),
    #[error("prediction {index} in its frame carries no score")]
    MissingScore { index: usize },
    #[error("box class {class} outside the {classes}-class evaluation")]
    ClassOutOfRange { class: u32, classes: usize },
    #[error("report serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Evaluation constants. The defaults are the public benchmark's published
/// values; they live in one block so any deviation is visible at a glance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// BEV center-distance match thresholds in meters, ascending.
    pub thresholds: Vec<f64>,
    /// Threshold whose matches feed the true-positive error metrics.
    pub tp_threshold: f64,
    /// Class names; box `class_id` indexes into this list.
    pub class_names: Vec<String>,
    /// Recall below this contributes nothing to AP.
    pub recall_floor: f64,
    /// Precision is measured above this floor.
    pub precision_floor: f64,
    /// Boxes (either kind) farther than this from the ego origin are
    /// dropped before evaluation. One global value for every class.
    pub range_filter: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            class_names: [
                "car",
                "truck",
                "bus",
                "trailer",
                "construction_vehicle",
                "pedestrian",
                "motorcycle",
                "bicycle",
                "traffic_cone",
                "barrier",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            recall_floor: 0.1,
            precision_floor: 0.1,
            range_filter: 50.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(MetricsError::BadConfig("no match thresholds".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) || self.thresholds[0] <= 0.0 {
            return Err(MetricsError::BadConfig(format!(
                "thresholds must be positive and strictly ascending, got {:?}",
                self.thresholds
            )));
        }
        if self.tp_threshold <= 0.0 {
            return Err(MetricsError::BadConfig("tp_threshold must be positive".into()));
        }
        if self.class_names.is_empty() {
            return Err(MetricsError::BadConfig("empty class list".into()));
        }
        for f in [self.recall_floor, self.precision_floor] {
            if !(0.0..1.0).contains(&f) {
                return Err(MetricsError::BadConfig(format!("floor {f} outside [0, 1)")));
            }
        }
        if self.range_filter <= 0.0 {
            return Err(MetricsError::BadConfig("range_filter must be positive".into()));
        }
        Ok(())
    }
}

/// Result of matching one frame at one threshold. Indices refer to the
/// caller's slices.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// `(prediction, ground truth)` pairs in the order they were claimed.
    pub pairs: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

/// Greedily match predictions to ground truth within one frame.
///
/// Predictions are visited in descending score order (equal scores keep
/// their input order); each claims the nearest unmatched ground-truth box
/// of its own class strictly closer than `threshold` in BEV center
/// distance (nearest ties go to the lowest ground-truth index). Unclaimed
/// predictions are false positives, unclaimed ground truth false negatives.
pub fn match_frame(preds: &[Box3D], gts: &[Box3D], threshold: f64) -> Result<FrameMatch> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    for (i, p) in preds.iter().enumerate() {
        if p.score.is_none() {
            return Err(MetricsError::MissingScore { index: i });
        }
    }
    order.sort_by(|&a, &b| preds[b].score.unwrap().total_cmp(&preds[a].score.unwrap()));

    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let mut false_positives = Vec::new();
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.class_id != p.class_id {
                continue;
            }
            let d = p.bev_distance(g);
            if d < threshold && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                taken[gi] = true;
                pairs.push((pi, gi));
            }
            None => false_positives.push(pi),
        }
    }
    let false_negatives = (0..gts.len()).filter(|&gi| !taken[gi]).collect();
    Ok(FrameMatch { pairs, false_positives, false_negatives })
}

/// Precision of the raw cumulative curve, linearly interpolated at 101
/// evenly spaced recall levels. Recall beyond the last achieved level maps
/// to precision 0; where several raw points share one recall the last
/// (lowest-precision) point wins.
fn interpolate_precision(rec: &[f64], prec: &[f64]) -> [f64; 101] {
    let mut out = [0.0f64; 101];
    if rec.is_empty() {
        return out;
    }
    let last = *rec.last().unwrap();
    for (k, slot) in out.iter_mut().enumerate() {
        let r = k as f64 / 100.0;
        if r > last {
            break; // remaining samples stay 0
        }
        // Largest index whose recall is <= r.
        let j = match rec.partition_point(|&x| x <= r) {
            0 => {
                *slot = prec[0];
                continue;
            }
            p => p - 1,
        };
        *slot = if rec[j] == r || j + 1 == rec.len() {
            prec[j]
        } else {
            let t = (r - rec[j]) / (rec[j + 1] - rec[j]);
            prec[j] + (prec[j + 1] - prec[j]) * t
        };
    }
    out
}

/// Average precision for one class at one threshold.
///
/// `entries` are `(score, matched)` over the whole dataset; `npos` is the
/// ground-truth count for the class. Returns `None` when the class never
/// appears in the ground truth (undefined, excluded from means).
pub fn average_precision(entries: &[(f64, bool)], npos: usize, cfg: &EvalConfig) -> Option<f64> {
    if npos == 0 {
        return None;
    }
    if entries.is_empty() {
        return Some(0.0);
    }
    let mut sorted: Vec<&(f64, bool)> = entries.iter().collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0)); // stable: ties keep input order

    let mut rec = Vec::with_capacity(sorted.len());
    let mut prec = Vec::with_capacity(sorted.len());
    let mut tp = 0usize;
    for (i, &&(_, matched)) in sorted.iter().enumerate() {
        if matched {
            tp += 1;
        }
        rec.push(tp as f64 / npos as f64);
        prec.push(tp as f64 / (i + 1) as f64);
    }
    let p101 = interpolate_precision(&rec, &prec);

    let start = (100.0 * cfg.recall_floor).round() as usize + 1;
    let samples = 101 - start;
    let area: f64 = p101[start..]
        .iter()
        .map(|&p| (p - cfg.precision_floor).max(0.0))
        .sum();
    Some(area / (samples as f64 * (1.0 - cfg.precision_floor)))
}

/// The five true-positive error means. All live in `[0, 1]` after the
/// composite score's `min(1, ·)` clamp except translation and velocity,
/// which are raw meters and meters/second here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    /// BEV center distance, meters.
    pub ate: f64,
    /// 1 − IoU of the two boxes after aligning center and heading.
    pub ase: f64,
    /// Smallest absolute yaw difference, radians.
    pub aoe: f64,
    /// L2 ground-velocity error, m/s.
    pub ave: f64,
    /// 1 − attribute accuracy.
    pub aae: f64,
}

impl TpErrors {
    /// Convention for classes with ground truth but no matches.
    pub const WORST: TpErrors = TpErrors { ate: 1.0, ase: 1.0, aoe: 1.0, ave: 1.0, aae: 1.0 };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// Per-match errors averaged over `(prediction, ground truth)` pairs;
/// [`TpErrors::WORST`] when there are no pairs.
pub fn tp_errors<'a>(pairs: &[(&'a Box3D, &'a Box3D)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mut sum = [0.0f64; 5];
    for (p, g) in pairs {
        sum[0] += p.bev_distance(g);
        sum[1] += 1.0 - aligned_iou(p.size, g.size);
        sum[2] += normalize_angle(p.yaw - g.yaw).abs();
        sum[3] += ((p.velocity[0] - g.velocity[0]).powi(2)
            + (p.velocity[1] - g.velocity[1]).powi(2))
        .sqrt();
        sum[4] += if p.attribute_id == g.attribute_id { 0.0 } else { 1.0 };
    }
    TpErrors {
        ate: sum[0] / n,
        ase: sum[1] / n,
        aoe: sum[2] / n,
        ave: sum[3] / n,
        aae: sum[4] / n,
    }
}

/// 3D IoU of two boxes sharing center and heading: the size-only overlap.
fn aligned_iou(a: [f64; 3], b: [f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    inter / (va + vb - inter)
}

/// Composite detection score:
/// `(5·mAP + Σ over the five error means of (1 − min(1, err))) / 10`.
pub fn nds(map: f64, tp_means: [f64; 5]) -> f64 {
    let recovered: f64 = tp_means.iter().map(|&m| 1.0 - m.min(1.0)).sum();
    (5.0 * map + recovered) / 10.0
}

/// Case-insensitive substring test used for scene filtering; the empty
/// term keeps everything.
pub fn matches_description(description: &str, term: &str) -> bool {
    term.is_empty() || description.to_lowercase().contains(&term.to_lowercase())
}

/// Indices of the descriptions matching `term` (see [`matches_description`]).
pub fn filter_scenes(descriptions: &[String], term: &str) -> Vec<usize> {
    descriptions
        .iter()
        .enumerate()
        .filter(|(_, d)| matches_description(d, term))
        .map(|(i, _)| i)
        .collect()
}

/// One frame to evaluate: detector output vs annotation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalFrame {
    pub predictions: Vec<Box3D>,
    pub ground_truth: Vec<Box3D>,
}

/// Per-class section of the report. Only classes that appear in the
/// ground truth are listed (AP is undefined for the rest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub gt_count: usize,
    pub pred_count: usize,
    /// One AP per threshold, in `thresholds` order.
    pub ap: Vec<f64>,
    pub tp_errors: TpErrors,
    /// Matches at the TP-metric threshold.
    pub matches: usize,
}

/// Aggregate match counts at one threshold, summed over classes and frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Full evaluation output. `nds` always equals
/// `nds(map, [mate, mase, maoe, mave, maae])` recomputed from the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub classes: Vec<ClassReport>,
    /// Configured classes that never appeared in the ground truth.
    pub skipped_classes: Vec<String>,
    pub counts: Vec<ThresholdCounts>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub nds: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Aligned-column text table: one row per evaluated class, then the
    /// dataset means.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<22}{:>6}{:>6}", "class", "gt", "pred"));
        for t in &self.thresholds {
            out.push_str(&format!("{:>9}", format!("AP@{t:.1}")));
        }
        for h in ["ATE", "ASE", "AOE", "AVE", "AAE"] {
            out.push_str(&format!("{h:>7}"));
        }
        out.push('\n');
        for c in &self.classes {
            out.push_str(&format!("{:<22}{:>6}{:>6}", c.name, c.gt_count, c.pred_count));
            for ap in &c.ap {
                out.push_str(&format!("{ap:>9.3}"));
            }
            for e in c.tp_errors.as_array() {
                out.push_str(&format!("{e:>7.3}"));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "mAP {:.3}  NDS {:.3}  mATE {:.3}  mASE {:.3}  mAOE {:.3}  mAVE {:.3}  mAAE {:.3}\n",
            self.map, self.nds, self.mate, self.mase, self.maoe, self.mave, self.maae
        ));
        out
    }
}

/// Evaluate a dataset of frames. Matching is per frame and pure; the final
/// aggregation is a single deterministic reduce in frame order.
pub fn evaluate(frames: &[EvalFrame], cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let k = cfg.class_names.len();
    let nt = cfg.thresholds.len();
    let tp_index = cfg
        .thresholds
        .iter()
        .position(|&t| t == cfg.tp_threshold);

    let mut npos = vec![0usize; k];
    let mut pred_count = vec![0usize; k];
    // entries[class][threshold] -> (score, matched), accumulated in frame order.
    let mut entries: Vec<Vec<Vec<(f64, bool)>>> = vec![vec![Vec::new(); nt]; k];
    let mut pairs_at_tp: Vec<Vec<(Box3D, Box3D)>> = vec![Vec::new(); k];
    let mut counts: Vec<ThresholdCounts> = cfg
        .thresholds
        .iter()
        .map(|&t| ThresholdCounts {
            threshold: t,
            true_positives: 0,
            false_positives: 0,
            false_negatives: 0,
        })
        .collect();

    let in_range =
        |b: &Box3D| (b.center[0] * b.center[0] + b.center[1] * b.center[1]).sqrt() <= cfg.range_filter;
    for frame in frames {
        for b in frame.predictions.iter().chain(frame.ground_truth.iter()) {
            if b.class_id as usize >= k {
                return Err(MetricsError::ClassOutOfRange { class: b.class_id, classes: k });
            }
        }
        let gts: Vec<Box3D> = frame.ground_truth.iter().filter(|b| in_range(b)).cloned().collect();
        let preds: Vec<Box3D> = frame.predictions.iter().filter(|b| in_range(b)).cloned().collect();
        for g in &gts {
            npos[g.class_id as usize] += 1;
        }
        for p in &preds {
            pred_count[p.class_id as usize] += 1;
        }

        let mut collect_tp_pairs = |m: &FrameMatch| {
            for &(pi, gi) in &m.pairs {
                let class = preds[pi].class_id as usize;
                pairs_at_tp[class].push((preds[pi].clone(), gts[gi].clone()));
            }
        };
        for (ti, &th) in cfg.thresholds.iter().enumerate() {
            let m = match_frame(&preds, &gts, th)?;
            for &(pi, _) in &m.pairs {
                entries[preds[pi].class_id as usize][ti].push((preds[pi].score.unwrap(), true));
            }
            for &pi in &m.false_positives {
                entries[preds[pi].class_id as usize][ti].push((preds[pi].score.unwrap(), false));
            }
            counts[ti].true_positives += m.pairs.len();
            counts[ti].false_positives += m.false_positives.len();
            counts[ti].false_negatives += m.false_negatives.len();
            if tp_index == Some(ti) {
                collect_tp_pairs(&m);
            }
        }
        if tp_index.is_none() {
            let m = match_frame(&preds, &gts, cfg.tp_threshold)?;
            collect_tp_pairs(&m);
        }
    }

    let mut classes = Vec::new();
    let mut skipped_classes = Vec::new();
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    let mut err_sum = [0.0f64; 5];
    for c in 0..k {
        if npos[c] == 0 {
            skipped_classes.push(cfg.class_names[c].clone());
            continue;
        }
        let ap: Vec<f64> = (0..nt)
            .map(|ti| average_precision(&entries[c][ti], npos[c], cfg).unwrap())
            .collect();
        ap_sum += ap.iter().sum::<f64>();
        ap_n += nt;
        let pairs: Vec<(&Box3D, &Box3D)> =
            pairs_at_tp[c].iter().map(|(p, g)| (p, g)).collect();
        let errs = tp_errors(&pairs);
        for (s, e) in err_sum.iter_mut().zip(errs.as_array()) {
            *s += e;
        }
        classes.push(ClassReport {
            name: cfg.class_names[c].clone(),
            gt_count: npos[c],
            pred_count: pred_count[c],
            ap,
            tp_errors: errs,
            matches: pairs_at_tp[c].len(),
        });
    }

    let evaluated = classes.len();
    let map = if ap_n == 0 { 0.0 } else { ap_sum / ap_n as f64 };
    let means: Vec<f64> = if evaluated == 0 {
        vec![1.0; 5] // nothing to evaluate: worst-case errors, zero mAP
    } else {
        err_sum.iter().map(|s| s / evaluated as f64).collect()
    };
    let tp_means = [means[0], means[1], means[2], means[3], means[4]];
    Ok(MetricsReport {
        thresholds: cfg.thresholds.clone(),
        tp_threshold: cfg.tp_threshold,
        classes,
        skipped_classes,
        counts,
        map,
        mate: tp_means[0],
        mase: tp_means[1],
        maoe: tp_means[2],
        mave: tp_means[3],
        maae: tp_means[4],
        nds: nds(map, tp_means),
    })
}

/// A published scoreline: dataset-level mAP, the five error means, and the
/// composite score reported alongside them. [`nds`] must reproduce each
/// reported value within ±0.002 (the rounding of three-decimal inputs);
/// the rows double as regression fixtures for the formula.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceScoreRow {
    pub label: &'static str,
    pub map: f64,
    /// `[ate, ase, aoe, ave, aae]` means.
    pub tp_errors: [f64; 5],
    pub reported_nds: f64,
}

/// Validation-split and test-split scorelines of public camera-only and
/// radar–camera fusion detectors.
pub const REFERENCE_SCORE_ROWS: &[ReferenceScoreRow] = &[
    ReferenceScoreRow {
        label: "bevdet_camera_only",
        map: 0.350,
        tp_errors: [0.660, 0.275, 0.532, 0.918, 0.260],
        reported_nds: 0.411,
    },
    ReferenceScoreRow {
        label: "bevdet_gridmap_fusion",
        map: 0.429,
        tp_errors: [0.523, 0.272, 0.507, 0.412, 0.183],
        reported_nds: 0.525,
    },
    ReferenceScoreRow {
        label: "bevdet_featurenet_fusion",
        map: 0.434,
        tp_errors: [0.511, 0.270, 0.527, 0.421, 0.182],
        reported_nds: 0.525,
    },
    ReferenceScoreRow {
        label: "bevdepth_camera_only",
        map: 0.359,
        tp_errors: [0.612, 0.269, 0.507, 0.409, 0.201],
        reported_nds: 0.480,
    },
    ReferenceScoreRow {
        label: "bevdepth_featurenet_fusion",
        map: 0.405,
        tp_errors: [0.542, 0.274, 0.512, 0.309, 0.181],
        reported_nds: 0.521,
    },
    ReferenceScoreRow {
        label: "bevstereo_camera_only",
        map: 0.372,
        tp_errors: [0.598, 0.270, 0.438, 0.367, 0.190],
        reported_nds: 0.500,
    },
    ReferenceScoreRow {
        label: "bevstereo_featurenet_fusion",
        map: 0.423,
        tp_errors: [0.504, 0.268, 0.453, 0.270, 0.174],
        reported_nds: 0.545,
    },
    ReferenceScoreRow {
        label: "matrixvt_camera_only",
        map: 0.319,
        tp_errors: [0.669, 0.281, 0.494, 0.912, 0.238],
        reported_nds: 0.400,
    },
    ReferenceScoreRow {
        label: "matrixvt_featurenet_fusion",
        map: 0.386,
        tp_errors: [0.549, 0.275, 0.539, 0.423, 0.193],
        reported_nds: 0.495,
    },
    ReferenceScoreRow {
        label: "centerfusion_test",
        map: 0.326,
        tp_errors: [0.631, 0.261, 0.516, 0.614, 0.115],
        reported_nds: 0.449,
    },
    ReferenceScoreRow {
        label: "craft_test",
        map: 0.411,
        tp_errors: [0.467, 0.268, 0.456, 0.519, 0.114],
        reported_nds: 0.523,
    },
    ReferenceScoreRow {
        label: "transcar_test",
        map: 0.422,
        tp_errors: [0.630, 0.260, 0.383, 0.495, 0.121],
        reported_nds: 0.522,
    },
    ReferenceScoreRow {
        label: "bevdet_featurenet_test",
        map: 0.476,
        tp_errors: [0.444, 0.244, 0.461, 0.439, 0.128],
        reported_nds: 0.567,
    },
];

/// Tolerance for reproducing [`ReferenceScoreRow::reported_nds`]: the
/// published values are rounded to three decimals, so the recomputation
/// can differ by up to half an ulp of each input.
pub const REFERENCE_NDS_TOLERANCE: f64 = 0.002;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(x: f64, y: f64, class: u32) -> Box3D {
        Box3D {
            center: [x, y, 0.8],
            size: [1.9, 4.5, 1.6],
            yaw: 0.2,
            velocity: [1.0, 0.0],
            class_id: class,
            attribute_id: 0,
            score: None,
        }
    }

    fn pred(x: f64, y: f64, class: u32, score: f64) -> Box3D {
        let mut b = gt(x, y, class);
        b.score = Some(score);
        b
    }

    #[test]
    fn exact_overlap_is_one_match() {
        let m = match_frame(&[pred(3.0, 4.0, 0, 0.9)], &[gt(3.0, 4.0, 0)], 2.0).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert!(m.false_positives.is_empty());
        assert!(m.false_negatives.is_empty());
    }

    #[test]
    fn distant_pair_is_fp_plus_fn() {
        let m = match_frame(&[pred(3.0, 0.0, 0, 0.9)], &[gt(0.0, 0.0, 0)], 2.0).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.false_positives, vec![0]);
        assert_eq!(m.false_negatives, vec![0]);
    }

    #[test]
    fn matcher_prefers_nearest_gt_and_higher_score_claims_first() {
        // One pred, two gts: nearest wins.
        let m = match_frame(
            &[pred(0.0, 0.0, 0, 0.9)],
            &[gt(1.5, 0.0, 0), gt(0.4, 0.0, 0)],
            2.0,
        )
        .unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);

        // Two preds, one gt: the higher score claims it even listed second.
        let m = match_frame(
            &[pred(0.3, 0.0, 0, 0.2), pred(0.6, 0.0, 0, 0.8)],
            &[gt(0.0, 0.0, 0)],
            2.0,
        )
        .unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.false_positives, vec![0]);

        // Class mismatch never matches.
        let m = match_frame(&[pred(0.0, 0.0, 1, 0.9)], &[gt(0.0, 0.0, 0)], 2.0).unwrap();
        assert!(m.pairs.is_empty());
    }

    /// Same greedy semantics, written independently: explicit remaining-set
    /// scan with hand-rolled distances.
    fn oracle_match(preds: &[Box3D], gts: &[Box3D], threshold: f64) -> (Vec<(usize, usize)>, usize, usize) {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].score.unwrap().partial_cmp(&preds[a].score.unwrap()).unwrap());
        let mut remaining: Vec<usize> = (0..gts.len()).collect();
        let mut pairs = Vec::new();
        let mut fp = 0;
        for pi in order {
            let p = &preds[pi];
            let mut best_gi = None;
            let mut best_d = threshold;
            for &gi in &remaining {
                if gts[gi].class_id != p.class_id {
                    continue;
                }
                let dx = p.center[0] - gts[gi].center[0];
                let dy = p.center[1] - gts[gi].center[1];
                let d = (dx * dx + dy * dy).sqrt();
                if d < best_d {
                    best_d = d;
                    best_gi = Some(gi);
                }
            }
            match best_gi {
                Some(gi) => {
                    remaining.retain(|&x| x != gi);
                    pairs.push((pi, gi));
                }
                None => fp += 1,
            }
        }
        (pairs, fp, remaining.len())
    }

    #[test]
    fn matcher_agrees_with_independent_oracle_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let gts: Vec<Box3D> = (0..20)
                .map(|_| gt(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(0..3)))
                .collect();
            let preds: Vec<Box3D> = (0..20)
                .map(|_| {
                    pred(
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(0..3),
                        rng.gen_range(0.0..1.0), // distinct w.p. 1
                    )
                })
                .collect();
            for &th in &[0.5, 1.0, 2.0, 4.0] {
                let m = match_frame(&preds, &gts, th).unwrap();
                let (pairs, fp, fneg) = oracle_match(&preds, &gts, th);
                let mut got = m.pairs.clone();
                let mut want = pairs;
                got.sort_unstable();
                want.sort_unstable();
                assert_eq!(got, want);
                assert_eq!(m.false_positives.len(), fp);
                assert_eq!(m.false_negatives.len(), fneg);
            }
        }
    }

    #[test]
    fn matching_is_input_order_deterministic() {
        let preds = vec![pred(0.1, 0.0, 0, 0.8), pred(5.0, 0.0, 0, 0.5), pred(9.9, 0.0, 0, 0.3)];
        let gts = vec![gt(0.0, 0.0, 0), gt(5.2, 0.0, 0), gt(10.0, 0.0, 0)];
        let a = match_frame(&preds, &gts, 2.0).unwrap();
        let b = match_frame(&preds, &gts, 2.0).unwrap();
        assert_eq!(a, b);
        // Distinct scores: permuting predictions permutes indices only.
        let perm = vec![preds[2].clone(), preds[0].clone(), preds[1].clone()];
        let c = match_frame(&perm, &gts, 2.0).unwrap();
        let mut mapped: Vec<(usize, usize)> =
            c.pairs.iter().map(|&(pi, gi)| ([2usize, 0, 1][pi], gi)).collect();
        mapped.sort_unstable();
        let mut orig = a.pairs.clone();
        orig.sort_unstable();
        assert_eq!(mapped, orig);
    }

    #[test]
    fn ap_perfect_and_empty_detectors() {
        let cfg = EvalConfig::default();
        let perfect: Vec<(f64, bool)> = (0..10).map(|i| (1.0 - i as f64 * 0.01, true)).collect();
        let ap = average_precision(&perfect, 10, &cfg).unwrap();
        assert!((ap - 1.0).abs() < 1e-12, "{ap}");
        assert_eq!(average_precision(&[], 5, &cfg), Some(0.0));
        assert_eq!(average_precision(&[(0.9, false)], 0, &cfg), None);
    }

    #[test]
    fn ap_matches_hand_integrated_staircase() {
        // npos = 4; TP(1.0), TP(0.9), FP(0.8), TP(0.7).
        let entries = vec![(1.0, true), (0.9, true), (0.8, false), (0.7, true)];
        let ap = average_precision(&entries, 4, &EvalConfig::default()).unwrap();
        // By hand over the 101 recall samples (floors 0.1/0.1):
        //   r in [0.11, 0.49]: precision 1.0            -> 39 * 0.9
        //   r = 0.50:          precision 2/3            -> 2/3 - 0.1
        //   r in [0.51, 0.74]: line from 2/3 to 0.75    -> sum below
        //   r = 0.75:          precision 0.75           -> 0.65
        let mut expect = 39.0 * 0.9 + (2.0 / 3.0 - 0.1) + 0.65;
        for k in 51..75 {
            let r = k as f64 / 100.0;
            let p = 2.0 / 3.0 + (0.75 - 2.0 / 3.0) * (r - 0.5) / 0.25;
            expect += p - 0.1;
        }
        expect /= 81.0;
        assert!((ap - expect).abs() < 1e-12, "{ap} vs {expect}");
    }

    #[test]
    fn ap_monotonicity_under_edits() {
        let cfg = EvalConfig::default();
        let base = vec![(0.9, true), (0.8, false), (0.6, true), (0.4, false)];
        let ap0 = average_precision(&base, 3, &cfg).unwrap();
        // Appending a false positive at any score never helps.
        for &s in &[0.95, 0.7, 0.1] {
            let mut worse = base.clone();
            worse.push((s, false));
            assert!(average_precision(&worse, 3, &cfg).unwrap() <= ap0 + 1e-12);
        }
        // A new perfectly-scored match (with its new ground-truth box) never hurts.
        let mut better = vec![(1.0, true)];
        better.extend(base.iter().copied());
        assert!(average_precision(&better, 4, &cfg).unwrap() >= ap0 - 1e-12);
    }

    #[test]
    fn tp_errors_zero_for_identical_pairs_and_pi_for_flipped_yaw() {
        let g = gt(1.0, 2.0, 0);
        let mut p = g.clone();
        p.score = Some(0.9);
        let e = tp_errors(&[(&p, &g)]);
        assert_eq!(e.as_array(), [0.0; 5]);

        let mut flipped = p.clone();
        flipped.yaw += std::f64::consts::PI;
        let e = tp_errors(&[(&flipped, &g)]);
        assert!((e.aoe - std::f64::consts::PI).abs() < 1e-12);

        assert_eq!(tp_errors(&[]).as_array(), [1.0; 5]);
    }

    #[test]
    fn tp_errors_match_direct_formulas_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs_owned: Vec<(Box3D, Box3D)> = (0..40)
            .map(|_| {
                let g = Box3D {
                    center: [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-1.0..2.0)],
                    size: [rng.gen_range(0.5..3.0), rng.gen_range(0.5..6.0), rng.gen_range(0.5..3.0)],
                    yaw: rng.gen_range(-3.1..3.1),
                    velocity: [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)],
                    class_id: 0,
                    attribute_id: rng.gen_range(0..3),
                    score: None,
                };
                let mut p = g.clone();
                p.center[0] += rng.gen_range(-1.0..1.0);
                p.center[1] += rng.gen_range(-1.0..1.0);
                p.size = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..6.0), rng.gen_range(0.5..3.0)];
                p.yaw = rng.gen_range(-3.1..3.1);
                p.velocity = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
                p.attribute_id = rng.gen_range(0..3);
                p.score = Some(rng.gen());
                (p, g)
            })
            .collect();
        let pairs: Vec<(&Box3D, &Box3D)> = pairs_owned.iter().map(|(p, g)| (p, g)).collect();
        let e = tp_errors(&pairs);

        let n = pairs.len() as f64;
        let mut ate = 0.0;
        let mut ase = 0.0;
        let mut aoe = 0.0;
        let mut ave = 0.0;
        let mut aae = 0.0;
        for (p, g) in &pairs_owned {
            ate += ((p.center[0] - g.center[0]).powi(2) + (p.center[1] - g.center[1]).powi(2)).sqrt();
            let inter = p.size[0].min(g.size[0]) * p.size[1].min(g.size[1]) * p.size[2].min(g.size[2]);
            let vol = |s: &[f64; 3]| s[0] * s[1] * s[2];
            ase += 1.0 - inter / (vol(&p.size) + vol(&g.size) - inter);
            let mut d = (p.yaw - g.yaw).rem_euclid(std::f64::consts::TAU);
            if d > std::f64::consts::PI {
                d = std::f64::consts::TAU - d;
            }
            aoe += d;
            ave += ((p.velocity[0] - g.velocity[0]).powi(2) + (p.velocity[1] - g.velocity[1]).powi(2)).sqrt();
            aae += if p.attribute_id == g.attribute_id { 0.0 } else { 1.0 };
        }
        for (got, want) in e.as_array().into_iter().zip([ate, ase, aoe, ave, aae]) {
            assert!((got - want / n).abs() < 1e-12, "{got} vs {}", want / n);
        }
    }

    #[test]
    fn nds_hand_values() {
        assert!((nds(1.0, [0.0; 5]) - 1.0).abs() < 1e-12);
        assert!((nds(0.476, [0.444, 0.244, 0.461, 0.439, 0.128]) - 0.5664).abs() < 5e-5);
        assert!((nds(0.434, [0.511, 0.270, 0.527, 0.421, 0.182]) - 0.5259).abs() < 5e-5);
        // Errors beyond 1 are clamped before entering the score.
        assert!((nds(0.0, [2.0, 1.0, 1.0, 1.0, 1.0]) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn reference_rows_reproduce_reported_composite_scores() {
        for row in REFERENCE_SCORE_ROWS {
            let got = nds(row.map, row.tp_errors);
            assert!(
                (got - row.reported_nds).abs() <= REFERENCE_NDS_TOLERANCE,
                "{}: {got:.4} vs {}",
                row.label,
                row.reported_nds
            );
        }
    }

    #[test]
    fn scene_filter_is_case_insensitive_substring() {
        let descs: Vec<String> = [
            "Clear day, downtown loop",
            "Heavy RAIN at the intersection",
            "night drive, empty suburb",
            "light rain, night, parking lot",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(filter_scenes(&descs, "rain"), vec![1, 3]);
        assert_eq!(filter_scenes(&descs, "NIGHT"), vec![2, 3]);
        assert_eq!(filter_scenes(&descs, ""), vec![0, 1, 2, 3]);
        assert!(filter_scenes(&descs, "snow").is_empty());
    }

    #[test]
    fn evaluate_end_to_end_report_is_consistent() {
        let cfg = EvalConfig {
            class_names: vec!["car".into(), "pedestrian".into(), "bus".into()],
            range_filter: 30.0,
            ..EvalConfig::default()
        };
        let frames = vec![
            EvalFrame {
                ground_truth: vec![gt(0.0, 0.0, 0), gt(6.0, 1.0, 0), gt(-4.0, 2.0, 1), gt(100.0, 0.0, 0)],
                predictions: vec![
                    pred(0.3, 0.0, 0, 0.95),
                    pred(6.2, 1.1, 0, 0.80),
                    pred(-4.0, 2.4, 1, 0.70),
                    pred(12.0, -3.0, 0, 0.40), // fp
                ],
            },
            EvalFrame {
                ground_truth: vec![gt(2.0, -5.0, 1)],
                predictions: vec![pred(2.1, -5.0, 1, 0.90), pred(50.0, 50.0, 0, 0.99)],
            },
        ];
        let report = evaluate(&frames, &cfg).unwrap();

        // The far-out gt and the far-out pred fell to the range filter.
        assert_eq!(report.classes.len(), 2);
        assert_eq!(report.skipped_classes, vec!["bus".to_string()]);
        let car = &report.classes[0];
        assert_eq!((car.gt_count, car.pred_count), (2, 3));
        let ped = &report.classes[1];
        assert_eq!((ped.gt_count, ped.matches), (2, 2));

        // NDS is recomputable from the report's own parts.
        let again = nds(report.map, [report.mate, report.mase, report.maoe, report.mave, report.maae]);
        assert!((report.nds - again).abs() < 1e-12);

        // Counts at the loosest threshold: every in-range pred but the fp matches.
        let last = report.counts.last().unwrap();
        assert_eq!(last.true_positives, 4);
        assert_eq!(last.false_positives, 1);
        assert_eq!(last.false_negatives, 0);

        // Serialization round trip and table rendering.
        let back = MetricsReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        let table = report.render_table();
        assert!(table.contains("car") && table.contains("AP@0.5") && table.contains("mAP"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn ap_stays_in_unit_interval_and_fp_append_never_helps(
            flags in proptest::collection::vec(any::<bool>(), 1..30),
            seed in 0u64..1000,
            extra_score in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<(f64, bool)> =
                flags.iter().map(|&m| (rng.gen_range(0.0..1.0), m)).collect();
            let npos = flags.iter().filter(|&&m| m).count().max(1) + 2;
            let cfg = EvalConfig::default();
            let ap = average_precision(&entries, npos, &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            let mut with_fp = entries.clone();
            with_fp.push((extra_score, false));
            let ap2 = average_precision(&with_fp, npos, &cfg).unwrap();
            prop_assert!(ap2 <= ap + 1e-12);
        }
    }
}
