//! Self-check suites shared by the test suite and the `check` command:
//! central-finite-difference gradient checks covering every differentiable
//! operator and both losses, algebraic equivalence of the two view
//! transforms, detection-target encode→decode round trips, and the embedded
//! composite-score fixtures.
//!
//! Suites never panic on a failed check; they collect human-readable
//! failure lines so a caller can print them and exit nonzero.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{camera_from_mount, CameraMount};
use crate::geometry::{BevGridSpec, Box3D, CameraModel};
use crate::head::{
    decode, gaussian_focal_loss, make_targets, regression_l1_loss, DecodeConfig, HeadOutput,
    LossConfig, TargetConfig,
};
use crate::metrics::{nds, REFERENCE_NDS_TOLERANCE, REFERENCE_SCORE_ROWS};
use crate::radar::featurenet::stream_rng;
use crate::tensor::nn::BatchNorm2d;
use crate::tensor::{
    bev_transport, concat, conv2d, gather_cells, scatter_to_grid, BnMode, Tensor,
    TransportRecord,
};
use crate::view::{column_records, matrixvt_transform, DepthDistribution, ViewTransformConfig};

/// Central-difference step used by the gradient suite (64-bit).
pub const FD_STEP: f64 = 1e-3;
/// Maximum allowed relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Maximum allowed absolute deviation between the two view-transform paths.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

/// Outcome of one suite run.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
    pub elapsed_s: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// One summary line, plus one line per failure.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{}: {} cases, {} in {:.2} s",
            self.suite,
            self.cases,
            if self.passed() { "ok".to_string() } else { format!("{} FAILED", self.failures.len()) },
            self.elapsed_s
        );
        for f in &self.failures {
            out.push_str("\n  ");
            out.push_str(f);
        }
        out
    }
}

/// Suites `run_suite` knows, in CLI order.
pub const SUITE_NAMES: &[&str] = &["gradients", "equivalence", "roundtrip", "metrics"];

/// Run a suite by its CLI name.
pub fn run_suite(name: &str) -> Option<SuiteReport> {
    match name {
        "gradients" => Some(gradient_suite()),
        "equivalence" => Some(equivalence_suite()),
        "roundtrip" => Some(roundtrip_suite()),
        "metrics" => Some(metrics_suite()),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

fn rel_err(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < 1e-8 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// Random values bounded away from zero (for kinked ops like relu/abs).
fn signed_away_from_zero(rng: &mut ChaCha8Rng, n: usize, min_mag: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(min_mag..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn leaf(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::leaf(shape, data).expect("check-suite leaf")
}

/// Fixed random weights folding a tensor output into a scalar loss.
fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, uniform(rng, n, -1.0, 1.0)).expect("check-suite weights")
}

fn weighted_sum(out: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    out.mul(w).expect("loss mul").sum_all().expect("loss sum")
}

/// Check analytic gradients of `f` (a scalar-valued closure over `inputs`)
/// against central finite differences, appending any violations.
fn fd_case(
    name: &str,
    inputs: &[&Tensor<f64>],
    f: impl Fn() -> Tensor<f64>,
    cases: &mut usize,
    failures: &mut Vec<String>,
) {
    *cases += 1;
    for t in inputs {
        t.zero_grad();
    }
    let loss = f();
    loss.backward().expect("check-suite backward");
    for (which, t) in inputs.iter().enumerate() {
        let analytic = t
            .grad()
            .unwrap_or_else(|| panic!("{name}: input {which} received no gradient"));
        let orig = t.values();
        let mut worst = 0.0f64;
        let mut worst_at = 0usize;
        let mut worst_pair = (0.0f64, 0.0f64);
        for j in 0..orig.len() {
            let mut bumped = orig.clone();
            bumped[j] = orig[j] + FD_STEP;
            t.load_data(&bumped).expect("load +h");
            let up = f().item().expect("scalar loss");
            bumped[j] = orig[j] - FD_STEP;
            t.load_data(&bumped).expect("load -h");
            let down = f().item().expect("scalar loss");
            t.load_data(&orig).expect("restore");
            let fd = (up - down) / (2.0 * FD_STEP);
            let err = rel_err(analytic[j], fd);
            if err > worst {
                worst = err;
                worst_at = j;
                worst_pair = (analytic[j], fd);
            }
        }
        if worst > GRAD_TOLERANCE {
            failures.push(format!(
                "{name} input {which} element {worst_at}: analytic {:.6e} vs fd {:.6e} (rel err {:.2e})",
                worst_pair.0, worst_pair.1, worst
            ));
        }
    }
}

/// Finite-difference gradient checks for every differentiable operator plus
/// both training losses, at 64-bit.
pub fn gradient_suite() -> SuiteReport {
    let start = Instant::now();
    let mut cases = 0usize;
    let mut failures = Vec::new();
    let mut rng = stream_rng(0xC0FF_EE00, 1);

    // Element-wise binary ops.
    {
        let a = leaf(&[2, 3], uniform(&mut rng, 6, 0.4, 1.6));
        let b = leaf(&[2, 3], uniform(&mut rng, 6, 0.4, 1.6));
        let w = weights(&mut rng, &[2, 3]);
        fd_case("add", &[&a, &b], || weighted_sum(&a.add(&b).unwrap(), &w), &mut cases, &mut failures);
        fd_case("sub", &[&a, &b], || weighted_sum(&a.sub(&b).unwrap(), &w), &mut cases, &mut failures);
        fd_case("mul", &[&a, &b], || weighted_sum(&a.mul(&b).unwrap(), &w), &mut cases, &mut failures);
    }

    // Element-wise unary ops (smooth).
    {
        let a = leaf(&[2, 4], uniform(&mut rng, 8, 0.3, 1.4));
        let w = weights(&mut rng, &[2, 4]);
        fd_case("neg", &[&a], || weighted_sum(&a.neg().unwrap(), &w), &mut cases, &mut failures);
        fd_case("scale", &[&a], || weighted_sum(&a.scale(0.7).unwrap(), &w), &mut cases, &mut failures);
        fd_case("add_scalar", &[&a], || weighted_sum(&a.add_scalar(0.31).unwrap(), &w), &mut cases, &mut failures);
        fd_case("rsub_scalar", &[&a], || weighted_sum(&a.rsub_scalar(1.2).unwrap(), &w), &mut cases, &mut failures);
        fd_case("pow_scalar", &[&a], || weighted_sum(&a.pow_scalar(1.7).unwrap(), &w), &mut cases, &mut failures);
        fd_case("log", &[&a], || weighted_sum(&a.log().unwrap(), &w), &mut cases, &mut failures);
        fd_case("sigmoid", &[&a], || weighted_sum(&a.sigmoid().unwrap(), &w), &mut cases, &mut failures);
    }

    // Element-wise unary ops with kinks: inputs stay clear of them.
    {
        let a = leaf(&[3, 3], signed_away_from_zero(&mut rng, 9, 0.25));
        let w = weights(&mut rng, &[3, 3]);
        fd_case("relu", &[&a], || weighted_sum(&a.relu().unwrap(), &w), &mut cases, &mut failures);
        fd_case("abs", &[&a], || weighted_sum(&a.abs().unwrap(), &w), &mut cases, &mut failures);
    }
    {
        // Values straddling the clamp bounds, none within 0.1 of them.
        let base = [0.1, -0.5, 1.2, -1.2, 0.5, -0.1, 0.4, -0.9, 0.9];
        let vals: Vec<f64> = base.iter().map(|v| v + rng.gen_range(-0.02..0.02)).collect();
        let a = leaf(&[3, 3], vals);
        let w = weights(&mut rng, &[3, 3]);
        fd_case("clamp", &[&a], || weighted_sum(&a.clamp(-0.75, 0.75).unwrap(), &w), &mut cases, &mut failures);
    }

    // Reductions and shape ops.
    {
        let a = leaf(&[2, 3, 2], uniform(&mut rng, 12, -1.0, 1.0));
        let w1 = weights(&mut rng, &[2, 2]);
        let w2 = weights(&mut rng, &[3, 4]);
        fd_case("sum_all", &[&a], || a.sum_all().unwrap(), &mut cases, &mut failures);
        fd_case(
            "mean_over_axis",
            &[&a],
            || weighted_sum(&a.mean_over_axis(1).unwrap(), &w1),
            &mut cases,
            &mut failures,
        );
        fd_case(
            "reshape",
            &[&a],
            || weighted_sum(&a.reshape(&[3, 4]).unwrap(), &w2),
            &mut cases,
            &mut failures,
        );
    }
    {
        // Distinct values so the max is h-stable.
        let mut vals = uniform(&mut rng, 12, -1.0, 1.0);
        for (i, v) in vals.iter_mut().enumerate() {
            *v += i as f64 * 0.011;
        }
        let a = leaf(&[3, 4], vals);
        let w = weights(&mut rng, &[4]);
        fd_case(
            "max_over_axis",
            &[&a],
            || weighted_sum(&a.max_over_axis(0).unwrap().0, &w),
            &mut cases,
            &mut failures,
        );
    }
    {
        let a = leaf(&[2, 4], uniform(&mut rng, 8, -1.2, 1.2));
        let w = weights(&mut rng, &[2, 4]);
        fd_case(
            "softmax_over_axis",
            &[&a],
            || weighted_sum(&a.softmax_over_axis(1).unwrap(), &w),
            &mut cases,
            &mut failures,
        );
    }
    {
        let a = leaf(&[2, 2], uniform(&mut rng, 4, -1.0, 1.0));
        let b = leaf(&[2, 3], uniform(&mut rng, 6, -1.0, 1.0));
        let w = weights(&mut rng, &[2, 5]);
        fd_case(
            "concat",
            &[&a, &b],
            || weighted_sum(&concat(&[a.clone(), b.clone()], 1).unwrap(), &w),
            &mut cases,
            &mut failures,
        );
    }

    // Convolution: input, weight, and bias gradients; two geometries.
    {
        let x = leaf(&[1, 2, 5, 5], uniform(&mut rng, 50, -1.0, 1.0));
        let k = leaf(&[3, 2, 3, 3], uniform(&mut rng, 54, -0.7, 0.7));
        let b = leaf(&[3], uniform(&mut rng, 3, -0.5, 0.5));
        let w = weights(&mut rng, &[1, 3, 5, 5]);
        fd_case(
            "conv2d_s1p1",
            &[&x, &k, &b],
            || weighted_sum(&conv2d(&x, &k, Some(&b), 1, 1).unwrap(), &w),
            &mut cases,
            &mut failures,
        );
        let w2 = weights(&mut rng, &[1, 3, 2, 2]);
        fd_case(
            "conv2d_s2p0",
            &[&x, &k, &b],
            || weighted_sum(&conv2d(&x, &k, Some(&b), 2, 0).unwrap(), &w2),
            &mut cases,
            &mut failures,
        );
    }

    // Batch normalization, both modes (train-mode output uses batch
    // statistics, so the running-stat updates during probing are harmless).
    {
        let bn = BatchNorm2d::<f64>::new(3).expect("bn");
        let gamma = bn.gamma.clone();
        let beta = bn.beta.clone();
        gamma.load_data(&uniform(&mut rng, 3, 0.6, 1.4)).unwrap();
        beta.load_data(&uniform(&mut rng, 3, -0.4, 0.4)).unwrap();
        let x = leaf(&[2, 3, 2, 2], uniform(&mut rng, 24, -1.0, 1.0));
        let w = weights(&mut rng, &[2, 3, 2, 2]);
        fd_case(
            "batchnorm_train",
            &[&x, &gamma, &beta],
            || weighted_sum(&bn.forward(&x, BnMode::Train).unwrap(), &w),
            &mut cases,
            &mut failures,
        );
        fd_case(
            "batchnorm_eval",
            &[&x, &gamma, &beta],
            || weighted_sum(&bn.forward(&x, BnMode::Eval).unwrap(), &w),
            &mut cases,
            &mut failures,
        );
    }

    // Sparse transport / gather / scatter.
    {
        let feats = leaf(&[2, 3, 2, 2], uniform(&mut rng, 24, -1.0, 1.0));
        let depth = leaf(&[2, 4, 2, 2], uniform(&mut rng, 32, 0.1, 1.0));
        let records: Vec<TransportRecord> = (0..10)
            .map(|_| TransportRecord {
                cam: rng.gen_range(0..2),
                pix: rng.gen_range(0..4),
                bin: rng.gen_range(0..4),
                cell: rng.gen_range(0..9),
            })
            .collect();
        let w = weights(&mut rng, &[3, 3, 3]);
        fd_case(
            "bev_transport",
            &[&feats, &depth],
            || weighted_sum(&bev_transport(&feats, &depth, &records, (3, 3)).unwrap(), &w),
            &mut cases,
            &mut failures,
        );
    }
    {
        let x = leaf(&[2, 3, 3], uniform(&mut rng, 18, -1.0, 1.0));
        let index = vec![Some(0u32), Some(4), None, Some(8), Some(4), None];
        let w = weights(&mut rng, &[2, 2, 3]);
        fd_case(
            "gather_cells",
            &[&x],
            || weighted_sum(&gather_cells(&x, &index, (2, 3)).unwrap(), &w),
            &mut cases,
            &mut failures,
        );
    }
    {
        let x = leaf(&[3, 5], uniform(&mut rng, 15, -1.0, 1.0));
        let cells = vec![Some(1u32), Some(5), None, Some(0), Some(5)];
        let w = weights(&mut rng, &[3, 2, 3]);
        fd_case(
            "scatter_to_grid",
            &[&x],
            || weighted_sum(&scatter_to_grid(&x, &cells, (2, 3)).unwrap(), &w),
            &mut cases,
            &mut failures,
        );
    }

    // Detection losses.
    {
        // Heatmap predictions in the open interval, clear of the log clamp;
        // targets carry exact-1 centers plus soft neighborhood values.
        let (h, w_) = (4usize, 4usize);
        let pred = leaf(&[2, h, w_], uniform(&mut rng, 2 * h * w_, 0.05, 0.95));
        let mut target = vec![0.0f64; 2 * h * w_];
        target[5] = 1.0;
        target[2 * h * w_ - 3] = 1.0;
        for t in target.iter_mut() {
            if *t == 0.0 && rng.gen_bool(0.4) {
                *t = rng.gen_range(0.05..0.9);
            }
        }
        let target = Tensor::from_vec(&[2, h, w_], target).unwrap();
        let cfg = LossConfig::default();
        fd_case(
            "gaussian_focal_loss",
            &[&pred],
            || gaussian_focal_loss(&pred, &target, 2, &cfg).unwrap(),
            &mut cases,
            &mut failures,
        );
    }
    {
        // Keep |pred - target| >= 0.1 so the absolute-value kink is far
        // from the probe step.
        let n = 12usize;
        let pred_vals = uniform(&mut rng, n, -1.0, 1.0);
        let target_vals: Vec<f64> = pred_vals
            .iter()
            .map(|v| {
                let gap = 0.1 + rng.gen_range(0.0..0.5);
                if rng.gen_bool(0.5) {
                    v + gap
                } else {
                    v - gap
                }
            })
            .collect();
        let mask_vals: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let pred = leaf(&[2, 2, 3], pred_vals);
        let target = Tensor::from_vec(&[2, 2, 3], target_vals).unwrap();
        let mask = Tensor::from_vec(&[2, 2, 3], mask_vals).unwrap();
        fd_case(
            "regression_l1_loss",
            &[&pred],
            || regression_l1_loss(&pred, &target, &mask).unwrap(),
            &mut cases,
            &mut failures,
        );
    }

    SuiteReport {
        suite: "gradients",
        cases,
        failures,
        elapsed_s: start.elapsed().as_secs_f64(),
    }
}

// ---------------------------------------------------------------------------
// equivalence
// ---------------------------------------------------------------------------

/// Reference path for the factored view transform: compress features and
/// depth vertically by plain averaging, then accumulate every (camera,
/// column, bin) → cell record with explicit loops. Pure `Vec` arithmetic,
/// sharing nothing with the tensor engine's transport kernel.
fn naive_compressed_transport(
    features: &Tensor<f64>,
    depth: &DepthDistribution<f64>,
    records: &[TransportRecord],
    bev_hw: (usize, usize),
) -> Vec<f64> {
    let fs = features.shape().to_vec();
    let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let ds = depth.shape().to_vec();
    let d = ds[1];
    let f = features.values();
    let p = depth.tensor().values();

    // Column means.
    let mut fcol = vec![0.0f64; n * c * w];
    for in_ in 0..n {
        for ch in 0..c {
            for u in 0..w {
                let mut acc = 0.0;
                for v in 0..h {
                    acc += f[((in_ * c + ch) * h + v) * w + u];
                }
                fcol[(in_ * c + ch) * w + u] = acc / h as f64;
            }
        }
    }
    let mut pcol = vec![0.0f64; n * d * w];
    for in_ in 0..n {
        for bin in 0..d {
            for u in 0..w {
                let mut acc = 0.0;
                for v in 0..h {
                    acc += p[((in_ * d + bin) * h + v) * w + u];
                }
                pcol[(in_ * d + bin) * w + u] = acc / h as f64;
            }
        }
    }

    let cells = bev_hw.0 * bev_hw.1;
    let mut out = vec![0.0f64; c * cells];
    for r in records {
        let (cam, u, bin, cell) = (r.cam as usize, r.pix as usize, r.bin as usize, r.cell as usize);
        let dv = pcol[(cam * d + bin) * w + u];
        for ch in 0..c {
            out[ch * cells + cell] += fcol[(cam * c + ch) * w + u] * dv;
        }
    }
    out
}

/// Factored view transform versus the independently coded compressed path,
/// over randomized cameras, grids, and depth distributions.
pub fn equivalence_suite() -> SuiteReport {
    let start = Instant::now();
    let mut cases = 0usize;
    let mut failures = Vec::new();
    let mut rng = stream_rng(0xC0FF_EE00, 2);

    for case in 0..200 {
        cases += 1;
        let n_cams = rng.gen_range(1..=2usize);
        let stride = 4usize;
        let feat_w = rng.gen_range(2..=8usize);
        let feat_h = rng.gen_range(2..=8usize);
        let (img_w, img_h) = (feat_w * stride, feat_h * stride);
        let cams: Vec<CameraModel> = (0..n_cams)
            .map(|i| {
                let mount = CameraMount {
                    position: [
                        rng.gen_range(-1.5..1.5),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(1.0..2.0),
                    ],
                    yaw: if i == 0 {
                        rng.gen_range(-0.6..0.6)
                    } else {
                        std::f64::consts::PI + rng.gen_range(-0.6..0.6)
                    },
                };
                camera_from_mount(&mount, img_w, img_h).expect("check-suite camera")
            })
            .collect();

        let depth_bins = rng.gen_range(1..=6usize);
        let d_min = rng.gen_range(0.5..2.0);
        let d_max = d_min + rng.gen_range(2.0..12.0);
        let rows = rng.gen_range(4..=16usize);
        let cols = rng.gen_range(4..=16usize);
        let cell = rng.gen_range(0.5..1.5);
        let grid = BevGridSpec {
            x_min: -(cols as f64) * cell / 2.0,
            x_max: (cols as f64) * cell / 2.0,
            y_min: -(rows as f64) * cell / 2.0,
            y_max: (rows as f64) * cell / 2.0,
            cell,
        };
        let channels = rng.gen_range(1..=4usize);
        let cfg = ViewTransformConfig {
            depth_bins,
            d_min,
            d_max,
            cameras: n_cams,
            stride,
            channels,
            grid,
        };

        let records = match column_records(&cams, feat_w, &cfg) {
            Ok((r, _)) => r,
            Err(e) => {
                failures.push(format!("case {case}: column records failed: {e}"));
                continue;
            }
        };

        let feat_len = n_cams * channels * feat_h * feat_w;
        let features =
            Tensor::from_vec(&[n_cams, channels, feat_h, feat_w], uniform(&mut rng, feat_len, -1.0, 1.0))
                .unwrap();
        let logits_len = n_cams * depth_bins * feat_h * feat_w;
        let logits = Tensor::from_vec(
            &[n_cams, depth_bins, feat_h, feat_w],
            uniform(&mut rng, logits_len, -2.0, 2.0),
        )
        .unwrap();
        let depth = DepthDistribution::new(logits.softmax_over_axis(1).unwrap()).unwrap();

        let fast = matrixvt_transform(&features, &depth, &records, &cfg).unwrap();
        let naive = naive_compressed_transport(&features, &depth, &records, (rows, cols));
        let fast_vals = fast.values();
        let worst = fast_vals
            .iter()
            .zip(&naive)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if worst > EQUIVALENCE_TOLERANCE {
            failures.push(format!(
                "case {case}: max abs deviation {worst:.3e} (cams {n_cams}, feat {feat_h}x{feat_w}, D {depth_bins}, bev {rows}x{cols})"
            ));
        }
    }

    SuiteReport {
        suite: "equivalence",
        cases,
        failures,
        elapsed_s: start.elapsed().as_secs_f64(),
    }
}

// ---------------------------------------------------------------------------
// roundtrip
// ---------------------------------------------------------------------------

fn wrapped_yaw_diff(a: f64, b: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut d = (a - b) % two_pi;
    if d > std::f64::consts::PI {
        d -= two_pi;
    }
    if d < -std::f64::consts::PI {
        d += two_pi;
    }
    d.abs()
}

/// Paint detection targets for random frames, decode them back, and demand
/// the originals: centers within half a cell, dimensions within 1e-3
/// relative, yaw within 1e-3 rad.
pub fn roundtrip_suite() -> SuiteReport {
    let start = Instant::now();
    let mut cases = 0usize;
    let mut failures = Vec::new();
    let mut rng = stream_rng(0xC0FF_EE00, 3);

    let grid = BevGridSpec { x_min: -16.0, x_max: 16.0, y_min: -16.0, y_max: 16.0, cell: 1.0 };
    let classes = 3usize;
    let target_cfg = TargetConfig::default();
    let decode_cfg = DecodeConfig { score_thresh: 0.5, max_dets: 32 };

    'frames: for frame in 0..100 {
        cases += 1;
        let n_boxes = rng.gen_range(1..=10usize);
        let mut cells: Vec<(usize, usize)> = Vec::new();
        let mut boxes: Vec<Box3D> = Vec::new();
        let mut guard = 0;
        while boxes.len() < n_boxes {
            guard += 1;
            if guard > 1000 {
                break; // crowded draw; check what was placed
            }
            let row = rng.gen_range(2..grid.rows() - 2);
            let col = rng.gen_range(2..grid.cols() - 2);
            // Peaks must own their 3x3 window: demand 3-cell separation.
            if cells
                .iter()
                .any(|&(r, c)| (r as i64 - row as i64).abs() < 3 && (c as i64 - col as i64).abs() < 3)
            {
                continue;
            }
            cells.push((row, col));
            let (cx, cy) = grid.cell_center(row, col);
            let w = rng.gen_range(0.5..2.5);
            let l = rng.gen_range(0.5..6.0);
            let h = rng.gen_range(0.8..3.0);
            boxes.push(Box3D {
                center: [
                    cx + rng.gen_range(-0.45..0.45) * grid.cell,
                    cy + rng.gen_range(-0.45..0.45) * grid.cell,
                    h / 2.0,
                ],
                size: [w, l, h],
                yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                velocity: [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)],
                class_id: rng.gen_range(0..classes) as u32,
                attribute_id: 0,
                score: None,
            });
        }

        let targets = match make_targets::<f64>(&boxes, &grid, classes, &target_cfg) {
            Ok(t) => t,
            Err(e) => {
                failures.push(format!("frame {frame}: targets failed: {e}"));
                continue;
            }
        };
        let output = HeadOutput {
            heatmap: targets.heatmap,
            regression: targets.regression,
            rotation: targets.rotation,
        };
        let decoded = match decode(&output, &grid, &decode_cfg, None) {
            Ok(d) => d,
            Err(e) => {
                failures.push(format!("frame {frame}: decode failed: {e}"));
                continue;
            }
        };
        if decoded.boxes.len() != boxes.len() {
            failures.push(format!(
                "frame {frame}: {} boxes in, {} decoded",
                boxes.len(),
                decoded.boxes.len()
            ));
            continue;
        }
        for original in &boxes {
            // Nearest decoded box by center.
            let best = decoded
                .boxes
                .iter()
                .min_by(|a, b| {
                    let da = (a.center[0] - original.center[0]).hypot(a.center[1] - original.center[1]);
                    let db = (b.center[0] - original.center[0]).hypot(b.center[1] - original.center[1]);
                    da.total_cmp(&db)
                })
                .unwrap();
            let dc = (best.center[0] - original.center[0])
                .hypot(best.center[1] - original.center[1]);
            if dc > grid.cell / 2.0 {
                failures.push(format!("frame {frame}: center off by {dc:.4} m"));
                continue 'frames;
            }
            for k in 0..3 {
                let rel = (best.size[k] - original.size[k]).abs() / original.size[k];
                if rel > 1e-3 {
                    failures.push(format!("frame {frame}: size[{k}] rel err {rel:.2e}"));
                    continue 'frames;
                }
            }
            if wrapped_yaw_diff(best.yaw, original.yaw) > 1e-3 {
                failures.push(format!(
                    "frame {frame}: yaw {:.4} decoded as {:.4}",
                    original.yaw, best.yaw
                ));
                continue 'frames;
            }
            if best.class_id != original.class_id {
                failures.push(format!("frame {frame}: class changed"));
                continue 'frames;
            }
        }
    }

    SuiteReport {
        suite: "roundtrip",
        cases,
        failures,
        elapsed_s: start.elapsed().as_secs_f64(),
    }
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// Recompute the composite score for every embedded fixture row and compare
/// against its reported value.
pub fn metrics_suite() -> SuiteReport {
    let start = Instant::now();
    let mut cases = 0usize;
    let mut failures = Vec::new();
    for row in REFERENCE_SCORE_ROWS {
        cases += 1;
        let got = nds(row.map, row.tp_errors);
        let err = (got - row.reported_nds).abs();
        if err > REFERENCE_NDS_TOLERANCE {
            failures.push(format!(
                "{}: computed {:.4} vs reported {:.3} (err {:.4})",
                row.label, got, row.reported_nds, err
            ));
        }
    }
    SuiteReport {
        suite: "metrics",
        cases,
        failures,
        elapsed_s: start.elapsed().as_secs_f64(),
    }
}
