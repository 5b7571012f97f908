//! Deterministic synthetic scenes: oriented boxes on a ground plane, radar
//! sweeps sampled from their outlines, and flat-shaded camera renders.
//!
//! Everything derives from one `ChaCha8` stream seeded by `(seed, t)`, so a
//! scene index regenerates bit-identically and distinct samples can be
//! produced in parallel.
//!
//! Objects move along their own heading. Vehicle-like classes are biased
//! into lanes running along the ego x-axis (right-hand traffic), the way
//! road users around a driving ego actually behave; the rest wander with
//! uniform heading. Lane traffic keeps most object motion close to radial,
//! which is what makes the Doppler channel informative about full velocity.
//!
//! Radar returns are expressed so that ego-motion compensation lands every
//! object's points on its current-frame footprint (object displacement over
//! sweep age is deliberately not applied to point positions; Doppler still
//! comes from the true object velocity and per-sweep bearing). This keeps
//! the points-inside-inflated-footprint association exact for every sweep
//! while preserving per-sweep ages.

use nalgebra::{Matrix3, Matrix4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Box3D, CameraModel};
use crate::radar::featurenet::stream_rng;
use crate::radar::{aggregate_sweeps, EgoPose, RadarReturn, RadarSweep};

use super::{DataError, Image, Result, SampleBundle};

/// Sign applied to the closing speed when storing Doppler: `-1` means an
/// approaching target reads negative (range-rate convention). Exactly one
/// constant controls the convention.
pub const DOPPLER_APPROACHING_SIGN: f64 = -1.0;

/// Doppler of a target at `pos` (sensor at origin) moving with
/// ego-compensated velocity `vel`: the closing speed times
/// [`DOPPLER_APPROACHING_SIGN`]. A target at the origin has no bearing and
/// reads zero.
pub fn doppler_from_velocity(pos: [f64; 2], vel: [f64; 2]) -> f64 {
    let r = (pos[0] * pos[0] + pos[1] * pos[1]).sqrt();
    if r == 0.0 {
        return 0.0;
    }
    let closing = -(vel[0] * pos[0] + vel[1] * pos[1]) / r;
    DOPPLER_APPROACHING_SIGN * closing
}

/// One object category the generator can place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Mean `[w, l, h]` in meters.
    pub size: [f64; 3],
    /// Relative size jitter (each dimension scaled by `1 ± jitter`).
    pub size_jitter: f64,
    /// Objects per scene, inclusive range.
    pub count: (usize, usize),
    /// Speed range, m/s. Objects below 0.25 m/s are labeled stationary.
    pub speed: (f64, f64),
    pub rcs_mean: f64,
    /// Flat-shading base color.
    pub color: [f32; 3],
    /// Probability that an instance is lane traffic (placed on a lane,
    /// heading along it) rather than free-roaming with uniform heading.
    pub lane_bias: f64,
}

/// Where a camera sits on the ego body (level mounting, yaw only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraMount {
    pub position: [f64; 3],
    pub yaw: f64,
}

/// Scene condition; rain and night alter the rendered images and the
/// description string so description filtering has something to find.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weather {
    Clear,
    Rain,
    Night,
    RainNight,
}

impl Weather {
    fn phrase(self) -> &'static str {
        match self {
            Weather::Clear => "clear day",
            Weather::Rain => "light rain",
            Weather::Night => "night drive",
            Weather::RainNight => "rain at night",
        }
    }

    fn is_rain(self) -> bool {
        matches!(self, Weather::Rain | Weather::RainNight)
    }

    fn is_night(self) -> bool {
        matches!(self, Weather::Night | Weather::RainNight)
    }
}

/// Lateral spread of lane traffic around its lane center, meters.
const LANE_Y_SIGMA: f64 = 0.25;
/// Heading spread of lane traffic around the lane direction, radians.
const LANE_YAW_SIGMA: f64 = 0.06;

/// Factor applied to every channel of night renders.
pub const NIGHT_DARKENING: f32 = 0.12;
/// Contrast retained under rain (deviation from mid-gray is scaled by this).
pub const RAIN_CONTRAST: f32 = 0.55;
/// Per-pixel probability and brightness of rain speckle.
pub const RAIN_SPECKLE_PROB: f64 = 0.02;
pub const RAIN_SPECKLE_GAIN: f32 = 0.35;

const LOCALES: &[&str] = &[
    "downtown block",
    "suburban street",
    "highway ramp",
    "parking lot",
    "industrial road",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    /// Objects are placed with centers in `[-extent, extent]^2`.
    pub extent: f64,
    /// Lane centerlines (ego-frame y offsets) of the road running along the
    /// ego x-axis. Traffic in lanes left of the ego (positive y) heads -x,
    /// lanes to the right head +x.
    pub lane_offsets: Vec<f64>,
    /// Radar returns per object per sweep, inclusive range.
    pub points_per_object: (usize, usize),
    /// Position noise sigma, meters (clamped into the 1.15x footprint).
    pub pos_sigma: f64,
    pub rcs_sigma: f64,
    pub v_d_sigma: f64,
    /// Clutter returns per sweep, inclusive range; clutter Doppler ~ 0.
    pub clutter: (usize, usize),
    pub clutter_rcs_mean: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub cameras: Vec<CameraMount>,
    /// Sweeps per sample (newest first in the output).
    pub sweeps: usize,
    /// Time between consecutive sweeps, seconds.
    pub sweep_period_s: f64,
    /// Time between consecutive scene indices, seconds.
    pub frame_period_s: f64,
    /// Ego forward speed, m/s (exercises sweep motion compensation).
    pub ego_speed: f64,
    pub placement_retries: usize,
    /// Sampling weights for clear / rain / night / rain+night.
    pub weather_weights: [f64; 4],
    /// Pin the weather instead of sampling it (tests, ablations).
    pub force_weather: Option<Weather>,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            seed: 0,
            classes: vec![
                ClassSpec {
                    name: "car".into(),
                    size: [1.9, 4.5, 1.6],
                    size_jitter: 0.08,
                    count: (2, 5),
                    speed: (0.0, 8.0),
                    rcs_mean: 10.0,
                    color: [0.25, 0.4, 0.9],
                    lane_bias: 0.85,
                },
                ClassSpec {
                    name: "pedestrian".into(),
                    size: [0.6, 0.6, 1.7],
                    size_jitter: 0.1,
                    count: (1, 4),
                    speed: (0.0, 1.8),
                    rcs_mean: 0.0,
                    color: [0.9, 0.3, 0.2],
                    lane_bias: 0.1,
                },
                ClassSpec {
                    name: "truck".into(),
                    size: [2.5, 7.0, 2.9],
                    size_jitter: 0.08,
                    count: (0, 2),
                    speed: (0.0, 6.0),
                    rcs_mean: 20.0,
                    color: [0.55, 0.8, 0.25],
                    lane_bias: 0.85,
                },
            ],
            extent: 14.0,
            lane_offsets: vec![-2.6, 2.6],
            points_per_object: (4, 9),
            pos_sigma: 0.12,
            rcs_sigma: 2.0,
            v_d_sigma: 0.25,
            clutter: (5, 15),
            clutter_rcs_mean: -5.0,
            image_width: 704,
            image_height: 256,
            cameras: vec![
                CameraMount { position: [1.5, 0.0, 1.6], yaw: 0.0 },
                CameraMount { position: [-1.5, 0.0, 1.6], yaw: std::f64::consts::PI },
            ],
            sweeps: 3,
            sweep_period_s: 0.07,
            frame_period_s: 0.5,
            ego_speed: 2.0,
            placement_retries: 60,
            weather_weights: [0.4, 0.25, 0.25, 0.1],
            force_weather: None,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::BadConfig(m));
        if self.classes.is_empty() {
            return bad("no classes configured".into());
        }
        for c in &self.classes {
            if c.count.0 > c.count.1 || c.speed.0 > c.speed.1 || c.speed.0 < 0.0 {
                return bad(format!("class {}: bad count/speed ranges", c.name));
            }
            if c.size.iter().any(|&s| s <= 0.0) || c.size_jitter < 0.0 || c.size_jitter >= 1.0 {
                return bad(format!("class {}: bad size", c.name));
            }
            if !(0.0..=1.0).contains(&c.lane_bias) {
                return bad(format!("class {}: lane_bias outside [0, 1]", c.name));
            }
            if c.lane_bias > 0.0 && self.lane_offsets.is_empty() {
                return bad(format!("class {}: lane_bias > 0 but no lanes configured", c.name));
            }
        }
        if self.lane_offsets.iter().any(|y| !y.is_finite()) {
            return bad("lane offsets must be finite".into());
        }
        if self.extent <= 0.0 {
            return bad("extent must be positive".into());
        }
        if self.points_per_object.0 > self.points_per_object.1 || self.clutter.0 > self.clutter.1 {
            return bad("bad point-count ranges".into());
        }
        if self.pos_sigma < 0.0 || self.rcs_sigma < 0.0 || self.v_d_sigma < 0.0 {
            return bad("noise sigmas must be nonnegative".into());
        }
        if self.cameras.is_empty() {
            return bad("at least one camera".into());
        }
        if self.image_width < 8 || self.image_height < 8 {
            return bad("image too small".into());
        }
        if self.sweeps == 0 || self.sweep_period_s <= 0.0 || self.frame_period_s <= 0.0 {
            return bad("bad sweep timing".into());
        }
        if self.weather_weights.iter().any(|&w| w < 0.0)
            || self.weather_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("weather weights must be nonnegative with positive sum".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Build the camera models for this config (90 degree horizontal FOV,
    /// square pixels, principal point at the image center).
    pub fn camera_models(&self) -> Result<Vec<CameraModel>> {
        self.cameras
            .iter()
            .map(|m| camera_from_mount(m, self.image_width, self.image_height))
            .collect()
    }
}

pub(crate) fn camera_from_mount(
    mount: &CameraMount,
    width: usize,
    height: usize,
) -> Result<CameraModel> {
    let f = width as f64 / 2.0;
    let k = Matrix3::new(
        f, 0.0, width as f64 / 2.0,
        0.0, f, height as f64 / 2.0,
        0.0, 0.0, 1.0,
    );
    let (s, c) = mount.yaw.sin_cos();
    // Camera axes in ego coordinates: optical z points along the mount yaw,
    // x right (ego -y for a forward camera), y down (ego -z).
    let e = Matrix4::new(
        s, 0.0, c, mount.position[0],
        -c, 0.0, s, mount.position[1],
        0.0, -1.0, 0.0, mount.position[2],
        0.0, 0.0, 0.0, 1.0,
    );
    Ok(CameraModel::new(k, e, width as u32, height as u32)?)
}

const MOVING_SPEED_THRESHOLD: f64 = 0.25;
/// Attribute ids the generator assigns.
pub const ATTR_STATIONARY: u32 = 0;
pub const ATTR_MOVING: u32 = 1;

fn normal_draw(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).unwrap().sample(rng)
    } else {
        0.0
    }
}

/// Generate sample `t` of the stream described by `cfg`.
pub fn generate_scene(cfg: &SceneGenConfig, t: u64) -> Result<SampleBundle> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, t);

    let weather = match cfg.force_weather {
        Some(w) => w,
        None => {
            let total: f64 = cfg.weather_weights.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut chosen = Weather::Clear;
            for (w, kind) in cfg
                .weather_weights
                .iter()
                .zip([Weather::Clear, Weather::Rain, Weather::Night, Weather::RainNight])
            {
                if pick < *w {
                    chosen = kind;
                    break;
                }
                pick -= w;
            }
            chosen
        }
    };
    let locale = LOCALES[rng.gen_range(0..LOCALES.len())];
    let description = format!("{}, {}", weather.phrase(), locale);

    // --- object placement -------------------------------------------------
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut index = 0usize;
    for (class_id, spec) in cfg.classes.iter().enumerate() {
        let count = rng.gen_range(spec.count.0..=spec.count.1);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..cfg.placement_retries {
                let size = [
                    spec.size[0] * (1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter)),
                    spec.size[1] * (1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter)),
                    spec.size[2] * (1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter)),
                ];
                let in_lane = spec.lane_bias > 0.0 && rng.gen_bool(spec.lane_bias);
                let (x, y, yaw) = if in_lane {
                    let lane = cfg.lane_offsets[rng.gen_range(0..cfg.lane_offsets.len())];
                    let x = rng.gen_range(-cfg.extent..=cfg.extent);
                    let y = (lane + normal_draw(&mut rng, LANE_Y_SIGMA))
                        .clamp(-cfg.extent, cfg.extent);
                    let dir = if lane > 0.0 { std::f64::consts::PI } else { 0.0 };
                    (x, y, dir + normal_draw(&mut rng, LANE_YAW_SIGMA))
                } else {
                    (
                        rng.gen_range(-cfg.extent..=cfg.extent),
                        rng.gen_range(-cfg.extent..=cfg.extent),
                        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                    )
                };
                let speed = rng.gen_range(spec.speed.0..=spec.speed.1);
                let candidate = Box3D {
                    center: [x, y, size[2] / 2.0],
                    size,
                    yaw,
                    velocity: [speed * yaw.cos(), speed * yaw.sin()],
                    class_id: class_id as u32,
                    attribute_id: if speed > MOVING_SPEED_THRESHOLD {
                        ATTR_MOVING
                    } else {
                        ATTR_STATIONARY
                    },
                    score: None,
                };
                // Conservative non-overlap: disjoint circumscribed circles.
                let radius = |b: &Box3D| (b.size[0].hypot(b.size[1])) / 2.0 + 0.25;
                if boxes
                    .iter()
                    .all(|b| candidate.bev_distance(b) > radius(&candidate) + radius(b))
                {
                    boxes.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(DataError::InfeasiblePlacement {
                    index,
                    retries: cfg.placement_retries,
                });
            }
            index += 1;
        }
    }

    // --- radar sweeps ------------------------------------------------------
    // Map frame == current ego frame; at sweep age a the ego sat at
    // x = -ego_speed * a.
    let base_time_s = t as f64 * cfg.frame_period_s;
    const EPOCH_US: u64 = 1_000_000_000;
    let mut sweeps = Vec::with_capacity(cfg.sweeps);
    for k in 0..cfg.sweeps {
        let age = k as f64 * cfg.sweep_period_s;
        let pose = EgoPose { x: -cfg.ego_speed * age, y: 0.0, yaw: 0.0 };
        let timestamp_us = EPOCH_US + ((base_time_s - age) * 1e6).round() as u64;
        let mut points = Vec::new();
        for b in &boxes {
            let n = rng.gen_range(cfg.points_per_object.0..=cfg.points_per_object.1);
            for _ in 0..n {
                let (mx, my) = outline_point(b, &mut rng, cfg.pos_sigma);
                let (sx, sy) = pose.from_map(mx, my);
                let v_d =
                    doppler_from_velocity([sx, sy], b.velocity) + normal_draw(&mut rng, cfg.v_d_sigma);
                points.push(RadarReturn {
                    x: sx,
                    y: sy,
                    rcs: b_rcs(cfg, b) + normal_draw(&mut rng, cfg.rcs_sigma),
                    v_d,
                });
            }
        }
        let n_clutter = rng.gen_range(cfg.clutter.0..=cfg.clutter.1);
        for _ in 0..n_clutter {
            let mx = rng.gen_range(-cfg.extent..=cfg.extent);
            let my = rng.gen_range(-cfg.extent..=cfg.extent);
            let (sx, sy) = pose.from_map(mx, my);
            points.push(RadarReturn {
                x: sx,
                y: sy,
                rcs: cfg.clutter_rcs_mean + normal_draw(&mut rng, cfg.rcs_sigma),
                v_d: normal_draw(&mut rng, 0.5 * cfg.v_d_sigma),
            });
        }
        sweeps.push(RadarSweep { timestamp_us, pose, points });
    }

    // --- camera renders ----------------------------------------------------
    let cameras = cfg.camera_models()?;
    let mut images = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let mut img = render_background(cfg, &mut rng);
        render_boxes(cam, cfg, &boxes, &mut img);
        apply_weather(weather, &mut img, &mut rng);
        images.push(img);
    }

    let points = aggregate_sweeps(&sweeps, cfg.sweeps)?;
    let bundle = SampleBundle {
        id: format!("scene_{t:06}"),
        description,
        images,
        cameras,
        sweeps,
        points,
        ground_truth: boxes,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn b_rcs(cfg: &SceneGenConfig, b: &Box3D) -> f64 {
    cfg.classes[b.class_id as usize].rcs_mean
}

/// A point on the box's BEV outline plus noise, clamped into the 1.15x
/// footprint so the 1.2x association invariant holds with margin.
fn outline_point(b: &Box3D, rng: &mut ChaCha8Rng, pos_sigma: f64) -> (f64, f64) {
    let hw = b.size[0] / 2.0;
    let hl = b.size[1] / 2.0;
    let perimeter = 4.0 * (hw + hl);
    let u = rng.gen_range(0.0..perimeter);
    // Walk the rectangle edges in the local (along, across) frame.
    let (mut dx, mut dy) = if u < 2.0 * hl {
        (u - hl, hw)
    } else if u < 2.0 * (hl + hw) {
        (hl, hw - (u - 2.0 * hl))
    } else if u < 4.0 * hl + 2.0 * hw {
        (hl - (u - 2.0 * (hl + hw)), -hw)
    } else {
        (-hl, -hw + (u - (4.0 * hl + 2.0 * hw)))
    };
    dx = (dx + normal_draw(rng, pos_sigma)).clamp(-1.15 * hl, 1.15 * hl);
    dy = (dy + normal_draw(rng, pos_sigma)).clamp(-1.15 * hw, 1.15 * hw);
    let (s, c) = b.yaw.sin_cos();
    (b.center[0] + c * dx - s * dy, b.center[1] + s * dx + c * dy)
}

fn render_background(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(cfg.image_width, cfg.image_height);
    for y in 0..cfg.image_height {
        let base = 0.3 + 0.14 * (y as f32 / cfg.image_height.max(1) as f32);
        for x in 0..cfg.image_width {
            let rgb = [
                base + rng.gen_range(-0.04..0.04),
                base + rng.gen_range(-0.04..0.04),
                base + rng.gen_range(-0.04..0.04),
            ];
            img.set(x, y, rgb);
        }
    }
    img
}

const Z_NEAR: f64 = 0.15;

/// Face corner indices into [`Box3D::corners`]: bottom, top, four sides.
const FACES: [[usize; 4]; 6] = [
    [0, 1, 2, 3],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [1, 2, 6, 5],
    [2, 3, 7, 6],
    [3, 0, 4, 7],
];

struct ProjectedFace {
    depth: f64,
    uv: Vec<(f64, f64)>,
    shade: f32,
}

/// Clip each face against the near plane in camera coordinates and project
/// it. Returns the surviving faces with painter depths and shading factors.
fn project_faces(cam: &CameraModel, b: &Box3D) -> Vec<ProjectedFace> {
    let corners = b.corners();
    let e2c = cam.ego_to_cam();
    let k = cam.intrinsics();
    let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
    let cam_pts: Vec<[f64; 3]> = corners
        .iter()
        .map(|p| {
            let v = e2c * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
            [v[0], v[1], v[2]]
        })
        .collect();
    let light = {
        let l = [0.35f64, -0.25, 0.9];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };

    let mut out = Vec::new();
    for face in FACES {
        let poly: Vec<[f64; 3]> = face.iter().map(|&i| cam_pts[i]).collect();
        let clipped = clip_near(&poly, Z_NEAR);
        if clipped.len() < 3 {
            continue;
        }
        let depth = clipped.iter().map(|p| p[2]).sum::<f64>() / clipped.len() as f64;
        let uv: Vec<(f64, f64)> = clipped
            .iter()
            .map(|p| (fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy))
            .collect();
        // Shade from the ego-frame face normal (sign-insensitive).
        let a = corners[face[0]];
        let b1 = corners[face[1]];
        let c1 = corners[face[2]];
        let u = [b1[0] - a[0], b1[1] - a[1], b1[2] - a[2]];
        let v = [c1[0] - a[0], c1[1] - a[1], c1[2] - a[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-12);
        let lambert = ((n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / nn).abs();
        out.push(ProjectedFace { depth, uv, shade: 0.45 + 0.55 * lambert as f32 });
    }
    out
}

/// Sutherland–Hodgman clip of a camera-space polygon against `z >= znear`.
fn clip_near(poly: &[[f64; 3]], znear: f64) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ina, inb) = (a[2] >= znear, b[2] >= znear);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (znear - a[2]) / (b[2] - a[2]);
            out.push([
                a[0] + t * (b[0] - a[0]),
                a[1] + t * (b[1] - a[1]),
                znear,
            ]);
        }
    }
    out
}

/// Scanline-fill a convex polygon, invoking `plot` for covered pixels
/// (pixel centers at half-integer coordinates), clipped to the image.
fn fill_convex(uv: &[(f64, f64)], width: usize, height: usize, mut plot: impl FnMut(usize, usize)) {
    if uv.len() < 3 {
        return;
    }
    let min_v = uv.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_v = uv.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let y0 = (min_v - 0.5).ceil().max(0.0) as usize;
    let y1 = ((max_v - 0.5).floor().min(height as f64 - 1.0)) as i64;
    if y1 < y0 as i64 {
        return;
    }
    for y in y0..=(y1 as usize) {
        let sy = y as f64 + 0.5;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..uv.len() {
            let (x1, v1) = uv[i];
            let (x2, v2) = uv[(i + 1) % uv.len()];
            if (v1 <= sy && v2 > sy) || (v2 <= sy && v1 > sy) {
                let t = (sy - v1) / (v2 - v1);
                let x = x1 + t * (x2 - x1);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if lo > hi {
            continue;
        }
        let x0 = (lo - 0.5).ceil().max(0.0) as usize;
        let x1c = (hi - 0.5).floor().min(width as f64 - 1.0);
        if x1c < x0 as f64 {
            continue;
        }
        for x in x0..=(x1c as usize) {
            plot(x, y);
        }
    }
}

/// Painter's algorithm over every face of every box: farthest first, so
/// nearer faces overwrite.
fn render_boxes(cam: &CameraModel, cfg: &SceneGenConfig, boxes: &[Box3D], img: &mut Image) {
    let mut faces: Vec<(ProjectedFace, [f32; 3])> = Vec::new();
    for b in boxes {
        let color = cfg.classes[b.class_id as usize].color;
        for f in project_faces(cam, b) {
            faces.push((f, color));
        }
    }
    faces.sort_by(|a, b| b.0.depth.total_cmp(&a.0.depth));
    let (w, h) = (img.width, img.height);
    for (face, color) in &faces {
        let rgb = [color[0] * face.shade, color[1] * face.shade, color[2] * face.shade];
        fill_convex(&face.uv, w, h, |x, y| img.set(x, y, rgb));
    }
}

fn apply_weather(weather: Weather, img: &mut Image, rng: &mut ChaCha8Rng) {
    if weather.is_rain() {
        for v in img.data.iter_mut() {
            *v = 0.5 + (*v - 0.5) * RAIN_CONTRAST;
        }
        let (w, h) = (img.width, img.height);
        for y in 0..h {
            for x in 0..w {
                if rng.gen_bool(RAIN_SPECKLE_PROB) {
                    let mut rgb = img.get(x, y);
                    for c in rgb.iter_mut() {
                        *c = (*c + RAIN_SPECKLE_GAIN).min(1.0);
                    }
                    img.set(x, y, rgb);
                }
            }
        }
    }
    if weather.is_night() {
        for v in img.data.iter_mut() {
            *v *= NIGHT_DARKENING;
        }
    }
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Rasterize the silhouette of one box in one camera (union of its
/// projected faces). `true` marks covered pixels.
pub fn render_box_mask(cam: &CameraModel, b: &Box3D, width: usize, height: usize) -> Vec<bool> {
    let mut mask = vec![false; width * height];
    for f in project_faces(cam, b) {
        fill_convex(&f.uv, width, height, |x, y| mask[y * width + x] = true);
    }
    mask
}

/// IoU between the rasterized face-union silhouette and the filled convex
/// hull of the projected (clipped) corners. `None` when the box is not
/// meaningfully visible (nothing survives clipping, or under 20 px).
pub fn silhouette_iou(cam: &CameraModel, b: &Box3D) -> Option<f64> {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let faces = project_faces(cam, b);
    if faces.is_empty() {
        return None;
    }
    let silhouette = render_box_mask(cam, b, w, h);
    let pts: Vec<(f64, f64)> = faces.iter().flat_map(|f| f.uv.iter().copied()).collect();
    let hull = convex_hull(&pts);
    let mut hull_mask = vec![false; w * h];
    fill_convex(&hull, w, h, |x, y| hull_mask[y * w + x] = true);

    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in silhouette.iter().zip(&hull_mask) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
    }
    if hull_mask.iter().filter(|&&m| m).count() < 20 {
        return None;
    }
    Some(inter as f64 / union.max(1) as f64)
}

/// Andrew's monotone chain; returns the hull counter-clockwise.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let chain = |iter: &mut dyn Iterator<Item = (f64, f64)>| {
        let mut half: Vec<(f64, f64)> = Vec::new();
        for p in iter {
            while half.len() >= 2 && cross(half[half.len() - 2], half[half.len() - 1], p) <= 0.0 {
                half.pop();
            }
            half.push(p);
        }
        half.pop();
        half
    };
    let mut hull = chain(&mut pts.iter().copied());
    hull.extend(chain(&mut pts.iter().rev().copied()));
    hull
}
