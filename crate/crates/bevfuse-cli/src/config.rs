//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a full-line comment; blank lines are
//! ignored. Keys are dotted paths with a section prefix (`pipeline.` for the
//! model/training description, `scene.` for the synthetic-data generator);
//! every key overrides one field of the built-in defaults, and unknown keys
//! are errors so typos cannot silently fall back to a default. The accepted
//! keys and value forms are listed in `docs/config.md`.

use std::path::Path;

use bevfuse_core::data::{SceneGenConfig, Weather};
use bevfuse_core::pipeline::{PipelineConfig, RadarEncoderKind, ViewKind};

use crate::{CliError, Result};

/// Everything a config file can describe: the model/training setup and the
/// scene generator. Both start at library defaults.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AppConfig {
    pub pipeline: PipelineConfig,
    pub scene: SceneGenConfig,
}

/// Read and parse a config file.
pub fn load_config(path: &Path) -> Result<AppConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Parse config text; the result is validated as a whole.
pub fn parse_config(text: &str) -> Result<AppConfig> {
    let mut cfg = AppConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {}: expected `key = value`, got {line:?}",
                idx + 1
            )));
        };
        apply(&mut cfg, key.trim(), value.trim())
            .map_err(|msg| CliError::Config(format!("line {}: {msg}", idx + 1)))?;
    }
    cfg.pipeline
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    cfg.scene
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: expected {what}, got {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn parse_list<T: std::str::FromStr>(
    key: &str,
    value: &str,
    what: &str,
) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(|part| parse(key, part.trim(), what))
        .collect()
}

fn parse_pair<T: std::str::FromStr + Copy>(
    key: &str,
    value: &str,
    what: &str,
) -> std::result::Result<(T, T), String> {
    let items: Vec<T> = parse_list(key, value, what)?;
    match items[..] {
        [lo, hi] => Ok((lo, hi)),
        _ => Err(format!("{key}: expected two comma-separated values")),
    }
}

fn apply(cfg: &mut AppConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    if let Some(rest) = key.strip_prefix("scene.class.") {
        return apply_class(&mut cfg.scene, rest, key, value);
    }
    let p = &mut cfg.pipeline;
    let s = &mut cfg.scene;
    match key {
        "pipeline.seed" => p.seed = parse(key, value, "an unsigned integer")?,
        "pipeline.grid.x_min" => p.grid.x_min = parse(key, value, "a number")?,
        "pipeline.grid.x_max" => p.grid.x_max = parse(key, value, "a number")?,
        "pipeline.grid.y_min" => p.grid.y_min = parse(key, value, "a number")?,
        "pipeline.grid.y_max" => p.grid.y_max = parse(key, value, "a number")?,
        "pipeline.grid.cell" => p.grid.cell = parse(key, value, "a number")?,
        "pipeline.image_width" => p.image_width = parse(key, value, "an integer")?,
        "pipeline.image_height" => p.image_height = parse(key, value, "an integer")?,
        "pipeline.cam_base_channels" => p.cam_base_channels = parse(key, value, "an integer")?,
        "pipeline.cam_stage_blocks" => {
            p.cam_stage_blocks = parse_list(key, value, "an integer")?
        }
        "pipeline.cam_channels" => p.cam_channels = parse(key, value, "an integer")?,
        "pipeline.depth_bins" => p.depth_bins = parse(key, value, "an integer")?,
        "pipeline.d_min" => p.d_min = parse(key, value, "a number")?,
        "pipeline.d_max" => p.d_max = parse(key, value, "a number")?,
        "pipeline.view" => {
            p.view = match value {
                "lss" => ViewKind::LiftSplat,
                "matrixvt" => ViewKind::MatrixVt,
                _ => return Err(format!("{key}: expected lss or matrixvt, got {value:?}")),
            }
        }
        "pipeline.radar" => {
            p.radar = match value {
                "none" => RadarEncoderKind::None,
                "grid_map" => RadarEncoderKind::GridMap,
                "bev_feature_net" => RadarEncoderKind::BevFeatureNet,
                _ => {
                    return Err(format!(
                        "{key}: expected none, grid_map or bev_feature_net, got {value:?}"
                    ))
                }
            }
        }
        "pipeline.radar_channels" => p.radar_channels = parse(key, value, "an integer")?,
        "pipeline.radar_max_cells" => p.radar_max_cells = parse(key, value, "an integer")?,
        "pipeline.radar_max_points" => p.radar_max_points = parse(key, value, "an integer")?,
        "pipeline.sweeps" => p.sweeps = parse(key, value, "an integer")?,
        "pipeline.bev_blocks" => p.bev_blocks = parse(key, value, "an integer")?,
        "pipeline.head_channels" => p.head_channels = parse(key, value, "an integer")?,
        "pipeline.classes" => p.classes = parse(key, value, "an integer")?,
        "pipeline.focal_alpha" => p.focal_alpha = parse(key, value, "a number")?,
        "pipeline.focal_beta" => p.focal_beta = parse(key, value, "a number")?,
        "pipeline.reg_weight" => p.reg_weight = parse(key, value, "a number")?,
        "pipeline.rot_weight" => p.rot_weight = parse(key, value, "a number")?,
        "pipeline.min_overlap" => p.min_overlap = parse(key, value, "a number")?,
        "pipeline.min_radius" => p.min_radius = parse(key, value, "an integer")?,
        "pipeline.score_thresh" => p.score_thresh = parse(key, value, "a number")?,
        "pipeline.max_dets" => p.max_dets = parse(key, value, "an integer")?,
        "pipeline.epochs" => p.epochs = parse(key, value, "an integer")?,
        "pipeline.lr" => p.lr = parse(key, value, "a number")?,
        "pipeline.weight_decay" => p.weight_decay = parse(key, value, "a number")?,
        "pipeline.augment" => p.augment = parse_bool(key, value)?,
        "pipeline.augment_rotation" => p.augment_rotation = parse(key, value, "a number")?,
        "pipeline.augment_scale" => p.augment_scale = parse(key, value, "a number")?,
        "pipeline.augment_flip" => p.augment_flip = parse_bool(key, value)?,

        "scene.seed" => s.seed = parse(key, value, "an unsigned integer")?,
        "scene.extent" => s.extent = parse(key, value, "a number")?,
        "scene.lane_offsets" => s.lane_offsets = parse_list(key, value, "a number")?,
        "scene.points_per_object" => {
            s.points_per_object = parse_pair(key, value, "an integer")?
        }
        "scene.pos_sigma" => s.pos_sigma = parse(key, value, "a number")?,
        "scene.rcs_sigma" => s.rcs_sigma = parse(key, value, "a number")?,
        "scene.v_d_sigma" => s.v_d_sigma = parse(key, value, "a number")?,
        "scene.clutter" => s.clutter = parse_pair(key, value, "an integer")?,
        "scene.clutter_rcs_mean" => s.clutter_rcs_mean = parse(key, value, "a number")?,
        "scene.image_width" => s.image_width = parse(key, value, "an integer")?,
        "scene.image_height" => s.image_height = parse(key, value, "an integer")?,
        "scene.sweeps" => s.sweeps = parse(key, value, "an integer")?,
        "scene.sweep_period_s" => s.sweep_period_s = parse(key, value, "a number")?,
        "scene.frame_period_s" => s.frame_period_s = parse(key, value, "a number")?,
        "scene.ego_speed" => s.ego_speed = parse(key, value, "a number")?,
        "scene.placement_retries" => s.placement_retries = parse(key, value, "an integer")?,
        "scene.weather_weights" => {
            let w: Vec<f64> = parse_list(key, value, "a number")?;
            s.weather_weights = w
                .try_into()
                .map_err(|_| format!("{key}: expected four comma-separated weights"))?;
        }
        "scene.force_weather" => {
            s.force_weather = Some(match value {
                "clear" => Weather::Clear,
                "rain" => Weather::Rain,
                "night" => Weather::Night,
                "rain_night" => Weather::RainNight,
                _ => {
                    return Err(format!(
                        "{key}: expected clear, rain, night or rain_night, got {value:?}"
                    ))
                }
            })
        }
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// `scene.class.<name>.<field>` overrides for the built-in object classes.
fn apply_class(
    scene: &mut SceneGenConfig,
    rest: &str,
    key: &str,
    value: &str,
) -> std::result::Result<(), String> {
    let Some((name, field)) = rest.split_once('.') else {
        return Err(format!("{key}: expected scene.class.<name>.<field>"));
    };
    let known: Vec<&str> = scene.classes.iter().map(|c| c.name.as_str()).collect();
    let Some(class) = scene.classes.iter_mut().find(|c| c.name == name) else {
        return Err(format!("{key}: unknown class {name:?} (have {known:?})"));
    };
    match field {
        "count" => class.count = parse_pair(key, value, "an integer")?,
        "speed" => class.speed = parse_pair(key, value, "a number")?,
        "lane_bias" => class.lane_bias = parse(key, value, "a number")?,
        "rcs_mean" => class.rcs_mean = parse(key, value, "a number")?,
        "size_jitter" => class.size_jitter = parse(key, value, "a number")?,
        _ => {
            return Err(format!(
                "{key}: unknown class field {field:?} (count, speed, lane_bias, rcs_mean, size_jitter)"
            ))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_an_empty_file() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.pipeline, PipelineConfig::default());
        assert_eq!(cfg.scene, SceneGenConfig::default());
    }

    #[test]
    fn comments_blanks_and_overrides() {
        let text = "\n# training setup\npipeline.epochs = 7\npipeline.radar = none\n\nscene.extent = 9.5\nscene.class.car.count = 1,2\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.pipeline.epochs, 7);
        assert_eq!(cfg.pipeline.radar, RadarEncoderKind::None);
        assert_eq!(cfg.scene.extent, 9.5);
        assert_eq!(cfg.scene.classes[0].count, (1, 2));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "pipeline.epoch = 7",               // typo
            "pipeline.epochs = banana",         // bad value
            "pipeline.epochs",                  // no '='
            "scene.class.bicycle.count = 1,2",  // unknown class
            "scene.class.car.wheels = 4",       // unknown class field
            "scene.weather_weights = 1,2,3",    // wrong arity
            "pipeline.view = splat",            // unknown enum value
        ] {
            let err = parse_config(text).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{text} -> {err}");
        }
    }

    #[test]
    fn whole_config_is_validated() {
        // Parses fine, but the grid is not a whole number of cells.
        let err = parse_config("pipeline.grid.cell = 0.7").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn lists_and_pairs_parse() {
        let cfg = parse_config(
            "pipeline.cam_stage_blocks = 2, 2, 1\nscene.lane_offsets = -3.0, 3.0\nscene.force_weather = night\n",
        )
        .unwrap();
        assert_eq!(cfg.pipeline.cam_stage_blocks, vec![2, 2, 1]);
        assert_eq!(cfg.scene.lane_offsets, vec![-3.0, 3.0]);
        assert_eq!(cfg.scene.force_weather, Some(Weather::Night));
    }
}
