//! Scratch trend dry-run: trains camera-only and fusion configs on a small
//! synthetic split and prints the metric gaps. Not part of the test suite.

use std::time::Instant;

use bevfuse_core::data::{generate_scene, SampleBundle, SceneGenConfig};
use bevfuse_core::geometry::BevGridSpec;
use bevfuse_core::metrics::EvalConfig;
use bevfuse_core::pipeline::{
    eval_frames, train, Model, PipelineConfig, RadarEncoderKind, TransportCache,
};

fn trend_scene_cfg() -> SceneGenConfig {
    let mut cfg = SceneGenConfig {
        seed: 11,
        extent: 12.0,
        image_width: 64,
        image_height: 32,
        ..SceneGenConfig::default()
    };
    cfg.classes[0].count = (1, 3); // car
    cfg.classes[1].count = (1, 3); // pedestrian
    cfg.classes[2].count = (0, 1); // truck
    cfg
}

fn trend_pipeline_cfg(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        grid: BevGridSpec { x_min: -16.0, x_max: 16.0, y_min: -16.0, y_max: 16.0, cell: 2.0 },
        image_width: 64,
        image_height: 32,
        cam_base_channels: 8,
        cam_stage_blocks: vec![1, 1, 1],
        cam_channels: 16,
        depth_bins: 24,
        d_min: 1.0,
        d_max: 25.0,
        radar_channels: 16,
        radar_max_cells: 256,
        radar_max_points: 6,
        bev_blocks: 1,
        head_channels: 32,
        epochs: 15,
        lr: 2e-3,
        ..PipelineConfig::default()
    }
}

fn main() {
    let scfg = trend_scene_cfg();
    let t0 = Instant::now();
    let train_set: Vec<SampleBundle> =
        (0..300u64).map(|t| generate_scene(&scfg, t).unwrap()).collect();
    let eval_set: Vec<SampleBundle> =
        (1000..1100u64).map(|t| generate_scene(&scfg, t).unwrap()).collect();
    println!("generated 400 frames in {:.1} s", t0.elapsed().as_secs_f64());
    let night: Vec<SampleBundle> = eval_set
        .iter()
        .filter(|s| s.description.contains("night"))
        .cloned()
        .collect();
    println!("eval: {} frames, {} night", eval_set.len(), night.len());

    let eval_cfg = EvalConfig {
        class_names: vec!["car".into(), "pedestrian".into(), "truck".into()],
        ..EvalConfig::default()
    };

    for seed in [1u64] {
        for radar in [RadarEncoderKind::BevFeatureNet, RadarEncoderKind::None] {
            let mut pcfg = trend_pipeline_cfg(seed);
            pcfg.radar = radar;
            let model: Model<f32> = Model::new(&pcfg).unwrap();
            let t1 = Instant::now();
            let stats = train(&model, &train_set, |s| {
                println!(
                    "  [{radar:?} seed {seed}] epoch {} total {:.4} heat {:.4} reg {:.4}",
                    s.epoch, s.total, s.heatmap_loss, s.reg_loss
                );
                if s.epoch % 3 == 2 {
                    let probe = eval_frames(&model, &eval_set[..40]).unwrap();
                    let r = bevfuse_core::metrics::evaluate(&probe, &eval_cfg).unwrap();
                    println!("    probe: mAP {:.3} mAVE {:.3}", r.map, r.mave);
                }
            })
            .unwrap();
            let _ = stats;
            println!("trained {radar:?} seed {seed} in {:.1} s", t1.elapsed().as_secs_f64());

            let frames = eval_frames(&model, &eval_set).unwrap();
            let report = bevfuse_core::metrics::evaluate(&frames, &eval_cfg).unwrap();
            let nf = eval_frames(&model, &night).unwrap();
            let nreport = bevfuse_core::metrics::evaluate(&nf, &eval_cfg).unwrap();
            println!(
                "{radar:?} seed {seed}: full mAP {:.3} mAVE {:.3} NDS {:.3} | night mAP {:.3} mAVE {:.3}",
                report.map, report.mave, report.nds, nreport.map, nreport.mave
            );
            for c in &report.classes {
                println!(
                    "   class {}: AP {:?} ave {:.3} matches {}",
                    c.name,
                    c.ap.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                    c.tp_errors.ave,
                    c.matches
                );
            }
            let _ = TransportCache::build(&pcfg, &eval_set[0].cameras).unwrap();
        }
    }
}
