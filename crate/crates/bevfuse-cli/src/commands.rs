//! One function per subcommand. All of them print human-readable progress
//! to stdout and return a [`CliError`] whose category decides the process
//! exit code.

use std::path::Path;

use bevfuse_core::checks::{run_suite, SUITE_NAMES};
use bevfuse_core::data::{load_sample, read_manifest, write_dataset, DatasetManifest, SampleBundle};
use bevfuse_core::metrics::{evaluate, matches_description, EvalConfig, MetricsReport};
use bevfuse_core::pipeline::{
    bench_model, eval_frames, load_bundle, stats_csv, train, Model, PipelineConfig,
};

use crate::config::load_config;
use crate::{CliError, Result};

/// Generate a dataset: `scene.*` config keys drive the generator.
pub fn run_gen(config: &Path, out: &Path, scenes: u64) -> Result<()> {
    let cfg = load_config(config)?;
    if scenes == 0 {
        return Err(CliError::Config("--scenes must be at least 1".into()));
    }
    let manifest = write_dataset(out, &cfg.scene, 0, scenes)
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "wrote {} samples ({} files) to {}",
        manifest.samples.len(),
        manifest.files.len(),
        out.display()
    );
    Ok(())
}

/// Load every sample a manifest lists, in manifest order.
fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SampleBundle>)> {
    let manifest = read_manifest(dir).map_err(|e| CliError::Data(e.to_string()))?;
    let samples: Vec<SampleBundle> = manifest
        .samples
        .iter()
        .map(|id| load_sample(dir, id).map_err(|e| CliError::Data(format!("{id}: {e}"))))
        .collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(CliError::Data(format!(
            "{}: dataset lists no samples",
            dir.display()
        )));
    }
    Ok((manifest, samples))
}

/// A model config only fits a dataset when the image geometry matches, the
/// BEV grid covers the generator extent, and the class count agrees.
fn preflight(pipeline: &PipelineConfig, manifest: &DatasetManifest) -> Result<()> {
    let scene = &manifest.config;
    if (pipeline.image_width, pipeline.image_height) != (scene.image_width, scene.image_height) {
        return Err(CliError::Config(format!(
            "config renders {}x{} images but the dataset holds {}x{}",
            pipeline.image_width, pipeline.image_height, scene.image_width, scene.image_height
        )));
    }
    let g = &pipeline.grid;
    if scene.extent > -g.x_min || scene.extent > g.x_max || scene.extent > -g.y_min
        || scene.extent > g.y_max
    {
        return Err(CliError::Config(format!(
            "BEV grid x [{}, {}) y [{}, {}) does not cover the dataset extent ±{}",
            g.x_min, g.x_max, g.y_min, g.y_max, scene.extent
        )));
    }
    if pipeline.classes != manifest.class_names.len() {
        return Err(CliError::Config(format!(
            "config declares {} classes but the dataset has {} ({:?})",
            pipeline.classes,
            manifest.class_names.len(),
            manifest.class_names
        )));
    }
    Ok(())
}

/// Train a model on a generated dataset and write a self-describing model
/// file plus a per-epoch loss CSV next to it (`<out>.losses.csv`).
pub fn run_train(
    config: &Path,
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.pipeline.epochs = e;
    }
    if let Some(s) = seed {
        cfg.pipeline.seed = s;
    }
    cfg.pipeline
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let (manifest, samples) = load_dataset(data)?;
    preflight(&cfg.pipeline, &manifest)?;

    let model: Model<f32> =
        Model::new(&cfg.pipeline).map_err(|e| CliError::Config(e.to_string()))?;
    let stats = train(&model, &samples, |s| {
        println!(
            "epoch {:>3}: total {:.4} (heatmap {:.4}, regression {:.4})",
            s.epoch, s.total, s.heatmap_loss, s.reg_loss
        );
    })
    .map_err(|e| CliError::Data(e.to_string()))?;

    model
        .save_bundle(out)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let csv_path = sibling(out, "losses.csv");
    std::fs::write(&csv_path, stats_csv(&stats)).map_err(|e| CliError::Data(e.to_string()))?;
    println!("model written to {}", out.display());
    println!("loss log written to {}", csv_path.display());
    Ok(())
}

/// `<path>.<suffix>`, keeping the original extension.
fn sibling(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

/// Evaluate a trained model file on a dataset, optionally keeping only
/// samples whose description contains `filter` (case-insensitive). Writes
/// the report as JSON, an AP-per-threshold CSV next to it, and prints the
/// text table.
pub fn run_eval(ckpt: &Path, data: &Path, filter: Option<&str>, report_path: &Path) -> Result<()> {
    let (cfg, model) = load_bundle::<f32>(ckpt).map_err(|e| match e {
        bevfuse_core::pipeline::PipelineError::BadConfig(m) => CliError::Config(m),
        other => CliError::Data(other.to_string()),
    })?;
    let (manifest, samples) = load_dataset(data)?;
    preflight(&cfg, &manifest)?;

    let term = filter.unwrap_or("");
    let kept: Vec<SampleBundle> = samples
        .into_iter()
        .filter(|s| matches_description(&s.description, term))
        .collect();
    if kept.is_empty() {
        return Err(CliError::Data(format!(
            "no sample description contains {term:?}"
        )));
    }
    println!("evaluating {} samples (filter {term:?})", kept.len());

    let eval_cfg = EvalConfig {
        class_names: manifest.class_names.clone(),
        ..EvalConfig::default()
    };
    let frames = eval_frames(&model, &kept).map_err(|e| CliError::Data(e.to_string()))?;
    let report = evaluate(&frames, &eval_cfg).map_err(|e| CliError::Data(e.to_string()))?;

    let json = report.to_json().map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(report_path, json).map_err(|e| CliError::Data(e.to_string()))?;
    let csv_path = sibling(report_path, "ap.csv");
    std::fs::write(&csv_path, ap_csv(&report)).map_err(|e| CliError::Data(e.to_string()))?;

    println!("{}", report.render_table());
    println!("report written to {}", report_path.display());
    println!("AP series written to {}", csv_path.display());
    Ok(())
}

/// Per-class AP at every match threshold, as a plottable CSV series.
fn ap_csv(report: &MetricsReport) -> String {
    let mut out = String::from("class,threshold_m,ap\n");
    for class in &report.classes {
        for (t, ap) in report.thresholds.iter().zip(&class.ap) {
            out.push_str(&format!("{},{t},{ap:.6}\n", class.name));
        }
    }
    out
}

/// Benchmark per-stage latency over at least 100 frames and write the
/// timing report as JSON.
pub fn run_bench(config: &Path, data: &Path, report_path: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (manifest, samples) = load_dataset(data)?;
    preflight(&cfg.pipeline, &manifest)?;
    let model: Model<f32> =
        Model::new(&cfg.pipeline).map_err(|e| CliError::Config(e.to_string()))?;
    let report = bench_model(&model, &samples, 100).map_err(|e| CliError::Data(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(report_path, json).map_err(|e| CliError::Data(e.to_string()))?;
    println!("{}", report.render_table());
    println!("report written to {}", report_path.display());
    Ok(())
}

/// Run one self-check suite; failures are check errors (exit 4).
pub fn run_check(suite: &str) -> Result<()> {
    let Some(report) = run_suite(suite) else {
        return Err(CliError::Config(format!(
            "unknown suite {suite:?} (have {SUITE_NAMES:?})"
        )));
    };
    println!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "{}: {} of {} cases failed",
            report.suite,
            report.failures.len(),
            report.cases
        )))
    }
}
