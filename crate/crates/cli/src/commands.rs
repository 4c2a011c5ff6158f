//! The `train`, `complete` and `evaluate` commands.

use std::fs;
use std::path::{Path, PathBuf};

use inpaint_core::data::{ingest_dataset, Split};
use inpaint_core::metrics::{emit_report, evaluate, MetricsReport, MetricsRow, Regime, ReportFormat};
use inpaint_core::trainer::{load_generator, TrainConfig};
use inpaint_core::{Generator32, Trainer32};

use crate::complete::{complete_rgb, threshold_mask};
use crate::AppResult;

/// Train from a config, or continue from `resume`. Returns the final
/// checkpoint path.
pub fn cmd_train(config_path: &Path, resume: Option<&Path>) -> AppResult<PathBuf> {
    let config = TrainConfig::load(config_path)?;
    let dataset = ingest_dataset(&config.dataset, Split::Train)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let t = Trainer32::resume(ckpt, dataset)?;
            log::info!("resuming {} at step {}", ckpt.display(), t.state().global_step);
            t
        }
        None => Trainer32::new(config, dataset)?,
    };
    Ok(trainer.run()?)
}

pub fn load_model(checkpoint: &Path) -> AppResult<Generator32> {
    Ok(load_generator::<f32>(checkpoint)?.0)
}

/// Complete `image_path` under `mask_path` and write the composition as PNG.
pub fn cmd_complete(checkpoint: &Path, image_path: &Path, mask_path: &Path, out_path: &Path) -> AppResult<()> {
    let generator = load_model(checkpoint)?;
    let image = image::open(image_path)?.to_rgb8();
    let mask = threshold_mask(&image::open(mask_path)?.to_luma8());
    let out = complete_rgb(&generator, &image, &mask)?;
    out.save_with_format(out_path, image::ImageFormat::Png)?;
    Ok(())
}

/// Evaluate a checkpoint on the test split of the config's dataset and
/// write `metrics.{txt,csv,json}` under `out_dir`.
pub fn cmd_evaluate(checkpoint: &Path, config_path: &Path, regime: Regime, mask_size: usize, seed: u64, out_dir: &Path) -> AppResult<MetricsRow> {
    let config = TrainConfig::load(config_path)?;
    let generator = load_model(checkpoint)?;
    let dataset = ingest_dataset(&config.dataset, Split::Test)?;
    let row = evaluate(&generator, &dataset, regime, mask_size, seed)?;
    let report = MetricsReport { rows: vec![row] };
    fs::create_dir_all(out_dir)?;
    for (format, ext) in [(ReportFormat::Text, "txt"), (ReportFormat::Csv, "csv"), (ReportFormat::Json, "json")] {
        fs::write(out_dir.join(format!("metrics.{ext}")), emit_report(&report, format)?)?;
    }
    Ok(row)
}

