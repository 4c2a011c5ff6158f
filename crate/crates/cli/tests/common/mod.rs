//! Fixtures shared by the command and service tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use inpaint_core::data::write_texture_dataset;
use inpaint_core::imaging::MaskSpec;
use inpaint_core::networks::{build_generator, DiscriminatorSpec, GeneratorSpec};
use inpaint_core::perceptual::{Backbone, PerceptualSpec};
use inpaint_core::trainer::{save_generator, LossTerm, Stage, TrainConfig, TrainState};
use inpaint_core::Generator32;
use inpaint_lab::commands::cmd_train;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub data: PathBuf,
}

pub fn toy_config(root: &Path) -> TrainConfig {
    let data = root.join("data");
    let mut cfg = TrainConfig::default();
    cfg.dataset = write_texture_dataset(&data, 6, 4, 32, 21).unwrap();
    cfg.dataset.max_shift = 2;
    cfg.generator = GeneratorSpec { levels: 3, encoder_channels: vec![4, 8, 8], dilation_rates: vec![1, 2], ..Default::default() };
    cfg.discriminator = DiscriminatorSpec { channels: vec![4, 8], input_size: 32, ..Default::default() };
    cfg.perceptual = PerceptualSpec { backbone: Backbone::RandomFallback { seed: 1, widths: [4, 4, 8, 8, 8] }, ..Default::default() };
    cfg.mask = MaskSpec { min_size: 6, max_size: 12 };
    cfg.batch_size = 2;
    cfg.warmup_balance_steps = 2;
    cfg.checkpoint_every = 0;
    cfg.stages = vec![
        Stage { name: "recon".into(), losses: vec![LossTerm::Reconstruction], steps: 2 },
        Stage { name: "hybrid".into(), losses: vec![LossTerm::Reconstruction, LossTerm::Adversarial, LossTerm::Perceptual], steps: 2 },
    ];
    cfg.output_dir = root.join("run");
    cfg
}

pub fn write_config(path: &Path, cfg: &TrainConfig) {
    fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

/// A toy dataset, its config and a briefly trained checkpoint.
pub fn trained() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let config = dir.path().join("config.json");
    write_config(&config, &cfg);
    let checkpoint = cmd_train(&config, None).unwrap();
    Fixture { data: cfg.dataset.root.clone(), dir, config, checkpoint }
}

/// Generator-only checkpoint of the default architecture.
pub fn default_model_checkpoint(dir: &Path) -> PathBuf {
    let cfg = TrainConfig::default();
    let g: Generator32 = build_generator(&cfg.generator, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let path = dir.join("default.ckpt");
    save_generator(&path, &cfg, &TrainState::initial(&cfg), &g).unwrap();
    path
}

pub fn random_rgb(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Arbitrary blotchy mask using the full 0-255 range around the threshold.
pub fn random_mask(w: u32, h: u32, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(w, h, |_, _| Luma([if rng.random::<f64>() < 0.3 { rng.random_range(128..=255) } else { rng.random_range(0..128) }]))
}

pub fn texture_pngs(data: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(data).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "png")).collect();
    v.sort();
    v
}
