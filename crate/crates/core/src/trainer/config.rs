use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::imaging::MaskSpec;
use crate::losses::LossWeights;
use crate::networks::{DiscriminatorSpec, GeneratorSpec};
use crate::optim::AdamConfig;
use crate::perceptual::PerceptualSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Reconstruction,
    Adversarial,
    Perceptual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub losses: Vec<LossTerm>,
    pub steps: u64,
}

impl Stage {
    pub fn has(&self, term: LossTerm) -> bool {
        self.losses.contains(&term)
    }

    /// Whether the stage needs balanced weights before it runs.
    pub fn needs_balancing(&self) -> bool {
        self.has(LossTerm::Adversarial) || self.has(LossTerm::Perceptual)
    }
}

/// Reconstruction warm-up for 30% of `total` steps, then all three losses.
pub fn default_stages(total: u64) -> Vec<Stage> {
    let warm = (total * 3 / 10).max(1);
    vec![
        Stage { name: "reconstruction".into(), losses: vec![LossTerm::Reconstruction], steps: warm },
        Stage {
            name: "hybrid".into(),
            losses: vec![LossTerm::Reconstruction, LossTerm::Adversarial, LossTerm::Perceptual],
            steps: total.saturating_sub(warm).max(1),
        },
    ]
}

/// Everything a training run needs; mirrors the JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub perceptual: PerceptualSpec,
    pub loss: LossWeights,
    pub mask: MaskSpec,
    pub dataset: DatasetSpec,
    pub stages: Vec<Stage>,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_power: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Batches measured when choosing the loss weights.
    pub warmup_balance_steps: usize,
    /// Target gradient ratios `[rho_a, rho_p]`.
    pub target_ratios: [f64; 2],
    /// When off, `loss.lambda1` / `loss.lambda2` are used as given.
    pub balance: bool,
    /// Feed the discriminator the composition rather than the raw output.
    pub replace_context: bool,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    /// Depth of the background batch queue; 0 produces batches inline.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            perceptual: PerceptualSpec::default(),
            loss: LossWeights::default(),
            mask: MaskSpec::default(),
            dataset: DatasetSpec::default(),
            stages: default_stages(100_000),
            lr_start: 1e-3,
            lr_end: 1e-6,
            decay_power: 1.0,
            adam: AdamConfig::default(),
            batch_size: 16,
            seed: 0,
            warmup_balance_steps: 50,
            target_ratios: [1.0, 1.0],
            balance: true,
            replace_context: true,
            checkpoint_every: 5_000,
            output_dir: PathBuf::from("runs/default"),
            prefetch: 0,
        }
    }
}

fn field<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{name}: {m}")),
        other => other,
    })
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
        let config: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Index of the stage that runs step `step` (0-based), if any.
    pub fn stage_at(&self, step: u64) -> Option<usize> {
        let mut end = 0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.steps;
            if step < end {
                return Some(i);
            }
        }
        None
    }

    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        field("generator", self.generator.validate())?;
        field("discriminator", self.discriminator.validate())?;
        field("perceptual", self.perceptual.validate())?;
        field("loss", self.loss.validate())?;
        field("dataset", self.dataset.validate())?;
        let size = self.dataset.target_size;
        field("mask", self.mask.validate(size, size))?;
        if !size.is_multiple_of(self.generator.resolution_multiple()) {
            return Err(Error::Config(format!(
                "dataset.target_size {size} is not a multiple of {} required by generator.levels",
                self.generator.resolution_multiple()
            )));
        }
        if self.discriminator.input_size != size {
            return Err(Error::Config(format!(
                "discriminator.input_size {} differs from dataset.target_size {size}",
                self.discriminator.input_size
            )));
        }
        if self.perceptual.layer_weights.len() != self.loss.alpha.len() {
            return Err(Error::Config(format!(
                "loss.alpha has {} entries for {} perceptual taps",
                self.loss.alpha.len(),
                self.perceptual.layer_taps.len()
            )));
        }
        if !(self.lr_end > 0.0) {
            return Err(Error::Config(format!("lr_end must be positive, got {}", self.lr_end)));
        }
        if !(self.lr_start > self.lr_end) {
            return Err(Error::Config(format!("lr_end ({}) must be below lr_start ({})", self.lr_end, self.lr_start)));
        }
        if !(self.decay_power > 0.0 && self.decay_power.is_finite()) {
            return Err(Error::Config(format!("decay_power must be positive, got {}", self.decay_power)));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("stages must list at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.steps == 0 {
                return Err(Error::Config(format!("stages[{i}].steps must be at least 1")));
            }
            if s.losses.is_empty() {
                return Err(Error::Config(format!("stages[{i}].losses is empty")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.balance && self.warmup_balance_steps == 0 && self.stages.iter().any(Stage::needs_balancing) {
            return Err(Error::Config("warmup_balance_steps must be at least 1 when balancing".into()));
        }
        if self.target_ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("target_ratios must be finite and non-negative".into()));
        }
        for (name, b) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// `lr_end + (lr_start - lr_end) * (1 - step / total)^power`, with `step`
/// clamped to `[0, total]`.
pub fn poly_lr(step: u64, config: &TrainConfig) -> f64 {
    let total = config.total_steps();
    if total == 0 {
        return config.lr_start;
    }
    let step = step.min(total);
    if step == 0 {
        return config.lr_start;
    }
    if step == total {
        return config.lr_end;
    }
    let frac = 1.0 - step as f64 / total as f64;
    config.lr_end + (config.lr_start - config.lr_end) * frac.powf(config.decay_power)
}
