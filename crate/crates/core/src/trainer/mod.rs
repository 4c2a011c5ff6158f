//! Staged adversarial training: reconstruction warm-up, gradient-balanced
//! loss weights, alternating discriminator and generator updates,
//! polynomial learning-rate decay and resumable checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{default_stages, poly_lr, LossTerm, Stage, TrainConfig};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::data::{make_batch, Dataset, Prefetcher, Sampler};
use crate::error::{Error, Result};
use crate::imaging::{compose_batch, CompletionBatch};
use crate::losses::{completion_node, d_loss_node, g_loss_node, perceptual_node, reconstruction_node, LabelKind, LossParts};
use crate::networks::{build_discriminator, build_generator, Discriminator, Generator};
use crate::nn::{Bound, Mode, ParamSet};
use crate::optim::Adam;
use crate::perceptual::{load_backbone, FeatureExtractor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOSS_LOG_HEADER: [&str; 7] = ["step", "stage", "L_r", "L_a^G", "L_a^D", "L_p", "lr"];

/// One generator update's bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub stage: usize,
    pub reconstruction: f64,
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub perceptual: f64,
    pub lr: f64,
}

/// Per-batch global gradient norms of each loss term at unit weight.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientSeries {
    pub reconstruction: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub perceptual: Vec<f64>,
}

impl GradientSeries {
    /// Medians `[g_r, g_a, g_p]`.
    pub fn medians(&self) -> [f64; 3] {
        [median(&self.reconstruction), median(&self.adversarial), median(&self.perceptual)]
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `lambda1 = rho_a * med(g_r) / med(g_a)`, `lambda2 = rho_p * med(g_r) / med(g_p)`.
pub fn lambdas_from_norms(series: &GradientSeries, ratios: [f64; 2]) -> Result<(f64, f64)> {
    let [gr, ga, gp] = series.medians();
    for (name, m) in [("reconstruction", gr), ("adversarial", ga), ("perceptual", gp)] {
        if m <= 0.0 || !m.is_finite() {
            return Err(Error::Balancing(format!("median {name} gradient norm is {m}; the loss path is dead")));
        }
    }
    Ok((ratios[0] * gr / ga, ratios[1] * gr / gp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub series: GradientSeries,
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub global_step: u64,
    pub stage_index: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub balanced: bool,
    pub history: Vec<LossRecord>,
    pub balance: Option<BalanceReport>,
}

impl TrainState {
    /// State before the first step. Without balancing the configured loss
    /// weights apply from the start.
    pub fn initial(config: &TrainConfig) -> Self {
        let (lambda1, lambda2) = if config.balance { (0.0, 0.0) } else { (config.loss.lambda1, config.loss.lambda2) };
        Self { global_step: 0, stage_index: 0, lambda1, lambda2, balanced: !config.balance, history: Vec::new(), balance: None }
    }
}

struct LossNodes {
    reconstruction: NodeId,
    adversarial: Option<NodeId>,
    perceptual: Option<NodeId>,
}

pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    extractor: FeatureExtractor<T>,
    g_opt: Adam<T>,
    d_opt: Adam<T>,
    state: TrainState,
    rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
    sampler: Sampler,
    dataset: Arc<Dataset>,
    prefetch: Option<Prefetcher<T>>,
    last_checkpoint: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Validation("training dataset is empty".into()));
        }
        if dataset.target_size() != config.dataset.target_size {
            return Err(Error::Config(format!(
                "dataset produces {}px images but dataset.target_size is {}",
                dataset.target_size(),
                config.dataset.target_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = build_generator(&config.generator, &mut rng)?;
        let discriminator = build_discriminator(&config.discriminator, &mut rng)?;
        let extractor = load_backbone(&config.perceptual)?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.dataset.seed);
        let sampler = Sampler::new(dataset.len(), true, true, &mut data_rng);
        Ok(Self {
            g_opt: Adam::new(config.adam, &generator.params),
            d_opt: Adam::new(config.adam, &discriminator.params),
            state: TrainState::initial(&config),
            config,
            generator,
            discriminator,
            extractor,
            rng,
            data_rng,
            sampler,
            dataset: Arc::new(dataset),
            prefetch: None,
            last_checkpoint: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn extractor(&self) -> &FeatureExtractor<T> {
        &self.extractor
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    /// Override the loss weights, e.g. to skip balancing in experiments.
    pub fn set_lambdas(&mut self, lambda1: f64, lambda2: f64) {
        self.state.lambda1 = lambda1;
        self.state.lambda2 = lambda2;
        self.state.balanced = true;
    }

    /// Next training batch from the sampler (or the prefetch queue).
    pub fn next_batch(&mut self) -> Result<CompletionBatch<T>> {
        if self.config.prefetch > 0 && self.prefetch.is_none() {
            self.prefetch = Some(Prefetcher::spawn(
                Arc::clone(&self.dataset),
                self.sampler.clone(),
                self.data_rng.next_u64(),
                self.config.batch_size,
                self.config.mask,
                self.config.dataset.augment(),
                self.config.prefetch,
            ));
        }
        match &self.prefetch {
            Some(p) => p.next_batch(),
            None => make_batch(
                &self.dataset,
                &mut self.sampler,
                self.config.batch_size,
                &self.config.mask,
                &self.config.dataset.augment(),
                &mut self.data_rng,
            ),
        }
    }

    fn non_finite(&self, term: &str) -> Error {
        Error::NonFinite { step: self.state.global_step + 1, term: term.into(), last_checkpoint: self.last_checkpoint.clone() }
    }

    /// Generator output for a batch in training mode, without gradients and
    /// without touching the running statistics.
    fn generate_detached(&self, input4: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut s = Bound::new(&mut g, &self.generator.params, &self.generator.buffers, Mode::Train, false);
        let x = g.input(input4.clone(), false);
        let y = self.generator.forward(&mut g, &mut s, x)?;
        Ok(g.value(y).clone())
    }

    /// What the discriminator sees as fake.
    pub fn fake_images(&self, batch: &CompletionBatch<T>) -> Result<Tensor<T>> {
        let raw = self.generate_detached(&batch.input4)?;
        if self.config.replace_context {
            compose_batch(&raw, &batch.gt, &batch.mask)
        } else {
            Ok(raw)
        }
    }

    /// One discriminator update on real images and detached fakes.
    pub fn train_step_d(&mut self, batch: &CompletionBatch<T>, lr: f64) -> Result<f64> {
        let fake = self.fake_images(batch)?;
        let n = batch.len();
        let real_t: Vec<T> = self.config.loss.draw_labels(LabelKind::Real, n, &mut self.rng);
        let fake_t: Vec<T> = self.config.loss.draw_labels(LabelKind::Fake, n, &mut self.rng);
        let (value, grads, updates) = {
            let mut g = Graph::new();
            let mut s = Bound::new(&mut g, &self.discriminator.params, &self.discriminator.buffers, Mode::Train, true);
            let r = g.input(batch.gt.clone(), false);
            let f = g.input(fake, false);
            let lr_node = self.discriminator.forward(&mut g, &mut s, r)?;
            let lf_node = self.discriminator.forward(&mut g, &mut s, f)?;
            let loss = d_loss_node(&mut g, lr_node, lf_node, &real_t, &fake_t)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(self.non_finite("L_a^D"));
            }
            let grads = g.backward(loss)?;
            (value, s.grads(&g, &grads), s.take_updates())
        };
        self.d_opt.update(&mut self.discriminator.params, &grads, lr)?;
        self.discriminator.absorb_batch_statistics(updates);
        Ok(value)
    }

    fn loss_nodes<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        out: NodeId,
        batch: &CompletionBatch<T>,
        adversarial: bool,
        perceptual: bool,
    ) -> Result<LossNodes> {
        let reconstruction = reconstruction_node(g, out, &batch.gt, &batch.mask)?;
        let adversarial = if adversarial {
            let fake = if self.config.replace_context { completion_node(g, out, &batch.gt, &batch.mask)? } else { out };
            // Train-mode statistics, but the discriminator's buffers stay put.
            let mut ds = Bound::new(g, &self.discriminator.params, &self.discriminator.buffers, Mode::Train, false);
            let logits = self.discriminator.forward(g, &mut ds, fake)?;
            Some(g_loss_node(g, logits)?)
        } else {
            None
        };
        let perceptual = if perceptual {
            Some(perceptual_node(g, &self.extractor, out, &batch.gt, &batch.mask, &self.config.loss.alpha)?)
        } else {
            None
        };
        Ok(LossNodes { reconstruction, adversarial, perceptual })
    }

    /// One generator update on the stage's active terms. Inactive terms are
    /// reported as 0 and never enter the graph.
    pub fn train_step_g(&mut self, batch: &CompletionBatch<T>, stage: &Stage, lr: f64) -> Result<LossParts> {
        let (parts, grads, updates) = {
            let mut g = Graph::new();
            let mut s = Bound::new(&mut g, &self.generator.params, &self.generator.buffers, Mode::Train, true);
            let x = g.input(batch.input4.clone(), false);
            let out = self.generator.forward(&mut g, &mut s, x)?;
            let nodes = self.loss_nodes(&mut g, out, batch, stage.has(LossTerm::Adversarial), stage.has(LossTerm::Perceptual))?;
            let value = |g: &Graph<'_, T>, n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).data()[0].as_f64());
            let parts = LossParts {
                reconstruction: value(&g, Some(nodes.reconstruction)),
                adversarial: value(&g, nodes.adversarial),
                perceptual: value(&g, nodes.perceptual),
            };
            for (name, v) in [("L_r", parts.reconstruction), ("L_a^G", parts.adversarial), ("L_p", parts.perceptual)] {
                if !v.is_finite() {
                    return Err(self.non_finite(name));
                }
            }
            let mut terms = Vec::with_capacity(3);
            if stage.has(LossTerm::Reconstruction) {
                terms.push((nodes.reconstruction, T::one()));
            }
            if let Some(a) = nodes.adversarial {
                terms.push((a, T::from_f64_lossy(self.state.lambda1)));
            }
            if let Some(p) = nodes.perceptual {
                terms.push((p, T::from_f64_lossy(self.state.lambda2)));
            }
            let total = g.weighted_sum(&terms)?;
            let grads = g.backward(total)?;
            let pg = s.grads(&g, &grads);
            if pg.iter().any(|t| !t.all_finite()) {
                return Err(self.non_finite("generator gradient"));
            }
            (parts, pg, s.take_updates())
        };
        self.g_opt.update(&mut self.generator.params, &grads, lr)?;
        self.generator.absorb_batch_statistics(updates);
        let reported_r = if stage.has(LossTerm::Reconstruction) { parts.reconstruction } else { 0.0 };
        Ok(LossParts { reconstruction: reported_r, ..parts })
    }

    /// Global generator gradient norms of each term at unit weight over
    /// `batches` fresh batches. Nothing is updated.
    pub fn measure_gradient_norms(&mut self, batches: usize) -> Result<GradientSeries> {
        let mut series = GradientSeries::default();
        for _ in 0..batches {
            let batch = self.next_batch()?;
            let mut g = Graph::new();
            let mut s = Bound::new(&mut g, &self.generator.params, &self.generator.buffers, Mode::Train, true);
            let x = g.input(batch.input4.clone(), false);
            let out = self.generator.forward(&mut g, &mut s, x)?;
            let nodes = self.loss_nodes(&mut g, out, &batch, true, true)?;
            let norm = |root: NodeId| -> Result<f64> { Ok(s.grad_sq_norm(&g.backward(root)?).as_f64().sqrt()) };
            series.reconstruction.push(norm(nodes.reconstruction)?);
            series.adversarial.push(norm(nodes.adversarial.expect("requested"))?);
            series.perceptual.push(norm(nodes.perceptual.expect("requested"))?);
        }
        Ok(series)
    }

    /// Choose `lambda1`, `lambda2` from gradient norms measured over the
    /// warm-up window.
    pub fn balance_hyperparameters(&mut self) -> Result<BalanceReport> {
        let series = self.measure_gradient_norms(self.config.warmup_balance_steps)?;
        let (lambda1, lambda2) = lambdas_from_norms(&series, self.config.target_ratios)?;
        log::info!("balanced loss weights: lambda1 = {lambda1:.6e}, lambda2 = {lambda2:.6e}");
        let report = BalanceReport { series, lambda1, lambda2 };
        self.state.lambda1 = lambda1;
        self.state.lambda2 = lambda2;
        self.state.balanced = true;
        self.state.balance = Some(report.clone());
        Ok(report)
    }

    pub fn is_finished(&self) -> bool {
        self.state.global_step >= self.config.total_steps()
    }

    /// Run one training step of the current stage, balancing first if the
    /// stage needs weights that have not been chosen yet.
    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.state.global_step;
        let si = self.config.stage_at(step).ok_or(Error::EndOfData)?;
        self.state.stage_index = si;
        let stage = self.config.stages[si].clone();
        if stage.needs_balancing() && !self.state.balanced {
            self.balance_hyperparameters()?;
        }
        let lr = poly_lr(step, &self.config);
        let batch = self.next_batch()?;
        let adversarial_d = if stage.has(LossTerm::Adversarial) { self.train_step_d(&batch, lr)? } else { 0.0 };
        let parts = self.train_step_g(&batch, &stage, lr)?;
        self.state.global_step += 1;
        let record = LossRecord {
            step: self.state.global_step,
            stage: si,
            reconstruction: parts.reconstruction,
            adversarial_g: parts.adversarial,
            adversarial_d,
            perceptual: parts.perceptual,
            lr,
        };
        self.state.history.push(record);
        Ok(record)
    }

    /// Train to the end of the schedule, writing the loss log and periodic
    /// checkpoints under `output_dir`. Returns the final checkpoint path.
    pub fn run(&mut self) -> Result<PathBuf> {
        let dir = self.config.output_dir.clone();
        fs::create_dir_all(&dir)?;
        let mut log = csv::Writer::from_path(dir.join("losses.csv"))?;
        log.write_record(LOSS_LOG_HEADER)?;
        for r in &self.state.history {
            write_record(&mut log, r)?;
        }
        while !self.is_finished() {
            let record = self.step()?;
            write_record(&mut log, &record)?;
            let every = self.config.checkpoint_every;
            if every > 0 && record.step % every == 0 && !self.is_finished() {
                log.flush()?;
                let path = dir.join(format!("step_{:08}.ckpt", record.step));
                self.save_checkpoint(&path)?;
                log::info!("step {}: wrote {}", record.step, path.display());
            }
        }
        log.flush()?;
        let path = dir.join("final.ckpt");
        self.save_checkpoint(&path)?;
        Ok(path)
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            state: self.state.clone(),
            dtype: String::new(),
            rng: self.rng.clone(),
            data_rng: self.data_rng.clone(),
            sampler: self.sampler.clone(),
            g_adam_step: self.g_opt.step,
            d_adam_step: self.d_opt.step,
            tensors: Vec::new(),
        };
        let g = &self.generator;
        let d = &self.discriminator;
        let g_names: Vec<&str> = g.params.iter().map(|(n, _)| n).collect();
        let d_names: Vec<&str> = d.params.iter().map(|(n, _)| n).collect();
        let groups = vec![
            ("generator.params", group(&g.params)),
            ("generator.buffers", group(&g.buffers)),
            ("discriminator.params", group(&d.params)),
            ("discriminator.buffers", group(&d.buffers)),
            ("g_adam.first", pair(&g_names, &self.g_opt.first)),
            ("g_adam.second", pair(&g_names, &self.g_opt.second)),
            ("d_adam.first", pair(&d_names, &self.d_opt.first)),
            ("d_adam.second", pair(&d_names, &self.d_opt.second)),
        ];
        write_checkpoint(path, header, &groups)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Write a generator-only checkpoint for inference. It cannot be resumed.
    pub fn export_generator(&self, path: &Path) -> Result<()> {
        save_generator(path, &self.config, &self.state, &self.generator)
    }

    /// Continue a run from a checkpoint, restoring parameters, optimizer
    /// moments, running statistics, random streams and sampler position.
    pub fn resume(path: &Path, dataset: Dataset) -> Result<Self> {
        let mut ckpt = read_checkpoint::<T>(path)?;
        let h = ckpt.header.clone();
        let mut t = Self::new(h.config.clone(), dataset)?;
        t.generator.params.assign(ckpt.take_group("generator.params")?)?;
        t.generator.buffers.assign(ckpt.take_group("generator.buffers")?)?;
        t.discriminator.params.assign(ckpt.take_group("discriminator.params")?)?;
        t.discriminator.buffers.assign(ckpt.take_group("discriminator.buffers")?)?;
        t.g_opt.first = ckpt.take_tensors("g_adam.first")?;
        t.g_opt.second = ckpt.take_tensors("g_adam.second")?;
        t.d_opt.first = ckpt.take_tensors("d_adam.first")?;
        t.d_opt.second = ckpt.take_tensors("d_adam.second")?;
        t.g_opt.step = h.g_adam_step;
        t.d_opt.step = h.d_adam_step;
        if t.sampler.order.len() != h.sampler.order.len() {
            return Err(Error::Validation(format!(
                "checkpoint sampled {} images but the dataset has {}",
                h.sampler.order.len(),
                t.sampler.order.len()
            )));
        }
        t.state = h.state;
        t.rng = h.rng;
        t.data_rng = h.data_rng;
        t.sampler = h.sampler;
        t.last_checkpoint = Some(path.to_path_buf());
        Ok(t)
    }
}

fn write_record<W: std::io::Write>(w: &mut csv::Writer<W>, r: &LossRecord) -> Result<()> {
    w.write_record([
        r.step.to_string(),
        r.stage.to_string(),
        r.reconstruction.to_string(),
        r.adversarial_g.to_string(),
        r.adversarial_d.to_string(),
        r.perceptual.to_string(),
        r.lr.to_string(),
    ])?;
    Ok(())
}

/// Write a checkpoint holding only `generator`, readable by [`load_generator`].
pub fn save_generator<T: Scalar>(path: &Path, config: &TrainConfig, state: &TrainState, generator: &Generator<T>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let header = CheckpointHeader {
        config: config.clone(),
        state: state.clone(),
        dtype: String::new(),
        sampler: Sampler::new(0, false, false, &mut rng),
        rng: rng.clone(),
        data_rng: rng,
        g_adam_step: 0,
        d_adam_step: 0,
        tensors: Vec::new(),
    };
    write_checkpoint(path, header, &[("generator.params", group(&generator.params)), ("generator.buffers", group(&generator.buffers))])
}

/// Rebuild the generator stored in a checkpoint.
pub fn load_generator<T: Scalar>(path: &Path) -> Result<(Generator<T>, CheckpointHeader)> {
    let mut ckpt = read_checkpoint::<T>(path)?;
    let spec = &ckpt.header.config.generator;
    let mut generator = build_generator::<T, _>(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    generator.params.assign(ckpt.take_group("generator.params")?)?;
    generator.buffers.assign(ckpt.take_group("generator.buffers")?)?;
    Ok((generator, ckpt.header))
}

fn group<T: Scalar>(set: &ParamSet<T>) -> Vec<(&str, &Tensor<T>)> {
    set.iter().collect()
}

fn pair<'a, T: Scalar>(names: &[&'a str], ts: &'a [Tensor<T>]) -> Vec<(&'a str, &'a Tensor<T>)> {
    names.iter().copied().zip(ts.iter()).collect()
}
