//! Reconstruction, adversarial and perceptual losses and their weighted sum.
//!
//! Each loss comes in two forms: a graph builder used during training and a
//! plain value function built on top of it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{smooth_l1_value, Graph, NodeId};
use crate::error::{Error, Result};
use crate::imaging::broadcast_mask;
use crate::perceptual::FeatureExtractor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Per-tap perceptual weights.
    pub alpha: Vec<f64>,
    pub real_label_range: [f64; 2],
    pub fake_label_range: [f64; 2],
    /// When off, the discriminator trains against hard 1/0 targets.
    pub label_smoothing: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            alpha: vec![1.0; 3],
            real_label_range: [0.8, 1.0],
            fake_label_range: [0.0, 0.2],
            label_smoothing: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Real,
    Fake,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Config("alpha weights must be finite and non-negative".into()));
        }
        for (name, [lo, hi]) in [("real_label_range", self.real_label_range), ("fake_label_range", self.fake_label_range)] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] must be ordered within [0, 1]")));
            }
        }
        Ok(())
    }

    /// Discriminator targets for one batch: fresh uniform draws from the
    /// configured range, or hard labels when smoothing is off.
    pub fn draw_labels<T: Scalar, R: Rng + ?Sized>(&self, kind: LabelKind, n: usize, rng: &mut R) -> Vec<T> {
        let range = match kind {
            LabelKind::Real => self.real_label_range,
            LabelKind::Fake => self.fake_label_range,
        };
        if !self.label_smoothing {
            let hard = if kind == LabelKind::Real { T::one() } else { T::zero() };
            return vec![hard; n];
        }
        uniform_labels(range, n, rng)
    }
}

fn uniform_labels<T: Scalar, R: Rng + ?Sized>([lo, hi]: [f64; 2], n: usize, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| T::from_f64_lossy(lo + (hi - lo) * rng.random::<f64>())).collect()
}

/// One-sided smoothed labels with the default ranges: `[0.8, 1]` for real,
/// `[0, 0.2]` for fake.
pub fn smooth_labels<T: Scalar, R: Rng + ?Sized>(kind: LabelKind, n: usize, rng: &mut R) -> Vec<T> {
    LossWeights::default().draw_labels(kind, n, rng)
}

fn nan_error(term: &str, detail: &str) -> Error {
    Error::Numeric { term: term.into(), detail: detail.into() }
}

/// Elementwise smooth-L1 penalty.
pub fn smooth_l1<T: Scalar>(residual: &Tensor<T>) -> Result<Tensor<T>> {
    if residual.data().iter().any(|v| v.is_nan()) {
        return Err(nan_error("smooth_l1", "NaN residual"));
    }
    Ok(residual.map(smooth_l1_value))
}

/// Masked mean smooth-L1 between `generated` (node) and `gt`. `mask` is
/// `n x 1 x h x w`; the mean runs over masked pixels times channels.
pub fn reconstruction_node<'a, T: Scalar>(g: &mut Graph<'a, T>, generated: NodeId, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<NodeId> {
    let (_, c, _, _) = gt.dims4()?;
    let mask_c = broadcast_mask(mask, c)?;
    let target = g.input(gt.clone(), false);
    let diff = g.sub(generated, target)?;
    g.smooth_l1_mean(diff, Some(&mask_c))
}

pub fn reconstruction_loss<T: Scalar>(generated: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let x = g.input(generated.clone(), false);
    let l = reconstruction_node(&mut g, x, gt, mask)?;
    Ok(g.value(l).data()[0])
}

/// `M * generated + (1 - M) * gt` on the graph; gradients reach `generated`
/// only inside the mask.
pub fn completion_node<'a, T: Scalar>(g: &mut Graph<'a, T>, generated: NodeId, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<NodeId> {
    let mask_c = broadcast_mask(mask, gt.dims4()?.1)?;
    let kept = gt.zip_map(&mask_c, |v, m| v * (T::one() - m))?;
    let inside = g.mul_const(generated, &mask_c)?;
    g.add_const(inside, &kept)
}

/// Discriminator BCE on logits: real images against `real_targets`, fakes
/// against `fake_targets`, each averaged over its batch and summed.
pub fn d_loss_node<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    real_logits: NodeId,
    fake_logits: NodeId,
    real_targets: &[T],
    fake_targets: &[T],
) -> Result<NodeId> {
    let eps = T::from_f64_lossy(PROB_EPS);
    let real = g.bce_logits_mean(real_logits, real_targets, eps)?;
    let fake = g.bce_logits_mean(fake_logits, fake_targets, eps)?;
    g.weighted_sum(&[(real, T::one()), (fake, T::one())])
}

/// Generator adversarial loss `-mean log D(fake)` on logits.
pub fn g_loss_node<'a, T: Scalar>(g: &mut Graph<'a, T>, fake_logits: NodeId) -> Result<NodeId> {
    let n = g.value(fake_logits).len();
    g.bce_logits_mean(fake_logits, &vec![T::one(); n], T::from_f64_lossy(PROB_EPS))
}

fn check_probabilities<T: Scalar>(name: &str, p: &[T]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Shape(format!("{name} batch is empty")));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(nan_error(name, &format!("probability {v} outside [0, 1]")));
    }
    Ok(())
}

/// Mean BCE of probabilities against targets, with clamping.
pub fn bce_probabilities<T: Scalar>(p: &[T], targets: &[T]) -> T {
    let eps = T::from_f64_lossy(PROB_EPS);
    let one = T::one();
    let total: T = p
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.max(eps).min(one - eps);
            -(t * p.ln() + (one - t) * (one - p).ln())
        })
        .sum();
    total / T::from_usize(p.len()).expect("count fits")
}

/// Discriminator loss on probabilities, drawing targets from `weights`.
pub fn adversarial_d_loss<T: Scalar, R: Rng + ?Sized>(d_real: &[T], d_fake: &[T], weights: &LossWeights, rng: &mut R) -> Result<T> {
    check_probabilities("adversarial_d (real)", d_real)?;
    check_probabilities("adversarial_d (fake)", d_fake)?;
    let real_t = weights.draw_labels(LabelKind::Real, d_real.len(), rng);
    let fake_t = weights.draw_labels(LabelKind::Fake, d_fake.len(), rng);
    Ok(bce_probabilities(d_real, &real_t) + bce_probabilities(d_fake, &fake_t))
}

/// Generator loss `-mean log D(fake)` on probabilities.
pub fn adversarial_g_loss<T: Scalar>(d_fake: &[T]) -> Result<T> {
    check_probabilities("adversarial_g", d_fake)?;
    Ok(bce_probabilities(d_fake, &vec![T::one(); d_fake.len()]))
}

/// `sum_l alpha_l * mean smooth_l1(phi_l(gt * M) - phi_l(generated * M))`.
pub fn perceptual_node<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    extractor: &'a FeatureExtractor<T>,
    generated: NodeId,
    gt: &Tensor<T>,
    mask: &Tensor<T>,
    alpha: &[f64],
) -> Result<NodeId> {
    if alpha.is_empty() {
        return Err(Error::Config("perceptual loss has no layer taps".into()));
    }
    if alpha.len() != extractor.tap_names().len() {
        return Err(Error::Config(format!("{} alpha weights for {} taps", alpha.len(), extractor.tap_names().len())));
    }
    let mask_c = broadcast_mask(mask, gt.dims4()?.1)?;
    let gt_masked = gt.zip_map(&mask_c, |v, m| v * m)?;
    let gen_masked = g.mul_const(generated, &mask_c)?;
    let target = g.input(gt_masked, false);
    let real = extractor.extract(g, target)?;
    let fake = extractor.extract(g, gen_masked)?;
    let mut terms = Vec::with_capacity(alpha.len());
    for ((r, f), &a) in real.into_iter().zip(fake).zip(alpha) {
        let d = g.sub(r, f)?;
        terms.push((g.smooth_l1_mean(d, None)?, T::from_f64_lossy(a)));
    }
    g.weighted_sum(&terms)
}

pub fn perceptual_loss<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    generated: &Tensor<T>,
    gt: &Tensor<T>,
    mask: &Tensor<T>,
    alpha: &[f64],
) -> Result<T> {
    let mut g = Graph::new();
    let x = g.input(generated.clone(), false);
    let l = perceptual_node(&mut g, extractor, x, gt, mask, alpha)?;
    Ok(g.value(l).data()[0])
}

/// Per-term generator losses for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub reconstruction: f64,
    pub adversarial: f64,
    pub perceptual: f64,
}

/// `L_r + lambda1 * L_a + lambda2 * L_p`.
pub fn hybrid_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("reconstruction", parts.reconstruction),
        ("adversarial", parts.adversarial),
        ("perceptual", parts.perceptual),
    ] {
        if !v.is_finite() {
            return Err(nan_error(name, &format!("loss term is {v}")));
        }
    }
    Ok(parts.reconstruction + weights.lambda1 * parts.adversarial + weights.lambda2 * parts.perceptual)
}
