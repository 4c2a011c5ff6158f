use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::autograd::{sigmoid, BatchMoments, Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm, Bound, Builder, Conv, Linear, Mode, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// DCGAN-style discriminator: stride-2 4x4 convolutions with leaky ReLU,
/// batch norm on every layer but the first, and a linear head to one logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub batch_norm: bool,
    /// Square input side the linear head is sized for.
    pub input_size: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self { channels: vec![64, 128, 256, 512, 512], kernel: 4, leaky_slope: 0.2, batch_norm: true, input_size: 128 }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("discriminator needs at least one non-empty layer".into()));
        }
        if self.kernel < 2 || !self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("discriminator kernel {} must be even", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        let factor = 1usize << self.channels.len();
        if self.input_size < factor || !self.input_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "{}px input cannot pass through {} stride-2 layers (needs a multiple of {factor})",
                self.input_size,
                self.channels.len()
            )));
        }
        Ok(())
    }

    pub fn final_size(&self) -> usize {
        self.input_size >> self.channels.len()
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    spec: DiscriminatorSpec,
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
    layers: Vec<(Conv, Option<BatchNorm>)>,
    head: Linear,
}

pub fn build_discriminator<T: Scalar, R: Rng>(spec: &DiscriminatorSpec, rng: &mut R) -> Result<Discriminator<T>> {
    spec.validate()?;
    let mut b = Builder::<T, R>::new(rng);
    let mut layers = Vec::new();
    let mut cin = 3;
    let pad = (spec.kernel - 2) / 2;
    for (i, &c) in spec.channels.iter().enumerate() {
        let use_bn = spec.batch_norm && i > 0;
        let conv = b.conv(&format!("d{i}"), cin, c, spec.kernel, 2, pad, 1, !use_bn);
        let bn = use_bn.then(|| b.batch_norm(&format!("d{i}.bn"), c));
        layers.push((conv, bn));
        cin = c;
    }
    let side = spec.final_size();
    let head = b.linear("head", cin * side * side, 1);
    Ok(Discriminator { spec: spec.clone(), params: b.params, buffers: b.buffers, layers, head })
}

impl<T: Scalar> Model<T> for Discriminator<T> {
    fn parameters(&self) -> &ParamSet<T> {
        &self.params
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Record the forward pass; returns an `n x 1` logit node.
    pub fn forward<'a>(&self, g: &mut Graph<'a, T>, s: &mut Bound<'a, T>, image: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = g.value(image).dims4()?;
        if c != 3 || h != self.spec.input_size || w != self.spec.input_size {
            return Err(Error::Resolution(format!(
                "discriminator built for 3x{0}x{0} images, got {c}x{h}x{w}",
                self.spec.input_size
            )));
        }
        let slope = T::from_f64_lossy(self.spec.leaky_slope);
        let mut x = image;
        for (conv, bn) in &self.layers {
            x = conv.apply(g, s, x)?;
            if let Some(bn) = bn {
                x = bn.apply(g, s, x)?;
            }
            x = g.leaky_relu(x, slope);
        }
        let feat = g.value(x).len() / n;
        let flat = g.reshape(x, &[n, feat])?;
        self.head.apply(g, s, flat)
    }

    /// Inference-mode logits for a batch of signed images.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let mut s = Bound::new(&mut g, &self.params, &self.buffers, Mode::Eval, false);
        let x = g.input(images.clone(), false);
        let y = self.forward(&mut g, &mut s, x)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Inference-mode probabilities `sigmoid(logit)`.
    pub fn probabilities(&self, images: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.logits(images)?.into_iter().map(sigmoid).collect())
    }

    pub fn absorb_batch_statistics(&mut self, updates: Vec<(usize, usize, BatchMoments<T>)>) {
        nn::apply_bn_updates(&mut self.buffers, updates);
    }
}
