//! Parameter storage and the handful of layers the networks are built from.
//!
//! Layers do not own tensors. They hold indices into a model's [`ParamSet`]
//! (trainable) and buffer set (batch-norm running statistics), and are applied
//! to a [`Graph`] through a [`Bound`] session that maps each parameter to its
//! leaf node.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchMoments, Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

/// Named, ordered collection of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Replace every tensor with one of identical name and shape.
    pub fn assign(&mut self, other: Vec<(String, Tensor<T>)>) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Validation(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.len()
            )));
        }
        for ((name, cur), (oname, t)) in self.entries.iter_mut().zip(other) {
            if *name != oname || cur.shape() != t.shape() {
                return Err(Error::Validation(format!(
                    "tensor {oname} {:?} does not match {name} {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
            *cur = t;
        }
        Ok(())
    }
}

/// Whether batch-norm layers use batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// A model's parameters bound into one graph.
pub struct Bound<'a, T: Scalar> {
    nodes: Vec<NodeId>,
    buffers: &'a ParamSet<T>,
    pub mode: Mode,
    updates: Vec<(usize, usize, BatchMoments<T>)>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn new(graph: &mut Graph<'a, T>, params: &'a ParamSet<T>, buffers: &'a ParamSet<T>, mode: Mode, trainable: bool) -> Self {
        let nodes = params.tensors().map(|t| graph.borrowed(t, trainable)).collect();
        Self { nodes, buffers, mode, updates: Vec::new() }
    }

    /// Like [`Bound::new`] but copies the parameters into the graph, so the
    /// set need not outlive it.
    pub fn copied(graph: &mut Graph<'a, T>, params: &ParamSet<T>, buffers: &'a ParamSet<T>, mode: Mode, trainable: bool) -> Self {
        let nodes = params.tensors().map(|t| graph.input(t.clone(), trainable)).collect();
        Self { nodes, buffers, mode, updates: Vec::new() }
    }

    pub fn node(&self, param: usize) -> NodeId {
        self.nodes[param]
    }

    /// Gradient of every parameter, zero where no gradient reached it.
    pub fn grads(&self, graph: &Graph<'a, T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.nodes
            .iter()
            .map(|&id| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(id).shape())))
            .collect()
    }

    /// Squared global L2 norm of the parameter gradients.
    pub fn grad_sq_norm(&self, grads: &Gradients<T>) -> T {
        self.nodes.iter().filter_map(|&id| grads.get(id)).map(|t| t.sum_sq()).sum()
    }

    /// Running-statistics updates observed in training mode, in layer order.
    pub fn take_updates(&mut self) -> Vec<(usize, usize, BatchMoments<T>)> {
        std::mem::take(&mut self.updates)
    }
}

/// Fold training-mode batch moments into running statistics.
pub fn apply_bn_updates<T: Scalar>(buffers: &mut ParamSet<T>, updates: Vec<(usize, usize, BatchMoments<T>)>) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    for (mi, vi, mom) in updates {
        let unbias = if mom.count > 1 {
            T::from_usize(mom.count).expect("fits") / T::from_usize(mom.count - 1).expect("fits")
        } else {
            T::one()
        };
        for (r, &b) in buffers.get_mut(mi).data_mut().iter_mut().zip(&mom.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in buffers.get_mut(vi).data_mut().iter_mut().zip(&mom.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv {
    pub fn apply<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, s: &Bound<'a, T>, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, s.node(self.weight), self.bias.map(|b| s.node(b)), self.stride, self.pad, self.dilation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deconv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv {
    pub fn apply<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, s: &Bound<'a, T>, x: NodeId) -> Result<NodeId> {
        g.conv_transpose2d(x, s.node(self.weight), self.bias.map(|b| s.node(b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BatchNorm {
    pub fn apply<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, s: &mut Bound<'a, T>, x: NodeId) -> Result<NodeId> {
        let stats = match s.mode {
            Mode::Train => None,
            Mode::Eval => Some((s.buffers.get(self.running_mean).data(), s.buffers.get(self.running_var).data())),
        };
        let (y, moments) = g.batch_norm(x, s.node(self.gamma), s.node(self.beta), stats)?;
        if let Some(m) = moments {
            s.updates.push((self.running_mean, self.running_var, m));
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn apply<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, s: &Bound<'a, T>, x: NodeId) -> Result<NodeId> {
        g.linear(x, s.node(self.weight), s.node(self.bias))
    }
}

/// Allocates and initializes parameters while a network is being laid out.
pub struct Builder<'r, T: Scalar, R: Rng> {
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng> Builder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { params: ParamSet::default(), buffers: ParamSet::default(), rng }
    }

    fn init(&mut self, shape: &[usize]) -> Tensor<T> {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| T::from_f64_lossy(truncated_normal(rng, INIT_STD)))
    }

    /// Convolution layer. Layers feeding batch norm should pass `bias: false`
    /// since the normalization cancels any bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, dilation: usize, bias: bool) -> Conv {
        let w = self.init(&[cout, cin, kernel, kernel]);
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = bias.then(|| self.params.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv { weight, bias, stride, pad, dilation }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn deconv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, bias: bool) -> Deconv {
        let w = self.init(&[cin, cout, kernel, kernel]);
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = bias.then(|| self.params.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Deconv { weight, bias, stride, pad }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.params.push(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: self.buffers.push(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: self.buffers.push(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
        }
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Linear {
        let w = self.init(&[outputs, inputs]);
        Linear {
            weight: self.params.push(format!("{name}.weight"), w),
            bias: self.params.push(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }
}

/// Normal with the given deviation, redrawn until within two deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_with_bias_counts_weights_and_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::<f64, _>::new(&mut rng);
        b.conv("c", 4, 8, 3, 1, 1, 1, true);
        assert_eq!(b.params.numel(), 4 * 8 * 9 + 8);
    }

    #[test]
    fn truncated_init_stays_within_two_deviations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            assert!(truncated_normal(&mut rng, INIT_STD).abs() <= 2.0 * INIT_STD);
        }
    }

    #[test]
    fn running_stats_move_toward_batch_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = Builder::<f64, _>::new(&mut rng);
        let bn = b.batch_norm("bn", 1);
        let mut buffers = b.buffers;
        let mom = BatchMoments { mean: vec![2.0], var: vec![3.0], count: 4 };
        apply_bn_updates(&mut buffers, vec![(bn.running_mean, bn.running_var, mom)]);
        assert!((buffers.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((buffers.get(bn.running_var).data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }
}
