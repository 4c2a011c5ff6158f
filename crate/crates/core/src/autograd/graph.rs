use std::borrow::Cow;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    ConvTranspose2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    ChannelAffine { x: NodeId, scale: Vec<T> },
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulConst(NodeId, Tensor<T>),
    AddConst(NodeId),
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Reshape(NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    SmoothL1Mean { x: NodeId, mask: Option<Tensor<T>>, count: T },
    BceLogitsMean { z: NodeId, targets: Vec<T>, eps: T },
    WeightedSum(Vec<(NodeId, T)>),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order for the backward sweep.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub const BN_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf owning its value.
    pub fn input(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Leaf borrowing its value (parameters, frozen weights).
    pub fn borrowed(&mut self, value: &'a Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(Error::Shape(format!("conv weight must be rank 4, got {ws:?}")));
        };
        if wcin != cin || k != k2 {
            return Err(Error::Shape(format!("conv weight {ws:?} does not accept {cin} input channels")));
        }
        let geom = ConvGeom::conv(h, wd, k, stride, pad, dilation).ok_or_else(|| {
            Error::Resolution(format!("{h}x{wd} input is too small for a {k}x{k} kernel at dilation {dilation}"))
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            cin,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            &geom,
        );
        let t = Tensor::from_vec(&[n, cout, geom.out_h, geom.out_w], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Transposed convolution; `w` is `cin x cout x k x k`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        let [wcin, cout, k, k2] = ws[..] else {
            return Err(Error::Shape(format!("deconv weight must be rank 4, got {ws:?}")));
        };
        if wcin != cin || k != k2 {
            return Err(Error::Shape(format!("deconv weight {ws:?} does not accept {cin} input channels")));
        }
        let geom = ConvGeom::transposed(h, wd, k, stride, pad)
            .ok_or_else(|| Error::Resolution(format!("{h}x{wd} input incompatible with {k}x{k}/{stride} deconv")))?;
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            cin,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            &geom,
        );
        let t = Tensor::from_vec(&[n, cout, geom.in_h, geom.in_w], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, ng))
    }

    /// Batch normalization. With `stats == None` the batch moments are used
    /// (training mode) and returned so the caller can update running
    /// averages; otherwise the supplied `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: Option<(&[T], &[T])>,
    ) -> Result<(NodeId, Option<BatchMoments<T>>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let eps = T::from_f64_lossy(BN_EPS);
        let (mean, var, moments) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let (m, v) = kernels::channel_moments(self.value(x).data(), n, c, plane);
                let mom = BatchMoments { mean: m.clone(), var: v.clone(), count: n * plane };
                (m, v, Some(mom))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (m, s, gg, bb) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for (o, &v) in out[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                    *o = (v - m) * s * gg + bb;
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, h, w], out)?;
        let ng = self.ng(&[x, gamma, beta]);
        let id = self.push(t, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats: stats.is_none() }, ng);
        Ok((id, moments))
    }

    /// Constant per-channel affine map `y = x * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: NodeId, scale: &[T], shift: &[T]) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::Shape(format!("channel affine expects {c} channels")));
        }
        let plane = h * w;
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = *v * scale[ch] + shift[ch];
        }
        let _ = n;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::ChannelAffine { x, scale: scale.to_vec() }, ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.ng(&[x]);
        self.push(out, Op::LeakyRelu(x, slope), ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.ng(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: NodeId, k: &Tensor<T>) -> Result<NodeId> {
        let out = self.value(x).zip_map(k, |p, q| p * q)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::MulConst(x, k.clone()), ng))
    }

    /// Elementwise sum with a constant tensor.
    pub fn add_const(&mut self, x: NodeId, k: &Tensor<T>) -> Result<NodeId> {
        let out = self.value(x).zip_map(k, |p, q| p + q)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::AddConst(x), ng))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Resolution(format!("2x2 pooling needs even dimensions, got {h}x{w}")));
        }
        let (out, argmax) = kernels::max_pool2(self.value(x).data(), n, c, h, w);
        let t = Tensor::from_vec(&[n, c, h / 2, w / 2], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// `y = x w^T + b` with `x: [n, f]`, `w: [o, f]`, `b: [o]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (&[n, f], &[o, wf]) = (&xs[..], &ws[..]) else {
            return Err(Error::Shape(format!("linear expects [n,f] x [o,f], got {xs:?} x {ws:?}")));
        };
        if f != wf {
            return Err(Error::Shape(format!("linear feature mismatch: {f} vs {wf}")));
        }
        let mut out = vec![T::zero(); n * o];
        for i in 0..n {
            out[i * o..(i + 1) * o].copy_from_slice(self.value(b).data());
        }
        T::gemm(n, f, o, T::one(), self.value(x).data(), false, self.value(w).data(), true, T::one(), &mut out);
        let t = Tensor::from_vec(&[n, o], out)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(t, Op::Linear { x, w, b }, ng))
    }

    /// Mean of the elementwise smooth-L1 penalty. With a mask, only elements
    /// where the mask is nonzero contribute and the mean runs over those.
    pub fn smooth_l1_mean(&mut self, x: NodeId, mask: Option<&Tensor<T>>) -> Result<NodeId> {
        let xv = self.value(x);
        let (total, count) = match mask {
            Some(m) => {
                xv.check_same_shape(m)?;
                let mut total = T::zero();
                let mut count = 0usize;
                for (&v, &mv) in xv.data().iter().zip(m.data()) {
                    if mv != T::zero() {
                        total += smooth_l1_value(v);
                        count += 1;
                    }
                }
                (total, count)
            }
            None => (xv.data().iter().map(|&v| smooth_l1_value(v)).sum(), xv.len()),
        };
        if count == 0 {
            return Err(Error::DegenerateMask("no element contributes to the smooth-L1 mean"));
        }
        let count = T::from_usize(count).expect("count fits");
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(total / count), Op::SmoothL1Mean { x, mask: mask.cloned(), count }, ng))
    }

    /// Binary cross-entropy on logits against soft targets, averaged over the
    /// batch. Probabilities are clamped to `[eps, 1 - eps]` inside the logs.
    pub fn bce_logits_mean(&mut self, z: NodeId, targets: &[T], eps: T) -> Result<NodeId> {
        let zv = self.value(z);
        if zv.len() != targets.len() || targets.is_empty() {
            return Err(Error::Shape(format!("{} logits vs {} targets", zv.len(), targets.len())));
        }
        let total: T = zv.data().iter().zip(targets).map(|(&l, &t)| bce_value(l, t, eps)).sum();
        let n = T::from_usize(targets.len()).expect("count fits");
        let ng = self.ng(&[z]);
        Ok(self.push(Tensor::scalar(total / n), Op::BceLogitsMean { z, targets: targets.to_vec(), eps }, ng))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut total = T::zero();
        for &(id, w) in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(Error::Shape(format!("weighted_sum expects scalars, got {:?}", v.shape())));
            }
            total += v.data()[0] * w;
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()).reshape(self.value(root).shape())?);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a, T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (n, cin, _, _) = self.value(*x).dims4()?;
                let wv = self.value(*w);
                let cout = wv.shape()[0];
                let mut dx = wants(*x).then(|| Tensor::zeros(self.value(*x).shape()));
                let mut dw = wants(*w).then(|| Tensor::zeros(wv.shape()));
                let mut db = b.filter(|b| wants(*b)).map(|b| Tensor::zeros(self.value(b).shape()));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    cin,
                    wv.data(),
                    cout,
                    geom,
                    gy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, cin, _, _) = self.value(*x).dims4()?;
                let wv = self.value(*w);
                let cout = wv.shape()[1];
                let mut dx = wants(*x).then(|| Tensor::zeros(self.value(*x).shape()));
                let mut dw = wants(*w).then(|| Tensor::zeros(wv.shape()));
                let mut db = b.filter(|b| wants(*b)).map(|b| Tensor::zeros(self.value(b).shape()));
                kernels::conv_transpose2d_backward(
                    self.value(*x).data(),
                    n,
                    cin,
                    wv.data(),
                    cout,
                    geom,
                    gy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4()?;
                let plane = h * w;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for j in off..off + plane {
                            let xhat = (xv.data()[j] - mean[ch]) * inv_std[ch];
                            dgamma[ch] += gy.data()[j] * xhat;
                            dbeta[ch] += gy.data()[j];
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    let m = T::from_usize(n * plane).expect("count fits");
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = g[ch] * inv_std[ch];
                            for j in off..off + plane {
                                let v = if *batch_stats {
                                    let xhat = (xv.data()[j] - mean[ch]) * inv_std[ch];
                                    k * (gy.data()[j] - dbeta[ch] / m - xhat * dgamma[ch] / m)
                                } else {
                                    k * gy.data()[j]
                                };
                                dx.data_mut()[j] = v;
                            }
                        }
                    }
                    accumulate(grads, *x, Some(dx));
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, Some(Tensor::from_vec(&[c], dgamma)?));
                }
                if wants(*beta) {
                    accumulate(grads, *beta, Some(Tensor::from_vec(&[c], dbeta)?));
                }
            }
            Op::ChannelAffine { x, scale } => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let mut dx = gy.clone();
                for (i, v) in dx.data_mut().iter_mut().enumerate() {
                    *v *= scale[(i / plane) % c];
                }
                accumulate(grads, *x, Some(dx));
            }
            Op::Relu(x) => {
                let out = &node.value;
                let dx = gy.zip_map(out, |g, y| if y > T::zero() { g } else { T::zero() })?;
                accumulate(grads, *x, Some(dx));
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let dx = gy.zip_map(self.value(*x), |g, v| if v > T::zero() { g } else { g * s })?;
                accumulate(grads, *x, Some(dx));
            }
            Op::Tanh(x) => {
                let dx = gy.zip_map(&node.value, |g, y| g * (T::one() - y * y))?;
                accumulate(grads, *x, Some(dx));
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, Some(gy.clone()));
                }
                if wants(*b) {
                    accumulate(grads, *b, Some(gy.clone()));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, Some(gy.clone()));
                }
                if wants(*b) {
                    accumulate(grads, *b, Some(gy.map(|v| -v)));
                }
            }
            Op::MulConst(x, k) => {
                let dx = gy.zip_map(k, |g, m| g * m)?;
                accumulate(grads, *x, Some(dx));
            }
            Op::AddConst(x) => accumulate(grads, *x, Some(gy.clone())),
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (&src, &g) in argmax.iter().zip(gy.data()) {
                    dx.data_mut()[src] += g;
                }
                accumulate(grads, *x, Some(dx));
            }
            Op::Reshape(x) => {
                let dx = gy.clone().reshape(self.value(*x).shape())?;
                accumulate(grads, *x, Some(dx));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, f) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if wants(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    T::gemm(n, o, f, T::one(), gy.data(), false, wv.data(), false, T::zero(), dx.data_mut());
                    accumulate(grads, *x, Some(dx));
                }
                if wants(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    T::gemm(o, n, f, T::one(), gy.data(), true, xv.data(), false, T::zero(), dw.data_mut());
                    accumulate(grads, *w, Some(dw));
                }
                if wants(*b) {
                    let mut db = Tensor::zeros(&[o]);
                    for i in 0..n {
                        for j in 0..o {
                            db.data_mut()[j] += gy.data()[i * o + j];
                        }
                    }
                    accumulate(grads, *b, Some(db));
                }
            }
            Op::SmoothL1Mean { x, mask, count } => {
                let g0 = gy.data()[0] / *count;
                let xv = self.value(*x);
                let dx = match mask {
                    // Masked-out elements get an exact zero, never `0 * g`.
                    Some(m) => xv.zip_map(m, |v, mv| if mv != T::zero() { smooth_l1_slope(v) * g0 } else { T::zero() })?,
                    None => xv.map(|v| smooth_l1_slope(v) * g0),
                };
                accumulate(grads, *x, Some(dx));
            }
            Op::BceLogitsMean { z, targets, eps } => {
                let zv = self.value(*z);
                let n = T::from_usize(targets.len()).expect("count fits");
                let g0 = gy.data()[0] / n;
                let mut dz = Tensor::zeros(zv.shape());
                for ((d, &l), &t) in dz.data_mut().iter_mut().zip(zv.data()).zip(targets) {
                    *d = bce_slope(l, t, *eps) * g0;
                }
                accumulate(grads, *z, Some(dz));
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    if wants(id) {
                        let d = self.value(id).map(|_| gy.data()[0] * w);
                        accumulate(grads, id, Some(d));
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Option<Tensor<T>>) {
    let Some(g) = g else { return };
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
#[inline]
pub fn smooth_l1_value<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::from_f64_lossy(0.5) * x * x
    } else {
        a - T::from_f64_lossy(0.5)
    }
}

#[inline]
pub fn smooth_l1_slope<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

/// Numerically stable `log(sigmoid(z))`.
#[inline]
pub fn log_sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Per-sample BCE on a logit with clamped probabilities.
#[inline]
pub fn bce_value<T: Scalar>(z: T, target: T, eps: T) -> T {
    let p = sigmoid(z);
    let (lp, lq) = if p < eps {
        (eps.ln(), (T::one() - eps).ln())
    } else if p > T::one() - eps {
        ((T::one() - eps).ln(), eps.ln())
    } else {
        (log_sigmoid(z), log_sigmoid(-z))
    };
    -(target * lp + (T::one() - target) * lq)
}

#[inline]
fn bce_slope<T: Scalar>(z: T, target: T, eps: T) -> T {
    let p = sigmoid(z);
    if p < eps || p > T::one() - eps {
        T::zero()
    } else {
        p - target
    }
}
