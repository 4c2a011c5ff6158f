use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm, Bound, Builder, Conv, Deconv, Mode, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest channel width any generator layer may use.
pub const MAX_CHANNELS: usize = 128;

/// Architecture of the multi-level dilated fully convolutional generator.
///
/// Level 0 runs at input resolution; each further level halves it with a
/// stride-2 convolution. The dilated stack runs at the deepest level and the
/// decoder climbs back with stride-2 deconvolutions, optionally adding a
/// projected skip from the matching encoder level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub levels: usize,
    pub encoder_channels: Vec<usize>,
    pub dilation_rates: Vec<usize>,
    pub conv_kernel: usize,
    pub deconv_kernel: usize,
    pub fusion: bool,
    /// Convolutions per encoder level, the first of which downsamples on
    /// every level after the first.
    pub convs_per_level: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            levels: 3,
            encoder_channels: vec![64, 128, 128],
            dilation_rates: vec![1, 2, 4, 8],
            conv_kernel: 3,
            deconv_kernel: 4,
            fusion: true,
            convs_per_level: 2,
        }
    }
}

/// One layer on the path from the input to the deepest feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathLayer {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("generator needs at least one level".into()));
        }
        if self.encoder_channels.len() != self.levels {
            return Err(Error::Config(format!(
                "{} levels but {} encoder channel entries",
                self.levels,
                self.encoder_channels.len()
            )));
        }
        if let Some(&c) = self.encoder_channels.iter().find(|&&c| c == 0 || c > MAX_CHANNELS) {
            return Err(Error::Config(format!("encoder channel width {c} outside 1..={MAX_CHANNELS}")));
        }
        if self.dilation_rates.contains(&0) {
            return Err(Error::Config("dilation rates must be positive".into()));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel {} must be odd", self.conv_kernel)));
        }
        if self.deconv_kernel < 2 || !self.deconv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("deconv kernel {} must be even and at least 2", self.deconv_kernel)));
        }
        if self.convs_per_level == 0 {
            return Err(Error::Config("convs_per_level must be at least 1".into()));
        }
        Ok(())
    }

    /// Spatial multiple every input dimension must satisfy.
    pub fn resolution_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Layers from the input to one unit of the bottleneck output.
    pub fn encoder_path(&self) -> Vec<PathLayer> {
        let k = self.conv_kernel;
        let mut path = Vec::new();
        for level in 0..self.levels {
            for i in 0..self.convs_per_level {
                let stride = if level > 0 && i == 0 { 2 } else { 1 };
                path.push(PathLayer { kernel: k, stride, dilation: 1 });
            }
        }
        path.extend(self.dilation_rates.iter().map(|&d| PathLayer { kernel: k, stride: 1, dilation: d }));
        path
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBlock {
    fn apply<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, s: &mut Bound<'a, T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.apply(g, s, x)?;
        let y = self.bn.apply(g, s, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderLevel {
    up: Deconv,
    up_bn: BatchNorm,
    skip: Option<ConvBlock>,
    merge: ConvBlock,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Vec<ConvBlock>>,
    bottleneck: Vec<ConvBlock>,
    decoder: Vec<DecoderLevel>,
    out: Conv,
}

#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    spec: GeneratorSpec,
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
    layout: Layout,
}

pub const INPUT_CHANNELS: usize = 4;
pub const OUTPUT_CHANNELS: usize = 3;

/// Lay out and initialize a generator.
pub fn build_generator<T: Scalar, R: Rng>(spec: &GeneratorSpec, rng: &mut R) -> Result<Generator<T>> {
    spec.validate()?;
    let k = spec.conv_kernel;
    let pad = k / 2;
    let mut b = Builder::<T, R>::new(rng);
    let block = |b: &mut Builder<T, R>, name: String, cin, cout, stride, dil: usize| ConvBlock {
        conv: b.conv(&name, cin, cout, k, stride, pad * dil, dil, false),
        bn: b.batch_norm(&format!("{name}.bn"), cout),
    };

    let mut encoder = Vec::new();
    let mut cin = INPUT_CHANNELS;
    for (level, &c) in spec.encoder_channels.iter().enumerate() {
        let mut blocks = Vec::new();
        for i in 0..spec.convs_per_level {
            let stride = if level > 0 && i == 0 { 2 } else { 1 };
            blocks.push(block(&mut b, format!("enc{level}.conv{i}"), cin, c, stride, 1));
            cin = c;
        }
        encoder.push(blocks);
    }
    let deep = *spec.encoder_channels.last().expect("validated non-empty");
    let bottleneck = spec
        .dilation_rates
        .iter()
        .enumerate()
        .map(|(i, &d)| block(&mut b, format!("dilated{i}"), deep, deep, 1, d))
        .collect();

    let mut decoder = Vec::new();
    let dk = spec.deconv_kernel;
    for level in (1..spec.levels).rev() {
        let (from, to) = (spec.encoder_channels[level], spec.encoder_channels[level - 1]);
        let up = b.deconv(&format!("dec{level}.up"), from, to, dk, 2, (dk - 2) / 2, false);
        let up_bn = b.batch_norm(&format!("dec{level}.up.bn"), to);
        let skip = spec.fusion.then(|| block(&mut b, format!("dec{level}.skip"), to, to, 1, 1));
        let merge = block(&mut b, format!("dec{level}.merge"), to, to, 1, 1);
        decoder.push(DecoderLevel { up, up_bn, skip, merge });
    }
    let out = b.conv("out", spec.encoder_channels[0], OUTPUT_CHANNELS, k, 1, pad, 1, true);

    Ok(Generator {
        spec: spec.clone(),
        params: b.params,
        buffers: b.buffers,
        layout: Layout { encoder, bottleneck, decoder, out },
    })
}

impl<T: Scalar> Model<T> for Generator<T> {
    fn parameters(&self) -> &ParamSet<T> {
        &self.params
    }
}

impl<T: Scalar> Generator<T> {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::Shape(format!("generator input must be NCHW, got {shape:?}")));
        };
        if c != INPUT_CHANNELS {
            return Err(Error::Shape(format!("generator expects {INPUT_CHANNELS} input channels, got {c}")));
        }
        let m = self.spec.resolution_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Resolution(format!(
                "{h}x{w} input is not a multiple of {m} (required by {} levels); pad the image to a multiple of {m}",
                self.spec.levels
            )));
        }
        Ok(())
    }

    fn encode_with_skips<'a>(&self, g: &mut Graph<'a, T>, s: &mut Bound<'a, T>, input: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_input(g.value(input).shape())?;
        let mut x = input;
        let mut skips = Vec::new();
        for blocks in &self.layout.encoder {
            for blk in blocks {
                x = blk.apply(g, s, x)?;
            }
            skips.push(x);
        }
        for blk in &self.layout.bottleneck {
            x = blk.apply(g, s, x)?;
        }
        Ok((x, skips))
    }

    /// Record the encoder and dilated stack only. Returns the bottleneck node.
    pub fn encode<'a>(&self, g: &mut Graph<'a, T>, s: &mut Bound<'a, T>, input: NodeId) -> Result<NodeId> {
        Ok(self.encode_with_skips(g, s, input)?.0)
    }

    /// Record the forward pass on `g`. Returns the tanh output node.
    pub fn forward<'a>(&self, g: &mut Graph<'a, T>, s: &mut Bound<'a, T>, input: NodeId) -> Result<NodeId> {
        let (mut x, skips) = self.encode_with_skips(g, s, input)?;
        for (dec, &skip) in self.layout.decoder.iter().zip(skips.iter().rev().skip(1)) {
            let up = dec.up.apply(g, s, x)?;
            let up = dec.up_bn.apply(g, s, up)?;
            x = g.relu(up);
            if let Some(proj) = &dec.skip {
                let p = proj.apply(g, s, skip)?;
                x = g.add(x, p)?;
            }
            x = dec.merge.apply(g, s, x)?;
        }
        let y = self.layout.out.apply(g, s, x)?;
        Ok(g.tanh(y))
    }

    /// Inference-mode forward pass without gradient bookkeeping.
    pub fn generate(&self, input4: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut s = Bound::new(&mut g, &self.params, &self.buffers, Mode::Eval, false);
        let x = g.input(input4.clone(), false);
        let y = self.forward(&mut g, &mut s, x)?;
        Ok(g.value(y).clone())
    }

    /// Fold training-mode batch statistics into the running averages.
    pub fn absorb_batch_statistics(&mut self, updates: Vec<(usize, usize, crate::autograd::BatchMoments<T>)>) {
        nn::apply_bn_updates(&mut self.buffers, updates);
    }
}
