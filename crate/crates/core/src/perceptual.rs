//! Frozen VGG16-layout feature extractor for the perceptual loss.
//!
//! Layers follow the conventional VGG16 naming (`conv1_1` .. `conv5_3`), with
//! 2x2 max pooling between blocks. A tap yields the ReLU output of the named
//! convolution. Weights come either from a binary weights file or from a
//! seeded random initialization of a narrower network with the same layer
//! names and strides.
//!
//! Weights file layout (all integers `u32` LE, all reals `f32` LE):
//!
//! ```text
//! "VGGW" | version | mean[3] | std[3] | layer_count
//! per layer, in VGG16 order: cout | cin | weights[cout*cin*3*3] | bias[cout]
//! ```
//!
//! A file may stop after any layer; it then only serves taps up to there.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"VGGW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Convolutions per VGG16 block.
pub const VGG16_BLOCKS: [usize; 5] = [2, 2, 3, 3, 3];
pub const VGG16_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

/// ImageNet statistics the torchvision VGG16 weights expect on `[0, 1]` input.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    Pretrained { weights: PathBuf },
    RandomFallback { seed: u64, widths: [usize; 5] },
}

impl Default for Backbone {
    fn default() -> Self {
        Backbone::RandomFallback { seed: 0, widths: [8, 16, 32, 64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualSpec {
    pub layer_taps: Vec<String>,
    pub layer_weights: Vec<f64>,
    pub backbone: Backbone,
}

impl Default for PerceptualSpec {
    fn default() -> Self {
        Self {
            layer_taps: vec!["conv3_2".into(), "conv4_2".into(), "conv5_2".into()],
            layer_weights: vec![1.0; 3],
            backbone: Backbone::default(),
        }
    }
}

/// Position of a named layer: zero-based block and index within the block.
pub fn parse_layer_name(name: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("unknown VGG16 layer {name:?}"));
    let rest = name.strip_prefix("conv").ok_or_else(bad)?;
    let (b, i) = rest.split_once('_').ok_or_else(bad)?;
    let (b, i): (usize, usize) = (b.parse().map_err(|_| bad())?, i.parse().map_err(|_| bad())?);
    if b == 0 || b > VGG16_BLOCKS.len() || i == 0 || i > VGG16_BLOCKS[b - 1] {
        return Err(bad());
    }
    Ok((b - 1, i - 1))
}

/// Flat index of a layer in VGG16 order.
fn flat_index(block: usize, idx: usize) -> usize {
    VGG16_BLOCKS[..block].iter().sum::<usize>() + idx
}

impl PerceptualSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_taps.is_empty() {
            return Err(Error::Config("perceptual spec has no layer taps".into()));
        }
        if self.layer_weights.len() != self.layer_taps.len() {
            return Err(Error::Config(format!(
                "{} layer weights for {} taps",
                self.layer_weights.len(),
                self.layer_taps.len()
            )));
        }
        if self.layer_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("layer weights must be finite and non-negative".into()));
        }
        for t in &self.layer_taps {
            parse_layer_name(t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvLayer<T: Scalar> {
    name: String,
    block: usize,
    weight: Tensor<T>,
    bias: Tensor<T>,
}

/// Frozen extractor exposing exactly the configured taps.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T: Scalar> {
    spec: PerceptualSpec,
    layers: Vec<ConvLayer<T>>,
    taps: Vec<usize>,
    input_scale: Vec<T>,
    input_shift: Vec<T>,
}

/// Build the extractor described by `spec`.
pub fn load_backbone<T: Scalar>(spec: &PerceptualSpec) -> Result<FeatureExtractor<T>> {
    spec.validate()?;
    let taps: Vec<usize> = spec
        .layer_taps
        .iter()
        .map(|t| parse_layer_name(t).map(|(b, i)| flat_index(b, i)))
        .collect::<Result<_>>()?;
    let needed = taps.iter().max().copied().expect("validated non-empty") + 1;
    let (mut layers, mean, std) = match &spec.backbone {
        Backbone::Pretrained { weights } => read_weights_file::<T>(weights)?,
        Backbone::RandomFallback { seed, widths } => (random_layers(*seed, widths, needed), IMAGENET_MEAN, IMAGENET_STD),
    };
    if layers.len() < needed {
        let path = match &spec.backbone {
            Backbone::Pretrained { weights } => weights.clone(),
            Backbone::RandomFallback { .. } => PathBuf::from("<random fallback>"),
        };
        return Err(Error::Load {
            path,
            reason: format!("holds {} layers but tap {} needs {needed}", layers.len(), spec.layer_taps.join(",")),
        });
    }
    layers.truncate(needed);
    // [-1, 1] -> [0, 1] -> (x - mean) / std, folded into one affine map.
    let input_scale = std.iter().map(|s| T::from_f64_lossy(0.5 / s)).collect();
    let input_shift = mean.iter().zip(&std).map(|(m, s)| T::from_f64_lossy((0.5 - m) / s)).collect();
    Ok(FeatureExtractor { spec: spec.clone(), layers, taps, input_scale, input_shift })
}

fn layer_names() -> impl Iterator<Item = (usize, String)> {
    VGG16_BLOCKS
        .iter()
        .enumerate()
        .flat_map(|(b, &n)| (0..n).map(move |i| (b, format!("conv{}_{}", b + 1, i + 1))))
}

fn random_layers<T: Scalar>(seed: u64, widths: &[usize; 5], count: usize) -> Vec<ConvLayer<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cin = 3;
    layer_names()
        .take(count)
        .map(|(block, name)| {
            let cout = widths[block];
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive deviation");
            let weight = Tensor::from_fn(&[cout, cin, 3, 3], |_| T::from_f64_lossy(normal.sample(&mut rng)));
            let layer = ConvLayer { name, block, weight, bias: Tensor::zeros(&[cout]) };
            cin = cout;
            layer
        })
        .collect()
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

type LoadedWeights<T> = (Vec<ConvLayer<T>>, [f64; 3], [f64; 3]);

fn read_weights_file<T: Scalar>(path: &Path) -> Result<LoadedWeights<T>> {
    let load_err = |reason: String| Error::Load { path: path.to_path_buf(), reason };
    let bytes = fs::read(path).map_err(|e| load_err(e.to_string()))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let truncated = || load_err("file is truncated".into());
    if r.take(4) != Some(WEIGHTS_MAGIC.as_slice()) {
        return Err(load_err("not a VGG weights file (bad magic)".into()));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != WEIGHTS_VERSION {
        return Err(load_err(format!("unsupported weights version {version}")));
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for m in &mut mean {
        *m = r.f32().ok_or_else(truncated)? as f64;
    }
    for s in &mut std {
        *s = r.f32().ok_or_else(truncated)? as f64;
        if *s <= 0.0 {
            return Err(load_err("non-positive input std".into()));
        }
    }
    let count = r.u32().ok_or_else(truncated)? as usize;
    if count > VGG16_BLOCKS.iter().sum::<usize>() {
        return Err(load_err(format!("{count} layers exceeds VGG16")));
    }
    let mut layers = Vec::with_capacity(count);
    let mut expect_cin = 3;
    for (block, name) in layer_names().take(count) {
        let cout = r.u32().ok_or_else(truncated)? as usize;
        let cin = r.u32().ok_or_else(truncated)? as usize;
        if cin != expect_cin || cout == 0 {
            return Err(load_err(format!("{name} has {cin}->{cout} channels, expected {expect_cin} inputs")));
        }
        let mut read = |n: usize| -> Result<Vec<T>> {
            (0..n).map(|_| r.f32().map(|v| T::from_f64_lossy(v as f64)).ok_or_else(truncated)).collect()
        };
        let weight = Tensor::from_vec(&[cout, cin, 3, 3], read(cout * cin * 9)?)?;
        let bias = Tensor::from_vec(&[cout], read(cout)?)?;
        layers.push(ConvLayer { name, block, weight, bias });
        expect_cin = cout;
    }
    if r.pos != bytes.len() {
        return Err(load_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((layers, mean, std))
}

/// Serialize layers in the weights-file format. `layers` holds
/// `(weight cout x cin x 3 x 3, bias cout)` pairs in VGG16 order.
pub fn write_weights_file(path: &Path, mean: [f32; 3], std: [f32; 3], layers: &[(Tensor<f32>, Tensor<f32>)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for v in mean.iter().chain(&std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for (w, b) in layers {
        let &[cout, cin, 3, 3] = w.shape() else {
            return Err(Error::Shape(format!("VGG conv weight must be cout x cin x 3 x 3, got {:?}", w.shape())));
        };
        out.extend_from_slice(&(cout as u32).to_le_bytes());
        out.extend_from_slice(&(cin as u32).to_le_bytes());
        for v in w.data().iter().chain(b.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn spec(&self) -> &PerceptualSpec {
        &self.spec
    }

    pub fn tap_names(&self) -> &[String] {
        &self.spec.layer_taps
    }

    /// Downsampling factor of each tap relative to the input.
    pub fn tap_strides(&self) -> Vec<usize> {
        self.taps.iter().map(|&t| 1 << self.layers[t].block).collect()
    }

    /// Spatial multiple every input dimension must satisfy.
    pub fn resolution_multiple(&self) -> usize {
        self.tap_strides().into_iter().max().unwrap_or(1)
    }

    /// Total scalars in the frozen weights.
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flat copy of every weight, for frozen-ness checks.
    pub fn snapshot(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied()).collect()
    }

    /// Record feature extraction on `g`. Weights enter the graph as frozen
    /// leaves; gradients still reach `image` if it requires them.
    pub fn extract<'a>(&'a self, g: &mut Graph<'a, T>, image: NodeId) -> Result<Vec<NodeId>> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("perceptual network takes RGB input, got {c} channels")));
        }
        let m = self.resolution_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Resolution(format!(
                "{h}x{w} input is incompatible with perceptual taps at stride {m}"
            )));
        }
        let mut x = g.channel_affine(image, &self.input_scale, &self.input_shift)?;
        let mut outputs = vec![None; self.taps.len()];
        let mut block = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.block != block {
                x = g.max_pool2(x)?;
                block = layer.block;
            }
            let wn = g.borrowed(&layer.weight, false);
            let bn = g.borrowed(&layer.bias, false);
            let y = g.conv2d(x, wn, Some(bn), 1, 1, 1)?;
            x = g.relu(y);
            for (slot, _) in self.taps.iter().enumerate().filter(|(_, &t)| t == i) {
                outputs[slot] = Some(x);
            }
        }
        Ok(outputs.into_iter().map(|o| o.expect("every tap is within the loaded layers")).collect())
    }

    /// Features of a signed NCHW batch, one tensor per tap in spec order.
    pub fn extract_features(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let x = g.input(images.clone(), false);
        let taps = self.extract(&mut g, x)?;
        Ok(taps.into_iter().map(|t| g.value(t).clone()).collect())
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_names_parse_to_block_and_index() {
        assert_eq!(parse_layer_name("conv1_1").unwrap(), (0, 0));
        assert_eq!(parse_layer_name("conv5_3").unwrap(), (4, 2));
        for bad in ["conv9_9", "conv1_3", "conv0_1", "relu3_2", "conv3"] {
            assert!(matches!(parse_layer_name(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn unknown_tap_is_a_configuration_error() {
        let spec = PerceptualSpec { layer_taps: vec!["conv9_9".into()], layer_weights: vec![1.0], ..Default::default() };
        assert!(matches!(load_backbone::<f32>(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn empty_tap_list_is_rejected() {
        let spec = PerceptualSpec { layer_taps: vec![], layer_weights: vec![], ..Default::default() };
        assert!(matches!(load_backbone::<f32>(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn default_taps_sit_at_strides_4_8_16() {
        let fx = load_backbone::<f32>(&PerceptualSpec::default()).unwrap();
        assert_eq!(fx.tap_strides(), vec![4, 8, 16]);
        assert_eq!(fx.layer_names().last(), Some(&"conv5_2"));
    }

    #[test]
    fn missing_weights_file_names_the_path() {
        let spec = PerceptualSpec {
            backbone: Backbone::Pretrained { weights: "/nonexistent/vgg16.bin".into() },
            ..Default::default()
        };
        let err = load_backbone::<f32>(&spec).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/vgg16.bin"), "{err}");
    }

    #[test]
    fn corrupt_weights_file_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        fs::write(&p, b"VGGW\x01\x00\x00\x00garbage").unwrap();
        let spec = PerceptualSpec { backbone: Backbone::Pretrained { weights: p.clone() }, ..Default::default() };
        assert!(matches!(load_backbone::<f32>(&spec), Err(Error::Load { .. })));
    }
}
