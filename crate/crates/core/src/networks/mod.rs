//! Generator, discriminator and receptive-field analysis.

mod discriminator;
mod generator;

pub use discriminator::{build_discriminator, Discriminator, DiscriminatorSpec};
pub use generator::{build_generator, Generator, GeneratorSpec, PathLayer, INPUT_CHANNELS, MAX_CHANNELS, OUTPUT_CHANNELS};

use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::scalar::Scalar;

/// Anything with trainable parameters.
pub trait Model<T: Scalar> {
    fn parameters(&self) -> &ParamSet<T>;

    /// Exact number of trainable scalars.
    fn count_parameters(&self) -> usize {
        self.parameters().numel()
    }
}

impl<T: Scalar> Model<T> for ParamSet<T> {
    fn parameters(&self) -> &ParamSet<T> {
        self
    }
}

/// Square extent, in input pixels, that influences one bottleneck unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub size: usize,
}

/// Receptive field of a layer sequence: each layer widens the field by
/// `(k - 1) * d` times the product of the strides before it.
pub fn receptive_field_of(path: &[PathLayer]) -> ReceptiveField {
    let mut size = 1;
    let mut jump = 1;
    for l in path {
        size += (l.kernel - 1) * l.dilation * jump;
        jump *= l.stride;
    }
    ReceptiveField { size }
}

/// Receptive field of the generator's encoder and dilated bottleneck.
pub fn compute_receptive_field(spec: &GeneratorSpec) -> ReceptiveField {
    receptive_field_of(&spec.encoder_path())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::{Bound, Mode};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(kernel: usize, stride: usize, dilation: usize) -> PathLayer {
        PathLayer { kernel, stride, dilation }
    }

    #[test]
    fn receptive_field_closed_forms() {
        assert_eq!(receptive_field_of(&[layer(3, 1, 1)]).size, 3);
        assert_eq!(receptive_field_of(&[layer(3, 1, 1), layer(3, 1, 1)]).size, 5);
        assert_eq!(receptive_field_of(&[layer(3, 1, 1), layer(3, 1, 2)]).size, 7);
        assert_eq!(receptive_field_of(&[]).size, 1);
    }

    #[test]
    fn default_generator_covers_the_largest_training_hole() {
        let rf = compute_receptive_field(&GeneratorSpec::default());
        assert!(rf.size >= 80, "{}", rf.size);
        assert_eq!(rf.size % 2, 1);
    }

    #[test]
    fn default_generator_is_lightweight() {
        let g: Generator<f32> = build_generator(&GeneratorSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = g.count_parameters();
        assert!(n < 10_000_000, "{n}");
        assert!(n > 1_000_000, "{n}");
    }

    #[test]
    fn empty_model_has_no_parameters() {
        assert_eq!(ParamSet::<f32>::default().count_parameters(), 0);
    }

    #[test]
    fn invalid_generator_specs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = [
            GeneratorSpec { levels: 0, encoder_channels: vec![], ..Default::default() },
            GeneratorSpec { encoder_channels: vec![64, 128], ..Default::default() },
            GeneratorSpec { encoder_channels: vec![64, 256, 128], ..Default::default() },
            GeneratorSpec { dilation_rates: vec![1, 0], ..Default::default() },
        ];
        for spec in bad {
            assert!(matches!(build_generator::<f32, _>(&spec, &mut rng), Err(crate::Error::Config(_))));
        }
    }

    #[test]
    fn single_level_generator_preserves_shape() {
        let spec = GeneratorSpec { levels: 1, encoder_channels: vec![8], dilation_rates: vec![], ..Default::default() };
        let g: Generator<f64> = build_generator(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::from_fn(&[1, 4, 6, 10], |i| (i as f64 * 0.1).sin());
        assert_eq!(g.generate(&x).unwrap().shape(), &[1, 3, 6, 10]);
    }

    #[test]
    fn indivisible_resolution_names_the_required_multiple() {
        let g: Generator<f32> = build_generator(
            &GeneratorSpec { encoder_channels: vec![4, 4, 4], dilation_rates: vec![1], ..Default::default() },
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let err = g.generate(&Tensor::zeros(&[1, 4, 130, 130])).unwrap_err();
        assert!(matches!(&err, crate::Error::Resolution(m) if m.contains("multiple of 4")), "{err}");
    }

    #[test]
    fn discriminator_rejects_too_small_inputs() {
        let spec = DiscriminatorSpec { input_size: 16, ..Default::default() };
        assert!(matches!(build_discriminator::<f32, _>(&spec, &mut ChaCha8Rng::seed_from_u64(0)), Err(crate::Error::Config(_))));
    }

    #[test]
    fn discriminator_emits_one_logit_per_image() {
        let spec = DiscriminatorSpec { channels: vec![4, 8, 8], input_size: 16, ..Default::default() };
        let d: Discriminator<f64> = build_discriminator(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 7919) % 13) as f64 / 6.5 - 1.0);
        let mut g = Graph::new();
        let mut s = Bound::new(&mut g, &d.params, &d.buffers, Mode::Train, false);
        let xi = g.input(x.clone(), false);
        let y = d.forward(&mut g, &mut s, xi).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1]);
        for p in d.probabilities(&x).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }
}
