//! PSNR and masked pixel metrics against independently coded formulas,
//! plus the identity-model optimum.

use inpaint_core::data::{synthetic_textures, Dataset, Recipe};
use inpaint_core::imaging::{ImageTensor, Mask, RangeTag};
use inpaint_core::metrics::{evaluate, pixel_metrics, psnr, Completer, Regime};
use inpaint_core::{Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Peak-signal form with the peak kept explicit.
fn oracle_psnr(mse: f64) -> f64 {
    let peak = 1.0f64;
    20.0 * peak.log10() - 10.0 * mse.ln() / std::f64::consts::LN_10
}

#[test]
fn psnr_agrees_with_an_independent_formula_on_random_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let mse = 10f64.powf(rng.random_range(-8.0..0.0));
        let (a, b) = (psnr(mse), oracle_psnr(mse));
        assert!((a - b).abs() < 1e-6, "mse {mse}: {a} vs {b}");
    }
}

#[test]
fn noisy_image_psnr_matches_the_oracle_from_raw_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let side = 24;
    for _ in 0..20 {
        let amplitude = rng.random_range(0.001..0.3);
        let x: Vec<f64> = (0..3 * side * side).map(|_| rng.random()).collect();
        let y: Vec<f64> = x.iter().map(|v| (v + rng.random_range(-amplitude..amplitude)).clamp(0.0, 1.0)).collect();
        let mask = Mask::square(side, side, 3, 5, 12).unwrap();
        let mut sq = 0.0;
        let mut n = 0.0;
        for c in 0..3 {
            for yy in 3..15 {
                for xx in 5..17 {
                    let i = (c * side + yy) * side + xx;
                    sq += (x[i] - y[i]) * (x[i] - y[i]);
                    n += 1.0;
                }
            }
        }
        let gt = ImageTensor::new(side, side, 3, x, RangeTag::Unit).unwrap();
        let out = ImageTensor::new(side, side, 3, y, RangeTag::Unit).unwrap();
        let (_, l2) = pixel_metrics(&out, &gt, &mask).unwrap();
        assert!((psnr(l2) - oracle_psnr(sq / n)).abs() < 1e-6);
    }
}

#[test]
fn zero_output_on_a_half_gray_field_scores_one_half() {
    let side = 128;
    let gt = ImageTensor::new(side, side, 3, vec![0.5f64; 3 * side * side], RangeTag::Unit).unwrap();
    let zero = ImageTensor::new(side, side, 3, vec![0.0f64; 3 * side * side], RangeTag::Unit).unwrap();
    let (l1, l2) = pixel_metrics(&zero, &gt, &Mask::centered(side, side, 56).unwrap()).unwrap();
    assert_eq!((l1, l2), (0.5, 0.25));
}

struct Identity;

impl Completer<f64> for Identity {
    fn complete(&self, _input4: &Tensor<f64>, gt: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(gt.clone())
    }
}

/// Predicts mid-gray everywhere.
struct Gray;

impl Completer<f64> for Gray {
    fn complete(&self, input4: &Tensor<f64>, _gt: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = input4.shape();
        Ok(Tensor::zeros(&[s[0], 3, s[2], s[3]]))
    }
}

fn textures() -> Dataset {
    Dataset::from_images(synthetic_textures(6, 32, 3), Recipe::Generic, 32)
}

#[test]
fn identity_model_scores_zero_error_and_infinite_psnr() {
    let ds = textures();
    for regime in [Regime::Center, Regime::Random] {
        let row = evaluate(&Identity, &ds, regime, 12, 1).unwrap();
        assert_eq!((row.mean_l1, row.mean_l2), (0.0, 0.0));
        assert!(row.psnr.is_infinite() && row.psnr > 0.0);
        let gray = evaluate(&Gray, &ds, regime, 12, 1).unwrap();
        assert!(gray.mean_l1 > row.mean_l1 && gray.psnr < row.psnr);
    }
}

proptest! {
    #[test]
    fn psnr_decreases_as_error_grows(a in 1e-9f64..1.0, b in 1e-9f64..1.0) {
        prop_assume!(a < b);
        prop_assert!(psnr(a) > psnr(b));
    }

    #[test]
    fn unmasked_pixels_never_move_the_metrics(seed in any::<u64>(), top in 0usize..8, left in 0usize..8, size in 1usize..8) {
        let side = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<f64> = (0..3 * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out: Vec<f64> = (0..3 * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = Mask::square(side, side, top, left, size).unwrap();
        let perturbed: Vec<f64> = out
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask.values()[i % (side * side)] == 1 { v } else { rng.random_range(-1.0..1.0) })
            .collect();
        let gt = ImageTensor::new(side, side, 3, gt, RangeTag::Signed).unwrap();
        let a = pixel_metrics(&ImageTensor::new(side, side, 3, out, RangeTag::Signed).unwrap(), &gt, &mask).unwrap();
        let b = pixel_metrics(&ImageTensor::new(side, side, 3, perturbed, RangeTag::Signed).unwrap(), &gt, &mask).unwrap();
        prop_assert_eq!(a, b);
    }
}
