//! Composition, corruption, normalization and mask sampling checked
//! pixel by pixel and over random inputs.

use inpaint_core::imaging::{compose_batch, compose_completion, corrupt, denormalize, normalize, sample_mask, ImageTensor, Mask, MaskSpec, RangeTag};
use inpaint_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn signed_image(side: usize, rng: &mut ChaCha8Rng) -> ImageTensor<f64> {
    let values = (0..3 * side * side).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    ImageTensor::new(side, side, 3, values, RangeTag::Signed).unwrap()
}

#[test]
fn composition_matches_the_pixel_rule_for_100_random_masks() {
    let side = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut mismatches = 0;
    for _ in 0..100 {
        let gt = signed_image(side, &mut rng);
        let generated = signed_image(side, &mut rng);
        let density: f64 = rng.random();
        let mask = Mask::new(side, side, (0..side * side).map(|_| u8::from(rng.random::<f64>() < density)).collect()).unwrap();
        let out = compose_completion(&generated, &gt, &mask).unwrap();
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let expected = if mask.get(y, x) { generated.get(c, y, x) } else { gt.get(c, y, x) };
                    if out.get(c, y, x).to_bits() != expected.to_bits() {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn mask_sampler_covers_every_side_and_stays_inside() {
    let spec = MaskSpec { min_size: 48, max_size: 80 };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seen = [0usize; 81];
    for _ in 0..10_000 {
        let m = sample_mask(&spec, 128, 128, &mut rng).unwrap();
        let rows: Vec<usize> = (0..128).filter(|&y| (0..128).any(|x| m.get(y, x))).collect();
        let cols: Vec<usize> = (0..128).filter(|&x| (0..128).any(|y| m.get(y, x))).collect();
        let side = rows.len();
        assert_eq!(cols.len(), side);
        assert_eq!(m.count(), side * side, "mask is not a full square");
        assert_eq!(rows.last().unwrap() - rows[0] + 1, side);
        assert!(*rows.last().unwrap() < 128 && *cols.last().unwrap() < 128);
        seen[side] += 1;
    }
    for side in 48..=80 {
        assert!(seen[side] > 0, "side {side} never drawn");
    }
    assert_eq!(seen[..48].iter().sum::<usize>(), 0);
}

fn arb_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<u8>)> {
    (1usize..10).prop_flat_map(|side| {
        let n = side * side;
        (
            Just(side),
            prop::collection::vec(-1.0f64..=1.0, 3 * n),
            prop::collection::vec(-1.0f64..=1.0, 3 * n),
            prop::collection::vec(0u8..=1, n),
        )
    })
}

proptest! {
    #[test]
    fn composing_twice_equals_composing_once((side, a, b, m) in arb_case()) {
        let gt = ImageTensor::new(side, side, 3, a, RangeTag::Signed).unwrap();
        let generated = ImageTensor::new(side, side, 3, b, RangeTag::Signed).unwrap();
        let mask = Mask::new(side, side, m).unwrap();
        let once = compose_completion(&generated, &gt, &mask).unwrap();
        let twice = compose_completion(&generated, &once, &mask).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn corrupt_then_compose_with_truth_restores_it((side, a, _b, m) in arb_case()) {
        let gt = ImageTensor::new(side, side, 3, a, RangeTag::Signed).unwrap();
        let mask = Mask::new(side, side, m).unwrap();
        let (corrupted, input4) = corrupt(&gt, &mask).unwrap();
        prop_assert_eq!(compose_completion(&gt, &corrupted, &mask).unwrap(), gt.clone());
        for y in 0..side {
            for x in 0..side {
                let hole = mask.get(y, x);
                prop_assert_eq!(input4.get(3, y, x), if hole { 1.0 } else { 0.0 });
                for c in 0..3 {
                    prop_assert_eq!(input4.get(c, y, x), if hole { 0.0 } else { gt.get(c, y, x) });
                }
            }
        }
    }

    #[test]
    fn batch_and_image_composition_agree((side, a, b, m) in arb_case()) {
        let gt = ImageTensor::new(side, side, 3, a, RangeTag::Signed).unwrap();
        let generated = ImageTensor::new(side, side, 3, b, RangeTag::Signed).unwrap();
        let mask = Mask::new(side, side, m).unwrap();
        let single = compose_completion(&generated, &gt, &mask).unwrap();
        let as_batch = |t: Tensor<f64>| t.reshape(&[1, 3, side, side]).unwrap();
        let batch = compose_batch(
            &as_batch(generated.to_tensor()),
            &as_batch(gt.to_tensor()),
            &mask.to_tensor::<f64>().reshape(&[1, 1, side, side]).unwrap(),
        )
        .unwrap();
        prop_assert_eq!(batch.data(), single.values());
    }

    #[test]
    fn normalization_round_trips_every_byte(bytes in prop::collection::vec(any::<u8>(), 3..=48)) {
        let n = bytes.len() / 3 * 3;
        let raw: Vec<f32> = bytes[..n].iter().map(|&b| f32::from(b)).collect();
        let img = ImageTensor::new(1, n / 3, 3, raw.clone(), RangeTag::Raw).unwrap();
        let signed = normalize(&img).unwrap();
        prop_assert!(signed.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = denormalize(&signed).unwrap();
        prop_assert_eq!(back.values(), &raw[..]);
    }

    #[test]
    fn sampled_masks_are_inside_and_sized(seed in any::<u64>(), h in 8usize..40, w in 8usize..40, lo in 1usize..8, extra in 0usize..8) {
        let spec = MaskSpec { min_size: lo, max_size: (lo + extra).min(h.min(w)) };
        let m = sample_mask(&spec, h, w, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let side = (m.count() as f64).sqrt() as usize;
        prop_assert_eq!(side * side, m.count());
        prop_assert!(side >= spec.min_size && side <= spec.max_size);
        prop_assert_eq!((m.height(), m.width()), (h, w));
    }
}
