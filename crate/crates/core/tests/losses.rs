//! Loss closed forms and properties against independent formulas.

use std::time::Instant;

use inpaint_core::autograd::Graph;
use inpaint_core::losses::{adversarial_d_loss, adversarial_g_loss, bce_probabilities, d_loss_node, g_loss_node, hybrid_loss, smooth_l1, LabelKind, LossParts, LossWeights};
use inpaint_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_oracle(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_at(x: f64) -> f64 {
    smooth_l1(&Tensor::from_vec(&[1], vec![x]).unwrap()).unwrap().data()[0]
}

/// Derivative through the graph's masked smooth-L1 mean.
fn smooth_slope(x: f64) -> f64 {
    let mut g = Graph::new();
    let n = g.input(Tensor::from_vec(&[1], vec![x]).unwrap(), true);
    let l = g.smooth_l1_mean(n, None).unwrap();
    g.backward(l).unwrap().get(n).unwrap().data()[0]
}

#[test]
fn smooth_l1_matches_the_closed_form_on_a_grid() {
    let start = Instant::now();
    let grid: Vec<f64> = (0..1000).map(|i| -3.0 + 6.0 * i as f64 / 999.0).collect();
    let out = smooth_l1(&Tensor::from_vec(&[1000], grid.clone()).unwrap()).unwrap();
    for (x, y) in grid.iter().zip(out.data()) {
        assert!((y - smooth_oracle(*x)).abs() < 1e-9, "x = {x}");
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn smooth_l1_branches_meet_at_one() {
    for s in [1.0, -1.0] {
        assert!((smooth_at(s) - 0.5).abs() < 1e-12);
        let (below, above) = (smooth_at(s * (1.0 - 1e-13)), smooth_at(s * (1.0 + 1e-13)));
        assert!((below - above).abs() < 1e-12);
        let (d_below, d_above) = (smooth_slope(s * (1.0 - 1e-13)), smooth_slope(s * (1.0 + 1e-13)));
        assert!((d_below - s).abs() < 1e-12 && (d_above - s).abs() < 1e-12, "{d_below} {d_above}");
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn logit_losses_agree_with_the_probability_route() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let n = rng.random_range(1..6);
        let real: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let fake: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let seed = rng.random::<u64>();
        let weights = LossWeights::default();
        let mut labels = ChaCha8Rng::seed_from_u64(seed);
        let rt: Vec<f64> = weights.draw_labels(LabelKind::Real, n, &mut labels);
        let ft: Vec<f64> = weights.draw_labels(LabelKind::Fake, n, &mut labels);

        let mut g = Graph::new();
        let r = g.input(Tensor::from_vec(&[n, 1], real.clone()).unwrap(), false);
        let f = g.input(Tensor::from_vec(&[n, 1], fake.clone()).unwrap(), false);
        let d = d_loss_node(&mut g, r, f, &rt, &ft).unwrap();
        let gl = g_loss_node(&mut g, f).unwrap();

        let pr: Vec<f64> = real.iter().map(|&z| sigmoid(z)).collect();
        let pf: Vec<f64> = fake.iter().map(|&z| sigmoid(z)).collect();
        let by_prob = adversarial_d_loss(&pr, &pf, &weights, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!((g.value(d).data()[0] - by_prob).abs() < 1e-9);
        assert!((g.value(gl).data()[0] - adversarial_g_loss(&pf).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn smoothed_discriminator_loss_never_reaches_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let weights = LossWeights::default();
    for _ in 0..20 {
        let rt: Vec<f64> = weights.draw_labels(LabelKind::Real, 4, &mut rng);
        let ft: Vec<f64> = weights.draw_labels(LabelKind::Fake, 4, &mut rng);
        // Brute-force minimum of each sample's BCE over a probability grid.
        let floor = |targets: &[f64]| -> f64 {
            targets
                .iter()
                .map(|&t| {
                    (1..10_000)
                        .map(|i| i as f64 / 10_000.0)
                        .map(|p| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / targets.len() as f64
        };
        let floor_total = floor(&rt) + floor(&ft);
        assert!(floor_total > 0.0);
        for _ in 0..20 {
            let pr: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            let pf: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            let loss = bce_probabilities(&pr, &rt) + bce_probabilities(&pf, &ft);
            assert!(loss >= floor_total - 1e-6, "{loss} < {floor_total}");
        }
        // Predicting the labels themselves sits on the floor.
        let at_labels = bce_probabilities(&rt, &rt) + bce_probabilities(&ft, &ft);
        assert!((at_labels - floor_total).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn generator_loss_falls_as_the_discriminator_is_fooled(p in prop::collection::vec(0.0f64..0.99, 1..8), i in any::<prop::sample::Index>(), bump in 1e-3f64..0.01) {
        let k = i.index(p.len());
        let mut q = p.clone();
        q[k] += bump;
        prop_assert!(adversarial_g_loss(&q).unwrap() < adversarial_g_loss(&p).unwrap());
    }

    #[test]
    fn hybrid_loss_is_linear_in_the_weights(r in 0.0f64..5.0, a in 0.0f64..5.0, p in 0.0f64..5.0, l1 in 0.0f64..100.0, l2 in 0.0f64..100.0, k in 0.0f64..4.0) {
        let parts = LossParts { reconstruction: r, adversarial: a, perceptual: p };
        let at = |l1, l2| hybrid_loss(&parts, &LossWeights { lambda1: l1, lambda2: l2, ..Default::default() }).unwrap();
        let base = at(0.0, 0.0);
        prop_assert!((at(l1, l2) - base - (at(l1, 0.0) - base) - (at(0.0, l2) - base)).abs() < 1e-9);
        prop_assert!((at(k * l1, k * l2) - base - k * (at(l1, l2) - base)).abs() < 1e-9 * (1.0 + k * at(l1, l2)));
    }
}
