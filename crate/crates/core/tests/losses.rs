mod common;

use common::*;
use falcon_core::geometry::{BinaryMask, ProbMap};
use falcon_core::losses::{
    adv_generator_loss, bce_loss, bce_loss_grad, combined_seg_loss, dice_loss, dice_loss_grad, disc_loss, disc_loss_grad,
    hausdorff_loss, hausdorff_loss_with, Component, FrozenDistances, LossConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, n: usize) -> (ProbMap, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = nonempty_mask(&mut rng, n, n);
    let p = (0..n * n).map(|_| rng.gen_range(0.02..0.98)).collect();
    (ProbMap::new(n, n, p).unwrap(), gt)
}

fn nudge(p: &ProbMap, i: usize, d: f64) -> ProbMap {
    let mut v = p.data().to_vec();
    v[i] += d;
    ProbMap::new(p.height(), p.width(), v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_gradients_match_central_differences(seed in any::<u64>()) {
        let cfg = LossConfig::default();
        let (p, gt) = instance(seed, 8);
        let frozen = FrozenDistances::compute(&p, &gt, &cfg).unwrap();
        let (_, gh) = hausdorff_loss_with(&p, &gt, &frozen, &cfg).unwrap();
        let (_, gd) = dice_loss_grad(&p, &gt, cfg.epsilon).unwrap();
        let (_, gb) = bce_loss_grad(&p, &gt).unwrap();
        let h = 1e-4;
        for i in 0..64 {
            let (up, down) = (nudge(&p, i, h), nudge(&p, i, -h));
            let nh = (hausdorff_loss_with(&up, &gt, &frozen, &cfg).unwrap().0.total
                - hausdorff_loss_with(&down, &gt, &frozen, &cfg).unwrap().0.total) / (2.0 * h);
            let nd = (dice_loss(&up, &gt, cfg.epsilon).unwrap() - dice_loss(&down, &gt, cfg.epsilon).unwrap()) / (2.0 * h);
            let nb = (bce_loss(&up, &gt).unwrap() - bce_loss(&down, &gt).unwrap()) / (2.0 * h);
            for (a, n) in [(gh[i], nh), (gd[i], nd), (gb[i], nb)] {
                prop_assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-4, "{} vs {}", a, n);
            }
        }
    }

    #[test]
    fn values_recombine_from_components(seed in any::<u64>(), scores in proptest::collection::vec(0.01f64..0.99, 1..6)) {
        let cfg = LossConfig::default();
        let (p, gt) = instance(seed, 6);
        let v = combined_seg_loss(&p, &gt, &scores, &cfg).unwrap();
        let expected = v.component(Component::HdTerm).unwrap()
            + 0.9 * v.component(Component::DiceTerm).unwrap()
            + 0.1 * v.component(Component::AdvTerm).unwrap();
        prop_assert!((v.total - expected).abs() < 1e-9);
        prop_assert!((v.recombine() - v.total).abs() < 1e-9);
        prop_assert!(v.total >= 0.0);
    }

    #[test]
    fn dice_stays_in_unit_interval(seed in any::<u64>()) {
        let (p, gt) = instance(seed, 7);
        let d = dice_loss(&p, &gt, 1e-6).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn perfect_prediction_is_free() {
    let cfg = LossConfig::default();
    for seed in 0..10 {
        let (_, gt) = instance(seed, 8);
        let p = ProbMap::new(8, 8, gt.to_f64()).unwrap();
        let v = hausdorff_loss(&p, &gt, &cfg).unwrap();
        assert!(v.total < 1e-5, "{}", v.total);
        assert!(dice_loss(&p, &gt, cfg.epsilon).unwrap() < 1e-6);
        assert!(bce_loss(&p, &gt).unwrap() <= 1.1e-7);
    }
}

#[test]
fn closed_form_values() {
    let gt = BinaryMask::from_fn(4, 4, |r, _| r < 2);
    let half = ProbMap::filled(4, 4, 0.5).unwrap();
    assert!((dice_loss(&half, &gt, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((dice_loss(&ProbMap::filled(4, 4, 0.0).unwrap(), &gt, 1e-6).unwrap() - 1.0).abs() < 1e-12);
    assert!((bce_loss(&half, &gt).unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!((adv_generator_loss(&[0.25, 0.75]).unwrap() - (-(0.25f64).ln() - (0.75f64).ln()) / 2.0).abs() < 1e-12);
    assert!((disc_loss(&[0.9], &[0.2]).unwrap() - (-(0.9f64).ln() - (0.8f64).ln())).abs() < 1e-12);
    assert!((disc_loss(&[0.5], &[0.5]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn bce_matches_scalar_loop() {
    let (p, gt) = instance(42, 4);
    let mut s = 0.0;
    for (i, &q) in p.data().iter().enumerate() {
        let y = gt.to_f64()[i];
        s -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
    }
    assert!((bce_loss(&p, &gt).unwrap() - s / 16.0).abs() < 1e-12);
}

#[test]
fn zero_adversarial_weight_reduces_to_hausdorff() {
    let cfg = LossConfig { lambda2: 0.0, ..LossConfig::default() };
    let (p, gt) = instance(3, 8);
    let a = combined_seg_loss(&p, &gt, &[0.3, 0.6], &cfg).unwrap();
    assert_eq!(a.total.to_bits(), hausdorff_loss(&p, &gt, &cfg).unwrap().total.to_bits());
}

#[test]
fn discriminator_gradient_signs() {
    let (_, gr, gf) = disc_loss_grad(&[0.6, 0.7], &[0.4]).unwrap();
    assert!(gr.iter().all(|&g| g < 0.0), "raising real scores lowers the loss");
    assert!(gf.iter().all(|&g| g > 0.0), "raising fake scores raises the loss");
}
