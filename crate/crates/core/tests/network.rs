mod common;

use common::*;
use falcon_core::network::{
    count_params_flops, relate, support_prototype, Discriminator, DiscriminatorConfig, EncoderKind, NetworkConfig,
    PrototypeMode, RelationMode, SegmentationNet,
};
use falcon_core::nn::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor {
    Tensor::from_vec([n, 3, size, size], (0..n * 3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn support_order_never_matters(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SegmentationNet::new(toy_net(k), seed).unwrap();
        let q = batch(&mut rng, 1, 32);
        let s = batch(&mut rng, k, 32);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let p = Tensor::stack(&order.iter().map(|&i| s.item(i)).collect::<Vec<_>>()).unwrap();
        let a = net.forward(&q, &s).unwrap();
        let b = net.forward(&q, &p).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batch_items_are_independent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SegmentationNet::new(toy_net(2), 1).unwrap();
        let q = batch(&mut rng, 3, 32);
        let s = batch(&mut rng, 2, 32);
        let all = net.forward(&q, &s).unwrap();
        let one = net.forward(&q.item(1), &s).unwrap();
        prop_assert_eq!(all.sample(1), one.data());
    }
}

// Recorded from the first verified build. The matrix kernels pick SIMD
// paths at runtime, so other CPU families may need their own value.
#[test]
#[cfg(target_arch = "x86_64")]
fn forward_golden_checksum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let net = SegmentationNet::new(toy_net(3), 2024).unwrap();
    let out = net.forward(&batch(&mut rng, 2, 32), &batch(&mut rng, 3, 32)).unwrap();
    assert_eq!(digest(&out), "efd030ec30bbc7c09dac9efc3658302c99bf3d25c00fd58d923ef7d8e3edc749");
}

#[test]
fn prototype_sum_of_constants() {
    let c = |v: f32| Tensor::full([1, 4, 2, 2], v);
    let p = support_prototype(&[c(1.0), c(2.0), c(3.0)], PrototypeMode::Sum).unwrap();
    assert!(p.data().iter().all(|&v| v == 6.0));
    let m = support_prototype(&[c(1.0), c(2.0), c(3.0)], PrototypeMode::Mean).unwrap();
    assert!(m.data().iter().all(|&v| v == 2.0));
    let single = support_prototype(&[c(7.5)], PrototypeMode::Sum).unwrap();
    assert_eq!(single, c(7.5));
}

#[test]
fn relation_shapes_and_zero_prototype() {
    let q = Tensor::full([1, 64, 8, 8], 1.0);
    let r = relate(&q, &Tensor::zeros([1, 64, 8, 8])).unwrap();
    assert_eq!(r.shape(), [1, 128, 8, 8]);
    assert!(r.data()[64 * 64..].iter().all(|&v| v == 0.0));
}

#[test]
fn ablated_relation_ignores_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = NetworkConfig { relation: RelationMode::Ablated, ..toy_net(3) };
    let net = SegmentationNet::new(cfg, 9).unwrap();
    let q = batch(&mut rng, 2, 32);
    let a = net.forward(&q, &batch(&mut rng, 3, 32)).unwrap();
    let b = net.forward(&q, &batch(&mut rng, 3, 32)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn support_equal_to_query_smoke() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let net = SegmentationNet::new(toy_net(1), 10).unwrap();
    let q = batch(&mut rng, 1, 32);
    let out = net.forward(&q, &q).unwrap();
    assert!(out.is_finite());
    assert_eq!(out.shape(), [1, 1, 32, 32]);
}

#[test]
fn discriminator_contract() {
    let d = Discriminator::new(DiscriminatorConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let masks = Tensor::from_vec([5, 1, 32, 32], (0..5 * 1024).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let a = d.discriminate(&masks).unwrap();
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|&s| s > 0.0 && s < 1.0));
    assert_eq!(a, d.discriminate(&masks).unwrap());
}

#[test]
fn parameter_and_flop_accounting() {
    let (p, f) = count_params_flops(&NetworkConfig::default()).unwrap();
    assert!(p < 1_000_000, "{p}");
    assert_eq!(p, SegmentationNet::new(NetworkConfig::default(), 0).unwrap().params().num_learnable());
    assert!(f > 0);
    let large = NetworkConfig::large_backbone();
    assert_eq!(large.encoder_kind, EncoderKind::LargeBackbone);
    assert_eq!(large.bottleneck_size(), [14, 14]);
    let (lp, lf) = count_params_flops(&large).unwrap();
    assert!(lp > p && lf > f);
}

#[test]
fn gradient_free_forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = SegmentationNet::new(toy_net(2), 12).unwrap();
    let b = SegmentationNet::new(toy_net(2), 12).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    let q = batch(&mut rng, 1, 32);
    let s = batch(&mut rng, 2, 32);
    assert_eq!(a.forward(&q, &s).unwrap(), b.forward(&q, &s).unwrap());
}
