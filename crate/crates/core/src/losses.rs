//! Segmentation and adversarial objectives with analytic gradients.
//!
//! Every loss works on a single `H x W` map and returns the gradient with
//! respect to the prediction alongside its value where a gradient exists.
//! The Hausdorff term treats both distance maps as constants: no gradient
//! passes through the binarisation or the distance transform.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    boundary_distance_transform, distance_transform, BinaryMask, DistanceMap, ProbMap,
};

/// Clamp applied to probabilities inside every logarithm.
pub const LOG_EPS: f64 = 1e-7;

/// What the distance maps in the Hausdorff term measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Distance to the object set; zero inside the object.
    #[default]
    Object,
    /// Distance to the object's boundary pixels.
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Penalty exponent applied to distances.
    pub a: f64,
    /// Weight of the Dice term.
    pub lambda1: f64,
    /// Weight of the adversarial term.
    pub lambda2: f64,
    /// Smoothing added to the Dice denominator.
    pub epsilon: f64,
    /// Threshold for binarising the prediction before its distance transform.
    pub prob_threshold: f64,
    pub distance_mode: DistanceMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            a: 0.2,
            lambda1: 0.9,
            lambda2: 0.1,
            epsilon: 1e-6,
            prob_threshold: 0.5,
            distance_mode: DistanceMode::Object,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(Error::InvalidConfig(format!("loss.a must be > 0, got {}", self.a)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig("loss.epsilon must be >= 0".into()));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::InvalidConfig(
                "loss.prob_threshold must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Named loss components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    HdTerm,
    DiceTerm,
    AdvTerm,
    BceTerm,
    /// Discriminator objective (negated, so it is minimised).
    DiscTerm,
}

/// A loss total together with its unweighted components and the weights
/// used to combine them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<Component, f64>,
    pub weights: BTreeMap<Component, f64>,
    /// Both prediction and target were empty; the value is zero.
    #[serde(default)]
    pub both_empty: bool,
}

impl LossValue {
    pub fn from_parts(parts: &[(Component, f64, f64)]) -> Self {
        let mut components = BTreeMap::new();
        let mut weights = BTreeMap::new();
        for &(name, value, weight) in parts {
            components.insert(name, value);
            weights.insert(name, weight);
        }
        let mut value = Self {
            total: 0.0,
            components,
            weights,
            both_empty: false,
        };
        value.total = value.recombine();
        value
    }

    /// Weighted sum of the stored components.
    pub fn recombine(&self) -> f64 {
        self.components
            .iter()
            .map(|(name, v)| self.weights.get(name).copied().unwrap_or(1.0) * v)
            .sum()
    }

    pub fn component(&self, name: Component) -> Option<f64> {
        self.components.get(&name).copied()
    }
}

fn check_shapes(pred: &ProbMap, gt: &BinaryMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(gt.shape(), pred.shape()));
    }
    Ok(())
}

/// Distance maps the Hausdorff term holds constant during a gradient step.
#[derive(Debug, Clone)]
pub struct FrozenDistances {
    pub to_gt: DistanceMap,
    pub to_pred: DistanceMap,
    /// Neither the target nor the binarised prediction has an object pixel.
    pub both_empty: bool,
}

impl FrozenDistances {
    pub fn compute(pred: &ProbMap, gt: &BinaryMask, cfg: &LossConfig) -> Result<Self> {
        check_shapes(pred, gt)?;
        let binarised = pred.binarize(cfg.prob_threshold);
        let transform = match cfg.distance_mode {
            DistanceMode::Object => distance_transform,
            DistanceMode::Boundary => boundary_distance_transform,
        };
        Ok(Self {
            to_gt: transform(gt),
            to_pred: transform(&binarised),
            both_empty: gt.is_empty() && binarised.is_empty(),
        })
    }
}

/// Soft Dice loss `1 - 2 Σ(ŷ y) / (Σ(ŷ² + y²) + ε)` and its gradient.
fn dice_with_grad(pred: &[f64], gt: &[f64], epsilon: f64) -> (f64, Vec<f64>) {
    let mut overlap = 0.0;
    let mut power = 0.0;
    for (&p, &y) in pred.iter().zip(gt) {
        overlap += p * y;
        power += p * p + y * y;
    }
    let denom = power + epsilon;
    if denom == 0.0 {
        return (0.0, vec![0.0; pred.len()]);
    }
    let loss = 1.0 - 2.0 * overlap / denom;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &y)| -2.0 * y / denom + 4.0 * overlap * p / (denom * denom))
        .collect();
    (loss, grad)
}

pub fn dice_loss(pred: &ProbMap, gt: &BinaryMask, epsilon: f64) -> Result<f64> {
    Ok(dice_loss_grad(pred, gt, epsilon)?.0)
}

pub fn dice_loss_grad(pred: &ProbMap, gt: &BinaryMask, epsilon: f64) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, gt)?;
    Ok(dice_with_grad(pred.data(), &gt.to_f64(), epsilon))
}

/// Hausdorff-distance loss with the fused Dice term, evaluated against
/// precomputed (frozen) distance maps.
pub fn hausdorff_loss_with(
    pred: &ProbMap,
    gt: &BinaryMask,
    frozen: &FrozenDistances,
    cfg: &LossConfig,
) -> Result<(LossValue, Vec<f64>)> {
    check_shapes(pred, gt)?;
    let n = pred.data().len() as f64;
    let y = gt.to_f64();
    let mut hd = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (i, (&p, &t)) in pred.data().iter().zip(&y).enumerate() {
        let dg = frozen.to_gt.data()[i].powf(cfg.a);
        let dp = frozen.to_pred.data()[i].powf(cfg.a);
        hd += p * dg + t * dp;
        grad.push(dg / n);
    }
    hd /= n;
    let (dice, dice_grad) = dice_with_grad(pred.data(), &y, cfg.epsilon);
    for (g, d) in grad.iter_mut().zip(dice_grad) {
        *g += cfg.lambda1 * d;
    }
    let mut value = LossValue::from_parts(&[
        (Component::HdTerm, hd, 1.0),
        (Component::DiceTerm, dice, cfg.lambda1),
    ]);
    value.both_empty = frozen.both_empty;
    Ok((value, grad))
}

/// Hausdorff loss and its gradient with respect to `pred`.
pub fn hausdorff_loss_grad(
    pred: &ProbMap,
    gt: &BinaryMask,
    cfg: &LossConfig,
) -> Result<(LossValue, Vec<f64>)> {
    let frozen = FrozenDistances::compute(pred, gt, cfg)?;
    if frozen.both_empty {
        let mut value = LossValue::from_parts(&[
            (Component::HdTerm, 0.0, 1.0),
            (Component::DiceTerm, 0.0, cfg.lambda1),
        ]);
        value.both_empty = true;
        // Only the Dice gradient is meaningful with no object anywhere.
        let (_, dice_grad) = dice_with_grad(pred.data(), &gt.to_f64(), cfg.epsilon);
        let grad = dice_grad.into_iter().map(|g| cfg.lambda1 * g).collect();
        return Ok((value, grad));
    }
    hausdorff_loss_with(pred, gt, &frozen, cfg)
}

pub fn hausdorff_loss(pred: &ProbMap, gt: &BinaryMask, cfg: &LossConfig) -> Result<LossValue> {
    Ok(hausdorff_loss_grad(pred, gt, cfg)?.0)
}

/// Pixel-mean binary cross-entropy and its gradient. Probabilities are
/// clamped to `[LOG_EPS, 1 - LOG_EPS]`; the gradient is zero where the
/// clamp is active.
pub fn bce_loss_grad(pred: &ProbMap, gt: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, gt)?;
    let n = pred.data().len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.data().len());
    for (&p, &y) in pred.data().iter().zip(gt.data()) {
        let clamped = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
        let y = y as f64;
        loss -= y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln();
        let g = if p > LOG_EPS && p < 1.0 - LOG_EPS {
            (clamped - y) / (clamped * (1.0 - clamped))
        } else {
            0.0
        };
        grad.push(g / n);
    }
    Ok((loss / n, grad))
}

pub fn bce_loss(pred: &ProbMap, gt: &BinaryMask) -> Result<f64> {
    Ok(bce_loss_grad(pred, gt)?.0)
}

/// Generator-side adversarial loss: mean of `-log(score)`, with its
/// gradient with respect to each score.
pub fn adv_generator_loss_grad(scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let grad = scores
        .iter()
        .map(|&s| {
            let c = s.clamp(LOG_EPS, 1.0 - LOG_EPS);
            loss -= c.ln();
            if s > LOG_EPS && s < 1.0 - LOG_EPS {
                -1.0 / (c * n)
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn adv_generator_loss(scores: &[f64]) -> Result<f64> {
    Ok(adv_generator_loss_grad(scores)?.0)
}

/// Discriminator objective, negated so that it is minimised:
/// `-mean log(real) - mean log(1 - fake)`.
///
/// Returns the loss and the gradients with respect to the real and fake
/// scores.
pub fn disc_loss_grad(real: &[f64], fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (real_loss, real_grad) = adv_generator_loss_grad(real)?;
    let nf = fake.len() as f64;
    let mut fake_loss = 0.0;
    let fake_grad = fake
        .iter()
        .map(|&s| {
            let c = s.clamp(LOG_EPS, 1.0 - LOG_EPS);
            fake_loss -= (1.0 - c).ln();
            if s > LOG_EPS && s < 1.0 - LOG_EPS {
                1.0 / ((1.0 - c) * nf)
            } else {
                0.0
            }
        })
        .collect();
    Ok((real_loss + fake_loss / nf, real_grad, fake_grad))
}

pub fn disc_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    Ok(disc_loss_grad(real, fake)?.0)
}

/// `L_hd + λ2 · L_adv` for one prediction and the discriminator scores
/// attributed to it.
pub fn combined_seg_loss(
    pred: &ProbMap,
    gt: &BinaryMask,
    disc_scores: &[f64],
    cfg: &LossConfig,
) -> Result<LossValue> {
    let hd = hausdorff_loss(pred, gt, cfg)?;
    let adv = adv_generator_loss(disc_scores)?;
    let mut value = LossValue::from_parts(&[
        (Component::HdTerm, hd.components[&Component::HdTerm], 1.0),
        (
            Component::DiceTerm,
            hd.components[&Component::DiceTerm],
            cfg.lambda1,
        ),
        (Component::AdvTerm, adv, cfg.lambda2),
    ]);
    value.both_empty = hd.both_empty;
    if cfg.lambda2 == 0.0 {
        // Keep the total bit-identical to the plain Hausdorff loss.
        value.total = hd.total;
    }
    Ok(value)
}

/// Which objective drives a fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Pixel-wise binary cross-entropy.
    Bce,
    /// Soft Dice loss alone.
    Dice,
    /// Hausdorff loss with the fused Dice term.
    Hausdorff,
    /// Hausdorff loss plus the weighted adversarial term.
    #[default]
    HausdorffAdversarial,
}

impl Objective {
    pub fn uses_discriminator(self) -> bool {
        self == Objective::HausdorffAdversarial
    }
}

/// The supervised part of an objective on one prediction: value and
/// gradient with respect to the prediction. The adversarial term is
/// added by the caller, which owns the discriminator.
pub fn supervised_loss_grad(
    objective: Objective,
    pred: &ProbMap,
    gt: &BinaryMask,
    cfg: &LossConfig,
) -> Result<(LossValue, Vec<f64>)> {
    match objective {
        Objective::Bce => {
            let (loss, grad) = bce_loss_grad(pred, gt)?;
            Ok((LossValue::from_parts(&[(Component::BceTerm, loss, 1.0)]), grad))
        }
        Objective::Dice => {
            let (loss, grad) = dice_loss_grad(pred, gt, cfg.epsilon)?;
            Ok((LossValue::from_parts(&[(Component::DiceTerm, loss, 1.0)]), grad))
        }
        Objective::Hausdorff | Objective::HausdorffAdversarial => hausdorff_loss_grad(pred, gt, cfg),
    }
}

/// Averages several loss values component by component. Weights are taken
/// from the first value.
pub fn mean_loss(values: &[LossValue]) -> Option<LossValue> {
    let first = values.first()?;
    let n = values.len() as f64;
    let mut components = BTreeMap::new();
    for v in values {
        for (k, x) in &v.components {
            *components.entry(*k).or_insert(0.0) += x / n;
        }
    }
    let mut out = LossValue {
        total: 0.0,
        components,
        weights: first.weights.clone(),
        both_empty: values.iter().all(|v| v.both_empty),
    };
    out.total = out.recombine();
    Some(out)
}

/// Adds a weighted component to an existing value and updates its total.
pub fn with_component(mut value: LossValue, name: Component, x: f64, weight: f64) -> LossValue {
    value.components.insert(name, x);
    value.weights.insert(name, weight);
    value.total = value.recombine();
    value
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (ProbMap, BinaryMask) {
        let pred: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.05..0.95)).collect();
        let mut gt = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.4));
        if gt.is_empty() {
            gt.set(0, 0, true);
        }
        (ProbMap::new(h, w, pred).unwrap(), gt)
    }

    fn perturbed(p: &ProbMap, i: usize, delta: f64) -> ProbMap {
        let mut data = p.data().to_vec();
        data[i] += delta;
        ProbMap::new(p.height(), p.width(), data).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn defaults_match_published_settings() {
        let cfg = LossConfig::default();
        assert_eq!((cfg.a, cfg.lambda1, cfg.lambda2), (0.2, 0.9, 0.1));
        assert_eq!(cfg.prob_threshold, 0.5);
        assert!(cfg.validate().is_ok());
        let bad = LossConfig { a: 0.0, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_hausdorff_loss() {
        let gt = BinaryMask::from_fn(8, 8, |r, c| (2..5).contains(&r) && (1..6).contains(&c));
        let pred = ProbMap::from(&gt);
        let v = hausdorff_loss(&pred, &gt, &LossConfig::default()).unwrap();
        assert_eq!(v.component(Component::HdTerm), Some(0.0));
        assert!(v.total.abs() < 1e-6, "{}", v.total);
    }

    #[test]
    fn uniform_half_prediction_single_pixel_target() {
        let gt = BinaryMask::from_fn(5, 5, |r, c| (r, c) == (2, 2));
        let pred = ProbMap::filled(5, 5, 0.5).unwrap();
        let cfg = LossConfig {
            a: 1.0,
            lambda1: 0.0,
            ..LossConfig::default()
        };
        // Brute-force sum of distances from every pixel to (2,2).
        let mut sum_d = 0.0;
        for r in 0..5i32 {
            for c in 0..5i32 {
                sum_d += (((r - 2).pow(2) + (c - 2).pow(2)) as f64).sqrt();
            }
        }
        let v = hausdorff_loss(&pred, &gt, &cfg).unwrap();
        assert!((v.component(Component::HdTerm).unwrap() - 0.5 * sum_d / 25.0).abs() < 1e-12);
        assert!((v.total - 0.5 * sum_d / 25.0).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let gt = BinaryMask::from_fn(4, 4, |r, _| r < 2);
        let eps = 1e-6;
        let perfect = dice_loss(&ProbMap::from(&gt), &gt, eps).unwrap();
        assert!(perfect.abs() < eps * 8.0);
        let zero = dice_loss(&ProbMap::filled(4, 4, 0.0).unwrap(), &gt, 0.0).unwrap();
        assert_eq!(zero, 1.0);
        let half = dice_loss(&ProbMap::filled(4, 4, 0.5).unwrap(), &gt, 0.0).unwrap();
        assert!((half - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let gt = BinaryMask::from_fn(4, 4, |r, c| (r + c) % 2 == 0);
        let perfect = bce_loss(&ProbMap::from(&gt), &gt).unwrap();
        assert!(perfect <= -(1.0 - 1e-7f64).ln() + 1e-15);
        let half = bce_loss(&ProbMap::filled(4, 4, 0.5).unwrap(), &gt).unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pred, gt) = random_instance(&mut rng, 4, 4);
        let mut acc = 0.0;
        for i in 0..16 {
            let p = pred.data()[i];
            let y = gt.data()[i] as f64;
            acc += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        assert!((bce_loss(&pred, &gt).unwrap() - acc / 16.0).abs() < 1e-12);
    }

    #[test]
    fn adversarial_examples() {
        assert!(adv_generator_loss(&[1.0 - 1e-7; 4]).unwrap() < 1.1e-7);
        assert!((adv_generator_loss(&[0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let expected = (-(0.25f64).ln() - (0.75f64).ln()) / 2.0;
        assert!((adv_generator_loss(&[0.25, 0.75]).unwrap() - expected).abs() < 1e-15);
        assert!(matches!(adv_generator_loss(&[]), Err(Error::EmptyBatch)));

        assert!(disc_loss(&[1.0 - 1e-7], &[1e-7]).unwrap() < 1e-6);
        assert!((disc_loss(&[0.5, 0.5], &[0.5]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        let expected = -(0.9f64).ln() - (0.8f64).ln();
        assert!((disc_loss(&[0.9], &[0.2]).unwrap() - expected).abs() < 1e-15);
        assert!(matches!(disc_loss(&[0.5], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn combined_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (pred, gt) = random_instance(&mut rng, 6, 6);
        let zero_adv = LossConfig {
            lambda2: 0.0,
            ..LossConfig::default()
        };
        let combined = combined_seg_loss(&pred, &gt, &[0.3, 0.6], &zero_adv).unwrap();
        assert_eq!(combined.total, hausdorff_loss(&pred, &gt, &zero_adv).unwrap().total);

        let cfg = LossConfig::default();
        let v = combined_seg_loss(&pred, &gt, &[0.3, 0.6], &cfg).unwrap();
        let hd = v.component(Component::HdTerm).unwrap();
        let dice = v.component(Component::DiceTerm).unwrap();
        let adv = v.component(Component::AdvTerm).unwrap();
        assert!((v.total - (hd + 0.9 * dice + 0.1 * adv)).abs() < 1e-9);

        let none = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossConfig::default()
        };
        let perfect = combined_seg_loss(&ProbMap::from(&gt), &gt, &[0.5], &none).unwrap();
        assert_eq!(perfect.total, 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let gt = BinaryMask::zeros(4, 4);
        let pred = ProbMap::filled(4, 5, 0.5).unwrap();
        let cfg = LossConfig::default();
        assert!(matches!(hausdorff_loss(&pred, &gt, &cfg), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(dice_loss(&pred, &gt, 1e-6), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(bce_loss(&pred, &gt), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn both_empty_hausdorff_is_flagged_zero() {
        let gt = BinaryMask::zeros(4, 4);
        let pred = ProbMap::filled(4, 4, 0.1).unwrap();
        let v = hausdorff_loss(&pred, &gt, &LossConfig::default()).unwrap();
        assert!(v.both_empty);
        assert_eq!(v.component(Component::HdTerm), Some(0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-4;
        let cfg = LossConfig::default();
        for _ in 0..20 {
            let (pred, gt) = random_instance(&mut rng, 8, 8);
            let frozen = FrozenDistances::compute(&pred, &gt, &cfg).unwrap();
            let (_, g_hd) = hausdorff_loss_with(&pred, &gt, &frozen, &cfg).unwrap();
            let (_, g_dice) = dice_loss_grad(&pred, &gt, cfg.epsilon).unwrap();
            let (_, g_bce) = bce_loss_grad(&pred, &gt).unwrap();
            for _ in 0..10 {
                let i = rng.gen_range(0..64);
                let (up, down) = (perturbed(&pred, i, h), perturbed(&pred, i, -h));
                let fd_hd = (hausdorff_loss_with(&up, &gt, &frozen, &cfg).unwrap().0.total
                    - hausdorff_loss_with(&down, &gt, &frozen, &cfg).unwrap().0.total)
                    / (2.0 * h);
                let fd_dice = (dice_loss(&up, &gt, cfg.epsilon).unwrap()
                    - dice_loss(&down, &gt, cfg.epsilon).unwrap())
                    / (2.0 * h);
                let fd_bce =
                    (bce_loss(&up, &gt).unwrap() - bce_loss(&down, &gt).unwrap()) / (2.0 * h);
                assert!(rel_err(g_hd[i], fd_hd) < 1e-4, "hd {} vs {}", g_hd[i], fd_hd);
                assert!(rel_err(g_dice[i], fd_dice) < 1e-4);
                assert!(rel_err(g_bce[i], fd_bce) < 1e-4);
            }
        }
    }

    #[test]
    fn moving_mass_away_never_lowers_hd_term() {
        let gt = BinaryMask::from_fn(9, 9, |r, c| (3..6).contains(&r) && (3..6).contains(&c));
        let cfg = LossConfig {
            lambda1: 0.0,
            ..LossConfig::default()
        };
        let mut last = -1.0;
        for col in 5..9 {
            // A single pixel of mass 1 marching away from the object.
            let mut data = vec![0.0; 81];
            data[4 * 9 + col] = 1.0;
            let pred = ProbMap::new(9, 9, data).unwrap();
            let frozen = FrozenDistances::compute(&pred, &gt, &cfg).unwrap();
            let v = hausdorff_loss_with(&pred, &gt, &frozen, &cfg).unwrap().0;
            let hd = v.component(Component::HdTerm).unwrap();
            assert!(hd >= last);
            last = hd;
        }
    }
}
