//! Episodic meta-training on the source domain and boundary-aware
//! adversarial fine-tuning on target patients.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{PatientVolume, SealedMasks, SourceDataset};
use crate::episodes::{build_inference_task, build_target_task, sample_source_episode, SupportSelection};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, ProbMap};
use crate::inference_eval::{evaluate_tasks, EvalConfig};
use crate::losses::{
    adv_generator_loss_grad, disc_loss_grad, mean_loss, supervised_loss_grad, with_component, Component, LossConfig,
    LossValue, Objective,
};
use crate::network::{DiscMode, Discriminator, DiscriminatorConfig, NetworkConfig, SegmentationNet};
use crate::nn::{Adam, AdamConfig, Graph, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    MetaTrain,
    Baaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub optimizer: AdamConfig,
    /// Episodes for meta-training, epochs for fine-tuning.
    pub episodes_or_epochs: usize,
    /// Query samples per source episode.
    pub queries_per_episode: usize,
    pub objective: Objective,
    pub loss: LossConfig,
    pub disc: DiscriminatorConfig,
    pub seed: u64,
    pub disc_steps_per_gen_step: usize,
    pub unlabeled_adv_batch: usize,
    /// Feed predictions on unlabeled slices to the adversarial term as
    /// well as the labeled-query predictions.
    pub adversarial_on_unlabeled: bool,
    /// Early-stopping patience in epochs, on validation HD95.
    pub patience: usize,
    pub support_selection: SupportSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::MetaTrain,
            optimizer: AdamConfig::default(),
            episodes_or_epochs: 200,
            queries_per_episode: 1,
            objective: Objective::Bce,
            loss: LossConfig::default(),
            disc: DiscriminatorConfig::default(),
            seed: 0,
            disc_steps_per_gen_step: 1,
            unlabeled_adv_batch: 4,
            adversarial_on_unlabeled: true,
            patience: 10,
            support_selection: SupportSelection::Uniform,
        }
    }
}

impl TrainConfig {
    /// Defaults for the fine-tuning phase.
    pub fn baaf() -> Self {
        Self {
            phase: Phase::Baaf,
            episodes_or_epochs: 10,
            objective: Objective::HausdorffAdversarial,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.queries_per_episode == 0 {
            return Err(Error::InvalidConfig("queries_per_episode must be at least 1".into()));
        }
        if self.phase == Phase::MetaTrain && self.objective.uses_discriminator() {
            return Err(Error::InvalidConfig("meta-training has no discriminator; use bce, dice or hausdorff".into()));
        }
        self.loss.validate()?;
        self.disc.validate()
    }

    /// Whether the adversarial term contributes to the generator update.
    pub fn adversarial(&self) -> bool {
        self.objective.uses_discriminator() && self.loss.lambda2 > 0.0
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub phase: Phase,
    /// `generator`, `discriminator` or `validation`.
    pub kind: String,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub lr: f32,
    pub seed: u64,
}

impl LogRecord {
    fn from_loss(step: u64, phase: Phase, kind: &str, v: &LossValue, lr: f32, seed: u64) -> Self {
        let name = |c: &Component| serde_json::to_value(c).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        Self {
            step,
            phase,
            kind: kind.into(),
            total: v.total,
            components: v.components.iter().map(|(k, x)| (name(k), *x)).collect(),
            weights: v.weights.iter().map(|(k, x)| (name(k), *x)).collect(),
            lr,
            seed,
        }
    }

    /// Weighted sum of the components.
    pub fn recombine(&self) -> f64 {
        self.components
            .iter()
            .map(|(k, x)| self.weights.get(k).copied().unwrap_or(1.0) * x)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: u64,
    pub dsc: f64,
    pub hd95: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub net: SegmentationNet,
    pub net_opt: Adam,
    pub disc: Option<Discriminator>,
    pub disc_opt: Option<Adam>,
    /// Episodes (meta-training) or epochs (fine-tuning) completed.
    pub counter: u64,
    pub data_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    pub history: Vec<LogRecord>,
    pub val_history: Vec<ValRecord>,
    pub best: Option<(u64, f64)>,
    pub best_params: Option<ParamStore>,
    pub stale_epochs: usize,
    pub stopped_early: bool,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl TrainState {
    /// Fresh state with newly initialised weights.
    pub fn new(net_cfg: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        let net = SegmentationNet::new(net_cfg, cfg.seed)?;
        Self::with_net(net, cfg)
    }

    /// State around existing weights with a fresh optimizer, counters and
    /// random streams (used to start fine-tuning from meta-trained weights).
    pub fn with_net(net: SegmentationNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net_opt = Adam::new(cfg.optimizer, net.params());
        let (disc, disc_opt) = if cfg.phase == Phase::Baaf && cfg.objective.uses_discriminator() {
            let d = Discriminator::new(cfg.disc.clone(), cfg.seed ^ 0xD15C)?;
            let o = Adam::new(cfg.optimizer, d.params());
            (Some(d), Some(o))
        } else {
            (None, None)
        };
        Ok(Self {
            net_opt,
            disc,
            disc_opt,
            counter: 0,
            data_rng: rng_stream(cfg.seed, 1),
            dropout_rng: rng_stream(cfg.seed, 2),
            history: Vec::new(),
            val_history: Vec::new(),
            best: None,
            best_params: None,
            stale_epochs: 0,
            stopped_early: false,
            net,
            cfg,
        })
    }

    /// The weights selected by early stopping, or the current ones.
    pub fn best_model(&self) -> SegmentationNet {
        let mut net = self.net.clone();
        if let Some(p) = &self.best_params {
            net.params_mut().load_from(p).expect("same layout");
        }
        net
    }
}

fn write_log(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::to_string(rec).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
    }
    Ok(())
}

fn prob_map(t: &Tensor, i: usize) -> Result<ProbMap> {
    ProbMap::new(t.h(), t.w(), t.sample(i).iter().map(|&v| v as f64).collect())
}

fn masks_tensor(masks: &[&BinaryMask]) -> Result<Tensor> {
    let (h, w) = masks.first().ok_or(Error::EmptyBatch)?.shape();
    let data = masks.iter().flat_map(|m| m.data().iter().map(|&v| v as f32)).collect();
    Tensor::from_vec([masks.len(), 1, h, w], data)
}

/// Mean supervised loss over the first `gts.len()` predictions, with the
/// gradient seed for the whole prediction batch.
fn supervised_batch(pred: &Tensor, gts: &[&BinaryMask], objective: Objective, cfg: &LossConfig) -> Result<(LossValue, Tensor)> {
    let q = gts.len();
    let mut seed = Tensor::zeros(pred.shape());
    let mut values = Vec::with_capacity(q);
    let plane = pred.sample_len();
    for (i, gt) in gts.iter().enumerate() {
        let (v, g) = supervised_loss_grad(objective, &prob_map(pred, i)?, gt, cfg)?;
        for (d, gv) in seed.data_mut()[i * plane..(i + 1) * plane].iter_mut().zip(&g) {
            *d = (gv / q as f64) as f32;
        }
        values.push(v);
    }
    Ok((mean_loss(&values).ok_or(Error::EmptyBatch)?, seed))
}

/// Runs meta-training from a fresh state for `cfg.episodes_or_epochs`
/// episodes.
pub fn meta_train(source: &SourceDataset, net_cfg: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainState> {
    let state = TrainState::new(net_cfg.clone(), cfg.clone())?;
    meta_train_until(state, source, cfg.episodes_or_epochs as u64, None)
}

/// Continues meta-training until `target` episodes have run in total.
pub fn meta_train_until(
    mut state: TrainState,
    source: &SourceDataset,
    target: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainState> {
    if source.classes.len() < 2 {
        return Err(Error::InvalidConfig(format!("source has {} classes, need at least 2", source.classes.len())));
    }
    let k = state.net.config().support_size;
    if k == 0 {
        return Err(Error::InvalidConfig("meta-training needs support_size >= 1".into()));
    }
    let cfg = state.cfg.clone();
    while state.counter < target {
        let ep = sample_source_episode(source, k, cfg.queries_per_episode, &mut state.data_rng)?;
        let class = &source.classes[ep.class_id];
        let support = Tensor::stack(&ep.support.iter().map(|&i| class.samples[i].image.clone()).collect::<Vec<_>>())?;
        let query = Tensor::stack(&ep.query.iter().map(|&i| class.samples[i].image.clone()).collect::<Vec<_>>())?;
        let gts: Vec<&BinaryMask> = ep.query.iter().map(|&i| &class.samples[i].mask).collect();

        let mut g = Graph::new();
        let b = state.net.params().bind(&mut g, true);
        let q = g.constant(query);
        let s = g.constant(support);
        let y = state.net.forward_vars(&mut g, &b, q, Some(s))?;
        let (value, seed) = supervised_batch(g.value(y), &gts, cfg.objective, &cfg.loss)?;
        g.backward(vec![(y, seed)])?;
        state.net_opt.update(state.net.params_mut(), &b.grads(&g));
        state.counter += 1;
        let rec = LogRecord::from_loss(state.counter, Phase::MetaTrain, "generator", &value, cfg.optimizer.learning_rate, cfg.seed);
        write_log(&mut log, &rec)?;
        state.history.push(rec);
    }
    Ok(state)
}

/// Validation data for early stopping.
pub struct Validation<'a> {
    pub patients: &'a [PatientVolume],
    pub sealed: &'a SealedMasks,
    pub eval: EvalConfig,
}

/// Mean validation DSC and HD95 with one uniformly spaced task per patient.
pub fn validate_model(net: &SegmentationNet, val: &Validation<'_>) -> Result<(f64, f64)> {
    let k = net.config().support_size;
    let tasks = val
        .patients
        .iter()
        .map(|p| Ok((build_inference_task(p, k)?, 0)))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_tasks(net, val.patients, &tasks, val.sealed, &val.eval)?;
    Ok((report.dsc.mean, report.hd95.mean))
}

/// Fine-tunes `init` on the training patients. See [`baaf_finetune_until`].
pub fn baaf_finetune(
    patients: &[PatientVolume],
    init: SegmentationNet,
    cfg: &TrainConfig,
    val: Option<&Validation<'_>>,
) -> Result<TrainState> {
    let state = TrainState::with_net(init, cfg.clone())?;
    baaf_finetune_until(state, patients, val, cfg.episodes_or_epochs as u64, None)
}

/// Continues fine-tuning until `target` epochs have run in total or early
/// stopping triggers. Each epoch visits every patient once in order: a
/// generator step on the patient's target task, then the configured number
/// of discriminator steps.
pub fn baaf_finetune_until(
    mut state: TrainState,
    patients: &[PatientVolume],
    val: Option<&Validation<'_>>,
    target: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainState> {
    let cfg = state.cfg.clone();
    if let (Some(v), 0, true) = (val, state.counter, state.val_history.is_empty()) {
        record_validation(&mut state, v, 0, &mut log)?;
    }
    while state.counter < target && !state.stopped_early {
        let epoch = state.counter + 1;
        let mut gen_values = Vec::with_capacity(patients.len());
        for patient in patients {
            let v = generator_step(&mut state, patient, &mut log)?;
            gen_values.push(v);
        }
        state.counter = epoch;
        if let Some(v) = val {
            record_validation(&mut state, v, epoch, &mut log)?;
            if state.stale_epochs >= cfg.patience {
                state.stopped_early = true;
            }
        }
    }
    Ok(state)
}

fn record_validation(state: &mut TrainState, val: &Validation<'_>, epoch: u64, log: &mut Option<&mut dyn Write>) -> Result<()> {
    let (dsc, hd95) = validate_model(&state.net, val)?;
    state.val_history.push(ValRecord { epoch, dsc, hd95 });
    if state.best.map_or(true, |(_, best)| hd95 < best) {
        state.best = Some((epoch, hd95));
        state.best_params = Some(state.net.params().clone());
        state.stale_epochs = 0;
    } else {
        state.stale_epochs += 1;
    }
    let rec = LogRecord {
        step: epoch,
        phase: Phase::Baaf,
        kind: "validation".into(),
        total: hd95,
        components: [("dsc".to_string(), dsc), ("hd95".to_string(), hd95)].into_iter().collect(),
        weights: [("dsc".to_string(), 0.0), ("hd95".to_string(), 1.0)].into_iter().collect(),
        lr: state.cfg.optimizer.learning_rate,
        seed: state.cfg.seed,
    };
    write_log(log, &rec)?;
    state.history.push(rec);
    Ok(())
}

fn generator_step(state: &mut TrainState, patient: &PatientVolume, log: &mut Option<&mut dyn Write>) -> Result<LossValue> {
    let cfg = state.cfg.clone();
    let k = state.net.config().support_size;
    let task = build_target_task(patient, k, cfg.support_selection, &mut state.data_rng)?;
    let unlabeled = patient.unlabeled_positions();
    let n_adv = cfg.unlabeled_adv_batch.min(unlabeled.len());
    let adv_pick: Vec<usize> = rand::seq::index::sample(&mut state.data_rng, unlabeled.len(), n_adv)
        .into_iter()
        .map(|i| unlabeled[i])
        .collect();
    let adversarial = cfg.adversarial();

    let mut positions = task.query.clone();
    if adversarial && cfg.adversarial_on_unlabeled {
        positions.extend(&adv_pick);
    }
    let gts: Vec<&BinaryMask> = task.query.iter().map(|p| &patient.masks[p]).collect();

    let mut g = Graph::new();
    let b = state.net.params().bind(&mut g, true);
    let x = g.constant(patient.batch(&positions)?);
    let s = g.constant(patient.batch(&task.support)?);
    let y = state.net.forward_vars(&mut g, &b, x, Some(s))?;
    let (mut value, seed) = supervised_batch(g.value(y), &gts, cfg.objective, &cfg.loss)?;
    let mut seeds = vec![(y, seed)];
    if adversarial {
        let disc = state.disc.as_ref().expect("adversarial runs own a discriminator");
        let db = disc.params().bind(&mut g, false);
        let (scores, _) = disc.forward_vars(&mut g, &db, y, DiscMode::Train { rng: &mut state.dropout_rng })?;
        let sv: Vec<f64> = g.value(scores).data().iter().map(|&v| v as f64).collect();
        let (adv, grad) = adv_generator_loss_grad(&sv)?;
        let lambda2 = cfg.loss.lambda2;
        let gs = grad.iter().map(|&d| (lambda2 * d) as f32).collect();
        seeds.push((scores, Tensor::from_vec(g.value(scores).shape(), gs)?));
        value = with_component(value, Component::AdvTerm, adv, lambda2);
    }
    g.backward(seeds)?;
    state.net_opt.update(state.net.params_mut(), &b.grads(&g));
    let step = state.history.iter().filter(|r| r.kind == "generator").count() as u64 + 1;
    let rec = LogRecord::from_loss(step, Phase::Baaf, "generator", &value, cfg.optimizer.learning_rate, cfg.seed);
    write_log(log, &rec)?;
    state.history.push(rec);

    if adversarial {
        let fake = g.into_value(y);
        let real = masks_tensor(&gts)?;
        for _ in 0..cfg.disc_steps_per_gen_step {
            let v = discriminator_step(state, &real, &fake)?;
            let rec = LogRecord::from_loss(step, Phase::Baaf, "discriminator", &v, cfg.optimizer.learning_rate, cfg.seed);
            write_log(log, &rec)?;
            state.history.push(rec);
        }
    }
    Ok(value)
}

/// One discriminator update on real masks and detached predictions. The
/// generator is not touched.
pub fn discriminator_step(state: &mut TrainState, real: &Tensor, fake: &Tensor) -> Result<LossValue> {
    let (disc, opt) = match (state.disc.as_mut(), state.disc_opt.as_mut()) {
        (Some(d), Some(o)) => (d, o),
        _ => return Err(Error::InvalidConfig("this run has no discriminator".into())),
    };
    let mut g = Graph::new();
    let b = disc.params().bind(&mut g, true);
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let (sr, stats_r) = disc.forward_vars(&mut g, &b, r, DiscMode::Train { rng: &mut state.dropout_rng })?;
    let (sf, stats_f) = disc.forward_vars(&mut g, &b, f, DiscMode::Train { rng: &mut state.dropout_rng })?;
    let rv: Vec<f64> = g.value(sr).data().iter().map(|&v| v as f64).collect();
    let fv: Vec<f64> = g.value(sf).data().iter().map(|&v| v as f64).collect();
    let (loss, gr, gf) = disc_loss_grad(&rv, &fv)?;
    let to_t = |v: &[f64], shape| Tensor::from_vec(shape, v.iter().map(|&x| x as f32).collect());
    let seeds = vec![(sr, to_t(&gr, g.value(sr).shape())?), (sf, to_t(&gf, g.value(sf).shape())?)];
    g.backward(seeds)?;
    opt.update(disc.params_mut(), &b.grads(&g));
    let per_channel = |t: &Tensor, layer: usize| {
        let step = 1usize << (layer + 1);
        t.n() * (t.h() / step) * (t.w() / step)
    };
    for (stats, t) in [(&stats_r, real), (&stats_f, fake)] {
        for (name, s) in stats {
            let layer: usize = name
                .trim_start_matches("disc")
                .trim_end_matches(".bn")
                .parse()
                .unwrap_or(0);
            disc.update_running_stats(&[(name.clone(), s.clone())], per_channel(t, layer));
        }
    }
    Ok(LossValue::from_parts(&[(Component::DiscTerm, loss, 1.0)]))
}
