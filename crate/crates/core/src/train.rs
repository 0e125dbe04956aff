//! Training loops: personalization pre-training, upsampling pre-training and
//! head-only fine-tuning on a predicted field.

use std::collections::HashMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::optim::{build_optimizer, Optimizer, OptimizerConfig};
use crate::autodiff::schedule::{LrSchedule, ScheduleKind};
use crate::autodiff::{AutodiffError, Gradients, ParamStore, Var};
use crate::dataset::HrtfBundle;
use crate::features::{build_clue, retrieve_from_table, FeatureError, FeatureKind, FeatureTable};
use crate::metrics::lsd;
use crate::model_p::{GraphCache, ModelP, PInput, PSetup};
use crate::model_u::{ModelU, SpatialStencil};
use crate::nn::{lsd_loss, weighted_lsd_loss, Ctx, Trainable};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged in epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("unknown optimizer `{0}`")]
    UnknownOptimizer(String),
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub optimizer: String,
    pub lr: f64,
    pub epochs: usize,
    pub schedule: ScheduleKind,
}

impl StageConfig {
    pub fn personalization() -> Self {
        Self {
            optimizer: "radam".into(),
            lr: 0.001,
            epochs: 200,
            schedule: ScheduleKind::PlateauDecay { factor: 0.9, patience: 10 },
        }
    }

    pub fn upsampling() -> Self {
        Self {
            optimizer: "adam".into(),
            lr: 0.002,
            epochs: 200,
            schedule: ScheduleKind::PlateauDecay { factor: 0.95, patience: 3 },
        }
    }

    pub fn finetune() -> Self {
        Self {
            optimizer: "adam".into(),
            lr: 0.002,
            epochs: 20,
            schedule: ScheduleKind::ExponentialDecay { rate: 0.95 },
        }
    }

    fn build(&self) -> Result<(Box<dyn Optimizer>, LrSchedule), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Setup(format!("learning rate {}", self.lr)));
        }
        let opt = build_optimizer(&self.optimizer, OptimizerConfig::with_lr(self.lr))
            .ok_or_else(|| TrainError::UnknownOptimizer(self.optimizer.clone()))?;
        Ok((opt, LrSchedule::new(self.schedule, self.lr)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_lsd: f64,
    pub val_lsd: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_val_lsd: f64,
    pub best_epoch: usize,
    pub best_val_lsd: f64,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_lsd,val_lsd,lr\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_lsd, e.val_lsd, e.lr));
        }
        s
    }
}

/// Retrieval results and clue features for every subject in the bundle.
#[derive(Clone, Debug)]
pub struct Personalization {
    pub setup: PSetup,
    pub train: Vec<usize>,
    /// Retrieved neighbor subjects per target subject.
    pub neighbors: HashMap<usize, Vec<usize>>,
    /// Standardized clue feature per bundle subject.
    pub clue_features: Vec<Vec<f64>>,
}

impl Personalization {
    /// Training subjects retrieve among the other training subjects; every
    /// `others` subject retrieves among all training subjects.
    pub fn new(
        bundle: &HrtfBundle,
        train: &[usize],
        others: &[usize],
        measured: &[usize],
        retrieval: FeatureKind,
        m: usize,
        clue_feature: FeatureKind,
    ) -> Result<Self, TrainError> {
        if clue_feature == FeatureKind::Lsd {
            return Err(TrainError::Setup("the clue feature must be ILD or ITD".into()));
        }
        if m == 0 || m >= train.len() {
            return Err(TrainError::Setup(format!(
                "M = {m} needs at least M + 1 training subjects, have {}",
                train.len()
            )));
        }
        let table = FeatureTable::new(bundle, measured, retrieval_table_kind(retrieval), train)?;
        let table = FeatureTable { kind: retrieval, ..table };
        let mut neighbors = HashMap::new();
        for &s in train {
            let cands: Vec<usize> = train.iter().copied().filter(|&c| c != s).collect();
            neighbors.insert(s, retrieve_from_table(bundle, &table, &cands, s, m)?);
        }
        for &s in others {
            neighbors.insert(s, retrieve_from_table(bundle, &table, train, s, m)?);
        }
        let clue_table = FeatureTable::new(bundle, measured, clue_feature, train)?;
        let clue_features = (0..bundle.subject_count()).map(|s| clue_table.standardized(s)).collect();
        let setup = PSetup {
            retrieval,
            m,
            clue_feature,
            measured: measured.to_vec(),
            clue_standardizer: clue_table.standardizer.clone(),
        };
        Ok(Self { setup, train: train.to_vec(), neighbors, clue_features })
    }

    pub fn input<'a>(&self, bundle: &'a HrtfBundle, target: usize, d: usize) -> PInput<'a> {
        let nodes = &self.neighbors[&target];
        let dir = bundle.directions()[d];
        PInput {
            neighbors: nodes.iter().map(|&s| bundle.magnitude(s, d)).collect(),
            neighbor_clues: nodes.iter().map(|&s| build_clue(dir, &self.clue_features[s])).collect(),
            target_clue: build_clue(dir, &self.clue_features[target]),
        }
    }

    /// Personalized field for `target` over every bundle direction.
    pub fn predict_field(
        &self,
        model: &ModelP,
        bundle: &HrtfBundle,
        target: usize,
    ) -> Result<Vec<Vec<f64>>, TrainError> {
        let mut cache = GraphCache::default();
        (0..bundle.direction_count()).map(|d| Ok(model.predict(&self.input(bundle, target, d), &mut cache)?)).collect()
    }
}

/// LSD retrieval ranks spectra and carries no standardizable feature; the
/// table then only fixes the subset.
fn retrieval_table_kind(kind: FeatureKind) -> FeatureKind {
    if kind == FeatureKind::Lsd {
        FeatureKind::Ild
    } else {
        kind
    }
}

fn check_finite(epoch: usize, value: f64, what: &str) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged { epoch, detail: format!("{what} is {value}") })
    }
}

/// Runs backward from `loss` and returns its value with the parameter gradients.
fn backward(mut ctx: Ctx, loss: Var, epoch: usize) -> Result<(f64, Gradients), TrainError> {
    let value = ctx.tape.value(loss).data()[0];
    check_finite(epoch, value, "training loss")?;
    ctx.tape.backward(loss)?;
    Ok((value, ctx.tape.into_param_grads(ctx.store)))
}

fn apply(opt: &mut dyn Optimizer, store: &mut ParamStore, grads: &Gradients, epoch: usize) -> Result<(), TrainError> {
    opt.step(store, grads).map_err(|e| TrainError::Diverged { epoch, detail: e.to_string() })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn validation_lsd_p(
    model: &ModelP,
    bundle: &HrtfBundle,
    pers: &Personalization,
    subjects: &[usize],
) -> Result<f64, TrainError> {
    let mut errs = Vec::new();
    for &s in subjects {
        let field = pers.predict_field(model, bundle, s)?;
        errs.extend(field.iter().enumerate().map(|(d, p)| lsd(p, bundle.magnitude(s, d))));
    }
    Ok(mean(&errs))
}

/// Shared epoch bookkeeping: schedule, best-checkpoint tracking and logging.
struct Progress {
    log: TrainLog,
    best: ParamStore,
    sched: LrSchedule,
    label: &'static str,
}

impl Progress {
    fn new(label: &'static str, initial_val: f64, store: &ParamStore, sched: LrSchedule) -> Self {
        let log =
            TrainLog { initial_val_lsd: initial_val, best_epoch: 0, best_val_lsd: initial_val, epochs: Vec::new() };
        Self { log, best: store.clone(), sched, label }
    }

    fn epoch_end(
        &mut self,
        epoch: usize,
        losses: &[f64],
        val: f64,
        store: &ParamStore,
        opt: &mut dyn Optimizer,
    ) -> Result<(), TrainError> {
        check_finite(epoch, val, "validation LSD")?;
        let lr = self.sched.epoch_end(val);
        opt.set_lr(lr);
        if val < self.log.best_val_lsd {
            self.log.best_val_lsd = val;
            self.log.best_epoch = epoch;
            self.best = store.clone();
        }
        let train_lsd = mean(losses);
        info!("{} epoch {epoch}: train LSD {train_lsd:.4} dB, validation LSD {val:.4} dB, lr {lr:.3e}", self.label);
        self.log.epochs.push(EpochLog { epoch, train_lsd, val_lsd: val, lr });
        Ok(())
    }
}

fn all_pairs(subjects: &[usize], directions: usize) -> Vec<(usize, usize)> {
    subjects.iter().flat_map(|&s| (0..directions).map(move |d| (s, d))).collect()
}

/// Pre-trains `model` with one step per (training subject, direction) pair,
/// keeping the parameters with the best validation LSD.
pub fn train_model_p(
    model: &mut ModelP,
    bundle: &HrtfBundle,
    pers: &Personalization,
    validation: &[usize],
    cfg: &StageConfig,
    seed: u64,
) -> Result<TrainLog, TrainError> {
    let (mut opt, sched) = cfg.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = all_pairs(&pers.train, bundle.direction_count());
    let mut cache = GraphCache::default();
    let initial = validation_lsd_p(model, bundle, pers, validation)?;
    let mut progress = Progress::new("HRTF-P", initial, &model.store, sched);
    for epoch in 1..=cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(pairs.len());
        for &(s, d) in &pairs {
            let input = pers.input(bundle, s, d);
            let mut ctx = Ctx::new(&model.store, Trainable::All);
            let y = model.forward(&mut ctx, &input, cache.complete(input.neighbors.len()))?;
            let loss = lsd_loss(&mut ctx, y, bundle.magnitude(s, d))?;
            let (value, grads) = backward(ctx, loss, epoch)?;
            apply(opt.as_mut(), &mut model.store, &grads, epoch)?;
            losses.push(value);
        }
        let val = validation_lsd_p(model, bundle, pers, validation)?;
        progress.epoch_end(epoch, &losses, val, &model.store, opt.as_mut())?;
    }
    model.store = progress.best;
    Ok(progress.log)
}

fn stencil_rows<'a>(stencil: &SpatialStencil, field: impl Fn(usize) -> &'a [f64]) -> Vec<&'a [f64]> {
    stencil.layout.neighbors.iter().map(|&i| field(i)).collect()
}

pub fn validation_lsd_u(
    model: &ModelU,
    bundle: &HrtfBundle,
    stencils: &[SpatialStencil],
    subjects: &[usize],
) -> Result<f64, TrainError> {
    let mut errs = Vec::new();
    for &s in subjects {
        for (d, st) in stencils.iter().enumerate() {
            let p = model.predict(&stencil_rows(st, |i| bundle.magnitude(s, i)), st)?;
            errs.push(lsd(&p, bundle.magnitude(s, d)));
        }
    }
    Ok(mean(&errs))
}

/// Leave-one-direction-out pre-training on the training subjects' true fields.
pub fn train_model_u(
    model: &mut ModelU,
    bundle: &HrtfBundle,
    train: &[usize],
    validation: &[usize],
    stencils: &[SpatialStencil],
    cfg: &StageConfig,
    seed: u64,
) -> Result<TrainLog, TrainError> {
    if stencils.len() != bundle.direction_count() {
        return Err(TrainError::Setup(format!(
            "{} stencils for {} directions",
            stencils.len(),
            bundle.direction_count()
        )));
    }
    let (mut opt, sched) = cfg.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = all_pairs(train, bundle.direction_count());
    let initial = validation_lsd_u(model, bundle, stencils, validation)?;
    let mut progress = Progress::new("HRTF-U", initial, &model.store, sched);
    for epoch in 1..=cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(pairs.len());
        for &(s, d) in &pairs {
            let st = &stencils[d];
            let rows = stencil_rows(st, |i| bundle.magnitude(s, i));
            let mut ctx = Ctx::new(&model.store, Trainable::All);
            let y = model.forward(&mut ctx, &rows, st)?;
            let loss = lsd_loss(&mut ctx, y, bundle.magnitude(s, d))?;
            let (value, grads) = backward(ctx, loss, epoch)?;
            apply(opt.as_mut(), &mut model.store, &grads, epoch)?;
            losses.push(value);
        }
        let val = validation_lsd_u(model, bundle, stencils, validation)?;
        progress.epoch_end(epoch, &losses, val, &model.store, opt.as_mut())?;
    }
    model.store = progress.best;
    Ok(progress.log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(flatten)]
    pub stage: StageConfig,
    /// Loss weight on directions supervised by a true measurement; the
    /// remaining directions use the personalized prediction with weight 1.
    /// Unset means balanced: both groups carry the same total weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_weight: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { stage: StageConfig::finetune(), measured_weight: None }
    }
}

impl FinetuneConfig {
    pub fn weight_for(&self, directions: usize, measured: usize) -> f64 {
        match self.measured_weight {
            Some(w) => w,
            None if measured == 0 || measured >= directions => 1.0,
            None => (directions - measured) as f64 / measured as f64,
        }
    }
}

/// Result of adapting the upsampling head to one subject.
#[derive(Clone, Debug)]
pub struct Finetuned {
    pub model: ModelU,
    /// Adapted-model output at every direction.
    pub predictions: Vec<Vec<f64>>,
    pub epoch_losses: Vec<f64>,
}

/// Copy of `model` with only the dense head adapted to `field`. Targets are
/// `measured` truths where available and the field itself elsewhere.
pub fn finetune_model_u(
    model: &ModelU,
    field: &[Vec<f64>],
    measured: &[(usize, Vec<f64>)],
    stencils: &[SpatialStencil],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Finetuned, TrainError> {
    if field.is_empty() || field.len() != stencils.len() {
        return Err(TrainError::Setup(format!("field of {} directions for {} stencils", field.len(), stencils.len())));
    }
    let features = model.field_features(field, stencils)?;
    let weight = cfg.weight_for(field.len(), measured.len());
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(TrainError::Setup(format!("measured weight {weight}")));
    }
    let mut targets: Vec<(&[f64], f64)> = field.iter().map(|f| (f.as_slice(), 1.0)).collect();
    for (d, truth) in measured {
        let slot = targets
            .get_mut(*d)
            .ok_or_else(|| TrainError::Setup(format!("measured direction {d} outside the field")))?;
        *slot = (truth.as_slice(), weight);
    }
    let mut tuned = model.clone();
    let head = Trainable::Only(model.head_params());
    let (mut opt, mut sched) = cfg.stage.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..field.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.stage.epochs);
    for epoch in 1..=cfg.stage.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len());
        for &d in &order {
            let mut ctx = Ctx::new(&tuned.store, head.clone());
            let z = ctx.constant(features[d].clone());
            let y = tuned.head(&mut ctx, z)?;
            let (target, w) = targets[d];
            let loss = weighted_lsd_loss(&mut ctx, y, target, w)?;
            let (value, grads) = backward(ctx, loss, epoch)?;
            apply(opt.as_mut(), &mut tuned.store, &grads, epoch)?;
            losses.push(value);
        }
        let l = mean(&losses);
        opt.set_lr(sched.epoch_end(l));
        debug!("fine-tune epoch {epoch}: loss {l:.4}");
        epoch_losses.push(l);
    }
    let predictions = features.iter().map(|f| tuned.predict_from_feature(f)).collect::<Result<_, _>>()?;
    Ok(Finetuned { model: tuned, predictions, epoch_losses })
}
