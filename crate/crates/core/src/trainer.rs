//! Training loop, learning-rate schedule and optimizers.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ca_mae::{sample_channel_masks, CaMaeModel};
use crate::checkpoint::Checkpoint;
use crate::data::{augment_flips, random_crop, Crop, WellImage};
use crate::error::{Error, Result};
use crate::fourier::{LossWeights, ReconstructionLoss};
use crate::mae::{MaeModel, WslModel};
use crate::nn::{Gradients, Mat, ParamStore, Tape, Var};
use crate::patch::{check_ratio, sample_mask};
use crate::seed;
use crate::vit::ForwardCtx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Objective {
    Mae,
    CaMae,
    Wsl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    OneCycleCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerKind {
    Lion,
    Adamw,
}

/// Which reconstruction loss the MAE objectives use; `alpha` weights the
/// Fourier term of `Combined`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Fourier,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub max_lr: f64,
    pub schedule: Schedule,
    pub warmup_fraction: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub loss: LossKind,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Random horizontal/vertical flips on every training crop.
    pub augment_flips: bool,
    /// WSL only: draw each epoch with replacement, weighted by inverse label frequency.
    pub weighted_sampling: bool,
    /// Manual early stop: return after this many completed epochs while
    /// keeping the schedule of the full run.
    pub stop_after_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Mae,
            batch_size: 32,
            max_lr: 1e-3,
            schedule: Schedule::OneCycleCosine,
            warmup_fraction: 0.1,
            optimizer: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            adam_eps: 1e-8,
            epochs: 10,
            alpha: 0.01,
            loss: LossKind::Combined,
            mask_ratio: 0.75,
            seed: 0,
            augment_flips: true,
            weighted_sampling: false,
            stop_after_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return bad("max_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        LossWeights::new(self.alpha)?;
        check_ratio(self.mask_ratio)?;
        Ok(())
    }

    pub fn reconstruction_loss(&self) -> ReconstructionLoss {
        match self.loss {
            LossKind::Mse => ReconstructionLoss::Mse,
            LossKind::Fourier => ReconstructionLoss::Fourier,
            LossKind::Combined => ReconstructionLoss::Combined { alpha: self.alpha },
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// One-cycle schedule: linear warmup from 0, then cosine decay to 0.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let Schedule::OneCycleCosine = config.schedule;
    let (s, total) = (step as f64, total_steps as f64);
    let warm = config.warmup_fraction * total;
    if s < warm {
        return Ok(config.max_lr * s / warm);
    }
    let progress = if total > warm { (s - warm) / (total - warm) } else { 1.0 };
    Ok(config.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Optimizer moments, one entry per parameter (AdamW also keeps `v`).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, p)| Mat::zeros(p.value.dim())).collect();
        Self {
            kind,
            t: 0,
            v: match kind {
                OptimizerKind::Adamw => zeros.clone(),
                OptimizerKind::Lion => Vec::new(),
            },
            m: zeros,
        }
    }

    fn round_to_f32(&mut self) {
        for m in self.m.iter_mut().chain(self.v.iter_mut()) {
            m.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// Sign with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One in-place update. Weight decay is decoupled and only touches
/// parameters flagged for decay.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape {
            expected: vec![store.len()],
            actual: vec![grads.len(), state.m.len()],
        });
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    for (i, (id, param)) in store.iter_mut().enumerate() {
        let g = grads.get(id);
        if g.dim() != param.value.dim() || state.m[i].dim() != param.value.dim() {
            return Err(Error::Shape {
                expected: vec![param.value.nrows(), param.value.ncols()],
                actual: vec![g.nrows(), g.ncols()],
            });
        }
        let wd = if param.decay { config.weight_decay } else { 0.0 };
        let m = &mut state.m[i];
        match state.kind {
            OptimizerKind::Lion => {
                ndarray::Zip::from(&mut param.value).and(&mut *m).and(g).for_each(|w, m, &g| {
                    let c = b1 * *m + (1.0 - b1) * g;
                    *w -= lr * (sign(c) + wd * *w);
                    *m = b2 * *m + (1.0 - b2) * g;
                });
            }
            OptimizerKind::Adamw => {
                let v = &mut state.v[i];
                let bc1 = 1.0 - b1.powi(state.t as i32);
                let bc2 = 1.0 - b2.powi(state.t as i32);
                let eps = config.adam_eps;
                ndarray::Zip::from(&mut param.value)
                    .and(&mut *m)
                    .and(v)
                    .and(g)
                    .for_each(|w, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                        *w -= lr * (update + wd * *w);
                    });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
    pub validation: Vec<ValidationPoint>,
}

impl LossCurve {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "lr"])?;
        for p in &self.points {
            w.write_record([p.step.to_string(), format!("{:e}", p.loss), format!("{:e}", p.lr)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.points.first().map(|p| p.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }
}

/// One training image and its class label (WSL only).
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: WellImage,
    pub label: Option<usize>,
}

/// Everything needed to resume a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    /// Next global step.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: OptimizerState,
    pub curve: LossCurve,
}

/// A model the loop can train.
pub trait Trainable: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn crop_size(&self) -> usize;
    fn objective(&self) -> Objective;
    fn sample_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        crop: &Crop,
        label: Option<usize>,
        config: &TrainConfig,
        sample_seed: u64,
        ctx: &mut ForwardCtx,
    ) -> Result<Var>;
    fn to_checkpoint(&self, training: Option<&TrainingState>) -> Checkpoint;
}

const TAG_MASK: u64 = 0x6d61_736b;

impl Trainable for MaeModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn crop_size(&self) -> usize {
        self.config.crop_size
    }
    fn objective(&self) -> Objective {
        Objective::Mae
    }
    fn sample_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        crop: &Crop,
        _label: Option<usize>,
        config: &TrainConfig,
        sample_seed: u64,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let mask = sample_mask(
            self.config.n_patches(),
            config.mask_ratio,
            seed::derive(sample_seed, &[TAG_MASK]),
        )?;
        self.loss_on_tape(tape, crop, &mask, config.reconstruction_loss(), ctx)
    }
    fn to_checkpoint(&self, training: Option<&TrainingState>) -> Checkpoint {
        Checkpoint::from_mae(self, training)
    }
}

impl Trainable for CaMaeModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn crop_size(&self) -> usize {
        self.config.crop_size
    }
    fn objective(&self) -> Objective {
        Objective::CaMae
    }
    fn sample_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        crop: &Crop,
        _label: Option<usize>,
        config: &TrainConfig,
        sample_seed: u64,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let masks = sample_channel_masks(
            crop.channels(),
            self.config.n_patches(),
            config.mask_ratio,
            seed::derive(sample_seed, &[TAG_MASK]),
        )?;
        self.loss_on_tape(tape, crop, &masks, config.reconstruction_loss(), ctx)
    }
    fn to_checkpoint(&self, training: Option<&TrainingState>) -> Checkpoint {
        Checkpoint::from_ca_mae(self, training)
    }
}

impl Trainable for WslModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn crop_size(&self) -> usize {
        self.config.crop_size
    }
    fn objective(&self) -> Objective {
        Objective::Wsl
    }
    fn sample_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        crop: &Crop,
        label: Option<usize>,
        _config: &TrainConfig,
        _sample_seed: u64,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let label =
            label.ok_or_else(|| Error::InvalidArgument("WSL training item without a label".into()))?;
        self.loss_on_tape(tape, crop, label, ctx)
    }
    fn to_checkpoint(&self, training: Option<&TrainingState>) -> Checkpoint {
        Checkpoint::from_wsl(self, training)
    }
}

/// The augmented, standardized crop a sample contributes at a given step.
pub fn training_crop(item: &TrainItem, crop_size: usize, config: &TrainConfig, sample_seed: u64) -> Result<Crop> {
    let crop = random_crop(&item.image, crop_size, seed::derive(sample_seed, &[1]))?;
    Ok(if config.augment_flips {
        augment_flips(crop, seed::derive(sample_seed, &[2]))
    } else {
        crop
    })
}

fn sample_seed(config: &TrainConfig, epoch: usize, idx: usize) -> u64 {
    seed::derive(config.seed, &[0x7472_6169, epoch as u64, idx as u64])
}

/// Dataset order for one epoch.
fn epoch_order(items: &[TrainItem], config: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut rng = seed::rng(config.seed, &[0x6f72_6472, epoch as u64]);
    if config.weighted_sampling && config.objective == Objective::Wsl {
        use rand::distr::{weighted::WeightedIndex, Distribution};
        let mut counts = std::collections::HashMap::new();
        for it in items {
            *counts.entry(it.label).or_insert(0usize) += 1;
        }
        let weights: Vec<f64> = items.iter().map(|it| 1.0 / counts[&it.label] as f64).collect();
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        return (0..items.len()).map(|_| dist.sample(&mut rng)).collect();
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    order
}

/// Loss and gradient of one sample in training mode.
fn sample_grad<M: Trainable>(
    model: &M,
    item: &TrainItem,
    config: &TrainConfig,
    s: u64,
) -> Result<(f64, Gradients)> {
    let crop = training_crop(item, model.crop_size(), config, s)?;
    let mut tape = Tape::new(model.store());
    let mut ctx = ForwardCtx::train(seed::derive(s, &[3]));
    let loss = model.sample_loss(&mut tape, &crop, item.label, config, s, &mut ctx)?;
    Ok((tape.scalar(loss), tape.backward(loss)))
}

/// Mean loss and gradient of a batch; samples run in parallel and are
/// reduced in batch order, so the result does not depend on the pool size.
pub fn batch_grad<M: Trainable>(
    model: &M,
    items: &[TrainItem],
    batch: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Gradients)> {
    let results: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|&idx| sample_grad(model, &items[idx], config, sample_seed(config, epoch, idx)))
        .collect();
    let mut total = Gradients::zeros_like(model.store());
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Evaluation-mode loss averaged over items, with crops and masks fixed by `seed`.
pub fn evaluate_loss<M: Trainable>(
    model: &M,
    items: &[TrainItem],
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let losses: Vec<Result<f64>> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let s = seed::derive(seed, &[0x7661_6c, i as u64]);
            let crop = random_crop(&item.image, model.crop_size(), seed::derive(s, &[1]))?;
            let mut tape = Tape::new(model.store());
            let loss =
                model.sample_loss(&mut tape, &crop, item.label, config, s, &mut ForwardCtx::eval())?;
            Ok(tape.scalar(loss))
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / items.len() as f64)
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Write `epoch_NNNN.ckpt` here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<TrainingState>,
    pub validation: Option<&'a [TrainItem]>,
}

pub struct FitOutcome {
    pub curve: LossCurve,
    pub state: TrainingState,
}

fn resume_compatible(a: &TrainConfig, b: &TrainConfig) -> bool {
    let mut a = a.clone();
    a.stop_after_epochs = b.stop_after_epochs;
    &a == b
}

/// Train `model` in place. Each step logs the batch loss computed before
/// that step's update.
pub fn fit<M: Trainable>(
    items: &[TrainItem],
    model: &mut M,
    config: &TrainConfig,
    options: FitOptions,
) -> Result<FitOutcome> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.objective != model.objective() {
        return Err(Error::InvalidConfig(format!(
            "objective {:?} does not match the model ({:?})",
            config.objective,
            model.objective()
        )));
    }
    let steps_per_epoch = config.steps_per_epoch(items.len());
    let total_steps = config.epochs * steps_per_epoch;
    let (mut step, start_epoch, mut optimizer, mut curve) = match options.resume {
        Some(state) => {
            if !resume_compatible(&state.config, config) {
                return Err(Error::InvalidConfig(
                    "resume state was produced with a different training config".into(),
                ));
            }
            (state.step, state.epoch, state.optimizer, state.curve)
        }
        None => (0, 0, OptimizerState::new(config.optimizer, model.store()), LossCurve::default()),
    };
    let end_epoch = config.stop_after_epochs.map_or(config.epochs, |e| e.min(config.epochs));
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    model.store_mut().round_to_f32();
    for epoch in start_epoch..end_epoch {
        let order = epoch_order(items, config, epoch);
        for batch in order.chunks(config.batch_size) {
            let lr = lr_at(step, total_steps, config)?;
            let (loss, grads) = batch_grad(&*model, items, batch, config, epoch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, epoch, loss });
            }
            curve.points.push(CurvePoint { step, loss, lr });
            optimizer_step(model.store_mut(), &grads, &mut optimizer, config, lr)?;
            model.store_mut().round_to_f32();
            optimizer.round_to_f32();
            step += 1;
        }
        if let Some(val) = options.validation {
            let loss = evaluate_loss(&*model, val, config, config.seed)?;
            curve.validation.push(ValidationPoint { epoch, loss });
        }
        if let Some(dir) = &options.checkpoint_dir {
            let state = TrainingState {
                config: config.clone(),
                step,
                epoch: epoch + 1,
                optimizer: optimizer.clone(),
                curve: curve.clone(),
            };
            model
                .to_checkpoint(Some(&state))
                .write(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
        }
    }
    let state = TrainingState {
        config: config.clone(),
        step,
        epoch: end_epoch.max(start_epoch),
        optimizer,
        curve: curve.clone(),
    };
    Ok(FitOutcome { curve, state })
}
