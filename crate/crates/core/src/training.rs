//! Optimizers, learning-rate schedules, gradient clipping, and the training
//! loop with checkpointing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::arch::{BackboneStub, Model, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::streams;
use crate::synthdata::Example;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SgdMomentum => "sgd_momentum",
            Self::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" => Ok(Self::SgdMomentum),
            "adamw" => Ok(Self::AdamW),
            other => Err(Error::Config(format!("unknown optimizer: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    FixedStep,
    CosineWarmup,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FixedStep => "fixed_step",
            Self::CosineWarmup => "cosine_warmup",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_step" => Ok(Self::FixedStep),
            "cosine_warmup" => Ok(Self::CosineWarmup),
            other => Err(Error::Config(format!("unknown schedule: {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 clip threshold; `None` disables clipping.
    pub clip_max_norm: Option<f64>,
    pub epochs: usize,
    pub schedule: ScheduleKind,
    /// Epochs at which fixed-step decay multiplies the rate by 0.1.
    pub milestones: Vec<usize>,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// SGD protocol at desk scale: momentum 0.9, weight decay 1e-4, clip 40.
    pub fn desk_sgd() -> Self {
        Self {
            optimizer: OptimizerKind::SgdMomentum,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_max_norm: Some(40.0),
            epochs: 12,
            schedule: ScheduleKind::FixedStep,
            milestones: vec![],
            warmup_epochs: 0,
            batch_size: 32,
            seed: 1,
        }
    }

    /// AdamW protocol at desk scale: weight decay 0.05, cosine with warmup.
    pub fn desk_adamw() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.05,
            clip_max_norm: Some(40.0),
            epochs: 12,
            schedule: ScheduleKind::CosineWarmup,
            milestones: vec![],
            warmup_epochs: 1,
            batch_size: 32,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if let Some(c) = self.clip_max_norm {
            if c <= 0.0 {
                return Err(Error::Config("clip_max_norm must be positive".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for w in self.milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("milestones must be strictly increasing".into()));
            }
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return Err(Error::Config("milestones must be < epochs".into()));
            }
        }
        if self.warmup_epochs >= self.epochs && self.epochs > 0 {
            return Err(Error::Config("warmup_epochs must be < epochs".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based, `epoch < epochs`).
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        ScheduleKind::FixedStep => {
            let passed = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
            cfg.lr * 0.1f64.powi(passed as i32)
        }
        ScheduleKind::CosineWarmup => {
            let w = cfg.warmup_epochs;
            if epoch < w {
                return cfg.lr * epoch as f64 / w as f64;
            }
            let span = cfg.epochs.saturating_sub(1).saturating_sub(w);
            let progress = if span == 0 {
                1.0
            } else {
                (epoch - w) as f64 / span as f64
            };
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Scale all trainable gradients so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (_, entry) in store.iter() {
        if !entry.trainable {
            continue;
        }
        for &g in &entry.grad {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: "clip_gradients",
                    what: format!("gradient of {}", entry.name),
                });
            }
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.entry(id).trainable {
                store.scale_grad(id, scale);
            }
        }
    }
    Ok(norm)
}

/// Per-parameter optimizer buffers, indexed by registration order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    first: Vec<Vec<f64>>,  // SGD velocity, or AdamW first moment
    second: Vec<Vec<f64>>, // AdamW second moment (empty for SGD)
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let first = store.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect();
        let second = match kind {
            OptimizerKind::SgdMomentum => Vec::new(),
            OptimizerKind::AdamW => store.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect(),
        };
        Self {
            kind,
            step: 0,
            first,
            second,
        }
    }

    /// One update over every trainable parameter from the accumulated
    /// gradients in `store`.
    pub fn apply(&mut self, store: &mut ParamStore, cfg: &TrainConfig, lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::SgdMomentum => self.apply_sgd(store, cfg, lr),
            OptimizerKind::AdamW => self.apply_adamw(store, cfg, lr),
        }
        Ok(())
    }

    // v <- momentum*v + (g + wd*w); w <- w - lr*v
    fn apply_sgd(&mut self, store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            if !store.entry(id).trainable {
                continue;
            }
            let grad = store.grad(id).to_vec();
            let v = &mut self.first[slot];
            let w = store.value_mut(id).data_mut();
            for i in 0..w.len() {
                v[i] = cfg.momentum * v[i] + (grad[i] + cfg.weight_decay * w[i]);
                w[i] -= lr * v[i];
            }
        }
        self.step += 1;
    }

    // bias-corrected moments, decay decoupled from the adaptive term
    fn apply_adamw(&mut self, store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            if !store.entry(id).trainable {
                continue;
            }
            let grad = store.grad(id).to_vec();
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            let w = store.value_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                w[i] -= lr * cfg.weight_decay * w[i];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub top1: f64,
    pub mean_class_acc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub best_top1: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Where to put `checkpoint_final.ffck`, `checkpoint_best.ffck`, and
    /// `metrics.csv`; no files are written when absent.
    pub out_dir: Option<&'a Path>,
    pub resume_from: Option<&'a Path>,
    /// Run at most this many epochs in this call (for time-budgeted runs
    /// that are later resumed from the written checkpoint).
    pub epoch_limit: Option<usize>,
}

pub const METRICS_CSV_HEADER: &str = "epoch,lr,train_loss,top1,mean_class_acc";

pub fn metrics_csv(history: &[EpochStats]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for e in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.lr, e.train_loss, e.top1, e.mean_class_acc
        ));
    }
    s
}

pub fn model_config_entries(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("model.h".into(), cfg.h.to_string()),
        ("model.heads".into(), cfg.heads.to_string()),
        ("model.vision_layers".into(), cfg.vision_layers.to_string()),
        ("model.cross_layers".into(), cfg.cross_layers.to_string()),
        ("model.c_prime".into(), cfg.c_prime.to_string()),
        ("model.t_prime".into(), cfg.t_prime.to_string()),
        ("model.n_attributes".into(), cfg.n_attributes.to_string()),
        ("model.num_classes".into(), cfg.num_classes.to_string()),
        ("model.h_prime".into(), cfg.h_prime.to_string()),
        ("model.w_prime".into(), cfg.w_prime.to_string()),
    ]
}

pub fn train_config_entries(cfg: &TrainConfig) -> Vec<(String, String)> {
    let milestones = cfg
        .milestones
        .iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join(",");
    vec![
        ("train.optimizer".into(), cfg.optimizer.to_string()),
        ("train.lr".into(), cfg.lr.to_string()),
        ("train.momentum".into(), cfg.momentum.to_string()),
        ("train.weight_decay".into(), cfg.weight_decay.to_string()),
        (
            "train.clip_max_norm".into(),
            cfg.clip_max_norm.map_or("none".into(), |c| c.to_string()),
        ),
        ("train.epochs".into(), cfg.epochs.to_string()),
        ("train.schedule".into(), cfg.schedule.to_string()),
        ("train.milestones".into(), milestones),
        ("train.warmup_epochs".into(), cfg.warmup_epochs.to_string()),
        ("train.batch_size".into(), cfg.batch_size.to_string()),
        ("train.seed".into(), cfg.seed.to_string()),
    ]
}

fn opt_tensor_names(kind: OptimizerKind, param: &str) -> Vec<String> {
    match kind {
        OptimizerKind::SgdMomentum => vec![format!("opt.velocity.{param}")],
        OptimizerKind::AdamW => vec![format!("opt.m.{param}"), format!("opt.v.{param}")],
    }
}

fn build_checkpoint(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    store: &ParamStore,
    opt: &OptimizerState,
    epochs_completed: usize,
    output: &TrainOutput,
) -> Checkpoint {
    let mut header = vec![("version".to_string(), "1".to_string())];
    header.extend(model_config_entries(mcfg));
    header.extend(train_config_entries(tcfg));
    header.push(("epochs_completed".into(), epochs_completed.to_string()));
    header.push(("opt.kind".into(), opt.kind.to_string()));
    header.push(("opt.step".into(), opt.step.to_string()));
    header.push((
        "best_epoch".into(),
        output.best_epoch.map_or("none".into(), |e| e.to_string()),
    ));
    header.push(("best_top1".into(), output.best_top1.to_string()));

    let mut tensors = Vec::new();
    for (_, entry) in store.iter() {
        tensors.push((entry.name.clone(), entry.value.clone()));
    }
    for (slot, (_, entry)) in store.iter().enumerate() {
        let names = opt_tensor_names(opt.kind, &entry.name);
        let shape = entry.value.shape().to_vec();
        tensors.push((
            names[0].clone(),
            Tensor::new(shape.clone(), opt.first[slot].clone()).expect("buffer shape"),
        ));
        if let Some(second_name) = names.get(1) {
            tensors.push((
                second_name.clone(),
                Tensor::new(shape, opt.second[slot].clone()).expect("buffer shape"),
            ));
        }
    }
    Checkpoint { header, tensors }
}

/// Load parameters and optimizer state from `ckpt`, checking that it was
/// produced under the same model and train configuration.
pub fn restore_checkpoint(
    ckpt: &Checkpoint,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    store: &mut ParamStore,
) -> Result<(OptimizerState, usize, TrainOutput)> {
    for (k, v) in model_config_entries(mcfg).iter().chain(&train_config_entries(tcfg)) {
        match ckpt.get(k) {
            Some(have) if have == v => {}
            Some(have) => {
                return Err(Error::Config(format!(
                    "checkpoint was trained with {k}={have}, current run has {k}={v}"
                )))
            }
            None => return Err(Error::Config(format!("checkpoint header is missing {k}"))),
        }
    }
    let epochs_completed: usize = ckpt
        .get("epochs_completed")
        .ok_or_else(|| Error::Config("checkpoint header is missing epochs_completed".into()))?
        .parse()
        .map_err(|_| Error::Config("bad epochs_completed in checkpoint".into()))?;

    let ids: Vec<_> = store.ids().collect();
    let mut opt = OptimizerState::new(tcfg.optimizer, store);
    opt.step = ckpt
        .get("opt.step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config("checkpoint header is missing opt.step".into()))?;
    for (slot, id) in ids.into_iter().enumerate() {
        let name = store.entry(id).name.clone();
        let value = ckpt
            .tensor(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))?;
        store.load_named(&name, value.clone())?;
        let buf_names = opt_tensor_names(opt.kind, &name);
        let first = ckpt
            .tensor(&buf_names[0])
            .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {}", buf_names[0])))?;
        opt.first[slot] = first.data().to_vec();
        if let Some(second_name) = buf_names.get(1) {
            let second = ckpt
                .tensor(second_name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {second_name}")))?;
            opt.second[slot] = second.data().to_vec();
        }
    }

    let best_epoch = match ckpt.get("best_epoch") {
        Some("none") | None => None,
        Some(e) => Some(
            e.parse()
                .map_err(|_| Error::Config("bad best_epoch in checkpoint".into()))?,
        ),
    };
    let best_top1 = ckpt
        .get("best_top1")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.0);
    Ok((
        opt,
        epochs_completed,
        TrainOutput {
            history: Vec::new(),
            best_epoch,
            best_top1,
        },
    ))
}

/// Full training loop: seeded shuffles, batched mean cross-entropy, backward,
/// clip, optimizer step, per-epoch evaluation, and checkpointing. Resuming
/// from a saved epoch reproduces an uninterrupted run bit-exactly.
pub fn train<M: Model + ?Sized>(
    model: &M,
    store: &mut ParamStore,
    stub: Option<&BackboneStub>,
    train_set: &[Example],
    test_set: &[Example],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    tcfg.validate()?;
    if train_set.is_empty() && tcfg.epochs > 0 {
        return Err(Error::Training("empty training set".into()));
    }

    let mut output = TrainOutput::default();
    let (mut opt, start_epoch) = match opts.resume_from {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (opt, next_epoch, restored) = restore_checkpoint(&ckpt, mcfg, tcfg, store)?;
            output = restored;
            (opt, next_epoch)
        }
        None => (OptimizerState::new(tcfg.optimizer, store), 0),
    };

    let end_epoch = match opts.epoch_limit {
        Some(k) => tcfg.epochs.min(start_epoch + k),
        None => tcfg.epochs,
    };
    for epoch in start_epoch..end_epoch {
        let lr = lr_schedule(tcfg, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = streams::derive(tcfg.seed, streams::TAG_EPOCH_SHUFFLE, epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(tcfg.batch_size).enumerate() {
            store.zero_grads();
            let mut g = Graph::new();
            let mut batch_loss = None;
            for &idx in batch {
                let ex = &train_set[idx];
                let feats = g.constant(ex.features(stub)?);
                let logits = model.forward(&mut g, store, feats)?;
                let ce = g.cross_entropy(logits, ex.label)?;
                batch_loss = Some(match batch_loss {
                    Some(prev) => g.add(prev, ce)?,
                    None => ce,
                });
            }
            let total = batch_loss.expect("non-empty batch");
            let mean = g.mul_scalar(total, 1.0 / batch.len() as f64);
            let value = g.value(mean).item();
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += value * batch.len() as f64;
            g.backward(mean)?;
            g.write_grads(store);
            if let Some(max_norm) = tcfg.clip_max_norm {
                clip_gradients(store, max_norm)?;
            }
            opt.apply(store, tcfg, lr)?;
        }

        let train_loss = loss_sum / train_set.len() as f64;
        let report = eval::evaluate(model, store, test_set, stub)?;
        output.history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            top1: report.top1,
            mean_class_acc: report.mean_class,
        });

        let improved = output.best_epoch.is_none() || report.top1 > output.best_top1;
        if improved {
            output.best_top1 = report.top1;
            output.best_epoch = Some(epoch);
        }
        if let Some(dir) = opts.out_dir {
            let ckpt = build_checkpoint(mcfg, tcfg, store, &opt, epoch + 1, &output);
            ckpt.save(&dir.join("checkpoint_final.ffck"))?;
            if improved {
                ckpt.save(&dir.join("checkpoint_best.ffck"))?;
            }
            std::fs::write(dir.join("metrics.csv"), metrics_csv(&output.history))?;
        }
    }
    // A run with nothing left to do (zero epochs, or a resume that is already
    // complete) still materializes its state, so `eval` can score an
    // untrained or fully-trained model from the same files.
    if start_epoch >= end_epoch {
        if let Some(dir) = opts.out_dir {
            let ckpt = build_checkpoint(mcfg, tcfg, store, &opt, start_epoch, &output);
            ckpt.save(&dir.join("checkpoint_final.ffck"))?;
            std::fs::write(dir.join("metrics.csv"), metrics_csv(&output.history))?;
        }
    }
    Ok(output)
}
