//! Language-model training: AdamW over shuffled windows, periodic
//! validation, checkpoint emission and best-validation selection.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{windows, Corpus, DataSplit, SplitSpec, Window};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, ModelConfig, ModelSnapshot, Precision};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::stream;
use crate::tape::GradTape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub steps: usize,
    /// Windows (document chunks) per optimizer step.
    pub batch_windows: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub min_lr_ratio: f64,
    pub eval_every: usize,
    /// Steps at which a checkpoint is kept; step 0 is always kept.
    pub checkpoints: Vec<usize>,
    pub split: SplitSpec,
    pub grad_clip: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            steps: 600,
            batch_windows: 16,
            lr: 3e-3,
            warmup: 30,
            min_lr_ratio: 0.1,
            eval_every: 100,
            checkpoints: Vec::new(),
            split: SplitSpec { ratios: [0.8, 0.1, 0.1], seed: 0 },
            grad_clip: 1.0,
        }
    }
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps.saturating_sub(self.warmup)).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Kept checkpoints in step order, starting with step 0.
    pub checkpoints: Vec<ModelSnapshot>,
    pub best: ModelSnapshot,
    pub last: ModelSnapshot,
    pub curve: Vec<CurvePoint>,
    /// Step at which the loss became non-finite; training stopped there.
    pub diverged_at: Option<usize>,
}

/// Trains on `train_ids` (default: the train part of `schedule.split`) and
/// validates on the valid part.
pub fn train(corpus: &Corpus, config: &ModelConfig, schedule: &Schedule) -> Result<TrainOutcome> {
    let split = DataSplit::by_documents(corpus, &schedule.split)?;
    train_on(corpus, config, schedule, &split.train, &split.valid)
}

pub fn train_on(
    corpus: &Corpus,
    config: &ModelConfig,
    schedule: &Schedule,
    train_ids: &[usize],
    valid_ids: &[usize],
) -> Result<TrainOutcome> {
    config.validate()?;
    let init = ModelSnapshot::init(config.clone())?;
    train_from(corpus, init, schedule, train_ids, valid_ids)
}

/// Continues training from `init` (its step counter restarts at 0).
pub fn train_from(
    corpus: &Corpus,
    init: ModelSnapshot,
    schedule: &Schedule,
    train_ids: &[usize],
    valid_ids: &[usize],
) -> Result<TrainOutcome> {
    let config = init.config.clone();
    if schedule.batch_windows == 0 || schedule.eval_every == 0 {
        return Err(Error::InvalidArgument("batch_windows and eval_every must be >= 1".into()));
    }
    if train_ids.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut snap = init;
    snap.step = 0;
    snap.stationary = None;
    snap.check_corpus(corpus)?;
    snap.split = Some(schedule.split.clone());
    if config.precision == Precision::F32 {
        snap.params.tensors_mut().iter_mut().for_each(round_f32);
    }
    let train_windows = windows(corpus, train_ids);
    let mut opt = OptimizerState::new(OptimizerKind::adamw(), schedule.lr, config.weight_decay, snap.params.tensors())?;
    let mut order_rng = stream(config.seed, "train-order");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let eval = |s: &ModelSnapshot| if valid_ids.is_empty() { Ok(f64::NAN) } else { s.mean_nll(corpus, valid_ids) };
    snap.val_loss = eval(&snap)?;
    let mut checkpoints = vec![snap.clone()];
    let mut best = snap.clone();
    let mut curve = vec![CurvePoint { step: 0, train_loss: f64::NAN, val_loss: snap.val_loss }];
    let mut running = (0.0, 0usize);
    let mut diverged_at = None;

    for step in 0..schedule.steps {
        let mut batch = Vec::with_capacity(schedule.batch_windows);
        while batch.len() < schedule.batch_windows.min(train_windows.len()) {
            if cursor == order.len() {
                order = (0..train_windows.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&train_windows[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradient(&snap, corpus, &batch, step)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            diverged_at = Some(step);
            break;
        }
        let grads = clip(grads, schedule.grad_clip);
        opt.lr = schedule.lr_at(step);
        let before = snap.params.clone();
        opt.step(snap.params.tensors_mut(), &grads)?;
        if config.precision == Precision::F32 {
            for t in snap.params.tensors_mut() {
                round_f32(t);
            }
        }
        if snap.params.tensors().iter().any(|t| !t.is_finite()) {
            snap.params = before;
            diverged_at = Some(step);
            break;
        }
        snap.step = (step + 1) as u64;
        running.0 += loss;
        running.1 += 1;
        let done = step + 1;
        let keep = schedule.checkpoints.contains(&done);
        if done % schedule.eval_every == 0 || done == schedule.steps || keep {
            snap.val_loss = eval(&snap)?;
            curve.push(CurvePoint { step: done, train_loss: running.0 / running.1 as f64, val_loss: snap.val_loss });
            running = (0.0, 0);
            if snap.val_loss < best.val_loss || best.val_loss.is_nan() {
                best = snap.clone();
            }
        }
        if keep {
            checkpoints.push(snap.clone());
        }
    }
    if valid_ids.is_empty() {
        best = snap.clone();
    }
    Ok(TrainOutcome { checkpoints, best, last: snap, curve, diverged_at })
}

/// Mean next-token loss over every sample row of the batch windows and its
/// gradient. Windows are processed on independent tapes and reduced in
/// batch order.
fn batch_gradient(snap: &ModelSnapshot, corpus: &Corpus, batch: &[&Window], step: usize) -> Result<(f64, Vec<Tensor>)> {
    let rows: usize = batch.iter().map(|w| w.rows.len()).sum();
    let scale = 1.0 / rows as f64;
    let config = &snap.config;
    let parts: Vec<Result<(f64, Vec<Option<Tensor>>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(k, w)| {
            let mut tape = GradTape::new();
            let vars = snap.params.register(&mut tape);
            let mut drop_rng = stream(config.seed, &format!("dropout/{step}/{k}"));
            let dropout = if config.embedding_dropout > 0.0 { Some(&mut drop_rng) } else { None };
            let out = forward_on_tape(&mut tape, &vars, config, w.tokens(corpus), dropout, false);
            let targets: Vec<(usize, u32)> = w.rows.iter().map(|&(r, id)| (r, corpus.target(id))).collect();
            let loss = tape.nll_sum(out.logits, &targets, scale)?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), g.into_slots()))
        })
        .collect();
    let mut total = 0.0;
    let mut sum: Vec<Tensor> = snap.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for part in parts {
        let (l, g) = part?;
        total += l;
        for (acc, gi) in sum.iter_mut().zip(g) {
            if let Some(gi) = gi {
                acc.add_assign(&gi);
            }
        }
    }
    Ok((total, sum))
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

fn clip(mut grads: Vec<Tensor>, max_norm: f64) -> Vec<Tensor> {
    if !(max_norm > 0.0) {
        return grads;
    }
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    grads
}
