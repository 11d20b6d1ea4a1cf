//! Mini-batch SGD training of the network on labelled clip pairs.
//!
//! Batch gradients are computed in parallel (one tape per sample), reduced
//! in sample order so results are bit-reproducible, then applied with
//! momentum and weight decay.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::{sample_clip_pair, sample_training_batch, ClipPair, ClipSpec, VideoSequence};
use crate::error::{FstcnError, Result};
use crate::net::{Mode, Network, PathMode};
use crate::subseed;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate at two thirds of the epochs.
    pub lr_decay: f64,
    /// Weight of the auxiliary classifier loss, if the network has one.
    pub aux_loss_weight: f64,
    pub seed: u64,
    /// Stop once held-out accuracy reaches this value, if set.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            batches_per_epoch: 12,
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.1,
            aux_loss_weight: 0.3,
            seed: 1,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(FstcnError::Config("epochs, batch_size and batches_per_epoch must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FstcnError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FstcnError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(FstcnError::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate for a given zero-based epoch: step decay at 2/3.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs >= 3 && epoch >= self.epochs * 2 / 3 {
            self.learning_rate * self.lr_decay
        } else {
            self.learning_rate
        }
    }
}

/// Momentum buffers, keyed by parameter name.
#[derive(Default)]
pub struct SgdState {
    velocity: HashMap<String, Tensor>,
}

/// One SGD update: `v <- m*v - lr*(g + wd*w); w <- w + v`.
///
/// Rejects non-finite gradients so a diverging run aborts rather than
/// silently poisoning the parameters.
pub fn sgd_step(
    net: &mut Network,
    grads: &[(String, Tensor)],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, grad) in grads {
        if !grad.all_finite() {
            return Err(FstcnError::NonFinite(format!("gradient of {name}")));
        }
        let w = net
            .param_mut(name)
            .ok_or_else(|| FstcnError::Invalid(format!("unknown parameter {name}")))?;
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        for i in 0..grad.len() {
            let g = grad.data()[i] + weight_decay * w.data()[i];
            let nv = momentum * v.data()[i] - lr * g;
            v.data_mut()[i] = nv;
            w.data_mut()[i] += nv;
        }
        if !w.all_finite() {
            return Err(FstcnError::NonFinite(format!("parameter {name} after update")));
        }
    }
    Ok(())
}

/// Mean loss and mean parameter gradients over a batch. Samples run on
/// independent tapes in parallel; the reduction follows batch order.
pub fn batch_gradients(
    net: &Network,
    batch: &[(usize, ClipPair)],
    aux_weight: f64,
    seed: u64,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let per_sample: Vec<Result<(f64, Vec<(String, Option<Tensor>)>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (label, pair))| {
            let mut tape = Tape::new();
            let fwd_seed = subseed(seed, &format!("fwd/{i}"));
            let vars = net.forward_on_tape(&mut tape, pair, Mode::Train, PathMode::Combined, fwd_seed)?;
            let ce = tape.cross_entropy(vars.logits, *label)?;
            let loss = match vars.aux_logits {
                Some(aux) if aux_weight > 0.0 => {
                    let aux_ce = tape.cross_entropy(aux, *label)?;
                    let scaled = tape.scale(aux_ce, aux_weight);
                    tape.add(ce, scaled)?
                }
                _ => ce,
            };
            let loss_value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            Ok((loss_value, Network::collect_param_grads(&vars, &grads)))
        })
        .collect();

    let inv = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut acc: Vec<(String, Tensor)> = Vec::new();
    for sample in per_sample {
        let (loss, named) = sample?;
        total_loss += loss;
        if acc.is_empty() {
            for (name, g) in named {
                let g = g.ok_or_else(|| FstcnError::Invalid(format!("no gradient for {name}")))?;
                acc.push((name, g));
            }
        } else {
            for ((_, slot), (name, g)) in acc.iter_mut().zip(named) {
                let g = g.ok_or_else(|| FstcnError::Invalid(format!("no gradient for {name}")))?;
                *slot = slot.add(&g)?;
            }
        }
    }
    for (_, g) in &mut acc {
        *g = g.scale(inv);
    }
    Ok((total_loss * inv, acc))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub final_accuracy: f64,
    pub stopped_early: bool,
}

/// Train in place. `on_epoch` fires after each epoch with its metrics (for
/// logging); training stops early once `target_accuracy` is reached.
pub fn train(
    net: &mut Network,
    train_set: &[VideoSequence],
    test_set: &[VideoSequence],
    spec: &ClipSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    spec.validate()?;
    if train_set.is_empty() {
        return Err(FstcnError::Invalid("empty training set".into()));
    }
    let mut state = SgdState::default();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let batch_seed = subseed(cfg.seed, &format!("batch/{epoch}/{b}"));
            let batch = sample_training_batch(train_set, spec, cfg.batch_size, batch_seed)?;
            let grad_seed = subseed(cfg.seed, &format!("grad/{epoch}/{b}"));
            let (loss, grads) = batch_gradients(net, &batch, cfg.aux_loss_weight, grad_seed)?;
            sgd_step(net, &grads, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
            epoch_loss += loss;
        }
        let accuracy = evaluate(net, test_set, spec, PathMode::Combined)?;
        let metrics = EpochMetrics {
            epoch,
            learning_rate: lr,
            train_loss: epoch_loss / cfg.batches_per_epoch as f64,
            test_accuracy: accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics);
        report.metrics.push(metrics);
        report.final_accuracy = accuracy;
        if cfg.target_accuracy.is_some_and(|t| accuracy >= t) {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}

/// Quick deterministic evaluation: for each sequence, average the scores of
/// centre-cropped, unflipped clips at evenly spaced starts and take the
/// argmax. (Full multi-crop fusion lives in the fusion module.)
pub fn evaluate(
    net: &Network,
    test_set: &[VideoSequence],
    spec: &ClipSpec,
    path: PathMode,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(FstcnError::Invalid("empty evaluation set".into()));
    }
    let outcomes: Vec<Result<bool>> = test_set
        .par_iter()
        .map(|seq| {
            let label = seq
                .label
                .ok_or_else(|| FstcnError::Invalid("evaluation sequence without a label".into()))?;
            let scores = predict_sequence(net, seq, spec, path)?;
            Ok(scores.argmax() == label)
        })
        .collect();
    let mut correct = 0usize;
    for o in outcomes {
        if o? {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

/// Mean class scores over `spec.clips_per_seq` evenly spaced, centre-cropped
/// clips of one sequence.
pub fn predict_sequence(
    net: &Network,
    seq: &VideoSequence,
    spec: &ClipSpec,
    path: PathMode,
) -> Result<Tensor> {
    let (mx, my, mt, _) = seq.extents();
    let crop = ((mx - spec.l_x) / 2, (my - spec.l_y) / 2);
    let starts = even_starts(spec.max_start(mt)?, spec.clips_per_seq);
    let mut mean = Tensor::zeros(&[net.config.num_classes]);
    for &start in &starts {
        let pair = sample_clip_pair(seq, spec, start, crop, false)?;
        let scores = net.infer(&pair, path)?;
        mean = mean.add(&scores)?;
    }
    Ok(mean.scale(1.0 / starts.len() as f64))
}

/// `n` starts evenly spaced over `0..=max_start`, deduplicated.
pub fn even_starts(max_start: usize, n: usize) -> Vec<usize> {
    let n = n.max(1);
    let mut starts: Vec<usize> = (0..n)
        .map(|i| if n == 1 { max_start / 2 } else { i * max_start / (n - 1) })
        .collect();
    starts.dedup();
    starts
}
