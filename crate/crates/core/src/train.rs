//! Sequence-chunk training with truncated backpropagation through time.
//!
//! Each sequence is cut into chunks of `window` consecutive frames. A chunk is
//! unrolled on one tape starting from the recurrent state the previous chunk
//! of the same sequence ended with during the last pass (zero state at the
//! sequence start or before that chunk has been visited), so gradients stop
//! at chunk boundaries while the forward state still spans the sequence.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{apply_augmentation, AugmentPolicy, LabeledFrame};
use crate::error::{Error, Result};
use crate::model::pipeline::forward_frame;
use crate::model::{frame_loss, pipeline_step, ModelConfig, ModelState, NavOutput, StageTimes, TemporalState};
use crate::numeric::{adam_step, clip_global_norm, early_stop_check, rng, schedule_lr, AdamState, Graph, Mode, TrainConfig};
use crate::scalar::Scalar;

/// One structured log record per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Ran `total_epochs`.
    Completed,
    /// Validation loss did not improve for `patience` epochs.
    EarlyStop,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters of the epoch with the lowest validation loss (the
    /// initialization when no epoch ran).
    pub best: ModelState<T>,
    /// Optimizer state at the best epoch.
    pub best_adam: AdamState<T>,
    pub last: ModelState<T>,
    pub adam: AdamState<T>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub history: Vec<EpochLog>,
}

/// `MSE(waypoint) + MSE(ego_delta)` computed off the tape.
pub fn nav_loss(nav: &NavOutput, lf: &LabeledFrame) -> f64 {
    let mse = |p: &[f64], t: &[f64]| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
    mse(&nav.waypoint, &lf.waypoint) + mse(&nav.ego_delta, &lf.ego_delta)
}

/// Runs every sequence in eval mode from a fresh state; returns the
/// predictions per sequence and the accumulated stage times.
pub fn predict_sequences<T: Scalar>(
    model: &mut ModelState<T>,
    sequences: &[Vec<LabeledFrame>],
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(Vec<Vec<NavOutput>>, StageTimes)> {
    let mut rng = rng::stream(seed, "eval");
    let mut times = StageTimes::default();
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let mut state = TemporalState::new(cfg.temporal.hidden_dim);
        let mut preds = Vec::with_capacity(seq.len());
        for lf in seq {
            let step = pipeline_step(&lf.frame, &state, &model.params, &mut model.buffers, cfg, Mode::Eval, 0.0, &mut rng)?;
            times.backbones += step.times.backbones;
            times.rgb_branch += step.times.rgb_branch;
            times.fusion += step.times.fusion;
            times.temporal += step.times.temporal;
            preds.push(step.nav);
            state = step.state;
        }
        out.push(preds);
    }
    Ok((out, times))
}

/// Mean per-frame loss of eval-mode predictions.
pub fn evaluate_loss<T: Scalar>(
    model: &mut ModelState<T>,
    sequences: &[Vec<LabeledFrame>],
    cfg: &ModelConfig,
    seed: u64,
) -> Result<f64> {
    let (preds, _) = predict_sequences(model, sequences, cfg, seed)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, s) in preds.iter().zip(sequences) {
        for (nav, lf) in p.iter().zip(s) {
            sum += nav_loss(nav, lf);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::contract("no frames to evaluate"));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug)]
struct Chunk {
    seq: usize,
    start: usize,
    len: usize,
}

fn chunks(sequences: &[Vec<LabeledFrame>], len: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for (seq, frames) in sequences.iter().enumerate() {
        let mut start = 0;
        while start < frames.len() {
            let n = len.min(frames.len() - start);
            out.push(Chunk { seq, start, len: n });
            start += n;
        }
    }
    out
}

/// Groups shuffled chunks into batches of at least `batch_size` frames (the
/// last batch may be smaller).
fn batches(order: &[Chunk], batch_size: usize) -> Vec<Vec<Chunk>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut frames = 0;
    for &c in order {
        cur.push(c);
        frames += c.len;
        if frames >= batch_size {
            out.push(std::mem::take(&mut cur));
            frames = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn batch_count(n_chunks: usize, chunk_len: usize, batch_size: usize) -> usize {
    // Chunks are full-length except possibly one per sequence, so this is exact
    // only when every sequence length is a multiple of the chunk length;
    // it is used solely to size the learning-rate schedule.
    let per_batch = batch_size.div_ceil(chunk_len).max(1);
    n_chunks.div_ceil(per_batch)
}

/// Trains `model` on `train` sequences, validating on `val` (or on `train`
/// in eval mode when `val` is empty). `on_epoch` sees every log record as it
/// is produced.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    mut model: ModelState<T>,
    mut adam: AdamState<T>,
    train: &[Vec<LabeledFrame>],
    val: &[Vec<LabeledFrame>],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    augment: &AugmentPolicy,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    tcfg.validate()?;
    let all = chunks(train, cfg.temporal.window);
    if all.is_empty() && tcfg.total_epochs > 0 {
        return Err(Error::config("training set has no frames"));
    }
    let val = if val.is_empty() { train } else { val };
    let per_epoch = batch_count(all.len(), cfg.temporal.window, tcfg.batch_size);
    let total_steps = (per_epoch * tcfg.total_epochs).max(tcfg.warmup_steps + 1);

    let mut shuffle_rng = rng::stream(tcfg.seed, "shuffle");
    let mut augment_rng = rng::stream(tcfg.seed, "augment");
    let mut step_rng = rng::stream(tcfg.seed, "train");
    let mut carried: HashMap<(usize, usize), TemporalState<T>> = HashMap::new();
    let mut step = adam.t as usize;
    let mut best = model.clone();
    let mut best_adam = adam.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut history: Vec<EpochLog> = Vec::new();
    let mut val_history = Vec::new();
    let mut stop = StopReason::Completed;
    model.params.zero_grads();

    for epoch in 0..tcfg.total_epochs {
        let t0 = Instant::now();
        let mut order = all.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut loss_frames = 0usize;
        let mut lr = 0.0;
        for batch in batches(&order, tcfg.batch_size) {
            let batch_frames: usize = batch.iter().map(|c| c.len).sum();
            let norm = T::of(1.0 / batch_frames as f64);
            for c in batch {
                let aug = augment.draw(&mut augment_rng);
                let init = match carried.get(&(c.seq, c.start)) {
                    Some(s) if c.start > 0 => s.clone(),
                    _ => TemporalState::new(cfg.temporal.hidden_dim),
                };
                let mut g = Graph::new();
                let mut gs = init.to_graph(&mut g)?;
                let mut times = StageTimes::default();
                let mut total = None;
                for lf in &train[c.seq][c.start..c.start + c.len] {
                    let lf = apply_augmentation(lf, &aug, &mut augment_rng);
                    let vars = forward_frame(
                        &mut g,
                        &lf.frame,
                        &mut gs,
                        &model.params,
                        &mut model.buffers,
                        cfg,
                        Mode::Train,
                        tcfg.dropout_rate,
                        &mut step_rng,
                        &mut times,
                    )?;
                    let l = frame_loss(&mut g, vars.nav, &lf)?;
                    total = Some(match total {
                        Some(t) => g.add(t, l)?,
                        None => l,
                    });
                }
                let total = total.expect("chunks are non-empty");
                let chunk_loss = g.scalar(total).as_f64();
                if !chunk_loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
                }
                loss_sum += chunk_loss;
                loss_frames += c.len;
                carried.insert((c.seq, c.start + c.len), TemporalState::from_graph(&g, &gs));
                let scaled = g.scale(total, norm)?;
                g.backward(scaled, &mut model.params)?;
            }
            clip_global_norm(&mut model.params, tcfg.clip_norm)?;
            lr = schedule_lr(step, tcfg.warmup_steps, total_steps, tcfg.lr_init, tcfg.lr_min);
            adam_step(&mut model.params, &mut adam, lr, tcfg.weight_decay)?;
            step += 1;
        }
        let val_loss = evaluate_loss(&mut model, val, cfg, tcfg.seed)?;
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / loss_frames.max(1) as f64,
            val_loss,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        history.push(log);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = Some(epoch);
            best = model.clone();
            best_adam = adam.clone();
        }
        // The learning rate is still ramping up during warm-up, so patience
        // only counts epochs that finish after it.
        if step >= tcfg.warmup_steps {
            val_history.push(val_loss);
        }
        if !val_history.is_empty() && early_stop_check(&val_history, tcfg.patience)? {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_adam,
        last: model,
        adam,
        epochs_run: history.len(),
        best_epoch,
        best_val_loss: best_val,
        stop,
        history,
    })
}
