//! Deterministic training loop: seeded shuffling, SGD with momentum, held-out
//! DSC, periodic checkpoints and a divergence guard.

use crate::data_io::{save_checkpoint, Sample};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate, LabelMask, MetricReport};
use crate::model::Model;
use crate::optim::Sgd;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::config::TrainConfig;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub mean_loss: f64,
    pub held_out_dsc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub final_dsc: Option<f64>,
}

/// Stacks single-sample volumes into one `(B, D, H, W, 1)` batch.
pub fn stack_batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<LabelMask>)> {
    let first = samples.first().ok_or_else(|| Error::input("empty batch"))?;
    let mut shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(first.image.numel() * samples.len());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::input(format!(
                "batch mixes volume shapes {:?} and {:?}",
                s.image.shape(),
                first.image.shape()
            )));
        }
        data.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
    }
    shape[0] = samples.iter().map(|s| s.image.shape()[0]).sum();
    let labels = samples.iter().map(|s| s.label.clone()).collect();
    Ok((Tensor::new(shape, data)?, labels))
}

/// Per-sample metrics aggregated over a set, or `None` for an empty set.
pub fn evaluate_samples<T: Scalar>(model: &Model<T>, samples: &[Sample], spacing: [f64; 3]) -> Result<Option<MetricReport>> {
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        let (x, labels) = stack_batch::<T>(&[s])?;
        let pred = model.predict(&x)?;
        reports.push(evaluate(&pred[0], &labels[0], spacing)?);
    }
    Ok(aggregate(&reports))
}

fn append_log(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec).map_err(|e| Error::format(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn checkpoint<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(dir, model.config(), model.params(), model.buffers())?;
    Ok(())
}

/// Trains in place. With `out_dir` set, appends one JSON line per epoch to
/// [`TRAIN_LOG`], writes periodic checkpoints under `checkpoints/` and the
/// final one under [`FINAL_CHECKPOINT`]. `on_epoch` sees every record.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[Sample],
    test_set: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate(model.config().num_stages())?;
    if train_set.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(TRAIN_LOG);
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
    }
    let mut opt = Sgd::new(cfg, model.params());
    let mut report = TrainReport::default();
    let mut step = 0;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, &format!("shuffle/epoch{epoch}")));
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (x, labels) = stack_batch::<T>(&batch)?;
            let out = model.loss_and_grads(&x, &labels, &cfg.deep_supervision_weights, cfg.dice_eps, true)?;
            let loss = out.loss.to_f64().unwrap_or(f64::NAN);
            step += 1;
            if !loss.is_finite() || out.grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged { step, loss });
            }
            opt.step(model.params_mut(), &out.grads)?;
            if let Some((mean, var)) = &out.bn_stats {
                model.update_running_stats(mean, var, out.bn_count);
            }
            report.step_losses.push(loss);
            epoch_losses.push(loss);
        }
        let done = step >= max_steps || epoch == cfg.epochs;
        let eval_now = !test_set.is_empty() && ((cfg.eval_every > 0 && epoch % cfg.eval_every == 0) || done);
        let held_out_dsc = if eval_now {
            evaluate_samples(model, test_set, [1.0; 3])?.map(|r| r.mean_dsc)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            step,
            mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64,
            held_out_dsc,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        if let Some(dir) = out_dir {
            append_log(&dir.join(TRAIN_LOG), &rec)?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && !done {
                checkpoint(model, &dir.join("checkpoints").join(format!("epoch_{epoch:04}")))?;
            }
        }
        if held_out_dsc.is_some() {
            report.final_dsc = held_out_dsc;
        }
        report.epochs.push(rec);
        if done {
            break 'epochs;
        }
    }
    if let Some(dir) = out_dir {
        checkpoint(model, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(report)
}
