use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Dataset;
use super::loss::count_errors;
use super::optim::{Sgd, SgdConfig, StepSchedule};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::norm::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Train,
    Val,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Val => "val",
        })
    }
}

/// Metrics of one pass over one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub split: Phase,
    pub loss: f64,
    pub error_rate: f64,
    pub lr: f64,
    /// Seconds since training started.
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
    pub sgd: SgdConfig,
    pub schedule: StepSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        self.sgd.validate()?;
        self.schedule.validate()
    }
}

/// Mean loss and error rate in evaluation mode.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, data: &Dataset<T>, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("empty evaluation".into()));
    }
    let (mut loss, mut errors) = (0.0, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.predict(&x)?;
        loss += super::loss::softmax_cross_entropy(&logits, &y)? * chunk.len() as f64;
        errors += count_errors(&logits, &y)?;
    }
    let n = data.len() as f64;
    Ok((loss / n, errors as f64 / n))
}

/// Loss, error count and logits of one optimization step.
pub struct StepOutcome<T> {
    pub loss: f64,
    pub errors: usize,
    pub logits: Tensor<T>,
}

/// Forward, backward and one SGD update on a single batch.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    sgd: &mut Sgd<T>,
    x: Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<StepOutcome<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let f = model.forward(&mut tape, xv, Mode::Train)?;
    let loss_var = tape.cross_entropy(f.output, labels)?;
    let loss = tape.value(loss_var).item()?.as_f64();
    let logits = tape.value(f.output).clone();
    let errors = count_errors(&logits, labels)?;
    if !loss.is_finite() || !logits.is_finite() {
        return Ok(StepOutcome {
            loss: f64::NAN,
            errors,
            logits,
        });
    }
    tape.backward(loss_var)?;
    let grads: Vec<Option<&Tensor<T>>> = f.params.iter().map(|&v| tape.grad(v)).collect();
    sgd.step(&mut model.params, &grads, lr)?;
    Ok(StepOutcome { loss, errors, logits })
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch SGD, reporting a train
/// record per epoch and a validation record when `val` is given.
///
/// Returns [`Error::Divergence`] as soon as a batch loss is not finite.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.sgd, &model.params)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut errors) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(chunk)?;
            let out = train_step(model, &mut sgd, x, &y, lr)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    step,
                    loss: out.loss,
                });
            }
            loss_sum += out.loss * chunk.len() as f64;
            errors += out.errors;
            step += 1;
        }
        let n = train_set.len() as f64;
        let mut push = |split, loss, error_rate| {
            let r = EpochRecord {
                epoch: epoch + 1,
                split,
                loss,
                error_rate,
                lr,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            on_record(&r);
            records.push(r);
        };
        push(Phase::Train, loss_sum / n, errors as f64 / n);
        if let Some(val) = val {
            let (loss, err) = evaluate(model, val, cfg.eval_batch_size)?;
            push(Phase::Val, loss, err);
        }
    }
    Ok(records)
}
