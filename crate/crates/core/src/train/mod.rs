//! The training recipe: resize to a common resolution, minimize mean binary
//! cross-entropy with Adam under a cyclic cosine schedule, validate every
//! epoch and keep the best-Dice epoch.

mod adam;
mod schedule;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use schedule::{cosine_lr, ScheduleConfig};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, image_tensor, ModelEnsemble};
use crate::model::{build_model, fingerprint, ParameterSet, SegmentationModel};
use crate::nn::{ops, Tensor};
use crate::rng;
use crate::types::{ExperimentConfig, Sample};

/// Mean binary cross-entropy of `logits` against `targets`.
pub fn bce_loss(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    if logits.shape != targets.shape {
        return Err(Error::shape("bce targets", &logits.shape, &targets.shape));
    }
    Ok(ops::bce_with_logits(&logits.data, &targets.data))
}

/// Gradient of [`bce_loss`] with respect to the logits.
pub fn bce_loss_grad(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.shape != targets.shape {
        return Err(Error::shape("bce targets", &logits.shape, &targets.shape));
    }
    Ok(Tensor::new(
        logits.shape.clone(),
        ops::bce_with_logits_grad(&logits.data, &targets.data),
    ))
}

/// Image `[1, 3, h, w]` resized bilinearly and mask `[1, 1, h, w]` resized
/// by nearest neighbour, so the mask stays binary.
pub fn resize_for_training(sample: &Sample, size: (usize, usize)) -> (Tensor, Tensor) {
    let image = image_tensor(sample, size);
    let m = &sample.mask;
    let (h, w) = size;
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = ops::nearest_index(y, m.height, h);
        for x in 0..w {
            let sx = ops::nearest_index(x, m.width, w);
            mask.push(m.values[sy * m.width + sx] as f64);
        }
    }
    (image, Tensor::new(vec![1, 1, h, w], mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest validation Dice, earliest on ties.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    /// Digest of the parameters before the first update.
    pub initial_digest: String,
}

pub enum TrainEvent<'a> {
    /// Emitted before every optimizer step with the parameters it will update.
    StepStart {
        epoch: usize,
        step: usize,
        params: &'a ParameterSet,
    },
    EpochEnd(&'a EpochRecord),
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub fold: usize,
    /// Weight file for the encoder when the model config asks for one.
    pub pretrained: Option<&'a ParameterSet>,
    pub observer: Option<&'a mut dyn FnMut(TrainEvent<'_>)>,
}

/// Trains a fresh model (or one initialized from `init`) and returns the
/// best-validation checkpoint with the full history.
pub fn train(
    train_samples: &[&Sample],
    val_samples: &[&Sample],
    config: &ExperimentConfig,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    train_with(train_samples, val_samples, config, init, TrainOptions::default())
}

fn flip_batch(t: &mut Tensor, horizontal: bool) {
    let (b, c, h, w) = t.dims4();
    for plane in 0..b * c {
        let base = plane * h * w;
        if horizontal {
            for y in 0..h {
                t.data[base + y * w..base + (y + 1) * w].reverse();
            }
        } else {
            for y in 0..h / 2 {
                for x in 0..w {
                    t.data.swap(base + y * w + x, base + (h - 1 - y) * w + x);
                }
            }
        }
    }
}

/// Quarter turn clockwise of square planes.
fn rotate_batch(t: &Tensor) -> Tensor {
    let (b, c, h, w) = t.dims4();
    debug_assert_eq!(h, w);
    let mut out = vec![0.0; t.numel()];
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = t.data[base + (h - 1 - x) * w + y];
            }
        }
    }
    Tensor::new(t.shape.clone(), out)
}

pub fn train_with(
    train_samples: &[&Sample],
    val_samples: &[&Sample],
    config: &ExperimentConfig,
    init: Option<&Checkpoint>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_samples.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut model = match init {
        Some(ckpt) => {
            let expected = fingerprint(&config.model);
            if ckpt.meta.fingerprint != expected {
                return Err(Error::FingerprintMismatch {
                    model: expected.to_string(),
                    checkpoint: ckpt.meta.fingerprint.to_string(),
                });
            }
            SegmentationModel::from_checkpoint(ckpt)?
        }
        None => build_model(&config.model, rng::derive(config.seed, "init"), opts.pretrained)?,
    };
    let initial_digest = model.params().digest();

    let prepared: Vec<(Tensor, Tensor)> = train_samples
        .iter()
        .map(|s| resize_for_training(s, config.train_resolution))
        .collect();
    let steps_per_epoch = prepared.len().div_ceil(config.batch_size);
    let schedule = ScheduleConfig {
        base_lr: config.base_lr,
        cycle_epochs: config.epochs.div_ceil(config.cycles),
        cycles: config.cycles,
        steps_per_epoch,
    };
    let mut state = OptimizerState::new(model.params(), AdamConfig::default());
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParameterSet)> = None;
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(rng::derive_index(config.seed, "shuffle", epoch)));
        let epoch_lr = cosine_lr(epoch * steps_per_epoch, &schedule)?;
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let global = epoch * steps_per_epoch + step;
            if let Some(obs) = opts.observer.as_mut() {
                obs(TrainEvent::StepStart {
                    epoch,
                    step,
                    params: model.params(),
                });
            }
            let images: Vec<Tensor> = chunk.iter().map(|&i| prepared[i].0.clone()).collect();
            let masks: Vec<Tensor> = chunk.iter().map(|&i| prepared[i].1.clone()).collect();
            let mut x = Tensor::stack(&images);
            let mut y = Tensor::stack(&masks);
            if config.augment {
                let mut r = rng::stream(rng::derive_index(config.seed, "augment", global));
                for horizontal in [true, false] {
                    if r.random::<bool>() {
                        flip_batch(&mut x, horizontal);
                        flip_batch(&mut y, horizontal);
                    }
                }
                let (h, w) = config.train_resolution;
                if h == w && r.random::<bool>() {
                    x = rotate_batch(&x);
                    y = rotate_batch(&y);
                }
            }
            let (loss, grads) = model.loss_and_grads(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            let lr = cosine_lr(global, &schedule)?;
            adam_step(model.params_mut(), &grads, &mut state, lr)?;
        }
        let val = evaluate_samples(
            &ModelEnsemble {
                models: std::slice::from_ref(&model),
                resolution: config.train_resolution,
            },
            val_samples.iter().copied(),
            config.threshold,
        )?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / prepared.len() as f64,
            val_dice: val.aggregate.mean,
            lr: epoch_lr,
        };
        log::debug!(
            "fold {} epoch {epoch}: loss {:.4} val dice {:.4}",
            opts.fold,
            record.train_loss,
            record.val_dice
        );
        if best.as_ref().is_none_or(|(_, d, _)| record.val_dice > *d) {
            best = Some((epoch, record.val_dice, model.params().clone()));
        }
        if let Some(obs) = opts.observer.as_mut() {
            obs(TrainEvent::EpochEnd(&record));
        }
        records.push(record);
    }

    let (best_epoch, best_val_dice, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta {
                fingerprint: model.fingerprint().clone(),
                config: config.model.clone(),
                strategy: config.strategy,
                task: config.target_task,
                fold: opts.fold,
                epoch: best_epoch,
                best_val_dice,
                seed: config.seed,
            },
            params,
        },
        history: TrainHistory {
            epochs: records,
            best_epoch,
        },
        initial_digest,
    })
}
