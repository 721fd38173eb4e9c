use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{backward, masked_loss, Imputer, ImputerConfig, ImputerShape, RAdam};
use crate::dataset::RctDataset;
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Source of random designs for masked-autoencoding training. A sample is a
/// `[n_t, n_m]` grid where `true` means the cell is collected.
pub trait MaskSampler: Sync {
    fn sample_grid(&self, rng: &mut Rng) -> Array2<bool>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    /// Epoch whose parameters were returned; `None` when no training happened.
    pub selected_epoch: Option<usize>,
}

/// Draw one design per subject and derive visibility and loss masks:
/// `loss_mask = (1 - visibility) * P * S`.
pub(crate) fn draw_masks(data: &RctDataset, sampler: &dyn MaskSampler, rng: &mut Rng) -> (Array3<f64>, Array3<f64>) {
    let (n_s, n_t, n_m) = data.values().dim();
    let protocol = data.protocol().eligible();
    let collected = data.observed().collected();
    let mut vis = Array3::zeros((n_s, n_t, n_m));
    let mut loss = Array3::zeros((n_s, n_t, n_m));
    for s in 0..n_s {
        let grid = sampler.sample_grid(rng);
        for t in 0..n_t {
            for m in 0..n_m {
                let keep = grid[[t, m]] || !protocol[[t, m]];
                vis[[s, t, m]] = if keep { 1.0 } else { 0.0 };
                if !keep && collected[[s, t, m]] {
                    loss[[s, t, m]] = 1.0;
                }
            }
        }
    }
    (vis, loss)
}

fn validation_loss(model: &Imputer, data: &RctDataset, vis: &Array3<f64>, mask: &Array3<f64>) -> Result<f64> {
    let pred = model.forward(data.values(), vis)?;
    Ok(masked_loss(model.shape(), &pred, data.values(), mask)?.value)
}

/// Masked-autoencoding training with a fresh design per subject per epoch.
///
/// Validation runs every `validation_every` epochs and at the last epoch on
/// designs drawn once from a fixed validation stream. With early
/// checkpointing the lowest-validation-loss parameters are returned.
pub fn train_mvts(
    train: &RctDataset,
    validation: Option<&RctDataset>,
    config: &ImputerConfig,
    sampler: &dyn MaskSampler,
    seed_value: u64,
) -> Result<(Imputer, TrainReport)> {
    let shape = ImputerShape::of(train)?;
    if shape.kind != config.metric_kind {
        return Err(Error::config("dataset metric kind does not match the imputer config"));
    }
    if let Some(v) = validation {
        if ImputerShape::of(v)? != shape {
            return Err(Error::shape("validation data does not match the training data shape"));
        }
    }
    let mut model = Imputer::new(config.clone(), shape, seed_value)?;
    let mut report = TrainReport {
        seed: seed_value,
        ..TrainReport::default()
    };
    if config.epochs == 0 {
        return Ok((model, report));
    }

    let sizes: Vec<usize> = model.params().tensors().iter().map(|t| t.len()).collect();
    let mut opt = RAdam::new(config.learning_rate, &sizes);
    let values = train.values();
    let n_s = train.n_subjects();

    let val_masks = validation.map(|v| draw_masks(v, sampler, &mut seed::rng_for(seed_value, &[seed::tag("validation")])));
    let mut best: Option<(f64, super::Params, usize)> = None;

    for epoch in 1..=config.epochs {
        let mut rng = seed::rng_for(seed_value, &[seed::tag("epoch"), epoch as u64]);
        let (vis, loss_mask) = draw_masks(train, sampler, &mut rng);
        let mut order: Vec<usize> = (0..n_s).collect();
        let batches: Vec<Vec<usize>> = if n_s <= config.full_batch_limit {
            vec![order]
        } else {
            order.shuffle(&mut rng);
            order.chunks(config.minibatch_size).map(<[usize]>::to_vec).collect()
        };
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in &batches {
            let grads = if batches.len() == 1 {
                backward(&model, values, &vis, &loss_mask)?
            } else {
                backward(
                    &model,
                    &values.select(Axis(0), idx),
                    &vis.select(Axis(0), idx),
                    &loss_mask.select(Axis(0), idx),
                )?
            };
            if !grads.loss.value.is_finite() {
                report.train_loss.push(grads.loss.value);
                return Err(Error::Diverged {
                    epoch,
                    report: Box::new(report),
                });
            }
            total += grads.loss.value * grads.loss.count as f64;
            count += grads.loss.count;
            opt.step(model.params_mut().tensors_mut(), grads.params.tensors());
        }
        report.train_loss.push(if count > 0 { total / count as f64 } else { 0.0 });
        if !model.params().all_finite() {
            return Err(Error::Diverged {
                epoch,
                report: Box::new(report),
            });
        }

        let due = epoch % config.validation_every == 0 || epoch == config.epochs;
        if let (Some(v), Some((vv, vm)), true) = (validation, val_masks.as_ref(), due) {
            let loss = validation_loss(&model, v, vv, vm)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    report: Box::new(report),
                });
            }
            report.validation.push(super::train::ValidationPoint { epoch, loss });
            if config.early_checkpointing && best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                best = Some((loss, model.params().clone(), epoch));
            }
        }
    }

    match best {
        Some((_, params, epoch)) if config.early_checkpointing => {
            *model.params_mut() = params;
            report.selected_epoch = Some(epoch);
        }
        _ => report.selected_epoch = Some(config.epochs),
    }
    model.round_to_f32();
    Ok((model, report))
}
