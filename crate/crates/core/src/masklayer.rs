//! Learnable input mask: a logit per (timepoint, metric) cell whose
//! binarization is a design. Trained jointly with the imputer using a
//! straight-through estimator.

use ndarray::{Array2, Array3, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{ProtocolMask, RctDataset};
use crate::error::{Error, Result};
use crate::imputer::{backward, Imputer, Params, RAdam, TrainReport};
use crate::pmdgen::Pmd;
use crate::seed::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskHyperparams {
    pub lambda_mw: f64,
    pub eta: f64,
}

pub const LAMBDA_GRID: [f64; 3] = [1e-7, 1e-6, 1e-5];
pub const ETA_GRID: [f64; 5] = [0.1, 0.5, 1.0, 5.0, 10.0];

impl MaskHyperparams {
    /// Every (λ, η) pair, λ-major.
    pub fn grid(lambdas: &[f64], etas: &[f64]) -> Vec<MaskHyperparams> {
        lambdas
            .iter()
            .flat_map(|&lambda_mw| etas.iter().map(move |&eta| MaskHyperparams { lambda_mw, eta }))
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Hard Bernoulli sample `1[σ(l) ≥ u]`, one draw per cell per call.
    Train,
    /// Deterministic `1[σ(l) ≥ 0.5]`.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnableMask {
    logits: Array2<f64>,
    protocol: ProtocolMask,
}

impl LearnableMask {
    /// Eligible logits start at `ln((1 - e) / e)`, so each cell is kept with
    /// the RSD probability `1 - e`. Ineligible logits are zero and unused.
    pub fn init_from_efficiency(e: f64, protocol: &ProtocolMask) -> Result<Self> {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::config(format!("mask initialization needs 0 < e < 1, got {e}")));
        }
        let l = ((1.0 - e) / e).ln();
        let logits = protocol.eligible().mapv(|p| if p { l } else { 0.0 });
        Ok(LearnableMask {
            logits,
            protocol: protocol.clone(),
        })
    }

    pub fn from_logits(logits: Array2<f64>, protocol: &ProtocolMask) -> Result<Self> {
        if logits.dim() != protocol.shape() {
            return Err(Error::shape("mask logits do not match the protocol"));
        }
        Ok(LearnableMask {
            logits,
            protocol: protocol.clone(),
        })
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn protocol(&self) -> &ProtocolMask {
        &self.protocol
    }

    /// `σ(l)` at eligible cells, 1 elsewhere.
    pub fn keep_probabilities(&self) -> Array2<f64> {
        Zip::from(&self.logits)
            .and(self.protocol.eligible())
            .map_collect(|&l, &p| if p { sigmoid(l) } else { 1.0 })
    }

    pub fn binarize(&self, mode: MaskMode, rng: &mut Rng) -> Pmd {
        let keep = self.keep_probabilities();
        Pmd::new(match mode {
            MaskMode::Eval => keep.mapv(|k| k >= 0.5),
            MaskMode::Train => keep.mapv(|k| {
                let u: f64 = rng.random();
                k >= u
            }),
        })
    }

    /// The learned design: eval-mode binarization.
    pub fn pmd(&self) -> Pmd {
        self.binarize(MaskMode::Eval, &mut seed::rng(0))
    }

    /// Mean keep-probability over eligible cells (unscaled by λ).
    pub fn regularizer(&self) -> f64 {
        let n = self.protocol.n_eligible();
        let sum: f64 = self
            .logits
            .iter()
            .zip(self.protocol.eligible())
            .filter(|(_, &p)| p)
            .map(|(&l, _)| sigmoid(l))
            .sum();
        sum / n as f64
    }

    /// Masked batch and visibility for a binarized draw shared by every subject.
    pub fn apply(&self, batch: &Array3<f64>, mode: MaskMode, rng: &mut Rng) -> Result<(Array3<f64>, Array3<f64>)> {
        let pmd = self.binarize(mode, rng);
        let vis = broadcast_visibility(&pmd.grid().mapv(f64::from), batch.dim().0);
        if vis.dim() != batch.dim() {
            return Err(Error::shape("batch does not match the mask shape"));
        }
        Ok((batch * &vis, vis))
    }

    /// Straight-through logit gradient from `dL/d(visibility)`, plus the
    /// regularizer term. Ineligible cells get exactly zero.
    pub fn logit_gradient(&self, dvis: &Array3<f64>, lambda_mw: f64) -> Array2<f64> {
        let summed = dvis.sum_axis(Axis(0));
        let n = self.protocol.n_eligible() as f64;
        Zip::from(&summed)
            .and(&self.logits)
            .and(self.protocol.eligible())
            .map_collect(|&g, &l, &p| {
                if !p {
                    return 0.0;
                }
                let s = sigmoid(l);
                let ds = s * (1.0 - s);
                g * ds + lambda_mw * ds / n
            })
    }
}

pub(crate) fn broadcast_visibility(grid: &Array2<f64>, batch: usize) -> Array3<f64> {
    let (n_t, n_m) = grid.dim();
    grid.broadcast((batch, n_t, n_m)).expect("broadcast").to_owned()
}

/// `(1 - visibility) * P * S` for the subjects of `data`.
pub(crate) fn loss_mask_for(data: &RctDataset, vis: &Array3<f64>) -> Array3<f64> {
    let protocol = data.protocol().eligible();
    let observed = data.observed().collected();
    Zip::indexed(vis).map_collect(|(s, t, m), &v| {
        if protocol[[t, m]] && observed[[s, t, m]] {
            1.0 - v
        } else {
            0.0
        }
    })
}

/// Objective value and gradients for one step.
#[derive(Clone, Debug)]
pub struct MaskStep {
    pub loss: f64,
    pub objective: f64,
    pub logits: Array2<f64>,
    pub params: Params,
}

/// Objective `loss + λ · regularizer` for `data` at visibility `v`, with
/// straight-through logit gradients.
///
/// The loss treats an element as contributing in proportion to how hidden
/// it is, and a visible element as carrying no imputation error:
/// `L(v) = Σ (1 - v)²·PS·err / Σ (1 - v)·PS`. For a binary `v` this is the
/// masked loss over `(1 - v)·P·S`; its derivative in `v` is what reaches the
/// logits.
pub fn mask_step(
    model: &Imputer,
    mask: &LearnableMask,
    data: &RctDataset,
    visibility: &Array3<f64>,
    lambda_mw: f64,
) -> Result<MaskStep> {
    let hidden = loss_mask_for(data, visibility);
    let denom: f64 = hidden.sum();
    let weights = Zip::from(&hidden).and(visibility).map_collect(|&h, &v| h * (1.0 - v));
    let weight_sum: f64 = weights.sum();
    let g = backward(model, data.values(), visibility, &weights)?;
    if g.loss.is_empty() {
        return Ok(MaskStep {
            loss: 0.0,
            objective: lambda_mw * mask.regularizer(),
            logits: mask.logit_gradient(&Array3::zeros(visibility.dim()), lambda_mw),
            params: g.params,
        });
    }
    // Rescale from the weight-normalized loss to the `denom`-normalized one.
    let scale = weight_sum / denom;
    let loss = g.loss.value * scale;
    let mut params = g.params;
    params.scale(scale);
    let protocol = data.protocol().eligible();
    let observed = data.observed().collected();
    let mut dvis = g.visibility * scale;
    Zip::indexed(&mut dvis)
        .and(&g.loss_mask)
        .and(visibility)
        .for_each(|(s, t, m), d, &dw, &v| {
            if protocol[[t, m]] && observed[[s, t, m]] {
                let err = dw * weight_sum + g.loss.value;
                *d += (loss - 2.0 * (1.0 - v) * err) / denom;
            }
        });
    let logits = mask.logit_gradient(&dvis, lambda_mw);
    Ok(MaskStep {
        loss,
        objective: loss + lambda_mw * mask.regularizer(),
        logits,
        params,
    })
}

/// Soft relaxation: visibility is `σ(l)` itself, so the straight-through
/// gradient is the exact gradient.
pub fn soft_visibility(mask: &LearnableMask, batch: usize) -> Array3<f64> {
    broadcast_visibility(&mask.keep_probabilities(), batch)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTraining {
    /// Efficiency of the RSD distribution used to initialize the logits.
    pub e: f64,
    pub hyper: MaskHyperparams,
    pub epochs: usize,
}

#[derive(Clone, Debug)]
pub struct MaskedResult {
    pub imputer: Imputer,
    pub mask: LearnableMask,
    pub pmd: Pmd,
    pub efficiency: f64,
    pub objective: Vec<f64>,
}

/// Joint training of the imputer and mask logits. Returns the final-epoch
/// imputer and the eval-mode design.
pub fn train_masked_imputer(
    seed_model: &Imputer,
    training: &MaskTraining,
    data: &RctDataset,
    seed_value: u64,
) -> Result<MaskedResult> {
    let MaskHyperparams { lambda_mw, eta } = training.hyper;
    if !(lambda_mw >= 0.0 && eta >= 0.0 && lambda_mw.is_finite() && eta.is_finite()) {
        return Err(Error::config("mask hyperparameters must be finite and non-negative"));
    }
    let mut mask = LearnableMask::init_from_efficiency(training.e, data.protocol())?;
    let mut model = seed_model.clone();
    let sizes: Vec<usize> = model.params().tensors().iter().map(|t| t.len()).collect();
    let mut opt = RAdam::new(model.config().learning_rate, &sizes);
    let mut mask_opt = RAdam::new(eta, &[mask.logits.len()]);
    let n_s = data.n_subjects();
    let config = model.config().clone();
    let mut objective = Vec::with_capacity(training.epochs);

    for epoch in 1..=training.epochs {
        let mut rng = seed::rng_for(seed_value, &[seed::tag("mask-epoch"), epoch as u64]);
        let mut order: Vec<usize> = (0..n_s).collect();
        let batches: Vec<Vec<usize>> = if n_s <= config.full_batch_limit {
            vec![order]
        } else {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            order.chunks(config.minibatch_size).map(<[usize]>::to_vec).collect()
        };
        let mut total = 0.0;
        for idx in &batches {
            let sub = if batches.len() == 1 {
                None
            } else {
                Some(data.select_subjects(idx))
            };
            let part = sub.as_ref().unwrap_or(data);
            let grid = mask.binarize(MaskMode::Train, &mut rng).grid().mapv(f64::from);
            let vis = broadcast_visibility(&grid, part.n_subjects());
            let step = mask_step(&model, &mask, part, &vis, lambda_mw)?;
            if !step.objective.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    report: Box::new(TrainReport {
                        seed: seed_value,
                        train_loss: objective,
                        ..TrainReport::default()
                    }),
                });
            }
            total += step.objective;
            opt.step(model.params_mut().tensors_mut(), step.params.tensors());
            mask_opt.step(
                vec![mask.logits.as_slice_mut().expect("layout")],
                vec![step.logits.as_slice().expect("layout")],
            );
        }
        objective.push(total / batches.len() as f64);
        if !model.params().all_finite() || mask.logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                report: Box::new(TrainReport {
                    seed: seed_value,
                    train_loss: objective,
                    ..TrainReport::default()
                }),
            });
        }
    }
    model.round_to_f32();
    let pmd = mask.pmd();
    let efficiency = pmd.efficiency(data.protocol())?;
    Ok(MaskedResult {
        imputer: model,
        mask,
        pmd,
        efficiency,
        objective,
    })
}
