//! Transformer-encoder imputer trained by masked autoencoding.
//!
//! Input featurization is one channel per metric: continuous metrics feed
//! their normalized value, categorical metrics feed `index / (k - 1)`. The
//! decoder emits one value per continuous metric or one logit per category.
//! The effective network input is `features ⊙ visibility`, so masked cells
//! are zero-filled and a soft visibility in (0, 1) is differentiable.

mod checkpoint;
mod layers;
mod model;
mod radam;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layers::{gelu, gelu_grad, LayerNorm, Linear};
pub use model::{Dims, EncoderBlock, Params};
pub use radam::RAdam;
pub use train::{train_mvts, MaskSampler, TrainReport, ValidationPoint};

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::{MetricKind, RctDataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputerConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub metric_kind: MetricKind,
    /// Validation cadence in epochs.
    pub validation_every: usize,
    /// Keep the parameters with the lowest validation loss.
    pub early_checkpointing: bool,
    /// Train on the whole set as one batch up to this many subjects.
    pub full_batch_limit: usize,
    pub minibatch_size: usize,
}

impl ImputerConfig {
    /// Three blocks, eight heads, d_model 64, d_ff 256, 6000 epochs; learning
    /// rate 1e-3 for continuous and 1e-4 for categorical metrics.
    pub fn for_kind(kind: MetricKind) -> Self {
        ImputerConfig {
            n_blocks: 3,
            n_heads: 8,
            d_model: 64,
            d_ff: 256,
            epochs: 6000,
            learning_rate: match kind {
                MetricKind::Continuous => 1e-3,
                MetricKind::Categorical => 1e-4,
            },
            metric_kind: kind,
            validation_every: 50,
            early_checkpointing: true,
            full_batch_limit: 256,
            minibatch_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.d_ff == 0 {
            return Err(Error::config("n_blocks and d_ff must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.validation_every == 0 || self.minibatch_size == 0 {
            return Err(Error::config("validation cadence and minibatch size must be positive"));
        }
        Ok(())
    }
}

/// Data-dependent shape of an imputer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputerShape {
    pub n_timepoints: usize,
    pub n_metrics: usize,
    pub kind: MetricKind,
    /// Category count per metric (categorical imputers only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<usize>,
}

impl ImputerShape {
    pub fn continuous(n_timepoints: usize, n_metrics: usize) -> Self {
        ImputerShape {
            n_timepoints,
            n_metrics,
            kind: MetricKind::Continuous,
            categories: Vec::new(),
        }
    }

    pub fn categorical(n_timepoints: usize, categories: Vec<usize>) -> Self {
        ImputerShape {
            n_timepoints,
            n_metrics: categories.len(),
            kind: MetricKind::Categorical,
            categories,
        }
    }

    /// Shape of a single-kind dataset; errors if metric kinds are mixed.
    pub fn of(data: &RctDataset) -> Result<Self> {
        let kinds: Vec<_> = data.metrics().iter().map(|m| m.kind).collect();
        let kind = kinds[0];
        if kinds.iter().any(|&k| k != kind) {
            return Err(Error::data("imputers are trained on one metric kind at a time"));
        }
        Ok(match kind {
            MetricKind::Continuous => ImputerShape::continuous(data.n_timepoints(), data.n_metrics()),
            MetricKind::Categorical => ImputerShape::categorical(
                data.n_timepoints(),
                data.metrics().iter().map(|m| m.n_categories()).collect(),
            ),
        })
    }

    pub fn output_width(&self) -> usize {
        match self.kind {
            MetricKind::Continuous => self.n_metrics,
            MetricKind::Categorical => self.categories.iter().sum(),
        }
    }

    /// Start offset of each metric's logit slice.
    pub fn logit_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.categories
            .iter()
            .map(|&k| {
                let o = acc;
                acc += k;
                o
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Imputer {
    config: ImputerConfig,
    shape: ImputerShape,
    params: Params,
}

impl Imputer {
    pub fn new(config: ImputerConfig, shape: ImputerShape, seed_value: u64) -> Result<Self> {
        config.validate()?;
        if config.metric_kind != shape.kind {
            return Err(Error::config("imputer config and data shape disagree on metric kind"));
        }
        if shape.n_timepoints == 0 || shape.n_metrics == 0 {
            return Err(Error::shape("imputer needs at least one timepoint and one metric"));
        }
        let dims = dims_of(&config, &shape);
        let mut params = Params::init(&dims, &mut seed::rng_for(seed_value, &[seed::tag("init")]));
        params.round_to_f32();
        Ok(Imputer { config, shape, params })
    }

    pub(crate) fn from_parts(config: ImputerConfig, shape: ImputerShape, params: Params) -> Result<Self> {
        config.validate()?;
        let dims = dims_of(&config, &shape);
        let expected = Params::zeros(&dims);
        let ok = expected
            .named_tensors()
            .iter()
            .zip(params.named_tensors())
            .all(|(a, b)| a.0 == b.0 && a.1 == b.1)
            && expected.named_tensors().len() == params.named_tensors().len();
        if !ok {
            return Err(Error::shape("parameter tensors do not match the configuration"));
        }
        Ok(Imputer { config, shape, params })
    }

    pub fn config(&self) -> &ImputerConfig {
        &self.config
    }

    pub fn shape(&self) -> &ImputerShape {
        &self.shape
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn dims(&self) -> Dims {
        dims_of(&self.config, &self.shape)
    }

    fn check_input(&self, batch: &Array3<f64>, visibility: &Array3<f64>) -> Result<()> {
        let (_, t, m) = batch.dim();
        if t != self.shape.n_timepoints || m != self.shape.n_metrics {
            return Err(Error::shape(format!(
                "batch {:?} does not match imputer ({} timepoints, {} metrics)",
                batch.dim(),
                self.shape.n_timepoints,
                self.shape.n_metrics
            )));
        }
        if visibility.dim() != batch.dim() {
            return Err(Error::shape(format!(
                "visibility {:?} does not match batch {:?}",
                visibility.dim(),
                batch.dim()
            )));
        }
        Ok(())
    }

    /// Input channels before visibility is applied.
    pub fn featurize(&self, batch: &Array3<f64>) -> Array3<f64> {
        match self.shape.kind {
            MetricKind::Continuous => batch.clone(),
            MetricKind::Categorical => {
                let mut out = batch.clone();
                for ((_, _, m), v) in out.indexed_iter_mut() {
                    let k = self.shape.categories[m];
                    *v = if k > 1 { *v / (k - 1) as f64 } else { 0.0 };
                }
                out
            }
        }
    }

    fn input_rows(&self, batch: &Array3<f64>, visibility: &Array3<f64>) -> Array2<f64> {
        let (b, t, m) = batch.dim();
        rows(self.featurize(batch) * visibility, b * t, m)
    }

    /// Raw network output: values `[b, t, n_m]` or logits `[b, t, Σk]`.
    pub fn forward(&self, batch: &Array3<f64>, visibility: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_input(batch, visibility)?;
        let (b, t, _) = batch.dim();
        let (out, _) = model::forward(&self.params, &self.dims(), self.input_rows(batch, visibility), b);
        Ok(out
            .into_shape_with_order((b, t, self.shape.output_width()))
            .expect("contiguous"))
    }

    /// Decoded predictions `[b, t, n_m]`: values, or argmax category indices.
    pub fn predict(&self, batch: &Array3<f64>, visibility: &Array3<f64>) -> Result<Array3<f64>> {
        let raw = self.forward(batch, visibility)?;
        Ok(decode(&self.shape, &raw))
    }

    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
    }
}

pub(crate) fn dims_of(config: &ImputerConfig, shape: &ImputerShape) -> Dims {
    Dims {
        n_timepoints: shape.n_timepoints,
        in_width: shape.n_metrics,
        out_width: shape.output_width(),
        d_model: config.d_model,
        d_ff: config.d_ff,
        n_heads: config.n_heads,
        n_blocks: config.n_blocks,
    }
}

/// Per-metric argmax over logit slices (first maximum wins).
/// Reshape to `[rows, cols]`, copying first if the layout is not row-major.
fn rows(x: Array3<f64>, rows: usize, cols: usize) -> Array2<f64> {
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("standard layout")
}

pub fn decode(shape: &ImputerShape, raw: &Array3<f64>) -> Array3<f64> {
    match shape.kind {
        MetricKind::Continuous => raw.clone(),
        MetricKind::Categorical => {
            let (b, t, _) = raw.dim();
            let offsets = shape.logit_offsets();
            Array3::from_shape_fn((b, t, shape.n_metrics), |(i, j, m)| {
                let o = offsets[m];
                let mut best = 0;
                for c in 1..shape.categories[m] {
                    if raw[[i, j, o + c]] > raw[[i, j, o + best]] {
                        best = c;
                    }
                }
                best as f64
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    /// Number of elements under the loss mask; zero means the mask was empty.
    pub count: usize,
}

impl LossValue {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

struct LossGrad {
    value: LossValue,
    /// dL/d(prediction).
    pred: Array3<f64>,
    /// dL/d(loss mask weight), `(err - L) / W` per element.
    mask: Array3<f64>,
}

/// Weighted mean of per-element errors `Σ w·err / Σ w`; for a 0/1 mask this
/// is the plain mean over masked elements.
fn loss_and_grad(shape: &ImputerShape, pred: &Array3<f64>, target: &Array3<f64>, loss_mask: &Array3<f64>) -> Result<LossGrad> {
    let (b, t, w) = pred.dim();
    if w != shape.output_width() || target.dim() != (b, t, shape.n_metrics) || loss_mask.dim() != target.dim() {
        return Err(Error::shape(format!(
            "loss shapes: pred {:?}, target {:?}, mask {:?}",
            pred.dim(),
            target.dim(),
            loss_mask.dim()
        )));
    }
    let count = loss_mask.iter().filter(|&&v| v != 0.0).count();
    let weight: f64 = loss_mask.sum();
    let mut dpred = Array3::zeros(pred.dim());
    let mut dmask = Array3::zeros(target.dim());
    if count == 0 || weight <= 0.0 {
        return Ok(LossGrad {
            value: LossValue { value: 0.0, count: 0 },
            pred: dpred,
            mask: dmask,
        });
    }
    // Per-element error and its gradient w.r.t. the prediction.
    let mut err = Array3::<f64>::zeros(target.dim());
    match shape.kind {
        MetricKind::Continuous => {
            Zip::indexed(&mut err).for_each(|(i, j, m), e| {
                let d = pred[[i, j, m]] - target[[i, j, m]];
                *e = d * d;
                dpred[[i, j, m]] = loss_mask[[i, j, m]] * 2.0 * d / weight;
            });
        }
        MetricKind::Categorical => {
            let offsets = shape.logit_offsets();
            for ((i, j, m), e) in err.indexed_iter_mut() {
                let o = offsets[m];
                let k = shape.categories[m];
                let cls = target[[i, j, m]] as usize;
                let max = (0..k).map(|c| pred[[i, j, o + c]]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..k).map(|c| (pred[[i, j, o + c]] - max).exp()).sum();
                let lse = max + sum.ln();
                *e = lse - pred[[i, j, o + cls]];
                let wm = loss_mask[[i, j, m]];
                if wm != 0.0 {
                    for c in 0..k {
                        let p = (pred[[i, j, o + c]] - lse).exp();
                        dpred[[i, j, o + c]] = wm * (p - if c == cls { 1.0 } else { 0.0 }) / weight;
                    }
                }
            }
        }
    }
    let value = Zip::from(&err).and(loss_mask).fold(0.0, |acc, &e, &w| acc + w * e) / weight;
    Zip::from(&mut dmask).and(&err).for_each(|d, &e| *d = (e - value) / weight);
    Ok(LossGrad {
        value: LossValue { value, count },
        pred: dpred,
        mask: dmask,
    })
}

/// Mean squared error (continuous) or mean cross-entropy (categorical) over
/// the elements where `loss_mask` is nonzero, weighted by the mask values.
pub fn masked_loss(
    shape: &ImputerShape,
    pred: &Array3<f64>,
    target: &Array3<f64>,
    loss_mask: &Array3<f64>,
) -> Result<LossValue> {
    loss_and_grad(shape, pred, target, loss_mask).map(|l| l.value)
}

/// Gradients of the masked loss.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: LossValue,
    pub params: Params,
    /// dL/d(effective input), i.e. w.r.t. `features ⊙ visibility`.
    pub input: Array3<f64>,
    /// dL/d(visibility).
    pub visibility: Array3<f64>,
    /// dL/d(batch) through the input path.
    pub batch: Array3<f64>,
    /// dL/d(loss mask weights).
    pub loss_mask: Array3<f64>,
}

/// Gradients of the loss with `batch` itself as the reconstruction target.
pub fn backward(
    model: &Imputer,
    batch: &Array3<f64>,
    visibility: &Array3<f64>,
    loss_mask: &Array3<f64>,
) -> Result<Gradients> {
    backward_with_target(model, batch, visibility, batch, loss_mask)
}

pub fn backward_with_target(
    model: &Imputer,
    batch: &Array3<f64>,
    visibility: &Array3<f64>,
    target: &Array3<f64>,
    loss_mask: &Array3<f64>,
) -> Result<Gradients> {
    model.check_input(batch, visibility)?;
    let (b, t, m) = batch.dim();
    let dims = model.dims();
    let features = model.featurize(batch);
    let x = rows(&features * visibility, b * t, m);
    let (out, cache) = model::forward(&model.params, &dims, x, b);
    let pred = out.into_shape_with_order((b, t, dims.out_width)).expect("contiguous");
    let LossGrad {
        value: loss,
        pred: dpred,
        mask: dmask,
    } = loss_and_grad(&model.shape, &pred, target, loss_mask)?;
    let mut params = Params::zeros(&dims);
    let dpred = dpred.into_shape_with_order((b * t, dims.out_width)).expect("contiguous");
    let dx = model::backward(&model.params, &dims, &cache, dpred.view(), &mut params);
    let input = dx.into_shape_with_order((b, t, m)).expect("contiguous");
    let dvis = &input * &features;
    let mut dbatch = &input * visibility;
    if model.shape.kind == MetricKind::Categorical {
        for ((_, _, j), v) in dbatch.indexed_iter_mut() {
            let k = model.shape.categories[j];
            *v = if k > 1 { *v / (k - 1) as f64 } else { 0.0 };
        }
    }
    Ok(Gradients {
        loss,
        params,
        input,
        visibility: dvis,
        batch: dbatch,
        loss_mask: dmask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    pub(crate) fn tiny_config(kind: MetricKind) -> ImputerConfig {
        ImputerConfig {
            n_blocks: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            epochs: 10,
            ..ImputerConfig::for_kind(kind)
        }
    }

    #[test]
    fn output_shapes() {
        let model = Imputer::new(tiny_config(MetricKind::Continuous), ImputerShape::continuous(5, 7), 1).unwrap();
        let batch = Array3::from_elem((2, 5, 7), 0.3);
        let vis = Array3::ones((2, 5, 7));
        assert_eq!(model.forward(&batch, &vis).unwrap().dim(), (2, 5, 7));
        let wrong = Array3::from_elem((2, 4, 7), 0.3);
        assert!(matches!(model.forward(&wrong, &Array3::ones((2, 4, 7))), Err(Error::Shape(_))));
    }

    #[test]
    fn categorical_logit_slices() {
        let shape = ImputerShape::categorical(3, vec![2, 3]);
        assert_eq!(shape.output_width(), 5);
        assert_eq!(shape.logit_offsets(), [0, 2]);
        let model = Imputer::new(tiny_config(MetricKind::Categorical), shape.clone(), 1).unwrap();
        let batch = Array3::from_shape_fn((1, 3, 2), |(_, t, m)| ((t + m) % 2) as f64);
        let out = model.forward(&batch, &Array3::ones((1, 3, 2))).unwrap();
        assert_eq!(out.dim(), (1, 3, 5));
        let mut raw = Array3::zeros((1, 1, 5));
        raw[[0, 0, 1]] = 2.0;
        raw[[0, 0, 4]] = 1.0;
        let dec = decode(&ImputerShape::categorical(1, vec![2, 3]), &raw);
        assert_eq!(dec.iter().copied().collect::<Vec<_>>(), [1.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Imputer::new(tiny_config(MetricKind::Continuous), ImputerShape::continuous(4, 3), 9).unwrap();
        let mut rng = seed::rng(2);
        let batch = Array3::from_shape_simple_fn((3, 4, 3), || rng.random::<f64>());
        let vis = Array3::ones((3, 4, 3));
        let a = model.forward(&batch, &vis).unwrap();
        let b = model.forward(&batch, &vis).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn loss_examples() {
        let shape = ImputerShape::continuous(1, 1);
        let pred = Array3::from_elem((1, 1, 1), 0.5);
        let target = Array3::from_elem((1, 1, 1), 1.0);
        let mask = Array3::ones((1, 1, 1));
        assert_eq!(masked_loss(&shape, &pred, &target, &mask).unwrap().value, 0.25);
        assert_eq!(masked_loss(&shape, &target, &target, &mask).unwrap().value, 0.0);
        let empty = masked_loss(&shape, &pred, &target, &Array3::zeros((1, 1, 1))).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn zero_loss_mask_gives_zero_gradients() {
        let model = Imputer::new(tiny_config(MetricKind::Continuous), ImputerShape::continuous(3, 4), 3).unwrap();
        let batch = Array3::from_elem((2, 3, 4), 0.7);
        let g = backward(&model, &batch, &Array3::ones((2, 3, 4)), &Array3::zeros((2, 3, 4))).unwrap();
        assert!(g.params.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_samples_get_equal_input_gradients() {
        let model = Imputer::new(tiny_config(MetricKind::Continuous), ImputerShape::continuous(3, 4), 3).unwrap();
        let mut rng = seed::rng(5);
        let one = Array3::from_shape_simple_fn((1, 3, 4), || rng.random::<f64>());
        let batch = ndarray::concatenate(ndarray::Axis(0), &[one.view(), one.view()]).unwrap();
        let vis = Array3::from_shape_fn((2, 3, 4), |(_, t, m)| if (t + m) % 3 == 0 { 0.0 } else { 1.0 });
        let mask = vis.mapv(|v| 1.0 - v);
        let g = backward(&model, &batch, &vis, &mask).unwrap();
        let a = g.input.index_axis(ndarray::Axis(0), 0);
        let b = g.input.index_axis(ndarray::Axis(0), 1);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-15));
    }
}
