//! Longitudinal trial data: subjects × timepoints × metrics, with the
//! protocol mask (which cells a design may drop) and the subject mask (which
//! cells were actually collected).

mod ingest;
mod preprocess;
mod snapshot;
mod synth;

pub use ingest::{
    ingest_csv, ingest_rows, DeclaredKind, DroppedMetric, IngestMetadata, IngestReport, LongRow,
    MetricDecl,
};
pub use preprocess::{apply_normalization, fit_normalization, preprocess, split};
pub use snapshot::{read_snapshot, write_snapshot};
pub use synth::{synthesize, SynthConfig};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Continuous,
    Categorical,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Continuous => "continuous",
            MetricKind::Categorical => "categorical",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub kind: MetricKind,
    /// Category labels; the stored value of a categorical cell indexes this list.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    /// Raw-unit observed range of a continuous metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_max: Option<f64>,
}

impl MetricSpec {
    pub fn continuous(name: impl Into<String>, min: f64, max: f64) -> Self {
        MetricSpec {
            name: name.into(),
            kind: MetricKind::Continuous,
            categories: Vec::new(),
            observed_min: Some(min),
            observed_max: Some(max),
        }
    }

    pub fn categorical(name: impl Into<String>, categories: Vec<String>) -> Self {
        MetricSpec {
            name: name.into(),
            kind: MetricKind::Categorical,
            categories,
            observed_min: None,
            observed_max: None,
        }
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            MetricKind::Categorical => {
                if self.categories.is_empty() {
                    return Err(Error::data(format!("categorical metric {} has no categories", self.name)));
                }
                let mut seen = std::collections::HashSet::new();
                for c in &self.categories {
                    if !seen.insert(c) {
                        return Err(Error::data(format!(
                            "categorical metric {} repeats category {c:?}",
                            self.name
                        )));
                    }
                }
            }
            MetricKind::Continuous => {
                if let (Some(lo), Some(hi)) = (self.observed_min, self.observed_max) {
                    if lo > hi {
                        return Err(Error::data(format!(
                            "metric {}: observed_min {lo} exceeds observed_max {hi}",
                            self.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cells of the collection protocol that a design is allowed to drop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolMask {
    eligible: Array2<bool>,
}

impl ProtocolMask {
    pub fn new(eligible: Array2<bool>) -> Result<Self> {
        if !eligible.iter().any(|&e| e) {
            return Err(Error::data("protocol mask has no eligible entries"));
        }
        Ok(ProtocolMask {
            eligible: eligible.as_standard_layout().into_owned(),
        })
    }

    pub fn uniform(n_timepoints: usize, n_metrics: usize) -> Self {
        ProtocolMask {
            eligible: Array2::from_elem((n_timepoints, n_metrics), true),
        }
    }

    pub fn eligible(&self) -> &Array2<bool> {
        &self.eligible
    }

    pub fn is_eligible(&self, t: usize, m: usize) -> bool {
        self.eligible[[t, m]]
    }

    pub fn n_eligible(&self) -> usize {
        self.eligible.iter().filter(|&&e| e).count()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.eligible.dim()
    }

    pub fn select_metrics(&self, metrics: &[usize]) -> Result<Self> {
        ProtocolMask::new(self.eligible.select(Axis(1), metrics))
    }

    /// Eligibility as a 0/1 real matrix.
    pub fn as_f64(&self) -> Array2<f64> {
        self.eligible.mapv(|e| if e { 1.0 } else { 0.0 })
    }
}

/// Cells actually collected per subject (native missingness).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectMask {
    collected: Array3<bool>,
}

impl SubjectMask {
    pub fn new(collected: Array3<bool>) -> Self {
        SubjectMask {
            collected: collected.as_standard_layout().into_owned(),
        }
    }

    pub fn all_collected(n_s: usize, n_t: usize, n_m: usize) -> Self {
        SubjectMask {
            collected: Array3::from_elem((n_s, n_t, n_m), true),
        }
    }

    pub fn collected(&self) -> &Array3<bool> {
        &self.collected
    }

    pub fn is_collected(&self, s: usize, t: usize, m: usize) -> bool {
        self.collected[[s, t, m]]
    }
}

/// Per-metric normalization state. `min`/`max` are in raw units; `fill` is the
/// placeholder written into natively missing cells (normalized units for
/// continuous metrics, a category index for categorical ones).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
    pub fill: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RctDataset {
    values: Array3<f64>,
    metrics: Vec<MetricSpec>,
    subject_ids: Vec<String>,
    protocol: ProtocolMask,
    observed: SubjectMask,
    normalization: Option<Vec<Normalization>>,
}

impl RctDataset {
    pub fn new(
        values: Array3<f64>,
        metrics: Vec<MetricSpec>,
        subject_ids: Vec<String>,
        protocol: ProtocolMask,
        observed: SubjectMask,
    ) -> Result<Self> {
        let (n_s, n_t, n_m) = values.dim();
        if metrics.len() != n_m {
            return Err(Error::shape(format!("{} metric specs for {n_m} metrics", metrics.len())));
        }
        if subject_ids.len() != n_s {
            return Err(Error::shape(format!("{} subject ids for {n_s} subjects", subject_ids.len())));
        }
        if protocol.shape() != (n_t, n_m) {
            return Err(Error::shape(format!(
                "protocol mask {:?} does not match ({n_t}, {n_m})",
                protocol.shape()
            )));
        }
        if observed.collected.dim() != (n_s, n_t, n_m) {
            return Err(Error::shape(format!(
                "subject mask {:?} does not match ({n_s}, {n_t}, {n_m})",
                observed.collected.dim()
            )));
        }
        for spec in &metrics {
            spec.validate()?;
        }
        Ok(RctDataset {
            values: values.as_standard_layout().into_owned(),
            metrics,
            subject_ids,
            protocol,
            observed,
            normalization: None,
        })
    }

    pub(crate) fn with_normalization(mut self, normalization: Option<Vec<Normalization>>) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn metrics(&self) -> &[MetricSpec] {
        &self.metrics
    }

    pub fn metric_names(&self) -> Vec<String> {
        self.metrics.iter().map(|m| m.name.clone()).collect()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn protocol(&self) -> &ProtocolMask {
        &self.protocol
    }

    pub fn observed(&self) -> &SubjectMask {
        &self.observed
    }

    pub fn normalization(&self) -> Option<&[Normalization]> {
        self.normalization.as_deref()
    }

    pub fn is_preprocessed(&self) -> bool {
        self.normalization.is_some()
    }

    pub fn n_subjects(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_timepoints(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_metrics(&self) -> usize {
        self.values.dim().2
    }

    /// Metric indices of one kind, in dataset order.
    pub fn metrics_of_kind(&self, kind: MetricKind) -> Vec<usize> {
        self.metrics
            .iter()
            .enumerate()
            .filter(|(_, m)| m.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// The sub-dataset restricted to the given subjects (in the given order).
    pub fn select_subjects(&self, subjects: &[usize]) -> RctDataset {
        RctDataset {
            values: self.values.select(Axis(0), subjects),
            metrics: self.metrics.clone(),
            subject_ids: subjects.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            protocol: self.protocol.clone(),
            observed: SubjectMask::new(self.observed.collected.select(Axis(0), subjects)),
            normalization: self.normalization.clone(),
        }
    }

    /// The sub-dataset restricted to the given metrics.
    pub fn select_metrics(&self, metrics: &[usize]) -> Result<RctDataset> {
        if metrics.is_empty() {
            return Err(Error::Empty("metric selection is empty".into()));
        }
        Ok(RctDataset {
            values: self.values.select(Axis(2), metrics).as_standard_layout().into_owned(),
            metrics: metrics.iter().map(|&m| self.metrics[m].clone()).collect(),
            subject_ids: self.subject_ids.clone(),
            protocol: self.protocol.select_metrics(metrics)?,
            observed: SubjectMask::new(self.observed.collected.select(Axis(2), metrics)),
            normalization: self
                .normalization
                .as_ref()
                .map(|n| metrics.iter().map(|&m| n[m]).collect()),
        })
    }

    /// Restrict to one metric kind. Returns `None` when the dataset has no
    /// metric of that kind or none of them is protocol-eligible.
    pub fn kind_part(&self, kind: MetricKind) -> Option<RctDataset> {
        let idx = self.metrics_of_kind(kind);
        if idx.is_empty() {
            return None;
        }
        self.select_metrics(&idx).ok()
    }

    /// Compare two datasets bit for bit (NaN placeholders included).
    pub fn same_bits(&self, other: &RctDataset) -> bool {
        self.values.dim() == other.values.dim()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.metrics == other.metrics
            && self.subject_ids == other.subject_ids
            && self.protocol == other.protocol
            && self.observed == other.observed
            && self.normalization == other.normalization
    }
}
