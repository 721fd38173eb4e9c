//! Imputation scores over masked elements, pooled categorical scores,
//! subject-level bootstrap intervals, and imputer/design evaluation.

mod bootstrap;
mod pair;

pub use bootstrap::{bootstrap_ci, percentile, Interval};
pub use pair::{evaluate_pair, metric_ranges, DesignSource, EvalOptions, EvalReport, MetricScore, Predictor};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{MetricKind, ProtocolMask};
use crate::error::{Error, Result};
use crate::pmdgen::Design;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreName {
    #[serde(rename = "neg_nRMSD")]
    NegNrmsd,
    #[serde(rename = "pACC")]
    Pacc,
    #[serde(rename = "pMF1")]
    Pmf1,
}

impl ScoreName {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreName::NegNrmsd => "neg_nRMSD",
            ScoreName::Pacc => "pACC",
            ScoreName::Pmf1 => "pMF1",
        }
    }

    pub fn for_kind(kind: MetricKind) -> &'static [ScoreName] {
        match kind {
            MetricKind::Continuous => &[ScoreName::NegNrmsd],
            MetricKind::Categorical => &[ScoreName::Pacc, ScoreName::Pmf1],
        }
    }
}

/// A score oriented so that greater is better, with its interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfScore {
    pub name: ScoreName,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    /// Set when the interval could not be bootstrapped (fewer than two subjects).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl PerfScore {
    /// Collapse the interval onto the point estimate.
    pub fn without_interval(self) -> Self {
        PerfScore {
            lower: self.point,
            upper: self.point,
            ..self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedElement {
    pub subject: usize,
    pub timepoint: usize,
    pub metric: usize,
    pub prediction: f64,
    pub target: f64,
}

/// Elements that were skipped by a design, eligible and observed, with
/// their predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedElementSet {
    pub kind: MetricKind,
    pub elements: Vec<MaskedElement>,
    /// Per-metric target range for continuous scoring.
    pub ranges: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NrmsdVariant {
    /// `sqrt(mean(|ŷ - y| / range))`.
    #[default]
    Printed,
    /// `sqrt(mean(((ŷ - y) / range)^2))`.
    Squared,
}

pub fn nrmsd(set: &MaskedElementSet, variant: NrmsdVariant) -> Result<f64> {
    nrmsd_of(&set.elements, &set.ranges, variant)
}

fn nrmsd_of(elements: &[MaskedElement], ranges: &[f64], variant: NrmsdVariant) -> Result<f64> {
    if elements.is_empty() {
        return Err(Error::Empty("no masked elements".into()));
    }
    let sum: f64 = elements
        .iter()
        .map(|e| {
            let d = (e.prediction - e.target).abs() / ranges[e.metric];
            match variant {
                NrmsdVariant::Printed => d,
                NrmsdVariant::Squared => d * d,
            }
        })
        .sum();
    Ok((sum / elements.len() as f64).sqrt())
}

/// Accuracy per metric, keyed by metric index; metrics with no masked
/// elements are absent.
pub fn accuracy_per_metric(set: &MaskedElementSet) -> BTreeMap<usize, f64> {
    accuracy_of(&set.elements)
}

fn accuracy_of(elements: &[MaskedElement]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for e in elements {
        let c = counts.entry(e.metric).or_default();
        c.0 += usize::from(e.prediction == e.target);
        c.1 += 1;
    }
    counts.into_iter().map(|(m, (hit, n))| (m, hit as f64 / n as f64)).collect()
}

/// Macro F1 per metric over the classes that occur among targets or
/// predictions of that metric.
pub fn macro_f1_per_metric(set: &MaskedElementSet) -> BTreeMap<usize, f64> {
    macro_f1_of(&set.elements)
}

fn macro_f1_of(elements: &[MaskedElement]) -> BTreeMap<usize, f64> {
    let mut by_metric: BTreeMap<usize, Vec<&MaskedElement>> = BTreeMap::new();
    for e in elements {
        by_metric.entry(e.metric).or_default().push(e);
    }
    by_metric
        .into_iter()
        .map(|(m, es)| {
            let classes: BTreeSet<i64> = es
                .iter()
                .flat_map(|e| [e.target as i64, e.prediction as i64])
                .collect();
            let total: f64 = classes
                .iter()
                .map(|&c| {
                    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
                    for e in &es {
                        let (t, p) = (e.target as i64 == c, e.prediction as i64 == c);
                        tp += usize::from(t && p);
                        fp += usize::from(!t && p);
                        fneg += usize::from(t && !p);
                    }
                    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
                })
                .sum();
            (m, total / classes.len() as f64)
        })
        .collect()
}

/// Median, averaging the two central values for even counts.
pub fn pooled(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("no metric scores to pool".into()));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Fraction of eligible cells skipped, averaged over subjects for
/// per-subject designs.
pub fn efficiency(design: &Design, protocol: &ProtocolMask) -> Result<f64> {
    design.efficiency(protocol)
}

/// Statistics with a bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Statistic {
    Nrmsd(NrmsdVariant),
    PooledAccuracy,
    PooledMacroF1,
}

impl Statistic {
    pub fn evaluate(self, elements: &[MaskedElement], ranges: &[f64]) -> Result<f64> {
        match self {
            Statistic::Nrmsd(v) => nrmsd_of(elements, ranges, v),
            Statistic::PooledAccuracy => pooled(&accuracy_of(elements).into_values().collect::<Vec<_>>()),
            Statistic::PooledMacroF1 => pooled(&macro_f1_of(elements).into_values().collect::<Vec<_>>()),
        }
    }

    pub fn score_name(self) -> ScoreName {
        match self {
            Statistic::Nrmsd(_) => ScoreName::NegNrmsd,
            Statistic::PooledAccuracy => ScoreName::Pacc,
            Statistic::PooledMacroF1 => ScoreName::Pmf1,
        }
    }
}
