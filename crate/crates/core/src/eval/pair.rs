use ndarray::Array3;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{
    accuracy_of, bootstrap_ci, macro_f1_of, nrmsd_of, MaskedElement, MaskedElementSet, NrmsdVariant, PerfScore,
    ScoreName, Statistic,
};
use crate::dataset::{MetricKind, RctDataset};
use crate::error::{Error, Result};
use crate::imputer::Imputer;
use crate::pmdgen::Design;
use crate::seed;

/// Anything that imputes a batch given a visibility tensor.
pub trait Predictor: Sync {
    fn kind(&self) -> MetricKind;
    /// Decoded predictions `[b, n_t, n_m]`.
    fn predict(&self, batch: &Array3<f64>, visibility: &Array3<f64>) -> Result<Array3<f64>>;
}

impl Predictor for Imputer {
    fn kind(&self) -> MetricKind {
        self.shape().kind
    }

    fn predict(&self, batch: &Array3<f64>, visibility: &Array3<f64>) -> Result<Array3<f64>> {
        Imputer::predict(self, batch, visibility)
    }
}

/// Where the evaluated design comes from. Random sources are called with a
/// replicate index and are drawn repeatedly until the element budget is met.
pub enum DesignSource<'a> {
    Fixed(&'a Design),
    Random(&'a (dyn Fn(u64) -> Result<Design> + Sync)),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Element budget for randomized designs.
    pub budget: Option<usize>,
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
    pub variant: NrmsdVariant,
    /// Per-metric ranges; computed from the evaluation data when absent.
    pub ranges: Option<Vec<f64>>,
    pub max_replicates: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            budget: Some(10_000),
            n_boot: 1000,
            level: 0.95,
            seed: 0,
            variant: NrmsdVariant::Printed,
            ranges: None,
            max_replicates: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub metric: String,
    pub score: String,
    pub value: f64,
    pub n_elements: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pmd_id: String,
    pub imputer_id: String,
    pub efficiency: f64,
    pub scores: Vec<PerfScore>,
    pub n_elements: usize,
    pub seed: u64,
    pub per_metric: Vec<MetricScore>,
}

impl EvalReport {
    pub fn score(&self, name: ScoreName) -> Option<&PerfScore> {
        self.scores.iter().find(|s| s.name == name)
    }
}

/// Observed max minus min per metric; 1 where that is zero or undefined.
pub fn metric_ranges(data: &RctDataset) -> Vec<f64> {
    let (n_s, n_t, n_m) = data.values().dim();
    (0..n_m)
        .map(|m| {
            if data.metrics()[m].kind == MetricKind::Categorical {
                return 1.0;
            }
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in 0..n_s {
                for t in 0..n_t {
                    if data.observed().is_collected(s, t, m) {
                        let v = data.values()[[s, t, m]];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let r = hi - lo;
            if r > 0.0 && r.is_finite() {
                r
            } else {
                1.0
            }
        })
        .collect()
}

const CHUNK: usize = 256;

fn masked_elements(predictor: &dyn Predictor, design: &Design, data: &RctDataset) -> Result<Vec<MaskedElement>> {
    let (n_s, n_t, n_m) = data.values().dim();
    if let Design::PerSubject(v) = design {
        if v.len() != n_s {
            return Err(Error::shape(format!("design covers {} subjects, data has {n_s}", v.len())));
        }
    }
    let protocol = data.protocol().eligible();
    let mut vis = Array3::zeros((n_s, n_t, n_m));
    for s in 0..n_s {
        let pmd = design.for_subject(s);
        if pmd.shape() != (n_t, n_m) {
            return Err(Error::shape("design does not match the data"));
        }
        for t in 0..n_t {
            for m in 0..n_m {
                vis[[s, t, m]] = f64::from(u8::from(pmd.collects(t, m) || !protocol[[t, m]]));
            }
        }
    }
    let mut out = Vec::new();
    for start in (0..n_s).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n_s)).collect();
        let batch = data.values().select(ndarray::Axis(0), &idx);
        let v = vis.select(ndarray::Axis(0), &idx);
        let pred = predictor.predict(&batch, &v)?;
        for (i, &s) in idx.iter().enumerate() {
            for t in 0..n_t {
                for m in 0..n_m {
                    if v[[i, t, m]] == 0.0 && protocol[[t, m]] && data.observed().is_collected(s, t, m) {
                        out.push(MaskedElement {
                            subject: s,
                            timepoint: t,
                            metric: m,
                            prediction: pred[[i, t, m]],
                            target: batch[[i, t, m]],
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Impute `data` under the design and score the skipped elements with
/// bootstrap intervals.
pub fn evaluate_pair(
    predictor: &dyn Predictor,
    source: DesignSource<'_>,
    data: &RctDataset,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let kind = predictor.kind();
    if data.metrics().iter().any(|m| m.kind != kind) {
        return Err(Error::config("evaluation data mixes metric kinds with the predictor's"));
    }
    let ranges = match &options.ranges {
        Some(r) if r.len() == data.n_metrics() => r.clone(),
        Some(_) => return Err(Error::shape("range vector does not match the metric count")),
        None => metric_ranges(data),
    };
    let mut elements = Vec::new();
    let mut efficiency_sum = 0.0;
    let mut replicates = 0usize;
    let randomized;
    match source {
        DesignSource::Fixed(design) => {
            randomized = design.is_randomized();
            elements = masked_elements(predictor, design, data)?;
            efficiency_sum = design.efficiency(data.protocol())?;
            replicates = 1;
        }
        DesignSource::Random(draw) => {
            randomized = true;
            let target = options.budget.unwrap_or(0);
            while replicates < options.max_replicates.max(1) && (replicates == 0 || elements.len() < target) {
                let design = draw(replicates as u64)?;
                elements.extend(masked_elements(predictor, &design, data)?);
                efficiency_sum += design.efficiency(data.protocol())?;
                replicates += 1;
            }
        }
    }
    if elements.is_empty() {
        return Err(Error::Empty("empty evaluation: the design skips no observed eligible element".into()));
    }
    if let (true, Some(budget)) = (randomized, options.budget) {
        if elements.len() > budget {
            let mut rng = seed::rng_for(options.seed, &[seed::tag("subsample")]);
            let mut keep = index::sample(&mut rng, elements.len(), budget).into_vec();
            keep.sort_unstable();
            elements = keep.into_iter().map(|i| elements[i]).collect();
        }
    }
    let set = MaskedElementSet { kind, elements, ranges };
    let mut scores = Vec::new();
    let stats: &[Statistic] = match kind {
        MetricKind::Continuous => &[Statistic::Nrmsd(options.variant)],
        MetricKind::Categorical => &[Statistic::PooledAccuracy, Statistic::PooledMacroF1],
    };
    for (i, &stat) in stats.iter().enumerate() {
        let ci = bootstrap_ci(&set, stat, options.n_boot, options.level, seed::derive(options.seed, &[i as u64]))?;
        scores.push(match stat {
            Statistic::Nrmsd(_) => PerfScore {
                name: ScoreName::NegNrmsd,
                point: -ci.point,
                lower: -ci.upper,
                upper: -ci.lower,
                degenerate: ci.degenerate,
            },
            _ => PerfScore {
                name: stat.score_name(),
                point: ci.point,
                lower: ci.lower,
                upper: ci.upper,
                degenerate: ci.degenerate,
            },
        });
    }
    let names = data.metric_names();
    let mut per_metric = Vec::new();
    for (m, name) in names.iter().enumerate() {
        let es: Vec<MaskedElement> = set.elements.iter().filter(|e| e.metric == m).copied().collect();
        if es.is_empty() {
            continue;
        }
        let n = es.len();
        let mut push = |score: &str, value: f64| {
            per_metric.push(MetricScore {
                metric: name.clone(),
                score: score.into(),
                value,
                n_elements: n,
            })
        };
        match kind {
            MetricKind::Continuous => push("nRMSD", nrmsd_of(&es, &set.ranges, options.variant)?),
            MetricKind::Categorical => {
                push("accuracy", accuracy_of(&es)[&m]);
                push("macro_f1", macro_f1_of(&es)[&m]);
            }
        }
    }
    Ok(EvalReport {
        pmd_id: String::new(),
        imputer_id: String::new(),
        efficiency: efficiency_sum / replicates as f64,
        scores,
        n_elements: set.elements.len(),
        seed: options.seed,
        per_metric,
    })
}
