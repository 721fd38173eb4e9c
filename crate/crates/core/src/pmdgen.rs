//! Planned missing designs and the baseline generators: RSD, multiform (MF),
//! multiform longitudinal (MFL), Wave+ and Wave.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::ProtocolMask;
use crate::error::{Error, Result};
use crate::imputer::MaskSampler;
use crate::seed::Rng;

/// Binary design over `[n_t, n_m]`; `true` means the cell is collected.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pmd {
    grid: Array2<bool>,
}

impl Pmd {
    pub fn new(grid: Array2<bool>) -> Self {
        Pmd { grid }
    }

    pub fn all_collected(n_t: usize, n_m: usize) -> Self {
        Pmd::new(Array2::from_elem((n_t, n_m), true))
    }

    pub fn grid(&self) -> &Array2<bool> {
        &self.grid
    }

    pub fn into_grid(self) -> Array2<bool> {
        self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn collects(&self, t: usize, m: usize) -> bool {
        self.grid[[t, m]]
    }

    /// Fraction of protocol-eligible cells this design skips.
    pub fn efficiency(&self, protocol: &ProtocolMask) -> Result<f64> {
        if protocol.shape() != self.shape() {
            return Err(Error::shape(format!(
                "design {:?} does not match protocol {:?}",
                self.shape(),
                protocol.shape()
            )));
        }
        let eligible = protocol.n_eligible();
        if eligible == 0 {
            return Err(Error::data("protocol has no eligible entries"));
        }
        let skipped = self
            .grid
            .iter()
            .zip(protocol.eligible())
            .filter(|&(&c, &p)| p && !c)
            .count();
        Ok(skipped as f64 / eligible as f64)
    }

    /// Force every ineligible cell to be collected.
    pub fn constrained(mut self, protocol: &ProtocolMask) -> Self {
        for (c, &p) in self.grid.iter_mut().zip(protocol.eligible()) {
            *c |= !p;
        }
        self
    }

    /// 0/1 grid, one row per timepoint, one column per metric.
    pub fn to_csv(&self, metric_names: &[String]) -> Result<String> {
        let (n_t, n_m) = self.shape();
        if metric_names.len() != n_m {
            return Err(Error::shape("metric names do not match the design width"));
        }
        let mut out = String::from("timepoint");
        for n in metric_names {
            out.push(',');
            out.push_str(&csv_field(n));
        }
        out.push('\n');
        for t in 0..n_t {
            write!(out, "{t}").expect("string write");
            for m in 0..n_m {
                out.push_str(if self.grid[[t, m]] { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<(Pmd, Vec<String>)> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let names: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut cells = Vec::new();
        let mut n_t = 0;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != names.len() + 1 {
                return Err(Error::data(format!("design row {} has the wrong width", n_t + 2)));
            }
            for f in rec.iter().skip(1) {
                cells.push(match f {
                    "1" => true,
                    "0" => false,
                    other => return Err(Error::data(format!("design cell {other:?} is not 0 or 1"))),
                });
            }
            n_t += 1;
        }
        let grid = Array2::from_shape_vec((n_t, names.len()), cells).map_err(|e| Error::shape(e.to_string()))?;
        Ok((Pmd::new(grid), names))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// A design applied to a cohort: one PMD for everyone, or one per subject.
#[derive(Clone, Debug, PartialEq)]
pub enum Design {
    Shared(Pmd),
    PerSubject(Vec<Pmd>),
}

impl Design {
    pub fn for_subject(&self, s: usize) -> &Pmd {
        match self {
            Design::Shared(p) => p,
            Design::PerSubject(v) => &v[s],
        }
    }

    pub fn is_randomized(&self) -> bool {
        matches!(self, Design::PerSubject(_))
    }

    /// Mean efficiency over subjects for per-subject designs.
    pub fn efficiency(&self, protocol: &ProtocolMask) -> Result<f64> {
        match self {
            Design::Shared(p) => p.efficiency(protocol),
            Design::PerSubject(v) => {
                if v.is_empty() {
                    return Err(Error::Empty("design has no subjects".into()));
                }
                let mut sum = 0.0;
                for p in v {
                    sum += p.efficiency(protocol)?;
                }
                Ok(sum / v.len() as f64)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Rsd,
    Mf,
    Mfl,
    WavePlus,
    Wave,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Rsd, Strategy::Mf, Strategy::Mfl, Strategy::WavePlus, Strategy::Wave];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Rsd => "rsd",
            Strategy::Mf => "mf",
            Strategy::Mfl => "mfl",
            Strategy::WavePlus => "wave_plus",
            Strategy::Wave => "wave",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}")))
    }
}

/// Independent Bernoulli skipping of each eligible cell with probability `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct RsdGenerator {
    efficiency: f64,
    protocol: ProtocolMask,
}

impl RsdGenerator {
    pub fn new(efficiency: f64, protocol: ProtocolMask) -> Result<Self> {
        if !(0.0..=1.0).contains(&efficiency) {
            return Err(Error::config(format!("efficiency {efficiency} outside [0, 1]")));
        }
        Ok(RsdGenerator { efficiency, protocol })
    }

    pub fn efficiency(&self) -> f64 {
        self.efficiency
    }

    pub fn protocol(&self) -> &ProtocolMask {
        &self.protocol
    }

    pub fn sample(&self, rng: &mut Rng) -> Pmd {
        let eligible = self.protocol.eligible();
        // One uniform draw per cell in row-major order, eligible or not, so the
        // stream position does not depend on the protocol.
        Pmd::new(Array2::from_shape_fn(eligible.dim(), |(t, m)| {
            let u: f64 = rng.random();
            !eligible[[t, m]] || u >= self.efficiency
        }))
    }
}

impl MaskSampler for RsdGenerator {
    fn sample_grid(&self, rng: &mut Rng) -> Array2<bool> {
        self.sample(rng).into_grid()
    }
}

/// Metrics split into `k` near-equal random item sets; each form keeps one
/// pair of sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormSet {
    pub k: usize,
    pub n_metrics: usize,
    pub item_sets: Vec<Vec<usize>>,
    pub forms: Vec<(usize, usize)>,
}

pub const MAX_ITEM_SETS: usize = 20;

pub fn mf_build(n_metrics: usize, k: usize, rng: &mut Rng) -> Result<FormSet> {
    if !(2..=MAX_ITEM_SETS).contains(&k) {
        return Err(Error::config(format!("item-set count {k} outside 2..={MAX_ITEM_SETS}")));
    }
    if k > n_metrics {
        return Err(Error::config(format!("item-set count {k} exceeds {n_metrics} metrics")));
    }
    let mut order: Vec<usize> = (0..n_metrics).collect();
    order.shuffle(rng);
    let base = n_metrics / k;
    let extra = n_metrics % k;
    let mut item_sets = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let mut set = order[at..at + len].to_vec();
        set.sort_unstable();
        item_sets.push(set);
        at += len;
    }
    let forms = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    Ok(FormSet {
        k,
        n_metrics,
        item_sets,
        forms,
    })
}

impl FormSet {
    /// Per-metric keep flags for one form.
    fn kept(&self, form: usize) -> Vec<bool> {
        let (a, b) = self.forms[form];
        let mut keep = vec![false; self.n_metrics];
        for &m in self.item_sets[a].iter().chain(&self.item_sets[b]) {
            keep[m] = true;
        }
        keep
    }

    pub fn form_pmd(&self, form: usize, protocol: &ProtocolMask) -> Pmd {
        let keep = self.kept(form);
        let eligible = protocol.eligible();
        Pmd::new(Array2::from_shape_fn(eligible.dim(), |(t, m)| keep[m] || !eligible[[t, m]]))
    }

    /// Mean form efficiency, which equals `(k - 2) / k` under any protocol
    /// because every metric is kept by `k - 1` of the `C(k, 2)` forms.
    pub fn nominal_efficiency(&self) -> f64 {
        (self.k - 2) as f64 / self.k as f64
    }
}

/// One uniformly drawn form per subject, used at every timepoint.
pub fn mf_assign(forms: &FormSet, n_subjects: usize, protocol: &ProtocolMask, rng: &mut Rng) -> Result<Vec<Pmd>> {
    check_forms(forms, protocol)?;
    Ok((0..n_subjects)
        .map(|_| forms.form_pmd(rng.random_range(0..forms.forms.len()), protocol))
        .collect())
}

/// One uniformly drawn form per subject and timepoint.
pub fn mfl_assign(forms: &FormSet, n_subjects: usize, protocol: &ProtocolMask, rng: &mut Rng) -> Result<Vec<Pmd>> {
    check_forms(forms, protocol)?;
    let (n_t, n_m) = protocol.shape();
    let eligible = protocol.eligible();
    Ok((0..n_subjects)
        .map(|_| {
            let mut grid = Array2::from_elem((n_t, n_m), true);
            for t in 0..n_t {
                let keep = forms.kept(rng.random_range(0..forms.forms.len()));
                for m in 0..n_m {
                    grid[[t, m]] = keep[m] || !eligible[[t, m]];
                }
            }
            Pmd::new(grid)
        })
        .collect())
}

fn check_forms(forms: &FormSet, protocol: &ProtocolMask) -> Result<()> {
    if forms.n_metrics != protocol.shape().1 {
        return Err(Error::shape("form set does not match the protocol's metric count"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveConfig {
    /// Number of timepoints dropped.
    pub d: usize,
    /// Wave+ when true; plain Wave never drops the first or last timepoint.
    pub include_endpoints: bool,
}

/// Timepoints a wave design may drop: those with an eligible cell, minus the
/// endpoints for plain Wave.
pub fn wave_timepoints(include_endpoints: bool, protocol: &ProtocolMask) -> Vec<usize> {
    let (n_t, _) = protocol.shape();
    (0..n_t)
        .filter(|&t| include_endpoints || (t != 0 && t + 1 != n_t))
        .filter(|&t| protocol.eligible().row(t).iter().any(|&e| e))
        .collect()
}

/// Drop all eligible cells at a uniformly chosen `d`-subset of timepoints.
pub fn wave_sample(cfg: WaveConfig, protocol: &ProtocolMask, rng: &mut Rng) -> Result<Pmd> {
    let candidates = wave_timepoints(cfg.include_endpoints, protocol);
    if cfg.d > candidates.len() {
        return Err(Error::config(format!(
            "cannot drop {} of {} eligible timepoints",
            cfg.d,
            candidates.len()
        )));
    }
    let (n_t, n_m) = protocol.shape();
    let mut grid = Array2::from_elem((n_t, n_m), true);
    for i in index::sample(rng, candidates.len(), cfg.d) {
        let t = candidates[i];
        for m in 0..n_m {
            grid[[t, m]] = !protocol.is_eligible(t, m);
        }
    }
    Ok(Pmd::new(grid))
}

/// The knob that sets a baseline's efficiency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    Rate(f64),
    ItemSets(usize),
    Dropped(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feasible {
    pub strategy: Strategy,
    pub target: f64,
    /// Expected efficiency at `parameter`.
    pub realized: f64,
    pub parameter: Parameter,
}

/// A target this far below a strategy's lowest nonzero level is infeasible.
pub const FEASIBILITY_TOLERANCE: f64 = 0.05;

/// Closest achievable parameterization to `target`, ties going to the lower
/// efficiency. `None` when the target lies more than
/// [`FEASIBILITY_TOLERANCE`] below every level the strategy can reach.
pub fn nearest_feasible(strategy: Strategy, target: f64, protocol: &ProtocolMask) -> Result<Option<Feasible>> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::config(format!("target efficiency {target} outside [0, 1]")));
    }
    let (_, n_m) = protocol.shape();
    let options: Vec<(f64, Parameter)> = match strategy {
        Strategy::Rsd => vec![(target, Parameter::Rate(target))],
        Strategy::Mf | Strategy::Mfl => (3..=MAX_ITEM_SETS.min(n_m))
            .map(|k| ((k - 2) as f64 / k as f64, Parameter::ItemSets(k)))
            .collect(),
        Strategy::WavePlus | Strategy::Wave => {
            let tps = wave_timepoints(strategy == Strategy::WavePlus, protocol);
            let total = protocol.n_eligible() as f64;
            let in_tps: usize = tps
                .iter()
                .map(|&t| protocol.eligible().row(t).iter().filter(|&&e| e).count())
                .sum();
            // Dropping every eligible cell would leave nothing to impute from.
            (1..=tps.len())
                .map(|d| (d as f64 / tps.len() as f64 * in_tps as f64 / total, Parameter::Dropped(d)))
                .filter(|(e, _)| *e < 1.0)
                .collect()
        }
    };
    let lowest = options.iter().map(|o| o.0).fold(f64::INFINITY, f64::min);
    if options.is_empty() || target < lowest - FEASIBILITY_TOLERANCE - 1e-12 {
        return Ok(None);
    }
    let mut best: Option<(f64, Parameter)> = None;
    for (e, p) in options {
        let better = match best {
            None => true,
            Some((b, _)) => {
                let (de, db) = ((e - target).abs(), (b - target).abs());
                de < db - 1e-12 || ((de - db).abs() <= 1e-12 && e < b)
            }
        };
        if better {
            best = Some((e, p));
        }
    }
    Ok(best.map(|(realized, parameter)| Feasible {
        strategy,
        target,
        realized,
        parameter,
    }))
}

/// Draw a per-subject baseline design for `n_subjects` subjects.
pub fn sample_baseline(feasible: &Feasible, protocol: &ProtocolMask, n_subjects: usize, rng: &mut Rng) -> Result<Design> {
    let (_, n_m) = protocol.shape();
    let pmds = match (feasible.strategy, feasible.parameter) {
        (Strategy::Rsd, Parameter::Rate(e)) => {
            let g = RsdGenerator::new(e, protocol.clone())?;
            (0..n_subjects).map(|_| g.sample(rng)).collect()
        }
        (Strategy::Mf, Parameter::ItemSets(k)) => {
            let forms = mf_build(n_m, k, rng)?;
            mf_assign(&forms, n_subjects, protocol, rng)?
        }
        (Strategy::Mfl, Parameter::ItemSets(k)) => {
            let forms = mf_build(n_m, k, rng)?;
            mfl_assign(&forms, n_subjects, protocol, rng)?
        }
        (Strategy::WavePlus | Strategy::Wave, Parameter::Dropped(d)) => {
            let cfg = WaveConfig {
                d,
                include_endpoints: feasible.strategy == Strategy::WavePlus,
            };
            (0..n_subjects)
                .map(|_| wave_sample(cfg, protocol, rng))
                .collect::<Result<_>>()?
        }
        (s, p) => return Err(Error::config(format!("parameter {p:?} does not fit strategy {}", s.as_str()))),
    };
    Ok(Design::PerSubject(pmds))
}

/// JSON sidecar written next to an exported design grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmdSidecar {
    pub efficiency: f64,
    pub origin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_seed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<Parameter>,
    pub seed: u64,
}
