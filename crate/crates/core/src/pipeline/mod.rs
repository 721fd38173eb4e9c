//! End-to-end experiment: cross-validated pilot/test folds, candidate
//! generation, selection on the validation split, and test-set comparison
//! against every baseline strategy.

mod candidates;
mod store;
mod viz;

pub use candidates::{generate_candidates, initial_models, learn_masks, CandidateSet, InitialModel, LearnedCandidate};
pub use store::{dataset_digest, sha256_hex, task_key, ArtifactStore};
pub use viz::visualize_pmd;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{apply_normalization, fit_normalization, split, MetricKind, RctDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pair, percentile, DesignSource, EvalOptions, EvalReport, NrmsdVariant, PerfScore, ScoreName};
use crate::imputer::{Imputer, ImputerConfig};
use crate::masklayer::{MaskHyperparams, ETA_GRID, LAMBDA_GRID};
use crate::pmdgen::{nearest_feasible, sample_baseline, Design, Pmd, RsdGenerator, Strategy};
use crate::seed;
use crate::select::{choose, rank_report, rank_report_csv, solutions_json, Objective, Origin, ScoredCandidate};

pub const EFFICIENCY_GRID: [f64; 6] = [0.05, 0.10, 0.30, 0.50, 0.70, 0.90];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub efficiency_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub eta_grid: Vec<f64>,
    pub objective: Objective,
    pub folds: usize,
    pub pilot_size: usize,
    /// Pilot subjects used for training; the rest validate.
    pub train_fraction: f64,
    pub seed: u64,
    pub baselines: Vec<Strategy>,
    /// Worker threads; 0 uses all cores. Does not affect results.
    pub workers: usize,
    pub continuous: ImputerConfig,
    pub categorical: ImputerConfig,
    /// Overrides the epoch count of both imputer configs.
    pub epochs: Option<usize>,
    /// Mask-learning epochs; defaults to the imputer's epoch count.
    pub mask_epochs: Option<usize>,
    /// Element budget for randomized designs on the test split.
    pub test_budget: usize,
    pub n_boot: usize,
    pub confidence_level: f64,
    pub nrmsd_variant: NrmsdVariant,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            efficiency_grid: EFFICIENCY_GRID.to_vec(),
            lambda_grid: LAMBDA_GRID.to_vec(),
            eta_grid: ETA_GRID.to_vec(),
            objective: Objective::MaxEfficiency,
            folds: 5,
            pilot_size: 60,
            train_fraction: 0.8,
            seed: 0,
            baselines: Strategy::ALL.to_vec(),
            workers: 0,
            continuous: ImputerConfig::for_kind(MetricKind::Continuous),
            categorical: ImputerConfig::for_kind(MetricKind::Categorical),
            epochs: None,
            mask_epochs: None,
            test_budget: 10_000,
            n_boot: 1000,
            confidence_level: 0.95,
            nrmsd_variant: NrmsdVariant::Printed,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.efficiency_grid.is_empty() || self.lambda_grid.is_empty() || self.eta_grid.is_empty() {
            return fail("efficiency, lambda and eta grids must be non-empty".into());
        }
        if let Some(e) = self.efficiency_grid.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return fail(format!("grid efficiency {e} outside (0, 1)"));
        }
        if self.lambda_grid.iter().chain(&self.eta_grid).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return fail("lambda and eta values must be finite and non-negative".into());
        }
        if self.folds == 0 || self.pilot_size < 2 {
            return fail("need at least one fold and two pilot subjects".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train fraction {} outside (0, 1)", self.train_fraction));
        }
        if self.baselines.is_empty() {
            return fail("at least one baseline strategy is required".into());
        }
        if self.n_boot == 0 || !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return fail("n_boot must be positive and the confidence level inside (0, 1)".into());
        }
        if self.test_budget == 0 {
            return fail("test budget must be positive".into());
        }
        if self.continuous.metric_kind != MetricKind::Continuous || self.categorical.metric_kind != MetricKind::Categorical {
            return fail("imputer configs are assigned to the wrong metric kind".into());
        }
        self.continuous.validate()?;
        self.categorical.validate()
    }

    pub fn imputer_config(&self, kind: MetricKind) -> ImputerConfig {
        let mut c = match kind {
            MetricKind::Continuous => self.continuous.clone(),
            MetricKind::Categorical => self.categorical.clone(),
        };
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        c
    }

    pub fn mask_epochs_for(&self, kind: MetricKind) -> usize {
        self.mask_epochs.unwrap_or_else(|| self.imputer_config(kind).epochs)
    }

    pub fn hyper_grid(&self) -> Vec<MaskHyperparams> {
        MaskHyperparams::grid(&self.lambda_grid, &self.eta_grid)
    }

    /// Hash of every setting that can change results (worker count excluded).
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

/// Pilot and test subject indices per fold. Subjects are shuffled once;
/// fold `f` takes `pilot_size` consecutive subjects starting at
/// `f * n_s / folds`, wrapping around.
pub fn fold_subjects(n_subjects: usize, config: &RunConfig) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if config.pilot_size >= n_subjects {
        return Err(Error::config(format!(
            "pilot size {} leaves no test subjects out of {n_subjects}",
            config.pilot_size
        )));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut seed::rng_for(config.seed, &[seed::tag("folds")]));
    Ok((0..config.folds)
        .map(|f| {
            let offset = f * n_subjects / config.folds;
            let mut pilot: Vec<usize> = (0..config.pilot_size).map(|i| order[(offset + i) % n_subjects]).collect();
            pilot.sort_unstable();
            let test = (0..n_subjects).filter(|s| pilot.binary_search(s).is_err()).collect();
            (pilot, test)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoConfidenceIntervals,
    RandomCandidatePool,
}

/// Ablation modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    RandomCandidatePool,
    NoConfidenceIntervals,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoConfidenceIntervals => "no_confidence_intervals",
            Variant::RandomCandidatePool => "random_candidate_pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub efficiency: f64,
    pub scores: Vec<PerfScore>,
    pub n_elements: usize,
}

impl From<&EvalReport> for TestResult {
    fn from(r: &EvalReport) -> Self {
        TestResult {
            efficiency: r.efficiency,
            scores: r.scores.clone(),
            n_elements: r.n_elements,
        }
    }
}

impl TestResult {
    pub fn point(&self, name: ScoreName) -> Option<f64> {
        self.scores.iter().find(|s| s.name == name).map(|s| s.point)
    }
}

/// METRIK minus baseline on the test split. nRMSD is reported unnegated, so
/// a negative `nrmsd` delta is an improvement.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub efficiency: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nrmsd: Option<f64>,
    #[serde(rename = "pACC", skip_serializing_if = "Option::is_none")]
    pub pacc: Option<f64>,
    #[serde(rename = "pMF1", skip_serializing_if = "Option::is_none")]
    pub pmf1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub strategy: Strategy,
    pub target: f64,
    pub reference_id: String,
    pub chosen_id: String,
    pub fallback: bool,
    pub reference_validation: ScoredCandidate,
    pub chosen_validation: ScoredCandidate,
    pub baseline: TestResult,
    pub metrik: TestResult,
    pub delta: Deltas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Infeasible {
    pub strategy: Strategy,
    pub target: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: MetricKind,
    pub n_initial: usize,
    pub n_learned: usize,
    pub diverged: Vec<String>,
    pub infeasible: Vec<Infeasible>,
    pub comparisons: Vec<Comparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub pilot_subjects: Vec<String>,
    pub parts: Vec<KindReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Spread {
            median: percentile(&v, 0.5),
            q25: percentile(&v, 0.25),
            q75: percentile(&v, 0.75),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub kind: MetricKind,
    pub strategy: Strategy,
    pub target: f64,
    pub n_folds: usize,
    pub fallbacks: usize,
    pub efficiency: Spread,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nrmsd: Option<Spread>,
    #[serde(rename = "pACC", skip_serializing_if = "Option::is_none")]
    pub pacc: Option<Spread>,
    #[serde(rename = "pMF1", skip_serializing_if = "Option::is_none")]
    pub pmf1: Option<Spread>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Every baseline/efficiency combination was infeasible.
    InfeasibleOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub config_hash: String,
    pub dataset: String,
    pub objective: Objective,
    pub status: RunStatus,
    pub folds: Vec<FoldReport>,
    pub aggregate: Vec<AggregateRow>,
}

impl RunReport {
    pub fn comparisons(&self) -> impl Iterator<Item = (usize, &Comparison)> {
        self.folds
            .iter()
            .flat_map(|f| f.parts.iter().flat_map(move |p| p.comparisons.iter().map(move |c| (f.fold, c))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub variant: Variant,
    pub config_hash: String,
    pub dataset: String,
    /// Artifact name to content hash.
    pub artifacts: BTreeMap<String, String>,
}

/// Train/validation/test splits for one fold, normalized with statistics
/// from the pilot training split.
pub struct FoldData {
    pub train: RctDataset,
    pub validation: RctDataset,
    pub test: RctDataset,
}

pub fn fold_data(data: &RctDataset, pilot: &[usize], test: &[usize], config: &RunConfig, fold_seed: u64) -> Result<FoldData> {
    let (train, validation) = split(&data.select_subjects(pilot), config.train_fraction, fold_seed)?;
    let stats = fit_normalization(&train)?;
    Ok(FoldData {
        train: apply_normalization(&train, &stats)?,
        validation: apply_normalization(&validation, &stats)?,
        test: apply_normalization(&data.select_subjects(test), &stats)?,
    })
}

struct Ctx<'a> {
    config: &'a RunConfig,
    variant: Variant,
    fold: usize,
    fold_seed: u64,
    artifacts: BTreeMap<String, String>,
    files: Vec<(String, Vec<u8>)>,
}

impl Ctx<'_> {
    fn eval_options(&self, seed_value: u64, budget: Option<usize>) -> EvalOptions {
        EvalOptions {
            budget,
            n_boot: self.config.n_boot,
            level: self.config.confidence_level,
            seed: seed_value,
            variant: self.config.nrmsd_variant,
            ranges: None,
            max_replicates: 64,
        }
    }

    fn file(&mut self, name: String, bytes: Vec<u8>) {
        self.artifacts.insert(name.clone(), sha256_hex(&bytes));
        self.files.push((name, bytes));
    }
}

/// Evaluation errors that mean "nothing to score" rather than failure.
fn scoreable(r: Result<EvalReport>) -> Result<Option<EvalReport>> {
    match r {
        Ok(r) => Ok(Some(r)),
        Err(Error::Empty(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn deltas(metrik: &TestResult, baseline: &TestResult) -> Deltas {
    let d = |n: ScoreName| Some(metrik.point(n)? - baseline.point(n)?);
    Deltas {
        efficiency: metrik.efficiency - baseline.efficiency,
        nrmsd: d(ScoreName::NegNrmsd).map(|v| -v),
        pacc: d(ScoreName::Pacc),
        pmf1: d(ScoreName::Pmf1),
    }
}

/// A candidate in M* together with what is needed to re-evaluate it.
struct Pooled<'a> {
    imputer: &'a Imputer,
    pmd: Pmd,
    scored: ScoredCandidate,
}

fn run_kind(ctx: &mut Ctx<'_>, fd: &FoldData, kind: MetricKind, store: &ArtifactStore) -> Result<Option<KindReport>> {
    let (Some(train), Some(val), Some(test)) = (fd.train.kind_part(kind), fd.validation.kind_part(kind), fd.test.kind_part(kind))
    else {
        return Ok(None);
    };
    let config = ctx.config;
    let ktag = seed::tag(kind.as_str());
    let kname = kind.as_str();
    let prefix = format!("fold{}/{kname}", ctx.fold);

    let initial = initial_models(&train, &val, config, kind, ctx.fold_seed, store)?;
    let (learned, diverged) = match ctx.variant {
        // The ablation pool is filled with random designs below.
        Variant::RandomCandidatePool => (Vec::new(), Vec::new()),
        _ => learn_masks(&train, &initial, config, ctx.fold_seed, store)?,
    };
    let cands = CandidateSet {
        kind,
        initial,
        learned,
        diverged,
    };
    for m in &cands.initial {
        ctx.artifacts.insert(format!("{prefix}/initial/e{}/checkpoint", m.e), m.imputer_id.clone());
        ctx.artifacts.insert(format!("{prefix}/initial/e{}/reference_pmd", m.e), m.pmd_id.clone());
        ctx.artifacts.insert(format!("{prefix}/initial/e{}/train_report", m.e), m.report_id.clone());
    }
    for c in &cands.learned {
        ctx.artifacts.insert(format!("{prefix}/learned/{}/checkpoint", c.id()), c.imputer_id.clone());
        ctx.artifacts.insert(format!("{prefix}/learned/{}/pmd", c.id()), c.pmd_id.clone());
    }

    // Candidate pool M*, scored on the validation split.
    let mut pool_specs: Vec<(String, &Imputer, String, Pmd, String)> = Vec::new();
    match ctx.variant {
        Variant::RandomCandidatePool => {
            let slots = config.hyper_grid().len();
            for m in &cands.initial {
                let g = RsdGenerator::new(m.e, train.protocol().clone())?;
                for j in 0..slots {
                    let pmd = g.sample(&mut seed::rng_for(ctx.fold_seed, &[seed::tag("random-pool"), ktag, m.e_index as u64, j as u64]));
                    let pmd_id = sha256_hex(pmd.to_csv(&train.metric_names())?.as_bytes());
                    pool_specs.push((format!("{kname}:e{}:random{j}", m.e), &m.imputer, m.imputer_id.clone(), pmd, pmd_id));
                }
            }
        }
        _ => {
            for c in &cands.learned {
                pool_specs.push((c.id(), &c.imputer, c.imputer_id.clone(), c.pmd.clone(), c.pmd_id.clone()));
            }
        }
    }
    let fold_seed = ctx.fold_seed;
    let pool_reports: Vec<Option<EvalReport>> = pool_specs
        .par_iter()
        .enumerate()
        .map(|(i, (_, imputer, _, pmd, _))| {
            let opts = ctx.eval_options(seed::derive(fold_seed, &[seed::tag("val-candidate"), ktag, i as u64]), None);
            scoreable(evaluate_pair(*imputer, DesignSource::Fixed(&Design::Shared(pmd.clone())), &val, &opts))
        })
        .collect::<Result<_>>()?;
    let mut pool: Vec<Pooled<'_>> = Vec::new();
    for ((id, imputer, imputer_id, pmd, pmd_id), rep) in pool_specs.into_iter().zip(pool_reports) {
        if let Some(rep) = rep {
            let s = ScoredCandidate::from_report(&rep, id, &imputer_id, &pmd_id, kind, Origin::Learned);
            pool.push(Pooled { imputer, pmd, scored: s });
        }
    }

    let mut report = KindReport {
        kind,
        n_initial: cands.initial.len(),
        n_learned: pool.len(),
        diverged: cands.diverged.clone(),
        infeasible: Vec::new(),
        comparisons: Vec::new(),
    };

    for &strategy in &config.baselines {
        let stag = seed::tag(strategy.as_str());
        // Reference set M for this strategy, scored on validation.
        let mut refs: Vec<(usize, ScoredCandidate, crate::pmdgen::Feasible)> = Vec::new();
        for m in &cands.initial {
            let Some(feasible) = nearest_feasible(strategy, m.e, train.protocol())? else {
                report.infeasible.push(Infeasible {
                    strategy,
                    target: m.e,
                    reason: "no parameterization reaches this efficiency".into(),
                });
                continue;
            };
            let design = match strategy {
                Strategy::Rsd => Design::Shared(m.reference_pmd.clone()),
                _ => sample_baseline(
                    &feasible,
                    val.protocol(),
                    val.n_subjects(),
                    &mut seed::rng_for(fold_seed, &[seed::tag("val-baseline"), ktag, stag, m.e_index as u64]),
                )?,
            };
            let pmd_id = match &design {
                Design::Shared(_) => m.pmd_id.clone(),
                Design::PerSubject(v) => {
                    let names = val.metric_names();
                    let text: String = v.iter().map(|p| p.to_csv(&names)).collect::<Result<Vec<_>>>()?.concat();
                    sha256_hex(text.as_bytes())
                }
            };
            let opts = ctx.eval_options(seed::derive(fold_seed, &[seed::tag("val-reference"), ktag, stag, m.e_index as u64]), Some(config.test_budget));
            match scoreable(evaluate_pair(&m.imputer, DesignSource::Fixed(&design), &val, &opts))? {
                Some(rep) => {
                    let id = format!("{kname}:e{}:reference:{}", m.e, strategy.as_str());
                    refs.push((m.e_index, ScoredCandidate::from_report(&rep, id, &m.imputer_id, &pmd_id, kind, Origin::Reference), feasible));
                }
                None => report.infeasible.push(Infeasible {
                    strategy,
                    target: m.e,
                    reason: "baseline design skips no observed validation element".into(),
                }),
            }
        }
        if refs.is_empty() {
            continue;
        }
        let no_ci = ctx.variant == Variant::NoConfidenceIntervals;
        let gate = |c: &ScoredCandidate| if no_ci { c.without_intervals() } else { c.clone() };
        let ref_set: Vec<ScoredCandidate> = refs.iter().map(|r| gate(&r.1)).collect();
        let cand_set: Vec<ScoredCandidate> = pool.iter().map(|p| gate(&p.scored)).collect();
        let solutions = choose(&ref_set, &cand_set, config.objective)?;
        let rows = rank_report(&ref_set, &cand_set, config.objective);
        ctx.file(format!("{prefix}/{}_ranking.csv", strategy.as_str()), rank_report_csv(&rows)?.into_bytes());
        ctx.file(format!("{prefix}/{}_solutions.json", strategy.as_str()), solutions_json(&solutions)?.into_bytes());

        // Test-set comparison per reference.
        let tests: Vec<Result<Option<Comparison>>> = refs
            .par_iter()
            .zip(solutions.par_iter())
            .map(|((ei, reference, feasible), sol)| {
                let m = &cands.initial[*ei];
                let n_test = test.n_subjects();
                let draw = |r: u64| -> Result<Design> {
                    let mut rng = seed::rng_for(fold_seed, &[seed::tag("test-baseline"), ktag, stag, *ei as u64, r]);
                    sample_baseline(feasible, test.protocol(), n_test, &mut rng)
                };
                let opts = ctx.eval_options(seed::derive(fold_seed, &[seed::tag("test-baseline-eval"), ktag, stag, *ei as u64]), Some(config.test_budget));
                let Some(base) = scoreable(evaluate_pair(&m.imputer, DesignSource::Random(&draw), &test, &opts))? else {
                    return Ok(None);
                };
                let baseline = TestResult::from(&base);
                let metrik = if sol.fallback {
                    baseline.clone()
                } else {
                    let p = pool
                        .iter()
                        .find(|p| p.scored.id == sol.chosen.id)
                        .expect("chosen candidate comes from the pool");
                    let opts = ctx.eval_options(seed::derive(fold_seed, &[seed::tag("test-metrik"), ktag, stag, *ei as u64]), None);
                    match scoreable(evaluate_pair(p.imputer, DesignSource::Fixed(&Design::Shared(p.pmd.clone())), &test, &opts))? {
                        Some(r) => TestResult::from(&r),
                        None => return Err(Error::Numerical("learned design skips no observed test element".into())),
                    }
                };
                Ok(Some(Comparison {
                    strategy,
                    target: m.e,
                    reference_id: reference.id.clone(),
                    chosen_id: sol.chosen.id.clone(),
                    fallback: sol.fallback,
                    reference_validation: ref_set[refs.iter().position(|r| r.0 == *ei).expect("reference")].clone(),
                    chosen_validation: sol.chosen.clone(),
                    delta: deltas(&metrik, &baseline),
                    baseline,
                    metrik,
                }))
            })
            .collect();
        for (r, (ei, _, _)) in tests.into_iter().zip(&refs) {
            match r? {
                Some(c) => {
                    if !c.fallback {
                        if let Some(p) = pool.iter().find(|p| p.scored.id == c.chosen_id) {
                            let names = val.metric_names();
                            let stem = format!("{prefix}/viz/{}_e{}", strategy.as_str(), c.target);
                            ctx.file(format!("{stem}.svg"), visualize_pmd(&p.pmd, &names)?.into_bytes());
                            ctx.file(format!("{stem}.csv"), p.pmd.to_csv(&names)?.into_bytes());
                        }
                    }
                    report.comparisons.push(c);
                }
                None => report.infeasible.push(Infeasible {
                    strategy,
                    target: cands.initial[*ei].e,
                    reason: "baseline design skips no observed test element".into(),
                }),
            }
        }
    }
    Ok(Some(report))
}

fn aggregate(folds: &[FoldReport]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(u8, Strategy, u64), Vec<&Comparison>> = BTreeMap::new();
    let mut kinds = BTreeMap::new();
    for f in folds {
        for p in &f.parts {
            let k = u8::from(p.kind == MetricKind::Categorical);
            kinds.insert(k, p.kind);
            for c in &p.comparisons {
                groups.entry((k, c.strategy, c.target.to_bits())).or_default().push(c);
            }
        }
    }
    groups
        .into_iter()
        .map(|((k, strategy, target), cs)| {
            let col = |f: &dyn Fn(&Comparison) -> Option<f64>| Spread::of(&cs.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
            AggregateRow {
                kind: kinds[&k],
                strategy,
                target: f64::from_bits(target),
                n_folds: cs.len(),
                fallbacks: cs.iter().filter(|c| c.fallback).count(),
                efficiency: col(&|c| Some(c.delta.efficiency)).expect("non-empty group"),
                nrmsd: col(&|c| c.delta.nrmsd),
                pacc: col(&|c| c.delta.pacc),
                pmf1: col(&|c| c.delta.pmf1),
            }
        })
        .collect()
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Run one variant, writing reports under `out/<variant>/` and artifacts
/// under `out/store/`.
pub fn run_variant(data: &RctDataset, config: &RunConfig, out: &Path, variant: Variant) -> Result<RunReport> {
    config.validate()?;
    let plan = fold_subjects(data.n_subjects(), config)?;
    let store = ArtifactStore::open(out.join("store"))?;
    let dataset = dataset_digest(data);
    let config_hash = config.config_hash();
    let (folds, artifacts, files) = with_pool(config.workers, || -> Result<_> {
        let mut folds = Vec::new();
        let mut artifacts = BTreeMap::new();
        let mut files = Vec::new();
        for (f, (pilot, test)) in plan.iter().enumerate() {
            let fold_seed = seed::derive(config.seed, &[seed::tag("fold"), f as u64]);
            let fd = fold_data(data, pilot, test, config, fold_seed)?;
            let mut ctx = Ctx {
                config,
                variant,
                fold: f,
                fold_seed,
                artifacts: BTreeMap::new(),
                files: Vec::new(),
            };
            let mut parts = Vec::new();
            for kind in [MetricKind::Continuous, MetricKind::Categorical] {
                if let Some(r) = run_kind(&mut ctx, &fd, kind, &store)? {
                    parts.push(r);
                }
            }
            artifacts.append(&mut ctx.artifacts);
            files.append(&mut ctx.files);
            folds.push(FoldReport {
                fold: f,
                pilot_subjects: pilot.iter().map(|&i| data.subject_ids()[i].clone()).collect(),
                parts,
            });
        }
        Ok((folds, artifacts, files))
    })??;
    let any = folds.iter().any(|f| f.parts.iter().any(|p| !p.comparisons.is_empty()));
    let report = RunReport {
        variant,
        config_hash: config_hash.clone(),
        dataset: dataset.clone(),
        objective: config.objective,
        status: if any { RunStatus::Ok } else { RunStatus::InfeasibleOnly },
        aggregate: aggregate(&folds),
        folds,
    };
    let dir = out.join(variant.as_str());
    let mut artifacts = artifacts;
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::create_dir_all(path.parent().expect("file has a parent"))?;
        fs::write(path, bytes)?;
    }
    let mut report_bytes = serde_json::to_vec_pretty(&report)?;
    report_bytes.push(b'\n');
    artifacts.insert("report.json".into(), sha256_hex(&report_bytes));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.json"), &report_bytes)?;
    let manifest = Manifest {
        variant,
        config_hash,
        dataset,
        artifacts,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), manifest_bytes)?;
    Ok(report)
}

pub fn run_experiment(data: &RctDataset, config: &RunConfig, out: &Path) -> Result<RunReport> {
    run_variant(data, config, out, Variant::Full)
}

pub fn ablate(data: &RctDataset, config: &RunConfig, out: &Path, mode: AblationMode) -> Result<RunReport> {
    let variant = match mode {
        AblationMode::RandomCandidatePool => Variant::RandomCandidatePool,
        AblationMode::NoConfidenceIntervals => Variant::NoConfidenceIntervals,
    };
    run_variant(data, config, out, variant)
}
