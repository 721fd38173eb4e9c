//! Pipeline-level criteria: degenerate recovery, dominance over RSD,
//! ablation directions and reproducibility.

use std::fs;
use std::path::Path;

use pmdlearn::dataset::{synthesize, SynthConfig};
use pmdlearn::eval::{evaluate_pair, DesignSource, EvalOptions, NrmsdVariant, PerfScore, ScoreName};
use pmdlearn::masklayer::ETA_GRID;
use pmdlearn::pipeline::{
    ablate, fold_data, fold_subjects, generate_candidates, run_experiment, AblationMode, ArtifactStore, Comparison,
    RunConfig, RunReport,
};
use pmdlearn::pmdgen::{Design, RsdGenerator};
use pmdlearn::{seed, ImputerConfig, MetricKind, Strategy};

/// Continuous imputer trained on minibatches of eight subjects.
fn minibatch_imputer() -> ImputerConfig {
    ImputerConfig {
        full_batch_limit: 0,
        minibatch_size: 8,
        ..ImputerConfig::for_kind(MetricKind::Continuous)
    }
}

pub fn degenerate_recovery() -> (bool, String) {
    let data = synthesize(
        &SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        },
        11,
    )
    .expect("synthesize");
    let config = RunConfig {
        efficiency_grid: vec![0.3],
        lambda_grid: vec![1e-5],
        eta_grid: ETA_GRID.to_vec(),
        continuous: minibatch_imputer(),
        epochs: Some(600),
        mask_epochs: Some(300),
        seed: 1,
        ..RunConfig::default()
    };
    let (pilot, test) = fold_subjects(data.n_subjects(), &config).expect("folds").swap_remove(0);
    let fd = fold_data(&data, &pilot, &test, &config, 5).expect("fold data");
    let dir = tempfile::tempdir().expect("tempdir");
    let store = ArtifactStore::open(dir.path()).expect("store");
    let set = generate_candidates(&fd.train, &fd.validation, &config, MetricKind::Continuous, 9, &store)
        .expect("candidates");

    let generator = RsdGenerator::new(0.3, fd.test.protocol().clone()).expect("generator");
    let n = fd.test.n_subjects();
    let draw = |r: u64| -> pmdlearn::Result<Design> {
        let mut rng = seed::rng_for(3, &[r]);
        Ok(Design::PerSubject((0..n).map(|_| generator.sample(&mut rng)).collect()))
    };
    let score = |variant| {
        let options = EvalOptions {
            n_boot: 200,
            variant,
            ..EvalOptions::default()
        };
        let r = evaluate_pair(&set.initial[0].imputer, DesignSource::Random(&draw), &fd.test, &options)
            .expect("evaluate");
        -r.score(ScoreName::NegNrmsd).expect("nRMSD").point
    };
    let squared = score(NrmsdVariant::Squared);
    let printed = score(NrmsdVariant::Printed);
    let best = set.learned.iter().map(|c| c.efficiency).fold(0.0, f64::max);
    (
        squared < 0.05 && best > 0.30,
        format!(
            "test nRMSD {squared:.4} (root mean squared; square root of mean absolute {printed:.4}), \
             best learned efficiency {best:.3} over {} candidates",
            set.learned.len()
        ),
    )
}

/// Configuration shared by the dominance and ablation criteria.
pub fn dominance_config() -> RunConfig {
    RunConfig {
        efficiency_grid: vec![0.05, 0.30],
        lambda_grid: vec![1e-5],
        eta_grid: ETA_GRID.to_vec(),
        baselines: vec![Strategy::Rsd],
        continuous: minibatch_imputer(),
        epochs: Some(600),
        mask_epochs: Some(300),
        n_boot: 1000,
        seed: 3,
        ..RunConfig::default()
    }
}

/// Blocks of uneven size, down to single metrics that only their own
/// history can predict.
pub fn dominance_data() -> pmdlearn::RctDataset {
    synthesize(
        &SynthConfig {
            block_sizes: vec![8, 6, 4, 2, 1, 1, 1, 1],
            ..SynthConfig::default()
        },
        7,
    )
    .expect("synthesize")
}

fn score_of(scores: &[PerfScore], name: ScoreName) -> Option<&PerfScore> {
    scores.iter().find(|s| s.name == name)
}

/// Fallback, or a learned pair that is more efficient on test and whose
/// test scores trail the baseline's by no more than the reference's
/// validation interval width.
pub fn acceptable(c: &Comparison) -> bool {
    if c.fallback {
        return true;
    }
    c.metrik.efficiency > c.baseline.efficiency
        && c.reference_validation.scores.iter().all(|r| {
            let width = r.upper - r.lower;
            match (score_of(&c.metrik.scores, r.name), score_of(&c.baseline.scores, r.name)) {
                (Some(m), Some(b)) => m.point >= b.point - width,
                _ => false,
            }
        })
}

fn rsd_at(report: &RunReport, target: f64) -> Vec<&Comparison> {
    report
        .comparisons()
        .map(|(_, c)| c)
        .filter(|c| c.strategy == Strategy::Rsd && c.target == target)
        .collect()
}

pub fn dominance(full: &RunReport) -> (bool, String) {
    let mut pass = true;
    let mut notes = Vec::new();
    for target in [0.05, 0.30] {
        let rows = rsd_at(full, target);
        let ok = rows.iter().filter(|c| acceptable(c)).count();
        let chosen = rows.iter().filter(|c| !c.fallback).count();
        pass &= rows.len() == 5 && ok >= 4;
        if target == 0.05 {
            pass &= chosen >= 3;
        }
        notes.push(format!("{:.0}%: {ok}/{} acceptable, {chosen} non-fallback", target * 100.0, rows.len()));
    }
    (pass, notes.join("; "))
}

fn mean_emitted(report: &RunReport, target: f64) -> f64 {
    let rows = rsd_at(report, target);
    rows.iter().map(|c| c.metrik.efficiency).sum::<f64>() / rows.len().max(1) as f64
}

fn fallback_rate(report: &RunReport) -> f64 {
    let rows: Vec<_> = report.comparisons().collect();
    rows.iter().filter(|(_, c)| c.fallback).count() as f64 / rows.len().max(1) as f64
}

/// Some comparison whose chosen design scores below the baseline's test
/// point estimate.
fn hurts_performance(report: &RunReport) -> bool {
    report.comparisons().any(|(_, c)| {
        c.baseline
            .scores
            .iter()
            .any(|b| score_of(&c.metrik.scores, b.name).is_some_and(|m| m.point < b.point))
    })
}

pub fn ablation_directions(full: &RunReport, no_ci: &RunReport, random: &RunReport) -> (bool, String) {
    let (e_full, e_no_ci) = (mean_emitted(full, 0.05), mean_emitted(no_ci, 0.05));
    let hurt = hurts_performance(no_ci);
    let (f_full, f_random) = (fallback_rate(full), fallback_rate(random));
    (
        e_no_ci >= e_full && hurt && f_random >= f_full,
        format!(
            "5% mean emitted efficiency {e_no_ci:.3} without intervals vs {e_full:.3} full; \
             performance drop seen: {hurt}; fallback rate {f_random:.2} random pool vs {f_full:.2} full"
        ),
    )
}

/// Full run plus both ablations sharing one artifact store.
pub fn dominance_runs(out: &Path) -> (RunReport, RunReport, RunReport) {
    let data = dominance_data();
    let config = dominance_config();
    let full = run_experiment(&data, &config, out).expect("full run");
    let no_ci = ablate(&data, &config, out, AblationMode::NoConfidenceIntervals).expect("no-CI run");
    let random = ablate(&data, &config, out, AblationMode::RandomCandidatePool).expect("random-pool run");
    (full, no_ci, random)
}

/// Small mixed-kind configuration that still touches every stage.
pub fn tiny_run_config(workers: usize) -> RunConfig {
    let mut config = RunConfig {
        efficiency_grid: vec![0.3],
        lambda_grid: vec![1e-5],
        eta_grid: vec![1.0],
        folds: 2,
        pilot_size: 20,
        epochs: Some(20),
        mask_epochs: Some(10),
        n_boot: 50,
        test_budget: 500,
        seed: 17,
        workers,
        ..RunConfig::default()
    };
    for c in [&mut config.continuous, &mut config.categorical] {
        c.n_blocks = 1;
        c.n_heads = 2;
        c.d_model = 8;
        c.d_ff = 16;
        c.validation_every = 5;
    }
    config
}

pub fn tiny_data() -> pmdlearn::RctDataset {
    synthesize(
        &SynthConfig {
            n_subjects: 30,
            n_timepoints: 5,
            n_metrics: 8,
            block_sizes: vec![4, 4],
            categorical_fraction: 0.5,
            ..SynthConfig::default()
        },
        21,
    )
    .expect("synthesize")
}

pub fn reproducibility() -> (bool, String) {
    let data = tiny_data();
    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    for (dir, workers) in dirs.iter().zip([1, 3]) {
        run_experiment(&data, &tiny_run_config(workers), dir.path()).expect("run");
    }
    let mut same = true;
    let mut notes = Vec::new();
    for name in ["report.json", "manifest.json"] {
        let read = |d: &tempfile::TempDir| fs::read(d.path().join("full").join(name)).expect("output file");
        let equal = read(&dirs[0]) == read(&dirs[1]);
        same &= equal;
        notes.push(format!("{name} {}", if equal { "identical" } else { "differs" }));
    }
    (same, format!("workers 1 vs 3: {}", notes.join(", ")))
}
