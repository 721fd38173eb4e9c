//! Command-line front end: one subcommand per pipeline stage plus full runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pmdlearn::dataset::{
    fit_normalization, apply_normalization, ingest_csv, preprocess, read_snapshot, split, synthesize, write_snapshot,
    IngestMetadata, SynthConfig,
};
use pmdlearn::eval::{evaluate_pair, DesignSource, EvalOptions};
use pmdlearn::imputer::{load_checkpoint, save_checkpoint};
use pmdlearn::pipeline::{
    ablate, initial_models, learn_masks, run_experiment, visualize_pmd, AblationMode, ArtifactStore, RunConfig,
    RunReport, RunStatus,
};
use pmdlearn::select::{choose, rank_report, rank_report_csv, solutions_json, Objective, Origin, ScoredCandidate};
use pmdlearn::{Design, Error, MetricKind, Pmd, RctDataset};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pmdlearn", version, about = "Learn planned-missing designs from pilot trial data")]
struct Cli {
    /// Run configuration (JSON); omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Worker threads (0 = all cores). METRIK_WORKERS overrides this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    MaxEff,
    MaxPerf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    NoConfidenceIntervals,
    RandomCandidatePool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trial and write it as a snapshot.
    Synth {
        /// Generator parameters (JSON).
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Read a long-format CSV and its metadata into a snapshot.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
    },
    /// Normalize a snapshot with its own statistics.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one imputer per grid efficiency on a normalized snapshot.
    TrainInitial {
        #[arg(long)]
        data: PathBuf,
    },
    /// Learn masks for every grid point, training initial imputers as needed.
    LearnMasks {
        #[arg(long)]
        data: PathBuf,
    },
    /// Choose among scored candidates for each reference.
    Select {
        /// Files holding one scored candidate or an array of them.
        #[arg(long, num_args = 1.., required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        references: Vec<PathBuf>,
    },
    /// Score an imputer checkpoint under a design on a normalized snapshot.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pmd: PathBuf,
        /// Identifier recorded in the scored-candidate output.
        #[arg(long, default_value = "candidate")]
        id: String,
        /// Mark the output as a reference rather than a candidate.
        #[arg(long)]
        reference: bool,
    },
    /// Full k-fold experiment.
    Run {
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an ablated variant of the experiment.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Render a design CSV as SVG.
    Viz {
        #[arg(long)]
        pmd: PathBuf,
    },
}

enum Failure {
    Lib(Error),
    InfeasibleOnly,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_json(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = cli.objective {
        config.objective = match o {
            ObjectiveArg::MaxEff => Objective::MaxEfficiency,
            ObjectiveArg::MaxPerf => Objective::MaxPerformance,
        };
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    if let Ok(w) = std::env::var("METRIK_WORKERS") {
        config.workers = w
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("METRIK_WORKERS={w:?} is not a worker count")))?;
    }
    config.validate()?;
    Ok(config)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn normalized(path: &Path) -> Result<RctDataset, Error> {
    let data = read_snapshot(path)?;
    if !data.is_preprocessed() {
        return Err(Error::Config(format!(
            "{} is not normalized; run `preprocess` on it first",
            path.display()
        )));
    }
    Ok(data)
}

fn read_pmd(path: &Path) -> Result<(Pmd, Vec<String>), Error> {
    Pmd::from_csv(&fs::read_to_string(path)?)
}

/// Pilot split into train and validation parts, per metric kind.
fn pilot_parts(data: &RctDataset, config: &RunConfig) -> Result<Vec<(MetricKind, RctDataset, RctDataset)>, Error> {
    let (train, val) = split(data, config.train_fraction, config.seed)?;
    // Re-fit on the training part only when the snapshot is still raw.
    let (train, val) = if train.is_preprocessed() {
        (train, val)
    } else {
        let stats = fit_normalization(&train)?;
        (apply_normalization(&train, &stats)?, apply_normalization(&val, &stats)?)
    };
    let mut parts = Vec::new();
    for kind in [MetricKind::Continuous, MetricKind::Categorical] {
        if let (Some(t), Some(v)) = (train.kind_part(kind), val.kind_part(kind)) {
            parts.push((kind, t, v));
        }
    }
    Ok(parts)
}

fn train_initial(cli: &Cli, data: &Path, masks: bool) -> Outcome {
    let config = resolve_config(cli)?;
    let data = normalized(data)?;
    let store = ArtifactStore::open(cli.out.join("store"))?;
    let mut initial_rows = Vec::new();
    let mut learned_rows = Vec::new();
    let mut diverged_all = Vec::new();
    let mut n_learned = 0;
    for (kind, train, val) in pilot_parts(&data, &config)? {
        let names = train.metric_names();
        let initial = initial_models(&train, &val, &config, kind, config.seed, &store)?;
        for m in &initial {
            let stem = format!("{}_e{}", kind.as_str(), m.e);
            let ckpt = cli.out.join("initial").join(format!("{stem}.ckpt"));
            let pmd = cli.out.join("initial").join(format!("{stem}_reference.csv"));
            fs::create_dir_all(cli.out.join("initial"))?;
            save_checkpoint(&m.imputer, &ckpt)?;
            fs::write(&pmd, m.reference_pmd.to_csv(&names)?)?;
            initial_rows.push(json!({
                "kind": kind, "e": m.e, "checkpoint": ckpt, "reference_pmd": pmd,
                "validation": m.report.validation.last(),
            }));
        }
        if masks {
            let (learned, diverged) = learn_masks(&train, &initial, &config, config.seed, &store)?;
            fs::create_dir_all(cli.out.join("learned"))?;
            for c in &learned {
                let stem = format!("{}_e{}_lambda{:e}_eta{:e}", kind.as_str(), c.e, c.hyper.lambda_mw, c.hyper.eta);
                let ckpt = cli.out.join("learned").join(format!("{stem}.ckpt"));
                let pmd = cli.out.join("learned").join(format!("{stem}.csv"));
                save_checkpoint(&c.imputer, &ckpt)?;
                fs::write(&pmd, c.pmd.to_csv(&names)?)?;
                learned_rows.push(json!({
                    "id": c.id(), "kind": kind, "e": c.e, "lambda_mw": c.hyper.lambda_mw, "eta": c.hyper.eta,
                    "efficiency": c.efficiency, "checkpoint": ckpt, "pmd": pmd,
                }));
            }
            for d in &diverged {
                log::warn!("mask learning diverged for {d}");
            }
            n_learned += learned.len();
            diverged_all.extend(diverged);
        }
    }
    write_json(&cli.out.join("initial.json"), &initial_rows)?;
    if masks {
        write_json(&cli.out.join("learned.json"), &json!({ "learned": learned_rows, "diverged": diverged_all }))?;
        if n_learned == 0 && !diverged_all.is_empty() {
            return Err(Error::Numerical("every mask-learning run diverged".into()).into());
        }
    }
    Ok(())
}

fn read_scored(paths: &[PathBuf]) -> Result<Vec<ScoredCandidate>, Error> {
    let mut out = Vec::new();
    for p in paths {
        let value: serde_json::Value = serde_json::from_slice(&fs::read(p)?)?;
        let parsed = if value.is_array() {
            serde_json::from_value::<Vec<ScoredCandidate>>(value)
        } else {
            serde_json::from_value::<ScoredCandidate>(value).map(|c| vec![c])
        };
        out.extend(parsed.map_err(|e| Error::Config(format!("{}: {e}", p.display())))?);
    }
    Ok(out)
}

fn select(cli: &Cli, candidates: &[PathBuf], references: &[PathBuf]) -> Outcome {
    let config = resolve_config(cli)?;
    let candidates = read_scored(candidates)?;
    let references = read_scored(references)?;
    let solutions = choose(&references, &candidates, config.objective)?;
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join("solutions.json"), solutions_json(&solutions)?)?;
    let rows = rank_report(&references, &candidates, config.objective);
    fs::write(cli.out.join("ranking.csv"), rank_report_csv(&rows)?)?;
    for s in &solutions {
        println!(
            "{} -> {}{}",
            s.reference_id,
            s.chosen.id,
            if s.fallback { " (fallback)" } else { "" }
        );
    }
    Ok(())
}

fn evaluate(cli: &Cli, data: &Path, checkpoint: &Path, pmd: &Path, id: &str, reference: bool) -> Outcome {
    let config = resolve_config(cli)?;
    let model = load_checkpoint(checkpoint)?;
    let kind = model.shape().kind;
    let data = normalized(data)?
        .kind_part(kind)
        .ok_or_else(|| Error::Config(format!("dataset has no {} metrics", kind.as_str())))?;
    let (design, names) = read_pmd(pmd)?;
    if names != data.metric_names() {
        return Err(Error::Config("design columns do not match the dataset's metrics".into()).into());
    }
    let options = EvalOptions {
        n_boot: config.n_boot,
        level: config.confidence_level,
        seed: config.seed,
        variant: config.nrmsd_variant,
        budget: None,
        ..EvalOptions::default()
    };
    let design = Design::Shared(design);
    let report = evaluate_pair(&model, DesignSource::Fixed(&design), &data, &options)?;
    let origin = if reference { Origin::Reference } else { Origin::Learned };
    let scored = ScoredCandidate::from_report(
        &report,
        id.to_string(),
        &checkpoint.display().to_string(),
        &pmd.display().to_string(),
        kind,
        origin,
    );
    write_json(&cli.out.join("evaluation.json"), &report)?;
    write_json(&cli.out.join(format!("{id}.scored.json")), &scored)?;
    for s in &report.scores {
        println!("{} {:.6} [{:.6}, {:.6}]", s.name.as_str(), s.point, s.lower, s.upper);
    }
    println!("efficiency {:.6}", report.efficiency);
    Ok(())
}

fn finish(report: &RunReport) -> Outcome {
    for row in &report.aggregate {
        println!(
            "{} {} e={}: median efficiency {:.3}, {} of {} folds fell back",
            row.kind.as_str(),
            row.strategy.as_str(),
            row.target,
            row.efficiency.median,
            row.fallbacks,
            row.n_folds
        );
    }
    match report.status {
        RunStatus::Ok => Ok(()),
        RunStatus::InfeasibleOnly => Err(Failure::InfeasibleOnly),
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Synth { params } => {
            let params: SynthConfig = match params {
                Some(p) => serde_json::from_slice(&fs::read(p)?).map_err(|e| Error::Config(e.to_string()))?,
                None => SynthConfig::default(),
            };
            let config = resolve_config(cli)?;
            write_snapshot(&synthesize(&params, config.seed)?, &cli.out)?;
            Ok(())
        }
        Command::Ingest { csv, metadata } => {
            let meta: IngestMetadata =
                serde_json::from_slice(&fs::read(metadata)?).map_err(|e| Error::Config(e.to_string()))?;
            let report = ingest_csv(fs::File::open(csv)?, &meta)?;
            write_snapshot(&report.dataset, &cli.out)?;
            for d in &report.dropped {
                log::warn!("dropped metric {}: {}", d.name, d.reason);
            }
            write_json(&cli.out.join("dropped.json"), &report.dropped)?;
            Ok(())
        }
        Command::Preprocess { data } => {
            write_snapshot(&preprocess(&read_snapshot(data)?)?, &cli.out)?;
            Ok(())
        }
        Command::TrainInitial { data } => train_initial(cli, data, false),
        Command::LearnMasks { data } => train_initial(cli, data, true),
        Command::Select { candidates, references } => select(cli, candidates, references),
        Command::Evaluate {
            data,
            checkpoint,
            pmd,
            id,
            reference,
        } => evaluate(cli, data, checkpoint, pmd, id, *reference),
        Command::Run { data } => {
            let config = resolve_config(cli)?;
            finish(&run_experiment(&read_snapshot(data)?, &config, &cli.out)?)
        }
        Command::Ablate { data, mode } => {
            let config = resolve_config(cli)?;
            let mode = match mode {
                ModeArg::NoConfidenceIntervals => AblationMode::NoConfidenceIntervals,
                ModeArg::RandomCandidatePool => AblationMode::RandomCandidatePool,
            };
            finish(&ablate(&read_snapshot(data)?, &config, &cli.out, mode)?)
        }
        Command::Viz { pmd } => {
            let (design, names) = read_pmd(pmd)?;
            let svg = visualize_pmd(&design, &names)?;
            fs::create_dir_all(&cli.out)?;
            let stem = pmd.file_stem().map_or("pmd".into(), |s| s.to_string_lossy().into_owned());
            fs::write(cli.out.join(format!("{stem}.svg")), svg)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::InfeasibleOnly) => {
            eprintln!("error: every baseline/efficiency combination was infeasible");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Numerical(_) | Error::Diverged { .. } => 4,
                _ => 1,
            })
        }
    }
}
