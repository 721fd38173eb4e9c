use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::store::{dataset_digest, task_key, ArtifactStore};
use super::RunConfig;
use crate::dataset::{MetricKind, RctDataset};
use crate::error::{Error, Result};
use crate::imputer::{read_checkpoint, train_mvts, write_checkpoint, Imputer, TrainReport};
use crate::masklayer::{train_masked_imputer, MaskHyperparams, MaskTraining};
use crate::pmdgen::{Pmd, RsdGenerator};
use crate::seed;

/// An initial imputer `m_e` and the RSD design sampled alongside it.
#[derive(Clone, Debug)]
pub struct InitialModel {
    pub e: f64,
    pub e_index: usize,
    pub imputer: Imputer,
    pub imputer_id: String,
    pub reference_pmd: Pmd,
    pub pmd_id: String,
    pub report_id: String,
    pub report: TrainReport,
}

#[derive(Clone, Debug)]
pub struct LearnedCandidate {
    pub e: f64,
    pub e_index: usize,
    pub hyper: MaskHyperparams,
    pub hyper_index: usize,
    pub imputer: Imputer,
    pub imputer_id: String,
    pub pmd: Pmd,
    pub pmd_id: String,
    /// Efficiency of the learned design on the protocol.
    pub efficiency: f64,
}

impl LearnedCandidate {
    pub fn id(&self) -> String {
        format!("{}:e{}:lambda{}:eta{}", self.imputer.shape().kind.as_str(), self.e, self.hyper.lambda_mw, self.hyper.eta)
    }
}

#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub kind: MetricKind,
    pub initial: Vec<InitialModel>,
    pub learned: Vec<LearnedCandidate>,
    /// Mask-learning runs dropped after diverging.
    pub diverged: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct InitialRecord {
    checkpoint: String,
    reference_pmd: String,
    report: String,
}

#[derive(Serialize, Deserialize)]
struct LearnedRecord {
    checkpoint: String,
    pmd: String,
    efficiency: f64,
}

fn checkpoint_bytes(model: &Imputer) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    Ok(bytes)
}

fn load_pmd(store: &ArtifactStore, id: &str) -> Result<Pmd> {
    let text = String::from_utf8(store.get(id)?).map_err(|e| Error::data(e.to_string()))?;
    Ok(Pmd::from_csv(&text)?.0)
}

#[allow(clippy::too_many_arguments)]
fn initial_model(
    train: &RctDataset,
    val: &RctDataset,
    config: &RunConfig,
    kind: MetricKind,
    e_index: usize,
    base_seed: u64,
    digests: &(String, String),
    store: &ArtifactStore,
) -> Result<InitialModel> {
    let e = config.efficiency_grid[e_index];
    let imputer_config = config.imputer_config(kind);
    let kind_tag = seed::tag(kind.as_str());
    let train_seed = seed::derive(base_seed, &[seed::tag("initial"), kind_tag, e_index as u64]);
    let pmd_seed = seed::derive(base_seed, &[seed::tag("reference-pmd"), kind_tag, e_index as u64]);
    let key = task_key(&json!({
        "task": "initial",
        "train": digests.0,
        "validation": digests.1,
        "config": imputer_config,
        "e": e,
        "seed": train_seed,
        "pmd_seed": pmd_seed,
    }));
    if let Some(rec) = store.lookup_task::<InitialRecord>(&key) {
        let imputer = read_checkpoint(store.get(&rec.checkpoint)?.as_slice())?;
        return Ok(InitialModel {
            e,
            e_index,
            imputer,
            imputer_id: rec.checkpoint,
            reference_pmd: load_pmd(store, &rec.reference_pmd)?,
            pmd_id: rec.reference_pmd,
            report: store.get_json(&rec.report)?,
            report_id: rec.report,
        });
    }
    let generator = RsdGenerator::new(e, train.protocol().clone())?;
    let (imputer, report) = train_mvts(train, Some(val), &imputer_config, &generator, train_seed)?;
    let reference_pmd = generator.sample(&mut seed::rng(pmd_seed));
    let imputer_id = store.put(&checkpoint_bytes(&imputer)?)?;
    let pmd_id = store.put(reference_pmd.to_csv(&train.metric_names())?.as_bytes())?;
    let report_id = store.put_json(&report)?;
    store.record_task(
        &key,
        &InitialRecord {
            checkpoint: imputer_id.clone(),
            reference_pmd: pmd_id.clone(),
            report: report_id.clone(),
        },
    )?;
    Ok(InitialModel {
        e,
        e_index,
        imputer,
        imputer_id,
        reference_pmd,
        pmd_id,
        report_id,
        report,
    })
}

fn learned_candidate(
    train: &RctDataset,
    initial: &InitialModel,
    config: &RunConfig,
    hyper_index: usize,
    base_seed: u64,
    train_digest: &str,
    store: &ArtifactStore,
) -> Result<Option<LearnedCandidate>> {
    let kind = initial.imputer.shape().kind;
    let hypers = config.hyper_grid();
    let hyper = hypers[hyper_index];
    let training = MaskTraining {
        e: initial.e,
        hyper,
        epochs: config.mask_epochs_for(kind),
    };
    let mask_seed = seed::derive(
        base_seed,
        &[seed::tag("mask"), seed::tag(kind.as_str()), initial.e_index as u64, hyper_index as u64],
    );
    let key = task_key(&json!({
        "task": "mask",
        "train": train_digest,
        "initial": initial.imputer_id,
        "training": training,
        "seed": mask_seed,
    }));
    let make = |imputer: Imputer, imputer_id: String, pmd: Pmd, pmd_id: String, efficiency: f64| LearnedCandidate {
        e: initial.e,
        e_index: initial.e_index,
        hyper,
        hyper_index,
        imputer,
        imputer_id,
        pmd,
        pmd_id,
        efficiency,
    };
    if let Some(rec) = store.lookup_task::<LearnedRecord>(&key) {
        let imputer = read_checkpoint(store.get(&rec.checkpoint)?.as_slice())?;
        let pmd = load_pmd(store, &rec.pmd)?;
        return Ok(Some(make(imputer, rec.checkpoint, pmd, rec.pmd, rec.efficiency)));
    }
    match train_masked_imputer(&initial.imputer, &training, train, mask_seed) {
        Ok(out) => {
            let imputer_id = store.put(&checkpoint_bytes(&out.imputer)?)?;
            let pmd_id = store.put(out.pmd.to_csv(&train.metric_names())?.as_bytes())?;
            store.record_task(
                &key,
                &LearnedRecord {
                    checkpoint: imputer_id.clone(),
                    pmd: pmd_id.clone(),
                    efficiency: out.efficiency,
                },
            )?;
            Ok(Some(make(out.imputer, imputer_id, out.pmd, pmd_id, out.efficiency)))
        }
        Err(Error::Diverged { epoch, .. }) => {
            log::warn!(
                "mask learning diverged at epoch {epoch} (e = {}, lambda = {}, eta = {}); candidate dropped",
                initial.e,
                hyper.lambda_mw,
                hyper.eta
            );
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Train `m_e` for every grid efficiency.
pub fn initial_models(
    train: &RctDataset,
    val: &RctDataset,
    config: &RunConfig,
    kind: MetricKind,
    base_seed: u64,
    store: &ArtifactStore,
) -> Result<Vec<InitialModel>> {
    config.validate()?;
    let digests = (dataset_digest(train), dataset_digest(val));
    (0..config.efficiency_grid.len())
        .into_par_iter()
        .map(|ei| initial_model(train, val, config, kind, ei, base_seed, &digests, store))
        .collect()
}

/// Mask-learn every (e, λ, η) combination from the matching `m_e`.
/// Diverged runs are dropped and listed in the second return value.
pub fn learn_masks(
    train: &RctDataset,
    initial: &[InitialModel],
    config: &RunConfig,
    base_seed: u64,
    store: &ArtifactStore,
) -> Result<(Vec<LearnedCandidate>, Vec<String>)> {
    let train_digest = dataset_digest(train);
    let hypers = config.hyper_grid();
    let jobs: Vec<(usize, usize)> = (0..initial.len())
        .flat_map(|ei| (0..hypers.len()).map(move |hi| (ei, hi)))
        .collect();
    let results: Vec<Option<LearnedCandidate>> = jobs
        .par_iter()
        .map(|&(ei, hi)| learned_candidate(train, &initial[ei], config, hi, base_seed, &train_digest, store))
        .collect::<Result<_>>()?;
    let mut learned = Vec::new();
    let mut diverged = Vec::new();
    for ((ei, hi), r) in jobs.into_iter().zip(results) {
        match r {
            Some(c) => learned.push(c),
            None => {
                let m = &initial[ei];
                let h = hypers[hi];
                diverged.push(format!("{}:e{}:lambda{}:eta{}", m.imputer.shape().kind.as_str(), m.e, h.lambda_mw, h.eta));
            }
        }
    }
    Ok((learned, diverged))
}

/// Initial models followed by mask learning.
pub fn generate_candidates(
    train: &RctDataset,
    val: &RctDataset,
    config: &RunConfig,
    kind: MetricKind,
    base_seed: u64,
    store: &ArtifactStore,
) -> Result<CandidateSet> {
    let initial = initial_models(train, val, config, kind, base_seed, store)?;
    let (learned, diverged) = learn_masks(train, &initial, config, base_seed, store)?;
    Ok(CandidateSet {
        kind,
        initial,
        learned,
        diverged,
    })
}
