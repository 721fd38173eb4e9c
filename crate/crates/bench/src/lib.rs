//! Fixtures shared by the benchmarks.

use ndarray::Array3;
use pmdlearn::dataset::MetricKind;
use pmdlearn::eval::{MaskedElement, MaskedElementSet, PerfScore, ScoreName};
use pmdlearn::imputer::{Imputer, ImputerConfig, ImputerShape};
use pmdlearn::select::{Origin, ScoredCandidate};
use pmdlearn::seed;
use rand::Rng;

/// Default-size continuous imputer with a random batch and visibility mask.
pub fn imputer_batch(n_subjects: usize) -> (Imputer, Array3<f64>, Array3<f64>) {
    let (n_t, n_m) = (6, 24);
    let model = Imputer::new(
        ImputerConfig::for_kind(MetricKind::Continuous),
        ImputerShape::continuous(n_t, n_m),
        1,
    )
    .expect("valid config");
    let mut rng = seed::rng(2);
    let batch = Array3::from_shape_simple_fn((n_subjects, n_t, n_m), || rng.random::<f64>());
    let vis = Array3::from_shape_simple_fn((n_subjects, n_t, n_m), || f64::from(u8::from(rng.random::<f64>() < 0.7)));
    (model, batch, vis)
}

/// Continuous masked elements: `n_subjects` subjects with `per_subject` each.
pub fn element_set(n_subjects: usize, per_subject: usize) -> MaskedElementSet {
    let mut rng = seed::rng(3);
    let n_m = 24;
    let elements = (0..n_subjects)
        .flat_map(|s| (0..per_subject).map(move |i| (s, i)))
        .map(|(subject, i)| MaskedElement {
            subject,
            timepoint: i % 6,
            metric: i % n_m,
            prediction: rng.random(),
            target: rng.random(),
        })
        .collect();
    MaskedElementSet {
        kind: MetricKind::Continuous,
        elements,
        ranges: vec![1.0; n_m],
    }
}

/// References and candidates with random continuous scores.
pub fn scored_sets(n_refs: usize, n_cands: usize) -> (Vec<ScoredCandidate>, Vec<ScoredCandidate>) {
    let mut rng = seed::rng(4);
    let mut make = |id: String, origin: Origin| {
        let point = -rng.random::<f64>();
        let half = 0.05 * rng.random::<f64>();
        ScoredCandidate {
            id,
            imputer_id: String::new(),
            pmd_id: String::new(),
            efficiency: rng.random(),
            kind: MetricKind::Continuous,
            scores: vec![PerfScore {
                name: ScoreName::NegNrmsd,
                point,
                lower: point - half,
                upper: point + half,
                degenerate: false,
            }],
            origin,
            per_metric: Vec::new(),
        }
    };
    let refs = (0..n_refs).map(|i| make(format!("r{i}"), Origin::Reference)).collect();
    let cands = (0..n_cands).map(|i| make(format!("c{i}"), Origin::Learned)).collect();
    (refs, cands)
}
