mod common;

use common::*;
use ndarray::Array2;
use pmdlearn::dataset::MetricKind;
use pmdlearn::imputer::ImputerShape;
use pmdlearn::masklayer::{sigmoid, train_masked_imputer, LearnableMask, MaskHyperparams, MaskTraining};
use pmdlearn::seed;
use proptest::prelude::*;
use rand::Rng as _;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn learned_design_matches_keep_probabilities(s in any::<u64>()) {
        let mut rng = seed::rng(s);
        let protocol = random_protocol(&mut rng, 4, 6, 0.7);
        let logits = Array2::from_shape_simple_fn((4, 6), || rng.random_range(-3.0..3.0));
        let mask = LearnableMask::from_logits(logits.clone(), &protocol).unwrap();
        let pmd = mask.pmd();
        let mut dropped = 0usize;
        for ((t, m), &l) in logits.indexed_iter() {
            if protocol.is_eligible(t, m) {
                prop_assert_eq!(pmd.collects(t, m), sigmoid(l) >= 0.5);
                dropped += usize::from(sigmoid(l) < 0.5);
            } else {
                prop_assert!(pmd.collects(t, m));
            }
        }
        let expected = dropped as f64 / protocol.n_eligible() as f64;
        prop_assert!((pmd.efficiency(&protocol).unwrap() - expected).abs() < 1e-12);
    }
}

fn efficiency_at(lambda_mw: f64) -> f64 {
    let mut rng = seed::rng(5);
    let data = random_dataset(&mut rng, MetricKind::Continuous, 8, 4, 5, 0);
    let model = random_imputer(&mut rng, MetricKind::Continuous, ImputerShape::of(&data).unwrap());
    let training = MaskTraining {
        e: 0.3,
        hyper: MaskHyperparams { lambda_mw, eta: 0.5 },
        epochs: 40,
    };
    train_masked_imputer(&model, &training, &data, 11).unwrap().efficiency
}

#[test]
fn stronger_weight_penalty_drops_more() {
    let effs: Vec<f64> = [0.0, 1.0, 100.0].into_iter().map(efficiency_at).collect();
    assert!(effs.windows(2).all(|w| w[0] <= w[1]), "{effs:?}");
    assert!(effs[2] > effs[0], "{effs:?}");
}

#[test]
fn training_is_deterministic_and_keeps_ineligible_cells() {
    let mut rng = seed::rng(6);
    let data = random_dataset(&mut rng, MetricKind::Categorical, 6, 3, 4, 3);
    let model = random_imputer(&mut rng, MetricKind::Categorical, ImputerShape::of(&data).unwrap());
    let training = MaskTraining {
        e: 0.5,
        hyper: MaskHyperparams { lambda_mw: 1e-5, eta: 1.0 },
        epochs: 15,
    };
    let a = train_masked_imputer(&model, &training, &data, 3).unwrap();
    let b = train_masked_imputer(&model, &training, &data, 3).unwrap();
    assert_eq!(a.pmd, b.pmd);
    assert_eq!(a.objective, b.objective);
    assert_eq!(a.imputer.params().tensors(), b.imputer.params().tensors());
    for ((t, m), &p) in data.protocol().eligible().indexed_iter() {
        assert!(p || a.pmd.collects(t, m));
    }
}
