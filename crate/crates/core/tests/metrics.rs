mod common;

use common::*;
use pmdlearn::dataset::MetricKind;
use pmdlearn::eval::{
    accuracy_per_metric, bootstrap_ci, macro_f1_per_metric, nrmsd, pooled, NrmsdVariant, Statistic,
};
use pmdlearn::seed;
use proptest::prelude::*;
use rand::seq::SliceRandom;

#[test]
fn library_matches_scalar_oracles() {
    let (pass, detail) = criterion_metric_oracles();
    assert!(pass, "{detail}");
}

fn instance(seed_value: u64, kind: MetricKind) -> pmdlearn::eval::MaskedElementSet {
    let mut rng = seed::rng(seed_value);
    random_elements(&mut rng, kind, (6, 4, 5), 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_ignore_element_order(s in any::<u64>()) {
        for kind in [MetricKind::Continuous, MetricKind::Categorical] {
            let set = instance(s, kind);
            let mut shuffled = set.clone();
            shuffled.elements.shuffle(&mut seed::rng(s ^ 1));
            for stat in [Statistic::Nrmsd(NrmsdVariant::Printed), Statistic::Nrmsd(NrmsdVariant::Squared),
                         Statistic::PooledAccuracy, Statistic::PooledMacroF1] {
                let a = stat.evaluate(&set.elements, &set.ranges).unwrap();
                let b = stat.evaluate(&shuffled.elements, &shuffled.ranges).unwrap();
                prop_assert!((a - b).abs() < 1e-12, "{stat:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn scores_are_bounded(s in any::<u64>()) {
        let cont = instance(s, MetricKind::Continuous);
        for v in [NrmsdVariant::Printed, NrmsdVariant::Squared] {
            prop_assert!(nrmsd(&cont, v).unwrap() >= 0.0);
        }
        let cat = instance(s, MetricKind::Categorical);
        for v in accuracy_per_metric(&cat).values().chain(macro_f1_per_metric(&cat).values()) {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn pooled_is_the_median(values in prop::collection::vec(-10.0f64..10.0, 1..30)) {
        let p = pooled(&values).unwrap();
        prop_assert_eq!(p, oracle_median(&values));
        let below = values.iter().filter(|&&v| v < p).count();
        let above = values.iter().filter(|&&v| v > p).count();
        prop_assert!(below <= values.len() / 2 && above <= values.len() / 2);
    }

    #[test]
    fn perfect_predictions_score_perfectly(s in any::<u64>()) {
        let mut set = instance(s, MetricKind::Categorical);
        for e in &mut set.elements {
            e.prediction = e.target;
        }
        prop_assert!(accuracy_per_metric(&set).values().all(|&a| a == 1.0));
        prop_assert!(macro_f1_per_metric(&set).values().all(|&f| f == 1.0));
        let mut cont = instance(s, MetricKind::Continuous);
        for e in &mut cont.elements {
            e.prediction = e.target;
        }
        prop_assert_eq!(nrmsd(&cont, NrmsdVariant::Printed).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn intervals_contain_the_point_and_nest_by_level(s in any::<u64>()) {
        let set = instance(s, MetricKind::Continuous);
        let stat = Statistic::Nrmsd(NrmsdVariant::Printed);
        let narrow = bootstrap_ci(&set, stat, 300, 0.90, s).unwrap();
        let wide = bootstrap_ci(&set, stat, 300, 0.95, s).unwrap();
        prop_assert!(narrow.lower <= narrow.point && narrow.point <= narrow.upper);
        prop_assert_eq!(narrow.point, wide.point);
        prop_assert!(wide.lower <= narrow.lower && narrow.upper <= wide.upper);
    }
}
