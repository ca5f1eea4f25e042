mod common;

use common::{step_dataset, swap_arms};
use treatsel::member::forest::{fit_causal_forest, ForestConfig};
use treatsel::member::regression::RegressionConfig;
use treatsel::member::two_model::fit_two_model;
use treatsel::member::{MemberEstimator, MemberModel};

#[test]
fn forest_recovers_both_sides_of_the_step() {
    let ds = step_dataset(2000, 0.1, 1);
    let forest = fit_causal_forest(&ds, 1, 0, &ForestConfig::default()).unwrap();
    assert_eq!(forest.n_trees(), 50);
    for (f1, truth) in [(-0.5, -1.0), (0.5, 1.0), (-0.9, -1.0), (0.9, 1.0)] {
        let e = forest.effect(&[f1, 0.0]);
        assert!((e.tau - truth).abs() <= 0.15, "f1={f1}: {}", e.tau);
    }
}

#[test]
fn forest_prediction_ignores_tree_order() {
    let ds = step_dataset(1000, 0.5, 2);
    let cfg = ForestConfig {
        n_trees: 12,
        ..ForestConfig::default()
    };
    let forest = fit_causal_forest(&ds, 1, 0, &cfg).unwrap();
    let mut reversed = forest.clone();
    reversed.trees.reverse();
    for x in [[-0.7, 0.2], [0.1, -0.4], [0.8, 0.8]] {
        let (a, b) = (forest.effect(&x), reversed.effect(&x));
        assert!((a.tau - b.tau).abs() <= 1e-12 * (1.0 + a.tau.abs()));
        assert!((a.var - b.var).abs() <= 1e-12 * (1.0 + a.var));
    }
}

#[test]
fn forest_variance_is_the_variance_of_the_tree_mean() {
    let ds = step_dataset(1000, 1.0, 3);
    let cfg = ForestConfig {
        n_trees: 15,
        ..ForestConfig::default()
    };
    let forest = fit_causal_forest(&ds, 1, 0, &cfg).unwrap();
    for x in [[-0.8, 0.3], [0.05, -0.5], [0.6, 0.9]] {
        let taus: Vec<f64> = forest.trees.iter().map(|t| t.predict(&x).tau).collect();
        let b = taus.len() as f64;
        let mean = taus.iter().sum::<f64>() / b;
        let s2 = taus.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (b - 1.0);
        let e = forest.effect(&x);
        assert!((e.tau - mean).abs() < 1e-12);
        assert!((e.var - s2 / b).abs() < 1e-12 * (1.0 + s2));
    }
}

#[test]
fn two_model_effect_flips_with_the_arm_labels() {
    let ds = step_dataset(800, 0.3, 4);
    let cfg = RegressionConfig {
        n_trees: 10,
        ..RegressionConfig::default()
    };
    let model = fit_two_model(&ds, 1, 0, &cfg).unwrap();
    let swapped = fit_two_model(&swap_arms(&ds), 1, 0, &cfg).unwrap();
    for x in [[-0.6, 0.0], [0.0, 0.5], [0.6, -0.9]] {
        assert_eq!(model.effect(&x), -swapped.effect(&x));
    }
    assert!(model.effect(&[0.7, 0.0]) > 0.5 && model.effect(&[-0.7, 0.0]) < -0.5);
}

#[test]
fn member_model_predicts_every_pair() {
    let ds = step_dataset(600, 0.3, 5);
    let model = MemberModel::fit(
        &ds,
        &MemberEstimator::TwoModel(RegressionConfig {
            n_trees: 5,
            ..RegressionConfig::default()
        }),
    )
    .unwrap();
    let rows: Vec<&[f64]> = ds.units().iter().take(7).map(|u| u.features.as_slice()).collect();
    let effects = model.predict(&rows);
    assert_eq!((effects.n_metrics, effects.n_treatments), (1, 1));
    assert_eq!(effects.tau.len(), 7);
    assert_eq!(effects.tau[3], model.effects(rows[3]));
}
