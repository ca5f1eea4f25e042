#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use treatsel::data::{ExperimentDataset, Unit};
use treatsel::rng;

/// Two arms, two uniform features on `[-1, 1)`; the effect is `+1` where
/// `f1 > 0` and `-1` elsewhere, outcome noise sd `noise`.
pub fn step_dataset(n: usize, noise: f64, seed: u64) -> ExperimentDataset {
    let mut rng = rng::stream(seed, 0);
    let units = (0..n)
        .map(|i| {
            let f1: f64 = rng.random_range(-1.0..1.0);
            let f2: f64 = rng.random_range(-1.0..1.0);
            let variant = i % 2;
            let effect = if f1 > 0.0 { 1.0 } else { -1.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            Unit {
                id: format!("u{i}"),
                features: vec![f1, f2],
                variant,
                outcomes: vec![5.0 + variant as f64 * effect + noise * z],
                counterfactuals: None,
            }
        })
        .collect();
    ExperimentDataset::new(vec!["f1".into(), "f2".into()], vec!["y".into()], 1, units).unwrap()
}

/// The same units with arms 0 and 1 swapped.
pub fn swap_arms(ds: &ExperimentDataset) -> ExperimentDataset {
    let units = ds
        .units()
        .iter()
        .map(|u| Unit {
            variant: 1 - u.variant,
            ..u.clone()
        })
        .collect();
    ExperimentDataset::new(ds.feature_names().to_vec(), ds.metric_names().to_vec(), 1, units).unwrap()
}
