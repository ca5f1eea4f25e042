//! Two-model effects: one outcome regressor per arm, effect = difference.

use serde::{Deserialize, Serialize};

use super::regression::{BaggedTrees, RegressionConfig};
use crate::data::{ExperimentDataset, CONTROL};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoModel {
    pub treatment: usize,
    pub metric: usize,
    pub model_treat: BaggedTrees,
    pub model_control: BaggedTrees,
}

impl TwoModel {
    pub fn effect(&self, features: &[f64]) -> f64 {
        self.model_treat.predict(features) - self.model_control.predict(features)
    }
}

/// Regressor for `metric` fitted on the units of `arm`.
///
/// The bagging seed depends on the metric only, so two arms with swapped
/// data produce swapped models.
pub fn fit_arm_model(
    ds: &ExperimentDataset,
    arm: usize,
    metric: usize,
    cfg: &RegressionConfig,
) -> Result<BaggedTrees> {
    let units: Vec<_> = ds.units().iter().filter(|u| u.variant == arm).collect();
    if units.is_empty() {
        return Err(Error::InsufficientData(format!("arm {arm} has no units")));
    }
    if metric >= ds.n_metrics() {
        return Err(Error::Config(format!("metric {metric} out of range")));
    }
    let features: Vec<&[f64]> = units.iter().map(|u| u.features.as_slice()).collect();
    let y: Vec<f64> = units.iter().map(|u| u.outcomes[metric]).collect();
    let cfg = RegressionConfig {
        seed: derive_seed(cfg.seed, metric as u64),
        ..cfg.clone()
    };
    BaggedTrees::fit(&features, &y, &cfg)
}

pub fn fit_two_model(
    ds: &ExperimentDataset,
    treatment: usize,
    metric: usize,
    cfg: &RegressionConfig,
) -> Result<TwoModel> {
    if treatment == CONTROL || treatment > ds.n_treatments() {
        return Err(Error::Config(format!("treatment {treatment} is not a treatment arm")));
    }
    Ok(TwoModel {
        treatment,
        metric,
        model_treat: fit_arm_model(ds, treatment, metric, cfg)?,
        model_control: fit_arm_model(ds, CONTROL, metric, cfg)?,
    })
}

/// Arm models for every arm of one metric, sharing the control model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoModelSet {
    pub metric: usize,
    /// Indexed by arm, control first.
    pub arms: Vec<BaggedTrees>,
}

impl TwoModelSet {
    pub fn fit(ds: &ExperimentDataset, metric: usize, cfg: &RegressionConfig) -> Result<Self> {
        let arms = (0..ds.n_arms())
            .map(|a| fit_arm_model(ds, a, metric, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(TwoModelSet { metric, arms })
    }

    pub fn effect(&self, treatment: usize, features: &[f64]) -> f64 {
        self.arms[treatment].predict(features) - self.arms[CONTROL].predict(features)
    }
}
