//! Member-level effect estimators.

pub mod forest;
pub mod regression;
pub mod two_model;

use serde::{Deserialize, Serialize};

use crate::data::ExperimentDataset;
use crate::error::Result;
use crate::stats::{mean, sample_variance};

pub use forest::{fit_causal_forest, CausalForest, ForestConfig};
pub use regression::{BaggedTrees, RegressionConfig};
pub use two_model::{fit_two_model, TwoModel, TwoModelSet};

/// Point effect for one member with an ensemble variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberEffect {
    pub tau: f64,
    /// Variance of the ensemble mean; zero when there is no ensemble.
    pub var: f64,
}

impl MemberEffect {
    /// Mean of `draws` with the variance of that mean.
    pub fn from_draws(draws: &[f64]) -> Self {
        MemberEffect {
            tau: mean(draws),
            var: sample_variance(draws) / draws.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemberEstimator {
    CausalForest(ForestConfig),
    TwoModel(RegressionConfig),
}

/// Fitted models for every (treatment, metric) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemberModel {
    /// `forests[metric][treatment - 1]`.
    CausalForest { forests: Vec<Vec<CausalForest>> },
    /// One set per metric.
    TwoModel { sets: Vec<TwoModelSet> },
}

/// Effects of every treatment on every metric for a list of members:
/// `tau[member][metric][treatment - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberEffects {
    pub n_treatments: usize,
    pub n_metrics: usize,
    pub tau: Vec<Vec<Vec<f64>>>,
}

impl MemberModel {
    pub fn fit(ds: &ExperimentDataset, estimator: &MemberEstimator) -> Result<Self> {
        let metrics = 0..ds.n_metrics();
        match estimator {
            MemberEstimator::CausalForest(cfg) => {
                let forests = metrics
                    .map(|k| {
                        (1..=ds.n_treatments())
                            .map(|j| {
                                let cfg = ForestConfig {
                                    seed: crate::rng::derive_seed(cfg.seed, (k * 1000 + j) as u64),
                                    ..cfg.clone()
                                };
                                fit_causal_forest(ds, j, k, &cfg)
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(MemberModel::CausalForest { forests })
            }
            MemberEstimator::TwoModel(cfg) => {
                let sets = metrics
                    .map(|k| TwoModelSet::fit(ds, k, cfg))
                    .collect::<Result<Vec<_>>>()?;
                Ok(MemberModel::TwoModel { sets })
            }
        }
    }

    pub fn n_metrics(&self) -> usize {
        match self {
            MemberModel::CausalForest { forests } => forests.len(),
            MemberModel::TwoModel { sets } => sets.len(),
        }
    }

    pub fn n_treatments(&self) -> usize {
        match self {
            MemberModel::CausalForest { forests } => forests[0].len(),
            MemberModel::TwoModel { sets } => sets[0].arms.len() - 1,
        }
    }

    /// `[metric][treatment - 1]` effects at one feature vector.
    pub fn effects(&self, features: &[f64]) -> Vec<Vec<f64>> {
        match self {
            MemberModel::CausalForest { forests } => forests
                .iter()
                .map(|row| row.iter().map(|f| f.effect(features).tau).collect())
                .collect(),
            MemberModel::TwoModel { sets } => sets
                .iter()
                .map(|s| (1..s.arms.len()).map(|j| s.effect(j, features)).collect())
                .collect(),
        }
    }

    pub fn predict(&self, rows: &[&[f64]]) -> MemberEffects {
        use rayon::prelude::*;
        MemberEffects {
            n_treatments: self.n_treatments(),
            n_metrics: self.n_metrics(),
            tau: rows.par_iter().map(|x| self.effects(x)).collect(),
        }
    }
}
