//! Causal forests: honest causal trees on random subsamples, averaged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MemberEffect;
use crate::causal_tree::{fit_causal_tree, CausalTree, CausalTreeConfig};
use crate::data::{honest_split, stratified_indices, ExperimentDataset, CONTROL};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Share of each arm drawn, without replacement, for every tree.
    pub subsample_fraction: f64,
    pub honest_fraction: f64,
    /// Per-tree settings; `max_features = None` means `ceil(sqrt(M))`.
    pub tree: CausalTreeConfig,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 50,
            subsample_fraction: 0.5,
            honest_fraction: 0.5,
            tree: CausalTreeConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalForest {
    pub treatment: usize,
    pub metric: usize,
    pub trees: Vec<CausalTree>,
    pub subsample_fraction: f64,
    pub seed: u64,
}

impl CausalForest {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Mean of the per-tree leaf effects, with the between-tree variance
    /// of that mean.
    pub fn effect(&self, features: &[f64]) -> MemberEffect {
        let taus: Vec<f64> = self.trees.iter().map(|t| t.predict(features).tau).collect();
        MemberEffect::from_draws(&taus)
    }
}

/// Fit `cfg.n_trees` trees for `treatment` against control on `metric`.
pub fn fit_causal_forest(
    ds: &ExperimentDataset,
    treatment: usize,
    metric: usize,
    cfg: &ForestConfig,
) -> Result<CausalForest> {
    cfg.tree.validate()?;
    if cfg.n_trees == 0 {
        return Err(Error::Config("a forest needs at least one tree".into()));
    }
    if !(cfg.subsample_fraction > 0.0 && cfg.subsample_fraction <= 1.0) {
        return Err(Error::Config("subsample_fraction must lie in (0, 1]".into()));
    }
    if treatment == CONTROL || treatment > ds.n_treatments() {
        return Err(Error::Config(format!("treatment {treatment} is not a treatment arm")));
    }
    let counts = ds.arm_counts();
    let need = 2 * cfg.tree.min_leaf_per_arm;
    if counts[treatment] < need || counts[CONTROL] < need {
        return Err(Error::InsufficientData(format!(
            "forest needs {need} units in arm {treatment} and in control, found {} and {}",
            counts[treatment], counts[CONTROL]
        )));
    }
    let rows: Vec<usize> = ds
        .units()
        .iter()
        .enumerate()
        .filter(|(_, u)| u.variant == treatment || u.variant == CONTROL)
        .map(|(i, _)| i)
        .collect();
    let pair = ds.subset(&rows)?;
    let mut tree_cfg = cfg.tree.clone();
    if tree_cfg.max_features.is_none() {
        tree_cfg.max_features = Some((ds.n_features() as f64).sqrt().ceil() as usize);
    }

    let trees = (0..cfg.n_trees as u64)
        .into_par_iter()
        .map(|b| {
            let seed = derive_seed(cfg.seed, b);
            let sample = if cfg.subsample_fraction < 1.0 {
                let (keep, _) = stratified_indices(&pair, cfg.subsample_fraction, seed)?;
                pair.subset(&keep)?
            } else {
                pair.clone()
            };
            let split = honest_split(&sample, cfg.honest_fraction, derive_seed(seed, 1))?;
            let tc = CausalTreeConfig {
                seed: derive_seed(seed, 2),
                ..tree_cfg.clone()
            };
            fit_causal_tree(&split, treatment, metric, &tc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CausalForest {
        treatment,
        metric,
        trees,
        subsample_fraction: cfg.subsample_fraction,
        seed: cfg.seed,
    })
}
