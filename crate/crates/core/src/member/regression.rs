//! Bagged squared-error regression trees.

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::SplitRule;
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, Rng};
use crate::stats::interior_quantiles;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub candidate_thresholds: usize,
    /// Features tried per node; `None` means `ceil(sqrt(M))`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            n_trees: 50,
            max_depth: 8,
            min_leaf: 5,
            candidate_thresholds: 32,
            max_features: None,
            seed: 0,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_leaf == 0 || self.candidate_thresholds == 0 {
            return Err(Error::Config(
                "n_trees, min_leaf and candidate_thresholds must be positive".into(),
            ));
        }
        if self.max_features == Some(0) {
            return Err(Error::Config("max_features must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressionNode {
    Split { rule: SplitRule, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<RegressionNode>,
}

impl RegressionTree {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                RegressionNode::Leaf { value } => return *value,
                RegressionNode::Split { rule, left, right } => {
                    at = if rule.goes_left(features) { *left } else { *right };
                }
            }
        }
    }
}

/// Average of regression trees, each fit on a bootstrap resample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaggedTrees {
    pub trees: Vec<RegressionTree>,
}

impl BaggedTrees {
    pub fn fit(features: &[&[f64]], y: &[f64], cfg: &RegressionConfig) -> Result<Self> {
        cfg.validate()?;
        if features.is_empty() || features.len() != y.len() {
            return Err(Error::InsufficientData("regression needs a nonempty sample".into()));
        }
        let n_features = features[0].len();
        let mtry = cfg
            .max_features
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features.max(1));
        let trees = (0..cfg.n_trees as u64)
            .into_par_iter()
            .map(|b| {
                let mut rng = rng::stream(derive_seed(cfg.seed, b), 0);
                let n = y.len();
                let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut builder = Builder {
                    features,
                    y,
                    cfg,
                    n_features,
                    mtry,
                    rng,
                    nodes: Vec::new(),
                };
                builder.build(sample, 0);
                RegressionTree { nodes: builder.nodes }
            })
            .collect();
        Ok(BaggedTrees { trees })
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(features)).sum::<f64>() / self.trees.len() as f64
    }
}

struct Builder<'a> {
    features: &'a [&'a [f64]],
    y: &'a [f64],
    cfg: &'a RegressionConfig,
    n_features: usize,
    mtry: usize,
    rng: Rng,
    nodes: Vec<RegressionNode>,
}

impl Builder<'_> {
    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let at = self.nodes.len();
        let sum: f64 = idx.iter().map(|&i| self.y[i]).sum();
        self.nodes.push(RegressionNode::Leaf {
            value: sum / idx.len() as f64,
        });
        if depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf {
            return at;
        }
        let Some(rule) = self.best_split(&idx, sum) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| rule.goes_left(self.features[i]));
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[at] = RegressionNode::Split { rule, left, right };
        at
    }

    /// Split maximizing `S_l^2 / n_l + S_r^2 / n_r`, i.e. the reduction in
    /// squared error.
    fn best_split(&mut self, idx: &[usize], total: f64) -> Option<SplitRule> {
        let n = idx.len();
        let parent = total * total / n as f64;
        let mut feats = index::sample(&mut self.rng, self.n_features, self.mtry).into_vec();
        feats.sort_unstable();
        let mut best: Option<(SplitRule, f64)> = None;
        let mut order = idx.to_vec();
        for f in feats {
            order.sort_by(|&a, &b| self.features[a][f].total_cmp(&self.features[b][f]));
            let xs: Vec<f64> = order.iter().map(|&i| self.features[i][f]).collect();
            let mut prefix = Vec::with_capacity(n + 1);
            let mut s = 0.0;
            prefix.push(0.0);
            for &i in &order {
                s += self.y[i];
                prefix.push(s);
            }
            for t in interior_quantiles(&xs, self.cfg.candidate_thresholds) {
                let pos = xs.partition_point(|&x| x < t);
                if pos < self.cfg.min_leaf || n - pos < self.cfg.min_leaf {
                    continue;
                }
                let sl = prefix[pos];
                let sr = total - sl;
                let score = sl * sl / pos as f64 + sr * sr / (n - pos) as f64;
                if best.as_ref().is_none_or(|(_, b)| score > *b) {
                    best = Some((SplitRule { feature: f, threshold: t }, score));
                }
            }
        }
        best.filter(|(_, s)| *s > parent + 1e-12 * parent.abs())
            .map(|(r, _)| r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_a_step() {
        let xs: Vec<Vec<f64>> = (0..400).map(|i| vec![i as f64 / 400.0]).collect();
        let y: Vec<f64> = xs.iter().map(|x| if x[0] < 0.5 { 1.0 } else { 3.0 }).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let model = BaggedTrees::fit(&refs, &y, &RegressionConfig::default()).unwrap();
        assert!((model.predict(&[0.1]) - 1.0).abs() < 1e-9);
        assert!((model.predict(&[0.9]) - 3.0).abs() < 1e-9);
    }
}
