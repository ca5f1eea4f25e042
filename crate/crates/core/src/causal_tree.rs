//! Honest causal trees for one (treatment, metric) pair.
//!
//! The structure is grown greedily on the train half of an
//! [`HonestSplit`]; leaf effects are then computed from the estimate half
//! only. A node's score is
//!
//! ```text
//! alpha * n * tau^2  -  (1 - alpha) * n * var(tau)
//! ```
//!
//! with `n` the node's train-half size and `var(tau)` the two-sample
//! variance `s_t^2 / n_t + s_c^2 / n_c`. A split is kept only when the sum
//! of its children's scores beats the parent's score. Small `alpha` weights
//! the variance penalty and yields fewer, more stable cohorts.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, CohortSet, Condition, Side, SplitRule};
use crate::data::{ExperimentDataset, HonestSplit, CONTROL};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{interior_quantiles, sample_variance, Moments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CausalTreeConfig {
    /// Heterogeneity-versus-variance trade-off in `[0, 1]`.
    pub alpha: f64,
    pub min_leaf_per_arm: usize,
    pub max_depth: usize,
    pub candidate_thresholds: usize,
    /// Features examined per node; `None` examines all of them.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for CausalTreeConfig {
    fn default() -> Self {
        CausalTreeConfig {
            alpha: 0.5,
            min_leaf_per_arm: 50,
            max_depth: 5,
            candidate_thresholds: 32,
            max_features: None,
            seed: 0,
        }
    }
}

impl CausalTreeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} must lie in [0, 1]", self.alpha)));
        }
        if self.min_leaf_per_arm < 2 {
            return Err(Error::Config("min_leaf_per_arm must be at least 2".into()));
        }
        if self.candidate_thresholds == 0 {
            return Err(Error::Config("candidate_thresholds must be positive".into()));
        }
        if self.max_features == Some(0) {
            return Err(Error::Config("max_features must be positive".into()));
        }
        Ok(())
    }
}

/// Difference-in-means effect of one arm against control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub tau: f64,
    /// `var_treat / n_treat + var_control / n_control`.
    pub var: f64,
    pub n_treat: usize,
    pub n_control: usize,
    pub var_treat: f64,
    pub var_control: f64,
}

impl EffectEstimate {
    pub fn from_samples(treat: &[f64], control: &[f64]) -> Self {
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let var_treat = sample_variance(treat);
        let var_control = sample_variance(control);
        let n_treat = treat.len();
        let n_control = control.len();
        EffectEstimate {
            tau: mean(treat) - mean(control),
            var: var_treat / n_treat as f64 + var_control / n_control as f64,
            n_treat,
            n_control,
            var_treat,
            var_control,
        }
    }

    pub fn se(&self) -> f64 {
        self.var.sqrt()
    }

    /// Same estimate with every outcome divided by `scale`.
    pub fn scaled(&self, scale: f64) -> Self {
        let s2 = scale * scale;
        EffectEstimate {
            tau: self.tau / scale,
            var: self.var / s2,
            var_treat: self.var_treat / s2,
            var_control: self.var_control / s2,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        rule: SplitRule,
        left: usize,
        right: usize,
    },
    Leaf {
        estimate: EffectEstimate,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTree {
    pub treatment: usize,
    pub metric: usize,
    pub n_features: usize,
    /// Arena; node 0 is the root.
    pub nodes: Vec<TreeNode>,
    pub config: CausalTreeConfig,
}

impl CausalTree {
    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Leaf estimate for a feature vector.
    pub fn predict(&self, features: &[f64]) -> &EffectEstimate {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { estimate } => return estimate,
                TreeNode::Split { rule, left, right } => {
                    at = if rule.goes_left(features) { *left } else { *right };
                }
            }
        }
    }

    /// Split rules along every internal node, root first.
    pub fn rules(&self) -> Vec<SplitRule> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { rule, .. } => Some(*rule),
                TreeNode::Leaf { .. } => None,
            })
            .collect()
    }
}

/// One leaf per cohort, in left-to-right order, with the leaf estimates.
pub fn tree_cohorts(tree: &CausalTree) -> (CohortSet, Vec<EffectEstimate>) {
    let mut cohorts = Vec::new();
    let mut effects = Vec::new();
    let mut path = Vec::new();
    collect_leaves(tree, 0, &mut path, &mut cohorts, &mut effects);
    (
        CohortSet {
            n_features: tree.n_features,
            cohorts,
        },
        effects,
    )
}

fn collect_leaves(
    tree: &CausalTree,
    at: usize,
    path: &mut Vec<Condition>,
    cohorts: &mut Vec<Cohort>,
    effects: &mut Vec<EffectEstimate>,
) {
    match &tree.nodes[at] {
        TreeNode::Leaf { estimate } => {
            let id = format!("t{}m{}.{}", tree.treatment, tree.metric, cohorts.len());
            cohorts.push(Cohort::from_conditions(id, path));
            effects.push(*estimate);
        }
        TreeNode::Split { rule, left, right } => {
            path.push(Condition {
                feature: rule.feature,
                side: Side::Below,
                threshold: rule.threshold,
            });
            collect_leaves(tree, *left, path, cohorts, effects);
            path.pop();
            path.push(Condition {
                feature: rule.feature,
                side: Side::AtOrAbove,
                threshold: rule.threshold,
            });
            collect_leaves(tree, *right, path, cohorts, effects);
            path.pop();
        }
    }
}

/// Training rows for arm `treatment` versus control.
struct ArmRows<'a> {
    features: Vec<&'a [f64]>,
    y: Vec<f64>,
    treated: Vec<bool>,
}

impl<'a> ArmRows<'a> {
    fn new(ds: &'a ExperimentDataset, treatment: usize, metric: usize) -> Self {
        let mut rows = ArmRows {
            features: Vec::new(),
            y: Vec::new(),
            treated: Vec::new(),
        };
        for u in ds.units() {
            if u.variant == treatment || u.variant == CONTROL {
                rows.features.push(&u.features);
                rows.y.push(u.outcomes[metric]);
                rows.treated.push(u.variant == treatment);
            }
        }
        rows
    }

    fn moments(&self, idx: &[usize]) -> (Moments, Moments) {
        let mut t = Moments::default();
        let mut c = Moments::default();
        for &i in idx {
            if self.treated[i] {
                t.push(self.y[i]);
            } else {
                c.push(self.y[i]);
            }
        }
        (t, c)
    }
}

pub(crate) fn node_score(t: &Moments, c: &Moments, alpha: f64) -> f64 {
    if t.n == 0 || c.n == 0 {
        return f64::NEG_INFINITY;
    }
    let n = (t.n + c.n) as f64;
    let tau = t.mean() - c.mean();
    let var = t.variance() / t.n as f64 + c.variance() / c.n as f64;
    alpha * n * tau * tau - (1.0 - alpha) * n * var
}

struct Builder<'a> {
    train: ArmRows<'a>,
    est: ArmRows<'a>,
    cfg: &'a CausalTreeConfig,
    n_features: usize,
    /// Candidate thresholds per feature, shared by every node.
    thresholds: Vec<Vec<f64>>,
    nodes: Vec<TreeNode>,
    rng: rng::Rng,
}

struct Candidate {
    rule: SplitRule,
    score: f64,
}

impl Builder<'_> {
    fn leaf(&self, est_idx: &[usize]) -> TreeNode {
        let (treat, control): (Vec<usize>, Vec<usize>) =
            est_idx.iter().partition(|&&i| self.est.treated[i]);
        let ys = |idx: Vec<usize>| idx.into_iter().map(|i| self.est.y[i]).collect::<Vec<_>>();
        TreeNode::Leaf {
            estimate: EffectEstimate::from_samples(&ys(treat), &ys(control)),
        }
    }

    fn build(&mut self, train_idx: Vec<usize>, est_idx: Vec<usize>, depth: usize) -> usize {
        let at = self.nodes.len();
        self.nodes.push(self.leaf(&est_idx));
        if depth >= self.cfg.max_depth {
            return at;
        }
        let Some(best) = self.best_split(&train_idx, &est_idx) else {
            return at;
        };
        let rule = best.rule;
        let (tl, tr): (Vec<usize>, Vec<usize>) = train_idx
            .into_iter()
            .partition(|&i| rule.goes_left(self.train.features[i]));
        let (el, er): (Vec<usize>, Vec<usize>) = est_idx
            .into_iter()
            .partition(|&i| rule.goes_left(self.est.features[i]));
        let left = self.build(tl, el, depth + 1);
        let right = self.build(tr, er, depth + 1);
        self.nodes[at] = TreeNode::Split { rule, left, right };
        at
    }

    fn features_to_try(&mut self) -> Vec<usize> {
        match self.cfg.max_features {
            Some(m) if m < self.n_features => {
                let mut f = index::sample(&mut self.rng, self.n_features, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..self.n_features).collect(),
        }
    }

    fn best_split(&mut self, train_idx: &[usize], est_idx: &[usize]) -> Option<Candidate> {
        let min_leaf = self.cfg.min_leaf_per_arm;
        let (t_all, c_all) = self.train.moments(train_idx);
        let est_treat = est_idx.iter().filter(|&&i| self.est.treated[i]).count();
        let est_control = est_idx.len() - est_treat;
        if t_all.n < 2 * min_leaf || c_all.n < 2 * min_leaf || est_treat < 2 * min_leaf || est_control < 2 * min_leaf {
            return None;
        }
        let parent = node_score(&t_all, &c_all, self.cfg.alpha);
        let alpha = self.cfg.alpha;
        let mut best: Option<Candidate> = None;

        for f in self.features_to_try() {
            let mut order: Vec<usize> = train_idx.to_vec();
            order.sort_by(|&a, &b| self.train.features[a][f].total_cmp(&self.train.features[b][f]));
            let xs: Vec<f64> = order.iter().map(|&i| self.train.features[i][f]).collect();
            let thresholds = &self.thresholds[f];
            // prefix moments per arm over the sorted order
            let mut pre_t = Vec::with_capacity(order.len() + 1);
            let mut pre_c = Vec::with_capacity(order.len() + 1);
            let (mut t, mut c) = (Moments::default(), Moments::default());
            pre_t.push(t);
            pre_c.push(c);
            for &i in &order {
                if self.train.treated[i] {
                    t.push(self.train.y[i]);
                } else {
                    c.push(self.train.y[i]);
                }
                pre_t.push(t);
                pre_c.push(c);
            }
            let mut est_t: Vec<f64> = Vec::with_capacity(est_treat);
            let mut est_c: Vec<f64> = Vec::with_capacity(est_control);
            for &i in est_idx {
                let x = self.est.features[i][f];
                if self.est.treated[i] {
                    est_t.push(x);
                } else {
                    est_c.push(x);
                }
            }
            est_t.sort_by(f64::total_cmp);
            est_c.sort_by(f64::total_cmp);

            for &threshold in thresholds {
                let pos = xs.partition_point(|&x| x < threshold);
                let (lt, lc) = (pre_t[pos], pre_c[pos]);
                let (rt, rc) = (t_all.minus(&lt), c_all.minus(&lc));
                if lt.n < min_leaf || lc.n < min_leaf || rt.n < min_leaf || rc.n < min_leaf {
                    continue;
                }
                let elt = est_t.partition_point(|&x| x < threshold);
                let elc = est_c.partition_point(|&x| x < threshold);
                if elt < min_leaf || elc < min_leaf || est_t.len() - elt < min_leaf || est_c.len() - elc < min_leaf {
                    continue;
                }
                let score = node_score(&lt, &lc, alpha) + node_score(&rt, &rc, alpha);
                if best.as_ref().is_none_or(|b| score > b.score) {
                    best = Some(Candidate {
                        rule: SplitRule { feature: f, threshold },
                        score,
                    });
                }
            }
        }
        best.filter(|b| b.score > parent)
    }
}

/// Fit an honest causal tree for `treatment` against control on `metric`.
pub fn fit_causal_tree(
    split: &HonestSplit,
    treatment: usize,
    metric: usize,
    cfg: &CausalTreeConfig,
) -> Result<CausalTree> {
    cfg.validate()?;
    let ds = &split.train;
    if treatment == CONTROL || treatment > ds.n_treatments() {
        return Err(Error::Config(format!(
            "treatment {treatment} is not one of 1..={}",
            ds.n_treatments()
        )));
    }
    if metric >= ds.n_metrics() {
        return Err(Error::Config(format!("metric {metric} out of range")));
    }
    let train = ArmRows::new(&split.train, treatment, metric);
    let est = ArmRows::new(&split.estimate, treatment, metric);
    let est_treat = est.treated.iter().filter(|&&t| t).count();
    if est_treat == 0 || est_treat == est.treated.len() {
        return Err(Error::InsufficientData(format!(
            "estimate half needs units in both arm {treatment} and control"
        )));
    }
    let train_idx: Vec<usize> = (0..train.y.len()).collect();
    let est_idx: Vec<usize> = (0..est.y.len()).collect();
    // quantiles of the whole train half, so trees fitted on the same split
    // share thresholds and their partitions merge into fewer cohorts
    let thresholds = (0..ds.n_features())
        .map(|f| {
            let mut xs: Vec<f64> = ds.units().iter().map(|u| u.features[f]).collect();
            xs.sort_by(f64::total_cmp);
            let mut q = interior_quantiles(&xs, cfg.candidate_thresholds);
            q.dedup();
            q
        })
        .collect();
    let mut builder = Builder {
        train,
        est,
        cfg,
        n_features: ds.n_features(),
        thresholds,
        nodes: Vec::new(),
        rng: rng::stream(cfg.seed, 0),
    };
    builder.build(train_idx, est_idx, 0);
    Ok(CausalTree {
        treatment,
        metric,
        n_features: ds.n_features(),
        nodes: builder.nodes,
        config: cfg.clone(),
    })
}
