//! The five ways of turning an experiment into an assignment policy.
//!
//! | method | effects | solver |
//! |--------|---------|--------|
//! | `Global` | one difference in means per arm | best single arm |
//! | `HT.ST` | median-split cohorts, difference in means | stochastic |
//! | `CT.ST` | merged honest causal trees | stochastic |
//! | `CF.DT` | causal forests per member | deterministic LP |
//! | `TM.DT` | two regression models per member | deterministic LP |

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assemble::{member_problem, CohortEffects, ProblemSpec};
use crate::causal_tree::{fit_causal_tree, tree_cohorts, CausalTree, CausalTreeConfig};
use crate::cohort::{Cohort, CohortSet, Condition, Side};
use crate::data::{honest_split, ExperimentDataset, HonestSplit, DEFAULT_HONEST_FRACTION};
use crate::error::{Error, Result};
use crate::member::{ForestConfig, MemberEffects, MemberEstimator, MemberModel, RegressionConfig};
use crate::merge::{canonical_order, merge_cohort_sets, EffectSource, SourceKey};
use crate::optimize::{mcsa_solve, saa_solve, LpSolution, McsaConfig, McsaSolution, SolutionStatus, StepSize};
use crate::problem::{AssignmentPolicy, DeterministicProblem};
use crate::rng::derive_seed;
use crate::stats::interior_quantiles;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "Global")]
    Global,
    #[serde(rename = "HT.ST")]
    HtSt,
    #[serde(rename = "CT.ST")]
    CtSt,
    #[serde(rename = "CF.DT")]
    CfDt,
    #[serde(rename = "TM.DT")]
    TmDt,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Global, Method::HtSt, Method::CtSt, Method::CfDt, Method::TmDt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Global => "Global",
            Method::HtSt => "HT.ST",
            Method::CtSt => "CT.ST",
            Method::CfDt => "CF.DT",
            Method::TmDt => "TM.DT",
        }
    }

    /// Methods whose policy is defined on individual members.
    pub fn is_member_level(self) -> bool {
        matches!(self, Method::CfDt | Method::TmDt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Settings shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub tree: CausalTreeConfig,
    pub forest: ForestConfig,
    pub regression: RegressionConfig,
    pub mcsa: McsaConfig,
    pub honest_fraction: f64,
    /// Features split at their median for `HT.ST`; `None` uses all.
    pub heuristic_features: Option<Vec<usize>>,
    /// Fit trees for the objective metric only and estimate every metric
    /// directly on the merged cohorts.
    pub single_tree_objective: bool,
    pub seed: u64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            tree: CausalTreeConfig::default(),
            forest: ForestConfig::default(),
            regression: RegressionConfig::default(),
            mcsa: McsaConfig {
                iterations: 20_000,
                gamma0: StepSize::Scaled(1.0),
                ..McsaConfig::default()
            },
            honest_fraction: DEFAULT_HONEST_FRACTION,
            heuristic_features: None,
            single_tree_objective: false,
            seed: 0,
        }
    }
}

/// Cohorts from splitting each listed feature at its median: `2^F` cells.
pub fn heuristic_cohorts(ds: &ExperimentDataset, features: &[usize]) -> Result<CohortSet> {
    if let Some(&f) = features.iter().find(|&&f| f >= ds.n_features()) {
        return Err(Error::Config(format!("heuristic feature {f} out of range")));
    }
    if features.len() > 16 {
        return Err(Error::Config("too many heuristic features".into()));
    }
    let medians = features
        .iter()
        .map(|&f| {
            let mut v: Vec<f64> = ds.units().iter().map(|u| u.features[f]).collect();
            v.sort_by(f64::total_cmp);
            interior_quantiles(&v, 1)
                .first()
                .copied()
                .ok_or_else(|| Error::InsufficientData(format!("feature {f} is constant")))
        })
        .collect::<Result<Vec<_>>>()?;
    let cohorts = (0..1usize << features.len())
        .map(|mask| {
            let conditions: Vec<Condition> = features
                .iter()
                .zip(&medians)
                .enumerate()
                .map(|(b, (&feature, &threshold))| Condition {
                    feature,
                    side: if mask >> b & 1 == 0 { Side::Below } else { Side::AtOrAbove },
                    threshold,
                })
                .collect();
            Cohort::from_conditions(format!("h{mask}"), &conditions)
        })
        .collect();
    Ok(CohortSet {
        n_features: ds.n_features(),
        cohorts,
    })
}

/// Output of the estimation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimates {
    /// One honest tree per (treatment, metric), not yet merged.
    Trees { trees: Vec<CausalTree> },
    Cohort { effects: CohortEffects },
    Member { model: MemberModel },
}

/// Fit the effect models of `method` on `ds`.
pub fn estimate(method: Method, ds: &ExperimentDataset, cfg: &MethodConfig, objective: usize) -> Result<Estimates> {
    let cohort = |cohorts| Ok(Estimates::Cohort { effects: CohortEffects::direct(cohorts, ds)? });
    match method {
        Method::Global => cohort(CohortSet::whole_space(ds.n_features(), "all")),
        Method::HtSt => {
            let features: Vec<usize> = cfg
                .heuristic_features
                .clone()
                .unwrap_or_else(|| (0..ds.n_features()).collect());
            cohort(heuristic_cohorts(ds, &features)?)
        }
        Method::CtSt => Ok(Estimates::Trees {
            trees: fit_trees(ds, cfg, objective)?,
        }),
        Method::CfDt | Method::TmDt => Ok(Estimates::Member {
            model: MemberModel::fit(ds, &member_estimator(method, cfg)?)?,
        }),
    }
}

fn tree_split(ds: &ExperimentDataset, cfg: &MethodConfig) -> Result<HonestSplit> {
    honest_split(ds, cfg.honest_fraction, derive_seed(cfg.seed, 11))
}

fn fit_trees(ds: &ExperimentDataset, cfg: &MethodConfig, objective: usize) -> Result<Vec<CausalTree>> {
    let split = tree_split(ds, cfg)?;
    let metrics: Vec<usize> = if cfg.single_tree_objective {
        vec![objective]
    } else {
        (0..ds.n_metrics()).collect()
    };
    let keys: Vec<SourceKey> = metrics
        .iter()
        .flat_map(|&metric| (1..=ds.n_treatments()).map(move |treatment| SourceKey { treatment, metric }))
        .collect();
    keys.par_iter()
        .map(|&key| {
            let tree_cfg = CausalTreeConfig {
                seed: derive_seed(cfg.tree.seed, (key.metric * 1000 + key.treatment) as u64),
                ..cfg.tree.clone()
            };
            fit_causal_tree(&split, key.treatment, key.metric, &tree_cfg)
        })
        .collect()
}

/// Merge tree partitions into one cohort set; other estimates pass through.
///
/// Merged cohorts inherit each tree's leaf effect. With
/// `single_tree_objective` only objective trees were fitted, so every
/// metric is instead estimated directly on the estimate half.
pub fn merge_estimates(estimates: Estimates, ds: &ExperimentDataset, cfg: &MethodConfig) -> Result<Estimates> {
    let Estimates::Trees { trees } = estimates else {
        return Ok(estimates);
    };
    let mut sources: Vec<EffectSource> = trees
        .iter()
        .map(|t| {
            let (cohorts, effects) = tree_cohorts(t);
            EffectSource {
                key: SourceKey {
                    treatment: t.treatment,
                    metric: t.metric,
                },
                cohorts,
                effects,
            }
        })
        .collect();
    canonical_order(&mut sources);
    let (cohorts, table) = merge_cohort_sets(&sources, derive_seed(cfg.seed, 12))?;
    let effects = if cfg.single_tree_objective {
        CohortEffects::direct(cohorts, &tree_split(ds, cfg)?.estimate)?
    } else {
        CohortEffects::from_table(cohorts, &table, ds)?
    };
    Ok(Estimates::Cohort { effects })
}

/// Merged cohort effects for a cohort-level method.
pub fn cohort_effects(method: Method, ds: &ExperimentDataset, cfg: &MethodConfig, objective: usize) -> Result<CohortEffects> {
    if method.is_member_level() {
        return Err(Error::Config(format!("{method} is not a cohort-level method")));
    }
    match merge_estimates(estimate(method, ds, cfg, objective)?, ds, cfg)? {
        Estimates::Cohort { effects } => Ok(effects),
        _ => unreachable!("cohort-level methods merge into cohort effects"),
    }
}

/// Single arm chosen by `Global`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalChoice {
    pub treatment: usize,
    /// Estimated constraint feasibility; when no arm is feasible the arm
    /// with the least total violation is chosen.
    pub feasible: bool,
    pub objective: f64,
    pub violation: f64,
}

/// Best single treatment for a one-row problem.
pub fn global_best(problem: &DeterministicProblem) -> Result<GlobalChoice> {
    if problem.n != 1 {
        return Err(Error::Config("global choice needs a single-row problem".into()));
    }
    let choices: Vec<GlobalChoice> = (1..problem.n_options)
        .map(|j| {
            let x = AssignmentPolicy::constant(1, problem.n_options, j);
            let violation = problem.violation(&x);
            GlobalChoice {
                treatment: j,
                feasible: violation <= 0.0,
                objective: problem.objective(&x),
                violation,
            }
        })
        .collect();
    let feasible = choices
        .iter()
        .filter(|c| c.feasible)
        .max_by(|a, b| a.objective.total_cmp(&b.objective));
    let least_bad = || {
        choices
            .iter()
            .min_by(|a, b| a.violation.total_cmp(&b.violation))
    };
    feasible
        .or_else(least_bad)
        .cloned()
        .ok_or_else(|| Error::Config("problem has no treatment options".into()))
}

/// A method's fitted policy.
#[derive(Debug, Clone)]
pub enum FittedPolicy {
    Global {
        effects: CohortEffects,
        choice: GlobalChoice,
        policy: AssignmentPolicy,
    },
    Cohort {
        effects: CohortEffects,
        solution: McsaSolution,
    },
    Member {
        model: MemberModel,
        effects: MemberEffects,
        solution: LpSolution,
    },
}

impl FittedPolicy {
    pub fn policy(&self) -> &AssignmentPolicy {
        match self {
            FittedPolicy::Global { policy, .. } => policy,
            FittedPolicy::Cohort { solution, .. } => &solution.policy,
            FittedPolicy::Member { solution, .. } => &solution.policy,
        }
    }

    pub fn cohorts(&self) -> Option<&CohortSet> {
        match self {
            FittedPolicy::Global { effects, .. } | FittedPolicy::Cohort { effects, .. } => Some(&effects.cohorts),
            FittedPolicy::Member { .. } => None,
        }
    }
}

pub fn member_estimator(method: Method, cfg: &MethodConfig) -> Result<MemberEstimator> {
    match method {
        Method::CfDt => Ok(MemberEstimator::CausalForest(ForestConfig {
            seed: derive_seed(cfg.seed, 21),
            ..cfg.forest.clone()
        })),
        Method::TmDt => Ok(MemberEstimator::TwoModel(RegressionConfig {
            seed: derive_seed(cfg.seed, 22),
            ..cfg.regression.clone()
        })),
        _ => Err(Error::Config(format!("{method} is not a member-level method"))),
    }
}

/// Fit `method` on `ds`. Member-level methods optimize over `members`
/// (feature rows), which default to the units of `ds`.
pub fn fit_policy(
    method: Method,
    ds: &ExperimentDataset,
    spec: &ProblemSpec,
    cfg: &MethodConfig,
    members: Option<&[&[f64]]>,
) -> Result<FittedPolicy> {
    spec.validate(ds.n_metrics())?;
    match method {
        Method::Global => {
            let effects = cohort_effects(method, ds, cfg, spec.objective)?;
            let problem = effects.stochastic_problem(spec).deterministic();
            let choice = global_best(&problem)?;
            let policy = AssignmentPolicy::constant(1, problem.n_options, choice.treatment);
            Ok(FittedPolicy::Global { effects, choice, policy })
        }
        Method::HtSt | Method::CtSt => {
            let effects = cohort_effects(method, ds, cfg, spec.objective)?;
            let mcsa = McsaConfig {
                seed: derive_seed(cfg.seed, 31),
                ..cfg.mcsa.clone()
            };
            let solution = mcsa_solve(&effects.stochastic_problem(spec), &mcsa)?;
            Ok(FittedPolicy::Cohort { effects, solution })
        }
        Method::CfDt | Method::TmDt => {
            let model = MemberModel::fit(ds, &member_estimator(method, cfg)?)?;
            let own: Vec<&[f64]>;
            let rows = match members {
                Some(rows) => rows,
                None => {
                    own = ds.units().iter().map(|u| u.features.as_slice()).collect();
                    &own
                }
            };
            let effects = model.predict(rows);
            let solution = saa_solve(&member_problem(&effects, spec)?)?;
            if solution.status == SolutionStatus::Infeasible {
                return Err(Error::Infeasible(format!(
                    "{method}: no member-level policy meets the constraints (excess {:.3e})",
                    solution.gap
                )));
            }
            Ok(FittedPolicy::Member { model, effects, solution })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
    }

    #[test]
    fn global_prefers_feasible_then_least_violating() {
        // objective row then one <= constraint, options: control, a, b
        let p = DeterministicProblem::new(1, 3, vec![vec![0.0, 2.0, 1.0], vec![0.0, 1.0, 0.5]], vec![0.6]).unwrap();
        let g = global_best(&p).unwrap();
        assert_eq!((g.treatment, g.feasible), (2, true));
        let p = DeterministicProblem::new(1, 3, vec![vec![0.0, 2.0, 1.0], vec![0.0, 1.0, 0.8]], vec![0.6]).unwrap();
        let g = global_best(&p).unwrap();
        assert_eq!((g.treatment, g.feasible), (2, false));
    }
}
