//! Turning effect estimates into optimization problems.
//!
//! Cohort-level problems weight each cohort's effect by its population
//! share, so `x . mu_k` is the policy's average effect. Member-level
//! problems weight each member by `1 / n`. Effects are divided by the
//! control mean of their metric, which makes thresholds relative lifts.
//! Every problem has `J + 1` options per row, option 0 being control with
//! a zero effect.

use serde::{Deserialize, Serialize};

use crate::bootstrap::{BootstrapInput, BootstrapSolver, CellStats};
use crate::causal_tree::EffectEstimate;
use crate::cohort::CohortSet;
use crate::data::{ExperimentDataset, CONTROL};
use crate::error::{Error, Result};
use crate::member::MemberEffects;
use crate::merge::{EffectTable, SourceKey};
use crate::problem::{Constraint, DeterministicProblem, Direction, StochasticProblem};

/// Objective, constraints and per-metric scale factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub objective: usize,
    pub constraints: Vec<Constraint>,
    /// Multiplier applied to effects of each data metric.
    pub scales: Vec<f64>,
}

impl ProblemSpec {
    /// Scales `1 / control mean` from `ds`.
    pub fn normalized(ds: &ExperimentDataset, objective: usize, constraints: Vec<Constraint>) -> Result<Self> {
        let scales = (0..ds.n_metrics())
            .map(|k| {
                let m = ds.control_mean(k);
                if m == 0.0 || !m.is_finite() {
                    Err(Error::ZeroControlMean { metric: k })
                } else {
                    Ok(1.0 / m)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ProblemSpec {
            objective,
            constraints,
            scales,
        };
        spec.validate(ds.n_metrics())?;
        Ok(spec)
    }

    pub fn validate(&self, n_metrics: usize) -> Result<()> {
        if self.objective >= n_metrics {
            return Err(Error::Config(format!("objective metric {} out of range", self.objective)));
        }
        if let Some(c) = self.constraints.iter().find(|c| c.metric >= n_metrics) {
            return Err(Error::Config(format!("constraint metric {} out of range", c.metric)));
        }
        if self.scales.len() != n_metrics {
            return Err(Error::DimensionMismatch {
                expected: n_metrics,
                actual: self.scales.len(),
            });
        }
        Ok(())
    }

    /// `(metric, multiplier)` for each problem row: objective first, then
    /// constraints in `<=` orientation.
    pub fn rows(&self) -> Vec<(usize, f64)> {
        let mut rows = vec![(self.objective, self.scales[self.objective])];
        for c in &self.constraints {
            let sign = match c.direction {
                Direction::AtMost => 1.0,
                Direction::AtLeast => -1.0,
            };
            rows.push((c.metric, sign * self.scales[c.metric]));
        }
        rows
    }

    /// Bounds in `<=` orientation.
    pub fn bounds(&self) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| match c.direction {
                Direction::AtMost => c.threshold,
                Direction::AtLeast => -c.threshold,
            })
            .collect()
    }

    /// Problem-row value back in user orientation: the policy's scaled
    /// effect on each constrained metric.
    pub fn constraint_effects(&self, upper_form_values: &[f64]) -> Vec<f64> {
        self.constraints
            .iter()
            .zip(upper_form_values)
            .zip(self.bounds())
            .map(|((c, v), b)| {
                let lhs = v + b;
                match c.direction {
                    Direction::AtMost => lhs,
                    Direction::AtLeast => -lhs,
                }
            })
            .collect()
    }
}

/// Per-cohort effects of every treatment on every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEffects {
    pub cohorts: CohortSet,
    /// Population share of each cohort.
    pub shares: Vec<f64>,
    /// `effects[cohort][metric][treatment - 1]`.
    pub effects: Vec<Vec<Vec<EffectEstimate>>>,
}

fn shares(cohorts: &CohortSet, ds: &ExperimentDataset) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; cohorts.len()];
    for c in cohorts.assign_all(ds.units().iter().map(|u| u.features.as_slice()))? {
        counts[c] += 1;
    }
    let n = ds.n_units() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Difference in means; a cell with fewer than two units in either arm
/// carries no evidence and gets a zero effect with zero variance.
fn cell_estimate(treat: &[f64], control: &[f64]) -> EffectEstimate {
    if treat.len() < 2 || control.len() < 2 {
        return EffectEstimate {
            tau: 0.0,
            var: 0.0,
            n_treat: 0,
            n_control: 0,
            var_treat: 0.0,
            var_control: 0.0,
        };
    }
    EffectEstimate::from_samples(treat, control)
}

impl CohortEffects {
    /// Effects inherited from a merged table; shares measured on `ds`.
    pub fn from_table(cohorts: CohortSet, table: &EffectTable, ds: &ExperimentDataset) -> Result<Self> {
        let effects = (0..cohorts.len())
            .map(|c| {
                (0..ds.n_metrics())
                    .map(|k| {
                        (1..=ds.n_treatments())
                            .map(|j| {
                                table
                                    .get(c, SourceKey { treatment: j, metric: k })
                                    .copied()
                                    .ok_or_else(|| {
                                        Error::Validation(format!("effect table lacks treatment {j}, metric {k}"))
                                    })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CohortEffects {
            shares: shares(&cohorts, ds)?,
            cohorts,
            effects,
        })
    }

    /// Difference-in-means effects computed on `ds` within each cohort.
    pub fn direct(cohorts: CohortSet, ds: &ExperimentDataset) -> Result<Self> {
        let n_c = cohorts.len();
        let arms = ds.n_arms();
        // outcomes[cohort][arm][metric] -> values
        let mut outcomes: Vec<Vec<Vec<Vec<f64>>>> = vec![vec![vec![Vec::new(); ds.n_metrics()]; arms]; n_c];
        let assigned = cohorts.assign_all(ds.units().iter().map(|u| u.features.as_slice()))?;
        for (u, c) in ds.units().iter().zip(assigned) {
            for (k, &y) in u.outcomes.iter().enumerate() {
                outcomes[c][u.variant][k].push(y);
            }
        }
        let effects = outcomes
            .iter()
            .map(|by_arm| {
                (0..ds.n_metrics())
                    .map(|k| {
                        (1..arms)
                            .map(|j| cell_estimate(&by_arm[j][k], &by_arm[CONTROL][k]))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(CohortEffects {
            shares: shares(&cohorts, ds)?,
            cohorts,
            effects,
        })
    }

    pub fn n_treatments(&self) -> usize {
        self.effects.first().and_then(|e| e.first()).map_or(0, Vec::len)
    }

    /// Cells in problem units, ready for the solver or the bootstrap.
    pub fn bootstrap_input(
        &self,
        spec: &ProblemSpec,
        solver: BootstrapSolver,
        replicates: usize,
        seed: u64,
    ) -> BootstrapInput {
        let options = self.n_treatments() + 1;
        let cells = spec
            .rows()
            .into_iter()
            .map(|(metric, mult)| {
                let mut row = Vec::with_capacity(self.cohorts.len() * options);
                for (c, share) in self.shares.iter().enumerate() {
                    row.push(CellStats::fixed(0.0));
                    for e in &self.effects[c][metric] {
                        let s = share * mult;
                        row.push(CellStats {
                            mu_hat: s * e.tau,
                            var_treat: s * s * e.var_treat,
                            var_control: s * s * e.var_control,
                            n_treat: e.n_treat,
                            n_control: e.n_control,
                        });
                    }
                }
                row
            })
            .collect();
        BootstrapInput {
            n: self.cohorts.len(),
            n_options: options,
            cells,
            c: spec.bounds(),
            solver,
            replicates,
            seed,
            keep_samples: false,
        }
    }

    pub fn stochastic_problem(&self, spec: &ProblemSpec) -> StochasticProblem {
        self.bootstrap_input(spec, BootstrapSolver::Deterministic, 1, 0).problem()
    }
}

/// Member-level problem: one row per member, weight `1 / n`.
pub fn member_problem(effects: &MemberEffects, spec: &ProblemSpec) -> Result<DeterministicProblem> {
    spec.validate(effects.n_metrics)?;
    let n = effects.tau.len();
    if n == 0 {
        return Err(Error::InsufficientData("no members to optimize over".into()));
    }
    let options = effects.n_treatments + 1;
    let mu_hat = spec
        .rows()
        .into_iter()
        .map(|(metric, mult)| {
            let w = mult / n as f64;
            let mut v = Vec::with_capacity(n * options);
            for member in &effects.tau {
                v.push(0.0);
                v.extend(member[metric].iter().map(|t| w * t));
            }
            v
        })
        .collect();
    DeterministicProblem::new(n, options, mu_hat, spec.bounds())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_round_trip() {
        let spec = ProblemSpec {
            objective: 0,
            constraints: vec![
                Constraint {
                    metric: 1,
                    direction: Direction::AtLeast,
                    threshold: -0.01,
                },
                Constraint {
                    metric: 2,
                    direction: Direction::AtMost,
                    threshold: 0.02,
                },
            ],
            scales: vec![1.0, 0.5, 2.0],
        };
        assert_eq!(spec.rows(), vec![(0, 1.0), (1, -0.5), (2, 2.0)]);
        assert_eq!(spec.bounds(), vec![0.01, 0.02]);
        // x . mu_1 = -0.3 means an effect of +0.3 on metric 1
        let eff = spec.constraint_effects(&[-0.3 - 0.01, 0.5 - 0.02]);
        assert!((eff[0] - 0.3).abs() < 1e-12 && (eff[1] - 0.5).abs() < 1e-12);
    }
}
