use serde::{Deserialize, Serialize};

use crate::cohort::CohortSet;
use crate::data::{ExperimentDataset, CONTROL};
use crate::error::{Error, Result};
use crate::problem::AssignmentPolicy;

/// True effect of a policy on every metric, relative to the mean control
/// potential outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub tau: Vec<f64>,
    /// Unnormalized average effect per metric.
    pub effect: Vec<f64>,
    pub control_mean: Vec<f64>,
}

/// Expand a policy to one row per unit of `ds`. Cohort policies look up
/// each unit's cohort; a policy without cohorts must already have one row
/// per unit.
pub fn unit_policy(policy: &AssignmentPolicy, cohorts: Option<&CohortSet>, ds: &ExperimentDataset) -> Result<AssignmentPolicy> {
    match cohorts {
        Some(set) => {
            if set.len() != policy.n_rows {
                return Err(Error::DimensionMismatch {
                    expected: set.len(),
                    actual: policy.n_rows,
                });
            }
            let mut x = Vec::with_capacity(ds.n_units() * policy.n_options);
            for c in set.assign_all(ds.units().iter().map(|u| u.features.as_slice()))? {
                x.extend_from_slice(policy.row(c));
            }
            Ok(AssignmentPolicy {
                n_rows: ds.n_units(),
                n_options: policy.n_options,
                x,
            })
        }
        None if policy.n_rows == ds.n_units() => Ok(policy.clone()),
        None => Err(Error::DimensionMismatch {
            expected: ds.n_units(),
            actual: policy.n_rows,
        }),
    }
}

/// `tau_k = (1/n) sum_i sum_j (Y_ijk - Y_i0k) x_ij / mean_i Y_i0k`, using
/// the counterfactuals of `ds`.
pub fn evaluate_policy(policy: &AssignmentPolicy, ds: &ExperimentDataset) -> Result<PolicyEvaluation> {
    if !ds.has_counterfactuals() {
        return Err(Error::Validation("policy evaluation needs counterfactual outcomes".into()));
    }
    if policy.n_rows != ds.n_units() || policy.n_options != ds.n_arms() {
        return Err(Error::DimensionMismatch {
            expected: ds.n_units() * ds.n_arms(),
            actual: policy.x.len(),
        });
    }
    let k = ds.n_metrics();
    let n = ds.n_units() as f64;
    let mut effect = vec![0.0; k];
    let mut control = vec![0.0; k];
    for (u, x) in ds.units().iter().zip(policy.rows()) {
        let cf = u.counterfactuals.as_ref().expect("checked above");
        for m in 0..k {
            let y0 = cf[CONTROL][m];
            control[m] += y0;
            effect[m] += x.iter().zip(cf).skip(1).map(|(p, y)| p * (y[m] - y0)).sum::<f64>();
        }
    }
    let effect: Vec<f64> = effect.into_iter().map(|e| e / n).collect();
    let control_mean: Vec<f64> = control.into_iter().map(|c| c / n).collect();
    let tau = effect
        .iter()
        .zip(&control_mean)
        .enumerate()
        .map(|(m, (e, c))| {
            if *c == 0.0 {
                Err(Error::ZeroControlMean { metric: m })
            } else {
                Ok(e / c)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyEvaluation {
        tau,
        effect,
        control_mean,
    })
}
