//! Synthetic experiments with known counterfactuals.
//!
//! Each unit has `M` standard normal heterogeneity variables `H`. Under
//! arm `a` its outcome on metric `k` is
//!
//! ```text
//! Y_k(a) = baseline + sum_j W[j][k] * (1[a = j] * H[m(j)]^2 + U) + e_k
//! ```
//!
//! with `U ~ Normal(0, (w s_U)^2)` and `e_k ~ Normal(0, (w s_Y)^2)` shared by
//! all arms of the unit, `w` the uncertainty weight. The baseline keeps the
//! control mean away from zero so effects can be normalized by it.

mod comparison;
mod evaluate;

pub use comparison::{
    run_comparison, CellResult, ComparisonConfig, ComparisonResult, SummaryRow,
};
pub use evaluate::{evaluate_policy, unit_policy, PolicyEvaluation};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ExperimentDataset, Unit};
use crate::error::{Error, Result};
use crate::optimize::{saa_solve, SolutionStatus};
use crate::problem::DeterministicProblem;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_treatments: usize,
    pub n_guardrails: usize,
    pub n_heterogeneity: usize,
    pub n_units: usize,
    /// `weights[j - 1][k]`: effect weight of treatment `j` on metric `k`.
    pub weights: Vec<Vec<f64>>,
    pub uncertainty_weight: f64,
    /// Heterogeneity variable driving each treatment, `h_assignment[j - 1]`.
    pub h_assignment: Vec<usize>,
    pub baseline: f64,
    pub noise_u: f64,
    pub noise_y: f64,
    pub seed: u64,
}

impl SimConfig {
    /// `J` treatments, `K` guardrails, `M = 4`, treatment `j` driven by
    /// `H[(j - 1) mod M]`, unit noise scales and baseline 10.
    pub fn new(weights: Vec<Vec<f64>>, n_guardrails: usize, n_units: usize, uncertainty_weight: f64, seed: u64) -> Self {
        let n_treatments = weights.len();
        let m = 4;
        SimConfig {
            n_treatments,
            n_guardrails,
            n_heterogeneity: m,
            n_units,
            weights,
            uncertainty_weight,
            h_assignment: (0..n_treatments).map(|j| j % m).collect(),
            baseline: 10.0,
            noise_u: 1.0,
            noise_y: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k1 = self.n_guardrails + 1;
        if self.n_treatments == 0 || self.n_heterogeneity == 0 || self.n_units < 2 {
            return Err(Error::Config("simulation needs treatments, heterogeneity variables and units".into()));
        }
        if self.weights.len() != self.n_treatments || self.weights.iter().any(|w| w.len() != k1) {
            return Err(Error::Config(format!(
                "weights must be {} x {k1}",
                self.n_treatments
            )));
        }
        if self.h_assignment.len() != self.n_treatments || self.h_assignment.iter().any(|&m| m >= self.n_heterogeneity) {
            return Err(Error::Config("h_assignment must map every treatment to a heterogeneity variable".into()));
        }
        if !(self.uncertainty_weight >= 0.0) || self.noise_u < 0.0 || self.noise_y < 0.0 {
            return Err(Error::Config("noise scales must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn metric_names(&self) -> Vec<String> {
        (0..=self.n_guardrails).map(|k| format!("y{k}")).collect()
    }

    pub fn feature_names(&self) -> Vec<String> {
        (1..=self.n_heterogeneity).map(|m| format!("h{m}")).collect()
    }
}

/// Draw a dataset with full counterfactuals. Heterogeneity variables,
/// arm assignment and noise use separate streams, so datasets that differ
/// only in the uncertainty weight share `H` and arms.
pub fn generate_dataset(cfg: &SimConfig) -> Result<ExperimentDataset> {
    cfg.validate()?;
    let mut h_rng = rng::stream(cfg.seed, 0);
    let mut arm_rng = rng::stream(cfg.seed, 1);
    let mut noise_rng = rng::stream(cfg.seed, 2);
    let sd_u = cfg.uncertainty_weight * cfg.noise_u;
    let sd_y = cfg.uncertainty_weight * cfg.noise_y;
    let k1 = cfg.n_guardrails + 1;
    let arms = cfg.n_treatments + 1;
    let units = (0..cfg.n_units)
        .map(|i| {
            let h: Vec<f64> = (0..cfg.n_heterogeneity).map(|_| StandardNormal.sample(&mut h_rng)).collect();
            let variant = arm_rng.random_range(0..arms);
            let u = normal(sd_u, &mut noise_rng);
            let eps: Vec<f64> = (0..k1).map(|_| normal(sd_y, &mut noise_rng)).collect();
            let cf: Vec<Vec<f64>> = (0..arms)
                .map(|a| {
                    (0..k1)
                        .map(|k| {
                            let mut y = cfg.baseline + eps[k];
                            for (j, w) in cfg.weights.iter().enumerate() {
                                let active = if a == j + 1 {
                                    let hv = h[cfg.h_assignment[j]];
                                    hv * hv
                                } else {
                                    0.0
                                };
                                y += w[k] * (active + u);
                            }
                            y
                        })
                        .collect()
                })
                .collect();
            Unit {
                id: format!("u{i}"),
                features: h,
                variant,
                outcomes: cf[variant].clone(),
                counterfactuals: Some(cf),
            }
        })
        .collect();
    ExperimentDataset::new(cfg.feature_names(), cfg.metric_names(), cfg.n_treatments, units)
}

fn normal(sd: f64, rng: &mut Rng) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    }
}

/// How [`draw_weights`] generates candidate weight matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightTemplate {
    /// Relative perturbation `W *= 1 + p * U(-1, 1)` applied per entry.
    pub perturbation: f64,
    /// Required share of the best single objective weight that the best
    /// population mixture must reach.
    pub min_mixture_gain: f64,
    pub max_attempts: usize,
}

impl Default for WeightTemplate {
    fn default() -> Self {
        WeightTemplate {
            perturbation: 0.0,
            min_mixture_gain: 0.25,
            max_attempts: 10_000,
        }
    }
}

/// Random weights in which objective and guardrails pull apart.
///
/// Objective weights are `|U(-1, 1)|`. Treatment `j` hurts guardrail
/// `((j - 1) mod K) + 1`, the last treatment hurts every guardrail, and the
/// rest are helped. A hurt has magnitude `W[j][0] * U(0.5, 1)`, so stronger
/// treatments do more damage; a help has magnitude `|U(-1, 1)|`. Draws are
/// rejected until the best population-level mixture of arms keeps every
/// guardrail nonnegative with all of them binding, and earns at least
/// `min_mixture_gain` of the largest objective weight.
pub fn draw_weights(n_treatments: usize, n_guardrails: usize, template: &WeightTemplate, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    for _ in 0..template.max_attempts {
        let mut w = vec![vec![0.0; n_guardrails + 1]; n_treatments];
        for (j, row) in w.iter_mut().enumerate() {
            row[0] = rng.random_range(-1.0f64..1.0).abs();
            for k in 1..=n_guardrails {
                let hurt = j % n_guardrails == k - 1 || j + 1 == n_treatments;
                row[k] = if hurt {
                    -row[0] * rng.random_range(0.5..1.0)
                } else {
                    rng.random_range(-1.0f64..1.0).abs()
                };
            }
            if template.perturbation > 0.0 {
                for v in row.iter_mut() {
                    *v *= 1.0 + template.perturbation * rng.random_range(-1.0..1.0);
                }
            }
        }
        if acceptable(&w, template.min_mixture_gain)? {
            return Ok(w);
        }
    }
    Err(Error::Config("no acceptable weight matrix within the attempt budget".into()))
}

fn acceptable(w: &[Vec<f64>], min_gain: f64) -> Result<bool> {
    let k = w[0].len() - 1;
    let mut mu = vec![vec![0.0]; k + 1];
    for row in w {
        mu[0].push(row[0]);
        for kk in 1..=k {
            mu[kk].push(-row[kk]);
        }
    }
    let p = DeterministicProblem::new(1, w.len() + 1, mu, vec![0.0; k])?;
    let sol = saa_solve(&p)?;
    let best = w.iter().map(|r| r[0]).fold(0.0, f64::max);
    Ok(sol.status == SolutionStatus::Optimal
        && sol.objective > min_gain * best
        && sol.duals[..k].iter().all(|&l| l > 1e-9))
}
