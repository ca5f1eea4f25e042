//! Parametric bootstrap of the optimal assignment.
//!
//! Instead of resampling members, every cell's mean and variance are drawn
//! from their sampling distributions and the assignment problem is solved
//! again. Means move by `sigma / sqrt(N) * Z` with
//! `sigma^2 = var_treat + var_control` and `N = n_treat + n_control`.
//! Variances are redrawn as `var_treat * X / n_treat + var_control * X' / n_control`
//! with `X ~ chi2(n_treat - 1)` and `X' ~ chi2(n_control - 1)`; the control
//! draw is shared by the treatments of a row that have the same control
//! count. For the deterministic solver only the means are redrawn.

use std::collections::BTreeMap;

use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{mcsa_solve, saa_solve, McsaConfig, SolutionStatus};
use crate::problem::{AssignmentPolicy, DeterministicProblem, StochasticProblem};
use crate::rng::{self, derive_seed, Rng};

/// Covariance is kept dense up to this many policy entries.
pub const DENSE_COVARIANCE_MAX: usize = 10_000;
/// Probability floor applied before taking logs.
pub const LOG_ODDS_FLOOR: f64 = 1e-6;
pub const DEFAULT_REPLICATES: usize = 200;

/// Summary statistics behind one entry of an effect vector, in the units
/// of the optimization problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mu_hat: f64,
    pub var_treat: f64,
    pub var_control: f64,
    /// Zero for a fixed cell (such as the control option), which is never
    /// resampled.
    pub n_treat: usize,
    pub n_control: usize,
}

impl CellStats {
    pub fn fixed(mu_hat: f64) -> Self {
        CellStats {
            mu_hat,
            var_treat: 0.0,
            var_control: 0.0,
            n_treat: 0,
            n_control: 0,
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.n_treat == 0 && self.n_control == 0
    }

    /// Standard error of `mu_hat`.
    pub fn se(&self) -> f64 {
        if self.is_fixed() {
            0.0
        } else {
            (self.var_treat / self.n_treat as f64 + self.var_control / self.n_control as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BootstrapSolver {
    Stochastic(McsaConfig),
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInput {
    pub n: usize,
    pub n_options: usize,
    /// `cells[metric][row * n_options + option]`, metric 0 the objective.
    pub cells: Vec<Vec<CellStats>>,
    /// Bounds in `x . mu_k <= c_k` form.
    pub c: Vec<f64>,
    pub solver: BootstrapSolver,
    pub replicates: usize,
    pub seed: u64,
    /// Keep every replicate's solution in the result.
    pub keep_samples: bool,
}

/// One redraw of every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Resample {
    pub mu: Vec<Vec<f64>>,
    /// Redrawn `sigma^2` per cell.
    pub var: Vec<Vec<f64>>,
    /// Redrawn per-arm variances `(treat, control)` per cell.
    pub arm_var: Vec<Vec<(f64, f64)>>,
}

impl Resample {
    /// Problem with the redrawn means and the standard errors implied by
    /// the redrawn arm variances.
    pub fn problem(&self, input: &BootstrapInput) -> StochasticProblem {
        let sigma = input
            .cells
            .iter()
            .zip(&self.arm_var)
            .map(|(cells, vars)| {
                cells
                    .iter()
                    .zip(vars)
                    .map(|(c, &(vt, vc))| {
                        if c.is_fixed() {
                            0.0
                        } else {
                            (vt / c.n_treat as f64 + vc / c.n_control as f64).sqrt()
                        }
                    })
                    .collect()
            })
            .collect();
        StochasticProblem {
            n: input.n,
            n_options: input.n_options,
            mu: self.mu.clone(),
            sigma,
            c: input.c.clone(),
        }
    }
}

impl BootstrapInput {
    pub fn validate(&self) -> Result<()> {
        let dim = self.n * self.n_options;
        if self.cells.is_empty() || self.cells.iter().any(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: self.cells.first().map_or(0, Vec::len),
            });
        }
        if self.c.len() + 1 != self.cells.len() {
            return Err(Error::DimensionMismatch {
                expected: self.cells.len() - 1,
                actual: self.c.len(),
            });
        }
        if self.replicates == 0 {
            return Err(Error::Config("bootstrap needs at least one replicate".into()));
        }
        for cell in self.cells.iter().flatten() {
            if !cell.is_fixed() && (cell.n_treat < 2 || cell.n_control < 2) {
                return Err(Error::Validation(
                    "bootstrap cells need at least two treated and two control units".into(),
                ));
            }
            if cell.var_treat < 0.0 || cell.var_control < 0.0 {
                return Err(Error::Validation("cell variances must be nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Problem on the original estimates.
    pub fn problem(&self) -> StochasticProblem {
        StochasticProblem {
            n: self.n,
            n_options: self.n_options,
            mu: self.cells.iter().map(|c| c.iter().map(|s| s.mu_hat).collect()).collect(),
            sigma: self.cells.iter().map(|c| c.iter().map(CellStats::se).collect()).collect(),
            c: self.c.clone(),
        }
    }

    fn means_only(&self) -> bool {
        matches!(self.solver, BootstrapSolver::Deterministic)
    }
}

/// Redraw every cell of `input` from `rng`.
pub fn resample_estimates(input: &BootstrapInput, rng: &mut Rng) -> Resample {
    let j = input.n_options;
    let means_only = input.means_only();
    let mut mu = Vec::with_capacity(input.cells.len());
    let mut var = Vec::with_capacity(input.cells.len());
    let mut arm_var = Vec::with_capacity(input.cells.len());
    for cells in &input.cells {
        let mut mu_k = Vec::with_capacity(cells.len());
        let mut var_k = Vec::with_capacity(cells.len());
        let mut arm_k = Vec::with_capacity(cells.len());
        for row in cells.chunks(j) {
            let mut control_draw: BTreeMap<usize, f64> = BTreeMap::new();
            for cell in row {
                if cell.is_fixed() {
                    mu_k.push(cell.mu_hat);
                    var_k.push(0.0);
                    arm_k.push((0.0, 0.0));
                    continue;
                }
                let sigma2 = cell.var_treat + cell.var_control;
                let n_total = (cell.n_treat + cell.n_control) as f64;
                let z: f64 = StandardNormal.sample(rng);
                mu_k.push(cell.mu_hat + (sigma2 / n_total).sqrt() * z);
                if means_only {
                    var_k.push(sigma2);
                    arm_k.push((cell.var_treat, cell.var_control));
                    continue;
                }
                let x_t = chi2(cell.n_treat - 1, rng);
                let x_c = *control_draw
                    .entry(cell.n_control)
                    .or_insert_with(|| chi2(cell.n_control - 1, rng));
                let vt = cell.var_treat * x_t / cell.n_treat as f64;
                let vc = cell.var_control * x_c / cell.n_control as f64;
                var_k.push(vt + vc);
                arm_k.push((vt, vc));
            }
        }
        mu.push(mu_k);
        var.push(var_k);
        arm_var.push(arm_k);
    }
    Resample { mu, var, arm_var }
}

/// Redraw for replicate `b` on its own stream of `input.seed`.
pub fn resample_replicate(input: &BootstrapInput, b: usize) -> Resample {
    resample_estimates(input, &mut rng::stream(input.seed, b as u64))
}

fn chi2(df: usize, rng: &mut Rng) -> f64 {
    ChiSquared::new(df as f64)
        .expect("positive degrees of freedom")
        .sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Covariance {
    /// Row-major `d x d`.
    Dense(Vec<f64>),
    Diagonal(Vec<f64>),
}

impl Covariance {
    pub fn diagonal(&self, dim: usize) -> Vec<f64> {
        match self {
            Covariance::Dense(m) => (0..dim).map(|i| m[i * dim + i]).collect(),
            Covariance::Diagonal(d) => d.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub x_hat: AssignmentPolicy,
    pub x_bar: AssignmentPolicy,
    pub var_hat: Covariance,
    /// `x_bar - x_hat`.
    pub bias_hat: Vec<f64>,
    pub x_corrected: AssignmentPolicy,
    pub replicates: usize,
    pub failures: usize,
    pub samples: Option<Vec<Vec<f64>>>,
}

/// Per-row JSON summary of a bootstrap run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub replicates: usize,
    pub failures: usize,
    pub bias: Vec<Vec<f64>>,
    pub variance: Vec<Vec<f64>>,
    pub bias_l1: f64,
}

impl BootstrapResult {
    pub fn report(&self) -> BootstrapReport {
        let j = self.x_hat.n_options;
        let diag = self.var_hat.diagonal(self.bias_hat.len());
        BootstrapReport {
            replicates: self.replicates,
            failures: self.failures,
            bias: self.bias_hat.chunks(j).map(<[f64]>::to_vec).collect(),
            variance: diag.chunks(j).map(<[f64]>::to_vec).collect(),
            bias_l1: self.bias_hat.iter().map(|b| b.abs()).sum(),
        }
    }
}

fn solve(input: &BootstrapInput, problem: &StochasticProblem, seed: u64) -> Result<AssignmentPolicy> {
    match &input.solver {
        BootstrapSolver::Deterministic => {
            let det: DeterministicProblem = problem.deterministic();
            let sol = saa_solve(&det)?;
            match sol.status {
                SolutionStatus::Optimal => Ok(sol.policy),
                SolutionStatus::Infeasible => Err(Error::Infeasible("resampled problem is infeasible".into())),
            }
        }
        BootstrapSolver::Stochastic(cfg) => {
            let cfg = McsaConfig { seed, ..cfg.clone() };
            Ok(mcsa_solve(problem, &cfg)?.policy)
        }
    }
}

/// Solve on the original estimates and on `replicates` redraws.
///
/// Replicate `b` draws from its own stream, so the result does not depend
/// on scheduling. Failed re-solves are skipped; more than 20% failures is
/// an error.
pub fn bootstrap_assignments(input: &BootstrapInput) -> Result<BootstrapResult> {
    input.validate()?;
    let base_seed = match &input.solver {
        BootstrapSolver::Stochastic(cfg) => cfg.seed,
        BootstrapSolver::Deterministic => 0,
    };
    let x_hat = solve(input, &input.problem(), base_seed)?;
    let draws: Vec<Option<Vec<f64>>> = (0..input.replicates)
        .into_par_iter()
        .map(|b| {
            let resample = resample_replicate(input, b);
            let problem = resample.problem(input);
            solve(input, &problem, derive_seed(base_seed, b as u64 + 1))
                .ok()
                .map(|p| p.x)
        })
        .collect();
    let total = draws.len();
    let ok: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let failures = total - ok.len();
    if ok.is_empty() || failures * 5 > total {
        return Err(Error::BootstrapUnstable { failed: failures, total });
    }
    // work with deviations from x_hat so identical replicates give exact zeros
    let dim = x_hat.x.len();
    let count = ok.len() as f64;
    let dev: Vec<Vec<f64>> = ok
        .iter()
        .map(|s| s.iter().zip(&x_hat.x).map(|(a, h)| a - h).collect())
        .collect();
    let mut bias_hat = vec![0.0; dim];
    for d in &dev {
        for (b, v) in bias_hat.iter_mut().zip(d) {
            *b += v;
        }
    }
    bias_hat.iter_mut().for_each(|b| *b /= count);
    let centered = |d: &[f64]| -> Vec<f64> { d.iter().zip(&bias_hat).map(|(a, m)| a - m).collect() };
    let var_hat = if dim <= DENSE_COVARIANCE_MAX {
        let mut cov = vec![0.0; dim * dim];
        for d in &dev {
            let d = centered(d);
            for (a, da) in d.iter().enumerate() {
                if *da != 0.0 {
                    for (b, db) in d.iter().enumerate() {
                        cov[a * dim + b] += da * db;
                    }
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= count);
        Covariance::Dense(cov)
    } else {
        let mut diag = vec![0.0; dim];
        for d in &dev {
            for (v, a) in diag.iter_mut().zip(centered(d)) {
                *v += a * a;
            }
        }
        diag.iter_mut().for_each(|v| *v /= count);
        Covariance::Diagonal(diag)
    };
    let x_bar = AssignmentPolicy {
        n_rows: x_hat.n_rows,
        n_options: x_hat.n_options,
        x: x_hat.x.iter().zip(&bias_hat).map(|(h, b)| h + b).collect(),
    };
    let x_corrected = bias_correct(&x_hat, &x_bar);
    Ok(BootstrapResult {
        x_hat,
        x_bar,
        var_hat,
        bias_hat,
        x_corrected,
        replicates: total,
        failures,
        samples: input.keep_samples.then_some(ok),
    })
}

/// Centered log-probabilities of a row after flooring at
/// [`LOG_ODDS_FLOOR`] and renormalizing.
fn log_odds(row: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = row.iter().map(|p| p.max(LOG_ODDS_FLOOR)).collect();
    let s: f64 = floored.iter().sum();
    let logs: Vec<f64> = floored.iter().map(|p| (p / s).ln()).collect();
    let m = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.into_iter().map(|l| l - m).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Subtract the bootstrap bias on the log-odds scale: per row,
/// `softmax(2 lo(x_hat) - lo(x_bar))`.
pub fn bias_correct(x_hat: &AssignmentPolicy, x_bar: &AssignmentPolicy) -> AssignmentPolicy {
    let x = x_hat
        .rows()
        .zip(x_bar.rows())
        .flat_map(|(h, b)| {
            let lh = log_odds(h);
            let lb = log_odds(b);
            let corrected: Vec<f64> = lh.iter().zip(&lb).map(|(a, c)| 2.0 * a - c).collect();
            softmax(&corrected)
        })
        .collect();
    AssignmentPolicy {
        n_rows: x_hat.n_rows,
        n_options: x_hat.n_options,
        x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(mu: f64, v: f64) -> CellStats {
        CellStats {
            mu_hat: mu,
            var_treat: v,
            var_control: v,
            n_treat: 50,
            n_control: 60,
        }
    }

    #[test]
    fn reflection_on_two_options() {
        let x_hat = AssignmentPolicy::uniform(1, 2);
        let x_bar = AssignmentPolicy::new(1, 2, vec![0.6, 0.4]).unwrap();
        let c = bias_correct(&x_hat, &x_bar);
        assert!((c.x[0] - 0.4).abs() < 1e-12 && (c.x[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_bias_is_identity() {
        let x = AssignmentPolicy::new(2, 3, vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        let c = bias_correct(&x, &x);
        for (a, b) in c.x.iter().zip(&x.x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_has_no_spread() {
        let input = BootstrapInput {
            n: 2,
            n_options: 2,
            cells: vec![
                vec![CellStats::fixed(0.0), cell(1.0, 0.0), CellStats::fixed(0.0), cell(-1.0, 0.0)],
                vec![CellStats::fixed(0.0), cell(0.5, 0.0), CellStats::fixed(0.0), cell(-0.2, 0.0)],
            ],
            c: vec![0.4],
            solver: BootstrapSolver::Deterministic,
            replicates: 20,
            seed: 3,
            keep_samples: false,
        };
        let r = bootstrap_assignments(&input).unwrap();
        assert!(r.bias_hat.iter().all(|&b| b == 0.0));
        assert!(r.var_hat.diagonal(4).iter().all(|&v| v == 0.0));
        assert_eq!(r.failures, 0);
    }

    #[test]
    fn small_cells_are_rejected() {
        let mut bad = cell(1.0, 1.0);
        bad.n_treat = 1;
        let input = BootstrapInput {
            n: 1,
            n_options: 2,
            cells: vec![vec![CellStats::fixed(0.0), bad]],
            c: vec![],
            solver: BootstrapSolver::Deterministic,
            replicates: 5,
            seed: 0,
            keep_samples: false,
        };
        assert!(matches!(bootstrap_assignments(&input), Err(Error::Validation(_))));
    }
}
