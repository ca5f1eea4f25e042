//! Assignment policies and the linear-in-`x` optimization problems.
//!
//! A policy has one row per cohort (or member) and one column per option;
//! rows live on the probability simplex. Problems are stored in the
//! constraint form `x . mu_k <= c_k`; [`Constraint`] converts user-facing
//! "at least" / "at most" thresholds into that form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-stochastic matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentPolicy {
    pub n_rows: usize,
    pub n_options: usize,
    pub x: Vec<f64>,
}

impl AssignmentPolicy {
    pub fn new(n_rows: usize, n_options: usize, x: Vec<f64>) -> Result<Self> {
        let p = AssignmentPolicy { n_rows, n_options, x };
        p.validate(1e-9)?;
        Ok(p)
    }

    pub fn uniform(n_rows: usize, n_options: usize) -> Self {
        AssignmentPolicy {
            n_rows,
            n_options,
            x: vec![1.0 / n_options as f64; n_rows * n_options],
        }
    }

    /// Every row puts all its mass on `option`.
    pub fn constant(n_rows: usize, n_options: usize, option: usize) -> Self {
        let mut x = vec![0.0; n_rows * n_options];
        for i in 0..n_rows {
            x[i * n_options + option] = 1.0;
        }
        AssignmentPolicy { n_rows, n_options, x }
    }

    /// Every row equal to `row`.
    pub fn repeated(n_rows: usize, row: &[f64]) -> Self {
        AssignmentPolicy {
            n_rows,
            n_options: row.len(),
            x: row.iter().copied().cycle().take(n_rows * row.len()).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_options..(i + 1) * self.n_options]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks(self.n_options)
    }

    /// Entries in `[-tol, 1 + tol]` and rows summing to one within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.n_options == 0 || self.x.len() != self.n_rows * self.n_options {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows * self.n_options,
                actual: self.x.len(),
            });
        }
        for (i, row) in self.rows().enumerate() {
            if row.iter().any(|&v| !(v >= -tol && v <= 1.0 + tol)) {
                return Err(Error::Validation(format!("policy row {i} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::Validation(format!("policy row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Inner product with a vector laid out like `x`.
    pub fn dot(&self, v: &[f64]) -> f64 {
        self.x.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    /// Largest entry of each row.
    pub fn row_max(&self) -> Vec<f64> {
        self.rows()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn l1_distance(&self, other: &AssignmentPolicy) -> f64 {
        self.x.iter().zip(&other.x).map(|(a, b)| (a - b).abs()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtLeast,
    AtMost,
}

/// A threshold on the policy's aggregate effect for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub metric: usize,
    pub direction: Direction,
    pub threshold: f64,
}

impl Constraint {
    /// Coefficients and bound in `<=` form for effect vector `mu`.
    pub fn to_upper_form(&self, mu: &[f64]) -> (Vec<f64>, f64) {
        match self.direction {
            Direction::AtMost => (mu.to_vec(), self.threshold),
            Direction::AtLeast => (mu.iter().map(|v| -v).collect(), -self.threshold),
        }
    }
}

fn check_layout(n: usize, n_options: usize, vectors: &[Vec<f64>], what: &str) -> Result<()> {
    if n == 0 || n_options == 0 {
        return Err(Error::Validation("problem needs at least one row and one option".into()));
    }
    if vectors.is_empty() {
        return Err(Error::Validation(format!("{what} needs an objective vector")));
    }
    for v in vectors {
        if v.len() != n * n_options {
            return Err(Error::DimensionMismatch {
                expected: n * n_options,
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("{what} contains a non-finite value")));
        }
    }
    Ok(())
}

/// `max x . mu_0` subject to `x . U_k <= c_k` in expectation, with
/// `U_k ~ Normal(mu_k, diag sigma_k^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticProblem {
    pub n: usize,
    pub n_options: usize,
    /// `mu[0]` is the objective, `mu[k]` for `k >= 1` the constraints.
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    /// One bound per constraint, `c[k - 1]` for `mu[k]`.
    pub c: Vec<f64>,
}

impl StochasticProblem {
    pub fn new(n: usize, n_options: usize, mu: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>, c: Vec<f64>) -> Result<Self> {
        let p = StochasticProblem {
            n,
            n_options,
            mu,
            sigma,
            c,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_constraints(&self) -> usize {
        self.mu.len().saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.n * self.n_options
    }

    pub fn validate(&self) -> Result<()> {
        check_layout(self.n, self.n_options, &self.mu, "mu")?;
        check_layout(self.n, self.n_options, &self.sigma, "sigma")?;
        if self.sigma.len() != self.mu.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mu.len(),
                actual: self.sigma.len(),
            });
        }
        if self.sigma.iter().flatten().any(|&s| s < 0.0) {
            return Err(Error::Validation("sigma must be nonnegative".into()));
        }
        if self.c.len() != self.n_constraints() {
            return Err(Error::DimensionMismatch {
                expected: self.n_constraints(),
                actual: self.c.len(),
            });
        }
        Ok(())
    }

    /// Same means, no variance.
    pub fn deterministic(&self) -> DeterministicProblem {
        DeterministicProblem {
            n: self.n,
            n_options: self.n_options,
            mu_hat: self.mu.clone(),
            c: self.c.clone(),
        }
    }

    pub fn objective(&self, x: &AssignmentPolicy) -> f64 {
        x.dot(&self.mu[0])
    }

    /// `x . mu_k - c_k` for each constraint.
    pub fn constraint_values(&self, x: &AssignmentPolicy) -> Vec<f64> {
        constraint_values(&self.mu, &self.c, x)
    }
}

fn constraint_values(mu: &[Vec<f64>], c: &[f64], x: &AssignmentPolicy) -> Vec<f64> {
    mu[1..].iter().zip(c).map(|(m, ck)| x.dot(m) - ck).collect()
}

/// Point-estimate version of [`StochasticProblem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicProblem {
    pub n: usize,
    pub n_options: usize,
    pub mu_hat: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl DeterministicProblem {
    pub fn new(n: usize, n_options: usize, mu_hat: Vec<Vec<f64>>, c: Vec<f64>) -> Result<Self> {
        let p = DeterministicProblem {
            n,
            n_options,
            mu_hat,
            c,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_constraints(&self) -> usize {
        self.mu_hat.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        check_layout(self.n, self.n_options, &self.mu_hat, "mu_hat")?;
        if self.c.len() != self.n_constraints() {
            return Err(Error::DimensionMismatch {
                expected: self.n_constraints(),
                actual: self.c.len(),
            });
        }
        if self.c.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("thresholds must be finite".into()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &AssignmentPolicy) -> f64 {
        x.dot(&self.mu_hat[0])
    }

    pub fn constraint_values(&self, x: &AssignmentPolicy) -> Vec<f64> {
        constraint_values(&self.mu_hat, &self.c, x)
    }

    /// Sum of positive constraint excesses.
    pub fn violation(&self, x: &AssignmentPolicy) -> f64 {
        self.constraint_values(x).iter().map(|v| v.max(0.0)).sum()
    }
}
