//! Sample average approximation: the assignment LP on point estimates
//!
//! ```text
//! maximize  x . mu_0   subject to  x . mu_k <= c_k,  rows of x on the simplex
//! ```
//!
//! Small instances go to the revised simplex on the full standard form.
//! Large ones (typically one row per member) use column generation over the
//! vertices of the product of simplices: the master has only `K + 1` rows
//! and pricing is a per-row argmax, so the work grows linearly in the
//! number of rows.
//!
//! Whatever the path, the answer is certified independently. Given the
//! constraint multipliers `lambda >= 0`, the row multipliers are
//! `v_i = max_j (mu_0ij - lambda . mu_ij)` and
//! `D = sum_i v_i + lambda . c` bounds every feasible objective from above.
//! The solution is declared optimal only when it is primal feasible and
//! `D` matches its objective.

use serde::{Deserialize, Serialize};

use super::lp::{self, LpStatus, SparseColumn, StandardLp};
use crate::error::{Error, Result};
use crate::problem::{AssignmentPolicy, DeterministicProblem};

/// Rows above which the full simplex gives way to column generation.
pub const SIMPLEX_MAX_ROWS: usize = 600;
const MAX_COLUMN_ROUNDS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpMethod {
    #[default]
    Auto,
    Simplex,
    ColumnGeneration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub policy: AssignmentPolicy,
    pub objective: f64,
    /// `K` constraint multipliers followed by `n` row multipliers.
    pub duals: Vec<f64>,
    /// `|D - objective|` when optimal; the remaining total constraint
    /// excess when infeasible.
    pub gap: f64,
    pub status: SolutionStatus,
}

impl LpSolution {
    pub fn constraint_duals(&self, k: usize) -> &[f64] {
        &self.duals[..k]
    }
}

pub fn saa_solve(problem: &DeterministicProblem) -> Result<LpSolution> {
    saa_solve_with(problem, LpMethod::Auto)
}

pub fn saa_solve_with(problem: &DeterministicProblem, method: LpMethod) -> Result<LpSolution> {
    problem.validate()?;
    let rows = problem.n + problem.n_constraints();
    let use_simplex = match method {
        LpMethod::Auto => rows <= SIMPLEX_MAX_ROWS,
        LpMethod::Simplex => true,
        LpMethod::ColumnGeneration => false,
    };
    if use_simplex {
        solve_simplex(problem)
    } else {
        solve_column_generation(problem)
    }
}

/// Objective, primal feasibility and the dual bound for `x` and `lambda`.
pub fn certify(problem: &DeterministicProblem, x: &AssignmentPolicy, lambda: &[f64]) -> (f64, Vec<f64>, f64, bool) {
    let j = problem.n_options;
    let lambda: Vec<f64> = lambda.iter().map(|l| l.max(0.0)).collect();
    let mut v = Vec::with_capacity(problem.n);
    for i in 0..problem.n {
        let best = (0..j)
            .map(|q| reduced_value(problem, &lambda, i * j + q))
            .fold(f64::NEG_INFINITY, f64::max);
        v.push(best);
    }
    let dual_bound: f64 = v.iter().sum::<f64>() + lambda.iter().zip(&problem.c).map(|(l, c)| l * c).sum::<f64>();
    let objective = problem.objective(x);
    let rows_ok = x.validate(1e-8).is_ok();
    let cons_ok = problem
        .constraint_values(x)
        .iter()
        .zip(&problem.c)
        .all(|(g, c)| *g <= 1e-8 * c.abs().max(1.0));
    let mut duals = lambda;
    duals.extend(v);
    (objective, duals, (dual_bound - objective).abs(), rows_ok && cons_ok)
}

/// `mu_0 - lambda . mu_k` at flat index `idx`.
fn reduced_value(problem: &DeterministicProblem, lambda: &[f64], idx: usize) -> f64 {
    let mut val = problem.mu_hat[0][idx];
    for (l, mu) in lambda.iter().zip(&problem.mu_hat[1..]) {
        val -= l * mu[idx];
    }
    val
}

fn finish(problem: &DeterministicProblem, policy: AssignmentPolicy, lambda: &[f64]) -> Result<LpSolution> {
    let (objective, duals, gap, feasible) = certify(problem, &policy, lambda);
    if !feasible {
        return Err(Error::Numerical("LP solution failed the primal feasibility check".into()));
    }
    if gap > 1e-6 * (1.0 + objective.abs()) {
        return Err(Error::Numerical(format!("LP duality gap {gap:e} exceeds tolerance")));
    }
    Ok(LpSolution {
        policy,
        objective,
        duals,
        gap,
        status: SolutionStatus::Optimal,
    })
}

fn clean_rows(x: &mut [f64], n_options: usize) {
    for row in x.chunks_mut(n_options) {
        row.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / n_options as f64);
        }
    }
}

fn solve_simplex(problem: &DeterministicProblem) -> Result<LpSolution> {
    let (n, j, k) = (problem.n, problem.n_options, problem.n_constraints());
    let mut columns = Vec::with_capacity(n * j + k);
    let mut cost = Vec::with_capacity(n * j + k);
    for i in 0..n {
        for q in 0..j {
            let idx = i * j + q;
            let mut col = SparseColumn::default();
            col.push(i, 1.0);
            for (kk, mu) in problem.mu_hat[1..].iter().enumerate() {
                col.push(n + kk, mu[idx]);
            }
            columns.push(col);
            cost.push(problem.mu_hat[0][idx]);
        }
    }
    for kk in 0..k {
        let mut col = SparseColumn::default();
        col.push(n + kk, 1.0);
        columns.push(col);
        cost.push(0.0);
    }
    let mut b = vec![1.0; n];
    b.extend_from_slice(&problem.c);
    let out = lp::solve(&StandardLp { m: n + k, columns, cost, b })?;
    if out.status == LpStatus::Infeasible {
        // the column-generation phase one returns a point inside the domain
        // with the least total excess, which is the more useful diagnostic
        return solve_column_generation(problem);
    }
    let mut x = out.x[..n * j].to_vec();
    clean_rows(&mut x, j);
    let policy = AssignmentPolicy {
        n_rows: n,
        n_options: j,
        x,
    };
    finish(problem, policy, &out.y[n..])
}

/// A vertex of the domain: one chosen option per row.
struct Vertex {
    choice: Vec<usize>,
    objective: f64,
    g: Vec<f64>,
}

impl Vertex {
    fn new(problem: &DeterministicProblem, choice: Vec<usize>) -> Self {
        let j = problem.n_options;
        let sum = |mu: &Vec<f64>| choice.iter().enumerate().map(|(i, &q)| mu[i * j + q]).sum::<f64>();
        Vertex {
            objective: sum(&problem.mu_hat[0]),
            g: problem.mu_hat[1..].iter().map(sum).collect(),
            choice,
        }
    }
}

/// Per row, the option maximizing `weight_0 * mu_0 - lambda . mu_k`; lowest
/// index on ties. Returns the choice and the summed value.
fn price(problem: &DeterministicProblem, weight_0: f64, lambda: &[f64]) -> (Vec<usize>, f64) {
    let j = problem.n_options;
    let mut total = 0.0;
    let choice = (0..problem.n)
        .map(|i| {
            let mut best = (0, f64::NEG_INFINITY);
            for q in 0..j {
                let idx = i * j + q;
                let mut val = weight_0 * problem.mu_hat[0][idx];
                for (l, mu) in lambda.iter().zip(&problem.mu_hat[1..]) {
                    val -= l * mu[idx];
                }
                if val > best.1 {
                    best = (q, val);
                }
            }
            total += best.1;
            best.0
        })
        .collect();
    (choice, total)
}

/// Master over the current vertices. Rows: `K` constraints then the
/// convexity row. Columns: vertex weights, slacks, and in phase one the
/// excess variables.
fn master(problem: &DeterministicProblem, vertices: &[Vertex], phase_one: bool) -> Result<lp::LpOutcome> {
    let k = problem.n_constraints();
    let mut columns = Vec::new();
    let mut cost = Vec::new();
    for v in vertices {
        let mut col = SparseColumn::default();
        for (kk, &g) in v.g.iter().enumerate() {
            col.push(kk, g);
        }
        col.push(k, 1.0);
        columns.push(col);
        cost.push(if phase_one { 0.0 } else { v.objective });
    }
    for kk in 0..k {
        let mut col = SparseColumn::default();
        col.push(kk, 1.0);
        columns.push(col);
        cost.push(0.0);
    }
    if phase_one {
        for kk in 0..k {
            let mut col = SparseColumn::default();
            col.push(kk, -1.0);
            columns.push(col);
            cost.push(-1.0);
        }
    }
    let mut b = problem.c.clone();
    b.push(1.0);
    lp::solve(&StandardLp {
        m: k + 1,
        columns,
        cost,
        b,
    })
}

fn combine(problem: &DeterministicProblem, vertices: &[Vertex], weights: &[f64]) -> AssignmentPolicy {
    let j = problem.n_options;
    let mut x = vec![0.0; problem.n * j];
    for (v, &w) in vertices.iter().zip(weights) {
        if w > 0.0 {
            for (i, &q) in v.choice.iter().enumerate() {
                x[i * j + q] += w;
            }
        }
    }
    clean_rows(&mut x, j);
    AssignmentPolicy {
        n_rows: problem.n,
        n_options: j,
        x,
    }
}

fn solve_column_generation(problem: &DeterministicProblem) -> Result<LpSolution> {
    let k = problem.n_constraints();
    let (start, _) = price(problem, 1.0, &vec![0.0; k]);
    let mut vertices = vec![Vertex::new(problem, start)];

    // phase one: least total excess over the convex hull of the vertices
    let mut rounds = 0;
    let phase_one = loop {
        rounds += 1;
        let out = master(problem, &vertices, true)?;
        let lambda = &out.y[..k];
        let pi = out.y[k];
        let (choice, value) = price(problem, 0.0, lambda);
        let tol = 1e-10 * (1.0 + value.abs() + pi.abs());
        if value - pi <= tol || rounds >= MAX_COLUMN_ROUNDS {
            break out;
        }
        vertices.push(Vertex::new(problem, choice));
    };
    let excess = -phase_one.objective;
    let c_scale = problem.c.iter().fold(1.0f64, |a, c| a.max(c.abs()));
    if excess > 1e-9 * c_scale {
        let policy = combine(problem, &vertices, &phase_one.x[..vertices.len()]);
        let (objective, duals, _, _) = certify(problem, &policy, &phase_one.y[..k]);
        return Ok(LpSolution {
            policy,
            objective,
            duals,
            gap: excess,
            status: SolutionStatus::Infeasible,
        });
    }

    rounds = 0;
    loop {
        rounds += 1;
        let out = master(problem, &vertices, false)?;
        if out.status == LpStatus::Infeasible {
            return Err(Error::Numerical("column generation master lost feasibility".into()));
        }
        let lambda: Vec<f64> = out.y[..k].to_vec();
        let pi = out.y[k];
        let (choice, value) = price(problem, 1.0, &lambda);
        let tol = 1e-10 * (1.0 + out.objective.abs());
        if value - pi <= tol || rounds >= MAX_COLUMN_ROUNDS {
            let policy = combine(problem, &vertices, &out.x[..vertices.len()]);
            return finish(problem, policy, &lambda);
        }
        vertices.push(Vertex::new(problem, choice));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve_both(p: &DeterministicProblem) -> [LpSolution; 2] {
        [
            saa_solve_with(p, LpMethod::Simplex).unwrap(),
            saa_solve_with(p, LpMethod::ColumnGeneration).unwrap(),
        ]
    }

    #[test]
    fn argmax_on_a_simplex() {
        let p = DeterministicProblem::new(1, 2, vec![vec![1.0, 2.0]], vec![]).unwrap();
        for s in solve_both(&p) {
            assert_eq!(s.status, SolutionStatus::Optimal);
            assert_eq!(s.policy.x, vec![0.0, 1.0]);
            assert!((s.objective - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn binding_constraint_mixes() {
        let p = DeterministicProblem::new(1, 2, vec![vec![1.0, 2.0], vec![0.0, 10.0]], vec![5.0]).unwrap();
        for s in solve_both(&p) {
            assert_eq!(s.status, SolutionStatus::Optimal);
            assert!((s.policy.x[0] - 0.5).abs() < 1e-9, "{:?}", s.policy.x);
            assert!((s.objective - 1.5).abs() < 1e-9);
            assert!((s.duals[0] - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn unreachable_constraint_is_infeasible() {
        let p = DeterministicProblem::new(1, 2, vec![vec![1.0, 2.0], vec![10.0, 10.0]], vec![5.0]).unwrap();
        for s in solve_both(&p) {
            assert_eq!(s.status, SolutionStatus::Infeasible);
            assert!((s.gap - 5.0).abs() < 1e-9);
            s.policy.validate(1e-9).unwrap();
        }
    }
}
