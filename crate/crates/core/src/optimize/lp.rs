//! Dense revised simplex for small standard-form linear programs
//!
//! ```text
//! maximize  cost . x   subject to  A x = b,  x >= 0
//! ```
//!
//! Two phases with one artificial variable per row. The basis inverse is
//! kept explicitly, updated by elementary row operations at every pivot and
//! rebuilt by Gauss-Jordan elimination every [`REFACTOR_EVERY`] pivots.
//! Pricing is Dantzig's rule (largest reduced cost, lowest index on ties)
//! until a run of degenerate pivots, after which Bland's rule takes over
//! for the rest of the phase so that cycling cannot occur.

use crate::error::{Error, Result};

const REFACTOR_EVERY: usize = 64;
const DEGENERATE_STREAK: usize = 50;
const PIVOT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseColumn {
    pub rows: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseColumn {
    pub fn push(&mut self, row: usize, val: f64) {
        if val != 0.0 {
            self.rows.push(row);
            self.vals.push(val);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StandardLp {
    pub m: usize,
    pub columns: Vec<SparseColumn>,
    pub cost: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpOutcome {
    pub status: LpStatus,
    /// Structural variables; for an infeasible program, the phase-one point.
    pub x: Vec<f64>,
    /// Row duals `y` with `A' y >= cost` at optimality.
    pub y: Vec<f64>,
    pub objective: f64,
    /// Sum of artificial values left by phase one.
    pub infeasibility: f64,
    pub pivots: usize,
}

struct Tableau<'a> {
    lp: &'a StandardLp,
    m: usize,
    n: usize,
    /// Row sign flips that make `b >= 0`.
    sign: Vec<f64>,
    b: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    /// Row-major `m x m`.
    binv: Vec<f64>,
    xb: Vec<f64>,
    pivots: usize,
    since_refactor: usize,
}

impl<'a> Tableau<'a> {
    fn new(lp: &'a StandardLp) -> Self {
        let m = lp.m;
        let n = lp.columns.len();
        let sign: Vec<f64> = lp.b.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
        let b: Vec<f64> = lp.b.iter().zip(&sign).map(|(v, s)| v * s).collect();
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        let mut is_basic = vec![false; n + m];
        is_basic[n..].iter_mut().for_each(|v| *v = true);
        Tableau {
            lp,
            m,
            n,
            sign,
            xb: b.clone(),
            b,
            basis: (n..n + m).collect(),
            is_basic,
            binv,
            pivots: 0,
            since_refactor: 0,
        }
    }

    /// Column `j` of the sign-adjusted constraint matrix, artificials
    /// included, as (row, value) pairs.
    fn column(&self, j: usize) -> Vec<(usize, f64)> {
        if j >= self.n {
            vec![(j - self.n, 1.0)]
        } else {
            let c = &self.lp.columns[j];
            c.rows
                .iter()
                .zip(&c.vals)
                .map(|(&r, &v)| (r, v * self.sign[r]))
                .collect()
        }
    }

    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut d = vec![0.0; m];
        for (i, v) in self.column(j) {
            for (r, dr) in d.iter_mut().enumerate() {
                *dr += self.binv[r * m + i] * v;
            }
        }
        d
    }

    fn duals(&self, cost: &dyn Fn(usize) -> f64) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (r, &bv) in self.basis.iter().enumerate() {
            let cb = cost(bv);
            if cb != 0.0 {
                for (i, yi) in y.iter_mut().enumerate() {
                    *yi += cb * self.binv[r * m + i];
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, y: &[f64], cost: &dyn Fn(usize) -> f64) -> f64 {
        let ay = if j >= self.n {
            y[j - self.n]
        } else {
            let c = &self.lp.columns[j];
            c.rows
                .iter()
                .zip(&c.vals)
                .map(|(&r, v)| y[r] * v * self.sign[r])
                .sum()
        };
        cost(j) - ay
    }

    fn pivot(&mut self, r: usize, q: usize, d: &[f64]) {
        let m = self.m;
        let piv = d[r];
        for v in &mut self.binv[r * m..(r + 1) * m] {
            *v /= piv;
        }
        let row_r: Vec<f64> = self.binv[r * m..(r + 1) * m].to_vec();
        for (i, &di) in d.iter().enumerate() {
            if i != r && di != 0.0 {
                for (v, rv) in self.binv[i * m..(i + 1) * m].iter_mut().zip(&row_r) {
                    *v -= di * rv;
                }
            }
        }
        let theta = self.xb[r] / piv;
        for (i, &di) in d.iter().enumerate() {
            if i != r {
                self.xb[i] -= theta * di;
                if self.xb[i] < 0.0 && self.xb[i] > -1e-11 {
                    self.xb[i] = 0.0;
                }
            }
        }
        self.xb[r] = theta;
        self.is_basic[self.basis[r]] = false;
        self.is_basic[q] = true;
        self.basis[r] = q;
        self.pivots += 1;
        self.since_refactor += 1;
    }

    /// Rebuild the basis inverse and basic values from scratch.
    fn refactor(&mut self) -> Result<()> {
        let m = self.m;
        // [B | I] -> [I | B^-1]
        let mut a = vec![0.0; m * m];
        for (c, &bv) in self.basis.iter().enumerate() {
            for (r, v) in self.column(bv) {
                a[r * m + c] = v;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for col in 0..m {
            let p = (col..m)
                .max_by(|&x, &y| a[x * m + col].abs().total_cmp(&a[y * m + col].abs()))
                .expect("nonempty range");
            if a[p * m + col].abs() < 1e-13 {
                return Err(Error::Numerical("simplex basis became singular".into()));
            }
            if p != col {
                for k in 0..m {
                    a.swap(p * m + k, col * m + k);
                    inv.swap(p * m + k, col * m + k);
                }
            }
            let piv = a[col * m + col];
            for k in 0..m {
                a[col * m + k] /= piv;
                inv[col * m + k] /= piv;
            }
            for r in 0..m {
                if r != col {
                    let f = a[r * m + col];
                    if f != 0.0 {
                        for k in 0..m {
                            a[r * m + k] -= f * a[col * m + k];
                            inv[r * m + k] -= f * inv[col * m + k];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        self.xb = (0..m)
            .map(|r| {
                let v: f64 = (0..m).map(|i| self.binv[r * m + i] * self.b[i]).sum();
                if v < 0.0 && v > -1e-11 {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        self.since_refactor = 0;
        Ok(())
    }

    /// Simplex iterations for `cost`; `allowed(j)` filters entering columns.
    fn optimize(&mut self, cost: &dyn Fn(usize) -> f64, allowed: &dyn Fn(usize) -> bool, scale: f64) -> Result<()> {
        let tol = 1e-10 * (1.0 + scale);
        let limit = 50 * (self.n + self.m) + 1000;
        let mut bland = false;
        let mut streak = 0;
        for _ in 0..limit {
            if self.since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
            }
            let y = self.duals(cost);
            let mut entering: Option<(usize, f64)> = None;
            for j in 0..self.n + self.m {
                if self.is_basic[j] || !allowed(j) {
                    continue;
                }
                let d = self.reduced_cost(j, &y, cost);
                if d > tol {
                    if bland {
                        entering = Some((j, d));
                        break;
                    }
                    if entering.is_none_or(|(_, best)| d > best) {
                        entering = Some((j, d));
                    }
                }
            }
            let Some((q, _)) = entering else {
                return Ok(());
            };
            let d = self.ftran(q);
            let mut leave: Option<(usize, f64)> = None;
            for (r, &dr) in d.iter().enumerate() {
                if dr > PIVOT_TOL {
                    let ratio = self.xb[r].max(0.0) / dr;
                    let better = match leave {
                        None => true,
                        Some((lr, best)) => {
                            ratio < best - 1e-12 || (ratio <= best + 1e-12 && self.basis[r] < self.basis[lr])
                        }
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            let Some((r, theta)) = leave else {
                return Err(Error::Numerical("linear program is unbounded".into()));
            };
            if theta <= 1e-12 {
                streak += 1;
                if streak > DEGENERATE_STREAK {
                    bland = true;
                }
            } else {
                streak = 0;
            }
            self.pivot(r, q, &d);
        }
        Err(Error::Numerical("simplex iteration limit reached".into()))
    }

    /// Pivot zero-valued artificials out of the basis where possible.
    fn drive_out_artificials(&mut self) {
        let m = self.m;
        for r in 0..m {
            if self.basis[r] < self.n {
                continue;
            }
            let row: Vec<f64> = self.binv[r * m..(r + 1) * m].to_vec();
            let found = (0..self.n).find(|&j| {
                if self.is_basic[j] {
                    return false;
                }
                let c = &self.lp.columns[j];
                let alpha: f64 = c
                    .rows
                    .iter()
                    .zip(&c.vals)
                    .map(|(&i, v)| row[i] * v * self.sign[i])
                    .sum();
                alpha.abs() > 1e-7
            });
            if let Some(q) = found {
                let d = self.ftran(q);
                self.pivot(r, q, &d);
            }
        }
    }
}

pub fn solve(lp: &StandardLp) -> Result<LpOutcome> {
    if lp.b.len() != lp.m || lp.cost.len() != lp.columns.len() {
        return Err(Error::DimensionMismatch {
            expected: lp.m,
            actual: lp.b.len(),
        });
    }
    if lp.columns.iter().any(|c| c.rows.iter().any(|&r| r >= lp.m)) {
        return Err(Error::Validation("column entry outside the row range".into()));
    }
    let mut t = Tableau::new(lp);
    let n = t.n;
    let b_scale = t.b.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    // phase one: maximize minus the sum of artificials
    let phase1 = |j: usize| if j >= n { -1.0 } else { 0.0 };
    t.optimize(&phase1, &|_| true, 1.0)?;
    t.refactor()?;
    let infeasibility: f64 = t
        .basis
        .iter()
        .zip(&t.xb)
        .filter(|(&bv, _)| bv >= n)
        .map(|(_, &v)| v.max(0.0))
        .sum();
    let structural = |t: &Tableau| {
        let mut x = vec![0.0; n];
        for (&bv, &v) in t.basis.iter().zip(&t.xb) {
            if bv < n {
                x[bv] = v.max(0.0);
            }
        }
        x
    };
    if infeasibility > 1e-9 * (1.0 + b_scale) {
        let x = structural(&t);
        let y = t.duals(&phase1).iter().zip(&t.sign).map(|(v, s)| v * s).collect();
        return Ok(LpOutcome {
            status: LpStatus::Infeasible,
            objective: x.iter().zip(&lp.cost).map(|(a, c)| a * c).sum(),
            x,
            y,
            infeasibility,
            pivots: t.pivots,
        });
    }
    t.drive_out_artificials();
    t.refactor()?;

    let cost_scale = lp.cost.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let phase2 = |j: usize| if j >= n { 0.0 } else { lp.cost[j] };
    t.optimize(&phase2, &|j| j < n, cost_scale)?;
    t.refactor()?;
    let x = structural(&t);
    let y = t.duals(&phase2).iter().zip(&t.sign).map(|(v, s)| v * s).collect();
    Ok(LpOutcome {
        status: LpStatus::Optimal,
        objective: x.iter().zip(&lp.cost).map(|(a, c)| a * c).sum(),
        x,
        y,
        infeasibility,
        pivots: t.pivots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(entries: &[(usize, f64)]) -> SparseColumn {
        let mut c = SparseColumn::default();
        for &(r, v) in entries {
            c.push(r, v);
        }
        c
    }

    #[test]
    fn textbook_example() {
        // max 3x + 5y s.t. x + s1 = 4, 2y + s2 = 12, 3x + 2y + s3 = 18
        let lp = StandardLp {
            m: 3,
            columns: vec![
                col(&[(0, 1.0), (2, 3.0)]),
                col(&[(1, 2.0), (2, 2.0)]),
                col(&[(0, 1.0)]),
                col(&[(1, 1.0)]),
                col(&[(2, 1.0)]),
            ],
            cost: vec![3.0, 5.0, 0.0, 0.0, 0.0],
            b: vec![4.0, 12.0, 18.0],
        };
        let out = solve(&lp).unwrap();
        assert_eq!(out.status, LpStatus::Optimal);
        assert!((out.objective - 36.0).abs() < 1e-9);
        assert!((out.x[0] - 2.0).abs() < 1e-9 && (out.x[1] - 6.0).abs() < 1e-9);
        // strong duality
        let dual_obj: f64 = out.y.iter().zip(&lp.b).map(|(y, b)| y * b).sum();
        assert!((dual_obj - 36.0).abs() < 1e-9);
    }

    #[test]
    fn negative_rhs_and_infeasibility() {
        // x1 + x2 = 1 and -x1 - x2 = -2 cannot both hold
        let lp = StandardLp {
            m: 2,
            columns: vec![col(&[(0, 1.0), (1, -1.0)]), col(&[(0, 1.0), (1, -1.0)])],
            cost: vec![1.0, 1.0],
            b: vec![1.0, -2.0],
        };
        let out = solve(&lp).unwrap();
        assert_eq!(out.status, LpStatus::Infeasible);
        assert!(out.infeasibility > 0.5);
    }

    #[test]
    fn redundant_rows_are_tolerated() {
        let lp = StandardLp {
            m: 2,
            columns: vec![col(&[(0, 1.0), (1, 2.0)]), col(&[(0, 1.0), (1, 2.0)])],
            cost: vec![1.0, 2.0],
            b: vec![1.0, 2.0],
        };
        let out = solve(&lp).unwrap();
        assert_eq!(out.status, LpStatus::Optimal);
        assert!((out.objective - 2.0).abs() < 1e-12);
    }
}
