//! Proximal steps over a product of probability simplices.
//!
//! The step solves `argmin_z <gamma h, z> + B(z, x)` over row-stochastic
//! `z`. With `B(z, x) = |z - x|^2` this is a Euclidean projection of
//! `x - gamma h / 2`; with the Adagrad metric `B(z, x) = (z - x)' H (z - x)`
//! it is a diagonally weighted projection, solved per row by bisection on
//! the simplex multiplier.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProxKind {
    Sgd,
    Adagrad { delta: f64 },
}

impl Default for ProxKind {
    fn default() -> Self {
        ProxKind::Sgd
    }
}

impl ProxKind {
    pub fn adagrad() -> Self {
        ProxKind::Adagrad { delta: 1e-6 }
    }
}

/// Euclidean projection of `v` onto the probability simplex, in place.
pub fn project_simplex(v: &mut [f64]) {
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).clamp(0.0, 1.0);
    }
    renormalize(v);
}

/// Minimizer of `sum_j w_j (z_j - y_j)^2` over the simplex, `w > 0`.
///
/// Optimality gives `z_j = max(0, y_j - nu / (2 w_j))`; the row sum is
/// nonincreasing in `nu`, so `nu` is bracketed and bisected, after which
/// the active set is solved exactly.
pub fn project_weighted_simplex(y: &[f64], w: &[f64], out: &mut [f64]) {
    let sum_at = |nu: f64| -> f64 { y.iter().zip(w).map(|(&yj, &wj)| (yj - nu / (2.0 * wj)).max(0.0)).sum() };
    let mut lo = y
        .iter()
        .zip(w)
        .map(|(&yj, &wj)| 2.0 * wj * (yj - 1.0))
        .fold(f64::INFINITY, f64::min);
    let mut hi = y
        .iter()
        .zip(w)
        .map(|(&yj, &wj)| 2.0 * wj * yj)
        .fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        if hi - lo <= 1e-10 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if sum_at(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let nu = 0.5 * (lo + hi);
    // exact multiplier on the active set identified by bisection
    let (mut num, mut den) = (0.0, 0.0);
    for (&yj, &wj) in y.iter().zip(w) {
        if yj - nu / (2.0 * wj) > 0.0 {
            num += yj;
            den += 1.0 / (2.0 * wj);
        }
    }
    let nu = if den > 0.0 { (num - 1.0) / den } else { nu };
    for ((o, &yj), &wj) in out.iter_mut().zip(y).zip(w) {
        *o = (yj - nu / (2.0 * wj)).clamp(0.0, 1.0);
    }
    renormalize(out);
}

fn renormalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
    }
}

/// Stateful proximal operator for one solver run.
#[derive(Debug, Clone)]
pub struct Prox {
    kind: ProxKind,
    n_options: usize,
    /// Running sum of squared gradient entries (Adagrad only).
    sq_sum: Vec<f64>,
}

impl Prox {
    pub fn new(kind: ProxKind, dim: usize, n_options: usize) -> Self {
        let sq_sum = match kind {
            ProxKind::Sgd => Vec::new(),
            ProxKind::Adagrad { .. } => vec![0.0; dim],
        };
        Prox { kind, n_options, sq_sum }
    }

    /// Replace `x` by the proximal step along `h` with step size `gamma`.
    pub fn step(&mut self, x: &mut [f64], h: &[f64], gamma: f64) {
        let j = self.n_options;
        match self.kind {
            ProxKind::Sgd => {
                for (row, hrow) in x.chunks_mut(j).zip(h.chunks(j)) {
                    for (xv, hv) in row.iter_mut().zip(hrow) {
                        *xv -= 0.5 * gamma * hv;
                    }
                    project_simplex(row);
                }
            }
            ProxKind::Adagrad { delta } => {
                for (s, hv) in self.sq_sum.iter_mut().zip(h) {
                    *s += hv * hv;
                }
                let mut y = vec![0.0; j];
                let mut w = vec![0.0; j];
                for ((row, hrow), srow) in x.chunks_mut(j).zip(h.chunks(j)).zip(self.sq_sum.chunks(j)) {
                    for q in 0..j {
                        w[q] = delta + srow[q].sqrt();
                        y[q] = row[q] - gamma * hrow[q] / (2.0 * w[q]);
                    }
                    project_weighted_simplex(&y, &w, row);
                }
            }
        }
    }
}
