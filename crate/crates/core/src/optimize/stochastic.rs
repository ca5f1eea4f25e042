//! Cooperative stochastic approximation for expectation-constrained
//! assignment problems.
//!
//! Each iteration estimates every constraint from `L` draws. If all
//! estimates sit within tolerance the iterate moves along a sampled
//! objective gradient; otherwise it moves along the sampled gradient of one
//! violated constraint chosen uniformly at random. The answer is the
//! step-size-weighted average of the iterates that took objective steps.
//!
//! Internally the objective is minimized as `F(x) = -x . U_0`, so the
//! objective gradient sample is `-U_0` and a constraint gradient sample is
//! `U_k`.

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::prox::{Prox, ProxKind};
use crate::error::{Error, Result};
use crate::problem::{AssignmentPolicy, StochasticProblem};
use crate::rng::{self, Rng};

/// Base step size `gamma0`; the per-iteration step is `gamma0 / sqrt(N)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    Fixed(f64),
    /// `gamma0 = factor / rms`, where `rms` is the root mean square of the
    /// mean gradient entries. Makes the step invariant to the units of the
    /// effects.
    Scaled(f64),
}

/// How constraint estimates are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Average of `L` explicit draws of `U_k`.
    Explicit,
    /// One draw from the exact law of that average,
    /// `Normal(x . mu_k - c_k, sum x^2 sigma_k^2 / L)`.
    #[default]
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McsaConfig {
    pub iterations: usize,
    pub samples: usize,
    pub gamma0: StepSize,
    /// Base tolerances, one per constraint; `None` uses
    /// `0.05 |c_k| + 0.01`.
    pub eta0: Option<Vec<f64>>,
    pub prox: ProxKind,
    pub sampler: Sampler,
    pub seed: u64,
}

impl Default for McsaConfig {
    fn default() -> Self {
        McsaConfig {
            iterations: 10_000,
            samples: 50,
            gamma0: StepSize::Fixed(1.0),
            eta0: None,
            prox: ProxKind::Sgd,
            sampler: Sampler::Aggregated,
            seed: 0,
        }
    }
}

impl McsaConfig {
    pub fn validate(&self, n_constraints: usize) -> Result<()> {
        if self.iterations == 0 || self.samples == 0 {
            return Err(Error::Config("iterations and samples must be positive".into()));
        }
        match self.gamma0 {
            StepSize::Fixed(g) | StepSize::Scaled(g) if g > 0.0 && g.is_finite() => {}
            _ => return Err(Error::Config("gamma0 must be positive".into())),
        }
        if let ProxKind::Adagrad { delta } = self.prox {
            if !(delta > 0.0) {
                return Err(Error::Config("adagrad delta must be positive".into()));
            }
        }
        if let Some(eta) = &self.eta0 {
            if eta.len() != n_constraints {
                return Err(Error::Config(format!(
                    "eta0 has {} entries for {n_constraints} constraints",
                    eta.len()
                )));
            }
            if eta.iter().any(|&e| !(e >= 0.0)) {
                return Err(Error::Config("eta0 must be nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Base tolerances for `c`.
    pub fn eta0_for(&self, c: &[f64]) -> Vec<f64> {
        self.eta0
            .clone()
            .unwrap_or_else(|| c.iter().map(|ck| 0.05 * ck.abs() + 0.01).collect())
    }

    /// Per-iteration tolerances `eta0 / sqrt(N)`.
    pub fn tolerances(&self, c: &[f64]) -> Vec<f64> {
        let root = (self.iterations as f64).sqrt();
        self.eta0_for(c).into_iter().map(|e| e / root).collect()
    }

    /// Per-iteration step `gamma0 / sqrt(N)`.
    pub fn step(&self, problem: &StochasticProblem) -> f64 {
        let gamma0 = match self.gamma0 {
            StepSize::Fixed(g) => g,
            StepSize::Scaled(f) => {
                let (sum, count) = problem
                    .mu
                    .iter()
                    .flatten()
                    .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
                let rms = (sum / count as f64).sqrt();
                if rms > 0.0 {
                    f / rms
                } else {
                    f
                }
            }
        };
        gamma0 / (self.iterations as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Objective,
    /// Index into the constraints, zero based.
    Constraint(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: StepKind,
    pub g_hat: Vec<f64>,
    /// `x_t . mu_0` at the iterate the estimates were taken at.
    pub objective: f64,
}

impl TraceRecord {
    pub fn in_b(&self) -> bool {
        self.step == StepKind::Objective
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct McsaTrace {
    pub records: Vec<TraceRecord>,
    pub gamma: f64,
    pub tolerances: Vec<f64>,
}

impl McsaTrace {
    pub fn objective_steps(&self) -> usize {
        self.records.iter().filter(|r| r.in_b()).count()
    }

    /// CSV with columns `iteration,objective,g_1..g_K,step`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let k = self.tolerances.len();
        let mut header = vec!["iteration".to_string(), "objective".to_string()];
        header.extend((1..=k).map(|i| format!("g_{i}")));
        header.push("step".into());
        w.write_record(&header)?;
        for (t, r) in self.records.iter().enumerate() {
            let mut row = vec![(t + 1).to_string(), r.objective.to_string()];
            row.extend(r.g_hat.iter().map(|g| g.to_string()));
            row.push(match r.step {
                StepKind::Objective => "objective".into(),
                StepKind::Constraint(k) => format!("constraint_{}", k + 1),
            });
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<trace>", e))?;
        Ok(())
    }
}

/// Unbiased estimates `G_k = mean_l (x . U_kl) - c_k` of every constraint.
pub fn estimate_constraints(
    x: &[f64],
    problem: &StochasticProblem,
    samples: usize,
    sampler: Sampler,
    rng: &mut Rng,
) -> Vec<f64> {
    let l = samples as f64;
    (1..problem.mu.len())
        .map(|k| {
            let mu = &problem.mu[k];
            let sigma = &problem.sigma[k];
            let mean: f64 = x.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>() - problem.c[k - 1];
            match sampler {
                Sampler::Aggregated => {
                    let var: f64 = x.iter().zip(sigma).map(|(a, s)| a * a * s * s).sum();
                    if var == 0.0 {
                        mean
                    } else {
                        let z: f64 = StandardNormal.sample(rng);
                        mean + (var / l).sqrt() * z
                    }
                }
                Sampler::Explicit => {
                    // noise part of each draw: sum_ij x_ij sigma_ij z_ij
                    let active: Vec<f64> = x
                        .iter()
                        .zip(sigma)
                        .map(|(a, s)| a * s)
                        .filter(|v| *v != 0.0)
                        .collect();
                    if active.is_empty() {
                        return mean;
                    }
                    let mut noise = 0.0;
                    for _ in 0..samples {
                        for v in &active {
                            let z: f64 = StandardNormal.sample(rng);
                            noise += v * z;
                        }
                    }
                    mean + noise / l
                }
            }
        })
        .collect()
}

/// Result of [`mcsa_solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsaSolution {
    pub policy: AssignmentPolicy,
    /// `x_hat . mu_0`.
    pub objective: f64,
    pub trace: McsaTrace,
}

fn sample_gradient(mu: &[f64], sigma: &[f64], sign: f64, rng: &mut Rng, out: &mut [f64]) {
    for ((o, m), s) in out.iter_mut().zip(mu).zip(sigma) {
        let noise = if *s == 0.0 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        };
        *o = sign * (m + noise);
    }
}

/// Run the solver from the uniform policy.
///
/// Rows whose means and standard deviations are all zero never move, so
/// they are left out of the iterations and returned uniform.
pub fn mcsa_solve(problem: &StochasticProblem, cfg: &McsaConfig) -> Result<McsaSolution> {
    problem.validate()?;
    cfg.validate(problem.n_constraints())?;
    let gamma = cfg.step(problem);
    let j = problem.n_options;
    let active: Vec<usize> = (0..problem.n)
        .filter(|&i| {
            let span = i * j..(i + 1) * j;
            problem
                .mu
                .iter()
                .chain(&problem.sigma)
                .any(|v| v[span.clone()].iter().any(|&e| e != 0.0))
        })
        .collect();
    if active.len() == problem.n {
        return iterate(problem, cfg, gamma);
    }
    let pick = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|v| active.iter().flat_map(|&i| v[i * j..(i + 1) * j].iter().copied()).collect())
            .collect()
    };
    let reduced = StochasticProblem {
        n: active.len(),
        n_options: j,
        mu: pick(&problem.mu),
        sigma: pick(&problem.sigma),
        c: problem.c.clone(),
    };
    let sol = iterate(&reduced, cfg, gamma)?;
    let mut policy = AssignmentPolicy::uniform(problem.n, j);
    for (r, &i) in active.iter().enumerate() {
        policy.x[i * j..(i + 1) * j].copy_from_slice(sol.policy.row(r));
    }
    Ok(McsaSolution {
        objective: problem.objective(&policy),
        policy,
        trace: sol.trace,
    })
}

fn iterate(problem: &StochasticProblem, cfg: &McsaConfig, gamma: f64) -> Result<McsaSolution> {
    let n_iter = cfg.iterations;
    let eta = cfg.tolerances(&problem.c);
    let dim = problem.dim();
    let mut rng = rng::stream(cfg.seed, 0);
    let mut prox = Prox::new(cfg.prox, dim, problem.n_options);
    let mut x = AssignmentPolicy::uniform(problem.n, problem.n_options).x;
    let mut h = vec![0.0; dim];
    let mut acc = vec![0.0; dim];
    let mut weight = 0.0;
    let mut records = Vec::with_capacity(n_iter);
    let mut violated = Vec::with_capacity(eta.len());

    for _ in 0..n_iter {
        let g_hat = estimate_constraints(&x, problem, cfg.samples, cfg.sampler, &mut rng);
        violated.clear();
        violated.extend((0..eta.len()).filter(|&k| g_hat[k] > eta[k]));
        let objective = x.iter().zip(&problem.mu[0]).map(|(a, b)| a * b).sum();
        let step = if violated.is_empty() {
            for (a, xv) in acc.iter_mut().zip(&x) {
                *a += gamma * xv;
            }
            weight += gamma;
            sample_gradient(&problem.mu[0], &problem.sigma[0], -1.0, &mut rng, &mut h);
            StepKind::Objective
        } else {
            let k = violated[rng.random_range(0..violated.len())];
            sample_gradient(&problem.mu[k + 1], &problem.sigma[k + 1], 1.0, &mut rng, &mut h);
            StepKind::Constraint(k)
        };
        records.push(TraceRecord { step, g_hat, objective });
        prox.step(&mut x, &h, gamma);
    }

    let trace = McsaTrace {
        records,
        gamma,
        tolerances: eta,
    };
    if weight == 0.0 {
        return Err(Error::NoFeasibleProgress {
            iterations: n_iter,
            trace: Box::new(trace),
        });
    }
    let mut xhat: Vec<f64> = acc.iter().map(|a| a / weight).collect();
    for row in xhat.chunks_mut(problem.n_options) {
        row.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let policy = AssignmentPolicy {
        n_rows: problem.n,
        n_options: problem.n_options,
        x: xhat,
    };
    Ok(McsaSolution {
        objective: problem.objective(&policy),
        policy,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(mu: Vec<Vec<f64>>, c: Vec<f64>, n: usize, j: usize) -> StochasticProblem {
        let sigma = mu.iter().map(|m| vec![0.0; m.len()]).collect();
        StochasticProblem::new(n, j, mu, sigma, c).unwrap()
    }

    #[test]
    fn zero_sigma_estimate_is_exact() {
        let p = problem(vec![vec![0.0, 0.0], vec![2.0, 5.0]], vec![1.0], 1, 2);
        let mut rng = rng::stream(0, 0);
        for sampler in [Sampler::Explicit, Sampler::Aggregated] {
            assert_eq!(estimate_constraints(&[1.0, 0.0], &p, 10, sampler, &mut rng), vec![1.0]);
        }
    }

    #[test]
    fn unconstrained_argmax() {
        let p = problem(vec![vec![1.0, 5.0, 2.0]], vec![], 1, 3);
        let cfg = McsaConfig {
            iterations: 10_000,
            ..Default::default()
        };
        let sol = mcsa_solve(&p, &cfg).unwrap();
        assert!(sol.policy.x[1] >= 0.99, "{:?}", sol.policy.x);
        assert_eq!(sol.trace.objective_steps(), 10_000);
    }

    #[test]
    fn impossible_constraint_reports_trace() {
        let p = problem(vec![vec![1.0, 2.0], vec![10.0, 10.0]], vec![5.0], 1, 2);
        let cfg = McsaConfig {
            iterations: 100,
            ..Default::default()
        };
        match mcsa_solve(&p, &cfg) {
            Err(Error::NoFeasibleProgress { iterations, trace }) => {
                assert_eq!(iterations, 100);
                assert_eq!(trace.records.len(), 100);
                assert_eq!(trace.objective_steps(), 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trace_csv_has_one_row_per_iteration() {
        let p = problem(vec![vec![1.0, 2.0], vec![0.0, 10.0]], vec![5.0], 1, 2);
        let cfg = McsaConfig {
            iterations: 50,
            ..Default::default()
        };
        let sol = mcsa_solve(&p, &cfg).unwrap();
        let mut buf = Vec::new();
        sol.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 51);
        assert!(text.starts_with("iteration,objective,g_1,step"));
    }

    #[test]
    fn inert_rows_stay_uniform() {
        let p = problem(
            vec![vec![0.0, 0.0, 1.0, 3.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]],
            vec![0.5],
            3,
            2,
        );
        let sol = mcsa_solve(&p, &McsaConfig::default()).unwrap();
        assert_eq!(sol.policy.row(0), &[0.5, 0.5]);
        assert_eq!(sol.policy.row(2), &[0.5, 0.5]);
        assert!((sol.policy.row(1)[1] - 0.5).abs() < 0.05, "{:?}", sol.policy.x);
    }
}
