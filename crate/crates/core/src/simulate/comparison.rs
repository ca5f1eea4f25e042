use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{draw_weights, evaluate_policy, generate_dataset, unit_policy, SimConfig, WeightTemplate};
use crate::assemble::ProblemSpec;
use crate::error::{Error, Result};
use crate::methods::{fit_policy, FittedPolicy, Method, MethodConfig};
use crate::problem::{Constraint, Direction};
use crate::rng::{self, derive_seed};
use crate::stats::{mean, sample_variance};

/// Every method on fresh train and test draws, for each uncertainty weight
/// and repeat. Guardrails are metrics `1..=K`, each constrained to a
/// relative effect of at least `guardrail_threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub n_treatments: usize,
    pub n_guardrails: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub uncertainty_weights: Vec<f64>,
    pub repeats: usize,
    pub methods: Vec<Method>,
    pub method: MethodConfig,
    /// Fixed effect weights `[j - 1][k]`; drawn from `template` when absent.
    pub weights: Option<Vec<Vec<f64>>>,
    pub template: WeightTemplate,
    pub guardrail_threshold: f64,
    pub seed: u64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        let mut method = MethodConfig::default();
        method.mcsa.eta0 = Some(vec![0.02; 2]);
        ComparisonConfig {
            n_treatments: 3,
            n_guardrails: 2,
            n_train: 20_000,
            n_test: 20_000,
            uncertainty_weights: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            repeats: 10,
            methods: Method::ALL.to_vec(),
            method,
            weights: None,
            template: WeightTemplate::default(),
            guardrail_threshold: 0.0,
            seed: 0,
        }
    }
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.uncertainty_weights.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("comparison needs repeats, weights and methods".into()));
        }
        if self.n_guardrails == 0 || self.n_treatments == 0 {
            return Err(Error::Config("comparison needs treatments and guardrails".into()));
        }
        if let Some(eta) = &self.method.mcsa.eta0 {
            if eta.len() != self.n_guardrails {
                return Err(Error::Config("mcsa.eta0 needs one entry per guardrail".into()));
            }
        }
        Ok(())
    }

    fn constraints(&self) -> Vec<Constraint> {
        (1..=self.n_guardrails)
            .map(|metric| Constraint {
                metric,
                direction: Direction::AtLeast,
                threshold: self.guardrail_threshold,
            })
            .collect()
    }

    /// Effect weights used by the run.
    pub fn resolve_weights(&self) -> Result<Vec<Vec<f64>>> {
        match &self.weights {
            Some(w) => Ok(w.clone()),
            None => draw_weights(
                self.n_treatments,
                self.n_guardrails,
                &self.template,
                &mut rng::stream(self.seed, 0),
            ),
        }
    }
}

/// One method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub uncertainty_weight: f64,
    pub repeat: usize,
    /// Relative effect per metric on the test set; `None` if fitting failed.
    pub tau: Option<Vec<f64>>,
    /// For `Global`: whether the chosen arm looked feasible on train data.
    pub global_feasible: Option<bool>,
    pub n_cohorts: Option<usize>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub uncertainty_weight: f64,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub config: ComparisonConfig,
    pub weights: Vec<Vec<f64>>,
    pub cells: Vec<CellResult>,
}

pub fn run_comparison(cfg: &ComparisonConfig) -> Result<ComparisonResult> {
    cfg.validate()?;
    let weights = cfg.resolve_weights()?;
    let constraints = cfg.constraints();
    let jobs: Vec<(usize, f64)> = (0..cfg.repeats)
        .flat_map(|r| cfg.uncertainty_weights.iter().map(move |&w| (r, w)))
        .collect();
    let per_job = jobs
        .par_iter()
        .map(|&(repeat, w)| {
            let sim = |n, tag| {
                SimConfig::new(weights.clone(), cfg.n_guardrails, n, w, derive_seed(cfg.seed, tag))
            };
            let train = generate_dataset(&sim(cfg.n_train, 2 * repeat as u64 + 1))?;
            let test = generate_dataset(&sim(cfg.n_test, 2 * repeat as u64 + 2))?;
            let spec = ProblemSpec::normalized(&train, 0, constraints.clone())?;
            let method_cfg = MethodConfig {
                seed: derive_seed(cfg.seed, 100 + repeat as u64),
                ..cfg.method.clone()
            };
            let members: Vec<&[f64]> = test.units().iter().map(|u| u.features.as_slice()).collect();
            let cells = cfg
                .methods
                .iter()
                .map(|&method| {
                    let start = Instant::now();
                    let outcome = fit_policy(method, &train, &spec, &method_cfg, Some(&members)).and_then(|fitted| {
                        let per_unit = unit_policy(fitted.policy(), fitted.cohorts(), &test)?;
                        Ok((evaluate_policy(&per_unit, &test)?, fitted))
                    });
                    let mut cell = CellResult {
                        method,
                        uncertainty_weight: w,
                        repeat,
                        tau: None,
                        global_feasible: None,
                        n_cohorts: None,
                        error: None,
                        seconds: 0.0,
                    };
                    match outcome {
                        Ok((eval, fitted)) => {
                            cell.tau = Some(eval.tau);
                            cell.n_cohorts = fitted.cohorts().map(|c| c.len());
                            if let FittedPolicy::Global { choice, .. } = &fitted {
                                cell.global_feasible = Some(choice.feasible);
                            }
                        }
                        Err(e) => cell.error = Some(e.to_string()),
                    }
                    cell.seconds = start.elapsed().as_secs_f64();
                    cell
                })
                .collect::<Vec<_>>();
            Ok(cells)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonResult {
        config: cfg.clone(),
        weights,
        cells: per_job.into_iter().flatten().collect(),
    })
}

impl ComparisonResult {
    pub fn cell(&self, method: Method, uncertainty_weight: f64, repeat: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.uncertainty_weight == uncertainty_weight && c.repeat == repeat)
    }

    /// Mean and standard deviation across repeats for every method and weight.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(Method, u64), Vec<&CellResult>> = BTreeMap::new();
        for c in &self.cells {
            groups.entry((c.method, c.uncertainty_weight.to_bits())).or_default().push(c);
        }
        let k = self.config.n_guardrails + 1;
        let mut rows: Vec<SummaryRow> = groups
            .into_iter()
            .map(|((method, w), cells)| {
                let ok: Vec<&Vec<f64>> = cells.iter().filter_map(|c| c.tau.as_ref()).collect();
                let column = |m: usize| ok.iter().map(|t| t[m]).collect::<Vec<_>>();
                SummaryRow {
                    method,
                    uncertainty_weight: f64::from_bits(w),
                    mean: (0..k).map(|m| if ok.is_empty() { f64::NAN } else { mean(&column(m)) }).collect(),
                    sd: (0..k)
                        .map(|m| if ok.len() < 2 { f64::NAN } else { sample_variance(&column(m)).sqrt() })
                        .collect(),
                    successes: ok.len(),
                    failures: cells.len() - ok.len(),
                }
            })
            .collect();
        rows.sort_by(|a, b| {
            a.uncertainty_weight
                .total_cmp(&b.uncertainty_weight)
                .then(a.method.cmp(&b.method))
        });
        rows
    }

    pub fn write_long_csv(&self, path: &Path) -> Result<()> {
        let k = self.config.n_guardrails + 1;
        let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
        let mut header = vec!["method".to_string(), "uncertainty_weight".into(), "repeat".into()];
        header.extend((0..k).map(|m| format!("tau{m}")));
        header.extend(["global_feasible".into(), "n_cohorts".into(), "seconds".into(), "error".into()]);
        w.write_record(&header)?;
        for c in &self.cells {
            let mut rec = vec![c.method.to_string(), c.uncertainty_weight.to_string(), c.repeat.to_string()];
            match &c.tau {
                Some(t) => rec.extend(t.iter().map(f64::to_string)),
                None => rec.extend(std::iter::repeat_n(String::new(), k)),
            }
            rec.push(c.global_feasible.map_or(String::new(), |f| f.to_string()));
            rec.push(c.n_cohorts.map_or(String::new(), |n| n.to_string()));
            rec.push(format!("{:.3}", c.seconds));
            rec.push(c.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let k = self.config.n_guardrails + 1;
        let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
        let mut header = vec!["method".to_string(), "uncertainty_weight".into()];
        header.extend((0..k).map(|m| format!("tau{m}_mean")));
        header.extend((0..k).map(|m| format!("tau{m}_sd")));
        header.extend(["successes".into(), "failures".into()]);
        w.write_record(&header)?;
        for r in self.summary() {
            let mut rec = vec![r.method.to_string(), r.uncertainty_weight.to_string()];
            rec.extend(r.mean.iter().chain(&r.sd).map(f64::to_string));
            rec.push(r.successes.to_string());
            rec.push(r.failures.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// `comparison_long.csv`, `comparison_summary.csv` and `manifest.json`
    /// in `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_long_csv(&dir.join("comparison_long.csv"))?;
        self.write_summary_csv(&dir.join("comparison_summary.csv"))?;
        let manifest = serde_json::json!({
            "config": self.config,
            "weights": self.weights,
            "summary": self.summary(),
        });
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_comparison_runs_every_method() {
        let mut cfg = ComparisonConfig {
            n_train: 4000,
            n_test: 1000,
            uncertainty_weights: vec![0.0],
            repeats: 1,
            seed: 4,
            ..ComparisonConfig::default()
        };
        cfg.method.forest.n_trees = 5;
        cfg.method.regression.n_trees = 5;
        cfg.method.mcsa.iterations = 2000;
        let r = run_comparison(&cfg).unwrap();
        assert_eq!(r.cells.len(), 5);
        for c in &r.cells {
            assert!(c.tau.is_some(), "{} failed: {:?}", c.method, c.error);
        }
        let dir = tempfile::tempdir().unwrap();
        r.write_outputs(dir.path()).unwrap();
        assert!(dir.path().join("manifest.json").exists());
    }
}
