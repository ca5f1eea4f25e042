//! End-to-end treatment selection: estimate effects, merge cohorts,
//! optimize the assignment, correct its bias, and write a policy file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assemble::{member_problem, CohortEffects, ProblemSpec};
use crate::bootstrap::{bootstrap_assignments, BootstrapReport, BootstrapSolver};
use crate::causal_tree::EffectEstimate;
use crate::cohort::{Cohort, CohortIndex, CohortSet};
use crate::data::{load_experiment_csv, CsvSchema, ExperimentDataset};
use crate::error::{Error, Result};
use crate::methods::{estimate, global_best, merge_estimates, Estimates, Method, MethodConfig};
use crate::optimize::{mcsa_solve, saa_solve, LpSolution, McsaConfig, McsaTrace, SolutionStatus};
use crate::problem::{AssignmentPolicy, Constraint, StochasticProblem};
use crate::rng::{derive_seed, Rng};
use crate::simulate::PolicyEvaluation;

pub const POLICY_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: PathBuf,
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Experiment export; may be omitted when a dataset is passed directly.
    #[serde(default)]
    pub data: Option<DataSource>,
    pub method: Method,
    pub objective: usize,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    /// Divide effects by the control mean so thresholds are relative lifts.
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default)]
    pub settings: MethodConfig,
    /// Solver override; `None` uses the method's own solver.
    #[serde(default)]
    pub solver: Option<SolverKind>,
    /// Permit a cohort method with the deterministic solver or a member
    /// method with the stochastic one.
    #[serde(default)]
    pub allow_pairing_override: bool,
    /// Bootstrap replicates for bias correction; 0 disables it.
    #[serde(default)]
    pub bootstrap_replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl PipelineConfig {
    pub fn new(method: Method, objective: usize, constraints: Vec<Constraint>) -> Self {
        PipelineConfig {
            data: None,
            method,
            objective,
            constraints,
            normalize: true,
            settings: MethodConfig::default(),
            solver: None,
            allow_pairing_override: false,
            bootstrap_replicates: 0,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid pipeline config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Solver the method pairs with.
    pub fn preferred_solver(&self) -> Option<SolverKind> {
        match self.method {
            Method::Global => None,
            Method::HtSt | Method::CtSt => Some(SolverKind::Stochastic),
            Method::CfDt | Method::TmDt => Some(SolverKind::Deterministic),
        }
    }

    pub fn solver(&self) -> Option<SolverKind> {
        self.solver.or(self.preferred_solver())
    }

    pub fn validate(&self) -> Result<()> {
        match (self.method, self.solver, self.preferred_solver()) {
            (Method::Global, Some(_), _) => {
                return Err(Error::Config("Global picks one arm and takes no solver".into()));
            }
            (m, Some(s), Some(p)) if s != p && !self.allow_pairing_override => {
                return Err(Error::Config(format!(
                    "{m} pairs with the {p:?} solver; set allow_pairing_override to use {s:?}"
                )));
            }
            _ => {}
        }
        if !(0.0 < self.settings.honest_fraction && self.settings.honest_fraction < 1.0) {
            return Err(Error::Config("honest_fraction must lie strictly between 0 and 1".into()));
        }
        if self.bootstrap_replicates > 0 && self.method.is_member_level() {
            return Err(Error::Config(
                "bootstrap bias correction needs cohort-level effects with per-arm counts".into(),
            ));
        }
        self.settings.mcsa.validate(self.constraints.len())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Method settings with the pipeline seed mixed in.
    pub fn settings_seeded(&self) -> MethodConfig {
        MethodConfig {
            seed: derive_seed(self.seed, 1),
            mcsa: McsaConfig {
                seed: derive_seed(self.seed, 2),
                ..self.settings.mcsa.clone()
            },
            ..self.settings.clone()
        }
    }

    pub fn problem_spec(&self, ds: &ExperimentDataset) -> Result<ProblemSpec> {
        if self.normalize {
            ProblemSpec::normalized(ds, self.objective, self.constraints.clone())
        } else {
            let spec = ProblemSpec {
                objective: self.objective,
                constraints: self.constraints.clone(),
                scales: vec![1.0; ds.n_metrics()],
            };
            spec.validate(ds.n_metrics())?;
            Ok(spec)
        }
    }
}

/// Where a policy's rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "snake_case")]
pub enum PolicyRules {
    Cohort {
        n_features: usize,
        cohorts: Vec<Cohort>,
        shares: Vec<f64>,
        /// `effects[cohort][metric][treatment - 1]`, unscaled.
        effects: Vec<Vec<Vec<EffectEstimate>>>,
    },
    Member {
        member_ids: Vec<String>,
        /// `effects[member][metric][treatment - 1]`, unscaled.
        effects: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub created_unix: u64,
    pub generator: String,
}

/// Deployable policy: rules plus one probability row per rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub version: u32,
    pub method: Method,
    pub feature_names: Vec<String>,
    pub metric_names: Vec<String>,
    /// Arms per row, control first.
    pub n_options: usize,
    pub objective: usize,
    pub constraints: Vec<Constraint>,
    pub scales: Vec<f64>,
    pub rules: PolicyRules,
    pub probabilities: Vec<Vec<f64>>,
    pub bias_corrected: bool,
    pub provenance: Provenance,
}

impl PolicyFile {
    pub fn is_member_level(&self) -> bool {
        matches!(self.rules, PolicyRules::Member { .. })
    }

    pub fn cohort_set(&self) -> Option<CohortSet> {
        match &self.rules {
            PolicyRules::Cohort { n_features, cohorts, .. } => Some(CohortSet {
                n_features: *n_features,
                cohorts: cohorts.clone(),
            }),
            PolicyRules::Member { .. } => None,
        }
    }

    pub fn policy(&self) -> AssignmentPolicy {
        AssignmentPolicy {
            n_rows: self.probabilities.len(),
            n_options: self.n_options,
            x: self.probabilities.concat(),
        }
    }

    /// Rows are probability vectors and, for cohort rules, the rules form
    /// a partition (checked exactly up to 2000 cohorts).
    pub fn validate(&self) -> Result<()> {
        if self.version != POLICY_FILE_VERSION {
            return Err(Error::Validation(format!("unsupported policy file version {}", self.version)));
        }
        if self.probabilities.iter().any(|r| r.len() != self.n_options) {
            return Err(Error::Validation("probability rows must have one entry per arm".into()));
        }
        self.policy().validate(1e-9)?;
        let rows = match &self.rules {
            PolicyRules::Cohort { cohorts, .. } => cohorts.len(),
            PolicyRules::Member { member_ids, .. } => member_ids.len(),
        };
        if rows != self.probabilities.len() {
            return Err(Error::DimensionMismatch {
                expected: rows,
                actual: self.probabilities.len(),
            });
        }
        if let Some(set) = self.cohort_set() {
            if set.len() <= 2000 {
                set.check_exclusive()?;
            }
            set.check_probes(&crate::cohort::probe_points(std::slice::from_ref(&set), 1024, 0))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(text)?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Fast repeated lookups against one policy file.
pub struct Scorer<'a> {
    file: &'a PolicyFile,
    cohorts: Option<(CohortSet, CohortIndex)>,
}

impl<'a> Scorer<'a> {
    pub fn new(file: &'a PolicyFile) -> Self {
        let cohorts = file.cohort_set().map(|set| {
            let index = CohortIndex::new(&set);
            (set, index)
        });
        Scorer { file, cohorts }
    }

    /// Row index for a feature vector (cohort policies) or member id.
    pub fn row(&self, features: &[f64], member_id: Option<&str>) -> Result<usize> {
        match (&self.cohorts, &self.file.rules) {
            (Some((set, index)), _) => index.assign(set, features),
            (None, PolicyRules::Member { member_ids, .. }) => {
                let id = member_id.ok_or_else(|| {
                    Error::Validation("member-level policies are scored by member id".into())
                })?;
                member_ids
                    .iter()
                    .position(|m| m == id)
                    .ok_or_else(|| Error::Validation(format!("member `{id}` is not in the policy")))
            }
            (None, PolicyRules::Cohort { .. }) => unreachable!("cohort rules always build an index"),
        }
    }

    pub fn probabilities(&self, features: &[f64], member_id: Option<&str>) -> Result<&'a [f64]> {
        Ok(&self.file.probabilities[self.row(features, member_id)?])
    }

    /// Arm drawn from the row's probabilities.
    pub fn draw(&self, features: &[f64], member_id: Option<&str>, rng: &mut Rng) -> Result<usize> {
        Ok(draw_arm(self.probabilities(features, member_id)?, rng))
    }
}

/// Probability vector of the cohort containing `features`.
pub fn score(file: &PolicyFile, features: &[f64]) -> Result<Vec<f64>> {
    Scorer::new(file).probabilities(features, None).map(<[f64]>::to_vec)
}

/// Categorical draw from `probs`.
pub fn draw_arm(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Result of the optimization stage.
#[derive(Debug, Clone)]
pub struct Optimized {
    pub policy: AssignmentPolicy,
    /// Estimated objective and constraint values of the policy in problem
    /// units (`<=` orientation for constraints).
    pub objective: f64,
    pub constraint_values: Vec<f64>,
    pub trace: Option<McsaTrace>,
    pub lp: Option<LpSolution>,
    pub global_feasible: Option<bool>,
}

fn infeasible_lp(method: Method, sol: &LpSolution) -> Error {
    Error::Infeasible(format!(
        "{method}: the deterministic problem has no feasible assignment (constraint excess {:.3e}); \
         the stochastic solver on cohort-level effects tolerates estimation noise in the constraints",
        sol.gap
    ))
}

fn member_rows(ds: &ExperimentDataset) -> Vec<&[f64]> {
    ds.units().iter().map(|u| u.features.as_slice()).collect()
}

/// Solve the assignment problem for `estimates`.
pub fn optimize_stage(cfg: &PipelineConfig, ds: &ExperimentDataset, spec: &ProblemSpec, estimates: &Estimates) -> Result<Optimized> {
    let settings = cfg.settings_seeded();
    let solve_stochastic = |problem: &StochasticProblem| -> Result<Optimized> {
        let sol = mcsa_solve(problem, &settings.mcsa)?;
        Ok(Optimized {
            objective: sol.objective,
            constraint_values: problem.constraint_values(&sol.policy),
            policy: sol.policy,
            trace: Some(sol.trace),
            lp: None,
            global_feasible: None,
        })
    };
    let solve_lp = |problem: &crate::problem::DeterministicProblem| -> Result<Optimized> {
        let sol = saa_solve(problem)?;
        if sol.status == SolutionStatus::Infeasible {
            return Err(infeasible_lp(cfg.method, &sol));
        }
        Ok(Optimized {
            objective: sol.objective,
            constraint_values: problem.constraint_values(&sol.policy),
            policy: sol.policy.clone(),
            trace: None,
            lp: Some(sol),
            global_feasible: None,
        })
    };
    match estimates {
        Estimates::Trees { .. } => Err(Error::Config("tree estimates must be merged before optimizing".into())),
        Estimates::Cohort { effects } => {
            let problem = effects.stochastic_problem(spec);
            match cfg.solver() {
                None => {
                    let det = problem.deterministic();
                    let choice = global_best(&det)?;
                    let policy = AssignmentPolicy::constant(det.n, det.n_options, choice.treatment);
                    Ok(Optimized {
                        objective: det.objective(&policy),
                        constraint_values: det.constraint_values(&policy),
                        policy,
                        trace: None,
                        lp: None,
                        global_feasible: Some(choice.feasible),
                    })
                }
                Some(SolverKind::Stochastic) => solve_stochastic(&problem),
                Some(SolverKind::Deterministic) => solve_lp(&problem.deterministic()),
            }
        }
        Estimates::Member { model } => {
            let effects = model.predict(&member_rows(ds));
            let det = member_problem(&effects, spec)?;
            match cfg.solver() {
                Some(SolverKind::Stochastic) => {
                    let sigma = det.mu_hat.iter().map(|m| vec![0.0; m.len()]).collect();
                    let problem = StochasticProblem::new(det.n, det.n_options, det.mu_hat.clone(), sigma, det.c.clone())?;
                    solve_stochastic(&problem)
                }
                _ => solve_lp(&det),
            }
        }
    }
}

/// Everything a pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub policy: PolicyFile,
    pub report: String,
    pub estimates: Estimates,
    pub trace: Option<McsaTrace>,
    pub bootstrap: Option<BootstrapReport>,
}

impl PipelineOutput {
    /// `policy.json`, `report.md`, and when present `trace.csv` and
    /// `bootstrap.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("policy.json", self.policy.to_json()?)?;
        write("report.md", self.report.clone())?;
        if let Some(trace) = &self.trace {
            let path = dir.join("trace.csv");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            trace.write_csv(std::io::BufWriter::new(file))?;
        }
        if let Some(b) = &self.bootstrap {
            write("bootstrap.json", serde_json::to_string_pretty(b)?)?;
        }
        Ok(())
    }
}

/// Load the configured dataset and run every stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let source = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("pipeline config has no data section".into()))?;
    let ds = load_experiment_csv(&source.path, &source.schema).map_err(|e| e.in_stage("load"))?;
    run_pipeline_on(cfg, &ds)
}

pub fn run_pipeline_on(cfg: &PipelineConfig, ds: &ExperimentDataset) -> Result<PipelineOutput> {
    cfg.validate()?;
    let settings = cfg.settings_seeded();
    let spec = cfg.problem_spec(ds).map_err(|e| e.in_stage("load"))?;
    let fitted = estimate(cfg.method, ds, &settings, cfg.objective).map_err(|e| e.in_stage("estimate"))?;
    let estimates = merge_estimates(fitted, ds, &settings).map_err(|e| e.in_stage("merge"))?;
    let optimized = optimize_stage(cfg, ds, &spec, &estimates).map_err(|e| e.in_stage("optimize"))?;

    let mut probabilities = optimized.policy.clone();
    let mut bootstrap = None;
    if let (Estimates::Cohort { effects }, true) = (&estimates, cfg.bootstrap_replicates > 0) {
        let result = bootstrap_stage(cfg, &spec, effects).map_err(|e| e.in_stage("bootstrap"))?;
        probabilities = result.0;
        bootstrap = Some(result.1);
    }

    let policy = policy_file(cfg, ds, &spec, &estimates, &probabilities, bootstrap.is_some())
        .map_err(|e| e.in_stage("report"))?;
    let report = render_report(cfg, ds, &spec, &policy, &optimized, bootstrap.as_ref());
    Ok(PipelineOutput {
        policy,
        report,
        estimates,
        trace: optimized.trace,
        bootstrap,
    })
}

/// Assemble and validate the policy file for merged `estimates`.
pub fn policy_file(
    cfg: &PipelineConfig,
    ds: &ExperimentDataset,
    spec: &ProblemSpec,
    estimates: &Estimates,
    probabilities: &AssignmentPolicy,
    bias_corrected: bool,
) -> Result<PolicyFile> {
    let rules = match estimates {
        Estimates::Cohort { effects } => PolicyRules::Cohort {
            n_features: effects.cohorts.n_features,
            cohorts: effects.cohorts.cohorts.clone(),
            shares: effects.shares.clone(),
            effects: effects.effects.clone(),
        },
        Estimates::Member { model } => PolicyRules::Member {
            member_ids: ds.units().iter().map(|u| u.id.clone()).collect(),
            effects: model.predict(&member_rows(ds)).tau,
        },
        Estimates::Trees { .. } => {
            return Err(Error::Config("tree estimates must be merged before writing a policy".into()))
        }
    };
    let policy = PolicyFile {
        version: POLICY_FILE_VERSION,
        method: cfg.method,
        feature_names: ds.feature_names().to_vec(),
        metric_names: ds.metric_names().to_vec(),
        n_options: ds.n_arms(),
        objective: cfg.objective,
        constraints: cfg.constraints.clone(),
        scales: spec.scales.clone(),
        rules,
        probabilities: probabilities.rows().map(<[f64]>::to_vec).collect(),
        bias_corrected,
        provenance: Provenance {
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            generator: concat!("treatsel ", env!("CARGO_PKG_VERSION")).into(),
        },
    };
    policy.validate()?;
    Ok(policy)
}

/// Bias-corrected policy and bootstrap summary for cohort effects.
pub fn bootstrap_stage(cfg: &PipelineConfig, spec: &ProblemSpec, effects: &CohortEffects) -> Result<(AssignmentPolicy, BootstrapReport)> {
    let settings = cfg.settings_seeded();
    let solver = match cfg.solver() {
        Some(SolverKind::Deterministic) => BootstrapSolver::Deterministic,
        Some(SolverKind::Stochastic) => BootstrapSolver::Stochastic(settings.mcsa.clone()),
        None => return Err(Error::Config("Global has nothing to bias-correct".into())),
    };
    let input = effects.bootstrap_input(spec, solver, cfg.bootstrap_replicates, derive_seed(cfg.seed, 3));
    let result = bootstrap_assignments(&input)?;
    let report = result.report();
    Ok((result.x_corrected, report))
}

/// Value of a policy file on `ds`: exact from counterfactuals when the
/// data carries them, otherwise inverse-propensity weighted with the
/// observed arm shares as propensities.
pub fn evaluate_policy_file(file: &PolicyFile, ds: &ExperimentDataset) -> Result<PolicyEvaluation> {
    if file.n_options != ds.n_arms() || file.feature_names.len() != ds.n_features() {
        return Err(Error::Validation("policy file does not match the dataset's arms and features".into()));
    }
    let scorer = Scorer::new(file);
    let mut x = Vec::with_capacity(ds.n_units() * file.n_options);
    for u in ds.units() {
        x.extend_from_slice(scorer.probabilities(&u.features, Some(&u.id))?);
    }
    let per_unit = AssignmentPolicy {
        n_rows: ds.n_units(),
        n_options: file.n_options,
        x,
    };
    if ds.has_counterfactuals() {
        return crate::simulate::evaluate_policy(&per_unit, ds);
    }
    let n = ds.n_units() as f64;
    let share: Vec<f64> = ds.arm_counts().iter().map(|&c| c as f64 / n).collect();
    if share.iter().any(|&s| s == 0.0) {
        return Err(Error::InsufficientData("every arm needs observed units".into()));
    }
    let k = ds.n_metrics();
    let mut value = vec![0.0; k];
    for (u, row) in ds.units().iter().zip(per_unit.rows()) {
        let w = row[u.variant] / share[u.variant];
        for (v, y) in value.iter_mut().zip(&u.outcomes) {
            *v += w * y / n;
        }
    }
    let control_mean: Vec<f64> = (0..k).map(|m| ds.control_mean(m)).collect();
    let effect: Vec<f64> = value.iter().zip(&control_mean).map(|(v, c)| v - c).collect();
    let tau = effect
        .iter()
        .zip(&control_mean)
        .enumerate()
        .map(|(m, (e, c))| if *c == 0.0 { Err(Error::ZeroControlMean { metric: m }) } else { Ok(e / c) })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyEvaluation {
        tau,
        effect,
        control_mean,
    })
}

const REPORT_COHORTS: usize = 20;

/// Markdown summary of a run.
pub fn render_report(
    cfg: &PipelineConfig,
    ds: &ExperimentDataset,
    spec: &ProblemSpec,
    policy: &PolicyFile,
    opt: &Optimized,
    bootstrap: Option<&BootstrapReport>,
) -> String {
    let metrics = ds.metric_names();
    let mut r = String::new();
    let _ = writeln!(r, "# Treatment selection report\n");
    let _ = writeln!(r, "- method: {}", cfg.method);
    let _ = writeln!(
        r,
        "- data: {} units, {} features, arm counts {:?}",
        ds.n_units(),
        ds.n_features(),
        ds.arm_counts()
    );
    let _ = writeln!(r, "- objective: maximize `{}`", metrics[cfg.objective]);
    for c in &cfg.constraints {
        let op = match c.direction {
            crate::problem::Direction::AtLeast => ">=",
            crate::problem::Direction::AtMost => "<=",
        };
        let _ = writeln!(r, "- constraint: effect on `{}` {op} {}", metrics[c.metric], c.threshold);
    }
    let _ = writeln!(
        r,
        "- effects are {}",
        if cfg.normalize { "relative to the control mean" } else { "in raw metric units" }
    );
    let _ = writeln!(r, "- config sha256: `{}`, seed {}\n", policy.provenance.config_sha256, cfg.seed);

    let _ = writeln!(r, "## Estimated effects\n");
    match &policy.rules {
        PolicyRules::Cohort { cohorts, shares, effects, .. } => {
            let _ = writeln!(r, "{} cohorts. Largest {} by share:\n", cohorts.len(), REPORT_COHORTS.min(cohorts.len()));
            let mut order: Vec<usize> = (0..cohorts.len()).collect();
            order.sort_by(|&a, &b| shares[b].total_cmp(&shares[a]).then(a.cmp(&b)));
            let _ = writeln!(r, "| cohort | share | rule | effects (tau ± se per treatment) | policy |");
            let _ = writeln!(r, "|---|---|---|---|---|");
            for &c in order.iter().take(REPORT_COHORTS) {
                let eff = effects[c]
                    .iter()
                    .enumerate()
                    .map(|(k, row)| {
                        let cells = row
                            .iter()
                            .map(|e| format!("{:.4} ± {:.4}", e.tau * spec.scales[k], e.se() * spec.scales[k].abs()))
                            .collect::<Vec<_>>()
                            .join(", ");
                        format!("{}: {cells}", metrics[k])
                    })
                    .collect::<Vec<_>>()
                    .join("; ");
                let _ = writeln!(
                    r,
                    "| {} | {:.4} | {} | {} | {} |",
                    cohorts[c].id,
                    shares[c],
                    cohorts[c].describe(ds.feature_names()),
                    eff,
                    fmt_row(&policy.probabilities[c])
                );
            }
        }
        PolicyRules::Member { member_ids, effects } => {
            let _ = writeln!(r, "{} members. Average predicted effect per treatment:\n", member_ids.len());
            let n = effects.len().max(1) as f64;
            for k in 0..metrics.len() {
                let avg: Vec<String> = (0..ds.n_treatments())
                    .map(|j| format!("{:.4}", effects.iter().map(|e| e[k][j]).sum::<f64>() / n * spec.scales[k]))
                    .collect();
                let _ = writeln!(r, "- {}: {}", metrics[k], avg.join(", "));
            }
        }
    }

    let _ = writeln!(r, "\n## Optimization\n");
    let _ = writeln!(r, "- estimated objective effect: {:.6}", opt.objective);
    let effects = spec.constraint_effects(&opt.constraint_values);
    for (c, e) in cfg.constraints.iter().zip(&effects) {
        let _ = writeln!(r, "- estimated effect on `{}`: {:.6} (threshold {})", metrics[c.metric], e, c.threshold);
    }
    if let Some(t) = &opt.trace {
        let _ = writeln!(
            r,
            "- stochastic solver: {} iterations, {} objective steps, step size {:.3e}",
            t.records.len(),
            t.objective_steps(),
            t.gamma
        );
    }
    if let Some(lp) = &opt.lp {
        let _ = writeln!(r, "- linear program: {:?}, duality gap {:.3e}", lp.status, lp.gap);
    }
    if let Some(f) = opt.global_feasible {
        let _ = writeln!(r, "- single arm meets the constraints on estimates: {f}");
    }
    let mut arm_mass = vec![0.0; policy.n_options];
    match &policy.rules {
        PolicyRules::Cohort { shares, .. } => {
            for (row, s) in policy.probabilities.iter().zip(shares) {
                for (m, p) in arm_mass.iter_mut().zip(row) {
                    *m += s * p;
                }
            }
        }
        PolicyRules::Member { .. } => {
            let n = policy.probabilities.len() as f64;
            for row in &policy.probabilities {
                for (m, p) in arm_mass.iter_mut().zip(row) {
                    *m += p / n;
                }
            }
        }
    }
    let _ = writeln!(r, "- population share per arm (control first): {}", fmt_row(&arm_mass));

    let _ = writeln!(r, "\n## Bootstrap\n");
    match bootstrap {
        Some(b) => {
            let max_var = b.variance.iter().flatten().copied().fold(0.0, f64::max);
            let _ = writeln!(r, "- replicates: {} ({} failed)", b.replicates, b.failures);
            let _ = writeln!(r, "- bias L1 norm: {:.6}", b.bias_l1);
            let _ = writeln!(r, "- largest entry variance: {:.6}", max_var);
            let _ = writeln!(r, "- the policy file holds the bias-corrected probabilities");
        }
        None => {
            let _ = writeln!(r, "- not run");
        }
    }
    let _ = writeln!(
        r,
        "\n## Scope\n\nAll numbers above are offline estimates from the experiment data. \
         The lift a policy delivers once deployed has to be measured in a follow-up experiment; \
         this report does not predict it."
    );
    r
}

fn fmt_row(row: &[f64]) -> String {
    format!("({})", row.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Direction;
    use crate::rng;

    fn guardrail() -> Vec<Constraint> {
        vec![Constraint {
            metric: 1,
            direction: Direction::AtLeast,
            threshold: 0.0,
        }]
    }

    #[test]
    fn pairing_is_enforced() {
        let mut cfg = PipelineConfig::new(Method::CtSt, 0, guardrail());
        cfg.solver = Some(SolverKind::Deterministic);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.allow_pairing_override = true;
        cfg.validate().unwrap();
        let mut cfg = PipelineConfig::new(Method::Global, 0, guardrail());
        cfg.solver = Some(SolverKind::Stochastic);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let text = r#"{"method": "CT.ST", "objective": 0, "colour": 1}"#;
        assert!(matches!(PipelineConfig::from_json(text), Err(Error::Config(_))));
        let text = r#"{"method": "TM.DT", "objective": 0, "constraints": [{"metric": 1, "direction": "at_least", "threshold": 0}]}"#;
        let cfg = PipelineConfig::from_json(text).unwrap();
        assert_eq!(cfg.method, Method::TmDt);
        assert!(cfg.normalize);
    }

    #[test]
    fn draws_follow_probabilities() {
        let mut rng = rng::stream(1, 0);
        assert!((0..100).all(|_| draw_arm(&[0.0, 1.0, 0.0], &mut rng) == 1));
        let ones = (0..10_000).filter(|_| draw_arm(&[0.5, 0.5], &mut rng) == 1).count() as f64;
        assert!((ones - 5000.0).abs() < 3.0 * 50.0);
    }
}
