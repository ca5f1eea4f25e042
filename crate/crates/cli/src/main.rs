use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use treatsel::data::{load_experiment_csv, write_experiment_csv, ExperimentDataset};
use treatsel::methods::{estimate, merge_estimates, Estimates};
use treatsel::pipeline::{
    bootstrap_stage, evaluate_policy_file, optimize_stage, policy_file, render_report, run_pipeline, PipelineConfig,
    PolicyFile, Scorer,
};
use treatsel::rng;
use treatsel::simulate::{draw_weights, generate_dataset, run_comparison, ComparisonConfig, SimConfig, WeightTemplate};
use treatsel::Error;

#[derive(Parser)]
#[command(name = "treatsel", version, about = "Select treatments per cohort or member from randomized experiment data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic experiment, or run the method comparison.
    Simulate {
        /// Run every method across uncertainty weights and repeats.
        #[arg(long)]
        compare: bool,
    },
    /// Fit effect models and write `estimates.json`.
    FitEffects,
    /// Merge tree partitions from `--estimates` into `merged.json`.
    Merge {
        #[arg(long)]
        estimates: PathBuf,
    },
    /// Solve the assignment problem and write `policy.json`.
    Optimize {
        #[arg(long)]
        estimates: PathBuf,
    },
    /// Bootstrap the assignment and write a bias-corrected `policy.json`.
    Bootstrap {
        #[arg(long)]
        estimates: PathBuf,
    },
    /// Value of a policy file on the configured data.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
    },
    /// Every stage end to end.
    Pipeline,
    /// Probabilities (or a draw) for each row of a feature CSV.
    Score {
        #[arg(long)]
        policy: PathBuf,
        /// CSV with the policy's feature columns and optionally `id`.
        #[arg(long)]
        input: PathBuf,
        /// Draw one arm per row instead of only reporting probabilities.
        #[arg(long)]
        draw: bool,
    },
}

/// Settings for `simulate` without `--compare`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateConfig {
    n_units: usize,
    n_treatments: usize,
    n_guardrails: usize,
    uncertainty_weight: f64,
    weights: Option<Vec<Vec<f64>>>,
    template: WeightTemplate,
    seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n_units: 20_000,
            n_treatments: 3,
            n_guardrails: 2,
            uncertainty_weight: 1.0,
            weights: None,
            template: WeightTemplate::default(),
            seed: 0,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => 2,
        Error::Infeasible(_) | Error::NoFeasibleProgress { .. } => 3,
        Error::Schema(_)
        | Error::Parse { .. }
        | Error::Validation(_)
        | Error::InsufficientData(_)
        | Error::DimensionMismatch { .. }
        | Error::ZeroControlMean { .. }
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Io { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> treatsel::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> treatsel::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> treatsel::Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn pipeline_config(g: &Global) -> treatsel::Result<PipelineConfig> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &PipelineConfig) -> treatsel::Result<ExperimentDataset> {
    let source = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("config has no data section".into()))?;
    load_experiment_csv(&source.path, &source.schema)
}

fn merged(path: &Path) -> treatsel::Result<Estimates> {
    match read_json::<Estimates>(path)? {
        Estimates::Trees { .. } => Err(Error::Config(format!(
            "{} holds unmerged trees; run `treatsel merge` first",
            path.display()
        ))),
        other => Ok(other),
    }
}

fn run(cli: &Cli) -> treatsel::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { compare: true } => {
            let mut cfg: ComparisonConfig = match &g.config {
                Some(p) => read_json(p)?,
                None => ComparisonConfig::default(),
            };
            if let Some(seed) = g.seed {
                cfg.seed = seed;
            }
            let result = run_comparison(&cfg)?;
            result.write_outputs(&g.out)?;
            for row in result.summary() {
                let mean: Vec<String> = row.mean.iter().map(|v| format!("{v:+.4}")).collect();
                println!("{:<6} weight {:<4} tau {}", row.method.name(), row.uncertainty_weight, mean.join(" "));
            }
            Ok(())
        }
        Command::Simulate { compare: false } => {
            let mut cfg: SimulateConfig = match &g.config {
                Some(p) => read_json(p)?,
                None => SimulateConfig::default(),
            };
            if let Some(seed) = g.seed {
                cfg.seed = seed;
            }
            let weights = match cfg.weights.clone() {
                Some(w) => w,
                None => draw_weights(cfg.n_treatments, cfg.n_guardrails, &cfg.template, &mut rng::stream(cfg.seed, 0))?,
            };
            let sim = SimConfig::new(weights, cfg.n_guardrails, cfg.n_units, cfg.uncertainty_weight, cfg.seed);
            let ds = generate_dataset(&sim)?;
            std::fs::create_dir_all(&g.out).map_err(|e| io_error(&g.out, e))?;
            let data = g.out.join("data.csv");
            write_experiment_csv(&ds, &data, ',')?;
            let mut schema = ds.csv_schema(',');
            schema.counterfactuals = true;
            write_json(&g.out.join("schema.json"), &schema)?;
            write_json(&g.out.join("simulation.json"), &sim)?;
            println!("wrote {} units to {}", ds.n_units(), data.display());
            Ok(())
        }
        Command::FitEffects => {
            let cfg = pipeline_config(g)?;
            let ds = dataset(&cfg)?;
            let est = estimate(cfg.method, &ds, &cfg.settings_seeded(), cfg.objective).map_err(|e| e.in_stage("estimate"))?;
            write_json(&g.out.join("estimates.json"), &est)
        }
        Command::Merge { estimates } => {
            let cfg = pipeline_config(g)?;
            let ds = dataset(&cfg)?;
            let est: Estimates = read_json(estimates)?;
            let merged = merge_estimates(est, &ds, &cfg.settings_seeded()).map_err(|e| e.in_stage("merge"))?;
            write_json(&g.out.join("merged.json"), &merged)
        }
        Command::Optimize { estimates } => {
            let cfg = pipeline_config(g)?;
            let ds = dataset(&cfg)?;
            let spec = cfg.problem_spec(&ds)?;
            let est = merged(estimates)?;
            let opt = optimize_stage(&cfg, &ds, &spec, &est).map_err(|e| e.in_stage("optimize"))?;
            let file = policy_file(&cfg, &ds, &spec, &est, &opt.policy, false)?;
            if let Some(trace) = &opt.trace {
                let path = g.out.join("trace.csv");
                std::fs::create_dir_all(&g.out).map_err(|e| io_error(&g.out, e))?;
                let f = std::fs::File::create(&path).map_err(|e| io_error(&path, e))?;
                trace.write_csv(std::io::BufWriter::new(f))?;
            }
            write_text(&g.out.join("report.md"), &render_report(&cfg, &ds, &spec, &file, &opt, None))?;
            write_text(&g.out.join("policy.json"), &file.to_json()?)
        }
        Command::Bootstrap { estimates } => {
            let cfg = pipeline_config(g)?;
            let ds = dataset(&cfg)?;
            let spec = cfg.problem_spec(&ds)?;
            let est = merged(estimates)?;
            let Estimates::Cohort { effects } = &est else {
                return Err(Error::Config("bootstrap needs cohort-level estimates".into()));
            };
            let cfg = PipelineConfig {
                bootstrap_replicates: cfg.bootstrap_replicates.max(1),
                ..cfg
            };
            let (policy, report) = bootstrap_stage(&cfg, &spec, effects).map_err(|e| e.in_stage("bootstrap"))?;
            let file = policy_file(&cfg, &ds, &spec, &est, &policy, true)?;
            write_json(&g.out.join("bootstrap.json"), &report)?;
            write_text(&g.out.join("policy.json"), &file.to_json()?)
        }
        Command::Evaluate { policy } => {
            let cfg = pipeline_config(g)?;
            let ds = dataset(&cfg)?;
            let file = PolicyFile::load(policy)?;
            let eval = evaluate_policy_file(&file, &ds)?;
            let text = serde_json::to_string_pretty(&eval)?;
            println!("{text}");
            write_text(&g.out.join("evaluation.json"), &text)
        }
        Command::Pipeline => {
            let cfg = pipeline_config(g)?;
            let output = run_pipeline(&cfg)?;
            output.write(&g.out)?;
            println!("wrote {}", g.out.join("policy.json").display());
            Ok(())
        }
        Command::Score { policy, input, draw } => score(g, policy, input, *draw),
    }
}

fn score(g: &Global, policy: &Path, input: &Path, draw: bool) -> treatsel::Result<()> {
    let file = PolicyFile::load(policy)?;
    let scorer = Scorer::new(&file);
    let mut rdr = csv::Reader::from_path(input)?;
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let feature_cols = file
        .feature_names
        .iter()
        .map(|f| column(f).ok_or_else(|| Error::Schema(format!("input lacks feature column `{f}`"))))
        .collect::<treatsel::Result<Vec<_>>>()?;
    let id_col = column("id");
    let mut rng = rng::stream(g.seed.unwrap_or(0), 0);
    std::fs::create_dir_all(&g.out).map_err(|e| io_error(&g.out, e))?;
    let out = g.out.join("scores.csv");
    let mut w = csv::Writer::from_path(&out)?;
    let mut header = vec!["row".to_string(), "id".into()];
    header.extend((0..file.n_options).map(|a| format!("p{a}")));
    if draw {
        header.push("arm".into());
    }
    w.write_record(&header)?;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let features = feature_cols
            .iter()
            .map(|&c| {
                rec[c].trim().parse::<f64>().map_err(|e| Error::Parse {
                    row: row + 1,
                    column: headers[c].to_string(),
                    message: e.to_string(),
                })
            })
            .collect::<treatsel::Result<Vec<_>>>()?;
        let id = id_col.map(|c| rec[c].to_string());
        let probs = scorer.probabilities(&features, id.as_deref())?;
        let mut out_rec = vec![row.to_string(), id.unwrap_or_default()];
        out_rec.extend(probs.iter().map(f64::to_string));
        if draw {
            out_rec.push(treatsel::pipeline::draw_arm(probs, &mut rng).to_string());
        }
        w.write_record(&out_rec)?;
    }
    w.flush().map_err(|e| io_error(&out, e))?;
    println!("wrote {}", out.display());
    Ok(())
}
