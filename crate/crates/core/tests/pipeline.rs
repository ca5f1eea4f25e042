use treatsel::data::{load_experiment_csv, write_csv, ExperimentDataset};
use treatsel::methods::Method;
use treatsel::pipeline::{
    evaluate_policy_file, run_pipeline, run_pipeline_on, DataSource, PipelineConfig, PolicyFile, Scorer,
};
use treatsel::problem::{Constraint, Direction};
use treatsel::simulate::{evaluate_policy, generate_dataset, unit_policy, SimConfig};
use treatsel::Error;

fn sim(n: usize, w: f64, seed: u64) -> ExperimentDataset {
    let weights = vec![vec![1.0, -0.6], vec![0.4, 0.5]];
    generate_dataset(&SimConfig::new(weights, 1, n, w, seed)).unwrap()
}

fn guardrail(threshold: f64) -> Vec<Constraint> {
    vec![Constraint {
        metric: 1,
        direction: Direction::AtLeast,
        threshold,
    }]
}

fn quick(method: Method) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(method, 0, guardrail(0.0));
    cfg.settings.mcsa.iterations = 1500;
    cfg.settings.forest.n_trees = 8;
    cfg.settings.regression.n_trees = 8;
    cfg.seed = 11;
    cfg
}

fn without_timestamp(mut file: PolicyFile) -> String {
    file.provenance.created_unix = 0;
    file.to_json().unwrap()
}

#[test]
fn same_seed_same_policy_file() {
    let ds = sim(3000, 0.5, 1);
    let cfg = quick(Method::CtSt);
    let a = run_pipeline_on(&cfg, &ds).unwrap();
    let b = run_pipeline_on(&cfg, &ds).unwrap();
    assert_eq!(without_timestamp(a.policy), without_timestamp(b.policy));
    assert_eq!(a.report, b.report);
}

#[test]
fn different_seed_changes_the_hash() {
    let mut cfg = quick(Method::HtSt);
    let before = cfg.hash();
    cfg.seed += 1;
    assert_ne!(before, cfg.hash());
}

#[test]
fn global_assigns_one_arm_to_everyone() {
    let ds = sim(3000, 0.0, 2);
    let out = run_pipeline_on(&quick(Method::Global), &ds).unwrap();
    let first = &out.policy.probabilities[0];
    assert!(first.iter().all(|&p| p == 0.0 || p == 1.0));
    assert!(out.policy.probabilities.iter().all(|r| r == first));
    assert!(out.trace.is_none());
}

#[test]
fn member_policy_scores_by_id() {
    let ds = sim(1200, 0.2, 3);
    let out = run_pipeline_on(&quick(Method::TmDt), &ds).unwrap();
    let file = &out.policy;
    assert!(file.is_member_level());
    assert_eq!(file.probabilities.len(), ds.n_units());
    let scorer = Scorer::new(file);
    let u = &ds.units()[17];
    assert_eq!(scorer.probabilities(&u.features, Some(&u.id)).unwrap(), &file.probabilities[17][..]);
}

#[test]
fn forest_method_runs_end_to_end() {
    let ds = sim(1500, 0.2, 4);
    let out = run_pipeline_on(&quick(Method::CfDt), &ds).unwrap();
    out.policy.validate().unwrap();
    assert_eq!(out.policy.n_options, 3);
}

#[test]
fn scorer_matches_cohort_assignment() {
    let ds = sim(3000, 0.5, 5);
    let out = run_pipeline_on(&quick(Method::HtSt), &ds).unwrap();
    let file = &out.policy;
    let cohorts = file.cohort_set().unwrap();
    let per_unit = unit_policy(&file.policy(), Some(&cohorts), &ds).unwrap();
    let direct = evaluate_policy(&per_unit, &ds).unwrap();
    let via_file = evaluate_policy_file(file, &ds).unwrap();
    for (a, b) in direct.tau.iter().zip(&via_file.tau) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn weighted_evaluation_tracks_the_exact_one() {
    let ds = sim(8000, 0.0, 6);
    let out = run_pipeline_on(&quick(Method::HtSt), &ds).unwrap();
    let exact = evaluate_policy_file(&out.policy, &ds).unwrap();
    let mut units = ds.units().to_vec();
    for u in &mut units {
        u.counterfactuals = None;
    }
    let observed = ExperimentDataset::new(
        ds.feature_names().to_vec(),
        ds.metric_names().to_vec(),
        ds.n_treatments(),
        units,
    )
    .unwrap();
    let weighted = evaluate_policy_file(&out.policy, &observed).unwrap();
    for (a, b) in exact.tau.iter().zip(&weighted.tau) {
        assert!((a - b).abs() < 0.02, "{a} vs {b}");
    }
}

#[test]
fn bootstrap_marks_the_policy_corrected() {
    let ds = sim(3000, 0.5, 7);
    let mut cfg = quick(Method::HtSt);
    cfg.bootstrap_replicates = 4;
    cfg.settings.mcsa.iterations = 500;
    let out = run_pipeline_on(&cfg, &ds).unwrap();
    assert!(out.policy.bias_corrected);
    assert_eq!(out.bootstrap.unwrap().replicates, 4);
}

#[test]
fn member_methods_refuse_bootstrap() {
    let mut cfg = quick(Method::CfDt);
    cfg.bootstrap_replicates = 10;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn impossible_guardrail_is_infeasible_for_the_lp() {
    let ds = sim(800, 0.0, 8);
    let mut cfg = quick(Method::TmDt);
    cfg.constraints = guardrail(5.0);
    let err = run_pipeline_on(&cfg, &ds).unwrap_err();
    assert!(matches!(err.root(), Error::Infeasible(_)), "{err}");
}

#[test]
fn pipeline_reads_its_csv() {
    let ds = sim(2000, 0.5, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_csv(&ds, std::fs::File::create(&path).unwrap(), ',').unwrap();
    let schema = ds.csv_schema(',');
    assert_eq!(load_experiment_csv(&path, &schema).unwrap().n_units(), 2000);

    let mut cfg = quick(Method::HtSt);
    cfg.data = Some(DataSource { path, schema });
    let from_file = run_pipeline(&cfg).unwrap();
    let in_memory = run_pipeline_on(&cfg, &ds).unwrap();
    assert_eq!(from_file.policy.probabilities, in_memory.policy.probabilities);
}

#[test]
fn policy_file_round_trips() {
    let ds = sim(2000, 0.5, 10);
    let out = run_pipeline_on(&quick(Method::HtSt), &ds).unwrap();
    let back = PolicyFile::from_json(&out.policy.to_json().unwrap()).unwrap();
    assert_eq!(back, out.policy);
    let mut broken = out.policy.clone();
    broken.probabilities[0][0] += 0.5;
    assert!(PolicyFile::from_json(&broken.to_json().unwrap()).is_err());
}
