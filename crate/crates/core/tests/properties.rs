mod common;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng as _;

use treatsel::bootstrap::{
    bias_correct, bootstrap_assignments, resample_replicate, BootstrapInput, BootstrapSolver, CellStats, Covariance,
};
use treatsel::causal_tree::{fit_causal_tree, tree_cohorts, CausalTreeConfig, EffectEstimate};
use treatsel::cohort::{Cohort, CohortIndex, CohortSet, Condition, Side};
use treatsel::data::{honest_split, read_experiment_csv, write_csv, CONTROL};
use treatsel::merge::{merge_cohort_sets, merge_partitions, EffectSource, SourceKey};
use treatsel::optimize::prox::{project_simplex, project_weighted_simplex};
use treatsel::optimize::{mcsa_solve, saa_solve, McsaConfig, SolutionStatus};
use treatsel::problem::{AssignmentPolicy, DeterministicProblem, StochasticProblem};
use treatsel::rng::{self, Rng};
use treatsel::simulate::{evaluate_policy, generate_dataset, SimConfig};

fn on_simplex(row: &[f64]) -> bool {
    (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && row.iter().all(|v| (0.0..=1.0).contains(v))
}

fn random_partition(rng: &mut Rng, n_features: usize, depth: usize, tag: &str) -> CohortSet {
    fn grow(rng: &mut Rng, m: usize, depth: usize, path: &mut Vec<Condition>, out: &mut Vec<Cohort>, tag: &str) {
        if depth == 0 || rng.random_bool(0.25) {
            out.push(Cohort::from_conditions(format!("{tag}{}", out.len()), path));
            return;
        }
        let feature = rng.random_range(0..m);
        let threshold = (rng.random_range(-1.0f64..1.0) * 8.0).round() / 8.0;
        for side in [Side::Below, Side::AtOrAbove] {
            path.push(Condition { feature, side, threshold });
            grow(rng, m, depth - 1, path, out, tag);
            path.pop();
        }
    }
    let mut cohorts = Vec::new();
    grow(rng, n_features, depth, &mut Vec::new(), &mut cohorts, tag);
    CohortSet { n_features, cohorts }
}

fn probes(rng: &mut Rng, n_features: usize, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..n_features)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        rng.random_range(-8i32..=8) as f64 / 8.0
                    } else {
                        rng.random_range(-1.2..1.2)
                    }
                })
                .collect()
        })
        .collect()
}

fn source(l: usize, cohorts: CohortSet) -> EffectSource {
    let effects = (0..cohorts.len())
        .map(|c| EffectEstimate {
            tau: c as f64,
            var: 0.0,
            n_treat: 2,
            n_control: 2,
            var_treat: 0.0,
            var_control: 0.0,
        })
        .collect();
    EffectSource {
        key: SourceKey { treatment: l + 1, metric: 0 },
        cohorts,
        effects,
    }
}

/// Labels of `probes` under two partitions describe the same grouping.
fn same_grouping(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *ab.entry(*x).or_insert(*y) == *y && *ba.entry(*y).or_insert(*x) == *x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simplex_projection_is_the_closest_simplex_point(
        v in prop::collection::vec(-5.0f64..5.0, 1..8),
        q in prop::collection::vec(0.0f64..1.0, 8),
    ) {
        let mut p = v.clone();
        project_simplex(&mut p);
        prop_assert!(on_simplex(&p));
        let mut again = p.clone();
        project_simplex(&mut again);
        for (a, b) in p.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        // any other simplex point is no closer
        let s: f64 = q[..v.len()].iter().sum::<f64>().max(1e-9);
        let other: Vec<f64> = q[..v.len()].iter().map(|x| x / s).collect();
        let dist = |z: &[f64]| z.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        prop_assert!(dist(&p) <= dist(&other) + 1e-9);
    }

    #[test]
    fn weighted_projection_lands_on_the_simplex(
        pairs in prop::collection::vec((-3.0f64..3.0, 0.01f64..10.0), 1..8),
    ) {
        let (y, w): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut out = vec![0.0; y.len()];
        project_weighted_simplex(&y, &w, &mut out);
        prop_assert!(on_simplex(&out));
    }

    #[test]
    fn merged_partitions_are_partitions(seed in any::<u64>(), m in 1usize..4, n_sources in 2usize..4) {
        let mut rng = rng::stream(seed, 0);
        let sources: Vec<EffectSource> = (0..n_sources)
            .map(|l| source(l, random_partition(&mut rng, m, 4, &format!("s{l}"))))
            .collect();
        let (merged, table) = merge_cohort_sets(&sources, seed).unwrap();
        merged.check_exclusive().unwrap();
        merged.check_probes(&probes(&mut rng, m, 500)).unwrap();
        let bound: usize = sources.iter().map(|s| s.cohorts.len()).product();
        prop_assert!(merged.len() <= bound);
        prop_assert_eq!(table.effects.len(), merged.len());
        prop_assert!(table.effects.iter().all(|row| row.len() == n_sources));
    }

    #[test]
    fn merging_is_associative_on_probes(seed in any::<u64>(), m in 1usize..3) {
        let mut rng = rng::stream(seed, 0);
        let s: Vec<CohortSet> = (0..3).map(|l| random_partition(&mut rng, m, 3, &format!("s{l}"))).collect();
        let (ab, _) = merge_partitions(&s[0], &s[1]).unwrap();
        let (left, _) = merge_partitions(&ab, &s[2]).unwrap();
        let (bc, _) = merge_partitions(&s[1], &s[2]).unwrap();
        let (right, _) = merge_partitions(&s[0], &bc).unwrap();
        let pts = probes(&mut rng, m, 500);
        let label = |set: &CohortSet| pts.iter().map(|p| set.assign(p).unwrap()).collect::<Vec<_>>();
        prop_assert!(same_grouping(&label(&left), &label(&right)));
    }

    #[test]
    fn cohort_index_agrees_with_a_linear_scan(seed in any::<u64>(), m in 1usize..4) {
        let mut rng = rng::stream(seed, 0);
        let sources: Vec<EffectSource> = (0..3)
            .map(|l| source(l, random_partition(&mut rng, m, 5, &format!("s{l}"))))
            .collect();
        let (merged, _) = merge_cohort_sets(&sources, seed).unwrap();
        let index = CohortIndex::new(&merged);
        for p in probes(&mut rng, m, 300) {
            prop_assert_eq!(index.assign(&merged, &p).unwrap(), merged.assign(&p).unwrap());
        }
    }

    #[test]
    fn bias_correction_stays_inside_the_simplex(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 3), prop::collection::vec(0.0f64..1.0, 3)), 1..5),
    ) {
        let norm = |v: &Vec<f64>| {
            let s: f64 = v.iter().sum::<f64>();
            if s > 0.0 { v.iter().map(|x| x / s).collect::<Vec<_>>() } else { vec![1.0 / 3.0; 3] }
        };
        let n = rows.len();
        let x_hat = AssignmentPolicy::new(n, 3, rows.iter().flat_map(|(a, _)| norm(a)).collect()).unwrap();
        let x_bar = AssignmentPolicy::new(n, 3, rows.iter().flat_map(|(_, b)| norm(b)).collect()).unwrap();
        let corrected = bias_correct(&x_hat, &x_bar);
        for row in corrected.rows() {
            prop_assert!(on_simplex(row));
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

fn random_bootstrap_input(rng: &mut Rng, replicates: usize) -> BootstrapInput {
    let (n, j) = (rng.random_range(1..4), rng.random_range(2..4));
    let cells = (0..2)
        .map(|_| {
            (0..n * j)
                .map(|idx| {
                    if idx % j == CONTROL {
                        CellStats::fixed(0.0)
                    } else {
                        CellStats {
                            mu_hat: rng.random_range(-1.0..1.0),
                            var_treat: rng.random_range(0.1..2.0),
                            var_control: rng.random_range(0.1..2.0),
                            n_treat: rng.random_range(5..50),
                            n_control: rng.random_range(5..50),
                        }
                    }
                })
                .collect()
        })
        .collect();
    BootstrapInput {
        n,
        n_options: j,
        cells,
        c: vec![n as f64],
        solver: BootstrapSolver::Deterministic,
        replicates,
        seed: rng.random(),
        keep_samples: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bootstrap_covariance_is_psd(seed in any::<u64>()) {
        let input = random_bootstrap_input(&mut rng::stream(seed, 0), 40);
        let res = bootstrap_assignments(&input).unwrap();
        let d = input.n * input.n_options;
        let Covariance::Dense(m) = &res.var_hat else { panic!("small problems keep a dense covariance") };
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, m));
        prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10));
        prop_assert!(res.x_corrected.validate(1e-9).is_ok());
    }

    #[test]
    fn resamples_depend_only_on_seed_and_index(seed in any::<u64>(), b in 0usize..1000) {
        let input = random_bootstrap_input(&mut rng::stream(seed, 0), 10);
        let first = resample_replicate(&input, b);
        let _other = resample_replicate(&input, b + 1);
        prop_assert_eq!(first, resample_replicate(&input, b));
    }

    #[test]
    fn larger_min_leaf_never_adds_leaves(seed in any::<u64>(), small in 5usize..40, extra in 1usize..60) {
        let ds = common::step_dataset(1200, 1.0, seed);
        let split = honest_split(&ds, 0.5, seed).unwrap();
        let leaves = |min_leaf| {
            let cfg = CausalTreeConfig { min_leaf_per_arm: min_leaf, ..CausalTreeConfig::default() };
            fit_causal_tree(&split, 1, 0, &cfg).unwrap().n_leaves()
        };
        prop_assert!(leaves(small + extra) <= leaves(small));
    }

    #[test]
    fn leaf_effects_are_estimate_half_differences(seed in any::<u64>()) {
        let ds = common::step_dataset(1000, 0.5, seed);
        let split = honest_split(&ds, 0.5, seed).unwrap();
        let cfg = CausalTreeConfig { min_leaf_per_arm: 20, ..CausalTreeConfig::default() };
        let tree = fit_causal_tree(&split, 1, 0, &cfg).unwrap();
        let (cohorts, effects) = tree_cohorts(&tree);
        cohorts.check_exclusive().unwrap();
        for (c, e) in cohorts.cohorts.iter().zip(&effects) {
            let arm_mean = |arm: usize| {
                let ys: Vec<f64> = split.estimate.units().iter()
                    .filter(|u| u.variant == arm && c.contains(&u.features))
                    .map(|u| u.outcomes[0])
                    .collect();
                ys.iter().sum::<f64>() / ys.len() as f64
            };
            let want = arm_mean(1) - arm_mean(0);
            prop_assert!((e.tau - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        // outcomes of the estimate half never move the structure
        let mut shifted = split.clone();
        let units = shifted.estimate.units().iter().map(|u| {
            let mut u = u.clone();
            u.outcomes[0] += 3.0 * u.features[1];
            u
        }).collect();
        shifted.estimate = treatsel::data::ExperimentDataset::new(
            ds.feature_names().to_vec(), ds.metric_names().to_vec(), 1, units).unwrap();
        prop_assert_eq!(fit_causal_tree(&shifted, 1, 0, &cfg).unwrap().rules(), tree.rules());
    }

    #[test]
    fn tau_is_linear_in_the_policy(seed in any::<u64>(), alpha in 0.0f64..1.0) {
        let cfg = SimConfig::new(vec![vec![1.0, -0.5], vec![0.3, 0.2]], 1, 200, 1.0, seed);
        let ds = generate_dataset(&cfg).unwrap();
        let mut rng = rng::stream(seed, 9);
        let mut random_policy = || {
            let x: Vec<f64> = (0..ds.n_units()).flat_map(|_| {
                let r: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(move |v| v / s)
            }).collect();
            AssignmentPolicy::new(ds.n_units(), 3, x).unwrap()
        };
        let (x, y) = (random_policy(), random_policy());
        let mix = AssignmentPolicy {
            n_rows: x.n_rows,
            n_options: 3,
            x: x.x.iter().zip(&y.x).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect(),
        };
        let (tx, ty, tm) = (
            evaluate_policy(&x, &ds).unwrap().tau,
            evaluate_policy(&y, &ds).unwrap().tau,
            evaluate_policy(&mix, &ds).unwrap().tau,
        );
        for k in 0..2 {
            let want = alpha * tx[k] + (1.0 - alpha) * ty[k];
            prop_assert!((tm[k] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
        let control = evaluate_policy(&AssignmentPolicy::constant(ds.n_units(), 3, 0), &ds).unwrap();
        prop_assert!(control.tau.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn simulated_units_are_consistent(seed in any::<u64>()) {
        let ds = generate_dataset(&SimConfig::new(vec![vec![1.0, -0.5, 0.2]], 2, 100, 2.0, seed)).unwrap();
        for u in ds.units() {
            prop_assert_eq!(&u.counterfactuals.as_ref().unwrap()[u.variant], &u.outcomes);
        }
    }

    #[test]
    fn lp_objective_scales_and_shifts(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = rng::stream(seed, 0);
        let (n, j) = (rng.random_range(1..5), rng.random_range(2..5));
        let mu: Vec<Vec<f64>> = (0..2).map(|_| (0..n * j).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let c = vec![AssignmentPolicy::uniform(n, j).dot(&mu[1]) + 0.1];
        let base = saa_solve(&DeterministicProblem::new(n, j, mu.clone(), c.clone()).unwrap()).unwrap();
        prop_assert_eq!(base.status, SolutionStatus::Optimal);

        let mut scaled = mu.clone();
        scaled[0].iter_mut().for_each(|v| *v *= scale);
        let s = saa_solve(&DeterministicProblem::new(n, j, scaled, c.clone()).unwrap()).unwrap();
        prop_assert!((s.objective - scale * base.objective).abs() <= 1e-8 * (1.0 + s.objective.abs()));

        let shifts: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut shifted = mu.clone();
        for (idx, v) in shifted[0].iter_mut().enumerate() {
            *v += shifts[idx / j];
        }
        let t = saa_solve(&DeterministicProblem::new(n, j, shifted, c).unwrap()).unwrap();
        let want = base.objective + shifts.iter().sum::<f64>();
        prop_assert!((t.objective - want).abs() <= 1e-8 * (1.0 + want.abs()));
    }

    #[test]
    fn unconstrained_lp_takes_the_row_argmax(seed in any::<u64>()) {
        let mut rng = rng::stream(seed, 0);
        let (n, j) = (rng.random_range(1..8), rng.random_range(2..5));
        let mu: Vec<f64> = (0..n * j).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sol = saa_solve(&DeterministicProblem::new(n, j, vec![mu.clone()], vec![]).unwrap()).unwrap();
        let want: f64 = mu.chunks(j).map(|r| r.iter().copied().fold(f64::MIN, f64::max)).sum();
        prop_assert!((sol.objective - want).abs() <= 1e-9);
    }

    #[test]
    fn mcsa_returns_a_policy(seed in any::<u64>()) {
        let mut rng = rng::stream(seed, 0);
        let (n, j) = (rng.random_range(1..5), rng.random_range(2..5));
        let draw = |rng: &mut Rng, lo: f64| (0..n * j).map(|_| rng.random_range(lo..1.0)).collect::<Vec<f64>>();
        let mu = vec![draw(&mut rng, -1.0), draw(&mut rng, -1.0)];
        let sigma = vec![draw(&mut rng, 0.0), draw(&mut rng, 0.0)];
        // best achievable constraint value at the mean
        let slack: f64 = mu[1].chunks(j).map(|r| r.iter().copied().fold(f64::MAX, f64::min)).sum();
        let p = StochasticProblem::new(n, j, mu, sigma, vec![0.0]).unwrap();
        match mcsa_solve(&p, &McsaConfig { iterations: 500, seed, ..McsaConfig::default() }) {
            Ok(sol) => prop_assert!(sol.policy.validate(1e-9).is_ok()),
            Err(e) => {
                let stalled = matches!(e, treatsel::Error::NoFeasibleProgress { .. });
                prop_assert!(stalled, "unexpected error {e}");
                prop_assert!(slack > -0.1, "clearly feasible problem failed, slack {slack}");
            }
        }
    }
}

#[test]
fn noise_grows_with_the_uncertainty_weight() {
    let weights = vec![vec![0.5, -0.3, 0.2], vec![-0.2, 0.4, 0.1]];
    let mut last = vec![0.0; 3];
    for w in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let ds = generate_dataset(&SimConfig::new(weights.clone(), 2, 2000, w, 11)).unwrap();
        for (k, prev) in last.iter_mut().enumerate() {
            let ys: Vec<f64> = ds.units().iter().map(|u| u.outcomes[k]).collect();
            let sd = treatsel::stats::sample_variance(&ys).sqrt();
            assert!(sd >= *prev, "metric {k} at weight {w}: {sd} < {prev}");
            *prev = sd;
        }
    }
}

#[test]
fn honest_halves_partition_the_units() {
    let ds = common::step_dataset(501, 0.1, 3);
    let split = honest_split(&ds, 0.5, 3).unwrap();
    assert_eq!(split.train.n_units() + split.estimate.n_units(), ds.n_units());
    let train: std::collections::HashSet<&str> = split.train.units().iter().map(|u| u.id.as_str()).collect();
    assert!(split.estimate.units().iter().all(|u| !train.contains(u.id.as_str())));
}

#[test]
fn csv_round_trip_is_stable() {
    let ds = common::step_dataset(50, 0.1, 4);
    let mut first = Vec::new();
    write_csv(&ds, &mut first, ',').unwrap();
    let loaded = read_experiment_csv(first.as_slice(), &ds.csv_schema(',')).unwrap();
    assert_eq!(loaded, ds);
    let mut second = Vec::new();
    write_csv(&loaded, &mut second, ',').unwrap();
    assert_eq!(first, second);
}

#[test]
fn constraint_estimates_have_the_sampling_moments() {
    use treatsel::optimize::{estimate_constraints, Sampler};
    let p = StochasticProblem::new(
        2,
        2,
        vec![vec![0.0; 4], vec![0.1, 0.4, -0.2, 0.3]],
        vec![vec![0.0; 4], vec![0.5, 1.0, 2.0, 0.7]],
        vec![0.05],
    )
    .unwrap();
    let x = [0.3, 0.7, 0.6, 0.4];
    let l = 10;
    let mean_want: f64 = x.iter().zip(&p.mu[1]).map(|(a, b)| a * b).sum::<f64>() - 0.05;
    let var_want: f64 = x.iter().zip(&p.sigma[1]).map(|(a, s)| a * a * s * s).sum::<f64>() / l as f64;
    for sampler in [Sampler::Explicit, Sampler::Aggregated] {
        let mut rng = rng::stream(1, 0);
        let draws: Vec<f64> = (0..40_000)
            .map(|_| estimate_constraints(&x, &p, l, sampler, &mut rng)[0])
            .collect();
        let mean = treatsel::stats::mean(&draws);
        let var = treatsel::stats::sample_variance(&draws);
        assert!((mean - mean_want).abs() <= 4.0 * (var_want / 40_000.0).sqrt(), "{sampler:?} mean {mean}");
        assert!((var / var_want - 1.0).abs() <= 0.05, "{sampler:?} variance {var} vs {var_want}");
    }
}

/// With null effects the LP answer is a vertex, so the correction cannot
/// raise the largest row entry.
#[test]
fn correction_does_not_sharpen_null_lp_policies() {
    let mut total_corrected = 0.0;
    let mut total_raw = 0.0;
    for rep in 0..20 {
        let mut rng = rng::stream(77, rep);
        let (n, j) = (3, 3);
        let cells = vec![(0..n * j)
            .map(|idx| {
                if idx % j == CONTROL {
                    CellStats::fixed(0.0)
                } else {
                    let se = (2.0f64 / 200.0).sqrt();
                    CellStats {
                        mu_hat: se * rng.random_range(-1.0..1.0),
                        var_treat: 1.0,
                        var_control: 1.0,
                        n_treat: 100,
                        n_control: 100,
                    }
                }
            })
            .collect()];
        let input = BootstrapInput {
            n,
            n_options: j,
            cells,
            c: vec![],
            solver: BootstrapSolver::Deterministic,
            replicates: 50,
            seed: rep,
            keep_samples: false,
        };
        let res = bootstrap_assignments(&input).unwrap();
        total_corrected += res.x_corrected.row_max().iter().sum::<f64>();
        total_raw += res.x_hat.row_max().iter().sum::<f64>();
    }
    assert!(total_corrected <= total_raw, "{total_corrected} > {total_raw}");
}
