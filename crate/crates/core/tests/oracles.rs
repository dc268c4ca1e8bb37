mod common;

use bce_core::features::{knn_graph, Setting, lars_select, spectral_embedding};
use bce_core::model::{FactorGraph, StateTrajectory};
use bce_core::robust::{dcs_weight, solve_dcs, DcsConfig};
use bce_core::solver::{solve, SolverConfig};
use bce_core::vbgmm::{fit, VariationalState, VbConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn linear_problems_match_generalized_least_squares() {
    for seed in 0..40 {
        let mut rng = common::rng(100 + seed);
        let dim = 2 + (seed as usize % 2);
        let epochs = rng.random_range(1..=12);
        let setup = common::random_setup(&mut rng, dim);
        let obs = common::linear_observations(&mut rng, dim, epochs);
        let graph = FactorGraph::build(&obs, &setup).unwrap();
        let (x, _) = solve(&graph, &graph.initial_trajectory(), &SolverConfig::default()).unwrap();
        let oracle = common::gls(&obs, &setup, epochs);
        let err = (DVector::from_column_slice(x.as_slice()) - &oracle).norm() / oracle.norm().max(1.0);
        assert!(err < 1e-8, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn analytic_jacobian_matches_central_differences() {
    let mut rng = common::rng(7);
    let setup = common::random_setup(&mut rng, 2);
    let obs = common::nonlinear_observations(&mut rng, 2, 3, true);
    let graph = FactorGraph::build(&obs, &setup).unwrap();
    let x = StateTrajectory::from_flat(2, (0..9).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
    let analytic = graph.linearize(&x).unwrap().to_dense_jacobian();
    let numeric = common::fd_jacobian(&graph, &x, 1e-6);
    let scale = analytic.abs().max().max(1.0);
    assert!((&analytic - &numeric).abs().max() / scale < 1e-6);
}

#[test]
fn single_component_elbo_equals_log_marginal() {
    let data = [0.3, -1.2, 2.5, 0.9, 1.4];
    let x = DMatrix::from_column_slice(5, 1, &data);
    let cfg = VbConfig { truncation: 1, tolerance: 1e-12, ..Default::default() };
    let prior = VariationalState::initialize(&x, &cfg).unwrap().prior().clone();
    let fitted = fit(&x, &cfg).unwrap();
    let oracle = common::log_marginal_quadrature(&data, prior.m0[0], prior.beta0, 1.0 / prior.w0_inv[(0, 0)], prior.nu0);
    assert!(
        (fitted.report.elbo - oracle).abs() < 1e-6 * oracle.abs().max(1.0),
        "elbo {} vs quadrature {oracle}",
        fitted.report.elbo
    );
}

#[test]
fn two_separated_clusters_are_recovered() {
    let mut rng = common::rng(3);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..40).map(|i| normal.sample(&mut rng) + if i % 2 == 0 { -6.0 } else { 6.0 }).collect();
    let x = DMatrix::from_column_slice(data.len(), 1, &data);
    let cfg = VbConfig { truncation: 6, ..Default::default() };
    let f = fit(&x, &cfg).unwrap();
    assert_eq!(f.report.effective_components, 2);
    for w in f.report.elbo_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-7, "{} -> {}", w[0], w[1]);
    }
    let mut means: Vec<f64> = f.mixture.means().iter().map(|m| m[0]).collect();
    means.sort_by(f64::total_cmp);
    assert!((means[0] + 6.0).abs() < 0.7 && (means[1] - 6.0).abs() < 0.7, "{means:?}");
}

#[test]
fn dcs_kernel_minimizer_matches_grid_search() {
    // IRLS with weight s(u) on the squared error u minimizes the kernel
    // whose derivative is s: u below phi, phi + 2 phi ln((phi + u) / 2 phi) above
    let ys = [0.9, 1.1, 1.0, 0.95, 40.0];
    let phi = 1.0;
    let rho = |e2: f64| if e2 <= phi { e2 } else { phi + 2.0 * phi * ((phi + e2) / (2.0 * phi)).ln() };
    let cost = |m: f64| ys.iter().map(|y| rho((y - m) * (y - m))).sum::<f64>();
    let best = (0..=200_000).map(|i| -2.0 + i as f64 * 1e-4).min_by(|a, b| cost(*a).total_cmp(&cost(*b))).unwrap();

    use bce_core::model::{FeatureVector, GraphSetup, NoiseModel, Observation, ObservationKind, StateVector};
    let setup = GraphSetup {
        epochs: Some(1),
        prior: StateVector::new(vec![0.0], 0.0),
        prior_noise: NoiseModel::diagonal_sigmas(&[1e4, 1e-6]).unwrap(),
        motion_noise: NoiseModel::isotropic(2, 1.0).unwrap(),
        range_noise: NoiseModel::scalar(0.0, 1.0).unwrap(),
        phase_noise: NoiseModel::scalar(0.0, 1.0).unwrap(),
    };
    // a 1-D range from a beacon far to the left measures position + offset
    let obs: Vec<Observation> = ys
        .iter()
        .map(|y| Observation {
            epoch: 0,
            kind: ObservationKind::Range,
            value: vec![y + 1000.0],
            beacon: Some(vec![-1000.0]),
            metadata: FeatureVector::empty(),
        })
        .collect();
    let graph = FactorGraph::build(&obs, &setup).unwrap();
    let (x, report) = solve_dcs(&graph, &graph.initial_trajectory(), &DcsConfig::default(), &SolverConfig::default()).unwrap();
    assert!(report.converged);
    assert!((x.position(0)[0] - best).abs() < 2e-4, "dcs {} grid {best}", x.position(0)[0]);
    assert!(dcs_weight(1.0, phi).unwrap() == 1.0 && dcs_weight(39.0 * 39.0, phi).unwrap() < 0.01);
}

#[test]
fn planted_cluster_column_wins_lars_scoring() {
    // two blobs separated along column 0; column 1 is noise
    let mut rng = common::rng(11);
    let n = 60;
    let data = DMatrix::from_fn(n, 2, |i, c| {
        let noise: f64 = rng.random_range(-0.3..0.3);
        if c == 0 { if i < n / 2 { -2.0 + noise } else { 2.0 + noise } } else { rng.random_range(-1.0..1.0) }
    });
    let graph = knn_graph(&data, 5, Setting::Value(1.0)).unwrap();
    let emb = spectral_embedding(&graph, 1).unwrap();
    // brute-force check of the cluster indicator: same sign within blobs
    let col = emb.vectors.column(0);
    let left = col[0].signum();
    assert!((0..n / 2).all(|i| col[i].signum() == left));
    assert!((n / 2..n).all(|i| col[i].signum() == -left));
    let beta = lars_select(&data, &col.into_owned(), 1).unwrap();
    assert!(beta[0] != 0.0 && beta[1] == 0.0);
}
