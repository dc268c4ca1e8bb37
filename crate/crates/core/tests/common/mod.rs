#![allow(dead_code)]

use bce_core::model::{FeatureVector, GraphSetup, NoiseModel, Observation, ObservationKind, StateVector};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random SPD matrix with eigenvalues spread over about two decades.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = a.qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| scale * 10f64.powf(rng.random_range(-1.0..1.0))));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

pub fn random_noise(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> NoiseModel {
    let mean = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5) * scale.sqrt());
    NoiseModel::new(mean, random_spd(rng, n, scale)).unwrap()
}

pub fn random_setup(rng: &mut ChaCha8Rng, dim: usize) -> GraphSetup {
    let b = dim + 1;
    GraphSetup {
        epochs: None,
        prior: StateVector::new((0..dim).map(|_| rng.random_range(-10.0..10.0)).collect(), rng.random_range(-5.0..5.0)),
        prior_noise: random_noise(rng, b, 4.0),
        motion_noise: random_noise(rng, b, 1.0),
        range_noise: NoiseModel::scalar(rng.random_range(-0.2..0.2), rng.random_range(0.5..2.0)).unwrap(),
        phase_noise: NoiseModel::scalar(0.0, rng.random_range(1e-4..1e-2)).unwrap(),
    }
}

pub fn meta(rng: &mut ChaCha8Rng) -> FeatureVector {
    FeatureVector::new([
        ("elevation_deg", rng.random_range(5.0..85.0)),
        ("azimuth_deg", rng.random_range(0.0..360.0)),
        ("signal_strength_dbhz", rng.random_range(25.0..50.0)),
    ])
    .unwrap()
}

/// Linear problem: absolute state fixes at random epochs plus between
/// observations with random displacements. Every epoch is chained.
pub fn linear_observations(rng: &mut ChaCha8Rng, dim: usize, epochs: usize) -> Vec<Observation> {
    let b = dim + 1;
    let mut obs = Vec::new();
    for e in 0..epochs {
        if e == epochs - 1 || rng.random_bool(0.5) {
            obs.push(Observation {
                epoch: e,
                kind: ObservationKind::Prior,
                value: (0..b).map(|_| rng.random_range(-20.0..20.0)).collect(),
                beacon: None,
                metadata: FeatureVector::empty(),
            });
        }
        if e > 0 && rng.random_bool(0.6) {
            obs.push(Observation {
                epoch: e,
                kind: ObservationKind::Between,
                value: (0..b).map(|_| rng.random_range(-3.0..3.0)).collect(),
                beacon: None,
                metadata: FeatureVector::empty(),
            });
        }
    }
    obs
}

/// Ranges (and optionally phase-like values) from random beacons around a
/// random walk.
pub fn nonlinear_observations(rng: &mut ChaCha8Rng, dim: usize, epochs: usize, phase: bool) -> Vec<Observation> {
    let beacons: Vec<Vec<f64>> = (0..dim + 3).map(|_| (0..dim).map(|_| rng.random_range(-100.0..100.0)).collect()).collect();
    let mut p: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mut obs = Vec::new();
    for e in 0..epochs {
        for q in p.iter_mut() {
            *q += rng.random_range(-1.0..1.0);
        }
        for bc in &beacons {
            let d = p.iter().zip(bc).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let m = meta(rng);
            obs.push(Observation::range(e, d + 3.0 + rng.random_range(-1.0..1.0), bc.clone(), m.clone()));
            if phase {
                obs.push(Observation::phase_like(e, d + 3.0 + rng.random_range(-0.01..0.01), bc.clone(), m));
            }
        }
    }
    obs
}

/// Closed-form generalized least squares for a linear problem built from
/// `linear_observations`, assembled directly from the problem description.
pub fn gls(observations: &[Observation], setup: &GraphSetup, epochs: usize) -> DVector<f64> {
    let b = setup.prior.position.len() + 1;
    let n = epochs * b;
    // (epochs touched with signs, value, noise)
    let mut rows: Vec<(Vec<(usize, f64)>, DVector<f64>, &NoiseModel)> = Vec::new();
    let mut prior = setup.prior.position.clone();
    prior.push(setup.prior.bias);
    rows.push((vec![(0, 1.0)], DVector::from_vec(prior), &setup.prior_noise));
    let mut between: Vec<DVector<f64>> = vec![DVector::zeros(b); epochs];
    for o in observations.iter().filter(|o| o.kind == ObservationKind::Between) {
        between[o.epoch] = DVector::from_column_slice(&o.value);
    }
    for k in 1..epochs {
        rows.push((vec![(k - 1, -1.0), (k, 1.0)], between[k].clone(), &setup.motion_noise));
    }
    for o in observations.iter().filter(|o| o.kind == ObservationKind::Prior) {
        rows.push((vec![(o.epoch, 1.0)], DVector::from_column_slice(&o.value), &setup.prior_noise));
    }
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for (touch, y, noise) in rows {
        let info = noise.covariance().clone().try_inverse().unwrap();
        let mut a = DMatrix::zeros(b, n);
        for (e, s) in touch {
            for i in 0..b {
                a[(i, e * b + i)] = s;
            }
        }
        h += a.transpose() * &info * &a;
        g += a.transpose() * &info * (y - noise.mean());
    }
    h.cholesky().unwrap().solve(&g)
}

pub fn stacked_whitened(graph: &bce_core::model::FactorGraph, x: &bce_core::model::StateTrajectory) -> DVector<f64> {
    let parts: Vec<f64> = graph.factors().iter().flat_map(|f| f.whitened_residual(x).unwrap().iter().copied().collect::<Vec<_>>()).collect();
    DVector::from_vec(parts)
}

/// Central-difference Jacobian of the stacked whitened residual.
pub fn fd_jacobian(graph: &bce_core::model::FactorGraph, x: &bce_core::model::StateTrajectory, step: f64) -> DMatrix<f64> {
    let base = x.as_slice().to_vec();
    let rows = stacked_whitened(graph, x).len();
    let mut j = DMatrix::zeros(rows, base.len());
    for c in 0..base.len() {
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[c] += delta;
            stacked_whitened(graph, &bce_core::model::StateTrajectory::from_flat(x.dim(), v).unwrap())
        };
        j.set_column(c, &((eval(step) - eval(-step)) / (2.0 * step)));
    }
    j
}

/// log p(x_1..x_N) for 1-D data under a Normal-Gamma prior written in
/// Wishart form (mean m0, precision scale beta0, scale w0, dof nu0), by
/// nested composite Simpson quadrature over log-precision and mean.
pub fn log_marginal_quadrature(data: &[f64], m0: f64, beta0: f64, w0: f64, nu0: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let ss: f64 = data.iter().map(|v| (v - mean).powi(2)).sum();
    let ln_prior_lambda = |l: f64| {
        (nu0 - 2.0) / 2.0 * l.ln() - l / (2.0 * w0) - nu0 / 2.0 * (2.0 * w0).ln() - ln_gamma(nu0 / 2.0)
    };
    let ln_joint = |mu: f64, l: f64| {
        let lik: f64 = data.iter().map(|x| 0.5 * (l / (2.0 * std::f64::consts::PI)).ln() - 0.5 * l * (x - mu).powi(2)).sum();
        let pm = 0.5 * (beta0 * l / (2.0 * std::f64::consts::PI)).ln() - 0.5 * beta0 * l * (mu - m0).powi(2);
        lik + pm + ln_prior_lambda(l)
    };
    fn simpson(a: f64, b: f64, m: usize, f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        let h = (b - a) / m as f64;
        (0..=m)
            .map(|i| {
                let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                (w * h / 3.0, f(a + i as f64 * h))
            })
            .collect()
    }
    fn log_sum(terms: &[(f64, f64)]) -> f64 {
        let m = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|(w, v)| w * (v - m).exp()).sum::<f64>().ln()
    }
    // centre the log-precision grid on the rough posterior mode
    let shape = (nu0 + n) / 2.0;
    let rate = 1.0 / (2.0 * w0) + 0.5 * ss;
    let t0 = ((shape - 1.0).max(0.5) / rate).ln();
    let outer = simpson(t0 - 14.0, t0 + 8.0, 4000, |t| {
        let l = t.exp();
        let centre = (beta0 * m0 + n * mean) / (beta0 + n);
        let half = 14.0 / ((beta0 + n) * l).sqrt();
        let inner = simpson(centre - half, centre + half, 800, |mu| ln_joint(mu, l));
        // d lambda = lambda d t
        log_sum(&inner) + t
    });
    log_sum(&outer)
}
