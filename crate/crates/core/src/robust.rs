//! Dynamic covariance scaling and max-mixture baselines.
//!
//! Both wrap the Levenberg-Marquardt solver in an outer loop driven by the
//! residuals of the previous iterate: DCS rescales each measurement factor,
//! max-mixtures swaps each measurement factor's noise model for the best
//! component of a fixed mixture.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FactorGraph, NoiseModel, StateTrajectory};
use crate::solver::{solve_problem, LeastSquaresProblem, SolveReport, SolverConfig};
use crate::vbgmm::GaussianMixture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcsConfig {
    pub phi: f64,
    pub max_outer: usize,
    /// Max-norm weight change that ends the reweighting.
    pub weight_tolerance: f64,
}

impl Default for DcsConfig {
    fn default() -> Self {
        Self { phi: 1.0, max_outer: 20, weight_tolerance: 1e-6 }
    }
}

impl DcsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi.is_finite() && self.phi > 0.0) {
            return Err(Error::InvalidConfig(format!("dcs phi must be finite and positive, got {}", self.phi)));
        }
        if self.max_outer == 0 || !(self.weight_tolerance > 0.0) {
            return Err(Error::InvalidConfig("dcs max_outer and weight_tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// DCS scale `min(1, 2 phi / (phi + e2))` for a squared whitened error.
pub fn dcs_weight(e2: f64, phi: f64) -> Result<f64> {
    if e2 < 0.0 {
        return Err(Error::NegativeInput(e2));
    }
    if e2.is_nan() {
        return Err(Error::NonFiniteData("squared error is NaN".into()));
    }
    Ok((2.0 * phi / (phi + e2)).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcsReport {
    pub outer_iterations: usize,
    pub converged: bool,
    /// Final per-factor scale; 1 for factors that are not reweighted.
    pub weights: Vec<f64>,
    /// Weighted cost after each outer solve.
    pub outer_costs: Vec<f64>,
    pub solve: SolveReport,
}

/// DCS over any least-squares problem; only factors flagged in `robust`
/// are reweighted.
pub fn solve_dcs_problem<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    robust: &[bool],
    dcs: &DcsConfig,
    solver: &SolverConfig,
) -> Result<(Vec<f64>, DcsReport)> {
    dcs.validate()?;
    if robust.len() != problem.factor_count() {
        return Err(Error::WeightCountMismatch { expected: problem.factor_count(), got: robust.len() });
    }
    let mut weights = vec![1.0; robust.len()];
    let (mut x, mut solve) = solve_problem(problem, x0, Some(&weights), solver)?;
    let mut outer_costs = vec![solve.final_cost];
    let mut outer = 1;
    let mut converged = false;
    loop {
        let next = crate::par::map_range(robust.len(), |i| {
            if robust[i] {
                let e2 = problem.whitened_residual(i, &x)?.norm_squared();
                dcs_weight(e2, dcs.phi)
            } else {
                Ok(1.0)
            }
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let change = next.iter().zip(&weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        weights = next;
        if change < dcs.weight_tolerance {
            converged = true;
            break;
        }
        if outer >= dcs.max_outer {
            break;
        }
        let (nx, report) = solve_problem(problem, &x, Some(&weights), solver)?;
        x = nx;
        solve = report;
        outer_costs.push(solve.final_cost);
        outer += 1;
    }
    Ok((x, DcsReport { outer_iterations: outer, converged, weights, outer_costs, solve }))
}

/// DCS on a factor graph; prior and motion factors keep full weight.
pub fn solve_dcs(
    graph: &FactorGraph,
    x0: &StateTrajectory,
    dcs: &DcsConfig,
    solver: &SolverConfig,
) -> Result<(StateTrajectory, DcsReport)> {
    graph.check_trajectory(x0)?;
    let robust: Vec<bool> = graph.factors().iter().map(|f| f.is_measurement()).collect();
    let (x, report) = solve_dcs_problem(graph, x0.as_slice(), &robust, dcs, solver)?;
    Ok((StateTrajectory::from_flat(graph.dim(), x)?, report))
}

/// A mixture held fixed over a whole solve; every weight is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianMixture", into = "GaussianMixture")]
pub struct StaticMixture {
    mixture: GaussianMixture,
    components: Vec<NoiseModel>,
    log_weights: Vec<f64>,
}

impl TryFrom<GaussianMixture> for StaticMixture {
    type Error = Error;

    fn try_from(mixture: GaussianMixture) -> Result<Self> {
        if mixture.weights().iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidConfig("static mixture weights must be positive".into()));
        }
        let components = (0..mixture.len()).map(|k| mixture.component(k)).collect();
        let log_weights = mixture.weights().iter().map(|w| w.ln()).collect();
        Ok(Self { mixture, components, log_weights })
    }
}

impl From<StaticMixture> for GaussianMixture {
    fn from(m: StaticMixture) -> Self {
        m.mixture
    }
}

impl StaticMixture {
    pub fn new(mixture: GaussianMixture) -> Result<Self> {
        Self::try_from(mixture)
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }
}

/// Component maximizing `w_i N(r; mu_i, Lambda_i)`; ties go to the lowest index.
pub fn max_mixture_select<'a>(r: &DVector<f64>, mix: &'a StaticMixture) -> Result<(usize, &'a NoiseModel)> {
    if r.len() != mix.dim() {
        return Err(Error::DimensionMismatch(format!("residual has {} entries, mixture {}", r.len(), mix.dim())));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, c) in mix.components.iter().enumerate() {
        let score = mix.log_weights[k] + c.log_density(r)?;
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    Ok((best, &mix.components[best]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub outer_iterations: usize,
    pub converged: bool,
    /// Component index per measurement factor, in factor order.
    pub assignments: Vec<usize>,
    pub assignment_history: Vec<Vec<usize>>,
    pub outer_costs: Vec<f64>,
    pub solve: SolveReport,
}

/// Max-mixture solve: starts from the configured noise models, then
/// alternates component selection on current residuals with re-solves.
///
/// Returns the graph with the final noise models installed.
pub fn solve_max_mixture(
    graph: &FactorGraph,
    x0: &StateTrajectory,
    mix: &StaticMixture,
    solver: &SolverConfig,
    max_outer: usize,
) -> Result<(StateTrajectory, MixtureReport, FactorGraph)> {
    if max_outer == 0 {
        return Err(Error::InvalidConfig("max_outer must be >= 1".into()));
    }
    graph.check_trajectory(x0)?;
    let measurements = graph.measurement_indices();
    for &i in &measurements {
        let d = graph.factor(i).residual_dim();
        if d != mix.dim() {
            return Err(Error::DimensionMismatch(format!("factor {i} has residual dim {d}, mixture {}", mix.dim())));
        }
    }
    let mut graph = graph.clone();
    let (mut x, mut solve) = crate::solver::solve(&graph, x0, solver)?;
    let mut outer_costs = vec![solve.final_cost];
    let mut history: Vec<Vec<usize>> = Vec::new();
    let mut outer = 1;
    let mut converged = false;
    loop {
        let picks = crate::par::map_slice(&measurements, |&i| {
            let r = graph.factor(i).residual(&x)?;
            max_mixture_select(&r, mix).map(|(k, _)| k)
        })
        .into_iter()
        .collect::<Result<Vec<usize>>>()?;
        let mut changed = false;
        for (&i, &k) in measurements.iter().zip(&picks) {
            let noise = &mix.components[k];
            if graph.factor(i).noise != *noise {
                graph.set_noise(i, noise.clone())?;
                changed = true;
            }
        }
        let repeated = history.last() == Some(&picks);
        history.push(picks);
        if !changed || repeated {
            converged = true;
            break;
        }
        if outer >= max_outer {
            break;
        }
        let (nx, report) = crate::solver::solve(&graph, &x, solver)?;
        x = nx;
        solve = report;
        outer_costs.push(solve.final_cost);
        outer += 1;
    }
    let report = MixtureReport {
        outer_iterations: outer,
        converged,
        assignments: history.last().cloned().unwrap_or_default(),
        assignment_history: history,
        outer_costs,
        solve,
    };
    Ok((x, report, graph))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::testing::ScalarProblem;
    use nalgebra::DMatrix;

    fn mix(weights: &[f64], means: &[f64], vars: &[f64]) -> StaticMixture {
        StaticMixture::new(
            GaussianMixture::new(
                weights.to_vec(),
                means.iter().map(|m| DVector::from_element(1, *m)).collect(),
                vars.iter().map(|v| DMatrix::from_element(1, 1, *v)).collect(),
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn weight_examples() {
        assert_eq!(dcs_weight(0.0, 1.0).unwrap(), 1.0);
        assert_eq!(dcs_weight(2.5, 2.5).unwrap(), 1.0);
        assert_eq!(dcs_weight(3.0, 1.0).unwrap(), 0.5);
        assert!(matches!(dcs_weight(-1.0, 1.0), Err(Error::NegativeInput(_))));
    }

    // Implied robust kernel of the DCS scale as a function of u = e^2.
    fn dcs_kernel(u: f64, phi: f64) -> f64 {
        if u <= phi {
            u
        } else {
            phi + 2.0 * phi * ((phi + u) / (2.0 * phi)).ln()
        }
    }

    #[test]
    fn location_with_outlier_matches_grid_minimum() {
        let ys = [0.9, 1.1, 100.0];
        let p = ScalarProblem { blocks: 1, factors: ys.iter().map(|&y| (0, y, 1.0, 0)).collect() };
        let (x, rep) = solve_dcs_problem(&p, &[0.0], &[true; 3], &DcsConfig::default(), &SolverConfig::default()).unwrap();

        let objective = |t: f64| ys.iter().map(|y| dcs_kernel((y - t) * (y - t), 1.0)).sum::<f64>();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=400_000 {
            let t = -10.0 + i as f64 * 1e-4;
            let v = objective(t);
            if v < best.0 {
                best = (v, t);
            }
        }
        assert!((x[0] - 1.0).abs() < 0.2);
        assert!((x[0] - best.1).abs() < 1e-3, "{} vs grid {}", x[0], best.1);
        assert!(rep.weights[2] < 0.01);
        assert!(rep.converged);
    }

    #[test]
    fn only_prior_returns_prior_mean() {
        let p = ScalarProblem { blocks: 1, factors: vec![(0, 4.0, 2.0, 0)] };
        let (x, _) = solve_dcs_problem(&p, &[0.0], &[false], &DcsConfig::default(), &SolverConfig::default()).unwrap();
        assert!((x[0] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn inliers_keep_full_weight() {
        let p = ScalarProblem { blocks: 1, factors: vec![(0, 0.9, 1.0, 0), (0, 1.1, 1.0, 0)] };
        let (x, rep) = solve_dcs_problem(&p, &[0.0], &[true; 2], &DcsConfig::default(), &SolverConfig::default()).unwrap();
        let (l2, _) = solve_problem(&p, &[0.0], None, &SolverConfig::default()).unwrap();
        assert_eq!(x, l2);
        assert_eq!(rep.weights, vec![1.0, 1.0]);
        assert_eq!(rep.outer_iterations, 1);
    }

    #[test]
    fn select_examples() {
        let one = mix(&[1.0], &[0.0], &[1.0]);
        assert_eq!(max_mixture_select(&DVector::from_element(1, 50.0), &one).unwrap().0, 0);
        let two = mix(&[0.9, 0.1], &[0.0, 0.0], &[1.0, 100.0]);
        assert_eq!(max_mixture_select(&DVector::from_element(1, 0.0), &two).unwrap().0, 0);
        let (k, noise) = max_mixture_select(&DVector::from_element(1, 10.0), &two).unwrap();
        assert_eq!(k, 1);
        assert_eq!(noise.covariance()[(0, 0)], 100.0);
        assert!(max_mixture_select(&DVector::zeros(2), &two).is_err());
    }

    #[test]
    fn select_ties_go_to_lowest_index() {
        let twin = mix(&[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(max_mixture_select(&DVector::from_element(1, 0.3), &twin).unwrap().0, 0);
    }

    #[test]
    fn static_mixture_rejects_zero_weight() {
        let g = GaussianMixture::new(
            vec![1.0, 0.0],
            vec![DVector::zeros(1), DVector::zeros(1)],
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        )
        .unwrap();
        assert!(StaticMixture::new(g).is_err());
    }
}
