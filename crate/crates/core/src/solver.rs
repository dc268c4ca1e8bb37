//! Levenberg-Marquardt minimization of a weighted sum of whitened squared
//! residuals, `sum_n w_n |e_n(x)|^2`.
//!
//! Problems expose their variables as equally sized blocks. When every
//! factor touches at most two adjacent blocks and the block count reaches
//! `SolverConfig::dense_threshold`, the normal equations are stored and
//! factored block-tridiagonally; otherwise a dense Cholesky is used.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FactorGraph, StateTrajectory};

/// Whitened residual of one factor and its Jacobian blocks.
#[derive(Debug, Clone)]
pub struct LinearizedFactor {
    pub residual: DVector<f64>,
    /// `(block index, d e / d x_block)`.
    pub blocks: Vec<(usize, DMatrix<f64>)>,
}

/// A nonlinear least-squares problem in whitened form.
pub trait LeastSquaresProblem: Sync {
    fn block_size(&self) -> usize;
    fn block_count(&self) -> usize;
    fn factor_count(&self) -> usize;
    fn whitened_residual(&self, factor: usize, x: &[f64]) -> Result<DVector<f64>>;
    fn linearize_factor(&self, factor: usize, x: &[f64]) -> Result<LinearizedFactor>;

    fn variable_count(&self) -> usize {
        self.block_size() * self.block_count()
    }
}

impl LeastSquaresProblem for FactorGraph {
    fn block_size(&self) -> usize {
        self.dim() + 1
    }

    fn block_count(&self) -> usize {
        self.epochs()
    }

    fn factor_count(&self) -> usize {
        self.factors().len()
    }

    fn whitened_residual(&self, factor: usize, x: &[f64]) -> Result<DVector<f64>> {
        let f = self.factor(factor);
        f.noise.whiten(&f.residual_flat(self.dim(), x)?)
    }

    fn linearize_factor(&self, factor: usize, x: &[f64]) -> Result<LinearizedFactor> {
        let f = self.factor(factor);
        let residual = f.noise.whiten(&f.residual_flat(self.dim(), x)?)?;
        let blocks = f
            .jacobian_flat(self.dim(), x)?
            .into_iter()
            .map(|(e, j)| Ok((e, f.noise.whiten_jacobian(&j)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LinearizedFactor { residual, blocks })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Relative cost decrease below which an accepted step ends the solve.
    pub cost_tolerance: f64,
    /// Step norm, relative to the state norm, below which the solve ends.
    pub step_tolerance: f64,
    /// Damping ceiling; reaching it with a non-factorable system is an error.
    pub max_damping: f64,
    /// Block count from which the block-tridiagonal path is used.
    pub dense_threshold: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.1,
            cost_tolerance: 1e-12,
            step_tolerance: 1e-10,
            max_damping: 1e16,
            dense_threshold: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.initial_damping,
            self.damping_up,
            self.damping_down,
            self.cost_tolerance,
            self.step_tolerance,
            self.max_damping,
        ];
        if self.max_iterations == 0 || positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig("solver settings must be positive and max_iterations >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    CostTol,
    StepTol,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub final_cost: f64,
    pub iterations: usize,
    pub reason: Convergence,
    /// Cost at the start followed by the cost after every accepted step.
    pub cost_trace: Vec<f64>,
}

/// `sum_n w_n |e_n|^2` with unit weights when `weights` is `None`.
pub fn weighted_cost<P: LeastSquaresProblem + ?Sized>(problem: &P, x: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    check_weights(problem, weights)?;
    let norms = crate::par::map_range(problem.factor_count(), |i| {
        problem.whitened_residual(i, x).map(|e| e.norm_squared())
    });
    let mut total = 0.0;
    for (i, n) in norms.into_iter().enumerate() {
        total += weights.map_or(1.0, |w| w[i]) * n?;
    }
    Ok(total)
}

fn check_weights<P: LeastSquaresProblem + ?Sized>(problem: &P, weights: Option<&[f64]>) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != problem.factor_count() {
            return Err(Error::WeightCountMismatch { expected: problem.factor_count(), got: w.len() });
        }
        if let Some(bad) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("weight {bad} outside [0, 1]")));
        }
    }
    Ok(())
}

enum NormalEquations {
    Dense { h: DMatrix<f64>, g: DVector<f64> },
    Tridiagonal { diag: Vec<DMatrix<f64>>, upper: Vec<DMatrix<f64>>, g: Vec<DVector<f64>> },
}

impl NormalEquations {
    fn diagonal(&self) -> Vec<f64> {
        match self {
            Self::Dense { h, .. } => h.diagonal().iter().copied().collect(),
            Self::Tridiagonal { diag, .. } => diag.iter().flat_map(|d| d.diagonal().iter().copied().collect::<Vec<_>>()).collect(),
        }
    }

    /// Solves `(H + lambda diag(H)) delta = -g`; `None` if not positive definite.
    fn solve_damped(&self, lambda: f64, scaling: &[f64]) -> Option<DVector<f64>> {
        match self {
            Self::Dense { h, g } => {
                let mut a = h.clone();
                for (i, s) in scaling.iter().enumerate() {
                    a[(i, i)] += lambda * s;
                }
                let chol = a.cholesky()?;
                let delta = chol.solve(&(-g));
                delta.iter().all(|v| v.is_finite()).then_some(delta)
            }
            Self::Tridiagonal { diag, upper, g } => {
                let b = diag[0].nrows();
                let n = diag.len();
                // Block forward elimination with Cholesky-factored Schur complements.
                let mut schur = Vec::with_capacity(n);
                let mut y: Vec<DVector<f64>> = Vec::with_capacity(n);
                for k in 0..n {
                    let mut a = diag[k].clone();
                    for i in 0..b {
                        a[(i, i)] += lambda * scaling[k * b + i];
                    }
                    let mut rhs = -&g[k];
                    if k > 0 {
                        let prev: &nalgebra::Cholesky<f64, nalgebra::Dyn> = &schur[k - 1];
                        let bt = upper[k - 1].transpose();
                        let s_inv_b = prev.solve(&upper[k - 1]);
                        a -= &bt * s_inv_b;
                        rhs -= &bt * prev.solve(&y[k - 1]);
                    }
                    schur.push(a.cholesky()?);
                    y.push(rhs);
                }
                let mut x = vec![DVector::zeros(b); n];
                for k in (0..n).rev() {
                    let mut rhs = y[k].clone();
                    if k + 1 < n {
                        rhs -= &upper[k] * &x[k + 1];
                    }
                    x[k] = schur[k].solve(&rhs);
                }
                let delta = DVector::from_iterator(n * b, x.iter().flat_map(|v| v.iter().copied()));
                delta.iter().all(|v| v.is_finite()).then_some(delta)
            }
        }
    }
}

fn assemble<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    weights: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<NormalEquations> {
    let lin = crate::par::map_range(problem.factor_count(), |i| problem.linearize_factor(i, x));
    let lin = lin.into_iter().collect::<Result<Vec<_>>>()?;
    let b = problem.block_size();
    let n = problem.block_count();
    let banded = n >= config.dense_threshold
        && lin.iter().all(|f| {
            let lo = f.blocks.iter().map(|(k, _)| *k).min().unwrap_or(0);
            let hi = f.blocks.iter().map(|(k, _)| *k).max().unwrap_or(0);
            hi - lo <= 1
        });
    if banded {
        let mut diag = vec![DMatrix::zeros(b, b); n];
        let mut upper = vec![DMatrix::zeros(b, b); n.saturating_sub(1)];
        let mut g = vec![DVector::zeros(b); n];
        for (i, f) in lin.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            for (ka, ja) in &f.blocks {
                g[*ka] += w * ja.transpose() * &f.residual;
                for (kb, jb) in &f.blocks {
                    let blk = w * ja.transpose() * jb;
                    if ka == kb {
                        diag[*ka] += blk;
                    } else if kb == &(ka + 1) {
                        upper[*ka] += blk;
                    }
                }
            }
        }
        Ok(NormalEquations::Tridiagonal { diag, upper, g })
    } else {
        let mut h = DMatrix::zeros(n * b, n * b);
        let mut g = DVector::zeros(n * b);
        for (i, f) in lin.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            for (ka, ja) in &f.blocks {
                let mut gv = g.rows_mut(ka * b, b);
                gv += w * ja.transpose() * &f.residual;
                for (kb, jb) in &f.blocks {
                    let mut hv = h.view_mut((ka * b, kb * b), (b, b));
                    hv += w * ja.transpose() * jb;
                }
            }
        }
        Ok(NormalEquations::Dense { h, g })
    }
}

/// Levenberg-Marquardt on a flat variable vector.
pub fn solve_problem<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    weights: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    config.validate()?;
    check_weights(problem, weights)?;
    if x0.len() != problem.variable_count() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} entries, problem has {}",
            x0.len(),
            problem.variable_count()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData("initial state".into()));
    }
    let mut x = x0.to_vec();
    let mut cost = weighted_cost(problem, &x, weights)?;
    let mut trace = vec![cost];
    let mut lambda = config.initial_damping;

    for iteration in 1..=config.max_iterations {
        let normal = assemble(problem, &x, weights, config)?;
        let scaling = normal.diagonal();
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let accepted = loop {
            let Some(delta) = normal.solve_damped(lambda, &scaling) else {
                lambda *= config.damping_up;
                if lambda > config.max_damping {
                    return Err(Error::LinearAlgebraFailure(
                        "normal equations not positive definite at the damping ceiling".into(),
                    ));
                }
                continue;
            };
            if delta.norm() <= config.step_tolerance * (x_norm + config.step_tolerance) {
                break None;
            }
            let candidate: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            let new_cost = weighted_cost(problem, &candidate, weights)?;
            if new_cost.is_finite() && new_cost <= cost {
                lambda = (lambda * config.damping_down).max(1e-300);
                break Some((candidate, new_cost));
            }
            lambda *= config.damping_up;
            if lambda > config.max_damping {
                // No downhill step exists at any damping: stationary point.
                break None;
            }
        };
        let Some((candidate, new_cost)) = accepted else {
            return Ok((x, SolveReport { final_cost: cost, iterations: iteration, reason: Convergence::StepTol, cost_trace: trace }));
        };
        let decrease = if cost > 0.0 { (cost - new_cost) / cost } else { 0.0 };
        x = candidate;
        cost = new_cost;
        trace.push(cost);
        if decrease < config.cost_tolerance {
            return Ok((x, SolveReport { final_cost: cost, iterations: iteration, reason: Convergence::CostTol, cost_trace: trace }));
        }
    }
    Ok((x, SolveReport { final_cost: cost, iterations: config.max_iterations, reason: Convergence::MaxIter, cost_trace: trace }))
}

/// Unweighted solve of a factor graph.
pub fn solve(graph: &FactorGraph, x0: &StateTrajectory, config: &SolverConfig) -> Result<(StateTrajectory, SolveReport)> {
    solve_weighted(graph, x0, None, config)
}

pub fn solve_weighted(
    graph: &FactorGraph,
    x0: &StateTrajectory,
    weights: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<(StateTrajectory, SolveReport)> {
    graph.check_trajectory(x0)?;
    let (x, report) = solve_problem(graph, x0.as_slice(), weights, config)?;
    Ok((StateTrajectory::from_flat(graph.dim(), x)?, report))
}

pub fn graph_cost(graph: &FactorGraph, x: &StateTrajectory, weights: Option<&[f64]>) -> Result<f64> {
    graph.check_trajectory(x)?;
    weighted_cost(graph, x.as_slice(), weights)
}


#[cfg(test)]
mod tests {
    use super::testing::ScalarProblem;
    use super::*;

    #[test]
    fn two_priors_average() {
        let p = ScalarProblem { blocks: 1, factors: vec![(0, 1.0, 1.0, 0), (0, 3.0, 1.0, 0)] };
        let (x, rep) = solve_problem(&p, &[0.0], None, &SolverConfig::default()).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-8);
        assert!((rep.final_cost - 2.0).abs() < 1e-8);
    }

    #[test]
    fn stationary_start_stops_by_step_tolerance() {
        let p = ScalarProblem { blocks: 1, factors: vec![(0, 1.5, 1.0, 0)] };
        let (x, rep) = solve_problem(&p, &[1.5], None, &SolverConfig::default()).unwrap();
        assert_eq!(x, vec![1.5]);
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.reason, Convergence::StepTol);
    }

    #[test]
    fn square_root_by_lm() {
        let p = ScalarProblem { blocks: 1, factors: vec![(0, 4.0, 1.0, 1)] };
        let (x, _) = solve_problem(&p, &[1.0], None, &SolverConfig::default()).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn cost_trace_non_increasing() {
        let p = ScalarProblem { blocks: 1, factors: vec![(0, 9.0, 1.0, 1), (0, 2.0, 0.5, 0)] };
        let (_, rep) = solve_problem(&p, &[10.0], None, &SolverConfig::default()).unwrap();
        assert!(rep.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(rep.final_cost <= rep.cost_trace[0]);
    }

    #[test]
    fn weighted_cost_examples() {
        let p = ScalarProblem { blocks: 2, factors: vec![(0, 1.0, 1.0, 0), (1, 1.0, 1.0, 0)] };
        assert_eq!(weighted_cost(&p, &[0.0, 0.0], None).unwrap(), 2.0);
        let single = ScalarProblem { blocks: 1, factors: vec![(0, 3.0, 1.0, 0)] };
        assert_eq!(weighted_cost(&single, &[0.0], Some(&[0.0])).unwrap(), 0.0);
        let p = ScalarProblem { blocks: 2, factors: vec![(0, 2f64.sqrt(), 1.0, 0), (1, 2.0, 1.0, 0)] };
        let c = weighted_cost(&p, &[0.0, 0.0], Some(&[1.0, 0.5])).unwrap();
        assert!((c - 4.0).abs() < 1e-12);
        assert!(matches!(
            weighted_cost(&p, &[0.0, 0.0], Some(&[1.0])),
            Err(Error::WeightCountMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn unobservable_variable_fails() {
        let p = ScalarProblem { blocks: 2, factors: vec![(0, 1.0, 1.0, 0)] };
        assert!(matches!(
            solve_problem(&p, &[0.0, 0.0], None, &SolverConfig::default()),
            Err(Error::LinearAlgebraFailure(_))
        ));
    }
}
