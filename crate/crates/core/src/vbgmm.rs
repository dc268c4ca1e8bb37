//! Truncated variational Bayesian Gaussian mixture.
//!
//! Conjugate Dirichlet / Normal-Wishart model fitted by mean-field
//! coordinate ascent: responsibilities `q(Z)` and component posteriors
//! `q(pi, mu, Lambda)` are updated in turn, and the evidence lower bound is
//! evaluated after every parameter update. A small Dirichlet concentration
//! lets surplus components drain; components whose expected weight ends
//! below `1 / (10 N)` are pruned after convergence.
//!
//! Rows are fitted in lexicographic order so the result does not depend on
//! the order the caller supplied them in.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::model::{matrix_from_rows, matrix_rows, NoiseModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VbConfig {
    /// Maximum number of components (truncation level).
    pub truncation: usize,
    pub max_sweeps: usize,
    /// Relative ELBO change that ends the coordinate ascent.
    pub tolerance: f64,
    /// Dirichlet concentration per component.
    pub alpha0: f64,
    /// Pseudo-count on the component mean prior.
    pub kappa0: f64,
    /// Wishart degrees of freedom; `None` means data dimension + 2.
    pub nu0: Option<f64>,
    pub seed: u64,
    /// Try emptying components after convergence, keeping improvements.
    pub deletion_moves: bool,
}

impl Default for VbConfig {
    fn default() -> Self {
        Self { truncation: 10, max_sweeps: 500, tolerance: 1e-8, alpha0: 1e-3, kappa0: 1e-3, nu0: None, seed: 0, deletion_moves: true }
    }
}

impl VbConfig {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.truncation == 0 || self.max_sweeps == 0 {
            return Err(Error::InvalidConfig("truncation and max_sweeps must be >= 1".into()));
        }
        if !(self.alpha0 > 0.0 && self.kappa0 > 0.0 && self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("alpha0, kappa0 and tolerance must be positive".into()));
        }
        if let Some(nu) = self.nu0 {
            if !(nu > dim as f64 - 1.0) {
                return Err(Error::InvalidConfig(format!("nu0 = {nu} must exceed dimension - 1 = {}", dim - 1)));
            }
        }
        Ok(())
    }
}

/// Weighted sum of Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.len() != m || covariances.len() != m {
            return Err(Error::DimensionMismatch("mixture needs matching non-empty weights, means, covariances".into()));
        }
        let d = means[0].len();
        for k in 0..m {
            if means[k].len() != d || covariances[k].shape() != (d, d) {
                return Err(Error::DimensionMismatch(format!("component {k} does not match dimension {d}")));
            }
            // validates symmetry and positive definiteness
            NoiseModel::new(means[k].clone(), covariances[k].clone())?;
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { weights, means, covariances })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn component(&self, k: usize) -> NoiseModel {
        NoiseModel::new(self.means[k].clone(), self.covariances[k].clone()).expect("validated at construction")
    }

    /// `ln w_k + ln N(x; mu_k, Sigma_k)` for every component.
    pub fn weighted_log_densities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!("point has {} entries, mixture {}", x.len(), self.dim())));
        }
        (0..self.len())
            .map(|k| Ok(self.weights[k].ln() + self.component(k).log_density(x)?))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl Serialize for GaussianMixture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MixtureRepr {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: self.covariances.iter().map(matrix_rows).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GaussianMixture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MixtureRepr::deserialize(d)?;
        let covs = r
            .covariances
            .iter()
            .map(|c| matrix_from_rows(c))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        GaussianMixture::new(r.weights, r.means.into_iter().map(DVector::from_vec).collect(), covs)
            .map_err(serde::de::Error::custom)
    }
}

/// Per-point component probabilities and their argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub probs: DMatrix<f64>,
    pub hard: Vec<usize>,
}

impl Responsibilities {
    fn from_probs(probs: DMatrix<f64>) -> Self {
        let hard = (0..probs.nrows())
            .map(|i| {
                let mut best = 0;
                for k in 1..probs.ncols() {
                    if probs[(i, k)] > probs[(i, best)] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        Self { probs, hard }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub elbo: f64,
    pub sweeps: usize,
    pub elbo_trace: Vec<f64>,
    pub effective_components: usize,
    pub converged: bool,
}

/// Conjugate prior hyperparameters.
#[derive(Debug, Clone)]
pub struct Prior {
    pub alpha0: f64,
    pub beta0: f64,
    pub m0: DVector<f64>,
    /// Inverse of the Wishart scale matrix.
    pub w0_inv: DMatrix<f64>,
    pub nu0: f64,
}

/// Variational posterior of one component with its sufficient statistics.
#[derive(Debug, Clone)]
pub struct ComponentPosterior {
    pub alpha: f64,
    pub beta: f64,
    pub mean: DVector<f64>,
    /// Inverse of the posterior Wishart scale matrix.
    pub w_inv: DMatrix<f64>,
    pub nu: f64,
    count: f64,
    data_mean: DVector<f64>,
    scatter: DMatrix<f64>,
    w_inv_chol: Cholesky<f64, Dyn>,
    w_inv_l: DMatrix<f64>,
    e_ln_det: f64,
    e_ln_pi: f64,
}

impl ComponentPosterior {
    pub fn expected_weight(&self, total_alpha: f64) -> f64 {
        self.alpha / total_alpha
    }

    /// Inverse of the expected precision, `W^{-1} / nu`.
    pub fn expected_covariance(&self) -> DMatrix<f64> {
        &self.w_inv / self.nu
    }

    fn ln_det_w(&self) -> f64 {
        -ln_det_chol(&self.w_inv_chol)
    }

    /// `(v)^T W (v)` using the factor of `W^{-1}`.
    fn quad_w(&self, v: &DVector<f64>) -> f64 {
        let mut y = v.as_slice().to_vec();
        self.quad_w_in_place(&mut y)
    }

    /// `quad_w` by forward substitution, overwriting `v`.
    fn quad_w_in_place(&self, v: &mut [f64]) -> f64 {
        let l = &self.w_inv_l;
        let mut s = 0.0;
        for i in 0..v.len() {
            let mut t = v[i];
            for j in 0..i {
                t -= l[(i, j)] * v[j];
            }
            t /= l[(i, i)];
            v[i] = t;
            s += t * t;
        }
        s
    }

    fn trace_w(&self, a: &DMatrix<f64>) -> f64 {
        (self.w_inv_chol.solve(a)).trace()
    }
}

fn ln_det_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn ln_wishart_b(ln_det_w: f64, nu: f64, d: usize) -> f64 {
    let df = d as f64;
    let mut s = -0.5 * nu * ln_det_w - 0.5 * nu * df * 2f64.ln() - 0.25 * df * (df - 1.0) * PI.ln();
    for i in 1..=d {
        s -= ln_gamma(0.5 * (nu + 1.0 - i as f64));
    }
    s
}

/// Coordinate-ascent state: prior, component posteriors and `q(Z)`.
#[derive(Debug, Clone)]
pub struct VariationalState {
    prior: Prior,
    components: Vec<ComponentPosterior>,
    resp: DMatrix<f64>,
}

fn validate_data(data: &DMatrix<f64>) -> Result<()> {
    if data.nrows() < 2 {
        return Err(Error::TooFewPoints(format!("need at least 2 points, got {}", data.nrows())));
    }
    if data.ncols() == 0 {
        return Err(Error::DimensionMismatch("data has no columns".into()));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData(format!("entry {i} is not finite")));
    }
    Ok(())
}

fn regularize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    let tr = m.trace();
    let eps = if tr > 0.0 { 1e-9 * tr / d as f64 } else { 1e-9 };
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if min_eig <= eps {
        for i in 0..d {
            m[(i, i)] += eps;
        }
    }
}

impl VariationalState {
    /// Builds the data-driven prior and seeds `q(Z)` by k-means++.
    pub fn initialize(data: &DMatrix<f64>, config: &VbConfig) -> Result<Self> {
        validate_data(data)?;
        config.validate(data.ncols())?;
        let (n, d) = data.shape();
        let m0 = data.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - m0[j]);
        let mut w0_inv = centered.transpose() * &centered / (n as f64 - 1.0);
        w0_inv = (&w0_inv + w0_inv.transpose()) * 0.5;
        regularize(&mut w0_inv);
        let prior = Prior {
            alpha0: config.alpha0,
            beta0: config.kappa0,
            m0,
            w0_inv,
            nu0: config.nu0.unwrap_or(d as f64 + 2.0),
        };

        let k = config.truncation;
        let seeds = kmeans_pp_seeds(data, k, config.seed);
        let mut resp = DMatrix::zeros(n, k);
        for i in 0..n {
            let row = data.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &s) in seeds.iter().enumerate() {
                let dist = (row - data.row(s)).norm_squared();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            resp[(i, best)] = 1.0;
        }
        let mut state = Self { prior, components: Vec::new(), resp };
        state.update_parameters(data)?;
        Ok(state)
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn components(&self) -> &[ComponentPosterior] {
        &self.components
    }

    pub fn responsibilities(&self) -> &DMatrix<f64> {
        &self.resp
    }

    /// Copy of the state with component `k` emptied and its points
    /// reassigned among the rest.
    fn without_component(&self, data: &DMatrix<f64>, k: usize) -> Result<Self> {
        let keep: Vec<usize> = (0..self.components.len()).filter(|&c| c != k).collect();
        let partial = self.expected_assignments(data, Some(&keep));
        let mut resp = DMatrix::zeros(data.nrows(), self.components.len());
        for (j, &c) in keep.iter().enumerate() {
            resp.set_column(c, &partial.column(j));
        }
        let mut next = Self { prior: self.prior.clone(), components: Vec::new(), resp };
        next.update_parameters(data)?;
        Ok(next)
    }

    /// One coordinate-ascent sweep: `q(Z)` then `q(theta)`.
    pub fn sweep(&mut self, data: &DMatrix<f64>) -> Result<()> {
        self.resp = self.expected_assignments(data, None);
        self.update_parameters(data)
    }

    /// Normalized responsibilities under the current `q(theta)`, optionally
    /// restricted to a subset of components.
    fn expected_assignments(&self, data: &DMatrix<f64>, keep: Option<&[usize]>) -> DMatrix<f64> {
        let all: Vec<usize> = (0..self.components.len()).collect();
        let keep = keep.unwrap_or(&all);
        let d = data.ncols() as f64;
        let dd = data.ncols();
        let rows = crate::par::map_range(data.nrows(), |i| {
            let mut v = vec![0.0; dd];
            let mut logs = Vec::with_capacity(keep.len());
            for &k in keep {
                let c = &self.components[k];
                for (j, vj) in v.iter_mut().enumerate() {
                    *vj = data[(i, j)] - c.mean[j];
                }
                let quad = d / c.beta + c.nu * c.quad_w_in_place(&mut v);
                logs.push(c.e_ln_pi + 0.5 * c.e_ln_det - 0.5 * d * (2.0 * PI).ln() - 0.5 * quad);
            }
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for l in logs.iter_mut() {
                *l = (*l - max).exp();
            }
            let total: f64 = logs.iter().sum();
            for l in logs.iter_mut() {
                *l /= total;
            }
            logs
        });
        DMatrix::from_fn(data.nrows(), keep.len(), |i, k| rows[i][k])
    }

    fn update_parameters(&mut self, data: &DMatrix<f64>) -> Result<()> {
        let (n, dd) = data.shape();
        let d = dd as f64;
        let p = &self.prior;
        let k = self.resp.ncols();
        let mut comps = Vec::with_capacity(k);
        for c in 0..k {
            let count: f64 = (0..n).map(|i| self.resp[(i, c)]).sum();
            let mut data_mean = DVector::zeros(dd);
            let mut scatter = DMatrix::zeros(dd, dd);
            if count > 1e-300 {
                for i in 0..n {
                    let r = self.resp[(i, c)];
                    if r > 0.0 {
                        for j in 0..dd {
                            data_mean[j] += r * data[(i, j)];
                        }
                    }
                }
                data_mean /= count;
                let mut v = vec![0.0; dd];
                for i in 0..n {
                    let r = self.resp[(i, c)];
                    if r > 0.0 {
                        for (j, vj) in v.iter_mut().enumerate() {
                            *vj = data[(i, j)] - data_mean[j];
                        }
                        for a in 0..dd {
                            for b in 0..dd {
                                scatter[(a, b)] += r * v[a] * v[b];
                            }
                        }
                    }
                }
                scatter /= count;
            } else {
                data_mean.copy_from(&p.m0);
            }
            let alpha = p.alpha0 + count;
            let beta = p.beta0 + count;
            let mean = (p.beta0 * &p.m0 + count * &data_mean) / beta;
            let dm = &data_mean - &p.m0;
            let mut w_inv = &p.w0_inv + count * &scatter + (p.beta0 * count / (p.beta0 + count)) * &dm * dm.transpose();
            w_inv = (&w_inv + w_inv.transpose()) * 0.5;
            let nu = p.nu0 + count;
            let chol = match w_inv.clone().cholesky() {
                Some(c) => c,
                None => {
                    regularize(&mut w_inv);
                    w_inv
                        .clone()
                        .cholesky()
                        .ok_or_else(|| Error::NonPositiveDefinite(format!("posterior scale of component {c}")))?
                }
            };
            let ln_det_w = -ln_det_chol(&chol);
            let e_ln_det = (1..=dd).map(|i| digamma(0.5 * (nu + 1.0 - i as f64))).sum::<f64>() + d * 2f64.ln() + ln_det_w;
            comps.push(ComponentPosterior {
                alpha,
                beta,
                mean,
                w_inv,
                nu,
                count,
                data_mean,
                scatter,
                w_inv_l: chol.l(),
                w_inv_chol: chol,
                e_ln_det,
                e_ln_pi: 0.0,
            });
        }
        let total_alpha: f64 = comps.iter().map(|c| c.alpha).sum();
        let psi_total = digamma(total_alpha);
        for c in &mut comps {
            c.e_ln_pi = digamma(c.alpha) - psi_total;
        }
        self.components = comps;
        Ok(())
    }

    /// Evidence lower bound on `ln p(data)` for the current `q(Z) q(theta)`.
    pub fn elbo(&self, data: &DMatrix<f64>) -> f64 {
        let d = data.ncols() as f64;
        let dd = data.ncols();
        let p = &self.prior;
        let k = self.components.len() as f64;
        let ln2pi = (2.0 * PI).ln();
        let ln_det_w0 = -ln_det_chol(&p.w0_inv.clone().cholesky().expect("regularized prior"));

        let mut e_ln_px = 0.0;
        let mut e_ln_pz = 0.0;
        let mut e_ln_ppi = ln_gamma(k * p.alpha0) - k * ln_gamma(p.alpha0);
        let mut e_ln_pmu = k * ln_wishart_b(ln_det_w0, p.nu0, dd);
        let mut e_ln_qpi = 0.0;
        let mut e_ln_qmu = 0.0;
        let total_alpha: f64 = self.components.iter().map(|c| c.alpha).sum();
        e_ln_qpi += ln_gamma(total_alpha);

        for c in &self.components {
            let xm = &c.data_mean - &c.mean;
            if c.count > 0.0 {
                e_ln_px += 0.5
                    * c.count
                    * (c.e_ln_det - d / c.beta - c.nu * c.trace_w(&c.scatter) - c.nu * c.quad_w(&xm) - d * ln2pi);
            }
            e_ln_pz += c.count * c.e_ln_pi;
            e_ln_ppi += (p.alpha0 - 1.0) * c.e_ln_pi;
            let mm = &c.mean - &p.m0;
            e_ln_pmu += 0.5
                * (d * (p.beta0 / (2.0 * PI)).ln() + c.e_ln_det - d * p.beta0 / c.beta - p.beta0 * c.nu * c.quad_w(&mm))
                + 0.5 * (p.nu0 - d - 1.0) * c.e_ln_det
                - 0.5 * c.nu * c.trace_w(&p.w0_inv);
            e_ln_qpi += (c.alpha - 1.0) * c.e_ln_pi - ln_gamma(c.alpha);
            let entropy = -ln_wishart_b(c.ln_det_w(), c.nu, dd) - 0.5 * (c.nu - d - 1.0) * c.e_ln_det + 0.5 * c.nu * d;
            e_ln_qmu += 0.5 * c.e_ln_det + 0.5 * d * (c.beta / (2.0 * PI)).ln() - 0.5 * d - entropy;
        }
        let e_ln_qz: f64 = self.resp.iter().filter(|r| **r > 0.0).map(|r| r * r.ln()).sum();
        e_ln_px + e_ln_pz + e_ln_ppi + e_ln_pmu - e_ln_qz - e_ln_qpi - e_ln_qmu
    }
}

fn kmeans_pp_seeds(data: &DMatrix<f64>, k: usize, seed: u64) -> Vec<usize> {
    let n = data.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| (data.row(i) - data.row(seeds[0])).norm_squared()).collect();
    while seeds.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        seeds.push(next);
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min((data.row(i) - data.row(next)).norm_squared());
        }
    }
    seeds
}

fn converge(
    state: &mut VariationalState,
    data: &DMatrix<f64>,
    config: &VbConfig,
    trace: &mut Vec<f64>,
) -> Result<(usize, bool)> {
    let mut sweeps = 0;
    while sweeps < config.max_sweeps {
        state.sweep(data)?;
        sweeps += 1;
        let elbo = state.elbo(data);
        let prev = *trace.last().expect("non-empty");
        trace.push(elbo);
        if (elbo - prev).abs() <= config.tolerance * elbo.abs().max(1.0) {
            return Ok((sweeps, true));
        }
    }
    Ok((sweeps, false))
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct VbFit {
    pub mixture: GaussianMixture,
    pub responsibilities: Responsibilities,
    pub report: FitReport,
    /// Indices of the truncated components retained after pruning.
    pub retained: Vec<usize>,
}

/// Fits a truncated VB-GMM to the rows of `data` (N x D).
pub fn fit(data: &DMatrix<f64>, config: &VbConfig) -> Result<VbFit> {
    validate_data(data)?;
    let (n, d) = data.shape();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        (0..d)
            .map(|j| data[(a, j)].total_cmp(&data[(b, j)]))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted = DMatrix::from_fn(n, d, |i, j| data[(order[i], j)]);

    let mut state = VariationalState::initialize(&sorted, config)?;
    let mut trace = vec![state.elbo(&sorted)];
    let (mut sweeps, mut converged) = converge(&mut state, &sorted, config, &mut trace)?;

    // Coordinate ascent stalls in local optima that keep redundant
    // components alive. Try emptying each occupied component, re-converge,
    // and keep the result when the bound improves.
    if config.deletion_moves {
        let mut current = *trace.last().expect("non-empty");
        'outer: loop {
            let mut occupied: Vec<usize> = (0..state.components.len()).filter(|&k| state.components[k].count > 0.5).collect();
            if occupied.len() < 2 {
                break;
            }
            occupied.sort_by(|&a, &b| state.components[a].count.total_cmp(&state.components[b].count));
            for k in occupied {
                let mut candidate = state.without_component(&sorted, k)?;
                let mut cand_trace = vec![candidate.elbo(&sorted)];
                let (s, c) = converge(&mut candidate, &sorted, config, &mut cand_trace)?;
                let elbo = *cand_trace.last().expect("non-empty");
                if elbo > current + config.tolerance * current.abs().max(1.0) {
                    state = candidate;
                    sweeps += s;
                    converged = c;
                    current = elbo;
                    trace.push(elbo);
                    continue 'outer;
                }
            }
            break;
        }
    }

    let total_alpha: f64 = state.components.iter().map(|c| c.alpha).sum();
    let threshold = 1.0 / (10.0 * n as f64);
    let mut retained: Vec<usize> = (0..state.components.len())
        .filter(|&k| state.components[k].expected_weight(total_alpha) >= threshold)
        .collect();
    if retained.is_empty() {
        let best = (0..state.components.len())
            .max_by(|&a, &b| state.components[a].alpha.total_cmp(&state.components[b].alpha))
            .expect("at least one component");
        retained.push(best);
    }
    let kept_alpha: f64 = retained.iter().map(|&k| state.components[k].alpha).sum();
    let weights: Vec<f64> = retained.iter().map(|&k| state.components[k].alpha / kept_alpha).collect();
    let means = retained.iter().map(|&k| state.components[k].mean.clone()).collect();
    let covs = retained.iter().map(|&k| state.components[k].expected_covariance()).collect();
    let mixture = GaussianMixture::new(weights, means, covs)?;

    let sorted_probs = state.expected_assignments(&sorted, Some(&retained));
    let mut probs = DMatrix::zeros(n, retained.len());
    for (i, &orig) in order.iter().enumerate() {
        probs.row_mut(orig).copy_from(&sorted_probs.row(i));
    }
    let report = FitReport {
        elbo: *trace.last().expect("non-empty"),
        sweeps,
        elbo_trace: trace,
        effective_components: retained.len(),
        converged,
    };
    Ok(VbFit { mixture, responsibilities: Responsibilities::from_probs(probs), report, retained })
}

/// Posterior component probabilities of one point under a fitted mixture.
pub fn predict_responsibility(x: &DVector<f64>, mixture: &GaussianMixture) -> Result<Vec<f64>> {
    let logs = mixture.weighted_log_densities(x)?;
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Serialized fitted model with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub mixture: GaussianMixture,
    pub config: VbConfig,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn normal_column(n: usize, mu: f64, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(mu, sigma).unwrap();
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    }

    fn two_cluster(seed: u64) -> DMatrix<f64> {
        let mut v = normal_column(100, -10.0, 1.0, seed);
        v.extend(normal_column(100, 10.0, 1.0, seed + 1000));
        DMatrix::from_column_slice(200, 1, &v)
    }

    #[test]
    fn single_normal_gives_one_component() {
        let v = normal_column(200, 0.0, 1.0, 7);
        let data = DMatrix::from_column_slice(200, 1, &v);
        let fit = fit(&data, &VbConfig { truncation: 5, ..Default::default() }).unwrap();
        let mean = v.iter().sum::<f64>() / 200.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 199.0;
        assert_eq!(fit.report.effective_components, 1);
        assert!((fit.mixture.means()[0][0] - 0.0).abs() < 0.25);
        assert!((fit.mixture.covariances()[0][(0, 0)] - 1.0).abs() < 0.3);
        assert!((fit.mixture.means()[0][0] - mean).abs() < 0.05);
        assert!((fit.mixture.covariances()[0][(0, 0)] - var).abs() < 0.05);
    }

    #[test]
    fn two_clusters_split_by_sign() {
        let data = two_cluster(3);
        let fit = fit(&data, &VbConfig { truncation: 8, ..Default::default() }).unwrap();
        assert_eq!(fit.report.effective_components, 2);
        let mut means: Vec<f64> = fit.mixture.means().iter().map(|m| m[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 10.0).abs() < 0.5 && (means[1] - 10.0).abs() < 0.5);
        let neg = fit.responsibilities.hard[0];
        for i in 0..200 {
            assert_eq!(fit.responsibilities.hard[i] == neg, data[(i, 0)] < 0.0);
        }
    }

    #[test]
    fn too_few_points() {
        let data = DMatrix::from_element(1, 1, 0.0);
        assert!(matches!(fit(&data, &VbConfig::default()), Err(Error::TooFewPoints(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let data = DMatrix::from_column_slice(3, 1, &[0.0, f64::NAN, 1.0]);
        assert!(matches!(fit(&data, &VbConfig::default()), Err(Error::NonFiniteData(_))));
    }

    #[test]
    fn elbo_monotone_and_stationary() {
        let data = two_cluster(11);
        let cfg = VbConfig { truncation: 6, ..Default::default() };
        let fit = fit(&data, &cfg).unwrap();
        assert!(fit.report.elbo_trace.windows(2).all(|w| w[1] >= w[0] - 1e-7));
        assert!(fit.report.converged);

        let mut state = VariationalState::initialize(&data, &cfg).unwrap();
        let mut prev = state.elbo(&data);
        for _ in 0..400 {
            state.sweep(&data).unwrap();
            let e = state.elbo(&data);
            assert!(e >= prev - 1e-7, "{e} < {prev}");
            if (e - prev).abs() <= 1e-10 * e.abs() {
                break;
            }
            prev = e;
        }
        let before = state.elbo(&data);
        state.sweep(&data).unwrap();
        let after = state.elbo(&data);
        assert!((after - before).abs() <= 1e-8 * before.abs());
    }

    #[test]
    fn duplicated_dataset_still_monotone() {
        let base = two_cluster(5);
        let mut v: Vec<f64> = base.iter().copied().collect();
        v.extend(base.iter().copied());
        let data = DMatrix::from_column_slice(400, 1, &v);
        let fit = fit(&data, &VbConfig { truncation: 8, ..Default::default() }).unwrap();
        assert!(fit.report.elbo_trace.windows(2).all(|w| w[1] >= w[0] - 1e-7));
    }

    #[test]
    fn fit_is_deterministic_and_order_invariant() {
        let data = two_cluster(9);
        let cfg = VbConfig { truncation: 5, seed: 42, ..Default::default() };
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a.mixture, b.mixture);
        let rev = DMatrix::from_fn(200, 1, |i, j| data[(199 - i, j)]);
        let c = fit(&rev, &cfg).unwrap();
        assert_eq!(a.mixture, c.mixture);
        for i in 0..200 {
            assert_eq!(a.responsibilities.hard[i], c.responsibilities.hard[199 - i]);
        }
    }

    #[test]
    fn responsibility_rows_sum_to_one() {
        let data = two_cluster(13);
        let fit = fit(&data, &VbConfig::default()).unwrap();
        for i in 0..data.nrows() {
            let s: f64 = fit.responsibilities.probs.row(i).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_examples() {
        let one = GaussianMixture::new(vec![1.0], vec![DVector::from_element(1, 3.0)], vec![DMatrix::identity(1, 1)]).unwrap();
        assert_eq!(predict_responsibility(&DVector::from_element(1, -4.0), &one).unwrap(), vec![1.0]);
        let two = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![DVector::from_element(1, -10.0), DVector::from_element(1, 10.0)],
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        )
        .unwrap();
        let mid = predict_responsibility(&DVector::from_element(1, 0.0), &two).unwrap();
        assert!((mid[0] - 0.5).abs() < 1e-12 && (mid[1] - 0.5).abs() < 1e-12);
        let left = predict_responsibility(&DVector::from_element(1, -10.0), &two).unwrap();
        assert!(left[0] > 0.999);
        assert!(predict_responsibility(&DVector::zeros(2), &two).is_err());
    }

    #[test]
    fn mixture_validation() {
        let m = vec![DVector::zeros(1)];
        assert!(GaussianMixture::new(vec![0.5], m.clone(), vec![DMatrix::identity(1, 1)]).is_err());
        assert!(GaussianMixture::new(vec![1.0], m, vec![DMatrix::from_element(1, 1, -1.0)]).is_err());
    }
}
