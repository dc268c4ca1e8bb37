//! Outer estimation loop: solve, cluster residuals, re-model noise, solve.
//!
//! `Bce` clusters the measurement residuals alone. `BceAd` appends each
//! observation's metadata, keeps the columns chosen by feature selection,
//! and clusters those; the resulting hard groups are mapped back to the raw
//! residuals, whose per-group sample statistics become the new noise models
//! of the member factors. `L2`, `Dcs` and `Mm` are single-strategy baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{select_features, FeatureScore, FsConfig};
use crate::model::{FactorGraph, GraphSetup, NoiseModel, Observation, ObservationKind, StateTrajectory, StateVector};
use crate::robust::{solve_dcs, solve_max_mixture, DcsConfig, StaticMixture};
use crate::solver::{solve, SolveReport, SolverConfig};
use crate::vbgmm::{fit, VbConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "dcs")]
    Dcs,
    #[serde(rename = "mm")]
    Mm,
    #[serde(rename = "bce")]
    Bce,
    #[serde(rename = "bce-ad", alias = "bce_ad")]
    BceAd,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::L2, Mode::Dcs, Mode::Mm, Mode::Bce, Mode::BceAd];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::L2 => "l2",
            Mode::Dcs => "dcs",
            Mode::Mm => "mm",
            Mode::Bce => "bce",
            Mode::BceAd => "bce-ad",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Mode::ALL.into_iter().find(|m| m.as_str() == norm).ok_or_else(|| {
            let valid: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
            Error::InvalidConfig(format!("unknown mode '{s}'; valid modes: {}", valid.join(", ")))
        })
    }
}

/// How range and phase-like residuals become dataset rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualRows {
    /// One row per (epoch, beacon) holding both residuals.
    #[default]
    Paired,
    /// Each kind is clustered on its own.
    Independent,
}

/// Priors and nominal noise of the estimation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub prior_position: Vec<f64>,
    pub prior_bias: f64,
    pub prior_sigma_position: f64,
    pub prior_sigma_bias: f64,
    pub motion_sigma_position: f64,
    pub motion_sigma_bias: f64,
    pub range_sigma: f64,
    pub phase_sigma: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            prior_position: vec![0.0, 0.0],
            prior_bias: 0.0,
            prior_sigma_position: 100.0,
            prior_sigma_bias: 100.0,
            motion_sigma_position: 2.0,
            motion_sigma_bias: 0.5,
            range_sigma: 1.0,
            phase_sigma: 0.01,
        }
    }
}

impl ProblemConfig {
    pub fn setup(&self) -> Result<GraphSetup> {
        let dim = self.prior_position.len();
        let sig = |p: f64, b: f64| {
            let mut v = vec![p; dim];
            v.push(b);
            NoiseModel::diagonal_sigmas(&v)
        };
        Ok(GraphSetup {
            epochs: None,
            prior: StateVector::new(self.prior_position.clone(), self.prior_bias),
            prior_noise: sig(self.prior_sigma_position, self.prior_sigma_bias)?,
            motion_noise: sig(self.motion_sigma_position, self.motion_sigma_bias)?,
            range_noise: NoiseModel::isotropic(1, self.range_sigma)?,
            phase_noise: NoiseModel::isotropic(1, self.phase_sigma)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub vb: VbConfig,
    pub features: FsConfig,
    pub max_outer: usize,
    /// Relative change of the solved cost that ends the outer loop.
    pub outer_tolerance: f64,
    pub solver: SolverConfig,
    pub dcs: DcsConfig,
    /// Fixed mixture for `Mm`.
    pub mixture: Option<StaticMixture>,
    pub residual_rows: ResidualRows,
    pub problem: ProblemConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::BceAd,
            vb: VbConfig::default(),
            features: FsConfig::default(),
            max_outer: 10,
            outer_tolerance: 1e-4,
            solver: SolverConfig::default(),
            dcs: DcsConfig::default(),
            mixture: None,
            residual_rows: ResidualRows::default(),
            problem: ProblemConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 || !(self.outer_tolerance >= 0.0) {
            return Err(Error::InvalidConfig("max_outer must be >= 1 and outer_tolerance >= 0".into()));
        }
        self.solver.validate()?;
        self.dcs.validate()?;
        self.features.validate()?;
        if self.mode == Mode::Mm && self.mixture.is_none() {
            return Err(Error::ModeConfigMismatch { mode: "mm".into(), reason: "no static mixture configured".into() });
        }
        Ok(())
    }
}

/// Per-column z-score record; constant columns map to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub constant: Vec<bool>,
}

impl Standardization {
    /// Column means and population standard deviations.
    pub fn fit(data: &DMatrix<f64>) -> Self {
        let n = data.nrows().max(1) as f64;
        let (mut mean, mut scale, mut constant) = (Vec::new(), Vec::new(), Vec::new());
        for c in data.column_iter() {
            let m = c.sum() / n;
            let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            let flat = !(s > 1e-12 * m.abs().max(1.0));
            mean.push(m);
            scale.push(if flat { 1.0 } else { s });
            constant.push(flat);
        }
        Self { mean, scale, constant }
    }

    pub fn apply(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| {
            if self.constant[j] {
                0.0
            } else {
                (data[(i, j)] - self.mean[j]) / self.scale[j]
            }
        })
    }
}

/// Residual rows, optionally augmented with metadata columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    names: Vec<String>,
    residual_columns: usize,
    raw: DMatrix<f64>,
    /// Factor behind each residual column of each row.
    factors: Vec<Vec<usize>>,
    standardization: Option<Standardization>,
}

pub const RANGE_COLUMN: &str = "rho";
pub const PHASE_COLUMN: &str = "phi";

impl AugmentedDataset {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn residual_columns(&self) -> usize {
        self.residual_columns
    }

    pub fn len(&self) -> usize {
        self.raw.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.nrows() == 0
    }

    pub fn raw(&self) -> &DMatrix<f64> {
        &self.raw
    }

    /// Raw residual block (N x residual columns).
    pub fn residuals(&self) -> DMatrix<f64> {
        self.raw.columns(0, self.residual_columns).into_owned()
    }

    pub fn row_factors(&self) -> &[Vec<usize>] {
        &self.factors
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// Z-scored values; the raw values when no transform has been fitted.
    pub fn standardized(&self) -> DMatrix<f64> {
        match &self.standardization {
            None => self.raw.clone(),
            Some(s) => s.apply(&self.raw),
        }
    }

    /// Fits the z-score transform on the current columns.
    pub fn standardize(&mut self) {
        self.standardization = Some(Standardization::fit(&self.raw));
    }
}

fn residual_value(graph: &FactorGraph, x: &StateTrajectory, f: usize) -> Result<f64> {
    Ok(graph.factor(f).residual(x)?[0])
}

fn beacon_key(b: &[f64]) -> Vec<u64> {
    b.iter().map(|v| v.to_bits()).collect()
}

/// Raw residuals of every measurement factor as dataset rows.
///
/// Paired layout with both kinds present yields one two-column dataset,
/// matching each range to the phase-like factor with the same epoch and
/// beacon; otherwise one single-column dataset per kind present.
pub fn collect_residuals(graph: &FactorGraph, x: &StateTrajectory, rows: ResidualRows) -> Result<Vec<AugmentedDataset>> {
    graph.check_trajectory(x)?;
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData("trajectory".into()));
    }
    let measurements = graph.measurement_indices();
    let ranges: Vec<usize> = measurements.iter().copied().filter(|&f| graph.factor(f).kind() == ObservationKind::Range).collect();
    let phases: Vec<usize> =
        measurements.iter().copied().filter(|&f| graph.factor(f).kind() == ObservationKind::PhaseLike).collect();

    let single = |list: &[usize], name: &str| -> Result<AugmentedDataset> {
        let values = list.iter().map(|&f| residual_value(graph, x, f)).collect::<Result<Vec<_>>>()?;
        Ok(AugmentedDataset {
            names: vec![name.to_string()],
            residual_columns: 1,
            raw: DMatrix::from_column_slice(list.len(), 1, &values),
            factors: list.iter().map(|&f| vec![f]).collect(),
            standardization: None,
        })
    };

    if rows == ResidualRows::Paired && !ranges.is_empty() && !phases.is_empty() {
        let mut by_key: BTreeMap<(usize, Vec<u64>), usize> = BTreeMap::new();
        for &f in &phases {
            let fac = graph.factor(f);
            let key = (fac.epochs[0], beacon_key(fac.beacon().unwrap_or_default()));
            if by_key.insert(key, f).is_some() {
                return Err(Error::PairingError(format!("duplicate phase-like factor at epoch {}", fac.epochs[0])));
            }
        }
        let mut pairs = Vec::with_capacity(ranges.len());
        for &f in &ranges {
            let fac = graph.factor(f);
            let key = (fac.epochs[0], beacon_key(fac.beacon().unwrap_or_default()));
            let p = by_key.remove(&key).ok_or_else(|| {
                Error::PairingError(format!("range factor {f} at epoch {} has no phase-like partner", fac.epochs[0]))
            })?;
            pairs.push(vec![f, p]);
        }
        if let Some(((epoch, _), _)) = by_key.into_iter().next() {
            return Err(Error::PairingError(format!("phase-like factor at epoch {epoch} has no range partner")));
        }
        let values = pairs
            .iter()
            .map(|p| Ok([residual_value(graph, x, p[0])?, residual_value(graph, x, p[1])?]))
            .collect::<Result<Vec<_>>>()?;
        return Ok(vec![AugmentedDataset {
            names: vec![RANGE_COLUMN.into(), PHASE_COLUMN.into()],
            residual_columns: 2,
            raw: DMatrix::from_fn(pairs.len(), 2, |i, j| values[i][j]),
            factors: pairs,
            standardization: None,
        }]);
    }
    let mut out = Vec::new();
    if !ranges.is_empty() {
        out.push(single(&ranges, RANGE_COLUMN)?);
    }
    if !phases.is_empty() {
        out.push(single(&phases, PHASE_COLUMN)?);
    }
    Ok(out)
}

/// Appends each row's observation metadata and fits the z-score transform.
pub fn augment(residuals: &AugmentedDataset, graph: &FactorGraph, observations: &[Observation]) -> Result<AugmentedDataset> {
    let mut out = residuals.clone();
    out.raw = out.residuals();
    out.names.truncate(out.residual_columns);
    let metas = residuals
        .factors
        .iter()
        .map(|fs| {
            let idx = graph.factor(fs[0]).observation.ok_or_else(|| {
                Error::InvalidObservation(format!("factor {} has no source observation", fs[0]))
            })?;
            observations
                .get(idx)
                .map(|o| &o.metadata)
                .ok_or_else(|| Error::InvalidObservation(format!("observation {idx} missing")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = metas.first() {
        let names = first.names().to_vec();
        for (i, m) in metas.iter().enumerate() {
            if m.names() != names.as_slice() {
                return Err(Error::FeatureNameMismatch(format!("row {i} has features {:?}, expected {names:?}", m.names())));
            }
        }
        let base = out.raw.ncols();
        let mut raw = DMatrix::zeros(out.raw.nrows(), base + names.len());
        raw.columns_mut(0, base).copy_from(&out.raw);
        for (i, m) in metas.iter().enumerate() {
            for (j, v) in m.values().iter().enumerate() {
                raw[(i, base + j)] = *v;
            }
        }
        out.raw = raw;
        out.names.extend(names);
    }
    out.standardize();
    Ok(out)
}

/// One hard-assignment group in the residual domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionGroup {
    pub component: usize,
    pub noise: NoiseModel,
    pub members: Vec<usize>,
}

fn regularized_covariance(mut c: DMatrix<f64>) -> DMatrix<f64> {
    let d = c.nrows();
    c = (&c + c.transpose()) * 0.5;
    let tr = c.trace();
    let eps = if tr > 0.0 { 1e-9 * tr / d as f64 } else { 1e-9 };
    let min = c.clone().symmetric_eigenvalues().min();
    if min <= eps {
        for i in 0..d {
            c[(i, i)] += eps;
        }
    }
    c
}

fn group_stats(residuals: &DMatrix<f64>, members: &[usize]) -> Result<NoiseModel> {
    let d = residuals.ncols();
    let n = members.len() as f64;
    let mut mean = DVector::zeros(d);
    for &i in members {
        mean += residuals.row(i).transpose();
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for &i in members {
        let v = residuals.row(i).transpose() - &mean;
        cov += &v * v.transpose();
    }
    cov /= n - 1.0;
    NoiseModel::new(mean, regularized_covariance(cov))
}

/// Groups rows by hard assignment and fits each group's residual mean and
/// unbiased covariance. Groups with fewer than `dim + 1` rows join the
/// surviving group whose model puts their mean at the smallest Mahalanobis
/// distance; survivors are then refitted.
pub fn partition_residual_domain(assignments: &[usize], residuals: &DMatrix<f64>) -> Result<Vec<PartitionGroup>> {
    if assignments.len() != residuals.nrows() {
        return Err(Error::LengthMismatch(assignments.len(), residuals.nrows()));
    }
    if residuals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData("residuals".into()));
    }
    let d = residuals.ncols();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assignments.iter().enumerate() {
        groups.entry(a).or_default().push(i);
    }
    let (big, small): (Vec<_>, Vec<_>) = groups.into_iter().partition(|(_, m)| m.len() > d);
    if big.is_empty() {
        return Err(Error::EmptyPartition);
    }
    let mut survivors = big
        .into_iter()
        .map(|(component, members)| Ok(PartitionGroup { component, noise: group_stats(residuals, &members)?, members }))
        .collect::<Result<Vec<_>>>()?;
    if small.is_empty() {
        return Ok(survivors);
    }
    let mut grown = vec![false; survivors.len()];
    for (_, members) in small {
        let mut mean = DVector::zeros(d);
        for &i in &members {
            mean += residuals.row(i).transpose();
        }
        mean /= members.len() as f64;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (g, s) in survivors.iter().enumerate() {
            let m = s.noise.mahalanobis_sq(&mean)?;
            if m < best_d {
                best_d = m;
                best = g;
            }
        }
        survivors[best].members.extend(members);
        grown[best] = true;
    }
    for (g, s) in survivors.iter_mut().enumerate() {
        if grown[g] {
            s.members.sort_unstable();
            s.noise = group_stats(residuals, &s.members)?;
        }
    }
    Ok(survivors)
}

/// Installs each group's model on the factors of its member rows; paired
/// rows give each factor the marginal of its own column. Returns the number
/// of factors whose model changed.
pub fn update_uncertainty(graph: &mut FactorGraph, dataset: &AugmentedDataset, partition: &[PartitionGroup]) -> Result<usize> {
    let mut covered = vec![false; dataset.len()];
    let mut plan: Vec<(usize, NoiseModel)> = Vec::new();
    for g in partition {
        let marginals = if dataset.residual_columns == 1 {
            vec![g.noise.clone()]
        } else {
            (0..dataset.residual_columns).map(|c| g.noise.marginal(c)).collect::<Result<Vec<_>>>()?
        };
        for &row in &g.members {
            let Some(factors) = dataset.factors.get(row) else {
                return Err(Error::CoverageGap(format!("partition refers to row {row} of {}", dataset.len())));
            };
            covered[row] = true;
            for (c, &f) in factors.iter().enumerate() {
                plan.push((f, marginals[c].clone()));
            }
        }
    }
    if let Some(row) = covered.iter().position(|c| !c) {
        return Err(Error::CoverageGap(format!("row {row} belongs to no group")));
    }
    let mut changed = 0;
    for (f, noise) in plan {
        if graph.factor(f).noise != noise {
            graph.set_noise(f, noise)?;
            changed += 1;
        }
    }
    Ok(changed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub component: usize,
    pub size: usize,
    pub noise: NoiseModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub features: Vec<FeatureScore>,
    pub effective_components: usize,
    /// Group per measurement factor, in graph order.
    pub assignments: Vec<usize>,
    pub groups: Vec<GroupSummary>,
    pub modified: usize,
    pub cost: f64,
    pub trajectory: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub trajectory: StateTrajectory,
    pub trace: Vec<IterationTrace>,
    pub solve: SolveReport,
    /// The graph with its final noise models.
    pub graph: FactorGraph,
}

fn baseline_trace(x: &StateTrajectory, cost: f64, assignments: Vec<usize>) -> IterationTrace {
    IterationTrace {
        iteration: 0,
        features: Vec::new(),
        effective_components: 0,
        assignments,
        groups: Vec::new(),
        modified: 0,
        cost,
        trajectory: x.as_slice().to_vec(),
    }
}

/// Builds the graph and runs the configured mode.
pub fn run(observations: &[Observation], config: &PipelineConfig) -> Result<PipelineResult> {
    config.validate()?;
    let graph = FactorGraph::build(observations, &config.problem.setup()?)?;
    run_on_graph(graph, observations, config)
}

pub fn run_on_graph(mut graph: FactorGraph, observations: &[Observation], config: &PipelineConfig) -> Result<PipelineResult> {
    config.validate()?;
    let x0 = graph.initial_trajectory();
    match config.mode {
        Mode::L2 => {
            let (x, solve) = solve(&graph, &x0, &config.solver)?;
            let trace = vec![baseline_trace(&x, solve.final_cost, Vec::new())];
            Ok(PipelineResult { trajectory: x, trace, solve, graph })
        }
        Mode::Dcs => {
            let (x, report) = solve_dcs(&graph, &x0, &config.dcs, &config.solver)?;
            let trace = vec![baseline_trace(&x, report.solve.final_cost, Vec::new())];
            Ok(PipelineResult { trajectory: x, trace, solve: report.solve, graph })
        }
        Mode::Mm => {
            let mix = config.mixture.as_ref().expect("validated");
            let (x, report, g) = solve_max_mixture(&graph, &x0, mix, &config.solver, 20)?;
            let trace = vec![baseline_trace(&x, report.solve.final_cost, report.assignments.clone())];
            Ok(PipelineResult { trajectory: x, trace, solve: report.solve, graph: g })
        }
        Mode::Bce | Mode::BceAd => {
            let (mut x, mut report) = solve(&graph, &x0, &config.solver)?;
            let mut trace = Vec::new();
            let mut prev = report.final_cost;
            let measurements = graph.measurement_indices();
            let position: BTreeMap<usize, usize> = measurements.iter().enumerate().map(|(i, &f)| (f, i)).collect();
            for iteration in 1..=config.max_outer {
                let datasets = collect_residuals(&graph, &x, config.residual_rows)?;
                let mut features = Vec::new();
                let mut assignments = vec![0; measurements.len()];
                let mut groups = Vec::new();
                let mut effective = 0;
                let mut modified = 0;
                for ds in datasets {
                    let ds = if config.mode == Mode::BceAd {
                        augment(&ds, &graph, observations)?
                    } else {
                        let mut ds = ds;
                        ds.standardize();
                        ds
                    };
                    let z = ds.standardized();
                    let cols: Vec<usize> = if ds.names.len() > ds.residual_columns {
                        let scores =
                            select_features(&z, &ds.names, ds.residual_columns, &config.features, config.vb.truncation)?;
                        let cols = (0..scores.len()).filter(|&j| scores[j].selected).collect();
                        features.extend(scores);
                        cols
                    } else {
                        features.extend(ds.names.iter().map(|n| FeatureScore { name: n.clone(), score: 0.0, selected: true }));
                        (0..ds.residual_columns).collect()
                    };
                    let data = z.select_columns(&cols);
                    let fitted = fit(&data, &config.vb)?;
                    let partition = partition_residual_domain(&fitted.responsibilities.hard, &ds.residuals())?;
                    modified += update_uncertainty(&mut graph, &ds, &partition)?;
                    let offset = effective;
                    for g in &partition {
                        for &row in &g.members {
                            for f in &ds.factors[row] {
                                assignments[position[f]] = offset + g.component;
                            }
                        }
                        groups.push(GroupSummary { component: offset + g.component, size: g.members.len(), noise: g.noise.clone() });
                    }
                    effective += fitted.report.effective_components;
                }
                let (nx, rep) = solve(&graph, &x, &config.solver)?;
                x = nx;
                report = rep;
                let cost = report.final_cost;
                trace.push(IterationTrace {
                    iteration,
                    features,
                    effective_components: effective,
                    assignments,
                    groups,
                    modified,
                    cost,
                    trajectory: x.as_slice().to_vec(),
                });
                let change = if prev > 0.0 { (prev - cost).abs() / prev } else { 0.0 };
                prev = cost;
                if change < config.outer_tolerance {
                    break;
                }
            }
            Ok(PipelineResult { trajectory: x, trace, solve: report, graph })
        }
    }
}
