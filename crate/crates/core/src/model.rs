//! Estimation problem definition: platform states, observations, noise
//! models, factors and the factor graph that ties them together.
//!
//! Every epoch carries a position (2D or 3D) followed by a clock-like bias,
//! so one state block has `dim + 1` entries. Measurement residuals follow
//! `r = y - h(x)` and all Jacobians are taken of `r`, not of `h`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub position: Vec<f64>,
    pub bias: f64,
}

impl StateVector {
    pub fn new(position: Vec<f64>, bias: f64) -> Self {
        Self { position, bias }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.position.clone();
        v.push(self.bias);
        v
    }
}

/// Per-epoch states stored epoch-major as `[p_0.., b_0, p_1.., b_1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    dim: usize,
    values: Vec<f64>,
}

impl StateTrajectory {
    pub fn new(dim: usize, states: &[StateVector]) -> Result<Self> {
        let mut values = Vec::with_capacity(states.len() * (dim + 1));
        for (i, s) in states.iter().enumerate() {
            if s.position.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "epoch {i} has {}-D position, trajectory is {dim}-D",
                    s.position.len()
                )));
            }
            values.extend_from_slice(&s.position);
            values.push(s.bias);
        }
        Self::from_flat(dim, values)
    }

    /// Every epoch set to the same state.
    pub fn constant(epochs: usize, state: &StateVector) -> Result<Self> {
        Self::new(state.position.len(), &vec![state.clone(); epochs])
    }

    pub fn from_flat(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch("position dimension must be >= 1".into()));
        }
        if values.is_empty() || !values.len().is_multiple_of(dim + 1) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form whole {}-entry epochs",
                values.len(),
                dim + 1
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData(format!("state entry {bad} is not finite")));
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_size(&self) -> usize {
        self.dim + 1
    }

    pub fn epochs(&self) -> usize {
        self.values.len() / (self.dim + 1)
    }

    pub fn position(&self, epoch: usize) -> &[f64] {
        let b = self.block_size();
        &self.values[epoch * b..epoch * b + self.dim]
    }

    pub fn bias(&self, epoch: usize) -> f64 {
        self.values[epoch * self.block_size() + self.dim]
    }

    pub fn state(&self, epoch: usize) -> StateVector {
        StateVector::new(self.position(epoch).to_vec(), self.bias(epoch))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Range,
    PhaseLike,
    Prior,
    Between,
}

impl ObservationKind {
    pub fn is_measurement(self) -> bool {
        matches!(self, Self::Range | Self::PhaseLike)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Range => "range",
            Self::PhaseLike => "phase_like",
            Self::Prior => "prior",
            Self::Between => "between",
        }
    }
}

impl fmt::Display for ObservationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObservationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "range" => Ok(Self::Range),
            "phase_like" | "phase" => Ok(Self::PhaseLike),
            "prior" => Ok(Self::Prior),
            "between" => Ok(Self::Between),
            other => Err(Error::Parse(format!(
                "unknown observation kind '{other}' (expected range, phase_like, prior, between)"
            ))),
        }
    }
}

pub const ELEVATION: &str = "elevation_deg";
pub const AZIMUTH: &str = "azimuth_deg";
pub const SIGNAL_STRENGTH: &str = "signal_strength_dbhz";

/// Named metadata attached to one observation, in a fixed column order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    names: Vec<String>,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut values = Vec::new();
        for (name, value) in entries {
            let name = name.into();
            if !value.is_finite() {
                return Err(Error::NonFiniteData(format!("feature {name} = {value}")));
            }
            if names.contains(&name) {
                return Err(Error::FeatureNameMismatch(format!("duplicate feature name {name}")));
            }
            names.push(name);
            values.push(value);
        }
        Ok(Self { names, values })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub epoch: usize,
    pub kind: ObservationKind,
    pub value: Vec<f64>,
    pub beacon: Option<Vec<f64>>,
    pub metadata: FeatureVector,
}

impl Observation {
    pub fn range(epoch: usize, value: f64, beacon: Vec<f64>, metadata: FeatureVector) -> Self {
        Self { epoch, kind: ObservationKind::Range, value: vec![value], beacon: Some(beacon), metadata }
    }

    pub fn phase_like(epoch: usize, value: f64, beacon: Vec<f64>, metadata: FeatureVector) -> Self {
        Self { epoch, kind: ObservationKind::PhaseLike, value: vec![value], beacon: Some(beacon), metadata }
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.value.is_empty() || self.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidObservation(format!("observation {index} has an empty or non-finite value")));
        }
        match (self.kind.is_measurement(), &self.beacon) {
            (true, None) => Err(Error::InvalidObservation(format!(
                "{} observation {index} has no beacon",
                self.kind
            ))),
            (false, Some(_)) => Err(Error::InvalidObservation(format!(
                "{} observation {index} must not carry a beacon",
                self.kind
            ))),
            (true, Some(_)) if self.value.len() != 1 => Err(Error::InvalidObservation(format!(
                "{} observation {index} must be scalar",
                self.kind
            ))),
            _ => Ok(()),
        }
    }
}

/// Gaussian noise with a (possibly non-zero) mean and SPD covariance.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    lower: DMatrix<f64>,
}

impl PartialEq for NoiseModel {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.covariance == other.covariance
    }
}

impl NoiseModel {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "mean has {d} entries, covariance is {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData("noise model entries must be finite".into()));
        }
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::NonPositiveDefinite(format!("covariance not symmetric at ({i},{j})")));
                }
            }
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let lower = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NonPositiveDefinite("Cholesky factorization failed".into()))?
            .unpack();
        if lower.diagonal().iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::NonPositiveDefinite("non-positive Cholesky pivot".into()));
        }
        Ok(Self { mean, covariance, lower })
    }

    pub fn zero_mean(covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(covariance.nrows()), covariance)
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self> {
        Self::zero_mean(DMatrix::identity(dim, dim) * (sigma * sigma))
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance))
    }

    pub fn diagonal_sigmas(sigmas: &[f64]) -> Result<Self> {
        let var: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
        Self::zero_mean(DMatrix::from_diagonal(&DVector::from_vec(var)))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower-triangular square root `L` with `L L^T = covariance`.
    pub fn sqrt_covariance(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `L^{-1} (r - mean)`.
    pub fn whiten(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        if r.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "residual has {} entries, noise model {}",
                r.len(),
                self.dim()
            )));
        }
        self.lower
            .solve_lower_triangular(&(r - &self.mean))
            .ok_or_else(|| Error::NonPositiveDefinite("singular square-root factor".into()))
    }

    /// `L^{-1} J` for a Jacobian of the raw residual.
    pub fn whiten_jacobian(&self, jac: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lower
            .solve_lower_triangular(jac)
            .ok_or_else(|| Error::NonPositiveDefinite("singular square-root factor".into()))
    }

    pub fn mahalanobis_sq(&self, r: &DVector<f64>) -> Result<f64> {
        Ok(self.whiten(r)?.norm_squared())
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Log of the Gaussian density at `r`, normalization included.
    pub fn log_density(&self, r: &DVector<f64>) -> Result<f64> {
        let m = self.mahalanobis_sq(r)?;
        let d = self.dim() as f64;
        Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det() + m))
    }

    /// One-dimensional marginal of entry `i`.
    pub fn marginal(&self, i: usize) -> Result<Self> {
        Self::scalar(self.mean[i], self.covariance[(i, i)])
    }
}

#[derive(Serialize, Deserialize)]
struct NoiseModelRepr {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl Serialize for NoiseModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NoiseModelRepr {
            mean: self.mean.iter().copied().collect(),
            covariance: matrix_rows(&self.covariance),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for NoiseModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = NoiseModelRepr::deserialize(d)?;
        let cov = matrix_from_rows(&repr.covariance).map_err(serde::de::Error::custom)?;
        NoiseModel::new(DVector::from_vec(repr.mean), cov).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

/// Measurement function of a factor, chosen by the observation kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    /// `h = |p - beacon| + bias` on one epoch.
    Range { beacon: Vec<f64> },
    /// Same geometry as `Range`, tighter nominal noise.
    PhaseLike { beacon: Vec<f64> },
    /// `h = x` on one epoch.
    Prior,
    /// `h = x_{k+1} - x_k` on consecutive epochs.
    Between,
}

#[derive(Debug, Clone)]
pub struct Factor {
    /// Index into the observation list the graph was built from, if any.
    pub observation: Option<usize>,
    pub epochs: Vec<usize>,
    pub measurement: Measurement,
    pub value: DVector<f64>,
    pub noise: NoiseModel,
}

impl Factor {
    pub fn kind(&self) -> ObservationKind {
        match self.measurement {
            Measurement::Range { .. } => ObservationKind::Range,
            Measurement::PhaseLike { .. } => ObservationKind::PhaseLike,
            Measurement::Prior => ObservationKind::Prior,
            Measurement::Between => ObservationKind::Between,
        }
    }

    pub fn is_measurement(&self) -> bool {
        self.kind().is_measurement()
    }

    pub fn residual_dim(&self) -> usize {
        self.value.len()
    }

    pub fn beacon(&self) -> Option<&[f64]> {
        match &self.measurement {
            Measurement::Range { beacon } | Measurement::PhaseLike { beacon } => Some(beacon),
            _ => None,
        }
    }

    fn check(&self, dim: usize, x: &[f64]) -> Result<()> {
        let b = dim + 1;
        if !x.len().is_multiple_of(b) {
            return Err(Error::DimensionMismatch(format!("state vector length {} not a multiple of {b}", x.len())));
        }
        let epochs = x.len() / b;
        if let Some(e) = self.epochs.iter().find(|e| **e >= epochs) {
            return Err(Error::DimensionMismatch(format!("factor addresses epoch {e}, trajectory has {epochs}")));
        }
        let expected = match &self.measurement {
            Measurement::Range { beacon } | Measurement::PhaseLike { beacon } => {
                if beacon.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "{}-D beacon against {dim}-D positions",
                        beacon.len()
                    )));
                }
                1
            }
            Measurement::Prior | Measurement::Between => b,
        };
        if self.value.len() != expected || self.noise.dim() != expected {
            return Err(Error::DimensionMismatch(format!(
                "factor value/noise dimension {}/{} but measurement needs {expected}",
                self.value.len(),
                self.noise.dim()
            )));
        }
        Ok(())
    }

    /// Raw residual `y - h(x)` on a flat state vector.
    pub(crate) fn residual_flat(&self, dim: usize, x: &[f64]) -> Result<DVector<f64>> {
        self.check(dim, x)?;
        let b = dim + 1;
        let block = |e: usize| &x[e * b..(e + 1) * b];
        let h = match &self.measurement {
            Measurement::Range { beacon } | Measurement::PhaseLike { beacon } => {
                let s = block(self.epochs[0]);
                let dist = s[..dim].iter().zip(beacon).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                DVector::from_element(1, dist + s[dim])
            }
            Measurement::Prior => DVector::from_column_slice(block(self.epochs[0])),
            Measurement::Between => {
                let a = block(self.epochs[0]);
                let c = block(self.epochs[1]);
                DVector::from_iterator(b, c.iter().zip(a).map(|(c, a)| c - a))
            }
        };
        Ok(&self.value - h)
    }

    /// Jacobian blocks of the raw residual, one per addressed epoch.
    pub(crate) fn jacobian_flat(&self, dim: usize, x: &[f64]) -> Result<Vec<(usize, DMatrix<f64>)>> {
        self.check(dim, x)?;
        let b = dim + 1;
        Ok(match &self.measurement {
            Measurement::Range { beacon } | Measurement::PhaseLike { beacon } => {
                let e = self.epochs[0];
                let s = &x[e * b..(e + 1) * b];
                let diff: Vec<f64> = s[..dim].iter().zip(beacon).map(|(p, q)| p - q).collect();
                let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
                let mut row = DMatrix::zeros(1, b);
                if dist > 0.0 {
                    for (k, d) in diff.iter().enumerate() {
                        row[(0, k)] = -d / dist;
                    }
                }
                row[(0, dim)] = -1.0;
                vec![(e, row)]
            }
            Measurement::Prior => vec![(self.epochs[0], -DMatrix::identity(b, b))],
            Measurement::Between => vec![
                (self.epochs[0], DMatrix::identity(b, b)),
                (self.epochs[1], -DMatrix::identity(b, b)),
            ],
        })
    }

    pub fn residual(&self, x: &StateTrajectory) -> Result<DVector<f64>> {
        self.residual_flat(x.dim(), x.as_slice())
    }

    pub fn whitened_residual(&self, x: &StateTrajectory) -> Result<DVector<f64>> {
        self.noise.whiten(&self.residual(x)?)
    }
}

/// Priors and nominal noise used when turning observations into factors.
#[derive(Debug, Clone)]
pub struct GraphSetup {
    /// Epoch count; `None` means one past the largest observed epoch index.
    pub epochs: Option<usize>,
    pub prior: StateVector,
    pub prior_noise: NoiseModel,
    pub motion_noise: NoiseModel,
    pub range_noise: NoiseModel,
    pub phase_noise: NoiseModel,
}

#[derive(Debug, Clone)]
pub struct FactorGraph {
    dim: usize,
    epochs: usize,
    factors: Vec<Factor>,
}

impl FactorGraph {
    /// Factor order: the epoch-0 prior, one between factor per consecutive
    /// epoch pair, then one factor per observation in input order. A
    /// `between` observation at epoch `k` replaces the zero displacement of
    /// the `(k-1, k)` between factor instead of adding a new one.
    pub fn build(observations: &[Observation], setup: &GraphSetup) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::EmptyProblem);
        }
        let dim = setup.prior.position.len();
        let b = dim + 1;
        if setup.prior_noise.dim() != b || setup.motion_noise.dim() != b {
            return Err(Error::DimensionMismatch(format!("prior/motion noise must be {b}-D")));
        }
        if setup.range_noise.dim() != 1 || setup.phase_noise.dim() != 1 {
            return Err(Error::DimensionMismatch("range/phase noise must be scalar".into()));
        }
        let max_epoch = observations.iter().map(|o| o.epoch).max().unwrap_or(0);
        let epochs = setup.epochs.unwrap_or(max_epoch + 1);
        if epochs == 0 {
            return Err(Error::EmptyProblem);
        }
        for (i, o) in observations.iter().enumerate() {
            o.validate(i)?;
            if o.epoch >= epochs {
                return Err(Error::DisconnectedGraph(format!(
                    "observation {i} addresses epoch {} but the problem has {epochs} epochs",
                    o.epoch
                )));
            }
            if let Some(beacon) = &o.beacon {
                if beacon.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "observation {i} has a {}-D beacon, states are {dim}-D",
                        beacon.len()
                    )));
                }
            }
            if !o.kind.is_measurement() && o.value.len() != b {
                return Err(Error::DimensionMismatch(format!(
                    "{} observation {i} needs {b} values",
                    o.kind
                )));
            }
            if o.kind == ObservationKind::Between && o.epoch == 0 {
                return Err(Error::InvalidObservation(format!("between observation {i} at epoch 0")));
            }
        }
        check_feature_names(observations)?;

        let mut factors = Vec::with_capacity(1 + epochs + observations.len());
        factors.push(Factor {
            observation: None,
            epochs: vec![0],
            measurement: Measurement::Prior,
            value: DVector::from_vec(setup.prior.to_vec()),
            noise: setup.prior_noise.clone(),
        });
        for k in 1..epochs {
            factors.push(Factor {
                observation: None,
                epochs: vec![k - 1, k],
                measurement: Measurement::Between,
                value: DVector::zeros(b),
                noise: setup.motion_noise.clone(),
            });
        }
        for (i, o) in observations.iter().enumerate() {
            let value = DVector::from_column_slice(&o.value);
            match o.kind {
                ObservationKind::Range => factors.push(Factor {
                    observation: Some(i),
                    epochs: vec![o.epoch],
                    measurement: Measurement::Range { beacon: o.beacon.clone().unwrap_or_default() },
                    value,
                    noise: setup.range_noise.clone(),
                }),
                ObservationKind::PhaseLike => factors.push(Factor {
                    observation: Some(i),
                    epochs: vec![o.epoch],
                    measurement: Measurement::PhaseLike { beacon: o.beacon.clone().unwrap_or_default() },
                    value,
                    noise: setup.phase_noise.clone(),
                }),
                ObservationKind::Prior => factors.push(Factor {
                    observation: Some(i),
                    epochs: vec![o.epoch],
                    measurement: Measurement::Prior,
                    value,
                    noise: setup.prior_noise.clone(),
                }),
                ObservationKind::Between => {
                    let f = &mut factors[o.epoch];
                    f.value = value;
                    f.observation = Some(i);
                }
            }
        }
        let graph = Self { dim, epochs, factors };
        graph.check_connected()?;
        Ok(graph)
    }

    fn check_connected(&self) -> Result<()> {
        // Union-find over epochs through multi-epoch factors.
        let mut parent: Vec<usize> = (0..self.epochs).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for f in &self.factors {
            for w in f.epochs.windows(2) {
                let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                parent[a] = b;
            }
        }
        let anchored: Vec<usize> = self
            .factors
            .iter()
            .filter(|f| f.measurement == Measurement::Prior)
            .map(|f| f.epochs[0])
            .collect();
        for e in 0..self.epochs {
            let root = find(&mut parent, e);
            if !anchored.iter().any(|a| find(&mut parent, *a) == root) {
                return Err(Error::DisconnectedGraph(format!("epoch {e} is not reachable from a prior")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor(&self, i: usize) -> &Factor {
        &self.factors[i]
    }

    /// Indices of range and phase-like factors, in graph order.
    pub fn measurement_indices(&self) -> Vec<usize> {
        (0..self.factors.len()).filter(|i| self.factors[*i].is_measurement()).collect()
    }

    pub fn set_noise(&mut self, factor: usize, noise: NoiseModel) -> Result<()> {
        let f = &mut self.factors[factor];
        if noise.dim() != f.residual_dim() {
            return Err(Error::DimensionMismatch(format!(
                "factor {factor} has {}-D residual, noise model is {}-D",
                f.residual_dim(),
                noise.dim()
            )));
        }
        f.noise = noise;
        Ok(())
    }

    /// Constant trajectory at the prior mean.
    pub fn initial_trajectory(&self) -> StateTrajectory {
        let prior = &self.factors[0].value;
        let b = self.dim + 1;
        let mut values = Vec::with_capacity(self.epochs * b);
        for _ in 0..self.epochs {
            values.extend(prior.iter());
        }
        StateTrajectory { dim: self.dim, values }
    }

    pub fn check_trajectory(&self, x: &StateTrajectory) -> Result<()> {
        if x.dim() != self.dim || x.epochs() != self.epochs {
            return Err(Error::DimensionMismatch(format!(
                "trajectory is {} epochs of {}-D, graph expects {} of {}-D",
                x.epochs(),
                x.dim(),
                self.epochs,
                self.dim
            )));
        }
        Ok(())
    }

    /// Whitened Jacobian of every factor plus the stacked whitened residual.
    pub fn linearize(&self, x: &StateTrajectory) -> Result<Linearization> {
        self.check_trajectory(x)?;
        let parts = crate::par::map_range(self.factors.len(), |i| {
            let f = &self.factors[i];
            let r = f.residual_flat(self.dim, x.as_slice())?;
            let e = f.noise.whiten(&r)?;
            let blocks = f
                .jacobian_flat(self.dim, x.as_slice())?
                .into_iter()
                .map(|(ep, j)| Ok((ep, f.noise.whiten_jacobian(&j)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok::<_, Error>((e, blocks))
        });
        let mut rows = Vec::with_capacity(parts.len());
        let mut residual = Vec::new();
        for part in parts {
            let (e, blocks): (DVector<f64>, Vec<(usize, DMatrix<f64>)>) = part?;
            rows.push(RowBlock { row_offset: residual.len(), blocks });
            residual.extend(e.iter());
        }
        Ok(Linearization {
            rows,
            residual: DVector::from_vec(residual),
            block_size: self.dim + 1,
            epochs: self.epochs,
        })
    }
}

fn check_feature_names(observations: &[Observation]) -> Result<()> {
    let mut reference: Option<&[String]> = None;
    for (i, o) in observations.iter().enumerate().filter(|(_, o)| o.kind.is_measurement()) {
        match reference {
            None => reference = Some(o.metadata.names()),
            Some(r) if r != o.metadata.names() => {
                return Err(Error::FeatureNameMismatch(format!(
                    "observation {i} has features {:?}, expected {:?}",
                    o.metadata.names(),
                    r
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Jacobian row block of one factor: whitened blocks keyed by epoch.
#[derive(Debug, Clone)]
pub struct RowBlock {
    pub row_offset: usize,
    pub blocks: Vec<(usize, DMatrix<f64>)>,
}

/// Sparse block Jacobian with rows aligned to factor order.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub rows: Vec<RowBlock>,
    pub residual: DVector<f64>,
    pub block_size: usize,
    pub epochs: usize,
}

impl Linearization {
    pub fn to_dense_jacobian(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.residual.len(), self.epochs * self.block_size);
        for row in &self.rows {
            for (ep, block) in &row.blocks {
                j.view_mut((row.row_offset, ep * self.block_size), block.shape()).copy_from(block);
            }
        }
        j
    }
}

/// Convenience wrapper matching the graph constructor.
pub fn build_graph(observations: &[Observation], setup: &GraphSetup) -> Result<FactorGraph> {
    FactorGraph::build(observations, setup)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(dim: usize, epochs: Option<usize>) -> GraphSetup {
        GraphSetup {
            epochs,
            prior: StateVector::new(vec![0.0; dim], 0.0),
            prior_noise: NoiseModel::isotropic(dim + 1, 10.0).unwrap(),
            motion_noise: NoiseModel::isotropic(dim + 1, 1.0).unwrap(),
            range_noise: NoiseModel::scalar(0.0, 1.0).unwrap(),
            phase_noise: NoiseModel::scalar(0.0, 1e-4).unwrap(),
        }
    }

    fn range_at(epoch: usize, value: f64, beacon: [f64; 2]) -> Observation {
        Observation::range(epoch, value, beacon.to_vec(), FeatureVector::empty())
    }

    fn traj(p: [f64; 2], bias: f64) -> StateTrajectory {
        StateTrajectory::new(2, &[StateVector::new(p.to_vec(), bias)]).unwrap()
    }

    #[test]
    fn minimal_graph_has_prior_and_range() {
        let g = build_graph(&[range_at(0, 5.0, [0.0, 0.0])], &setup(2, None)).unwrap();
        assert_eq!(g.factors().len(), 2);
        assert_eq!(g.factor(0).kind(), ObservationKind::Prior);
        assert_eq!(g.factor(1).kind(), ObservationKind::Range);
    }

    #[test]
    fn factor_count_three_epochs_four_ranges() {
        let obs: Vec<_> = (0..3)
            .flat_map(|e| (0..4).map(move |k| range_at(e, 10.0, [k as f64 * 10.0, 5.0])))
            .collect();
        let g = build_graph(&obs, &setup(2, None)).unwrap();
        assert_eq!(g.factors().len(), 15);
        assert_eq!(g.measurement_indices().len(), 12);
    }

    #[test]
    fn out_of_range_epoch_is_disconnected() {
        let err = build_graph(&[range_at(5, 1.0, [0.0, 0.0])], &setup(2, Some(2))).unwrap_err();
        assert!(matches!(err, Error::DisconnectedGraph(_)));
    }

    #[test]
    fn empty_problem_rejected() {
        assert!(matches!(build_graph(&[], &setup(2, None)), Err(Error::EmptyProblem)));
    }

    #[test]
    fn range_residual_examples() {
        let g = build_graph(&[range_at(0, 5.0, [0.0, 0.0])], &setup(2, None)).unwrap();
        let f = g.factor(1);
        assert_eq!(f.residual(&traj([3.0, 4.0], 0.0)).unwrap()[0], 0.0);
        assert_eq!(f.residual(&traj([3.0, 4.0], 1.0)).unwrap()[0], -1.0);
        let g = build_graph(&[range_at(0, 2.5, [0.0, 0.0])], &setup(2, None)).unwrap();
        assert_eq!(g.factor(1).residual(&traj([1.0, 0.0], 0.0)).unwrap()[0], 1.5);
    }

    #[test]
    fn residual_rejects_wrong_dimension() {
        let g = build_graph(&[range_at(0, 5.0, [0.0, 0.0])], &setup(2, None)).unwrap();
        let x3 = StateTrajectory::new(3, &[StateVector::new(vec![0.0; 3], 0.0)]).unwrap();
        assert!(matches!(g.factor(1).residual(&x3), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn whitening_examples() {
        let n = NoiseModel::scalar(0.0, 4.0).unwrap();
        assert_eq!(n.whiten(&DVector::from_element(1, 2.0)).unwrap()[0], 1.0);
        let n = NoiseModel::scalar(2.0, 4.0).unwrap();
        assert_eq!(n.whiten(&DVector::from_element(1, 2.0)).unwrap()[0], 0.0);
        let n = NoiseModel::diagonal_sigmas(&[1.0, 2.0]).unwrap();
        let w = n.whiten(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.5]);
    }

    #[test]
    fn non_spd_covariance_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(NoiseModel::zero_mean(cov), Err(Error::NonPositiveDefinite(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(NoiseModel::zero_mean(asym), Err(Error::NonPositiveDefinite(_))));
    }

    #[test]
    fn range_jacobian_is_negative_unit_vector() {
        let g = build_graph(&[range_at(0, 1.0, [0.0, 0.0])], &setup(2, None)).unwrap();
        let blocks = g.factor(1).jacobian_flat(2, traj([1.0, 0.0], 0.0).as_slice()).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].1.as_slice(), &[-1.0, 0.0, -1.0]);
    }

    #[test]
    fn prior_jacobian_is_scaled_negative_identity() {
        let g = build_graph(&[range_at(0, 1.0, [0.0, 0.0])], &setup(2, None)).unwrap();
        let lin = g.linearize(&traj([1.0, 2.0], 0.5)).unwrap();
        let j = lin.to_dense_jacobian();
        for i in 0..3 {
            for k in 0..3 {
                let expected = if i == k { -0.1 } else { 0.0 };
                assert!((j[(i, k)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn prior_residual_is_exactly_linear() {
        let g = build_graph(&[range_at(0, 1.0, [0.0, 0.0])], &setup(2, None)).unwrap();
        let x = traj([0.3, -1.7], 0.25);
        let dx = traj([0.5, 0.25, ], 0.125);
        let sum: Vec<f64> = x.as_slice().iter().zip(dx.as_slice()).map(|(a, b)| a + b).collect();
        let xs = StateTrajectory::from_flat(2, sum).unwrap();
        let d = g.factor(0).residual(&xs).unwrap() - g.factor(0).residual(&x).unwrap();
        assert_eq!(d.as_slice(), &[-0.5, -0.25, -0.125]);
    }

    #[test]
    fn between_observation_overrides_displacement() {
        let mut obs = vec![range_at(0, 1.0, [0.0, 0.0]), range_at(1, 1.0, [0.0, 0.0])];
        obs.push(Observation {
            epoch: 1,
            kind: ObservationKind::Between,
            value: vec![1.0, 0.0, 0.0],
            beacon: None,
            metadata: FeatureVector::empty(),
        });
        let g = build_graph(&obs, &setup(2, None)).unwrap();
        assert_eq!(g.factors().len(), 4);
        assert_eq!(g.factor(1).value.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn feature_name_mismatch_rejected() {
        let a = FeatureVector::new([(ELEVATION, 10.0)]).unwrap();
        let b = FeatureVector::new([(AZIMUTH, 10.0)]).unwrap();
        let obs = vec![
            Observation::range(0, 1.0, vec![0.0, 0.0], a),
            Observation::range(0, 1.0, vec![1.0, 0.0], b),
        ];
        assert!(matches!(build_graph(&obs, &setup(2, None)), Err(Error::FeatureNameMismatch(_))));
    }

    #[test]
    fn construction_is_deterministic() {
        let obs: Vec<_> = (0..4).map(|e| range_at(e % 2, 3.0 + e as f64, [e as f64, 1.0])).collect();
        let a = build_graph(&obs, &setup(2, None)).unwrap();
        let b = build_graph(&obs, &setup(2, None)).unwrap();
        for (fa, fb) in a.factors().iter().zip(b.factors()) {
            assert_eq!(fa.epochs, fb.epochs);
            assert_eq!(fa.value, fb.value);
            assert_eq!(fa.measurement, fb.measurement);
        }
    }
}
