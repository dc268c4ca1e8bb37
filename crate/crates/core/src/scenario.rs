//! Synthetic range-plus-bias scenarios with two-mode measurement noise.
//!
//! Each epoch observes every beacon. Clean rows carry `N(0, sigma^2)` noise,
//! degraded rows `N(offset, (inflation * sigma)^2)`. Which rows degrade, and
//! whether that shows up in the signal-strength metadata, is set by the
//! coupling rule. Labels are returned beside the observations, never inside.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureVector, Observation, StateTrajectory, StateVector, AZIMUTH, ELEVATION, SIGNAL_STRENGTH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static { position: Vec<f64> },
    ConstantVelocity { start: Vec<f64>, velocity: Vec<f64> },
    /// Piecewise-linear path at constant speed; holds at the last point.
    Waypoints { points: Vec<Vec<f64>>, speed: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Beacons {
    Ring { ring: Ring },
    List(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pub count: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    None,
    BySignalStrength,
    /// The lowest-elevation fraction of observations degrade.
    ByElevation,
    /// Degradation is independent of the metadata, but an unrelated subset
    /// of the same size gets the signal-strength drop.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Degradation {
    pub fraction: f64,
    pub inflation: f64,
    pub offset: f64,
    pub coupling: Coupling,
}

impl Default for Degradation {
    fn default() -> Self {
        Self { fraction: 0.0, inflation: 10.0, offset: 0.0, coupling: Coupling::None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetadataConfig {
    pub ss_baseline: f64,
    pub ss_drop: f64,
    pub ss_jitter: f64,
    /// Range of the synthetic beacon heights used for 2-D elevation.
    pub beacon_height: [f64; 2],
}

impl Default for MetadataConfig {
    fn default() -> Self {
        Self { ss_baseline: 45.0, ss_drop: 15.0, ss_jitter: 1.0, beacon_height: [20.0, 200.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub epochs: usize,
    pub trajectory: Trajectory,
    pub beacons: Beacons,
    pub sigma_range: f64,
    /// Emit a phase-like observation beside every range.
    pub phase: bool,
    /// Phase-like noise; `None` means `sigma_range / 100`.
    pub sigma_phase: Option<f64>,
    pub bias0: f64,
    pub bias_drift: f64,
    pub degradation: Degradation,
    pub metadata: MetadataConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            trajectory: Trajectory::ConstantVelocity { start: vec![-50.0, 0.0], velocity: vec![1.0, 0.5] },
            beacons: Beacons::Ring { ring: Ring { count: 8, radius: 300.0 } },
            sigma_range: 1.0,
            phase: false,
            sigma_phase: None,
            bias0: 10.0,
            bias_drift: 0.1,
            degradation: Degradation::default(),
            metadata: MetadataConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn dim(&self) -> usize {
        match &self.trajectory {
            Trajectory::Static { position } => position.len(),
            Trajectory::ConstantVelocity { start, .. } => start.len(),
            Trajectory::Waypoints { points, .. } => points.first().map_or(0, Vec::len),
        }
    }

    pub fn sigma_phase(&self) -> f64 {
        self.sigma_phase.unwrap_or(self.sigma_range / 100.0)
    }

    pub fn beacon_positions(&self) -> Vec<Vec<f64>> {
        match &self.beacons {
            Beacons::List(list) => list.clone(),
            Beacons::Ring { ring } => (0..ring.count)
                .map(|i| {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / ring.count as f64;
                    let mut p = vec![ring.radius * a.cos(), ring.radius * a.sin()];
                    p.resize(self.dim().max(2), 0.0);
                    p
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidConfig(format!("trajectory must be 2-D or 3-D, got {dim}-D")));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        match &self.trajectory {
            Trajectory::ConstantVelocity { velocity, .. } if velocity.len() != dim => {
                return Err(Error::InvalidConfig("velocity dimension differs from start".into()))
            }
            Trajectory::Waypoints { points, speed }
                if (points.is_empty() || points.iter().any(|p| p.len() != dim) || !(*speed >= 0.0)) => {
                    return Err(Error::InvalidConfig("waypoints need equal dimensions and a non-negative speed".into()));
                }
            _ => {}
        }
        let beacons = self.beacon_positions();
        if beacons.iter().any(|b| b.len() != dim) {
            return Err(Error::InvalidConfig("beacon dimension differs from trajectory".into()));
        }
        if beacons.len() < dim + 1 {
            return Err(Error::ObservabilityError(format!(
                "{} beacons cannot resolve a {dim}-D position and a bias; need {}",
                beacons.len(),
                dim + 1
            )));
        }
        let d = &self.degradation;
        if !(0.0..=1.0).contains(&d.fraction) {
            return Err(Error::InvalidConfig(format!("degraded fraction {} outside [0, 1]", d.fraction)));
        }
        if !(d.inflation > 1.0) || !d.offset.is_finite() {
            return Err(Error::InvalidConfig(format!("inflation must exceed 1, got {}", d.inflation)));
        }
        if !(self.sigma_range > 0.0 && self.sigma_phase() > 0.0) {
            return Err(Error::InvalidConfig("noise sigmas must be positive".into()));
        }
        let [lo, hi] = self.metadata.beacon_height;
        if !(lo > 0.0 && hi >= lo) || !(self.metadata.ss_jitter >= 0.0) {
            return Err(Error::InvalidConfig("beacon heights must be positive and ordered; jitter non-negative".into()));
        }
        Ok(())
    }

    fn position_at(&self, t: usize) -> Vec<f64> {
        let t = t as f64;
        match &self.trajectory {
            Trajectory::Static { position } => position.clone(),
            Trajectory::ConstantVelocity { start, velocity } => start.iter().zip(velocity).map(|(s, v)| s + v * t).collect(),
            Trajectory::Waypoints { points, speed } => {
                let mut remaining = speed * t;
                for w in points.windows(2) {
                    let len = w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
                    if remaining <= len && len > 0.0 {
                        let f = remaining / len;
                        return w[0].iter().zip(&w[1]).map(|(a, b)| a + f * (b - a)).collect();
                    }
                    remaining -= len;
                }
                points.last().cloned().unwrap_or_default()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub truth: StateTrajectory,
    pub observations: Vec<Observation>,
    /// `true` for degraded rows, aligned with `observations`.
    pub labels: Vec<bool>,
}

struct Row {
    epoch: usize,
    beacon: usize,
    distance: f64,
    elevation: f64,
    azimuth: f64,
}

pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let dim = config.dim();
    let beacons = config.beacon_positions();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [h_lo, h_hi] = config.metadata.beacon_height;
    let heights: Vec<f64> = beacons.iter().map(|_| h_lo + (h_hi - h_lo) * rng.random::<f64>()).collect();

    let states: Vec<StateVector> = (0..config.epochs)
        .map(|t| StateVector::new(config.position_at(t), config.bias0 + config.bias_drift * t as f64))
        .collect();
    let truth = StateTrajectory::new(dim, &states)?;

    let mut rows = Vec::with_capacity(config.epochs * beacons.len());
    for (t, s) in states.iter().enumerate() {
        for (b, bp) in beacons.iter().enumerate() {
            let delta: Vec<f64> = bp.iter().zip(&s.position).map(|(a, p)| a - p).collect();
            let horizontal = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
            let distance = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let up = if dim == 3 { delta[2] } else { heights[b] };
            let mut azimuth = delta[0].atan2(delta[1]).to_degrees();
            if azimuth < 0.0 {
                azimuth += 360.0;
            }
            rows.push(Row { epoch: t, beacon: b, distance, elevation: up.atan2(horizontal).to_degrees(), azimuth });
        }
    }

    let d = &config.degradation;
    let n = rows.len();
    let (degraded, ss_drop): (Vec<bool>, Vec<bool>) = match d.coupling {
        Coupling::ByElevation => {
            let count = (d.fraction * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| rows[a].elevation.total_cmp(&rows[b].elevation).then(a.cmp(&b)));
            let mut deg = vec![false; n];
            for &i in order.iter().take(count) {
                deg[i] = true;
            }
            (deg, vec![false; n])
        }
        coupling => {
            let deg: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < d.fraction).collect();
            let drop = match coupling {
                Coupling::BySignalStrength => deg.clone(),
                Coupling::Random => (0..n).map(|_| rng.random::<f64>() < d.fraction).collect(),
                _ => vec![false; n],
            };
            (deg, drop)
        }
    };

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let sigma_phi = config.sigma_phase();
    let md = &config.metadata;
    let mut observations = Vec::new();
    let mut labels = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let bias = states[row.epoch].bias;
        let ss = md.ss_baseline - if ss_drop[i] { md.ss_drop } else { 0.0 } + md.ss_jitter * unit.sample(&mut rng);
        let metadata = FeatureVector::new([(ELEVATION, row.elevation), (AZIMUTH, row.azimuth), (SIGNAL_STRENGTH, ss)])?;
        let (mean, scale) = if degraded[i] { (d.offset, d.inflation) } else { (0.0, 1.0) };
        let eps = mean + scale * config.sigma_range * unit.sample(&mut rng);
        let beacon = beacons[row.beacon].clone();
        observations.push(Observation::range(row.epoch, row.distance + bias + eps, beacon.clone(), metadata.clone()));
        labels.push(degraded[i]);
        if config.phase {
            let ratio = sigma_phi / config.sigma_range;
            let eps = ratio * mean + scale * sigma_phi * unit.sample(&mut rng);
            observations.push(Observation::phase_like(row.epoch, row.distance + bias + eps, beacon, metadata));
            labels.push(degraded[i]);
        }
    }
    Ok(Scenario { truth, observations, labels })
}

/// Horizontal root-sum-of-squares position error per epoch.
pub fn oracle_error(truth: &StateTrajectory, estimate: &StateTrajectory) -> Result<Vec<f64>> {
    if truth.epochs() != estimate.epochs() {
        return Err(Error::LengthMismatch(truth.epochs(), estimate.epochs()));
    }
    if truth.dim() != estimate.dim() {
        return Err(Error::DimensionMismatch(format!("{}-D truth vs {}-D estimate", truth.dim(), estimate.dim())));
    }
    Ok((0..truth.epochs())
        .map(|k| {
            let (a, b) = (truth.position(k), estimate.position(k));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        })
        .collect())
}
