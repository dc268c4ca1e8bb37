//! Error statistics and multi-run comparisons.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CompareConfig, RunConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::{run, IterationTrace, Mode, PipelineConfig};
use crate::scenario::{generate, oracle_error, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub median: f64,
    pub variance: f64,
    pub max: f64,
    pub count: usize,
}

/// Median (lower middle for even counts), unbiased variance and maximum.
/// A single value has variance 0.
pub fn summarize(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::EmptySeries);
    }
    if let Some(bad) = errors.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData(format!("error value {bad}")));
    }
    if let Some(neg) = errors.iter().find(|v| **v < 0.0) {
        return Err(Error::NegativeInput(*neg));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // sum in sorted order so permutations of the input give identical bits
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 { sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    Ok(ErrorSummary { median: sorted[(n - 1) / 2], variance, max: sorted[n - 1], count: n })
}

/// Lower-middle median of a non-empty series.
pub fn median(values: &[f64]) -> Result<f64> {
    let mut v = values.to_vec();
    if v.is_empty() {
        return Err(Error::EmptySeries);
    }
    v.sort_by(f64::total_cmp);
    Ok(v[(v.len() - 1) / 2])
}

/// Residual and final hard assignment of one measurement factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentPoint {
    pub factor: usize,
    pub epoch: usize,
    pub kind: String,
    pub residual: f64,
    pub assignment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub errors: Vec<f64>,
    pub summary: ErrorSummary,
    pub trace: Vec<IterationTrace>,
    pub assignments: Vec<AssignmentPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub mode: Mode,
    pub seed: u64,
    /// Error message for failed runs.
    pub result: std::result::Result<RunData, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the canonical JSON form of the scenario template.
    pub scenario_hash: String,
    pub scenario: ScenarioConfig,
    pub pipeline: PipelineConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub version: String,
    pub timestamps: Timestamps,
}

pub fn config_hash(scenario: &ScenarioConfig) -> Result<String> {
    let canonical = serde_json::to_vec(scenario)?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set so that
/// manifests can be made reproducible.
fn now_unix() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()) {
        return v;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub manifest: RunManifest,
    /// Mode-major, seeds in configured order.
    pub runs: Vec<RunOutcome>,
}

/// Runs one mode on one seed: generate, estimate, score.
pub fn run_single(cfg: &RunConfig, mode: Mode, seed: u64) -> Result<RunData> {
    let scenario = generate(&cfg.scenario_for(seed))?;
    let result = run(&scenario.observations, &cfg.pipeline_for(mode, seed))?;
    let errors = oracle_error(&scenario.truth, &result.trajectory)?;
    let summary = summarize(&errors)?;
    let assignments = match result.trace.last() {
        Some(last) => {
            let measurements = result.graph.measurement_indices();
            let mut points = Vec::with_capacity(measurements.len());
            for (k, &f) in measurements.iter().enumerate() {
                let factor = result.graph.factor(f);
                points.push(AssignmentPoint {
                    factor: f,
                    epoch: factor.epochs[0],
                    kind: factor.kind().to_string(),
                    residual: factor.residual(&result.trajectory)?[0],
                    assignment: last.assignments.get(k).copied().unwrap_or(0),
                });
            }
            points
        }
        None => Vec::new(),
    };
    Ok(RunData { errors, summary, trace: result.trace, assignments })
}

/// Runs every (mode, seed) pair. Runs go through the data-parallel map with
/// at most `threads` workers (0 = automatic); failures are recorded per run
/// and never abort the others.
pub fn compare(cfg: &RunConfig, threads: usize) -> Result<Comparison> {
    let CompareConfig { modes, seeds } = &cfg.compare;
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("compare needs at least one mode and one seed".into()));
    }
    cfg.validate()?;
    let started_unix = now_unix();
    let pairs: Vec<(Mode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let runs = crate::par::with_threads(threads, || {
        crate::par::map_slice(&pairs, |&(mode, seed)| RunOutcome {
            mode,
            seed,
            result: run_single(cfg, mode, seed).map_err(|e| e.to_string()),
        })
    });
    let manifest = RunManifest {
        scenario_hash: config_hash(&cfg.scenario)?,
        scenario: cfg.scenario.clone(),
        pipeline: cfg.pipeline.clone(),
        modes: modes.clone(),
        seeds: seeds.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamps: Timestamps { started_unix, finished_unix: now_unix() },
    };
    Ok(Comparison { manifest, runs })
}

impl Comparison {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.result.is_err()).count()
    }

    fn successes(&self, mode: Mode) -> impl Iterator<Item = (u64, &RunData)> {
        self.runs.iter().filter(move |r| r.mode == mode).filter_map(|r| r.result.as_ref().ok().map(|d| (r.seed, d)))
    }

    /// Median over seeds of the per-run median error.
    pub fn median_of_medians(&self, mode: Mode) -> Result<f64> {
        let medians: Vec<f64> = self.successes(mode).map(|(_, d)| d.summary.median).collect();
        median(&medians)
    }

    /// Summary of all epochs of all successful runs of `mode`.
    pub fn pooled(&self, mode: Mode) -> Result<ErrorSummary> {
        let all: Vec<f64> = self.successes(mode).flat_map(|(_, d)| d.errors.iter().copied()).collect();
        summarize(&all)
    }

    /// Fraction of outer iterations of `mode` that selected `feature`.
    pub fn selection_rate(&self, mode: Mode, feature: &str) -> Option<f64> {
        let mut total = 0usize;
        let mut hits = 0usize;
        for (_, d) in self.successes(mode) {
            for it in d.trace.iter().filter(|t| !t.features.is_empty()) {
                total += 1;
                hits += it.features.iter().any(|f| f.name == feature && f.selected) as usize;
            }
        }
        (total > 0).then(|| hits as f64 / total as f64)
    }

    /// Writes `summary.csv`, `errors.csv`, `feature_usage.csv`,
    /// `assignments.csv` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_summary(io::create(&dir.join("summary.csv"))?)?;
        self.write_errors(io::create(&dir.join("errors.csv"))?)?;
        self.write_feature_usage(io::create(&dir.join("feature_usage.csv"))?)?;
        self.write_assignments(io::create(&dir.join("assignments.csv"))?)?;
        let mut m = io::create(&dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut m, &self.manifest)?;
        std::io::Write::write_all(&mut m, b"\n")?;
        std::io::Write::flush(&mut m)?;
        Ok(())
    }

    /// One row per run (status `ok` or `failed`, failed rows carry the
    /// message and no statistics), then one pooled row per mode with seed
    /// `all` and the median of per-run medians.
    pub fn write_summary<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mode", "seed", "status", "median", "variance", "max", "count", "median_of_medians", "message"])?;
        for r in &self.runs {
            match &r.result {
                Ok(d) => w.write_record([
                    r.mode.to_string(),
                    r.seed.to_string(),
                    "ok".into(),
                    d.summary.median.to_string(),
                    d.summary.variance.to_string(),
                    d.summary.max.to_string(),
                    d.summary.count.to_string(),
                    String::new(),
                    String::new(),
                ])?,
                Err(msg) => w.write_record([
                    r.mode.to_string(),
                    r.seed.to_string(),
                    "failed".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    msg.clone(),
                ])?,
            }
        }
        for &mode in &self.manifest.modes {
            let failed = self.runs.iter().filter(|r| r.mode == mode && r.result.is_err()).count();
            match (self.pooled(mode), self.median_of_medians(mode)) {
                (Ok(s), Ok(mm)) => w.write_record([
                    mode.to_string(),
                    "all".into(),
                    if failed == 0 { "ok".into() } else { format!("partial ({failed} failed)") },
                    s.median.to_string(),
                    s.variance.to_string(),
                    s.max.to_string(),
                    s.count.to_string(),
                    mm.to_string(),
                    String::new(),
                ])?,
                _ => w.write_record([
                    mode.to_string(),
                    "all".into(),
                    "failed".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    "no successful runs".into(),
                ])?,
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Long format `mode,seed,epoch,error` for external box plots.
    pub fn write_errors<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mode", "seed", "epoch", "error"])?;
        for r in &self.runs {
            if let Ok(d) = &r.result {
                for (e, v) in d.errors.iter().enumerate() {
                    w.write_record([r.mode.to_string(), r.seed.to_string(), e.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Per outer iteration feature scores and selections of every run that
    /// performed feature scoring.
    pub fn write_feature_usage<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mode", "seed", "iteration", "feature", "score", "selected"])?;
        for r in &self.runs {
            if let Ok(d) = &r.result {
                for it in &d.trace {
                    for f in &it.features {
                        w.write_record([
                            r.mode.to_string(),
                            r.seed.to_string(),
                            it.iteration.to_string(),
                            f.name.clone(),
                            f.score.to_string(),
                            u8::from(f.selected).to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_assignments<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mode", "seed", "factor", "epoch", "kind", "residual", "assignment"])?;
        for r in &self.runs {
            if let Ok(d) = &r.result {
                for p in &d.assignments {
                    w.write_record([
                        r.mode.to_string(),
                        r.seed.to_string(),
                        p.factor.to_string(),
                        p.epoch.to_string(),
                        p.kind.clone(),
                        p.residual.to_string(),
                        p.assignment.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Per-mode counts of successful runs, for quick reporting.
    pub fn counts(&self) -> BTreeMap<Mode, (usize, usize)> {
        let mut out = BTreeMap::new();
        for r in &self.runs {
            let e = out.entry(r.mode).or_insert((0, 0));
            if r.result.is_ok() {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        out
    }
}
