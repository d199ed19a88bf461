//! Scenario files, parameter sweeps and the derived measurements used to
//! compare sweep results (saturation knee, maximum sustainable rate).
//!
//! A scenario file is TOML with one key per [`ScenarioConfig`] field.
//! Omitted keys take their defaults. Giving an array for exactly one of
//! `flow_rate_pps`, `nodes_per_group`, `num_groups` or `packet_size_bytes`
//! turns the file into a sweep over that key; `repetitions` sets how many
//! seeds each value is run with.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::metrics::{self, CsvRow, MetricsError, MetricsReport};
use crate::model::fnv1a64;
use crate::sim::{self, ConfigError, RunOptions, RunOutput, ScenarioConfig, SimError};

pub const PRESETS: [(&str, &str); 5] = [
    ("fig7", include_str!("../presets/fig7.toml")),
    ("fig10", include_str!("../presets/fig10.toml")),
    ("fig11", include_str!("../presets/fig11.toml")),
    ("fig14", include_str!("../presets/fig14.toml")),
    ("fig16", include_str!("../presets/fig16.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{origin}:{}: {message}", line.map_or("?".to_string(), |l| l.to_string()))]
    Parse {
        origin: String,
        line: Option<usize>,
        message: String,
    },
    #[error("{origin}: {source}{}", line.map_or(String::new(), |l| format!(" (line {l})")))]
    Invalid {
        origin: String,
        line: Option<usize>,
        source: ConfigError,
    },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{failed} of {total} sweep runs failed; partial results kept")]
    SweepFailed {
        failed: usize,
        total: usize,
        result: Box<SweepResult>,
    },
}

impl ExperimentError {
    /// Bad input as opposed to a failure while running.
    pub fn is_config_error(&self) -> bool {
        match self {
            ExperimentError::Read { .. }
            | ExperimentError::Parse { .. }
            | ExperimentError::Invalid { .. } => true,
            ExperimentError::Sim(SimError::Config(_)) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    FlowRatePps,
    NodesPerGroup,
    NumGroups,
    PacketSizeBytes,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [
        SweepAxis::FlowRatePps,
        SweepAxis::NodesPerGroup,
        SweepAxis::NumGroups,
        SweepAxis::PacketSizeBytes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::FlowRatePps => "flow_rate_pps",
            SweepAxis::NodesPerGroup => "nodes_per_group",
            SweepAxis::NumGroups => "num_groups",
            SweepAxis::PacketSizeBytes => "packet_size_bytes",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn get(self, cfg: &ScenarioConfig) -> f64 {
        match self {
            SweepAxis::FlowRatePps => cfg.flow_rate_pps,
            SweepAxis::NodesPerGroup => f64::from(cfg.nodes_per_group),
            SweepAxis::NumGroups => f64::from(cfg.num_groups),
            SweepAxis::PacketSizeBytes => f64::from(cfg.packet_size_bytes),
        }
    }

    pub fn apply(self, cfg: &mut ScenarioConfig, value: f64) -> Result<(), ConfigError> {
        let integral = || -> Result<u32, ConfigError> {
            if value.fract() == 0.0 && (1.0..=f64::from(u32::MAX)).contains(&value) {
                Ok(value as u32)
            } else {
                Err(ConfigError::Invalid {
                    field: self.name(),
                    reason: format!("expected a positive integer, got {value}"),
                })
            }
        };
        match self {
            SweepAxis::FlowRatePps => cfg.flow_rate_pps = value,
            SweepAxis::NodesPerGroup => cfg.nodes_per_group = integral()?,
            SweepAxis::NumGroups => cfg.num_groups = integral()?,
            SweepAxis::PacketSizeBytes => cfg.packet_size_bytes = integral()?,
        }
        Ok(())
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: ScenarioConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub repetitions: u32,
}

/// One (value, repetition) point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub run_id: String,
    pub value: f64,
    pub repetition: u32,
    pub cfg: ScenarioConfig,
}

/// Seed of repetition `rep` at `value`: FNV-1a 64 over the base seed, the
/// axis name, the value's bit pattern and the repetition, all little-endian.
pub fn derive_seed(base_seed: u64, axis: SweepAxis, value: f64, rep: u32) -> u64 {
    let mut bytes = Vec::with_capacity(32);
    bytes.extend_from_slice(&base_seed.to_le_bytes());
    bytes.extend_from_slice(axis.name().as_bytes());
    bytes.extend_from_slice(&value.to_bits().to_le_bytes());
    bytes.extend_from_slice(&rep.to_le_bytes());
    fnv1a64(&bytes)
}

impl SweepSpec {
    /// Every derived run, ordered by value then repetition.
    pub fn runs(&self) -> Result<Vec<SweepRun>, ConfigError> {
        if self.values.is_empty() {
            return Err(ConfigError::Invalid {
                field: self.axis.name(),
                reason: "sweep needs at least one value".into(),
            });
        }
        if self.repetitions == 0 {
            return Err(ConfigError::Invalid {
                field: "repetitions",
                reason: "must be positive".into(),
            });
        }
        let mut values = self.values.clone();
        values.sort_by(f64::total_cmp);
        let mut runs = Vec::with_capacity(values.len() * self.repetitions as usize);
        for &value in &values {
            for rep in 0..self.repetitions {
                let mut cfg = self.base.clone();
                self.axis.apply(&mut cfg, value)?;
                cfg.seed = derive_seed(self.base.seed, self.axis, value, rep);
                cfg.validate()?;
                runs.push(SweepRun {
                    run_id: format!("{}={}/r{}", self.axis, value, rep),
                    value,
                    repetition: rep,
                    cfg,
                });
            }
        }
        Ok(runs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigFile {
    Scenario(ScenarioConfig),
    Sweep(SweepSpec),
}

impl ConfigFile {
    pub fn base(&self) -> &ScenarioConfig {
        match self {
            ConfigFile::Scenario(cfg) => cfg,
            ConfigFile::Sweep(spec) => &spec.base,
        }
    }

    pub fn base_mut(&mut self) -> &mut ScenarioConfig {
        match self {
            ConfigFile::Scenario(cfg) => cfg,
            ConfigFile::Sweep(spec) => &mut spec.base,
        }
    }

    /// A plain scenario becomes a one-point sweep at its own axis value.
    pub fn into_sweep(self) -> SweepSpec {
        match self {
            ConfigFile::Sweep(spec) => spec,
            ConfigFile::Scenario(cfg) => SweepSpec {
                values: vec![cfg.flow_rate_pps],
                base: cfg,
                axis: SweepAxis::FlowRatePps,
                repetitions: 1,
            },
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ConfigFile, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|source| ExperimentError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, &path.display().to_string())
}

/// Loads a file, or a preset when `name` is not an existing path.
pub fn load(name: &str) -> Result<ConfigFile, ExperimentError> {
    let path = Path::new(name);
    match preset(name) {
        Some(text) if !path.exists() => parse_config_str(text, name),
        _ => parse_config(path),
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line on which top-level `key` is assigned.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        l.trim_start()
            .strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

pub fn parse_config_str(text: &str, origin: &str) -> Result<ConfigFile, ExperimentError> {
    let parse_err = |line, message: String| ExperimentError::Parse {
        origin: origin.to_string(),
        line,
        message,
    };
    let mut table: toml::Table = toml::from_str(text).map_err(|e| {
        parse_err(
            e.span().map(|s| line_of_offset(text, s.start)),
            e.message().to_string(),
        )
    })?;

    let repetitions = match table.remove("repetitions") {
        None => None,
        Some(toml::Value::Integer(n)) if n > 0 && n <= i64::from(u32::MAX) => Some(n as u32),
        Some(other) => {
            return Err(parse_err(
                line_of_key(text, "repetitions"),
                format!("`repetitions` must be a positive integer, got {other}"),
            ))
        }
    };

    let mut sweep: Option<(SweepAxis, Vec<f64>)> = None;
    for axis in SweepAxis::ALL {
        let Some(toml::Value::Array(items)) = table.get(axis.name()) else {
            continue;
        };
        let line = line_of_key(text, axis.name());
        if let Some((first, _)) = &sweep {
            return Err(parse_err(
                line,
                format!("only one swept key allowed, found `{first}` and `{axis}`"),
            ));
        }
        let values = items
            .iter()
            .map(|v| match v {
                toml::Value::Integer(i) => Ok(*i as f64),
                toml::Value::Float(f) => Ok(*f),
                other => Err(parse_err(line, format!("`{axis}` values must be numbers, got {other}"))),
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if values.is_empty() {
            return Err(parse_err(line, format!("`{axis}` sweep has no values")));
        }
        table.remove(axis.name());
        sweep = Some((axis, values));
    }

    // Deserialize key by key so an error can point at its line.
    for (key, value) in &table {
        let single = toml::Table::from_iter([(key.clone(), value.clone())]);
        if let Err(e) = single.try_into::<ScenarioConfig>() {
            return Err(parse_err(line_of_key(text, key), e.message().to_string()));
        }
    }
    let base: ScenarioConfig = table
        .try_into()
        .map_err(|e| parse_err(None, e.message().to_string()))?;

    let invalid = |source: ConfigError| {
        let ConfigError::Invalid { field, .. } = &source;
        ExperimentError::Invalid {
            origin: origin.to_string(),
            line: line_of_key(text, field),
            source,
        }
    };

    match sweep {
        None => {
            if repetitions.is_some() {
                return Err(parse_err(
                    line_of_key(text, "repetitions"),
                    "`repetitions` needs a swept key".into(),
                ));
            }
            base.validate().map_err(invalid)?;
            Ok(ConfigFile::Scenario(base))
        }
        Some((axis, values)) => {
            let spec = SweepSpec {
                base,
                axis,
                values,
                repetitions: repetitions.unwrap_or(1),
            };
            spec.runs().map_err(invalid)?;
            Ok(ConfigFile::Sweep(spec))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub run_id: String,
    pub value: f64,
    pub repetition: u32,
    pub seed: u64,
    pub status: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub axis: SweepAxis,
    pub base_seed: u64,
    pub repetitions: u32,
    pub workers: usize,
    pub completed: usize,
    pub failed: usize,
    pub runs: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub runs: Vec<SweepRun>,
    /// Same order as `runs`.
    pub outcomes: Vec<Result<RunOutput, String>>,
    pub manifest: Manifest,
}

impl SweepResult {
    /// CSV rows of all successful runs, by value, repetition, then group.
    pub fn rows(&self) -> Vec<CsvRow> {
        self.runs
            .iter()
            .zip(&self.outcomes)
            .filter_map(|(run, out)| out.as_ref().ok().map(|o| o.report.csv_rows(&run.run_id)))
            .flatten()
            .collect()
    }

    pub fn reports(&self) -> impl Iterator<Item = (&SweepRun, &MetricsReport)> {
        self.runs
            .iter()
            .zip(&self.outcomes)
            .filter_map(|(run, out)| out.as_ref().ok().map(|o| (run, &o.report)))
    }

    pub fn csv(&self) -> Result<String, MetricsError> {
        metrics::csv_string(&self.rows())
    }

    /// Gnuplot summary averaged over repetitions.
    pub fn summary(&self) -> String {
        let mut points: Vec<(f64, Vec<CsvRow>)> = Vec::new();
        for (run, report) in self.reports() {
            let rows = report.csv_rows(&run.run_id);
            match points.last_mut() {
                Some((v, acc)) if *v == run.value => acc.extend(rows),
                _ => points.push((run.value, rows)),
            }
        }
        let mut out = Vec::new();
        metrics::write_summary(self.spec.axis.name(), &points, &mut out)
            .expect("writing to memory cannot fail");
        String::from_utf8(out).expect("summary is utf-8")
    }

    /// Writes `results.csv`, `summary.dat` and `manifest.toml` into `dir`,
    /// plus `traces/run-NNN.csv` and `states/run-NNN.txt` when collected.
    pub fn write_to(&self, dir: &Path) -> Result<(), ExperimentError> {
        let write = |name: &str, contents: &str| {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(|source| ExperimentError::Write { path, source })
        };
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
        write("results.csv", &self.csv()?)?;
        write("summary.dat", &self.summary())?;
        let manifest = toml::to_string(&self.manifest).expect("manifest serializes");
        write("manifest.toml", &manifest)?;
        for (i, out) in self.outcomes.iter().enumerate() {
            let Ok(out) = out else { continue };
            for (sub, text) in [("traces", &out.trace), ("states", &out.state_dump)] {
                if text.is_empty() {
                    continue;
                }
                let ext = if sub == "traces" { "csv" } else { "txt" };
                let sub_dir = dir.join(sub);
                fs::create_dir_all(&sub_dir).map_err(|source| ExperimentError::Write {
                    path: sub_dir.clone(),
                    source,
                })?;
                let path = sub_dir.join(format!("run-{i:03}.{ext}"));
                fs::write(&path, text).map_err(|source| ExperimentError::Write { path, source })?;
            }
        }
        Ok(())
    }
}

fn run_all(
    runs: &[SweepRun],
    workers: usize,
    opts: RunOptions,
) -> Result<Vec<Result<RunOutput, String>>, ExperimentError> {
    let run_one = |run: &SweepRun| sim::run_with(&run.cfg, opts).map_err(|e| e.to_string());
    if workers <= 1 {
        return Ok(runs.iter().map(run_one).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SimError::Internal(format!("worker pool: {e}")))?;
    // Collecting an indexed parallel iterator keeps input order.
    Ok(pool.install(|| runs.par_iter().map(run_one).collect()))
}

/// Runs every point of `spec` on `workers` threads. Failed runs are kept in
/// the result and reported through [`ExperimentError::SweepFailed`].
pub fn run_sweep(spec: &SweepSpec, workers: usize) -> Result<SweepResult, ExperimentError> {
    run_sweep_with(spec, workers, RunOptions::default())
}

/// [`run_sweep`], keeping each run's trace and state dump as requested.
pub fn run_sweep_with(
    spec: &SweepSpec,
    workers: usize,
    opts: RunOptions,
) -> Result<SweepResult, ExperimentError> {
    let runs = spec.runs().map_err(SimError::Config)?;
    let outcomes = run_all(&runs, workers, opts)?;
    let entries: Vec<ManifestEntry> = runs
        .iter()
        .zip(&outcomes)
        .map(|(run, out)| ManifestEntry {
            run_id: run.run_id.clone(),
            value: run.value,
            repetition: run.repetition,
            seed: run.cfg.seed,
            status: match out {
                Ok(_) => "ok".into(),
                Err(e) => format!("failed: {e}"),
            },
        })
        .collect();
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    let result = SweepResult {
        spec: spec.clone(),
        manifest: Manifest {
            axis: spec.axis,
            base_seed: spec.base.seed,
            repetitions: spec.repetitions,
            workers: workers.max(1),
            completed: runs.len() - failed,
            failed,
            runs: entries,
        },
        runs,
        outcomes,
    };
    if failed > 0 {
        return Err(ExperimentError::SweepFailed {
            failed,
            total: result.runs.len(),
            result: Box::new(result),
        });
    }
    Ok(result)
}

/// Share of generated packets lost to queue overflow above which a point
/// counts as saturated.
pub const SATURATION_LOSS: f64 = 0.01;

/// First swept value whose run lost more than [`SATURATION_LOSS`] of its
/// packets to queue overflow. Points are taken in the given order.
pub fn saturation_knee<'a>(points: impl IntoIterator<Item = (f64, &'a MetricsReport)>) -> Option<f64> {
    points
        .into_iter()
        .find(|(_, r)| r.totals.queue_loss_ratio() > SATURATION_LOSS)
        .map(|(v, _)| v)
}

/// Largest per-sender rate in `[lo, hi]` that stays below the saturation
/// threshold, found by bisection to within `tol` packets per second.
pub fn max_sustainable_rate(
    base: &ScenarioConfig,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64, SimError> {
    let sustainable = |rate: f64| -> Result<bool, SimError> {
        let cfg = ScenarioConfig {
            flow_rate_pps: rate,
            ..base.clone()
        };
        Ok(sim::run(&cfg)?.totals.queue_loss_ratio() <= SATURATION_LOSS)
    };
    if !sustainable(lo)? {
        return Ok(lo);
    }
    if sustainable(hi)? {
        return Ok(hi);
    }
    let (mut good, mut bad) = (lo, hi);
    while bad - good > tol {
        let mid = (good + bad) / 2.0;
        if sustainable(mid)? {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(good)
}
