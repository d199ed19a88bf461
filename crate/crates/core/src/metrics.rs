//! Per-group delay, jitter and loss, and the CSV they are reported in.
//!
//! Jitter is the mean absolute difference between the delays of
//! consecutive received packets of a group. Lost packets only count
//! towards `tx`.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ContextId;
use crate::sim::channel::{ns_to_secs, secs_to_ns};
use crate::sim::ScenarioConfig;

pub const CSV_HEADER: &str = "run_id,flow_rate_pps,num_groups,nodes_per_group,packet_size,group,mean_delay_s,mean_jitter_s,loss_ratio,tx,rx,seed";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("negative or non-finite delay {0} s")]
    NegativeDelay(f64),
    #[error("metric undefined: no packets transmitted")]
    Undefined,
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupStats {
    pub group: ContextId,
    pub tx_count: u64,
    pub rx_count: u64,
    pub lost_queue: u64,
    pub lost_channel: u64,
    delay_sum_ns: u128,
    jitter_sum_ns: u128,
    last_delay_ns: Option<u64>,
}

impl GroupStats {
    pub fn new(group: ContextId) -> Self {
        Self {
            group,
            tx_count: 0,
            rx_count: 0,
            lost_queue: 0,
            lost_channel: 0,
            delay_sum_ns: 0,
            jitter_sum_ns: 0,
            last_delay_ns: None,
        }
    }

    pub fn record_tx(&mut self) {
        self.tx_count += 1;
    }

    pub fn record_rx(&mut self, delay_s: f64) -> Result<(), MetricsError> {
        if !delay_s.is_finite() || delay_s < 0.0 {
            return Err(MetricsError::NegativeDelay(delay_s));
        }
        self.record_rx_ns(secs_to_ns(delay_s));
        Ok(())
    }

    pub fn record_rx_ns(&mut self, delay_ns: u64) {
        self.rx_count += 1;
        self.delay_sum_ns += u128::from(delay_ns);
        if let Some(prev) = self.last_delay_ns {
            self.jitter_sum_ns += u128::from(delay_ns.abs_diff(prev));
        }
        self.last_delay_ns = Some(delay_ns);
    }

    pub fn delay_sum_s(&self) -> f64 {
        self.delay_sum_ns as f64 / 1e9
    }

    pub fn jitter_sum_s(&self) -> f64 {
        self.jitter_sum_ns as f64 / 1e9
    }

    pub fn mean_delay_s(&self) -> Option<f64> {
        (self.rx_count > 0).then(|| self.delay_sum_ns as f64 / self.rx_count as f64 / 1e9)
    }

    /// Zero when fewer than two packets arrived.
    pub fn mean_jitter_s(&self) -> f64 {
        if self.rx_count < 2 {
            0.0
        } else {
            self.jitter_sum_ns as f64 / (self.rx_count - 1) as f64 / 1e9
        }
    }

    pub fn loss_ratio(&self) -> Result<f64, MetricsError> {
        if self.tx_count == 0 {
            return Err(MetricsError::Undefined);
        }
        Ok((self.tx_count - self.rx_count) as f64 / self.tx_count as f64)
    }
}

pub fn loss_ratio(stats: &GroupStats) -> Result<f64, MetricsError> {
    stats.loss_ratio()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// 1-based group number.
    pub group: u32,
    pub context_id: ContextId,
    pub members: u32,
    pub tx: u64,
    pub rx: u64,
    pub lost_queue: u64,
    pub lost_channel: u64,
    pub mean_delay_s: Option<f64>,
    pub mean_jitter_s: f64,
    pub loss_ratio: Option<f64>,
}

impl GroupReport {
    pub fn from_stats(group: u32, members: u32, stats: &GroupStats) -> Self {
        Self {
            group,
            context_id: stats.group,
            members,
            tx: stats.tx_count,
            rx: stats.rx_count,
            lost_queue: stats.lost_queue,
            lost_channel: stats.lost_channel,
            mean_delay_s: stats.mean_delay_s(),
            mean_jitter_s: stats.mean_jitter_s(),
            loss_ratio: stats.loss_ratio().ok(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub generated: u64,
    pub received: u64,
    pub lost_queue: u64,
    pub lost_channel: u64,
    pub in_flight: u64,
}

impl Totals {
    pub fn queue_loss_ratio(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            self.lost_queue as f64 / self.generated as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinSummary {
    pub contexts: u32,
    pub formed_new: u32,
    pub joined_existing: u32,
    pub max_overlay_hops: u32,
    pub completed_at_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config: ScenarioConfig,
    pub groups: Vec<GroupReport>,
    pub totals: Totals,
    pub join: JoinSummary,
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub flow_rate_pps: f64,
    pub num_groups: u32,
    pub nodes_per_group: u32,
    pub packet_size: u32,
    pub group: u32,
    pub mean_delay_s: Option<f64>,
    pub mean_jitter_s: f64,
    pub loss_ratio: Option<f64>,
    pub tx: u64,
    pub rx: u64,
    pub seed: u64,
}

impl MetricsReport {
    pub fn csv_rows(&self, run_id: &str) -> Vec<CsvRow> {
        self.groups
            .iter()
            .map(|g| CsvRow {
                run_id: run_id.to_string(),
                flow_rate_pps: self.config.flow_rate_pps,
                num_groups: self.config.num_groups,
                nodes_per_group: self.config.nodes_per_group,
                packet_size: self.config.packet_size_bytes,
                group: g.group,
                mean_delay_s: g.mean_delay_s,
                mean_jitter_s: g.mean_jitter_s,
                loss_ratio: g.loss_ratio,
                tx: g.tx,
                rx: g.rx,
                seed: self.seed,
            })
            .collect()
    }

    pub fn group(&self, n: u32) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == n)
    }
}

pub fn write_csv<W: Write>(rows: &[CsvRow], out: W) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<Result<Vec<CsvRow>, _>>()?;
    Ok(rows)
}

pub fn csv_string(rows: &[CsvRow]) -> Result<String, MetricsError> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Writes one row per group of `report` to `path`.
pub fn emit(report: &MetricsReport, run_id: &str, path: &Path) -> Result<(), MetricsError> {
    let file = File::create(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv(&report.csv_rows(run_id), file)
}

/// Gnuplot data file: one block per group (select with `index`), each line
/// `value mean_delay_s mean_jitter_s loss_ratio`, averaged over repetitions.
pub fn write_summary<W: Write>(
    axis: &str,
    points: &[(f64, Vec<CsvRow>)],
    mut out: W,
) -> io::Result<()> {
    let mut groups: Vec<u32> = points
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.group))
        .collect();
    groups.sort_unstable();
    groups.dedup();
    writeln!(out, "# {axis} mean_delay_s mean_jitter_s loss_ratio")?;
    for (i, g) in groups.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
            writeln!(out)?;
        }
        writeln!(out, "# group {g}")?;
        for (value, rows) in points {
            let rows: Vec<&CsvRow> = rows.iter().filter(|r| r.group == *g).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let mean = |f: &dyn Fn(&CsvRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            writeln!(
                out,
                "{} {} {} {}",
                value,
                mean(&|r| r.mean_delay_s.unwrap_or(f64::NAN)),
                mean(&|r| r.mean_jitter_s),
                mean(&|r| r.loss_ratio.unwrap_or(f64::NAN)),
            )?;
        }
    }
    Ok(())
}

/// Delay in seconds from simulation nanoseconds.
pub fn delay_s(ns: u64) -> f64 {
    ns_to_secs(ns)
}
