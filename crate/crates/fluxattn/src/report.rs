//! CSV and JSON writers plus the row types of every table the CLI emits.

use std::path::Path;

use serde::Serialize;

use fluxattn_core::pipeline::HeadOutcome;
use fluxattn_core::schedule::{ScheduleReport, TaskRecord};

use crate::error::IoResult;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> IoResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> IoResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    }
}

/// `heads.csv`: one line per head per decode step.
#[derive(Debug, Clone, Serialize)]
pub struct HeadRow {
    pub config: String,
    pub sample: usize,
    pub layer: usize,
    pub group: usize,
    pub head: usize,
    pub step: usize,
    pub archetype: &'static str,
    pub bypassed: bool,
    pub blk: usize,
    pub budget: f64,
    pub realized: f64,
    pub deviation: f64,
}

pub fn archetype_name(a: fluxattn_core::workload::Archetype) -> &'static str {
    use fluxattn_core::workload::Archetype::*;
    match a {
        Streaming => "streaming",
        Retrieval => "retrieval",
        Diffuse => "diffuse",
    }
}

impl HeadRow {
    pub fn new(config: &str, h: &HeadOutcome) -> Self {
        Self {
            config: config.to_string(),
            sample: h.sample,
            layer: h.layer,
            group: h.group,
            head: h.head,
            step: h.step,
            archetype: archetype_name(h.archetype),
            bypassed: h.bypassed,
            blk: h.blk,
            budget: h.budget,
            realized: h.realized,
            deviation: h.deviation,
        }
    }
}

/// Deviation and budget summary of one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationSummary {
    pub heads: usize,
    pub mean_deviation: f64,
    pub p90_deviation: f64,
    pub max_deviation: f64,
    /// Fraction of heads with deviation ≤ τ.
    pub within_tau: f64,
    /// `1 − within_tau`.
    pub delta: f64,
    pub mean_budget: f64,
    pub mean_realized: f64,
    pub bypassed: f64,
}

impl DeviationSummary {
    pub fn of(heads: &[HeadOutcome], tau: f64) -> Self {
        let n = heads.len();
        let nf = n.max(1) as f64;
        let mut devs: Vec<f64> = heads.iter().map(|h| h.deviation).collect();
        devs.sort_by(f64::total_cmp);
        let within = heads.iter().filter(|h| h.deviation <= tau).count() as f64 / nf;
        let p90 = if n == 0 {
            0.0
        } else {
            devs[((0.9 * n as f64).ceil() as usize).clamp(1, n) - 1]
        };
        Self {
            heads: n,
            mean_deviation: devs.iter().sum::<f64>() / nf,
            p90_deviation: p90,
            max_deviation: devs.last().copied().unwrap_or(0.0),
            within_tau: if n == 0 { 1.0 } else { within },
            delta: if n == 0 { 0.0 } else { 1.0 - within },
            mean_budget: heads.iter().map(|h| h.budget).sum::<f64>() / nf,
            mean_realized: heads.iter().map(|h| h.realized).sum::<f64>() / nf,
            bypassed: heads.iter().filter(|h| h.bypassed).count() as f64 / nf,
        }
    }
}

/// `events.csv`: one line per executed or simulated task.
#[derive(Debug, Clone, Serialize)]
pub struct EventRow {
    pub layer: usize,
    pub step: usize,
    pub task: u64,
    pub worker: usize,
    pub start: f64,
    pub end: f64,
}

pub fn event_rows(layer: usize, step: usize, report: &ScheduleReport) -> Vec<EventRow> {
    report
        .records
        .iter()
        .map(|r: &TaskRecord| EventRow {
            layer,
            step,
            task: r.group,
            worker: r.worker,
            start: r.start,
            end: r.end,
        })
        .collect()
}
