//! Metrics rows and their CSV form.

use std::fmt::Write as _;

use thiserror::Error;

pub const METRICS_HEADER: &str = "epoch,step,l_src,l_tar,l_tcl,total,gated_fraction,pl_acc,tgt_acc,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    pub l_src: f64,
    pub l_tar: f64,
    pub l_tcl: f64,
    pub total: f64,
    pub gated_fraction: f64,
    /// Classifier pseudo-label accuracy on target batches, against ground truth.
    pub pl_acc: f64,
    /// Most recent evaluation accuracy on the target domain.
    pub tgt_acc: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("bad metrics header")]
    Header,
    #[error("line {line}: {reason}")]
    Row { line: usize, reason: String },
}

/// Floats use the shortest representation that parses back to the same bits.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.l_src, r.l_tar, r.l_tcl, r.total, r.gated_fraction, r.pl_acc, r.tgt_acc, r.wall_ms
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(MetricsError::Header);
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 2;
            let err = |reason: String| MetricsError::Row { line: line_no, reason };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(err(format!("{} fields", f.len())));
            }
            let float = |j: usize| f[j].parse::<f64>().map_err(|e| err(e.to_string()));
            Ok(MetricsRow {
                epoch: f[0].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                step: f[1].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                l_src: float(2)?,
                l_tar: float(3)?,
                l_tcl: float(4)?,
                total: float(5)?,
                gated_fraction: float(6)?,
                pl_acc: float(7)?,
                tgt_acc: float(8)?,
                wall_ms: f[9].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
            })
        })
        .collect()
}

/// The last row of every epoch (the epoch summary), in epoch order.
pub fn epoch_rows(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut out: Vec<MetricsRow> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(last) if last.epoch == r.epoch => *last = *r,
            _ => out.push(*r),
        }
    }
    out
}

/// Running sums over a logging window.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Window {
    steps: usize,
    l_src: f64,
    l_tar: f64,
    l_tcl: f64,
    total: f64,
    gated: usize,
    targets: usize,
    pl_correct: usize,
}

impl Window {
    pub(crate) fn add(&mut self, report: &crate::losses::LossReport, pl_correct: usize) {
        self.steps += 1;
        self.l_src += report.l_src;
        self.l_tar += report.l_tar;
        self.l_tcl += report.l_tcl;
        self.total += report.total;
        self.gated += report.gated_count;
        self.targets += report.target_count;
        self.pl_correct += pl_correct;
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub(crate) fn row(&self, epoch: usize, step: u64, tgt_acc: f64, wall_ms: u64) -> MetricsRow {
        let n = self.steps.max(1) as f64;
        let t = self.targets.max(1) as f64;
        MetricsRow {
            epoch,
            step,
            l_src: self.l_src / n,
            l_tar: self.l_tar / n,
            l_tcl: self.l_tcl / n,
            total: self.total / n,
            gated_fraction: self.gated as f64 / t,
            pl_acc: self.pl_correct as f64 / t,
            tgt_acc,
            wall_ms,
        }
    }
}
