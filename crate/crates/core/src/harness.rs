//! Ablation and λ-sweep runners. Every cell is an independent seeded run,
//! so cells execute in parallel without changing any result.

use std::fmt::Write as _;

use crate::losses::Variant;
use crate::par::{map_indexed, Exec};
use crate::trainer::{metrics_to_csv, ConfigError, TrainConfig, TrainError, Trainer};

/// A named change to a base config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Tcl,
    /// Gate forced shut: no target cross-entropy, banks still get pseudo-labels.
    WithoutTar,
    /// λ = 0.
    WithoutTcl,
    Idl,
    Icdl,
    /// Source cross-entropy only.
    SourceOnly,
    SourceCombine,
}

impl Cell {
    pub const ABLATION: [Cell; 5] = [Cell::Tcl, Cell::WithoutTar, Cell::WithoutTcl, Cell::Idl, Cell::Icdl];
    pub const ALL: [Cell; 7] = [
        Cell::Tcl,
        Cell::WithoutTar,
        Cell::WithoutTcl,
        Cell::Idl,
        Cell::Icdl,
        Cell::SourceOnly,
        Cell::SourceCombine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Cell::Tcl => "tcl",
            Cell::WithoutTar => "wo-tar",
            Cell::WithoutTcl => "wo-tcl",
            Cell::Idl => "idl",
            Cell::Icdl => "icdl",
            Cell::SourceOnly => "source-only",
            Cell::SourceCombine => "tcl-source-combine",
        }
    }

    pub fn parse(s: &str) -> Option<Cell> {
        Cell::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s))
    }

    /// `base` with this cell's change and `seed`.
    pub fn config(self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut c = base.clone();
        c.seed = seed;
        match self {
            Cell::Tcl => c.variant = Variant::Tcl,
            Cell::WithoutTar => {
                c.variant = Variant::Tcl;
                c.target_loss = false;
            }
            Cell::WithoutTcl => {
                c.variant = Variant::Tcl;
                c.lambda = 0.0;
            }
            Cell::Idl => c.variant = Variant::Idl,
            Cell::Icdl => c.variant = Variant::Icdl,
            Cell::SourceOnly => {
                c.variant = Variant::None;
                c.target_loss = false;
            }
            Cell::SourceCombine => c.variant = Variant::TclSourceCombine,
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub accuracy: f64,
    pub metrics_csv: String,
}

/// Trains one config on freshly generated data.
pub fn run_one(config: &TrainConfig) -> Result<(f64, String), TrainError> {
    let mut t = Trainer::new(config.clone(), crate::trainer::generate_data(config))?;
    let summary = t.run()?;
    Ok((summary.final_accuracy, metrics_to_csv(&summary.metrics)))
}

fn run_labelled(jobs: Vec<(String, TrainConfig)>, exec: Exec) -> Result<Vec<RunResult>, TrainError> {
    map_indexed(jobs.len(), exec, |i| {
        let (label, cfg) = &jobs[i];
        run_one(cfg).map(|(accuracy, metrics_csv)| RunResult {
            label: label.clone(),
            seed: cfg.seed,
            accuracy,
            metrics_csv,
        })
    })
    .into_iter()
    .collect()
}

/// Runs `cells × seeds`, cell-major.
pub fn run_cells(base: &TrainConfig, cells: &[Cell], seeds: &[u64], exec: Exec) -> Result<Vec<RunResult>, TrainError> {
    let mut jobs = Vec::new();
    for &cell in cells {
        for &seed in seeds {
            let cfg = cell.config(base, seed);
            cfg.validate()?;
            jobs.push((cell.name().to_string(), cfg));
        }
    }
    run_labelled(jobs, exec)
}

/// λ ∈ {0, 0.1, …, 1.0}, built as `i / 10` so the grid is exact and sorted.
pub fn lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Runs `grid × seeds` with the TCL variant, λ-major.
pub fn run_sweep(base: &TrainConfig, grid: &[f64], seeds: &[u64], exec: Exec) -> Result<Vec<RunResult>, TrainError> {
    let mut jobs = Vec::new();
    for &lambda in grid {
        for &seed in seeds {
            let mut cfg = Cell::Tcl.config(base, seed);
            cfg.lambda = lambda;
            cfg.validate().map_err(TrainError::Config)?;
            jobs.push((lambda.to_string(), cfg));
        }
    }
    run_labelled(jobs, exec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub label: String,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single run.
    pub std: f64,
    pub runs: usize,
}

/// Mean and spread per label, in first-appearance order.
pub fn summarize(results: &[RunResult]) -> Vec<CellSummary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let acc: Vec<f64> = results.iter().filter(|r| r.label == label).map(|r| r.accuracy).collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            CellSummary { label: label.to_string(), mean, std, runs: acc.len() }
        })
        .collect()
}

/// Run rows followed by one summary row per cell.
pub fn ablation_csv(results: &[RunResult]) -> String {
    let mut out = String::from("row,cell,seed,accuracy,std\n");
    for r in results {
        let _ = writeln!(out, "run,{},{},{},", r.label, r.seed, r.accuracy);
    }
    for s in summarize(results) {
        let _ = writeln!(out, "summary,{},,{},{}", s.label, s.mean, s.std);
    }
    out
}

pub fn sweep_csv(results: &[RunResult]) -> String {
    let mut out = String::from("lambda,seed,accuracy\n");
    for r in results {
        let _ = writeln!(out, "{},{},{}", r.label, r.seed, r.accuracy);
    }
    out
}

/// Seeds `0..n`.
pub fn seeds(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, ConfigError> {
    s.split(',')
        .map(|p| {
            p.trim().parse().map_err(|_| ConfigError::Invalid {
                key: "seeds".into(),
                value: s.to_string(),
                reason: "expected comma-separated integers".into(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_change_only_their_knob() {
        let base = TrainConfig::defaults(crate::synthdata::Suite::Blobs3);
        let wo_tcl = Cell::WithoutTcl.config(&base, 7);
        assert_eq!(wo_tcl.lambda, 0.0);
        assert_eq!(wo_tcl.seed, 7);
        assert_eq!(TrainConfig { lambda: base.lambda, seed: base.seed, ..wo_tcl }, base);
        let wo_tar = Cell::WithoutTar.config(&base, 0);
        assert!(!wo_tar.target_loss);
        assert_eq!(wo_tar.lambda, base.lambda);
    }

    #[test]
    fn grid_is_exact_and_sorted() {
        let g = lambda_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[3], 0.3);
        assert_eq!(g[10], 1.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn summary_statistics() {
        let r = |label: &str, accuracy| RunResult { label: label.into(), seed: 0, accuracy, metrics_csv: String::new() };
        let s = summarize(&[r("a", 0.5), r("b", 1.0), r("a", 0.7)]);
        assert_eq!(s[0].label, "a");
        assert!((s[0].mean - 0.6).abs() < 1e-15);
        assert!((s[0].std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].std, 0.0);
        let csv = ablation_csv(&[r("a", 0.5), r("a", 0.7)]);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(3).unwrap().starts_with("summary,a,,"));
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("3, 1,2").unwrap(), vec![3, 1, 2]);
        assert!(parse_seeds("1,x").is_err());
        assert_eq!(seeds(3), vec![0, 1, 2]);
    }
}
