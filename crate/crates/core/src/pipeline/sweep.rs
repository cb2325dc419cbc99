//! Grid runs over configuration overrides.

use std::fmt::Write as _;
use std::path::Path;

use super::config::PipelineConfig;
use super::train::train;
use crate::error::{Error, Result};
use crate::eval::ClusterReport;
use crate::scalar::Scalar;

/// One grid point: its overrides and the resulting report.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub overrides: Vec<String>,
    pub report: ClusterReport,
}

/// Parses a grid file: one run per line, whitespace-separated `key=value`
/// overrides, `#` comments.
pub fn parse_grid(text: &str) -> Result<Vec<Vec<String>>> {
    let mut runs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let overrides: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if let Some(bad) = overrides.iter().find(|o| !o.contains('=')) {
            return Err(Error::parse(format!("grid line {}", n + 1), format!("{bad:?} is not key=value")));
        }
        runs.push(overrides);
    }
    if runs.is_empty() {
        return Err(Error::InvalidInput("grid has no runs".into()));
    }
    Ok(runs)
}

/// The configuration of every grid point, each writing under
/// `<out_dir>/sweep_<i>`. All points are checked before anything runs.
pub fn grid_configs(base: &PipelineConfig, grid: &[Vec<String>]) -> Result<Vec<PipelineConfig>> {
    grid.iter()
        .enumerate()
        .map(|(i, overrides)| {
            let mut cfg = base.clone();
            cfg.apply_overrides(overrides)?;
            cfg.run.out_dir = base.run.out_dir.join(format!("sweep_{i}"));
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Trains and evaluates every grid point. Runs write their outputs only when
/// `write_outputs` is set.
pub fn sweep<T: Scalar>(base: &PipelineConfig, grid: &[Vec<String>], write_outputs: bool) -> Result<Vec<SweepRow>> {
    let configs = grid_configs(base, grid)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (cfg, overrides) in configs.iter().zip(grid) {
        log::info!("sweep point: {}", overrides.join(" "));
        let out: Option<&Path> = write_outputs.then_some(cfg.run.out_dir.as_path());
        let outcome = train::<T>(cfg, out)?;
        rows.push(SweepRow {
            overrides: overrides.clone(),
            report: outcome.report,
        });
    }
    Ok(rows)
}

/// Plain-text table, one row per grid point, accuracies in percent.
pub fn format_table(rows: &[SweepRow]) -> String {
    let labels: Vec<String> = rows.iter().map(|r| r.overrides.join(" ")).collect();
    let width = labels.iter().map(String::len).max().unwrap_or(0).max("config".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}", "config", "All", "Old", "New");
    for (label, row) in labels.iter().zip(rows) {
        let r = &row.report;
        let _ = writeln!(
            out,
            "{label:<width$}  {:>6.1}  {:>6.1}  {:>6.1}",
            100.0 * r.acc_all,
            100.0 * r.acc_old,
            100.0 * r.acc_new
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("# k sweep\nclusterer.k_max=5\n\nclusterer.k_max=10 loss.lambda_u=0.5 # wide\n").unwrap();
        assert_eq!(g, vec![vec!["clusterer.k_max=5"], vec!["clusterer.k_max=10", "loss.lambda_u=0.5"]]);
        assert!(matches!(parse_grid("clusterer.k_max"), Err(Error::Parse { .. })));
        assert!(matches!(parse_grid("# nothing\n"), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bad_key_fails_before_any_run() {
        let grid = vec![vec!["clusterer.k_max=5".to_string()], vec!["clusterer.kmax=5".to_string()]];
        let err = grid_configs(&PipelineConfig::default(), &grid).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn table_has_one_row_per_point() {
        let report = ClusterReport {
            k: 10,
            acc_all: 0.834,
            acc_old: 0.5,
            acc_new: 1.0,
            n_old: 1,
            n_new: 1,
            assignments: Vec::new(),
            matching: Default::default(),
        };
        let rows: Vec<SweepRow> = [5, 10, 20]
            .iter()
            .map(|k| SweepRow {
                overrides: vec![format!("clusterer.k_max={k}")],
                report: report.clone(),
            })
            .collect();
        let t = format_table(&rows);
        assert_eq!(t.lines().count(), 4);
        assert!(t.lines().nth(1).unwrap().contains("83.4"));
    }
}
