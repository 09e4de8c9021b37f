use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pmts_core::train::mean_std;

use super::common::{self, RunMetrics};
use crate::config;
use crate::error::{CliError, Result};

const TRACE_HEADER: [&str; 6] = ["epoch", "loss_mean", "sigma_z_norm", "lr", "seed", "arm"];

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `metrics.json` files or trace CSVs; all of one kind.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss_mean: f64,
    pub sigma_z_norm: f64,
    pub lr: f64,
    pub seed: u64,
    pub arm: String,
}

#[derive(Debug)]
pub enum Input {
    Metrics(RunMetrics),
    Trace(Vec<TraceRow>),
}

pub fn read_input(path: &Path) -> Result<Input> {
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(Input::Metrics(config::read_json(path)?)),
        Some("csv") => {
            let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
            let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
            if header.iter().ne(TRACE_HEADER) {
                return Err(bad(format!("not a trace CSV (header {:?})", header.iter().collect::<Vec<_>>())));
            }
            let rows = r
                .deserialize()
                .collect::<csv::Result<Vec<TraceRow>>>()
                .map_err(|e| bad(e.to_string()))?;
            Ok(Input::Trace(rows))
        }
        _ => Err(bad("expected a .json metrics file or a .csv trace".into())),
    }
}

#[derive(Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub label: String,
    pub split: String,
    pub runs: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mape_mean: Option<f64>,
    pub mape_std: Option<f64>,
    pub smape_mean: f64,
    pub smape_std: f64,
}

/// Mean ± sample std per (label, split), in order of first appearance.
pub fn aggregate_metrics(runs: &[RunMetrics]) -> Vec<MetricsRow> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in runs {
        let k = (r.label.as_str(), r.split.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(label, split)| {
            let g: Vec<_> = runs.iter().filter(|r| r.label == label && r.split == split).map(|r| &r.metrics).collect();
            let stat = |v: Vec<f64>| mean_std(&v);
            let (mae_mean, mae_std) = stat(g.iter().map(|m| m.mae).collect());
            let (rmse_mean, rmse_std) = stat(g.iter().map(|m| m.rmse).collect());
            let (smape_mean, smape_std) = stat(g.iter().map(|m| m.smape).collect());
            let mapes: Vec<f64> = g.iter().filter_map(|m| m.mape).collect();
            let (mape_mean, mape_std) = if mapes.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&mapes);
                (Some(m), Some(s))
            };
            MetricsRow {
                label: label.into(),
                split: split.into(),
                runs: g.len(),
                mae_mean,
                mae_std,
                rmse_mean,
                rmse_std,
                mape_mean,
                mape_std,
                smape_mean,
                smape_std,
            }
        })
        .collect()
}

#[derive(Debug, PartialEq, Serialize)]
pub struct PlotRow {
    pub arm: String,
    pub epoch: usize,
    pub runs: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub sigma_mean: f64,
    pub sigma_std: f64,
}

/// One series per arm: mean ± std over every run (file × seed) at each epoch.
pub fn aggregate_traces(files: &[Vec<TraceRow>]) -> Vec<PlotRow> {
    let mut arms: Vec<&str> = Vec::new();
    for r in files.iter().flatten() {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    let mut out = Vec::new();
    for arm in arms {
        let mut epochs: Vec<usize> = files.iter().flatten().filter(|r| r.arm == arm).map(|r| r.epoch).collect();
        epochs.sort_unstable();
        epochs.dedup();
        for epoch in epochs {
            let rows: Vec<&TraceRow> = files.iter().flatten().filter(|r| r.arm == arm && r.epoch == epoch).collect();
            let (loss_mean, loss_std) = mean_std(&rows.iter().map(|r| r.loss_mean).collect::<Vec<_>>());
            let (sigma_mean, sigma_std) = mean_std(&rows.iter().map(|r| r.sigma_z_norm).collect::<Vec<_>>());
            out.push(PlotRow {
                arm: arm.into(),
                epoch,
                runs: rows.len(),
                loss_mean,
                loss_std,
                sigma_mean,
                sigma_std,
            });
        }
    }
    out
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(common::create_file(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn run(args: &ReportArgs) -> Result<()> {
    let inputs = args.inputs.par_iter().map(|p| read_input(p)).collect::<Result<Vec<_>>>()?;
    let mut metrics = Vec::new();
    let mut traces = Vec::new();
    for i in inputs {
        match i {
            Input::Metrics(m) => metrics.push(m),
            Input::Trace(t) => traces.push(t),
        }
    }
    if !metrics.is_empty() && !traces.is_empty() {
        return Err(CliError::Data("cannot mix metrics files and trace CSVs in one report".into()));
    }
    common::create_dir(&args.out)?;
    if metrics.is_empty() {
        let rows = aggregate_traces(&traces);
        write_rows(&args.out.join("plot.csv"), &rows)?;
        println!("{} plot rows from {} trace files", rows.len(), traces.len());
    } else {
        let rows = aggregate_metrics(&metrics);
        write_rows(&args.out.join("summary.csv"), &rows)?;
        for r in &rows {
            println!(
                "{:<28} {:<5} n={} MAE {:.4} ± {:.4}  RMSE {:.4} ± {:.4}  SMAPE {:.3} ± {:.3}",
                r.label, r.split, r.runs, r.mae_mean, r.mae_std, r.rmse_mean, r.rmse_std, r.smape_mean, r.smape_std
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmts_core::train::metrics;

    fn run_metrics(label: &str, mae_shift: f64) -> RunMetrics {
        RunMetrics {
            label: label.into(),
            seed: 0,
            split: "test".into(),
            metrics: metrics(&[1.0, 0.5], &[1.0 - mae_shift, 0.5]).unwrap(),
        }
    }

    #[test]
    fn identical_runs_have_zero_spread() {
        let runs = vec![run_metrics("a", 0.2); 5];
        let rows = aggregate_metrics(&runs);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].runs, 5);
        assert_eq!(rows[0].mae_std, 0.0);
        assert_eq!(rows[0].mae_mean, runs[0].metrics.mae);
    }

    #[test]
    fn single_run_is_its_own_mean() {
        let rows = aggregate_metrics(&[run_metrics("a", 0.4)]);
        assert_eq!((rows[0].mae_mean, rows[0].mae_std), (0.2, 0.0));
    }

    #[test]
    fn two_arms_give_two_series() {
        let row = |arm: &str, epoch, seed| TraceRow {
            epoch,
            loss_mean: epoch as f64 + seed as f64,
            sigma_z_norm: 0.0,
            lr: 1e-3,
            seed,
            arm: arm.into(),
        };
        let files = vec![
            vec![row("a", 0, 0), row("a", 1, 0), row("b", 0, 0), row("b", 1, 0)],
            vec![row("a", 0, 1), row("a", 1, 1)],
        ];
        let plot = aggregate_traces(&files);
        assert_eq!(plot.len(), 4);
        assert_eq!(plot[0].arm, "a");
        assert_eq!(plot[0].runs, 2);
        assert_eq!(plot[0].loss_mean, 0.5);
        assert_eq!(plot[2].arm, "b");
        assert_eq!(plot[2].runs, 1);
    }
}
