use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use pmts_core::train::{variance_law_mc, write_variance_csv, Coupling, VarianceLawParams, VarianceLawReport};

use super::common;
use crate::config::{self, set};
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CouplingArg {
    Shared,
    Independent,
}

#[derive(Debug, Args)]
pub struct VarianceArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub sigma_z: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub sigma_phi: Option<Vec<f64>>,
    #[arg(long)]
    pub sigma_y: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_enum)]
    pub coupling: Option<CouplingArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceRun {
    pub sigma_z: Vec<f64>,
    pub sigma_phi: Vec<f64>,
    pub seed: Option<u64>,
    /// Everything but `sigma_z`, `sigma_phi` and `seed`, which the grid sets.
    pub params: VarianceLawParams,
}

impl Default for VarianceRun {
    fn default() -> Self {
        Self {
            sigma_z: vec![0.5, 1.0, 2.0],
            sigma_phi: vec![0.0, 0.5, 1.0],
            seed: None,
            params: VarianceLawParams::default(),
        }
    }
}

impl VarianceRun {
    pub fn resolve(args: &VarianceArgs) -> Result<Self> {
        let mut run: VarianceRun = config::load(args.config.as_deref())?;
        set(&mut run.sigma_z, args.sigma_z.clone());
        set(&mut run.sigma_phi, args.sigma_phi.clone());
        let p = &mut run.params;
        set(&mut p.sigma_y, args.sigma_y);
        set(&mut p.d, args.d);
        set(&mut p.batch, args.batch);
        set(&mut p.lr, args.lr);
        set(&mut p.trials, args.trials);
        set(
            &mut p.coupling,
            args.coupling.map(|c| match c {
                CouplingArg::Shared => Coupling::Shared,
                CouplingArg::Independent => Coupling::Independent,
            }),
        );
        let seed = config::resolve_seed(args.seed, run.seed)?;
        run.seed = Some(seed);
        run.params.seed = seed;
        if run.sigma_z.is_empty() || run.sigma_phi.is_empty() {
            return Err(CliError::usage("the σ grids must not be empty"));
        }
        for p in run.grid() {
            p.validate()?;
        }
        Ok(run)
    }

    /// Row-major over `sigma_z`, then `sigma_phi`; each cell gets its own
    /// derived seed.
    pub fn grid(&self) -> Vec<VarianceLawParams> {
        let mut out = Vec::new();
        for &sigma_z in &self.sigma_z {
            for &sigma_phi in &self.sigma_phi {
                out.push(VarianceLawParams {
                    sigma_z,
                    sigma_phi,
                    seed: self.params.seed.wrapping_mul(1_000_003).wrapping_add(out.len() as u64),
                    ..self.params
                });
            }
        }
        out
    }
}

/// Which `φ = 0` prefactor the grid supports, from the cells with `φ = 0`.
pub fn prefactor_verdict(reports: &[VarianceLawReport]) -> Option<&'static str> {
    let zero: Vec<_> = reports.iter().filter(|r| r.params.sigma_phi == 0.0).collect();
    let first = zero.first()?.zero_prefactor_verdict();
    zero.iter().all(|r| r.zero_prefactor_verdict() == first).then_some(first)
}

#[derive(Serialize)]
struct Summary<'a> {
    prefactor_verdict: Option<&'static str>,
    reports: &'a [VarianceLawReport],
}

pub fn run(args: &VarianceArgs) -> Result<()> {
    let run = VarianceRun::resolve(args)?;
    let reports = run
        .grid()
        .iter()
        .map(variance_law_mc)
        .collect::<pmts_core::Result<Vec<_>>>()?;
    common::create_dir(&args.out)?;
    write_variance_csv(common::create_file(&args.out.join("variance.csv"))?, &reports)?;
    let verdict = prefactor_verdict(&reports);
    config::write_json(
        &args.out.join("variance.json"),
        &Summary {
            prefactor_verdict: verdict,
            reports: &reports,
        },
    )?;
    config::write_json(&args.out.join("config.json"), &run)?;

    println!("sigma_z sigma_phi    measured  product-rule   rel.err       exact   rel.err");
    for r in &reports {
        println!(
            "{:>7} {:>9} {:>11.4e} {:>13.4e} {:>8.2}% {:>11.4e} {:>8.2}%",
            r.params.sigma_z,
            r.params.sigma_phi,
            r.measured,
            r.predicted_random,
            100.0 * r.rel_err(r.predicted_random),
            r.predicted_exact,
            100.0 * r.rel_err(r.predicted_exact),
        );
    }
    match verdict {
        Some(v) => println!("zero-weight case: the measurement supports the {v} prefactor (the two closed forms differ by a factor of B)"),
        None => println!("zero-weight case: no consistent prefactor verdict"),
    }
    if run.params.coupling == Coupling::Shared {
        println!(
            "note: with shared features the product rule omits the fourth-moment terms; the exact form uses d+B+1 in place of d"
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_three_by_three_with_distinct_seeds() {
        let run = VarianceRun::default();
        let g = run.grid();
        assert_eq!(g.len(), 9);
        assert_eq!((g[1].sigma_z, g[1].sigma_phi), (0.5, 0.5));
        assert_eq!((g[3].sigma_z, g[3].sigma_phi), (1.0, 0.0));
        let mut seeds: Vec<u64> = g.iter().map(|p| p.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 9);
    }
}
