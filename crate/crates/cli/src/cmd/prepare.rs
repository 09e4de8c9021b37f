use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use pmts_core::data::{
    gen_synthetic, parse_cmapss, parse_xjtu, FewShotConfig, OnsetConfig, PrepareConfig, PreparedDataset, Provenance,
    RunToFailureUnit, StageCounts, SyntheticConfig, DEFAULT_SENSORS,
};

use crate::config::{self, set};
use crate::error::{CliError, Result};

/// Knee used for C-MAPSS when none is given.
pub const CMAPSS_KNEE: usize = 120;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Whitespace-separated C-MAPSS trajectory file(s).
    Cmapss,
    /// One XJTU-SY bearing directory per input.
    Xjtu,
    /// Generated run-to-failure units.
    Synthetic,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Training-pool source; repeat for several files or bearings.
    #[arg(long)]
    pub input: Vec<PathBuf>,
    /// Held-out run-to-failure units; without it the test split is every
    /// unit the device-level sampling dropped.
    #[arg(long)]
    pub test_input: Vec<PathBuf>,
    /// Output tensor file; the provenance sidecar goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Probability of keeping each run-to-failure unit.
    #[arg(long)]
    pub p1: Option<f64>,
    /// Probability of keeping each distinct degraded RUL value.
    #[arg(long)]
    pub p2: Option<f64>,
    /// Probability of keeping each remaining degraded window.
    #[arg(long)]
    pub p3: Option<f64>,
    /// Sampling seed; falls back to the config file, then PMTS_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Window length in cycles or RMS frames.
    #[arg(long)]
    pub window: Option<usize>,
    /// Stride between consecutive windows.
    #[arg(long)]
    pub step: Option<usize>,
    /// Fixed knee in cycles (C-MAPSS default 120).
    #[arg(long)]
    pub knee: Option<usize>,
    /// C-MAPSS sensor columns to keep, 0-based among the 21.
    #[arg(long, value_delimiter = ',')]
    pub sensors: Option<Vec<usize>>,
    /// Number of synthetic units.
    #[arg(long)]
    pub units: Option<usize>,
    /// JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareRun {
    pub dataset: Option<DatasetKind>,
    pub inputs: Vec<PathBuf>,
    pub test_inputs: Vec<PathBuf>,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub keep_health: bool,
    pub seed: Option<u64>,
    pub window: usize,
    pub step: usize,
    pub knee: Option<usize>,
    pub sensors: Option<Vec<usize>>,
    pub onset: OnsetConfig,
    /// Generator settings; its seed is replaced by the run seed.
    pub synthetic: SyntheticConfig,
}

impl Default for PrepareRun {
    fn default() -> Self {
        Self {
            dataset: None,
            inputs: Vec::new(),
            test_inputs: Vec::new(),
            p1: 1.0,
            p2: 1.0,
            p3: 1.0,
            keep_health: true,
            seed: None,
            window: 30,
            step: 15,
            knee: None,
            sensors: None,
            onset: OnsetConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl PrepareRun {
    pub fn resolve(args: &PrepareArgs) -> Result<Self> {
        let mut run: PrepareRun = config::load(args.config.as_deref())?;
        set(&mut run.dataset, args.dataset.map(Some));
        if !args.input.is_empty() {
            run.inputs = args.input.clone();
        }
        if !args.test_input.is_empty() {
            run.test_inputs = args.test_input.clone();
        }
        set(&mut run.p1, args.p1);
        set(&mut run.p2, args.p2);
        set(&mut run.p3, args.p3);
        set(&mut run.window, args.window);
        set(&mut run.step, args.step);
        set(&mut run.knee, args.knee.map(Some));
        set(&mut run.sensors, args.sensors.clone().map(Some));
        set(&mut run.synthetic.units, args.units);
        let seed = config::resolve_seed(args.seed, run.seed)?;
        run.seed = Some(seed);
        run.synthetic.seed = seed;

        let Some(dataset) = run.dataset else {
            return Err(CliError::usage("--dataset is required"));
        };
        if dataset == DatasetKind::Synthetic {
            if !run.inputs.is_empty() || !run.test_inputs.is_empty() {
                return Err(CliError::usage("synthetic data takes no --input"));
            }
        } else if run.inputs.is_empty() {
            return Err(CliError::usage("--input is required"));
        }
        if dataset == DatasetKind::Cmapss {
            run.knee.get_or_insert(CMAPSS_KNEE);
            run.sensors.get_or_insert_with(|| DEFAULT_SENSORS.to_vec());
        } else if run.sensors.is_some() {
            return Err(CliError::usage("--sensors only applies to C-MAPSS"));
        }
        run.fewshot().validate()?;
        if run.window == 0 || run.step == 0 {
            return Err(CliError::usage("window and step must be positive"));
        }
        Ok(run)
    }

    fn fewshot(&self) -> FewShotConfig {
        FewShotConfig {
            keep_health: self.keep_health,
            ..FewShotConfig::new(self.p1, self.p2, self.p3, self.seed.unwrap_or(0))
        }
    }

    fn load_units(&self, paths: &[PathBuf], first_id: usize) -> Result<Vec<RunToFailureUnit>> {
        let mut units = Vec::new();
        match self.dataset.expect("resolved") {
            DatasetKind::Cmapss => {
                let sensors = self.sensors.as_deref().unwrap_or(&DEFAULT_SENSORS);
                for p in paths {
                    // Unit ids restart in every file; keep them distinct.
                    let offset = first_id + units.len();
                    units.extend(parse_cmapss(p, sensors)?.into_iter().map(|mut u| {
                        u.unit_id += offset;
                        u
                    }));
                }
            }
            DatasetKind::Xjtu => {
                for (i, p) in paths.iter().enumerate() {
                    units.push(parse_xjtu(p, first_id + i + 1)?);
                }
            }
            DatasetKind::Synthetic => units = gen_synthetic(&self.synthetic)?,
        }
        Ok(units)
    }
}

/// Sidecar path for the resolved configuration of a prepared file.
pub fn config_path(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

pub fn run(args: &PrepareArgs) -> Result<()> {
    let run = PrepareRun::resolve(args)?;
    let train_units = run.load_units(&run.inputs, 0)?;
    let max_id = train_units.iter().map(|u| u.unit_id).max().unwrap_or(0);
    let test_units = if run.test_inputs.is_empty() {
        None
    } else {
        Some(run.load_units(&run.test_inputs, max_id + 1)?)
    };
    let cfg = PrepareConfig {
        window: run.window,
        step: run.step,
        knee: run.knee,
        onset: run.onset,
        fewshot: run.fewshot(),
    };
    let (ds, source, sampling) = PreparedDataset::build(&train_units, test_units.as_deref(), &cfg)?;
    let train_counts = StageCounts::from_labels(ds.train.labels());
    let retention = if source.degraded() == 0 {
        0.0
    } else {
        100.0 * train_counts.degraded() as f64 / source.degraded() as f64
    };
    let provenance = Provenance {
        dataset: format!("{:?}", run.dataset.expect("resolved")).to_lowercase(),
        inputs: run.inputs.iter().chain(&run.test_inputs).map(|p| p.display().to_string()).collect(),
        fewshot: cfg.fewshot,
        window: run.window,
        step: run.step,
        knee: run.knee,
        sensors: run.sensors.clone(),
        n_vars: ds.train.n_vars,
        source_counts: source,
        train_counts,
        test_counts: StageCounts::from_labels(ds.test.labels()),
        sampling,
        degraded_retention_pct: retention,
    };
    ds.save(&args.out, &provenance)?;
    config::write_json(&config_path(&args.out), &run)?;
    log::info!(
        "prepared {} train / {} test windows ({:.3}% of degraded windows kept)",
        ds.train.len(),
        ds.test.len(),
        retention
    );
    println!(
        "train {} test {} degraded-retention {:.4}%",
        ds.train.len(),
        ds.test.len(),
        retention
    );
    Ok(())
}
