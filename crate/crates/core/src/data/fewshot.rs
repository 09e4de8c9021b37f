use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{DataError, WindowSample};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotConfig {
    /// Probability of keeping a whole unit.
    pub p1: f64,
    /// Probability of keeping each distinct degraded RUL value.
    pub p2: f64,
    /// Probability of keeping each remaining sample.
    pub p3: f64,
    pub seed: u64,
    /// Healthy samples (`y == 1`) skip the final thinning step.
    #[serde(default = "default_true")]
    pub keep_health: bool,
}

fn default_true() -> bool {
    true
}

impl FewShotConfig {
    pub fn new(p1: f64, p2: f64, p3: f64, seed: u64) -> Self {
        Self {
            p1,
            p2,
            p3,
            seed,
            keep_health: true,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (name, p) in [("p1", self.p1), ("p2", self.p2), ("p3", self.p3)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(DataError::Invalid(format!("{name} = {p} is outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// What each sampling stage saw and kept.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleReport {
    pub units_total: usize,
    pub units_kept: usize,
    pub values_total: usize,
    pub values_kept: usize,
    pub thinning_candidates: usize,
    pub thinning_kept: usize,
    /// Ids of the units that survived the first stage, ascending.
    pub kept_units: Vec<usize>,
}

fn is_health(y: f64) -> bool {
    y >= 1.0
}

/// Three-stage few-shot subsampling; returns the kept indices in input order.
///
/// 1. every unit survives independently with probability `p1`;
/// 2. of the degraded RUL values present in the survivors, each is kept with
///    probability `p2` (all samples carrying a kept value stay; healthy
///    samples always stay);
/// 3. every remaining sample survives with probability `p3` (healthy samples
///    are exempt when `keep_health` is set).
pub fn fewshot_sample(samples: &[WindowSample], cfg: &FewShotConfig) -> Result<(Vec<usize>, SampleReport), DataError> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut report = SampleReport::default();

    let units: BTreeSet<usize> = samples.iter().map(|s| s.unit_id).collect();
    let mut r1 = root.fork(1);
    let kept_units: HashSet<usize> = units.iter().copied().filter(|_| r1.bernoulli(cfg.p1)).collect();
    report.units_total = units.len();
    report.units_kept = kept_units.len();
    report.kept_units = units.iter().copied().filter(|u| kept_units.contains(u)).collect();
    let stage1: Vec<usize> = (0..samples.len())
        .filter(|&i| kept_units.contains(&samples[i].unit_id))
        .collect();

    let mut values: Vec<f64> = stage1.iter().map(|&i| samples[i].y).filter(|&y| !is_health(y)).collect();
    values.sort_by(f64::total_cmp);
    values.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let mut r2 = root.fork(2);
    let kept_values: HashSet<u64> = values.iter().filter(|_| r2.bernoulli(cfg.p2)).map(|v| v.to_bits()).collect();
    report.values_total = values.len();
    report.values_kept = kept_values.len();
    let stage2: Vec<usize> = stage1
        .into_iter()
        .filter(|&i| is_health(samples[i].y) || kept_values.contains(&samples[i].y.to_bits()))
        .collect();

    let mut r3 = root.fork(3);
    let mut out = Vec::with_capacity(stage2.len());
    for i in stage2 {
        if cfg.keep_health && is_health(samples[i].y) {
            out.push(i);
            continue;
        }
        report.thinning_candidates += 1;
        if r3.bernoulli(cfg.p3) {
            report.thinning_kept += 1;
            out.push(i);
        }
    }
    if out.is_empty() {
        log::warn!("few-shot sampling kept no samples (seed {})", cfg.seed);
    }
    Ok((out, report))
}
