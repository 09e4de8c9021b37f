//! Prepared few-shot datasets: windowed, labeled, subsampled and normalized,
//! stored as a PMTS tensor file with a JSON provenance sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    detect_onset_rms3sigma, fewshot_sample, label_piecewise_linear, window_slide, DataError, FewShotConfig,
    NormStats, OnsetConfig, RunToFailureUnit, SampleReport, WindowSample, WindowSet,
};
use crate::autodiff::Tensor;
use crate::checkpoint::{self, Dtype};

/// Sample counts per degradation stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    /// `y ∈ [0.7, 1)`
    pub early: usize,
    /// `y ∈ [0.3, 0.7)`
    pub middle: usize,
    /// `y ∈ [0, 0.3)`
    pub late: usize,
    /// `y == 1`
    pub health: usize,
    pub total: usize,
}

impl StageCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = f64>) -> Self {
        let mut c = Self::default();
        for y in labels {
            c.total += 1;
            match y {
                y if y >= 1.0 => c.health += 1,
                y if y >= 0.7 => c.early += 1,
                y if y >= 0.3 => c.middle += 1,
                _ => c.late += 1,
            }
        }
        c
    }

    pub fn degraded(&self) -> usize {
        self.early + self.middle + self.late
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub dataset: String,
    pub inputs: Vec<String>,
    pub fewshot: FewShotConfig,
    pub window: usize,
    pub step: usize,
    pub knee: Option<usize>,
    pub sensors: Option<Vec<usize>>,
    pub n_vars: usize,
    /// All windows of the training pool before subsampling.
    pub source_counts: StageCounts,
    pub train_counts: StageCounts,
    pub test_counts: StageCounts,
    pub sampling: SampleReport,
    /// Retained share of degraded windows, in percent.
    pub degraded_retention_pct: f64,
}

/// Windowing and labeling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    pub window: usize,
    pub step: usize,
    /// Fixed knee in steps; when absent the unit's onset is used (detected
    /// by the RMS 3σ rule if the unit does not carry one).
    pub knee: Option<usize>,
    pub onset: OnsetConfig,
    pub fewshot: FewShotConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub train: WindowSet,
    pub test: WindowSet,
    pub norm: NormStats,
}

/// RUL labels for `unit` under `knee`, or under its (possibly detected) onset.
pub fn unit_labels(unit: &RunToFailureUnit, knee: Option<usize>, onset: &OnsetConfig) -> Result<Vec<f64>, DataError> {
    let len = unit.len();
    let knee = match (knee, unit.onset_index) {
        (Some(k), _) => k,
        (None, Some(o)) => len.saturating_sub(1).saturating_sub(o),
        (None, None) => {
            let o = detect_onset_rms3sigma(&unit.series, onset)?;
            len.saturating_sub(1).saturating_sub(o)
        }
    };
    Ok(label_piecewise_linear(len, knee))
}

fn windows(units: &[RunToFailureUnit], cfg: &PrepareConfig) -> Result<Vec<WindowSample>, DataError> {
    let mut out = Vec::new();
    for u in units {
        let labels = unit_labels(u, cfg.knee, &cfg.onset)?;
        out.extend(window_slide(u, &labels, cfg.window, cfg.step));
    }
    Ok(out)
}

impl PreparedDataset {
    /// Windows the training pool, subsamples it, and fits normalization on
    /// the subsample. The test split is `test_units` when given, otherwise
    /// every unit the first sampling stage dropped.
    pub fn build(
        train_units: &[RunToFailureUnit],
        test_units: Option<&[RunToFailureUnit]>,
        cfg: &PrepareConfig,
    ) -> Result<(Self, StageCounts, SampleReport), DataError> {
        if cfg.window == 0 || cfg.step == 0 {
            return Err(DataError::Invalid("window and step must be positive".into()));
        }
        let n_vars = train_units
            .first()
            .map(RunToFailureUnit::n_channels)
            .ok_or_else(|| DataError::Invalid("no training units".into()))?;
        if train_units.iter().chain(test_units.unwrap_or(&[])).any(|u| u.n_channels() != n_vars) {
            return Err(DataError::Invalid("units disagree on channel count".into()));
        }
        let pool = windows(train_units, cfg)?;
        let source = StageCounts::from_labels(pool.iter().map(|s| s.y));
        let (idx, report) = fewshot_sample(&pool, &cfg.fewshot)?;
        let mut train = WindowSet::new(n_vars, cfg.window, idx.iter().map(|&i| pool[i].clone()).collect());

        let mut test = match test_units {
            Some(units) => WindowSet::new(n_vars, cfg.window, windows(units, cfg)?),
            None => WindowSet::new(
                n_vars,
                cfg.window,
                pool.iter().filter(|s| !report.kept_units.contains(&s.unit_id)).cloned().collect(),
            ),
        };
        let norm = NormStats::fit(&train)?;
        norm.apply(&mut train);
        norm.apply(&mut test);
        Ok((Self { train, test, norm }, source, report))
    }

    fn set_tensors(prefix: &str, set: &WindowSet) -> Vec<(String, Tensor)> {
        let n = set.len();
        let (x, y) = set.all();
        let col = |f: fn(&WindowSample) -> usize| Tensor::from_vec(set.samples.iter().map(|s| f(s) as f64).collect());
        vec![
            (format!("data.{prefix}.x"), x),
            (format!("data.{prefix}.y"), Tensor::new(vec![n], y).expect("label shape")),
            (format!("data.{prefix}.unit"), col(|s| s.unit_id)),
            (format!("data.{prefix}.end"), col(|s| s.end)),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named = Self::set_tensors("train", &self.train);
        named.extend(Self::set_tensors("test", &self.test));
        named.push(("data.norm.min".into(), Tensor::from_vec(self.norm.min.clone())));
        named.push(("data.norm.max".into(), Tensor::from_vec(self.norm.max.clone())));
        checkpoint::encode(named.iter().map(|(n, t)| (n.as_str(), t)), Dtype::F64)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, crate::Error> {
        let tensors = checkpoint::decode(bytes)?;
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| DataError::Prepared(format!("missing tensor {name}")))
        };
        let set = |prefix: &str| -> Result<WindowSet, DataError> {
            let x = get(&format!("data.{prefix}.x"))?;
            let y = get(&format!("data.{prefix}.y"))?.data();
            let unit = get(&format!("data.{prefix}.unit"))?.data();
            let end = get(&format!("data.{prefix}.end"))?.data();
            let &[s, n, t] = x.shape() else {
                return Err(DataError::Prepared(format!("data.{prefix}.x must be rank 3")));
            };
            if y.len() != s || unit.len() != s || end.len() != s {
                return Err(DataError::Prepared(format!("data.{prefix} columns disagree in length")));
            }
            let samples = (0..s)
                .map(|i| WindowSample {
                    x: x.data()[i * n * t..(i + 1) * n * t].to_vec(),
                    y: y[i],
                    unit_id: unit[i] as usize,
                    end: end[i] as usize,
                })
                .collect();
            Ok(WindowSet::new(n, t, samples))
        };
        let train = set("train")?;
        let test = set("test")?;
        let norm = NormStats {
            min: get("data.norm.min")?.data().to_vec(),
            max: get("data.norm.max")?.data().to_vec(),
        };
        if test.n_vars != train.n_vars || test.seq_len != train.seq_len || norm.min.len() != train.n_vars {
            return Err(DataError::Prepared("train/test/normalization shapes disagree".into()).into());
        }
        Ok(Self { train, test, norm })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the tensor file and its provenance sidecar.
    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<(), crate::Error> {
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(provenance).expect("provenance serializes");
        std::fs::write(&side, json + "\n").map_err(|e| crate::Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self, crate::Error> {
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};

    fn cfg(p: f64) -> PrepareConfig {
        PrepareConfig {
            window: 30,
            step: 15,
            knee: None,
            onset: OnsetConfig::default(),
            fewshot: FewShotConfig::new(p, p, p, 1),
        }
    }

    #[test]
    fn stage_boundaries() {
        let c = StageCounts::from_labels([1.0, 0.7, 0.69, 0.3, 0.29, 0.0]);
        assert_eq!((c.health, c.early, c.middle, c.late, c.total), (1, 1, 2, 2, 6));
    }

    #[test]
    fn unit_probability_one_keeps_everything() {
        let units = gen_synthetic(&SyntheticConfig::default()).unwrap();
        let (ds, source, _) = PreparedDataset::build(&units, None, &cfg(1.0)).unwrap();
        assert_eq!(ds.train.len(), source.total);
        assert!(ds.test.is_empty());
    }

    #[test]
    fn bytes_roundtrip() {
        let units = gen_synthetic(&SyntheticConfig::default()).unwrap();
        let (ds, _, _) = PreparedDataset::build(&units, None, &cfg(0.5)).unwrap();
        assert!(!ds.test.is_empty());
        let bytes = ds.to_bytes();
        let back = PreparedDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }
}
