use serde::{Deserialize, Serialize};

use super::{DataError, RunToFailureUnit};
use crate::rng::Rng;

/// Run-to-failure generator: each channel is a smooth baseline, plus a
/// monotone trend after the onset, plus Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub units: usize,
    pub n_vars: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Onset position as a fraction of the unit length.
    pub onset_min: f64,
    pub onset_max: f64,
    pub noise: f64,
    /// Magnitude range of the trend reached at failure.
    pub slope_min: f64,
    pub slope_max: f64,
    /// Amplitude of the slow baseline oscillation.
    pub baseline_amp: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            units: 20,
            n_vars: 3,
            len_min: 150,
            len_max: 300,
            onset_min: 0.3,
            onset_max: 0.7,
            noise: 0.05,
            slope_min: 0.5,
            slope_max: 1.5,
            baseline_amp: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(m.to_string()));
        if self.n_vars == 0 || self.len_min < 2 || self.len_max < self.len_min {
            return bad("need n_vars ≥ 1 and 2 ≤ len_min ≤ len_max");
        }
        if !(0.0..1.0).contains(&self.onset_min) || self.onset_max < self.onset_min || self.onset_max >= 1.0 {
            return bad("onset fractions must satisfy 0 ≤ min ≤ max < 1");
        }
        if self.noise < 0.0 || self.slope_min < 0.0 || self.slope_max < self.slope_min {
            return bad("noise and slopes must be non-negative with min ≤ max");
        }
        Ok(())
    }
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<RunToFailureUnit>, DataError> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    // Channel personalities are shared by the whole fleet.
    let mut fleet = root.fork(0);
    let channels: Vec<(f64, f64, f64)> = (0..cfg.n_vars)
        .map(|_| {
            let offset = fleet.uniform_range(-1.0, 1.0);
            let sign = if fleet.bernoulli(0.5) { 1.0 } else { -1.0 };
            let period = fleet.uniform_range(40.0, 120.0);
            (offset, sign, period)
        })
        .collect();

    Ok((0..cfg.units)
        .map(|u| {
            let mut rng = root.fork(1 + u as u64);
            let len = rng.int_range(cfg.len_min, cfg.len_max);
            let frac = rng.uniform_range(cfg.onset_min, cfg.onset_max);
            let onset = ((frac * len as f64) as usize).min(len - 2);
            let series = channels
                .iter()
                .map(|&(offset, sign, period)| {
                    let slope = rng.uniform_range(cfg.slope_min, cfg.slope_max);
                    let power = rng.uniform_range(1.0, 2.5);
                    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
                    (0..len)
                        .map(|t| {
                            let base = offset + cfg.baseline_amp * (std::f64::consts::TAU * t as f64 / period + phase).sin();
                            let trend = if t > onset {
                                sign * slope * ((t - onset) as f64 / (len - 1 - onset) as f64).powf(power)
                            } else {
                                0.0
                            };
                            base + trend + cfg.noise * rng.normal()
                        })
                        .collect()
                })
                .collect();
            RunToFailureUnit {
                unit_id: u,
                series,
                onset_index: Some(onset),
                condition: "synthetic".into(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_fleet() {
        let cfg = SyntheticConfig::default();
        assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
    }

    #[test]
    fn noiseless_is_flat_until_onset() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            baseline_amp: 0.0,
            units: 3,
            ..Default::default()
        };
        for u in gen_synthetic(&cfg).unwrap() {
            let onset = u.onset_index.unwrap();
            for ch in &u.series {
                assert!(ch[..=onset].iter().all(|&v| v == ch[0]));
                assert_ne!(ch[onset + 1], ch[0]);
            }
        }
    }

    #[test]
    fn zero_slope_is_stationary() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            baseline_amp: 0.0,
            slope_min: 0.0,
            slope_max: 0.0,
            units: 2,
            ..Default::default()
        };
        for u in gen_synthetic(&cfg).unwrap() {
            for ch in &u.series {
                assert!(ch.iter().all(|&v| v == ch[0]));
            }
        }
    }
}
