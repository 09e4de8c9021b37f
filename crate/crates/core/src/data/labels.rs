use serde::{Deserialize, Serialize};

use super::DataError;

/// Normalized piecewise-linear RUL for a unit of length `len`:
/// `y(t) = min(remaining, knee) / knee` with `remaining = len − 1 − t`.
pub fn label_piecewise_linear(len: usize, knee: usize) -> Vec<f64> {
    if knee == 0 {
        // Degenerate knee: healthy until the final step.
        return (0..len).map(|t| if t + 1 == len { 0.0 } else { 1.0 }).collect();
    }
    if knee >= len {
        log::warn!("knee {knee} ≥ unit length {len}: the unit never reaches a healthy plateau");
    }
    (0..len)
        .map(|t| {
            let remaining = len - 1 - t;
            remaining.min(knee) as f64 / knee as f64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnsetConfig {
    /// Leading fraction of windows that define healthy behaviour.
    pub baseline_frac: f64,
    /// Samples per non-overlapping RMS window.
    pub window: usize,
    /// Consecutive exceedances required.
    pub consecutive: usize,
}

impl Default for OnsetConfig {
    fn default() -> Self {
        Self {
            baseline_frac: 0.1,
            window: 1024,
            consecutive: 2,
        }
    }
}

pub const SIGMA_FLOOR: f64 = 1e-12;
pub const MIN_BASELINE_WINDOWS: usize = 3;

/// Joint RMS over all channels of each non-overlapping window; a trailing
/// partial window is dropped.
pub fn window_rms(series: &[Vec<f64>], window: usize) -> Vec<f64> {
    let len = series.first().map_or(0, Vec::len);
    if window == 0 {
        return Vec::new();
    }
    (0..len / window)
        .map(|w| {
            let mut acc = 0.0;
            for ch in series {
                acc += ch[w * window..(w + 1) * window].iter().map(|v| v * v).sum::<f64>();
            }
            (acc / (window * series.len()) as f64).sqrt()
        })
        .collect()
}

/// First time step of the first window that starts a run of
/// `consecutive` windows with RMS above `μ + 3σ` of the baseline windows.
/// Returns the series length when no onset is found.
pub fn detect_onset_rms3sigma(series: &[Vec<f64>], cfg: &OnsetConfig) -> Result<usize, DataError> {
    let len = series.first().map_or(0, Vec::len);
    let rms = window_rms(series, cfg.window);
    let n_base = (cfg.baseline_frac * rms.len() as f64).floor() as usize;
    if n_base < MIN_BASELINE_WINDOWS {
        return Err(DataError::InsufficientBaseline {
            got: n_base,
            needed: MIN_BASELINE_WINDOWS,
        });
    }
    let base = &rms[..n_base];
    let mean = base.iter().sum::<f64>() / n_base as f64;
    let var = base.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_base - 1) as f64;
    let threshold = mean + 3.0 * var.sqrt().max(SIGMA_FLOOR);
    let c = cfg.consecutive.max(1);
    let hit = (n_base..rms.len().saturating_sub(c - 1)).find(|&w| rms[w..w + c].iter().all(|&r| r > threshold));
    Ok(hit.map_or(len, |w| w * cfg.window))
}
