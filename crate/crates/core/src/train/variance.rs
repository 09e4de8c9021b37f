//! Monte-Carlo check of the initial-gradient variance of a linear regressor
//! `ŷ = z·φ` trained with the half-MSE loss.
//!
//! One trial draws a batch `z ∈ ℝ^{B×d}`, labels `Y`, and an initial `φ`,
//! takes one gradient step `Δφ = −η·∇φ`, and records `Δφ`. With
//! `E = Y − zφ`, `Δφ_j = (η/B)·Σᵢ zᵢⱼEᵢ`.
//!
//! The product rule `Var(zE) = Var(z)·Var(E)` treats `zᵢⱼ` and `Eᵢ` as
//! independent, giving `(η²/B)·σz²·(σY² + d·σz²·σφ²)`. They are not
//! independent when `E` is computed from the same `z`: the fourth moment of
//! `zᵢⱼ` and the shared `φ` across the batch add `(B+2)` more terms, so the
//! exact variance is `(η²/B)·σz²·(σY² + (d+B+1)·σz²·σφ²)`. Both are reported;
//! [`Coupling::Independent`] draws `E` from a fresh `z'` and realizes the
//! product rule exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Smallest trial count the estimator accepts: the relative standard error
/// of a pooled variance estimate is then well under 10%.
pub const MIN_TRIALS: usize = 10_000;

const CHUNK: usize = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// The error is computed from the very features it multiplies.
    Shared,
    /// The error comes from an independent feature draw.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceLawParams {
    pub sigma_z: f64,
    pub sigma_y: f64,
    pub sigma_phi: f64,
    pub d: usize,
    pub batch: usize,
    pub lr: f64,
    pub trials: usize,
    pub seed: u64,
    pub coupling: Coupling,
}

impl Default for VarianceLawParams {
    fn default() -> Self {
        Self {
            sigma_z: 1.0,
            sigma_y: 1.0,
            sigma_phi: 0.0,
            d: 16,
            batch: 8,
            lr: 0.01,
            trials: 100_000,
            seed: 0,
            coupling: Coupling::Shared,
        }
    }
}

impl VarianceLawParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_z", self.sigma_z), ("sigma_y", self.sigma_y), ("sigma_phi", self.sigma_phi)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.trials < MIN_TRIALS {
            return Err(Error::Config(format!(
                "{} trials cannot resolve the variance to 10%; need at least {MIN_TRIALS}",
                self.trials
            )));
        }
        Ok(())
    }

    /// Product-rule prediction, `(η²/B)·σz²·(σY² + d·σz²·σφ²)`.
    pub fn predicted_random(&self) -> f64 {
        let (sz2, sp2) = (self.sigma_z.powi(2), self.sigma_phi.powi(2));
        self.lr.powi(2) / self.batch as f64 * sz2 * (self.sigma_y.powi(2) + self.d as f64 * sz2 * sp2)
    }

    /// `φ = 0`, with the `η²/B` prefactor.
    pub fn predicted_zero(&self) -> f64 {
        self.lr.powi(2) / self.batch as f64 * self.sigma_z.powi(2) * self.sigma_y.powi(2)
    }

    /// `φ = 0`, with an `η²/B²` prefactor.
    pub fn predicted_zero_b2(&self) -> f64 {
        self.predicted_zero() / self.batch as f64
    }

    /// Exact variance for shared features, including the fourth-moment and
    /// cross-sample terms the product rule leaves out.
    pub fn predicted_exact(&self) -> f64 {
        let extra = match self.coupling {
            Coupling::Shared => (self.batch + 1) as f64,
            Coupling::Independent => 0.0,
        };
        let (sz2, sp2) = (self.sigma_z.powi(2), self.sigma_phi.powi(2));
        self.lr.powi(2) / self.batch as f64 * sz2 * (self.sigma_y.powi(2) + (self.d as f64 + extra) * sz2 * sp2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceLawReport {
    pub params: VarianceLawParams,
    /// `Var(Δφ_j)` pooled over the `d` coordinates.
    pub measured: f64,
    /// Per-coordinate variances.
    pub per_coordinate: Vec<f64>,
    pub predicted_random: f64,
    pub predicted_zero: f64,
    pub predicted_zero_b2: f64,
    pub predicted_exact: f64,
    /// Approximate relative standard error of `measured`.
    pub rel_std_error: f64,
}

impl VarianceLawReport {
    pub fn rel_err(&self, reference: f64) -> f64 {
        if reference == 0.0 {
            self.measured.abs()
        } else {
            (self.measured - reference).abs() / reference
        }
    }

    /// Which `φ = 0` prefactor the measurement supports.
    pub fn zero_prefactor_verdict(&self) -> &'static str {
        let a = (self.measured - self.predicted_zero).abs();
        let b = (self.measured - self.predicted_zero_b2).abs();
        if a <= b {
            "η²/B"
        } else {
            "η²/B²"
        }
    }
}

/// Δφ for one trial, with the gradient taken through the tape.
fn trial(p: &VarianceLawParams, rng: &mut Rng) -> Result<Vec<f64>> {
    let (b, d) = (p.batch, p.d);
    if d == 0 {
        return Ok(Vec::new());
    }
    let z = Tensor::new(vec![b, d], rng.normal_vec(b * d, p.sigma_z))?;
    let y = Tensor::from_vec(rng.normal_vec(b, p.sigma_y));
    let phi = Tensor::new(vec![d, 1], rng.normal_vec(d, p.sigma_phi))?.with_requires_grad();
    let tape = Tape::new();
    let phi_v = tape.leaf(&phi);
    let loss = match p.coupling {
        Coupling::Shared => {
            let pred = tape.constant(&z).matmul(phi_v)?.reshape(&[b])?;
            pred.mse_loss(tape.constant(&y))?
        }
        Coupling::Independent => {
            // Δφ_j = (η/B)Σ zᵢⱼEᵢ with E from an independent z'; written as
            // the gradient of −(1/B)Σᵢ Eᵢ·(zᵢ·φ) with E held constant.
            let z2 = Tensor::new(vec![b, d], rng.normal_vec(b * d, p.sigma_z))?;
            let e: Vec<f64> = (0..b)
                .map(|i| y.data()[i] - (0..d).map(|j| z2.data()[i * d + j] * phi.data()[j]).sum::<f64>())
                .collect();
            let pred = tape.constant(&z).matmul(phi_v)?.reshape(&[b])?;
            pred.mul(tape.constant(&Tensor::from_vec(e)))?.sum().scale(-1.0 / b as f64)
        }
    };
    let g = tape.backward(loss)?.get_or_zero(phi_v);
    Ok(g.into_iter().map(|v| -p.lr * v).collect())
}

/// Runs `p.trials` independent trials in parallel chunks and reduces them in
/// chunk order, so the result depends only on `p`.
pub fn variance_law_mc(p: &VarianceLawParams) -> Result<VarianceLawReport> {
    p.validate()?;
    let root = Rng::new(p.seed);
    let d = p.d;
    let chunks = p.trials.div_ceil(CHUNK);
    // Per chunk: Σx and Σx² per coordinate.
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<_> {
            let mut rng = root.fork(c as u64);
            let n = CHUNK.min(p.trials - c * CHUNK);
            let mut s1 = vec![0.0; d];
            let mut s2 = vec![0.0; d];
            for _ in 0..n {
                let dphi = trial(p, &mut rng)?;
                for j in 0..d {
                    s1[j] += dphi[j];
                    s2[j] += dphi[j] * dphi[j];
                }
            }
            Ok((s1, s2))
        })
        .collect::<Result<_>>()?;
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d];
    for (a, b) in &partial {
        for j in 0..d {
            s1[j] += a[j];
            s2[j] += b[j];
        }
    }
    let n = p.trials as f64;
    let per_coordinate: Vec<f64> = (0..d)
        .map(|j| ((s2[j] - s1[j] * s1[j] / n) / (n - 1.0)).max(0.0))
        .collect();
    let measured = if d == 0 { 0.0 } else { per_coordinate.iter().sum::<f64>() / d as f64 };
    Ok(VarianceLawReport {
        params: *p,
        measured,
        per_coordinate,
        predicted_random: p.predicted_random(),
        predicted_zero: p.predicted_zero(),
        predicted_zero_b2: p.predicted_zero_b2(),
        predicted_exact: p.predicted_exact(),
        // Gaussian-kurtosis approximation; heavier tails only widen it.
        rel_std_error: (2.0 / (n * d.max(1) as f64)).sqrt(),
    })
}

/// Writes reports as CSV:
/// `sigma_z,sigma_phi,measured,predicted_random,predicted_zero,trials`.
pub fn write_variance_csv<W: std::io::Write>(out: W, reports: &[VarianceLawReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sigma_z", "sigma_phi", "measured", "predicted_random", "predicted_zero", "trials"])?;
    for r in reports {
        w.write_record([
            r.params.sigma_z.to_string(),
            r.params.sigma_phi.to_string(),
            r.measured.to_string(),
            r.predicted_random.to_string(),
            r.predicted_zero.to_string(),
            r.params.trials.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(sigma_phi: f64, coupling: Coupling) -> VarianceLawParams {
        VarianceLawParams {
            sigma_phi,
            trials: 20_000,
            coupling,
            ..Default::default()
        }
    }

    #[test]
    fn too_few_trials() {
        let p = VarianceLawParams {
            trials: 100,
            ..Default::default()
        };
        assert!(matches!(variance_law_mc(&p), Err(Error::Config(_))));
    }

    #[test]
    fn zero_features_give_zero_variance() {
        let p = VarianceLawParams {
            sigma_z: 0.0,
            ..params(1.0, Coupling::Shared)
        };
        let r = variance_law_mc(&p).unwrap();
        assert_eq!(r.measured, 0.0);
        let p = VarianceLawParams { d: 0, ..p };
        assert_eq!(variance_law_mc(&p).unwrap().measured, 0.0);
    }

    #[test]
    fn zero_init_matches_eta_sq_over_b() {
        let r = variance_law_mc(&params(0.0, Coupling::Shared)).unwrap();
        assert!(r.rel_err(r.predicted_zero) < 0.05, "{r:?}");
        assert_eq!(r.zero_prefactor_verdict(), "η²/B");
    }

    #[test]
    fn exact_form_for_shared_features() {
        let r = variance_law_mc(&params(1.0, Coupling::Shared)).unwrap();
        assert!(r.rel_err(r.predicted_exact) < 0.05, "{r:?}");
    }

    #[test]
    fn product_rule_for_independent_features() {
        let r = variance_law_mc(&params(1.0, Coupling::Independent)).unwrap();
        assert!(r.rel_err(r.predicted_random) < 0.05, "{r:?}");
    }

    #[test]
    fn deterministic() {
        let p = params(0.5, Coupling::Shared);
        assert_eq!(variance_law_mc(&p).unwrap(), variance_law_mc(&p).unwrap());
    }
}
