use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent, over non-zero targets only; `None` when every target is 0.
    pub mape: Option<f64>,
    /// Percent; a term with `y = ŷ = 0` contributes 0.
    pub smape: f64,
    pub n: usize,
    /// Targets equal to zero, left out of MAPE.
    pub mape_skipped: usize,
}

pub fn metrics(y: &[f64], pred: &[f64]) -> Result<MetricsReport> {
    if y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if y.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: vec![y.len()],
            rhs: vec![pred.len()],
        });
    }
    let n = y.len() as f64;
    let (mut abs, mut sq, mut ape, mut sape) = (0.0, 0.0, 0.0, 0.0);
    let mut skipped = 0;
    for (&t, &p) in y.iter().zip(pred) {
        let e = (t - p).abs();
        abs += e;
        sq += e * e;
        if t == 0.0 {
            skipped += 1;
        } else {
            ape += e / t.abs();
        }
        let denom = (t.abs() + p.abs()) / 2.0;
        if denom > 0.0 {
            sape += e / denom;
        }
    }
    let kept = y.len() - skipped;
    Ok(MetricsReport {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: (kept > 0).then(|| 100.0 * ape / kept as f64),
        smape: 100.0 * sape / n,
        n: y.len(),
        mape_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        let m = metrics(&[0.2, 0.0], &[0.2, 0.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape, m.smape), (0.0, 0.0, Some(0.0), 0.0));
        assert_eq!(m.mape_skipped, 1);
    }

    #[test]
    fn hand_values() {
        let m = metrics(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (1.0, 1.0, Some(100.0)));
        assert_eq!(metrics(&[0.0], &[0.5]).unwrap().smape, 200.0);
    }

    #[test]
    fn empty_is_error() {
        assert!(metrics(&[], &[]).is_err());
    }
}
