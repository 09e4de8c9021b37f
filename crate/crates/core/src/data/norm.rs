use serde::{Deserialize, Serialize};

use super::{DataError, WindowSet};

/// Per-channel min/max fitted on training windows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn fit(train: &WindowSet) -> Result<Self, DataError> {
        if train.is_empty() {
            return Err(DataError::EmptyTrainingSet);
        }
        let (n, t) = (train.n_vars, train.seq_len);
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for s in &train.samples {
            for c in 0..n {
                for &v in &s.x[c * t..(c + 1) * t] {
                    min[c] = min[c].min(v);
                    max[c] = max[c].max(v);
                }
            }
        }
        Ok(Self { min, max })
    }

    /// `(x − min)/(max − min)`; constant channels map to 0. Values outside
    /// the fitted range are kept as they are, not clipped.
    pub fn apply(&self, set: &mut WindowSet) {
        let t = set.seq_len;
        for s in &mut set.samples {
            for c in 0..self.min.len() {
                let (lo, span) = (self.min[c], self.max[c] - self.min[c]);
                for v in &mut s.x[c * t..(c + 1) * t] {
                    *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WindowSample;

    fn set(x: Vec<f64>, n: usize) -> WindowSet {
        let t = x.len() / n;
        WindowSet::new(
            n,
            t,
            vec![WindowSample {
                x,
                y: 1.0,
                unit_id: 0,
                end: 0,
            }],
        )
    }

    #[test]
    fn scales_and_guards_constant_channel() {
        let mut s = set(vec![0.0, 5.0, 10.0, 4.0, 4.0, 4.0], 2);
        let st = NormStats::fit(&s).unwrap();
        st.apply(&mut s);
        assert_eq!(s.samples[0].x, vec![0.0, 0.5, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn test_values_are_not_clipped() {
        let st = NormStats::fit(&set(vec![0.0, 10.0], 1)).unwrap();
        let mut test = set(vec![20.0, -10.0], 1);
        st.apply(&mut test);
        assert_eq!(test.samples[0].x, vec![2.0, -1.0]);
    }

    #[test]
    fn empty_is_error() {
        assert!(NormStats::fit(&WindowSet::new(1, 1, vec![])).is_err());
    }
}
