use super::{RunToFailureUnit, WindowSample};

/// Windows of length `t` starting at `0, s, 2s, …` while they fit; each is
/// labeled with `labels[start + t − 1]`. No partial tail window.
pub fn window_slide(unit: &RunToFailureUnit, labels: &[f64], t: usize, s: usize) -> Vec<WindowSample> {
    assert!(t >= 1 && s >= 1, "window and step must be positive");
    let len = unit.len();
    debug_assert_eq!(labels.len(), len);
    if len < t {
        return Vec::new();
    }
    (0..=len - t)
        .step_by(s)
        .map(|start| {
            let mut x = Vec::with_capacity(unit.n_channels() * t);
            for ch in &unit.series {
                x.extend_from_slice(&ch[start..start + t]);
            }
            WindowSample {
                x,
                y: labels[start + t - 1],
                unit_id: unit.unit_id,
                end: start + t - 1,
            }
        })
        .collect()
}
