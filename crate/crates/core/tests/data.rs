use pmts_core::data::{
    detect_onset_rms3sigma, fewshot_sample, gen_synthetic, label_piecewise_linear, parse_cmapss_str, unit_labels,
    window_slide, DataError, FewShotConfig, NormStats, OnsetConfig, PrepareConfig, PreparedDataset, RunToFailureUnit,
    StageCounts, SyntheticConfig, WindowSample, WindowSet, DEFAULT_SENSORS,
};
use pmts_core::Rng;
use proptest::prelude::*;

fn ramp_unit(id: usize, len: usize, channels: usize) -> RunToFailureUnit {
    RunToFailureUnit {
        unit_id: id,
        series: (0..channels).map(|c| (0..len).map(|t| (t * (c + 1)) as f64).collect()).collect(),
        onset_index: None,
        condition: String::new(),
    }
}

fn cmapss_text(units: &[(usize, usize)]) -> String {
    let mut s = String::new();
    for &(id, len) in units {
        for cycle in 1..=len {
            let mut row = vec![id.to_string(), cycle.to_string()];
            row.extend((0..3).map(|k| format!("{:.4}", 0.1 * k as f64)));
            row.extend((1..=21).map(|k| format!("{:.4}", k as f64 + 0.01 * cycle as f64)));
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    }
    s
}

proptest! {
    #[test]
    fn window_count_formula(len in 1usize..400, t in 1usize..60, s in 1usize..40) {
        let u = ramp_unit(0, len, 2);
        let w = window_slide(&u, &vec![0.0; len], t, s);
        let expected = if len >= t { (len - t) / s + 1 } else { 0 };
        prop_assert_eq!(w.len(), expected);
        for win in &w {
            prop_assert_eq!(win.x.len(), 2 * t);
            prop_assert!(win.end < len);
        }
    }

    #[test]
    fn piecewise_labels(len in 1usize..500, knee in 1usize..200) {
        let y = label_piecewise_linear(len, knee);
        prop_assert_eq!(y.len(), len);
        prop_assert_eq!(y[len - 1], 0.0);
        for t in 0..len {
            let expected = (len - 1 - t).min(knee) as f64 / knee as f64;
            prop_assert_eq!(y[t], expected);
            prop_assert!((0.0..=1.0).contains(&y[t]));
            if t > 0 {
                prop_assert!(y[t] <= y[t - 1]);
            }
        }
    }

    #[test]
    fn normalization_round_trips(seed in 0u64..5000, n in 1usize..4) {
        let mut rng = Rng::new(seed);
        let samples = (0..5)
            .map(|i| WindowSample { x: rng.normal_vec(n * 6, 3.0), y: 0.5, unit_id: i, end: 0 })
            .collect();
        let set = WindowSet::new(n, 6, samples);
        let stats = NormStats::fit(&set).unwrap();
        let mut scaled = set.clone();
        stats.apply(&mut scaled);
        for (a, b) in set.samples.iter().zip(&scaled.samples) {
            for c in 0..n {
                for k in 0..6 {
                    let v = b.x[c * 6 + k];
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
                    let back = stats.min[c] + v * (stats.max[c] - stats.min[c]);
                    prop_assert!((back - a.x[c * 6 + k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn sampling_is_a_subset_in_order(seed in 0u64..10_000, p in 0.05f64..1.0) {
        let samples: Vec<WindowSample> = (0..200)
            .map(|i| WindowSample { x: vec![], y: if i % 7 == 0 { 1.0 } else { (i % 50) as f64 / 50.0 }, unit_id: i / 20, end: i })
            .collect();
        let (idx, rep) = fewshot_sample(&samples, &FewShotConfig::new(p, p, p, seed)).unwrap();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| rep.kept_units.contains(&samples[i].unit_id)));
        prop_assert!(rep.units_kept <= rep.units_total && rep.values_kept <= rep.values_total);
    }
}

#[test]
fn stage_probabilities_within_three_sigma() {
    let samples: Vec<WindowSample> = (0..20_000)
        .map(|i| WindowSample {
            x: vec![],
            y: (i % 400) as f64 / 400.0,
            unit_id: i / 20,
            end: i,
        })
        .collect();
    let (p1, p2, p3) = (0.4, 0.5, 0.6);
    let (_, rep) = fewshot_sample(&samples, &FewShotConfig::new(p1, p2, p3, 17)).unwrap();
    let within = |kept: usize, total: usize, p: f64| {
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        (kept as f64 - total as f64 * p).abs() <= 3.0 * sd
    };
    assert!(within(rep.units_kept, rep.units_total, p1), "{rep:?}");
    assert!(within(rep.values_kept, rep.values_total, p2), "{rep:?}");
    assert!(within(rep.thinning_kept, rep.thinning_candidates, p3), "{rep:?}");
}

#[test]
fn cmapss_knee_labels() {
    let text = cmapss_text(&[(1, 200), (2, 90)]);
    let units = parse_cmapss_str(&text, "toy.txt", &DEFAULT_SENSORS).unwrap();
    assert_eq!(units.len(), 2);
    assert_eq!(units[0].n_channels(), 14);
    let y = unit_labels(&units[0], Some(120), &OnsetConfig::default()).unwrap();
    assert!(y[..80].iter().all(|&v| v == 1.0));
    for t in 79..200 {
        assert_eq!(y[t], (199 - t) as f64 / 120.0);
    }
    let y = unit_labels(&units[1], Some(120), &OnsetConfig::default()).unwrap();
    assert_eq!(y[0], 89.0 / 120.0);
}

#[test]
fn cmapss_errors_name_the_line() {
    let mut text = cmapss_text(&[(1, 3)]);
    text.push_str("1 4 0.1 0.2\n");
    match parse_cmapss_str(&text, "bad.txt", &DEFAULT_SENSORS) {
        Err(DataError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn onset_found_after_a_step_change() {
    let mut rng = Rng::new(3);
    let mut ch: Vec<f64> = rng.normal_vec(64 * 40, 1.0);
    for v in &mut ch[64 * 30..] {
        *v *= 4.0;
    }
    let cfg = OnsetConfig {
        baseline_frac: 0.25,
        window: 64,
        consecutive: 2,
    };
    assert_eq!(detect_onset_rms3sigma(&[ch.clone()], &cfg).unwrap(), 64 * 30);
    let flat = rng.normal_vec(64 * 40, 1.0);
    assert_eq!(detect_onset_rms3sigma(&[flat], &cfg).unwrap(), 64 * 40);
    let short = OnsetConfig {
        baseline_frac: 0.05,
        ..cfg
    };
    assert!(matches!(
        detect_onset_rms3sigma(&[ch], &short),
        Err(DataError::InsufficientBaseline { .. })
    ));
}

#[test]
fn prepared_datasets_are_deterministic_and_fit_on_train_only() {
    let units = gen_synthetic(&SyntheticConfig {
        units: 12,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let cfg = PrepareConfig {
        window: 30,
        step: 15,
        knee: None,
        onset: OnsetConfig::default(),
        fewshot: FewShotConfig::new(0.6, 0.8, 0.7, 2),
    };
    let (a, source, rep) = PreparedDataset::build(&units, None, &cfg).unwrap();
    let (b, _, _) = PreparedDataset::build(&units, None, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert!(a.train.len() <= source.total);
    assert!(a.test.samples.iter().all(|s| !rep.kept_units.contains(&s.unit_id)));
    let refit = NormStats::fit(&{
        let mut raw = a.train.clone();
        for s in &mut raw.samples {
            for c in 0..raw.n_vars {
                for v in &mut s.x[c * 30..(c + 1) * 30] {
                    *v = a.norm.min[c] + *v * (a.norm.max[c] - a.norm.min[c]);
                }
            }
        }
        raw
    })
    .unwrap();
    for c in 0..a.train.n_vars {
        assert!((refit.min[c] - a.norm.min[c]).abs() < 1e-9);
        assert!((refit.max[c] - a.norm.max[c]).abs() < 1e-9);
    }
    let counts = StageCounts::from_labels(a.train.labels());
    assert_eq!(counts.total, a.train.len());
}

#[test]
fn empty_training_set_cannot_be_normalized() {
    assert!(matches!(
        NormStats::fit(&WindowSet::new(2, 4, vec![])),
        Err(DataError::EmptyTrainingSet)
    ));
}
