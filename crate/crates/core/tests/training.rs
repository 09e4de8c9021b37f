use pmts_core::backbone::{BackboneSpec, BackboneState};
use pmts_core::data::{gen_synthetic, FewShotConfig, OnsetConfig, PrepareConfig, PreparedDataset, SyntheticConfig, WindowSet};
use pmts_core::params::{ParamKind, ParamStore};
use pmts_core::peft::{HeadInit, ModelConfig, PeftModel};
use pmts_core::train::{
    evaluate, finetune, lr_schedule, metrics, probe_subset, write_trace_csv, AdamW, AdamWConfig, TrainConfig,
};
use pmts_core::{Error, Rng};

/// Desk-scale task: 3 channels, 30-step windows, 40 training samples.
fn desk_task(seed: u64) -> (WindowSet, WindowSet) {
    let units = gen_synthetic(&SyntheticConfig { seed, ..Default::default() }).unwrap();
    let cfg = PrepareConfig {
        window: 30,
        step: 15,
        knee: None,
        onset: OnsetConfig::default(),
        fewshot: FewShotConfig::new(0.5, 1.0, 1.0, seed),
    };
    let (ds, _, _) = PreparedDataset::build(&units, None, &cfg).unwrap();
    (probe_subset(&ds.train, 40, seed), ds.test)
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..Default::default()
    }
}

#[test]
fn adamw_matches_hand_iterated_scalar() {
    let mut store = ParamStore::new();
    let id = store.add("w", pmts_core::autodiff::Tensor::from_vec(vec![0.7]), ParamKind::Weight);
    let cfg = AdamWConfig::default();
    let mut opt = AdamW::new(cfg);
    let (lr, g) = (0.05, 0.3);
    let (mut w, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        opt.step(&mut store, &[(id, vec![g])], lr).unwrap();
        w *= 1.0 - lr * cfg.weight_decay;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= lr * mh / (vh.sqrt() + 1e-8);
        assert!((store.tensor(id).data()[0] - w).abs() < 1e-12);
    }
    assert_eq!(opt.state.step, 3);
}

#[test]
fn schedule_values() {
    assert_eq!(lr_schedule(0, 1e-3, 0.99), 1e-3);
    assert!((lr_schedule(1, 1e-3, 0.99) - 9.9e-4).abs() < 1e-18);
    assert!((lr_schedule(100, 1e-3, 0.99) - 3.66e-4).abs() < 1e-6);
}

fn naive_metrics(y: &[f64], p: &[f64]) -> (f64, f64, f64, f64) {
    let n = y.len() as f64;
    let mut mae = 0.0;
    let mut mse = 0.0;
    let mut mape = 0.0;
    let mut kept = 0.0;
    let mut smape = 0.0;
    for i in 0..y.len() {
        let e = y[i] - p[i];
        mae += e.abs();
        mse += e * e;
        if y[i] != 0.0 {
            mape += (e / y[i]).abs();
            kept += 1.0;
        }
        if y[i] != 0.0 || p[i] != 0.0 {
            smape += 2.0 * e.abs() / (y[i].abs() + p[i].abs());
        }
    }
    (mae / n, (mse / n).sqrt(), 100.0 * mape / kept, 100.0 * smape / n)
}

#[test]
fn metrics_match_scalar_oracles() {
    let mut rng = Rng::new(11);
    for case in 0..100 {
        let n = rng.int_range(1, 50);
        let y: Vec<f64> = (0..n).map(|i| if i == 0 && case % 3 == 0 { 0.0 } else { rng.uniform() + 0.01 }).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.uniform_range(-0.2, 1.2)).collect();
        let m = metrics(&y, &p).unwrap();
        let (mae, rmse, mape, smape) = naive_metrics(&y, &p);
        assert!((m.mae - mae).abs() < 1e-12);
        assert!((m.rmse - rmse).abs() < 1e-12);
        assert!(m.rmse >= m.mae - 1e-15);
        if let Some(v) = m.mape {
            assert!((v - mape).abs() < 1e-12 * mape.max(1.0));
        }
        assert!((m.smape - smape).abs() < 1e-12 * smape.max(1.0));
    }
    assert_eq!(metrics(&[0.0], &[0.5]).unwrap().smape, 200.0);
    let m = metrics(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
    assert_eq!((m.mae, m.rmse, m.mape), (1.0, 1.0, Some(100.0)));
}

#[test]
fn empty_sets_are_errors() {
    let (train, _) = desk_task(0);
    let bb = BackboneState::build(&BackboneSpec::desk(), &mut Rng::new(0)).unwrap();
    let mut m = PeftModel::build(&ModelConfig::desk(), Some(&bb), 3, 30, &mut Rng::new(0)).unwrap();
    let empty = WindowSet::new(3, 30, vec![]);
    assert!(matches!(finetune(&mut m, &empty, None, &short(1), "x", 0), Err(Error::EmptyBatch)));
    assert!(evaluate(&m, &empty).is_err());
    assert!(evaluate(&m, &train).is_ok());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (train, _) = desk_task(1);
    let bb = BackboneState::build(&BackboneSpec::desk(), &mut Rng::new(0)).unwrap();
    let mut m = PeftModel::build(&ModelConfig::desk(), Some(&bb), 3, 30, &mut Rng::new(0)).unwrap();
    let before = m.to_bytes();
    let one = train.subset(&[0]);
    let cfg = TrainConfig { lr: 0.0, ..short(1) };
    finetune(&mut m, &one, None, &cfg, "peft", 0).unwrap();
    assert_eq!(m.to_bytes(), before);
}

#[test]
fn epoch_zero_loss_of_a_zero_head_is_half_mean_square_label() {
    let (train, test) = desk_task(2);
    let bb = BackboneState::build(&BackboneSpec::desk(), &mut Rng::new(0)).unwrap();
    let expected = train.labels().iter().map(|y| y * y).sum::<f64>() / (2 * train.len()) as f64;
    for seed in 0..3 {
        let mut m = PeftModel::build(&ModelConfig::desk(), Some(&bb), 3, 30, &mut Rng::new(seed)).unwrap();
        let probe = probe_subset(&test, 32, 0);
        let trace = finetune(&mut m, &train, Some(&probe), &short(1), "peft", seed).unwrap();
        assert_eq!(trace.epochs[0].loss_mean, expected);
        assert_eq!(trace.epochs.len(), 2);
        assert_eq!(trace.epochs[1].batch_losses.len(), 5);
        assert_eq!(trace.epochs[1].probe_norms.len(), probe.len());
    }
}

#[test]
fn frozen_backbone_and_determinism() {
    let (train, test) = desk_task(3);
    let bb = BackboneState::build(&BackboneSpec::desk(), &mut Rng::new(5)).unwrap();
    let probe = probe_subset(&test, 8, 0);
    let run = || {
        let mut m = PeftModel::build(&ModelConfig::desk(), Some(&bb), 3, 30, &mut Rng::new(9)).unwrap();
        let trace = finetune(&mut m, &train, Some(&probe), &short(3), "peft", 9).unwrap();
        (m, trace)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a.backbone_bytes(), bb.to_bytes());
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(ta, tb);
    assert_ne!(a.tuned_bytes(), PeftModel::build(&ModelConfig::desk(), Some(&bb), 3, 30, &mut Rng::new(9)).unwrap().tuned_bytes());

    let mut csv = Vec::new();
    write_trace_csv(&mut csv, &[ta]).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,loss_mean,sigma_z_norm,lr,seed,arm\n"));
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn desk_smoke_training_reduces_loss() {
    let bb = BackboneState::build(&BackboneSpec::desk(), &mut Rng::new(0)).unwrap();
    let mut improved = 0;
    for seed in 0..5 {
        let (train, _) = desk_task(10 + seed);
        let mut m = PeftModel::build(&ModelConfig::desk(), Some(&bb), 3, 30, &mut Rng::new(seed)).unwrap();
        let trace = finetune(&mut m, &train, None, &short(50), "peft", seed).unwrap();
        if trace.loss_at(50).unwrap() < trace.loss_at(1).unwrap() {
            improved += 1;
        }
    }
    assert!(improved >= 4, "{improved}/5 seeds improved");
}

#[test]
fn unfrozen_arm_trains_the_backbone() {
    let (train, _) = desk_task(4);
    let bb = BackboneState::build(&BackboneSpec::desk(), &mut Rng::new(0)).unwrap();
    let cfg = ModelConfig::desk().full_finetune().with_head(HeadInit::Kaiming);
    let mut m = PeftModel::build(&cfg, Some(&bb), 3, 30, &mut Rng::new(0)).unwrap();
    finetune(&mut m, &train, None, &short(1), "full", 0).unwrap();
    assert_ne!(m.backbone_bytes(), bb.to_bytes());
}
