use pmts_core::autodiff::{grad_check, silu_scalar, sigmoid_scalar, BnMode, Conv1dParams, Tape, Tensor, Var, BN_EPS};
use pmts_core::Rng;
use proptest::prelude::*;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).unwrap()
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> pmts_core::Result<Var<'t>> {
    let r = rand_tensor(&mut Rng::new(seed), &y.shape());
    Ok(y.mul(tape.constant(&r))?.sum())
}

fn naive_conv(x: &Tensor, w: &Tensor, p: Conv1dParams) -> Vec<f64> {
    let (r, c_in, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, cg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let out_per_group = c_out / p.groups;
    let t_out = (t + 2 * p.padding - k) / p.stride + 1;
    let mut out = vec![0.0; r * c_out * t_out];
    for ri in 0..r {
        for co in 0..c_out {
            let g = co / out_per_group;
            for to in 0..t_out {
                let mut acc = 0.0;
                for ci in 0..cg {
                    for ki in 0..k {
                        let pos = (to * p.stride + ki) as isize - p.padding as isize;
                        if pos >= 0 && (pos as usize) < t {
                            acc += w.data()[(co * cg + ci) * k + ki] * x.data()[(ri * c_in + g * cg + ci) * t + pos as usize];
                        }
                    }
                }
                out[(ri * c_out + co) * t_out + to] = acc;
            }
        }
    }
    out
}

struct ConvCase {
    x: Tensor,
    w: Tensor,
    p: Conv1dParams,
}

fn conv_case(rng: &mut Rng) -> ConvCase {
    let groups = rng.int_range(1, 3);
    let c_in = groups * rng.int_range(1, 3);
    let c_out = groups * rng.int_range(1, 3);
    let k = rng.int_range(1, 4);
    let t = rng.int_range(k, 12);
    let p = Conv1dParams::new(rng.int_range(1, 3), rng.int_range(0, 2), groups);
    ConvCase {
        x: rand_tensor(rng, &[rng.clone().int_range(1, 3), c_in, t]),
        w: rand_tensor(rng, &[c_out, c_in / groups, k]),
        p,
    }
}

#[test]
fn conv1d_matches_naive_loops() {
    let mut rng = Rng::new(1);
    for _ in 0..50 {
        let c = conv_case(&mut rng);
        let tape = Tape::new();
        let y = tape.constant(&c.x).conv1d(tape.constant(&c.w), c.p).unwrap();
        let oracle = naive_conv(&c.x, &c.w, c.p);
        assert_eq!(y.data().len(), oracle.len());
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv1d_gradients() {
    let mut rng = Rng::new(2);
    for i in 0..30 {
        let c = conv_case(&mut rng);
        let (w, p) = (c.w.clone(), c.p);
        let e = grad_check(|t, x| project(t, x.conv1d(t.constant(&w), p)?, i), &c.x, H).unwrap();
        assert!(e < TOL, "input grad case {i}: {e}");
        let x = c.x.clone();
        let e = grad_check(|t, w| project(t, t.constant(&x).conv1d(w, p)?, i), &c.w, H).unwrap();
        assert!(e < TOL, "weight grad case {i}: {e}");
    }
}

#[test]
fn matmul_matches_loops_and_gradients() {
    let mut rng = Rng::new(3);
    for i in 0..20 {
        let (m, k, n) = (rng.int_range(1, 5), rng.int_range(1, 5), rng.int_range(1, 5));
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let tape = Tape::new();
        let y = tape.constant(&a).matmul(tape.constant(&b)).unwrap();
        for r in 0..m {
            for c in 0..n {
                let o: f64 = (0..k).map(|p| a.data()[r * k + p] * b.data()[p * n + c]).sum();
                assert!((y.data()[r * n + c] - o).abs() < 1e-12);
            }
        }
        let bb = b.clone();
        assert!(grad_check(|t, x| project(t, x.matmul(t.constant(&bb))?, i), &a, H).unwrap() < TOL);
        let aa = a.clone();
        assert!(grad_check(|t, x| project(t, t.constant(&aa).matmul(x)?, i), &b, H).unwrap() < TOL);
    }
}

#[test]
fn channel_matmul_is_per_step_matmul() {
    let mut rng = Rng::new(4);
    let x = rand_tensor(&mut rng, &[2, 3, 5]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    let tape = Tape::new();
    let y = tape.constant(&x).channel_matmul(tape.constant(&w)).unwrap();
    assert_eq!(y.shape(), vec![2, 4, 5]);
    for r in 0..2 {
        for j in 0..4 {
            for t in 0..5 {
                let o: f64 = (0..3).map(|c| x.data()[(r * 3 + c) * 5 + t] * w.data()[c * 4 + j]).sum();
                assert!((y.data()[(r * 4 + j) * 5 + t] - o).abs() < 1e-12);
            }
        }
    }
    let ww = w.clone();
    assert!(grad_check(|t, v| project(t, v.channel_matmul(t.constant(&ww))?, 0), &x, H).unwrap() < TOL);
    let xx = x.clone();
    assert!(grad_check(|t, v| project(t, t.constant(&xx).channel_matmul(v)?, 0), &w, H).unwrap() < TOL);
}

#[test]
fn batchnorm_train_mode_matches_hand_formula() {
    let mut rng = Rng::new(5);
    let x = rand_tensor(&mut rng, &[3, 2, 4]);
    let gamma = Tensor::from_vec(vec![1.5, -0.5]);
    let beta = Tensor::from_vec(vec![0.1, 0.2]);
    let tape = Tape::new();
    let (y, stats) = tape
        .constant(&x)
        .batchnorm1d(tape.constant(&gamma), tape.constant(&beta), BnMode::Train)
        .unwrap();
    let stats = stats.unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |t| (r, t))).map(|(r, t)| x.data()[(r * 2 + c) * 4 + t]).collect();
        let m = vals.iter().sum::<f64>() / 12.0;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 12.0;
        assert!((stats.mean[c] - m).abs() < 1e-12);
        assert!((stats.var[c] - var * 12.0 / 11.0).abs() < 1e-12);
        for r in 0..3 {
            for t in 0..4 {
                let i = (r * 2 + c) * 4 + t;
                let o = gamma.data()[c] * (x.data()[i] - m) / (var + BN_EPS).sqrt() + beta.data()[c];
                assert!((y.data()[i] - o).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batchnorm_eval_mode_uses_running_stats() {
    let x = Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
    let tape = Tape::new();
    let (y, stats) = tape
        .constant(&x)
        .batchnorm1d(
            tape.constant(&Tensor::from_vec(vec![2.0])),
            tape.constant(&Tensor::from_vec(vec![1.0])),
            BnMode::Eval {
                running_mean: &[1.0],
                running_var: &[4.0 - BN_EPS],
            },
        )
        .unwrap();
    assert!(stats.is_none());
    assert!((y.data()[0] - 1.0).abs() < 1e-12);
    assert!((y.data()[1] - 3.0).abs() < 1e-12);
}

#[test]
fn batchnorm_gradients() {
    let mut rng = Rng::new(6);
    for i in 0..10 {
        let x = rand_tensor(&mut rng, &[3, 2, 5]);
        let g = rand_tensor(&mut rng, &[2]);
        let b = rand_tensor(&mut rng, &[2]);
        let e = grad_check(
            |t, v| {
                let (y, _) = v.batchnorm1d(t.constant(&g), t.constant(&b), BnMode::Train)?;
                project(t, y, i)
            },
            &x,
            H,
        );
        assert!(e.unwrap() < TOL);
        let e = grad_check(
            |t, v| {
                let (y, _) = t.constant(&x).batchnorm1d(v, t.constant(&b), BnMode::Train)?;
                project(t, y, i)
            },
            &g,
            H,
        );
        assert!(e.unwrap() < TOL);
        let e = grad_check(
            |t, v| {
                let (y, _) = t.constant(&x).batchnorm1d(t.constant(&g), v, BnMode::Train)?;
                project(t, y, i)
            },
            &b,
            H,
        );
        assert!(e.unwrap() < TOL);
    }
}

#[test]
fn activations_match_scalar_definitions() {
    for &x in &[-30.0, -2.0, -1e-3, 0.0, 0.5, 3.0, 40.0] {
        let s = 1.0 / (1.0 + f64::exp(-x));
        assert!((sigmoid_scalar(x) - s).abs() < 1e-15);
        assert!((silu_scalar(x) - x * s).abs() < 1e-12);
    }
    let mut rng = Rng::new(7);
    let x = rand_tensor(&mut rng, &[4, 3]);
    for i in 0..3u64 {
        let e = grad_check(
            |t, v| {
                let y = match i {
                    0 => v.relu(),
                    1 => v.sigmoid(),
                    _ => v.silu(),
                };
                project(t, y, i)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(e < TOL, "activation {i}: {e}");
    }
}

#[test]
fn pools_match_loops_and_gradients() {
    let mut rng = Rng::new(8);
    let x = rand_tensor(&mut rng, &[6, 2, 3]);
    let tape = Tape::new();
    let v = tape.constant(&x);
    let p = v.mean_pool_vars(3).unwrap();
    assert_eq!(p.shape(), vec![2, 2, 3]);
    for g in 0..2 {
        for i in 0..6 {
            let o: f64 = (0..3).map(|r| x.data()[(g * 3 + r) * 6 + i]).sum::<f64>() / 3.0;
            assert!((p.data()[g * 6 + i] - o).abs() < 1e-12);
        }
    }
    let a = v.global_avg_pool_time().unwrap();
    assert_eq!(a.shape(), vec![6, 2]);
    for rc in 0..12 {
        let o: f64 = x.data()[rc * 3..rc * 3 + 3].iter().sum::<f64>() / 3.0;
        assert!((a.data()[rc] - o).abs() < 1e-12);
    }
    assert!(v.mean_pool_vars(4).is_err());
    assert!(grad_check(|t, v| project(t, v.mean_pool_vars(3)?, 1), &x, H).unwrap() < TOL);
    assert!(grad_check(|t, v| project(t, v.global_avg_pool_time()?, 2), &x, H).unwrap() < TOL);
}

#[test]
fn row_ops_gradients() {
    let mut rng = Rng::new(9);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let other = rand_tensor(&mut rng, &[2, 3]);
    let one = rand_tensor(&mut rng, &[1, 3]);
    let bias = rand_tensor(&mut rng, &[3]);
    let o = other.clone();
    assert!(grad_check(|t, v| project(t, v.concat_rows(t.constant(&o))?, 1), &x, H).unwrap() < TOL);
    assert!(grad_check(|t, v| project(t, v.gather_rows(&[3, 0, 0, 2, 1])?, 2), &x, H).unwrap() < TOL);
    assert!(grad_check(|t, v| project(t, v.broadcast_rows(5)?, 3), &one, H).unwrap() < TOL);
    let b = bias.clone();
    assert!(grad_check(|t, v| project(t, v.add_bias(t.constant(&b))?, 4), &x, H).unwrap() < TOL);
    let xx = x.clone();
    assert!(grad_check(|t, v| project(t, t.constant(&xx).add_bias(v)?, 5), &bias, H).unwrap() < TOL);
    assert!(grad_check(|t, v| project(t, v.reshape(&[2, 6])?, 6), &x, H).unwrap() < TOL);
    assert!(grad_check(|_, v| Ok(v.scale(-2.5).sum()), &x, H).unwrap() < TOL);
    let m = other.clone();
    assert!(grad_check(|t, v| project(t, v.sub(t.constant(&m))?, 7), &other, H).unwrap() < TOL);
}

#[test]
fn mse_loss_value_and_gradient() {
    let p = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    let y = Tensor::from_vec(vec![1.0, 1.0, 1.0]);
    let tape = Tape::new();
    let l = tape.constant(&p).mse_loss(tape.constant(&y)).unwrap();
    assert!((l.item() - (0.25 + 4.0 + 1.0) / 6.0).abs() < 1e-15);
    let yy = y.clone();
    assert!(grad_check(|t, v| v.mse_loss(t.constant(&yy)), &p, H).unwrap() < TOL);
    assert!(grad_check(|t, v| t.constant(&p).mse_loss(v), &y, H).unwrap() < TOL);
}

#[test]
fn shape_errors_are_reported() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 2]));
    assert!(a.add(b).is_err());
    assert!(a.matmul(b).is_err());
    assert!(a.reshape(&[5]).is_err());
    assert!(a.gather_rows(&[2]).is_err());
    let x = tape.constant(&Tensor::zeros(&[1, 2, 3]));
    assert!(x.conv1d(tape.constant(&Tensor::zeros(&[2, 2, 5])), Conv1dParams::new(1, 0, 1)).is_err());
}

proptest! {
    #[test]
    fn add_and_mul_commute(v in prop::collection::vec(-10.0f64..10.0, 1..20), seed in 0u64..1000) {
        let n = v.len();
        let a = Tensor::from_vec(v);
        let b = Tensor::from_vec(Rng::new(seed).normal_vec(n, 1.0));
        let tape = Tape::new();
        let (x, y) = (tape.constant(&a), tape.constant(&b));
        prop_assert_eq!(x.add(y).unwrap().value(), y.add(x).unwrap().value());
        prop_assert_eq!(x.mul(y).unwrap().value(), y.mul(x).unwrap().value());
    }

    #[test]
    fn gradient_of_sum_is_ones(v in prop::collection::vec(-10.0f64..10.0, 1..30)) {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(v.clone()).with_requires_grad());
        let g = tape.backward(x.sum()).unwrap().get_or_zero(x);
        prop_assert!(g.iter().all(|&d| d == 1.0));
    }
}
