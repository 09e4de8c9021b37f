//! Differentiable primitives recorded on a [`Tape`](super::Tape).
//!
//! Layout conventions: sequence tensors are `[rows, channels, time]`, where
//! "rows" is whatever acts as the batch axis (samples × variables).

use super::tape::{BackwardCtx, Var};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Logistic function, branching on sign so neither tail overflows.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv1dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            None
        } else {
            Some((padded - kernel) / self.stride + 1)
        }
    }
}

/// Batch-norm behaviour for one call.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of this batch (over rows × time).
    Train,
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

/// Batch statistics observed in training mode, for the running-stat update.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

impl BatchStats {
    /// `running ← (1 − m)·running + m·batch`.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * self.mean[c];
            running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * self.var[c];
        }
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::dim(op, format!("expected rank {rank}, got shape {shape:?}")));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let (shape, out) = self.with_value(|s, v| (s.to_vec(), v.iter().map(|&x| f(x)).collect()));
        self.tape.push_op(
            shape,
            out,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = ctx
                    .inputs[0]
                    .iter()
                    .zip(ctx.output)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = self.tape.with_values(&[self, other], |v| {
            same_shape("add", v[0].0, v[1].0)?;
            Ok::<_, Error>((v[0].0.to_vec(), v[0].1.iter().zip(v[1].1).map(|(a, b)| a + b).collect()))
        })?;
        Ok(self.tape.push_op(
            shape,
            out,
            &[self, other],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = self.tape.with_values(&[self, other], |v| {
            same_shape("sub", v[0].0, v[1].0)?;
            Ok::<_, Error>((v[0].0.to_vec(), v[0].1.iter().zip(v[1].1).map(|(a, b)| a - b).collect()))
        })?;
        Ok(self.tape.push_op(
            shape,
            out,
            &[self, other],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|g| -g).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = self.tape.with_values(&[self, other], |v| {
            same_shape("mul", v[0].0, v[1].0)?;
            Ok::<_, Error>((v[0].0.to_vec(), v[0].1.iter().zip(v[1].1).map(|(a, b)| a * b).collect()))
        })?;
        Ok(self.tape.push_op(
            shape,
            out,
            &[self, other],
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx.needs[0].then(|| ctx.grad.iter().zip(b).map(|(g, b)| g * b).collect());
                let gb = ctx.needs[1].then(|| ctx.grad.iter().zip(a).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| if x > 0.0 { x } else { 0.0 }, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// `x·σ(x)`; derivative `σ(x)·(1 + x·(1 − σ(x)))`.
    pub fn silu(self) -> Var<'t> {
        self.unary(silu_scalar, |x, _| {
            let s = sigmoid_scalar(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn sum(self) -> Var<'t> {
        let (n, total) = self.with_value(|_, v| (v.len(), v.iter().sum::<f64>()));
        self.tape.push_op(
            vec![1],
            vec![total],
            &[self],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let (old, out) = self.with_value(|s, v| (s.to_vec(), v.to_vec()));
        if numel(shape) != out.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        Ok(self
            .tape
            .push_op(shape.to_vec(), out, &[self], Box::new(|ctx| vec![Some(ctx.grad.to_vec())])))
    }

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k, n, out) = self.tape.with_values(&[self, other], |v| {
            let (sa, a) = v[0];
            let (sb, b) = v[1];
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            Ok((m, k, n, out))
        })?;
        Ok(self.tape.push_op(
            vec![m, n],
            out,
            &[self, other],
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                // dA = G·Bᵀ
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &b[p * n..(p + 1) * n];
                            ga[i * k + p] = g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    ga
                });
                // dB = Aᵀ·G
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a[i * k + p];
                            let grow = &g[i * n..(i + 1) * n];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Applies a `[C×J]` matrix along the channel axis of `[R×C×T]`, giving
    /// `[R×J×T]` (a right-multiplication of each time step's channel vector).
    pub fn channel_matmul(self, weight: Var<'t>) -> Result<Var<'t>> {
        let (r, c, t, j, out) = self.tape.with_values(&[self, weight], |v| {
            let (sx, x) = v[0];
            let (sw, w) = v[1];
            if sx.len() != 3 || sw.len() != 2 || sx[1] != sw[0] {
                return Err(Error::ShapeMismatch {
                    op: "channel_matmul",
                    lhs: sx.to_vec(),
                    rhs: sw.to_vec(),
                });
            }
            let (r, c, t, j) = (sx[0], sx[1], sx[2], sw[1]);
            let mut out = vec![0.0; r * j * t];
            for ri in 0..r {
                for ci in 0..c {
                    let xrow = &x[(ri * c + ci) * t..(ri * c + ci + 1) * t];
                    for ji in 0..j {
                        let wv = w[ci * j + ji];
                        let orow = &mut out[(ri * j + ji) * t..(ri * j + ji + 1) * t];
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o += wv * xv;
                        }
                    }
                }
            }
            Ok((r, c, t, j, out))
        })?;
        Ok(self.tape.push_op(
            vec![r, j, t],
            out,
            &[self, weight],
            Box::new(move |ctx| {
                let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![0.0; r * c * t];
                    for ri in 0..r {
                        for ci in 0..c {
                            let dst = &mut gx[(ri * c + ci) * t..(ri * c + ci + 1) * t];
                            for ji in 0..j {
                                let wv = w[ci * j + ji];
                                let grow = &g[(ri * j + ji) * t..(ri * j + ji + 1) * t];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                    gx
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![0.0; c * j];
                    for ri in 0..r {
                        for ci in 0..c {
                            let xrow = &x[(ri * c + ci) * t..(ri * c + ci + 1) * t];
                            for ji in 0..j {
                                let grow = &g[(ri * j + ji) * t..(ri * j + ji + 1) * t];
                                gw[ci * j + ji] += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    gw
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Grouped 1-D convolution without bias: `[R×C_in×T]` with weights
    /// `[C_out × C_in/groups × K]` gives `[R×C_out×T']`,
    /// `T' = ⌊(T + 2·padding − K)/stride⌋ + 1`.
    pub fn conv1d(self, weight: Var<'t>, p: Conv1dParams) -> Result<Var<'t>> {
        let geom = self.tape.with_values(&[self, weight], |v| conv_geometry(v[0].0, v[1].0, p))?;
        let out = self
            .tape
            .with_values(&[self, weight], |v| conv_forward(&geom, v[0].1, v[1].1));
        Ok(self.tape.push_op(
            vec![geom.rows, geom.c_out, geom.t_out],
            out,
            &[self, weight],
            Box::new(move |ctx| {
                let (gx, gw) = conv_backward(&geom, ctx.inputs[0], ctx.inputs[1], ctx.grad, ctx.needs[0], ctx.needs[1]);
                vec![gx, gw]
            }),
        ))
    }

    /// Batch norm over `[R×C×T]` with per-channel affine `gamma`, `beta`.
    /// Training mode also returns the observed batch statistics.
    pub fn batchnorm1d(self, gamma: Var<'t>, beta: Var<'t>, mode: BnMode<'_>) -> Result<(Var<'t>, Option<BatchStats>)> {
        let (r, c, t) = self.tape.with_values(&[self, gamma, beta], |v| {
            expect_rank("batchnorm1d", v[0].0, 3)?;
            let c = v[0].0[1];
            if v[1].0 != [c] || v[2].0 != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm1d",
                    lhs: v[0].0.to_vec(),
                    rhs: v[1].0.to_vec(),
                });
            }
            Ok((v[0].0[0], c, v[0].0[2]))
        })?;
        let m = r * t;
        let (mean, inv_std, stats) = match mode {
            BnMode::Train => {
                if m <= 1 {
                    return Err(Error::DegenerateVariance(m));
                }
                let (mean, var) = self.with_value(|_, x| channel_moments(x, r, c, t));
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, inv_std, Some(stats))
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::dim("batchnorm1d", "running statistics do not match channels"));
                }
                let inv_std = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (running_mean.to_vec(), inv_std, None)
            }
        };
        let train = stats.is_some();
        let out = self.tape.with_values(&[self, gamma, beta], |v| {
            let (x, g, b) = (v[0].1, v[1].1, v[2].1);
            let mut out = vec![0.0; x.len()];
            for ri in 0..r {
                for ci in 0..c {
                    let base = (ri * c + ci) * t;
                    for ti in 0..t {
                        out[base + ti] = g[ci] * ((x[base + ti] - mean[ci]) * inv_std[ci]) + b[ci];
                    }
                }
            }
            out
        });
        let var = self.tape.push_op(
            vec![r, c, t],
            out,
            &[self, gamma, beta],
            Box::new(move |ctx| {
                let (x, gamma, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ri in 0..r {
                    for ci in 0..c {
                        let base = (ri * c + ci) * t;
                        for ti in 0..t {
                            let xhat = (x[base + ti] - mean[ci]) * inv_std[ci];
                            sum_g[ci] += g[base + ti];
                            sum_gx[ci] += g[base + ti] * xhat;
                        }
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![0.0; x.len()];
                    let mf = m as f64;
                    for ri in 0..r {
                        for ci in 0..c {
                            let base = (ri * c + ci) * t;
                            for ti in 0..t {
                                let i = base + ti;
                                gx[i] = if train {
                                    let xhat = (x[i] - mean[ci]) * inv_std[ci];
                                    gamma[ci] * inv_std[ci] / mf * (mf * g[i] - sum_g[ci] - xhat * sum_gx[ci])
                                } else {
                                    gamma[ci] * inv_std[ci] * g[i]
                                };
                            }
                        }
                    }
                    gx
                });
                vec![gx, ctx.needs[1].then_some(sum_gx), ctx.needs[2].then_some(sum_g)]
            }),
        );
        Ok((var, stats))
    }

    /// Mean over consecutive groups of `group` rows along axis 0:
    /// `[(G·group)×…] → [G×…]`.
    pub fn mean_pool_vars(self, group: usize) -> Result<Var<'t>> {
        let (shape, out, inner) = self.with_value(|s, x| {
            let rows = *s.first().ok_or_else(|| Error::dim("mean_pool_vars", "scalar input"))?;
            if group == 0 || rows == 0 || rows % group != 0 {
                return Err(Error::dim(
                    "mean_pool_vars",
                    format!("{rows} rows cannot be pooled in groups of {group}"),
                ));
            }
            let inner = x.len() / rows;
            let groups = rows / group;
            let mut out = vec![0.0; groups * inner];
            for gi in 0..groups {
                let dst = &mut out[gi * inner..(gi + 1) * inner];
                for k in 0..group {
                    let src = &x[(gi * group + k) * inner..(gi * group + k + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                dst.iter_mut().for_each(|d| *d /= group as f64);
            }
            let mut shape = s.to_vec();
            shape[0] = groups;
            Ok((shape, out, inner))
        })?;
        Ok(self.tape.push_op(
            shape,
            out,
            &[self],
            Box::new(move |ctx| {
                let groups = ctx.grad.len() / inner;
                let mut gx = vec![0.0; groups * group * inner];
                let scale = 1.0 / group as f64;
                for gi in 0..groups {
                    let src = &ctx.grad[gi * inner..(gi + 1) * inner];
                    for k in 0..group {
                        let dst = &mut gx[(gi * group + k) * inner..(gi * group + k + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * scale);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean over the time axis: `[R×C×T] → [R×C]`.
    pub fn global_avg_pool_time(self) -> Result<Var<'t>> {
        let (r, c, t, out) = self.with_value(|s, x| {
            expect_rank("global_avg_pool_time", s, 3)?;
            let (r, c, t) = (s[0], s[1], s[2]);
            if t == 0 {
                return Err(Error::dim("global_avg_pool_time", "empty time axis"));
            }
            let out = x.chunks_exact(t).map(|row| row.iter().sum::<f64>() / t as f64).collect();
            Ok((r, c, t, out))
        })?;
        Ok(self.tape.push_op(
            vec![r, c],
            out,
            &[self],
            Box::new(move |ctx| {
                let gx = ctx.grad.iter().flat_map(|&g| std::iter::repeat_n(g / t as f64, t)).collect();
                vec![Some(gx)]
            }),
        ))
    }

    /// `(1/2n)·‖target − pred‖²` over all `n` elements.
    pub fn mse_loss(self, target: Var<'t>) -> Result<Var<'t>> {
        let (n, loss) = self.tape.with_values(&[self, target], |v| {
            same_shape("mse_loss", v[0].0, v[1].0)?;
            let n = v[0].1.len();
            if n == 0 {
                return Err(Error::EmptyBatch);
            }
            let sq: f64 = v[0].1.iter().zip(v[1].1).map(|(p, y)| (y - p) * (y - p)).sum();
            Ok((n, sq / (2.0 * n as f64)))
        })?;
        Ok(self.tape.push_op(
            vec![1],
            vec![loss],
            &[self, target],
            Box::new(move |ctx| {
                let s = ctx.grad[0] / n as f64;
                let (p, y) = (ctx.inputs[0], ctx.inputs[1]);
                let gp = ctx.needs[0].then(|| p.iter().zip(y).map(|(p, y)| s * (p - y)).collect());
                let gy = ctx.needs[1].then(|| p.iter().zip(y).map(|(p, y)| s * (y - p)).collect());
                vec![gp, gy]
            }),
        ))
    }

    /// Stacks `self` and `other` along axis 0.
    pub fn concat_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out, split) = self.tape.with_values(&[self, other], |v| {
            let (sa, sb) = (v[0].0, v[1].0);
            if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let mut shape = sa.to_vec();
            shape[0] += sb[0];
            let mut out = Vec::with_capacity(v[0].1.len() + v[1].1.len());
            out.extend_from_slice(v[0].1);
            out.extend_from_slice(v[1].1);
            Ok((shape, out, v[0].1.len()))
        })?;
        Ok(self.tape.push_op(
            shape,
            out,
            &[self, other],
            Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad[..split].to_vec()),
                    ctx.needs[1].then(|| ctx.grad[split..].to_vec()),
                ]
            }),
        ))
    }

    /// Rows `idx` of axis 0, in order (indices may repeat).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let idx = idx.to_vec();
        let (shape, out, inner, rows) = self.with_value(|s, x| {
            let rows = *s.first().ok_or_else(|| Error::dim("gather_rows", "scalar input"))?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(Error::dim("gather_rows", format!("row {bad} out of {rows}")));
            }
            let inner = if rows == 0 { 0 } else { x.len() / rows };
            let mut out = Vec::with_capacity(idx.len() * inner);
            for &i in &idx {
                out.extend_from_slice(&x[i * inner..(i + 1) * inner]);
            }
            let mut shape = s.to_vec();
            shape[0] = idx.len();
            Ok((shape, out, inner, rows))
        })?;
        Ok(self.tape.push_op(
            shape,
            out,
            &[self],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; rows * inner];
                for (k, &i) in idx.iter().enumerate() {
                    let src = &ctx.grad[k * inner..(k + 1) * inner];
                    gx[i * inner..(i + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Repeats a single-row tensor `n` times along axis 0.
    pub fn broadcast_rows(self, n: usize) -> Result<Var<'t>> {
        let (shape, out, inner) = self.with_value(|s, x| {
            if s.first() != Some(&1) {
                return Err(Error::dim("broadcast_rows", format!("expected one row, got {s:?}")));
            }
            let mut shape = s.to_vec();
            shape[0] = n;
            Ok((shape, x.repeat(n), x.len()))
        })?;
        Ok(self.tape.push_op(
            shape,
            out,
            &[self],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; inner];
                for chunk in ctx.grad.chunks_exact(inner.max(1)) {
                    gx.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Adds `bias[K]` to every row of `[…×K]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (shape, out, k) = self.tape.with_values(&[self, bias], |v| {
            let (sx, x) = v[0];
            let (sb, b) = v[1];
            if sb.len() != 1 || sx.last() != Some(&sb[0]) {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    lhs: sx.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let k = sb[0];
            let out = x.iter().enumerate().map(|(i, xv)| xv + b[i % k]).collect();
            Ok((sx.to_vec(), out, k))
        })?;
        Ok(self.tape.push_op(
            shape,
            out,
            &[self, bias],
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; k];
                    ctx.grad.iter().enumerate().for_each(|(i, g)| gb[i % k] += g);
                    gb
                });
                vec![Some(ctx.grad.to_vec()), gb]
            }),
        ))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, mask: &Tensor) -> Result<Var<'t>> {
        let m = self.tape.constant(mask);
        self.mul(m)
    }
}

fn channel_moments(x: &[f64], r: usize, c: usize, t: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (r * t) as f64;
    let mut mean = vec![0.0; c];
    for ri in 0..r {
        for ci in 0..c {
            mean[ci] += x[(ri * c + ci) * t..(ri * c + ci + 1) * t].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for ri in 0..r {
        for ci in 0..c {
            var[ci] += x[(ri * c + ci) * t..(ri * c + ci + 1) * t]
                .iter()
                .map(|v| (v - mean[ci]) * (v - mean[ci]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    rows: usize,
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    t_out: usize,
    cin_g: usize,
    cout_g: usize,
    p: Conv1dParams,
}

impl ConvGeom {
    /// Output positions `t` whose input index `t·stride + k − pad` is in range.
    fn valid_range(&self, tap: usize) -> (usize, usize) {
        let s = self.p.stride;
        let pad = self.p.padding;
        let lo = if pad > tap { (pad - tap).div_ceil(s) } else { 0 };
        // largest t with t·s + tap − pad ≤ t_in − 1
        let hi_num = self.t_in + pad - 1;
        if hi_num < tap {
            return (1, 0);
        }
        let hi = ((hi_num - tap) / s).min(self.t_out.saturating_sub(1));
        (lo, hi)
    }
}

fn conv_geometry(sx: &[usize], sw: &[usize], p: Conv1dParams) -> Result<ConvGeom> {
    if sx.len() != 3 || sw.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            lhs: sx.to_vec(),
            rhs: sw.to_vec(),
        });
    }
    let (rows, c_in, t_in) = (sx[0], sx[1], sx[2]);
    let (c_out, cin_g, k) = (sw[0], sw[1], sw[2]);
    if p.groups == 0 || c_in % p.groups != 0 || c_out % p.groups != 0 || cin_g != c_in / p.groups {
        return Err(Error::dim(
            "conv1d",
            format!("groups {} incompatible with input {sx:?} and weight {sw:?}", p.groups),
        ));
    }
    if k == 0 {
        return Err(Error::dim("conv1d", "empty kernel"));
    }
    let t_out = p.output_len(t_in, k).ok_or_else(|| {
        Error::dim(
            "conv1d",
            format!("kernel {k} longer than padded input {} (stride {})", t_in + 2 * p.padding, p.stride),
        )
    })?;
    Ok(ConvGeom {
        rows,
        c_in,
        t_in,
        c_out,
        k,
        t_out,
        cin_g,
        cout_g: c_out / p.groups,
        p,
    })
}

impl ConvGeom {
    /// Columns per group: every (row, output step) pair.
    fn cols(&self) -> usize {
        self.rows * self.t_out
    }

    /// Unfolds group `grp` of `x` into `[(cin_g·k) × (rows·t_out)]`, zero
    /// where the kernel hangs over the padding.
    fn im2col(&self, x: &[f64], grp: usize) -> Vec<f64> {
        let (n, s, pad) = (self.cols(), self.p.stride, self.p.padding);
        let mut col = vec![0.0; self.cin_g * self.k * n];
        for icl in 0..self.cin_g {
            let ic = grp * self.cin_g + icl;
            for tap in 0..self.k {
                let (lo, hi) = self.valid_range(tap);
                let dst = &mut col[(icl * self.k + tap) * n..(icl * self.k + tap + 1) * n];
                for r in 0..self.rows {
                    let xrow = &x[(r * self.c_in + ic) * self.t_in..(r * self.c_in + ic + 1) * self.t_in];
                    for t in lo..=hi.min(self.t_out.saturating_sub(1)) {
                        dst[r * self.t_out + t] = xrow[t * s + tap - pad];
                    }
                }
            }
        }
        col
    }

    /// Adds an unfolded gradient back onto the input positions it came from.
    fn col2im(&self, col: &[f64], grp: usize, gx: &mut [f64]) {
        let (n, s, pad) = (self.cols(), self.p.stride, self.p.padding);
        for icl in 0..self.cin_g {
            let ic = grp * self.cin_g + icl;
            for tap in 0..self.k {
                let (lo, hi) = self.valid_range(tap);
                let src = &col[(icl * self.k + tap) * n..(icl * self.k + tap + 1) * n];
                for r in 0..self.rows {
                    let xrow = &mut gx[(r * self.c_in + ic) * self.t_in..(r * self.c_in + ic + 1) * self.t_in];
                    for t in lo..=hi.min(self.t_out.saturating_sub(1)) {
                        xrow[t * s + tap - pad] += src[r * self.t_out + t];
                    }
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.rows * g.c_out * g.t_out];
    let (n, j) = (g.cols(), g.cin_g * g.k);
    let mut acc = vec![0.0; n];
    for grp in 0..g.p.groups {
        let col = g.im2col(x, grp);
        for ocl in 0..g.cout_g {
            let oc = grp * g.cout_g + ocl;
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (jj, &wv) in w[oc * j..(oc + 1) * j].iter().enumerate() {
                for (a, c) in acc.iter_mut().zip(&col[jj * n..(jj + 1) * n]) {
                    *a += wv * c;
                }
            }
            for r in 0..g.rows {
                out[(r * g.c_out + oc) * g.t_out..(r * g.c_out + oc + 1) * g.t_out]
                    .copy_from_slice(&acc[r * g.t_out..(r + 1) * g.t_out]);
            }
        }
    }
    out
}

fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, j) = (g.cols(), g.cin_g * g.k);
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut grow = vec![0.0; n];
    for grp in 0..g.p.groups {
        let col = need_w.then(|| g.im2col(x, grp));
        let mut gcol = need_x.then(|| vec![0.0; j * n]);
        for ocl in 0..g.cout_g {
            let oc = grp * g.cout_g + ocl;
            for r in 0..g.rows {
                grow[r * g.t_out..(r + 1) * g.t_out]
                    .copy_from_slice(&grad[(r * g.c_out + oc) * g.t_out..(r * g.c_out + oc + 1) * g.t_out]);
            }
            if let (Some(gw), Some(col)) = (gw.as_mut(), col.as_ref()) {
                for jj in 0..j {
                    gw[oc * j + jj] += grow.iter().zip(&col[jj * n..(jj + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(gcol) = gcol.as_mut() {
                for (jj, &wv) in w[oc * j..(oc + 1) * j].iter().enumerate() {
                    for (d, gv) in gcol[jj * n..(jj + 1) * n].iter_mut().zip(&grow) {
                        *d += wv * gv;
                    }
                }
            }
        }
        if let (Some(gx), Some(gcol)) = (gx.as_mut(), gcol.as_ref()) {
            g.col2im(gcol, grp, gx);
        }
    }
    (gx, gw)
}
