//! Forward and backward passes for the handful of layer types the refinement
//! network is built from: 1×1 (pointwise) convolution, per-channel 3×3
//! (depthwise) convolution with edge-replication padding, batch normalization
//! without learnable affine, and ReLU.
//!
//! Everything is written against [`Tensor4`] slabs with deterministic
//! accumulation order — two runs over the same data produce bit-identical
//! results, which the sidecar bitstream relies on.

use crate::tensor::{Tensor4, TensorError};

/// Gradients produced by a convolution backward pass.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dw: Vec<f64>,
    /// `None` when the layer has no bias.
    pub db: Option<Vec<f64>>,
    /// `None` when the caller does not need the input gradient
    /// (first layer of a network).
    pub dx: Option<Tensor4>,
}

fn check_param(op: &'static str, got: usize, expected: usize) -> Result<(), TensorError> {
    if got != expected {
        return Err(TensorError::ParamLength { op, expected, got });
    }
    Ok(())
}

fn check_same_shape(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<(), TensorError> {
    if a.dims() != b.dims() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a.dims(),
            got: b.dims(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 1×1 convolution
// ---------------------------------------------------------------------------

/// Pointwise convolution. Weights are `[out_c][in_c]` row-major.
pub fn pointwise_fwd(
    x: &Tensor4,
    w: &[f64],
    b: Option<&[f64]>,
    out_c: usize,
) -> Result<Tensor4, TensorError> {
    check_param("pointwise_fwd weights", w.len(), out_c * x.c())?;
    if let Some(b) = b {
        check_param("pointwise_fwd bias", b.len(), out_c)?;
    }
    let (n, in_c, h, wd) = (x.n(), x.c(), x.h(), x.w());
    let mut y = Tensor4::zeros(n, out_c, h, wd);
    for ni in 0..n {
        for f in 0..out_c {
            let dst = y.chan_mut(ni, f);
            if let Some(b) = b {
                dst.fill(b[f]);
            }
            for c in 0..in_c {
                let k = w[f * in_c + c];
                let src = x.chan(ni, c);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += k * v;
                }
            }
        }
    }
    Ok(y)
}

/// Backward pass of [`pointwise_fwd`].
pub fn pointwise_bwd(
    x: &Tensor4,
    w: &[f64],
    out_c: usize,
    dy: &Tensor4,
    need_dx: bool,
    has_bias: bool,
) -> Result<ConvGrads, TensorError> {
    check_param("pointwise_bwd weights", w.len(), out_c * x.c())?;
    let expected = [x.n(), out_c, x.h(), x.w()];
    if dy.dims() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "pointwise_bwd dy",
            expected,
            got: dy.dims(),
        });
    }
    let (n, in_c) = (x.n(), x.c());
    let mut dw = vec![0.0; w.len()];
    let mut db = if has_bias { Some(vec![0.0; out_c]) } else { None };
    for ni in 0..n {
        for f in 0..out_c {
            let g = dy.chan(ni, f);
            if let Some(db) = db.as_mut() {
                let mut s = 0.0;
                for &v in g {
                    s += v;
                }
                db[f] += s;
            }
            for c in 0..in_c {
                let src = x.chan(ni, c);
                let mut s = 0.0;
                for (&gv, &xv) in g.iter().zip(src) {
                    s += gv * xv;
                }
                dw[f * in_c + c] += s;
            }
        }
    }
    let dx = if need_dx {
        let mut dx = Tensor4::zeros(n, in_c, x.h(), x.w());
        for ni in 0..n {
            for c in 0..in_c {
                let dst = dx.chan_mut(ni, c);
                for f in 0..out_c {
                    let k = w[f * in_c + c];
                    let g = dy.chan(ni, f);
                    for (o, &v) in dst.iter_mut().zip(g) {
                        *o += k * v;
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    Ok(ConvGrads { dw, db, dx })
}

// ---------------------------------------------------------------------------
// Depthwise 3×3 convolution, edge-replication padding, stride 1
// ---------------------------------------------------------------------------
//
// Border taps read the nearest in-range pixel (codec-style edge extension)
// rather than zero. Replication commutes with any per-channel affine map,
// which is what lets BN statistics fold into the following convolution
// exactly — borders included — instead of only in the interior.

/// `dst[j] += kv · src[clamp(j + v − 1)]` for one kernel column `v`.
fn tap_row_accum(dst: &mut [f64], src: &[f64], kv: f64, v: usize) {
    let w = dst.len();
    match v {
        0 => {
            dst[0] += kv * src[0];
            for (o, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                *o += kv * s;
            }
        }
        1 => {
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += kv * s;
            }
        }
        _ => {
            for (o, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                *o += kv * s;
            }
            dst[w - 1] += kv * src[w - 1];
        }
    }
}

/// `dst[j] · src[clamp(j + v − 1)]` summed over one row pair.
fn tap_row_dot(g: &[f64], src: &[f64], v: usize) -> f64 {
    let w = g.len();
    match v {
        0 => {
            let mut s = g[0] * src[0];
            for (&gv, &sv) in g[1..].iter().zip(&src[..w - 1]) {
                s += gv * sv;
            }
            s
        }
        1 => {
            let mut s = 0.0;
            for (&gv, &sv) in g.iter().zip(src) {
                s += gv * sv;
            }
            s
        }
        _ => {
            let mut s = g[w - 1] * src[w - 1];
            for (&gv, &sv) in g[..w - 1].iter().zip(&src[1..]) {
                s += gv * sv;
            }
            s
        }
    }
}

/// Transpose of [`tap_row_accum`]: `dst[clamp(j + v − 1)] += kv · g[j]`.
fn tap_row_scatter(dst: &mut [f64], g: &[f64], kv: f64, v: usize) {
    let w = g.len();
    match v {
        0 => {
            dst[0] += kv * g[0];
            for (o, &gv) in dst[..w - 1].iter_mut().zip(&g[1..]) {
                *o += kv * gv;
            }
        }
        1 => {
            for (o, &gv) in dst.iter_mut().zip(g) {
                *o += kv * gv;
            }
        }
        _ => {
            for (o, &gv) in dst[1..].iter_mut().zip(&g[..w - 1]) {
                *o += kv * gv;
            }
            dst[w - 1] += kv * g[w - 1];
        }
    }
}

/// Output row `i` reads input row `clamp(i + u − 1)`.
fn clamp_row(i: usize, u: usize, h: usize) -> usize {
    (i + u).saturating_sub(1).min(h - 1)
}

/// Apply one 3×3 kernel to one spatial slab (same size output), accumulating
/// into `dst`. `k` is the kernel in row-major order.
fn conv3_slab_accum(src: &[f64], dst: &mut [f64], k: &[f64], h: usize, w: usize) {
    for u in 0..3 {
        for i in 0..h {
            let r = clamp_row(i, u, h);
            let srow = &src[r * w..(r + 1) * w];
            let drow = &mut dst[i * w..(i + 1) * w];
            for v in 0..3 {
                tap_row_accum(drow, srow, k[u * 3 + v], v);
            }
        }
    }
}

/// Depthwise 3×3 convolution: channel `c` of the output sees only channel `c`
/// of the input. Kernels are `[c][3][3]` row-major (9 values per channel).
pub fn depthwise3_fwd(
    x: &Tensor4,
    k: &[f64],
    b: Option<&[f64]>,
) -> Result<Tensor4, TensorError> {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    check_param("depthwise3_fwd weights", k.len(), c * 9)?;
    if let Some(b) = b {
        check_param("depthwise3_fwd bias", b.len(), c)?;
    }
    let mut y = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let dst = y.chan_mut(ni, ci);
            if let Some(b) = b {
                dst.fill(b[ci]);
            }
            conv3_slab_accum(x.chan(ni, ci), dst, &k[ci * 9..ci * 9 + 9], h, w);
        }
    }
    Ok(y)
}

/// Backward pass of [`depthwise3_fwd`].
pub fn depthwise3_bwd(
    x: &Tensor4,
    k: &[f64],
    dy: &Tensor4,
    need_dx: bool,
    has_bias: bool,
) -> Result<ConvGrads, TensorError> {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    check_param("depthwise3_bwd weights", k.len(), c * 9)?;
    check_same_shape("depthwise3_bwd dy", x, dy)?;
    let mut dk = vec![0.0; k.len()];
    let mut db = if has_bias { Some(vec![0.0; c]) } else { None };
    for ni in 0..n {
        for ci in 0..c {
            let g = dy.chan(ni, ci);
            let src = x.chan(ni, ci);
            if let Some(db) = db.as_mut() {
                let mut s = 0.0;
                for &v in g {
                    s += v;
                }
                db[ci] += s;
            }
            // dk[u][v] = Σ_{i,j} dy[i,j] · x[clamp(i+u−1), clamp(j+v−1)].
            for u in 0..3usize {
                for i in 0..h {
                    let r = clamp_row(i, u, h);
                    let srow = &src[r * w..(r + 1) * w];
                    let grow = &g[i * w..(i + 1) * w];
                    for v in 0..3usize {
                        dk[ci * 9 + u * 3 + v] += tap_row_dot(grow, srow, v);
                    }
                }
            }
        }
    }
    let dx = if need_dx {
        // Exact transpose of the clamped forward: dy[i,j] flows back into
        // x[clamp(i+u−1), clamp(j+v−1)], so edge pixels collect the taps that
        // read them through replication.
        let mut dx = Tensor4::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                let g = dy.chan(ni, ci);
                let dst = dx.chan_mut(ni, ci);
                for u in 0..3 {
                    for i in 0..h {
                        let p = clamp_row(i, u, h);
                        // Split borrows: g row i, dst row p.
                        let grow = &g[i * w..(i + 1) * w];
                        let drow = &mut dst[p * w..(p + 1) * w];
                        for v in 0..3 {
                            tap_row_scatter(drow, grow, k[ci * 9 + u * 3 + v], v);
                        }
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    Ok(ConvGrads { dw: dk, db, dx })
}

// ---------------------------------------------------------------------------
// Batch normalization (no learnable affine)
// ---------------------------------------------------------------------------

/// Running statistics of a BN layer. The update rule favors the current
/// batch: new = momentum·old + (1−momentum)·batch, with momentum 0.3 — online
/// per-GoP training has few iterations, so the estimates must move fast.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// False until the first training batch has contributed statistics.
    pub primed: bool,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.3;

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            primed: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// What the train-mode backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    inv_std: Vec<f64>,
}

/// Train-mode BN: normalize with the statistics of this batch (biased
/// variance) and fold them into the running estimates.
///
/// Returns the normalized tensor, which doubles as x̂ for the backward pass.
pub fn bn_fwd_train(x: &Tensor4, st: &mut BnState) -> Result<(Tensor4, BnCache), TensorError> {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    check_param("bn_fwd_train channels", st.channels(), c)?;
    let m = (n * h * w) as f64;
    if m == 0.0 {
        return Err(TensorError::Invalid("bn_fwd_train: empty batch".into()));
    }
    let mut y = Tensor4::zeros(n, c, h, w);
    let mut inv_std = vec![0.0; c];
    for (ci, inv_slot) in inv_std.iter_mut().enumerate() {
        let mut sum = 0.0;
        for ni in 0..n {
            for &v in x.chan(ni, ci) {
                sum += v;
            }
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for ni in 0..n {
            for &v in x.chan(ni, ci) {
                let d = v - mean;
                sq += d * d;
            }
        }
        let var = sq / m;
        let inv = 1.0 / (var + st.eps).sqrt();
        *inv_slot = inv;
        for ni in 0..n {
            let src = x.chan(ni, ci);
            let dst = y.chan_mut(ni, ci);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
        }
        if st.primed {
            st.mean[ci] = st.momentum * st.mean[ci] + (1.0 - st.momentum) * mean;
            st.var[ci] = st.momentum * st.var[ci] + (1.0 - st.momentum) * var;
        } else {
            // First batch seeds the estimates directly; blending against the
            // 0/1 placeholders would just slow convergence.
            st.mean[ci] = mean;
            st.var[ci] = var;
        }
    }
    st.primed = true;
    Ok((y, BnCache { inv_std }))
}

/// Backward pass of [`bn_fwd_train`], differentiating through the batch
/// statistics. `xhat` is the forward output.
pub fn bn_bwd_train(xhat: &Tensor4, cache: &BnCache, dy: &Tensor4) -> Result<Tensor4, TensorError> {
    check_same_shape("bn_bwd_train dy", xhat, dy)?;
    let (n, c, h, w) = (xhat.n(), xhat.c(), xhat.h(), xhat.w());
    check_param("bn_bwd_train channels", cache.inv_std.len(), c)?;
    let m = (n * h * w) as f64;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for ci in 0..c {
        let mut s1 = 0.0; // Σ dy
        let mut s2 = 0.0; // Σ dy·x̂
        for ni in 0..n {
            for (&g, &xh) in dy.chan(ni, ci).iter().zip(xhat.chan(ni, ci)) {
                s1 += g;
                s2 += g * xh;
            }
        }
        let inv = cache.inv_std[ci];
        let a = s1 / m;
        let b = s2 / m;
        for ni in 0..n {
            let gsl = dy.chan(ni, ci);
            let xsl = xhat.chan(ni, ci);
            let dst = dx.chan_mut(ni, ci);
            for ((o, &g), &xh) in dst.iter_mut().zip(gsl).zip(xsl) {
                *o = inv * (g - a - xh * b);
            }
        }
    }
    Ok(dx)
}

/// Eval-mode BN: normalize with the running statistics.
pub fn bn_fwd_eval(x: &Tensor4, st: &BnState) -> Result<Tensor4, TensorError> {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    check_param("bn_fwd_eval channels", st.channels(), c)?;
    if !st.primed {
        return Err(TensorError::Invalid(
            "bn_fwd_eval: running statistics never initialized".into(),
        ));
    }
    let mut y = Tensor4::zeros(n, c, h, w);
    for ci in 0..c {
        let mean = st.mean[ci];
        let inv = 1.0 / (st.var[ci] + st.eps).sqrt();
        for ni in 0..n {
            let src = x.chan(ni, ci);
            let dst = y.chan_mut(ni, ci);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
        }
    }
    Ok(y)
}

/// Backward pass of [`bn_fwd_eval`] — the statistics are constants here.
pub fn bn_bwd_eval(st: &BnState, dy: &Tensor4) -> Result<Tensor4, TensorError> {
    check_param("bn_bwd_eval channels", st.channels(), dy.c())?;
    let mut dx = dy.clone();
    for ci in 0..dy.c() {
        let inv = 1.0 / (st.var[ci] + st.eps).sqrt();
        for ni in 0..dy.n() {
            for v in dx.chan_mut(ni, ci) {
                *v *= inv;
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_fwd(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Backward pass of [`relu_fwd`]; `y` is the forward output (its positivity
/// pattern is all the mask we need).
pub fn relu_bwd(y: &Tensor4, dy: &Tensor4) -> Result<Tensor4, TensorError> {
    check_same_shape("relu_bwd dy", y, dy)?;
    let mut dx = dy.clone();
    for (o, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
        if yv <= 0.0 {
            *o = 0.0;
        }
    }
    Ok(dx)
}
