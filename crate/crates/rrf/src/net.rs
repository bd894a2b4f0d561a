//! The refinement network: a fixed five-layer depthwise-separable stack
//! operating on space-to-depth packed planes.
//!
//! ```text
//!   pack ─ conv1x1 ─ relu ─ bn ─ dw3x3 ─ relu ─ bn ─ conv1x1 ─ relu
//!                                 ─ bn ─ dw3x3 ─ relu ─ bn ─ conv1x1 ─ unpack
//! ```
//!
//! Luma and chroma get separate networks. Chroma packs U and V jointly
//! (U channels first), so its network sees and predicts both planes at once.
//! The final convolution has no trained bias and no ReLU — it predicts a
//! signed residual. Batch normalization precedes every convolution except the
//! first and carries no learnable affine, which is what makes it foldable
//! into the following convolution for signalling.
//!
//! During training the input is padded with two zero rows at the bottom and
//! two zero columns at the right, and the output cropped back. The constant
//! region damps the batch-statistic estimates of small patches; the loss
//! never sees it.

use rand::Rng;

use crate::layers::{
    bn_bwd_train, bn_fwd_eval, bn_fwd_train, depthwise3_bwd, depthwise3_fwd, pointwise_bwd,
    pointwise_fwd, relu_bwd, relu_fwd, BnCache, BnState,
};
use crate::tensor::{Tensor4, TensorError};
use crate::yuv::Plane;

/// Rows/columns of zeros appended to the network input in the train phase.
pub const TRAIN_PAD: usize = 2;

pub const LAYER_COUNT: usize = 5;

/// Default number of hidden filters.
pub const DEFAULT_WIDTH: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ChannelRole {
    Luma,
    Chroma,
}

impl ChannelRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelRole::Luma => "y",
            ChannelRole::Chroma => "uv",
        }
    }

    /// Spelled-out name for reports and error messages.
    pub fn label(self) -> &'static str {
        match self {
            ChannelRole::Luma => "luma",
            ChannelRole::Chroma => "chroma",
        }
    }

    /// Planes per packed input: luma 1, chroma 2 (U and V ride together).
    pub fn planes(self) -> usize {
        match self {
            ChannelRole::Luma => 1,
            ChannelRole::Chroma => 2,
        }
    }
}

/// Space-to-depth factors. Each `ph`×`pw` patch of a plane becomes one pixel
/// with `ph·pw` channels, trading resolution for per-pixel arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PackConfig {
    pub ph: u8,
    pub pw: u8,
}

impl PackConfig {
    pub const P1X1: PackConfig = PackConfig { ph: 1, pw: 1 };
    pub const P2X2: PackConfig = PackConfig { ph: 2, pw: 2 };

    pub fn new(ph: u8, pw: u8) -> Result<Self, TensorError> {
        if !(1..=2).contains(&ph) || !(1..=2).contains(&pw) {
            return Err(TensorError::Invalid(format!(
                "pack factors must be 1 or 2, got {ph}x{pw}"
            )));
        }
        Ok(PackConfig { ph, pw })
    }

    pub fn channels(self) -> usize {
        self.ph as usize * self.pw as usize
    }

    pub fn as_str(self) -> String {
        format!("{}x{}", self.ph, self.pw)
    }
}

/// Everything that fixes a network's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetSpec {
    pub role: ChannelRole,
    pub pack: PackConfig,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Pointwise { out_c: usize, in_c: usize },
    Depthwise { ch: usize },
}

impl ConvKind {
    pub fn weight_len(self) -> usize {
        match self {
            ConvKind::Pointwise { out_c, in_c } => out_c * in_c,
            ConvKind::Depthwise { ch } => ch * 9,
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            ConvKind::Pointwise { out_c, .. } => out_c,
            ConvKind::Depthwise { ch } => ch,
        }
    }

    /// Multiply-accumulates per output site for the whole layer.
    pub fn macs_per_site(self) -> usize {
        self.weight_len()
    }
}

/// Shape of one layer slot: its convolution, whether the trained architecture
/// gives it a bias, and whether BN precedes it.
#[derive(Debug, Clone, Copy)]
pub struct LayerShape {
    pub kind: ConvKind,
    pub bias: bool,
    pub bn: bool,
}

impl NetSpec {
    pub fn new(role: ChannelRole, pack: PackConfig, width: usize) -> Result<Self, TensorError> {
        if width == 0 || width > 255 {
            return Err(TensorError::Invalid(format!(
                "network width {width} out of range 1..=255"
            )));
        }
        Ok(NetSpec { role, pack, width })
    }

    /// Channels entering (and leaving) the network.
    pub fn io_channels(&self) -> usize {
        self.pack.channels() * self.role.planes()
    }

    pub fn layer_shapes(&self) -> [LayerShape; LAYER_COUNT] {
        let io = self.io_channels();
        let w = self.width;
        [
            LayerShape {
                kind: ConvKind::Pointwise { out_c: w, in_c: io },
                bias: true,
                bn: false,
            },
            LayerShape {
                kind: ConvKind::Depthwise { ch: w },
                bias: true,
                bn: true,
            },
            LayerShape {
                kind: ConvKind::Pointwise { out_c: w, in_c: w },
                bias: true,
                bn: true,
            },
            LayerShape {
                kind: ConvKind::Depthwise { ch: w },
                bias: true,
                bn: true,
            },
            LayerShape {
                kind: ConvKind::Pointwise { out_c: io, in_c: w },
                bias: false,
                bn: true,
            },
        ]
    }

    /// Trained parameter counts (weights, biases).
    pub fn param_counts(&self) -> (usize, usize) {
        let mut w = 0;
        let mut b = 0;
        for ls in self.layer_shapes() {
            w += ls.kind.weight_len();
            if ls.bias {
                b += ls.kind.out_channels();
            }
        }
        (w, b)
    }

    /// Size of the trained parameters serialized as 32-bit floats — the
    /// baseline the entropy-coded payload is judged against.
    pub fn raw_param_bytes(&self) -> usize {
        let (w, b) = self.param_counts();
        4 * (w + b)
    }

    /// Per-source-pixel multiply-accumulate cost. Chroma sites cover four
    /// source pixels at 4:2:0, packing covers `ph·pw` more.
    pub fn mac_per_pixel(&self) -> MacBreakdown {
        let sites_per_pixel = 1.0
            / (self.pack.channels() as f64
                * if self.role == ChannelRole::Chroma {
                    4.0
                } else {
                    1.0
                });
        let mut per_layer = [0.0; LAYER_COUNT];
        for (i, ls) in self.layer_shapes().iter().enumerate() {
            per_layer[i] = ls.kind.macs_per_site() as f64 * sites_per_pixel;
        }
        MacBreakdown {
            per_layer,
            total: per_layer.iter().sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacBreakdown {
    pub per_layer: [f64; LAYER_COUNT],
    pub total: f64,
}

/// One convolution layer with its (optional) preceding BN.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub w: Vec<f64>,
    pub b: Option<Vec<f64>>,
    pub bn: Option<BnState>,
}

/// A concrete network: spec plus parameters. Freshly built nets carry live BN
/// layers; [`NetParams::fold_bn`] produces the signalling form where the BN
/// statistics have been absorbed into weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub spec: NetSpec,
    pub layers: Vec<ConvLayer>,
}

/// Draw a fresh network: weights uniform in ±1/√fan_in, biases zero, BN
/// statistics unprimed. The same RNG stream always yields the same net.
pub fn build_net<R: Rng>(spec: NetSpec, rng: &mut R) -> NetParams {
    let layers = spec
        .layer_shapes()
        .iter()
        .map(|ls| {
            let fan_in = match ls.kind {
                ConvKind::Pointwise { in_c, .. } => in_c,
                ConvKind::Depthwise { .. } => 9,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..ls.kind.weight_len())
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            ConvLayer {
                kind: ls.kind,
                w,
                b: ls.bias.then(|| vec![0.0; ls.kind.out_channels()]),
                bn: ls.bn.then(|| BnState::new(match ls.kind {
                    ConvKind::Pointwise { in_c, .. } => in_c,
                    ConvKind::Depthwise { ch } => ch,
                })),
            }
        })
        .collect();
    NetParams { spec, layers }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Per-layer tensors saved by the train-phase forward pass.
struct LayerCache {
    conv_in: Tensor4,
    bn_cache: Option<BnCache>,
    post_relu: Option<Tensor4>,
}

/// Everything [`NetParams::backward`] needs, tied to one forward pass.
pub struct NetCache {
    layers: Vec<LayerCache>,
    /// Spatial size of the (padded) tensors flowing through the net.
    padded_h: usize,
    padded_w: usize,
    /// Output size handed back to the caller.
    out_h: usize,
    out_w: usize,
}

/// Gradients for every trained parameter group, in [`NetParams::group_sizes`]
/// order (per layer: weights, then bias when present).
pub struct NetGrads {
    pub groups: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &NetParams) -> NetGrads {
        NetGrads {
            groups: net.group_sizes().iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn as_slices(&self) -> Vec<&[f64]> {
        self.groups.iter().map(|g| g.as_slice()).collect()
    }

    /// Element-wise `self += other * scale`.
    pub fn accumulate(&mut self, other: &NetGrads, scale: f64) {
        assert_eq!(self.groups.len(), other.groups.len());
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

impl NetParams {
    pub fn is_folded(&self) -> bool {
        self.layers.iter().all(|l| l.bn.is_none())
    }

    /// Flat sizes of the trainable parameter groups (weights and biases; BN
    /// statistics are not trained).
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w.len());
            if let Some(b) = &l.b {
                out.push(b.len());
            }
        }
        out
    }

    /// Mutable views of the trainable groups, matching [`Self::group_sizes`].
    pub fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(&mut l.w[..]);
            if let Some(b) = l.b.as_mut() {
                out.push(&mut b[..]);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.iter().all(|v| v.is_finite())
                && l.b.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite()))
        })
    }

    fn conv_fwd(&self, i: usize, x: &Tensor4) -> Result<Tensor4, TensorError> {
        let l = &self.layers[i];
        match l.kind {
            ConvKind::Pointwise { out_c, .. } => {
                pointwise_fwd(x, &l.w, l.b.as_deref(), out_c)
            }
            ConvKind::Depthwise { .. } => depthwise3_fwd(x, &l.w, l.b.as_deref()),
        }
    }

    /// Eval-phase forward: running BN statistics, no padding trick.
    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4, TensorError> {
        let mut t = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(bn) = &l.bn {
                t = bn_fwd_eval(&t, bn)?;
            }
            t = self.conv_fwd(i, &t)?;
            if i + 1 < self.layers.len() {
                t = relu_fwd(&t);
            }
        }
        Ok(t)
    }

    /// Train-phase forward: pads the input, normalizes with batch statistics
    /// (updating the running estimates), crops the output back, and returns
    /// the cache the backward pass needs.
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<(Tensor4, NetCache), TensorError> {
        let padded = x.pad_bottom_right(TRAIN_PAD, TRAIN_PAD);
        let (ph, pw) = (padded.h(), padded.w());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut t = padded;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let bn_cache = if self.layers[i].bn.is_some() {
                let bn = self.layers[i].bn.as_mut().unwrap();
                let (normed, cache) = bn_fwd_train(&t, bn)?;
                t = normed;
                Some(cache)
            } else {
                None
            };
            let conv_in = t.clone();
            t = self.conv_fwd(i, &conv_in)?;
            let post_relu = if i < last {
                t = relu_fwd(&t);
                Some(t.clone())
            } else {
                None
            };
            caches.push(LayerCache {
                conv_in,
                bn_cache,
                post_relu,
            });
        }
        let out = t.crop(ph - TRAIN_PAD, pw - TRAIN_PAD);
        Ok((
            out,
            NetCache {
                layers: caches,
                padded_h: ph,
                padded_w: pw,
                out_h: ph - TRAIN_PAD,
                out_w: pw - TRAIN_PAD,
            },
        ))
    }

    /// Convenience dispatch; train phase discards the cache.
    pub fn forward(&mut self, x: &Tensor4, phase: Phase) -> Result<Tensor4, TensorError> {
        match phase {
            Phase::Eval => self.forward_eval(x),
            Phase::Train => Ok(self.forward_train(x)?.0),
        }
    }

    /// Backward pass matching [`Self::forward_train`]. `dy` is the gradient
    /// at the cropped output; the padded region contributes only through the
    /// batch statistics.
    pub fn backward(&self, cache: &NetCache, dy: &Tensor4) -> Result<NetGrads, TensorError> {
        let expected_hw = [cache.out_h, cache.out_w];
        if [dy.h(), dy.w()] != expected_hw {
            return Err(TensorError::ShapeMismatch {
                op: "net backward dy",
                expected: [dy.n(), dy.c(), cache.out_h, cache.out_w],
                got: dy.dims(),
            });
        }
        let mut grad = dy.uncrop(cache.padded_h, cache.padded_w);
        let mut groups_rev: Vec<Vec<f64>> = Vec::new();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let lc = &cache.layers[i];
            if let Some(post_relu) = &lc.post_relu {
                grad = relu_bwd(post_relu, &grad)?;
            }
            let need_dx = i > 0;
            let conv_grads = match l.kind {
                ConvKind::Pointwise { out_c, .. } => {
                    pointwise_bwd(&lc.conv_in, &l.w, out_c, &grad, need_dx, l.b.is_some())?
                }
                ConvKind::Depthwise { .. } => {
                    depthwise3_bwd(&lc.conv_in, &l.w, &grad, need_dx, l.b.is_some())?
                }
            };
            if let Some(db) = conv_grads.db {
                groups_rev.push(db);
            }
            groups_rev.push(conv_grads.dw);
            if i > 0 {
                let mut dx = conv_grads.dx.expect("need_dx requested");
                if let Some(bn_cache) = &lc.bn_cache {
                    // conv_in doubles as x̂ — BN has no affine part.
                    dx = bn_bwd_train(&lc.conv_in, bn_cache, &dx)?;
                }
                grad = dx;
            }
        }
        groups_rev.reverse();
        Ok(NetGrads { groups: groups_rev })
    }

    /// Absorb every BN layer into the convolution that follows it:
    /// `w' = w/√(σ̂²+ε)` per input channel and `b' = b − Σ μ̂·w'`. The final
    /// layer has no trained bias, so folding gives it one. Output behaves
    /// identically to the eval-phase forward of the unfolded net.
    pub fn fold_bn(&self) -> Result<NetParams, TensorError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let Some(bn) = &l.bn else {
                layers.push(l.clone());
                continue;
            };
            if !bn.primed {
                return Err(TensorError::Invalid(
                    "fold_bn: BN statistics never initialized".into(),
                ));
            }
            let inv: Vec<f64> = bn.var.iter().map(|&v| 1.0 / (v + bn.eps).sqrt()).collect();
            let mut w = l.w.clone();
            let out_c = l.kind.out_channels();
            let mut b = l.b.clone().unwrap_or_else(|| vec![0.0; out_c]);
            match l.kind {
                ConvKind::Pointwise { out_c, in_c } => {
                    for f in 0..out_c {
                        let row = &mut w[f * in_c..(f + 1) * in_c];
                        let mut shift = 0.0;
                        for c in 0..in_c {
                            row[c] *= inv[c];
                            shift += bn.mean[c] * row[c];
                        }
                        b[f] -= shift;
                    }
                }
                ConvKind::Depthwise { ch } => {
                    for c in 0..ch {
                        let taps = &mut w[c * 9..(c + 1) * 9];
                        let mut sum = 0.0;
                        for t in taps.iter_mut() {
                            *t *= inv[c];
                            sum += *t;
                        }
                        b[c] -= bn.mean[c] * sum;
                    }
                }
            }
            layers.push(ConvLayer {
                kind: l.kind,
                w,
                b: Some(b),
                bn: None,
            });
        }
        Ok(NetParams {
            spec: self.spec,
            layers,
        })
    }

    /// Trained conv parameters as little-endian `f32`s, layer by layer
    /// (weights, then bias where the architecture has one).
    pub fn serialize_raw_f32(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.layers {
            for &v in &l.w {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            if let Some(b) = &l.b {
                for &v in b {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Space-to-depth packing
// ---------------------------------------------------------------------------

/// Replicate the last row/column until both dimensions divide the pack
/// factors (and, optionally, any extra alignment the caller needs).
pub fn pad_to_multiple(plane: &Plane<f64>, ph: usize, pw: usize) -> Plane<f64> {
    let new_h = plane.height.div_ceil(ph) * ph;
    let new_w = plane.width.div_ceil(pw) * pw;
    if new_h == plane.height && new_w == plane.width {
        return plane.clone();
    }
    let mut out = Plane::new(new_w, new_h);
    for y in 0..new_h {
        let sy = y.min(plane.height - 1);
        let src = plane.row(sy);
        let dst = out.row_mut(y);
        dst[..plane.width].copy_from_slice(src);
        dst[plane.width..].fill(src[plane.width - 1]);
    }
    out
}

/// Pack a plane into a 1×(ph·pw)×(H/ph)×(W/pw) tensor. Channel `py·pw + px`
/// holds the patch offset `(py, px)`.
pub fn pack_plane(plane: &Plane<f64>, pack: PackConfig) -> Result<Tensor4, TensorError> {
    let (ph, pw) = (pack.ph as usize, pack.pw as usize);
    if !plane.height.is_multiple_of(ph) || !plane.width.is_multiple_of(pw) {
        return Err(TensorError::Invalid(format!(
            "plane {}x{} not divisible by pack {}x{}",
            plane.width, plane.height, pw, ph
        )));
    }
    let mut out = Tensor4::zeros(1, ph * pw, plane.height / ph, plane.width / pw);
    pack_region_into(plane, 0, 0, plane.height, plane.width, pack, &mut out, 0, 0);
    Ok(out)
}

/// Pack the `rows`×`cols` region of `plane` at `(y0, x0)` into channels
/// `c_base..c_base+ph·pw` of sample `n` of `out`. Region size must match the
/// tensor's spatial dims times the pack factors.
#[allow(clippy::too_many_arguments)]
pub fn pack_region_into(
    plane: &Plane<f64>,
    y0: usize,
    x0: usize,
    rows: usize,
    cols: usize,
    pack: PackConfig,
    out: &mut Tensor4,
    n: usize,
    c_base: usize,
) {
    let (ph, pw) = (pack.ph as usize, pack.pw as usize);
    debug_assert_eq!(rows, out.h() * ph);
    debug_assert_eq!(cols, out.w() * pw);
    debug_assert!(y0 + rows <= plane.height && x0 + cols <= plane.width);
    let (oh, ow) = (out.h(), out.w());
    for py in 0..ph {
        for px in 0..pw {
            let dst = out.chan_mut(n, c_base + py * pw + px);
            for oy in 0..oh {
                let src = plane.row(y0 + oy * ph + py);
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, o) in drow.iter_mut().enumerate() {
                    *o = src[x0 + ox * pw + px];
                }
            }
        }
    }
}

/// Inverse of [`pack_plane`] for channels `c_base..c_base+ph·pw` of sample 0.
pub fn unpack_plane(t: &Tensor4, pack: PackConfig, c_base: usize) -> Result<Plane<f64>, TensorError> {
    let (ph, pw) = (pack.ph as usize, pack.pw as usize);
    if c_base + ph * pw > t.c() {
        return Err(TensorError::Invalid(format!(
            "unpack: tensor has {} channels, need {} from {c_base}",
            t.c(),
            ph * pw
        )));
    }
    let mut plane = Plane::new(t.w() * pw, t.h() * ph);
    for py in 0..ph {
        for px in 0..pw {
            let src = t.chan(0, c_base + py * pw + px);
            for oy in 0..t.h() {
                let dst = plane.row_mut(oy * ph + py);
                for ox in 0..t.w() {
                    dst[ox * pw + px] = src[oy * t.w() + ox];
                }
            }
        }
    }
    Ok(plane)
}
