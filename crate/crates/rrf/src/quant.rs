//! Integer quantization of folded network parameters with per-group scales.
//!
//! Weights quantize in groups that mirror their filters — per output filter
//! for pointwise layers, per channel for depthwise — each with its own scale
//! α = (2^{b_w−1}−1)/max|w|; biases use one scale per layer. A scale travels
//! as a 16-bit significand and signed 8-bit base-2 exponent, and both sides
//! use the *decoded* scale α̂, so the quantization-error bound
//! |w − w^q/α̂| ≤ 0.5/α̂ holds by construction.

use crate::net::{ConvLayer, NetParams, NetSpec};
use crate::tensor::{Tensor4, TensorError};
use crate::train::scale_group;

/// Bit width of bias integers, used at every operating point.
pub const BIAS_BITS: u8 = 10;

/// A positive real scale as significand × 2^(exponent−16). The significand
/// is the leading 16 bits of the value's normalized fraction (in [0.5, 1)),
/// truncated — the decoded scale never exceeds the requested one. `sig == 0`
/// is the sentinel for an all-zero parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleRepr {
    pub sig: u16,
    pub exp: i8,
}

/// Exact frexp for positive finite doubles: `x = frac · 2^e`, frac ∈ [0.5, 1).
fn frexp(x: f64) -> (f64, i32) {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7FF) as i32;
    if exp_field == 0 {
        // Subnormal — renormalize first.
        let (f, e) = frexp(x * 2f64.powi(64));
        return (f, e - 64);
    }
    let frac = f64::from_bits((bits & !(0x7FFu64 << 52)) | (1022u64 << 52));
    (frac, exp_field - 1022)
}

impl ScaleRepr {
    pub const ZERO: ScaleRepr = ScaleRepr { sig: 0, exp: 0 };

    pub fn is_zero(self) -> bool {
        self.sig == 0
    }

    /// Closest representable value not exceeding `scale`.
    pub fn encode(scale: f64) -> ScaleRepr {
        debug_assert!(scale > 0.0 && scale.is_finite());
        let (frac, e) = frexp(scale);
        if e - 1 > i8::MAX as i32 {
            // Saturate: still below the requested scale.
            return ScaleRepr { sig: u16::MAX, exp: i8::MAX };
        }
        if e < i8::MIN as i32 {
            // A scale this small implies weight magnitudes beyond 2^127;
            // nothing downstream can produce it from finite parameters.
            return ScaleRepr { sig: 1, exp: i8::MIN };
        }
        ScaleRepr {
            // frac·65536 ∈ [32768, 65536); the product is exact.
            sig: (frac * 65536.0).floor() as u16,
            exp: e as i8,
        }
    }

    pub fn decode(self) -> f64 {
        self.sig as f64 * 2f64.powi(self.exp as i32 - 16)
    }
}

/// One quantized layer: integers plus the scales to undo them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub w: Vec<i32>,
    pub b: Vec<i32>,
    /// One scale per weight group ([`scale_group`] weights each).
    pub w_scales: Vec<ScaleRepr>,
    pub b_scale: ScaleRepr,
}

/// Quantized form of a folded network — the object the bitstream carries.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantNet {
    pub spec: NetSpec,
    pub bw: u8,
    pub bb: u8,
    pub layers: Vec<QuantLayer>,
}

impl QuantNet {
    /// The all-zero network: dequantizes to an identity refinement. Used
    /// to reset a low-delay chain whose inherited network has turned
    /// harmful.
    pub fn zero(spec: NetSpec, bw: u8, bb: u8) -> QuantNet {
        let layers = spec
            .layer_shapes()
            .iter()
            .map(|ls| QuantLayer {
                w: vec![0; ls.kind.weight_len()],
                b: vec![0; ls.kind.out_channels()],
                w_scales: vec![ScaleRepr::ZERO; ls.kind.weight_len() / scale_group(ls.kind)],
                b_scale: ScaleRepr::ZERO,
            })
            .collect();
        QuantNet { spec, bw, bb, layers }
    }
}

fn quantize_group(vals: &[f64], qmax: i32, ints: &mut Vec<i32>) -> ScaleRepr {
    let m = vals.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if m == 0.0 {
        ints.extend(std::iter::repeat_n(0, vals.len()));
        return ScaleRepr::ZERO;
    }
    let repr = ScaleRepr::encode(qmax as f64 / m);
    let a = repr.decode();
    for &v in vals {
        let q = (v * a).round();
        debug_assert!(q.abs() <= qmax as f64);
        ints.push(q as i32);
    }
    repr
}

fn check_widths(folded: &NetParams, bw: u8, bb: u8) -> Result<(), TensorError> {
    if !folded.is_folded() {
        return Err(TensorError::Invalid(
            "quantize: network still carries BN layers — fold first".into(),
        ));
    }
    if !(2..=16).contains(&bw) || !(2..=16).contains(&bb) {
        return Err(TensorError::Invalid(format!(
            "quantize: bit widths {bw}/{bb} outside 2..=16"
        )));
    }
    Ok(())
}

fn quantize_layer_weights(
    l: &crate::net::ConvLayer,
    wq_max: i32,
) -> (Vec<i32>, Vec<ScaleRepr>) {
    let group = scale_group(l.kind);
    let mut w = Vec::with_capacity(l.w.len());
    let scales = l
        .w
        .chunks_exact(group)
        .map(|g| quantize_group(g, wq_max, &mut w))
        .collect();
    (w, scales)
}

fn dequantize_group(ints: &[i32], repr: ScaleRepr, out: &mut Vec<f64>) {
    if repr.is_zero() {
        out.extend(std::iter::repeat_n(0.0, ints.len()));
    } else {
        let a = repr.decode();
        out.extend(ints.iter().map(|&v| v as f64 / a));
    }
}

/// Quantize a folded (BN-free) network at the given weight bit width.
pub fn quantize(folded: &NetParams, bw: u8, bb: u8) -> Result<QuantNet, TensorError> {
    check_widths(folded, bw, bb)?;
    let wq_max = (1i32 << (bw - 1)) - 1;
    let bq_max = (1i32 << (bb - 1)) - 1;
    let mut layers = Vec::with_capacity(folded.layers.len());
    for l in &folded.layers {
        let bias = l.b.as_ref().ok_or_else(|| {
            TensorError::Invalid("quantize: folded layer missing bias".into())
        })?;
        let (w, w_scales) = quantize_layer_weights(l, wq_max);
        let mut b = Vec::with_capacity(bias.len());
        let b_scale = quantize_group(bias, bq_max, &mut b);
        layers.push(QuantLayer {
            w,
            b,
            w_scales,
            b_scale,
        });
    }
    Ok(QuantNet {
        spec: folded.spec,
        bw,
        bb,
        layers,
    })
}

/// Quantize with per-layer bias calibration against real data.
///
/// Folding scales early-layer weights by 1/σ of raw activations, which can
/// be large; rounding those weights injects an error that — against typical
/// inputs — is mostly a *constant* per output channel, and it compounds
/// layer over layer. Running the calibration tensor (packed decoded pixels,
/// any representative batch) through the float and the quantized network
/// side by side and re-deriving each bias as the difference of the two
/// per-channel output means absorbs that drift into the bias integers,
/// which carry ten bits anyway. Only the signalled integers change;
/// decoding stays [`dequantize`].
pub fn quantize_calibrated(
    folded: &NetParams,
    calib: &Tensor4,
    bw: u8,
    bb: u8,
) -> Result<QuantNet, TensorError> {
    use crate::layers::{depthwise3_fwd, pointwise_fwd, relu_fwd};
    use crate::net::ConvKind;

    check_widths(folded, bw, bb)?;
    let wq_max = (1i32 << (bw - 1)) - 1;
    let bq_max = (1i32 << (bb - 1)) - 1;
    let last = folded.layers.len() - 1;
    let mut layers = Vec::with_capacity(folded.layers.len());
    let mut x_float = calib.clone();
    let mut x_quant = calib.clone();
    for (li, l) in folded.layers.iter().enumerate() {
        let bias = l.b.as_ref().ok_or_else(|| {
            TensorError::Invalid("quantize: folded layer missing bias".into())
        })?;
        let (w, w_scales) = quantize_layer_weights(l, wq_max);
        let mut w_hat = Vec::with_capacity(w.len());
        let group = scale_group(l.kind);
        for (g, ints) in w_scales.iter().zip(w.chunks_exact(group)) {
            dequantize_group(ints, *g, &mut w_hat);
        }

        let out_c = l.kind.out_channels();
        let (y_float, y_quant_nob) = match l.kind {
            ConvKind::Pointwise { out_c, .. } => (
                pointwise_fwd(&x_float, &l.w, Some(bias), out_c)?,
                pointwise_fwd(&x_quant, &w_hat, None, out_c)?,
            ),
            ConvKind::Depthwise { .. } => (
                depthwise3_fwd(&x_float, &l.w, Some(bias))?,
                depthwise3_fwd(&x_quant, &w_hat, None)?,
            ),
        };
        // Bias per channel = mean gap between the float output and the
        // bias-free quantized output over the calibration set.
        let mut b_target = vec![0.0; out_c];
        let area = y_float.numel() / (y_float.n() * out_c);
        for ni in 0..y_float.n() {
            for (c, t) in b_target.iter_mut().enumerate() {
                let f = y_float.chan(ni, c).iter().sum::<f64>();
                let q = y_quant_nob.chan(ni, c).iter().sum::<f64>();
                *t += (f - q) / (area * y_float.n()) as f64;
            }
        }
        let mut b = Vec::with_capacity(out_c);
        let b_scale = quantize_group(&b_target, bq_max, &mut b);
        let mut b_hat = Vec::with_capacity(out_c);
        dequantize_group(&b, b_scale, &mut b_hat);

        let mut y_quant = y_quant_nob;
        for ni in 0..y_quant.n() {
            for (c, &bh) in b_hat.iter().enumerate() {
                for v in y_quant.chan_mut(ni, c) {
                    *v += bh;
                }
            }
        }
        x_float = if li < last { relu_fwd(&y_float) } else { y_float };
        x_quant = if li < last { relu_fwd(&y_quant) } else { y_quant };
        layers.push(QuantLayer {
            w,
            b,
            w_scales,
            b_scale,
        });
    }
    Ok(QuantNet {
        spec: folded.spec,
        bw,
        bb,
        layers,
    })
}

/// Reconstruct the folded float network: `w = w^q/α̂`, `b = b^q/β̂`.
pub fn dequantize(q: &QuantNet) -> NetParams {
    let shapes = q.spec.layer_shapes();
    let layers = q
        .layers
        .iter()
        .zip(shapes.iter())
        .map(|(ql, ls)| {
            let group = scale_group(ls.kind);
            let mut w = Vec::with_capacity(ql.w.len());
            for (g, ints) in ql.w_scales.iter().zip(ql.w.chunks_exact(group)) {
                dequantize_group(ints, *g, &mut w);
            }
            let mut b = Vec::with_capacity(ql.b.len());
            dequantize_group(&ql.b, ql.b_scale, &mut b);
            ConvLayer {
                kind: ls.kind,
                w,
                b: Some(b),
                bn: None,
            }
        })
        .collect();
    NetParams {
        spec: q.spec,
        layers,
    }
}

/// Weight bit width for a quantization parameter: the operating points are
/// QP 22→10, 27→9, 32→7 and 37→6 bits; other QPs take the nearest point,
/// ties resolving toward the lower QP (more bits).
pub fn bw_for_qp(qp: i32) -> u8 {
    const POINTS: [(i32, u8); 4] = [(22, 10), (27, 9), (32, 7), (37, 6)];
    let mut best = POINTS[0];
    for &(p, b) in &POINTS[1..] {
        if (qp - p).abs() < (qp - best.0).abs() {
            best = (p, b);
        }
    }
    best.1
}
