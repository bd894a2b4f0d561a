//! The refinement pipeline from both ends: the encoder trains a network
//! per GoP and role, decides whether signalling it pays off, and emits the
//! sidecar; the decoder replays the signalled networks over the decoded
//! clip. Both sides evaluate with the *dequantized* parameters, so the
//! encoder's reconstruction is bit-identical to the decoder's output.

use crate::codec;
use crate::metrics::UnitRecord;
use crate::net::{pack_region_into, pad_to_multiple, unpack_plane, NetParams};
use crate::net::{ChannelRole, PackConfig};
use crate::quant::{dequantize, quantize_calibrated, QuantNet, BIAS_BITS};
use crate::rangecoder::CodeError;
use crate::stream::{
    read_stream, write_stream, GopUnits, RolePlan, Sidecar, StreamConfig, StreamError, UnitMode,
    UnitPayload,
};
use crate::tensor::{Tensor4, TensorError};
use crate::train::{train_gop, RegMode, SkipReason, TrainConfig, TrainOutcome};
use crate::yuv::{segment_gops, CodingMode, GopSegment, Plane, YuvError, YuvFrame};
use rayon::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("GoP {gop} {role} payload: {source}")]
    Payload {
        gop: usize,
        role: &'static str,
        source: CodeError,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Yuv(#[from] YuvError),
}

/// Everything the encoder needs beyond the two clips.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncodeParams {
    pub mode: CodingMode,
    pub gop_len: usize,
    /// Weight quantization depth in bits.
    pub bw: u8,
    /// Bias quantization depth in bits.
    pub bb: u8,
    pub luma: Option<RolePlan>,
    pub chroma: Option<RolePlan>,
    /// Training schedule. Its regularizer is derived from `mode`, so the
    /// field's own `reg` value is ignored.
    pub train: TrainConfig,
    /// Worker threads for encoding. Random-access GoPs are independent and
    /// run in parallel; low-delay chains are inherently sequential and
    /// ignore this. `0` means one thread per logical core.
    pub jobs: usize,
}

impl Default for EncodeParams {
    fn default() -> Self {
        EncodeParams {
            mode: CodingMode::RandomAccess,
            gop_len: 32,
            bw: 9,
            bb: BIAS_BITS,
            luma: Some(RolePlan {
                pack: PackConfig::P2X2,
                net_width: 12,
            }),
            chroma: Some(RolePlan {
                pack: PackConfig::P2X2,
                net_width: 12,
            }),
            train: TrainConfig::default(),
            jobs: 1,
        }
    }
}

/// Result of encoding: the serialized sidecar, its parsed form, one report
/// row per unit, and the encoder-side reconstruction (bit-identical to
/// what the decoder will produce).
#[derive(Debug)]
pub struct EncodeOutcome {
    pub stream: Vec<u8>,
    pub sidecar: Sidecar,
    pub records: Vec<UnitRecord>,
    pub refined: Vec<YuvFrame>,
}

#[derive(Debug)]
pub struct DecodeOutcome {
    pub sidecar: Sidecar,
    pub refined: Vec<YuvFrame>,
}

/// Normalize, pad to the pack grid, and pack one role's planes into a
/// single-sample tensor (luma: one plane; chroma: U then V).
fn packed_input(planes: &[&Plane<u8>], pack: PackConfig) -> Tensor4 {
    let (ph, pw) = (pack.ph as usize, pack.pw as usize);
    let padded: Vec<Plane<f64>> = planes
        .iter()
        .map(|p| {
            let norm = Plane {
                data: p.data.iter().map(|&v| v as f64 / 255.0).collect(),
                width: p.width,
                height: p.height,
            };
            pad_to_multiple(&norm, ph, pw)
        })
        .collect();
    let (h, w) = (padded[0].height, padded[0].width);
    let mut t = Tensor4::zeros(1, planes.len() * ph * pw, h / ph, w / pw);
    for (i, p) in padded.iter().enumerate() {
        pack_region_into(p, 0, 0, h, w, pack, &mut t, 0, i * ph * pw);
    }
    t
}

/// Run one role's planes through a folded network and add the predicted
/// residual back: `clip(round(decoded + 255 · prediction))`.
fn refine_role_planes(
    planes: &[&Plane<u8>],
    net: &NetParams,
    pack: PackConfig,
) -> Result<Vec<Plane<u8>>, TensorError> {
    let (ph, pw) = (pack.ph as usize, pack.pw as usize);
    let y = net.forward_eval(&packed_input(planes, pack))?;
    planes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let pred = unpack_plane(&y, pack, i * ph * pw)?;
            let mut out = Plane::new(p.width, p.height);
            for row in 0..p.height {
                let d = p.row(row);
                let r = pred.row(row);
                for (o, (&dv, &rv)) in out.row_mut(row).iter_mut().zip(d.iter().zip(r)) {
                    *o = (dv as f64 + 255.0 * rv).round().clamp(0.0, 255.0) as u8;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Apply the in-force networks (if any) to one frame.
pub fn refine_frame(
    frame: &YuvFrame,
    luma: Option<(&NetParams, PackConfig)>,
    chroma: Option<(&NetParams, PackConfig)>,
) -> Result<YuvFrame, PipelineError> {
    let y = match luma {
        Some((net, pack)) => refine_role_planes(&[&frame.y], net, pack)?.remove(0),
        None => frame.y.clone(),
    };
    let (u, v) = match chroma {
        Some((net, pack)) => {
            let mut uv = refine_role_planes(&[&frame.u, &frame.v], net, pack)?;
            let v = uv.pop().expect("two chroma planes");
            let u = uv.pop().expect("two chroma planes");
            (u, v)
        }
        None => (frame.u.clone(), frame.v.clone()),
    };
    Ok(YuvFrame::new(frame.index, y, u, v)?)
}

/// Mean role PSNR of a span of frames against the source, optionally
/// refined by a network first. Chroma pools U and V into one error sum.
fn eval_role_psnr(
    dec: &[YuvFrame],
    src: &[YuvFrame],
    role: ChannelRole,
    net: Option<(&NetParams, PackConfig)>,
) -> Result<f64, PipelineError> {
    use crate::metrics::{mse_plane, psnr_from_mse};
    let mut sum = 0.0;
    for (d, s) in dec.iter().zip(src) {
        let mse = match role {
            ChannelRole::Luma => {
                let y = match net {
                    Some((n, p)) => refine_role_planes(&[&d.y], n, p)?.remove(0),
                    None => d.y.clone(),
                };
                mse_plane(&y, &s.y)
            }
            ChannelRole::Chroma => {
                let (u, v) = match net {
                    Some((n, p)) => {
                        let mut uv = refine_role_planes(&[&d.u, &d.v], n, p)?;
                        let v = uv.pop().unwrap();
                        (uv.pop().unwrap(), v)
                    }
                    None => (d.u.clone(), d.v.clone()),
                };
                let (nu, nv) = (u.data.len() as f64, v.data.len() as f64);
                (mse_plane(&u, &s.u) * nu + mse_plane(&v, &s.v) * nv) / (nu + nv)
            }
        };
        sum += psnr_from_mse(mse);
    }
    Ok(sum / dec.len() as f64)
}

fn net_is_identity(q: &QuantNet) -> bool {
    q.layers
        .iter()
        .all(|l| l.w.iter().all(|&v| v == 0) && l.b.iter().all(|&v| v == 0))
}

/// Calibration input for quantization: the packed decoded planes of the
/// GoP's middle frame, matching what the network will see at apply time.
fn calib_tensor(seg: &GopSegment, role: ChannelRole, pack: PackConfig) -> Tensor4 {
    let f = &seg.decoded[seg.len() / 2];
    match role {
        ChannelRole::Luma => packed_input(&[&f.y], pack),
        ChannelRole::Chroma => packed_input(&[&f.u, &f.v], pack),
    }
}

/// Per-role encoder state threaded through a low-delay chain. Random
/// access clears it after every GoP.
#[derive(Default)]
struct Chain {
    /// Last signalled parameters, as the decoder holds them.
    q: Option<QuantNet>,
    /// Dequantized form of `q`; `None` when `q` is absent or an identity.
    deq: Option<NetParams>,
    /// Float parameters that produced `q`, kept as the fine-tuning start.
    float: Option<NetParams>,
}

/// The multiple by which a candidate must beat the inherited network's
/// gain before spending bits on it.
const LD_GAIN_MARGIN: f64 = 1.1;

fn skip_reason_str(reason: SkipReason) -> &'static str {
    match reason {
        SkipReason::ZeroResidual => "zero-residual",
        SkipReason::NonFinite => "non-finite",
    }
}

struct UnitDecision {
    unit: UnitPayload,
    record: UnitRecord,
}

/// Train, quantize, and pick a unit mode for one GoP and role, updating
/// the chain in place.
#[allow(clippy::too_many_arguments)]
fn decide_unit(
    gi: usize,
    ri: usize,
    seg: &GopSegment,
    role: ChannelRole,
    plan: RolePlan,
    params: &EncodeParams,
    chain: &mut Chain,
) -> Result<UnitDecision, PipelineError> {
    let spec = plan.net_spec(role);
    let mut cfg = params.train;
    cfg.reg = match params.mode {
        CodingMode::RandomAccess => RegMode::for_random_access(),
        CodingMode::LowDelay => RegMode::for_low_delay(),
    };
    let train_ref = match params.mode {
        CodingMode::RandomAccess => None,
        CodingMode::LowDelay => chain.float.as_ref(),
    };
    let stream_id = (gi * 2 + ri) as u64;
    let outcome = train_gop(seg, spec, &cfg, train_ref, stream_id)?;

    let before = eval_role_psnr(seg.decoded, seg.source, role, None)?;
    let prev_gain = match &chain.deq {
        Some(deq) => {
            eval_role_psnr(seg.decoded, seg.source, role, Some((deq, plan.pack)))? - before
        }
        None => 0.0,
    };

    let mut skip_reason = None;
    let candidate = match outcome {
        TrainOutcome::Trained { net, .. } => {
            let folded = net.fold_bn()?;
            let calib = calib_tensor(seg, role, plan.pack);
            let q = quantize_calibrated(&folded, &calib, params.bw, params.bb)?;
            let deq = dequantize(&q);
            let after =
                eval_role_psnr(seg.decoded, seg.source, role, Some((&deq, plan.pack)))?;
            Some((net, q, deq, after - before))
        }
        TrainOutcome::Skipped(reason) => {
            log::debug!("gop {gi} {}: training skipped: {reason:?}", role.label());
            skip_reason = Some(reason);
            None
        }
    };

    let mut record = UnitRecord {
        gop: gi,
        role,
        mode: UnitMode::Skip,
        payload_bytes: 0,
        psnr_before: before,
        psnr_after: before + prev_gain.max(0.0),
        decision: String::new(),
    };

    let chosen = match &candidate {
        Some((_, _, _, gain)) => *gain > 0.0 && *gain > LD_GAIN_MARGIN * prev_gain,
        None => false,
    };
    if chosen {
        let (net, q, deq, gain) = candidate.unwrap();
        let fresh = codec::encode_new(&q);
        let (mode, payload) = match &chain.q {
            Some(pq) => {
                let diff = codec::encode_diff(&q, pq).map_err(|source| {
                    PipelineError::Payload {
                        gop: gi,
                        role: role.label(),
                        source,
                    }
                })?;
                if diff.len() <= fresh.len() {
                    (UnitMode::Diff, diff)
                } else {
                    (UnitMode::New, fresh)
                }
            }
            None => (UnitMode::New, fresh),
        };
        record.mode = mode;
        record.payload_bytes = payload.len();
        record.psnr_after = before + gain;
        record.decision = "gain".into();
        chain.q = Some(q);
        chain.deq = Some(deq);
        chain.float = Some(net);
        return Ok(UnitDecision {
            unit: UnitPayload { mode, payload },
            record,
        });
    }

    if prev_gain < 0.0 {
        // The inherited network hurts this GoP and no candidate earned its
        // bits: signal an explicit identity to reset the chain.
        let zq = QuantNet::zero(spec, params.bw, params.bb);
        let payload = codec::encode_new(&zq);
        record.mode = UnitMode::New;
        record.payload_bytes = payload.len();
        record.psnr_after = before;
        record.decision = "reset".into();
        chain.q = Some(zq);
        chain.deq = None;
        chain.float = None;
        return Ok(UnitDecision {
            unit: UnitPayload {
                mode: UnitMode::New,
                payload,
            },
            record,
        });
    }

    record.decision = match &candidate {
        Some((_, _, _, gain)) if *gain <= 0.0 => "no-gain".into(),
        Some(_) => "insufficient-gain".into(),
        None => skip_reason_str(skip_reason.expect("untrained without reason")).into(),
    };
    Ok(UnitDecision {
        unit: UnitPayload::skip(),
        record,
    })
}

/// Encode a clip: one unit per GoP and enabled role, plus the refined
/// reconstruction and a per-unit report.
/// Encode one GoP: decide a unit per enabled role (advancing `chains`) and
/// refine the GoP's frames with whatever networks end up in force.
fn encode_gop(
    gi: usize,
    seg: &GopSegment,
    config: &StreamConfig,
    params: &EncodeParams,
    chains: &mut [Chain; 2],
) -> Result<(GopUnits, Vec<UnitRecord>, Vec<YuvFrame>), PipelineError> {
    let mut units = GopUnits::default();
    let mut records = Vec::new();
    for (ri, role) in [ChannelRole::Luma, ChannelRole::Chroma].into_iter().enumerate() {
        let Some(plan) = config.role_plan(role) else {
            continue;
        };
        let decision = decide_unit(gi, ri, seg, role, plan, params, &mut chains[ri])?;
        log::info!(
            "gop {gi} {}: {} ({} bytes, {:.3} -> {:.3} dB, {})",
            role.label(),
            decision.unit.mode.as_str(),
            decision.record.payload_bytes,
            decision.record.psnr_before,
            decision.record.psnr_after,
            decision.record.decision
        );
        match role {
            ChannelRole::Luma => units.luma = Some(decision.unit),
            ChannelRole::Chroma => units.chroma = Some(decision.unit),
        }
        records.push(decision.record);
    }

    let apply = |ri: usize, role: ChannelRole| {
        config
            .role_plan(role)
            .and_then(|plan| chains[ri].deq.as_ref().map(|d| (d, plan.pack)))
    };
    let mut refined = Vec::with_capacity(seg.len());
    for f in seg.decoded {
        refined.push(refine_frame(f, apply(0, ChannelRole::Luma), apply(1, ChannelRole::Chroma))?);
    }
    Ok((units, records, refined))
}

pub fn encode_sequence(
    decoded: &[YuvFrame],
    source: &[YuvFrame],
    params: &EncodeParams,
) -> Result<EncodeOutcome, PipelineError> {
    if decoded.is_empty() {
        return Err(PipelineError::Invalid("empty clip".into()));
    }
    let config = StreamConfig {
        mode: params.mode,
        width: decoded[0].width(),
        height: decoded[0].height(),
        gop_len: params.gop_len,
        bw: params.bw,
        bb: params.bb,
        luma: params.luma,
        chroma: params.chroma,
    };
    if let Err(what) = config.validate() {
        return Err(PipelineError::Invalid(format!("encode parameters: {what}")));
    }
    let segs = segment_gops(decoded, source, params.gop_len, params.mode)?;

    // Random-access GoPs share no state, so they parallelize trivially; the
    // per-GoP RNG streams keep the result identical to a serial run.
    let parts = if params.mode == CodingMode::RandomAccess && params.jobs != 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(params.jobs)
            .build()
            .map_err(|e| PipelineError::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| {
            segs.par_iter()
                .enumerate()
                .map(|(gi, seg)| {
                    let mut chains = [Chain::default(), Chain::default()];
                    encode_gop(gi, seg, &config, params, &mut chains)
                })
                .collect::<Result<Vec<_>, _>>()
        })?
    } else {
        let mut chains = [Chain::default(), Chain::default()];
        let mut parts = Vec::with_capacity(segs.len());
        for (gi, seg) in segs.iter().enumerate() {
            parts.push(encode_gop(gi, seg, &config, params, &mut chains)?);
            if params.mode == CodingMode::RandomAccess {
                chains = [Chain::default(), Chain::default()];
            }
        }
        parts
    };

    let mut gops = Vec::with_capacity(segs.len());
    let mut records = Vec::new();
    let mut refined = Vec::with_capacity(decoded.len());
    for (units, mut gop_records, mut gop_refined) in parts {
        gops.push(units);
        records.append(&mut gop_records);
        refined.append(&mut gop_refined);
    }

    let sidecar = Sidecar { config, gops };
    let stream = write_stream(&sidecar)?;
    Ok(EncodeOutcome {
        stream,
        sidecar,
        records,
        refined,
    })
}

/// Decode a sidecar against the decoded clip it was encoded for.
pub fn decode_sequence(
    decoded: &[YuvFrame],
    stream: &[u8],
) -> Result<DecodeOutcome, PipelineError> {
    let sidecar = read_stream(stream)?;
    let c = sidecar.config;
    if decoded.is_empty() {
        return Err(PipelineError::Invalid("empty clip".into()));
    }
    if decoded[0].width() != c.width || decoded[0].height() != c.height {
        return Err(PipelineError::Invalid(format!(
            "sidecar is for {}x{}, clip is {}x{}",
            c.width,
            c.height,
            decoded[0].width(),
            decoded[0].height()
        )));
    }
    let expect_gops = decoded.len().div_ceil(c.gop_len);
    if sidecar.gops.len() != expect_gops {
        return Err(PipelineError::Invalid(format!(
            "sidecar has {} GoPs, the clip needs {expect_gops}",
            sidecar.gops.len()
        )));
    }

    // Per-role decoder state: the currently in-force network.
    let mut current: [Option<(QuantNet, Option<NetParams>)>; 2] = [None, None];
    let mut refined = Vec::with_capacity(decoded.len());
    for (gi, frames) in decoded.chunks(c.gop_len).enumerate() {
        for (ri, role) in [ChannelRole::Luma, ChannelRole::Chroma].into_iter().enumerate() {
            let Some(plan) = c.role_plan(role) else {
                continue;
            };
            let unit = sidecar.gops[gi]
                .get(role)
                .expect("read_stream fills units for enabled roles");
            let payload_err = |source| PipelineError::Payload {
                gop: gi,
                role: role.label(),
                source,
            };
            match unit.mode {
                UnitMode::Skip => {
                    if c.mode == CodingMode::RandomAccess {
                        current[ri] = None;
                    }
                }
                UnitMode::New => {
                    let q = codec::decode_new(&unit.payload, plan.net_spec(role), c.bw, c.bb)
                        .map_err(payload_err)?;
                    let deq = (!net_is_identity(&q)).then(|| dequantize(&q));
                    current[ri] = Some((q, deq));
                }
                UnitMode::Diff => {
                    let prev = current[ri].as_ref().ok_or_else(|| {
                        PipelineError::Invalid(format!(
                            "GoP {gi} {}: differential unit without a predecessor",
                            role.label()
                        ))
                    })?;
                    let q = codec::decode_diff(&unit.payload, &prev.0).map_err(payload_err)?;
                    let deq = (!net_is_identity(&q)).then(|| dequantize(&q));
                    current[ri] = Some((q, deq));
                }
            }
        }
        let apply = |ri: usize, role: ChannelRole| {
            c.role_plan(role).and_then(|plan| {
                current[ri]
                    .as_ref()
                    .and_then(|(_, d)| d.as_ref())
                    .map(|d| (d, plan.pack))
            })
        };
        for f in frames {
            refined.push(refine_frame(f, apply(0, ChannelRole::Luma), apply(1, ChannelRole::Chroma))?);
        }
    }
    Ok(DecodeOutcome { sidecar, refined })
}
