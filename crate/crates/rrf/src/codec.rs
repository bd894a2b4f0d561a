//! Entropy coding of quantized network parameters.
//!
//! A payload is one range-coded stream over four adaptive contexts —
//! weights, biases, scale significands, scale exponents — each holding a
//! zero flag, a sign, and two magnitude models. Every signed field uses the
//! same shape: flag, sign, then |v|−1 split into a low byte and a high
//! byte. Fresh (`NEW`) payloads carry each scale as a zero flag followed —
//! when the scale is explicit — by its significand as raw bytes (they are
//! near-uniform 16-bit values; modelling them costs more than it saves)
//! and its exponent zigzagged through the low-byte model. Differential
//! (`DIFF`) payloads code every field as its delta from the previous
//! network under the full signed scheme, which collapses to a stream of
//! zero flags when little changed.
//!
//! Layer order: for each layer, weight group scales (significand, then
//! exponent), the bias scale, the weight integers in group order, then the
//! bias integers. A two-byte sentinel closes the payload so corruption that
//! survives range decoding is still caught.

use crate::net::NetSpec;
use crate::quant::{QuantLayer, QuantNet, ScaleRepr};
use crate::rangecoder::{CodeError, FreqModel, RangeDecoder, RangeEncoder};
use crate::train::scale_group;

const SENTINEL: [u8; 2] = [0xA5, 0x5A];

/// Zero flag + sign + magnitude models for one field kind.
struct FieldModels {
    flag: FreqModel,
    sign: FreqModel,
    lo: FreqModel,
    hi: FreqModel,
}

impl FieldModels {
    fn new() -> FieldModels {
        FieldModels {
            flag: FreqModel::new(2),
            sign: FreqModel::new(2),
            lo: FreqModel::new(256),
            hi: FreqModel::new(256),
        }
    }

    fn encode(&mut self, enc: &mut RangeEncoder, v: i32) {
        debug_assert!(v.unsigned_abs() <= 1 << 16);
        if v == 0 {
            self.flag.encode(enc, 0);
            return;
        }
        self.flag.encode(enc, 1);
        self.sign.encode(enc, usize::from(v < 0));
        let m = v.unsigned_abs() - 1;
        self.lo.encode(enc, (m & 0xFF) as usize);
        self.hi.encode(enc, (m >> 8) as usize);
    }

    fn decode(&mut self, dec: &mut RangeDecoder, max_mag: u32) -> Result<i32, CodeError> {
        if self.flag.decode(dec)? == 0 {
            return Ok(0);
        }
        let neg = self.sign.decode(dec)? == 1;
        let lo = self.lo.decode(dec)? as u32;
        let hi = self.hi.decode(dec)? as u32;
        let mag = (hi << 8 | lo) + 1;
        if mag > max_mag {
            return Err(CodeError::Malformed {
                offset: dec.position(),
                what: "magnitude exceeds the payload's bit width",
            });
        }
        Ok(if neg { -(mag as i32) } else { mag as i32 })
    }
}

/// The four coding contexts of a parameter payload.
struct Contexts {
    w: FieldModels,
    b: FieldModels,
    sig: FieldModels,
    exp: FieldModels,
}

impl Contexts {
    fn new() -> Contexts {
        Contexts {
            w: FieldModels::new(),
            b: FieldModels::new(),
            sig: FieldModels::new(),
            exp: FieldModels::new(),
        }
    }
}

fn zigzag(v: i8) -> u8 {
    (((v as i32) << 1) ^ ((v as i32) >> 31)) as u8
}

fn unzigzag(z: u8) -> i8 {
    ((z as i32 >> 1) ^ -(z as i32 & 1)) as i8
}

fn qmax(bits: u8) -> u32 {
    (1u32 << (bits - 1)) - 1
}

/// Group count and int count per layer, shared by encoder and decoder.
fn layer_geometry(spec: NetSpec) -> Vec<(usize, usize, usize)> {
    spec.layer_shapes()
        .iter()
        .map(|ls| {
            let group = scale_group(ls.kind);
            let w_len = ls.kind.weight_len();
            (w_len / group, w_len, ls.kind.out_channels())
        })
        .collect()
}

fn encode_raw_scale(enc: &mut RangeEncoder, cx: &mut Contexts, s: ScaleRepr) {
    if s.is_zero() {
        cx.sig.flag.encode(enc, 0);
        return;
    }
    cx.sig.flag.encode(enc, 1);
    enc.encode_raw_byte((s.sig >> 8) as u8);
    enc.encode_raw_byte((s.sig & 0xFF) as u8);
    cx.exp.lo.encode(enc, zigzag(s.exp) as usize);
}

/// Encode a freshly trained network's parameters.
pub fn encode_new(q: &QuantNet) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    let mut cx = Contexts::new();
    for l in &q.layers {
        for &s in &l.w_scales {
            encode_raw_scale(&mut enc, &mut cx, s);
        }
        encode_raw_scale(&mut enc, &mut cx, l.b_scale);
        for &v in &l.w {
            cx.w.encode(&mut enc, v);
        }
        for &v in &l.b {
            cx.b.encode(&mut enc, v);
        }
    }
    enc.encode_raw_byte(SENTINEL[0]);
    enc.encode_raw_byte(SENTINEL[1]);
    enc.finish()
}

/// Decode a `NEW` payload into a network of the given shape and bit widths.
pub fn decode_new(buf: &[u8], spec: NetSpec, bw: u8, bb: u8) -> Result<QuantNet, CodeError> {
    let mut dec = RangeDecoder::new(buf)?;
    let mut cx = Contexts::new();
    let wq = qmax(bw);
    let bq = qmax(bb);
    let mut layers = Vec::new();
    for (groups, w_len, out_c) in layer_geometry(spec) {
        let mut w_scales = Vec::with_capacity(groups);
        for _ in 0..groups {
            w_scales.push(decode_raw_scale(&mut dec, &mut cx)?);
        }
        let b_scale = decode_raw_scale(&mut dec, &mut cx)?;
        let mut w = Vec::with_capacity(w_len);
        for _ in 0..w_len {
            w.push(cx.w.decode(&mut dec, wq)?);
        }
        let mut b = Vec::with_capacity(out_c);
        for _ in 0..out_c {
            b.push(cx.b.decode(&mut dec, bq)?);
        }
        layers.push(QuantLayer {
            w,
            b,
            w_scales,
            b_scale,
        });
    }
    check_sentinel(&mut dec)?;
    Ok(QuantNet {
        spec,
        bw,
        bb,
        layers,
    })
}

fn decode_raw_scale(dec: &mut RangeDecoder, cx: &mut Contexts) -> Result<ScaleRepr, CodeError> {
    if cx.sig.flag.decode(dec)? == 0 {
        return Ok(ScaleRepr::ZERO);
    }
    let hi = dec.decode_raw_byte()?;
    let lo = dec.decode_raw_byte()?;
    let z = cx.exp.lo.decode(dec)?;
    let sig = (hi as u16) << 8 | lo as u16;
    if sig == 0 {
        return Err(CodeError::Malformed {
            offset: dec.position(),
            what: "explicit scale with a zero significand",
        });
    }
    Ok(ScaleRepr {
        sig,
        exp: unzigzag(z as u8),
    })
}

fn check_shapes(a: &QuantNet, b: &QuantNet) -> Result<(), CodeError> {
    if a.spec != b.spec || a.bw != b.bw || a.bb != b.bb {
        return Err(CodeError::Malformed {
            offset: 0,
            what: "differential coding across mismatched network shapes",
        });
    }
    Ok(())
}

/// Encode a fine-tuned network as deltas from the previously signalled one.
pub fn encode_diff(q: &QuantNet, prev: &QuantNet) -> Result<Vec<u8>, CodeError> {
    check_shapes(q, prev)?;
    let mut enc = RangeEncoder::new();
    let mut cx = Contexts::new();
    for (l, pl) in q.layers.iter().zip(&prev.layers) {
        for (s, ps) in l.w_scales.iter().zip(&pl.w_scales) {
            cx.sig.encode(&mut enc, s.sig as i32 - ps.sig as i32);
            cx.exp.encode(&mut enc, s.exp as i32 - ps.exp as i32);
        }
        cx.sig
            .encode(&mut enc, l.b_scale.sig as i32 - pl.b_scale.sig as i32);
        cx.exp
            .encode(&mut enc, l.b_scale.exp as i32 - pl.b_scale.exp as i32);
        for (&v, &pv) in l.w.iter().zip(&pl.w) {
            cx.w.encode(&mut enc, v - pv);
        }
        for (&v, &pv) in l.b.iter().zip(&pl.b) {
            cx.b.encode(&mut enc, v - pv);
        }
    }
    enc.encode_raw_byte(SENTINEL[0]);
    enc.encode_raw_byte(SENTINEL[1]);
    Ok(enc.finish())
}

/// Decode a `DIFF` payload against the previously signalled network.
pub fn decode_diff(buf: &[u8], prev: &QuantNet) -> Result<QuantNet, CodeError> {
    let mut dec = RangeDecoder::new(buf)?;
    let mut cx = Contexts::new();
    let wq = qmax(prev.bw);
    let bq = qmax(prev.bb);
    let mut layers = Vec::new();
    for pl in &prev.layers {
        let mut w_scales = Vec::with_capacity(pl.w_scales.len());
        for ps in &pl.w_scales {
            w_scales.push(decode_diff_scale(&mut dec, &mut cx, *ps)?);
        }
        let b_scale = decode_diff_scale(&mut dec, &mut cx, pl.b_scale)?;
        let mut w = Vec::with_capacity(pl.w.len());
        for &pv in &pl.w {
            let v = pv + cx.w.decode(&mut dec, 2 * wq)?;
            if v.unsigned_abs() > wq {
                return Err(CodeError::Malformed {
                    offset: dec.position(),
                    what: "weight delta leaves the representable range",
                });
            }
            w.push(v);
        }
        let mut b = Vec::with_capacity(pl.b.len());
        for &pv in &pl.b {
            let v = pv + cx.b.decode(&mut dec, 2 * bq)?;
            if v.unsigned_abs() > bq {
                return Err(CodeError::Malformed {
                    offset: dec.position(),
                    what: "bias delta leaves the representable range",
                });
            }
            b.push(v);
        }
        layers.push(QuantLayer {
            w,
            b,
            w_scales,
            b_scale,
        });
    }
    check_sentinel(&mut dec)?;
    Ok(QuantNet {
        spec: prev.spec,
        bw: prev.bw,
        bb: prev.bb,
        layers,
    })
}

fn decode_diff_scale(
    dec: &mut RangeDecoder,
    cx: &mut Contexts,
    prev: ScaleRepr,
) -> Result<ScaleRepr, CodeError> {
    let sig = prev.sig as i32 + cx.sig.decode(dec, u16::MAX as u32)?;
    let exp = prev.exp as i32 + cx.exp.decode(dec, u8::MAX as u32)?;
    if !(0..=u16::MAX as i32).contains(&sig) || !(i8::MIN as i32..=i8::MAX as i32).contains(&exp)
    {
        return Err(CodeError::Malformed {
            offset: dec.position(),
            what: "scale delta leaves the representable range",
        });
    }
    Ok(ScaleRepr {
        sig: sig as u16,
        exp: exp as i8,
    })
}

fn check_sentinel(dec: &mut RangeDecoder) -> Result<(), CodeError> {
    let a = dec.decode_raw_byte()?;
    let b = dec.decode_raw_byte()?;
    if [a, b] != SENTINEL {
        return Err(CodeError::Integrity {
            offset: dec.position(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ChannelRole, NetSpec, PackConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<NetSpec> {
        let mut out = Vec::new();
        for role in [ChannelRole::Luma, ChannelRole::Chroma] {
            for pack in [PackConfig::P1X1, PackConfig::P2X2] {
                for width in [6usize, 12] {
                    out.push(NetSpec::new(role, pack, width).unwrap());
                }
            }
        }
        out
    }

    fn random_net(spec: NetSpec, bw: u8, bb: u8, rng: &mut ChaCha8Rng) -> QuantNet {
        let wq = qmax(bw) as i32;
        let bq = qmax(bb) as i32;
        let layers = layer_geometry(spec)
            .into_iter()
            .map(|(groups, w_len, out_c)| {
                let zero_group = rng.gen_bool(0.1);
                QuantLayer {
                    w: (0..w_len).map(|_| rng.gen_range(-wq..=wq)).collect(),
                    b: (0..out_c).map(|_| rng.gen_range(-bq..=bq)).collect(),
                    w_scales: (0..groups)
                        .map(|g| {
                            if zero_group && g == 0 {
                                ScaleRepr::ZERO
                            } else {
                                ScaleRepr {
                                    sig: rng.gen_range(1 << 15..=u16::MAX),
                                    exp: rng.gen_range(-20..20),
                                }
                            }
                        })
                        .collect(),
                    b_scale: ScaleRepr {
                        sig: rng.gen_range(1 << 15..=u16::MAX),
                        exp: rng.gen_range(-20..20),
                    },
                }
            })
            .collect();
        QuantNet {
            spec,
            bw,
            bb,
            layers,
        }
    }

    /// Step a net's integers by small amounts, as fine-tuning would.
    fn perturb(q: &QuantNet, rng: &mut ChaCha8Rng) -> QuantNet {
        let mut out = q.clone();
        let wq = qmax(q.bw) as i32;
        let bq = qmax(q.bb) as i32;
        for l in out.layers.iter_mut() {
            for v in l.w.iter_mut() {
                *v = (*v + rng.gen_range(-2..=2)).clamp(-wq, wq);
            }
            for v in l.b.iter_mut() {
                *v = (*v + rng.gen_range(-3..=3)).clamp(-bq, bq);
            }
            for s in l.w_scales.iter_mut() {
                if !s.is_zero() {
                    s.sig = (s.sig as i32 + rng.gen_range(-40..=40)).clamp(1, 65535) as u16;
                }
            }
        }
        out
    }

    #[test]
    fn new_payload_round_trips_across_shapes_and_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        for spec in specs() {
            for &(bw, bb) in &[(6u8, 10u8), (9, 10), (10, 12)] {
                let q = random_net(spec, bw, bb, &mut rng);
                let buf = encode_new(&q);
                let back = decode_new(&buf, spec, bw, bb).unwrap();
                assert_eq!(q, back);
            }
        }
    }

    #[test]
    fn diff_payload_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(401);
        for spec in specs() {
            let prev = random_net(spec, 9, 10, &mut rng);
            let next = perturb(&prev, &mut rng);
            let buf = encode_diff(&next, &prev).unwrap();
            let back = decode_diff(&buf, &prev).unwrap();
            assert_eq!(next, back);
        }
    }

    #[test]
    fn unchanged_net_diffs_to_a_handful_of_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(402);
        let spec = NetSpec::new(ChannelRole::Luma, PackConfig::P2X2, 12).unwrap();
        let q = random_net(spec, 9, 10, &mut rng);
        let buf = encode_diff(&q, &q).unwrap();
        assert!(
            buf.len() < 24,
            "identical nets should diff to <24 bytes, got {}",
            buf.len()
        );
        assert_eq!(decode_diff(&buf, &q).unwrap(), q);
    }

    #[test]
    fn fine_tune_diff_beats_fresh_coding_at_every_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(403);
        let spec = NetSpec::new(ChannelRole::Luma, PackConfig::P2X2, 12).unwrap();
        for &bw in &[6u8, 7, 9, 10] {
            let prev = random_net(spec, bw, 10, &mut rng);
            let next = perturb(&prev, &mut rng);
            let diff = encode_diff(&next, &prev).unwrap();
            let fresh = encode_new(&next);
            assert!(
                diff.len() < fresh.len(),
                "b_w={bw}: diff {} >= fresh {}",
                diff.len(),
                fresh.len()
            );
        }
    }

    #[test]
    fn all_zero_net_codes_tiny() {
        let spec = NetSpec::new(ChannelRole::Luma, PackConfig::P2X2, 12).unwrap();
        let q = QuantNet::zero(spec, 9, 10);
        let buf = encode_new(&q);
        assert!(buf.len() <= 32, "all-zero payload is {} bytes", buf.len());
        assert_eq!(decode_new(&buf, spec, 9, 10).unwrap(), q);
    }

    #[test]
    fn truncation_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let spec = NetSpec::new(ChannelRole::Luma, PackConfig::P1X1, 6).unwrap();
        let q = random_net(spec, 9, 10, &mut rng);
        let buf = encode_new(&q);
        let cut = &buf[..buf.len() / 2];
        match decode_new(cut, spec, 9, 10) {
            Err(CodeError::Truncated { offset }) => assert!(offset <= cut.len()),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn corruption_is_caught_by_sentinel_or_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(405);
        let spec = NetSpec::new(ChannelRole::Luma, PackConfig::P1X1, 6).unwrap();
        let q = random_net(spec, 9, 10, &mut rng);
        let mut buf = encode_new(&q);
        // Flip a byte in the middle; the damage must never pass silently
        // as the same net.
        let at = buf.len() / 2;
        buf[at] ^= 0x41;
        match decode_new(&buf, spec, 9, 10) {
            Err(_) => {}
            Ok(back) => assert_ne!(back, q, "corrupted payload decoded bit-identically"),
        }
    }

    #[test]
    fn oversized_magnitudes_are_malformed() {
        let mut rng = ChaCha8Rng::seed_from_u64(406);
        let spec = NetSpec::new(ChannelRole::Luma, PackConfig::P1X1, 6).unwrap();
        // Encoded at ten bits, decoded claiming six: magnitudes overflow.
        let q = random_net(spec, 10, 10, &mut rng);
        let buf = encode_new(&q);
        match decode_new(&buf, spec, 6, 10) {
            Err(CodeError::Malformed { what, .. }) => {
                assert!(what.contains("magnitude"));
            }
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn diff_against_wrong_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(407);
        let a = random_net(
            NetSpec::new(ChannelRole::Luma, PackConfig::P2X2, 12).unwrap(),
            9,
            10,
            &mut rng,
        );
        let b = random_net(
            NetSpec::new(ChannelRole::Luma, PackConfig::P2X2, 6).unwrap(),
            9,
            10,
            &mut rng,
        );
        assert!(encode_diff(&a, &b).is_err());
    }

    #[test]
    fn payload_fuzz_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(408);
        let all = specs();
        for i in 0..250 {
            let spec = all[i % all.len()];
            let bw = *[6u8, 7, 9, 10].choose(&mut rng).unwrap();
            let q = random_net(spec, bw, 10, &mut rng);
            let fresh = decode_new(&encode_new(&q), spec, bw, 10).unwrap();
            assert_eq!(q, fresh, "NEW mismatch at case {i}");
            let next = perturb(&q, &mut rng);
            let diff = decode_diff(&encode_diff(&next, &q).unwrap(), &q).unwrap();
            assert_eq!(next, diff, "DIFF mismatch at case {i}");
        }
    }
}
