//! The sidecar container: a small header describing the clip-wide
//! configuration, followed by one unit per GoP and role.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header, 16 bytes
//!   0..4   magic "RRF1"
//!   4      format version, currently 1
//!   5      flags: bit 0 = low-delay chaining, bit 1 = luma refined,
//!          bit 2 = chroma refined; remaining bits reserved as zero
//!   6      pack factors, one bit each (value − 1): bit 0 luma vertical,
//!          bit 1 luma horizontal, bit 2 chroma vertical, bit 3 chroma
//!          horizontal; zero for absent roles
//!   7      bit widths: (b_w − 1) << 4 | (b_b − 1)
//!   8..10  frame width in luma samples
//!   10..12 frame height in luma samples
//!   12..14 GoP length in frames
//!   14     luma network width (0 when luma is absent)
//!   15     chroma network width (0 when chroma is absent)
//!
//! unit, repeated per GoP in display order, luma before chroma
//!   0      role: 0 = luma, 1 = chroma
//!   1      mode: 0 = skip, 1 = new, 2 = diff
//!   2..6   payload length (0 for skip)
//!   6..    payload (see `codec`)
//! ```
//!
//! A `skip` unit signals no parameter update: under random access the GoP
//! goes unrefined, under low delay the previously signalled network stays
//! in force. `diff` units are only meaningful against a predecessor and
//! are therefore rejected in random-access streams.

use crate::net::{ChannelRole, NetSpec, PackConfig};
use crate::yuv::CodingMode;

pub const STREAM_MAGIC: [u8; 4] = *b"RRF1";
pub const STREAM_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const UNIT_HEADER_LEN: usize = 6;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum StreamError {
    #[error("stream truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("malformed stream at byte {offset}: {what}")]
    Malformed { offset: usize, what: &'static str },
}

/// Per-role refinement setup carried in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RolePlan {
    pub pack: PackConfig,
    pub net_width: usize,
}

impl RolePlan {
    pub fn net_spec(&self, role: ChannelRole) -> NetSpec {
        // Validated at stream boundaries, so construction cannot fail.
        NetSpec::new(role, self.pack, self.net_width).expect("validated role plan")
    }
}

/// Clip-wide configuration: everything the decoder needs before the first
/// unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConfig {
    pub mode: CodingMode,
    pub width: usize,
    pub height: usize,
    pub gop_len: usize,
    pub bw: u8,
    pub bb: u8,
    pub luma: Option<RolePlan>,
    pub chroma: Option<RolePlan>,
}

impl StreamConfig {
    pub fn role_plan(&self, role: ChannelRole) -> Option<RolePlan> {
        match role {
            ChannelRole::Luma => self.luma,
            ChannelRole::Chroma => self.chroma,
        }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if self.width == 0 || self.height == 0 {
            return Err("zero frame dimension");
        }
        if !self.width.is_multiple_of(2) || !self.height.is_multiple_of(2) {
            return Err("odd frame dimension");
        }
        if self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return Err("frame dimension exceeds 65535");
        }
        if self.gop_len == 0 || self.gop_len > u16::MAX as usize {
            return Err("GoP length out of range");
        }
        if !(2..=16).contains(&self.bw) || !(2..=16).contains(&self.bb) {
            return Err("bit width out of range 2..=16");
        }
        if self.luma.is_none() && self.chroma.is_none() {
            return Err("no refined roles");
        }
        for (plan, role) in [
            (self.luma, ChannelRole::Luma),
            (self.chroma, ChannelRole::Chroma),
        ] {
            if let Some(p) = plan {
                if NetSpec::new(role, p.pack, p.net_width).is_err() {
                    return Err("network width out of range");
                }
                if p.net_width > u8::MAX as usize {
                    return Err("network width out of range");
                }
            }
        }
        Ok(())
    }
}

/// How one unit updates its role's network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitMode {
    Skip,
    New,
    Diff,
}

impl UnitMode {
    fn to_byte(self) -> u8 {
        match self {
            UnitMode::Skip => 0,
            UnitMode::New => 1,
            UnitMode::Diff => 2,
        }
    }

    fn from_byte(b: u8) -> Option<UnitMode> {
        match b {
            0 => Some(UnitMode::Skip),
            1 => Some(UnitMode::New),
            2 => Some(UnitMode::Diff),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnitMode::Skip => "skip",
            UnitMode::New => "new",
            UnitMode::Diff => "diff",
        }
    }
}

/// One role's update for one GoP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitPayload {
    pub mode: UnitMode,
    pub payload: Vec<u8>,
}

impl UnitPayload {
    pub fn skip() -> UnitPayload {
        UnitPayload {
            mode: UnitMode::Skip,
            payload: Vec::new(),
        }
    }
}

/// The units of one GoP, present exactly for the roles the header enables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GopUnits {
    pub luma: Option<UnitPayload>,
    pub chroma: Option<UnitPayload>,
}

impl GopUnits {
    pub fn get(&self, role: ChannelRole) -> Option<&UnitPayload> {
        match role {
            ChannelRole::Luma => self.luma.as_ref(),
            ChannelRole::Chroma => self.chroma.as_ref(),
        }
    }
}

/// A parsed sidecar: header configuration plus per-GoP units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sidecar {
    pub config: StreamConfig,
    pub gops: Vec<GopUnits>,
}

impl Sidecar {
    /// Total bytes of entropy-coded payload, excluding framing.
    pub fn payload_bytes(&self) -> usize {
        self.gops
            .iter()
            .flat_map(|g| [&g.luma, &g.chroma])
            .flatten()
            .map(|u| u.payload.len())
            .sum()
    }
}

fn pack_bits(plan: Option<RolePlan>) -> u8 {
    match plan {
        Some(p) => (p.pack.ph - 1) | (p.pack.pw - 1) << 1,
        None => 0,
    }
}

/// Serialize a sidecar, validating it first so malformed streams cannot be
/// produced.
pub fn write_stream(s: &Sidecar) -> Result<Vec<u8>, StreamError> {
    let c = &s.config;
    let reject = |what| Err(StreamError::Malformed { offset: 0, what });
    if let Err(what) = c.validate() {
        return reject(what);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + s.gops.len() * 64);
    out.extend_from_slice(&STREAM_MAGIC);
    out.push(STREAM_VERSION);
    let mut flags = 0u8;
    if c.mode == CodingMode::LowDelay {
        flags |= 1;
    }
    if c.luma.is_some() {
        flags |= 2;
    }
    if c.chroma.is_some() {
        flags |= 4;
    }
    out.push(flags);
    out.push(pack_bits(c.luma) | pack_bits(c.chroma) << 2);
    out.push((c.bw - 1) << 4 | (c.bb - 1));
    out.extend_from_slice(&(c.width as u16).to_le_bytes());
    out.extend_from_slice(&(c.height as u16).to_le_bytes());
    out.extend_from_slice(&(c.gop_len as u16).to_le_bytes());
    out.push(c.luma.map_or(0, |p| p.net_width as u8));
    out.push(c.chroma.map_or(0, |p| p.net_width as u8));
    for g in &s.gops {
        for (unit, plan, role) in [
            (&g.luma, c.luma, ChannelRole::Luma),
            (&g.chroma, c.chroma, ChannelRole::Chroma),
        ] {
            match (unit, plan) {
                (Some(u), Some(_)) => {
                    if u.mode == UnitMode::Skip && !u.payload.is_empty() {
                        return reject("skip unit with payload");
                    }
                    if u.mode != UnitMode::Skip && u.payload.is_empty() {
                        return reject("parameter unit without payload");
                    }
                    if u.mode == UnitMode::Diff && c.mode == CodingMode::RandomAccess {
                        return reject("differential unit in a random-access stream");
                    }
                    if u.payload.len() > u32::MAX as usize {
                        return reject("payload too large");
                    }
                    out.push(match role {
                        ChannelRole::Luma => 0,
                        ChannelRole::Chroma => 1,
                    });
                    out.push(u.mode.to_byte());
                    out.extend_from_slice(&(u.payload.len() as u32).to_le_bytes());
                    out.extend_from_slice(&u.payload);
                }
                (None, None) => {}
                _ => return reject("unit set does not match enabled roles"),
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StreamError> {
        if self.at + n > self.buf.len() {
            return Err(StreamError::Truncated { offset: self.buf.len() });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8, StreamError> {
        Ok(self.take(1)?[0])
    }

    fn u16le(&mut self) -> Result<u16, StreamError> {
        let s = self.take(2)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32le(&mut self) -> Result<u32, StreamError> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn bad(&self, what: &'static str) -> StreamError {
        StreamError::Malformed { offset: self.at, what }
    }
}

/// Parse and validate a serialized sidecar.
pub fn read_stream(buf: &[u8]) -> Result<Sidecar, StreamError> {
    let mut c = Cursor { buf, at: 0 };
    if c.take(4)? != STREAM_MAGIC {
        return Err(c.bad("not a refinement sidecar"));
    }
    if c.byte()? != STREAM_VERSION {
        return Err(c.bad("unsupported format version"));
    }
    let flags = c.byte()?;
    if flags & !0x07 != 0 {
        return Err(c.bad("reserved flag bits set"));
    }
    let mode = if flags & 1 != 0 {
        CodingMode::LowDelay
    } else {
        CodingMode::RandomAccess
    };
    let packs = c.byte()?;
    if packs & !0x0F != 0 {
        return Err(c.bad("reserved pack bits set"));
    }
    let bits = c.byte()?;
    let (bw_n, bb_n) = (bits >> 4, bits & 0x0F);
    if bw_n == 0 || bb_n == 0 {
        return Err(c.bad("zero bit-width field"));
    }
    let width = c.u16le()? as usize;
    let height = c.u16le()? as usize;
    let gop_len = c.u16le()? as usize;
    let nw_y = c.byte()?;
    let nw_uv = c.byte()?;
    let role_plan = |enabled: bool, pack_bits: u8, net_width: u8| -> Result<_, StreamError> {
        if !enabled {
            if pack_bits != 0 || net_width != 0 {
                return Err(StreamError::Malformed {
                    offset: HEADER_LEN,
                    what: "role fields set for an absent role",
                });
            }
            return Ok(None);
        }
        if net_width == 0 {
            return Err(StreamError::Malformed {
                offset: HEADER_LEN,
                what: "zero network width for an enabled role",
            });
        }
        let pack = PackConfig::new((pack_bits & 1) + 1, (pack_bits >> 1) + 1)
            .expect("single-bit pack factors");
        Ok(Some(RolePlan {
            pack,
            net_width: net_width as usize,
        }))
    };
    let config = StreamConfig {
        mode,
        width,
        height,
        gop_len,
        bw: bw_n + 1,
        bb: bb_n + 1,
        luma: role_plan(flags & 2 != 0, packs & 0x03, nw_y)?,
        chroma: role_plan(flags & 4 != 0, packs >> 2, nw_uv)?,
    };
    if let Err(what) = config.validate() {
        return Err(StreamError::Malformed {
            offset: HEADER_LEN,
            what,
        });
    }
    let mut gops = Vec::new();
    while c.at < buf.len() {
        let mut g = GopUnits::default();
        for (slot, enabled, want_role) in [
            (&mut g.luma, config.luma.is_some(), 0u8),
            (&mut g.chroma, config.chroma.is_some(), 1u8),
        ] {
            if !enabled {
                continue;
            }
            if c.byte()? != want_role {
                return Err(c.bad("unit role out of order"));
            }
            let mode = UnitMode::from_byte(c.byte()?).ok_or_else(|| c.bad("unknown unit mode"))?;
            let len = c.u32le()? as usize;
            if mode == UnitMode::Skip && len != 0 {
                return Err(c.bad("skip unit with payload"));
            }
            if mode != UnitMode::Skip && len == 0 {
                return Err(c.bad("parameter unit without payload"));
            }
            if mode == UnitMode::Diff && config.mode == CodingMode::RandomAccess {
                return Err(c.bad("differential unit in a random-access stream"));
            }
            let payload = c.take(len)?.to_vec();
            *slot = Some(UnitPayload { mode, payload });
        }
        gops.push(g);
    }
    Ok(Sidecar { config, gops })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(ph: u8, pw: u8, net_width: usize) -> RolePlan {
        RolePlan {
            pack: PackConfig::new(ph, pw).unwrap(),
            net_width,
        }
    }

    fn sample_config() -> StreamConfig {
        StreamConfig {
            mode: CodingMode::RandomAccess,
            width: 352,
            height: 288,
            gop_len: 32,
            bw: 9,
            bb: 10,
            luma: Some(plan(2, 2, 12)),
            chroma: Some(plan(1, 1, 6)),
        }
    }

    fn unit(mode: UnitMode, payload: &[u8]) -> Option<UnitPayload> {
        Some(UnitPayload {
            mode,
            payload: payload.to_vec(),
        })
    }

    fn sample_sidecar() -> Sidecar {
        Sidecar {
            config: sample_config(),
            gops: vec![
                GopUnits {
                    luma: unit(UnitMode::New, &[1, 2, 3, 4, 5]),
                    chroma: unit(UnitMode::Skip, &[]),
                },
                GopUnits {
                    luma: unit(UnitMode::Skip, &[]),
                    chroma: unit(UnitMode::New, &[9, 8, 7]),
                },
            ],
        }
    }

    #[test]
    fn round_trips_across_configurations() {
        let mut s = sample_sidecar();
        for mode in [CodingMode::RandomAccess, CodingMode::LowDelay] {
            for (luma, chroma) in [
                (Some(plan(2, 2, 12)), Some(plan(1, 1, 6))),
                (Some(plan(1, 2, 6)), None),
                (None, Some(plan(2, 1, 12))),
            ] {
                s.config.mode = mode;
                s.config.luma = luma;
                s.config.chroma = chroma;
                for g in s.gops.iter_mut() {
                    g.luma = luma.map(|_| UnitPayload {
                        mode: UnitMode::New,
                        payload: vec![1, 2, 3],
                    });
                    g.chroma = chroma.map(|_| UnitPayload::skip());
                }
                let bytes = write_stream(&s).unwrap();
                assert_eq!(read_stream(&bytes).unwrap(), s);
            }
        }
    }

    #[test]
    fn header_bytes_are_pinned() {
        let bytes = write_stream(&sample_sidecar()).unwrap();
        #[rustfmt::skip]
        let want = [
            b'R', b'R', b'F', b'1',
            1,          // version
            0b110,      // random access, luma + chroma
            0b0011,     // luma 2x2, chroma 1x1
            0x89,       // b_w = 9, b_b = 10
            0x60, 0x01, // width 352
            0x20, 0x01, // height 288
            0x20, 0x00, // GoP length 32
            12, 6,      // network widths
        ];
        assert_eq!(&bytes[..HEADER_LEN], &want);
        // First unit immediately after: luma, new, 5-byte payload.
        assert_eq!(&bytes[16..27], &[0, 1, 5, 0, 0, 0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn truncation_is_detected_at_every_length() {
        let s = sample_sidecar();
        let bytes = write_stream(&s).unwrap();
        // The container is delimited by end of input, so a prefix ending
        // exactly on a GoP boundary reads back as a valid, shorter
        // sidecar; the GoP count check against the clip happens above
        // this layer. Every other cut must report truncation.
        let mut boundaries = vec![HEADER_LEN];
        for g in &s.gops {
            let gop: usize = [&g.luma, &g.chroma]
                .into_iter()
                .flatten()
                .map(|u| UNIT_HEADER_LEN + u.payload.len())
                .sum();
            boundaries.push(boundaries.last().unwrap() + gop);
        }
        for cut in 0..bytes.len() {
            if let Some(i) = boundaries.iter().position(|&b| b == cut) {
                assert_eq!(read_stream(&bytes[..cut]).unwrap().gops.len(), i);
                continue;
            }
            match read_stream(&bytes[..cut]) {
                Err(StreamError::Truncated { offset }) => assert_eq!(offset, cut),
                other => panic!("cut at {cut}: expected truncation, got {other:?}"),
            }
        }
        assert!(read_stream(&bytes).is_ok());
    }

    #[test]
    fn header_corruption_is_rejected() {
        let good = write_stream(&sample_sidecar()).unwrap();
        let corrupt = |at: usize, to: u8, what: &str| {
            let mut b = good.clone();
            b[at] = to;
            match read_stream(&b) {
                Err(StreamError::Malformed { what: w, .. }) => {
                    assert!(w.contains(what), "byte {at}: got {w:?}")
                }
                other => panic!("byte {at}: expected malformed, got {other:?}"),
            }
        };
        corrupt(0, b'X', "sidecar");
        corrupt(4, 2, "version");
        corrupt(5, 0b1110, "reserved flag");
        corrupt(5, 0b001, "absent role");
        corrupt(6, 0xF3, "reserved pack");
        corrupt(7, 0x09, "zero bit-width");
        corrupt(8, 0x61, "odd frame dimension");
        corrupt(12, 0, "GoP length");
        corrupt(14, 0, "zero network width");

        // Disabling both roles with their fields cleared reaches the
        // role-count check itself.
        let mut b = good.clone();
        (b[5], b[6], b[14], b[15]) = (0, 0, 0, 0);
        match read_stream(&b[..HEADER_LEN]) {
            Err(StreamError::Malformed { what, .. }) => assert_eq!(what, "no refined roles"),
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn unit_corruption_is_rejected() {
        let good = write_stream(&sample_sidecar()).unwrap();
        let corrupt = |at: usize, to: u8, what: &str| {
            let mut b = good.clone();
            b[at] = to;
            match read_stream(&b) {
                Err(StreamError::Malformed { what: w, .. }) => {
                    assert!(w.contains(what), "byte {at}: got {w:?}")
                }
                other => panic!("byte {at}: expected malformed, got {other:?}"),
            }
        };
        corrupt(16, 1, "role out of order");
        corrupt(17, 3, "unknown unit mode");
        corrupt(17, 0, "skip unit with payload");
        // Diff in a random-access stream.
        corrupt(17, 2, "random-access");
    }

    #[test]
    fn diff_units_require_low_delay_on_write() {
        let mut s = sample_sidecar();
        s.gops[0].luma = unit(UnitMode::Diff, &[1, 2]);
        assert!(matches!(
            write_stream(&s),
            Err(StreamError::Malformed { what, .. }) if what.contains("random-access")
        ));
        s.config.mode = CodingMode::LowDelay;
        let bytes = write_stream(&s).unwrap();
        assert_eq!(read_stream(&bytes).unwrap(), s);
    }

    #[test]
    fn mismatched_units_are_rejected_on_write() {
        let mut s = sample_sidecar();
        s.gops[1].chroma = None;
        assert!(matches!(
            write_stream(&s),
            Err(StreamError::Malformed { what, .. }) if what.contains("enabled roles")
        ));
    }

    #[test]
    fn invalid_configs_are_rejected_on_write() {
        type Tweak = fn(&mut StreamConfig);
        let cases: [(&str, Tweak); 5] = [
            ("odd frame dimension", |c| c.width = 351),
            ("zero frame dimension", |c| c.height = 0),
            ("GoP length out of range", |c| c.gop_len = 0),
            ("bit width out of range 2..=16", |c| c.bw = 17),
            ("no refined roles", |c| {
                c.luma = None;
                c.chroma = None;
            }),
        ];
        for (what, tweak) in cases {
            let mut s = sample_sidecar();
            tweak(&mut s.config);
            s.gops.clear();
            match write_stream(&s) {
                Err(StreamError::Malformed { what: w, .. }) => assert_eq!(w, what),
                other => panic!("{what}: got {other:?}"),
            }
        }
    }

    #[test]
    fn payload_bytes_sums_all_units() {
        assert_eq!(sample_sidecar().payload_bytes(), 8);
    }
}
