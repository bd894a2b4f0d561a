//! Byte-oriented 32-bit range coder with carry propagation, plus the
//! adaptive frequency model the parameter codec drives it with.
//!
//! The encoder keeps the low end of the interval in 33 bits; a pending run of
//! 0xFF bytes absorbs carries before anything is committed to the output
//! (classic carry-counting construction). The first emitted byte is always
//! zero and the decoder skips it, which keeps the two sides aligned without
//! special-casing the very first carry.
//!
//! Frequency models are cumulative histograms: counts start at 1 (every
//! symbol always codable), grow by 32 per observation, and are halved once
//! the total passes 2^14 so the model adapts and the coder's 8-bit
//! renormalization headroom is never exceeded.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodeError {
    #[error("payload truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("payload integrity check failed at byte {offset}")]
    Integrity { offset: usize },
    #[error("malformed payload at byte {offset}: {what}")]
    Malformed { offset: usize, what: &'static str },
}

const TOP: u32 = 1 << 24;
/// Adaptation increment per coded symbol.
const MODEL_INC: u32 = 32;
/// Halve all counts when the total exceeds this.
const MODEL_CAP: u32 = 1 << 14;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    /// Bytes withheld for carry resolution (the cache byte plus a run of
    /// 0xFF). Starts at 1 so the first shift emits the leading zero byte.
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low as u32 as u64) << 8 & 0xFFFF_FFFF;
    }

    /// Narrow the interval to `[cum, cum+freq)` out of `total`.
    /// Requires `freq > 0`, `cum + freq <= total`, `total <= 1 << 16`.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total && total <= 1 << 16);
        let r = self.range / total;
        self.low += cum as u64 * r as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    /// Code one byte under a fixed uniform distribution.
    pub fn encode_raw_byte(&mut self, b: u8) {
        self.encode(b as u32, 1, 256);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
    /// range/total from the preceding `decode_target` call.
    r: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self, CodeError> {
        if buf.len() < 5 {
            return Err(CodeError::Truncated { offset: buf.len() });
        }
        // buf[0] is the encoder's leading zero byte.
        let code = u32::from_be_bytes([buf[1], buf[2], buf[3], buf[4]]);
        Ok(RangeDecoder {
            buf,
            pos: 5,
            range: u32::MAX,
            code,
            r: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Cumulative-frequency target of the next symbol; the caller locates the
    /// symbol whose `[cum, cum+freq)` contains it and calls [`Self::commit`].
    pub fn decode_target(&mut self, total: u32) -> u32 {
        self.r = self.range / total;
        (self.code / self.r).min(total - 1)
    }

    /// Consume the symbol located by the last [`Self::decode_target`].
    pub fn commit(&mut self, cum: u32, freq: u32) -> Result<(), CodeError> {
        self.code -= cum * self.r;
        self.range = self.r * freq;
        while self.range < TOP {
            let byte = *self
                .buf
                .get(self.pos)
                .ok_or(CodeError::Truncated { offset: self.pos })?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_raw_byte(&mut self) -> Result<u8, CodeError> {
        let b = self.decode_target(256);
        self.commit(b, 1)?;
        Ok(b as u8)
    }
}

/// Adaptive order-0 frequency model over a fixed alphabet.
#[derive(Debug, Clone)]
pub struct FreqModel {
    freq: Vec<u32>,
    total: u32,
}

impl FreqModel {
    pub fn new(symbols: usize) -> Self {
        assert!((1..=1 << 13).contains(&symbols), "alphabet size");
        FreqModel {
            freq: vec![1; symbols],
            total: symbols as u32,
        }
    }

    pub fn symbols(&self) -> usize {
        self.freq.len()
    }

    fn adapt(&mut self, sym: usize) {
        self.freq[sym] += MODEL_INC;
        self.total += MODEL_INC;
        if self.total > MODEL_CAP {
            self.total = 0;
            for f in self.freq.iter_mut() {
                *f = (*f + 1) >> 1;
                self.total += *f;
            }
        }
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, sym: usize) {
        let cum: u32 = self.freq[..sym].iter().sum();
        enc.encode(cum, self.freq[sym], self.total);
        self.adapt(sym);
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder) -> Result<usize, CodeError> {
        let target = dec.decode_target(self.total);
        let mut cum = 0;
        let mut sym = self.freq.len() - 1;
        for (i, &f) in self.freq.iter().enumerate() {
            if cum + f > target {
                sym = i;
                break;
            }
            cum += f;
        }
        dec.commit(cum, self.freq[sym])?;
        self.adapt(sym);
        Ok(sym)
    }
}
