//! Entropy coding: a 32-bit byte-renormalizing range coder driven by integer
//! PMF tables, plus order-0 Exp-Golomb with a zigzag sign map for latent tail
//! escapes.
//!
//! The range coder is the carry-propagating kind: a 64-bit low accumulator
//! with a cached byte absorbs carries, renormalizing a byte at a time while
//! the 32-bit range stays above 2^24. With 16-bit PMF totals every
//! intermediate product fits in 64 bits exactly.

use crate::prior::{PmfTable, CODER_TOTAL};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("bitstream truncated at byte {0}")]
    Truncated(usize),
    #[error("symbol {symbol} out of range for table of {table_len} entries at position {index}")]
    SymbolOutOfRange { index: usize, symbol: usize, table_len: usize },
    #[error("escape payload malformed: {0}")]
    BadEscape(String),
}

const TOP: u32 = 1 << 24;

/// MSB-first bit sink; the final byte is zero-padded.
#[derive(Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_pos: u8,
}

impl BitWriter {
    pub fn new() -> BitWriter {
        BitWriter::default()
    }

    pub fn push_bit(&mut self, bit: bool) {
        if self.bit_pos == 0 {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.last_mut().unwrap();
            *last |= 1 << (7 - self.bit_pos);
        }
        self.bit_pos = (self.bit_pos + 1) % 8;
    }

    pub fn bit_len(&self) -> usize {
        if self.bit_pos == 0 {
            self.bytes.len() * 8
        } else {
            (self.bytes.len() - 1) * 8 + self.bit_pos as usize
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// MSB-first bit source over a byte slice.
pub struct BitReader<'a> {
    bytes: &'a [u8],
    cursor: usize, // bit index
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> BitReader<'a> {
        BitReader { bytes, cursor: 0 }
    }

    pub fn next_bit(&mut self) -> Result<bool, EntropyError> {
        let byte = self.cursor / 8;
        if byte >= self.bytes.len() {
            return Err(EntropyError::Truncated(byte));
        }
        let bit = (self.bytes[byte] >> (7 - (self.cursor % 8))) & 1 == 1;
        self.cursor += 1;
        Ok(bit)
    }

    pub fn bits_consumed(&self) -> usize {
        self.cursor
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        // cache_size starts at 1, which emits one leading zero byte the
        // decoder skips; that byte is the carry landing zone.
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    pub fn encode(&mut self, table: &PmfTable, symbol: usize) {
        let r = self.range / CODER_TOTAL;
        self.low += r as u64 * table.cum_low(symbol) as u64;
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            self.out.push(self.cache.wrapping_add(carry));
            while self.cache_size > 1 {
                self.out.push(0xFFu8.wrapping_add(carry));
                self.cache_size -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        } else {
            self.cache_size += 1;
        }
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Any value in [low, low + range) decodes identically; the range
        // stays >= 2^24, so that interval contains a multiple of 2^24. Pick
        // it, emit only its top byte, and let the decoder supply the three
        // implied trailing zero bytes. No further additions can happen, so
        // pending bytes flush immediately with the final carry.
        let v = (self.low + 0x00FF_FFFF) & !0x00FF_FFFFu64;
        let carry = (v >> 32) as u8;
        self.out.push(self.cache.wrapping_add(carry));
        while self.cache_size > 1 {
            self.out.push(0xFFu8.wrapping_add(carry));
            self.cache_size -= 1;
        }
        self.out.push((v >> 24) as u8);
        self.out
    }
}

/// Trailing zero bytes the encoder omits and the decoder re-supplies.
const IMPLIED_ZERO_BYTES: usize = 3;

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    bytes: &'a [u8],
    pos: usize,
    last_r: u32,
    padded: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<RangeDecoder<'a>, EntropyError> {
        let mut dec =
            RangeDecoder { code: 0, range: u32::MAX, bytes, pos: 0, last_r: 0, padded: 0 };
        // Skip the leading carry byte, then load four code bytes.
        dec.next_byte()?;
        for _ in 0..4 {
            let b = dec.next_byte()?;
            dec.code = (dec.code << 8) | b as u32;
        }
        Ok(dec)
    }

    /// Reads the next stream byte, re-supplying the implied trailing zero
    /// bytes the encoder omitted; anything beyond those is real truncation.
    fn next_byte(&mut self) -> Result<u8, EntropyError> {
        if self.pos < self.bytes.len() {
            self.pos += 1;
            Ok(self.bytes[self.pos - 1])
        } else if self.padded < IMPLIED_ZERO_BYTES {
            self.padded += 1;
            Ok(0)
        } else {
            Err(EntropyError::Truncated(self.pos))
        }
    }

    pub fn decode(&mut self, table: &PmfTable) -> Result<usize, EntropyError> {
        let r = self.range / CODER_TOTAL;
        self.last_r = r;
        let target = (self.code / r).min(CODER_TOTAL - 1);
        let symbol = table.lookup(target);
        self.code -= r * table.cum_low(symbol);
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u32;
            self.range <<= 8;
        }
        Ok(symbol)
    }
}

/// Range-encodes `symbols[i]` under `table_for(i)`.
pub fn range_encode_with<'a>(
    symbols: &[usize],
    table_for: impl Fn(usize) -> &'a PmfTable,
) -> Result<Vec<u8>, EntropyError> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let table = table_for(i);
        if s >= table.len() {
            return Err(EntropyError::SymbolOutOfRange { index: i, symbol: s, table_len: table.len() });
        }
        enc.encode(table, s);
    }
    Ok(enc.finish())
}

/// Inverse of [`range_encode_with`] for a known symbol count.
pub fn range_decode_with<'a>(
    bytes: &[u8],
    count: usize,
    table_for: impl Fn(usize) -> &'a PmfTable,
) -> Result<Vec<usize>, EntropyError> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(dec.decode(table_for(i))?);
    }
    Ok(out)
}

/// Single shared table over the whole stream.
pub fn range_encode(symbols: &[usize], table: &PmfTable) -> Result<Vec<u8>, EntropyError> {
    range_encode_with(symbols, |_| table)
}

pub fn range_decode(
    bytes: &[u8],
    count: usize,
    table: &PmfTable,
) -> Result<Vec<usize>, EntropyError> {
    range_decode_with(bytes, count, |_| table)
}

/// Order-0 Exp-Golomb of the zigzag-mapped integer: m = 2v for v >= 0,
/// m = -2v - 1 for v < 0.
pub fn exp_golomb_encode(value: i64, writer: &mut BitWriter) {
    let m = zigzag(value);
    exp_golomb_encode_unsigned(m, writer);
}

pub fn exp_golomb_decode(reader: &mut BitReader) -> Result<i64, EntropyError> {
    Ok(unzigzag(exp_golomb_decode_unsigned(reader)?))
}

/// Order-0 Exp-Golomb of a nonnegative integer: L-1 zeros then the L bits of
/// m + 1, where L = bit length of m + 1.
pub fn exp_golomb_encode_unsigned(m: u64, writer: &mut BitWriter) {
    let x = m + 1;
    let len = 64 - x.leading_zeros();
    for _ in 0..len - 1 {
        writer.push_bit(false);
    }
    for i in (0..len).rev() {
        writer.push_bit((x >> i) & 1 == 1);
    }
}

pub fn exp_golomb_decode_unsigned(reader: &mut BitReader) -> Result<u64, EntropyError> {
    let mut zeros = 0u32;
    while !reader.next_bit()? {
        zeros += 1;
        if zeros > 63 {
            return Err(EntropyError::BadEscape("Exp-Golomb prefix too long".to_string()));
        }
    }
    let mut x = 1u64;
    for _ in 0..zeros {
        x = (x << 1) | reader.next_bit()? as u64;
    }
    Ok(x - 1)
}

pub fn zigzag(v: i64) -> u64 {
    if v >= 0 {
        2 * v as u64
    } else {
        (-2 * v - 1) as u64
    }
}

pub fn unzigzag(m: u64) -> i64 {
    if m % 2 == 0 {
        (m / 2) as i64
    } else {
        -(((m + 1) / 2) as i64)
    }
}

/// Escape-path magnitude code for a tail symbol `k` with `|k| > tail_bound`:
/// twice the overshoot plus a sign bit, a bijection since `k != 0`.
fn escape_code(k: i64, tail_bound: i64) -> u64 {
    debug_assert!(k.abs() > tail_bound);
    2 * (k.abs() - tail_bound - 1) as u64 + (k < 0) as u64
}

fn unescape_code(m: u64, tail_bound: i64) -> i64 {
    let mag = (m / 2) as i64 + tail_bound + 1;
    if m % 2 == 1 { -mag } else { mag }
}

/// Codes signed symbols under per-position tables of `2 * tail_bound + 2`
/// slots: slot `k + tail_bound` for in-range symbols, the last slot as the
/// escape. Escaped overshoots go to a trailing Exp-Golomb section, so any
/// integer round-trips. Layout: u32 LE range-payload length, range bytes,
/// Exp-Golomb bytes.
pub fn encode_latents_with_escape(
    symbols: &[i64],
    tables: &[PmfTable],
    tail_bound: i64,
) -> Result<Vec<u8>, EntropyError> {
    assert_eq!(symbols.len(), tables.len(), "one table per symbol");
    assert!(tail_bound > 0, "tail bound must be positive");
    let escape_slot = (2 * tail_bound + 1) as usize;
    let mut slots = Vec::with_capacity(symbols.len());
    let mut escapes = BitWriter::new();
    for &k in symbols {
        if k.abs() <= tail_bound {
            slots.push((k + tail_bound) as usize);
        } else {
            slots.push(escape_slot);
            exp_golomb_encode_unsigned(escape_code(k, tail_bound), &mut escapes);
        }
    }
    let range_bytes = range_encode_with(&slots, |i| &tables[i])?;
    let mut out = Vec::with_capacity(4 + range_bytes.len());
    out.extend_from_slice(&(range_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&range_bytes);
    out.extend_from_slice(&escapes.into_bytes());
    Ok(out)
}

pub fn decode_latents_with_escape(
    bytes: &[u8],
    tables: &[PmfTable],
    tail_bound: i64,
) -> Result<Vec<i64>, EntropyError> {
    if bytes.len() < 4 {
        return Err(EntropyError::Truncated(bytes.len()));
    }
    let range_len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + range_len {
        return Err(EntropyError::Truncated(bytes.len()));
    }
    let slots = range_decode_with(&bytes[4..4 + range_len], tables.len(), |i| &tables[i])?;
    let mut escapes = BitReader::new(&bytes[4 + range_len..]);
    let escape_slot = (2 * tail_bound + 1) as usize;
    let mut out = Vec::with_capacity(slots.len());
    for slot in slots {
        if slot == escape_slot {
            let m = exp_golomb_decode_unsigned(&mut escapes)?;
            out.push(unescape_code(m, tail_bound));
        } else {
            out.push(slot as i64 - tail_bound);
        }
    }
    Ok(out)
}
