//! Static-CDF range coder, CDF quantization and raw latent packing.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CDF_BITS: u32 = 16;
pub const CDF_TOTAL: u32 = 1 << CDF_BITS;
pub const ALPHABET: usize = 256;

const TOP: u32 = 1 << 24;

/// Integer cumulative frequencies over the 256 byte symbols, total 2^16.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCdf {
    cumulative: [u32; ALPHABET + 1],
}

impl QuantizedCdf {
    /// Builds a CDF from per-symbol frequencies (each ≥ 1, summing to 2^16).
    pub fn from_frequencies(freqs: &[u32]) -> Result<Self> {
        if freqs.len() != ALPHABET {
            return Err(Error::InvalidArgument(format!("expected {ALPHABET} frequencies, got {}", freqs.len())));
        }
        if freqs.contains(&0) {
            return Err(Error::InvalidArgument("every symbol needs a frequency of at least 1".into()));
        }
        let mut cumulative = [0u32; ALPHABET + 1];
        for (k, &f) in freqs.iter().enumerate() {
            cumulative[k + 1] = cumulative[k] + f;
        }
        if cumulative[ALPHABET] != CDF_TOTAL {
            return Err(Error::InvalidArgument(format!(
                "frequencies sum to {}, expected {CDF_TOTAL}",
                cumulative[ALPHABET]
            )));
        }
        Ok(Self { cumulative })
    }

    pub fn uniform() -> Self {
        Self::from_frequencies(&[CDF_TOTAL / ALPHABET as u32; ALPHABET]).expect("uniform CDF is valid")
    }

    pub fn cumulative(&self) -> &[u32; ALPHABET + 1] {
        &self.cumulative
    }

    #[inline]
    pub fn freq(&self, symbol: u8) -> u32 {
        let s = symbol as usize;
        self.cumulative[s + 1] - self.cumulative[s]
    }

    pub fn frequencies(&self) -> Vec<u32> {
        (0..=255u8).map(|s| self.freq(s)).collect()
    }

    /// Ideal code length in bits of `symbols` under this CDF.
    pub fn ideal_bits(&self, symbols: &[u8]) -> f64 {
        symbols.iter().map(|&s| -(f64::from(self.freq(s)) / f64::from(CDF_TOTAL)).log2()).sum()
    }

    fn symbol_for(&self, value: u32) -> u8 {
        // largest s with cumulative[s] <= value
        let idx = self.cumulative.partition_point(|&c| c <= value);
        (idx - 1) as u8
    }
}

/// Rounds a probability vector to integer frequencies totalling 2^16.
///
/// Each frequency is `max(1, round(p * 2^16))`. Any excess is then removed one
/// unit at a time from the currently largest frequency, and any deficit added
/// to it; ties go to the lower symbol.
pub fn quantize_cdf<F: Scalar>(probs: &[F]) -> Result<QuantizedCdf> {
    if probs.len() != ALPHABET {
        return Err(Error::InvalidArgument(format!("expected {ALPHABET} probabilities, got {}", probs.len())));
    }
    let mut freqs = [0u32; ALPHABET];
    for (f, &p) in freqs.iter_mut().zip(probs) {
        let p = p.as_f64();
        if !p.is_finite() || p < 0.0 {
            return Err(Error::ModelCorrupt(format!("invalid probability {p}")));
        }
        *f = ((p * f64::from(CDF_TOTAL)).round() as u32).max(1);
    }
    let largest = |freqs: &[u32; ALPHABET]| {
        let mut best = 0;
        for k in 1..ALPHABET {
            if freqs[k] > freqs[best] {
                best = k;
            }
        }
        best
    };
    let mut total: u32 = freqs.iter().sum();
    while total > CDF_TOTAL {
        let k = largest(&freqs);
        if freqs[k] <= 1 {
            return Err(Error::ModelCorrupt("cannot normalize frequencies".into()));
        }
        freqs[k] -= 1;
        total -= 1;
    }
    if total < CDF_TOTAL {
        let k = largest(&freqs);
        freqs[k] += CDF_TOTAL - total;
    }
    QuantizedCdf::from_frequencies(&freqs)
}

/// Byte-oriented range encoder with carry propagation.
///
/// 32-bit range, 33-bit low; one output byte per 8-bit renormalization shift.
/// The known-zero leading byte is not emitted.
struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    first: bool,
}

impl RangeEncoder {
    fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new(), first: true }
    }

    fn emit(&mut self, byte: u8) {
        if self.first {
            debug_assert_eq!(byte, 0);
            self.first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xff00_0000 || self.low > 0xffff_ffff {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xff;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xff) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00ff_ffff) << 8;
    }

    fn encode(&mut self, start: u32, size: u32) {
        let r = self.range >> CDF_BITS;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = Self { input, pos: 0, range: u32::MAX, code: 0 };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | u32::from(dec.next_byte()?);
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Corrupt(format!("range-coded payload truncated at byte {}", self.pos)))?;
        self.pos += 1;
        Ok(b)
    }

    fn decode(&mut self, cdf: &QuantizedCdf) -> Result<u8> {
        let r = self.range >> CDF_BITS;
        let value = self.code / r;
        if value >= CDF_TOTAL {
            return Err(Error::Corrupt("range-coded payload inconsistent with CDF".into()));
        }
        let sym = cdf.symbol_for(value);
        let start = cdf.cumulative[sym as usize];
        self.code -= r * start;
        self.range = r * cdf.freq(sym);
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(sym)
    }
}

/// Range-codes `symbols` under a static CDF.
pub fn ac_encode(symbols: &[u8], cdf: &QuantizedCdf) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        enc.encode(cdf.cumulative[s as usize], cdf.freq(s));
    }
    enc.finish()
}

/// Decodes exactly `count` symbols; the payload must be consumed completely.
pub fn ac_decode(payload: &[u8], cdf: &QuantizedCdf, count: usize) -> Result<Vec<u8>> {
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(dec.decode(cdf)?);
    }
    if dec.pos != payload.len() {
        return Err(Error::Corrupt(format!("{} unused bytes after range-coded payload", payload.len() - dec.pos)));
    }
    Ok(out)
}

pub const LATENT_BITS: u32 = 6;

/// Packs 6-bit indices MSB-first into bytes (8 indices -> 6 bytes).
pub fn pack_latents(indices: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity((indices.len() * LATENT_BITS as usize).div_ceil(8));
    let mut acc: u32 = 0;
    let mut nbits = 0;
    for &idx in indices {
        if u32::from(idx) >= 1 << LATENT_BITS {
            return Err(Error::Range(format!("latent index {idx} exceeds 63")));
        }
        acc = (acc << LATENT_BITS) | u32::from(idx);
        nbits += LATENT_BITS;
        while nbits >= 8 {
            nbits -= 8;
            out.push((acc >> nbits) as u8);
        }
        acc &= (1 << nbits) - 1;
    }
    if nbits > 0 {
        out.push((acc << (8 - nbits)) as u8);
    }
    Ok(out)
}

pub fn unpack_latents(bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    let needed = (count * LATENT_BITS as usize).div_ceil(8);
    if bytes.len() != needed {
        return Err(Error::Corrupt(format!("{count} latents need {needed} bytes, got {}", bytes.len())));
    }
    let mut out = Vec::with_capacity(count);
    let mut acc: u32 = 0;
    let mut nbits = 0;
    let mut iter = bytes.iter();
    while out.len() < count {
        while nbits < LATENT_BITS {
            acc = (acc << 8) | u32::from(*iter.next().expect("length checked"));
            nbits += 8;
        }
        nbits -= LATENT_BITS;
        out.push(((acc >> nbits) & 0x3f) as u8);
        acc &= (1 << nbits) - 1;
    }
    Ok(out)
}
