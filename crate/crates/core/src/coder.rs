//! Range coder over [`CdfTable`]s.
//!
//! The encoder keeps a 48-bit window `low` with a 64-bit accumulator and a
//! range kept in `[2^32, 2^48)`. Whenever the range drops below `2^32` the top
//! 16 bits of the window are emitted as a big-endian word; carries ripple into
//! already-emitted words. The stream ends with the full 48-bit window, so the
//! decoder consumes exactly the words the encoder wrote. Symbols are coded in
//! channel-major raster order and escaped positions code the escape symbol.

use crate::entropy_model::{CdfTable, ChannelTable};
use crate::error::{Error, Result};
use crate::quantizer::LatentCode;

const WINDOW: u64 = 1 << 48;
const MASK: u64 = WINDOW - 1;
const RENORM: u64 = 1 << 32;
const WORD_SHIFT: u32 = 32;

/// Entropy-coded bytes.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
}

impl Bitstream {
    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u64,
    words: Vec<u16>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: MASK, words: Vec::new() }
    }

    fn carry(&mut self) {
        for w in self.words.iter_mut().rev() {
            if *w == u16::MAX {
                *w = 0;
            } else {
                *w += 1;
                return;
            }
        }
        unreachable!("carry out of the coded interval");
    }

    /// Narrows the interval to `[start, start + freq)` out of `2^precision`.
    pub fn encode(&mut self, start: u32, freq: u32, precision: u32) {
        debug_assert!(freq > 0 && (start as u64 + freq as u64) <= 1 << precision);
        let r = self.range >> precision;
        self.low += r * start as u64;
        self.range = r * freq as u64;
        if self.low >= WINDOW {
            self.low -= WINDOW;
            self.carry();
        }
        while self.range < RENORM {
            self.words.push((self.low >> WORD_SHIFT) as u16);
            self.low = (self.low << 16) & MASK;
            self.range <<= 16;
        }
    }

    pub fn finish(mut self) -> Bitstream {
        for shift in [32, 16, 0] {
            self.words.push((self.low >> shift) as u16);
        }
        Bitstream { bytes: self.words.iter().flat_map(|w| w.to_be_bytes()).collect() }
    }
}

pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    range: u64,
    value: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Self { bytes, pos: 0, range: MASK, value: 0 };
        for _ in 0..3 {
            d.value = (d.value << 16) | d.word()? as u64;
        }
        Ok(d)
    }

    fn word(&mut self) -> Result<u16> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 2)
            .ok_or_else(|| Error::Truncated(format!("needed bytes {}..{} of {}", self.pos, self.pos + 2, self.bytes.len())))?;
        self.pos += 2;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    /// Decodes one symbol index under `table`.
    pub fn decode(&mut self, table: &ChannelTable, precision: u32) -> Result<usize> {
        let r = self.range >> precision;
        let target = (self.value / r).min((1u64 << precision) - 1) as u32;
        let sym = table.lookup(target);
        self.value -= r * table.cdf[sym] as u64;
        self.range = r * table.freq(sym) as u64;
        if self.value >= self.range {
            return Err(Error::Framing("bitstream inconsistent with the frequency table".into()));
        }
        while self.range < RENORM {
            self.value = (self.value << 16) | self.word()? as u64;
            self.range <<= 16;
        }
        Ok(sym)
    }

    /// Bytes not yet consumed.
    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Codes symbol indices, choosing the table of position `i` with `table_of(i)`.
pub fn encode_indices<'t>(
    indices: &[usize],
    precision: u32,
    table_of: impl Fn(usize) -> &'t ChannelTable,
) -> Result<Bitstream> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in indices.iter().enumerate() {
        let t = table_of(i);
        if s >= t.n_symbols() {
            return Err(Error::SymbolOutOfRange { index: i, symbol: s as i32 });
        }
        enc.encode(t.cdf[s], t.freq(s), precision);
    }
    Ok(enc.finish())
}

pub fn decode_indices<'t>(
    bytes: &[u8],
    count: usize,
    precision: u32,
    table_of: impl Fn(usize) -> &'t ChannelTable,
) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let out = (0..count).map(|i| dec.decode(table_of(i), precision)).collect::<Result<Vec<_>>>()?;
    if dec.remaining() != 0 {
        return Err(Error::Framing(format!("{} trailing bytes after {count} symbols", dec.remaining())));
    }
    Ok(out)
}

fn plane_table<'t>(tables: &'t CdfTable, shape: [usize; 3]) -> impl Fn(usize) -> &'t ChannelTable {
    let plane = shape[1] * shape[2];
    move |i| &tables.channels[i / plane]
}

fn check_channels(tables: &CdfTable, shape: [usize; 3]) -> Result<()> {
    if tables.channels.len() != shape[0] {
        return Err(Error::Shape(format!("{} channel tables for latent shape {shape:?}", tables.channels.len())));
    }
    Ok(())
}

/// Entropy-codes a latent; escaped positions become the escape symbol.
pub fn encode(code: &LatentCode, tables: &CdfTable) -> Result<Bitstream> {
    check_channels(tables, code.shape)?;
    let table_of = plane_table(tables, code.shape);
    let mut escapes = code.escapes.iter().peekable();
    let mut indices = Vec::with_capacity(code.len());
    for (i, &s) in code.symbols.iter().enumerate() {
        let t = table_of(i);
        match t.index_of(s) {
            Some(idx) => indices.push(idx),
            None if escapes.next_if(|e| e.0 as usize == i).is_some() => indices.push(t.escape_index()),
            None => return Err(Error::SymbolOutOfRange { index: i, symbol: s }),
        }
    }
    encode_indices(&indices, tables.precision, table_of)
}

/// Inverse of [`encode`]; raw values of escaped positions come from `escapes`.
pub fn decode(
    bits: &Bitstream,
    tables: &CdfTable,
    shape: [usize; 3],
    escapes: &[(u32, i16)],
    beta_id: u16,
) -> Result<LatentCode> {
    check_channels(tables, shape)?;
    let table_of = plane_table(tables, shape);
    let n = shape.iter().product();
    let indices = decode_indices(&bits.bytes, n, tables.precision, &table_of)?;
    let mut esc = escapes.iter().peekable();
    let mut symbols = Vec::with_capacity(n);
    for (i, idx) in indices.into_iter().enumerate() {
        let t = table_of(i);
        if idx == t.escape_index() {
            let (_, raw) = esc
                .next_if(|e| e.0 as usize == i)
                .ok_or_else(|| Error::Framing(format!("escape symbol at {i} has no side-channel value")))?;
            symbols.push(*raw as i32);
        } else {
            symbols.push(t.offset + idx as i32);
        }
    }
    if esc.next().is_some() {
        return Err(Error::Framing("escape list does not match the decoded escape symbols".into()));
    }
    Ok(LatentCode { shape, symbols, escapes: escapes.to_vec(), beta_id })
}

/// `−Σ log2 P_table(s)` of a latent under the tables, i.e. its ideal code length.
pub fn table_cross_entropy_bits(code: &LatentCode, tables: &CdfTable) -> Result<f64> {
    check_channels(tables, code.shape)?;
    let table_of = plane_table(tables, code.shape);
    Ok(code
        .symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let t = table_of(i);
            let idx = t.index_of(s).unwrap_or(t.escape_index());
            -t.probability(idx, tables.precision).log2()
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_model::quantize_pmf;
    use proptest::prelude::*;

    fn uniform4() -> ChannelTable {
        ChannelTable { offset: 0, cdf: vec![0, 16384, 32768, 49152, 65536] }
    }

    #[test]
    fn empty_sequence() {
        let t = uniform4();
        let bits = encode_indices(&[], 16, |_| &t).unwrap();
        assert_eq!(bits.bytes.len(), 6);
        assert!(decode_indices(&bits.bytes, 0, 16, |_| &t).unwrap().is_empty());
    }

    #[test]
    fn eight_uniform_symbols_within_bound() {
        let t = uniform4();
        let s = [0, 1, 2, 3, 3, 2, 1, 0];
        let bits = encode_indices(&s, 16, |_| &t).unwrap();
        assert!(bits.bit_len() <= 16 + 64);
        assert_eq!(decode_indices(&bits.bytes, 8, 16, |_| &t).unwrap(), s);
    }

    #[test]
    fn truncated_stream_errors() {
        let t = ChannelTable { offset: 0, cdf: quantize_pmf(&[0.01, 0.02, 0.97], 16) };
        let s: Vec<usize> = (0..200).map(|i| i % 3).collect();
        let bits = encode_indices(&s, 16, |_| &t).unwrap();
        let cut = &bits.bytes[..bits.bytes.len() - 2];
        assert!(decode_indices(cut, s.len(), 16, |_| &t).is_err());
    }

    #[test]
    fn unescaped_out_of_range_symbol_rejected() {
        let tables = CdfTable { precision: 16, channels: vec![ChannelTable { offset: -1, cdf: vec![0, 100, 200, 65536] }] };
        let code = LatentCode { shape: [1, 1, 2], symbols: vec![0, 5], escapes: vec![], beta_id: 0 };
        assert!(matches!(encode(&code, &tables), Err(Error::SymbolOutOfRange { index: 1, symbol: 5 })));
    }

    #[test]
    fn latent_round_trip_with_escapes() {
        let tables = CdfTable {
            precision: 16,
            channels: vec![
                ChannelTable { offset: -2, cdf: quantize_pmf(&[0.1, 0.3, 0.4, 0.19, 0.01], 16) },
                ChannelTable { offset: -2, cdf: quantize_pmf(&[0.25, 0.25, 0.25, 0.24, 0.01], 16) },
            ],
        };
        let code = LatentCode::from_symbols([2, 1, 3], vec![0, 1, -9, 1, -2, 300], 2, 4).unwrap();
        assert_eq!(code.escapes, vec![(2, -9), (5, 300)]);
        let bits = encode(&code, &tables).unwrap();
        let back = decode(&bits, &tables, [2, 1, 3], &code.escapes, 4).unwrap();
        assert_eq!(back, code);
        assert!(decode(&bits, &tables, [2, 1, 3], &code.escapes[..1], 4).is_err());
    }

    fn table_strategy() -> impl Strategy<Value = ChannelTable> {
        prop::collection::vec(0.0f64..1.0, 2..40).prop_map(|mut w| {
            // sprinkle near-zero weights so min-frequency symbols appear
            for (i, v) in w.iter_mut().enumerate() {
                if i % 3 == 0 {
                    *v *= 1e-7;
                }
            }
            ChannelTable { offset: 0, cdf: quantize_pmf(&w, 16) }
        })
    }

    proptest! {
        #[test]
        fn round_trip_any_table(t in table_strategy(), picks in prop::collection::vec(any::<u32>(), 0..300)) {
            let n = t.n_symbols();
            let s: Vec<usize> = picks.iter().map(|p| *p as usize % n).collect();
            let bits = encode_indices(&s, 16, |_| &t).unwrap();
            prop_assert_eq!(decode_indices(&bits.bytes, s.len(), 16, |_| &t).unwrap(), s);
        }

        #[test]
        fn deterministic_bytes(t in table_strategy(), picks in prop::collection::vec(any::<u32>(), 0..100)) {
            let n = t.n_symbols();
            let s: Vec<usize> = picks.iter().map(|p| *p as usize % n).collect();
            prop_assert_eq!(encode_indices(&s, 16, |_| &t).unwrap(), encode_indices(&s, 16, |_| &t).unwrap());
        }

        #[test]
        fn less_probable_symbol_never_much_shorter(
            t in table_strategy(),
            picks in prop::collection::vec(any::<u32>(), 1..200),
            at in any::<prop::sample::Index>(),
        ) {
            let n = t.n_symbols();
            let s: Vec<usize> = picks.iter().map(|p| *p as usize % n).collect();
            let i = at.index(s.len());
            let rarest = (0..n).min_by_key(|&k| (t.freq(k), k)).unwrap();
            let mut s2 = s.clone();
            s2[i] = rarest;
            let a = encode_indices(&s, 16, |_| &t).unwrap().bit_len();
            let b = encode_indices(&s2, 16, |_| &t).unwrap().bit_len();
            // output granularity is a 16-bit word
            prop_assert!(b + 16 >= a, "{} -> {}", a, b);
        }
    }
}
