//! Canonical Huffman code over the five stage symbols, depth-limited to 3.
//!
//! Lengths come from package-merge, which is optimal under a length cap.
//! Codewords are assigned canonically: by length, then by symbol order.

use thiserror::Error;

use super::bits::{BitReader, BitWriter};
use crate::quantize::{StageMatrix, ALPHABET};

pub const MAX_CODE_LEN: u8 = 3;
const N: usize = ALPHABET.len();

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HuffmanError {
    #[error("frequency table has no nonzero entry")]
    EmptyFrequencies,
    #[error("invalid code lengths {0:?}")]
    BadLengths([u8; N]),
    #[error("symbol {0} has no codeword")]
    Unencodable(i8),
    #[error("bitstream ended after {decoded} of {expected} symbols")]
    Exhausted { decoded: usize, expected: usize },
    #[error("{0} bits left over after the last symbol")]
    Trailing(usize),
    #[error("no codeword matches at bit {0}")]
    BadCode(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HuffmanTable {
    lengths: [u8; N],
    codes: [u8; N],
}

fn index_of(sym: i8) -> Option<usize> {
    ALPHABET.iter().position(|&s| s == sym)
}

impl HuffmanTable {
    /// Rebuilds the canonical table from per-symbol lengths (0 = unused).
    pub fn from_lengths(lengths: [u8; N]) -> Result<Self, HuffmanError> {
        let bad = || HuffmanError::BadLengths(lengths);
        if lengths.iter().any(|&l| l > MAX_CODE_LEN) || lengths.iter().all(|&l| l == 0) {
            return Err(bad());
        }
        let kraft: u32 = lengths.iter().filter(|&&l| l > 0).map(|&l| 1u32 << (MAX_CODE_LEN - l)).sum();
        if kraft > 1 << MAX_CODE_LEN {
            return Err(bad());
        }
        let mut order: Vec<usize> = (0..N).filter(|&i| lengths[i] > 0).collect();
        order.sort_by_key(|&i| (lengths[i], i));
        let mut codes = [0u8; N];
        let mut code = 0u32;
        let mut prev = lengths[order[0]];
        for (k, &i) in order.iter().enumerate() {
            if k > 0 {
                code = (code + 1) << (lengths[i] - prev);
            }
            prev = lengths[i];
            codes[i] = code as u8;
        }
        Ok(Self { lengths, codes })
    }

    pub fn lengths(&self) -> [u8; N] {
        self.lengths
    }

    pub fn code(&self, sym: i8) -> Option<(u8, u8)> {
        let i = index_of(sym)?;
        (self.lengths[i] > 0).then(|| (self.codes[i], self.lengths[i]))
    }

    /// Total encoded bits for the given symbol counts.
    pub fn cost(&self, freqs: &[u64; N]) -> u64 {
        freqs.iter().zip(&self.lengths).map(|(&f, &l)| f * l as u64).sum()
    }
}

/// Optimal length-limited code for `freqs` (in [`ALPHABET`] order). Among
/// equal weights, earlier symbols get the shorter codes.
pub fn huffman_build(freqs: &[u64; N]) -> Result<HuffmanTable, HuffmanError> {
    let mut leaves: Vec<usize> = (0..N).filter(|&i| freqs[i] > 0).collect();
    if leaves.is_empty() {
        return Err(HuffmanError::EmptyFrequencies);
    }
    let mut lengths = [0u8; N];
    if leaves.len() == 1 {
        lengths[leaves[0]] = 1;
        return HuffmanTable::from_lengths(lengths);
    }
    // ascending weight; later symbols first on ties so they collect depth
    leaves.sort_by_key(|&i| (freqs[i], std::cmp::Reverse(i)));
    type Item = (u64, [u8; N]);
    let leaf_items: Vec<Item> = leaves
        .iter()
        .map(|&i| {
            let mut c = [0u8; N];
            c[i] = 1;
            (freqs[i], c)
        })
        .collect();

    let mut list = leaf_items.clone();
    for _ in 1..MAX_CODE_LEN {
        let packages: Vec<Item> = list
            .chunks_exact(2)
            .map(|p| {
                let mut c = p[0].1;
                for (a, b) in c.iter_mut().zip(&p[1].1) {
                    *a += b;
                }
                (p[0].0 + p[1].0, c)
            })
            .collect();
        let mut merged = Vec::with_capacity(leaf_items.len() + packages.len());
        let (mut a, mut b) = (0, 0);
        while a < leaf_items.len() || b < packages.len() {
            let take_leaf = b == packages.len() || (a < leaf_items.len() && leaf_items[a].0 <= packages[b].0);
            if take_leaf {
                merged.push(leaf_items[a]);
                a += 1;
            } else {
                merged.push(packages[b]);
                b += 1;
            }
        }
        list = merged;
    }
    for item in &list[..2 * (leaves.len() - 1)] {
        for (l, c) in lengths.iter_mut().zip(&item.1) {
            *l += c;
        }
    }
    HuffmanTable::from_lengths(lengths)
}

/// Appends the codewords of `stages` in scan order.
pub fn huffman_encode(stages: &StageMatrix, table: &HuffmanTable, out: &mut BitWriter) -> Result<(), HuffmanError> {
    for &s in stages.data() {
        let (code, len) = table.code(s).ok_or(HuffmanError::Unencodable(s))?;
        for k in (0..len).rev() {
            out.push((code >> k) & 1 == 1);
        }
    }
    Ok(())
}

/// Decodes exactly `count` symbols, requiring the reader to end on the last.
pub fn huffman_decode(bits: &mut BitReader, table: &HuffmanTable, count: usize) -> Result<Vec<i8>, HuffmanError> {
    let max_len = table.lengths.iter().copied().max().unwrap_or(0);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let start = bits.offset();
        let (mut code, mut len) = (0u8, 0u8);
        let sym = loop {
            let Some(b) = bits.next() else {
                return Err(HuffmanError::Exhausted { decoded: out.len(), expected: count });
            };
            code = code << 1 | b as u8;
            len += 1;
            if let Some(i) = (0..N).find(|&i| table.lengths[i] == len && table.codes[i] == code) {
                break ALPHABET[i];
            }
            if len >= max_len {
                return Err(HuffmanError::BadCode(start));
            }
        };
        out.push(sym);
    }
    match bits.remaining() {
        0 => Ok(out),
        n => Err(HuffmanError::Trailing(n)),
    }
}

/// Canonical code for exactly the symbols present in `stages`.
pub fn table_for(stages: &StageMatrix) -> Result<HuffmanTable, HuffmanError> {
    let h = stages.histogram();
    if h.iter().all(|&c| c == 0) {
        // nothing to encode; any valid table will do
        return huffman_build(&[0, 0, 1, 0, 0]);
    }
    huffman_build(&h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_lengths() {
        let t = huffman_build(&[7; 5]).unwrap();
        assert_eq!(t.lengths(), [2, 2, 2, 3, 3]);
        assert_eq!(t.code(-2), Some((0b00, 2)));
        assert_eq!(t.code(-1), Some((0b01, 2)));
        assert_eq!(t.code(0), Some((0b10, 2)));
        assert_eq!(t.code(1), Some((0b110, 3)));
        assert_eq!(t.code(2), Some((0b111, 3)));
    }

    #[test]
    fn single_symbol_gets_one_bit() {
        let t = huffman_build(&[0, 0, 9, 0, 0]).unwrap();
        assert_eq!(t.lengths(), [0, 0, 1, 0, 0]);
        assert_eq!(t.code(1), None);
    }

    #[test]
    fn skewed_hits_the_cap() {
        // unconstrained depth would be 4
        let t = huffman_build(&[1, 2, 100, 4, 8]).unwrap();
        assert!(t.lengths().iter().all(|&l| l <= 3));
        assert_eq!(t.lengths()[2], 1);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(huffman_build(&[0; 5]), Err(HuffmanError::EmptyFrequencies));
        assert!(HuffmanTable::from_lengths([1, 1, 1, 0, 0]).is_err());
        assert!(HuffmanTable::from_lengths([4, 1, 2, 0, 0]).is_err());
    }

    #[test]
    fn empty_and_zero_matrices() {
        let t = huffman_build(&[1, 1, 5, 1, 1]).unwrap();
        let mut w = BitWriter::new();
        huffman_encode(&StageMatrix::zeros(0, 0, 4), &t, &mut w).unwrap();
        assert_eq!(w.len(), 0);
        let z = StageMatrix::zeros(8, 8, 4);
        huffman_encode(&z, &t, &mut w).unwrap();
        assert_eq!(w.len(), 64 * t.lengths()[2] as usize);
    }

    #[test]
    fn decode_errors() {
        let t = huffman_build(&[1, 1, 5, 1, 1]).unwrap();
        let s = StageMatrix::new(1, 3, 4, vec![0, 2, -1]).unwrap();
        let mut w = BitWriter::new();
        huffman_encode(&s, &t, &mut w).unwrap();
        let (bytes, n) = w.finish();
        assert_eq!(huffman_decode(&mut BitReader::new(&bytes, n), &t, 3).unwrap(), vec![0, 2, -1]);
        assert!(matches!(huffman_decode(&mut BitReader::new(&bytes, n), &t, 4), Err(HuffmanError::Exhausted { .. })));
        assert!(matches!(huffman_decode(&mut BitReader::new(&bytes, n), &t, 2), Err(HuffmanError::Trailing(_))));
        let single = huffman_build(&[0, 0, 9, 0, 0]).unwrap();
        assert_eq!(huffman_decode(&mut BitReader::new(&[0b1], 1), &single, 1), Err(HuffmanError::BadCode(0)));
    }
}
