//! Multi-layer histogram shifting with exact carrier restoration.
//!
//! The first `K = 72 + 16·C·L` channel-pixels (scan order) are a reserved
//! region whose LSBs hold the side information:
//!
//! ```text
//! "DPHS" | layers u8 | payload bits u32 | (peak u8, zero u8) per layer per channel
//! ```
//!
//! with multi-byte fields big-endian and each byte stored LSB-first like every
//! other stream here. The original LSBs of the reserved region travel in
//! front of the payload. Each layer, per channel, picks the fullest bin `p`
//! and the nearest empty bin `z` among the remaining channel-pixels; values
//! strictly between them move one step toward `z`, and every `p` carries one
//! bit (`p` or `p ± 1`). A channel with no usable pair stores `p == z` and is
//! skipped in that layer.

use super::bits::{get_bit, BitReader, BitWriter};
use super::StegoError;
use crate::raster::Image8;

pub const HS_MAGIC: [u8; 4] = *b"DPHS";
pub const MAX_LAYERS: usize = 32;
const FIXED_SIDE_BITS: usize = 72;

pub fn reserved_len(channels: usize, layers: usize) -> usize {
    FIXED_SIDE_BITS + 16 * channels * layers
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pair {
    peak: u8,
    zero: u8,
}

impl Pair {
    fn active(&self) -> bool {
        self.peak != self.zero
    }

    /// Direction from peak toward zero.
    fn dir(&self) -> i32 {
        if self.zero > self.peak {
            1
        } else {
            -1
        }
    }

    fn between(&self, v: u8) -> bool {
        let (lo, hi) = if self.zero > self.peak { (self.peak, self.zero) } else { (self.zero, self.peak) };
        v > lo && v < hi
    }
}

fn channel_values(data: &[u8], channels: usize, ch: usize, skip: usize) -> impl Iterator<Item = usize> + '_ {
    (skip..data.len()).filter(move |i| i % channels == ch)
}

fn choose_pair(data: &[u8], channels: usize, ch: usize, skip: usize) -> Pair {
    let mut hist = [0usize; 256];
    for i in channel_values(data, channels, ch, skip) {
        hist[data[i] as usize] += 1;
    }
    let peak = (0..256).max_by_key(|&v| (hist[v], std::cmp::Reverse(v))).unwrap();
    if hist[peak] == 0 {
        return Pair { peak: 0, zero: 0 };
    }
    let zero = (1..256usize)
        .flat_map(|d| [peak.checked_add(d).filter(|&z| z < 256), peak.checked_sub(d)])
        .flatten()
        .find(|&z| hist[z] == 0);
    match zero {
        Some(z) => Pair { peak: peak as u8, zero: z as u8 },
        None => Pair { peak: 0, zero: 0 },
    }
}

/// Embeds `nbits` of `payload`. Layers are added until everything fits.
pub fn hs_embed(carrier: &Image8, payload: &[u8], nbits: usize) -> Result<Image8, StegoError> {
    let c = carrier.channels();
    let total = carrier.data().len();
    for layers in 1..=MAX_LAYERS {
        let k = reserved_len(c, layers);
        if k > total {
            break;
        }
        if let Some(out) = try_embed(carrier, payload, nbits, layers)? {
            return Ok(out);
        }
    }
    Err(StegoError::HsCapacity { needed: nbits })
}

fn try_embed(carrier: &Image8, payload: &[u8], nbits: usize, layers: usize) -> Result<Option<Image8>, StegoError> {
    let c = carrier.channels();
    let k = reserved_len(c, layers);
    let mut data = carrier.data().to_vec();

    let mut stream = BitWriter::new();
    for &v in &data[..k] {
        stream.push(v & 1 == 1);
    }
    for i in 0..nbits {
        stream.push(get_bit(payload, i));
    }
    let (stream, stream_len) = stream.finish();
    let mut bits = BitReader::new(&stream, stream_len);

    let mut pairs = Vec::with_capacity(layers * c);
    for _ in 0..layers {
        for ch in 0..c {
            let pair = choose_pair(&data, c, ch, k);
            pairs.push(pair);
            if !pair.active() {
                continue;
            }
            let d = pair.dir();
            for (i, px) in data.iter_mut().enumerate().skip(k) {
                if i % c != ch {
                    continue;
                }
                let v = *px;
                if pair.between(v) || (v == pair.peak && bits.next().unwrap_or(false)) {
                    *px = (v as i32 + d) as u8;
                }
            }
        }
    }
    if bits.remaining() > 0 {
        return Ok(None);
    }

    let mut side = BitWriter::new();
    let mut push_bytes = |bytes: &[u8]| {
        for &b in bytes {
            for j in 0..8 {
                side.push((b >> j) & 1 == 1);
            }
        }
    };
    push_bytes(&HS_MAGIC);
    push_bytes(&[layers as u8]);
    push_bytes(&(nbits as u32).to_be_bytes());
    for p in &pairs {
        push_bytes(&[p.peak, p.zero]);
    }
    let (side, side_len) = side.finish();
    debug_assert_eq!(side_len, k);
    for (i, b) in BitReader::new(&side, side_len).enumerate() {
        data[i] = (data[i] & !1) | b as u8;
    }
    Ok(Some(Image8::new(carrier.height(), carrier.width(), c, data).expect("same dims")))
}

/// Bytes stored LSB-first in the low bits of `data[from..]`.
fn read_bytes(data: &[u8], from: usize, nbytes: usize) -> Vec<u8> {
    (0..nbytes)
        .map(|b| (0..8).fold(0u8, |acc, j| acc | (data[from + 8 * b + j] & 1) << j))
        .collect()
}

/// Whether the reserved region starts with the histogram-shifting magic.
pub fn is_hs(stego: &Image8) -> bool {
    stego.data().len() >= FIXED_SIDE_BITS && read_bytes(stego.data(), 0, 4) == HS_MAGIC
}

/// Returns the payload bytes, its bit length, and the exact carrier.
pub fn hs_extract(stego: &Image8) -> Result<(Vec<u8>, usize, Image8), StegoError> {
    let c = stego.channels();
    let mut data = stego.data().to_vec();
    if !is_hs(stego) {
        return Err(StegoError::BadMagic);
    }
    let layers = read_bytes(&data, 32, 1)[0] as usize;
    let nbits = u32::from_be_bytes(read_bytes(&data, 40, 4).try_into().unwrap()) as usize;
    let k = reserved_len(c, layers);
    if layers == 0 || layers > MAX_LAYERS || k > data.len() {
        return Err(StegoError::Truncated("histogram side information".into()));
    }
    let pair_bytes = read_bytes(&data, FIXED_SIDE_BITS, 2 * c * layers);
    let pairs: Vec<Pair> = pair_bytes.chunks_exact(2).map(|p| Pair { peak: p[0], zero: p[1] }).collect();

    // undo layers last-first, collecting each layer-channel's bits
    let mut chunks: Vec<Vec<bool>> = vec![Vec::new(); pairs.len()];
    for (idx, pair) in pairs.iter().enumerate().rev() {
        if !pair.active() {
            continue;
        }
        let ch = idx % c;
        let d = pair.dir();
        let carried = (pair.peak as i32 + d) as u8;
        for (i, px) in data.iter_mut().enumerate().skip(k) {
            if i % c != ch {
                continue;
            }
            let v = *px;
            if v == pair.peak {
                chunks[idx].push(false);
            } else if v == carried {
                chunks[idx].push(true);
                *px = pair.peak;
            } else {
                let back = v as i32 - d;
                if (0..256).contains(&back) && pair.between(back as u8) {
                    *px = back as u8;
                }
            }
        }
    }
    let stream: Vec<bool> = chunks.into_iter().flatten().collect();
    if stream.len() < k + nbits {
        return Err(StegoError::Truncated(format!("histogram payload: {} of {} bits", stream.len(), k + nbits)));
    }
    for (i, &b) in stream[..k].iter().enumerate() {
        data[i] = (data[i] & !1) | b as u8;
    }
    let mut payload = BitWriter::new();
    for &b in &stream[k..k + nbits] {
        payload.push(b);
    }
    let (payload, _) = payload.finish();
    let carrier = Image8::new(stego.height(), stego.width(), c, data).expect("same dims");
    Ok((payload, nbits, carrier))
}
