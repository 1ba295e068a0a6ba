//! Packing a stage matrix into the adversarial image and getting it back.
//!
//! Payload bytes:
//!
//! ```text
//! off  len  field
//!   0    4  "DPTR"
//!   4    1  version (bit 7 set when encrypted)
//!   5    1  mode: 0 = lsb, 1 = hs
//!   6    1  xi
//!   7    2  height
//!   9    2  width
//!  11    2  code lengths, symbol -2 in bits 9..8 down to +2 in bits 1..0
//!  13    4  bitstream length in bits
//!  17    .  Huffman bitstream, zero-padded to a byte
//!   .    4  CRC-32 of everything before it
//! ```
//!
//! Integers are big-endian. With a key, bytes from offset 5 up to the CRC are
//! XORed with the keystream from [`crypt`], so the CRC is over ciphertext.
//! Bytes are embedded LSB-first in row-major `(row, col, channel)` order.

pub mod bits;
pub mod crypt;
pub mod hs;
pub mod huffman;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantize::{self, QuantizeError, StageMatrix};
use crate::raster::Image8;
use bits::{get_bit, BitReader, BitWriter};
pub use crypt::{crypt, Key};
pub use hs::{hs_embed, hs_extract};
pub use huffman::{huffman_build, huffman_decode, huffman_encode, HuffmanError, HuffmanTable};

pub const MAGIC: [u8; 4] = *b"DPTR";
pub const VERSION: u8 = 1;
pub const ENCRYPTED: u8 = 0x80;
pub const HEADER_LEN: usize = 17;
const CRC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum StegoError {
    #[error("payload needs {needed} bits but the carrier holds {available}")]
    Capacity { needed: usize, available: usize },
    #[error("histogram shifting cannot fit {needed} payload bits in this image; use lsb mode")]
    HsCapacity { needed: usize },
    #[error("no payload found (bad magic)")]
    BadMagic,
    #[error("unsupported payload version {0}")]
    Version(u8),
    #[error("payload is encrypted and no key was given")]
    KeyRequired,
    #[error("payload checksum mismatch (wrong key or tampered image)")]
    Checksum,
    #[error("payload truncated: {0}")]
    Truncated(String),
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("stages {stages:?} do not fit image {image:?}")]
    Shape { stages: (usize, usize), image: (usize, usize) },
    #[error(transparent)]
    Huffman(#[from] HuffmanError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    #[default]
    Lsb,
    Hs,
}

impl EmbedMode {
    fn code(self) -> u8 {
        match self {
            EmbedMode::Lsb => 0,
            EmbedMode::Hs => 1,
        }
    }
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedMode::Lsb => "lsb",
            EmbedMode::Hs => "hs",
        })
    }
}

impl FromStr for EmbedMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lsb" => Ok(EmbedMode::Lsb),
            "hs" => Ok(EmbedMode::Hs),
            _ => Err(format!("unknown embed mode '{s}' (expected lsb or hs)")),
        }
    }
}

fn pack_lengths(l: [u8; 5]) -> u16 {
    l.iter().fold(0u16, |acc, &x| acc << 2 | x as u16)
}

fn unpack_lengths(v: u16) -> [u8; 5] {
    std::array::from_fn(|i| ((v >> (2 * (4 - i))) & 3) as u8)
}

/// Serializes `stages` into payload bytes.
pub fn encode_payload(stages: &StageMatrix, mode: EmbedMode, key: Option<&Key>) -> Result<Vec<u8>, StegoError> {
    let (h, w) = (stages.height(), stages.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(StegoError::Corrupt(format!("{h}x{w} exceeds the 16-bit header fields")));
    }
    let table = huffman::table_for(stages)?;
    let mut bw = BitWriter::new();
    huffman_encode(stages, &table, &mut bw)?;
    let (stream, nbits) = bw.finish();

    let mut out = Vec::with_capacity(HEADER_LEN + stream.len() + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION | if key.is_some() { ENCRYPTED } else { 0 });
    out.push(mode.code());
    out.push(stages.xi());
    out.extend_from_slice(&(h as u16).to_be_bytes());
    out.extend_from_slice(&(w as u16).to_be_bytes());
    out.extend_from_slice(&pack_lengths(table.lengths()).to_be_bytes());
    out.extend_from_slice(&(nbits as u32).to_be_bytes());
    out.extend_from_slice(&stream);
    if let Some(k) = key {
        crypt::crypt(&mut out[5..], k);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedPayload {
    pub mode: EmbedMode,
    pub stages: StageMatrix,
    pub encrypted: bool,
    /// Bytes the payload occupies, CRC included.
    pub len: usize,
}

/// Parses payload bytes; `bytes` may run past the end of the payload.
pub fn decode_payload(bytes: &[u8], key: Option<&Key>) -> Result<DecodedPayload, StegoError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(StegoError::Truncated(format!("{} bytes is shorter than a header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(StegoError::BadMagic);
    }
    let version = bytes[4];
    if version & !ENCRYPTED != VERSION {
        return Err(StegoError::Version(version & !ENCRYPTED));
    }
    let encrypted = version & ENCRYPTED != 0;
    let key = match (encrypted, key) {
        (true, None) => return Err(StegoError::KeyRequired),
        (true, Some(k)) => Some(k),
        (false, _) => None,
    };
    let mut header = bytes[..HEADER_LEN].to_vec();
    if let Some(k) = key {
        crypt::crypt(&mut header[5..], k);
    }
    let nbits = u32::from_be_bytes(header[13..17].try_into().unwrap()) as usize;
    let body_len = HEADER_LEN + nbits.div_ceil(8);
    if body_len + CRC_LEN > bytes.len() {
        // with a wrong key the length field is noise
        return Err(if encrypted {
            StegoError::Checksum
        } else {
            StegoError::Truncated(format!("need {} bytes, have {}", body_len + CRC_LEN, bytes.len()))
        });
    }
    let stored = u32::from_be_bytes(bytes[body_len..body_len + CRC_LEN].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_len]) != stored {
        return Err(StegoError::Checksum);
    }
    let mut body = bytes[..body_len].to_vec();
    if let Some(k) = key {
        crypt::crypt(&mut body[5..], k);
    }
    let mode = match body[5] {
        0 => EmbedMode::Lsb,
        1 => EmbedMode::Hs,
        m => return Err(StegoError::Corrupt(format!("unknown mode byte {m}"))),
    };
    let xi = body[6];
    let h = u16::from_be_bytes([body[7], body[8]]) as usize;
    let w = u16::from_be_bytes([body[9], body[10]]) as usize;
    let table = HuffmanTable::from_lengths(unpack_lengths(u16::from_be_bytes([body[11], body[12]])))?;
    let mut reader = BitReader::new(&body[HEADER_LEN..], nbits);
    let symbols = huffman_decode(&mut reader, &table, h * w)?;
    let stages = StageMatrix::new(h, w, xi, symbols)?;
    Ok(DecodedPayload { mode, stages, encrypted, len: body_len + CRC_LEN })
}

/// Replaces the LSB of the first `nbits` channel-pixels with the payload.
pub fn lsb_embed(carrier: &Image8, payload: &[u8], nbits: usize) -> Result<Image8, StegoError> {
    let available = carrier.data().len();
    if nbits > available || nbits > payload.len() * 8 {
        return Err(StegoError::Capacity { needed: nbits, available: available.min(payload.len() * 8) });
    }
    let mut out = carrier.clone();
    for (i, v) in out.data_mut()[..nbits].iter_mut().enumerate() {
        *v = (*v & !1) | get_bit(payload, i) as u8;
    }
    Ok(out)
}

pub fn lsb_extract(stego: &Image8, nbits: usize) -> Result<Vec<u8>, StegoError> {
    let available = stego.data().len();
    if nbits > available {
        return Err(StegoError::Capacity { needed: nbits, available });
    }
    let mut w = BitWriter::new();
    for &v in &stego.data()[..nbits] {
        w.push(v & 1 == 1);
    }
    Ok(w.finish().0)
}

/// Embeds `stages` into `x_adv`, producing the distributable image.
pub fn make_rae(x_adv: &Image8, stages: &StageMatrix, key: Option<&Key>, mode: EmbedMode) -> Result<Image8, StegoError> {
    if (stages.height(), stages.width()) != (x_adv.height(), x_adv.width()) {
        return Err(StegoError::Shape {
            stages: (stages.height(), stages.width()),
            image: (x_adv.height(), x_adv.width()),
        });
    }
    let payload = encode_payload(stages, mode, key)?;
    match mode {
        EmbedMode::Lsb => lsb_embed(x_adv, &payload, payload.len() * 8),
        EmbedMode::Hs => hs_embed(x_adv, &payload, payload.len() * 8),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovered {
    pub x_hat: Image8,
    pub stages: StageMatrix,
    pub mode: EmbedMode,
    /// The adversarial image itself; exact in hs mode, LSB-altered in lsb mode.
    pub x_adv: Image8,
}

/// Detects the mode, extracts the payload and subtracts the perturbation.
pub fn recover(stego: &Image8, key: Option<&Key>) -> Result<Recovered, StegoError> {
    let (decoded, x_adv) = if hs::is_hs(stego) {
        let (payload, _, carrier) = hs_extract(stego)?;
        (decode_payload(&payload, key)?, carrier)
    } else {
        let cap = stego.data().len() / 8 * 8;
        (decode_payload(&lsb_extract(stego, cap)?, key)?, stego.clone())
    };
    let expected = if hs::is_hs(stego) { EmbedMode::Hs } else { EmbedMode::Lsb };
    if decoded.mode != expected {
        return Err(StegoError::Corrupt(format!("header says {} but the image carries {expected}", decoded.mode)));
    }
    if (decoded.stages.height(), decoded.stages.width()) != (stego.height(), stego.width()) {
        return Err(StegoError::Shape {
            stages: (decoded.stages.height(), decoded.stages.width()),
            image: (stego.height(), stego.width()),
        });
    }
    let x_hat = quantize::unapply(&x_adv, &decoded.stages)?;
    Ok(Recovered { x_hat, stages: decoded.stages, mode: decoded.mode, x_adv })
}
