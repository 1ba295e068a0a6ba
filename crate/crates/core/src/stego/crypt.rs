//! Keyed XOR stream. Keystream block `i` (32 bytes) is
//! `SHA-256(key ‖ i as u64 big-endian)`, blocks concatenated from `i = 0`.

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("encryption key must not be empty")]
pub struct EmptyKey;

#[derive(Clone, PartialEq, Eq)]
pub struct Key(Vec<u8>);

impl Key {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, EmptyKey> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(EmptyKey);
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl std::fmt::Debug for Key {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Key(<{} bytes>)", self.0.len())
    }
}

/// XORs `data` with the keystream starting at keystream byte `offset`.
pub fn crypt_at(data: &mut [u8], key: &Key, offset: usize) {
    let mut block_idx = offset / 32;
    let mut block = keystream_block(key, block_idx);
    for (k, b) in data.iter_mut().enumerate() {
        let pos = offset + k;
        if pos / 32 != block_idx {
            block_idx = pos / 32;
            block = keystream_block(key, block_idx);
        }
        *b ^= block[pos % 32];
    }
}

pub fn crypt(data: &mut [u8], key: &Key) {
    crypt_at(data, key, 0)
}

fn keystream_block(key: &Key, i: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(&key.0);
    h.update((i as u64).to_be_bytes());
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn involution_and_offsets() {
        let key = Key::new(*b"k").unwrap();
        let orig: Vec<u8> = (0..100).collect();
        let mut d = orig.clone();
        crypt(&mut d, &key);
        assert_ne!(d, orig);
        let mut tail = d[40..].to_vec();
        crypt_at(&mut tail, &key, 40);
        assert_eq!(tail, orig[40..]);
        crypt(&mut d, &key);
        assert_eq!(d, orig);
    }

    #[test]
    fn first_block_is_documented_digest() {
        let key = Key::new(*b"abc").unwrap();
        let mut d = [0u8; 32];
        crypt(&mut d, &key);
        let expect: [u8; 32] = Sha256::digest([b"abc".as_slice(), &[0u8; 8]].concat()).into();
        assert_eq!(d, expect);
    }

    #[test]
    fn empty_key_rejected() {
        assert_eq!(Key::new(Vec::new()), Err(EmptyKey));
    }
}
