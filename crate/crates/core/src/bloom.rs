//! Bloom filters sized for status blocks: 10 bits per expected key and
//! five indexes per element.
//!
//! Index derivation is double hashing over one SHA-224 digest: the digest
//! splits into two 14-byte halves h1 and h2, and index_i = (h1 + i*h2) mod m
//! for i in 0..k. There is no delete; the block builder reconstructs filters
//! from scratch every round, which is also why expected_n is fixed up front.
//!
//! Serialized layout: m, k, n as big-endian u32 (12 bytes), then the bit
//! array, ceil(m/8) bytes, least significant bit of each byte first.

use sha2::{Digest, Sha224};
use thiserror::Error;

pub const BITS_PER_KEY: u32 = 10;
pub const HASH_COUNT: u32 = 5;
const HEADER_LEN: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BloomError {
    #[error("filter capacity must be positive")]
    ZeroCapacity,
    #[error("serialized filter truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("serialized filter has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("header invalid: {0}")]
    BadHeader(&'static str),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BloomFilter {
    bits: Vec<u8>,
    m: u32,
    k: u32,
    n: u32,
}

impl BloomFilter {
    /// Sizes the bit array at 10 bits per expected element, rounded up to
    /// a whole byte.
    pub fn new(expected_n: u32) -> Result<BloomFilter, BloomError> {
        if expected_n == 0 {
            return Err(BloomError::ZeroCapacity);
        }
        let m = (expected_n * BITS_PER_KEY + 7) / 8 * 8;
        Ok(BloomFilter {
            bits: vec![0u8; (m / 8) as usize],
            m,
            k: HASH_COUNT,
            n: 0,
        })
    }

    /// Zero-capacity filter for blocks with no keys: contains nothing and
    /// adds no payload bytes. `new` refuses n = 0 so this stays explicit.
    pub fn empty() -> BloomFilter {
        BloomFilter {
            bits: Vec::new(),
            m: 0,
            k: HASH_COUNT,
            n: 0,
        }
    }

    pub fn bit_count(&self) -> u32 {
        self.m
    }

    pub fn hash_count(&self) -> u32 {
        self.k
    }

    /// Number of inserted elements.
    pub fn len(&self) -> u32 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Payload size in bytes, excluding the header.
    pub fn payload_len(&self) -> usize {
        self.bits.len()
    }

    pub fn insert(&mut self, element: &[u8]) {
        assert!(self.m > 0, "insert into zero-capacity filter");
        for idx in index_stream(self.m, self.k, element) {
            self.bits[idx / 8] |= 1 << (idx % 8);
        }
        self.n += 1;
    }

    pub fn contains(&self, element: &[u8]) -> bool {
        if self.m == 0 {
            return false;
        }
        index_stream(self.m, self.k, element)
            .all(|idx| self.bits[idx / 8] & (1 << (idx % 8)) != 0)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.bits.len());
        out.extend_from_slice(&self.m.to_be_bytes());
        out.extend_from_slice(&self.k.to_be_bytes());
        out.extend_from_slice(&self.n.to_be_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<BloomFilter, BloomError> {
        if bytes.len() < HEADER_LEN {
            return Err(BloomError::Truncated {
                expected: HEADER_LEN,
                got: bytes.len(),
            });
        }
        let m = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let k = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
        let n = u32::from_be_bytes(bytes[8..12].try_into().unwrap());
        if m % 8 != 0 {
            return Err(BloomError::BadHeader("bit count not byte aligned"));
        }
        if k == 0 {
            return Err(BloomError::BadHeader("zero hash count"));
        }
        let payload = (m / 8) as usize;
        let expected = HEADER_LEN + payload;
        if bytes.len() < expected {
            return Err(BloomError::Truncated {
                expected,
                got: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(BloomError::TrailingBytes {
                extra: bytes.len() - expected,
            });
        }
        Ok(BloomFilter {
            bits: bytes[HEADER_LEN..].to_vec(),
            m,
            k,
            n,
        })
    }

    /// Serialized length for a filter over n keys, header included.
    pub fn serialized_len(expected_n: u32) -> usize {
        HEADER_LEN + payload_len(expected_n)
    }
}

fn index_stream(m: u32, k: u32, element: &[u8]) -> impl Iterator<Item = usize> {
    let digest = Sha224::digest(element);
    let mut h1 = [0u8; 16];
    h1[2..].copy_from_slice(&digest[..14]);
    let mut h2 = [0u8; 16];
    h2[2..].copy_from_slice(&digest[14..]);
    let h1 = u128::from_be_bytes(h1);
    let h2 = u128::from_be_bytes(h2);
    (0..k).map(move |i| ((h1 + i as u128 * h2) % m as u128) as usize)
}

/// Payload bytes for a filter over n keys: ceil(10n / 8).
pub fn payload_len(n: u32) -> usize {
    ((n * BITS_PER_KEY + 7) / 8) as usize
}

/// False-positive probability (1 - (1 - 1/m)^(kn))^k of a filter with m
/// bits and k indexes holding n elements.
pub fn predict_fp(m: u32, k: u32, n: u32) -> f64 {
    if m == 0 || n == 0 {
        return 0.0;
    }
    let inner = 1.0 - (1.0 - 1.0 / m as f64).powf((k as u64 * n as u64) as f64);
    inner.powi(k as i32)
}
