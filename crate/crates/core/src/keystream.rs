//! Deterministic key-derived random stream.
//!
//! `seed = SHA-256(key)`; block `i` is `SHA-256(seed || i as u64 little-endian)`;
//! the stream is the concatenation of blocks, read as big-endian `u64` words
//! (four per block). Bounded draws use rejection sampling so every residue
//! is equally likely. Any implementation following these rules reproduces
//! the same layer selection bit for bit.

use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct KeyStream {
    seed: [u8; 32],
    counter: u64,
    block: [u8; 32],
    offset: usize,
}

impl KeyStream {
    pub fn new(key: &[u8]) -> Self {
        let seed: [u8; 32] = Sha256::digest(key).into();
        Self { seed, counter: 0, block: [0; 32], offset: 32 }
    }

    fn refill(&mut self) {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update(self.counter.to_le_bytes());
        self.block = h.finalize().into();
        self.counter += 1;
        self.offset = 0;
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.offset == 32 {
            self.refill();
        }
        let w = u64::from_be_bytes(self.block[self.offset..self.offset + 8].try_into().unwrap());
        self.offset += 8;
        w
    }

    /// Uniform draw from `0..n`. Words at or above `2^64 - (2^64 mod n)` are rejected.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let limit = (1u128 << 64) - ((1u128 << 64) % u128::from(n));
        loop {
            let x = self.next_u64();
            if u128::from(x) < limit {
                return x % n;
            }
        }
    }

    /// Uniform draw from `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// In-place Fisher-Yates: for `i` from `len-1` down to 1, swap `i` with `below(i+1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
