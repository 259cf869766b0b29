//! Toeplitz hashing over GF(2).
//!
//! An ℓ×n Toeplitz matrix is fixed by its first row and column, i.e. by
//! n + ℓ − 1 seed bits. With the seed indexed so that
//!
//! ```text
//! out[i] = ⊕_j in[j] · seed[i + n − 1 − j]
//! ```
//!
//! reversing the input turns each output bit into the parity of
//! `rev(in) & seed[i .. i + n]`, which is evaluated 64 bits at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PostprocessError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzSeed {
    bits: Vec<bool>,
    n: usize,
    l: usize,
}

impl ToeplitzSeed {
    pub fn new(bits: Vec<bool>, n: usize, l: usize) -> Result<Self, PostprocessError> {
        if l > n {
            return Err(PostprocessError::ToeplitzShape { n, l, seed_len: bits.len() });
        }
        let expected = if l == 0 { 0 } else { n + l - 1 };
        if bits.len() != expected {
            return Err(PostprocessError::ToeplitzShape { n, l, seed_len: bits.len() });
        }
        Ok(Self { bits, n, l })
    }

    /// Uniformly random seed from a ChaCha8 stream.
    pub fn random(n: usize, l: usize, seed: u64) -> Result<Self, PostprocessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = if l == 0 { 0 } else { n + l - 1 };
        Self::new((0..len).map(|_| rng.random_bool(0.5)).collect(), n, l)
    }

    pub fn input_len(&self) -> usize {
        self.n
    }

    pub fn output_len(&self) -> usize {
        self.l
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

fn pack(bits: impl Iterator<Item = bool>, len: usize, extra_words: usize) -> Vec<u64> {
    let mut words = vec![0u64; len.div_ceil(64) + extra_words];
    for (i, b) in bits.enumerate() {
        if b {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

pub fn toeplitz_hash(input: &[bool], seed: &ToeplitzSeed) -> Result<Vec<bool>, PostprocessError> {
    if input.len() != seed.n {
        return Err(PostprocessError::LengthMismatch { expected: seed.n, found: input.len() });
    }
    if seed.l == 0 {
        return Ok(Vec::new());
    }
    let rev = pack(input.iter().rev().copied(), seed.n, 0);
    let key = pack(seed.bits.iter().copied(), seed.bits.len(), 2);
    let out = (0..seed.l)
        .map(|i| {
            let (w0, s) = (i / 64, (i % 64) as u32);
            let mut acc = 0u64;
            for (k, &x) in rev.iter().enumerate() {
                let lo = key[w0 + k] >> s;
                let hi = if s == 0 { 0 } else { key[w0 + k + 1] << (64 - s) };
                acc ^= x & (lo | hi);
            }
            acc.count_ones() & 1 == 1
        })
        .collect();
    Ok(out)
}
