//! Error correction, verification and privacy amplification of the sifted
//! key.
//!
//! The key (with the QBER sample already removed) is cut into frames of the
//! LDPC block length. Alice discloses each frame's syndrome and Bob decodes
//! toward it; a trailing partial frame is shortened by padding both sides
//! with known zeros. A 32-bit Toeplitz hash of every decoded frame is
//! compared and mismatching frames are dropped. Each surviving frame of k
//! bits is then compressed to ⌊k (1/2 − 2Q − s)⌋ bits with its own Toeplitz
//! seed.

pub mod ldpc;
pub mod toeplitz;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ldpc::{decode, decode_llr, syndrome, Decoded, LdpcCode};
pub use toeplitz::{toeplitz_hash, ToeplitzSeed};

use crate::seed::derive_seed;
use crate::sifting::SiftedKeyPair;

pub const DEFAULT_FRAME_LEN: usize = 4098;
pub const VERIFY_BITS: usize = 32;

/// LLR pinned on the zero padding of a shortened frame.
const PAD_LLR: f64 = 40.0;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("block length {0} must be a multiple of 6 and at least 24")]
    InvalidBlockLength(usize),
    #[error("expected {expected} bits, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("crossover probability {0} outside (0, 1/2)")]
    InvalidPrior(f64),
    #[error("decoder did not converge within {iterations} iterations")]
    DecodeFailure { iterations: usize },
    #[error("Toeplitz seed of {seed_len} bits does not fit a {l}x{n} matrix")]
    ToeplitzShape { n: usize, l: usize, seed_len: usize },
    #[error("security parameter {0} outside [0, 1/2)")]
    InvalidSecurity(f64),
    #[error("QBER {0} outside [0, 1]")]
    InvalidQber(f64),
    #[error("{context}: {msg}")]
    Parse { context: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecureKeyParams {
    s: f64,
}

impl SecureKeyParams {
    pub fn new(s: f64) -> Result<Self, PostprocessError> {
        if !(0.0..0.5).contains(&s) {
            return Err(PostprocessError::InvalidSecurity(s));
        }
        Ok(Self { s })
    }

    pub fn s(&self) -> f64 {
        self.s
    }
}

/// ⌊n (1/2 − 2Q − s)⌋, or zero when that is negative.
pub fn secure_length(n: usize, qber: f64, params: SecureKeyParams) -> usize {
    let l = (n as f64 * (0.5 - 2.0 * qber - params.s)).floor();
    if l > 0.0 {
        l as usize
    } else {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessParams {
    pub frame_len: usize,
    pub security_parameter: f64,
    pub max_iters: usize,
    /// Drives the code construction and every hashing seed.
    pub seed: u64,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self { frame_len: DEFAULT_FRAME_LEN, security_parameter: 0.001, max_iters: ldpc::DEFAULT_MAX_ITERS, seed: 0 }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        if self.frame_len < 24 || self.frame_len % 6 != 0 {
            return Err(PostprocessError::InvalidBlockLength(self.frame_len));
        }
        SecureKeyParams::new(self.security_parameter).map(|_| ())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PostprocessStats {
    pub input_bits: usize,
    pub frames: usize,
    pub frames_ok: usize,
    pub decode_failures: usize,
    pub verify_failures: usize,
    /// Frames that passed verification yet still differ; only knowable in
    /// simulation where both keys are at hand.
    pub undetected_errors: usize,
    pub reconciled_bits: usize,
    pub syndrome_bits: usize,
    pub verify_bits: usize,
    pub secure_bits: usize,
    pub mean_iterations: f64,
}

impl PostprocessStats {
    pub fn decode_failure_dominated(&self) -> bool {
        self.frames > 0 && 2 * self.decode_failures > self.frames
    }

    /// Reconciled bits less everything disclosed for the surviving frames.
    pub fn net_reconciled_bits(&self) -> usize {
        self.reconciled_bits.saturating_sub(self.syndrome_bits + self.verify_bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOutput {
    pub alice_key: Vec<bool>,
    pub bob_key: Vec<bool>,
    pub stats: PostprocessStats,
}

enum FrameOutcome {
    DecodeFailed,
    VerifyFailed,
    Ok { alice: Vec<bool>, bob: Vec<bool>, iterations: usize, undetected: bool, k: usize },
}

fn bits_to_u32(bits: &[bool]) -> u32 {
    bits.iter().enumerate().fold(0, |acc, (i, &b)| acc | (u32::from(b) << i))
}

fn process_frame(
    code: &LdpcCode,
    index: usize,
    alice: &[bool],
    bob: &[bool],
    crossover: f64,
    qber: f64,
    params: &PostprocessParams,
) -> Result<FrameOutcome, PostprocessError> {
    let n = code.n();
    let k = alice.len();
    let mut a = alice.to_vec();
    a.resize(n, false);
    let mag = ((1.0 - crossover) / crossover).ln();
    let llr: Vec<f64> = (0..n)
        .map(|i| match bob.get(i) {
            Some(&b) => if b { -mag } else { mag },
            None => PAD_LLR,
        })
        .collect();
    let target = syndrome(code, &a)?;
    let decoded = match decode_llr(code, &llr, &target, params.max_iters) {
        Ok(d) => d,
        Err(PostprocessError::DecodeFailure { .. }) => return Ok(FrameOutcome::DecodeFailed),
        Err(e) => return Err(e),
    };
    let corrected = &decoded.bits[..k];

    let lv = VERIFY_BITS.min(k);
    let vseed = ToeplitzSeed::random(k, lv, derive_seed(params.seed, "verify", index as u64))?;
    if bits_to_u32(&toeplitz_hash(alice, &vseed)?) != bits_to_u32(&toeplitz_hash(corrected, &vseed)?) {
        return Ok(FrameOutcome::VerifyFailed);
    }

    let l = secure_length(k, qber, SecureKeyParams { s: params.security_parameter });
    let pseed = ToeplitzSeed::random(k, l, derive_seed(params.seed, "pa", index as u64))?;
    Ok(FrameOutcome::Ok {
        alice: toeplitz_hash(alice, &pseed)?,
        bob: toeplitz_hash(corrected, &pseed)?,
        iterations: decoded.iterations,
        undetected: corrected != alice,
        k,
    })
}

/// Runs EC, verification and PA over a sifted key whose QBER sample has
/// already been removed. `qber` is the estimate from that sample.
pub fn run_postprocessing(
    pair: &SiftedKeyPair,
    qber: f64,
    params: &PostprocessParams,
) -> Result<PostprocessOutput, PostprocessError> {
    params.validate()?;
    if !(0.0..=1.0).contains(&qber) {
        return Err(PostprocessError::InvalidQber(qber));
    }
    let mut stats = PostprocessStats { input_bits: pair.len(), ..Default::default() };
    if pair.is_empty() {
        return Ok(PostprocessOutput { alice_key: Vec::new(), bob_key: Vec::new(), stats });
    }
    let code = LdpcCode::generate(params.frame_len, derive_seed(params.seed, "ldpc", 0))?;
    // a zero-error sample still needs a usable prior
    let crossover = qber.clamp(1e-3, 0.4);
    let frames: Vec<(&[bool], &[bool])> =
        pair.alice.chunks(params.frame_len).zip(pair.bob.chunks(params.frame_len)).collect();
    let outcomes = frames
        .par_iter()
        .enumerate()
        .map(|(i, (a, b))| process_frame(&code, i, a, b, crossover, qber, params))
        .collect::<Result<Vec<_>, _>>()?;

    let mut alice_key = Vec::new();
    let mut bob_key = Vec::new();
    let mut iter_sum = 0usize;
    stats.frames = outcomes.len();
    for o in outcomes {
        match o {
            FrameOutcome::DecodeFailed => stats.decode_failures += 1,
            FrameOutcome::VerifyFailed => stats.verify_failures += 1,
            FrameOutcome::Ok { alice, bob, iterations, undetected, k } => {
                stats.frames_ok += 1;
                stats.reconciled_bits += k;
                stats.syndrome_bits += code.m();
                stats.verify_bits += VERIFY_BITS.min(k);
                stats.secure_bits += alice.len();
                stats.undetected_errors += usize::from(undetected);
                iter_sum += iterations;
                alice_key.extend(alice);
                bob_key.extend(bob);
            }
        }
    }
    if stats.frames_ok > 0 {
        stats.mean_iterations = iter_sum as f64 / stats.frames_ok as f64;
    }
    Ok(PostprocessOutput { alice_key, bob_key, stats })
}

/// Key file: 8-byte big-endian bit count, then the bits packed MSB-first.
pub fn encode_key(bits: &[bool]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + bits.len().div_ceil(8));
    out.extend_from_slice(&(bits.len() as u64).to_be_bytes());
    for chunk in bits.chunks(8) {
        out.push(chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i))));
    }
    out
}

pub fn decode_key(bytes: &[u8], name: &str) -> Result<Vec<bool>, PostprocessError> {
    let bad = |msg: String| PostprocessError::Parse { context: name.to_string(), msg };
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| bad(format!("{} bytes is shorter than the 8-byte header", bytes.len())))?;
    let n = u64::from_be_bytes(header) as usize;
    let body = &bytes[8..];
    if body.len() != n.div_ceil(8) {
        return Err(bad(format!("header claims {n} bits but body has {} bytes", body.len())));
    }
    let bits: Vec<bool> = (0..n).map(|i| body[i / 8] >> (7 - i % 8) & 1 == 1).collect();
    if n % 8 != 0 && body[n / 8] & (0xFF >> (n % 8)) != 0 {
        return Err(bad("non-zero padding bits".into()));
    }
    Ok(bits)
}

pub fn write_key(path: &Path, bits: &[bool]) -> Result<(), PostprocessError> {
    fs::write(path, encode_key(bits))
        .map_err(|source| PostprocessError::Io { path: path.display().to_string(), source })
}

pub fn read_key(path: &Path) -> Result<Vec<bool>, PostprocessError> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| PostprocessError::Io { path: name.clone(), source })?;
    decode_key(&bytes, &name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::Basis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_pair(n: usize, q: f64, seed: u64) -> SiftedKeyPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alice: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let bob = alice.iter().map(|&b| b ^ rng.random_bool(q)).collect();
        SiftedKeyPair::new(alice, bob, vec![Basis::Rectilinear; n]).unwrap()
    }

    fn sp(s: f64) -> SecureKeyParams {
        SecureKeyParams::new(s).unwrap()
    }

    #[test]
    fn secure_length_formula() {
        assert_eq!(secure_length(1000, 0.0, sp(0.0)), 500);
        assert_eq!(secure_length(6010, 0.0558, sp(0.0007)), 2330);
        assert_eq!(secure_length(1000, 0.25, sp(0.0)), 0);
        assert_eq!(secure_length(1000, 0.3, sp(0.0)), 0);
        assert_eq!(secure_length(0, 0.01, sp(0.001)), 0);
        assert!(SecureKeyParams::new(0.5).is_err());
        assert!(SecureKeyParams::new(-0.1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn secure_length_monotone(n in 0usize..100_000, dn in 0usize..1000, q in 0.0f64..0.5, dq in 0.0f64..0.1, s in 0.0f64..0.4, ds in 0.0f64..0.09) {
            let base = secure_length(n, q, sp(s));
            proptest::prop_assert!(secure_length(n + dn, q, sp(s)) >= base);
            proptest::prop_assert!(secure_length(n, q + dq, sp(s)) <= base);
            proptest::prop_assert!(secure_length(n, q, sp(s + ds)) <= base);
        }
    }

    #[test]
    fn keys_agree_after_postprocessing() {
        let pair = noisy_pair(3 * 4098 + 1000, 0.05, 1);
        let params = PostprocessParams { seed: 9, ..Default::default() };
        let out = run_postprocessing(&pair, 0.05, &params).unwrap();
        assert_eq!(out.stats.frames, 4);
        assert_eq!(out.stats.frames_ok, 4);
        assert_eq!(out.stats.undetected_errors, 0);
        assert_eq!(out.alice_key, out.bob_key);
        let expect: usize = [4098, 4098, 4098, 1000].iter().map(|&k| secure_length(k, 0.05, sp(0.001))).sum();
        assert_eq!(out.alice_key.len(), expect);
        assert_eq!(out.stats.secure_bits, expect);
        assert_eq!(out.stats.reconciled_bits, pair.len());
    }

    #[test]
    fn deterministic() {
        let pair = noisy_pair(5000, 0.03, 2);
        let params = PostprocessParams::default();
        assert_eq!(run_postprocessing(&pair, 0.03, &params).unwrap(), run_postprocessing(&pair, 0.03, &params).unwrap());
    }

    #[test]
    fn hopeless_noise_discards_frames() {
        let pair = noisy_pair(2 * 4098, 0.25, 3);
        let out = run_postprocessing(&pair, 0.25, &PostprocessParams::default()).unwrap();
        assert_eq!(out.stats.frames_ok + out.stats.decode_failures + out.stats.verify_failures, 2);
        assert!(out.stats.decode_failure_dominated());
        assert!(out.alice_key.is_empty());
    }

    #[test]
    fn empty_key_and_bad_params() {
        let out = run_postprocessing(&SiftedKeyPair::default(), 0.05, &PostprocessParams::default()).unwrap();
        assert_eq!(out.stats.frames, 0);
        let bad = PostprocessParams { frame_len: 4096, ..Default::default() };
        assert!(run_postprocessing(&noisy_pair(10, 0.0, 0), 0.0, &bad).is_err());
        let bad = PostprocessParams { security_parameter: 0.5, ..Default::default() };
        assert!(run_postprocessing(&noisy_pair(10, 0.0, 0), 0.0, &bad).is_err());
        assert!(run_postprocessing(&noisy_pair(10, 0.0, 0), 1.5, &PostprocessParams::default()).is_err());
    }

    #[test]
    fn key_file_round_trip() {
        for n in [0usize, 1, 7, 8, 9, 1000] {
            let bits: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
            let bytes = encode_key(&bits);
            assert_eq!(bytes.len(), 8 + n.div_ceil(8));
            assert_eq!(decode_key(&bytes, "k").unwrap(), bits);
        }
        assert_eq!(encode_key(&[true, false, true]), vec![0, 0, 0, 0, 0, 0, 0, 3, 0b1010_0000]);
        assert!(decode_key(&[0, 0, 0], "k").is_err());
        assert!(decode_key(&[0, 0, 0, 0, 0, 0, 0, 3, 0b1010_0001], "k").is_err());
        assert!(decode_key(&[0, 0, 0, 0, 0, 0, 0, 9, 0], "k").is_err());
    }
}
