//! Rate-1/2 (3,6)-regular LDPC codes and syndrome-based sum-product decoding.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PostprocessError;

pub const COLUMN_WEIGHT: usize = 3;
pub const ROW_WEIGHT: usize = 6;
pub const DEFAULT_MAX_ITERS: usize = 100;

/// Largest |LLR| carried by a message.
const LLR_CLAMP: f64 = 40.0;

/// Sparse parity-check matrix of a (3,6)-regular Gallager code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdpcCode {
    n: usize,
    seed: u64,
    /// Variable indices of each check, `ROW_WEIGHT` per row.
    rows: Vec<[u32; ROW_WEIGHT]>,
    /// Edge ids (row·ROW_WEIGHT + position) touching each variable.
    var_edges: Vec<[u32; COLUMN_WEIGHT]>,
}

impl LdpcCode {
    /// Builds the code with `n/2` checks from three stacked bands of `n/6`
    /// rows each. The first band is the identity layout, the others are
    /// seeded column permutations, repaired so no two columns share more
    /// than one check (no 4-cycles) whenever that repair succeeds.
    pub fn generate(n: usize, seed: u64) -> Result<Self, PostprocessError> {
        if n < 24 || n % 6 != 0 {
            return Err(PostprocessError::InvalidBlockLength(n));
        }
        let band = n / ROW_WEIGHT;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<[u32; ROW_WEIGHT]> = Vec::with_capacity(n / 2);
        let mut pairs: HashSet<(u32, u32)> = HashSet::new();

        let mut identity: Vec<u32> = (0..n as u32).collect();
        add_band(&identity, &mut rows, &mut pairs);
        for _ in 1..COLUMN_WEIGHT {
            identity.shuffle(&mut rng);
            let mut perm = identity.clone();
            repair_band(&mut perm, band, &pairs, &mut rng);
            add_band(&perm, &mut rows, &mut pairs);
        }

        let mut var_edges = vec![[0u32; COLUMN_WEIGHT]; n];
        let mut fill = vec![0usize; n];
        for (r, row) in rows.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                let v = v as usize;
                var_edges[v][fill[v]] = (r * ROW_WEIGHT + p) as u32;
                fill[v] += 1;
            }
        }
        Ok(Self { n, seed, rows, var_edges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rows(&self) -> &[[u32; ROW_WEIGHT]] {
        &self.rows
    }

    pub fn column_weight(&self, v: usize) -> usize {
        self.var_edges[v].len()
    }

    /// Number of column pairs sharing two or more checks.
    pub fn four_cycles(&self) -> usize {
        let mut seen = HashSet::new();
        let mut dup = 0;
        for row in &self.rows {
            for i in 0..ROW_WEIGHT {
                for j in i + 1..ROW_WEIGHT {
                    if !seen.insert(ordered(row[i], row[j])) {
                        dup += 1;
                    }
                }
            }
        }
        dup
    }
}

fn ordered(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn add_band(perm: &[u32], rows: &mut Vec<[u32; ROW_WEIGHT]>, pairs: &mut HashSet<(u32, u32)>) {
    for chunk in perm.chunks_exact(ROW_WEIGHT) {
        let row: [u32; ROW_WEIGHT] = chunk.try_into().expect("chunk of ROW_WEIGHT");
        for i in 0..ROW_WEIGHT {
            for j in i + 1..ROW_WEIGHT {
                pairs.insert(ordered(row[i], row[j]));
            }
        }
        rows.push(row);
    }
}

/// Swaps columns between rows of one band until none of its rows contains
/// a column pair already present in an earlier band.
fn repair_band(perm: &mut [u32], band: usize, pairs: &HashSet<(u32, u32)>, rng: &mut ChaCha8Rng) {
    for _ in 0..200 {
        let mut clean = true;
        for r in 0..band {
            for i in 0..ROW_WEIGHT {
                let conflict = (0..ROW_WEIGHT).any(|j| {
                    j != i && pairs.contains(&ordered(perm[r * ROW_WEIGHT + i], perm[r * ROW_WEIGHT + j]))
                });
                if conflict {
                    clean = false;
                    let other = loop {
                        let k = rng.random_range(0..perm.len());
                        if k / ROW_WEIGHT != r {
                            break k;
                        }
                    };
                    perm.swap(r * ROW_WEIGHT + i, other);
                }
            }
        }
        if clean {
            return;
        }
    }
}

/// Parity of `bits` over each check.
pub fn syndrome(code: &LdpcCode, bits: &[bool]) -> Result<Vec<bool>, PostprocessError> {
    if bits.len() != code.n {
        return Err(PostprocessError::LengthMismatch { expected: code.n, found: bits.len() });
    }
    Ok(code
        .rows
        .iter()
        .map(|row| row.iter().fold(false, |acc, &v| acc ^ bits[v as usize]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub bits: Vec<bool>,
    pub iterations: usize,
}

/// Recovers Alice's frame from Bob's copy and Alice's syndrome, assuming
/// independent bit flips with probability `crossover`.
pub fn decode(
    code: &LdpcCode,
    bob_bits: &[bool],
    alice_syndrome: &[bool],
    crossover: f64,
    max_iters: usize,
) -> Result<Decoded, PostprocessError> {
    if !(crossover > 0.0 && crossover < 0.5) {
        return Err(PostprocessError::InvalidPrior(crossover));
    }
    if bob_bits.len() != code.n {
        return Err(PostprocessError::LengthMismatch { expected: code.n, found: bob_bits.len() });
    }
    let mag = ((1.0 - crossover) / crossover).ln();
    let llr: Vec<f64> = bob_bits.iter().map(|&b| if b { -mag } else { mag }).collect();
    decode_llr(code, &llr, alice_syndrome, max_iters)
}

/// Flooding sum-product decoding from per-bit channel LLRs
/// (positive favours 0) toward a target syndrome.
pub fn decode_llr(
    code: &LdpcCode,
    channel: &[f64],
    target: &[bool],
    max_iters: usize,
) -> Result<Decoded, PostprocessError> {
    if channel.len() != code.n {
        return Err(PostprocessError::LengthMismatch { expected: code.n, found: channel.len() });
    }
    if target.len() != code.m() {
        return Err(PostprocessError::LengthMismatch { expected: code.m(), found: target.len() });
    }
    let mut hard: Vec<bool> = channel.iter().map(|&l| l < 0.0).collect();
    if syndrome(code, &hard)? == target {
        return Ok(Decoded { bits: hard, iterations: 0 });
    }

    let n_edges = code.m() * ROW_WEIGHT;
    // c→v messages
    let mut check_msg = vec![0.0f64; n_edges];
    // v→c messages
    let mut var_msg = vec![0.0f64; n_edges];
    for (v, edges) in code.var_edges.iter().enumerate() {
        for &e in edges {
            var_msg[e as usize] = channel[v].clamp(-LLR_CLAMP, LLR_CLAMP);
        }
    }

    for iter in 1..=max_iters {
        // check update: r = ±2 atanh(∏_{others} tanh(q/2))
        for (r, row_target) in target.iter().enumerate() {
            let base = r * ROW_WEIGHT;
            let mut t = [0.0f64; ROW_WEIGHT];
            for (k, slot) in t.iter_mut().enumerate() {
                *slot = (0.5 * var_msg[base + k]).tanh();
            }
            let mut prefix = [1.0f64; ROW_WEIGHT + 1];
            for k in 0..ROW_WEIGHT {
                prefix[k + 1] = prefix[k] * t[k];
            }
            let mut suffix = 1.0;
            let sign = if *row_target { -1.0 } else { 1.0 };
            for k in (0..ROW_WEIGHT).rev() {
                let prod = (prefix[k] * suffix).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
                check_msg[base + k] = (sign * 2.0 * prod.atanh()).clamp(-LLR_CLAMP, LLR_CLAMP);
                suffix *= t[k];
            }
        }
        // variable update and hard decision
        for (v, edges) in code.var_edges.iter().enumerate() {
            let total = channel[v] + edges.iter().map(|&e| check_msg[e as usize]).sum::<f64>();
            hard[v] = total < 0.0;
            for &e in edges {
                var_msg[e as usize] = (total - check_msg[e as usize]).clamp(-LLR_CLAMP, LLR_CLAMP);
            }
        }
        if syndrome(code, &hard)? == target {
            return Ok(Decoded { bits: hard, iterations: iter });
        }
    }
    Err(PostprocessError::DecodeFailure { iterations: max_iters })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_bits(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
        (0..n).map(|_| rng.random_bool(0.5)).collect()
    }

    fn flip(bits: &[bool], p: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
        bits.iter().map(|&b| b ^ rng.random_bool(p)).collect()
    }

    fn check_regular(code: &LdpcCode) {
        let mut col = vec![0usize; code.n()];
        for row in code.rows() {
            let mut r = row.to_vec();
            r.sort_unstable();
            r.dedup();
            assert_eq!(r.len(), ROW_WEIGHT, "duplicate edge in row");
            for &v in row {
                col[v as usize] += 1;
            }
        }
        assert!(col.iter().all(|&c| c == COLUMN_WEIGHT));
    }

    #[test]
    fn small_code_is_regular() {
        let code = LdpcCode::generate(24, 7).unwrap();
        assert_eq!((code.m(), code.n()), (12, 24));
        check_regular(&code);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(LdpcCode::generate(4098, 1).unwrap(), LdpcCode::generate(4098, 1).unwrap());
        assert_ne!(LdpcCode::generate(4098, 1).unwrap(), LdpcCode::generate(4098, 2).unwrap());
    }

    #[test]
    fn block_length_precondition() {
        assert!(LdpcCode::generate(4096, 1).is_err());
        assert!(LdpcCode::generate(18, 1).is_err());
        let code = LdpcCode::generate(4098, 1).unwrap();
        check_regular(&code);
        assert_eq!(code.four_cycles(), 0);
    }

    #[test]
    fn syndrome_linear_and_matches_dense() {
        let code = LdpcCode::generate(24, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(syndrome(&code, &[false; 24]).unwrap().iter().all(|&b| !b));
        // dense GF(2) oracle
        let mut dense = vec![vec![0u8; 24]; 12];
        for (r, row) in code.rows().iter().enumerate() {
            for &v in row {
                dense[r][v as usize] = 1;
            }
        }
        for _ in 0..50 {
            let x = random_bits(24, &mut rng);
            let y = random_bits(24, &mut rng);
            let sx = syndrome(&code, &x).unwrap();
            let expect: Vec<bool> = dense
                .iter()
                .map(|row| row.iter().zip(&x).map(|(&h, &b)| h & u8::from(b)).sum::<u8>() % 2 == 1)
                .collect();
            assert_eq!(sx, expect);
            let sy = syndrome(&code, &y).unwrap();
            let xy: Vec<bool> = x.iter().zip(&y).map(|(a, b)| a ^ b).collect();
            let sxy: Vec<bool> = sx.iter().zip(&sy).map(|(a, b)| a ^ b).collect();
            assert_eq!(syndrome(&code, &xy).unwrap(), sxy);
        }
        assert!(syndrome(&code, &[false; 23]).is_err());
    }

    #[test]
    fn error_free_frame_needs_no_iterations() {
        let code = LdpcCode::generate(4098, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_bits(4098, &mut rng);
        let s = syndrome(&code, &x).unwrap();
        let d = decode(&code, &x, &s, 0.05, 100).unwrap();
        assert_eq!(d.bits, x);
        assert!(d.iterations <= 1);
    }

    #[test]
    fn corrects_moderate_noise() {
        let code = LdpcCode::generate(4098, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x = random_bits(4098, &mut rng);
            let y = flip(&x, 0.0558, &mut rng);
            let d = decode(&code, &y, &syndrome(&code, &x).unwrap(), 0.0558, 100).unwrap();
            assert_eq!(d.bits, x);
        }
    }

    #[test]
    fn heavy_noise_fails_explicitly() {
        let code = LdpcCode::generate(4098, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_bits(4098, &mut rng);
        let y = flip(&x, 0.20, &mut rng);
        let s = syndrome(&code, &x).unwrap();
        match decode(&code, &y, &s, 0.20, 100) {
            Err(PostprocessError::DecodeFailure { .. }) => {}
            Ok(d) => assert_eq!(syndrome(&code, &d.bits).unwrap(), s, "success must satisfy syndrome"),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn prior_validated() {
        let code = LdpcCode::generate(24, 1).unwrap();
        let s = vec![false; 12];
        assert!(decode(&code, &[false; 24], &s, 0.0, 10).is_err());
        assert!(decode(&code, &[false; 24], &s, 0.5, 10).is_err());
    }
}
