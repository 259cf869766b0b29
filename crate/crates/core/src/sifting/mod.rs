//! Basis reconciliation, error estimation and the count-based estimators
//! (visibility, QBER, CHSH, sifted rate).

mod fit;

pub use fit::{fit_visibility_curve, read_curve_csv, CurvePoint, VisibilityFit, CURVE_CSV_HEADER, Z_98};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::acquisition::{Basis, DetectorArray, Party, Role};
use crate::coincidence::{CoincidenceEvent, CountMatrix};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("key is empty")]
    EmptyKey,
    #[error("sample fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("no same-basis counts in the {0:?} basis; visibility undefined")]
    UndefinedVisibility(Basis),
    #[error("need at least 4 distinct angles spanning 90 degrees, got {distinct} spanning {span}")]
    InsufficientAngles { distinct: usize, span: f64 },
    #[error("input lengths differ: {0}")]
    LengthMismatch(String),
    #[error("fit failed after {iterations} iterations: {reason} (chi2 = {chi2:.4e})")]
    FitFailure { iterations: usize, reason: String, chi2: f64 },
    #[error("{context}: {msg}")]
    Parse { context: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Alice's and Bob's raw key bits from same-basis coincidences.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftedKeyPair {
    pub alice: Vec<bool>,
    pub bob: Vec<bool>,
    pub bases: Vec<Basis>,
}

impl SiftedKeyPair {
    pub fn new(alice: Vec<bool>, bob: Vec<bool>, bases: Vec<Basis>) -> Result<Self, AnalysisError> {
        if alice.len() != bob.len() || alice.len() != bases.len() {
            return Err(AnalysisError::LengthMismatch(format!(
                "alice {}, bob {}, bases {}",
                alice.len(),
                bob.len(),
                bases.len()
            )));
        }
        Ok(Self { alice, bob, bases })
    }

    pub fn len(&self) -> usize {
        self.alice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alice.is_empty()
    }

    pub fn mismatches(&self) -> usize {
        self.alice.iter().zip(&self.bob).filter(|(a, b)| a != b).count()
    }

    /// Drops the given positions (sorted, unique) from all three sequences.
    pub fn without_positions(&self, positions: &[usize]) -> Self {
        let mut drop = positions.iter().peekable();
        let mut out = Self::default();
        for i in 0..self.len() {
            if drop.peek() == Some(&&i) {
                drop.next();
                continue;
            }
            out.alice.push(self.alice[i]);
            out.bob.push(self.bob[i]);
            out.bases.push(self.bases[i]);
        }
        out
    }
}

/// Keeps the events where Alice and Bob measured in the same basis.
/// Bits are H→0, V→1, D→0, A→1 on both sides.
pub fn sift(events: &[CoincidenceEvent], detectors: &DetectorArray) -> SiftedKeyPair {
    let mut out = SiftedKeyPair::default();
    for e in events {
        let ra = detectors.role(usize::from(e.alice_channel));
        let rb = detectors.role(usize::from(e.bob_channel));
        if ra.basis == rb.basis {
            out.alice.push(ra.bit == 1);
            out.bob.push(rb.bit == 1);
            out.bases.push(ra.basis);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct QberEstimate {
    pub qber: f64,
    pub sample_size: usize,
    pub errors: usize,
    /// Sorted positions revealed during estimation; removed before EC.
    pub disclosed: Vec<usize>,
}

/// Compares a uniformly random subset (without replacement) of the key.
///
/// The sample holds `round(fraction · n)` positions, at least one.
pub fn estimate_qber(
    pair: &SiftedKeyPair,
    sample_fraction: f64,
    seed: u64,
) -> Result<QberEstimate, AnalysisError> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(AnalysisError::InvalidFraction(sample_fraction));
    }
    let n = pair.len();
    if n == 0 {
        return Err(AnalysisError::EmptyKey);
    }
    let k = ((sample_fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disclosed = index::sample(&mut rng, n, k).into_vec();
    disclosed.sort_unstable();
    let errors = disclosed.iter().filter(|&&i| pair.alice[i] != pair.bob[i]).count();
    Ok(QberEstimate {
        qber: errors as f64 / k as f64,
        sample_size: k,
        errors,
        disclosed,
    })
}

fn n(m: &CountMatrix, det: &DetectorArray, a: Role, b: Role) -> f64 {
    m.get(det.channel_for(Party::Alice, a), det.channel_for(Party::Bob, b)) as f64
}

/// Basis visibilities from the same-basis blocks of a count matrix:
/// (N₀₀ + N₁₁ − N₀₁ − N₁₀) / (N₀₀ + N₁₁ + N₀₁ + N₁₀).
pub fn visibility_from_counts(
    m: &CountMatrix,
    detectors: &DetectorArray,
) -> Result<(f64, f64), AnalysisError> {
    let block = |basis: Basis, r0: Role, r1: Role| {
        let same = n(m, detectors, r0, r0) + n(m, detectors, r1, r1);
        let diff = n(m, detectors, r0, r1) + n(m, detectors, r1, r0);
        if same + diff == 0.0 {
            Err(AnalysisError::UndefinedVisibility(basis))
        } else {
            Ok((same - diff) / (same + diff))
        }
    };
    Ok((
        block(Basis::Rectilinear, Role::H, Role::V)?,
        block(Basis::Diagonal, Role::D, Role::A)?,
    ))
}

/// Fringe visibility for each of Alice's analyzer settings H, V, D, A:
/// (N_parallel − N_orthogonal)/(N_parallel + N_orthogonal).
pub fn basis_visibilities(
    m: &CountMatrix,
    detectors: &DetectorArray,
) -> Result<[f64; 4], AnalysisError> {
    let mut out = [0.0; 4];
    for (slot, role) in Role::ALL.iter().enumerate() {
        let ortho = Role { basis: role.basis, bit: 1 - role.bit };
        let par = n(m, detectors, *role, *role);
        let orth = n(m, detectors, *role, ortho);
        if par + orth == 0.0 {
            return Err(AnalysisError::UndefinedVisibility(role.basis));
        }
        out[slot] = (par - orth) / (par + orth);
    }
    Ok(out)
}

/// Mean per-combination rate of correct same-basis coincidences,
/// (N_HH + N_VV + N_DD + N_AA) / 4 per second.
pub fn correct_coincidence_rate(m: &CountMatrix, detectors: &DetectorArray, duration: f64) -> f64 {
    let correct: f64 = Role::ALL.iter().map(|&r| n(m, detectors, r, r)).sum();
    correct / 4.0 / duration
}

/// R_sif = 4 · cc.
pub fn sifted_rate(cc: f64) -> f64 {
    4.0 * cc
}

/// CHSH S at the canonical angles implied by the basis visibilities.
pub fn chsh_from_visibilities(v_hv: f64, v_da: f64) -> f64 {
    crate::quantum_model::chsh_canonical(v_hv, v_da)
}

pub const SIFTED_CSV_HEADER: &str = "basis,alice_bit,bob_bit";

fn basis_label(b: Basis) -> &'static str {
    match b {
        Basis::Rectilinear => "HV",
        Basis::Diagonal => "DA",
    }
}

pub fn write_sifted_csv(path: &Path, pair: &SiftedKeyPair) -> Result<(), AnalysisError> {
    let name = path.display().to_string();
    let io = |source| AnalysisError::Io { path: name.clone(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{SIFTED_CSV_HEADER}").map_err(io)?;
    for i in 0..pair.len() {
        writeln!(w, "{},{},{}", basis_label(pair.bases[i]), u8::from(pair.alice[i]), u8::from(pair.bob[i]))
            .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_sifted_csv(path: &Path) -> Result<SiftedKeyPair, AnalysisError> {
    let name = path.display().to_string();
    let io = |source| AnalysisError::Io { path: name.clone(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = SiftedKeyPair::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let bad = |msg: String| AnalysisError::Parse { context: format!("{name}:{}", idx + 1), msg };
        if idx == 0 {
            if line.trim() != SIFTED_CSV_HEADER {
                return Err(bad(format!("expected header `{SIFTED_CSV_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let [basis, a, b] = f[..] else {
            return Err(bad(format!("expected 3 fields, found {}", f.len())));
        };
        let basis = match basis {
            "HV" => Basis::Rectilinear,
            "DA" => Basis::Diagonal,
            other => return Err(bad(format!("unknown basis `{other}`"))),
        };
        let bit = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(bad(format!("bit must be 0 or 1, got `{other}`"))),
        };
        out.alice.push(bit(a)?);
        out.bob.push(bit(b)?);
        out.bases.push(basis);
    }
    Ok(out)
}
