//! Two-photon polarization state model.
//!
//! The source emits (|HH⟩ + |VV⟩)/√2. Imperfections are captured by two
//! basis visibilities: `v_hv` for the rectilinear basis and `v_da` for the
//! diagonal basis. The resulting density matrix is
//!
//! ```text
//! ρ = v_da |ψ⟩⟨ψ| + (v_hv − v_da) (|HH⟩⟨HH| + |VV⟩⟨VV|)/2 + (1 − v_hv) I/4
//! ```
//!
//! i.e. a pure Bell state, partially dephased into classical H/V
//! correlations, then mixed with white noise. Every detection probability
//! used by the simulator comes from here.
//!
//! All angles are polarization analyzer angles in degrees (0° = H,
//! 90° = V, 45° = D, 135° = A). Half-wave-plate angles are half of these.

use nalgebra::Matrix4;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::f64::consts::SQRT_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid pair state: require 0 <= v_da <= v_hv <= 1, got v_hv={v_hv}, v_da={v_da}")]
    InvalidState { v_hv: f64, v_da: f64 },
    #[error("visibility {0} outside [0, 1]")]
    VisibilityOutOfRange(f64),
}

/// Noisy polarization-entangled pair, parameterised by its basis visibilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairState {
    v_hv: f64,
    v_da: f64,
}

impl PairState {
    pub fn new(v_hv: f64, v_da: f64) -> Result<Self, ModelError> {
        let ok = v_hv.is_finite()
            && v_da.is_finite()
            && (0.0..=1.0).contains(&v_hv)
            && (0.0..=v_hv).contains(&v_da);
        if ok {
            Ok(Self { v_hv, v_da })
        } else {
            Err(ModelError::InvalidState { v_hv, v_da })
        }
    }

    /// The ideal state of the source, with unit visibility in both bases.
    pub fn ideal() -> Self {
        Self { v_hv: 1.0, v_da: 1.0 }
    }

    /// Equal visibility in both bases (a Werner-like state).
    pub fn isotropic(v: f64) -> Result<Self, ModelError> {
        Self::new(v, v)
    }

    pub fn v_hv(&self) -> f64 {
        self.v_hv
    }

    pub fn v_da(&self) -> f64 {
        self.v_da
    }

    /// Mean of the H, V, D and A visibilities (H/V share `v_hv`, D/A share `v_da`).
    pub fn mean_visibility(&self) -> f64 {
        0.5 * (self.v_hv + self.v_da)
    }
}

/// Alice's and Bob's analyzer polarization angles in degrees, reduced mod 180°.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzerSetting {
    alpha: f64,
    beta: f64,
}

impl AnalyzerSetting {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha: alpha.rem_euclid(180.0),
            beta: beta.rem_euclid(180.0),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Density matrix in the basis order (HH, HV, VH, VV).
pub fn density_matrix(state: &PairState) -> Matrix4<Complex64> {
    let (v_hv, v_da) = (state.v_hv, state.v_da);
    let mut rho = Matrix4::<Complex64>::zeros();
    let noise = (1.0 - v_hv) / 4.0;
    for i in 0..4 {
        rho[(i, i)] = Complex64::new(noise, 0.0);
    }
    // Bell-state part plus the dephased H/V part share the HH/VV diagonal.
    let corr = v_da / 2.0 + (v_hv - v_da) / 2.0;
    rho[(0, 0)] += corr;
    rho[(3, 3)] += corr;
    rho[(0, 3)] = Complex64::new(v_da / 2.0, 0.0);
    rho[(3, 0)] = Complex64::new(v_da / 2.0, 0.0);
    rho
}

/// Probability that a pair yields a click behind Alice's analyzer at `alpha`
/// and Bob's analyzer at `beta` (transmitted ports).
pub fn coincidence_probability(state: &PairState, setting: &AnalyzerSetting) -> f64 {
    let a = setting.alpha.to_radians();
    let b = setting.beta.to_radians();
    let (ca, sa) = (a.cos(), a.sin());
    let (cb, sb) = (b.cos(), b.sin());
    let cd = (a - b).cos();
    state.v_da * cd * cd / 2.0
        + (state.v_hv - state.v_da) * (ca * ca * cb * cb + sa * sa * sb * sb) / 2.0
        + (1.0 - state.v_hv) / 4.0
}

/// Polarization correlation E(α, β) = P(same) − P(different).
pub fn correlation(state: &PairState, setting: &AnalyzerSetting) -> f64 {
    let a2 = (2.0 * setting.alpha).to_radians();
    let b2 = (2.0 * setting.beta).to_radians();
    state.v_hv * a2.cos() * b2.cos() + state.v_da * a2.sin() * b2.sin()
}

/// Analyzer angles for a CHSH test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChshAngles {
    pub a: f64,
    pub a_prime: f64,
    pub b: f64,
    pub b_prime: f64,
}

impl ChshAngles {
    /// a = 0°, a' = 45°, b = 22.5°, b' = −22.5°.
    pub const CANONICAL: ChshAngles = ChshAngles {
        a: 0.0,
        a_prime: 45.0,
        b: 22.5,
        b_prime: -22.5,
    };
}

impl Default for ChshAngles {
    fn default() -> Self {
        Self::CANONICAL
    }
}

/// S = E(a,b) + E(a,b') + E(a',b) − E(a',b').
pub fn chsh_s(state: &PairState, angles: &ChshAngles) -> f64 {
    let e = |x: f64, y: f64| correlation(state, &AnalyzerSetting::new(x, y));
    e(angles.a, angles.b) + e(angles.a, angles.b_prime) + e(angles.a_prime, angles.b)
        - e(angles.a_prime, angles.b_prime)
}

/// Closed form of [`chsh_s`] at the canonical angles: √2 (v_hv + v_da).
pub fn chsh_canonical(v_hv: f64, v_da: f64) -> f64 {
    SQRT_2 * (v_hv + v_da)
}

/// Expected coincidence rate for each Bob analyzer angle in `thetas`, with
/// Alice's analyzer fixed at `alice_angle`.
pub fn visibility_curve(
    state: &PairState,
    alice_angle: f64,
    thetas: &[f64],
    rate_scale: f64,
) -> Vec<f64> {
    thetas
        .iter()
        .map(|&t| rate_scale * coincidence_probability(state, &AnalyzerSetting::new(alice_angle, t)))
        .collect()
}

/// Fringe visibility (max − min)/(max + min) of a sampled curve.
pub fn fringe_visibility(curve: &[f64]) -> Option<f64> {
    let max = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = curve.iter().copied().fold(f64::INFINITY, f64::min);
    (max + min > 0.0).then(|| (max - min) / (max + min))
}

/// QBER implied by a visibility: Q = (1 − V)/2.
pub fn qber_from_visibility(v: f64) -> Result<f64, ModelError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(ModelError::VisibilityOutOfRange(v));
    }
    Ok((1.0 - v) / 2.0)
}
