//! Fringe fitting for polarization-correlation curves.
//!
//! Counts recorded at Bob analyzer angles θᵢ with exposures eᵢ are fitted to
//!
//! ```text
//! μᵢ = eᵢ · A (1 + V cos 2(θᵢ − θ₀)) / 2
//! ```
//!
//! Writing c₀ = A, c₁ = A V cos 2θ₀, c₂ = A V sin 2θ₀ makes the model linear,
//! so the Poisson-weighted least-squares problem is solved by iteratively
//! reweighted linear solves with weights 1/μᵢ from the current model.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::AnalysisError;

/// Two-sided 98% normal quantile.
pub const Z_98: f64 = 2.326;

pub const CURVE_CSV_HEADER: &str = "theta_deg,counts,exposure_s";

const MAX_ITERS: usize = 100;
const REL_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub theta: f64,
    pub counts: f64,
    pub exposure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityFit {
    /// Counts per second at the fringe maximum for V = 1, i.e. A.
    pub amplitude: f64,
    pub visibility: f64,
    /// θ₀ in degrees, in [0, 180).
    pub phase: f64,
    /// Half-width of the 98% confidence interval on the visibility.
    pub ci98: f64,
    /// True when the unconstrained estimate exceeded 1 and was clamped.
    pub clamped: bool,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
}

fn check_angles(points: &[CurvePoint]) -> Result<(), AnalysisError> {
    let mut thetas: Vec<f64> = points.iter().map(|p| p.theta).collect();
    thetas.sort_by(f64::total_cmp);
    thetas.dedup();
    let span = thetas.last().zip(thetas.first()).map_or(0.0, |(hi, lo)| hi - lo);
    if thetas.len() < 4 || span < 90.0 {
        return Err(AnalysisError::InsufficientAngles { distinct: thetas.len(), span });
    }
    Ok(())
}

fn design_row(p: &CurvePoint) -> Vector3<f64> {
    let t = (2.0 * p.theta).to_radians();
    Vector3::new(0.5, 0.5 * t.cos(), 0.5 * t.sin()) * p.exposure
}

fn chi2(points: &[CurvePoint], c: &Vector3<f64>) -> f64 {
    points
        .iter()
        .map(|p| {
            let mu = design_row(p).dot(c);
            (p.counts - mu).powi(2) / mu.max(1.0)
        })
        .sum()
}

pub fn fit_visibility_curve(points: &[CurvePoint]) -> Result<VisibilityFit, AnalysisError> {
    check_angles(points)?;
    if let Some(p) = points.iter().find(|p| !(p.exposure > 0.0) || !(p.counts >= 0.0)) {
        return Err(AnalysisError::FitFailure {
            iterations: 0,
            reason: format!("invalid point at {}°: counts {}, exposure {}", p.theta, p.counts, p.exposure),
            chi2: f64::NAN,
        });
    }

    let mut weights: Vec<f64> = points.iter().map(|p| 1.0 / p.counts.max(1.0)).collect();
    let mut c = Vector3::zeros();
    let mut normal = Matrix3::zeros();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=MAX_ITERS {
        iterations = it;
        normal = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        for (p, &w) in points.iter().zip(&weights) {
            let x = design_row(p);
            normal += x * x.transpose() * w;
            rhs += x * (w * p.counts);
        }
        let next = normal.lu().solve(&rhs).ok_or_else(|| AnalysisError::FitFailure {
            iterations: it,
            reason: "singular normal equations".into(),
            chi2: f64::NAN,
        })?;
        let change = (next - c).norm() / next.norm().max(f64::MIN_POSITIVE);
        c = next;
        for (p, w) in points.iter().zip(weights.iter_mut()) {
            // floor keeps near-zero minima from dominating the weights
            *w = 1.0 / design_row(p).dot(&c).max(0.5 * p.exposure.min(1.0));
        }
        if change < REL_TOL {
            converged = true;
            break;
        }
    }
    let chi2 = chi2(points, &c);
    if !converged {
        return Err(AnalysisError::FitFailure {
            iterations,
            reason: "reweighting did not converge".into(),
            chi2,
        });
    }
    if c[0] <= 0.0 {
        return Err(AnalysisError::FitFailure {
            iterations,
            reason: format!("non-positive amplitude {}", c[0]),
            chi2,
        });
    }

    let r = c[1].hypot(c[2]);
    let raw_v = r / c[0];
    let cov = normal.try_inverse().ok_or_else(|| AnalysisError::FitFailure {
        iterations,
        reason: "singular covariance".into(),
        chi2,
    })?;
    // gradient of V = √(c₁² + c₂²)/c₀
    let grad = if r > 0.0 {
        Vector3::new(-raw_v / c[0], c[1] / (c[0] * r), c[2] / (c[0] * r))
    } else {
        Vector3::new(0.0, 1.0 / c[0], 0.0)
    };
    let sigma_v = (grad.transpose() * cov * grad)[(0, 0)].max(0.0).sqrt();
    let clamped = raw_v > 1.0;
    Ok(VisibilityFit {
        amplitude: c[0],
        visibility: raw_v.min(1.0),
        phase: (0.5 * c[2].atan2(c[1]).to_degrees()).rem_euclid(180.0),
        ci98: Z_98 * sigma_v,
        clamped,
        chi2,
        dof: points.len().saturating_sub(3),
        iterations,
    })
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>, AnalysisError> {
    let name = path.display().to_string();
    let io = |source| AnalysisError::Io { path: name.clone(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let bad = |msg: String| AnalysisError::Parse { context: format!("{name}:{}", idx + 1), msg };
        if idx == 0 {
            if line.trim() != CURVE_CSV_HEADER {
                return Err(bad(format!("expected header `{CURVE_CSV_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
        out.push(CurvePoint { theta: num(f[0])?, counts: num(f[1])?, exposure: num(f[2])? });
    }
    Ok(out)
}
