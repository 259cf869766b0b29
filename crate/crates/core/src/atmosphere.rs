//! Beer-Lambert transmission through an aerosol-laden free-space path.
//!
//! Extinction coefficients are carried in inverse megameters (Mm⁻¹), the
//! unit aerosol monitors report, and converted to m⁻¹ only inside
//! [`transmission`].

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::KeyRateReport;

/// 1 Mm⁻¹ expressed in m⁻¹.
const PER_MEGAMETER: f64 = 1e-6;

/// Multiplier applied to γ·L in the Beer-Lambert exponent.
pub const DEFAULT_EXPONENT_FACTOR: f64 = 1.5;

/// Header of the aerosol CSV format.
pub const AEROSOL_CSV_HEADER: &str = "date,gamma_Mm^-1,gamma_err,pm25_ugm3,pm25_err";

#[derive(Debug, Error)]
pub enum AtmosphereError {
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("invalid aerosol record: {0}")]
    InvalidRecord(String),
    #[error("transmission {0} outside (0, 1]")]
    InvalidTransmission(f64),
    #[error("scale factor must be positive, got {0}")]
    InvalidFactor(f64),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One day of aerosol monitoring data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AerosolRecord {
    pub date: String,
    /// Extinction coefficient at 525 nm, Mm⁻¹.
    pub gamma: f64,
    pub gamma_err: f64,
    /// PM2.5 mass concentration, µg/m³.
    pub pm25: f64,
    pub pm25_err: f64,
}

impl AerosolRecord {
    pub fn new(
        date: impl Into<String>,
        gamma: f64,
        gamma_err: f64,
        pm25: f64,
        pm25_err: f64,
    ) -> Result<Self, AtmosphereError> {
        let rec = Self {
            date: date.into(),
            gamma,
            gamma_err,
            pm25,
            pm25_err,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// A record with no aerosol load.
    pub fn clear(date: impl Into<String>) -> Self {
        Self {
            date: date.into(),
            gamma: 0.0,
            gamma_err: 0.0,
            pm25: 0.0,
            pm25_err: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AtmosphereError> {
        let fields = [
            ("gamma", self.gamma),
            ("gamma_err", self.gamma_err),
            ("pm25", self.pm25),
            ("pm25_err", self.pm25_err),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AtmosphereError::InvalidRecord(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Geometry and non-atmospheric loss of one free-space link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// Propagation length, meters.
    pub length: f64,
    /// Lumped non-atmospheric transmission (optics, coupling).
    pub scaling: f64,
    pub exponent_factor: f64,
}

impl ChannelSpec {
    pub fn new(length: f64, scaling: f64) -> Result<Self, AtmosphereError> {
        Self::with_exponent(length, scaling, DEFAULT_EXPONENT_FACTOR)
    }

    pub fn with_exponent(
        length: f64,
        scaling: f64,
        exponent_factor: f64,
    ) -> Result<Self, AtmosphereError> {
        let spec = Self {
            length,
            scaling,
            exponent_factor,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AtmosphereError> {
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(AtmosphereError::InvalidChannel(format!(
                "length must be positive, got {}",
                self.length
            )));
        }
        if !(self.scaling > 0.0 && self.scaling <= 1.0) {
            return Err(AtmosphereError::InvalidChannel(format!(
                "scaling must lie in (0, 1], got {}",
                self.scaling
            )));
        }
        if !(self.exponent_factor.is_finite() && self.exponent_factor > 0.0) {
            return Err(AtmosphereError::InvalidChannel(format!(
                "exponent factor must be positive, got {}",
                self.exponent_factor
            )));
        }
        Ok(())
    }

    fn attenuation(&self, gamma_mm: f64) -> f64 {
        (-self.exponent_factor * gamma_mm * PER_MEGAMETER * self.length).exp()
    }
}

/// T = Sc · exp(−k γ L).
pub fn transmission(spec: &ChannelSpec, record: &AerosolRecord) -> f64 {
    spec.scaling * spec.attenuation(record.gamma)
}

/// Transmission with its first-order uncertainty from the extinction error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.5} ± {:.5}", self.value, self.std_err)
    }
}

/// |∂T/∂γ| σ_γ = T k L σ_γ.
pub fn transmission_with_uncertainty(spec: &ChannelSpec, record: &AerosolRecord) -> Estimate {
    let value = transmission(spec, record);
    let std_err = value * spec.exponent_factor * spec.length * record.gamma_err * PER_MEGAMETER;
    Estimate { value, std_err }
}

/// Outcome of inverting the transmission law for the scaling parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFit {
    pub scaling: f64,
    /// Set when the fitted scaling exceeds 1, i.e. the measured
    /// transmission is higher than the extinction alone would allow.
    pub inconsistent: bool,
}

/// Sc = T / exp(−k γ L).
pub fn fit_scaling(
    measured: f64,
    gamma_mm: f64,
    length: f64,
    exponent_factor: f64,
) -> Result<ScalingFit, AtmosphereError> {
    if !(measured > 0.0 && measured <= 1.0) {
        return Err(AtmosphereError::InvalidTransmission(measured));
    }
    let scaling = measured / (-exponent_factor * gamma_mm * PER_MEGAMETER * length).exp();
    Ok(ScalingFit {
        scaling,
        inconsistent: scaling > 1.0,
    })
}

/// Ratio of the transmissions of two channel/day combinations.
pub fn day_factor(
    spec1: &ChannelSpec,
    record1: &AerosolRecord,
    spec2: &ChannelSpec,
    record2: &AerosolRecord,
) -> f64 {
    transmission(spec1, record1) / transmission(spec2, record2)
}

/// Ångström power law: γ(λ2) = γ(λ1) (λ1/λ2)^α.
pub fn angstrom_rescale(gamma: f64, lambda1_nm: f64, lambda2_nm: f64, alpha: f64) -> f64 {
    gamma * (lambda1_nm / lambda2_nm).powf(alpha)
}

/// Scales every rate of a reference report by 1/f. Visibilities, QBER and
/// S are channel-independent and are copied through.
pub fn predict_rates(reference: &KeyRateReport, f: f64) -> Result<KeyRateReport, AtmosphereError> {
    if !(f.is_finite() && f > 0.0) {
        return Err(AtmosphereError::InvalidFactor(f));
    }
    let mut out = reference.clone();
    out.cc_rate /= f;
    out.sifted_rate /= f;
    out.after_ec_rate /= f;
    out.after_ec_disclosed_rate /= f;
    out.after_pa_rate /= f;
    out.secure_rate /= f;
    Ok(out)
}

pub fn parse_aerosol_csv<R: BufRead>(
    reader: R,
    path: &str,
) -> Result<Vec<AerosolRecord>, AtmosphereError> {
    let mut out = Vec::new();
    let mut saw_header = false;
    let parse_err = |line: usize, msg: String| AtmosphereError::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| AtmosphereError::Io {
            path: path.to_string(),
            source,
        })?;
        let line = line.trim();
        if idx == 0 {
            if line != AEROSOL_CSV_HEADER {
                return Err(parse_err(lineno, format!("expected header `{AEROSOL_CSV_HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(parse_err(lineno, format!("expected 5 fields, found {}", fields.len())));
        }
        let mut nums = [0.0; 4];
        for (slot, raw) in nums.iter_mut().zip(&fields[1..]) {
            *slot = raw
                .parse()
                .map_err(|_| parse_err(lineno, format!("not a number: `{raw}`")))?;
        }
        let rec = AerosolRecord::new(fields[0], nums[0], nums[1], nums[2], nums[3])
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        out.push(rec);
    }
    if !saw_header {
        return Err(parse_err(1, "empty file".into()));
    }
    Ok(out)
}

pub fn read_aerosol_csv(path: &Path) -> Result<Vec<AerosolRecord>, AtmosphereError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| AtmosphereError::Io {
        path: p.clone(),
        source,
    })?;
    parse_aerosol_csv(std::io::BufReader::new(file), &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn may8() -> AerosolRecord {
        AerosolRecord::new("2021-05-08", 76.41, 7.78, 2.87, 0.26).unwrap()
    }

    fn may10() -> AerosolRecord {
        AerosolRecord::new("2021-05-10", 48.67, 6.70, 1.68, 0.24).unwrap()
    }

    #[test]
    fn transmission_examples() {
        let lossless = ChannelSpec::new(1234.0, 1.0).unwrap();
        assert_eq!(transmission(&lossless, &AerosolRecord::clear("x")), 1.0);
        let t35 = transmission(&ChannelSpec::new(35.0, 0.944).unwrap(), &may8());
        assert!((t35 - 0.94022).abs() < 5e-6, "{t35}");
        let t200 = transmission(&ChannelSpec::new(200.0, 0.710).unwrap(), &may10());
        assert!((t200 - 0.69971).abs() < 5e-6, "{t200}");
    }

    #[test]
    fn fit_scaling_examples() {
        let f35 = fit_scaling(0.94, 76.41, 35.0, 1.5).unwrap();
        assert!((f35.scaling - 0.94378).abs() < 5e-6);
        assert!(!f35.inconsistent);
        let f200 = fit_scaling(0.70, 48.67, 200.0, 1.5).unwrap();
        assert!((f200.scaling - 0.71030).abs() < 5e-6);
        assert_eq!(fit_scaling(0.3, 0.0, 10.0, 1.5).unwrap().scaling, 0.3);
        assert!(fit_scaling(0.99, 1000.0, 200.0, 1.5).unwrap().inconsistent);
        assert!(fit_scaling(0.0, 1.0, 1.0, 1.5).is_err());
        assert!(fit_scaling(1.2, 1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn day_factor_examples() {
        let c35 = ChannelSpec::new(35.0, 0.944).unwrap();
        let c200 = ChannelSpec::new(200.0, 0.710).unwrap();
        let f = day_factor(&c35, &may8(), &c200, &may10());
        assert!((f - 1.3437).abs() < 5e-5, "{f}");
        assert!((day_factor(&c200, &may10(), &c35, &may8()) - 1.0 / f).abs() < 1e-12);
        assert_eq!(day_factor(&c35, &may8(), &c35, &may8()), 1.0);
    }

    #[test]
    fn angstrom_examples() {
        assert!((angstrom_rescale(76.41, 525.0, 810.0, 1.5) - 39.87).abs() < 5e-3);
        assert_eq!(angstrom_rescale(50.0, 600.0, 600.0, 1.3), 50.0);
        assert_eq!(angstrom_rescale(50.0, 525.0, 810.0, 0.0), 50.0);
    }

    #[test]
    fn uncertainty_propagation() {
        let spec = ChannelSpec::new(200.0, 0.710).unwrap();
        let est = transmission_with_uncertainty(&spec, &may10());
        // finite-difference check of dT/dγ
        let h = 1e-3;
        let mut up = may10();
        up.gamma += h;
        let mut dn = may10();
        dn.gamma -= h;
        let deriv = (transmission(&spec, &up) - transmission(&spec, &dn)) / (2.0 * h);
        assert!((est.std_err - deriv.abs() * 6.70).abs() < 1e-9);
    }

    #[test]
    fn invalid_inputs() {
        assert!(ChannelSpec::new(0.0, 0.5).is_err());
        assert!(ChannelSpec::new(10.0, 0.0).is_err());
        assert!(ChannelSpec::new(10.0, 1.01).is_err());
        assert!(ChannelSpec::with_exponent(10.0, 0.5, 0.0).is_err());
        assert!(AerosolRecord::new("d", -1.0, 0.0, 0.0, 0.0).is_err());
        assert!(AerosolRecord::new("d", 1.0, 0.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn csv_parsing() {
        let text = format!(
            "{AEROSOL_CSV_HEADER}\n2021-05-08,76.41,7.78,2.87,0.26\n2021-05-10,48.67,6.70,1.68,0.24\n"
        );
        let recs = parse_aerosol_csv(text.as_bytes(), "mem").unwrap();
        assert_eq!(recs, vec![may8(), may10()]);

        let bad = format!("{AEROSOL_CSV_HEADER}\n2021-05-08,abc,7.78,2.87,0.26\n");
        let err = parse_aerosol_csv(bad.as_bytes(), "mem").unwrap_err().to_string();
        assert!(err.contains("mem:2"), "{err}");
        assert!(parse_aerosol_csv("date,gamma\n".as_bytes(), "mem").is_err());
    }

    proptest! {
        #[test]
        fn transmission_decreasing(g in 0.0..500.0f64, l in 1.0..5000.0f64, k in 0.1..3.0f64, dg in 1.0..50.0f64) {
            let spec = ChannelSpec::with_exponent(l, 0.8, k).unwrap();
            let rec = AerosolRecord::new("d", g, 0.0, 0.0, 0.0).unwrap();
            let t = transmission(&spec, &rec);
            let more_g = AerosolRecord::new("d", g + dg, 0.0, 0.0, 0.0).unwrap();
            prop_assert!(transmission(&spec, &more_g) < t);
            prop_assert!(transmission(&ChannelSpec::with_exponent(l * 1.5, 0.8, k).unwrap(), &more_g)
                < transmission(&spec, &more_g));
            prop_assert!(transmission(&ChannelSpec::with_exponent(l, 0.8, k * 1.5).unwrap(), &more_g)
                < transmission(&spec, &more_g));
            let fit = fit_scaling(t, g, l, k).unwrap();
            prop_assert!((fit.scaling - 0.8).abs() < 1e-12);
        }

        #[test]
        fn day_factor_reciprocal(g1 in 0.0..300.0f64, g2 in 0.0..300.0f64, l1 in 1.0..1000.0f64, l2 in 1.0..1000.0f64) {
            let (a, b) = (ChannelSpec::new(l1, 0.9).unwrap(), ChannelSpec::new(l2, 0.7).unwrap());
            let (ra, rb) = (AerosolRecord::new("a", g1, 0.0, 0.0, 0.0).unwrap(), AerosolRecord::new("b", g2, 0.0, 0.0, 0.0).unwrap());
            prop_assert!((day_factor(&a, &ra, &b, &rb) * day_factor(&b, &rb, &a, &ra) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn angstrom_composes(g in 0.1..300.0f64, l1 in 300.0..1600.0f64, l2 in 300.0..1600.0f64, l3 in 300.0..1600.0f64, a in 0.0..3.0f64) {
            let two_step = angstrom_rescale(angstrom_rescale(g, l1, l2, a), l2, l3, a);
            let direct = angstrom_rescale(g, l1, l3, a);
            prop_assert!((two_step - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }
}
