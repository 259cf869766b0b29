//! Per-session key-rate summary, rendered as a text table and as JSON.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::coincidence::CountMatrix;
use crate::postprocess::PostprocessStats;

/// Rates are in bits per second; `None` marks quantities that are
/// undefined for the session (e.g. visibility without coincidences).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub label: String,
    pub duration: f64,
    pub channel_transmission: Option<f64>,
    pub offset_ps: Option<i64>,
    pub window_ps: Option<u64>,
    pub coincidences: u64,
    pub counts: CountMatrix,
    pub v_hv: Option<f64>,
    pub v_da: Option<f64>,
    pub basis_visibilities: Option<[f64; 4]>,
    pub mean_visibility: Option<f64>,
    pub chsh_s: Option<f64>,
    pub qber: Option<f64>,
    pub qber_sample: usize,
    /// Mean rate of correct coincidences per same-basis detector pair.
    pub cc_rate: f64,
    pub sifted_rate: f64,
    /// Reconciled bits surviving verification.
    pub after_ec_rate: f64,
    /// As above, less the syndrome and verification bits disclosed.
    pub after_ec_disclosed_rate: f64,
    pub after_pa_rate: f64,
    pub secure_rate: f64,
    pub postprocess: Option<PostprocessStats>,
    pub diagnostics: Vec<String>,
}

impl KeyRateReport {
    /// Report for a session that produced nothing to analyse.
    pub fn empty(label: &str, duration: f64, reason: &str) -> Self {
        Self {
            label: label.to_string(),
            duration,
            channel_transmission: None,
            offset_ps: None,
            window_ps: None,
            coincidences: 0,
            counts: CountMatrix::default(),
            v_hv: None,
            v_da: None,
            basis_visibilities: None,
            mean_visibility: None,
            chsh_s: None,
            qber: None,
            qber_sample: 0,
            cc_rate: 0.0,
            sifted_rate: 0.0,
            after_ec_rate: 0.0,
            after_ec_disclosed_rate: 0.0,
            after_pa_rate: 0.0,
            secure_rate: 0.0,
            postprocess: None,
            diagnostics: vec![format!("empty report: {reason}")],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.coincidences == 0 && self.sifted_rate == 0.0
    }

    /// Ordering violations among the rate columns, one message each.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let rates = [
            ("cc", self.cc_rate),
            ("sifted", self.sifted_rate),
            ("after EC", self.after_ec_rate),
            ("after EC (disclosed)", self.after_ec_disclosed_rate),
            ("after PA", self.after_pa_rate),
            ("secure", self.secure_rate),
        ];
        for (name, r) in rates {
            if !(r.is_finite() && r >= 0.0) {
                out.push(format!("{name} rate {r} is not a finite non-negative number"));
            }
        }
        let chain = [
            ("secure", self.secure_rate, "after PA", self.after_pa_rate),
            ("after PA", self.after_pa_rate, "after EC", self.after_ec_rate),
            ("after EC", self.after_ec_rate, "sifted", self.sifted_rate),
        ];
        for (lo_name, lo, hi_name, hi) in chain {
            if lo > hi * (1.0 + 1e-12) {
                out.push(format!("{lo_name} rate {lo:.6e} exceeds {hi_name} rate {hi:.6e}"));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"));
        let _ = writeln!(s, "BBM92 key-rate report: {}", self.label);
        let _ = writeln!(s, "{:<28}{:.3} s", "duration", self.duration);
        let _ = writeln!(s, "{:<28}{}", "channel transmission", opt(self.channel_transmission, 3));
        if let Some(o) = self.offset_ps {
            let _ = writeln!(s, "{:<28}{} ps", "clock offset", o);
        }
        let _ = writeln!(s, "{:<28}{}", "coincidences", self.coincidences);
        let _ = writeln!(s, "{:<28}{}", "CHSH S", opt(self.chsh_s, 3));
        let _ = writeln!(s, "{:<28}{}", "visibility H/V", opt(self.v_hv, 4));
        let _ = writeln!(s, "{:<28}{}", "visibility D/A", opt(self.v_da, 4));
        let _ = writeln!(s, "{:<28}{}", "mean visibility", opt(self.mean_visibility, 4));
        let _ = writeln!(s, "{:<28}{}", "QBER", self.qber.map_or("n/a".into(), |q| format!("{:.2} %", 100.0 * q)));
        let rows = [
            ("coincidence rate (cc)", self.cc_rate),
            ("sifted key rate", self.sifted_rate),
            ("key rate after EC", self.after_ec_rate),
            ("  less disclosed bits", self.after_ec_disclosed_rate),
            ("key rate after PA", self.after_pa_rate),
            ("secure key rate", self.secure_rate),
        ];
        for (name, r) in rows {
            let _ = writeln!(s, "{:<28}{} kbps", name, sig3(r / 1000.0));
        }
        if let Some(p) = &self.postprocess {
            let _ = writeln!(
                s,
                "{:<28}{} ok / {} ({} decode, {} verify failures)",
                "frames",
                p.frames_ok,
                p.frames,
                p.decode_failures,
                p.verify_failures
            );
        }
        for d in &self.diagnostics {
            let _ = writeln!(s, "note: {d}");
        }
        s
    }
}

/// Three significant figures, no exponent.
pub fn sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(mag - 2);
    let rounded = (x / scale).round() * scale;
    // rounding can carry into the next decade (999.5 → 1000)
    let mag = rounded.abs().log10().floor() as i32;
    let decimals = (2 - mag).max(0) as usize;
    format!("{rounded:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> KeyRateReport {
        let mut r = KeyRateReport::empty("t", 10.0, "x");
        r.diagnostics.clear();
        r.coincidences = 100;
        r.cc_rate = 1500.0;
        r.sifted_rate = 6000.0;
        r.after_ec_rate = 5500.0;
        r.after_ec_disclosed_rate = 2700.0;
        r.after_pa_rate = 2100.0;
        r.secure_rate = 2100.0;
        r.qber = Some(0.05);
        r
    }

    #[test]
    fn sig3_formatting() {
        assert_eq!(sig3(2.3456), "2.35");
        assert_eq!(sig3(6.07), "6.07");
        assert_eq!(sig3(25.47), "25.5");
        assert_eq!(sig3(0.012345), "0.0123");
        assert_eq!(sig3(1234.0), "1230");
        assert_eq!(sig3(9.996), "10.0");
        assert_eq!(sig3(0.0), "0");
    }

    #[test]
    fn ordering_checks() {
        assert!(sample().validate().is_empty());
        let mut r = sample();
        r.secure_rate = 2200.0;
        assert_eq!(r.validate().len(), 1);
        let mut r = sample();
        r.after_ec_rate = 7000.0;
        assert_eq!(r.validate().len(), 1);
        let mut r = sample();
        r.cc_rate = f64::NAN;
        assert_eq!(r.validate().len(), 1);
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        assert_eq!(KeyRateReport::from_json(&r.to_json()).unwrap(), r);
        let e = KeyRateReport::empty("none", 0.0, "no tags");
        assert_eq!(KeyRateReport::from_json(&e.to_json()).unwrap(), e);
    }

    #[test]
    fn text_is_deterministic_and_labelled() {
        let r = sample();
        let t = r.render_text();
        assert_eq!(t, r.render_text());
        assert!(t.contains("sifted key rate             6.00 kbps"));
        assert!(t.contains("QBER                        5.00 %"));
        let e = KeyRateReport::empty("none", 0.0, "no tags").render_text();
        assert!(e.contains("empty report: no tags"));
        assert!(e.contains("CHSH S                      n/a"));
    }
}
