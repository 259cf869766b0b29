//! TOML experiment configuration.
//!
//! ```toml
//! schema_version = 1
//! label = "paper_35m"
//! seed = 35
//! duration_s = 10.0
//!
//! [source]
//! pair_rate = 57960.0
//! v_hv = 0.9344
//! v_da = 0.84255
//!
//! [channel]
//! length_m = 35.0
//! scaling = 0.944          # or measured_transmission = 0.94
//! exponent_factor = 1.5
//! [channel.aerosol]
//! date = "2021-05-08"
//! gamma = 76.41
//! gamma_err = 7.78
//! pm25 = 2.87
//! pm25_err = 0.26
//!
//! [alice]
//! transmission = 1.0
//!
//! [detectors]
//! efficiency = 0.6
//! dark_rate = 500.0
//! jitter_ps = 350.0
//! dead_time_ps = 22000
//! [[detectors.overrides]]
//! channel = 6
//! efficiency = 0.55
//!
//! [timing]
//! bob_offset_ps = 120000
//! window_ps = 1000
//!
//! [postprocess]
//! frame_len = 4098
//! security_parameter = 0.0007
//! sample_fraction = 0.1
//! max_iters = 100
//! ```
//!
//! Every section except `schema_version`, `source`, `channel` and `timing`
//! may be omitted and falls back to defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acquisition::{DetectorArray, DetectorChannel, SessionConfig, NUM_CHANNELS};
use crate::atmosphere::{self, AerosolRecord, ChannelSpec, DEFAULT_EXPONENT_FACTOR};
use crate::coincidence::SyncParams;
use crate::postprocess::{PostprocessParams, DEFAULT_FRAME_LEN};
use crate::quantum_model::PairState;
use crate::seed::derive_seed;

use super::RunError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    pub source: SourceSection,
    pub channel: ChannelSection,
    #[serde(default)]
    pub alice: AliceSection,
    #[serde(default)]
    pub detectors: DetectorSection,
    pub timing: TimingSection,
    #[serde(default)]
    pub postprocess: PostprocessSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub pair_rate: f64,
    pub v_hv: f64,
    pub v_da: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub length_m: f64,
    /// Takes precedence over `scaling` when both are present.
    pub measured_transmission: Option<f64>,
    pub scaling: Option<f64>,
    #[serde(default = "default_exponent")]
    pub exponent_factor: f64,
    pub aerosol: Option<AerosolRecord>,
}

fn default_exponent() -> f64 {
    DEFAULT_EXPONENT_FACTOR
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AliceSection {
    pub transmission: f64,
}

impl Default for AliceSection {
    fn default() -> Self {
        Self { transmission: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(default = "default_efficiency")]
    pub efficiency: f64,
    #[serde(default = "default_dark")]
    pub dark_rate: f64,
    #[serde(default = "default_jitter")]
    pub jitter_ps: f64,
    #[serde(default = "default_dead")]
    pub dead_time_ps: u64,
    #[serde(default)]
    pub overrides: Vec<DetectorOverride>,
}

fn default_efficiency() -> f64 {
    DetectorChannel::DEFAULT_EFFICIENCY
}
fn default_dark() -> f64 {
    DetectorChannel::DEFAULT_DARK_RATE
}
fn default_jitter() -> f64 {
    DetectorChannel::DEFAULT_JITTER_PS
}
fn default_dead() -> u64 {
    DetectorChannel::DEFAULT_DEAD_TIME_PS
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            efficiency: default_efficiency(),
            dark_rate: default_dark(),
            jitter_ps: default_jitter(),
            dead_time_ps: default_dead(),
            overrides: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorOverride {
    pub channel: usize,
    pub efficiency: Option<f64>,
    pub dark_rate: Option<f64>,
    pub jitter_ps: Option<f64>,
    pub dead_time_ps: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    /// Delay of Bob's record used by the simulator; the pipeline recovers
    /// it from the data and never reads this value.
    pub bob_offset_ps: i64,
    #[serde(default = "default_window")]
    pub window_ps: u64,
    #[serde(default)]
    pub sync: SyncParams,
}

fn default_window() -> u64 {
    1_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessSection {
    #[serde(default = "default_frame")]
    pub frame_len: usize,
    #[serde(default = "default_security")]
    pub security_parameter: f64,
    #[serde(default = "default_fraction")]
    pub sample_fraction: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
}

fn default_frame() -> usize {
    DEFAULT_FRAME_LEN
}
fn default_security() -> f64 {
    0.001
}
fn default_fraction() -> f64 {
    0.1
}
fn default_iters() -> usize {
    100
}

impl Default for PostprocessSection {
    fn default() -> Self {
        Self {
            frame_len: default_frame(),
            security_parameter: default_security(),
            sample_fraction: default_fraction(),
            max_iters: default_iters(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, RunError> {
        let cfg: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            RunError::Config(msg) => RunError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        self.state()?;
        self.bob_transmission()?;
        self.detectors()?;
        self.session().validate().map_err(|e| RunError::Config(e.to_string()))?;
        if self.timing.window_ps == 0 {
            return bad("timing.window_ps must be positive".into());
        }
        let s = &self.timing.sync;
        if s.coarse_bin == 0 || s.fine_bin == 0 || s.coarse_half_range <= 0 || s.fine_half_range <= 0 {
            return bad("timing.sync bins and ranges must be positive".into());
        }
        let p = &self.postprocess;
        if !(p.sample_fraction > 0.0 && p.sample_fraction <= 1.0) {
            return bad(format!("postprocess.sample_fraction {} outside (0, 1]", p.sample_fraction));
        }
        if p.max_iters == 0 {
            return bad("postprocess.max_iters must be positive".into());
        }
        self.postprocess_params().validate().map_err(|e| RunError::Config(format!("postprocess: {e}")))?;
        Ok(())
    }

    pub fn state(&self) -> Result<PairState, RunError> {
        PairState::new(self.source.v_hv, self.source.v_da).map_err(|e| RunError::Config(format!("source: {e}")))
    }

    pub fn channel_spec(&self) -> Result<Option<ChannelSpec>, RunError> {
        let c = &self.channel;
        let scaling = match (c.scaling, c.measured_transmission, &c.aerosol) {
            (Some(sc), _, _) => sc,
            (None, Some(t), Some(rec)) => {
                atmosphere::fit_scaling(t, rec.gamma, c.length_m, c.exponent_factor)
                    .map_err(|e| RunError::Config(format!("channel: {e}")))?
                    .scaling
                    .min(1.0)
            }
            _ => return Ok(None),
        };
        ChannelSpec::with_exponent(c.length_m, scaling, c.exponent_factor)
            .map(Some)
            .map_err(|e| RunError::Config(format!("channel: {e}")))
    }

    /// Bob's channel transmission: the measured value if given, otherwise
    /// the Beer-Lambert value from `scaling` and the aerosol record.
    pub fn bob_transmission(&self) -> Result<f64, RunError> {
        let c = &self.channel;
        if let Some(rec) = &c.aerosol {
            rec.validate().map_err(|e| RunError::Config(format!("channel.aerosol: {e}")))?;
        }
        if let Some(t) = c.measured_transmission {
            if !(0.0..=1.0).contains(&t) {
                return Err(RunError::Config(format!("channel.measured_transmission {t} outside [0, 1]")));
            }
            return Ok(t);
        }
        match (self.channel_spec()?, &c.aerosol) {
            (Some(spec), Some(rec)) => Ok(atmosphere::transmission(&spec, rec)),
            (Some(spec), None) => Ok(spec.scaling),
            _ => Err(RunError::Config(
                "channel needs measured_transmission or scaling".into(),
            )),
        }
    }

    pub fn detectors(&self) -> Result<DetectorArray, RunError> {
        let d = &self.detectors;
        let mut arr = DetectorArray::with_uniform(d.efficiency, d.dark_rate, d.jitter_ps, d.dead_time_ps);
        for o in &d.overrides {
            if o.channel >= NUM_CHANNELS {
                return Err(RunError::Config(format!("detector override for channel {} (0..=7)", o.channel)));
            }
            let ch = &mut arr.channels_mut()[o.channel];
            if let Some(v) = o.efficiency {
                ch.efficiency = v;
            }
            if let Some(v) = o.dark_rate {
                ch.dark_rate = v;
            }
            if let Some(v) = o.jitter_ps {
                ch.jitter_sigma = v;
            }
            if let Some(v) = o.dead_time_ps {
                ch.dead_time = v;
            }
        }
        arr.validate().map_err(|e| RunError::Config(format!("detectors: {e}")))?;
        Ok(arr)
    }

    /// Simulator inputs. Assumes the config has been validated.
    pub fn session(&self) -> SessionConfig {
        SessionConfig {
            pair_rate: self.source.pair_rate,
            state: self.state().unwrap_or_else(|_| PairState::ideal()),
            alice_transmission: self.alice.transmission,
            bob_transmission: self.bob_transmission().unwrap_or(0.0),
            bob_offset: self.timing.bob_offset_ps,
            duration: self.duration_s,
            rng_seed: derive_seed(self.seed, "simulate", 0),
        }
    }

    pub fn postprocess_params(&self) -> PostprocessParams {
        PostprocessParams {
            frame_len: self.postprocess.frame_len,
            security_parameter: self.postprocess.security_parameter,
            max_iters: self.postprocess.max_iters,
            seed: derive_seed(self.seed, "postprocess", 0),
        }
    }

    pub fn qber_seed(&self) -> u64 {
        derive_seed(self.seed, "qber", 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
duration_s = 1.0
[source]
pair_rate = 1000.0
v_hv = 0.9
v_da = 0.8
[channel]
length_m = 35.0
measured_transmission = 0.94
[timing]
bob_offset_ps = 120000
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.timing.window_ps, 1000);
        assert_eq!(cfg.postprocess.frame_len, 4098);
        assert_eq!(cfg.alice.transmission, 1.0);
        assert_eq!(cfg.bob_transmission().unwrap(), 0.94);
        assert_eq!(cfg.detectors().unwrap(), DetectorArray::default());
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn transmission_from_beer_lambert() {
        let text = MINIMAL.replace(
            "measured_transmission = 0.94",
            "scaling = 0.944\n[channel.aerosol]\ndate = \"d\"\ngamma = 76.41\ngamma_err = 7.78\npm25 = 2.87\npm25_err = 0.26",
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert!((cfg.bob_transmission().unwrap() - 0.94022).abs() < 5e-6);
    }

    #[test]
    fn rejects_bad_configs() {
        for (from, to) in [
            ("schema_version = 1", "schema_version = 2"),
            ("v_hv = 0.9", "v_hv = 1.2"),
            ("measured_transmission = 0.94", "measured_transmission = 1.4"),
            ("measured_transmission = 0.94", "colour = 3"),
            ("duration_s = 1.0", "duration_s = 0.0"),
            ("[timing]", "[timing]\nwindow_ps = 0"),
            ("[timing]", "[postprocess]\nframe_len = 4096\n[timing]"),
            ("[timing]", "[detectors]\n[[detectors.overrides]]\nchannel = 9\n[timing]"),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(ExperimentConfig::from_toml_str(&text).is_err(), "accepted {to}");
        }
    }

    #[test]
    fn overrides_apply() {
        let text = MINIMAL.replace("[timing]", "[detectors]\n[[detectors.overrides]]\nchannel = 6\nefficiency = 0.5\n[timing]");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let det = cfg.detectors().unwrap();
        assert_eq!(det.get(6).efficiency, 0.5);
        assert_eq!(det.get(5).efficiency, 0.6);
    }
}
