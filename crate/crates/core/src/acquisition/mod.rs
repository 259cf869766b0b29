//! Detector records: Monte-Carlo time-tag generation, waveform edge
//! extraction and time-tag files.
//!
//! Eight detectors are used, four per party. Channels 0..=3 belong to
//! Alice and 4..=7 to Bob; which basis and bit each channel measures is
//! configurable through [`DetectorArray`].

mod io;
mod simulate;
mod waveform;

pub use io::{
    read_stream, read_stream_csv, write_stream, write_stream_csv, TAG_CSV_HEADER, TAG_RECORD_LEN,
};
pub use simulate::{simulate_session, SessionConfig, SEGMENT_PS};
pub use waveform::{extract_edges, parse_waveform_csv, read_waveform_csv, WaveformTrace};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of detector channels.
pub const NUM_CHANNELS: usize = 8;

/// Picoseconds per second.
pub const PS_PER_S: f64 = 1e12;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("invalid detector set: {0}")]
    InvalidDetectors(String),
    #[error("{context}: {msg}")]
    Parse { context: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Alice,
    Bob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Rectilinear,
    Diagonal,
}

impl Basis {
    /// Analyzer angle (degrees) of the bit-0 output.
    pub fn angle(self) -> f64 {
        match self {
            Basis::Rectilinear => 0.0,
            Basis::Diagonal => 45.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Basis::Rectilinear => 0,
            Basis::Diagonal => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Basis::Rectilinear
        } else {
            Basis::Diagonal
        }
    }
}

/// Basis and bit measured by one detector: H = (rect, 0), V = (rect, 1),
/// D = (diag, 0), A = (diag, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Role {
    pub basis: Basis,
    pub bit: u8,
}

impl Role {
    pub const H: Role = Role { basis: Basis::Rectilinear, bit: 0 };
    pub const V: Role = Role { basis: Basis::Rectilinear, bit: 1 };
    pub const D: Role = Role { basis: Basis::Diagonal, bit: 0 };
    pub const A: Role = Role { basis: Basis::Diagonal, bit: 1 };

    /// H, V, D, A in that order.
    pub const ALL: [Role; 4] = [Role::H, Role::V, Role::D, Role::A];

    /// Analyzer polarization angle in degrees.
    pub fn angle(self) -> f64 {
        self.basis.angle() + 90.0 * f64::from(self.bit)
    }

    /// Position in [`Role::ALL`].
    pub fn slot(self) -> usize {
        2 * self.basis.index() + usize::from(self.bit)
    }

    pub fn label(self) -> &'static str {
        ["H", "V", "D", "A"][self.slot()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorChannel {
    pub id: u8,
    pub party: Party,
    pub role: Role,
    pub efficiency: f64,
    /// Dark counts per second.
    pub dark_rate: f64,
    /// Gaussian timing jitter, ps.
    pub jitter_sigma: f64,
    /// Non-paralyzable dead time, ps.
    pub dead_time: u64,
}

impl DetectorChannel {
    pub const DEFAULT_EFFICIENCY: f64 = 0.6;
    pub const DEFAULT_DARK_RATE: f64 = 500.0;
    pub const DEFAULT_JITTER_PS: f64 = 350.0;
    pub const DEFAULT_DEAD_TIME_PS: u64 = 22_000;

    pub fn with_defaults(id: u8, role: Role) -> Self {
        Self {
            id,
            party: if id < 4 { Party::Alice } else { Party::Bob },
            role,
            efficiency: Self::DEFAULT_EFFICIENCY,
            dark_rate: Self::DEFAULT_DARK_RATE,
            jitter_sigma: Self::DEFAULT_JITTER_PS,
            dead_time: Self::DEFAULT_DEAD_TIME_PS,
        }
    }
}

/// The eight detectors of a session, indexed by channel id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorArray {
    channels: [DetectorChannel; NUM_CHANNELS],
}

impl Default for DetectorArray {
    /// Channels 0..=3 are Alice's H, V, D, A; 4..=7 are Bob's H, V, D, A.
    fn default() -> Self {
        let channels =
            std::array::from_fn(|i| DetectorChannel::with_defaults(i as u8, Role::ALL[i % 4]));
        Self { channels }
    }
}

impl DetectorArray {
    pub fn new(channels: [DetectorChannel; NUM_CHANNELS]) -> Result<Self, AcquisitionError> {
        let arr = Self { channels };
        arr.validate()?;
        Ok(arr)
    }

    pub fn validate(&self) -> Result<(), AcquisitionError> {
        let bad = |m: String| Err(AcquisitionError::InvalidDetectors(m));
        let mut seen = [[false; 4]; 2];
        for (i, ch) in self.channels.iter().enumerate() {
            if usize::from(ch.id) != i {
                return bad(format!("channel at position {i} has id {}", ch.id));
            }
            let expected = if i < 4 { Party::Alice } else { Party::Bob };
            if ch.party != expected {
                return bad(format!("channel {i} must belong to {expected:?}"));
            }
            if ch.role.bit > 1 {
                return bad(format!("channel {i} has bit {}", ch.role.bit));
            }
            if !(0.0..=1.0).contains(&ch.efficiency) {
                return bad(format!("channel {i} efficiency {} outside [0, 1]", ch.efficiency));
            }
            if !(ch.dark_rate.is_finite() && ch.dark_rate >= 0.0) {
                return bad(format!("channel {i} dark rate {} negative", ch.dark_rate));
            }
            if !(ch.jitter_sigma.is_finite() && ch.jitter_sigma >= 0.0) {
                return bad(format!("channel {i} jitter {} negative", ch.jitter_sigma));
            }
            let slot = &mut seen[i / 4][ch.role.slot()];
            if *slot {
                return bad(format!("role {} assigned twice for {expected:?}", ch.role.label()));
            }
            *slot = true;
        }
        Ok(())
    }

    pub fn get(&self, id: usize) -> &DetectorChannel {
        &self.channels[id]
    }

    pub fn channels(&self) -> &[DetectorChannel; NUM_CHANNELS] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [DetectorChannel; NUM_CHANNELS] {
        &mut self.channels
    }

    /// Channel id of the detector with the given party and role.
    pub fn channel_for(&self, party: Party, role: Role) -> usize {
        let base = match party {
            Party::Alice => 0,
            Party::Bob => 4,
        };
        (base..base + 4)
            .find(|&i| self.channels[i].role == role)
            .expect("validated detector array covers every role")
    }

    pub fn role(&self, id: usize) -> Role {
        self.channels[id].role
    }

    /// Applies the same parameters to every channel.
    pub fn with_uniform(efficiency: f64, dark_rate: f64, jitter_sigma: f64, dead_time: u64) -> Self {
        let mut arr = Self::default();
        for ch in arr.channels.iter_mut() {
            ch.efficiency = efficiency;
            ch.dark_rate = dark_rate;
            ch.jitter_sigma = jitter_sigma;
            ch.dead_time = dead_time;
        }
        arr
    }
}

/// One detection event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeTag {
    /// Picoseconds. Declared first so the derived ordering is (time, channel).
    pub time: u64,
    pub channel: u8,
}

/// Per-channel sorted tag times.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagStreams {
    channels: [Vec<u64>; NUM_CHANNELS],
}

impl TagStreams {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Checks that each channel is strictly increasing.
    pub fn new(channels: [Vec<u64>; NUM_CHANNELS]) -> Result<Self, AcquisitionError> {
        for (i, ch) in channels.iter().enumerate() {
            if let Some(w) = ch.windows(2).position(|w| w[1] <= w[0]) {
                return Err(AcquisitionError::Parse {
                    context: format!("channel {i}"),
                    msg: format!(
                        "times not strictly increasing at index {}: {} then {}",
                        w + 1,
                        ch[w],
                        ch[w + 1]
                    ),
                });
            }
        }
        Ok(Self { channels })
    }

    pub(crate) fn from_sorted_unchecked(channels: [Vec<u64>; NUM_CHANNELS]) -> Self {
        Self { channels }
    }

    pub fn channel(&self, id: usize) -> &[u64] {
        &self.channels[id]
    }

    pub fn channels(&self) -> &[Vec<u64>; NUM_CHANNELS] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All tags ordered by (time, channel).
    pub fn merged(&self) -> Vec<TimeTag> {
        self.merged_range(0..NUM_CHANNELS)
    }

    /// Alice's tags (channels 0..=3) ordered by (time, channel).
    pub fn alice(&self) -> Vec<TimeTag> {
        self.merged_range(0..4)
    }

    /// Bob's tags (channels 4..=7) ordered by (time, channel).
    pub fn bob(&self) -> Vec<TimeTag> {
        self.merged_range(4..8)
    }

    fn merged_range(&self, range: std::ops::Range<usize>) -> Vec<TimeTag> {
        let mut out: Vec<TimeTag> = range
            .flat_map(|c| {
                self.channels[c]
                    .iter()
                    .map(move |&time| TimeTag { time, channel: c as u8 })
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Inverse of [`merged`](Self::merged). Rejects unsorted input, unknown
    /// channels and repeated times within a channel.
    pub fn from_tags(tags: &[TimeTag]) -> Result<Self, AcquisitionError> {
        let mut channels: [Vec<u64>; NUM_CHANNELS] = Default::default();
        let mut prev: Option<TimeTag> = None;
        for (i, t) in tags.iter().enumerate() {
            let ch = usize::from(t.channel);
            let fail = |msg: String| AcquisitionError::Parse { context: format!("record {i}"), msg };
            if ch >= NUM_CHANNELS {
                return Err(fail(format!("channel {} out of range", t.channel)));
            }
            if let Some(p) = prev {
                if t.time < p.time {
                    return Err(fail(format!(
                        "time {} precedes previous record time {}",
                        t.time, p.time
                    )));
                }
            }
            if let Some(&last) = channels[ch].last() {
                if t.time <= last {
                    return Err(fail(format!(
                        "channel {ch} times not strictly increasing: {last} then {}",
                        t.time
                    )));
                }
            }
            channels[ch].push(t.time);
            prev = Some(*t);
        }
        Ok(Self { channels })
    }

    /// Adds `delta` ps to every tag.
    pub fn shifted(&self, delta: u64) -> Self {
        let channels = std::array::from_fn(|c| self.channels[c].iter().map(|&t| t + delta).collect());
        Self { channels }
    }
}
