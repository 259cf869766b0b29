use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AcquisitionError, DetectorArray, Party, Role, TagStreams, NUM_CHANNELS, PS_PER_S};
use crate::quantum_model::{coincidence_probability, AnalyzerSetting, PairState};

/// Length of one independently seeded simulation segment (0.1 s).
///
/// Segment `k` draws from ChaCha8 stream `k + 1` of the session seed, so
/// output does not depend on how segments are scheduled across threads.
pub const SEGMENT_PS: u64 = 100_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Entangled pairs emitted per second.
    pub pair_rate: f64,
    pub state: PairState,
    pub alice_transmission: f64,
    pub bob_transmission: f64,
    /// Fixed delay of Bob's record relative to Alice's, ps.
    pub bob_offset: i64,
    /// Seconds.
    pub duration: f64,
    pub rng_seed: u64,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), AcquisitionError> {
        let bad = |m: String| Err(AcquisitionError::InvalidConfig(m));
        if !(self.pair_rate.is_finite() && self.pair_rate >= 0.0) {
            return bad(format!("pair rate {} must be non-negative", self.pair_rate));
        }
        for (name, t) in [("alice", self.alice_transmission), ("bob", self.bob_transmission)] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("{name} transmission {t} outside [0, 1]"));
            }
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad(format!("duration {} must be positive", self.duration));
        }
        Ok(())
    }

    fn duration_ps(&self) -> u64 {
        (self.duration * PS_PER_S).round() as u64
    }
}

/// Joint outcome table: `[alice basis][bob basis]` → cumulative
/// probabilities over (alice bit, bob bit) in order 00, 01, 10, 11.
fn outcome_table(state: &PairState) -> [[[f64; 4]; 2]; 2] {
    let mut table = [[[0.0; 4]; 2]; 2];
    for (ab, row) in table.iter_mut().enumerate() {
        for (bb, cum) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..4 {
                let ra = Role { basis: super::Basis::from_index(ab), bit: (k / 2) as u8 };
                let rb = Role { basis: super::Basis::from_index(bb), bit: (k % 2) as u8 };
                acc += coincidence_probability(state, &AnalyzerSetting::new(ra.angle(), rb.angle()));
                cum[k] = acc;
            }
            cum[3] = 1.0;
        }
    }
    table
}

type Segment = [Vec<u64>; NUM_CHANNELS];

fn simulate_segment(
    config: &SessionConfig,
    detectors: &DetectorArray,
    table: &[[[f64; 4]; 2]; 2],
    index: u64,
    start: u64,
    end: u64,
) -> Segment {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(index + 1);
    let mut out: Segment = Default::default();
    let (start_f, end_f) = (start as f64, end as f64);

    let push = |out: &mut Segment, ch: usize, t: f64| {
        let t = t.round();
        if t >= 0.0 {
            out[ch].push(t as u64);
        }
    };

    if config.pair_rate > 0.0 {
        let mean_gap = PS_PER_S / config.pair_rate;
        let mut t = start_f;
        loop {
            let gap: f64 = Exp1.sample(&mut rng);
            t += gap * mean_gap;
            if t >= end_f {
                break;
            }
            let a_basis = usize::from(rng.random_bool(0.5));
            let b_basis = usize::from(rng.random_bool(0.5));
            let u: f64 = rng.random();
            let cum = &table[a_basis][b_basis];
            let k = cum.iter().position(|&c| u < c).unwrap_or(3);
            let a_role = Role { basis: super::Basis::from_index(a_basis), bit: (k / 2) as u8 };
            let b_role = Role { basis: super::Basis::from_index(b_basis), bit: (k % 2) as u8 };
            let a_ch = detectors.channel_for(Party::Alice, a_role);
            let b_ch = detectors.channel_for(Party::Bob, b_role);
            let a_hit = rng.random::<f64>() < config.alice_transmission * detectors.get(a_ch).efficiency;
            let b_hit = rng.random::<f64>() < config.bob_transmission * detectors.get(b_ch).efficiency;
            let a_jit: f64 = StandardNormal.sample(&mut rng);
            let b_jit: f64 = StandardNormal.sample(&mut rng);
            if a_hit {
                push(&mut out, a_ch, t + a_jit * detectors.get(a_ch).jitter_sigma);
            }
            if b_hit {
                let tb = t + config.bob_offset as f64 + b_jit * detectors.get(b_ch).jitter_sigma;
                push(&mut out, b_ch, tb);
            }
        }
    }

    for (ch, det) in detectors.channels().iter().enumerate() {
        if det.dark_rate <= 0.0 {
            continue;
        }
        let mean_gap = PS_PER_S / det.dark_rate;
        let mut t = start_f;
        loop {
            let gap: f64 = Exp1.sample(&mut rng);
            t += gap * mean_gap;
            if t >= end_f {
                break;
            }
            push(&mut out, ch, t);
        }
    }
    out
}

/// Keeps a tag only if it is later than the previous kept tag by at least
/// `dead_time` (and strictly later in any case).
fn enforce_dead_time(times: &mut Vec<u64>, dead_time: u64) {
    let mut last: Option<u64> = None;
    times.retain(|&t| match last {
        Some(prev) if t <= prev || t - prev < dead_time => false,
        _ => {
            last = Some(t);
            true
        }
    });
}

/// Generates the eight detector streams of one session.
///
/// Pairs are emitted as a Poisson process; each photon independently picks
/// a basis with a 50/50 beamsplitter, the joint outcome is drawn from the
/// pair state, and each side survives its transmission × detector
/// efficiency. Bob's tags are delayed by `bob_offset`, jitter and dark
/// counts are added, then dead time is applied per channel.
pub fn simulate_session(
    config: &SessionConfig,
    detectors: &DetectorArray,
) -> Result<TagStreams, AcquisitionError> {
    config.validate()?;
    detectors.validate()?;
    let table = outcome_table(&config.state);
    let total = config.duration_ps();
    let n_segments = total.div_ceil(SEGMENT_PS);

    let segments: Vec<Segment> = (0..n_segments)
        .into_par_iter()
        .map(|k| {
            let start = k * SEGMENT_PS;
            let end = ((k + 1) * SEGMENT_PS).min(total);
            simulate_segment(config, detectors, &table, k, start, end)
        })
        .collect();

    let mut channels: [Vec<u64>; NUM_CHANNELS] = Default::default();
    for seg in segments {
        for (dst, src) in channels.iter_mut().zip(seg) {
            dst.extend(src);
        }
    }
    channels.par_iter_mut().enumerate().for_each(|(ch, times)| {
        times.sort_unstable();
        enforce_dead_time(times, detectors.get(ch).dead_time);
    });
    Ok(TagStreams::from_sorted_unchecked(channels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::DetectorChannel;

    fn base_config() -> SessionConfig {
        SessionConfig {
            pair_rate: 0.0,
            state: PairState::ideal(),
            alice_transmission: 1.0,
            bob_transmission: 1.0,
            bob_offset: 0,
            duration: 1.0,
            rng_seed: 1,
        }
    }

    #[test]
    fn zero_rates_give_empty_streams() {
        let det = DetectorArray::with_uniform(0.6, 0.0, 0.0, 0);
        let s = simulate_session(&base_config(), &det).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn dark_counts_are_poisson() {
        let det = DetectorArray::with_uniform(0.6, 1000.0, 0.0, DetectorChannel::DEFAULT_DEAD_TIME_PS);
        let mut counts = Vec::new();
        for seed in 0..100 {
            let cfg = SessionConfig { rng_seed: seed, ..base_config() };
            let s = simulate_session(&cfg, &det).unwrap();
            counts.extend((0..NUM_CHANNELS).map(|ch| s.channel(ch).len() as f64));
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<f64>() / n;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // pooled mean σ = √(1000/800); sample variance σ ≈ 1000·√(2/799)
        assert!((mean - 1000.0).abs() < 4.0 * (1000.0 / n).sqrt(), "mean {mean}");
        assert!((var - 1000.0).abs() < 4.0 * 1000.0 * (2.0 / (n - 1.0)).sqrt(), "variance {var}");
    }

    #[test]
    fn bob_tags_follow_alice_by_offset() {
        let det = DetectorArray::with_uniform(1.0, 0.0, 0.0, 0);
        let cfg = SessionConfig {
            pair_rate: 20_000.0,
            bob_offset: 666_000,
            duration: 0.25,
            ..base_config()
        };
        let s = simulate_session(&cfg, &det).unwrap();
        let a = s.alice();
        let b = s.bob();
        assert!(a.len() > 4000);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(y.time - x.time, 666_000);
            // same basis ⇒ same outcome for the ideal state
            if x.channel / 2 == (y.channel - 4) / 2 {
                assert_eq!(x.channel + 4, y.channel);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let det = DetectorArray::default();
        let cfg = SessionConfig { pair_rate: 30_000.0, duration: 0.35, ..base_config() };
        let a = simulate_session(&cfg, &det).unwrap();
        let b = simulate_session(&cfg, &det).unwrap();
        assert_eq!(a, b);
        let c = simulate_session(&SessionConfig { rng_seed: 2, ..cfg }, &det).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dead_time_enforced() {
        let det = DetectorArray::with_uniform(1.0, 2_000_000.0, 0.0, 22_000);
        let cfg = SessionConfig { duration: 0.01, ..base_config() };
        let s = simulate_session(&cfg, &det).unwrap();
        for ch in s.channels() {
            assert!(!ch.is_empty());
            assert!(ch.windows(2).all(|w| w[1] - w[0] >= 22_000));
        }
    }

    #[test]
    fn dead_time_filter_keeps_first_of_burst() {
        let mut v = vec![0, 10, 25, 30, 60, 60];
        enforce_dead_time(&mut v, 20);
        assert_eq!(v, vec![0, 25, 60]);
        let mut v = vec![1, 1, 2];
        enforce_dead_time(&mut v, 0);
        assert_eq!(v, vec![1, 2]);
    }

    #[test]
    fn rejects_bad_config() {
        let det = DetectorArray::default();
        assert!(simulate_session(&SessionConfig { duration: 0.0, ..base_config() }, &det).is_err());
        assert!(simulate_session(&SessionConfig { bob_transmission: 1.5, ..base_config() }, &det).is_err());
        assert!(simulate_session(&SessionConfig { pair_rate: -1.0, ..base_config() }, &det).is_err());
    }
}
