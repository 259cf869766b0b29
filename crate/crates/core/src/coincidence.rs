//! Clock-offset discovery and coincidence matching between Alice's and
//! Bob's detector records.
//!
//! All times are integer picoseconds. A delay is `t_bob − t_alice`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::acquisition::{TagStreams, TimeTag};

#[derive(Debug, Error)]
pub enum CoincidenceError {
    #[error("empty histogram range [{min}, {max})")]
    EmptyRange { min: i64, max: i64 },
    #[error("bin width must be positive")]
    ZeroBinWidth,
    #[error("histogram has no counts; cannot locate a peak")]
    NoPeak,
    #[error("coincidence window must be positive")]
    ZeroWindow,
    #[error("{context}: {msg}")]
    Parse { context: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Delay histogram with bins `[min + k·w, min + (k+1)·w)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub bin_width: u64,
    pub min_delay: i64,
    pub max_delay: i64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bin_width: u64, min_delay: i64, max_delay: i64) -> Result<Self, CoincidenceError> {
        if bin_width == 0 {
            return Err(CoincidenceError::ZeroBinWidth);
        }
        if max_delay <= min_delay {
            return Err(CoincidenceError::EmptyRange { min: min_delay, max: max_delay });
        }
        let span = (max_delay - min_delay) as u64;
        Ok(Self {
            bin_width,
            min_delay,
            max_delay,
            counts: vec![0; span.div_ceil(bin_width) as usize],
        })
    }

    pub fn bin_center(&self, k: usize) -> i64 {
        self.min_delay + (k as u64 * self.bin_width + self.bin_width / 2) as i64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn bin_of(&self, delay: i64) -> Option<usize> {
        if delay < self.min_delay || delay >= self.max_delay {
            return None;
        }
        Some(((delay - self.min_delay) as u64 / self.bin_width) as usize)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CoincidenceError> {
        let io = |source| CoincidenceError::Io { path: path.display().to_string(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut body = String::from("delay_ps,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            body.push_str(&format!("{},{}\n", self.bin_center(k), c));
        }
        w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(io)
    }
}

/// Histogram of all pairwise delays `b − a` inside `[min_delay, max_delay)`.
///
/// Both inputs must be sorted. Alice's tags are split into chunks that are
/// swept in parallel; the partial histograms are summed.
pub fn cross_histogram(
    alice: &[u64],
    bob: &[u64],
    bin_width: u64,
    range: (i64, i64),
) -> Result<Histogram, CoincidenceError> {
    let mut hist = Histogram::new(bin_width, range.0, range.1)?;
    const CHUNK: usize = 1 << 14;
    let partials: Vec<Vec<u64>> = alice
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut counts = vec![0u64; hist.counts.len()];
            // first Bob tag with b - a >= min for the first tag in the chunk
            let mut lo = bob.partition_point(|&b| (b as i64) - (chunk[0] as i64) < range.0);
            for &a in chunk {
                let a = a as i64;
                while lo < bob.len() && (bob[lo] as i64) - a < range.0 {
                    lo += 1;
                }
                for &b in &bob[lo..] {
                    let d = b as i64 - a;
                    match hist.bin_of(d) {
                        Some(k) => counts[k] += 1,
                        None => break,
                    }
                }
            }
            counts
        })
        .collect();
    for p in partials {
        for (dst, src) in hist.counts.iter_mut().zip(p) {
            *dst += src;
        }
    }
    Ok(hist)
}

/// Center of the fullest bin. Ties go to the bin whose center is closest
/// to zero delay, then to the lower bin.
pub fn find_offset(hist: &Histogram) -> Result<i64, CoincidenceError> {
    let max = hist.counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(CoincidenceError::NoPeak);
    }
    let k = (0..hist.counts.len())
        .filter(|&k| hist.counts[k] == max)
        .min_by_key(|&k| (hist.bin_center(k).unsigned_abs(), k))
        .expect("at least one bin holds the maximum");
    Ok(hist.bin_center(k))
}

/// Two-stage offset search parameters, ps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SyncParams {
    pub coarse_bin: u64,
    pub coarse_half_range: i64,
    pub fine_bin: u64,
    pub fine_half_range: i64,
}

impl Default for SyncParams {
    /// 1 ns bins over ±10 µs, then 10 ps bins over ±5 ns around the peak.
    fn default() -> Self {
        Self {
            coarse_bin: 1_000,
            coarse_half_range: 10_000_000,
            fine_bin: 10,
            fine_half_range: 5_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyncResult {
    pub coarse: Histogram,
    pub fine: Histogram,
    /// Peak of the coarse histogram.
    pub coarse_offset: i64,
    /// Peak of the fine histogram.
    pub fine_peak: i64,
    /// Background-subtracted centroid of the fine histogram, rounded to 1 ps.
    pub offset: i64,
}

/// Locates Bob's delay relative to Alice by a coarse histogram peak, then
/// refines it inside a narrow fine histogram.
///
/// The fine-stage estimate is the centroid of the fine histogram after
/// subtracting a flat accidental floor, taken as the mean of the outer
/// fifth of its bins. With jitter much wider than the fine bin the
/// argmax of the fine histogram wanders by several bins, the centroid
/// does not.
pub fn synchronize(
    alice: &[u64],
    bob: &[u64],
    params: &SyncParams,
) -> Result<SyncResult, CoincidenceError> {
    let coarse = cross_histogram(
        alice,
        bob,
        params.coarse_bin,
        (-params.coarse_half_range, params.coarse_half_range),
    )?;
    let coarse_offset = find_offset(&coarse)?;
    let fine = cross_histogram(
        alice,
        bob,
        params.fine_bin,
        (coarse_offset - params.fine_half_range, coarse_offset + params.fine_half_range),
    )?;
    let fine_peak = find_offset(&fine)?;

    let n = fine.counts.len();
    let edge = (n / 10).max(1);
    let outer: Vec<u64> = fine.counts[..edge].iter().chain(&fine.counts[n - edge..]).copied().collect();
    let floor = outer.iter().sum::<u64>() as f64 / outer.len() as f64;
    let (mut w_sum, mut wx_sum) = (0.0, 0.0);
    for (k, &c) in fine.counts.iter().enumerate() {
        let w = (c as f64 - floor).max(0.0);
        w_sum += w;
        wx_sum += w * fine.bin_center(k) as f64;
    }
    let offset = if w_sum > 0.0 { (wx_sum / w_sum).round() as i64 } else { fine_peak };
    Ok(SyncResult { coarse, fine, coarse_offset, fine_peak, offset })
}

/// A matched Alice/Bob detection pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoincidenceEvent {
    pub alice_channel: u8,
    pub bob_channel: u8,
    pub alice_time: u64,
    pub bob_time: u64,
}

impl CoincidenceEvent {
    /// `t_b − t_a − offset`.
    pub fn residual(&self, offset: i64) -> i64 {
        self.bob_time as i64 - self.alice_time as i64 - offset
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoincidenceSet {
    pub offset: i64,
    /// Full window width, ps: accepted residuals satisfy |r| ≤ window/2.
    pub window: u64,
    pub events: Vec<CoincidenceEvent>,
}

/// Greedy one-to-one matching of Alice tags to Bob tags.
///
/// Alice tags are visited in (time, channel) order. Each takes the unused
/// Bob tag with the smallest |t_b − t_a − offset| among those with
/// |t_b − t_a − offset| ≤ window/2, ties going to the earlier Bob tag in
/// (time, channel) order. Both slices must be sorted by (time, channel).
pub fn match_tags(
    alice: &[TimeTag],
    bob: &[TimeTag],
    offset: i64,
    window: u64,
) -> Result<CoincidenceSet, CoincidenceError> {
    if window == 0 {
        return Err(CoincidenceError::ZeroWindow);
    }
    let w = window as i64;
    let mut used = vec![false; bob.len()];
    let mut events = Vec::new();
    let mut lo = 0usize;
    for a in alice {
        let ta = a.time as i64;
        // 2·r ≥ −w  ⇔  r within the lower edge
        while lo < bob.len() && 2 * (bob[lo].time as i64 - ta - offset) < -w {
            lo += 1;
        }
        let mut best: Option<(i64, usize)> = None;
        for (j, b) in bob.iter().enumerate().skip(lo) {
            let r = b.time as i64 - ta - offset;
            if 2 * r > w {
                break;
            }
            if used[j] {
                continue;
            }
            if best.is_none_or(|(br, _)| r.abs() < br) {
                best = Some((r.abs(), j));
            }
        }
        if let Some((_, j)) = best {
            used[j] = true;
            events.push(CoincidenceEvent {
                alice_channel: a.channel,
                bob_channel: bob[j].channel,
                alice_time: a.time,
                bob_time: bob[j].time,
            });
        }
    }
    Ok(CoincidenceSet { offset, window, events })
}

/// [`match_tags`] over Alice's channels 0..=3 and Bob's channels 4..=7.
pub fn match_coincidences(
    streams: &TagStreams,
    offset: i64,
    window: u64,
) -> Result<CoincidenceSet, CoincidenceError> {
    match_tags(&streams.alice(), &streams.bob(), offset, window)
}

/// Coincidence counts indexed by (Alice channel, Bob channel − 4).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CountMatrix(pub [[u64; 4]; 4]);

impl CountMatrix {
    pub fn get(&self, alice_channel: usize, bob_channel: usize) -> u64 {
        self.0[alice_channel][bob_channel - 4]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }
}

pub fn count_matrix(events: &[CoincidenceEvent]) -> CountMatrix {
    let mut m = CountMatrix::default();
    for e in events {
        m.0[usize::from(e.alice_channel)][usize::from(e.bob_channel) - 4] += 1;
    }
    m
}

pub const COINCIDENCE_CSV_HEADER: &str = "alice_channel,bob_channel,alice_time_ps,bob_time_ps";

/// Writes a `# offset_ps=<o> window_ps=<w>` line, the column header and one
/// event per line.
pub fn write_coincidences(path: &Path, set: &CoincidenceSet) -> Result<(), CoincidenceError> {
    let io = |source| CoincidenceError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "# offset_ps={} window_ps={}", set.offset, set.window).map_err(io)?;
    writeln!(w, "{COINCIDENCE_CSV_HEADER}").map_err(io)?;
    for e in &set.events {
        writeln!(w, "{},{},{},{}", e.alice_channel, e.bob_channel, e.alice_time, e.bob_time)
            .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_coincidences(path: &Path) -> Result<CoincidenceSet, CoincidenceError> {
    let name = path.display().to_string();
    let io = |source| CoincidenceError::Io { path: name.clone(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut set = CoincidenceSet { offset: 0, window: 0, events: Vec::new() };
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let bad = |msg: String| CoincidenceError::Parse { context: format!("{name}:{}", idx + 1), msg };
        match idx {
            0 => {
                let meta = line
                    .strip_prefix("# ")
                    .ok_or_else(|| bad("expected `# offset_ps=.. window_ps=..`".into()))?;
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("offset_ps", v)) => {
                            set.offset = v.parse().map_err(|_| bad(format!("bad offset `{v}`")))?
                        }
                        Some(("window_ps", v)) => {
                            set.window = v.parse().map_err(|_| bad(format!("bad window `{v}`")))?
                        }
                        _ => return Err(bad(format!("unknown metadata `{kv}`"))),
                    }
                }
                if set.window == 0 {
                    return Err(bad("window_ps missing or zero".into()));
                }
            }
            1 => {
                if line.trim() != COINCIDENCE_CSV_HEADER {
                    return Err(bad(format!("expected header `{COINCIDENCE_CSV_HEADER}`")));
                }
            }
            _ if line.trim().is_empty() => {}
            _ => {
                let f: Vec<&str> = line.split(',').map(str::trim).collect();
                if f.len() != 4 {
                    return Err(bad(format!("expected 4 fields, found {}", f.len())));
                }
                let num = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("bad number `{s}`")));
                let (ac, bc) = (num(f[0])?, num(f[1])?);
                if ac > 3 || !(4..=7).contains(&bc) {
                    return Err(bad(format!("channels ({ac}, {bc}) outside Alice 0..=3 / Bob 4..=7")));
                }
                let ev = CoincidenceEvent {
                    alice_channel: ac as u8,
                    bob_channel: bc as u8,
                    alice_time: num(f[2])?,
                    bob_time: num(f[3])?,
                };
                if 2 * ev.residual(set.offset).unsigned_abs() > set.window {
                    return Err(bad("event lies outside the stated window".into()));
                }
                set.events.push(ev);
            }
        }
    }
    if set.window == 0 {
        return Err(CoincidenceError::Parse { context: name, msg: "empty file".into() });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(time: u64, channel: u8) -> TimeTag {
        TimeTag { time, channel }
    }

    #[test]
    fn empty_streams_give_zero_histogram() {
        let h = cross_histogram(&[], &[], 1000, (0, 200_000)).unwrap();
        assert_eq!(h.counts.len(), 200);
        assert_eq!(h.total(), 0);
        assert!(matches!(find_offset(&h), Err(CoincidenceError::NoPeak)));
    }

    #[test]
    fn single_pair_histogram() {
        let h = cross_histogram(&[0], &[120_000], 1000, (0, 200_000)).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.counts[120], 1);
        let off = find_offset(&h).unwrap();
        assert!((off - 120_000).abs() <= 500);
    }

    #[test]
    fn bad_ranges_rejected() {
        assert!(matches!(cross_histogram(&[], &[], 10, (5, 5)), Err(CoincidenceError::EmptyRange { .. })));
        assert!(matches!(cross_histogram(&[], &[], 0, (0, 5)), Err(CoincidenceError::ZeroBinWidth)));
    }

    #[test]
    fn histogram_length_rounds_up() {
        let h = Histogram::new(3, 0, 10).unwrap();
        assert_eq!(h.counts.len(), 4);
    }

    #[test]
    fn flat_histogram_tie_break() {
        let mut h = Histogram::new(100, -1000, 1000).unwrap();
        h.counts.iter_mut().for_each(|c| *c = 7);
        // centers are -950..950; ±50 tie, lower bin wins
        assert_eq!(find_offset(&h).unwrap(), -50);
        let mut h = Histogram::new(100, 200, 1000).unwrap();
        h.counts.iter_mut().for_each(|c| *c = 1);
        assert_eq!(find_offset(&h).unwrap(), 250);
    }

    #[test]
    fn histogram_matches_brute_force() {
        let a: Vec<u64> = (0..300).map(|i| i * 7919 % 100_000).collect::<Vec<_>>();
        let mut a = a;
        a.sort_unstable();
        let mut b: Vec<u64> = (0..400).map(|i| (i * 104_729 + 13) % 100_000).collect();
        b.sort_unstable();
        let h = cross_histogram(&a, &b, 250, (-5_000, 7_000)).unwrap();
        let mut expect = vec![0u64; h.counts.len()];
        for &x in &a {
            for &y in &b {
                let d = y as i64 - x as i64;
                if (-5_000..7_000).contains(&d) {
                    expect[((d + 5_000) / 250) as usize] += 1;
                }
            }
        }
        assert_eq!(h.counts, expect);
    }

    #[test]
    fn disjoint_streams_do_not_match() {
        let set = match_tags(&[tag(0, 0)], &[tag(10_000_000, 4)], 0, 1000).unwrap();
        assert!(set.events.is_empty());
    }

    #[test]
    fn nearest_candidate_wins() {
        let off = 120_000;
        let alice = [tag(1_000_000, 0)];
        let bob = [tag(1_000_000 + off as u64 - 200, 4), tag(1_000_000 + off as u64 + 400, 5)];
        let set = match_tags(&alice, &bob, off, 1000).unwrap();
        assert_eq!(set.events.len(), 1);
        assert_eq!(set.events[0].bob_channel, 4);
    }

    #[test]
    fn window_edges_inclusive() {
        let alice = [tag(10_000, 0), tag(20_000, 1)];
        let bob = [tag(10_500, 4), tag(20_501, 5)];
        let set = match_tags(&alice, &bob, 0, 1000).unwrap();
        assert_eq!(set.events.len(), 1);
        assert_eq!(set.events[0].bob_time, 10_500);
    }

    #[test]
    fn tags_used_once() {
        let alice = [tag(100, 0), tag(110, 1)];
        let bob = [tag(105, 4)];
        let set = match_tags(&alice, &bob, 0, 1000).unwrap();
        assert_eq!(set.events.len(), 1);
        assert_eq!(set.events[0].alice_channel, 0);
    }

    #[test]
    fn count_matrix_conserves_events() {
        assert_eq!(count_matrix(&[]).total(), 0);
        let ev = |a, b| CoincidenceEvent { alice_channel: a, bob_channel: b, alice_time: 0, bob_time: 0 };
        let m = count_matrix(&[ev(0, 4), ev(0, 4), ev(3, 6)]);
        assert_eq!(m.total(), 3);
        assert_eq!(m.get(0, 4), 2);
        assert_eq!(m.get(3, 6), 1);
    }

    #[test]
    fn coincidence_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let set = CoincidenceSet {
            offset: -3,
            window: 1000,
            events: vec![CoincidenceEvent { alice_channel: 1, bob_channel: 5, alice_time: 10, bob_time: 7 }],
        };
        write_coincidences(&p, &set).unwrap();
        assert_eq!(read_coincidences(&p).unwrap(), set);
        std::fs::write(&p, "# offset_ps=0 window_ps=10\nalice_channel,bob_channel,alice_time_ps,bob_time_ps\n0,4,0,100\n").unwrap();
        assert!(read_coincidences(&p).unwrap_err().to_string().contains(":3"));
    }
}
