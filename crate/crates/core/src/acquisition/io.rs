//! Time-tag files.
//!
//! Binary layout: a flat sequence of 16-byte records sorted by time,
//!
//! ```text
//! offset 0      u8   channel (0..=7)
//! offset 1..8        zero padding
//! offset 8..16  u64  time in ps, little-endian
//! ```
//!
//! The CSV debug format has a `channel,time_ps` header and one tag per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AcquisitionError, TagStreams, TimeTag};

pub const TAG_RECORD_LEN: usize = 16;
pub const TAG_CSV_HEADER: &str = "channel,time_ps";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AcquisitionError + '_ {
    move |source| AcquisitionError::Io { path: path.display().to_string(), source }
}

pub fn write_stream(path: &Path, streams: &TagStreams) -> Result<(), AcquisitionError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut rec = [0u8; TAG_RECORD_LEN];
    for tag in streams.merged() {
        rec[0] = tag.channel;
        rec[8..].copy_from_slice(&tag.time.to_le_bytes());
        w.write_all(&rec).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_stream(path: &Path) -> Result<TagStreams, AcquisitionError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_records(&bytes, &path.display().to_string())
}

fn decode_records(bytes: &[u8], name: &str) -> Result<TagStreams, AcquisitionError> {
    if bytes.len() % TAG_RECORD_LEN != 0 {
        return Err(AcquisitionError::Parse {
            context: format!("{name}@{}", bytes.len() - bytes.len() % TAG_RECORD_LEN),
            msg: format!("truncated record: file length {} is not a multiple of 16", bytes.len()),
        });
    }
    let mut tags = Vec::with_capacity(bytes.len() / TAG_RECORD_LEN);
    for (i, rec) in bytes.chunks_exact(TAG_RECORD_LEN).enumerate() {
        let offset = i * TAG_RECORD_LEN;
        if rec[1..8].iter().any(|&b| b != 0) {
            return Err(AcquisitionError::Parse {
                context: format!("{name}@{offset}"),
                msg: "nonzero padding bytes".into(),
            });
        }
        let time = u64::from_le_bytes(rec[8..].try_into().expect("8-byte slice"));
        tags.push(TimeTag { time, channel: rec[0] });
    }
    TagStreams::from_tags(&tags).map_err(|e| locate(e, name))
}

/// Rewrites a `record N` context into a byte offset within the file.
fn locate(err: AcquisitionError, name: &str) -> AcquisitionError {
    match err {
        AcquisitionError::Parse { context, msg } => {
            let context = match context.strip_prefix("record ").and_then(|n| n.parse::<usize>().ok()) {
                Some(n) => format!("{name}@{}", n * TAG_RECORD_LEN),
                None => format!("{name} ({context})"),
            };
            AcquisitionError::Parse { context, msg }
        }
        other => other,
    }
}

pub fn write_stream_csv(path: &Path, streams: &TagStreams) -> Result<(), AcquisitionError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{TAG_CSV_HEADER}").map_err(io_err(path))?;
    for tag in streams.merged() {
        writeln!(w, "{},{}", tag.channel, tag.time).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_stream_csv(path: &Path) -> Result<TagStreams, AcquisitionError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(io_err(path))?;
    let mut tags = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = idx + 1;
        let bad = |msg: String| AcquisitionError::Parse { context: format!("{name}:{lineno}"), msg };
        if idx == 0 {
            if line.trim() != TAG_CSV_HEADER {
                return Err(bad(format!("expected header `{TAG_CSV_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (c, t) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("expected `channel,time_ps`, got `{line}`")))?;
        let channel: u8 = c.trim().parse().map_err(|_| bad(format!("bad channel `{c}`")))?;
        let time: u64 = t.trim().parse().map_err(|_| bad(format!("bad time `{t}`")))?;
        tags.push((lineno, TimeTag { time, channel }));
    }
    let plain: Vec<TimeTag> = tags.iter().map(|(_, t)| *t).collect();
    TagStreams::from_tags(&plain).map_err(|e| match e {
        AcquisitionError::Parse { context, msg } => {
            let line = context
                .strip_prefix("record ")
                .and_then(|n| n.parse::<usize>().ok())
                .map(|n| tags[n].0);
            match line {
                Some(l) => AcquisitionError::Parse { context: format!("{name}:{l}"), msg },
                None => AcquisitionError::Parse { context: format!("{name} ({context})"), msg },
            }
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_streams(n: usize, seed: u64) -> TagStreams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chans: [Vec<u64>; 8] = Default::default();
        for _ in 0..n {
            chans[rng.random_range(0..8)].push(rng.random_range(0..u64::MAX / 2));
        }
        for c in chans.iter_mut() {
            c.sort_unstable();
            c.dedup();
        }
        TagStreams::new(chans).unwrap()
    }

    #[test]
    fn empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        write_stream(&p, &TagStreams::empty()).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 0);
        assert_eq!(read_stream(&p).unwrap(), TagStreams::empty());
    }

    #[test]
    fn million_tags_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let s = random_streams(1_000_000, 3);
        write_stream(&p, &s).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, s.len() * 16);
        assert_eq!(read_stream(&p).unwrap(), s);
    }

    #[test]
    fn record_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.bin");
        let mut chans: [Vec<u64>; 8] = Default::default();
        chans[5].push(0x0102_0304_0506_0708);
        write_stream(&p, &TagStreams::new(chans).unwrap()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes, [5, 0, 0, 0, 0, 0, 0, 0, 8, 7, 6, 5, 4, 3, 2, 1]);
    }

    fn rec(ch: u8, t: u64) -> Vec<u8> {
        let mut r = vec![ch, 0, 0, 0, 0, 0, 0, 0];
        r.extend_from_slice(&t.to_le_bytes());
        r
    }

    #[test]
    fn malformed_binary_rejected() {
        // repeated time on one channel
        let bytes = [rec(1, 10), rec(1, 10)].concat();
        let e = decode_records(&bytes, "f").unwrap_err().to_string();
        assert!(e.contains("f@16"), "{e}");
        // not sorted by time
        let bytes = [rec(1, 10), rec(2, 5)].concat();
        assert!(decode_records(&bytes, "f").is_err());
        // truncated
        let mut bytes = rec(1, 10);
        bytes.pop();
        assert!(decode_records(&bytes, "f").unwrap_err().to_string().contains("truncated"));
        // bad channel and padding
        assert!(decode_records(&rec(9, 1), "f").is_err());
        let mut bytes = rec(1, 1);
        bytes[3] = 1;
        assert!(decode_records(&bytes, "f").unwrap_err().to_string().contains("padding"));
    }

    #[test]
    fn csv_non_monotonic_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "channel,time_ps\n0,100\n1,150\n0,90\n").unwrap();
        let e = read_stream_csv(&p).unwrap_err().to_string();
        assert!(e.contains(":4"), "{e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn binary_and_csv_round_trip(n in 0usize..2000, seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let s = random_streams(n, seed);
            let b = dir.path().join("s.bin");
            let c = dir.path().join("s.csv");
            write_stream(&b, &s).unwrap();
            write_stream_csv(&c, &s).unwrap();
            prop_assert_eq!(read_stream(&b).unwrap(), s.clone());
            prop_assert_eq!(read_stream_csv(&c).unwrap(), s);
        }
    }
}
