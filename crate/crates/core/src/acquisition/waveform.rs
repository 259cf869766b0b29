use std::io::BufRead;
use std::path::Path;

use super::{AcquisitionError, PS_PER_S};

/// Sampled detector output voltage, e.g. one oscilloscope channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformTrace {
    /// Samples per second.
    pub sample_rate: f64,
    pub samples: Vec<f64>,
    pub threshold: f64,
}

/// Arrival times (ps) of the rising edges in a trace.
///
/// An edge is emitted at sample `i` when sample `i − 1` is below the
/// threshold and sample `i` is at or above it; its time is `i / sample_rate`.
/// The first sample has no predecessor and never produces an edge.
pub fn extract_edges(trace: &WaveformTrace) -> Vec<u64> {
    let period_ps = PS_PER_S / trace.sample_rate;
    trace
        .samples
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] < trace.threshold && w[1] >= trace.threshold)
        .map(|(i, _)| ((i + 1) as f64 * period_ps).round() as u64)
        .collect()
}

/// Parses a waveform CSV: a `sample_rate_hz=<value>` line followed by one
/// voltage per line.
pub fn parse_waveform_csv<R: BufRead>(
    reader: R,
    name: &str,
    threshold: f64,
) -> Result<WaveformTrace, AcquisitionError> {
    let err = |line: usize, msg: String| AcquisitionError::Parse {
        context: format!("{name}:{line}"),
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l.map_err(|source| AcquisitionError::Io { path: name.into(), source })?,
        None => return Err(err(1, "empty waveform file".into())),
    };
    let rate_str = header
        .trim()
        .strip_prefix("sample_rate_hz=")
        .ok_or_else(|| err(1, "expected `sample_rate_hz=<value>` header".into()))?;
    let sample_rate: f64 = rate_str
        .trim()
        .parse()
        .map_err(|_| err(1, format!("bad sample rate `{rate_str}`")))?;
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(err(1, format!("sample rate must be positive, got {sample_rate}")));
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|source| AcquisitionError::Io { path: name.into(), source })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| err(idx + 1, format!("bad voltage `{line}`")))?;
        samples.push(v);
    }
    Ok(WaveformTrace { sample_rate, samples, threshold })
}

pub fn read_waveform_csv(path: &Path, threshold: f64) -> Result<WaveformTrace, AcquisitionError> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path)
        .map_err(|source| AcquisitionError::Io { path: name.clone(), source })?;
    parse_waveform_csv(std::io::BufReader::new(file), &name, threshold)
}
