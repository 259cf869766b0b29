//! Configuration-driven pipeline:
//! simulate → synchronize → match → sift → estimate → reconcile → amplify.
//!
//! Every stage is a public function over in-memory values so the CLI can run
//! the same code one stage at a time over intermediate files.

pub mod config;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ExperimentConfig, SCHEMA_VERSION};

use crate::acquisition::{simulate_session, write_stream, AcquisitionError, DetectorArray, Party, Role, TagStreams};
use crate::atmosphere::AtmosphereError;
use crate::coincidence::{
    count_matrix, match_coincidences, synchronize, write_coincidences, CoincidenceError, CoincidenceSet, SyncParams,
    SyncResult,
};
use crate::postprocess::{encode_key, run_postprocessing, PostprocessError, PostprocessOutput, PostprocessStats};
use crate::quantum_model::visibility_curve;
use crate::report::KeyRateReport;
use crate::seed::derive_seed;
use crate::sifting::{
    basis_visibilities, chsh_from_visibilities, correct_coincidence_rate, estimate_qber, fit_visibility_curve,
    sift, sifted_rate, visibility_from_counts, write_sifted_csv, AnalysisError, CurvePoint, SiftedKeyPair,
    VisibilityFit,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Acquisition {
        stage: &'static str,
        #[source]
        source: AcquisitionError,
    },
    #[error("{stage}: {source}")]
    Coincidence {
        stage: &'static str,
        #[source]
        source: CoincidenceError,
    },
    #[error("{stage}: {source}")]
    Analysis {
        stage: &'static str,
        #[source]
        source: AnalysisError,
    },
    #[error("{stage}: {source}")]
    Postprocess {
        stage: &'static str,
        #[source]
        source: PostprocessError,
    },
    #[error("{stage}: {source}")]
    Atmosphere {
        stage: &'static str,
        #[source]
        source: AtmosphereError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

/// What the post-processing stage hands to the report: the QBER estimate
/// and the frame statistics. Serialized as `postprocess.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PostprocessSummary {
    pub qber: Option<f64>,
    pub qber_sample: usize,
    pub qber_errors: usize,
    pub stats: PostprocessStats,
}

impl PostprocessSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn read(path: &Path) -> Result<Self, RunError> {
        let name = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| RunError::Io { path: name.clone(), source })?;
        serde_json::from_str(&text).map_err(|e| RunError::Format { path: name, msg: e.to_string() })
    }
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<TagStreams, RunError> {
    let det = cfg.detectors()?;
    simulate_session(&cfg.session(), &det).map_err(|source| RunError::Acquisition { stage: "simulate", source })
}

fn times(tags: &[crate::acquisition::TimeTag]) -> Vec<u64> {
    tags.iter().map(|t| t.time).collect()
}

/// Offset search over all of Alice's tags against all of Bob's.
pub fn synchronize_streams(streams: &TagStreams, params: &SyncParams) -> Result<SyncResult, RunError> {
    synchronize(&times(&streams.alice()), &times(&streams.bob()), params)
        .map_err(|source| RunError::Coincidence { stage: "synchronize", source })
}

pub fn match_stage(streams: &TagStreams, offset: i64, window: u64) -> Result<CoincidenceSet, RunError> {
    match_coincidences(streams, offset, window).map_err(|source| RunError::Coincidence { stage: "match", source })
}

/// QBER sample, its removal, then EC / verification / PA.
pub fn postprocess_stage(
    cfg: &ExperimentConfig,
    pair: &SiftedKeyPair,
) -> Result<(PostprocessSummary, PostprocessOutput), RunError> {
    let params = cfg.postprocess_params();
    if pair.is_empty() {
        let out = run_postprocessing(pair, 0.0, &params)
            .map_err(|source| RunError::Postprocess { stage: "postprocess", source })?;
        return Ok((PostprocessSummary::default(), out));
    }
    let est = estimate_qber(pair, cfg.postprocess.sample_fraction, cfg.qber_seed())
        .map_err(|source| RunError::Analysis { stage: "estimate", source })?;
    let rest = pair.without_positions(&est.disclosed);
    let out = run_postprocessing(&rest, est.qber, &params)
        .map_err(|source| RunError::Postprocess { stage: "postprocess", source })?;
    let summary = PostprocessSummary {
        qber: Some(est.qber),
        qber_sample: est.sample_size,
        qber_errors: est.errors,
        stats: out.stats.clone(),
    };
    Ok((summary, out))
}

/// Builds the session report from the coincidences and the post-processing
/// summary. Both the in-memory pipeline and the file-based CLI stages end
/// here, so their reports agree byte for byte.
pub fn assemble_report(
    cfg: &ExperimentConfig,
    set: &CoincidenceSet,
    det: &DetectorArray,
    summary: &PostprocessSummary,
) -> KeyRateReport {
    let duration = cfg.duration_s;
    if set.events.is_empty() {
        let mut r = KeyRateReport::empty(&cfg.label, duration, "no coincidences in the window");
        r.offset_ps = Some(set.offset);
        r.window_ps = Some(set.window);
        r.channel_transmission = cfg.bob_transmission().ok();
        return r;
    }
    let counts = count_matrix(&set.events);
    let (v_hv, v_da) = match visibility_from_counts(&counts, det) {
        Ok((a, b)) => (Some(a), Some(b)),
        Err(_) => (None, None),
    };
    let cc = correct_coincidence_rate(&counts, det, duration);
    let stats = &summary.stats;
    let mut r = KeyRateReport {
        label: cfg.label.clone(),
        duration,
        channel_transmission: cfg.bob_transmission().ok(),
        offset_ps: Some(set.offset),
        window_ps: Some(set.window),
        coincidences: set.events.len() as u64,
        counts,
        v_hv,
        v_da,
        basis_visibilities: basis_visibilities(&counts, det).ok(),
        mean_visibility: v_hv.zip(v_da).map(|(a, b)| (a + b) / 2.0),
        chsh_s: v_hv.zip(v_da).map(|(a, b)| chsh_from_visibilities(a, b)),
        qber: summary.qber,
        qber_sample: summary.qber_sample,
        cc_rate: cc,
        sifted_rate: sifted_rate(cc),
        after_ec_rate: stats.reconciled_bits as f64 / duration,
        after_ec_disclosed_rate: stats.net_reconciled_bits() as f64 / duration,
        after_pa_rate: stats.secure_bits as f64 / duration,
        secure_rate: stats.secure_bits as f64 / duration,
        postprocess: Some(stats.clone()),
        diagnostics: Vec::new(),
    };
    if stats.frames > 0 && stats.frames_ok == 0 {
        r.diagnostics.push(format!("all {} frames failed reconciliation; secure key is empty", stats.frames));
    } else if stats.decode_failure_dominated() {
        r.diagnostics.push(format!("{} of {} frames failed to decode", stats.decode_failures, stats.frames));
    }
    if stats.undetected_errors > 0 {
        r.diagnostics.push(format!("{} frames passed verification with residual errors", stats.undetected_errors));
    }
    for v in r.validate() {
        r.diagnostics.push(format!("rate ordering: {v}"));
    }
    r
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: KeyRateReport,
    pub streams: TagStreams,
    pub sync: Option<SyncResult>,
    pub coincidences: CoincidenceSet,
    pub sifted: SiftedKeyPair,
    pub summary: PostprocessSummary,
    pub keys: PostprocessOutput,
}

/// The whole pipeline in memory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let det = cfg.detectors()?;
    let streams = simulate(cfg)?;
    let (sync, coincidences) = if streams.alice().is_empty() || streams.bob().is_empty() {
        (None, CoincidenceSet { offset: 0, window: cfg.timing.window_ps, events: Vec::new() })
    } else {
        let sync = synchronize_streams(&streams, &cfg.timing.sync)?;
        let set = match_stage(&streams, sync.offset, cfg.timing.window_ps)?;
        (Some(sync), set)
    };
    let sifted = sift(&coincidences.events, &det);
    let (summary, keys) = postprocess_stage(cfg, &sifted)?;
    let report = assemble_report(cfg, &coincidences, &det, &summary);
    Ok(RunOutput { report, streams, sync, coincidences, sifted, summary, keys })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    fs::write(path, bytes).map_err(|source| RunError::Io { path: path.display().to_string(), source })
}

/// Writes `report.txt`, `report.json`, `tags.bin`, `histogram.csv` (fine
/// stage), `histogram_coarse.csv`, `coincidences.csv`, `sifted.csv`,
/// `postprocess.json` and the sifted and secure key files.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.display().to_string(), source })?;
    write_file(&dir.join("report.txt"), out.report.render_text().as_bytes())?;
    write_file(&dir.join("report.json"), out.report.to_json().as_bytes())?;
    write_stream(&dir.join("tags.bin"), &out.streams)
        .map_err(|source| RunError::Acquisition { stage: "write tags", source })?;
    if let Some(sync) = &out.sync {
        let hist = |source| RunError::Coincidence { stage: "write histogram", source };
        sync.fine.write_csv(&dir.join("histogram.csv")).map_err(hist)?;
        sync.coarse.write_csv(&dir.join("histogram_coarse.csv")).map_err(hist)?;
    }
    write_coincidences(&dir.join("coincidences.csv"), &out.coincidences)
        .map_err(|source| RunError::Coincidence { stage: "write coincidences", source })?;
    write_sifted_csv(&dir.join("sifted.csv"), &out.sifted)
        .map_err(|source| RunError::Analysis { stage: "write sifted key", source })?;
    write_file(&dir.join("postprocess.json"), out.summary.to_json().as_bytes())?;
    write_file(&dir.join("alice_sifted.key"), &encode_key(&out.sifted.alice))?;
    write_file(&dir.join("bob_sifted.key"), &encode_key(&out.sifted.bob))?;
    write_file(&dir.join("alice_secure.key"), &encode_key(&out.keys.alice_key))?;
    write_file(&dir.join("bob_secure.key"), &encode_key(&out.keys.bob_key))?;
    Ok(())
}

/// Runs the pipeline and, if `out_dir` is given, writes every artifact.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutput, RunError> {
    let out = run_pipeline(cfg)?;
    if let Some(dir) = out_dir {
        write_artifacts(&out, dir)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityScan {
    /// (Bob angle in degrees, expected coincidences per second).
    pub curve: Vec<(f64, f64)>,
    /// Poisson-sampled counts and their fit, when an exposure was given.
    pub counts: Vec<CurvePoint>,
    pub fit: Option<VisibilityFit>,
}

/// Expected coincidence rate behind single polarizers as Bob's analyzer
/// turns through 0..=180° in `step` degrees with Alice's fixed at
/// `alice_angle`. The rate scale is pair rate × both transmissions × both
/// channel-0/4 efficiencies.
pub fn visibility_scan(
    cfg: &ExperimentConfig,
    alice_angle: f64,
    step: f64,
    exposure: Option<f64>,
) -> Result<VisibilityScan, RunError> {
    if !(step > 0.0 && step <= 90.0) {
        return Err(RunError::Config(format!("scan step {step} outside (0, 90]")));
    }
    let det = cfg.detectors()?;
    let eta = det.get(det.channel_for(Party::Alice, Role::H)).efficiency
        * det.get(det.channel_for(Party::Bob, Role::H)).efficiency;
    let scale = cfg.source.pair_rate * cfg.alice.transmission * cfg.bob_transmission()? * eta;
    let n = (180.0 / step).floor() as usize;
    let thetas: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
    let rates = visibility_curve(&cfg.state()?, alice_angle, &thetas, scale);
    let curve: Vec<(f64, f64)> = thetas.iter().copied().zip(rates).collect();
    let (counts, fit) = match exposure {
        None => (Vec::new(), None),
        Some(e) => {
            if !(e > 0.0) {
                return Err(RunError::Config(format!("exposure {e} must be positive")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "scan", alice_angle.to_bits()));
            let points: Vec<CurvePoint> = curve
                .iter()
                .map(|&(theta, rate)| {
                    let mu = rate * e;
                    let counts = if mu > 0.0 { Poisson::new(mu).expect("positive mean").sample(&mut rng) } else { 0.0 };
                    CurvePoint { theta, counts, exposure: e }
                })
                .collect();
            let fit = fit_visibility_curve(&points).map_err(|source| RunError::Analysis { stage: "fit", source })?;
            (points, Some(fit))
        }
    };
    Ok(VisibilityScan { curve, counts, fit })
}
