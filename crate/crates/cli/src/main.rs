use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bbm92::acquisition::{
    read_stream, read_stream_csv, read_waveform_csv, extract_edges, write_stream, write_stream_csv, TagStreams,
    NUM_CHANNELS,
};
use bbm92::atmosphere::{day_factor, predict_rates};
use bbm92::coincidence::{read_coincidences, write_coincidences, CoincidenceSet};
use bbm92::postprocess::write_key;
use bbm92::runner::{
    assemble_report, match_stage, postprocess_stage, run_experiment, simulate, synchronize_streams,
    visibility_scan, ExperimentConfig, PostprocessSummary, RunError,
};
use bbm92::sifting::{read_sifted_csv, sift, write_sifted_csv};
use bbm92::KeyRateReport;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DECODE: u8 = 4;

#[derive(Parser)]
#[command(name = "bbm92", version, about = "BBM92 link simulation and key post-processing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline from a config file; writes every artifact.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate time tags for a config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write `channel,time_ps` CSV instead of the binary format.
        #[arg(long)]
        csv: bool,
    },
    /// Convert digitized detector waveforms to a tag file.
    Ingest {
        /// `CHANNEL=FILE` pairs, channel 0..=7.
        #[arg(required = true)]
        traces: Vec<String>,
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Locate Bob's clock offset by cross-correlation.
    FindOffset {
        #[command(flatten)]
        tags: TagInput,
        /// Takes the sync search parameters from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dump the fine histogram as `delay_ps,count`.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Pair Alice and Bob tags into coincidences.
    Match {
        #[command(flatten)]
        tags: TagInput,
        #[arg(long, allow_hyphen_values = true)]
        offset_ps: i64,
        #[arg(long, default_value_t = 1000)]
        window_ps: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep same-basis coincidences as the sifted key.
    Sift {
        #[arg(long)]
        coincidences: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// QBER estimation, error correction and privacy amplification.
    Postprocess {
        #[arg(long)]
        sifted: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Receives postprocess.json and the secure key files.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Expected coincidence rate as Bob's analyzer turns.
    VisibilityScan {
        #[arg(long)]
        config: PathBuf,
        /// Alice's polarizer angle, degrees.
        #[arg(long, conflicts_with = "hwp", allow_hyphen_values = true)]
        alice_angle: Option<f64>,
        /// Alice's half-wave plate angle, degrees (rotates polarization by twice this).
        #[arg(long, allow_hyphen_values = true)]
        hwp: Option<f64>,
        #[arg(long, default_value_t = 5.0)]
        step: f64,
        /// Also draw Poisson counts for this exposure (s) and fit them.
        #[arg(long)]
        exposure: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scale a report's rates to another channel.
    Predict {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, conflicts_with_all = ["from", "to"])]
        factor: Option<f64>,
        /// Reference-channel config (its channel and aerosol record).
        #[arg(long, requires = "to")]
        from: Option<PathBuf>,
        #[arg(long, requires = "from")]
        to: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assemble the session report from intermediate files.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        coincidences: PathBuf,
        #[arg(long)]
        postprocess: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TagInput {
    #[arg(long)]
    tags: PathBuf,
    /// Read the tags as `channel,time_ps` CSV.
    #[arg(long)]
    csv: bool,
}

impl TagInput {
    fn load(&self) -> Result<TagStreams, Failure> {
        if self.csv { read_stream_csv(&self.tags) } else { read_stream(&self.tags) }.map_err(Failure::data)
    }
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_USAGE, msg: e.to_string() }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_DATA, msg: e.to_string() }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) => Failure::usage(e),
            other => Failure::data(other),
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::load(path)?)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))
}

fn decode_status(report: &KeyRateReport) -> u8 {
    match &report.postprocess {
        Some(stats) if stats.decode_failure_dominated() => EXIT_DECODE,
        _ => 0,
    }
}

fn execute(cmd: Command) -> Result<u8, Failure> {
    match cmd {
        Command::Run { config, out_dir } => {
            let cfg = load_config(&config)?;
            let out = run_experiment(&cfg, Some(&out_dir))?;
            print!("{}", out.report.render_text());
            Ok(decode_status(&out.report))
        }
        Command::Simulate { config, out, csv } => {
            let cfg = load_config(&config)?;
            let streams = simulate(&cfg)?;
            if csv { write_stream_csv(&out, &streams) } else { write_stream(&out, &streams) }.map_err(Failure::data)?;
            println!("wrote {} tags to {}", streams.len(), out.display());
            Ok(0)
        }
        Command::Ingest { traces, threshold, out } => {
            let mut channels: [Vec<u64>; NUM_CHANNELS] = Default::default();
            for spec in &traces {
                let (ch, file) = spec
                    .split_once('=')
                    .ok_or_else(|| Failure::usage(format!("expected CHANNEL=FILE, got `{spec}`")))?;
                let ch: usize = ch
                    .parse()
                    .ok()
                    .filter(|&c| c < NUM_CHANNELS)
                    .ok_or_else(|| Failure::usage(format!("channel `{ch}` is not in 0..=7")))?;
                let trace = read_waveform_csv(Path::new(file), threshold).map_err(Failure::data)?;
                channels[ch].extend(extract_edges(&trace));
            }
            for c in channels.iter_mut() {
                c.sort_unstable();
                c.dedup();
            }
            let streams = TagStreams::new(channels).map_err(Failure::data)?;
            write_stream(&out, &streams).map_err(Failure::data)?;
            println!("wrote {} tags to {}", streams.len(), out.display());
            Ok(0)
        }
        Command::FindOffset { tags, config, histogram } => {
            let streams = tags.load()?;
            let params = match config {
                Some(p) => load_config(&p)?.timing.sync,
                None => Default::default(),
            };
            let sync = synchronize_streams(&streams, &params)?;
            if let Some(h) = histogram {
                sync.fine.write_csv(&h).map_err(Failure::data)?;
            }
            println!("coarse_offset_ps={}", sync.coarse_offset);
            println!("fine_peak_ps={}", sync.fine_peak);
            println!("offset_ps={}", sync.offset);
            println!("offset_ns={:.3}", sync.offset as f64 / 1e3);
            Ok(0)
        }
        Command::Match { tags, offset_ps, window_ps, out } => {
            let streams = tags.load()?;
            let set = match_stage(&streams, offset_ps, window_ps)?;
            write_coincidences(&out, &set).map_err(Failure::data)?;
            println!("{} coincidences", set.events.len());
            Ok(0)
        }
        Command::Sift { coincidences, config, out } => {
            let cfg = load_config(&config)?;
            let set = read_coincidences(&coincidences).map_err(Failure::data)?;
            let pair = sift(&set.events, &cfg.detectors()?);
            write_sifted_csv(&out, &pair).map_err(Failure::data)?;
            println!("{} sifted bits, {} mismatches", pair.len(), pair.mismatches());
            Ok(0)
        }
        Command::Postprocess { sifted, config, out_dir } => {
            let cfg = load_config(&config)?;
            let pair = read_sifted_csv(&sifted).map_err(Failure::data)?;
            let (summary, keys) = postprocess_stage(&cfg, &pair)?;
            create_dir(&out_dir)?;
            write(&out_dir.join("postprocess.json"), &summary.to_json())?;
            write_key(&out_dir.join("alice_secure.key"), &keys.alice_key).map_err(Failure::data)?;
            write_key(&out_dir.join("bob_secure.key"), &keys.bob_key).map_err(Failure::data)?;
            let s = &summary.stats;
            println!(
                "qber={} frames={} ok={} decode_failures={} verify_failures={} secure_bits={}",
                summary.qber.map_or("n/a".into(), |q| format!("{q:.5}")),
                s.frames,
                s.frames_ok,
                s.decode_failures,
                s.verify_failures,
                s.secure_bits
            );
            Ok(if s.decode_failure_dominated() { EXIT_DECODE } else { 0 })
        }
        Command::VisibilityScan { config, alice_angle, hwp, step, exposure, out } => {
            let cfg = load_config(&config)?;
            let angle = match (alice_angle, hwp) {
                (Some(a), _) => a,
                (None, Some(h)) => 2.0 * h,
                (None, None) => 0.0,
            };
            let scan = visibility_scan(&cfg, angle, step, exposure)?;
            let mut csv = String::from("theta_deg,expected_rate\n");
            for (t, r) in &scan.curve {
                csv.push_str(&format!("{t},{r}\n"));
            }
            write(&out, &csv)?;
            if !scan.counts.is_empty() {
                let mut counts = String::from(bbm92::sifting::CURVE_CSV_HEADER);
                counts.push('\n');
                for p in &scan.counts {
                    counts.push_str(&format!("{},{},{}\n", p.theta, p.counts, p.exposure));
                }
                write(&out.with_extension("counts.csv"), &counts)?;
            }
            if let Some(fit) = &scan.fit {
                println!(
                    "visibility={:.4} ci98={:.4} phase_deg={:.2} clamped={}",
                    fit.visibility, fit.ci98, fit.phase, fit.clamped
                );
            }
            Ok(0)
        }
        Command::Predict { report, factor, from, to, out } => {
            let text = fs::read_to_string(&report).map_err(|e| Failure::data(format!("{}: {e}", report.display())))?;
            let reference =
                KeyRateReport::from_json(&text).map_err(|e| Failure::data(format!("{}: {e}", report.display())))?;
            let f = match (factor, from, to) {
                (Some(f), _, _) => f,
                (None, Some(a), Some(b)) => {
                    let (a, b) = (load_config(&a)?, load_config(&b)?);
                    let side = |c: &ExperimentConfig| -> Result<_, Failure> {
                        let spec = c.channel_spec()?.ok_or_else(|| Failure::usage("config lacks a channel scaling"))?;
                        let rec = c.channel.aerosol.clone().ok_or_else(|| Failure::usage("config lacks an aerosol record"))?;
                        Ok((spec, rec))
                    };
                    let ((sa, ra), (sb, rb)) = (side(&a)?, side(&b)?);
                    day_factor(&sa, &ra, &sb, &rb)
                }
                _ => return Err(Failure::usage("give --factor or both --from and --to")),
            };
            let predicted = predict_rates(&reference, f).map_err(Failure::usage)?;
            println!("factor={f:.4}");
            print!("{}", predicted.render_text());
            if let Some(o) = out {
                write(&o, &predicted.to_json())?;
            }
            Ok(0)
        }
        Command::Report { config, coincidences, postprocess, out_dir } => {
            let cfg = load_config(&config)?;
            let set = read_coincidences(&coincidences).map_err(Failure::data)?;
            let summary = match postprocess {
                Some(p) => PostprocessSummary::read(&p)?,
                None => PostprocessSummary::default(),
            };
            let report = report_from_files(&cfg, &set, &summary)?;
            print!("{}", report.render_text());
            if let Some(dir) = out_dir {
                create_dir(&dir)?;
                write(&dir.join("report.txt"), &report.render_text())?;
                write(&dir.join("report.json"), &report.to_json())?;
            }
            Ok(decode_status(&report))
        }
    }
}

fn report_from_files(
    cfg: &ExperimentConfig,
    set: &CoincidenceSet,
    summary: &PostprocessSummary,
) -> Result<KeyRateReport, Failure> {
    Ok(assemble_report(cfg, set, &cfg.detectors()?, summary))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
