use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use choicetrace::defense::{evaluate_defense, DefensePolicy, ProbeConfig};
use choicetrace::eval::{
    build_corpus, calibrate_manifest, emit_report, evaluate_pipeline, load_sessions, profile_histograms,
    DatasetManifest, DEFAULT_CALIBRATION_FRACTION,
};
use choicetrace::ingest::{ingest_pcap, ClientHint};
use choicetrace::reconstruct::ReconstructionReport;
use choicetrace::{
    classify_events, default_profiles, length_histogram, load_script, model_for_profile, read_trace, reconstruct_path,
    simulate_session, write_trace, ChoicePath, ClassifiedEvent, Error, LengthBands, SideChannelModel, Trace,
};

#[derive(Parser)]
#[command(
    name = "choicetrace",
    version,
    about = "Infer interactive-video choices from TLS record lengths"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one session; writes trace.jsonl and truth.json
    Simulate {
        #[arg(long)]
        script: PathBuf,
        /// Decisions such as "Q1=D,Q2=A"
        #[arg(long)]
        path: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Index into the 72 default operational profiles
        #[arg(long, default_value_t = 0)]
        profile_index: usize,
        /// No jitter and no background traffic
        #[arg(long)]
        noiseless: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a synthetic corpus with a manifest
    Corpus {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        noiseless: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a pcap capture into a JSONL trace
    Ingest {
        #[arg(long)]
        pcap: PathBuf,
        /// Viewer endpoint: ADDR, ADDR:PORT or first-syn
        #[arg(long, default_value = "first-syn")]
        client: String,
        #[arg(long)]
        trace_id: Option<String>,
        /// Record this default profile in the trace header
        #[arg(long)]
        profile_index: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit length bands on the calibration split of a corpus
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CALIBRATION_FRACTION)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract control events from a trace
    Classify {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        bands: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the choice path from classified events
    Reconstruct {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline over a corpus and write a report
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CALIBRATION_FRACTION)]
        fraction: f64,
        /// Histogram bin width for the per-profile CSVs
        #[arg(long, default_value_t = 10)]
        bin: u32,
        #[arg(long)]
        report: PathBuf,
    },
    /// Measure a countermeasure against a corpus
    Defend {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Bands identifying the control records to protect
        #[arg(long)]
        bands: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CALIBRATION_FRACTION)]
        fraction: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Client record-length histogram as CSV
    Hist {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
        bin: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
}

fn load_trace(path: &Path) -> Result<Trace, Error> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(read_trace(BufReader::new(f))?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn base_model(noiseless: bool) -> SideChannelModel {
    if noiseless {
        SideChannelModel::default().noiseless()
    } else {
        SideChannelModel::default()
    }
}

fn profile_at(index: usize) -> Result<choicetrace::OperationalProfile, Error> {
    let profiles = default_profiles();
    let n = profiles.len();
    profiles.into_iter().nth(index).ok_or_else(|| {
        choicetrace::eval::EvalError::Validation(format!("profile index {index} out of range 0..{n}")).into()
    })
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate {
            script,
            path,
            seed,
            profile_index,
            noiseless,
            out,
        } => {
            let graph = load_script(&read_bytes(&script)?)?;
            let path: ChoicePath = path.parse()?;
            let profile = profile_at(profile_index)?;
            let model = model_for_profile(&profile, &base_model(noiseless));
            let (trace, truth) = simulate_session(&graph, &path, &profile, &model, seed)?;
            write_bytes(&out.join("trace.jsonl"), &write_trace(&trace))?;
            write_json(&out.join("truth.json"), &truth)?;
            println!(
                "{} records, {} control events",
                trace.records.len(),
                truth.control_events().count()
            );
        }
        Command::Corpus {
            script,
            n,
            seed,
            noiseless,
            out,
        } => {
            let graph = load_script(&read_bytes(&script)?)?;
            let m = build_corpus(&graph, n, seed, &base_model(noiseless), &out)?;
            println!("{} sessions written to {}", m.count, out.display());
        }
        Command::Ingest {
            pcap,
            client,
            trace_id,
            profile_index,
            out,
        } => {
            let hint: ClientHint = client.parse()?;
            let profile = profile_index.map(profile_at).transpose()?;
            let id = trace_id.unwrap_or_else(|| {
                pcap.file_stem()
                    .map_or("capture".into(), |s| s.to_string_lossy().into_owned())
            });
            let rep = ingest_pcap(&read_bytes(&pcap)?, &hint, &id, profile)?;
            write_bytes(&out, &write_trace(&rep.trace))?;
            println!(
                "{} records from {} TLS connection(s); {} gap(s), {} framing halt(s), {} residue bytes",
                rep.trace.records.len(),
                rep.tls_connections,
                rep.gaps,
                rep.framing_halts,
                rep.residue_bytes
            );
        }
        Command::Calibrate {
            manifest,
            fraction,
            out,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let bands = calibrate_manifest(&m, fraction)?;
            write_json(&out, &bands)?;
            println!("type1 {} type2 {}", bands.type1, bands.type2);
        }
        Command::Classify { trace, bands, out } => {
            let trace = load_trace(&trace)?;
            let bands: LengthBands = read_json(&bands)?;
            let events = classify_events(&trace, &bands);
            write_json(&out, &events)?;
            println!("{} control events", events.len());
        }
        Command::Reconstruct { events, script, out } => {
            let events: Vec<ClassifiedEvent> = read_json(&events)?;
            let graph = load_script(&read_bytes(&script)?)?;
            let report = ReconstructionReport::new(reconstruct_path(&events, &graph), &events, &graph);
            write_json(&out, &report)?;
            println!("{} (score {:.3})", report.path, report.score);
        }
        Command::Eval {
            manifest,
            fraction,
            bin,
            report,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let metrics = evaluate_pipeline(&m, fraction)?;
            let sessions = load_sessions(&m)?;
            let traces: Vec<&Trace> = sessions.iter().map(|(t, _)| t).collect();
            emit_report(&metrics, &profile_histograms(&traces, bin.max(1)), &report)?;
            println!(
                "per_event_accuracy {:.4} per_choice_accuracy {:.4} path_exact_rate {:.4}",
                metrics.per_event_accuracy, metrics.per_choice_accuracy, metrics.path_exact_rate
            );
        }
        Command::Defend {
            manifest,
            policy,
            bands,
            fraction,
            report,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let policy: DefensePolicy = read_json(&policy)?;
            let bands: LengthBands = read_json(&bands)?;
            let rep = evaluate_defense(&m, &policy, &bands, fraction, &ProbeConfig::default())?;
            write_json(&report.join("defense.json"), &rep)?;
            println!(
                "per_event_accuracy {:.4} -> {:.4}; recalibration {}; timing coverage {:.3}",
                rep.before.per_event_accuracy,
                rep.after.per_event_accuracy,
                match rep.recalibration {
                    choicetrace::defense::Recalibration::Separable { .. } => "separable",
                    choicetrace::defense::Recalibration::InseparableBands { .. } => "InseparableBands",
                },
                rep.timing_coverage
            );
        }
        Command::Hist { trace, bin, out } => {
            let trace = load_trace(&trace)?;
            write_bytes(&out, length_histogram(&trace, bin).to_csv().as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
