use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tseforge::checkpoint;
use tseforge::clue::{ClueKind, ClueSpec};
use tseforge::evalkit::{self, Report};
use tseforge::mixsim::{Manifest, MixConfig, SourceBank};
use tseforge::model::PRESETS;
use tseforge::signal::Waveform;
use tseforge::trainer::{fit_run, RunConfig};
use tseforge::Error;

/// Target sound extraction: train, extract, evaluate and inspect models.
#[derive(Parser, Debug)]
#[command(name = "tseforge", version)]
struct Cli {
    /// Seed overriding the one in the run config (train) or the generator seed (simulate).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a run config or a preset.
    Train(TrainArgs),
    /// Extract one target from a mixture WAV.
    Extract(ExtractArgs),
    /// Generate a fixed mixture manifest.
    Simulate(SimulateArgs),
    /// Evaluate a checkpoint on a manifest and write metrics, summary and chart.
    Evaluate(EvaluateArgs),
    /// Rebuild summary and chart from a metrics CSV.
    Report(ReportArgs),
    /// Print configuration and learned layer weights of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config (TOML, flat keys).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Model preset, used when no config is given.
    #[arg(long)]
    preset: Option<String>,
    /// Override the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("clue").required(true).args(["label", "enroll"])))]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Mixture WAV (mono, 16 kHz).
    #[arg(long)]
    mixture: PathBuf,
    /// Target class index.
    #[arg(long)]
    label: Option<usize>,
    /// Enrollment WAV of the target class.
    #[arg(long)]
    enroll: Option<PathBuf>,
    /// Output WAV.
    #[arg(long)]
    out: PathBuf,
    /// Process in chunks of this many samples through the streaming path (online backbone).
    #[arg(long)]
    chunk: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Number of mixtures.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Number of classes of the toy bank.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 6.0)]
    duration: f64,
    /// Manifest to write (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Also write mixture, reference and enrollment WAVs into this directory.
    #[arg(long)]
    wav_dir: Option<PathBuf>,
    /// Write WAVs under $TSEFORGE_CACHE/<manifest name> when no --wav-dir is given.
    #[arg(long)]
    export: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClueArg {
    Label,
    Enroll,
    Both,
}

impl ClueArg {
    fn kinds(self) -> Vec<ClueKind> {
        match self {
            ClueArg::Label => vec![ClueKind::ClassLabel],
            ClueArg::Enroll => vec![ClueKind::Enrollment],
            ClueArg::Both => vec![ClueKind::ClassLabel, ClueKind::Enrollment],
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = ClueArg::Both)]
    clue: ClueArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Per-sample metrics CSV written by `evaluate`.
    #[arg(long)]
    metrics: PathBuf,
    /// Manifest supplying class names.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    clue: Option<ClueArg>,
    #[arg(long, default_value = "model")]
    name: String,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Clue(_) | Error::UnknownClass(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> tseforge::Result<()> {
    match cli.command {
        Command::Train(a) => train(a, cli.seed),
        Command::Extract(a) => extract(a),
        Command::Simulate(a) => simulate(a, cli.seed.unwrap_or(1)),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn train(a: TrainArgs, seed: Option<u64>) -> tseforge::Result<()> {
    let mut run = match (&a.config, &a.preset) {
        (Some(p), _) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
            other => other,
        })?,
        (None, Some(preset)) => {
            if !PRESETS.contains(&preset.as_str()) {
                return Err(Error::Config(format!(
                    "unknown preset {preset:?}; choose one of {}",
                    PRESETS.join(", ")
                )));
            }
            RunConfig {
                preset: preset.clone(),
                ..RunConfig::default()
            }
        }
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = seed {
        run.seed = s;
    }
    if let Some(s) = a.steps {
        run.steps = s;
    }
    let resolved = run.resolve()?;
    println!(
        "training {} ({} classes, m2d enroll: {}, m2d mixture: {}) for {} steps",
        resolved.run.preset,
        resolved.model.n_classes,
        resolved.model.m2d_enroll,
        resolved.model.m2d_mixture,
        resolved.train.steps
    );
    let (out, files) = fit_run(&run, &a.out_dir)?;
    println!(
        "best validation SI-SNR {:.2} dB at step {}",
        out.state.best_valid_si_snr, out.state.best_step
    );
    println!("checkpoint: {}", files.checkpoint.display());
    println!("resolved config: {}", files.resolved.display());
    Ok(())
}

fn extract(a: ExtractArgs) -> tseforge::Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let mixture = Waveform::read_wav(&a.mixture)?;
    let clue = match (a.label, &a.enroll) {
        (Some(c), None) => ClueSpec::label(c),
        (None, Some(p)) => ClueSpec::enrollment(Waveform::read_wav(p)?),
        _ => return Err(Error::Clue("give exactly one of --label and --enroll".into())),
    };
    let out = match a.chunk {
        Some(chunk) => model.extract_streaming(&mixture, &clue, chunk)?,
        None => model.extract(&mixture, &clue)?,
    };
    out.write_wav(&a.out)?;
    println!("wrote {} samples to {}", out.len(), a.out.display());
    Ok(())
}

fn simulate(a: SimulateArgs, seed: u64) -> tseforge::Result<()> {
    let bank = SourceBank::toy(a.classes)?;
    let cfg = MixConfig {
        duration_s: a.duration,
        enrollment_s: a.duration,
        min_events: MixConfig::default().min_events.min(a.classes),
        max_events: MixConfig::default().max_events.min(a.classes),
        ..MixConfig::default()
    };
    let m = Manifest::generate(&bank, &cfg, a.n, seed)?;
    m.save(&a.out)?;
    println!("wrote {} records to {}", m.len(), a.out.display());
    let wav_dir = match (a.wav_dir, a.export) {
        (Some(d), _) => Some(d),
        (None, true) => {
            let root = std::env::var_os("TSEFORGE_CACHE")
                .ok_or_else(|| Error::Config("--export needs TSEFORGE_CACHE or --wav-dir".into()))?;
            let stem = a.out.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
            Some(Path::new(&root).join(stem))
        }
        (None, false) => None,
    };
    if let Some(d) = wav_dir {
        m.export_wavs(&d)?;
        println!("audio in {}", d.display());
    }
    Ok(())
}

fn print_summary(report: &Report) -> tseforge::Result<()> {
    println!("{:<12} {:>8} {:>10} {:>12} {:>8}", "clue", "samples", "SNRi[dB]", "SI-SNR[dB]", "FR[%]");
    for r in report.summary()? {
        println!(
            "{:<12} {:>8} {:>10.2} {:>12.2} {:>8.2}",
            r.clue_kind.as_str(),
            r.n,
            r.mean_snri_db,
            r.mean_si_snr_db,
            r.failure_rate
        );
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> tseforge::Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let mut rows = Vec::new();
    for kind in a.clue.kinds() {
        rows.extend(evalkit::evaluate(&model, &manifest, kind)?);
    }
    let report = Report {
        model: a
            .checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        class_names: manifest.bank.classes().iter().map(|c| c.name.clone()).collect(),
        rows,
    };
    let files = evalkit::emit_report(&report, &a.out_dir)?;
    print_summary(&report)?;
    println!("metrics: {}", files.csv.display());
    Ok(())
}

fn report(a: ReportArgs) -> tseforge::Result<()> {
    let mut rows = evalkit::read_csv(&a.metrics)?;
    if let Some(c) = a.clue {
        let kinds = c.kinds();
        rows.retain(|r| kinds.contains(&r.clue_kind));
    }
    let class_names = match &a.manifest {
        Some(p) => Manifest::load(p)?.bank.classes().iter().map(|c| c.name.clone()).collect(),
        None => Vec::new(),
    };
    let report = Report {
        model: a.name,
        class_names,
        rows,
    };
    evalkit::emit_report(&report, &a.out_dir)?;
    print_summary(&report)
}

fn fmt_weights(w: &[f64]) -> String {
    let parts: Vec<String> = w.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}] sum={:.6}", parts.join(", "), w.iter().sum::<f64>())
}

fn inspect(a: InspectArgs) -> tseforge::Result<()> {
    let (model, header) = checkpoint::load(&a.checkpoint)?;
    let cfg = model.config();
    println!("format: {}", checkpoint::FORMAT);
    println!("backbone: {:?}", cfg.backbone);
    println!("classes: {}", cfg.n_classes);
    println!("embedding dim: {}", cfg.embed_dim);
    println!("m2d for enrollment: {}", cfg.m2d_enroll);
    println!("m2d for mixture: {}", cfg.m2d_mixture);
    println!(
        "parameters: {} tensors, {} values",
        model.store().names().len(),
        model.store().num_elements()
    );
    let mut extra: Vec<_> = header.extra.iter().collect();
    extra.sort();
    for (k, v) in extra {
        println!("{k}: {v}");
    }
    if let Some(w) = model.aie_weights()? {
        println!("aie layer weights: {}", fmt_weights(&w));
    }
    if let Some((k, v)) = model.mhfa_weights()? {
        println!("mhfa key weights: {}", fmt_weights(&k));
        println!("mhfa value weights: {}", fmt_weights(&v));
    }
    Ok(())
}
