//! `vfemud`: Monte-Carlo BER simulation and one-shot detection for synchronous CDMA.

mod instance;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vfemud::harness::{parse_grid, run_scenario, ScenarioConfig, PRESETS};
use vfemud::{DetectorKind, Error, Schedule};

/// Default output directory when `--out` is not given.
const OUT_DIR_ENV: &str = "VFEMUD_OUT_DIR";

#[derive(Parser)]
#[command(name = "vfemud", version, about = "Variational free-energy multiuser detection for synchronous CDMA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full scenario from a config file or a preset name.
    Simulate {
        config: String,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run a scenario over a different SNR grid.
    Sweep {
        config: String,
        /// Comma list or inclusive `start:step:stop`, in dB.
        #[arg(long = "snr-db", allow_hyphen_values = true)]
        snr_db: String,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run one SISO detector on a supplied instance and print extrinsic LLRs.
    Detect {
        instance: PathBuf,
        #[arg(long, default_value_t = DetectorKind::Gaussian)]
        detector: DetectorKind,
        #[arg(long, default_value_t = Schedule::Flooding)]
        schedule: Schedule,
        /// Mean-field sweeps for the discrete and DDF-aided detectors.
        #[arg(long, default_value_t = 6)]
        sweeps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in scenarios.
    Presets,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// BER CSV path; EM trajectories go next to it with an `.em.csv` suffix.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    schedule: Option<Schedule>,
    #[arg(long)]
    detector: Option<DetectorKind>,
    /// Frames per SNR point (also caps the total).
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

/// Failure with the exit code it maps to.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate { config, run } => load(&config).and_then(|cfg| simulate(cfg, &run)),
        Command::Sweep { config, snr_db, run } => load(&config).and_then(|mut cfg| {
            cfg.snr_db = parse_grid("snr_db", &snr_db)?;
            simulate(cfg, &run)
        }),
        Command::Detect {
            instance,
            detector,
            schedule,
            sweeps,
            out,
        } => detect(&instance, detector, schedule, sweeps, out.as_deref()),
        Command::Presets => {
            for (name, text) in PRESETS {
                let summary = text.lines().next().unwrap_or("").trim_start_matches('#').trim();
                println!("{name:<14} {summary}");
            }
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// A path to a config file, or a preset name when no such file exists.
fn load(config: &str) -> Result<ScenarioConfig, Failure> {
    let path = Path::new(config);
    if !path.exists() && PRESETS.iter().any(|(n, _)| *n == config) {
        return Ok(ScenarioConfig::preset(config)?);
    }
    Ok(ScenarioConfig::from_file(path)?)
}

fn simulate(mut cfg: ScenarioConfig, run: &RunFlags) -> Result<(), Failure> {
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(s) = run.schedule {
        cfg.turbo.schedule = s;
    }
    if let Some(d) = run.detector {
        cfg.turbo.detector = d;
    }
    if let Some(t) = run.trials {
        cfg.trials = t;
        cfg.max_trials = t;
    }
    if run.threads.is_some() {
        cfg.threads = run.threads;
    }
    cfg.validate()?;
    let report = run_scenario(&cfg)?;

    let out = match (&run.out, std::env::var_os(OUT_DIR_ENV)) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(dir)) => Some(PathBuf::from(dir).join(format!("{}.csv", cfg.name))),
        (None, None) => None,
    };
    match out {
        None => print!("{}", report.to_csv()),
        Some(path) => {
            write(&path, &report.to_csv())?;
            eprintln!("wrote {}", path.display());
            if !report.em.is_empty() {
                let em = path.with_extension("em.csv");
                write(&em, &report.em_csv())?;
                eprintln!("wrote {}", em.display());
            }
        }
    }
    Ok(())
}

fn detect(path: &Path, detector: DetectorKind, schedule: Schedule, sweeps: usize, out: Option<&Path>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let inst = instance::Instance::parse(&text)?;
    let llrs = inst.detect(detector, schedule, sweeps)?;
    let mut csv = String::from("symbol,user,llr\n");
    for (t, l) in llrs.iter().enumerate() {
        for (k, v) in l.iter().enumerate() {
            csv.push_str(&format!("{},{},{:.9e}\n", t + 1, k + 1, v));
        }
    }
    match out {
        None => print!("{csv}"),
        Some(p) => write(p, &csv)?,
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}
