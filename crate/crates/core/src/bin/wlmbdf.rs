use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wlmbdf::harness::{calibrate_beta, run_sweep, to_csv, write_csv, HarnessError, SimConfig};
use wlmbdf::selfcheck;

#[derive(Parser)]
#[command(
    name = "wlmbdf",
    version,
    about = "BER simulation for multi-branch decision-feedback MIMO detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an SNR sweep and write the BER table as CSV.
    Ber {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output` from the config; stdout when neither is set.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the built-in consistency checks.
    Validate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Grid-search the error-propagation parameter and print the best value.
    CalibrateBeta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn exit_code(e: &HarnessError) -> ExitCode {
    if e.is_config() || matches!(e, HarnessError::Io { .. }) {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn with_threads<T>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError>
where
    T: Send,
{
    match threads {
        None => Ok(f()),
        Some(0) => Err(HarnessError::Config("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn ber(
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<(), HarnessError> {
    let mut cfg = SimConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let records = with_threads(threads, || run_sweep(&cfg))??;
    match out.or(cfg.output) {
        Some(path) => {
            write_csv(&records, &path)?;
            log::info!("wrote {} rows to {}", records.len(), path.display());
        }
        None => {
            let _ = std::io::stdout().write_all(to_csv(&records).as_bytes());
        }
    }
    Ok(())
}

fn calibrate(config: PathBuf, threads: Option<usize>) -> Result<(), HarnessError> {
    let cfg = SimConfig::load(&config)?;
    let cal = with_threads(threads, || calibrate_beta(&cfg))??;
    for (b, ber) in &cal.scores {
        println!("beta={b} ber={ber:.6e}");
    }
    println!(
        "chosen beta for {} at {} dB: {}",
        cal.detector, cal.snr_db, cal.chosen
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ber {
            config,
            out,
            seed,
            threads,
        } => ber(config, out, seed, threads),
        Command::CalibrateBeta { config, threads } => calibrate(config, threads),
        Command::Validate { seed } => {
            let checks = selfcheck::run_all(seed);
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(HarnessError::Numerical("self-check failed".into()))
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
