use std::path::{Path, PathBuf};
use std::process::ExitCode;

use augmarglik::model::write_atomic;
use augmarglik_cli::config::RunConfig;
use augmarglik_cli::report::{load_results, results_csv};
use augmarglik_cli::{
    cmd_dump_transforms, cmd_gen_data, cmd_gradcheck, cmd_train, format_gradcheck, resolve_output_dir, CliError,
};
use clap::{Parser, Subcommand};

/// Learns augmentation invariances by Laplace marginal-likelihood ascent.
#[derive(Parser)]
#[command(name = "augmarglik", version)]
struct Cli {
    /// Print progress while running.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic hyper-gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Aggregate result.json files below a directory into results.csv.
    Report {
        dir: PathBuf,
        /// Directory for results.csv; defaults to DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print sampled augmentation transforms as CSV.
    DumpTransforms {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured train and test data to disk.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let dir = resolve_output_dir(&cfg, out.as_deref());
            let r = cmd_train(&cfg, &dir)?;
            println!(
                "{} seed {}: marglik {:.4}, test accuracy {:.4}, test nll {:.4}, |eta| {:?}",
                r.method, r.seed, r.marglik_total, r.test_acc, r.test_nll, r.eta_abs
            );
            println!("wrote {}", dir.display());
        }
        Command::Gradcheck { config, seed, corrupt } => {
            let cfg = load(&config, seed)?;
            let rows = cmd_gradcheck(&cfg, corrupt)?;
            print!("{}", format_gradcheck(&rows));
            let failed = rows.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(CliError::GradcheckFailed(failed));
            }
        }
        Command::Report { dir, out } => {
            if !dir.is_dir() {
                return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
            }
            let (rows, skipped) = load_results(&dir)?;
            for (p, e) in &skipped {
                eprintln!("warning: skipping {}: {e}", p.display());
            }
            if rows.is_empty() {
                return Err(CliError::Usage(format!("no valid result.json files below {}", dir.display())));
            }
            let target = out.unwrap_or(dir).join("results.csv");
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_atomic(&target, results_csv(&rows).as_bytes())?;
            println!("wrote {} ({} runs)", target.display(), rows.len());
        }
        Command::DumpTransforms { config, seed, samples, out } => {
            let cfg = load(&config, seed)?;
            let csv = cmd_dump_transforms(&cfg, samples)?;
            match out {
                Some(p) => write_atomic(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::GenData { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let dir = resolve_output_dir(&cfg, out.as_deref());
            for p in cmd_gen_data(&cfg, &dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Debug } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
