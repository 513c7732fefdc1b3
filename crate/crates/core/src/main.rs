//! `profl` command-line entry point.
//!
//! Exit codes: 0 success (including an NA baseline), 1 configuration error,
//! 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use profl::checkpoint::Checkpoint;
use profl::config::RunConfig;
use profl::metrics::{self, Mode, Summary};
use profl::pipeline::Simulation;
use profl::Error;

#[derive(Debug, Parser)]
#[command(name = "profl", version, about = "Progressive federated training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute one run and write metrics, summary and checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate final accuracy, peak memory, participation and traffic of
    /// several metrics files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
        /// Where to write the table as CSV.
        #[arg(long, default_value = "comparison.csv")]
        csv: PathBuf,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(profl::config::ConfigError::Data(_)) => Failure::Runtime(e.to_string()),
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn run(config: &Path, seed: Option<u64>, mode: Option<Mode>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(m) = mode {
        cfg.run.mode = m;
    }
    if let Some(o) = out {
        cfg.run.out_dir = o;
    }
    let report = cfg.validate();
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let exp = cfg.prepare().map_err(|e| Failure::from(Error::from(e)))?;
    let mut sim = Simulation::new(&exp.pool, &exp.test, exp.settings.clone()).map_err(|e| Failure::from(Error::from(e)))?;
    let outcome = sim.run(exp.mode, &exp.layout).map_err(|e| Failure::from(Error::from(e)))?;

    let dir = &cfg.run.out_dir;
    std::fs::create_dir_all(dir).map_err(|source| {
        Failure::from(Error::Io {
            path: dir.display().to_string(),
            source,
        })
    })?;
    let summary = Summary::from_records(&outcome.records);
    write_file(&dir.join("metrics.csv"), metrics::csv_string(&outcome.records).as_bytes())?;
    write_file(&dir.join("summary.json"), summary.to_json().as_bytes())?;
    if !outcome.na {
        let ck = match &outcome.model {
            Some(m) => Checkpoint::from_model(m),
            None => Checkpoint::from_layers(outcome.final_layers.clone()),
        };
        ck.save(&dir.join("checkpoint.bin")).map_err(|e| Failure::from(Error::from(e)))?;
    }
    println!("{}", summary.one_line());
    Ok(())
}

fn compare(files: &[PathBuf], csv: &Path) -> Result<(), Failure> {
    let mut runs = Vec::with_capacity(files.len());
    for f in files {
        let records = metrics::load_csv(f).map_err(|e| Failure::from(Error::from(e)))?;
        runs.push((f.display().to_string(), records));
    }
    let rows = metrics::compare(&runs).map_err(|e| Failure::from(Error::from(e)))?;
    print!("{}", metrics::comparison_table(&rows));
    write_file(csv, metrics::comparison_csv(&rows).as_bytes())?;
    Ok(())
}

fn validate(config: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config).map_err(|e| Failure::Config(e.to_string()))?;
    let report = cfg.validate();
    for e in &report.errors {
        println!("error: {e}");
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    if report.errors.is_empty() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{} error(s)", report.errors.len())))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { config, seed, mode, out } => run(&config, seed, mode, out),
        Command::Compare { files, csv } => compare(&files, &csv),
        Command::Validate { config } => validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("{m}");
            ExitCode::from(2)
        }
    }
}
