use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tandem_core::config::{manifest, ConfigFile};
use tandem_core::metrics::write_metrics;
use tandem_core::sweep::{collect_report, report_csv, run_sweep, CellOutcome, SweepSpec};
use tandem_core::tandem::{Experiment, ExperimentConfig};
use tandem_core::Error;

/// Tandem reinforcement-learning experiments: an active agent learns by acting,
/// a passive agent learns from the same data without acting.
#[derive(Debug, Parser)]
#[command(name = "tandem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and manifest.txt.
    Run {
        /// Configuration file.
        config: PathBuf,
        /// Master seed (overrides experiment.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory. Grid modes write one sub-directory per cell.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// `section.key=value`, applied after the file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Suppress per-iteration progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Run every cell of a sweep file across its seeds.
    Sweep {
        sweep: PathBuf,
        /// Number of concurrent runs.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Skip runs whose manifest already exists.
        #[arg(long)]
        resume: bool,
    },
    /// Aggregate finished runs into a per-iteration summary table.
    Report {
        root: PathBuf,
        /// Include relative passive performance columns.
        #[arg(long)]
        relative: bool,
        /// Write the table here instead of standard output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Config { .. } => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Usage(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            overrides,
            quiet,
        } => run(&config, seed, &out, &overrides, quiet),
        Command::Sweep {
            sweep,
            parallel,
            resume,
        } => sweep_command(&sweep, parallel, resume),
        Command::Report { root, relative, csv } => report(&root, relative, csv.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code(&error))
        }
    }
}

fn run(path: &Path, seed: Option<u64>, out: &Path, overrides: &[String], quiet: bool) -> Result<ExitCode, Error> {
    let mut file = ConfigFile::load(path)?;
    for assignment in overrides {
        file.apply_override(assignment)?;
    }
    if let Some(seed) = seed {
        file.set("experiment.seed", &seed.to_string());
    }
    let config = file.to_config()?;
    for (label, cell) in config.expand() {
        let dir = if label.is_empty() { out.to_path_buf() } else { out.join(&label) };
        run_one(&cell, &dir, &label, quiet)?;
        println!("wrote {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_one(config: &ExperimentConfig, dir: &Path, label: &str, quiet: bool) -> Result<(), Error> {
    let mut experiment = Experiment::new(config.clone())?;
    while !experiment.is_finished() {
        let row = experiment.run_iteration()?;
        if !quiet {
            eprintln!(
                "{label}{}iter {:>4}  active {:>8.2}  passive {:>8.2}  disagree {:.3}",
                if label.is_empty() { "" } else { " " },
                row.iteration,
                row.active_return,
                row.passive_return,
                row.disagreement,
            );
        }
    }
    let rows = experiment.finish()?;
    write_metrics(&rows, &manifest(config), dir)
}

fn sweep_command(path: &Path, parallel: usize, resume: bool) -> Result<ExitCode, Error> {
    let spec = SweepSpec::load(path)?;
    println!(
        "sweep: {} combinations x {} seeds = {} runs",
        spec.cartesian_size() / spec.seeds.len(),
        spec.seeds.len(),
        spec.cartesian_size()
    );
    let cells = spec.cells()?;
    if cells.len() != spec.cartesian_size() {
        println!("grid modes expand this to {} runs", cells.len());
    }
    let summary = run_sweep(&cells, parallel, resume)?;
    for (dir, outcome) in &summary.outcomes {
        match outcome {
            CellOutcome::Completed => println!("ok      {}", dir.display()),
            CellOutcome::Skipped => println!("skipped {}", dir.display()),
            CellOutcome::Failed(message) => println!("FAILED  {}: {message}", dir.display()),
        }
    }
    println!(
        "completed {}, skipped {}, failed {}",
        summary.completed(),
        summary.skipped(),
        summary.failed()
    );
    Ok(if summary.all_failed() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn report(root: &Path, relative: bool, csv: Option<&Path>) -> Result<ExitCode, Error> {
    let report = collect_report(root)?;
    let table = report_csv(&report, relative);
    match csv {
        Some(path) => {
            std::fs::write(path, &table).map_err(|e| Error::io(path, e))?;
            println!("{} runs, {} rows written to {}", report.runs, report.rows.len(), path.display());
        }
        None => print!("{table}"),
    }
    if !report.skipped.is_empty() {
        eprintln!("skipped (incomplete):");
        for dir in &report.skipped {
            eprintln!("  {}", dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
