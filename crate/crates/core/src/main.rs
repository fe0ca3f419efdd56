use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use steinlab::cli::{run_tasks, write_all, ExperimentConfig, Format};
use steinlab::galerkin::{kernel_field, GalerkinSolution};
use steinlab::measures::CATALOG_NAMES;
use steinlab::{Error, Result};

#[derive(Parser)]
#[command(name = "steinlab", about = "Stein kernels, discrepancies and bound checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every task of an experiment config.
    Run {
        config: PathBuf,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Also write `<name>.plot.csv`.
        #[arg(long)]
        plot_data: bool,
        #[arg(long, default_value = "reports")]
        out_dir: PathBuf,
        /// Report formats; overrides the config when given.
        #[arg(long = "format", value_enum)]
        formats: Vec<Format>,
        /// Keep wall-clock runtimes in reports (otherwise zeroed).
        #[arg(long)]
        timings: bool,
    },
    /// Kernel utilities.
    Kernel {
        #[command(subcommand)]
        action: KernelAction,
    },
    /// Print the catalog of named measures.
    ListMeasures,
    Version,
}

#[derive(Subcommand)]
enum KernelAction {
    /// Evaluate a saved Galerkin kernel at the points of a CSV file.
    Eval { solution: PathBuf, points: PathBuf },
}

fn run(
    config: PathBuf,
    jobs: Option<usize>,
    plot: bool,
    out_dir: PathBuf,
    formats: Vec<Format>,
    timings: bool,
) -> ExitCode {
    let loaded = match std::fs::read_to_string(&config).map_err(Error::from).and_then(|s| ExperimentConfig::parse(&s)) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("{}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    if let Some(j) = jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let outcome = run_tasks(&loaded);
    let out = &loaded.config.output;
    let formats = if formats.is_empty() { out.formats.clone() } else { formats };
    match write_all(&outcome.records, &formats, &out_dir, &out.name, timings, plot) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Err(e) => {
            eprintln!("writing reports: {e}");
            return ExitCode::from(1);
        }
    }
    for f in &outcome.failures {
        eprintln!("task failed: {f}");
    }
    for r in outcome.records.iter().filter(|r| r.is_failure()) {
        eprintln!("FAIL {} n={} measured={:e} bound={:e}", r.label, r.n, r.measured, r.bound);
    }
    if outcome.success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn kernel_eval(solution: PathBuf, points: PathBuf) -> Result<()> {
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(solution)?)?;
    let sol = GalerkinSolution::from_json(&json)?;
    let tau = kernel_field(&sol);
    let d = tau.dim();
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("tau{i}{j}"));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    let mut t = vec![0.0; d * d];
    for (lineno, line) in BufReader::new(std::fs::File::open(points)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let x = match parsed {
            Ok(x) => x,
            Err(_) if lineno == 0 => continue,
            Err(e) => {
                return Err(Error::Config { line: lineno + 1, column: 1, message: format!("bad number: {e}") });
            }
        };
        if x.len() != d {
            return Err(Error::SizeMismatch(format!("line {}: expected {d} coordinates, got {}", lineno + 1, x.len())));
        }
        tau.eval_into(&x, &mut t);
        let row: Vec<String> = x.iter().chain(&t).map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match Cli::parse().command {
        Command::Run { config, jobs, plot_data, out_dir, formats, timings } => run(config, jobs, plot_data, out_dir, formats, timings),
        Command::Kernel { action: KernelAction::Eval { solution, points } } => match kernel_eval(solution, points) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(2)
            }
        },
        Command::ListMeasures => {
            for (name, params) in CATALOG_NAMES {
                println!("{name:<22} {params}");
            }
            ExitCode::SUCCESS
        }
        Command::Version => {
            println!("steinlab {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
    }
}
