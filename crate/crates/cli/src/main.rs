use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedeve::experiment::{
    expand_glob, parse_config, plot_series, run_experiment, stats_to_csv, summarize, ExperimentConfig, GdOracle,
};
use fedeve::Error;

#[derive(Parser)]
#[command(name = "fedeve", version, about = "Federated learning simulator with predict-observe server optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.jsonl into the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads for client training (results do not depend on it).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Aggregate final accuracies of many runs into a mean ± std table.
    Summarize {
        /// Glob matching metrics.jsonl files, e.g. 'runs/*/metrics.jsonl'.
        pattern: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot one per-round field of one or more runs as SVG.
    Plot {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        field: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-batch gradient descent on the pooled training data; one JSON line per step.
    OracleGd {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> fedeve::Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn write_file(path: &PathBuf, contents: &str) -> fedeve::Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> fedeve::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            threads,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let summary = run_experiment(cfg, &out, threads)?;
            println!(
                "{} {} seed={} rounds={} final_acc={:.4} -> {}",
                summary.method,
                summary.partition,
                summary.seed,
                summary.rounds,
                summary.final_acc,
                out.join("metrics.jsonl").display()
            );
        }
        Command::Summarize { pattern, out } => {
            let paths = expand_glob(&pattern)?;
            let stats = summarize(&paths)?;
            write_file(&out, &stats_to_csv(&stats))?;
            for s in &stats {
                println!("{:<10} {:<18} {:<12} {} (n={})", s.method, s.partition, s.drift_isolation, s.cell(), s.runs);
            }
        }
        Command::Plot { files, field, out } => {
            write_file(&out, &plot_series(&files, &field)?)?;
        }
        Command::OracleGd { config } => {
            let cfg = load_config(&config)?;
            let mut oracle = GdOracle::new(&cfg)?;
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            let pipe = |e: io::Error| Error::io("<stdout>", e);
            for _ in 0..cfg.rounds {
                let rec = oracle.step()?;
                serde_json::to_writer(&mut w, &rec).map_err(|e| pipe(e.into()))?;
                w.write_all(b"\n").map_err(pipe)?;
            }
            w.flush().map_err(pipe)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
