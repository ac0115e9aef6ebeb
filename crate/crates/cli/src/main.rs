use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use qafel::config::{parse_table, parse_value, ConfigError, ExperimentConfig};
use qafel::emit::{emit, emit_sweep, results_json, summary_csv, sweep_csv, sweep_json, Format};
use qafel::experiment::{run_experiment, sweep, GridAxis};

/// Simulator for buffered asynchronous federated learning with quantized
/// communication.
#[derive(Parser)]
#[command(name = "qafel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and report the summary.
    Run {
        config: PathBuf,
        /// Directory for per-seed metrics and the summary; printed to stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: Format,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run the cartesian product of one or more `key=v1,v2,...` axes.
    Sweep {
        config: PathBuf,
        /// e.g. `quant.client=qsgd:2,qsgd:4,qsgd:8`; repeat for more axes.
        #[arg(long, required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Check a config and list every problem found.
    Validate { config: PathBuf },
}

fn read_table(path: &Path) -> Result<toml::Table, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Syntax(format!("cannot read {}: {e}", path.display())))?;
    text.parse()
        .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))
}

fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    parse_table(read_table(path)?)
}

/// Splits on commas outside brackets, so `[0.1, 0.2]` stays one value.
fn split_values(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(text[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(text[start..].trim());
    out
}

fn parse_axis(spec: &str) -> Result<GridAxis> {
    let Some((key, values)) = spec.split_once('=') else {
        bail!("grid axis {spec:?} is not of the form key=v1,v2,...");
    };
    let values: Vec<toml::Value> = split_values(values)
        .into_iter()
        .filter(|v| !v.is_empty())
        .map(parse_value)
        .collect();
    if values.is_empty() {
        bail!("grid axis {key} has no values");
    }
    Ok(GridAxis {
        key: key.trim().to_string(),
        values,
    })
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Validate { config } => match load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                Ok(ExitCode::SUCCESS)
            }
            Err(e) => {
                for issue in e.issues() {
                    eprintln!("{issue}");
                }
                Ok(ExitCode::FAILURE)
            }
        },
        Command::Run {
            config,
            out,
            format,
            seed_override,
        } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed_override {
                cfg.run.seeds = vec![seed];
            }
            let result = run_experiment(&cfg)?;
            match out {
                Some(dir) => {
                    for path in emit(&result, format, &dir)
                        .with_context(|| format!("writing results to {}", dir.display()))?
                    {
                        eprintln!("wrote {}", path.display());
                    }
                }
                None => match format {
                    Format::Csv => print!("{}", summary_csv(&result)),
                    Format::Json => println!("{}", results_json(&result)),
                },
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            grid,
            out,
            format,
        } => {
            let table = read_table(&config)?;
            let axes = grid
                .iter()
                .map(|g| parse_axis(g))
                .collect::<Result<Vec<_>>>()?;
            let points = sweep(&table, &axes)?;
            match out {
                Some(dir) => {
                    let path = emit_sweep(&points, format, &dir)
                        .with_context(|| format!("writing sweep to {}", dir.display()))?;
                    eprintln!("wrote {}", path.display());
                }
                None => match format {
                    Format::Csv => print!("{}", sweep_csv(&points)),
                    Format::Json => println!("{}", sweep_json(&points)),
                },
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_split_outside_brackets() {
        assert_eq!(split_values("qsgd:2,qsgd:4"), vec!["qsgd:2", "qsgd:4"]);
        assert_eq!(split_values("[0.1, 0.2], 0.3"), vec!["[0.1, 0.2]", "0.3"]);
    }

    #[test]
    fn axis_parsing() {
        let a = parse_axis("hp.K=1,2,5").unwrap();
        assert_eq!(a.key, "hp.K");
        assert_eq!(a.values.len(), 3);
        assert_eq!(a.values[2], toml::Value::Integer(5));
        assert!(parse_axis("hp.K").is_err());
        assert!(parse_axis("hp.K=").is_err());
    }
}
