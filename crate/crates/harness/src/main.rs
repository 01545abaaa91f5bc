use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use qni_lab::{error::config, parse_list, run, Axis, Command, ExperimentConfig, LabResult};

#[derive(Debug, Parser)]
#[command(name = "qni-lab", version, about = "Seeded experiments and bound checks for quadratic networks")]
struct Cli {
    command: Command,
    /// JSON scenario file.
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated 64-bit seeds, e.g. `0,1,2`.
    #[arg(long)]
    seeds: String,
    /// Output directory. QNI_LAB_OUT takes precedence when set.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    parallelism: u64,
    /// Sweep axis.
    #[arg(long, value_enum)]
    axis: Option<Axis>,
    /// Comma-separated sweep grid, ascending.
    #[arg(long)]
    grid: Option<String>,
}

fn build(cli: Cli) -> LabResult<ExperimentConfig> {
    let out_dir = match std::env::var_os("QNI_LAB_OUT").filter(|v| !v.is_empty()) {
        Some(v) => PathBuf::from(v),
        None => cli.out.ok_or_else(|| config("an output directory is required (--out or QNI_LAB_OUT)"))?,
    };
    Ok(ExperimentConfig {
        command: cli.command,
        scenario: cli.scenario,
        seeds: parse_list(&cli.seeds, "seed")?,
        out_dir,
        parallelism: cli.parallelism as usize,
        axis: cli.axis,
        grid: cli.grid.as_deref().map(|g| parse_list(g, "grid")).transpose()?,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = build(cli).and_then(|cfg| run(&cfg));
    match result {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            if outcome.success() {
                ExitCode::SUCCESS
            } else {
                for v in &outcome.violations {
                    eprintln!("violation: {v}");
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("qni-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
