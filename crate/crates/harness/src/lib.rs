//! Experiment harness for `qni-core`: reads a JSON scenario, runs one command
//! per seed and writes CSV tables plus a JSONL run log.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod error;
pub mod record;
pub mod scenario;

use std::collections::HashSet;
use std::path::PathBuf;

pub use error::{LabError, LabResult};
pub use scenario::{Axis, Scenario};

use error::config;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Identify,
    Bandit,
    Transfer,
    Modules,
    Verify,
    Sweep,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Identify => "identify",
            Command::Bandit => "bandit",
            Command::Transfer => "transfer",
            Command::Modules => "modules",
            Command::Verify => "verify",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub command: Command,
    pub scenario: PathBuf,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub parallelism: usize,
    /// Sweep only; override the scenario's `sweep` section.
    pub axis: Option<Axis>,
    pub grid: Option<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> LabResult<()> {
        if self.seeds.is_empty() {
            return Err(config("at least one seed is required"));
        }
        let mut seen = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(config(format!("seed {s} is listed twice")));
        }
        if self.parallelism == 0 {
            return Err(config("parallelism must be positive"));
        }
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| config(format!("cannot create output directory {}: {e}", self.out_dir.display())))?;
        let probe = self.out_dir.join(".qni-lab-write-test");
        std::fs::write(&probe, b"")
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| config(format!("output directory {} is not writable: {e}", self.out_dir.display())))?;
        Ok(())
    }
}

/// Human-readable summary lines and the names of any violated checks.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub violations: Vec<String>,
}

impl Outcome {
    pub fn success(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Parses a comma-separated list of integers.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> LabResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| config(format!("invalid {what} entry \"{t}\""))))
        .collect()
}

pub fn run(cfg: &ExperimentConfig) -> LabResult<Outcome> {
    cfg.validate()?;
    let loaded = scenario::load(&cfg.scenario)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| config(format!("cannot start thread pool: {e}")))?;
    let ctx = commands::Ctx { cfg, scenario: &loaded.scenario, hash: &loaded.hash, pool: &pool };
    match cfg.command {
        Command::Identify => commands::identify::run(&ctx),
        Command::Bandit => commands::bandit::run(&ctx),
        Command::Transfer => commands::transfer::run(&ctx),
        Command::Modules => commands::modules::run(&ctx),
        Command::Verify => commands::verify::run(&ctx),
        Command::Sweep => commands::sweep::run(&ctx),
    }
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/harness.md")]
mod book {}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seeds: Vec<u64>, out: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            command: Command::Identify,
            scenario: PathBuf::from("unused.json"),
            seeds,
            out_dir: out,
            parallelism: 1,
            axis: None,
            grid: None,
        }
    }

    #[test]
    fn seed_lists_parse_and_validate() {
        assert_eq!(parse_list::<u64>("3, 1,2", "seed").unwrap(), vec![3, 1, 2]);
        assert!(parse_list::<u64>("1,-2", "seed").is_err());
        let dir = std::env::temp_dir().join("qni-lab-validate");
        assert!(cfg(vec![1, 2], dir.clone()).validate().is_ok());
        assert_eq!(cfg(vec![], dir.clone()).validate().unwrap_err().exit_code(), 2);
        assert_eq!(cfg(vec![4, 4], dir).validate().unwrap_err().exit_code(), 2);
    }
}
