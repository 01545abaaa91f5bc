pub mod bandit;
pub mod identify;
pub mod modules;
pub mod sweep;
pub mod transfer;
pub mod verify;

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::LabResult;
use crate::record::{write_records, RunRecord, VERSION};
use crate::scenario::Scenario;
use crate::ExperimentConfig;

pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub scenario: &'a Scenario,
    pub hash: &'a str,
    pub pool: &'a rayon::ThreadPool,
}

/// Result of one seed: the record payload plus whatever the command needs
/// to write its tables.
pub struct SeedRun<T> {
    pub seed: u64,
    pub wall_time_ms: u64,
    pub value: T,
}

impl Ctx<'_> {
    /// Runs `f` for every seed on the command's thread pool. Results come
    /// back sorted by seed.
    pub fn per_seed<T, F>(&self, f: F) -> LabResult<Vec<SeedRun<T>>>
    where
        T: Send,
        F: Fn(u64) -> LabResult<T> + Sync,
    {
        let mut runs = self.pool.install(|| {
            self.cfg
                .seeds
                .par_iter()
                .map(|&seed| {
                    let start = Instant::now();
                    let value = f(seed)?;
                    Ok(SeedRun { seed, wall_time_ms: start.elapsed().as_millis() as u64, value })
                })
                .collect::<LabResult<Vec<_>>>()
        })?;
        runs.sort_by_key(|r| r.seed);
        Ok(runs)
    }

    pub fn out(&self, name: &str) -> std::path::PathBuf {
        self.cfg.out_dir.join(name)
    }

    pub fn write_runs<T>(&self, runs: &[SeedRun<T>], payload: impl Fn(u64, &T) -> serde_json::Value) -> LabResult<()> {
        let mut records: Vec<RunRecord> = runs
            .iter()
            .map(|r| RunRecord {
                command: self.cfg.command.as_str().to_string(),
                scenario_hash: self.hash.to_string(),
                seed: r.seed,
                wall_time_ms: r.wall_time_ms,
                payload: payload(r.seed, &r.value),
                version: VERSION.to_string(),
            })
            .collect();
        write_records(&self.cfg.out_dir, &mut records)
    }
}

pub(crate) fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("payload types serialize to JSON")
}

/// Writes a header row followed by serialized records.
pub(crate) fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> LabResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn bit(b: bool) -> u8 {
    u8::from(b)
}

/// Fails a command whose scenario asks for its certified bounds to hold.
pub(crate) fn require(out: &mut crate::Outcome, required: bool, name: &str, failed: &[u64]) {
    if required && !failed.is_empty() {
        out.violations.push(format!("{name} violated for seeds {failed:?}"));
    }
}
