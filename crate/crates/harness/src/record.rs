use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::LabResult;

pub const VERSION: &str = concat!("qni-lab ", env!("CARGO_PKG_VERSION"));

/// One line of `runs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub wall_time_ms: u64,
    pub payload: serde_json::Value,
    pub version: String,
}

/// Overwrites `out_dir/runs.jsonl` with the records sorted by seed.
pub fn write_records(out_dir: &Path, records: &mut [RunRecord]) -> LabResult<()> {
    records.sort_by_key(|r| r.seed);
    let mut w = BufWriter::new(File::create(out_dir.join("runs.jsonl"))?);
    for r in records.iter() {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> LabResult<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}
