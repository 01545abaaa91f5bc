use qni_core::transfer::{run_transfer, TransferReport};
use serde::Serialize;

use super::{bit, require, to_value, write_csv, Ctx};
use crate::error::LabResult;
use crate::scenario::section;
use crate::Outcome;

pub const TRANSFER_CSV_HEADER: [&str; 12] = [
    "n_g",
    "seed",
    "n_p",
    "B",
    "B_hat",
    "eps_p",
    "eps_g",
    "proxy_sup_gap",
    "gold_sup_gap",
    "gold_only_sup_gap",
    "certified",
    "holds",
];

#[derive(Debug, Clone, Serialize)]
pub struct TransferRow {
    pub n_g: usize,
    pub seed: u64,
    pub n_p: usize,
    pub b: f64,
    pub b_hat: f64,
    pub eps_p: f64,
    pub eps_g: f64,
    pub proxy_sup_gap: f64,
    pub gold_sup_gap: f64,
    pub gold_only_sup_gap: f64,
    pub certified: f64,
    pub holds: u8,
}

impl From<&TransferReport> for TransferRow {
    fn from(r: &TransferReport) -> Self {
        TransferRow {
            n_g: r.n_g,
            seed: r.seed,
            n_p: r.n_p,
            b: r.b,
            b_hat: r.b_hat,
            eps_p: r.eps_p,
            eps_g: r.eps_g,
            proxy_sup_gap: r.proxy_sup_gap,
            gold_sup_gap: r.gold_sup_gap,
            gold_only_sup_gap: r.gold_only_sup_gap,
            certified: r.certified,
            holds: bit(r.holds),
        }
    }
}

pub fn run(ctx: &Ctx) -> LabResult<Outcome> {
    let sec = section(&ctx.scenario.transfer, "transfer")?;
    let problem = sec.build()?;
    let runs = ctx.per_seed(|seed| Ok(run_transfer(&problem, sec.delta, &sec.config, seed)?))?;
    write_csv(&ctx.out("transfer.csv"), &TRANSFER_CSV_HEADER, runs.iter().map(|r| TransferRow::from(&r.value)))?;
    ctx.write_runs(&runs, |_, v| to_value(v))?;

    let mut out = Outcome::default();
    for r in &runs {
        let v = &r.value;
        out.lines.push(format!(
            "transfer seed={} gold_sup_gap={:.6e} gold_only={:.6e} certified={:.6e} holds={}",
            r.seed, v.gold_sup_gap, v.gold_only_sup_gap, v.certified, v.holds
        ));
    }
    let failed: Vec<u64> = runs.iter().filter(|r| !r.value.holds).map(|r| r.seed).collect();
    require(&mut out, sec.require_bounds, "transfer certificate", &failed);
    Ok(out)
}
