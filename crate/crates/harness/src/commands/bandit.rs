use qni_core::bandit::{regret_bound, run_etc, TRACE_CSV_HEADER};
use serde::Serialize;

use super::{bit, require, to_value, write_csv, Ctx};
use crate::error::LabResult;
use crate::scenario::section;
use crate::Outcome;

pub const BANDIT_CSV_HEADER: [&str; 6] = ["seed", "m", "clamped", "cum_regret", "bound", "within_bound"];

#[derive(Debug, Clone, Serialize)]
pub struct BanditSummary {
    pub seed: u64,
    pub m: usize,
    pub clamped: u8,
    pub cum_regret: f64,
    pub bound: f64,
    pub within_bound: u8,
}

pub fn run(ctx: &Ctx) -> LabResult<Outcome> {
    let sec = section(&ctx.scenario.bandit, "bandit")?;
    let (problem, cfg) = sec.build()?;
    let bound = regret_bound(problem.horizon, problem.d(), &problem.constants())?;
    let runs = ctx.per_seed(|seed| -> LabResult<BanditSummary> {
        let trace = run_etc(&problem, &cfg, seed)?;
        write_csv(&ctx.out(&format!("bandit_trace_{seed}.csv")), &TRACE_CSV_HEADER, trace.rows())?;
        let cum = trace.cumulative_regret();
        Ok(BanditSummary {
            seed,
            m: trace.m,
            clamped: bit(trace.clamped),
            cum_regret: cum,
            bound,
            within_bound: bit(cum <= bound),
        })
    })?;
    write_csv(&ctx.out("bandit.csv"), &BANDIT_CSV_HEADER, runs.iter().map(|r| &r.value))?;
    ctx.write_runs(&runs, |_, v| to_value(v))?;

    let mut out = Outcome::default();
    for r in &runs {
        out.lines.push(format!(
            "bandit seed={} T={} m={} regret={:.6e} bound={:.6e}",
            r.seed, problem.horizon, r.value.m, r.value.cum_regret, bound
        ));
    }
    let failed: Vec<u64> = runs.iter().filter(|r| r.value.within_bound == 0).map(|r| r.seed).collect();
    require(&mut out, sec.require_bounds, "regret bound", &failed);
    Ok(out)
}
