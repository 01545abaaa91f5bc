use qni_core::identify::{epsilon_bound, robust_shift_experiment, IdentConstants, ShiftRow, SHIFT_CSV_HEADER};
use serde_json::json;

use super::{require, to_value, write_csv, Ctx};
use crate::error::LabResult;
use crate::scenario::section;
use crate::Outcome;

pub fn run(ctx: &Ctx) -> LabResult<Outcome> {
    let sec = section(&ctx.scenario.identify, "identify")?;
    let setup = sec.build()?;
    let d = setup.truth.d();
    let bound = epsilon_bound(sec.n, d, sec.delta, IdentConstants::from_bounds(&setup.settings.bounds))?;
    let runs = ctx.per_seed(|seed| -> LabResult<ShiftRow> {
        let rows = robust_shift_experiment(
            &setup.truth,
            &setup.sampler_p,
            &setup.sampler_q,
            &sec.shift_id,
            &[sec.n],
            &setup.settings,
            &[seed],
        )?;
        Ok(rows.into_iter().next().expect("one cell"))
    })?;
    write_csv(&ctx.out("identify.csv"), &SHIFT_CSV_HEADER, runs.iter().map(|r| &r.value))?;
    ctx.write_runs(&runs, |_, row| json!({ "row": to_value(row), "epsilon": bound.epsilon }))?;

    let mut out = Outcome::default();
    let failed: Vec<u64> = runs.iter().filter(|r| !r.value.holds).map(|r| r.seed).collect();
    for r in &runs {
        out.lines.push(format!(
            "identify seed={} n={} sup_gap_sq={:.6e} certified={:.6e} holds={}",
            r.seed, r.value.n, r.value.sup_gap_sq, r.value.certified_bound, r.value.holds
        ));
    }
    require(&mut out, sec.require_bounds, "uniform identification bound", &failed);
    Ok(out)
}
