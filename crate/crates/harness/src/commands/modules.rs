use qni_core::module_net::{theorem5_experiment, CompositionReport, CompositionRow, COMPOSITION_CSV_HEADER};
use serde::Serialize;

use super::{bit, require, to_value, write_csv, Ctx};
use crate::error::LabResult;
use crate::scenario::section;
use crate::Outcome;

pub const MODULES_CSV_HEADER: [&str; 12] = [
    "seed",
    "T",
    "eps_f",
    "eps_g",
    "alpha_shift",
    "k_module",
    "gap_bound",
    "frequency_within",
    "required",
    "band",
    "matched_violations",
    "holds",
];

#[derive(Debug, Clone, Serialize)]
struct WordRow {
    word_id: usize,
    parse_match: u8,
    gap_l2: f64,
    bound: f64,
    within_bound: u8,
}

impl From<&CompositionRow> for WordRow {
    fn from(r: &CompositionRow) -> Self {
        WordRow {
            word_id: r.word_id,
            parse_match: bit(r.parse_match),
            gap_l2: r.gap_l2,
            bound: r.bound,
            within_bound: bit(r.within_bound),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModulesRow {
    pub seed: u64,
    pub t_len: usize,
    pub eps_f: f64,
    pub eps_g: f64,
    pub alpha_shift: f64,
    pub k_module: f64,
    pub gap_bound: f64,
    pub frequency_within: f64,
    pub required: f64,
    pub band: f64,
    pub matched_violations: usize,
    pub holds: u8,
}

impl ModulesRow {
    pub fn new(seed: u64, r: &CompositionReport) -> Self {
        ModulesRow {
            seed,
            t_len: r.t_len,
            eps_f: r.eps_f,
            eps_g: r.eps_g,
            alpha_shift: r.alpha_shift,
            k_module: r.k_module,
            gap_bound: r.gap_bound,
            frequency_within: r.frequency_within,
            required: r.required,
            band: r.band,
            matched_violations: r.matched_violations,
            holds: bit(r.holds),
        }
    }
}

pub(crate) fn word_csv_header() -> Vec<&'static str> {
    COMPOSITION_CSV_HEADER.split(',').collect()
}

pub fn run(ctx: &Ctx) -> LabResult<Outcome> {
    let sec = section(&ctx.scenario.modules, "modules")?;
    let setup = ctx.pool.install(|| sec.build())?;
    let spec = setup.shift_spec(sec, sec.t_len)?;
    let header = word_csv_header();
    let runs = ctx.per_seed(|seed| -> LabResult<CompositionReport> {
        let r = theorem5_experiment(
            &setup.truth,
            &setup.fitted,
            &setup.parser_true,
            &setup.parser_hat,
            &spec,
            &setup.inputs,
            sec.n_mc,
            sec.z,
            seed,
        )?;
        write_csv(&ctx.out(&format!("modules_{seed}.csv")), &header, r.rows.iter().map(WordRow::from))?;
        Ok(r)
    })?;
    write_csv(&ctx.out("modules.csv"), &MODULES_CSV_HEADER, runs.iter().map(|r| ModulesRow::new(r.seed, &r.value)))?;
    ctx.write_runs(&runs, |seed, r| to_value(&ModulesRow::new(seed, r)))?;

    let mut out = Outcome::default();
    for r in &runs {
        let v = &r.value;
        out.lines.push(format!(
            "modules seed={} T={} frequency_within={:.4} required={:.4} band={:.4} holds={}",
            r.seed, v.t_len, v.frequency_within, v.required, v.band, v.holds
        ));
    }
    let failed: Vec<u64> = runs.iter().filter(|r| !r.value.holds).map(|r| r.seed).collect();
    require(&mut out, sec.require_bounds, "composition bound", &failed);
    Ok(out)
}
