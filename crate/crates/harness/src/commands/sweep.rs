use qni_core::bandit::{exploration_length_scaled, regret_bound, regret_slope, SlopeRow, SLOPE_CSV_HEADER};
use qni_core::identify::{robust_shift_experiment, ShiftRow, SHIFT_CSV_HEADER};
use qni_core::module_net::theorem5_experiment;
use qni_core::stats::{loglog_fit, median, ols, LineFit, MeanEstimate};
use qni_core::transfer::{run_transfer, TransferReport};
use serde::Serialize;
use serde_json::{json, Value};

use super::transfer::{TransferRow, TRANSFER_CSV_HEADER};
use super::{bit, require, to_value, write_csv, Ctx};
use crate::error::{config, LabResult};
use crate::scenario::{section, Axis};
use crate::Outcome;

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub x: usize,
    pub y: f64,
}

/// Contents of `sweep_{axis}_summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub axis: &'static str,
    pub grid: Vec<usize>,
    /// What `y` is at each grid point.
    pub metric: &'static str,
    pub points: Vec<SweepPoint>,
    /// Least-squares fit of `ln y` against `ln x`; null when some `y` is zero.
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub extra: Value,
}

fn summary(axis: Axis, grid: &[usize], metric: &'static str, ys: Vec<f64>, extra: Value) -> LabResult<SweepSummary> {
    let xs: Vec<f64> = grid.iter().map(|&g| g as f64).collect();
    let fit = if ys.iter().all(|y| *y > 0.0) {
        loglog_fit(&xs, &ys)?
    } else {
        log::warn!("{metric} is zero at some grid point; no log-log slope");
        LineFit { slope: f64::NAN, intercept: f64::NAN, stderr: f64::NAN }
    };
    Ok(SweepSummary {
        axis: axis.as_str(),
        grid: grid.to_vec(),
        metric,
        points: grid.iter().zip(ys).map(|(&x, y)| SweepPoint { x, y }).collect(),
        slope: fit.slope,
        intercept: fit.intercept,
        stderr: fit.stderr,
        extra,
    })
}

fn check_grid(grid: &[usize]) -> LabResult<()> {
    if grid.len() < 3 {
        return Err(config("a sweep grid needs at least three points"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] == 0 {
        return Err(config("sweep grid must be positive and strictly ascending"));
    }
    Ok(())
}

pub fn run(ctx: &Ctx) -> LabResult<Outcome> {
    let sec = ctx.scenario.sweep.clone().unwrap_or_default();
    let axis = ctx.cfg.axis.or(sec.axis).ok_or_else(|| config("sweep needs an axis (--axis or sweep.axis)"))?;
    let grid = ctx.cfg.grid.clone().or(sec.grid).ok_or_else(|| config("sweep needs a grid (--grid or sweep.grid)"))?;
    check_grid(&grid)?;
    let mut out = Outcome::default();
    let s = match axis {
        Axis::N => sweep_n(ctx, &grid, &mut out)?,
        Axis::T => sweep_t(ctx, &grid, &mut out)?,
        Axis::NG => sweep_ng(ctx, &grid, &mut out)?,
        Axis::TModules => sweep_t_modules(ctx, &grid, &mut out)?,
    };
    let path = ctx.out(&format!("sweep_{}_summary.json", axis.as_str()));
    std::fs::write(path, serde_json::to_string_pretty(&s)? + "\n")?;
    for p in &s.points {
        out.lines.push(format!("sweep {}={} {}={:.6e}", s.axis, p.x, s.metric, p.y));
    }
    out.lines.push(format!("sweep axis={} slope={:.4} stderr={:.4}", s.axis, s.slope, s.stderr));
    Ok(out)
}

fn by_grid<R>(rows: &[R], grid: &[usize], key: impl Fn(&R) -> usize, val: impl Fn(&R) -> f64) -> Vec<Vec<f64>> {
    grid.iter().map(|&g| rows.iter().filter(|r| key(r) == g).map(&val).collect()).collect()
}

fn sweep_n(ctx: &Ctx, grid: &[usize], out: &mut Outcome) -> LabResult<SweepSummary> {
    let sec = section(&ctx.scenario.identify, "identify")?;
    let setup = sec.build()?;
    let runs = ctx.per_seed(|seed| -> LabResult<Vec<ShiftRow>> {
        Ok(robust_shift_experiment(
            &setup.truth,
            &setup.sampler_p,
            &setup.sampler_q,
            &sec.shift_id,
            grid,
            &setup.settings,
            &[seed],
        )?)
    })?;
    let mut rows: Vec<ShiftRow> = runs.iter().flat_map(|r| r.value.iter().cloned()).collect();
    rows.sort_by_key(|r| (r.n, r.seed));
    write_csv(&ctx.out("sweep_n.csv"), &SHIFT_CSV_HEADER, &rows)?;
    ctx.write_runs(&runs, |_, v| to_value(v))?;
    let failed: Vec<u64> = runs.iter().filter(|r| r.value.iter().any(|x| !x.holds)).map(|r| r.seed).collect();
    require(out, sec.require_bounds, "uniform identification bound", &failed);
    let medians: Vec<f64> = by_grid(&rows, grid, |r| r.n, |r| r.sup_gap_sq.sqrt()).iter().map(|v| median(v)).collect();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    summary(Axis::N, grid, "median_sup_gap", medians, json!({ "strictly_decreasing": decreasing }))
}

fn sweep_t(ctx: &Ctx, grid: &[usize], out: &mut Outcome) -> LabResult<SweepSummary> {
    let sec = section(&ctx.scenario.bandit, "bandit")?;
    let (problem, cfg) = sec.build()?;
    let seeds = &ctx.cfg.seeds;
    let runs = ctx.per_seed(|seed| -> LabResult<Vec<SlopeRow>> {
        let replicate = seeds.iter().position(|s| *s == seed).expect("seed is configured");
        let mut rows = regret_slope(&problem, &cfg, grid, &[seed])?.rows;
        for r in &mut rows {
            r.replicate = replicate;
        }
        Ok(rows)
    })?;
    let mut rows: Vec<SlopeRow> = runs.iter().flat_map(|r| r.value.iter().cloned()).collect();
    rows.sort_by_key(|r| (r.horizon, r.replicate));
    write_csv(&ctx.out("sweep_T.csv"), &SLOPE_CSV_HEADER, &rows)?;
    ctx.write_runs(&runs, |_, v| to_value(v))?;
    let consts = problem.constants();
    let d = problem.d();
    let mut means = Vec::new();
    let mut per_horizon = Vec::new();
    let mut failed = Vec::new();
    for (t, vals) in grid.iter().zip(by_grid(&rows, grid, |r| r.horizon, |r| r.cum_regret_final)) {
        let est = MeanEstimate::from_slice(&vals);
        let bound = regret_bound(*t, d, &consts)?;
        let m = exploration_length_scaled(*t, d, &consts, cfg.exploration_scale)?;
        if est.mean > bound {
            failed.push(*t as u64);
        }
        per_horizon.push(json!({ "T": t, "m": m, "mean": est.mean, "std_err": est.std_err, "bound": bound }));
        means.push(est.mean);
    }
    if sec.require_bounds && !failed.is_empty() {
        out.violations.push(format!("mean regret exceeds the closed-form bound at T = {failed:?}"));
    }
    let dominated = failed.is_empty();
    summary(Axis::T, grid, "mean_cum_regret", means, json!({ "per_horizon": per_horizon, "dominated_by_bound": dominated }))
}

fn sweep_ng(ctx: &Ctx, grid: &[usize], out: &mut Outcome) -> LabResult<SweepSummary> {
    let sec = section(&ctx.scenario.transfer, "transfer")?;
    let base = sec.build()?;
    let runs = ctx.per_seed(|seed| -> LabResult<Vec<TransferReport>> {
        grid.iter()
            .map(|&n_g| {
                let mut p = base.clone();
                p.n_g = n_g;
                Ok(run_transfer(&p, sec.delta, &sec.config, seed)?)
            })
            .collect()
    })?;
    let mut rows: Vec<TransferRow> = runs.iter().flat_map(|r| r.value.iter().map(TransferRow::from)).collect();
    rows.sort_by_key(|r| (r.n_g, r.seed));
    write_csv(&ctx.out("sweep_n_g.csv"), &TRANSFER_CSV_HEADER, &rows)?;
    ctx.write_runs(&runs, |_, v| to_value(v))?;
    let failed: Vec<u64> = runs.iter().filter(|r| r.value.iter().any(|x| !x.holds)).map(|r| r.seed).collect();
    require(out, sec.require_bounds, "transfer certificate", &failed);
    let medians: Vec<f64> = by_grid(&rows, grid, |r| r.n_g, |r| r.gold_sup_gap.sqrt()).iter().map(|v| median(v)).collect();
    // eps_g is the same for every seed at a given n_g.
    let eps: Vec<f64> = grid
        .iter()
        .map(|g| rows.iter().find(|r| r.n_g == *g).map(|r| r.eps_g).expect("one row per grid point"))
        .collect();
    let xs: Vec<f64> = grid.iter().map(|&g| g as f64).collect();
    let eps_fit = if eps.iter().all(|e| *e > 0.0) { Some(loglog_fit(&xs, &eps)?) } else { None };
    summary(Axis::NG, grid, "median_gold_sup_gap", medians, json!({ "eps_g": eps, "eps_g_fit": eps_fit }))
}

#[derive(Debug, Clone, Serialize)]
struct ModuleSweepRow {
    t_len: usize,
    seed: u64,
    eps_f: f64,
    eps_g: f64,
    gap_bound: f64,
    mean_gap: f64,
    frequency_within: f64,
    required: f64,
    holds: u8,
}

const MODULE_SWEEP_HEADER: [&str; 9] =
    ["T", "seed", "eps_f", "eps_g", "gap_bound", "mean_gap", "frequency_within", "required", "holds"];

fn sweep_t_modules(ctx: &Ctx, grid: &[usize], out: &mut Outcome) -> LabResult<SweepSummary> {
    let sec = section(&ctx.scenario.modules, "modules")?;
    let setup = ctx.pool.install(|| sec.build())?;
    let specs = grid.iter().map(|&t| setup.shift_spec(sec, t)).collect::<LabResult<Vec<_>>>()?;
    let runs = ctx.per_seed(|seed| -> LabResult<Vec<ModuleSweepRow>> {
        specs
            .iter()
            .map(|spec| {
                let r = theorem5_experiment(
                    &setup.truth,
                    &setup.fitted,
                    &setup.parser_true,
                    &setup.parser_hat,
                    spec,
                    &setup.inputs,
                    sec.n_mc,
                    sec.z,
                    seed,
                )?;
                Ok(ModuleSweepRow {
                    t_len: r.t_len,
                    seed,
                    eps_f: r.eps_f,
                    eps_g: r.eps_g,
                    gap_bound: r.gap_bound,
                    mean_gap: r.rows.iter().map(|w| w.gap_l2).sum::<f64>() / r.rows.len() as f64,
                    frequency_within: r.frequency_within,
                    required: r.required,
                    holds: bit(r.holds),
                })
            })
            .collect()
    })?;
    let mut rows: Vec<ModuleSweepRow> = runs.iter().flat_map(|r| r.value.iter().cloned()).collect();
    rows.sort_by_key(|r| (r.t_len, r.seed));
    write_csv(&ctx.out("sweep_T_modules.csv"), &MODULE_SWEEP_HEADER, &rows)?;
    ctx.write_runs(&runs, |_, v| to_value(v))?;
    let failed: Vec<u64> = runs.iter().filter(|r| r.value.iter().any(|x| x.holds == 0)).map(|r| r.seed).collect();
    require(out, sec.require_bounds, "composition bound", &failed);
    let means: Vec<f64> = by_grid(&rows, grid, |r| r.t_len, |r| r.mean_gap)
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let xs: Vec<f64> = grid.iter().map(|&g| g as f64).collect();
    let linear: LineFit = ols(&xs, &means)?;
    summary(Axis::TModules, grid, "mean_gap_l2", means, json!({ "linear_fit": linear }))
}
