//! The bound-verification suite. Each check runs once per seed and reports a
//! worst-case metric against its bound.

use nalgebra::{DMatrix, DVector};
use qni_core::bandit::{smooth_best_arm_check, ArmVerdict};
use qni_core::identify::{epsilon_bound, theorem1_check, IdentConstants};
use qni_core::linalg::random_unit_symmetric;
use qni_core::module_net::{
    lemma_distshift_check, proposition1_construct, sequence_error_check, theorem5_experiment, tv_distance, Parser,
    ShiftSpec, TokenChain,
};
use qni_core::qnn::{
    estimate_alpha, generate_dataset, induced, loss_term, train_gd, BoundSpec, CovariateSampler, InducedForm, NoiseKind,
    QuadNet, TrainConfig,
};
use qni_core::rng::{derive_seed, seeded, Rng};
use qni_core::transfer::{align, sigma_min};
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use super::{bit, to_value, write_csv, Ctx};
use crate::error::LabResult;
use crate::scenario::{section, ModulesSection, VerifySection};
use crate::Outcome;

pub const CHECKS: [&str; 10] = [
    "strong-convexity",
    "loss-lipschitz",
    "concentration-radius-monotone",
    "uniform-identification",
    "smooth-best-arm",
    "orthogonal-alignment",
    "sequence-tv-blowup",
    "mixture-tv-linear",
    "parse-error-union",
    "composition-bound",
];

pub const VERIFY_CSV_HEADER: [&str; 5] = ["check", "seed", "holds", "metric", "bound"];

/// `holds` compares `metric` with `bound`; the direction depends on the check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: &'static str,
    pub seed: u64,
    pub holds: u8,
    pub metric: f64,
    pub bound: f64,
}

fn at_least(check: &'static str, seed: u64, metric: f64, bound: f64) -> CheckResult {
    CheckResult { check, seed, holds: bit(metric >= bound), metric, bound }
}

fn at_most(check: &'static str, seed: u64, metric: f64, bound: f64) -> CheckResult {
    CheckResult { check, seed, holds: bit(metric <= bound), metric, bound }
}

fn in_ball(d: usize, r: f64, rng: &mut Rng) -> DVector<f64> {
    let x = DVector::<f64>::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let scale = r * rng.random::<f64>().powf(1.0 / d as f64);
    x.normalize() * scale
}

/// Minimum sampled directional moment on the cube `[-1/2, 1/2]^3`.
fn strong_convexity(seed: u64, v: &VerifySection) -> LabResult<CheckResult> {
    let est = estimate_alpha(&CovariateSampler::uniform_cube(3, 0.5)?, v.alpha_mc, v.alpha_directions, seed)?;
    Ok(at_least(CHECKS[0], seed, est.alpha, 1.0 / 180.0 - 0.001))
}

/// Largest `|l(phi1) - l(phi2)| / (K ||phi1 - phi2||_F)` over random pairs.
fn loss_lipschitz(seed: u64, v: &VerifySection) -> LabResult<CheckResult> {
    let mut rng = seeded(seed);
    let (d, phi_max, x_max) = (3, 1.0, 1.0);
    let k_lip = 4.0 * phi_max * f64::powi(x_max, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..v.lipschitz_pairs {
        let form = |rng: &mut Rng| -> LabResult<InducedForm> {
            let p = induced(&QuadNet::random_uniform(d, 4, 1.0, rng)?);
            let s = phi_max * rng.random::<f64>() / p.frobenius_norm();
            Ok(InducedForm::symmetrized(&(p.phi() * s))?)
        };
        let (a, b, truth) = (form(&mut rng)?, form(&mut rng)?, form(&mut rng)?);
        let x = in_ball(d, x_max, &mut rng);
        let y = truth.eval(&x)?;
        let diff = (a.phi() - b.phi()).norm();
        if diff > 0.0 {
            worst = worst.max((loss_term(&a, &x, y)? - loss_term(&b, &x, y)?).abs() / (k_lip * diff));
        }
    }
    Ok(at_most(CHECKS[1], seed, worst, 1.0 + 1e-12))
}

/// Counts grid steps where the radius fails to shrink with `n` or grow as
/// `delta` shrinks.
fn radius_monotone(seed: u64, _: &VerifySection) -> LabResult<CheckResult> {
    let d = 1 + (seed % 5) as usize;
    let c = IdentConstants { ell_max: 2.0, xi_max: 0.1, phi_max: 1.0, k_lip: 4.0 };
    let mut bad = 0usize;
    let ns: Vec<usize> = (0..20u32).map(|i| 10usize.pow(1 + i / 4) * (1 + (i % 4) as usize * 2)).collect();
    let deltas = [0.5, 0.2, 0.1, 0.05, 0.01, 0.001];
    for &delta in &deltas {
        let eps = ns.iter().map(|&n| Ok(epsilon_bound(n, d, delta, c)?.epsilon)).collect::<LabResult<Vec<_>>>()?;
        bad += eps.windows(2).filter(|w| !(w[1] < w[0])).count();
    }
    for &n in &ns {
        let eps = deltas.iter().map(|&dl| Ok(epsilon_bound(n, d, dl, c)?.epsilon)).collect::<LabResult<Vec<_>>>()?;
        bad += eps.windows(2).filter(|w| !(w[1] > w[0])).count();
    }
    Ok(at_most(CHECKS[2], seed, bad as f64, 0.0))
}

/// Fraction of identification runs whose sup gap is within the certificate.
fn uniform_identification(seed: u64, v: &VerifySection) -> LabResult<CheckResult> {
    let s = CovariateSampler::uniform_cube(3, 0.5)?;
    let alpha = s.closed_form_alpha().expect("cube has a closed form");
    let delta = 0.1;
    let n = 2000;
    let mut holds = 0;
    for r in 0..v.identification_runs {
        let stream = derive_seed(seed, r as u64);
        let truth = QuadNet::random_uniform(3, 6, 0.6, &mut seeded(stream))?;
        let b = BoundSpec::from_theta_max(s.support_radius(), 1.5 * truth.frobenius_norm(), 0.05)?;
        let data = generate_dataset(&truth, &s, 0.05, NoiseKind::Uniform, n, derive_seed(stream, 1))?;
        let fitted = train_gd(&data, 3, 6, &TrainConfig::default().with_seed(derive_seed(stream, 2)))?.net;
        let bound = epsilon_bound(n, 3, delta, IdentConstants::from_bounds(&b))?;
        let verdict = theorem1_check(&truth, &fitted, &bound, alpha, b.x_max)?;
        holds += usize::from(verdict.holds && verdict.frob_holds);
    }
    let frac = holds as f64 / v.identification_runs.max(1) as f64;
    Ok(at_least(CHECKS[3], seed, frac, 1.0 - delta))
}

/// Violations of `||x_hat - x*|| <= M ||phi - phi*||_F` under random
/// perturbations of a diagonal spectrum.
fn smooth_best_arm(seed: u64, v: &VerifySection) -> LabResult<CheckResult> {
    let mut rng = seeded(seed);
    let d = 3;
    let phi_star = InducedForm::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.2])))?;
    let m_gap = 4.0 / 0.5;
    let mut violations = 0;
    for _ in 0..v.arm_perturbations {
        let e = random_unit_symmetric(d, &mut rng) * rng.random_range(0.0..0.3);
        let phi = InducedForm::symmetrized(&(phi_star.phi() + e))?;
        if smooth_best_arm_check(&phi, &phi_star, m_gap)?.verdict == ArmVerdict::Violated {
            violations += 1;
        }
    }
    Ok(at_most(CHECKS[4], seed, violations as f64, 0.0))
}

/// Worst `aligned_gap / bound` over random pairs with `sigma_min(theta') >= 0.2`,
/// counting any rotation that fails to be orthogonal as a violation.
fn orthogonal_alignment(seed: u64, v: &VerifySection) -> LabResult<CheckResult> {
    let mut rng = seeded(seed);
    let (d, k) = (3, 5);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < v.alignment_pairs {
        let tp = QuadNet::random_uniform(d, k, 1.0, &mut rng)?;
        let s = sigma_min(&tp)?;
        if s < 0.2 {
            continue;
        }
        let noise = DMatrix::<f64>::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0)) * rng.random_range(0.0..0.5);
        let t = QuadNet::new(tp.theta() + noise)?;
        let a = align(&t, &tp, s)?;
        let id = DMatrix::<f64>::identity(k, k);
        let residual = (&a.r * a.r.transpose() - &id).norm().max((&a.r_prime * a.r_prime.transpose() - &id).norm());
        let ratio = if residual > 1e-10 { f64::INFINITY } else if a.bound > 0.0 { a.aligned_gap / a.bound } else { 0.0 };
        worst = worst.max(ratio);
        done += 1;
    }
    Ok(at_most(CHECKS[5], seed, worst, 1.0 + 1e-12))
}

/// Largest deviation of the brute-force word TV from `2 (1 - (1 - a/2)^T)`.
fn sequence_tv(seed: u64, v: &VerifySection) -> LabResult<CheckResult> {
    let mut worst: f64 = 0.0;
    for &a in &v.shift_alphas {
        for t in 1..=v.shift_max_t {
            let (spec, exact) = proposition1_construct(a, t)?;
            let tv = tv_distance(&spec.base().sequence_distribution()?, &spec.shifted().sequence_distribution()?)?;
            let formula = 2.0 * (1.0 - (1.0 - a / 2.0).powi(t as i32));
            worst = worst.max((tv - exact).abs()).max((tv - formula).abs());
        }
    }
    Ok(at_most(CHECKS[6], seed, worst, 1e-12))
}

/// Specs whose mixture TV exceeds `T alpha` (averaged) or `t alpha` (per step).
fn mixture_tv(seed: u64, v: &VerifySection) -> LabResult<CheckResult> {
    let mut rng = seeded(seed);
    let mut violations = 0;
    for i in 0..v.distshift_specs {
        let alpha = if i % 2 == 0 { 0.05 } else { 0.2 };
        let base = TokenChain::random(4, 8, &mut rng)?;
        let spec = ShiftSpec::random(&base, alpha, &mut rng)?;
        let parser = Parser::random(4, 3, &mut rng)?;
        let r = lemma_distshift_check(&spec, &parser)?;
        violations += usize::from(!(r.holds && r.per_step_holds));
    }
    Ok(at_most(CHECKS[7], seed, violations as f64, 0.0))
}

/// Corrupted parsers whose exact sequence error exceeds `T eps_g`.
fn parse_error_union(seed: u64, v: &VerifySection) -> LabResult<CheckResult> {
    let mut rng = seeded(seed);
    let mut violations = 0;
    for _ in 0..v.errbound_parsers {
        let chain = TokenChain::random(3, 5, &mut rng)?;
        let truth = Parser::random(3, 3, &mut rng)?;
        let rate = rng.random_range(0.0..0.5);
        let hat = truth.corrupted(rate, &mut rng)?;
        let r = sequence_error_check(&hat, &truth, &chain, 0, 0)?;
        violations += usize::from(!r.holds);
    }
    Ok(at_most(CHECKS[8], seed, violations as f64, 0.0))
}

/// Within-bound frequency minus `1 - T eps_g - T^2 alpha` less the band.
fn composition_bound(seed: u64, v: &VerifySection) -> LabResult<CheckResult> {
    let sec = ModulesSection { library_seed: seed, n_mc: v.composition_words, ..ModulesSection::default() };
    let setup = sec.build()?;
    let spec = setup.shift_spec(&sec, sec.t_len)?;
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
    Ok(at_least(CHECKS[9], seed, r.frequency_within, r.required - r.band))
}

type CheckFn = fn(u64, &VerifySection) -> LabResult<CheckResult>;

const RUNNERS: [CheckFn; 10] = [
    strong_convexity,
    loss_lipschitz,
    radius_monotone,
    uniform_identification,
    smooth_best_arm,
    orthogonal_alignment,
    sequence_tv,
    mixture_tv,
    parse_error_union,
    composition_bound,
];

pub fn run(ctx: &Ctx) -> LabResult<Outcome> {
    let sec = section(&ctx.scenario.verify, "verify")?;
    let runs = ctx.per_seed(|seed| -> LabResult<Vec<CheckResult>> {
        RUNNERS.par_iter().map(|f| f(seed, sec)).collect()
    })?;
    let results: Vec<&CheckResult> = runs.iter().flat_map(|r| r.value.iter()).collect();
    write_csv(&ctx.out("verify.csv"), &VERIFY_CSV_HEADER, results.iter().copied())?;
    ctx.write_runs(&runs, |_, v| to_value(v))?;

    let mut out = Outcome::default();
    for name in CHECKS {
        let mine: Vec<&&CheckResult> = results.iter().filter(|r| r.check == name).collect();
        let failed: Vec<u64> = mine.iter().filter(|r| r.holds == 0).map(|r| r.seed).collect();
        let worst = mine.iter().map(|r| r.metric).fold(f64::NAN, |a, b| if a.is_nan() { b } else { pick(name, a, b) });
        let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
        out.lines.push(format!(
            "{verdict} {name} seeds={} worst={worst:.6e} bound={:.6e}",
            mine.len(),
            mine.first().map(|r| r.bound).unwrap_or(f64::NAN)
        ));
        if !failed.is_empty() {
            out.violations.push(format!("{name} violated for seeds {failed:?}"));
        }
    }
    Ok(out)
}

/// The worse of two metrics: the smaller one for lower-bound checks.
fn pick(name: &str, a: f64, b: f64) -> f64 {
    match name {
        "strong-convexity" | "uniform-identification" | "composition-bound" => a.min(b),
        _ => a.max(b),
    }
}
