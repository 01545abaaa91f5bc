//! Explore-then-commit bandit whose expected reward is a quadratic network
//! over the unit ball.

use nalgebra::DVector;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::sym_eigen;
use crate::qnn::{
    forward, induced, train_gd, BoundSpec, Dataset, InducedForm, NoiseKind, QuadNet, Sample, TrainConfig,
};
use crate::rng::{derive_seed, seeded, Rng};
use crate::stats::{loglog_fit, LineFit, MeanEstimate};

const DEGENERATE_GAP: f64 = 1e-12;

/// Constants entering the exploration length and regret bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BanditConstants {
    /// Eigengap constant `M`.
    pub m_gap: f64,
    pub ell_max: f64,
    pub phi_max: f64,
    pub k_lip: f64,
}

impl BanditConstants {
    pub fn new(m_gap: f64, bounds: &BoundSpec) -> Self {
        BanditConstants {
            m_gap,
            ell_max: crate::qnn::ell_max(bounds),
            phi_max: bounds.phi_max,
            k_lip: crate::qnn::lipschitz_k(bounds),
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.m_gap, self.ell_max, self.phi_max, self.k_lip];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("bandit constants must be positive and finite"));
        }
        Ok(())
    }

    fn log_factor(&self, horizon: usize) -> f64 {
        (3.0 + 8.0 * self.phi_max * self.k_lip * horizon as f64 / (self.ell_max * self.ell_max)).ln()
    }
}

/// `ceil((60 M l^2 d^{7/5} T sqrt(ln(3 + 8 phi K T / l^2)) / phi)^{2/3})`, clamped to `T`.
pub fn exploration_length(horizon: usize, d: usize, consts: &BanditConstants) -> Result<usize> {
    exploration_length_scaled(horizon, d, consts, 1.0)
}

/// Exploration length multiplied by `scale` before rounding up, clamped to
/// `[1, T]`. `scale = 1` is the unmodified schedule.
pub fn exploration_length_scaled(horizon: usize, d: usize, consts: &BanditConstants, scale: f64) -> Result<usize> {
    if horizon == 0 || d == 0 {
        return Err(invalid("horizon and dimension must be positive"));
    }
    consts.validate()?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(invalid("exploration scale must be positive"));
    }
    let c = consts;
    let ln_inner = (60.0 * c.m_gap * c.ell_max * c.ell_max / c.phi_max).ln()
        + 1.4 * (d as f64).ln()
        + (horizon as f64).ln()
        + 0.5 * c.log_factor(horizon).ln();
    let raw = scale.ln() + ln_inner * 2.0 / 3.0;
    let m = if raw >= (horizon as f64).ln() { horizon as f64 } else { raw.exp().ceil() };
    Ok((m as usize).clamp(1, horizon))
}

/// One exploration action: coordinates i.i.d. uniform on `[-1/sqrt(d), 1/sqrt(d)]`.
pub fn sample_exploration_action(d: usize, rng: &mut Rng) -> DVector<f64> {
    let c = 1.0 / (d as f64).sqrt();
    DVector::from_fn(d, |_, _| rng.random_range(-c..=c))
}

/// Unit top eigenvector of `phi` and its eigenvalue. The sign makes the first
/// non-negligible coordinate positive. For a PSD form this maximizes
/// `x^T phi x` over the unit ball.
pub fn best_arm(phi: &InducedForm) -> (DVector<f64>, f64) {
    let eig = phi.eigen();
    let x = eig.vector(0);
    let value = phi.eval(&x).expect("matching dimension");
    (x, value)
}

/// `M = 4 / (lambda_1 - lambda_2)`.
pub fn eigengap_m(phi_star: &InducedForm) -> Result<f64> {
    if phi_star.d() < 2 {
        return Err(invalid("eigengap needs d >= 2"));
    }
    let eig = phi_star.eigen();
    let gap = eig.values[0] - eig.values[1];
    if gap <= DEGENERATE_GAP {
        return Err(Error::AssumptionViolated(format!("top eigenvalue is degenerate (gap {gap:e})")));
    }
    Ok(4.0 / gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditProblem {
    pub theta_star: QuadNet,
    pub xi_max: f64,
    pub noise: NoiseKind,
    pub horizon: usize,
    /// Eigengap constant `M`.
    pub m_gap: f64,
    /// Bounds with `x_max = 1` (the action set is the unit ball).
    pub bounds: BoundSpec,
}

impl BanditProblem {
    /// Validates `lambda_1 - lambda_2 >= 4 / M`. Without an explicit `M` the
    /// smallest admissible value `4 / (lambda_1 - lambda_2)` is used.
    pub fn new(theta_star: QuadNet, xi_max: f64, horizon: usize, m_gap: Option<f64>, bounds: BoundSpec) -> Result<Self> {
        let exact = eigengap_m(&induced(&theta_star))?;
        let m_gap = m_gap.unwrap_or(exact);
        if m_gap < exact * (1.0 - 1e-12) {
            return Err(Error::AssumptionViolated(format!("M = {m_gap} is below 4/(lambda_1 - lambda_2) = {exact}")));
        }
        BanditProblem::without_gap_check(theta_star, xi_max, horizon, m_gap, bounds)
    }

    /// Skips the eigengap validation, for degenerate problems such as `theta* = 0`.
    pub fn without_gap_check(theta_star: QuadNet, xi_max: f64, horizon: usize, m_gap: f64, bounds: BoundSpec) -> Result<Self> {
        bounds.validate()?;
        if (bounds.x_max - 1.0).abs() > 1e-12 {
            return Err(invalid("the action set is the unit ball, so x_max must be 1"));
        }
        if horizon == 0 {
            return Err(invalid("horizon must be positive"));
        }
        if !(xi_max >= 0.0) {
            return Err(invalid("xi_max must be nonnegative"));
        }
        theta_star.check_bounds(&bounds)?;
        Ok(BanditProblem { theta_star, xi_max, noise: NoiseKind::Uniform, horizon, m_gap, bounds })
    }

    pub fn with_noise(mut self, noise: NoiseKind) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn d(&self) -> usize {
        self.theta_star.d()
    }

    pub fn constants(&self) -> BanditConstants {
        BanditConstants::new(self.m_gap, &self.bounds)
    }

    /// `y* = max_{||x|| <= 1} f*(x) = lambda_1(phi*)`.
    pub fn best_value(&self) -> f64 {
        sym_eigen(induced(&self.theta_star).phi()).expect("finite").max().max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EtcConfig {
    pub train: TrainConfig,
    /// Width of the fitted network; `None` uses the width of `theta*`.
    pub k: Option<usize>,
    /// Multiplier applied to the exploration length before clamping.
    pub exploration_scale: f64,
}

impl Default for EtcConfig {
    fn default() -> Self {
        EtcConfig { train: TrainConfig::default(), k: None, exploration_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Explore,
    Commit,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Explore => "explore",
            Phase::Commit => "commit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditTrace {
    pub m: usize,
    /// Whether the exploration schedule had to be clamped to the horizon.
    pub clamped: bool,
    pub actions: Vec<DVector<f64>>,
    pub rewards: Vec<f64>,
    pub inst_regret: Vec<f64>,
    pub fitted: QuadNet,
    pub committed_arm: DVector<f64>,
    pub y_star: f64,
}

/// One CSV row of a trace; `t` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub phase: &'static str,
    pub reward: f64,
    pub inst_regret: f64,
    pub cum_regret: f64,
}

pub const TRACE_CSV_HEADER: [&str; 5] = ["t", "phase", "reward", "inst_regret", "cum_regret"];

impl BanditTrace {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn cumulative_regret(&self) -> f64 {
        self.inst_regret.iter().sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = TraceRow> + '_ {
        let mut cum = 0.0;
        (0..self.horizon()).map(move |i| {
            cum += self.inst_regret[i];
            TraceRow {
                t: i + 1,
                phase: if i < self.m { Phase::Explore } else { Phase::Commit }.as_str(),
                reward: self.rewards[i],
                inst_regret: self.inst_regret[i],
                cum_regret: cum,
            }
        })
    }
}

/// Explore for `m` steps, fit by gradient descent, then play the top
/// eigenvector of the fitted form for the remaining steps.
pub fn run_etc(problem: &BanditProblem, cfg: &EtcConfig, seed: u64) -> Result<BanditTrace> {
    let d = problem.d();
    let horizon = problem.horizon;
    let consts = problem.constants();
    let unscaled = exploration_length_scaled(horizon, d, &consts, 1.0)?;
    let m = exploration_length_scaled(horizon, d, &consts, cfg.exploration_scale)?;
    let clamped = m == horizon;
    if unscaled == horizon && cfg.exploration_scale == 1.0 {
        log::debug!("exploration schedule clamped to the horizon T = {horizon}");
    }
    let y_star = problem.best_value();
    let mut rng = seeded(derive_seed(seed, 1));
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut inst_regret = Vec::with_capacity(horizon);
    let mut samples = Vec::with_capacity(m);
    for _ in 0..m {
        let x = sample_exploration_action(d, &mut rng);
        let mean = forward(&problem.theta_star, &x)?;
        let xi = problem.noise.sample(problem.xi_max, &mut rng);
        rewards.push(mean + xi);
        inst_regret.push(y_star - mean);
        samples.push(Sample { x: x.clone(), y: mean + xi, xi: Some(xi) });
        actions.push(x);
    }
    let data = Dataset::new(d, samples, None)?;
    let k = cfg.k.unwrap_or(problem.theta_star.k());
    let fitted = train_gd(&data, d, k, &cfg.train.with_seed(derive_seed(seed, 2)))
        .map_err(|e| match e {
            Error::Diverged { iteration, loss } => {
                log::warn!("bandit fit diverged after m = {m} exploration steps");
                Error::Diverged { iteration, loss }
            }
            other => other,
        })?
        .net;
    let (arm, _) = best_arm(&induced(&fitted));
    let committed_mean = forward(&problem.theta_star, &arm)?;
    for _ in m..horizon {
        let xi = problem.noise.sample(problem.xi_max, &mut rng);
        rewards.push(committed_mean + xi);
        inst_regret.push(y_star - committed_mean);
        actions.push(arm.clone());
    }
    Ok(BanditTrace { m, clamped, actions, rewards, inst_regret, fitted, committed_arm: arm, y_star })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmVerdict {
    Holds,
    Violated,
    /// The eigengap premise fails, so no verdict is given.
    AssumptionBreach,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothArmReport {
    pub x_hat: Vec<f64>,
    pub x_star: Vec<f64>,
    /// `||phi - phi*||_F`.
    pub perturbation: f64,
    /// `||x_hat - x*||`, signs aligned so `<x_hat, x*> >= 0`.
    pub arm_gap: f64,
    /// `||x_hat x_hat^T - x* x*^T||_F`.
    pub projector_gap: f64,
    /// `2^{3/2} ||phi - phi*||_op / (lambda_1 - lambda_2)` of `phi*`.
    pub davis_kahan: f64,
    pub verdict: ArmVerdict,
}

/// Checks `||x_hat - x*|| <= M ||phi - phi*||_F` and
/// `||x_hat x_hat^T - x* x*^T||_F <= 2 M ||phi - phi*||_F`.
pub fn smooth_best_arm_check(phi: &InducedForm, phi_star: &InducedForm, m_gap: f64) -> Result<SmoothArmReport> {
    crate::error::check_dim(phi_star.d(), phi.d())?;
    let eig_star = phi_star.eigen();
    let eig = phi.eigen();
    let gap_star = eig_star.values[0] - eig_star.values.get(1).copied().unwrap_or(f64::NEG_INFINITY);
    let gap_hat = eig.values[0] - eig.values.get(1).copied().unwrap_or(f64::NEG_INFINITY);
    let x_star = eig_star.vector(0);
    let mut x_hat = eig.vector(0);
    if x_hat.dot(&x_star) < 0.0 {
        x_hat.neg_mut();
    }
    let e = phi.phi() - phi_star.phi();
    let perturbation = e.norm();
    let op = crate::linalg::spectral_radius(&e)?.0;
    let arm_gap = (&x_hat - &x_star).norm();
    let projector_gap = (&x_hat * x_hat.transpose() - &x_star * x_star.transpose()).norm();
    let davis_kahan = 2f64.powf(1.5) * op / gap_star;
    let premise = gap_star >= 4.0 / m_gap * (1.0 - 1e-12) && gap_hat > DEGENERATE_GAP;
    let verdict = if !premise {
        ArmVerdict::AssumptionBreach
    } else if arm_gap <= m_gap * perturbation + 1e-12 && projector_gap <= 2.0 * m_gap * perturbation + 1e-12 {
        ArmVerdict::Holds
    } else {
        ArmVerdict::Violated
    };
    Ok(SmoothArmReport {
        x_hat: x_hat.iter().copied().collect(),
        x_star: x_star.iter().copied().collect(),
        perturbation,
        arm_gap,
        projector_gap,
        davis_kahan,
        verdict,
    })
}

/// `(C0, C1)` of the closed-form regret bound, computed in log space.
pub fn theorem6_constants(d: usize, consts: &BanditConstants) -> Result<(f64, f64)> {
    if d < 2 {
        return Err(invalid("regret constants need d >= 2"));
    }
    consts.validate()?;
    let c = consts;
    let df = d as f64;
    let d2 = df * df;
    let e1 = (2.0 * d2 + 2.0) / (2.0 * d2 - 1.0);
    let e2 = 3.0 * d2 / (2.0 * d2 - 1.0);
    let ln_c0 = e1 * c.phi_max.ln()
        - 4f64.ln()
        - e1 * (15.0 * c.m_gap * c.ell_max * c.ell_max * df.powf(1.4)).ln()
        - e2 * (8.0 * c.phi_max * c.k_lip / (c.ell_max * c.ell_max)).ln();
    let ln_c1 = (4.0 / 3.0) * 16f64.ln()
        + (14.0 / 15.0) * df.ln()
        + (2.0 * c.m_gap.ln() + 4.0 * c.ell_max.ln() + c.phi_max.ln()) / 3.0;
    Ok((ln_c0.exp(), ln_c1.exp()))
}

/// `C0 + C1 T^{2/3} ln(3 + 8 phi K T / l^2)^{1/3}`.
pub fn regret_bound(horizon: usize, d: usize, consts: &BanditConstants) -> Result<f64> {
    let (c0, c1) = theorem6_constants(d, consts)?;
    Ok(c0 + c1 * (horizon as f64).powf(2.0 / 3.0) * consts.log_factor(horizon).powf(1.0 / 3.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub replicate: usize,
    pub cum_regret_final: f64,
}

pub const SLOPE_CSV_HEADER: [&str; 3] = ["T", "replicate", "cum_regret_final"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub m: usize,
    pub mean: f64,
    pub std_err: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSlope {
    pub rows: Vec<SlopeRow>,
    pub per_horizon: Vec<HorizonSummary>,
    /// `None` when every mean regret is zero, so no slope exists.
    pub fit: Option<LineFit>,
}

impl RegretSlope {
    pub fn degenerate(&self) -> bool {
        self.fit.is_none()
    }

    pub fn dominated_by_bound(&self) -> bool {
        self.per_horizon.iter().all(|h| h.mean <= h.bound)
    }
}

/// Mean cumulative regret over seeded replicates at each horizon, and the
/// least-squares slope of `ln R` against `ln T`.
pub fn regret_slope(problem: &BanditProblem, cfg: &EtcConfig, horizons: &[usize], seeds: &[u64]) -> Result<RegretSlope> {
    if horizons.len() < 2 || seeds.is_empty() {
        return Err(invalid("slope needs two or more horizons and one or more seeds"));
    }
    let cells: Vec<(usize, usize, u64)> = horizons
        .iter()
        .flat_map(|&t| seeds.iter().enumerate().map(move |(r, &s)| (t, r, s)))
        .collect();
    let finals = cells
        .par_iter()
        .map(|&(t, r, s)| {
            let p = problem.clone().with_horizon(t);
            let trace = run_etc(&p, cfg, derive_seed(s, t as u64))?;
            Ok((SlopeRow { horizon: t, replicate: r, cum_regret_final: trace.cumulative_regret() }, trace.m))
        })
        .collect::<Result<Vec<_>>>()?;
    let d = problem.d();
    let consts = problem.constants();
    let mut per_horizon = Vec::new();
    for &t in horizons {
        let vals: Vec<f64> = finals.iter().filter(|(r, _)| r.horizon == t).map(|(r, _)| r.cum_regret_final).collect();
        let m = finals.iter().find(|(r, _)| r.horizon == t).map(|(_, m)| *m).unwrap_or(0);
        let est = MeanEstimate::from_slice(&vals);
        let bound = if d >= 2 { regret_bound(t, d, &consts)? } else { f64::INFINITY };
        per_horizon.push(HorizonSummary { horizon: t, m, mean: est.mean, std_err: est.std_err, bound });
    }
    let mut rows: Vec<SlopeRow> = finals.into_iter().map(|(r, _)| r).collect();
    rows.sort_by_key(|r| (r.horizon, r.replicate));
    let fit = if per_horizon.iter().all(|h| h.mean > 0.0) {
        let xs: Vec<f64> = per_horizon.iter().map(|h| h.horizon as f64).collect();
        let ys: Vec<f64> = per_horizon.iter().map(|h| h.mean).collect();
        Some(loglog_fit(&xs, &ys)?)
    } else {
        None
    };
    Ok(RegretSlope { rows, per_horizon, fit })
}
