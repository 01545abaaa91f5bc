//! Function identification: the uniform concentration radius, exact sup
//! gaps between quadratic forms, and the resulting certified bound.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::linalg::spectral_radius;
use crate::qnn::{
    ell_max, estimate_alpha, forward, generate_dataset, induced, lipschitz_k, train_gd, AsInduced, BoundSpec,
    CovariateSampler, Dataset, NoiseKind, QuadNet, TrainConfig,
};
use crate::rng::{derive_seed, seeded};

/// The constants the concentration radius depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentConstants {
    pub ell_max: f64,
    pub xi_max: f64,
    pub phi_max: f64,
    /// Lipschitz constant `K`.
    pub k_lip: f64,
}

impl IdentConstants {
    pub fn from_bounds(b: &BoundSpec) -> Self {
        IdentConstants { ell_max: ell_max(b), xi_max: b.xi_max, phi_max: b.phi_max, k_lip: lipschitz_k(b) }
    }

    fn validate(&self) -> Result<()> {
        let pos = [self.ell_max, self.phi_max, self.k_lip];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.xi_max >= 0.0) {
            return Err(invalid("constants must be positive (xi_max nonnegative)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentBound {
    pub epsilon: f64,
    pub n: usize,
    pub d: usize,
    pub delta: f64,
    pub constants: IdentConstants,
}

impl IdentBound {
    /// `2 K^2 eps / alpha`, the certified bound on the squared sup gap.
    pub fn certified_sup_gap_sq(&self, alpha: f64) -> f64 {
        2.0 * self.constants.k_lip.powi(2) * self.epsilon / alpha
    }

    /// `sqrt(2 eps / alpha)`, the certified bound on the Frobenius gap.
    pub fn certified_frob_gap(&self, alpha: f64) -> f64 {
        (2.0 * self.epsilon / alpha).sqrt()
    }
}

/// Natural logarithm of the radius
/// `sqrt(18 l^2 (l^2 + xi^2) / n * (d^2 max{1, ln(1 + 8 phi K n / l^2)} + log_conf))`.
///
/// `lead_sq` is the `l^2 (l^2 + xi^2)` factor; callers substitute their own
/// leading constants.
pub(crate) fn ln_radius(n: usize, d: usize, lead_sq: f64, ell: f64, phi_max: f64, k_lip: f64, log_conf: f64) -> f64 {
    let nf = n as f64;
    let inner = 8.0 * phi_max * k_lip / (ell * ell) * nf;
    let log_term = inner.ln_1p().max(1.0);
    let bracket = (d * d) as f64 * log_term + log_conf;
    0.5 * (18.0f64.ln() + lead_sq.ln() - nf.ln() + bracket.ln())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// The uniform deviation radius between empirical and population loss.
pub fn epsilon_bound(n: usize, d: usize, delta: f64, consts: IdentConstants) -> Result<IdentBound> {
    check_delta(delta)?;
    consts.validate()?;
    if n == 0 || d == 0 {
        return Err(invalid("n and d must be positive"));
    }
    let l = consts.ell_max;
    let lead = l * l * (l * l + consts.xi_max * consts.xi_max);
    let eps = ln_radius(n, d, lead, l, consts.phi_max, consts.k_lip, (2.0 / delta).ln()).exp();
    Ok(IdentBound { epsilon: eps, n, d, delta, constants: consts })
}

/// Sup over the ball of `(f_a - f_b)^2`, and the Frobenius gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub sup_gap_sq: f64,
    pub frob_gap: f64,
    /// A point of norm `x_max` attaining the sup.
    pub witness_x: Vec<f64>,
}

impl GapReport {
    /// `sup |f_a - f_b|`.
    pub fn sup_gap(&self) -> f64 {
        self.sup_gap_sq.sqrt()
    }

    pub fn witness(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.witness_x)
    }
}

/// Exact sup gap: with `D = phi_a - phi_b`, `sup_{||x|| <= r} |x^T D x|` is
/// `r^2` times the spectral radius of `D`, attained at the matching
/// eigenvector.
pub fn sup_function_gap(a: impl AsInduced, b: impl AsInduced, x_max: f64) -> Result<GapReport> {
    if !(x_max >= 0.0) {
        return Err(invalid("x_max must be nonnegative"));
    }
    let (fa, fb) = (a.induced_form(), b.induced_form());
    check_dim(fa.d(), fb.d())?;
    let delta = fa.phi() - fb.phi();
    let (rho, v) = spectral_radius(&delta)?;
    let sup = x_max * x_max * rho;
    Ok(GapReport { sup_gap_sq: sup * sup, frob_gap: delta.norm(), witness_x: (v * x_max).iter().copied().collect() })
}

/// `||phi_a - phi_b||_F`.
pub fn frobenius_gap(a: impl AsInduced, b: impl AsInduced) -> Result<f64> {
    let (fa, fb) = (a.induced_form(), b.induced_form());
    check_dim(fa.d(), fb.d())?;
    Ok((fa.phi() - fb.phi()).norm())
}

/// `(1 + 2R/eps)^(n1 n2)`, the covering number bound for a Frobenius ball of
/// radius `R` in `n1 x n2` matrices. Overflows to infinity for large sizes;
/// see [`ln_covering_number_bound`].
pub fn covering_number_bound(n1: usize, n2: usize, radius: f64, eps: f64) -> Result<f64> {
    Ok(ln_covering_number_bound(n1, n2, radius, eps)?.exp())
}

pub fn ln_covering_number_bound(n1: usize, n2: usize, radius: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(invalid("covering radius must be positive"));
    }
    if !(radius >= 0.0) {
        return Err(invalid("ball radius must be nonnegative"));
    }
    Ok((n1 * n2) as f64 * (2.0 * radius / eps).ln_1p())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationVerdict {
    pub measured: GapReport,
    /// `2 K^2 eps / alpha`.
    pub certified: f64,
    pub holds: bool,
    /// `sqrt(2 eps / alpha)`.
    pub frob_certified: f64,
    pub frob_holds: bool,
}

/// Compares the measured sup gap against the certified bound.
pub fn theorem1_check(truth: &QuadNet, fitted: &QuadNet, bound: &IdentBound, alpha: f64, x_max: f64) -> Result<IdentificationVerdict> {
    if !(alpha > 0.0) {
        return Err(invalid("alpha must be positive"));
    }
    let measured = sup_function_gap(fitted, truth, x_max)?;
    let certified = bound.certified_sup_gap_sq(alpha);
    let frob_certified = bound.certified_frob_gap(alpha);
    Ok(IdentificationVerdict {
        holds: measured.sup_gap_sq <= certified,
        frob_holds: measured.frob_gap <= frob_certified,
        measured,
        certified,
        frob_certified,
    })
}

/// The strong-convexity constant to certify with: the closed form when the
/// sampler has one, otherwise the Monte-Carlo estimate. The label names the
/// source.
pub fn alpha_for(sampler: &CovariateSampler, n_mc: usize, n_directions: usize, seed: u64) -> Result<(f64, &'static str)> {
    match sampler.closed_form_alpha() {
        Some(a) => Ok((a, "closed_form")),
        None => Ok((estimate_alpha(sampler, n_mc, n_directions, seed)?.alpha, "monte_carlo")),
    }
}

/// Largest `|L_p(theta) - L_hat(theta) - sigma(Z)|` over a finite set of
/// parameters, with `L_p` computed exactly for samplers with a closed-form
/// quartic moment.
pub fn concentration_deviation(truth: &QuadNet, params: &[QuadNet], sampler: &CovariateSampler, data: &Dataset) -> Result<f64> {
    let sigma = data.noise_energy().ok_or_else(|| invalid("dataset has no recorded noise"))?;
    let phi_star = induced(truth);
    let mut worst: f64 = 0.0;
    for p in params {
        let delta = induced(p).phi() - phi_star.phi();
        let lp = sampler
            .quartic_moment(&delta)?
            .ok_or_else(|| invalid("sampler has no closed-form quartic moment"))?;
        let lhat = crate::qnn::empirical_loss(p, data)?;
        worst = worst.max((lp - lhat - sigma).abs());
    }
    Ok(worst)
}

/// Settings shared by every cell of a shift experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSettings {
    pub k: usize,
    pub xi_max: f64,
    pub noise: NoiseKind,
    pub delta: f64,
    pub bounds: BoundSpec,
    /// Fresh draws from `q` used for the empirical shifted loss.
    pub n_eval: usize,
    /// Overrides the closed-form/Monte-Carlo choice of [`alpha_for`].
    pub alpha: Option<f64>,
    pub train: TrainConfig,
}

/// One row of a shift experiment, in CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub n: usize,
    pub seed: u64,
    pub shift_id: String,
    /// Mean of `(f_hat(x) - f*(x))^2` over fresh draws from `q`.
    pub emp_loss_q: f64,
    pub sup_gap_sq: f64,
    pub certified_bound: f64,
    pub holds: bool,
}

pub const SHIFT_CSV_HEADER: [&str; 7] = ["n", "seed", "shift_id", "emp_loss_q", "sup_gap_sq", "certified_bound", "holds"];

/// Trains on `p` at each `n`, evaluates under `q`, and certifies the sup gap.
/// Rows are ordered by `(n, seed)`.
pub fn robust_shift_experiment(
    truth: &QuadNet,
    sampler_p: &CovariateSampler,
    sampler_q: &CovariateSampler,
    shift_id: &str,
    n_grid: &[usize],
    settings: &ShiftSettings,
    seeds: &[u64],
) -> Result<Vec<ShiftRow>> {
    check_dim(truth.d(), sampler_p.d())?;
    check_dim(truth.d(), sampler_q.d())?;
    let x_max = settings.bounds.x_max;
    if sampler_p.support_radius() > x_max * (1.0 + 1e-12) || sampler_q.support_radius() > x_max * (1.0 + 1e-12) {
        return Err(invalid("sampler support leaves the ball of radius x_max"));
    }
    let alpha = match settings.alpha {
        Some(a) => a,
        None => alpha_for(sampler_p, 1_000_000, 50, 0)?.0,
    };
    let consts = IdentConstants::from_bounds(&settings.bounds);
    let cells: Vec<(usize, u64)> = n_grid.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let mut rows = cells
        .par_iter()
        .map(|&(n, seed)| -> Result<ShiftRow> {
            let data = generate_dataset(truth, sampler_p, settings.xi_max, settings.noise, n, derive_seed(seed, 1))?;
            let cfg = settings.train.with_seed(derive_seed(seed, 2));
            let fitted = train_gd(&data, truth.d(), settings.k, &cfg)?.net;
            let bound = epsilon_bound(n, truth.d(), settings.delta, consts)?;
            let verdict = theorem1_check(truth, &fitted, &bound, alpha, x_max)?;
            let mut rng = seeded(derive_seed(seed, 3));
            let mut loss_q = 0.0;
            for _ in 0..settings.n_eval {
                let x = sampler_q.sample(&mut rng);
                loss_q += (forward(&fitted, &x)? - forward(truth, &x)?).powi(2);
            }
            Ok(ShiftRow {
                n,
                seed,
                shift_id: shift_id.to_string(),
                emp_loss_q: loss_q / settings.n_eval.max(1) as f64,
                sup_gap_sq: verdict.measured.sup_gap_sq,
                certified_bound: verdict.certified,
                holds: verdict.holds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.n, r.seed));
    Ok(rows)
}
