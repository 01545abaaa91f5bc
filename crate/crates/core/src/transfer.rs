//! Two-stage transfer: fit on plentiful proxy data, then fit on scarce gold
//! data inside a Frobenius ball around the proxy estimate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::identify::{alpha_for, ln_radius, sup_function_gap, IdentConstants};
use crate::linalg::{orthonormal_completion, thin_svd};
use crate::qnn::{
    generate_dataset, induced, train_gd, train_gd_from, BoundSpec, Constraint, CovariateSampler, Dataset, NoiseKind,
    QuadNet, TrainConfig, TrainOutcome,
};
use crate::rng::derive_seed;

const RANK_TOL: f64 = 1e-10;

/// `d`-th largest singular value of a `d x k` matrix with `k >= d`.
pub fn sigma_min(theta: &QuadNet) -> Result<f64> {
    if theta.k() < theta.d() {
        return Err(invalid(format!("sigma_min needs k >= d, got d = {}, k = {}", theta.d(), theta.k())));
    }
    let svd = thin_svd(theta.theta())?;
    Ok(svd.sigma[theta.d() - 1].max(0.0))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// The proxy-stage radius: the identification radius at `n_p` with the
/// confidence term `ln(4 / delta)`.
pub fn epsilon_p(n_p: usize, d: usize, delta: f64, consts: &IdentConstants) -> Result<f64> {
    check_delta(delta)?;
    if n_p == 0 {
        return Err(invalid("n_p must be positive"));
    }
    let l = consts.ell_max;
    let lead = l * l * (l * l + consts.xi_max * consts.xi_max);
    Ok(ln_radius(n_p, d, lead, l, consts.phi_max, consts.k_lip, (4.0 / delta).ln()).exp())
}

/// `B_hat = B + sqrt(2 eps_p / alpha) / sigma0`.
pub fn expanded_radius(b: f64, eps_p: f64, alpha: f64, sigma0: f64) -> Result<f64> {
    if !(b >= 0.0 && eps_p >= 0.0 && alpha > 0.0 && sigma0 > 0.0) {
        return Err(invalid("expanded radius needs B, eps_p >= 0 and alpha, sigma0 > 0"));
    }
    Ok(b + (2.0 * eps_p / alpha).sqrt() / sigma0)
}

/// The gold-stage radius
/// `B_hat sqrt(18 K^2 (K^2 B_hat^2 + xi^2) / n_g (d^2 max{1, ln(1 + 8 phi K n_g / l^2)} + ln(4/delta)))`.
pub fn epsilon_g(n_g: usize, d: usize, delta: f64, b_hat: f64, consts: &IdentConstants) -> Result<f64> {
    check_delta(delta)?;
    if n_g == 0 {
        return Err(invalid("n_g must be positive"));
    }
    if !(b_hat >= 0.0) {
        return Err(invalid("B_hat must be nonnegative"));
    }
    if b_hat == 0.0 {
        return Ok(0.0);
    }
    let k = consts.k_lip;
    let lead = k * k * (k * k * b_hat * b_hat + consts.xi_max * consts.xi_max);
    let ln = b_hat.ln() + ln_radius(n_g, d, lead, consts.ell_max, consts.phi_max, k, (4.0 / delta).ln());
    Ok(ln.exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub r: DMatrix<f64>,
    pub r_prime: DMatrix<f64>,
    /// `||theta R - theta' R'||_F`.
    pub aligned_gap: f64,
    /// `||theta theta^T - theta' theta'^T||_F / sigma0`.
    pub bound: f64,
    pub holds: bool,
}

/// `R = [V V_perp] diag(U^T, I)`, so that `theta R = [U S U^T | 0]`.
fn aligning_rotation(theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (d, k) = theta.shape();
    let svd = thin_svd(theta)?;
    let mut r = DMatrix::<f64>::zeros(k, k);
    // First d columns: V U^T.
    r.columns_mut(0, d).copy_from(&(&svd.v * svd.u.transpose()));
    if k > d {
        r.columns_mut(d, k - d).copy_from(&orthonormal_completion(&svd.v, k - d));
    }
    Ok(r)
}

/// Rotations `R, R'` mapping both factors onto the PSD square roots of their
/// induced forms, which are within `||phi - phi'||_F / sigma0` of each other.
pub fn align(theta: &QuadNet, theta_prime: &QuadNet, sigma0: f64) -> Result<AlignmentResult> {
    check_dim(theta.d(), theta_prime.d())?;
    check_dim(theta.k(), theta_prime.k())?;
    if !(sigma0 > 0.0) {
        return Err(invalid("sigma0 must be positive"));
    }
    let s_min = sigma_min(theta_prime)?;
    if s_min <= RANK_TOL {
        return Err(Error::AssumptionViolated(format!("theta' has rank below d (sigma_min = {s_min:e})")));
    }
    if s_min < sigma0 * (1.0 - 1e-12) {
        log::warn!("sigma_min(theta') = {s_min} is below the stated sigma0 = {sigma0}");
    }
    let r = aligning_rotation(theta.theta())?;
    let r_prime = aligning_rotation(theta_prime.theta())?;
    let aligned_gap = (theta.theta() * &r - theta_prime.theta() * &r_prime).norm();
    let bound = (induced(theta).phi() - induced(theta_prime).phi()).norm() / sigma0;
    Ok(AlignmentResult { holds: aligned_gap <= bound * (1.0 + 1e-12) + 1e-15, r, r_prime, aligned_gap, bound })
}

/// Projected gradient descent on the gold loss from `theta_hat_p`, keeping
/// `||theta - theta_hat_p||_F <= B_hat`. `cfg.theta_max` is ignored.
pub fn fit_gold_constrained(z_g: &Dataset, theta_hat_p: &QuadNet, b_hat: f64, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !(b_hat >= 0.0) {
        return Err(invalid("B_hat must be nonnegative"));
    }
    if z_g.is_empty() {
        return Err(invalid("gold dataset is empty"));
    }
    let cfg = TrainConfig { theta_max: None, ..cfg.clone() };
    let ball = Constraint::Ball { center: theta_hat_p.theta().clone(), radius: b_hat };
    train_gd_from(z_g, theta_hat_p.clone(), &cfg, &ball)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferProblem {
    pub theta_p_star: QuadNet,
    pub theta_g_star: QuadNet,
    /// Known bound on `||theta_g* - theta_p*||_F`.
    pub b: f64,
    pub n_p: usize,
    pub n_g: usize,
    pub sampler_p: CovariateSampler,
    pub sampler_q: CovariateSampler,
    /// Lower bound on `sigma_min(theta_p*)`.
    pub sigma0: f64,
    pub bounds: BoundSpec,
    pub noise: NoiseKind,
}

impl TransferProblem {
    pub fn validate(&self) -> Result<()> {
        check_dim(self.theta_p_star.d(), self.theta_g_star.d())?;
        check_dim(self.theta_p_star.k(), self.theta_g_star.k())?;
        check_dim(self.theta_p_star.d(), self.sampler_p.d())?;
        check_dim(self.theta_p_star.d(), self.sampler_q.d())?;
        self.bounds.validate()?;
        if self.n_p == 0 || self.n_g == 0 {
            return Err(invalid("sample counts must be positive"));
        }
        let shift = self.true_shift();
        if shift > self.b * (1.0 + 1e-12) {
            return Err(Error::AssumptionViolated(format!("||theta_g* - theta_p*||_F = {shift} exceeds B = {}", self.b)));
        }
        let s = sigma_min(&self.theta_p_star)?;
        if !(self.sigma0 > 0.0) || s < self.sigma0 * (1.0 - 1e-12) {
            return Err(Error::AssumptionViolated(format!("sigma_min(theta_p*) = {s} is below sigma0 = {}", self.sigma0)));
        }
        let r = self.bounds.x_max * (1.0 + 1e-12);
        if self.sampler_p.support_radius() > r || self.sampler_q.support_radius() > r {
            return Err(invalid("sampler support leaves the ball of radius x_max"));
        }
        Ok(())
    }

    /// `||theta_g* - theta_p*||_F`, known only for synthetic problems.
    pub fn true_shift(&self) -> f64 {
        (self.theta_g_star.theta() - self.theta_p_star.theta()).norm()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub proxy_train: TrainConfig,
    pub gold_train: TrainConfig,
    /// Width of the fitted networks; `None` uses the width of the truths.
    pub k: Option<usize>,
    /// Strong-convexity constants for the proxy and gold samplers. `None`
    /// selects the closed form or a Monte-Carlo estimate.
    pub alpha_p: Option<f64>,
    pub alpha_q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub n_p: usize,
    pub n_g: usize,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "B_hat")]
    pub b_hat: f64,
    pub eps_p: f64,
    pub eps_g: f64,
    /// Squared sup gaps `sup (f_hat - f*)^2` over the ball.
    pub proxy_sup_gap: f64,
    pub gold_sup_gap: f64,
    /// `2 K^2 eps_g / alpha_q`.
    pub certified: f64,
    pub holds: bool,
    pub seed: u64,
    /// Squared sup gap of an unconstrained fit on the gold data alone.
    pub gold_only_sup_gap: f64,
    /// Whether the gold fit finished on the boundary of the ball.
    pub constraint_active: bool,
    pub true_shift: f64,
    pub alpha_p: f64,
    pub alpha_q: f64,
    /// `l_max` and its substitute `K B_hat` inside the gold radius.
    pub ell_max: f64,
    pub k_b_hat: f64,
}

/// Runs both stages plus the gold-only ablation.
pub fn run_transfer(problem: &TransferProblem, delta: f64, cfg: &TransferConfig, seed: u64) -> Result<TransferReport> {
    problem.validate()?;
    check_delta(delta)?;
    let d = problem.theta_p_star.d();
    let k = cfg.k.unwrap_or(problem.theta_p_star.k());
    let xi = problem.bounds.xi_max;
    let x_max = problem.bounds.x_max;
    let consts = IdentConstants::from_bounds(&problem.bounds);
    let alpha_p = match cfg.alpha_p {
        Some(a) => a,
        None => alpha_for(&problem.sampler_p, 1_000_000, 50, derive_seed(seed, 10))?.0,
    };
    let alpha_q = match cfg.alpha_q {
        Some(a) => a,
        None => alpha_for(&problem.sampler_q, 1_000_000, 50, derive_seed(seed, 11))?.0,
    };

    let z_p = generate_dataset(&problem.theta_p_star, &problem.sampler_p, xi, problem.noise, problem.n_p, derive_seed(seed, 1))?;
    let z_g = generate_dataset(&problem.theta_g_star, &problem.sampler_q, xi, problem.noise, problem.n_g, derive_seed(seed, 2))?;
    let theta_hat_p = train_gd(&z_p, d, k, &cfg.proxy_train.with_seed(derive_seed(seed, 3)))?.net;

    let eps_p = epsilon_p(problem.n_p, d, delta, &consts)?;
    let b_hat = expanded_radius(problem.b, eps_p, alpha_p, problem.sigma0)?;
    let gold = fit_gold_constrained(&z_g, &theta_hat_p, b_hat, &cfg.gold_train)?;
    let offset = (gold.net.theta() - theta_hat_p.theta()).norm();
    let gold_only = train_gd(&z_g, d, k, &cfg.gold_train.with_seed(derive_seed(seed, 4)))?.net;

    let eps_g = epsilon_g(problem.n_g, d, delta, b_hat, &consts)?;
    let certified = 2.0 * consts.k_lip.powi(2) * eps_g / alpha_q;
    let gold_sup_gap = sup_function_gap(&gold.net, &problem.theta_g_star, x_max)?.sup_gap_sq;
    Ok(TransferReport {
        n_p: problem.n_p,
        n_g: problem.n_g,
        b: problem.b,
        b_hat,
        eps_p,
        eps_g,
        proxy_sup_gap: sup_function_gap(&theta_hat_p, &problem.theta_p_star, x_max)?.sup_gap_sq,
        gold_sup_gap,
        certified,
        holds: gold_sup_gap <= certified,
        seed,
        gold_only_sup_gap: sup_function_gap(&gold_only, &problem.theta_g_star, x_max)?.sup_gap_sq,
        constraint_active: offset >= b_hat * (1.0 - 1e-9),
        true_shift: problem.true_shift(),
        alpha_p,
        alpha_q,
        ell_max: consts.ell_max,
        k_b_hat: consts.k_lip * b_hat,
    })
}
