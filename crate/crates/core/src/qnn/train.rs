use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{empirical_loss, Dataset, QuadNet};
use crate::error::{check_dim, invalid, Error, Result};
use crate::rng::seeded;

const DIVERGENCE_LOSS: f64 = 1e12;
const MOMENT_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Half-width of the uniform initialization; `None` means `0.5 / sqrt(k)`.
    pub init_scale: Option<f64>,
    pub seed: u64,
    /// Radius of the Frobenius ball the iterates are projected onto.
    pub theta_max: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            max_iters: 50_000,
            grad_tol: 1e-8,
            init_scale: None,
            seed: 0,
            theta_max: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be positive"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(invalid("grad_tol must be positive"));
        }
        if let Some(s) = self.init_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(invalid("init_scale must be positive"));
            }
        }
        if let Some(r) = self.theta_max {
            if !(r.is_finite() && r > 0.0) {
                return Err(invalid("theta_max must be positive"));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig { seed, ..self.clone() }
    }
}

/// Feasible set for the iterates beyond `TrainConfig::theta_max`.
#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    None,
    /// `||theta - center||_F <= radius`.
    Ball { center: DMatrix<f64>, radius: f64 },
}

impl Constraint {
    fn project(&self, theta: &mut DMatrix<f64>) {
        if let Constraint::Ball { center, radius } = self {
            let off = &*theta - center;
            let norm = off.norm();
            if norm > *radius {
                *theta = center + off * (*radius / norm);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: QuadNet,
    pub iterations: usize,
    /// Whether the stationarity measure dropped below `grad_tol`.
    pub converged: bool,
    /// Per-sample recomputation of the empirical loss at `net`.
    pub final_loss: f64,
    /// Norm of the projected-gradient step divided by the learning rate.
    pub grad_norm: f64,
}

/// Second-order statistics of a dataset in the basis `s(x) = svec(x x^T)`,
/// where off-diagonal entries carry a factor `sqrt(2)` so that
/// `<svec(A), svec(B)> = <A, B>_F`.
///
/// With `A = mean s s^T`, `b = mean y s` and `c = mean y^2` the empirical loss
/// of a form `phi` is `v^T A v - 2 b^T v + c` for `v = svec(phi)`, so one
/// gradient step costs `O(d^4)` regardless of the sample count.
#[derive(Debug, Clone)]
pub struct Moments {
    d: usize,
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    n: usize,
}

pub(crate) fn svec_len(d: usize) -> usize {
    d * (d + 1) / 2
}

pub(crate) fn svec_of_outer(x: &[f64], out: &mut [f64]) {
    let d = x.len();
    let mut idx = 0;
    for i in 0..d {
        out[idx] = x[i] * x[i];
        idx += 1;
        for j in (i + 1)..d {
            out[idx] = std::f64::consts::SQRT_2 * x[i] * x[j];
            idx += 1;
        }
    }
}

pub(crate) fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    let mut v = DVector::zeros(svec_len(d));
    let mut idx = 0;
    for i in 0..d {
        v[idx] = m[(i, i)];
        idx += 1;
        for j in (i + 1)..d {
            v[idx] = std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]);
            idx += 1;
        }
    }
    v
}

pub(crate) fn unsvec(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        m[(i, i)] = v[idx];
        idx += 1;
        for j in (i + 1)..d {
            let off = v[idx] / std::f64::consts::SQRT_2;
            m[(i, j)] = off;
            m[(j, i)] = off;
            idx += 1;
        }
    }
    m
}

impl Moments {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("moments of an empty dataset"));
        }
        let d = data.d();
        let p = svec_len(d);
        // Fixed-size chunks summed in order keep the result independent of
        // the thread count.
        let partial: Vec<(DMatrix<f64>, DVector<f64>, f64)> = data
            .samples()
            .par_chunks(MOMENT_CHUNK)
            .map(|chunk| {
                let mut a = DMatrix::<f64>::zeros(p, p);
                let mut b = DVector::<f64>::zeros(p);
                let mut c = 0.0;
                let mut s = vec![0.0; p];
                for smp in chunk {
                    svec_of_outer(smp.x.as_slice(), &mut s);
                    for r in 0..p {
                        let sr = s[r];
                        b[r] += smp.y * sr;
                        for q in r..p {
                            a[(r, q)] += sr * s[q];
                        }
                    }
                    c += smp.y * smp.y;
                }
                (a, b, c)
            })
            .collect();
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut b = DVector::<f64>::zeros(p);
        let mut c = 0.0;
        for (pa, pb, pc) in partial {
            a += pa;
            b += pb;
            c += pc;
        }
        let n = data.len();
        let inv = 1.0 / n as f64;
        super::mirror_upper(&mut a);
        Ok(Moments { d, a: a * inv, b: b * inv, c: c * inv, n })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Empirical loss of `phi` evaluated from the moments.
    pub fn loss(&self, phi: &DMatrix<f64>) -> f64 {
        let v = svec(phi);
        (v.dot(&(&self.a * &v)) - 2.0 * self.b.dot(&v) + self.c).max(0.0)
    }

    /// `n^-1 sum_i (x_i^T phi x_i - y_i) x_i x_i^T`.
    pub fn residual_matrix(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let v = svec(phi);
        unsvec(&(&self.a * v - &self.b), self.d)
    }
}

fn init_theta(d: usize, k: usize, cfg: &TrainConfig) -> Result<QuadNet> {
    let scale = cfg.init_scale.unwrap_or(0.5 / (k as f64).sqrt());
    let mut rng = seeded(cfg.seed);
    QuadNet::random_uniform(d, k, scale, &mut rng)
}

/// Full-batch gradient descent on the empirical loss from a seeded uniform
/// initialization.
pub fn train_gd(data: &Dataset, d: usize, k: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    check_dim(d, data.d())?;
    if k == 0 {
        return Err(invalid("hidden width must be positive"));
    }
    let init = init_theta(d, k, cfg)?;
    train_gd_from(data, init, cfg, &Constraint::None)
}

/// Projected gradient descent from `init`. After every step the iterate is
/// projected onto `constraint` and then onto the `theta_max` ball.
pub fn train_gd_from(data: &Dataset, init: QuadNet, cfg: &TrainConfig, constraint: &Constraint) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    check_dim(init.d(), data.d())?;
    let moments = Moments::from_dataset(data)?;
    let radius = cfg.theta_max.map(|r| Constraint::Ball { center: DMatrix::zeros(init.d(), init.k()), radius: r });
    let project = |t: &mut DMatrix<f64>| {
        constraint.project(t);
        if let Some(b) = &radius {
            b.project(t);
        }
    };

    let mut theta = init.into_theta();
    project(&mut theta);
    let lr = cfg.learning_rate;
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    for it in 0..cfg.max_iters {
        let phi = &theta * theta.transpose();
        let loss = moments.loss(&phi);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { iteration: it, loss });
        }
        let grad = moments.residual_matrix(&phi) * &theta * 4.0;
        let mut next = &theta - &grad * lr;
        project(&mut next);
        grad_norm = (&next - &theta).norm() / lr;
        iterations = it;
        if grad_norm <= cfg.grad_tol {
            converged = true;
            break;
        }
        theta = next;
        iterations = it + 1;
    }
    if !converged {
        log::debug!("gradient descent stopped at max_iters with stationarity {grad_norm:e}");
    }
    let net = QuadNet::new(theta).map_err(|_| Error::Diverged { iteration: iterations, loss: f64::NAN })?;
    let final_loss = empirical_loss(&net, data)?;
    Ok(TrainOutcome { net, iterations, converged, final_loss, grad_norm })
}
