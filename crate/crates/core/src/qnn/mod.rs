//! Quadratic networks `f(x) = sum_j <theta_j, x>^2` and their induced
//! quadratic forms `phi = theta theta^T`.

mod alpha;
mod dataset;
mod sampler;
mod train;

pub use alpha::{alpha_moment_matrix, directional_moment, estimate_alpha, AlphaEstimate};
pub use dataset::{generate_dataset, Dataset, Provenance, Sample};
pub use sampler::{CovariateSampler, NoiseKind, SamplerKind};
pub use train::{train_gd, train_gd_from, Constraint, Moments, TrainConfig, TrainOutcome};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{sym_eigen, SymEigen};
use crate::rng::{seeded, Rng};
use crate::stats::MeanEstimate;

/// A one-hidden-layer network with quadratic activations and unit output
/// weights. Column `j` of `theta` is the weight vector of hidden unit `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetRepr", into = "NetRepr")]
pub struct QuadNet {
    theta: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetRepr {
    d: usize,
    k: usize,
    /// Row-major entries of the `d x k` parameter matrix.
    theta: Vec<f64>,
}

impl TryFrom<NetRepr> for QuadNet {
    type Error = Error;
    fn try_from(r: NetRepr) -> Result<Self> {
        QuadNet::from_row_slice(r.d, r.k, &r.theta)
    }
}

impl From<QuadNet> for NetRepr {
    fn from(net: QuadNet) -> Self {
        let (d, k) = net.theta.shape();
        let theta = (0..d).flat_map(|i| (0..k).map(move |j| (i, j))).map(|ij| net.theta[ij]).collect();
        NetRepr { d, k, theta }
    }
}

impl QuadNet {
    pub fn new(theta: DMatrix<f64>) -> Result<Self> {
        if theta.nrows() == 0 || theta.ncols() == 0 {
            return Err(invalid("a network needs d >= 1 and k >= 1"));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        Ok(QuadNet { theta })
    }

    pub fn from_row_slice(d: usize, k: usize, values: &[f64]) -> Result<Self> {
        check_dim(d * k, values.len())?;
        QuadNet::new(DMatrix::from_row_slice(d, k, values))
    }

    pub fn zeros(d: usize, k: usize) -> Result<Self> {
        QuadNet::new(DMatrix::zeros(d, k))
    }

    /// Entries i.i.d. uniform on `[-scale, scale]`.
    pub fn random_uniform(d: usize, k: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        if !(scale >= 0.0) {
            return Err(invalid("scale must be nonnegative"));
        }
        let theta = DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..=1.0) * scale);
        QuadNet::new(theta)
    }

    pub fn d(&self) -> usize {
        self.theta.nrows()
    }

    pub fn k(&self) -> usize {
        self.theta.ncols()
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn into_theta(self) -> DMatrix<f64> {
        self.theta
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.theta.norm()
    }

    /// `theta * r`; with `r` orthogonal this leaves the induced form unchanged.
    pub fn rotated(&self, r: &DMatrix<f64>) -> Result<Self> {
        check_dim(self.k(), r.nrows())?;
        QuadNet::new(&self.theta * r)
    }

    /// Checks the parameter norm and induced-form norm against `b`.
    pub fn check_bounds(&self, b: &BoundSpec) -> Result<()> {
        let tn = self.frobenius_norm();
        if tn > b.theta_max * (1.0 + 1e-12) {
            return Err(Error::AssumptionViolated(format!(
                "parameter norm {tn} exceeds theta_max {}",
                b.theta_max
            )));
        }
        let pn = induced(self).frobenius_norm();
        if pn > b.phi_max * (1.0 + 1e-12) {
            return Err(Error::AssumptionViolated(format!(
                "induced-form norm {pn} exceeds phi_max {}",
                b.phi_max
            )));
        }
        Ok(())
    }

    /// Short content digest, used to tag datasets with their generator.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.d() as u64).to_le_bytes());
        h.update((self.k() as u64).to_le_bytes());
        for v in self.theta.iter() {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A symmetric matrix `phi`, read as the function `x -> x^T phi x`.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedForm {
    phi: DMatrix<f64>,
}

impl InducedForm {
    /// Accepts a square matrix that is exactly symmetric.
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() == 0 || !phi.is_square() {
            return Err(invalid(format!("induced form must be square, got {:?}", phi.shape())));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(invalid("induced form must be finite"));
        }
        if phi != phi.transpose() {
            return Err(invalid("induced form must be exactly symmetric"));
        }
        Ok(InducedForm { phi })
    }

    /// Symmetric part `(m + m^T) / 2`.
    pub fn symmetrized(m: &DMatrix<f64>) -> Result<Self> {
        let mut s = (m + m.transpose()) * 0.5;
        mirror_upper(&mut s);
        InducedForm::new(s)
    }

    pub fn d(&self) -> usize {
        self.phi.nrows()
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.d(), x.len())?;
        Ok(quad_form(&self.phi, x))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.phi.norm()
    }

    pub fn eigen(&self) -> SymEigen {
        sym_eigen(&self.phi).expect("validated induced form")
    }
}

/// Anything that defines a quadratic form on R^d.
pub trait AsInduced {
    fn induced_form(&self) -> InducedForm;
}

impl AsInduced for QuadNet {
    fn induced_form(&self) -> InducedForm {
        induced(self)
    }
}

impl AsInduced for InducedForm {
    fn induced_form(&self) -> InducedForm {
        self.clone()
    }
}

impl<T: AsInduced> AsInduced for &T {
    fn induced_form(&self) -> InducedForm {
        (*self).induced_form()
    }
}

/// Domain and parameter bounds: `||x|| <= x_max`, `||theta||_F <= theta_max`,
/// `||phi||_F <= phi_max`, `|xi| <= xi_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    pub x_max: f64,
    pub theta_max: f64,
    pub phi_max: f64,
    pub xi_max: f64,
}

impl BoundSpec {
    pub fn new(x_max: f64, theta_max: f64, phi_max: f64, xi_max: f64) -> Result<Self> {
        let b = BoundSpec { x_max, theta_max, phi_max, xi_max };
        b.validate()?;
        Ok(b)
    }

    /// `phi_max = theta_max^2`, the largest value consistent with `theta_max`.
    pub fn from_theta_max(x_max: f64, theta_max: f64, xi_max: f64) -> Result<Self> {
        BoundSpec::new(x_max, theta_max, theta_max * theta_max, xi_max)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.x_max, self.theta_max, self.phi_max];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("x_max, theta_max and phi_max must be positive and finite"));
        }
        if !(self.xi_max.is_finite() && self.xi_max >= 0.0) {
            return Err(invalid("xi_max must be nonnegative and finite"));
        }
        if self.phi_max > self.theta_max * self.theta_max * (1.0 + 1e-12) {
            return Err(invalid(format!(
                "phi_max {} exceeds theta_max^2 = {}",
                self.phi_max,
                self.theta_max * self.theta_max
            )));
        }
        Ok(())
    }
}

pub(crate) fn quad_form(phi: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (phi * x).dot(x)
}

pub(crate) fn mirror_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            m[(j, i)] = m[(i, j)];
        }
    }
}

/// `f(x) = ||theta^T x||^2`.
pub fn forward(net: &QuadNet, x: &DVector<f64>) -> Result<f64> {
    check_dim(net.d(), x.len())?;
    Ok(net.theta.tr_mul(x).norm_squared())
}

/// `phi = theta theta^T`, with the lower triangle copied from the upper so the
/// result is symmetric bit for bit.
pub fn induced(net: &QuadNet) -> InducedForm {
    let mut phi = &net.theta * net.theta.transpose();
    mirror_upper(&mut phi);
    InducedForm { phi }
}

/// A single squared-error term `(x^T phi x - y)^2`.
pub fn loss_term(phi: &InducedForm, x: &DVector<f64>, y: f64) -> Result<f64> {
    Ok((phi.eval(x)? - y).powi(2))
}

/// Mean squared error over the dataset.
pub fn empirical_loss(net: &QuadNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("empirical loss of an empty dataset"));
    }
    check_dim(net.d(), data.d())?;
    let mut total = 0.0;
    for s in data.samples() {
        total += (forward(net, &s.x)? - s.y).powi(2);
    }
    Ok(total / data.len() as f64)
}

/// `(4/n) sum_i (f(x_i) - y_i) x_i x_i^T theta`.
pub fn gradient(net: &QuadNet, data: &Dataset) -> Result<DMatrix<f64>> {
    if data.is_empty() {
        return Err(invalid("gradient over an empty dataset"));
    }
    check_dim(net.d(), data.d())?;
    let mut g = DMatrix::<f64>::zeros(net.d(), net.k());
    for s in data.samples() {
        let proj = net.theta.tr_mul(&s.x); // k-vector of <theta_j, x>
        let r = proj.norm_squared() - s.y;
        g.ger(r, &s.x, &proj, 1.0);
    }
    Ok(g * (4.0 / data.len() as f64))
}

/// Monte-Carlo estimate of `E_p[(f_net(x) - f_truth(x))^2]`.
pub fn population_loss_mc(
    net: &QuadNet,
    truth: &QuadNet,
    sampler: &CovariateSampler,
    n_mc: usize,
    seed: u64,
) -> Result<MeanEstimate> {
    if n_mc == 0 {
        return Err(invalid("n_mc must be positive"));
    }
    check_dim(net.d(), truth.d())?;
    check_dim(net.d(), sampler.d())?;
    let delta = induced(net).phi - induced(truth).phi;
    let mut rng = seeded(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_mc {
        let x = sampler.sample(&mut rng);
        let v = quad_form(&delta, &x).powi(2);
        sum += v;
        sum_sq += v * v;
    }
    Ok(MeanEstimate::from_sums(sum, sum_sq, n_mc))
}

/// `K = 4 phi_max x_max^4`.
pub fn lipschitz_k(b: &BoundSpec) -> f64 {
    4.0 * b.phi_max * b.x_max.powi(4)
}

/// `l_max = 2 x_max^2 phi_max`, a bound on `|f(x) - f*(x)|` over the domain.
pub fn ell_max(b: &BoundSpec) -> f64 {
    2.0 * b.x_max * b.x_max * b.phi_max
}
