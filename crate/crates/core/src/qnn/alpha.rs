use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{svec, svec_len, svec_of_outer};
use super::{quad_form, CovariateSampler};
use crate::error::{invalid, Result};
use crate::linalg::{random_unit_symmetric, sym_eigen};
use crate::rng::{derive_seed, seeded};
use crate::stats::MeanEstimate;

const MC_CHUNK: usize = 1 << 16;
const DIRECTION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaEstimate {
    /// Smallest directional moment among the sampled directions.
    pub alpha: f64,
    /// Smallest eigenvalue of the sampled moment matrix: the minimum over
    /// every unit direction, not only the sampled ones.
    pub lambda_min: f64,
    pub n_mc: usize,
    pub n_directions: usize,
}

/// Monte-Carlo estimate of `E[s(x) s(x)^T]` with `s(x) = svec(x x^T)`. The
/// quadratic form of this matrix at `svec(D)` is `E[(x^T D x)^2]`.
pub fn alpha_moment_matrix(sampler: &CovariateSampler, n_mc: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n_mc == 0 {
        return Err(invalid("n_mc must be positive"));
    }
    let d = sampler.d();
    let p = svec_len(d);
    let chunks = n_mc.div_ceil(MC_CHUNK);
    let partial: Vec<DMatrix<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = MC_CHUNK.min(n_mc - c * MC_CHUNK);
            let mut rng = seeded(derive_seed(seed, c as u64));
            let mut g = DMatrix::<f64>::zeros(p, p);
            let mut s = vec![0.0; p];
            for _ in 0..count {
                let x = sampler.sample(&mut rng);
                svec_of_outer(x.as_slice(), &mut s);
                for r in 0..p {
                    for q in r..p {
                        g[(r, q)] += s[r] * s[q];
                    }
                }
            }
            g
        })
        .collect();
    let mut g = DMatrix::<f64>::zeros(p, p);
    for pg in partial {
        g += pg;
    }
    super::mirror_upper(&mut g);
    Ok(g / n_mc as f64)
}

/// Minimum of the Monte-Carlo moment `E[(x^T D x)^2]` over `n_directions`
/// random symmetric `D` with `||D||_F = 1`. All directions share the same
/// covariate draws.
pub fn estimate_alpha(sampler: &CovariateSampler, n_mc: usize, n_directions: usize, seed: u64) -> Result<AlphaEstimate> {
    if n_directions == 0 {
        return Err(invalid("n_directions must be positive"));
    }
    let g = alpha_moment_matrix(sampler, n_mc, seed)?;
    let mut rng = seeded(derive_seed(seed, DIRECTION_STREAM));
    let d = sampler.d();
    let alpha = (0..n_directions)
        .map(|_| {
            let v = svec(&random_unit_symmetric(d, &mut rng));
            v.dot(&(&g * &v))
        })
        .fold(f64::INFINITY, f64::min);
    let lambda_min = sym_eigen(&g)?.min();
    Ok(AlphaEstimate { alpha, lambda_min, n_mc, n_directions })
}

/// Monte-Carlo estimate of `E[(x^T D x)^2]` for one fixed `delta`.
pub fn directional_moment(sampler: &CovariateSampler, delta: &DMatrix<f64>, n_mc: usize, seed: u64) -> Result<MeanEstimate> {
    if n_mc == 0 {
        return Err(invalid("n_mc must be positive"));
    }
    if delta.shape() != (sampler.d(), sampler.d()) {
        return Err(invalid("direction must be d x d"));
    }
    let mut rng = seeded(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_mc {
        let x = sampler.sample(&mut rng);
        let v = quad_form(delta, &x).powi(2);
        sum += v;
        sum_sq += v * v;
    }
    Ok(MeanEstimate::from_sums(sum, sum_sq, n_mc))
}
