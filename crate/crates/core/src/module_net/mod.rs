//! Module networks: vector-valued quadratic modules composed in the order a
//! tabular parser assigns to a token word.
//!
//! Total variation is the unnormalized `sum |p - q|`, which ranges over
//! `[0, 2]`.

mod chain;
mod parser;

pub use chain::{enumerate_words, proposition1_construct, tv_distance, ShiftSpec, TokenChain, MAX_ENUMERATION};
pub use parser::{
    averaged_mixture, brute_force_mixture, lemma_distshift_check, mixture_distribution, mixture_sequence,
    parser_error_rate, sequence_error_check, sequence_error_dp, step_error, train_parser, DistShiftVerdict, Parser,
    SequenceErrorMethod, SequenceErrorVerdict,
};

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::identify::sup_function_gap;
use crate::qnn::{forward, induced, train_gd, CovariateSampler, Dataset, QuadNet, TrainConfig};
use crate::rng::{derive_seed, seeded, Rng};
use crate::stats::binomial_band;

/// `f: R^d -> R^d` with one quadratic network per output coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Module {
    coords: Vec<QuadNet>,
}

impl Module {
    pub fn new(coords: Vec<QuadNet>) -> Result<Self> {
        let d = coords.len();
        if d == 0 {
            return Err(invalid("module needs at least one coordinate"));
        }
        for c in &coords {
            check_dim(d, c.d())?;
        }
        Ok(Module { coords })
    }

    pub fn d(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[QuadNet] {
        &self.coords
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.d(), x.len())?;
        let v = self.coords.iter().map(|c| forward(c, x)).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(v))
    }

    /// `2 r sqrt(sum_c ||phi_c||_op^2)`: bounds the Frobenius norm of the
    /// Jacobian on the ball of radius `r`.
    pub fn lipschitz_bound(&self, r: f64) -> f64 {
        let s: f64 = self.coords.iter().map(|c| induced(c).eigen().max().abs().powi(2)).sum();
        2.0 * r * s.sqrt()
    }

    fn scaled(&self, s: f64) -> Result<Self> {
        let coords = self.coords.iter().map(|c| QuadNet::new(c.theta() * s)).collect::<Result<Vec<_>>>()?;
        Module::new(coords)
    }
}

/// Modules `1..=k` on the ball of radius `x_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleLibrary {
    modules: Vec<Module>,
    x_max: f64,
    /// Lipschitz constant of every module on the ball.
    pub k_module: f64,
    /// Uniform bound on `sup ||f_hat_j(x) - f_j(x)||_2`; zero for a true library.
    pub eps_f: f64,
}

impl ModuleLibrary {
    pub fn new(modules: Vec<Module>, x_max: f64, k_module: f64, eps_f: f64) -> Result<Self> {
        if modules.is_empty() {
            return Err(invalid("library needs at least one module"));
        }
        let d = modules[0].d();
        for m in &modules {
            check_dim(d, m.d())?;
        }
        if !(x_max > 0.0 && k_module >= 0.0 && eps_f >= 0.0) {
            return Err(invalid("x_max must be positive and k_module, eps_f nonnegative"));
        }
        Ok(ModuleLibrary { modules, x_max, k_module, eps_f })
    }

    /// Random modules of hidden width `width`, each rescaled so its Lipschitz
    /// bound on the ball equals `target_k`. For `target_k < 2` outputs stay
    /// inside the ball.
    pub fn random(d: usize, k: usize, width: usize, target_k: f64, x_max: f64, rng: &mut Rng) -> Result<Self> {
        if !(target_k > 0.0) {
            return Err(invalid("target Lipschitz constant must be positive"));
        }
        let modules = (0..k)
            .map(|_| {
                let coords = (0..d).map(|_| QuadNet::random_uniform(d, width, 1.0, rng)).collect::<Result<Vec<_>>>()?;
                let m = Module::new(coords)?;
                let l = m.lipschitz_bound(x_max);
                m.scaled((target_k / l).sqrt())
            })
            .collect::<Result<Vec<_>>>()?;
        ModuleLibrary::new(modules, x_max, target_k, 0.0)
    }

    pub fn d(&self) -> usize {
        self.modules[0].d()
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// Module `j` in `1..=k`.
    pub fn module(&self, j: usize) -> Result<&Module> {
        if j == 0 || j > self.len() {
            return Err(invalid(format!("module index {j} outside 1..={}", self.len())));
        }
        Ok(&self.modules[j - 1])
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.modules.iter().map(|m| m.lipschitz_bound(self.x_max)).fold(0.0, f64::max)
    }

    /// Largest `||f(x) - f(x')|| / ||x - x'||` over `n_pairs` pairs in the
    /// ball, half of them at a small separation.
    pub fn measured_lipschitz(&self, n_pairs: usize, seed: u64) -> Result<f64> {
        let mut rng = seeded(seed);
        let d = self.d();
        let mut best: f64 = 0.0;
        for i in 0..n_pairs {
            let x = sample_ball(d, self.x_max, &mut rng);
            let y = if i % 2 == 0 {
                sample_ball(d, self.x_max, &mut rng)
            } else {
                let step = sample_ball(d, 1e-3 * self.x_max, &mut rng);
                let y = &x + step;
                let n = y.norm();
                if n > self.x_max {
                    y * (self.x_max / n)
                } else {
                    y
                }
            };
            let dist = (&x - &y).norm();
            if dist <= 1e-12 {
                continue;
            }
            for m in &self.modules {
                best = best.max((m.eval(&x)? - m.eval(&y)?).norm() / dist);
            }
        }
        Ok(best)
    }

    /// Applies modules `js` in order, returning `x_0, ..., x_T`.
    pub fn run(&self, js: &[usize], x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        check_dim(self.d(), x.len())?;
        let mut trace = Vec::with_capacity(js.len() + 1);
        trace.push(x.clone());
        for &j in js {
            let next = self.module(j)?.eval(trace.last().expect("nonempty"))?;
            trace.push(next);
        }
        Ok(trace)
    }
}

/// Uniform draw from the ball of radius `r`.
fn sample_ball(d: usize, r: f64, rng: &mut Rng) -> DVector<f64> {
    let g = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(rng));
    let n = g.norm().max(f64::MIN_POSITIVE);
    let u: f64 = rng.random();
    g * (r * u.powf(1.0 / d as f64) / n)
}

/// Parses `w` and runs the library on `x`. Returns the output and the trace
/// `x_0, ..., x_T`.
pub fn compose(
    library: &ModuleLibrary,
    parser: &Parser,
    x: &DVector<f64>,
    w: &[usize],
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    if x.norm() > library.x_max * (1.0 + 1e-12) {
        return Err(invalid(format!("input norm {} exceeds x_max {}", x.norm(), library.x_max)));
    }
    check_dim(library.len(), parser.k())?;
    let js = parser.parse(w)?;
    let trace = library.run(&js, x)?;
    Ok((trace.last().expect("nonempty").clone(), trace))
}

/// `sqrt(2 d K^2 eps / alpha)`: module error implied by coordinate-wise
/// identification at radius `eps`.
pub fn eps_f_from_identification(d: usize, k_lip: f64, eps: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && eps >= 0.0) {
        return Err(invalid("need alpha > 0 and eps >= 0"));
    }
    Ok((2.0 * d as f64 * k_lip * k_lip * eps / alpha).sqrt())
}

/// Per-module `sqrt(sum_c sup_x (f_hat_c - f_c)^2)`, an upper bound on
/// `sup_x ||f_hat_j(x) - f_j(x)||_2` computed from the exact coordinate gaps.
pub fn module_gaps(truth: &ModuleLibrary, fitted: &ModuleLibrary) -> Result<Vec<f64>> {
    check_dim(truth.len(), fitted.len())?;
    check_dim(truth.d(), fitted.d())?;
    truth
        .modules
        .iter()
        .zip(&fitted.modules)
        .map(|(a, b)| {
            let mut s = 0.0;
            for (ca, cb) in a.coords.iter().zip(&b.coords) {
                s += sup_function_gap(ca, cb, truth.x_max)?.sup_gap_sq;
            }
            Ok(s.sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelescopeReport {
    /// `||x_hat_t - x_t||` for `t = 1..=T`.
    pub gaps: Vec<f64>,
    /// `sum_{s <= t} K^{t-s} e_{j_s}`.
    pub bounds: Vec<f64>,
    pub holds: bool,
}

/// Runs both libraries along the same module sequence and compares per-step
/// gaps against the telescoped per-module errors.
pub fn telescope_check(truth: &ModuleLibrary, fitted: &ModuleLibrary, js: &[usize], x: &DVector<f64>) -> Result<TelescopeReport> {
    let errs = module_gaps(truth, fitted)?;
    let a = truth.run(js, x)?;
    let b = fitted.run(js, x)?;
    let k = truth.k_module;
    let mut bound = 0.0;
    let mut gaps = Vec::with_capacity(js.len());
    let mut bounds = Vec::with_capacity(js.len());
    for (t, &j) in js.iter().enumerate() {
        bound = k * bound + errs[j - 1];
        gaps.push((&a[t + 1] - &b[t + 1]).norm());
        bounds.push(bound);
    }
    let holds = gaps.iter().zip(&bounds).all(|(g, b)| *g <= b * (1.0 + 1e-9) + 1e-12);
    Ok(TelescopeReport { gaps, bounds, holds })
}

/// Fits every coordinate of every module from execution traces
/// `(x_{t-1}, x_t)` of the true library on words from `chain`, with inputs
/// `x_0` drawn from `inputs`. A module that never appears in the traces is
/// fitted on `n_words` direct evaluations at fresh inputs instead.
#[allow(clippy::too_many_arguments)]
pub fn fit_library(
    truth: &ModuleLibrary,
    parser: &Parser,
    chain: &TokenChain,
    inputs: &CovariateSampler,
    n_words: usize,
    width: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModuleLibrary> {
    check_dim(truth.d(), inputs.d())?;
    let d = truth.d();
    let mut rng = seeded(seed);
    let mut pairs: Vec<Vec<(DVector<f64>, DVector<f64>)>> = vec![Vec::new(); truth.len()];
    for _ in 0..n_words {
        let w = chain.sample_word(&mut rng);
        let x = inputs.sample(&mut rng);
        let js = parser.parse(&w)?;
        let trace = truth.run(&js, &x)?;
        for (t, &j) in js.iter().enumerate() {
            pairs[j - 1].push((trace[t].clone(), trace[t + 1].clone()));
        }
    }
    for (j, ps) in pairs.iter_mut().enumerate() {
        if ps.is_empty() {
            log::warn!("module {} never appears in the training traces; fitting on direct evaluations", j + 1);
            for _ in 0..n_words {
                let x = inputs.sample(&mut rng);
                let y = truth.modules[j].eval(&x)?;
                ps.push((x, y));
            }
        }
    }
    let modules = pairs
        .par_iter()
        .enumerate()
        .map(|(j, ps)| {
            let coords = (0..d)
                .map(|c| {
                    let data = Dataset::from_pairs(ps.iter().map(|(x, y)| (x.clone(), y[c])).collect())?;
                    let stream = derive_seed(seed, (j * d + c) as u64 + 1);
                    Ok(train_gd(&data, d, width, &cfg.with_seed(stream))?.net)
                })
                .collect::<Result<Vec<_>>>()?;
            Module::new(coords)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fitted = ModuleLibrary::new(modules, truth.x_max, truth.k_module, 0.0)?;
    fitted.eps_f = module_gaps(truth, &fitted)?.into_iter().fold(0.0, f64::max);
    Ok(fitted)
}

pub const COMPOSITION_CSV_HEADER: &str = "word_id,parse_match,gap_l2,bound,within_bound";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub word_id: usize,
    pub parse_match: bool,
    pub gap_l2: f64,
    pub bound: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub t_len: usize,
    pub n_words: usize,
    pub eps_f: f64,
    /// Per-step parser error under the base chain.
    pub eps_g: f64,
    pub alpha_shift: f64,
    /// Larger of the configured and measured Lipschitz constants.
    pub k_module: f64,
    /// `T eps_f max{K^{T-1}, 1}`.
    pub gap_bound: f64,
    pub frequency_within: f64,
    /// `1 - T eps_g - T^2 alpha_shift`.
    pub required: f64,
    pub band: f64,
    pub holds: bool,
    pub matched: usize,
    /// Matched-parse words whose gap exceeds `gap_bound`.
    pub matched_violations: usize,
    pub rows: Vec<CompositionRow>,
}

/// Samples words from the shifted chain and inputs from `inputs`, then
/// compares the fitted network with the true one.
#[allow(clippy::too_many_arguments)]
pub fn theorem5_experiment(
    truth: &ModuleLibrary,
    fitted: &ModuleLibrary,
    parser_true: &Parser,
    parser_hat: &Parser,
    spec: &ShiftSpec,
    inputs: &CovariateSampler,
    n_mc: usize,
    z: f64,
    seed: u64,
) -> Result<CompositionReport> {
    if n_mc == 0 {
        return Err(invalid("n_mc must be positive"));
    }
    let t_len = spec.base().t_len();
    let eps_f = fitted.eps_f.max(module_gaps(truth, fitted)?.into_iter().fold(0.0, f64::max));
    let eps_g = step_error(parser_hat, parser_true, spec.base())?;
    let k_module = truth.k_module.max(truth.measured_lipschitz(2000, derive_seed(seed, u64::MAX))?);
    let gap_bound = t_len as f64 * eps_f * k_module.powi(t_len as i32 - 1).max(1.0);

    let rows = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded(derive_seed(seed, i as u64));
            let w = spec.shifted().sample_word(&mut rng);
            let x = inputs.sample(&mut rng);
            let (a, _) = compose(truth, parser_true, &x, &w)?;
            let (b, _) = compose(fitted, parser_hat, &x, &w)?;
            let gap = (a - b).norm();
            Ok(CompositionRow {
                word_id: i,
                parse_match: parser_true.parse(&w)? == parser_hat.parse(&w)?,
                gap_l2: gap,
                bound: gap_bound,
                within_bound: gap <= gap_bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let within = rows.iter().filter(|r| r.within_bound).count();
    let matched = rows.iter().filter(|r| r.parse_match).count();
    let matched_violations = rows.iter().filter(|r| r.parse_match && !r.within_bound).count();
    let frequency_within = within as f64 / n_mc as f64;
    let t = t_len as f64;
    let required = 1.0 - t * eps_g - t * t * spec.alpha_shift();
    let band = binomial_band(required.clamp(0.0, 1.0), n_mc, z);
    Ok(CompositionReport {
        t_len,
        n_words: n_mc,
        eps_f,
        eps_g,
        alpha_shift: spec.alpha_shift(),
        k_module,
        gap_bound,
        frequency_within,
        required,
        band,
        holds: frequency_within >= required - band,
        matched,
        matched_violations,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(d: usize, x_max: f64) -> CovariateSampler {
        CovariateSampler::uniform_cube(d, x_max / (d as f64).sqrt()).unwrap()
    }

    #[test]
    fn compose_basics() {
        let mut rng = seeded(1);
        let lib = ModuleLibrary::random(3, 2, 2, 0.8, 1.0, &mut rng).unwrap();
        let parser = Parser::random(3, 2, &mut rng).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let (out, trace) = compose(&lib, &parser, &x, &[]).unwrap();
        assert_eq!(out, x);
        assert_eq!(trace.len(), 1);
        let (out, trace) = compose(&lib, &parser, &x, &[1]).unwrap();
        assert_eq!(out, lib.module(parser.lookup(1, 0)).unwrap().eval(&x).unwrap());
        assert_eq!(trace.len(), 2);
        assert!(compose(&lib, &parser, &(x * 10.0), &[1]).is_err());
    }

    #[test]
    fn random_library_constants() {
        let mut rng = seeded(2);
        let lib = ModuleLibrary::random(3, 3, 2, 0.9, 1.0, &mut rng).unwrap();
        assert!((lib.lipschitz_bound() - 0.9).abs() < 1e-9);
        let measured = lib.measured_lipschitz(4000, 3).unwrap();
        assert!(measured <= 0.9 + 1e-9 && measured > 0.2, "{measured}");
        let mut rng = seeded(4);
        for _ in 0..200 {
            let x = sample_ball(3, 1.0, &mut rng);
            for j in 1..=3 {
                assert!(lib.module(j).unwrap().eval(&x).unwrap().norm() <= 1.0);
            }
        }
    }

    #[test]
    fn identical_libraries_have_zero_gap() {
        let mut rng = seeded(5);
        let lib = ModuleLibrary::random(2, 3, 2, 0.9, 1.0, &mut rng).unwrap();
        let parser = Parser::random(3, 3, &mut rng).unwrap();
        let chain = TokenChain::random(3, 4, &mut rng).unwrap();
        let spec = ShiftSpec::new(chain.clone(), chain, 0.0).unwrap();
        let r = theorem5_experiment(&lib, &lib, &parser, &parser, &spec, &cube(2, 1.0), 200, 1.96, 1).unwrap();
        assert!(r.rows.iter().all(|row| row.gap_l2 == 0.0 && row.parse_match));
        assert_eq!(r.frequency_within, 1.0);
    }

    #[test]
    fn fitted_library_obeys_telescope() {
        let mut rng = seeded(6);
        let lib = ModuleLibrary::random(2, 2, 2, 0.9, 1.0, &mut rng).unwrap();
        let parser = Parser::random(3, 2, &mut rng).unwrap();
        let chain = TokenChain::random(3, 4, &mut rng).unwrap();
        let cfg = TrainConfig { max_iters: 5000, ..TrainConfig::default() };
        let fitted = fit_library(&lib, &parser, &chain, &cube(2, 1.0), 40, 3, &cfg, 7).unwrap();
        assert!(fitted.eps_f > 0.0 && fitted.eps_f < 0.1, "{}", fitted.eps_f);
        for _ in 0..50 {
            let w = chain.sample_word(&mut rng);
            let x = sample_ball(2, 1.0, &mut rng);
            let rep = telescope_check(&lib, &fitted, &parser.parse(&w).unwrap(), &x).unwrap();
            assert!(rep.holds, "{rep:?}");
        }
    }

    #[test]
    fn eps_f_formula() {
        assert!((eps_f_from_identification(2, 1.0, 0.25, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(eps_f_from_identification(2, 1.0, 0.25, 0.0).is_err());
    }
}
