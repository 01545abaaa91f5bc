use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::chain::{tv_distance, ShiftSpec, TokenChain, MAX_ENUMERATION};
use crate::error::{check_dim, invalid, Error, Result};
use crate::rng::{seeded, Rng};
use crate::stats::binomial_band;

/// Tabular parser `g(z, j_prev) -> j`. Modules are numbered `1..=k`; `j = 0`
/// is the state before the first token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ParserRepr", into = "ParserRepr")]
pub struct Parser {
    /// `table[z][j_prev]`.
    table: Vec<Vec<usize>>,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct ParserRepr {
    k: usize,
    table: Vec<Vec<usize>>,
}

impl TryFrom<ParserRepr> for Parser {
    type Error = Error;
    fn try_from(r: ParserRepr) -> Result<Self> {
        Parser::new(r.table, r.k)
    }
}

impl From<Parser> for ParserRepr {
    fn from(p: Parser) -> Self {
        ParserRepr { k: p.k, table: p.table }
    }
}

impl Parser {
    pub fn new(table: Vec<Vec<usize>>, k: usize) -> Result<Self> {
        if k == 0 || table.is_empty() {
            return Err(invalid("parser needs at least one module and one token"));
        }
        for row in &table {
            check_dim(k + 1, row.len())?;
            if row.iter().any(|&j| j == 0 || j > k) {
                return Err(invalid(format!("parser outputs must lie in 1..={k}")));
            }
        }
        Ok(Parser { table, k })
    }

    pub fn constant(alphabet_size: usize, k: usize, j: usize) -> Result<Self> {
        Parser::new(vec![vec![j; k + 1]; alphabet_size], k)
    }

    pub fn random(alphabet_size: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let table = (0..alphabet_size).map(|_| (0..=k).map(|_| rng.random_range(1..=k)).collect()).collect();
        Parser::new(table, k)
    }

    pub fn alphabet_size(&self) -> usize {
        self.table.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lookup(&self, z: usize, j_prev: usize) -> usize {
        self.table[z][j_prev]
    }

    /// Copy with cell `(z, j_prev)` remapped to `j`.
    pub fn with_cell(&self, z: usize, j_prev: usize, j: usize) -> Result<Self> {
        let mut table = self.table.clone();
        let cell = table
            .get_mut(z)
            .and_then(|row| row.get_mut(j_prev))
            .ok_or_else(|| invalid(format!("cell ({z}, {j_prev}) outside the table")))?;
        *cell = j;
        Parser::new(table, self.k)
    }

    /// Reassigns each cell independently with probability `rate` to a
    /// different module. Needs `k >= 2` for any change to happen.
    pub fn corrupted(&self, rate: f64, rng: &mut Rng) -> Result<Self> {
        let mut table = self.table.clone();
        for row in table.iter_mut() {
            for cell in row.iter_mut() {
                if self.k >= 2 && rng.random::<f64>() < rate {
                    let mut j = rng.random_range(1..self.k);
                    if j >= *cell {
                        j += 1;
                    }
                    *cell = j;
                }
            }
        }
        Parser::new(table, self.k)
    }

    /// `j_t = g(z_t, j_{t-1})` with `j_0 = 0`.
    pub fn parse(&self, w: &[usize]) -> Result<Vec<usize>> {
        let mut j = 0;
        w.iter()
            .map(|&z| {
                if z >= self.alphabet_size() {
                    return Err(invalid(format!("token {z} outside the alphabet of size {}", self.alphabet_size())));
                }
                j = self.table[z][j];
                Ok(j)
            })
            .collect()
    }

    /// Labeled triples `(j_prev, z, j_next)` along the parse of `w`.
    pub fn examples(&self, w: &[usize]) -> Result<Vec<(usize, usize, usize)>> {
        let js = self.parse(w)?;
        Ok(w.iter()
            .enumerate()
            .map(|(t, &z)| (if t == 0 { 0 } else { js[t - 1] }, z, js[t]))
            .collect())
    }

    fn check_compatible(&self, other: &Parser) -> Result<()> {
        check_dim(self.alphabet_size(), other.alphabet_size())?;
        check_dim(self.k, other.k)
    }
}

/// Majority vote per `(z, j_prev)` cell; ties go to the smallest module index
/// and cells without examples map to module 1.
pub fn train_parser(examples: &[(usize, usize, usize)], alphabet_size: usize, k: usize) -> Result<Parser> {
    if examples.is_empty() {
        return Err(invalid("no parser examples"));
    }
    let mut votes: BTreeMap<(usize, usize), BTreeMap<usize, usize>> = BTreeMap::new();
    for &(j_prev, z, j) in examples {
        if z >= alphabet_size || j_prev > k || j == 0 || j > k {
            return Err(invalid(format!("example ({j_prev}, {z}, {j}) outside the parser domain")));
        }
        *votes.entry((z, j_prev)).or_default().entry(j).or_default() += 1;
    }
    let mut table = vec![vec![1; k + 1]; alphabet_size];
    for ((z, j_prev), counts) in votes {
        // Highest count, then smallest module index.
        let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(j, _)| *j).unwrap_or(1);
        table[z][j_prev] = best;
    }
    Parser::new(table, k)
}

/// Fraction of examples the parser gets wrong.
pub fn parser_error_rate(parser: &Parser, examples: &[(usize, usize, usize)]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let wrong = examples.iter().filter(|&&(jp, z, j)| parser.lookup(z, jp) != j).count();
    wrong as f64 / examples.len() as f64
}

/// `p_t(z, j)`: probability that `z_t = z` and `j_{t-1} = j` under `chain`
/// parsed by `parser`, for `t = 1..=T`. Rows index tokens, columns `0..=k`.
pub fn mixture_sequence(chain: &TokenChain, parser: &Parser) -> Result<Vec<DMatrix<f64>>> {
    check_dim(chain.alphabet_size(), parser.alphabet_size())?;
    let nz = chain.alphabet_size();
    let nj = parser.k + 1;
    let mut out = Vec::with_capacity(chain.t_len());
    if chain.t_len() == 0 {
        return Ok(out);
    }
    let mut p = DMatrix::<f64>::zeros(nz, nj);
    for z in 0..nz {
        p[(z, 0)] = chain.initial()[z];
    }
    out.push(p.clone());
    for _ in 1..chain.t_len() {
        let mut next = DMatrix::<f64>::zeros(nz, nj);
        for zp in 0..nz {
            for jp in 0..nj {
                let m = p[(zp, jp)];
                if m == 0.0 {
                    continue;
                }
                let j = parser.lookup(zp, jp);
                for z in 0..nz {
                    next[(z, j)] += chain.transition()[zp][z] * m;
                }
            }
        }
        p = next;
        out.push(p.clone());
    }
    Ok(out)
}

/// `p_t` for a single `t` in `1..=T`.
pub fn mixture_distribution(chain: &TokenChain, parser: &Parser, t: usize) -> Result<DMatrix<f64>> {
    if t == 0 || t > chain.t_len() {
        return Err(invalid(format!("t must lie in 1..={}", chain.t_len())));
    }
    Ok(mixture_sequence(&chain.with_length(t), parser)?.pop().expect("t >= 1"))
}

/// `T^-1 sum_t p_t`.
pub fn averaged_mixture(chain: &TokenChain, parser: &Parser) -> Result<DMatrix<f64>> {
    let seq = mixture_sequence(chain, parser)?;
    if seq.is_empty() {
        return Err(invalid("chain has T = 0"));
    }
    let n = seq.len() as f64;
    let mut acc = DMatrix::<f64>::zeros(seq[0].nrows(), seq[0].ncols());
    for p in &seq {
        acc += p;
    }
    Ok(acc / n)
}

/// Walks every word of length `t_len` depth-first, calling `visit(word, prob)`.
pub(crate) fn for_each_word(chain: &TokenChain, t_len: usize, mut visit: impl FnMut(&[usize], f64)) -> Result<()> {
    let count = (chain.alphabet_size() as f64).powi(t_len as i32);
    if count > MAX_ENUMERATION as f64 {
        return Err(invalid(format!("{count} words exceed the enumeration limit {MAX_ENUMERATION}")));
    }
    fn rec(chain: &TokenChain, t_len: usize, w: &mut Vec<usize>, prob: f64, visit: &mut dyn FnMut(&[usize], f64)) {
        if w.len() == t_len {
            visit(w, prob);
            return;
        }
        let prev = w.last().copied();
        for z in 0..chain.alphabet_size() {
            let p = chain.prob(prev, z);
            w.push(z);
            rec(chain, t_len, w, prob * p, visit);
            w.pop();
        }
    }
    rec(chain, t_len, &mut Vec::with_capacity(t_len), 1.0, &mut visit);
    Ok(())
}

/// `p_t` by summing over all `|Z|^t` prefixes.
pub fn brute_force_mixture(chain: &TokenChain, parser: &Parser, t: usize) -> Result<DMatrix<f64>> {
    check_dim(chain.alphabet_size(), parser.alphabet_size())?;
    if t == 0 {
        return Err(invalid("t must be positive"));
    }
    let mut m = DMatrix::<f64>::zeros(chain.alphabet_size(), parser.k + 1);
    let mut failed = None;
    for_each_word(chain, t, |w, p| match parser.parse(&w[..t - 1]) {
        Ok(js) => m[(w[t - 1], js.last().copied().unwrap_or(0))] += p,
        Err(e) => failed = Some(e),
    })?;
    match failed {
        Some(e) => Err(e),
        None => Ok(m),
    }
}

fn flat_tv(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    tv_distance(a.as_slice(), b.as_slice())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistShiftVerdict {
    /// `||q_t - p_t||_TV` for `t = 1..=T`.
    pub per_step_tv: Vec<f64>,
    pub per_step_holds: bool,
    pub averaged_tv: f64,
    /// `T alpha_shift`.
    pub bound: f64,
    pub holds: bool,
}

/// Compares the exact mixtures under the base and shifted chains.
pub fn lemma_distshift_check(spec: &ShiftSpec, parser: &Parser) -> Result<DistShiftVerdict> {
    let p = mixture_sequence(spec.base(), parser)?;
    let q = mixture_sequence(spec.shifted(), parser)?;
    let a = spec.alpha_shift();
    let per_step_tv = p.iter().zip(&q).map(|(x, y)| flat_tv(x, y)).collect::<Result<Vec<_>>>()?;
    let per_step_holds = per_step_tv.iter().enumerate().all(|(t, tv)| *tv <= (t + 1) as f64 * a + 1e-12);
    let averaged_tv = flat_tv(&averaged_mixture(spec.base(), parser)?, &averaged_mixture(spec.shifted(), parser)?)?;
    let bound = spec.base().t_len() as f64 * a;
    Ok(DistShiftVerdict { holds: averaged_tv <= bound + 1e-12, per_step_tv, per_step_holds, averaged_tv, bound })
}

/// Per-step disagreement `sum_{z,j} p(z, j) 1[g_hat(z, j) != g(z, j)]` under
/// the averaged mixture of `chain` parsed by `parser_true`.
pub fn step_error(parser_hat: &Parser, parser_true: &Parser, chain: &TokenChain) -> Result<f64> {
    parser_hat.check_compatible(parser_true)?;
    let p = averaged_mixture(chain, parser_true)?;
    let mut e = 0.0;
    for z in 0..p.nrows() {
        for j in 0..p.ncols() {
            if parser_hat.lookup(z, j) != parser_true.lookup(z, j) {
                e += p[(z, j)];
            }
        }
    }
    Ok(e)
}

/// Exact `P[g_hat(w) != g(w)]` by propagating the mass of words whose parses
/// still agree. Polynomial in `|Z|`, `k` and `T`.
pub fn sequence_error_dp(parser_hat: &Parser, parser_true: &Parser, chain: &TokenChain) -> Result<f64> {
    parser_hat.check_compatible(parser_true)?;
    check_dim(chain.alphabet_size(), parser_true.alphabet_size())?;
    let nz = chain.alphabet_size();
    let nj = parser_true.k + 1;
    if chain.t_len() == 0 {
        return Ok(0.0);
    }
    let mut m = DMatrix::<f64>::zeros(nz, nj);
    for z in 0..nz {
        m[(z, 0)] = chain.initial()[z];
    }
    let mut diverged = 0.0;
    for t in 0..chain.t_len() {
        let mut next = DMatrix::<f64>::zeros(nz, nj);
        for zp in 0..nz {
            for jp in 0..nj {
                let mass = m[(zp, jp)];
                if mass == 0.0 {
                    continue;
                }
                let j = parser_true.lookup(zp, jp);
                if parser_hat.lookup(zp, jp) != j {
                    diverged += mass;
                } else if t + 1 < chain.t_len() {
                    for z in 0..nz {
                        next[(z, j)] += chain.transition()[zp][z] * mass;
                    }
                }
            }
        }
        m = next;
    }
    Ok(diverged)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SequenceErrorMethod {
    Enumeration,
    MonteCarlo { n: usize, std_err: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceErrorVerdict {
    pub eps_g: f64,
    pub sequence_error: f64,
    pub method: SequenceErrorMethod,
    /// `T eps_g`.
    pub bound: f64,
    pub holds: bool,
}

/// Checks `P[g_hat(w) != g(w)] <= T eps_g`. The sequence error is exact when
/// the word space can be enumerated; otherwise it is estimated from `n_mc`
/// words and compared against the bound plus a three-sigma binomial band.
pub fn sequence_error_check(
    parser_hat: &Parser,
    parser_true: &Parser,
    chain: &TokenChain,
    n_mc: usize,
    seed: u64,
) -> Result<SequenceErrorVerdict> {
    let eps_g = step_error(parser_hat, parser_true, chain)?;
    let bound = chain.t_len() as f64 * eps_g;
    let words = (chain.alphabet_size() as f64).powi(chain.t_len() as i32);
    let (sequence_error, method, slack) = if words <= MAX_ENUMERATION as f64 {
        let mut err = 0.0;
        let mut failed = None;
        for_each_word(chain, chain.t_len(), |w, p| match (parser_hat.parse(w), parser_true.parse(w)) {
            (Ok(a), Ok(b)) if a != b => err += p,
            (Ok(_), Ok(_)) => {}
            (Err(e), _) | (_, Err(e)) => failed = Some(e),
        })?;
        if let Some(e) = failed {
            return Err(e);
        }
        (err, SequenceErrorMethod::Enumeration, 1e-12)
    } else {
        if n_mc == 0 {
            return Err(invalid("n_mc must be positive when the word space is too large to enumerate"));
        }
        let mut rng = seeded(seed);
        let mut wrong = 0usize;
        for _ in 0..n_mc {
            let w = chain.sample_word(&mut rng);
            if parser_hat.parse(&w)? != parser_true.parse(&w)? {
                wrong += 1;
            }
        }
        let p = wrong as f64 / n_mc as f64;
        let se = binomial_band(p, n_mc, 1.0);
        (p, SequenceErrorMethod::MonteCarlo { n: n_mc, std_err: se }, 3.0 * se)
    };
    Ok(SequenceErrorVerdict { holds: sequence_error <= bound + slack, eps_g, sequence_error, method, bound })
}
