use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::rng::Rng;

const ROW_TOL: f64 = 1e-12;
/// Largest word space enumerated exactly.
pub const MAX_ENUMERATION: usize = 1_000_000;

/// `sum_i |p_i - q_i|`, so disjoint distributions are at distance 2.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dim(p.len(), q.len())?;
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(invalid(format!("{what} is empty")));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(invalid(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Markov chain over a finite token alphabet `0..alphabet_size` emitting words
/// of fixed length `t_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainRepr", into = "ChainRepr")]
pub struct TokenChain {
    initial: Vec<f64>,
    transition: Vec<Vec<f64>>,
    t_len: usize,
}

#[derive(Serialize, Deserialize)]
struct ChainRepr {
    initial: Vec<f64>,
    transition: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    t_len: usize,
}

impl TryFrom<ChainRepr> for TokenChain {
    type Error = Error;
    fn try_from(r: ChainRepr) -> Result<Self> {
        TokenChain::new(r.initial, r.transition, r.t_len)
    }
}

impl From<TokenChain> for ChainRepr {
    fn from(c: TokenChain) -> Self {
        ChainRepr { initial: c.initial, transition: c.transition, t_len: c.t_len }
    }
}

impl TokenChain {
    pub fn new(initial: Vec<f64>, transition: Vec<Vec<f64>>, t_len: usize) -> Result<Self> {
        check_distribution(&initial, "initial distribution")?;
        check_dim(initial.len(), transition.len())?;
        for (i, row) in transition.iter().enumerate() {
            check_dim(initial.len(), row.len())?;
            check_distribution(row, &format!("transition row {i}"))?;
        }
        Ok(TokenChain { initial, transition, t_len })
    }

    /// Rows drawn from a flat Dirichlet.
    pub fn random(alphabet_size: usize, t_len: usize, rng: &mut Rng) -> Result<Self> {
        if alphabet_size == 0 {
            return Err(invalid("alphabet must be nonempty"));
        }
        let initial = random_distribution(alphabet_size, rng);
        let transition = (0..alphabet_size).map(|_| random_distribution(alphabet_size, rng)).collect();
        TokenChain::new(initial, transition, t_len)
    }

    pub fn alphabet_size(&self) -> usize {
        self.initial.len()
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    /// `p(z | z_prev)`; `z_prev = None` is the start of the word.
    pub fn prob(&self, z_prev: Option<usize>, z: usize) -> f64 {
        match z_prev {
            None => self.initial[z],
            Some(p) => self.transition[p][z],
        }
    }

    pub fn with_length(&self, t_len: usize) -> Self {
        TokenChain { t_len, ..self.clone() }
    }

    pub fn sample_word(&self, rng: &mut Rng) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.t_len);
        let mut prev = None;
        for _ in 0..self.t_len {
            let row = match prev {
                None => &self.initial,
                Some(p) => &self.transition[p],
            };
            let z = WeightedIndex::new(row).expect("validated distribution").sample(rng);
            w.push(z);
            prev = Some(z);
        }
        w
    }

    pub fn word_probability(&self, w: &[usize]) -> Result<f64> {
        let mut p = 1.0;
        let mut prev = None;
        for &z in w {
            if z >= self.alphabet_size() {
                return Err(invalid(format!("token {z} outside the alphabet")));
            }
            p *= self.prob(prev, z);
            prev = Some(z);
        }
        Ok(p)
    }

    /// Probabilities of all `|Z|^T` words, in the order of [`enumerate_words`].
    pub fn sequence_distribution(&self) -> Result<Vec<f64>> {
        let words = enumerate_words(self.alphabet_size(), self.t_len)?;
        words.iter().map(|w| self.word_probability(w)).collect()
    }
}

fn random_distribution(n: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    // Push the rounding residue into the largest entry so the row sums to 1.
    let residue = 1.0 - p.iter().sum::<f64>();
    let top = (0..n).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
    p[top] += residue;
    p
}

/// All words of length `t_len` over `0..alphabet_size` in lexicographic order.
pub fn enumerate_words(alphabet_size: usize, t_len: usize) -> Result<Vec<Vec<usize>>> {
    let count = (alphabet_size as f64).powi(t_len as i32);
    if count > MAX_ENUMERATION as f64 {
        return Err(invalid(format!("{count} words exceed the enumeration limit {MAX_ENUMERATION}")));
    }
    let mut words = vec![Vec::new()];
    for _ in 0..t_len {
        words = words
            .into_iter()
            .flat_map(|w| {
                (0..alphabet_size).map(move |z| {
                    let mut n = w.clone();
                    n.push(z);
                    n
                })
            })
            .collect();
    }
    Ok(words)
}

/// A base chain and a shifted chain whose corresponding rows (including the
/// initial distribution) are within `alpha_shift` in total variation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShiftRepr", into = "ShiftRepr")]
pub struct ShiftSpec {
    base: TokenChain,
    shifted: TokenChain,
    alpha_shift: f64,
}

#[derive(Serialize, Deserialize)]
struct ShiftRepr {
    base: TokenChain,
    shifted: TokenChain,
    alpha_shift: f64,
}

impl TryFrom<ShiftRepr> for ShiftSpec {
    type Error = Error;
    fn try_from(r: ShiftRepr) -> Result<Self> {
        ShiftSpec::new(r.base, r.shifted, r.alpha_shift)
    }
}

impl From<ShiftSpec> for ShiftRepr {
    fn from(s: ShiftSpec) -> Self {
        ShiftRepr { base: s.base, shifted: s.shifted, alpha_shift: s.alpha_shift }
    }
}

impl ShiftSpec {
    pub fn new(base: TokenChain, shifted: TokenChain, alpha_shift: f64) -> Result<Self> {
        check_dim(base.alphabet_size(), shifted.alphabet_size())?;
        check_dim(base.t_len, shifted.t_len)?;
        if !(0.0..=2.0).contains(&alpha_shift) {
            return Err(invalid("alpha_shift must lie in [0, 2]"));
        }
        let spec = ShiftSpec { base, shifted, alpha_shift };
        let worst = spec.max_row_tv();
        if worst > alpha_shift + ROW_TOL {
            return Err(Error::AssumptionViolated(format!("row TV {worst} exceeds alpha_shift {alpha_shift}")));
        }
        Ok(spec)
    }

    /// Mixes every row of `base` towards a random distribution so that its TV
    /// to the base row equals `alpha_shift` whenever that is achievable.
    pub fn random(base: &TokenChain, alpha_shift: f64, rng: &mut Rng) -> Result<Self> {
        let n = base.alphabet_size();
        let shift_row = |row: &[f64], rng: &mut Rng| -> Vec<f64> {
            let r = random_distribution(n, rng);
            let dist: f64 = row.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum();
            let lam = if dist > 0.0 { (alpha_shift / dist).min(1.0) } else { 0.0 };
            let mut q: Vec<f64> = row.iter().zip(&r).map(|(a, b)| (1.0 - lam) * a + lam * b).collect();
            let residue = 1.0 - q.iter().sum::<f64>();
            let top = (0..n).max_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap_or(0);
            q[top] += residue;
            q
        };
        let initial = shift_row(&base.initial, rng);
        let transition = base.transition.iter().map(|row| shift_row(row, rng)).collect();
        let shifted = TokenChain::new(initial, transition, base.t_len)?;
        ShiftSpec::new(base.clone(), shifted, alpha_shift)
    }

    pub fn base(&self) -> &TokenChain {
        &self.base
    }

    pub fn shifted(&self) -> &TokenChain {
        &self.shifted
    }

    pub fn alpha_shift(&self) -> f64 {
        self.alpha_shift
    }

    pub fn max_row_tv(&self) -> f64 {
        let rows = std::iter::once((&self.base.initial, &self.shifted.initial))
            .chain(self.base.transition.iter().zip(&self.shifted.transition));
        rows.map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()).fold(0.0, f64::max)
    }
}

/// Binary chain where the base stays in token 0 forever while the shifted
/// chain leaks `alpha / 2` per step into the absorbing token 1. Returns the
/// spec and its exact word-level TV `2 (1 - (1 - alpha/2)^T)`.
pub fn proposition1_construct(alpha_shift: f64, t_len: usize) -> Result<(ShiftSpec, f64)> {
    if !(alpha_shift > 0.0 && alpha_shift <= 2.0) {
        return Err(invalid("alpha_shift must lie in (0, 2]"));
    }
    if t_len == 0 {
        return Err(invalid("T must be positive"));
    }
    let h = alpha_shift / 2.0;
    let base = TokenChain::new(vec![1.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], t_len)?;
    let shifted = TokenChain::new(vec![1.0 - h, h], vec![vec![1.0 - h, h], vec![0.0, 1.0]], t_len)?;
    let spec = ShiftSpec::new(base, shifted, alpha_shift)?;
    Ok((spec, 2.0 * (1.0 - (1.0 - h).powi(t_len as i32))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn tv_cases() {
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
        let mut rng = seeded(1);
        for _ in 0..100 {
            let p = random_distribution(5, &mut rng);
            let q = random_distribution(5, &mut rng);
            assert_eq!(tv_distance(&p, &q).unwrap(), tv_distance(&q, &p).unwrap());
        }
    }

    #[test]
    fn chain_validation() {
        assert!(TokenChain::new(vec![0.5, 0.6], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 2).is_err());
        assert!(TokenChain::new(vec![1.0, 0.0], vec![vec![1.0, 0.0]], 2).is_err());
        assert!(TokenChain::new(vec![1.0, 0.0], vec![vec![1.5, -0.5], vec![0.0, 1.0]], 2).is_err());
        let mut rng = seeded(2);
        let c = TokenChain::random(4, 3, &mut rng).unwrap();
        let s: f64 = c.sequence_distribution().unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_chain_is_deterministic() {
        let c = TokenChain::new(vec![0.0, 1.0, 0.0], vec![vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 5)
            .unwrap();
        let mut rng = seeded(3);
        for _ in 0..10 {
            assert_eq!(c.sample_word(&mut rng), vec![1, 0, 2, 1, 0]);
        }
    }

    #[test]
    fn bigram_frequencies_match_transitions() {
        let mut rng = seeded(4);
        let c = TokenChain::random(3, 2, &mut rng).unwrap();
        let n = 100_000;
        let mut counts = [[0usize; 3]; 3];
        let mut firsts = [0usize; 3];
        for _ in 0..n {
            let w = c.sample_word(&mut rng);
            firsts[w[0]] += 1;
            counts[w[0]][w[1]] += 1;
        }
        for (a, row) in counts.iter().enumerate() {
            for (b, &count) in row.iter().enumerate() {
                let p = c.transition()[a][b];
                let m = firsts[a] as f64;
                let sigma = (p * (1.0 - p) / m).sqrt();
                assert!((count as f64 / m - p).abs() <= 4.0 * sigma + 1e-12);
            }
        }
        let w1 = c.sample_word(&mut seeded(9));
        assert_eq!(w1, c.sample_word(&mut seeded(9)));
    }

    #[test]
    fn random_shift_respects_alpha() {
        let mut rng = seeded(5);
        for &a in &[0.05, 0.2, 1.0] {
            let base = TokenChain::random(4, 8, &mut rng).unwrap();
            let s = ShiftSpec::random(&base, a, &mut rng).unwrap();
            assert!(s.max_row_tv() <= a + 1e-12);
            assert!(s.max_row_tv() >= 0.99 * a);
        }
    }

    #[test]
    fn sequence_shift_examples() {
        assert!((proposition1_construct(1.0, 2).unwrap().1 - 1.5).abs() < 1e-15);
        let (s, tv) = proposition1_construct(0.01, 1).unwrap();
        assert!((tv - 0.01).abs() < 1e-15);
        assert!((s.max_row_tv() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn sequence_shift_matches_brute_force() {
        for &a in &[0.1, 0.5, 1.0] {
            for t in 1..=12 {
                let (s, exact) = proposition1_construct(a, t).unwrap();
                let p = s.base().sequence_distribution().unwrap();
                let q = s.shifted().sequence_distribution().unwrap();
                assert!((tv_distance(&p, &q).unwrap() - exact).abs() <= 1e-12);
            }
        }
    }
}
