use std::io::{BufRead, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{forward, CovariateSampler, NoiseKind, QuadNet};
use crate::error::{check_dim, invalid, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub y: f64,
    /// The label noise, when the generator is known.
    pub xi: Option<f64>,
}

/// Where a synthetic dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub truth_id: String,
    pub sampler_id: String,
    pub noise_id: String,
    pub xi_max: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    samples: Vec<Sample>,
    provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    d: usize,
    n: usize,
    provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    x: Vec<f64>,
    y: f64,
}

impl Dataset {
    pub fn new(d: usize, samples: Vec<Sample>, provenance: Option<Provenance>) -> Result<Self> {
        for s in &samples {
            check_dim(d, s.x.len())?;
            if !s.y.is_finite() || s.x.iter().any(|v| !v.is_finite()) {
                return Err(invalid("samples must be finite"));
            }
        }
        Ok(Dataset { d, samples, provenance })
    }

    /// Builds a dataset from `(x, y)` pairs; `d` is taken from the first pair.
    pub fn from_pairs(pairs: Vec<(DVector<f64>, f64)>) -> Result<Self> {
        let d = pairs.first().map_or(0, |(x, _)| x.len());
        let samples = pairs.into_iter().map(|(x, y)| Sample { x, y, xi: None }).collect();
        Dataset::new(d, samples, None)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// Largest covariate norm in the dataset.
    pub fn max_norm(&self) -> f64 {
        self.samples.iter().map(|s| s.x.norm()).fold(0.0, f64::max)
    }

    /// `n^-1 sum xi_i^2` when every noise value is recorded.
    pub fn noise_energy(&self) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for s in &self.samples {
            total += s.xi?.powi(2);
        }
        Some(total / self.len() as f64)
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            d: self.d,
            samples: self.samples[..n.min(self.len())].to_vec(),
            provenance: self.provenance.clone(),
        }
    }

    /// Header line with `d`, `n` and provenance, then one `{"x", "y"}` object
    /// per sample.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header { d: self.d, n: self.len(), provenance: self.provenance.clone() };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for s in &self.samples {
            let line = Line { x: s.x.iter().copied().collect(), y: s.y };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: Header = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(invalid("dataset file is empty")),
        };
        let mut samples = Vec::with_capacity(header.n);
        for l in lines {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(&l)?;
            samples.push(Sample { x: DVector::from_vec(line.x), y: line.y, xi: None });
        }
        check_dim(header.n, samples.len())?;
        Dataset::new(header.d, samples, header.provenance)
    }
}

/// Draws `n` i.i.d. samples `y = f_truth(x) + xi`.
pub fn generate_dataset(
    truth: &QuadNet,
    sampler: &CovariateSampler,
    xi_max: f64,
    noise: NoiseKind,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset size must be positive"));
    }
    if !(xi_max.is_finite() && xi_max >= 0.0) {
        return Err(invalid("xi_max must be nonnegative"));
    }
    check_dim(truth.d(), sampler.d())?;
    let mut rng = seeded(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sampler.sample(&mut rng);
        let xi = noise.sample(xi_max, &mut rng);
        let y = forward(truth, &x)? + xi;
        samples.push(Sample { x, y, xi: Some(xi) });
    }
    let provenance = Provenance {
        truth_id: truth.id(),
        sampler_id: sampler.id(),
        noise_id: noise.id().to_string(),
        xi_max,
        seed,
    };
    Dataset::new(truth.d(), samples, Some(provenance))
}
