use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::rng::Rng;

/// Covariate distributions on R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SamplerRepr", into = "SamplerRepr")]
pub struct CovariateSampler {
    d: usize,
    kind: SamplerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    /// Coordinates i.i.d. uniform on `[-half_width, half_width]`.
    UniformCube { half_width: f64 },
    /// The cube with half-width `1/sqrt(d)`, which sits inside the unit ball.
    UniformScaled,
    /// Uniform on the unit sphere `||x|| = 1`.
    UnitSphere,
    /// Always returns `x0`.
    PointMass { x0: Vec<f64> },
    /// Picks a component with probability proportional to its weight.
    Mixture { components: Vec<(f64, CovariateSampler)> },
}

#[derive(Serialize, Deserialize)]
struct SamplerRepr {
    d: usize,
    #[serde(flatten)]
    kind: SamplerKind,
}

impl TryFrom<SamplerRepr> for CovariateSampler {
    type Error = Error;
    fn try_from(r: SamplerRepr) -> Result<Self> {
        CovariateSampler::new(r.d, r.kind)
    }
}

impl From<CovariateSampler> for SamplerRepr {
    fn from(s: CovariateSampler) -> Self {
        SamplerRepr { d: s.d, kind: s.kind }
    }
}

impl CovariateSampler {
    pub fn new(d: usize, kind: SamplerKind) -> Result<Self> {
        if d == 0 {
            return Err(invalid("sampler dimension must be positive"));
        }
        match &kind {
            SamplerKind::UniformCube { half_width } => {
                if !(half_width.is_finite() && *half_width > 0.0) {
                    return Err(invalid("cube half-width must be positive and finite"));
                }
            }
            SamplerKind::UniformScaled | SamplerKind::UnitSphere => {}
            SamplerKind::PointMass { x0 } => {
                check_dim(d, x0.len())?;
                if x0.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("point mass location must be finite"));
                }
            }
            SamplerKind::Mixture { components } => {
                if components.is_empty() {
                    return Err(invalid("mixture needs at least one component"));
                }
                for (w, c) in components {
                    check_dim(d, c.d)?;
                    if !(w.is_finite() && *w > 0.0) {
                        return Err(invalid("mixture weights must be positive"));
                    }
                }
            }
        }
        Ok(CovariateSampler { d, kind })
    }

    pub fn uniform_cube(d: usize, half_width: f64) -> Result<Self> {
        CovariateSampler::new(d, SamplerKind::UniformCube { half_width })
    }

    pub fn uniform_scaled(d: usize) -> Result<Self> {
        CovariateSampler::new(d, SamplerKind::UniformScaled)
    }

    pub fn unit_sphere(d: usize) -> Result<Self> {
        CovariateSampler::new(d, SamplerKind::UnitSphere)
    }

    pub fn point_mass(x0: DVector<f64>) -> Result<Self> {
        CovariateSampler::new(x0.len(), SamplerKind::PointMass { x0: x0.iter().copied().collect() })
    }

    pub fn mixture(d: usize, components: Vec<(f64, CovariateSampler)>) -> Result<Self> {
        CovariateSampler::new(d, SamplerKind::Mixture { components })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> &SamplerKind {
        &self.kind
    }

    /// Half-width of the cube kinds.
    fn cube_half_width(&self) -> Option<f64> {
        match self.kind {
            SamplerKind::UniformCube { half_width } => Some(half_width),
            SamplerKind::UniformScaled => Some(1.0 / (self.d as f64).sqrt()),
            _ => None,
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        match &self.kind {
            SamplerKind::UniformCube { .. } | SamplerKind::UniformScaled => {
                let c = self.cube_half_width().unwrap();
                DVector::from_fn(self.d, |_, _| rng.random_range(-c..=c))
            }
            SamplerKind::UnitSphere => loop {
                let g = DVector::<f64>::from_fn(self.d, |_, _| StandardNormal.sample(rng));
                let n = g.norm();
                if n > 1e-300 {
                    break g / n;
                }
            },
            SamplerKind::PointMass { x0 } => DVector::from_column_slice(x0),
            SamplerKind::Mixture { components } => {
                let total: f64 = components.iter().map(|(w, _)| w).sum();
                let mut u = rng.random::<f64>() * total;
                for (w, c) in components {
                    if u < *w {
                        return c.sample(rng);
                    }
                    u -= w;
                }
                components.last().unwrap().1.sample(rng)
            }
        }
    }

    /// Largest `||x||` the sampler can emit.
    pub fn support_radius(&self) -> f64 {
        match &self.kind {
            SamplerKind::UniformCube { .. } | SamplerKind::UniformScaled => {
                self.cube_half_width().unwrap() * (self.d as f64).sqrt()
            }
            SamplerKind::UnitSphere => 1.0,
            SamplerKind::PointMass { x0 } => x0.iter().map(|v| v * v).sum::<f64>().sqrt(),
            SamplerKind::Mixture { components } => {
                components.iter().map(|(_, c)| c.support_radius()).fold(0.0, f64::max)
            }
        }
    }

    /// Exact `E[(x^T delta x)^2]` for the kinds where it has a closed form.
    pub fn quartic_moment(&self, delta: &DMatrix<f64>) -> Result<Option<f64>> {
        if delta.shape() != (self.d, self.d) {
            return Err(Error::DimensionMismatch { expected: self.d, found: delta.nrows() });
        }
        let d = self.d;
        let diag_sq: f64 = (0..d).map(|i| delta[(i, i)].powi(2)).sum();
        let trace: f64 = delta.trace();
        let off_sq: f64 = delta.norm_squared() - diag_sq;
        let value = match &self.kind {
            SamplerKind::UniformCube { .. } | SamplerKind::UniformScaled => {
                // E x^2 = c^2/3, E x^4 = c^4/5, odd moments vanish.
                let c = self.cube_half_width().unwrap();
                let m2 = c * c / 3.0;
                let m4 = c.powi(4) / 5.0;
                let cross = trace * trace - diag_sq; // sum over i != j of D_ii D_jj
                Some(m4 * diag_sq + m2 * m2 * cross + 2.0 * m2 * m2 * off_sq)
            }
            SamplerKind::UnitSphere => {
                // E x_i^4 = 3/(d(d+2)), E x_i^2 x_j^2 = 1/(d(d+2)).
                let sym = (delta + delta.transpose()) * 0.5;
                let df = d as f64;
                Some((2.0 * sym.norm_squared() + trace * trace) / (df * (df + 2.0)))
            }
            SamplerKind::PointMass { x0 } => {
                let x = DVector::from_column_slice(x0);
                Some((delta * &x).dot(&x).powi(2))
            }
            SamplerKind::Mixture { components } => {
                let total: f64 = components.iter().map(|(w, _)| w).sum();
                let mut acc = 0.0;
                for (w, c) in components {
                    match c.quartic_moment(delta)? {
                        Some(v) => acc += w / total * v,
                        None => return Ok(None),
                    }
                }
                Some(acc)
            }
        };
        Ok(value)
    }

    /// Exact `min E[(x^T D x)^2]` over symmetric `D` with `||D||_F = 1`, where
    /// known in closed form.
    pub fn closed_form_alpha(&self) -> Option<f64> {
        let df = self.d as f64;
        match &self.kind {
            SamplerKind::UniformCube { .. } | SamplerKind::UniformScaled => {
                let c4 = self.cube_half_width().unwrap().powi(4);
                // Trace-free diagonal directions attain 4c^4/45 once d >= 2;
                // off-diagonal directions give 2c^4/9, which is larger.
                Some(if self.d == 1 { c4 / 5.0 } else { 4.0 * c4 / 45.0 })
            }
            SamplerKind::UnitSphere => Some(if self.d == 1 { 1.0 } else { 2.0 / (df * (df + 2.0)) }),
            SamplerKind::PointMass { x0 } => Some(if self.d == 1 { x0[0].powi(4) } else { 0.0 }),
            SamplerKind::Mixture { .. } => None,
        }
    }

    pub fn id(&self) -> String {
        match &self.kind {
            SamplerKind::UniformCube { half_width } => format!("uniform_cube(d={},c={half_width})", self.d),
            SamplerKind::UniformScaled => format!("uniform_scaled(d={})", self.d),
            SamplerKind::UnitSphere => format!("unit_sphere(d={})", self.d),
            SamplerKind::PointMass { x0 } => format!("point_mass({x0:?})"),
            SamplerKind::Mixture { components } => {
                let parts: Vec<String> = components.iter().map(|(w, c)| format!("{w}*{}", c.id())).collect();
                format!("mixture[{}]", parts.join(","))
            }
        }
    }
}

/// Label-noise distributions, all mean zero and supported on `[-xi_max, xi_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Uniform,
    /// Normal with standard deviation `xi_max / 2`, conditioned on `|xi| <= xi_max`.
    TruncatedGaussian,
    Zero,
}

impl NoiseKind {
    pub fn sample(self, xi_max: f64, rng: &mut Rng) -> f64 {
        if xi_max == 0.0 {
            return 0.0;
        }
        match self {
            NoiseKind::Zero => 0.0,
            NoiseKind::Uniform => rng.random_range(-xi_max..=xi_max),
            NoiseKind::TruncatedGaussian => loop {
                let z: f64 = StandardNormal.sample(rng);
                let v = 0.5 * xi_max * z;
                if v.abs() <= xi_max {
                    break v;
                }
            },
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            NoiseKind::Uniform => "uniform",
            NoiseKind::TruncatedGaussian => "truncated_gaussian",
            NoiseKind::Zero => "zero",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_unit_symmetric;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    #[test]
    fn supports_are_respected() {
        let mut rng = seeded(1);
        let cube = CovariateSampler::uniform_cube(3, 0.5).unwrap();
        let scaled = CovariateSampler::uniform_scaled(4).unwrap();
        let sphere = CovariateSampler::unit_sphere(5).unwrap();
        for _ in 0..1000 {
            assert!(cube.sample(&mut rng).amax() <= 0.5);
            let x = scaled.sample(&mut rng);
            assert!(x.amax() <= 0.5 && x.norm() <= 1.0);
            assert_abs_diff_eq!(sphere.sample(&mut rng).norm(), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(scaled.support_radius(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn cube_alpha_at_half_width_is_one_over_180() {
        let cube = CovariateSampler::uniform_cube(3, 0.5).unwrap();
        assert_abs_diff_eq!(cube.closed_form_alpha().unwrap(), 1.0 / 180.0, epsilon = 1e-15);
        // The minimizing direction is trace-free diagonal.
        let s = 0.5f64.sqrt();
        let delta = DMatrix::from_diagonal(&DVector::from_vec(vec![s, -s, 0.0]));
        assert_abs_diff_eq!(cube.quartic_moment(&delta).unwrap().unwrap(), 1.0 / 180.0, epsilon = 1e-15);
    }

    #[test]
    fn quartic_moment_matches_textbook_expansion() {
        // E = (1/80) sum D_ii^2 + (1/144) sum_{i != j} D_ii D_jj + (1/72) sum_{i != j} D_ij^2.
        let cube = CovariateSampler::uniform_cube(4, 0.5).unwrap();
        let mut rng = seeded(2);
        for _ in 0..20 {
            let dm = random_unit_symmetric(4, &mut rng);
            let mut expected = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    if i == j {
                        expected += dm[(i, i)].powi(2) / 80.0;
                    } else {
                        expected += dm[(i, i)] * dm[(j, j)] / 144.0 + dm[(i, j)].powi(2) / 72.0;
                    }
                }
            }
            assert_abs_diff_eq!(cube.quartic_moment(&dm).unwrap().unwrap(), expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn sphere_moment_matches_monte_carlo() {
        let sphere = CovariateSampler::unit_sphere(3).unwrap();
        let mut rng = seeded(3);
        let dm = random_unit_symmetric(3, &mut rng);
        let exact = sphere.quartic_moment(&dm).unwrap().unwrap();
        let n = 200_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let x = sphere.sample(&mut rng);
                (&dm * &x).dot(&x).powi(2)
            })
            .collect();
        let est = crate::stats::MeanEstimate::from_slice(&vals);
        assert!((est.mean - exact).abs() <= 4.0 * est.std_err);
    }

    #[test]
    fn noise_is_bounded() {
        let mut rng = seeded(4);
        for kind in [NoiseKind::Uniform, NoiseKind::TruncatedGaussian] {
            for _ in 0..10_000 {
                assert!(kind.sample(0.1, &mut rng).abs() <= 0.1);
            }
        }
        assert_eq!(NoiseKind::Uniform.sample(0.0, &mut rng), 0.0);
    }

    #[test]
    fn serde_roundtrip() {
        let s = CovariateSampler::mixture(
            2,
            vec![
                (0.5, CovariateSampler::uniform_cube(2, 0.5).unwrap()),
                (0.5, CovariateSampler::point_mass(DVector::from_vec(vec![0.1, 0.2])).unwrap()),
            ],
        )
        .unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: CovariateSampler = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"d":2,"kind":"point_mass","x0":[1.0]}"#;
        assert!(serde_json::from_str::<CovariateSampler>(bad).is_err());
    }
}
