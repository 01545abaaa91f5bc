//! Scenario files: one JSON object with an optional section per command.
//! Every field of a section has a default, so `{"identify": {}}` is a
//! complete identification scenario. Unknown keys are rejected.

use std::path::Path;

use nalgebra::DMatrix;
use qni_core::bandit::{BanditProblem, EtcConfig};
use qni_core::identify::ShiftSettings;
use qni_core::linalg::random_orthogonal;
use qni_core::module_net::{fit_library, train_parser, ModuleLibrary, Parser, ShiftSpec, TokenChain};
use qni_core::qnn::{BoundSpec, CovariateSampler, NoiseKind, QuadNet, TrainConfig};
use qni_core::rng::{derive_seed, seeded};
use qni_core::transfer::{sigma_min, TransferConfig, TransferProblem};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, LabError, LabResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub identify: Option<IdentifySection>,
    pub bandit: Option<BanditSection>,
    pub transfer: Option<TransferSection>,
    pub modules: Option<ModulesSection>,
    pub sweep: Option<SweepSection>,
    pub verify: Option<VerifySection>,
}

/// A parsed scenario together with the SHA-256 digest of its file bytes.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub hash: String,
}

pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load(path: &Path) -> LabResult<LoadedScenario> {
    let bytes = std::fs::read(path).map_err(|source| LabError::ScenarioRead { path: path.to_path_buf(), source })?;
    let scenario: Scenario = serde_json::from_slice(&bytes)
        .map_err(|e| config(format!("cannot parse scenario {}: {e}", path.display())))?;
    Ok(LoadedScenario { scenario, hash: digest(&bytes) })
}

pub(crate) fn section<'a, T>(s: &'a Option<T>, name: &str) -> LabResult<&'a T> {
    s.as_ref().ok_or_else(|| config(format!("scenario has no \"{name}\" section")))
}

fn core_config(e: qni_core::Error) -> LabError {
    config(e.to_string())
}

fn cube(d: usize, half_width: f64) -> LabResult<CovariateSampler> {
    CovariateSampler::uniform_cube(d, half_width).map_err(core_config)
}

fn check_sampler(s: &CovariateSampler, d: usize, what: &str) -> LabResult<()> {
    if s.d() != d {
        return Err(config(format!("{what} has dimension {} but d = {d}", s.d())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifySection {
    pub d: usize,
    /// Width of the fitted network.
    pub k: usize,
    /// Width of the true network; defaults to `k`.
    pub truth_k: Option<usize>,
    pub truth_scale: f64,
    pub truth_seed: u64,
    /// Training distribution; defaults to the cube `[-1/2, 1/2]^d`.
    pub sampler_p: Option<CovariateSampler>,
    /// Evaluation distribution; defaults to `sampler_p`.
    pub sampler_q: Option<CovariateSampler>,
    pub shift_id: String,
    pub n: usize,
    pub xi_max: f64,
    pub noise: NoiseKind,
    pub delta: f64,
    /// Defaults to `1.5 ||theta*||_F`.
    pub theta_max: Option<f64>,
    pub n_eval: usize,
    pub alpha: Option<f64>,
    pub train: TrainConfig,
    pub require_bounds: bool,
}

impl Default for IdentifySection {
    fn default() -> Self {
        IdentifySection {
            d: 3,
            k: 6,
            truth_k: None,
            truth_scale: 0.6,
            truth_seed: 0,
            sampler_p: None,
            sampler_q: None,
            shift_id: "none".into(),
            n: 5000,
            xi_max: 0.05,
            noise: NoiseKind::Uniform,
            delta: 0.1,
            theta_max: None,
            n_eval: 200,
            alpha: None,
            train: TrainConfig::default(),
            require_bounds: false,
        }
    }
}

pub struct IdentifySetup {
    pub truth: QuadNet,
    pub sampler_p: CovariateSampler,
    pub sampler_q: CovariateSampler,
    pub settings: ShiftSettings,
}

impl IdentifySection {
    pub fn build(&self) -> LabResult<IdentifySetup> {
        let mut rng = seeded(self.truth_seed);
        let truth = QuadNet::random_uniform(self.d, self.truth_k.unwrap_or(self.k), self.truth_scale, &mut rng)
            .map_err(core_config)?;
        let sampler_p = match &self.sampler_p {
            Some(s) => s.clone(),
            None => cube(self.d, 0.5)?,
        };
        let sampler_q = self.sampler_q.clone().unwrap_or_else(|| sampler_p.clone());
        check_sampler(&sampler_p, self.d, "sampler_p")?;
        check_sampler(&sampler_q, self.d, "sampler_q")?;
        let x_max = sampler_p.support_radius().max(sampler_q.support_radius());
        let theta_max = self.theta_max.unwrap_or(1.5 * truth.frobenius_norm());
        let bounds = BoundSpec::from_theta_max(x_max, theta_max, self.xi_max).map_err(core_config)?;
        self.train.validate().map_err(core_config)?;
        let settings = ShiftSettings {
            k: self.k,
            xi_max: self.xi_max,
            noise: self.noise,
            delta: self.delta,
            bounds,
            n_eval: self.n_eval,
            alpha: self.alpha,
            train: self.train.clone(),
        };
        Ok(IdentifySetup { truth, sampler_p, sampler_q, settings })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BanditSection {
    pub d: usize,
    /// Width of the true network; must be at least `d`.
    pub k: usize,
    /// Eigenvalues of `phi*`, largest first.
    pub spectrum: Vec<f64>,
    pub truth_seed: u64,
    pub horizon: usize,
    pub xi_max: f64,
    pub noise: NoiseKind,
    /// Eigengap constant; defaults to `4 / (lambda_1 - lambda_2)`.
    pub m_gap: Option<f64>,
    pub theta_max: f64,
    pub exploration_scale: f64,
    /// Width of the fitted network; defaults to `k`.
    pub fit_k: Option<usize>,
    pub train: TrainConfig,
    pub require_bounds: bool,
}

impl Default for BanditSection {
    fn default() -> Self {
        BanditSection {
            d: 3,
            k: 5,
            spectrum: vec![0.6, 0.25, 0.1],
            truth_seed: 0,
            horizon: 10_000,
            xi_max: 0.1,
            noise: NoiseKind::Uniform,
            m_gap: None,
            theta_max: 1.0,
            exploration_scale: 1.0,
            fit_k: None,
            train: TrainConfig::default(),
            require_bounds: false,
        }
    }
}

impl BanditSection {
    /// `theta* = Q [diag(sqrt(lambda)) | 0] R^T` for random orthogonal `Q`, `R`.
    pub fn truth(&self) -> LabResult<QuadNet> {
        let (d, k) = (self.d, self.k);
        if self.spectrum.len() != d {
            return Err(config(format!("spectrum has {} entries but d = {d}", self.spectrum.len())));
        }
        if k < d {
            return Err(config("bandit truth needs k >= d"));
        }
        if self.spectrum.iter().any(|l| !(*l >= 0.0)) || self.spectrum.windows(2).any(|w| w[0] < w[1]) {
            return Err(config("spectrum must be nonnegative and non-increasing"));
        }
        let mut rng = seeded(self.truth_seed);
        let q = random_orthogonal(d, &mut rng);
        let r = random_orthogonal(k, &mut rng);
        let mut core = DMatrix::<f64>::zeros(d, k);
        for (i, l) in self.spectrum.iter().enumerate() {
            core[(i, i)] = l.sqrt();
        }
        QuadNet::new(q * core * r.transpose()).map_err(core_config)
    }

    pub fn build(&self) -> LabResult<(BanditProblem, EtcConfig)> {
        let bounds = BoundSpec::from_theta_max(1.0, self.theta_max, self.xi_max).map_err(core_config)?;
        let problem = BanditProblem::new(self.truth()?, self.xi_max, self.horizon, self.m_gap, bounds)
            .map_err(core_config)?
            .with_noise(self.noise);
        self.train.validate().map_err(core_config)?;
        let cfg = EtcConfig { train: self.train.clone(), k: self.fit_k, exploration_scale: self.exploration_scale };
        Ok((problem, cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub d: usize,
    pub k: usize,
    pub truth_scale: f64,
    pub truth_seed: u64,
    /// Known bound `B` on the parameter shift.
    #[serde(rename = "B")]
    pub b: f64,
    /// The actual shift is `shift_fraction * B`, in a random direction.
    pub shift_fraction: f64,
    pub n_p: usize,
    pub n_g: usize,
    pub sampler_p: Option<CovariateSampler>,
    pub sampler_q: Option<CovariateSampler>,
    pub xi_max: f64,
    pub noise: NoiseKind,
    pub delta: f64,
    /// `theta_max` as a multiple of the larger truth norm.
    pub theta_max_factor: f64,
    pub config: TransferConfig,
    pub require_bounds: bool,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            d: 3,
            k: 4,
            truth_scale: 0.8,
            truth_seed: 0,
            b: 0.1,
            shift_fraction: 1.0,
            n_p: 5000,
            n_g: 50,
            sampler_p: None,
            sampler_q: None,
            xi_max: 0.05,
            noise: NoiseKind::Uniform,
            delta: 0.1,
            theta_max_factor: 1.1,
            config: TransferConfig::default(),
            require_bounds: false,
        }
    }
}

impl TransferSection {
    pub fn build(&self) -> LabResult<TransferProblem> {
        if !(self.shift_fraction >= 0.0 && self.shift_fraction <= 1.0) {
            return Err(config("shift_fraction must lie in [0, 1]"));
        }
        let mut rng = seeded(self.truth_seed);
        let tp = QuadNet::random_uniform(self.d, self.k, self.truth_scale, &mut rng).map_err(core_config)?;
        let dir = QuadNet::random_uniform(self.d, self.k, 1.0, &mut rng).map_err(core_config)?.into_theta();
        let norm = dir.norm();
        let tg = QuadNet::new(tp.theta() + dir * (self.b * self.shift_fraction / norm)).map_err(core_config)?;
        let sampler_p = match &self.sampler_p {
            Some(s) => s.clone(),
            None => cube(self.d, 0.5)?,
        };
        let sampler_q = self.sampler_q.clone().unwrap_or_else(|| sampler_p.clone());
        check_sampler(&sampler_p, self.d, "sampler_p")?;
        check_sampler(&sampler_q, self.d, "sampler_q")?;
        let x_max = sampler_p.support_radius().max(sampler_q.support_radius());
        let theta_max = self.theta_max_factor * tp.frobenius_norm().max(tg.frobenius_norm());
        let problem = TransferProblem {
            sigma0: sigma_min(&tp).map_err(core_config)?,
            theta_p_star: tp,
            theta_g_star: tg,
            b: self.b,
            n_p: self.n_p,
            n_g: self.n_g,
            sampler_p,
            sampler_q,
            bounds: BoundSpec::from_theta_max(x_max, theta_max, self.xi_max).map_err(core_config)?,
            noise: self.noise,
        };
        problem.validate().map_err(core_config)?;
        Ok(problem)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulesSection {
    pub d: usize,
    /// Number of modules.
    pub k: usize,
    pub alphabet_size: usize,
    #[serde(rename = "T")]
    pub t_len: usize,
    pub alpha_shift: f64,
    /// Hidden width of each module coordinate.
    pub width: usize,
    /// Lipschitz constant the random library is scaled to.
    pub target_k: f64,
    pub x_max: f64,
    pub library_seed: u64,
    /// Explicit parser table `table[z][j_prev]` with outputs in `1..=k`.
    pub parser_table: Option<Vec<Vec<usize>>>,
    pub parser_seed: u64,
    /// Words used to train the parser; 0 uses the true parser.
    pub parser_train_words: usize,
    pub chain_seed: u64,
    /// Words whose execution traces train the fitted library.
    pub fit_words: usize,
    pub train: TrainConfig,
    pub n_mc: usize,
    /// Normal quantile of the binomial band.
    pub z: f64,
    pub require_bounds: bool,
}

impl Default for ModulesSection {
    fn default() -> Self {
        ModulesSection {
            d: 2,
            k: 3,
            alphabet_size: 3,
            t_len: 4,
            alpha_shift: 0.01,
            width: 3,
            target_k: 0.9,
            x_max: 1.0,
            library_seed: 0,
            parser_table: None,
            parser_seed: 1,
            parser_train_words: 20,
            chain_seed: 2,
            fit_words: 30,
            train: TrainConfig { max_iters: 20_000, ..TrainConfig::default() },
            n_mc: 1000,
            z: 1.96,
            require_bounds: false,
        }
    }
}

pub struct ModuleSetup {
    pub truth: ModuleLibrary,
    pub fitted: ModuleLibrary,
    pub parser_true: Parser,
    pub parser_hat: Parser,
    pub chain: TokenChain,
    pub inputs: CovariateSampler,
}

impl ModuleSetup {
    /// The base chain at length `t_len` and its shifted counterpart.
    pub fn shift_spec(&self, sec: &ModulesSection, t_len: usize) -> LabResult<ShiftSpec> {
        let base = self.chain.with_length(t_len);
        let mut rng = seeded(derive_seed(sec.chain_seed, 1));
        ShiftSpec::random(&base, sec.alpha_shift, &mut rng).map_err(core_config)
    }
}

impl ModulesSection {
    pub fn build(&self) -> LabResult<ModuleSetup> {
        if self.t_len == 0 || self.n_mc == 0 {
            return Err(config("T and n_mc must be positive"));
        }
        self.train.validate().map_err(core_config)?;
        let truth = ModuleLibrary::random(self.d, self.k, self.width, self.target_k, self.x_max, &mut seeded(self.library_seed))
            .map_err(core_config)?;
        let parser_true = match &self.parser_table {
            Some(t) => Parser::new(t.clone(), self.k).map_err(core_config)?,
            None => Parser::random(self.alphabet_size, self.k, &mut seeded(self.parser_seed)).map_err(core_config)?,
        };
        if parser_true.alphabet_size() != self.alphabet_size {
            return Err(config("parser table size does not match alphabet_size"));
        }
        let chain = TokenChain::random(self.alphabet_size, self.t_len, &mut seeded(self.chain_seed)).map_err(core_config)?;
        let parser_hat = if self.parser_train_words == 0 {
            parser_true.clone()
        } else {
            let mut rng = seeded(derive_seed(self.parser_seed, 1));
            let mut ex = Vec::new();
            for _ in 0..self.parser_train_words {
                ex.extend(parser_true.examples(&chain.sample_word(&mut rng))?);
            }
            train_parser(&ex, self.alphabet_size, self.k)?
        };
        let inputs = cube(self.d, self.x_max / (self.d as f64).sqrt())?;
        let fitted = fit_library(
            &truth,
            &parser_true,
            &chain,
            &inputs,
            self.fit_words,
            self.width,
            &self.train,
            derive_seed(self.library_seed, 1),
        )?;
        Ok(ModuleSetup { truth, fitted, parser_true, parser_hat, chain, inputs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Axis {
    #[serde(rename = "n")]
    #[value(name = "n")]
    N,
    #[serde(rename = "T")]
    #[value(name = "T")]
    T,
    #[serde(rename = "n_g")]
    #[value(name = "n_g")]
    NG,
    #[serde(rename = "T_modules")]
    #[value(name = "T_modules")]
    TModules,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::N => "n",
            Axis::T => "T",
            Axis::NG => "n_g",
            Axis::TModules => "T_modules",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Option<Axis>,
    pub grid: Option<Vec<usize>>,
}

/// Sizes of the verification checks. Each check runs once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub alpha_mc: usize,
    pub alpha_directions: usize,
    pub lipschitz_pairs: usize,
    pub identification_runs: usize,
    pub arm_perturbations: usize,
    pub alignment_pairs: usize,
    pub shift_alphas: Vec<f64>,
    pub shift_max_t: usize,
    pub distshift_specs: usize,
    pub errbound_parsers: usize,
    pub composition_words: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            alpha_mc: 200_000,
            alpha_directions: 50,
            lipschitz_pairs: 1000,
            identification_runs: 10,
            arm_perturbations: 1000,
            alignment_pairs: 1000,
            shift_alphas: vec![0.1, 0.5, 1.0],
            shift_max_t: 8,
            distshift_specs: 20,
            errbound_parsers: 20,
            composition_words: 500,
        }
    }
}
