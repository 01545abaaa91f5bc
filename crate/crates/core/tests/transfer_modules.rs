use nalgebra::DMatrix;
use qni_core::identify::{epsilon_bound, IdentConstants};
use qni_core::module_net::{
    eps_f_from_identification, fit_library, module_gaps, telescope_check, theorem5_experiment, train_parser,
    ModuleLibrary, Parser, ShiftSpec, TokenChain,
};
use qni_core::qnn::{lipschitz_k, BoundSpec, CovariateSampler, NoiseKind, QuadNet, TrainConfig};
use qni_core::rng::seeded;
use qni_core::transfer::{run_transfer, sigma_min, TransferConfig, TransferProblem};
use rand_distr::{Distribution, StandardNormal};

fn transfer_problem(shift: f64, xi: f64, n_p: usize, n_g: usize, seed: u64) -> TransferProblem {
    let mut rng = seeded(seed);
    let tp = QuadNet::random_uniform(3, 4, 0.8, &mut rng).unwrap();
    let e = DMatrix::<f64>::from_fn(3, 4, |_, _| StandardNormal.sample(&mut rng));
    let en = e.norm();
    let tg = QuadNet::new(tp.theta() + e * (shift / en)).unwrap();
    let s = CovariateSampler::uniform_cube(3, 0.5).unwrap();
    let tmax = tp.frobenius_norm().max(tg.frobenius_norm()) * 1.1;
    TransferProblem {
        sigma0: sigma_min(&tp).unwrap(),
        theta_p_star: tp,
        theta_g_star: tg,
        b: shift,
        n_p,
        n_g,
        sampler_p: s.clone(),
        sampler_q: s.clone(),
        bounds: BoundSpec::from_theta_max(s.support_radius(), tmax, xi).unwrap(),
        noise: if xi > 0.0 { NoiseKind::Uniform } else { NoiseKind::Zero },
    }
}

#[test]
fn identical_tasks_do_not_lose_accuracy() {
    let p = transfer_problem(0.0, 0.0, 20_000, 50, 300);
    let r = run_transfer(&p, 0.1, &TransferConfig::default(), 1).unwrap();
    assert!(r.gold_sup_gap <= r.proxy_sup_gap + 1e-6, "{r:?}");
}

#[test]
fn certificate_holds_across_replicates() {
    let p = transfer_problem(0.1, 0.05, 5_000, 50, 301);
    let delta = 0.1;
    let holds = (0..50).filter(|&s| run_transfer(&p, delta, &TransferConfig::default(), s).unwrap().holds).count();
    assert!(holds as f64 >= (1.0 - delta) * 50.0, "{holds}");
}

fn module_setup(target_k: f64, t_len: usize, seed: u64) -> (ModuleLibrary, ModuleLibrary, Parser, TokenChain) {
    let mut rng = seeded(seed);
    let lib = ModuleLibrary::random(2, 3, 2, target_k, 1.0, &mut rng).unwrap();
    let parser = Parser::random(3, 3, &mut rng).unwrap();
    let chain = TokenChain::random(3, t_len, &mut rng).unwrap();
    let inputs = CovariateSampler::uniform_cube(2, 1.0 / 2f64.sqrt()).unwrap();
    let cfg = TrainConfig { max_iters: 20_000, ..TrainConfig::default() };
    let fitted = fit_library(&lib, &parser, &chain, &inputs, 30, 3, &cfg, seed).unwrap();
    (lib, fitted, parser, chain)
}

#[test]
fn contractive_matched_parses_stay_within_t_eps_f() {
    let (lib, fitted, parser, chain) = module_setup(0.9, 6, 400);
    let spec = ShiftSpec::new(chain.clone(), chain, 0.0).unwrap();
    let inputs = CovariateSampler::uniform_cube(2, 1.0 / 2f64.sqrt()).unwrap();
    let r = theorem5_experiment(&lib, &fitted, &parser, &parser, &spec, &inputs, 500, 1.96, 5).unwrap();
    assert!(r.k_module <= 1.0 + 1e-9);
    assert_eq!(r.matched, 500);
    assert_eq!(r.matched_violations, 0, "{}", r.gap_bound);
    assert!(r.rows.iter().all(|row| row.gap_l2 <= 6.0 * r.eps_f));
}

#[test]
fn expansive_bound_dominates_matched_parses() {
    let (lib, fitted, parser, chain) = module_setup(1.5, 6, 401);
    let spec = ShiftSpec::new(chain.clone(), chain, 0.0).unwrap();
    let inputs = CovariateSampler::uniform_cube(2, 1.0 / 2f64.sqrt()).unwrap();
    let r = theorem5_experiment(&lib, &fitted, &parser, &parser, &spec, &inputs, 500, 1.96, 6).unwrap();
    assert!(r.gap_bound >= 6.0 * r.eps_f * 1.5f64.powi(5) * (1.0 - 1e-12));
    assert_eq!(r.matched_violations, 0);
    let mut rng = seeded(7);
    for _ in 0..100 {
        let w = spec.shifted().sample_word(&mut rng);
        let x = inputs.sample(&mut rng);
        assert!(telescope_check(&lib, &fitted, &parser.parse(&w).unwrap(), &x).unwrap().holds);
    }
}

#[test]
fn shifted_words_with_trained_parser() {
    let (lib, fitted, parser, chain) = module_setup(0.9, 4, 402);
    let mut rng = seeded(8);
    let mut ex = Vec::new();
    for _ in 0..20 {
        ex.extend(parser.examples(&chain.sample_word(&mut rng)).unwrap());
    }
    let hat = train_parser(&ex, 3, 3).unwrap();
    let spec = ShiftSpec::random(&chain, 0.01, &mut rng).unwrap();
    let inputs = CovariateSampler::uniform_cube(2, 1.0 / 2f64.sqrt()).unwrap();
    let r = theorem5_experiment(&lib, &fitted, &parser, &hat, &spec, &inputs, 1000, 1.96, 9).unwrap();
    assert!(r.holds, "{} < {} - {}", r.frequency_within, r.required, r.band);
}

#[test]
fn identification_radius_covers_module_errors() {
    let (lib, fitted, _, _) = module_setup(0.9, 4, 403);
    let d = lib.d();
    let b = BoundSpec::from_theta_max(1.0, 2.0, 0.0).unwrap();
    let eps = epsilon_bound(30, d, 0.1, IdentConstants::from_bounds(&b)).unwrap().epsilon;
    let alpha = CovariateSampler::uniform_cube(2, 1.0 / 2f64.sqrt()).unwrap().closed_form_alpha().unwrap();
    let eps_f = eps_f_from_identification(d, lipschitz_k(&b), eps, alpha).unwrap();
    for g in module_gaps(&lib, &fitted).unwrap() {
        assert!(g <= eps_f);
    }
}
