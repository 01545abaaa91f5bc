use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use qni_core::bandit::{best_arm, exploration_length_scaled, BanditConstants};
use qni_core::identify::{epsilon_bound, sup_function_gap, IdentConstants};
use qni_core::linalg::random_orthogonal;
use qni_core::module_net::{
    averaged_mixture, lemma_distshift_check, mixture_sequence, sequence_error_dp, step_error, train_parser, tv_distance,
    Parser, ShiftSpec, TokenChain,
};
use qni_core::qnn::{
    empirical_loss, forward, generate_dataset, induced, loss_term, train_gd_from, BoundSpec, Constraint, CovariateSampler,
    InducedForm, NoiseKind, QuadNet, TrainConfig,
};
use qni_core::rng::seeded;
use qni_core::transfer::{align, epsilon_g, expanded_radius, sigma_min};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(r: usize, c: usize, rng: &mut qni_core::rng::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn in_ball(d: usize, r: f64, rng: &mut qni_core::rng::Rng) -> DVector<f64> {
    let g = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(rng));
    let u: f64 = rng.random();
    &g * (r * u.powf(1.0 / d as f64) / g.norm())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_is_quadratic_form(seed in any::<u64>(), d in 1usize..6, k in 1usize..8) {
        let mut rng = seeded(seed);
        let net = QuadNet::random_uniform(d, k, 1.0, &mut rng).unwrap();
        let x = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let phi = induced(&net);
        let q = (phi.phi() * &x).dot(&x);
        let f = forward(&net, &x).unwrap();
        prop_assert!((f - q).abs() <= 1e-10 * q.abs().max(1.0));
    }

    #[test]
    fn induced_form_ignores_rotations(seed in any::<u64>(), d in 1usize..5, k in 1usize..7) {
        let mut rng = seeded(seed);
        let net = QuadNet::random_uniform(d, k, 1.0, &mut rng).unwrap();
        let r = random_orthogonal(k, &mut rng);
        let a = induced(&net);
        let b = induced(&net.rotated(&r).unwrap());
        prop_assert!((a.phi() - b.phi()).amax() <= 1e-12);
    }

    #[test]
    fn empirical_loss_is_nonnegative(seed in any::<u64>(), d in 1usize..4, n in 1usize..40) {
        let mut rng = seeded(seed);
        let truth = QuadNet::random_uniform(d, 2, 1.0, &mut rng).unwrap();
        let net = QuadNet::random_uniform(d, 3, 1.0, &mut rng).unwrap();
        let s = CovariateSampler::uniform_cube(d, 0.5).unwrap();
        let data = generate_dataset(&truth, &s, 0.1, NoiseKind::Uniform, n, seed).unwrap();
        prop_assert!(empirical_loss(&net, &data).unwrap() >= 0.0);
        let clean = generate_dataset(&truth, &s, 0.0, NoiseKind::Zero, n, seed).unwrap();
        prop_assert!(empirical_loss(&truth, &clean).unwrap() <= 1e-24);
    }

    #[test]
    fn sup_gap_dominates_and_is_attained(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = seeded(seed);
        let a = QuadNet::random_uniform(d, 3, 0.7, &mut rng).unwrap();
        let b = QuadNet::random_uniform(d, 2, 0.7, &mut rng).unwrap();
        let x_max = 1.3;
        let g = sup_function_gap(&a, &b, x_max).unwrap();
        let diff = |x: &DVector<f64>| (forward(&a, x).unwrap() - forward(&b, x).unwrap()).powi(2);
        for _ in 0..200 {
            let x = in_ball(d, x_max, &mut rng);
            prop_assert!(diff(&x) <= g.sup_gap_sq * (1.0 + 1e-12) + 1e-15);
        }
        let w = g.witness();
        prop_assert!((w.norm() - x_max).abs() <= 1e-9);
        prop_assert!((diff(&w) - g.sup_gap_sq).abs() <= 1e-9 * g.sup_gap_sq.max(1.0));
    }

    #[test]
    fn loss_term_is_lipschitz_in_phi(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = seeded(seed);
        let x_max = 1.0;
        let phi_max = 1.0;
        let unit = |rng: &mut qni_core::rng::Rng| {
            let t = QuadNet::random_uniform(d, 3, 1.0, rng).unwrap();
            let p = induced(&t);
            let n = p.frobenius_norm();
            InducedForm::symmetrized(&(p.phi() * (phi_max * rng.random::<f64>() / n))).unwrap()
        };
        let (p, q, truth) = (unit(&mut rng), unit(&mut rng), unit(&mut rng));
        let x = in_ball(d, x_max, &mut rng);
        let y = truth.eval(&x).unwrap();
        let lhs = (loss_term(&p, &x, y).unwrap() - loss_term(&q, &x, y).unwrap()).abs();
        let rhs = 4.0 * phi_max * x_max.powi(4) * (p.phi() - q.phi()).norm();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn epsilon_shrinks_with_n_and_delta(n in 2usize..100_000, d in 1usize..6, delta in 0.01f64..0.5) {
        let c = IdentConstants { ell_max: 2.0, xi_max: 0.1, phi_max: 1.0, k_lip: 4.0 };
        let a = epsilon_bound(n, d, delta, c).unwrap().epsilon;
        prop_assert!(epsilon_bound(n * 2, d, delta, c).unwrap().epsilon < a);
        prop_assert!(epsilon_bound(n, d, delta / 2.0, c).unwrap().epsilon > a);
    }

    #[test]
    fn exploration_length_is_clamped(t in 1usize..1_000_000, d in 1usize..6, scale in 1e-6f64..2.0) {
        let b = BoundSpec::from_theta_max(1.0, 1.0, 0.1).unwrap();
        let m = exploration_length_scaled(t, d, &BanditConstants::new(4.0, &b), scale).unwrap();
        prop_assert!(m >= 1 && m <= t);
    }

    #[test]
    fn best_arm_dominates_random_arms(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = seeded(seed);
        let phi = induced(&QuadNet::random_uniform(d, d + 1, 1.0, &mut rng).unwrap());
        let (x, v) = best_arm(&phi);
        prop_assert!((x.norm() - 1.0).abs() <= 1e-12);
        prop_assert!((phi.eval(&x).unwrap() - v).abs() <= 1e-10);
        for _ in 0..100 {
            let u = in_ball(d, 1.0, &mut rng);
            let u = &u / u.norm();
            prop_assert!(phi.eval(&u).unwrap() <= v + 1e-10);
        }
    }

    #[test]
    fn alignment_bound_holds(seed in any::<u64>(), d in 1usize..5, extra in 0usize..3, noise in 0.0f64..0.5) {
        let mut rng = seeded(seed);
        let k = d + extra;
        let t = QuadNet::random_uniform(d, k, 1.0, &mut rng).unwrap();
        let tp = QuadNet::new(t.theta() + gaussian(d, k, &mut rng) * noise).unwrap();
        let s = sigma_min(&tp).unwrap();
        prop_assume!(s > 1e-6);
        let a = align(&t, &tp, s).unwrap();
        prop_assert!(a.holds, "{} > {}", a.aligned_gap, a.bound);
        for r in [&a.r, &a.r_prime] {
            prop_assert!((r * r.transpose() - DMatrix::identity(k, k)).norm() <= 1e-10);
        }
    }

    #[test]
    fn expanded_radius_and_gold_radius_are_monotone(
        b in 0.0f64..1.0, eps in 0.0f64..10.0, alpha in 1e-3f64..1.0, s0 in 0.05f64..2.0, n_g in 1usize..10_000,
    ) {
        let bh = expanded_radius(b, eps, alpha, s0).unwrap();
        prop_assert!(bh >= b);
        prop_assert!(expanded_radius(b, eps * 2.0 + 1e-9, alpha, s0).unwrap() > bh);
        prop_assert!(expanded_radius(b, eps + 1e-9, alpha, s0 / 2.0).unwrap() > bh);
        let c = IdentConstants { ell_max: 2.0, xi_max: 0.1, phi_max: 1.0, k_lip: 4.0 };
        let g = epsilon_g(n_g, 3, 0.1, bh + 0.01, &c).unwrap();
        prop_assert!(epsilon_g(n_g * 2, 3, 0.1, bh + 0.01, &c).unwrap() < g);
        prop_assert!(epsilon_g(n_g, 3, 0.1, bh + 0.02, &c).unwrap() > g);
    }

    #[test]
    fn tv_is_symmetric_and_bounded(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = seeded(seed);
        let c = TokenChain::random(n, 1, &mut rng).unwrap();
        let e = TokenChain::random(n, 1, &mut rng).unwrap();
        let tv = tv_distance(c.initial(), e.initial()).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&tv));
        prop_assert_eq!(tv, tv_distance(e.initial(), c.initial()).unwrap());
    }

    #[test]
    fn mixtures_are_distributions(seed in any::<u64>(), z in 1usize..5, k in 1usize..4, t in 1usize..9) {
        let mut rng = seeded(seed);
        let chain = TokenChain::random(z, t, &mut rng).unwrap();
        let parser = Parser::random(z, k, &mut rng).unwrap();
        for p in mixture_sequence(&chain, &parser).unwrap() {
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        }
        prop_assert!((averaged_mixture(&chain, &parser).unwrap().sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn mixture_shift_grows_linearly(seed in any::<u64>(), alpha in 0.0f64..0.5) {
        let mut rng = seeded(seed);
        let chain = TokenChain::random(4, 8, &mut rng).unwrap();
        let parser = Parser::random(4, 3, &mut rng).unwrap();
        let spec = ShiftSpec::random(&chain, alpha, &mut rng).unwrap();
        let v = lemma_distshift_check(&spec, &parser).unwrap();
        prop_assert!(v.holds && v.per_step_holds);
    }

    #[test]
    fn sequence_error_is_at_most_t_eps_g(seed in any::<u64>(), rate in 0.0f64..0.5, t in 1usize..10) {
        let mut rng = seeded(seed);
        let chain = TokenChain::random(3, t, &mut rng).unwrap();
        let truth = Parser::random(3, 3, &mut rng).unwrap();
        let hat = truth.corrupted(rate, &mut rng).unwrap();
        let eps = step_error(&hat, &truth, &chain).unwrap();
        prop_assert!(sequence_error_dp(&hat, &truth, &chain).unwrap() <= t as f64 * eps + 1e-12);
    }

    #[test]
    fn majority_parser_fits_consistent_labels(seed in any::<u64>(), words in 1usize..30) {
        let mut rng = seeded(seed);
        let truth = Parser::random(4, 3, &mut rng).unwrap();
        let chain = TokenChain::random(4, 5, &mut rng).unwrap();
        let mut ex = Vec::new();
        for _ in 0..words {
            ex.extend(truth.examples(&chain.sample_word(&mut rng)).unwrap());
        }
        let p = train_parser(&ex, 4, 3).unwrap();
        for (jp, z, j) in ex {
            prop_assert_eq!(p.lookup(z, jp), j);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn constrained_fit_stays_feasible(seed in any::<u64>(), radius in 0.0f64..0.5) {
        let mut rng = seeded(seed);
        let truth = QuadNet::random_uniform(2, 3, 0.8, &mut rng).unwrap();
        let start = QuadNet::random_uniform(2, 3, 0.8, &mut rng).unwrap();
        let s = CovariateSampler::uniform_cube(2, 0.5).unwrap();
        let data = generate_dataset(&truth, &s, 0.05, NoiseKind::Uniform, 30, seed).unwrap();
        let cfg = TrainConfig { max_iters: 500, ..TrainConfig::default() };
        let ball = Constraint::Ball { center: start.theta().clone(), radius };
        let out = train_gd_from(&data, start.clone(), &cfg, &ball).unwrap();
        prop_assert!((out.net.theta() - start.theta()).norm() <= radius + 1e-10);
    }
}
