use nalgebra::DVector;
use qni_core::identify::{
    concentration_deviation, epsilon_bound, frobenius_gap, robust_shift_experiment, theorem1_check, IdentConstants,
    ShiftSettings,
};
use qni_core::linalg::random_unit_symmetric;
use qni_core::qnn::{
    directional_moment, ell_max, empirical_loss, estimate_alpha, forward, generate_dataset, gradient, population_loss_mc,
    train_gd, BoundSpec, CovariateSampler, NoiseKind, QuadNet, TrainConfig,
};
use qni_core::rng::{derive_seed, seeded};
use qni_core::stats::median;
use rand::Rng as _;

fn cube(d: usize) -> CovariateSampler {
    CovariateSampler::uniform_cube(d, 0.5).unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = seeded(100);
    let h = 1e-4;
    for inst in 0..50 {
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=8);
        let n = rng.random_range(1..=50);
        let truth = QuadNet::random_uniform(d, 2, 1.0, &mut rng).unwrap();
        let net = QuadNet::random_uniform(d, k, 1.0, &mut rng).unwrap();
        let data = generate_dataset(&truth, &cube(d), 0.1, NoiseKind::Uniform, n, inst).unwrap();
        let g = gradient(&net, &data).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..k {
                let mut plus = net.theta().clone();
                plus[(i, j)] += h;
                let mut minus = net.theta().clone();
                minus[(i, j)] -= h;
                let lp = empirical_loss(&QuadNet::new(plus).unwrap(), &data).unwrap();
                let lm = empirical_loss(&QuadNet::new(minus).unwrap(), &data).unwrap();
                worst = worst.max(((lp - lm) / (2.0 * h) - g[(i, j)]).abs());
            }
        }
        assert!(worst <= 1e-5, "instance {inst}: {worst}");
    }
}

#[test]
fn restarts_reach_the_same_loss() {
    let mut rng = seeded(101);
    let truth = QuadNet::random_uniform(3, 5, 0.8, &mut rng).unwrap();
    let data = generate_dataset(&truth, &cube(3), 0.0, NoiseKind::Zero, 400, 1).unwrap();
    let losses: Vec<f64> = (0..10)
        .map(|r| train_gd(&data, 3, 5, &TrainConfig::default().with_seed(r)).unwrap().final_loss)
        .collect();
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().cloned().fold(0.0, f64::max);
    assert!(hi - lo <= 1e-5 && hi <= 1e-6, "{losses:?}");
}

#[test]
fn loss_is_independent_of_summation_order() {
    let mut rng = seeded(102);
    let truth = QuadNet::random_uniform(3, 2, 1.0, &mut rng).unwrap();
    let net = QuadNet::random_uniform(3, 4, 1.0, &mut rng).unwrap();
    let data = generate_dataset(&truth, &cube(3), 0.1, NoiseKind::Uniform, 300, 2).unwrap();
    let mut total = 0.0;
    for s in data.samples().iter().rev() {
        let r = (net.theta().transpose() * &s.x).norm_squared() - s.y;
        total += r * r;
    }
    let reversed = total / data.len() as f64;
    let loss = empirical_loss(&net, &data).unwrap();
    assert!((loss - reversed).abs() <= 1e-10 * loss);
}

#[test]
fn population_loss_estimates_are_consistent() {
    let net = QuadNet::from_row_slice(1, 1, &[1.0]).unwrap();
    let zero = QuadNet::zeros(1, 1).unwrap();
    let s = cube(1);
    let small = population_loss_mc(&net, &zero, &s, 1_000_000, 1).unwrap();
    let large = population_loss_mc(&net, &zero, &s, 10_000_000, 2).unwrap();
    let se = (small.std_err.powi(2) + large.std_err.powi(2)).sqrt();
    assert!((small.mean - large.mean).abs() <= 3.0 * se);
    assert!((large.mean - 1.0 / 80.0).abs() <= 3.0 * large.std_err);
    // Midpoint rule for the integral of x^4 over [-1/2, 1/2].
    let m = 100_000;
    let quad: f64 = (0..m).map(|i| (-0.5 + (i as f64 + 0.5) / m as f64).powi(4)).sum::<f64>() / m as f64;
    assert!((quad - 0.0125).abs() < 1e-10);
}

#[test]
fn function_gaps_stay_below_ell_max() {
    let mut rng = seeded(103);
    let b = BoundSpec::from_theta_max(1.0, 1.0, 0.0).unwrap();
    let l = ell_max(&b);
    for _ in 0..10_000 {
        let d = rng.random_range(1..=4);
        let scale = |t: QuadNet| {
            let n = t.frobenius_norm();
            QuadNet::new(t.theta() / n).unwrap()
        };
        let a = scale(QuadNet::random_uniform(d, 3, 1.0, &mut rng).unwrap());
        let c = scale(QuadNet::random_uniform(d, 3, 1.0, &mut rng).unwrap());
        let x = DVector::<f64>::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let x = if x.norm() > 1.0 { &x / x.norm() } else { x };
        assert!((forward(&a, &x).unwrap() - forward(&c, &x).unwrap()).abs() <= l);
    }
}

#[test]
fn cube_moment_expansion_matches_monte_carlo() {
    let mut rng = seeded(104);
    let s = cube(3);
    for i in 0..20 {
        let delta = random_unit_symmetric(3, &mut rng);
        let mut diag_sq = 0.0;
        let mut cross = 0.0;
        let mut off_sq = 0.0;
        for a in 0..3 {
            diag_sq += delta[(a, a)].powi(2);
            for b in 0..3 {
                if a != b {
                    cross += delta[(a, a)] * delta[(b, b)];
                    off_sq += delta[(a, b)].powi(2);
                }
            }
        }
        let expansion = diag_sq / 80.0 + cross / 144.0 + off_sq / 72.0;
        let mc = directional_moment(&s, &delta, 200_000, i).unwrap();
        assert!((mc.mean - expansion).abs() <= 3.0 * mc.std_err, "{} vs {expansion}", mc.mean);
    }
}

#[test]
fn scaled_cube_alpha_matches_exact_minimum() {
    for d in [2, 3, 4] {
        let s = CovariateSampler::uniform_scaled(d).unwrap();
        let exact = 4.0 / (45.0 * (d * d) as f64);
        assert!((s.closed_form_alpha().unwrap() - exact).abs() < 1e-15);
        let est = estimate_alpha(&s, 400_000, 50, d as u64).unwrap();
        assert!(est.alpha >= exact - 1e-3, "{est:?}");
        assert!((est.lambda_min - exact).abs() < 0.1 * exact, "{est:?}");
    }
}

#[test]
#[ignore = "the stated constant d^(-2/5)/15 exceeds the exact minimum 4/(45 d^2) of the directional moment"]
fn scaled_cube_alpha_stated_constant() {
    let d = 4;
    let est = estimate_alpha(&CovariateSampler::uniform_scaled(d).unwrap(), 1_000_000, 50, 7).unwrap();
    assert!(est.alpha >= (d as f64).powf(-0.4) / 15.0 - 0.002, "{est:?}");
}

#[test]
fn population_excess_dominates_strong_convexity() {
    let s = cube(3);
    let alpha = s.closed_form_alpha().unwrap();
    let mut rng = seeded(105);
    for i in 0..10 {
        let truth = QuadNet::random_uniform(3, 4, 0.8, &mut rng).unwrap();
        let data = generate_dataset(&truth, &s, 0.2, NoiseKind::Uniform, 60, i).unwrap();
        let fitted = train_gd(&data, 3, 4, &TrainConfig::default().with_seed(i)).unwrap().net;
        let excess = population_loss_mc(&fitted, &truth, &s, 200_000, derive_seed(i, 9)).unwrap();
        let f = frobenius_gap(&fitted, &truth).unwrap();
        assert!(excess.mean + 3.0 * excess.std_err >= alpha * f * f, "{excess:?} vs {}", alpha * f * f);
    }
}

#[test]
fn concentration_over_a_finite_net() {
    let s = cube(2);
    let b = BoundSpec::from_theta_max(s.support_radius(), 1.5, 0.1).unwrap();
    let mut rng = seeded(106);
    let truth = QuadNet::random_uniform(2, 3, 0.6, &mut rng).unwrap();
    let params: Vec<QuadNet> = (0..100).map(|_| QuadNet::random_uniform(2, 3, 0.6, &mut rng).unwrap()).collect();
    let n = 2000;
    let eps = epsilon_bound(n, 2, 0.1, IdentConstants::from_bounds(&b)).unwrap().epsilon;
    let within = (0..100)
        .filter(|&r| {
            let data = generate_dataset(&truth, &s, 0.1, NoiseKind::Uniform, n, 1000 + r).unwrap();
            concentration_deviation(&truth, &params, &s, &data).unwrap() <= eps
        })
        .count();
    assert!(within >= 90, "{within}");
}

#[test]
fn frobenius_gap_is_a_metric() {
    let mut rng = seeded(107);
    for _ in 0..100 {
        let nets: Vec<QuadNet> = (0..3).map(|_| QuadNet::random_uniform(3, 4, 1.0, &mut rng).unwrap()).collect();
        let ac = frobenius_gap(&nets[0], &nets[2]).unwrap();
        let ab = frobenius_gap(&nets[0], &nets[1]).unwrap();
        let bc = frobenius_gap(&nets[1], &nets[2]).unwrap();
        assert!(ac <= ab + bc + 1e-12);
    }
}

#[test]
fn noiseless_pipeline_is_certified() {
    let s = cube(3);
    let mut rng = seeded(108);
    let truth = QuadNet::random_uniform(3, 6, 0.4, &mut rng).unwrap();
    let b = BoundSpec::from_theta_max(s.support_radius(), truth.frobenius_norm() * 1.5, 0.0).unwrap();
    let data = generate_dataset(&truth, &s, 0.0, NoiseKind::Zero, 5000, 3).unwrap();
    let fitted = train_gd(&data, 3, 6, &TrainConfig::default()).unwrap().net;
    let bound = epsilon_bound(5000, 3, 0.1, IdentConstants::from_bounds(&b)).unwrap();
    let v = theorem1_check(&truth, &fitted, &bound, s.closed_form_alpha().unwrap(), b.x_max).unwrap();
    assert!(v.holds && v.frob_holds, "{v:?}");
}

#[test]
fn sup_gap_shrinks_as_n_doubles() {
    let s = cube(3);
    let mut rng = seeded(109);
    let truth = QuadNet::random_uniform(3, 4, 0.6, &mut rng).unwrap();
    let settings = ShiftSettings {
        k: 4,
        xi_max: 0.1,
        noise: NoiseKind::Uniform,
        delta: 0.1,
        bounds: BoundSpec::from_theta_max(s.support_radius(), 2.0, 0.1).unwrap(),
        n_eval: 200,
        alpha: None,
        train: TrainConfig::default(),
    };
    let grid = [500, 1000, 2000, 4000, 8000];
    let seeds: Vec<u64> = (0..20).collect();
    let rows = robust_shift_experiment(&truth, &s, &s, "none", &grid, &settings, &seeds).unwrap();
    let medians: Vec<f64> = grid
        .iter()
        .map(|&n| median(&rows.iter().filter(|r| r.n == n).map(|r| r.sup_gap_sq).collect::<Vec<_>>()))
        .collect();
    let drops = medians.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(drops >= 3, "{medians:?}");
    for r in &rows {
        assert!(r.holds);
    }
}
