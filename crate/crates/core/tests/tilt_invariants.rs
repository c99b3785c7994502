use entropic::tilt::{
    disjoint_set_update, lambda_to_theta, solve_i_divergence_with, solve_polynomial, solve_polynomial_with, theta_to_lambda,
    Partition,
};
use entropic::{ConstraintSet, Density, ExpectationEngine, Payoff, Prior, SolverOptions, Status, TiltedPosterior};
use proptest::prelude::*;

fn gaussian() -> Prior {
    Density::gaussian(0.0, 1.0).unwrap().into()
}

fn mean_and_tail() -> Vec<Payoff> {
    vec![Payoff::identity(), Payoff::indicator(0.5, f64::INFINITY)]
}

fn two_bands() -> Vec<Payoff> {
    vec![Payoff::indicator(f64::NEG_INFINITY, 0.0), Payoff::indicator(1.0, f64::INFINITY)]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log ∫ e^{λ·g} dμ − λ·c`
fn log_partition_dual(prior: &Prior, g: &[Payoff], c: &[f64], l: &[f64], eng: &ExpectationEngine) -> f64 {
    let br: Vec<_> = g.iter().flat_map(|p| p.breakpoints()).collect();
    let z = prior
        .expect_vec(eng, 1, &br, &|x, o| o[0] = g.iter().zip(l).map(|(p, v)| v * p.eval(x)).sum::<f64>().exp())
        .unwrap()
        .value();
    z.ln() - dot(l, c)
}

/// `∫ (1 + βθ·(g − c))^{1/β+1} dμ`
fn theta_dual(prior: &Prior, g: &[Payoff], c: &[f64], th: &[f64], beta: f64, eng: &ExpectationEngine) -> f64 {
    let br: Vec<_> = g.iter().flat_map(|p| p.breakpoints()).collect();
    prior
        .expect_vec(eng, 1, &br, &|x, o| {
            let u = 1.0 + beta * g.iter().zip(th).zip(c).map(|((p, t), ci)| t * (p.eval(x) - ci)).sum::<f64>();
            o[0] = u.max(0.0).powf(1.0 / beta + 1.0);
        })
        .unwrap()
        .value()
}

fn central_gradient(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let mut up = at.to_vec();
            let mut dn = at.to_vec();
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

fn log_slope(post: &TiltedPosterior, lo: f64, hi: f64) -> f64 {
    let xs: Vec<f64> = (0..=40).map(|i| lo + (hi - lo) * i as f64 / 40.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| post.pdf(&[*x]).unwrap().ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stationary_dual_and_zero_residuals_coincide(l0 in -0.8f64..0.8, l1 in -0.8f64..0.8) {
        let eng = ExpectationEngine::default();
        let prior = gaussian();
        let g = mean_and_tail();
        let c = TiltedPosterior::exponential(prior.clone(), g.clone(), vec![l0, l1], &eng).unwrap().moments(&eng).unwrap();
        let cs = ConstraintSet::equalities(g.clone(), c.clone()).unwrap();
        let (post, rep) = solve_i_divergence_with(&prior, &cs, &eng, &SolverOptions::default()).unwrap();
        prop_assert_eq!(rep.status, Status::Converged);
        prop_assert!(rep.max_residual() <= 1e-10);
        let grad = central_gradient(|l| log_partition_dual(&prior, &g, &c, l, &eng), post.lambda(), 1e-5);
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm < 1e-7, "dual gradient {:?}", grad);
        // away from the optimum both the gradient and the residuals are nonzero
        let off = vec![post.lambda()[0] + 0.05, post.lambda()[1]];
        let grad = central_gradient(|l| log_partition_dual(&prior, &g, &c, l, &eng), &off, 1e-5);
        let moved = TiltedPosterior::exponential(prior.clone(), g.clone(), off, &eng).unwrap().moments(&eng).unwrap();
        for i in 0..2 {
            prop_assert!((grad[i] - (moved[i] - c[i])).abs() < 1e-7);
        }
    }

    #[test]
    fn two_starts_find_the_same_multipliers(l0 in -0.8f64..0.8, l1 in -0.8f64..0.8, s0 in -1.0f64..1.0, s1 in -1.0f64..1.0) {
        let eng = ExpectationEngine::default();
        let prior = gaussian();
        let g = mean_and_tail();
        let c = TiltedPosterior::exponential(prior.clone(), g.clone(), vec![l0, l1], &eng).unwrap().moments(&eng).unwrap();
        let cs = ConstraintSet::equalities(g, c).unwrap();
        let (a, _) = solve_i_divergence_with(&prior, &cs, &eng, &SolverOptions::default()).unwrap();
        let opts = SolverOptions { initial: Some(vec![s0, s1]), ..SolverOptions::default() };
        let (b, _) = solve_i_divergence_with(&prior, &cs, &eng, &opts).unwrap();
        for i in 0..2 {
            prop_assert!((a.lambda()[i] - b.lambda()[i]).abs() < 1e-6);
            prop_assert!((a.lambda()[i] - [l0, l1][i]).abs() < 1e-6);
        }
    }

    #[test]
    fn polynomial_starts_agree(beta in prop::sample::select(vec![0.5, 1.0, 2.0]), u0 in 0.0f64..1.0, u1 in 0.0f64..1.0) {
        let eng = ExpectationEngine::default();
        let prior = gaussian();
        let g = two_bands();
        // multipliers inside the domain 1 + βλ_i > 0
        let lam = vec![-0.6 / beta + u0, -0.6 / beta + u1];
        let c = TiltedPosterior::polynomial(prior.clone(), g.clone(), lam.clone(), beta, &eng).unwrap().moments(&eng).unwrap();
        let cs = ConstraintSet::equalities(g, c).unwrap();
        let (a, _) = solve_polynomial(&prior, &cs, beta, &eng).unwrap();
        let opts = SolverOptions { initial: Some(vec![0.3, -0.2]), ..SolverOptions::default() };
        let (b, _) = solve_polynomial_with(&prior, &cs, beta, &eng, &opts).unwrap();
        for i in 0..2 {
            prop_assert!((a.lambda()[i] - b.lambda()[i]).abs() < 1e-6, "{:?} {:?}", a.lambda(), b.lambda());
            prop_assert!((a.lambda()[i] - lam[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn theta_map_inverts(beta in 0.05f64..4.0, l in prop::collection::vec(-2.0f64..2.0, 3), c in prop::collection::vec(-1.0f64..1.0, 3)) {
        prop_assume!((1.0 + beta * dot(&l, &c)).abs() > 1e-3);
        let back = theta_to_lambda(&lambda_to_theta(&l, &c, beta), &c, beta);
        for (a, b) in back.iter().zip(&l) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn returned_multipliers_are_stationary_for_the_theta_dual(beta in prop::sample::select(vec![0.5, 1.0, 2.0]), u0 in 0.0f64..1.0, u1 in 0.0f64..1.0) {
        let eng = ExpectationEngine::default();
        let prior = gaussian();
        let g = two_bands();
        let lam = vec![-0.6 / beta + u0, -0.6 / beta + u1];
        let c = TiltedPosterior::polynomial(prior.clone(), g.clone(), lam, beta, &eng).unwrap().moments(&eng).unwrap();
        let cs = ConstraintSet::equalities(g.clone(), c.clone()).unwrap();
        let (post, _) = solve_polynomial(&prior, &cs, beta, &eng).unwrap();
        let theta = lambda_to_theta(post.lambda(), &c, beta);
        let grad = central_gradient(|t| theta_dual(&prior, &g, &c, t, beta, &eng), &theta, 1e-5);
        prop_assert!(grad.iter().all(|v| v.abs() < 1e-7), "{:?}", grad);
    }

    #[test]
    fn disjoint_sets_match_both_solvers(a in 0.5f64..2.0, w in prop::collection::vec(0.2f64..1.0, 4)) {
        let eng = ExpectationEngine::default();
        let prior: Prior = Density::exponential(1.0).unwrap().into();
        let cuts = [0.5 * a, a, 2.0 * a];
        let total: f64 = w.iter().sum();
        let alphas: Vec<f64> = w.iter().map(|v| v / total).collect();
        let parts = Partition::intervals(&cuts).unwrap();
        let direct = disjoint_set_update(&prior, &parts, &alphas, &eng).unwrap();
        let cs = ConstraintSet::equalities(parts.indicators()[..3].to_vec(), alphas[..3].to_vec()).unwrap();
        let (idiv, _) = solve_i_divergence_with(&prior, &cs, &eng, &SolverOptions::default()).unwrap();
        let (poly, _) = solve_polynomial(&prior, &cs, 1.0, &eng).unwrap();
        for i in 0..300 {
            let x = [i as f64 * 0.02 + 0.01];
            let r = direct.ratio(&x);
            prop_assert!((r - idiv.ratio(&x)).abs() < 1e-9 && (r - poly.ratio(&x)).abs() < 1e-9, "at {}: {} {} {}", x[0], r, idiv.ratio(&x), poly.ratio(&x));
        }
    }
}

#[test]
fn raised_mean_tails_decay_at_their_own_rates() {
    let eng = ExpectationEngine::default();
    let prior: Prior = Density::exponential(1.0).unwrap().into();
    let cs = ConstraintSet::equalities(vec![Payoff::identity()], vec![2.0]).unwrap();
    let (idiv, _) = solve_i_divergence_with(&prior, &cs, &eng, &SolverOptions::default()).unwrap();
    let (poly, _) = solve_polynomial(&prior, &cs, 1.0, &eng).unwrap();
    let gamma = 1.0 - idiv.lambda()[0];
    assert!((gamma - 0.5).abs() < 1e-8);
    let si = log_slope(&idiv, 10.0, 50.0);
    let sp = log_slope(&poly, 10.0, 50.0);
    assert!((si + gamma).abs() < 1e-8, "exponential tilt slope {si}");
    // (1 + λx)e^{-x}: the polynomial factor only bends the rate-1 decay
    assert!(sp < -0.9 && sp > -1.0, "polynomial tilt slope {sp}");
    assert!(si > sp);
}
