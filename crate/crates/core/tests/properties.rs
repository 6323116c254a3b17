use nleval::decomposition::{default_schedule, doob_meyer};
use nleval::fixed_point::{fixed_point_defect, solve_e_bsde, EDrivenProblem};
use nleval::generator::{inf_convolution, ConvolutionLattice};
use nleval::modulus::check_modulus;
use nleval::tree::conditional_expectation;
use nleval::{build_tree, make_mu_phi, AdaptedProcess, Error, Evaluation, Modulus, Sign};
use proptest::prelude::*;

fn modulus_strategy() -> impl Strategy<Value = Modulus> {
    prop_oneof![
        Just(Modulus::identity()),
        Just(Modulus::capped_sqrt()),
        (0.1f64..4.0).prop_map(|c| Modulus::scaled(c).unwrap()),
        (0.1f64..4.0).prop_map(|c| Modulus::rational(c).unwrap()),
        (0.5f64..2.0).prop_map(|nu| Modulus::sqrt(nu).unwrap()),
    ]
}

fn evaluation(n: usize, mu: f64, phi: Modulus, plus: bool) -> Evaluation {
    let sign = if plus { Sign::Plus } else { Sign::Minus };
    Evaluation::from_generator(build_tree(1.0, n).unwrap(), make_mu_phi(mu, phi, sign).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn built_in_moduli_pass_their_checks(phi in modulus_strategy()) {
        let report = check_modulus(&phi);
        prop_assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn conditional_expectation_is_an_average(next in prop::collection::vec(-5.0f64..5.0, 2..40)) {
        let tree = build_tree(1.0, next.len() - 1).unwrap();
        let prev = conditional_expectation(&tree, &next).unwrap();
        prop_assert_eq!(prev.len(), next.len() - 1);
        let lo = next.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (j, v) in prev.iter().enumerate() {
            prop_assert!((v - 0.5 * (next[j] + next[j + 1])).abs() <= 1e-15);
            prop_assert!(*v >= lo && *v <= hi);
        }
    }

    #[test]
    fn evaluation_is_monotone_and_consistent(
        mu in 0.0f64..1.0,
        phi in modulus_strategy(),
        plus in any::<bool>(),
        x in prop::collection::vec(-3.0f64..3.0, 13),
        bump in prop::collection::vec(0.0f64..1.0, 13),
        s in 0usize..6,
        u in 6usize..12,
    ) {
        // the explicit Z makes a step monotone only when phi is L-Lipschitz with L sqrt(dt) <= 1
        let monotone = phi.lipschitz().is_some_and(|l| l * (1.0f64 / 12.0).sqrt() <= 1.0);
        let e = evaluation(12, mu, phi, plus);
        let xb: Vec<f64> = x.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let a = e.evaluate(s, 12, &x, None).unwrap();
        let b = e.evaluate(s, 12, &xb, None).unwrap();
        if monotone {
            for (p, q) in a.iter().zip(&b) {
                prop_assert!(q >= &(p - 1e-12));
            }
        }
        let mid = e.evaluate(u, 12, &x, None).unwrap();
        let two = e.evaluate(s, u, &mid, None).unwrap();
        for (p, q) in a.iter().zip(&two) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn inf_convolution_is_below_and_increasing(z in -3.0f64..3.0, y in -2.0f64..2.0, mu in 0.0f64..0.5) {
        let g = make_mu_phi(mu, Modulus::capped_sqrt(), Sign::Plus).unwrap();
        let lattice = ConvolutionLattice::new(8.0, 1.0 / 32.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for m in [2.0, 4.0, 8.0] {
            let v = inf_convolution(&g, m, &lattice, 0.0, y, z).unwrap();
            // off-lattice points cost at most m times the spacing in each coordinate
            prop_assert!(v <= g.eval(0.0, y, z) + 2.0 * m * lattice.spacing() + 1e-12);
            prop_assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn penalization_stays_below_and_increases(
        mu in 0.0f64..0.5,
        gamma in 0.0f64..1.0,
        x in prop::collection::vec(-2.0f64..2.0, 33),
    ) {
        let g = make_mu_phi(mu, Modulus::capped_sqrt(), Sign::Plus).unwrap();
        let e = evaluation(32, mu, Modulus::capped_sqrt(), true);
        let tree = *e.tree();
        let tau = nleval::LatticeStoppingTime::deterministic(&tree, 0, 32).unwrap();
        let mut terminal = AdaptedProcess::zeros(&tree);
        terminal.set_layer(32, &x).unwrap();
        let k = nleval::IntegrandK::constant(&tree, gamma).unwrap();
        let y = nleval::solve(&tree, &g, &terminal, &k, &tau).unwrap().y;
        let r = match doob_meyer(&e, &y, &tau, &default_schedule(&tree, mu), 1e-12) {
            Ok(r) => r,
            Err(Error::ToleranceNotReached { result, .. }) => *result,
            Err(other) => return Err(TestCaseError::fail(other.to_string())),
        };
        for w in r.iterates.windows(2) {
            for k in 0..32 {
                for j in 0..=k {
                    prop_assert!(w[0].y.get(k, j) <= w[1].y.get(k, j) + 1e-9);
                    prop_assert!(w[1].y.get(k, j) <= y.get(k, j) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn picard_solution_solves_the_equation(
        mu in 0.0f64..1.0,
        lambda in 0.1f64..2.0,
        x in prop::collection::vec(-2.0f64..2.0, 33),
    ) {
        let e = evaluation(32, mu, Modulus::capped_sqrt(), true);
        let p = EDrivenProblem::at_horizon(e, move |_, y: f64| lambda * y.sin(), lambda, &x).unwrap();
        let (y, _) = solve_e_bsde(&p, 1e-11).unwrap();
        prop_assert!(fixed_point_defect(&p, &y).unwrap() <= 1e-9);
    }
}
