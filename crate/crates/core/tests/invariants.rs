use mfflow_core::coefficients::StateInvariantSpec;
use mfflow_core::output::format_num;
use mfflow_core::*;
use proptest::prelude::*;

fn grid() -> Grid1D {
    Grid1D::new(-6.0, 6.0, 121).unwrap()
}

fn bump(grid: Grid1D, mean: f64, sd: f64) -> GridFunction {
    GridFunction::from_fn(grid, |x| (-(x - mean).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt()))
}

fn model(b1: f64, s1: f64) -> CoefficientModel {
    let h = GridFunction::from_fn(grid(), |x| (-x * x / 4.0).exp());
    make_state_invariant_model(StateInvariantSpec {
        b0: 0.1,
        b1,
        b_outer: Outer::Sin,
        h_b: h.clone(),
        s0: 1.0,
        s1,
        s_outer: Outer::Tanh,
        h_s: h,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fp_conserves_mass_and_stays_finite(
        b1 in -0.8f64..0.8, s1 in 0.0f64..0.4, mean in -1.0f64..1.0, sd in 0.3f64..0.6,
    ) {
        let m = model(b1, s1);
        let mu = bump(grid(), mean, sd);
        let path = solve_fp(&m, &mu, 0.0, 0.5, &FpConfig::with_steps(50)).unwrap();
        let m0 = quadrature(&mu);
        for j in 0..path.n_slices() {
            prop_assert!((quadrature(&path.slice(j)) - m0).abs() < 1e-12);
            prop_assert!(path.slice_values(j).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn directional_derivative_is_linear(a in -2.0f64..2.0, c in -2.0f64..2.0, b1 in -0.8f64..0.8) {
        let m = model(b1, 0.3);
        let cfg = FpConfig::with_steps(40);
        let path = solve_fp(&m, &bump(grid(), 0.0, 0.5), 0.0, 0.4, &cfg).unwrap();
        let d1 = bump(grid(), 0.5, 0.6);
        let d2 = GridFunction::from_fn(grid(), |x| x * (-x * x).exp());
        let combo = d1.scale(a).axpy(c, &d2).unwrap();
        let lhs = solve_directional(&m, &path, &combo, &cfg).unwrap();
        let rhs = solve_directional(&m, &path, &d1, &cfg).unwrap().scaled(a);
        let other = solve_directional(&m, &path, &d2, &cfg).unwrap().scaled(c);
        for j in 0..lhs.n_slices() {
            let expect = rhs.slice(j).axpy(1.0, &other.slice(j)).unwrap();
            prop_assert!(l2_distance(&lhs.slice(j), &expect).unwrap() < 1e-11 * (1.0 + l2_norm(&expect)));
        }
    }

    #[test]
    fn exp_neg_square_derivative_bound(scale in 0.01f64..5.0, mean in -2.0f64..2.0, sd in 0.2f64..1.5) {
        let h = GridFunction::from_fn(grid(), |x| (1.0 + x * x).recip());
        let f = SmoothFunctional::exp_neg_square(h.scale(scale));
        let d = f.derivative(&bump(grid(), mean, sd));
        let bound = 2f64.sqrt() * (-0.5f64).exp() * scale * l2_norm(&h);
        prop_assert!(l2_norm(&d) <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn coarsened_noise_sums_fine_increments(seed in any::<u64>(), path in 0usize..50) {
        let fine = NoiseBank::new(seed, 50, 16, 0.01).unwrap();
        let coarse = fine.coarsened(4).unwrap();
        let f = fine.increments(path);
        let c = coarse.increments(path);
        for (k, v) in c.iter().enumerate() {
            let sum: f64 = f[4 * k..4 * k + 4].iter().sum();
            prop_assert!((v - sum).abs() < 1e-12);
        }
        prop_assert_eq!(fine.prefix(8).unwrap().increments(path), f[..8].to_vec());
    }

    #[test]
    fn csv_numbers_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(format_num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn subsampling_keeps_nodes(factor in 1usize..5) {
        let g = Grid1D::new(-3.0, 3.0, 61).unwrap();
        let u = GridFunction::from_fn(g, |x| x.sin());
        let s = u.subsampled(factor).unwrap();
        let coarse = g.coarsened(factor).unwrap();
        prop_assert!(s.grid().same_as(&coarse));
        for i in 0..coarse.len() {
            prop_assert_eq!(s.values()[i], u.values()[factor * i]);
        }
    }

    #[test]
    fn constant_functional_has_exact_value(c in -3.0f64..3.0, x in -2.0f64..2.0) {
        let phi = TerminalFunctional::constant(grid(), c);
        let mu = bump(grid(), 0.0, 0.5);
        prop_assert_eq!(phi.value(x, &mu), c);
        prop_assert_eq!(phi.dphi_dx(x, &mu), 0.0);
        prop_assert_eq!(phi.dphi_dm(x, &mu).max_abs(), 0.0);
    }
}

#[test]
fn flow_restart_reproduces_path() {
    let m = model(0.5, 0.3);
    let cfg = FpConfig::with_steps(60);
    let gap = flow_property_check(&m, &bump(grid(), 0.2, 0.5), 0.0, 0.2, 0.6, &cfg).unwrap();
    assert!(gap < 1e-14, "{gap}");
}
