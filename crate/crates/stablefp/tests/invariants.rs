use num_traits::Zero;
use proptest::prelude::*;
use stablefp::threshold::rbar_interval;
use stablefp::{
    check_linear, check_strong, convolve, gap, lp_norm, semigroup_apply, Field, Grid, NoiseMode,
    ParameterSet, StableLaw,
};

fn exponent() -> impl Strategy<Value = f64> {
    prop_oneof![1 => Just(f64::INFINITY), 3 => 1.0f64..200.0]
}

fn parameter_set() -> impl Strategy<Value = ParameterSet> {
    (
        1.001f64..=2.0,
        -1.0f64..=0.0,
        exponent(),
        exponent(),
        exponent(),
        1u32..=3,
    )
        .prop_map(|(a, b, p, q, r, d)| ParameterSet::from_f64(a, b, p, q, r, d).unwrap())
}

fn with_beta(ps: &ParameterSet, beta: f64) -> ParameterSet {
    let mut i = ps.to_input();
    i.beta = beta;
    ParameterSet::from_input(&i).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn strong_implies_weak(ps in parameter_set()) {
        let r = check_strong(&ps);
        prop_assert!(!r.strong_ok || r.weak_ok);
    }

    #[test]
    fn weak_iff_positive_gap(ps in parameter_set()) {
        let r = check_strong(&ps);
        prop_assert_eq!(r.weak_ok, gap(&ps) > Zero::zero());
        prop_assert_eq!(r.gamma_gap, gap(&ps));
    }

    #[test]
    fn weak_region_has_nonempty_time_window(ps in parameter_set()) {
        if check_strong(&ps).weak_ok {
            let w = rbar_interval(&ps);
            prop_assert!(w.is_some());
            let w = w.unwrap();
            prop_assert!(w.lower < w.upper);
        }
    }

    #[test]
    fn raising_beta_keeps_every_condition(ps in parameter_set(), t in 0.0f64..1.0) {
        let b = ps.to_input().beta;
        let higher = with_beta(&ps, b + t * (0.0 - b));
        let lo = check_strong(&ps);
        let hi = check_strong(&higher);
        prop_assert!(!lo.weak_ok || hi.weak_ok);
        prop_assert!(!lo.strong_ok || hi.strong_ok);
        prop_assert!(!check_linear(&ps) || check_linear(&higher));
    }

    #[test]
    fn raising_integrability_keeps_weak(ps in parameter_set(), scale in 1.0f64..10.0) {
        let mut i = ps.to_input();
        i.p *= scale;
        i.r *= scale;
        let better = ParameterSet::from_input(&i).unwrap();
        prop_assert!(!check_strong(&ps).weak_ok || check_strong(&better).weak_ok);
        prop_assert!(gap(&better) >= gap(&ps));
    }

    #[test]
    fn gap_matches_floating_formula(ps in parameter_set()) {
        let i = ps.to_input();
        let expected = i.beta - (1.0 - i.alpha + i.d as f64 / i.p + i.alpha / i.r);
        let got = stablefp::threshold::q_to_f64(&gap(&ps));
        prop_assert!((got - expected).abs() < 1e-9, "{} vs {}", got, expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn semigroup_preserves_mass_and_sign(
        alpha in 1.05f64..=2.0,
        mean in -2.0f64..2.0,
        var in 0.3f64..2.0,
        t in 0.01f64..1.0,
    ) {
        let grid = Grid::new(1, 256, 12.0).unwrap();
        let f = Field::gaussian(&grid, &[mean], var);
        let law = StableLaw::isotropic(alpha).unwrap();
        let g = semigroup_apply(&f, t, &law).unwrap();
        prop_assert!((g.integral() - f.integral()).abs() < 1e-10);
        prop_assert!(g.min() > -1e-3 * g.max_abs());
        // contraction in every Lebesgue norm
        for ell in [1.0, 2.0, f64::INFINITY] {
            prop_assert!(lp_norm(&g, ell).unwrap() <= lp_norm(&f, ell).unwrap() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn semigroup_composes(
        alpha in 1.05f64..=2.0,
        product in any::<bool>(),
        s in 0.01f64..0.5,
        t in 0.01f64..0.5,
    ) {
        let grid = Grid::new(2, 32, 6.0).unwrap();
        let f = Field::gaussian(&grid, &[0.3, -0.5], 0.8);
        let mode = if product { NoiseMode::CoordinateProduct } else { NoiseMode::Isotropic };
        let law = StableLaw::new(alpha, mode).unwrap();
        let two = semigroup_apply(&semigroup_apply(&f, s, &law).unwrap(), t, &law).unwrap();
        let one = semigroup_apply(&f, s + t, &law).unwrap();
        let diff = two.values().iter().zip(one.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-12 * one.max_abs().max(1.0));
    }
}

fn bump(grid: &Grid, c: f64, v: f64, w: f64) -> Field {
    Field::gaussian(grid, &[c], v).scale(w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convolution_is_commutative_bilinear_and_multiplies_mass(
        c in prop::array::uniform3(-3.0f64..3.0),
        v in prop::array::uniform3(0.2f64..2.0),
        w in prop::array::uniform3(-2.0f64..2.0),
        a in -3.0f64..3.0,
    ) {
        let grid = Grid::new(1, 256, 12.0).unwrap();
        let f = bump(&grid, c[0], v[0], w[0]);
        let g = bump(&grid, c[1], v[1], w[1]);
        let h = bump(&grid, c[2], v[2], w[2]);
        let sup = |x: &Field| x.max_abs();
        let fg = convolve(&f, &g).unwrap();
        let gf = convolve(&g, &f).unwrap();
        prop_assert!(sup(&fg.sub(&gf).unwrap()) < 1e-12 * sup(&fg).max(1e-300) + 1e-15);
        let lhs = convolve(&f.axpby(a, &h, 1.0).unwrap(), &g).unwrap();
        let rhs = fg.axpby(a, &convolve(&h, &g).unwrap(), 1.0).unwrap();
        prop_assert!(sup(&lhs.sub(&rhs).unwrap()) < 1e-12 * (sup(&lhs) + sup(&rhs)) + 1e-15);
        let mass = fg.integral() - f.integral() * g.integral();
        prop_assert!(mass.abs() < 1e-10, "{}", mass);
    }
}
