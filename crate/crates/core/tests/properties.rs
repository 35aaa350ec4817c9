use invman::manifold::{transform_t, transform_t_inv};
use invman::nonlinear::{power_f, truncated_f, NonlinearitySpec};
use invman::{Block, SpectralModel, SpectralVector, WienerPath};
use proptest::prelude::*;

fn model() -> SpectralModel {
    SpectralModel::build_sine(8, 3.0, 0.0, 32).unwrap()
}

fn vector() -> impl Strategy<Value = SpectralVector> {
    prop::collection::vec(-1.0f64..1.0, 8).prop_map(SpectralVector::new)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projections_split_exactly(v in vector()) {
        let m = model();
        let u = m.project(&v, Block::Unstable).unwrap();
        let s = m.project(&v, Block::Stable).unwrap();
        prop_assert_eq!(u.add(&s), v);
        prop_assert!(m.project(&u, Block::Stable).unwrap().is_zero());
        prop_assert_eq!(m.project(&s, Block::Stable).unwrap(), s);
    }

    #[test]
    fn stable_semigroup_composes(v in vector(), t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
        let m = model();
        let two = m.semigroup(&m.semigroup(&v, t1, Block::Stable).unwrap(), t2, Block::Stable).unwrap();
        let one = m.semigroup(&v, t1 + t2, Block::Stable).unwrap();
        prop_assert!(two.sub(&one).norm() <= 1e-14 * v.norm().max(1e-300));
        let decay = (-m.lambda_s() * (t1 + t2)).exp();
        prop_assert!(m.alpha_norm(&one) <= decay * m.alpha_norm(&v) * (1.0 + 1e-12));
    }

    #[test]
    fn conjugation_inverts(v in vector(), z in -3.0f64..3.0) {
        let back = transform_t(&transform_t_inv(&v, z), z);
        for (a, b) in back.coeffs().iter().zip(v.coeffs()) {
            prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs());
        }
    }

    #[test]
    fn grid_round_trip(v in vector()) {
        let m = model();
        let back = m.from_grid(&m.to_grid(&v).unwrap()).unwrap();
        prop_assert!(back.sub(&v).norm() <= 1e-13 * v.norm().max(1.0));
    }

    #[test]
    fn square_is_homogeneous(v in vector(), k in 0.1f64..3.0) {
        let m = model();
        let spec = NonlinearitySpec::new(2.0, false, 1.0).unwrap();
        let a = power_f(&v.scaled(k), &spec, &m).unwrap();
        let b = power_f(&v, &spec, &m).unwrap().scaled(k * k);
        prop_assert!(a.sub(&b).norm() <= 1e-12 * b.norm().max(1e-300));
    }

    #[test]
    fn truncation_is_identity_inside_the_radius(v in vector()) {
        let m = model();
        let spec = NonlinearitySpec::new(2.0, false, 0.5).unwrap();
        let small = v.scaled(0.4 / m.alpha_norm(&v).max(1e-300));
        let a = truncated_f(&small, &spec, &m).unwrap();
        let b = power_f(&small, &spec, &m).unwrap();
        prop_assert!(a.sub(&b).norm() <= 1e-15 * b.norm().max(1e-300));
        let far = v.scaled(1.01 / m.alpha_norm(&v).max(1e-300));
        prop_assert!(truncated_f(&far, &spec, &m).unwrap().is_zero());
    }

    #[test]
    fn wiener_windows_agree_on_overlap(seed in any::<u64>()) {
        let short = WienerPath::sample(seed, -2.0, 1.0, 0.01).unwrap();
        let long = WienerPath::sample(seed, -5.0, 3.0, 0.01).unwrap();
        for i in 0..short.values().len() {
            let t = short.time(i);
            prop_assert_eq!(short.values()[i], long.value_at(t).unwrap());
        }
    }
}
