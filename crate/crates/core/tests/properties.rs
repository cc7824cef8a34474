use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use droprate::calculus::{grad_dropout, grad_scaled};
use droprate::minimizers::{
    balanced_minimizer, horn_orthogonal, is_majorized, rotated_diagonal, shrink,
};
use droprate::model::{
    dropout_objective, scale_to_scaled, scaled_risk, DataMatrix, Dims, DropoutSpec, Variant,
    Weights,
};
use droprate::Matrix;

fn matrix(r: usize, c: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v))
}

fn instance(max: usize) -> impl Strategy<Value = (Matrix, Weights)> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(e, f, h)| {
        (matrix(e, h), matrix(e, f), matrix(f, h))
            .prop_map(|(y, w2, w1)| (y, Weights::new(w2, w1).unwrap()))
    })
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::Dropout), Just(Variant::Dropconnect)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dropout_objective_is_rescaled_scaled_risk((y, w) in instance(4), v in variant(), p in 0.05f64..1.0) {
        let y = DataMatrix::new(y).unwrap();
        let spec = DropoutSpec::new(v, p).unwrap();
        let j = dropout_objective(&y, &w, &spec).unwrap();
        let i = scaled_risk(&y, &scale_to_scaled(&w, &spec), spec.lambda()).unwrap();
        prop_assert!((j - i).abs() <= 1e-12 * j.abs().max(1.0));

        // The gradients are related by the same change of variables.
        let k = spec.weight_scale();
        let gj = grad_dropout(&y, &w, &spec).unwrap();
        let gi = grad_scaled(&y, &scale_to_scaled(&w, &spec), spec.lambda()).unwrap();
        let diff = (&gj.g1 - &gi.g1 * k).amax().max((&gj.g2 - &gi.g2 * k).amax());
        prop_assert!(diff <= 1e-11 * gj.frobenius_norm().max(1.0));
    }

    #[test]
    fn scaled_risk_invariant_under_diagonal_rescaling(
        (y, w) in instance(4),
        lambda in 0.0f64..3.0,
        logs in prop::collection::vec(-1.5f64..1.5, 4),
        signs in prop::collection::vec(any::<bool>(), 4),
    ) {
        let y = DataMatrix::new(y).unwrap();
        let mut moved = w.clone();
        for i in 0..w.hidden_width() {
            let c = logs[i].exp() * if signs[i] { 1.0 } else { -1.0 };
            moved.w2.column_mut(i).scale_mut(c);
            moved.w1.row_mut(i).scale_mut(1.0 / c);
        }
        let a = scaled_risk(&y, &w, lambda).unwrap();
        let b = scaled_risk(&y, &moved, lambda).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn vector_round_trip((_, w) in instance(5)) {
        let back = Weights::from_vector(w.dims(), &w.to_vector()).unwrap();
        prop_assert_eq!(back, w);
    }

    #[test]
    fn horn_meets_random_schur_diagonals(
        b in prop::collection::vec(0.0f64..5.0, 2..12),
        seed in any::<u64>(),
    ) {
        let mut b = b;
        b.sort_by(|x, y| y.total_cmp(x));
        let n = b.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Matrix::from_fn(n, n, |_, _| rand::Rng::random::<f64>(&mut rng) - 0.5).qr().q();
        let a = rotated_diagonal(&q, &b);
        prop_assert!(is_majorized(&a, &b, 1e-12));
        let s = horn_orthogonal(&b, &a, 1e-9).unwrap();
        for (x, t) in rotated_diagonal(&s, &b).iter().zip(&a) {
            prop_assert!((x - t).abs() < 1e-9);
        }
        prop_assert!((s.transpose() * &s - Matrix::identity(n, n)).amax() < 1e-10);
    }

    #[test]
    fn shrinkage_lowers_every_singular_value(y in (1usize..5, 1usize..5).prop_flat_map(|(e, h)| matrix(e, h)), alpha in 0.0f64..2.0) {
        let data = DataMatrix::new(y).unwrap();
        let mut sv: Vec<f64> = shrink(&data, alpha).singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (i, s) in sv.iter().enumerate() {
            let expected = data.singular_values().get(i).map(|x| (x - alpha).max(0.0)).unwrap_or(0.0);
            prop_assert!((s - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_minimizers_certify(
        y in (1usize..4, 1usize..4).prop_flat_map(|(e, h)| matrix(e, h)),
        f in 1usize..6,
        lambda in 0.01f64..3.0,
        seed in any::<u64>(),
    ) {
        let data = DataMatrix::new(y).unwrap();
        prop_assume!(data.rank() > 0);
        let m = balanced_minimizer(&data, f, lambda, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let cert = m.certify(&data).unwrap();
        prop_assert!(cert.passes(), "{:?}", cert);
        let dims = Dims::new(data.nrows(), f, data.ncols()).unwrap();
        prop_assert_eq!(m.weights.dims(), dims);
    }
}
