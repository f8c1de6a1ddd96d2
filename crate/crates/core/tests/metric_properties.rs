use fxstab::instability::{average_pairwise_jaccard, hessian_from_slopes, top_k_features};
use fxstab::{analyze_point, AnalysisConfig, EvalPoint, FnModel};
use proptest::prelude::*;

fn slope_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6, 2usize..12).prop_flat_map(|(n, m)| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, n), m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hessian_scores_obey_bounds_and_identities(slopes in slope_matrix()) {
        let h = hessian_from_slopes(&slopes).unwrap();
        prop_assert!(h.magnitude >= 0.0);
        prop_assert!((0.0..=1.0).contains(&h.coupling));
        prop_assert!(h.magnitude_stability > 0.0 && h.magnitude_stability <= 1.0);
        prop_assert_eq!(h.magnitude_stability, 1.0 / (1.0 + h.magnitude));
        prop_assert_eq!(h.coupling_stability, 1.0 - h.coupling);
        prop_assert_eq!(h.overall, h.magnitude * h.coupling);
    }

    #[test]
    fn identical_slopes_are_perfectly_stable(row in prop::collection::vec(-5.0f64..5.0, 1..6), m in 2usize..10) {
        let h = hessian_from_slopes(&vec![row; m]).unwrap();
        prop_assert!(h.slope_covariance.iter().flatten().all(|v| *v == 0.0));
        prop_assert_eq!(h.overall, 0.0);
        prop_assert_eq!(h.magnitude, 0.0);
    }

    #[test]
    fn hessian_scores_are_scale_invariant(slopes in slope_matrix(), c in prop::sample::select(vec![0.5, 10.0])) {
        let scaled: Vec<Vec<f64>> = slopes.iter().map(|r| r.iter().map(|v| c * v).collect()).collect();
        let (a, b) = (hessian_from_slopes(&slopes).unwrap(), hessian_from_slopes(&scaled).unwrap());
        prop_assert!((a.magnitude - b.magnitude).abs() <= 1e-9 * a.magnitude.max(1.0));
        prop_assert!((a.coupling - b.coupling).abs() <= 1e-9);
    }

    #[test]
    fn jaccard_average_is_a_fraction(slopes in slope_matrix(), k in 1usize..6) {
        let n = slopes[0].len();
        let k = k.min(n);
        let sets: Vec<Vec<usize>> = slopes.iter().map(|b| top_k_features(b, k)).collect();
        let j = average_pairwise_jaccard(&sets);
        prop_assert!((0.0..=1.0).contains(&j));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_scaling_scales_dispersion_and_lipschitz(
        x in prop::collection::vec(-2.0f64..2.0, 3),
        c in prop::sample::select(vec![0.5, 10.0]),
        seed in any::<u64>(),
    ) {
        let f = |x: &[f64]| (2.0 * x[0]).sin() + x[1] * x[2] + 0.3 * x[2] * x[2];
        let base = FnModel::new(3, f);
        let scaled = FnModel::new(3, move |x: &[f64]| c * f(x));
        let cfg = AnalysisConfig { samples: 40, replicates: 6, seed, ..AnalysisConfig::default() };
        let p = EvalPoint::new(x).unwrap();
        let a = analyze_point(&base, &p, &cfg).unwrap();
        let b = analyze_point(&scaled, &p, &cfg).unwrap();
        let close = |u: f64, v: f64| (c * u - v).abs() <= 1e-9 * v.abs().max(1e-12);
        prop_assert!(close(a.uncertainty.conformal_sd, b.uncertainty.conformal_sd));
        prop_assert!(close(a.uncertainty.conformal_iqr, b.uncertainty.conformal_iqr));
        prop_assert!(close(a.uncertainty.conformal_range, b.uncertainty.conformal_range));
        prop_assert!(close(a.uncertainty.local_linear_rmse, b.uncertainty.local_linear_rmse));
        prop_assert!(close(a.instability.lipschitz_surrogate, b.instability.lipschitz_surrogate));
        prop_assert!(close(a.instability.lipschitz_fd_mean, b.instability.lipschitz_fd_mean));
        prop_assert!(close(a.instability.lipschitz_fd_max, b.instability.lipschitz_fd_max));
        let (ia, ib) = (&a.instability, &b.instability);
        prop_assert!((ia.hessian_mag - ib.hessian_mag).abs() <= 1e-8 * ia.hessian_mag.max(1e-12));
        prop_assert!((ia.hessian_cpl - ib.hessian_cpl).abs() <= 1e-8);
        prop_assert_eq!(ia.jaccard_avg, ib.jaccard_avg);
    }
}
