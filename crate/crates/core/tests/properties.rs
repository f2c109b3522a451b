use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vbfactor::crossval::fold_assignment;
use vbfactor::fa_svi::{sample_minibatch, step_size};
use vbfactor::io::{read_csv_matrix, write_csv_matrix};
use vbfactor::json;
use vbfactor::metrics::{mean_sd, rv_coefficient};
use vbfactor::model::{
    batch_size, cumulative_tau, expected_tau, Dataset, GammaFactor, GaussianFactor, NaturalGaussian, SviConfig,
};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0..5.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(d, d).prop_map(move |a| &a * a.transpose() + DMatrix::identity(d, d) * 0.5)
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

proptest! {
    #[test]
    fn natural_parameters_round_trip(
        (cov, mean) in (1usize..6).prop_flat_map(|d| (spd(d), prop::collection::vec(-3.0..3.0f64, d)))
    ) {
        let d = mean.len();
        let g = GaussianFactor::new(DVector::from_vec(mean), cov).unwrap();
        let back = NaturalGaussian::from_moments(&g).unwrap().to_moments().unwrap();
        prop_assert!(rel_err(&back.cov, &g.cov) < 1e-9);
        prop_assert!((&back.mean - &g.mean).amax() < 1e-9 * (1.0 + g.mean.amax()));
        prop_assert_eq!(back.dim(), d);
    }

    #[test]
    fn blending_hits_both_endpoints(a in spd(3), b in spd(3)) {
        let na = NaturalGaussian::from_moments(&GaussianFactor::new(DVector::zeros(3), a).unwrap()).unwrap();
        let nb = NaturalGaussian::from_moments(&GaussianFactor::new(DVector::zeros(3), b).unwrap()).unwrap();
        prop_assert!(rel_err(&na.blend(&nb, 0.0).eta1, &na.eta1) < 1e-12);
        prop_assert!(rel_err(&na.blend(&nb, 1.0).eta1, &nb.eta1) < 1e-12);
    }

    #[test]
    fn cumulative_tau_is_running_product(
        pairs in prop::collection::vec((0.5..10.0f64, 0.5..10.0f64), 1..8)
    ) {
        let delta: Vec<GammaFactor> = pairs.iter().map(|&(a, b)| GammaFactor::new(a, b).unwrap()).collect();
        let all = cumulative_tau(&delta);
        for (j, t) in all.iter().enumerate() {
            let single = expected_tau(&delta, j + 1).unwrap();
            prop_assert!((t - single).abs() <= 1e-12 * single.abs());
        }
        prop_assert!(expected_tau(&delta, 0).is_err());
        prop_assert!(expected_tau(&delta, delta.len() + 1).is_err());
    }

    #[test]
    fn batch_size_is_floor(n in 1usize..5000, b in 0.001..1.0f64) {
        let m = batch_size(n, b);
        let exact = b * n as f64;
        prop_assert!(m as f64 <= exact + 1e-6);
        prop_assert!((m as f64) > exact - 1.0);
    }

    #[test]
    fn minibatches_are_distinct_rows(n in 1usize..300, b in 0.01..1.0f64, seed in any::<u64>()) {
        prop_assume!(batch_size(n, b) >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch = sample_minibatch(n, b, &mut rng).unwrap();
        prop_assert_eq!(batch.len(), batch_size(n, b));
        batch.sort_unstable();
        batch.dedup();
        prop_assert_eq!(batch.len(), batch_size(n, b));
        prop_assert!(batch.iter().all(|&i| i < n));
    }

    #[test]
    fn step_sizes_decrease_within_unit_interval(kappa in 0.51..1.0f64, delay in 0.0..10.0f64, t in 1usize..10_000) {
        let cfg = SviConfig { kappa, delay, ..SviConfig::with_batch(0.5) };
        let now = step_size(t, &cfg);
        prop_assert!(now > 0.0 && now <= 1.0);
        prop_assert!(step_size(t + 1, &cfg) < now);
    }

    #[test]
    fn rv_is_symmetric_and_bounded(a in matrix(5, 5), b in matrix(5, 5)) {
        let (a, b) = (&a * a.transpose(), &b * b.transpose());
        prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
        let ab = rv_coefficient(&a, &b).unwrap();
        let ba = rv_coefficient(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn folds_are_balanced_and_reproducible(n in 2usize..400, k in 2usize..12, seed in any::<u64>(), study in 0usize..4) {
        prop_assume!(k <= n);
        let f = fold_assignment(n, k, seed, study).unwrap();
        prop_assert_eq!(&f, &fold_assignment(n, k, seed, study).unwrap());
        let mut sizes = vec![0usize; k];
        for &x in &f {
            sizes[x] += 1;
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn mean_sd_is_shift_equivariant(v in prop::collection::vec(-1e3..1e3f64, 2..50), c in -1e3..1e3f64) {
        let (m, s) = mean_sd(&v);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let (m2, s2) = mean_sd(&shifted);
        prop_assert!((m2 - m - c).abs() < 1e-9);
        prop_assert!((s2 - s).abs() < 1e-7 * (1.0 + s));
    }

    #[test]
    fn preprocessing_inverts(x in matrix(12, 4), scale in any::<bool>()) {
        let d = Dataset::preprocess(x.clone(), true, scale).unwrap();
        prop_assert!(rel_err(&d.inverse_transform(&d.x), &x) < 1e-12);
        prop_assert!(rel_err(&d.transform(&x).unwrap(), &d.x) < 1e-12);
    }

    #[test]
    fn json_floats_round_trip_exactly(v in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..20)) {
        let back: Vec<f64> = json::from_str(&json::to_string(&v).unwrap()).unwrap();
        prop_assert_eq!(back, v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_round_trips_exactly(m in matrix(6, 3)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let header: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        write_csv_matrix(&path, &m, Some(&header)).unwrap();
        let back = read_csv_matrix(&path).unwrap();
        prop_assert_eq!(back.data, m);
        prop_assert_eq!(back.header, Some(header));
    }
}
