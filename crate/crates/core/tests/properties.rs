use mci::data::{one_hot, read_features, write_features, FeatureFileOptions, LabeledDomain, Scenario, TargetTruth};
use mci::dependence::{cond, nocco, per_class_nocco, ExtendedGrams, StatBandwidths};
use mci::kernel::{center, fitted_gram, indicator_gram, normalize, Bandwidth};
use mci::model::{forward_c, loss_total, ModelParams, ModelShape, ObjectiveConfig};
use mci::AdaptationDataset;
use nalgebra::DMatrix;
use proptest::prelude::*;

type Sample = (DMatrix<f64>, Vec<usize>, Vec<usize>);

const EPS: f64 = 1e-3;

/// Features in [-3, 3]^d with labels in 0..3 and domains in 0..2, each level present.
fn sample(n_max: usize) -> impl Strategy<Value = Sample> {
    (8usize..=n_max, 1usize..=3).prop_flat_map(|(n, d)| {
        (
            proptest::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| DMatrix::from_vec(d, n, v)),
            proptest::collection::vec(0usize..3, n),
            proptest::collection::vec(0usize..2, n),
        )
            .prop_map(|(x, mut y, mut z)| {
                // make every class and domain appear at least twice
                for (i, c) in [0, 0, 1, 1, 2, 2].iter().enumerate() {
                    y[i] = *c;
                }
                for (i, c) in [0, 1, 0, 1, 0, 1].iter().enumerate() {
                    z[i] = *c;
                }
                (x, y, z)
            })
    })
}

fn statistics(x: &DMatrix<f64>, y: &[usize], z: &[usize]) -> [f64; 3] {
    let bw = StatBandwidths::default();
    let (ym, zm) = (one_hot(y, 3), one_hot(z, 2));
    let g = ExtendedGrams::build(x, &ym, &zm, &bw).unwrap();
    let (kx, _) = fitted_gram(x, Bandwidth::MeanSqDist).unwrap();
    let kz = indicator_gram(&zm, Bandwidth::MeanSqDist).unwrap();
    [
        nocco(&kx, &kz, EPS).unwrap().statistic,
        cond(&g.kxt, &g.kzt, &g.ky, EPS).unwrap().statistic,
        per_class_nocco(&kx, &kz, y, EPS).unwrap().statistic,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn statistics_are_permutation_invariant((x, y, z) in sample(30), seed in any::<u64>()) {
        let n = x.ncols();
        let perm = {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            p
        };
        let xp = x.select_columns(&perm);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let zp: Vec<usize> = perm.iter().map(|&i| z[i]).collect();
        let a = statistics(&x, &y, &z);
        let b = statistics(&xp, &yp, &zp);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-10, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn statistics_are_non_negative((x, y, z) in sample(30)) {
        for s in statistics(&x, &y, &z) {
            prop_assert!(s >= -1e-10);
        }
    }

    #[test]
    fn power_of_two_rescaling_is_exact((x, y, z) in sample(30), k in -4i32..=4) {
        let c = 2f64.powi(k);
        let (k1, _) = fitted_gram(&x, Bandwidth::MeanSqDist).unwrap();
        let (k2, _) = fitted_gram(&(&x * c), Bandwidth::MeanSqDist).unwrap();
        prop_assert_eq!(k1.entries(), k2.entries());
        prop_assert_eq!(statistics(&x, &y, &z), statistics(&(&x * c), &y, &z));
    }

    #[test]
    fn general_rescaling_is_invariant((x, y, z) in sample(30), c in 0.05f64..20.0) {
        let a = statistics(&x, &y, &z);
        let b = statistics(&(&x * c), &y, &z);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn normalized_gram_spectrum_in_unit_interval((x, _y, _z) in sample(30), eps in 1e-6f64..1.0) {
        let (k, _) = fitted_gram(&x, Bandwidth::MeanSqDist).unwrap();
        let r = normalize(&center(&k), eps).unwrap();
        let ev = r.entries().clone().symmetric_eigenvalues();
        prop_assert!(ev.min() >= -1e-10);
        prop_assert!(ev.max() < 1.0);
    }

    #[test]
    fn softmax_columns_sum_to_one(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let shape = ModelShape { input_dim: 3, hidden_dim: 6, feature_dim: 5, classes: 4 };
        let p = ModelParams::<f64>::init(shape, seed);
        let xre = DMatrix::from_fn(5, 7, |r, c| scale * ((r * 7 + c) as f64).sin());
        let probs = forward_c(&p, &xre).unwrap();
        for col in probs.column_iter() {
            prop_assert!((col.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_breakdown_identity_holds(seed in 0u64..1000, b1 in 0.0f64..10.0, b2 in 0.0f64..1.0) {
        let x = {
            use rand::SeedableRng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            DMatrix::from_fn(2, 20, |_, _| StandardNormal.sample(&mut rng))
        };
        let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let source = LabeledDomain { features: x.columns(0, 12).into_owned(), labels: y[..12].to_vec() };
        let mut ds = AdaptationDataset::single_source(source, x.columns(12, 8).into_owned(), 2).unwrap();
        ds.set_pseudo_labels(one_hot(&y[12..], 2)).unwrap();
        let shape = ModelShape { input_dim: 2, hidden_dim: 6, feature_dim: 3, classes: 2 };
        let params = ModelParams::<f64>::init(shape, seed);
        let cfg = ObjectiveConfig { beta1: b1, beta2: b2, epsilon: EPS, bandwidths: StatBandwidths::default() };
        let l = loss_total(&ds, &params, &cfg).unwrap();
        prop_assert_eq!(l.total, l.ce + b1 * l.cond + b2 * l.ent);
    }

    #[test]
    fn feature_file_round_trip((x, y, z) in sample(20), unlabelled in any::<bool>()) {
        // domain 0 is the source, domain 1 the target
        let src: Vec<usize> = (0..x.ncols()).filter(|&i| z[i] == 0).collect();
        let tgt: Vec<usize> = (0..x.ncols()).filter(|&i| z[i] == 1).collect();
        let source = LabeledDomain { features: x.select_columns(&src), labels: src.iter().map(|&i| y[i]).collect() };
        let dataset = AdaptationDataset::single_source(source, x.select_columns(&tgt), 3).unwrap();
        let truth = (!unlabelled).then(|| TargetTruth::new(tgt.iter().map(|&i| y[i]).collect()));
        let scenario = Scenario { dataset, truth };
        let mut buf = Vec::new();
        write_features(&scenario, &mut buf, b',').unwrap();
        let back: Scenario<f64> = read_features(buf.as_slice(), FeatureFileOptions { classes: Some(3), ..Default::default() }).unwrap();
        prop_assert_eq!(back, scenario);
    }
}
