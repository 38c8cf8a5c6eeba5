use mci::data::{make_shifted_blobs, one_hot, LabeledDomain, SyntheticKind, SyntheticSpec};
use mci::model::{load_model, save_model};
use mci::trainer::{fit, Phase, TrainConfig, Trainer};
use mci::{AdaptationDataset, Scenario};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small(config: TrainConfig) -> TrainConfig {
    TrainConfig { hidden_dim: 32, feature_dim: 16, epsilon: 1e-2, ..config }
}

fn blobs(classes: usize, shift: f64, per: usize, seed: u64) -> Scenario<f64> {
    let spec = SyntheticSpec {
        kind: SyntheticKind::ShiftedBlobs { shift: vec![shift, 0.0], separation: 3.0 },
        classes,
        samples_per_class_per_domain: per,
        noise_sd: 1.0,
        num_sources: 1,
        seed,
    };
    make_shifted_blobs(&spec).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

/// Plain logistic regression by gradient descent, used as an oracle for separability.
fn logistic_accuracy(x: &DMatrix<f64>, y: &[usize]) -> f64 {
    let t = DVector::from_iterator(y.len(), y.iter().map(|&c| c as f64));
    let mut w = DVector::zeros(x.nrows());
    let mut b = 0.0;
    for _ in 0..2000 {
        let z = x.tr_mul(&w).add_scalar(b);
        let r = z.map(|v| 1.0 / (1.0 + (-v).exp())) - &t;
        w -= (x * &r) * (0.1 / y.len() as f64);
        b -= 0.1 * r.mean();
    }
    let z = x.tr_mul(&w).add_scalar(b);
    z.iter().zip(y).filter(|(s, &c)| (**s > 0.0) == (c == 1)).count() as f64 / y.len() as f64
}

#[test]
fn separable_source_reaches_full_training_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
    let x = DMatrix::from_fn(2, 60, |r, c| {
        let noise: f64 = StandardNormal.sample(&mut rng);
        0.4 * noise + if r == 1 { 0.0 } else if labels[c] == 1 { 1.5 } else { -1.5 }
    });
    assert_eq!(logistic_accuracy(&x, &labels), 1.0);
    let ds = AdaptationDataset::single_source(LabeledDomain { features: x.clone(), labels: labels.clone() }, x.clone(), 2).unwrap();
    let mut t = Trainer::new(&ds, small(TrainConfig::default())).unwrap();
    t.pretrain(&ds, 200, None).unwrap();
    let hits = t.predict(&x).unwrap().iter().zip(&labels).filter(|(a, b)| a == b).count();
    assert_eq!(hits, 60);
}

#[test]
fn identical_sources_match_merged_source() {
    let sc = blobs(3, 1.0, 10, 2);
    let s = sc.dataset.source(0);
    let merged_features = nalgebra::stack![s.features, s.features];
    let merged_labels = [s.labels.clone(), s.labels.clone()].concat();
    let target = sc.dataset.target_features().clone();
    let mut two = AdaptationDataset::new(vec![s.clone(), s.clone()], target.clone(), 3).unwrap();
    let mut one = AdaptationDataset::single_source(LabeledDomain { features: merged_features, labels: merged_labels }, target, 3).unwrap();
    // the domain variable differs (three values against two), so only the entropy term is shared
    let cfg = small(TrainConfig { beta1: 0.0, beta2: 0.5, pretrain_epochs: 4, adapt_epochs: 4, ..TrainConfig::default() });
    let a = fit(&mut two, &cfg, sc.truth.as_ref()).unwrap();
    let b = fit(&mut one, &cfg, sc.truth.as_ref()).unwrap();
    assert_eq!(a.params, b.params);
    for (x, y) in a.trace.epochs.iter().zip(&b.trace.epochs) {
        assert_eq!((x.ce, x.target_accuracy), (y.ce, y.target_accuracy));
        assert_eq!(x.loss.map(|l| l.ent), y.loss.map(|l| l.ent));
    }
}

#[test]
fn single_source_is_the_one_element_multi_source_case() {
    let sc = blobs(2, 1.5, 10, 3);
    let s = sc.dataset.source(0);
    let target = sc.dataset.target_features().clone();
    let mut a = AdaptationDataset::new(vec![s.clone()], target.clone(), 2).unwrap();
    let mut b = AdaptationDataset::single_source(s, target, 2).unwrap();
    let cfg = small(TrainConfig { beta1: 5.0, beta2: 0.1, pretrain_epochs: 3, adapt_epochs: 3, ..TrainConfig::default() });
    let ra = fit(&mut a, &cfg, None).unwrap();
    let rb = fit(&mut b, &cfg, None).unwrap();
    assert_eq!(ra.params, rb.params);
    assert_eq!(ra.trace, rb.trace);
}

#[test]
fn cond_term_lower_for_aligned_domains() {
    let cfg = small(TrainConfig { beta1: 1.0, pretrain_epochs: 20, ..TrainConfig::default() });
    let cond_after_one_epoch = |shift: f64, seed: u64| {
        let mut sc = blobs(2, shift, 50, seed);
        assert_eq!(sc.dataset.n_total(), 200);
        let mut t = Trainer::new(&sc.dataset, TrainConfig { seed, ..cfg }).unwrap();
        t.pretrain(&sc.dataset, cfg.pretrain_epochs, None).unwrap();
        t.init_pseudo_labels(&mut sc.dataset).unwrap();
        t.adapt_epoch(&mut sc.dataset).unwrap().cond
    };
    let aligned = median((0..10).map(|s| cond_after_one_epoch(0.0, s)).collect());
    let shifted = median((0..10).map(|s| cond_after_one_epoch(2.5, s)).collect());
    assert!(aligned < shifted, "{aligned} vs {shifted}");
}

#[test]
fn adaptation_lowers_cond_on_final_features() {
    let cfg = small(TrainConfig { beta1: 100.0, beta2: 0.05, pretrain_epochs: 30, adapt_epochs: 30, ..TrainConfig::default() });
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let mut sc = blobs(2, 2.5, 25, seed);
        let r = fit(&mut sc.dataset, &TrainConfig { seed, ..cfg }, None).unwrap();
        let adapt: Vec<_> = r.trace.epochs.iter().filter(|e| e.phase == Phase::Adapt).collect();
        let first = adapt[0].loss.unwrap().cond;
        let last = adapt.last().unwrap().loss.unwrap().cond;
        ratios.push(last / first);
    }
    assert!(median(ratios.clone()) < 1.0, "{ratios:?}");
}

#[test]
fn pseudo_labels_stay_one_hot_every_epoch() {
    let mut sc = blobs(3, 1.0, 8, 5);
    let cfg = small(TrainConfig { beta1: 10.0, beta2: 0.1, ..TrainConfig::default() });
    let mut t = Trainer::new(&sc.dataset, cfg).unwrap();
    t.pretrain(&sc.dataset, 5, None).unwrap();
    t.init_pseudo_labels(&mut sc.dataset).unwrap();
    for _ in 0..5 {
        t.adapt_epoch(&mut sc.dataset).unwrap();
        let pl = sc.dataset.pseudo_labels().unwrap().clone();
        let labels = mci::data::argmax_columns(&pl);
        assert_eq!(pl, one_hot(&labels, 3));
    }
}

#[test]
fn saved_model_resumes_identically() {
    let sc = blobs(2, 1.0, 10, 6);
    let cfg = small(TrainConfig::default());
    let mut t = Trainer::new(&sc.dataset, cfg).unwrap();
    t.pretrain(&sc.dataset, 5, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.txt");
    save_model(&t.params, &path).unwrap();
    let loaded = load_model::<f64>(&path).unwrap();
    assert_eq!(loaded, t.params);
    let resumed = Trainer::from_params(loaded, cfg).unwrap();
    let x = sc.dataset.target_features();
    assert_eq!(resumed.predict(x).unwrap(), t.predict(x).unwrap());
}

#[test]
fn single_precision_training_runs() {
    let spec = SyntheticSpec {
        kind: SyntheticKind::ShiftedBlobs { shift: vec![1.0, 0.0], separation: 3.0 },
        classes: 2,
        samples_per_class_per_domain: 10,
        noise_sd: 1.0,
        num_sources: 1,
        seed: 7,
    };
    let mut sc = make_shifted_blobs::<f32>(&spec).unwrap();
    let cfg = small(TrainConfig { beta1: 1.0, beta2: 0.1, pretrain_epochs: 5, adapt_epochs: 3, ..TrainConfig::default() });
    let r = fit(&mut sc.dataset, &cfg, sc.truth.as_ref()).unwrap();
    assert_eq!(r.trace.len(), 8);
    assert!(r.trace.final_accuracy().unwrap() > 0.5);
}
