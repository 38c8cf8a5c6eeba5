//! Distribution discrepancy metrics between two samples: kernel MMD² and
//! the classifier-based 𝒜-distance, each with a class-conditional variant.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::hstack;
use crate::dependence::class_members;
use crate::error::{Error, Result};
use crate::kernel::{Bandwidth, KernelConfig};
use crate::scalar::Scalar;

/// Gradient steps taken by the domain discriminator.
pub const DISCRIMINATOR_STEPS: usize = 200;
const DISCRIMINATOR_RATE: f64 = 0.5;

fn cross_kernel_mean<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>, cfg: &KernelConfig<T>) -> T {
    let sq_a: Vec<T> = a.column_iter().map(|c| c.norm_squared()).collect();
    let sq_b: Vec<T> = b.column_iter().map(|c| c.norm_squared()).collect();
    let inner = a.transpose() * b;
    let two = T::lit(2.0);
    let s = cfg.bandwidth_sq();
    let mut acc = T::zero();
    for j in 0..b.ncols() {
        for i in 0..a.ncols() {
            let d = sq_a[i] + sq_b[j] - two * inner[(i, j)];
            let d = if d > T::zero() { d } else { T::zero() };
            acc += (-d / s).exp();
        }
    }
    acc / T::from_usize_lossy(a.ncols() * b.ncols())
}

/// Biased V-statistic `mean(K_AA) + mean(K_BB) - 2 mean(K_AB)`, clipped at 0.
pub fn mmd<T: Scalar>(xa: &DMatrix<T>, xb: &DMatrix<T>, cfg: &KernelConfig<T>) -> Result<T> {
    if xa.ncols() == 0 || xb.ncols() == 0 {
        return Err(Error::Input("MMD needs two non-empty samples".into()));
    }
    if xa.nrows() != xb.nrows() {
        return Err(Error::DimensionMismatch { expected: xa.nrows(), got: xb.nrows() });
    }
    let v = cross_kernel_mean(xa, xa, cfg) + cross_kernel_mean(xb, xb, cfg) - T::lit(2.0) * cross_kernel_mean(xa, xb, cfg);
    Ok(if v > T::zero() { v } else { T::zero() })
}

/// MMD² with the bandwidth fitted on the pooled sample.
pub fn mmd_fitted<T: Scalar>(xa: &DMatrix<T>, xb: &DMatrix<T>, bandwidth: Bandwidth<T>) -> Result<T> {
    if xa.nrows() != xb.nrows() {
        return Err(Error::DimensionMismatch { expected: xa.nrows(), got: xb.nrows() });
    }
    let pooled = hstack(&[xa.as_view(), xb.as_view()]);
    let cfg = KernelConfig::fit(bandwidth, &pooled)?;
    mmd(xa, xb, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassDiscrepancy {
    pub class: usize,
    pub value: f64,
    pub weight: f64,
}

/// Weighted per-class values plus the classes that were skipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassConditional {
    pub value: f64,
    pub per_class: Vec<ClassDiscrepancy>,
    pub skipped_classes: Vec<usize>,
}

fn class_conditional<T: Scalar>(
    xs: &DMatrix<T>,
    ys: &[usize],
    xt: &DMatrix<T>,
    yt: &[usize],
    min_per_domain: usize,
    mut metric: impl FnMut(&DMatrix<T>, &DMatrix<T>) -> Result<f64>,
) -> Result<ClassConditional> {
    if ys.len() != xs.ncols() || yt.len() != xt.ncols() {
        return Err(Error::Shape("one label per sample required".into()));
    }
    let src = class_members(ys);
    let tgt = class_members(yt);
    let mut classes: Vec<usize> = src.iter().chain(&tgt).map(|(c, _)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    let lookup = |groups: &[(usize, Vec<usize>)], c: usize| groups.iter().find(|(k, _)| *k == c).map(|(_, m)| m.clone()).unwrap_or_default();
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for c in classes {
        let (si, ti) = (lookup(&src, c), lookup(&tgt, c));
        if si.len() < min_per_domain || ti.len() < min_per_domain {
            skipped.push(c);
            continue;
        }
        let a = xs.select_columns(&si);
        let b = xt.select_columns(&ti);
        per_class.push(ClassDiscrepancy { class: c, value: metric(&a, &b)?, weight: (si.len() + ti.len()) as f64 });
    }
    if per_class.is_empty() {
        return Err(Error::Degenerate("no class has enough samples in both domains".into()));
    }
    let total: f64 = per_class.iter().map(|p| p.weight).sum();
    for p in &mut per_class {
        p.weight /= total;
    }
    let value = per_class.iter().map(|p| p.weight * p.value).sum();
    Ok(ClassConditional { value, per_class, skipped_classes: skipped })
}

/// Per-class MMD² (pooled-fitted bandwidth per class), weighted by class size.
pub fn class_mmd<T: Scalar>(
    xs: &DMatrix<T>,
    ys: &[usize],
    xt: &DMatrix<T>,
    yt: &[usize],
    bandwidth: Bandwidth<T>,
) -> Result<ClassConditional> {
    class_conditional(xs, ys, xt, yt, 1, |a, b| Ok(mmd_fitted(a, b, bandwidth)?.as_f64()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdistanceReport {
    pub d_a: f64,
    pub classifier_test_error: f64,
    pub per_class: Option<Vec<(usize, f64)>>,
}

impl AdistanceReport {
    fn from_error(err: f64) -> Self {
        Self { d_a: 2.0 * (1.0 - 2.0 * err), classifier_test_error: err, per_class: None }
    }
}

/// Shuffles each domain's indices and puts the first half (rounded down) in training.
fn stratified_split(ns: usize, nt: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (offset, n) in [(0, ns), (ns, nt)] {
        let mut idx: Vec<usize> = (offset..offset + n).collect();
        idx.shuffle(rng);
        let half = n / 2;
        train.extend_from_slice(&idx[..half]);
        test.extend_from_slice(&idx[half..]);
    }
    (train, test)
}

/// Logistic domain discriminator; returns the test error rate.
fn discriminator_error(x: &DMatrix<f64>, is_target: &[bool], train: &[usize], test: &[usize]) -> f64 {
    let d = x.nrows();
    // standardise with training statistics
    let xtr = x.select_columns(train);
    let mean = DVector::from_fn(d, |r, _| xtr.row(r).mean());
    let sd = DVector::from_fn(d, |r, _| {
        let m = mean[r];
        let v = xtr.row(r).iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / train.len() as f64;
        if v > 1e-24 { v.sqrt() } else { 1.0 }
    });
    let standardise = |m: DMatrix<f64>| {
        let mut m = m;
        for mut col in m.column_iter_mut() {
            for r in 0..d {
                col[r] = (col[r] - mean[r]) / sd[r];
            }
        }
        m
    };
    let xtr = standardise(xtr);
    let xte = standardise(x.select_columns(test));
    let ytr = DVector::from_iterator(train.len(), train.iter().map(|&i| if is_target[i] { 1.0 } else { 0.0 }));
    let mut w = DVector::<f64>::zeros(d);
    let mut b = 0.0;
    let m = train.len() as f64;
    for _ in 0..DISCRIMINATOR_STEPS {
        let z = xtr.tr_mul(&w).add_scalar(b);
        let resid = z.map(|v| 1.0 / (1.0 + (-v).exp())) - &ytr;
        w -= (&xtr * &resid) * (DISCRIMINATOR_RATE / m);
        b -= resid.sum() * DISCRIMINATOR_RATE / m;
    }
    let scores = xte.tr_mul(&w).add_scalar(b);
    let wrong = test.iter().zip(scores.iter()).filter(|(&i, &s)| (s > 0.0) != is_target[i]).count();
    wrong as f64 / test.len() as f64
}

/// `d_A = 2(1 - 2ε)` for the test error ε of a linear logistic discriminator
/// trained on a 50/50 split stratified by domain. Reported unclamped.
pub fn a_distance<T: Scalar>(xs: &DMatrix<T>, xt: &DMatrix<T>, split_seed: u64) -> Result<AdistanceReport> {
    if xs.ncols() < 4 || xt.ncols() < 4 {
        return Err(Error::Input("the 𝒜-distance needs at least 4 samples per domain".into()));
    }
    if xs.nrows() != xt.nrows() {
        return Err(Error::DimensionMismatch { expected: xs.nrows(), got: xt.nrows() });
    }
    let x = hstack(&[xs.as_view(), xt.as_view()]).map(|v| v.as_f64());
    let is_target: Vec<bool> = (0..x.ncols()).map(|i| i >= xs.ncols()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let (train, test) = stratified_split(xs.ncols(), xt.ncols(), &mut rng);
    Ok(AdistanceReport::from_error(discriminator_error(&x, &is_target, &train, &test)))
}

/// Class-conditional 𝒜-distance. Classes with fewer than two samples in either
/// domain are skipped; the others are weighted by their share of the samples.
pub fn class_a_distance<T: Scalar>(
    xs: &DMatrix<T>,
    ys: &[usize],
    xt: &DMatrix<T>,
    yt: &[usize],
    split_seed: u64,
) -> Result<(AdistanceReport, ClassConditional)> {
    let cc = class_conditional(xs, ys, xt, yt, 2, |a, b| {
        let x = hstack(&[a.as_view(), b.as_view()]).map(|v| v.as_f64());
        let is_target: Vec<bool> = (0..x.ncols()).map(|i| i >= a.ncols()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
        let (train, test) = stratified_split(a.ncols(), b.ncols(), &mut rng);
        Ok(AdistanceReport::from_error(discriminator_error(&x, &is_target, &train, &test)).d_a)
    })?;
    let error = (1.0 - cc.value / 2.0) / 2.0;
    let report = AdistanceReport {
        d_a: cc.value,
        classifier_test_error: error,
        per_class: Some(cc.per_class.iter().map(|p| (p.class, p.value)).collect()),
    };
    Ok((report, cc))
}
