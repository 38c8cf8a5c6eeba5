//! Normalised (conditional) dependence statistics and their permutation nulls.
//!
//! * NOCCO: `Tr(R_Z R_X)`.
//! * COND: `Tr(R_Z̃ S R_X̃ S)` with `S = I - R_Y`, where the extended
//!   variables use product kernels `k_X̃ = k_X k_Y` and `k_Z̃ = k_Z k_Y`.
//! * per-class NOCCO: class-proportion weighted NOCCO within each class.
//!
//! A permutation `π` of the Z samples turns `R_Z` into `P R_Z Pᵀ`, so the
//! permuted statistic is `Σ_ij R_Z[π_i, π_j] M_ij` for a fixed symmetric
//! `M` and costs O(n²) per replicate. For COND the shuffles stay within
//! label classes, which leaves `K_Y` untouched.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{center, fitted_gram, indicator_gram, normalize, product_gram, Bandwidth, GramMatrix, NormalizedGram};
use crate::linalg::{symmetrize, trace_of_product};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DependenceKind {
    Nocco,
    Cond,
    PerClassNocco,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependenceReport<T> {
    pub statistic: T,
    pub kind: DependenceKind,
    pub n: usize,
    pub epsilon: T,
    pub permutation_pvalue: Option<f64>,
    /// Classes left out of a per-class statistic (too few samples or a single domain).
    pub skipped_classes: usize,
}

/// Number of replicates and base seed; replicate `i` draws from seed `seed + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub permutations: usize,
    pub seed: u64,
}

/// Bandwidth choice per variable block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatBandwidths<T> {
    pub features: Bandwidth<T>,
    pub labels: Bandwidth<T>,
    pub domains: Bandwidth<T>,
}

impl<T> Default for StatBandwidths<T> {
    fn default() -> Self {
        Self { features: Bandwidth::MeanSqDist, labels: Bandwidth::MeanSqDist, domains: Bandwidth::MeanSqDist }
    }
}

/// Grams of the extended variables `X̃ = (X, Y)`, `Z̃ = (Z, Y)` and of `Y`.
#[derive(Debug, Clone)]
pub struct ExtendedGrams<T: Scalar> {
    pub kx: GramMatrix<T>,
    pub kz: GramMatrix<T>,
    pub ky: GramMatrix<T>,
    pub kxt: GramMatrix<T>,
    pub kzt: GramMatrix<T>,
}

impl<T: Scalar> ExtendedGrams<T> {
    /// `x` is d×n features, `y` and `z` are indicator (one-hot or soft) matrices.
    pub fn build(x: &DMatrix<T>, y: &DMatrix<T>, z: &DMatrix<T>, bw: &StatBandwidths<T>) -> Result<Self> {
        let n = x.ncols();
        for m in [y, z] {
            if m.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, got: m.ncols() });
            }
        }
        let (kx, _) = fitted_gram(x, bw.features)?;
        let ky = indicator_gram(y, bw.labels)?;
        let kz = indicator_gram(z, bw.domains)?;
        let kxt = product_gram(&kx, &ky)?;
        let kzt = product_gram(&kz, &ky)?;
        Ok(Self { kx, kz, ky, kxt, kzt })
    }
}

fn check_same_n<T: Scalar>(grams: &[&GramMatrix<T>]) -> Result<usize> {
    let n = grams[0].n();
    for g in grams {
        if g.n() != n {
            return Err(Error::DimensionMismatch { expected: n, got: g.n() });
        }
    }
    if n == 0 {
        return Err(Error::Input("statistic of zero samples".into()));
    }
    Ok(n)
}

fn check_epsilon<T: Scalar>(epsilon: T) -> Result<()> {
    if !(epsilon > T::zero()) || !epsilon.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    Ok(())
}

pub(crate) fn normalized<T: Scalar>(k: &GramMatrix<T>, epsilon: T) -> Result<NormalizedGram<T>> {
    normalize(&center(k), epsilon)
}

/// `S = I - R_Y`.
pub(crate) fn residual_projector<T: Scalar>(ry: &NormalizedGram<T>) -> DMatrix<T> {
    let n = ry.n();
    DMatrix::<T>::identity(n, n) - ry.entries()
}

/// `S A S`, exactly symmetric.
pub(crate) fn sandwich<T: Scalar>(s: &DMatrix<T>, a: &DMatrix<T>) -> DMatrix<T> {
    symmetrize(&(s * (a * s)))
}

fn report<T: Scalar>(statistic: T, kind: DependenceKind, n: usize, epsilon: T) -> Result<DependenceReport<T>> {
    if !statistic.is_finite() {
        return Err(Error::numerical("statistic", format!("{kind:?} evaluated to {statistic}")));
    }
    Ok(DependenceReport { statistic, kind, n, epsilon, permutation_pvalue: None, skipped_classes: 0 })
}

/// `Tr(R_Z R_X)`.
pub fn nocco<T: Scalar>(kx: &GramMatrix<T>, kz: &GramMatrix<T>, epsilon: T) -> Result<DependenceReport<T>> {
    check_epsilon(epsilon)?;
    let n = check_same_n(&[kx, kz])?;
    let rz = normalized(kz, epsilon)?;
    let rx = normalized(kx, epsilon)?;
    report(trace_of_product(rz.entries(), rx.entries()), DependenceKind::Nocco, n, epsilon)
}

/// `Tr(R_Z̃ S R_X̃ S)` for already-extended Grams `kxt`, `kzt`.
pub fn cond<T: Scalar>(
    kxt: &GramMatrix<T>,
    kzt: &GramMatrix<T>,
    ky: &GramMatrix<T>,
    epsilon: T,
) -> Result<DependenceReport<T>> {
    check_epsilon(epsilon)?;
    let n = check_same_n(&[kxt, kzt, ky])?;
    let rz = normalized(kzt, epsilon)?;
    let rx = normalized(kxt, epsilon)?;
    let ry = normalized(ky, epsilon)?;
    let s = residual_projector(&ry);
    // Tr(R_Z̃ S · R_X̃ S) via two products and an O(n²) trace
    let left = rz.entries() * &s;
    let right = rx.entries() * &s;
    report(trace_of_product(&left, &right), DependenceKind::Cond, n, epsilon)
}

/// Class members in ascending class order; empty classes are omitted.
pub(crate) fn class_members(labels: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    members.into_iter().enumerate().filter(|(_, m)| !m.is_empty()).collect()
}

fn is_constant<T: Scalar>(k: &GramMatrix<T>) -> bool {
    let first = k.entries()[(0, 0)];
    k.entries().iter().all(|&v| v == first)
}

struct ClassBlock<T: Scalar> {
    idx: Vec<usize>,
    weight: T,
    kx: GramMatrix<T>,
    kz: GramMatrix<T>,
}

fn per_class_blocks<T: Scalar>(
    kx: &GramMatrix<T>,
    kz: &GramMatrix<T>,
    labels: &[usize],
) -> Result<(Vec<ClassBlock<T>>, usize)> {
    let n = check_same_n(&[kx, kz])?;
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: labels.len() });
    }
    let mut blocks = Vec::new();
    let mut skipped = 0;
    for (_, idx) in class_members(labels) {
        if idx.len() < 2 {
            skipped += 1;
            continue;
        }
        let kz_c = kz.restrict(&idx);
        // a constant domain kernel means only one domain is present in this class
        if is_constant(&kz_c) {
            skipped += 1;
            continue;
        }
        blocks.push(ClassBlock { kx: kx.restrict(&idx), kz: kz_c, idx, weight: T::zero() });
    }
    if blocks.is_empty() {
        return Err(Error::Degenerate("every class was skipped in per-class NOCCO".into()));
    }
    let total = T::from_usize_lossy(blocks.iter().map(|b| b.idx.len()).sum());
    for b in &mut blocks {
        b.weight = T::from_usize_lossy(b.idx.len()) / total;
    }
    Ok((blocks, skipped))
}

/// `Σ_c w_c · Tr(R_Z,c R_X,c)` with `w_c = n_c / Σ n_c` over the classes that are kept.
pub fn per_class_nocco<T: Scalar>(
    kx: &GramMatrix<T>,
    kz: &GramMatrix<T>,
    labels: &[usize],
    epsilon: T,
) -> Result<DependenceReport<T>> {
    check_epsilon(epsilon)?;
    let (blocks, skipped) = per_class_blocks(kx, kz, labels)?;
    let mut statistic = T::zero();
    for b in &blocks {
        statistic += b.weight * nocco(&b.kx, &b.kz, epsilon)?.statistic;
    }
    let mut r = report(statistic, DependenceKind::PerClassNocco, labels.len(), epsilon)?;
    r.skipped_classes = skipped;
    Ok(r)
}

/// `Tr(P R Pᵀ M)` for symmetric `M`, where `(P R Pᵀ)_ij = R[π_i, π_j]`.
fn permuted_trace<T: Scalar>(r: &DMatrix<T>, m: &DMatrix<T>, perm: &[usize]) -> T {
    let n = perm.len();
    let mut acc = T::zero();
    for j in 0..n {
        let col = r.column(perm[j]);
        for i in 0..n {
            acc += col[perm[i]] * m[(i, j)];
        }
    }
    acc
}

/// Shuffles positions within each stratum; strata given as index lists.
fn stratified_permutation(strata: &[Vec<usize>], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for idx in strata {
        let mut shuffled = idx.clone();
        shuffled.shuffle(rng);
        for (&dst, &src) in idx.iter().zip(&shuffled) {
            perm[dst] = src;
        }
    }
    perm
}

/// `(1 + #{null ≥ observed}) / (1 + P)`.
fn pvalue<T: Scalar>(observed: T, null: impl Iterator<Item = T>, permutations: usize) -> f64 {
    let exceed = null.filter(|&v| v >= observed).count();
    (1 + exceed) as f64 / (1 + permutations) as f64
}

/// Permutation null sample of a trace statistic `Σ_b w_b Tr(P_b R_b P_bᵀ M_b)`.
struct TraceNull<T: Scalar> {
    parts: Vec<(T, DMatrix<T>, DMatrix<T>)>,
    strata: Vec<Vec<usize>>,
}

impl<T: Scalar> TraceNull<T> {
    fn evaluate(&self, perms: &[Vec<usize>]) -> T {
        let mut acc = T::zero();
        for ((w, r, m), perm) in self.parts.iter().zip(perms) {
            acc += *w * permuted_trace(r, m, perm);
        }
        acc
    }

    fn observed(&self) -> T {
        let ident: Vec<Vec<usize>> = self.parts.iter().map(|(_, r, _)| (0..r.nrows()).collect()).collect();
        self.evaluate(&ident)
    }

    /// One value per replicate; replicate `i` is seeded with `seed + i`.
    fn sample(&self, test: &PermutationTest) -> Vec<T> {
        (0..test.permutations)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(test.seed.wrapping_add(i as u64));
                let perms: Vec<Vec<usize>> = self
                    .parts
                    .iter()
                    .zip(&self.strata_per_part())
                    .map(|((_, r, _), strata)| stratified_permutation(strata, r.nrows(), &mut rng))
                    .collect();
                self.evaluate(&perms)
            })
            .collect()
    }

    fn strata_per_part(&self) -> Vec<Vec<Vec<usize>>> {
        if self.parts.len() == 1 {
            vec![self.strata.clone()]
        } else {
            // per-class parts: each part is one class, shuffled as a whole
            self.parts.iter().map(|(_, r, _)| vec![(0..r.nrows()).collect()]).collect()
        }
    }
}

/// Permutation null values of a statistic together with its p-value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NullSample<T> {
    pub observed: T,
    pub null: Vec<T>,
    pub pvalue: f64,
}

impl<T: Scalar> NullSample<T> {
    /// Empirical `q`-quantile of the null (nearest rank).
    pub fn quantile(&self, q: f64) -> T {
        let mut v = self.null.clone();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite null statistics"));
        let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    }
}

fn run_null<T: Scalar>(null: TraceNull<T>, test: &PermutationTest) -> Result<NullSample<T>> {
    if test.permutations == 0 {
        return Err(Error::Config("permutation test needs at least one permutation".into()));
    }
    let observed = null.observed();
    let values = null.sample(test);
    let p = pvalue(observed, values.iter().copied(), test.permutations);
    Ok(NullSample { observed, null: values, pvalue: p })
}

/// NOCCO null: all Z columns shuffled.
pub fn nocco_null<T: Scalar>(
    kx: &GramMatrix<T>,
    kz: &GramMatrix<T>,
    epsilon: T,
    test: &PermutationTest,
) -> Result<NullSample<T>> {
    check_epsilon(epsilon)?;
    let n = check_same_n(&[kx, kz])?;
    let rz = normalized(kz, epsilon)?;
    let rx = normalized(kx, epsilon)?;
    let null = TraceNull { parts: vec![(T::one(), rz.entries().clone(), rx.entries().clone())], strata: vec![(0..n).collect()] };
    run_null(null, test)
}

/// COND null: Z columns shuffled within each label class.
///
/// `labels` must be the classes that generated `ky`, so that a within-class
/// permutation leaves `K_Y` unchanged.
pub fn cond_null<T: Scalar>(
    kxt: &GramMatrix<T>,
    kzt: &GramMatrix<T>,
    ky: &GramMatrix<T>,
    labels: &[usize],
    epsilon: T,
    test: &PermutationTest,
) -> Result<NullSample<T>> {
    check_epsilon(epsilon)?;
    let n = check_same_n(&[kxt, kzt, ky])?;
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: labels.len() });
    }
    let rz = normalized(kzt, epsilon)?;
    let rx = normalized(kxt, epsilon)?;
    let ry = normalized(ky, epsilon)?;
    let m = sandwich(&residual_projector(&ry), rx.entries());
    let strata = class_members(labels).into_iter().map(|(_, idx)| idx).collect();
    run_null(TraceNull { parts: vec![(T::one(), rz.entries().clone(), m)], strata }, test)
}

/// Per-class NOCCO null: Z shuffled within each retained class.
pub fn per_class_nocco_null<T: Scalar>(
    kx: &GramMatrix<T>,
    kz: &GramMatrix<T>,
    labels: &[usize],
    epsilon: T,
    test: &PermutationTest,
) -> Result<NullSample<T>> {
    check_epsilon(epsilon)?;
    let (blocks, _) = per_class_blocks(kx, kz, labels)?;
    let mut parts = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let rz = normalized(&b.kz, epsilon)?;
        let rx = normalized(&b.kx, epsilon)?;
        parts.push((b.weight, rz.entries().clone(), rx.entries().clone()));
    }
    run_null(TraceNull { parts, strata: Vec::new() }, test)
}

/// Runs the statistic and attaches its permutation p-value.
pub fn nocco_test<T: Scalar>(
    kx: &GramMatrix<T>,
    kz: &GramMatrix<T>,
    epsilon: T,
    test: &PermutationTest,
) -> Result<DependenceReport<T>> {
    let mut r = nocco(kx, kz, epsilon)?;
    r.permutation_pvalue = Some(nocco_null(kx, kz, epsilon, test)?.pvalue);
    Ok(r)
}

pub fn cond_test<T: Scalar>(
    grams: &ExtendedGrams<T>,
    labels: &[usize],
    epsilon: T,
    test: &PermutationTest,
) -> Result<DependenceReport<T>> {
    let mut r = cond(&grams.kxt, &grams.kzt, &grams.ky, epsilon)?;
    r.permutation_pvalue = Some(cond_null(&grams.kxt, &grams.kzt, &grams.ky, labels, epsilon, test)?.pvalue);
    Ok(r)
}

pub fn per_class_nocco_test<T: Scalar>(
    kx: &GramMatrix<T>,
    kz: &GramMatrix<T>,
    labels: &[usize],
    epsilon: T,
    test: &PermutationTest,
) -> Result<DependenceReport<T>> {
    let mut r = per_class_nocco(kx, kz, labels, epsilon)?;
    r.permutation_pvalue = Some(per_class_nocco_null(kx, kz, labels, epsilon, test)?.pvalue);
    Ok(r)
}

/// Regularisation schedule `ε_n` for consistency studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EpsilonSchedule {
    /// `scale · n^(-exponent)`.
    Power { scale: f64, exponent: f64 },
    Constant(f64),
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule::Power { scale: 1.0, exponent: 0.25 }
    }
}

impl EpsilonSchedule {
    pub fn epsilon(&self, n: usize) -> f64 {
        match *self {
            EpsilonSchedule::Power { scale, exponent } => scale * (n as f64).powf(-exponent),
            EpsilonSchedule::Constant(e) => e,
        }
    }

    /// `ε_n → 0` and `ε_n³ n → ∞`.
    pub fn is_consistent(&self) -> bool {
        match *self {
            EpsilonSchedule::Power { scale, exponent } => scale > 0.0 && exponent > 0.0 && 3.0 * exponent < 1.0,
            EpsilonSchedule::Constant(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergencePoint<T> {
    pub n: usize,
    pub epsilon: f64,
    pub statistic: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceProbe<T> {
    pub points: Vec<ConvergencePoint<T>>,
    pub warnings: Vec<String>,
}

/// A draw of `(X, Y, Z)` with `n` samples: features, label and domain indicators.
pub type CondSample<T> = (DMatrix<T>, DMatrix<T>, DMatrix<T>);

/// COND statistic at each sample size under the schedule `ε_n`.
pub fn convergence_probe<T, F>(
    mut generator: F,
    sizes: &[usize],
    schedule: EpsilonSchedule,
    bw: &StatBandwidths<T>,
) -> Result<ConvergenceProbe<T>>
where
    T: Scalar,
    F: FnMut(usize) -> Result<CondSample<T>>,
{
    let mut warnings = Vec::new();
    if !schedule.is_consistent() {
        warnings.push(format!("schedule {schedule:?} does not satisfy ε_n → 0 with ε_n³·n → ∞"));
    }
    let mut points = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let (x, y, z) = generator(n)?;
        let grams = ExtendedGrams::build(&x, &y, &z, bw)?;
        let eps = schedule.epsilon(n);
        let stat = cond(&grams.kxt, &grams.kzt, &grams.ky, T::lit(eps))?.statistic;
        points.push(ConvergencePoint { n, epsilon: eps, statistic: stat });
    }
    Ok(ConvergenceProbe { points, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelConfig;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(d: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(d, n, |_, _| StandardNormal.sample(rng))
    }

    fn gram_of(x: &DMatrix<f64>) -> GramMatrix<f64> {
        fitted_gram(x, Bandwidth::MeanSqDist).unwrap().0
    }

    fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(k, labels.len(), |r, c| if labels[c] == r { 1.0 } else { 0.0 })
    }

    fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
        m.clone().symmetric_eigen().eigenvalues.iter().copied().collect()
    }

    #[test]
    fn nocco_self_dependence_is_squared_frobenius() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = gram_of(&randn(2, 40, &mut rng));
        let eps = 1e-2;
        let stat = nocco(&k, &k, eps).unwrap().statistic;
        let lam = eigenvalues(&center(&k));
        let oracle: f64 = lam.iter().map(|&l| l.max(0.0)).map(|l| (l / (l + 40.0 * eps)).powi(2)).sum();
        assert!((stat - oracle).abs() < 1e-9 * oracle, "{stat} vs {oracle}");
        assert!(stat > 0.0);
    }

    #[test]
    fn nocco_two_sample_closed_form() {
        let a = 0.4f64;
        let eps = 0.03;
        let k = GramMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, a, a, 1.0])).unwrap();
        let stat = nocco(&k, &k, eps).unwrap().statistic;
        let lam = 1.0 - a;
        let expected = (lam / (lam + 2.0 * eps)).powi(2);
        assert!((stat - expected).abs() < 1e-14);
    }

    #[test]
    fn nocco_errors() {
        let a = GramMatrix::<f64>::constant(3);
        let b = GramMatrix::<f64>::constant(4);
        assert!(matches!(nocco(&a, &b, 0.1), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(nocco(&a, &a, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn cond_with_constant_labels_equals_nocco() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kx = gram_of(&randn(3, 50, &mut rng));
        let kz = gram_of(&randn(1, 50, &mut rng));
        let ky = GramMatrix::constant(50);
        let kxt = product_gram(&kx, &ky).unwrap();
        let kzt = product_gram(&kz, &ky).unwrap();
        let c = cond(&kxt, &kzt, &ky, 1e-3).unwrap().statistic;
        let d = nocco(&kx, &kz, 1e-3).unwrap().statistic;
        assert!((c - d).abs() <= 1e-8 * d);
    }

    #[test]
    fn cond_matches_direct_matrix_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 30;
        let eps = 0.01;
        let kx = gram_of(&randn(2, n, &mut rng));
        let kz = gram_of(&randn(2, n, &mut rng));
        let ky = gram_of(&randn(1, n, &mut rng));
        // oracle: explicit LU inverse and full products
        let r = |k: &GramMatrix<f64>| {
            let g = center(k);
            let inv = (&g + DMatrix::identity(n, n) * (n as f64 * eps)).lu().try_inverse().unwrap();
            &g * inv
        };
        let s = DMatrix::identity(n, n) - r(&ky);
        let oracle = (r(&kz) * &s * r(&kx) * &s).trace();
        let stat = cond(&kx, &kz, &ky, eps).unwrap().statistic;
        assert!((stat - oracle).abs() < 1e-10 * oracle.abs().max(1.0));
    }

    #[test]
    fn cond_identical_triple_bounded_by_nocco() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let k = gram_of(&randn(2, 35, &mut rng));
            let c = cond(&k, &k, &k, 1e-2).unwrap().statistic;
            let d = nocco(&k, &k, 1e-2).unwrap().statistic;
            assert!(c <= d && c >= -1e-10, "{c} {d}");
        }
    }

    #[test]
    fn cond_constant_domain_vanishes_with_epsilon() {
        // Z constant: R_Z̃ = R_Y, and the residual Tr(R_Y S R_X̃ S) is bounded by Σ μ(1-μ)²
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = randn(2, n, &mut rng);
        let z = DMatrix::from_fn(2, n, |r, _| if r == 0 { 1.0 } else { 0.0 });
        let bw = StatBandwidths::default();
        let g = ExtendedGrams::build(&x, &one_hot(&labels, 3), &z, &bw).unwrap();
        let mut last = f64::INFINITY;
        for &eps in &[1e-2, 1e-3, 1e-4, 1e-5] {
            let stat = cond(&g.kxt, &g.kzt, &g.ky, eps).unwrap().statistic;
            let mu: Vec<f64> = eigenvalues(&center(&g.ky)).iter().map(|&l| l.max(0.0) / (l.max(0.0) + n as f64 * eps)).collect();
            let bound: f64 = mu.iter().map(|m| m * (1.0 - m).powi(2)).sum();
            assert!(stat >= -1e-12 && stat <= bound + 1e-12, "eps {eps}: {stat} > {bound}");
            assert!(stat < last);
            last = stat;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn per_class_single_class_is_plain_nocco() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let kx = gram_of(&randn(2, 30, &mut rng));
        let kz = gram_of(&randn(1, 30, &mut rng));
        let labels = vec![2; 30];
        let a = per_class_nocco(&kx, &kz, &labels, 0.01).unwrap();
        let b = nocco(&kx, &kz, 0.01).unwrap();
        assert_eq!(a.statistic, b.statistic);
        assert_eq!(a.skipped_classes, 0);
    }

    #[test]
    fn per_class_weights_and_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| if i < 25 { 0 } else if i < 39 { 1 } else { 2 }).collect();
        let domains: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let kx = gram_of(&randn(2, n, &mut rng));
        let kz = indicator_gram(&one_hot(&domains, 2), Bandwidth::MeanSqDist).unwrap();
        let r = per_class_nocco(&kx, &kz, &labels, 0.05).unwrap();
        assert_eq!(r.skipped_classes, 1);
        let idx0: Vec<usize> = (0..25).collect();
        let idx1: Vec<usize> = (25..39).collect();
        let s0 = nocco(&kx.restrict(&idx0), &kz.restrict(&idx0), 0.05).unwrap().statistic;
        let s1 = nocco(&kx.restrict(&idx1), &kz.restrict(&idx1), 0.05).unwrap().statistic;
        let (w0, w1): (f64, f64) = (25.0 / 39.0, 14.0 / 39.0);
        assert!((w0 + w1 - 1.0f64).abs() < 1e-15);
        assert!((r.statistic - (w0 * s0 + w1 * s1)).abs() < 1e-14);

        // single-domain classes are skipped; all skipped is an error
        let kz_const = GramMatrix::constant(n);
        assert!(matches!(per_class_nocco(&kx, &kz_const, &labels, 0.05), Err(Error::Degenerate(_))));
    }

    #[test]
    fn permutation_identity_reproduces_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 45;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let domains: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let x = randn(2, n, &mut rng);
        let g = ExtendedGrams::build(&x, &one_hot(&labels, 3), &one_hot(&domains, 2), &StatBandwidths::default()).unwrap();
        let t = PermutationTest { permutations: 20, seed: 3 };
        let null = cond_null(&g.kxt, &g.kzt, &g.ky, &labels, 0.01, &t).unwrap();
        let direct = cond(&g.kxt, &g.kzt, &g.ky, 0.01).unwrap().statistic;
        assert!((null.observed - direct).abs() < 1e-10 * direct.abs().max(1e-3));
        assert!(null.pvalue > 0.0 && null.pvalue <= 1.0);
        // deterministic in the seed
        let again = cond_null(&g.kxt, &g.kzt, &g.ky, &labels, 0.01, &t).unwrap();
        assert_eq!(null, again);
    }

    #[test]
    fn permuted_trace_matches_recomputation() {
        // the O(n²) shortcut equals rebuilding the statistic on permuted Z
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 36;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let domains: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let x = randn(2, n, &mut rng);
        let y = one_hot(&labels, 3);
        let strata: Vec<Vec<usize>> = class_members(&labels).into_iter().map(|(_, i)| i).collect();
        let perm = stratified_permutation(&strata, n, &mut rng);
        let permuted_domains: Vec<usize> = perm.iter().map(|&p| domains[p]).collect();
        let bw = StatBandwidths::default();
        let g = ExtendedGrams::build(&x, &y, &one_hot(&domains, 2), &bw).unwrap();
        let gp = ExtendedGrams::build(&x, &y, &one_hot(&permuted_domains, 2), &bw).unwrap();
        let rebuilt = cond(&gp.kxt, &gp.kzt, &gp.ky, 0.02).unwrap().statistic;
        let rz = normalized(&g.kzt, 0.02).unwrap();
        let m = sandwich(&residual_projector(&normalized(&g.ky, 0.02).unwrap()), normalized(&g.kxt, 0.02).unwrap().entries());
        let shortcut = permuted_trace(rz.entries(), &m, &perm);
        assert!((rebuilt - shortcut).abs() < 1e-10 * rebuilt.abs().max(1e-3), "{rebuilt} vs {shortcut}");
    }

    #[test]
    fn nocco_independent_below_null_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 500;
        let kx = gram_of(&randn(2, n, &mut rng));
        let kz = gram_of(&randn(2, n, &mut rng));
        let null = nocco_null(&kx, &kz, 1e-2, &PermutationTest { permutations: 500, seed: 1 }).unwrap();
        assert!(null.observed < null.quantile(0.95), "p = {}", null.pvalue);
    }

    #[test]
    fn per_class_removes_prior_shift_dependence() {
        // class proportions differ by domain; features depend only on class
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n = 300;
        let domains: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let labels: Vec<usize> = domains.iter().map(|&d| if rng.random::<f64>() < if d == 0 { 0.8 } else { 0.2 } { 0 } else { 1 }).collect();
        let x = DMatrix::from_fn(2, n, |r, c| {
            let mu = if r == 0 { 4.0 * labels[c] as f64 } else { 0.0 };
            let e: f64 = StandardNormal.sample(&mut rng);
            mu + e
        });
        let kx = gram_of(&x);
        let kz = indicator_gram(&one_hot(&domains, 2), Bandwidth::MeanSqDist).unwrap();
        let test = PermutationTest { permutations: 200, seed: 5 };
        let per_class = per_class_nocco_null(&kx, &kz, &labels, 1e-2, &test).unwrap();
        let plain = nocco_null(&kx, &kz, 1e-2, &test).unwrap();
        assert!(per_class.observed < per_class.quantile(0.95));
        assert!(plain.pvalue <= 1.0 / 201.0 + 1e-12, "plain p = {}", plain.pvalue);
    }

    #[test]
    fn statistics_decrease_with_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(2, 80, &mut rng);
        let z = DMatrix::from_fn(1, 80, |_, c| x[(0, c)]) + randn(1, 80, &mut rng) * 0.5;
        let kx = gram_of(&x);
        let kz = gram_of(&z);
        let mut last = f64::INFINITY;
        for &eps in &[1e-3, 1e-2, 1e-1, 1.0] {
            let s = nocco(&kx, &kz, eps).unwrap().statistic;
            assert!(s < last);
            last = s;
        }
    }

    #[test]
    fn schedule_consistency() {
        assert!(EpsilonSchedule::default().is_consistent());
        assert!(!EpsilonSchedule::Power { scale: 1.0, exponent: 0.5 }.is_consistent());
        assert!(!EpsilonSchedule::Constant(0.1).is_consistent());
        assert!((EpsilonSchedule::default().epsilon(16) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn probe_flags_inconsistent_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let probe = convergence_probe(
            |n| {
                let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
                Ok((randn(2, n, &mut rng), one_hot(&labels, 2), one_hot(&labels.iter().map(|&l| 1 - l).collect::<Vec<_>>(), 2)))
            },
            &[20, 40],
            EpsilonSchedule::Constant(0.1),
            &StatBandwidths::default(),
        )
        .unwrap();
        assert_eq!(probe.points.len(), 2);
        assert_eq!(probe.warnings.len(), 1);
    }

    #[test]
    fn fixed_kernel_config_is_usable() {
        let cfg = KernelConfig::fixed(1.0).unwrap();
        let k = crate::kernel::gram(&DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 3.0]), &cfg).unwrap();
        assert!(nocco(&k, &k, 0.1).unwrap().statistic > 0.0);
    }
}
