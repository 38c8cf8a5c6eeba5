//! Gaussian kernels, Gram matrices, centering and regularised normalisation.
//!
//! Feature matrices hold one sample per column. A Gram matrix is built by
//! evaluating each pair once and mirroring it, so `K_ij == K_ji` holds
//! bit-for-bit. The normalised Gram `R = G (G + nεI)⁻¹` maps each
//! eigenvalue `λ ≥ 0` of the centred Gram `G` to `λ / (λ + nε)`.

use nalgebra::{DMatrix, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, symmetrize, SpdFactor};
use crate::scalar::Scalar;

/// How a kernel bandwidth was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// σ² is the mean of all pairwise squared distances (self-pairs included).
    MeanSqDist,
    Fixed,
}

/// Requested bandwidth, resolved against data by [`KernelConfig::fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth<T> {
    MeanSqDist,
    Fixed(T),
}

impl<T> Bandwidth<T> {
    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> Bandwidth<U> {
        match self {
            Bandwidth::MeanSqDist => Bandwidth::MeanSqDist,
            Bandwidth::Fixed(v) => Bandwidth::Fixed(f(v)),
        }
    }
}

impl<T> Default for Bandwidth<T> {
    fn default() -> Self {
        Bandwidth::MeanSqDist
    }
}

/// A resolved Gaussian kernel `k(x, y) = exp(-‖x - y‖² / σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig<T> {
    bandwidth_sq: T,
    rule: BandwidthRule,
}

impl<T: Scalar> KernelConfig<T> {
    pub fn fixed(bandwidth_sq: T) -> Result<Self> {
        if !(bandwidth_sq > T::zero()) || !bandwidth_sq.is_finite() {
            return Err(Error::Config(format!("bandwidth σ² must be positive and finite, got {bandwidth_sq}")));
        }
        Ok(Self { bandwidth_sq, rule: BandwidthRule::Fixed })
    }

    pub fn mean_sq_dist(x: &DMatrix<T>) -> Result<Self> {
        let bandwidth_sq = mean_sq_dist_bandwidth(x)?;
        Ok(Self { bandwidth_sq, rule: BandwidthRule::MeanSqDist })
    }

    pub fn fit(bandwidth: Bandwidth<T>, x: &DMatrix<T>) -> Result<Self> {
        match bandwidth {
            Bandwidth::MeanSqDist => Self::mean_sq_dist(x),
            Bandwidth::Fixed(v) => Self::fixed(v),
        }
    }

    pub fn bandwidth_sq(&self) -> T {
        self.bandwidth_sq
    }

    pub fn rule(&self) -> BandwidthRule {
        self.rule
    }
}

/// `exp(-‖x - y‖² / σ²)`.
pub fn gaussian_kernel<T: Scalar>(x: &[T], y: &[T], cfg: &KernelConfig<T>) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if !(cfg.bandwidth_sq > T::zero()) {
        return Err(Error::Config(format!("bandwidth σ² must be positive, got {}", cfg.bandwidth_sq)));
    }
    let d2 = x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok((-d2 / cfg.bandwidth_sq).exp())
}

fn column_sq_dist<T: Scalar>(a: DVectorView<'_, T>, b: DVectorView<'_, T>) -> T {
    let mut acc = T::zero();
    for k in 0..a.len() {
        let diff = a[k] - b[k];
        acc += diff * diff;
    }
    acc
}

/// Symmetric matrix of pairwise squared Euclidean distances between columns.
pub fn pairwise_sq_dists<T: Scalar>(x: &DMatrix<T>) -> DMatrix<T> {
    let n = x.ncols();
    let mut d = DMatrix::<T>::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = column_sq_dist(x.column(i), x.column(j));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

fn mean_of_sq_dists<T: Scalar>(d: &DMatrix<T>) -> Result<T> {
    let n = d.nrows();
    if n < 2 {
        return Err(Error::Degenerate(format!("bandwidth needs at least 2 samples, got {n}")));
    }
    // off-diagonal pairs counted twice, self-pairs contribute zero
    let mut acc = T::zero();
    for j in 0..n {
        for i in (j + 1)..n {
            acc += d[(i, j)];
        }
    }
    let nn = T::from_usize_lossy(n);
    let mean = (acc + acc) / (nn * nn);
    if !(mean > T::zero()) {
        return Err(Error::Degenerate("all samples identical, bandwidth would be zero".into()));
    }
    if !mean.is_finite() {
        return Err(Error::numerical("bandwidth", "non-finite mean squared distance"));
    }
    Ok(mean)
}

/// Mean of all `n²` pairwise squared distances, `(1/n²) Σ_ij ‖x_i - x_j‖²`.
pub fn mean_sq_dist_bandwidth<T: Scalar>(x: &DMatrix<T>) -> Result<T> {
    mean_of_sq_dists(&pairwise_sq_dists(x))
}

/// Symmetric positive semi-definite kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T: Scalar> {
    entries: DMatrix<T>,
}

impl<T: Scalar> GramMatrix<T> {
    /// Wraps a precomputed kernel matrix after checking squareness and exact symmetry.
    pub fn from_matrix(entries: DMatrix<T>) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::Shape(format!("gram matrix must be square, got {:?}", entries.shape())));
        }
        let n = entries.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                if entries[(i, j)] != entries[(j, i)] {
                    return Err(Error::Input(format!("gram matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { entries })
    }

    /// All-ones Gram, the kernel of a constant variable under any Gaussian bandwidth.
    pub fn constant(n: usize) -> Self {
        Self { entries: DMatrix::from_element(n, n, T::one()) }
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.entries
    }

    /// Rows and columns `idx`, in that order.
    pub fn restrict(&self, idx: &[usize]) -> Self {
        let m = idx.len();
        let entries = DMatrix::from_fn(m, m, |i, j| self.entries[(idx[i], idx[j])]);
        Self { entries }
    }

    /// `K[π(i), π(j)]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        self.restrict(perm)
    }
}

/// Gaussian Gram matrix of the columns of `x`.
pub fn gram<T: Scalar>(x: &DMatrix<T>, cfg: &KernelConfig<T>) -> Result<GramMatrix<T>> {
    if x.ncols() == 0 {
        return Err(Error::Input("gram of an empty sample set".into()));
    }
    Ok(gram_from_sq_dists(&pairwise_sq_dists(x), cfg))
}

pub(crate) fn gram_from_sq_dists<T: Scalar>(d: &DMatrix<T>, cfg: &KernelConfig<T>) -> GramMatrix<T> {
    let n = d.nrows();
    let mut k = DMatrix::<T>::identity(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = (-d[(i, j)] / cfg.bandwidth_sq).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    GramMatrix { entries: k }
}

/// Fits the bandwidth and builds the Gram in one pass over the distances.
pub fn fitted_gram<T: Scalar>(x: &DMatrix<T>, bandwidth: Bandwidth<T>) -> Result<(GramMatrix<T>, KernelConfig<T>)> {
    if x.ncols() == 0 {
        return Err(Error::Input("gram of an empty sample set".into()));
    }
    let d = pairwise_sq_dists(x);
    let cfg = match bandwidth {
        Bandwidth::MeanSqDist => KernelConfig { bandwidth_sq: mean_of_sq_dists(&d)?, rule: BandwidthRule::MeanSqDist },
        Bandwidth::Fixed(v) => KernelConfig::fixed(v)?,
    };
    Ok((gram_from_sq_dists(&d, &cfg), cfg))
}

/// Gram for an indicator block (labels or domains).
///
/// When every column is identical the Gaussian kernel is the all-ones matrix
/// for every bandwidth, so the mean-distance rule falls back to it instead of
/// failing.
pub fn indicator_gram<T: Scalar>(x: &DMatrix<T>, bandwidth: Bandwidth<T>) -> Result<GramMatrix<T>> {
    match fitted_gram(x, bandwidth) {
        Ok((k, _)) => Ok(k),
        Err(Error::Degenerate(_)) => Ok(GramMatrix::constant(x.ncols())),
        Err(e) => Err(e),
    }
}

/// Elementwise (Schur) product, the Gram of the product kernel.
pub fn product_gram<T: Scalar>(a: &GramMatrix<T>, b: &GramMatrix<T>) -> Result<GramMatrix<T>> {
    if a.n() != b.n() {
        return Err(Error::DimensionMismatch { expected: a.n(), got: b.n() });
    }
    Ok(GramMatrix { entries: a.entries.component_mul(&b.entries) })
}

/// `H K H` with `H = I - 11ᵀ/n`.
pub fn center<T: Scalar>(k: &GramMatrix<T>) -> DMatrix<T> {
    center_symmetric(&k.entries)
}

/// Double centring of a symmetric matrix, evaluated on one triangle.
pub fn center_symmetric<T: Scalar>(k: &DMatrix<T>) -> DMatrix<T> {
    let n = k.nrows();
    let nn = T::from_usize_lossy(n);
    let means: Vec<T> = (0..n).map(|i| k.row(i).iter().fold(T::zero(), |a, &v| a + v) / nn).collect();
    let grand = means.iter().fold(T::zero(), |a, &v| a + v) / nn;
    let mut g = DMatrix::<T>::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = k[(i, j)] - means[i] - means[j] + grand;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// `R = G (G + nεI)⁻¹` together with the resolvent `(G + nεI)⁻¹` used by gradients.
#[derive(Debug, Clone)]
pub struct NormalizedGram<T: Scalar> {
    entries: DMatrix<T>,
    resolvent: SpdFactor<T>,
    epsilon: T,
}

impl<T: Scalar> NormalizedGram<T> {
    pub fn entries(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// `(G + nεI)⁻¹`.
    pub fn resolvent(&self) -> DMatrix<T> {
        self.resolvent.inverse()
    }

    /// `(G + nεI)⁻¹ B`.
    pub fn apply_resolvent(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.resolvent.solve(b)
    }
}

/// Regularised normalisation of a symmetric (typically centred) Gram matrix.
pub fn normalize<T: Scalar>(g: &DMatrix<T>, epsilon: T) -> Result<NormalizedGram<T>> {
    if !(epsilon > T::zero()) || !epsilon.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    if !g.is_square() {
        return Err(Error::Shape(format!("normalize needs a square matrix, got {:?}", g.shape())));
    }
    if !all_finite(g) {
        return Err(Error::numerical("normalize", "non-finite entries in centred gram"));
    }
    let n = g.nrows();
    let shift = T::from_usize_lossy(n) * epsilon;
    let mut shifted = g.clone();
    for i in 0..n {
        shifted[(i, i)] += shift;
    }
    let resolvent = SpdFactor::new(&shifted)?;
    // (G + nεI)⁻¹ G is the transpose of R; symmetrising removes round-off asymmetry
    let entries = symmetrize(&resolvent.solve(g));
    if !all_finite(&entries) {
        return Err(Error::numerical("normalize", "non-finite normalised gram"));
    }
    Ok(NormalizedGram { entries, resolvent, epsilon })
}
