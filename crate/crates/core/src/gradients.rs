//! Closed-form gradients of the trace statistics with respect to the
//! transformed features, and a central-difference checker.
//!
//! For `L = Tr(M R_X̃)` with `M` fixed and symmetric (`M = S R_Z̃ S` for
//! COND, `M = R_Z` for NOCCO) the chain is
//!
//! ```text
//! R = I - nε C⁻¹,  C = G + nεI      ⇒ ∂L/∂G = nε C⁻¹ M C⁻¹
//! G = H K_X̃ H                       ⇒ ∂L/∂K_X̃ = H (∂L/∂G) H
//! K_X̃ = K_X ∘ K_Y                   ⇒ ∂L/∂K_X = (∂L/∂K_X̃) ∘ K_Y
//! K_X[i,j] = exp(-‖x_i - x_j‖²/σ²)  ⇒ ∂L/∂x_i = -(4/σ²) Σ_j W_ij (x_i - x_j),  W = (∂L/∂K_X) ∘ K_X
//! ```
//!
//! The bandwidth σ² is held constant (fitted once on the input features).

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dependence::{normalized, residual_projector, sandwich, StatBandwidths};
use crate::error::{Error, Result};
use crate::kernel::{
    center_symmetric, gram_from_sq_dists, indicator_gram, normalize, pairwise_sq_dists, product_gram, GramMatrix,
    KernelConfig,
};
use crate::linalg::{all_finite, symmetrize, trace_of_product};
use crate::scalar::Scalar;

/// The fixed part of a trace objective `Tr(M R_X̃)`.
#[derive(Debug, Clone)]
pub struct TraceObjective<T: Scalar> {
    weight: DMatrix<T>,
    label_gram: Option<GramMatrix<T>>,
    kernel: KernelConfig<T>,
    epsilon: T,
}

impl<T: Scalar> TraceObjective<T> {
    /// COND objective `Tr(R_Z̃ S R_X̃ S)`; σ² for the features is fitted on `xre`.
    pub fn cond(xre: &DMatrix<T>, y: &DMatrix<T>, z: &DMatrix<T>, bw: &StatBandwidths<T>, epsilon: T) -> Result<Self> {
        let n = xre.ncols();
        if y.ncols() != n || z.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: if y.ncols() != n { y.ncols() } else { z.ncols() } });
        }
        let kernel = KernelConfig::fit(bw.features, xre)?;
        let ky = indicator_gram(y, bw.labels)?;
        let kz = indicator_gram(z, bw.domains)?;
        let rz = normalized(&product_gram(&kz, &ky)?, epsilon)?;
        let ry = normalized(&ky, epsilon)?;
        let weight = sandwich(&residual_projector(&ry), rz.entries());
        Ok(Self { weight, label_gram: Some(ky), kernel, epsilon })
    }

    /// NOCCO objective `Tr(R_Z R_X)`.
    pub fn nocco(xre: &DMatrix<T>, z: &DMatrix<T>, bw: &StatBandwidths<T>, epsilon: T) -> Result<Self> {
        if z.ncols() != xre.ncols() {
            return Err(Error::DimensionMismatch { expected: xre.ncols(), got: z.ncols() });
        }
        let kernel = KernelConfig::fit(bw.features, xre)?;
        let rz = normalized(&indicator_gram(z, bw.domains)?, epsilon)?;
        Ok(Self { weight: rz.entries().clone(), label_gram: None, kernel, epsilon })
    }

    pub fn kernel(&self) -> &KernelConfig<T> {
        &self.kernel
    }

    fn feature_gram(&self, xre: &DMatrix<T>) -> Result<(GramMatrix<T>, GramMatrix<T>)> {
        if xre.ncols() != self.weight.nrows() {
            return Err(Error::DimensionMismatch { expected: self.weight.nrows(), got: xre.ncols() });
        }
        let kx = gram_from_sq_dists(&pairwise_sq_dists(xre), &self.kernel);
        let kxt = match &self.label_gram {
            Some(ky) => product_gram(&kx, ky)?,
            None => kx.clone(),
        };
        Ok((kx, kxt))
    }

    pub fn value(&self, xre: &DMatrix<T>) -> Result<T> {
        let (_, kxt) = self.feature_gram(xre)?;
        let rx = normalize(&center_symmetric(kxt.entries()), self.epsilon)?;
        Ok(trace_of_product(&self.weight, rx.entries()))
    }

    /// Objective value and its d'×n gradient with respect to `xre`.
    pub fn value_and_gradient(&self, xre: &DMatrix<T>) -> Result<(T, DMatrix<T>)> {
        let (kx, kxt) = self.feature_gram(xre)?;
        let n = xre.ncols();
        let rx = normalize(&center_symmetric(kxt.entries()), self.epsilon)?;
        let value = trace_of_product(&self.weight, rx.entries());
        if !value.is_finite() {
            return Err(Error::numerical("objective value", format!("{value}")));
        }

        let shift = T::from_usize_lossy(n) * self.epsilon;
        // C⁻¹ M C⁻¹ = C⁻¹ (C⁻¹ M)ᵀ for symmetric C and M
        let cm = rx.apply_resolvent(&self.weight);
        let d_g = symmetrize(&rx.apply_resolvent(&cm.transpose())) * shift;
        if !all_finite(&d_g) {
            return Err(Error::numerical("d/dG", "non-finite gradient through the regularised inverse"));
        }
        let mut d_k = center_symmetric(&d_g);
        if let Some(ky) = &self.label_gram {
            d_k.component_mul_assign(ky.entries());
        }
        let w = d_k.component_mul(kx.entries());
        let row_sums: Vec<T> = (0..n).map(|i| w.column(i).iter().fold(T::zero(), |a, &v| a + v)).collect();
        let xw = xre * &w;
        let scale = -T::lit(4.0) / self.kernel.bandwidth_sq();
        let mut grad = DMatrix::<T>::zeros(xre.nrows(), n);
        for j in 0..n {
            for r in 0..xre.nrows() {
                grad[(r, j)] = scale * (xre[(r, j)] * row_sums[j] - xw[(r, j)]);
            }
        }
        if !all_finite(&grad) {
            return Err(Error::numerical("d/dX", "non-finite feature gradient"));
        }
        Ok((value, grad))
    }
}

/// Gradient of `Tr(R_Z̃ S R_X̃ S)` with respect to the transformed features.
pub fn grad_cond_wrt_features<T: Scalar>(
    xre: &DMatrix<T>,
    y: &DMatrix<T>,
    z: &DMatrix<T>,
    bw: &StatBandwidths<T>,
    epsilon: T,
) -> Result<DMatrix<T>> {
    Ok(TraceObjective::cond(xre, y, z, bw, epsilon)?.value_and_gradient(xre)?.1)
}

/// Gradient of `Tr(R_Z R_X)` with respect to the features.
pub fn grad_nocco_wrt_features<T: Scalar>(
    xre: &DMatrix<T>,
    z: &DMatrix<T>,
    bw: &StatBandwidths<T>,
    epsilon: T,
) -> Result<DMatrix<T>> {
    Ok(TraceObjective::nocco(xre, z, bw, epsilon)?.value_and_gradient(xre)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// `‖g_analytic - g_numeric‖∞ / (‖g_analytic‖∞ + 1e-12)` over the probed coordinates,
    /// with the denominator taken over the whole analytic gradient.
    pub max_rel_error: f64,
    pub probes: usize,
    pub step: f64,
}

/// Compares `analytic` with central differences of `objective` at `probes`
/// coordinates drawn without replacement (all of them if `probes` exceeds the count).
pub fn finite_diff_check<T, F>(
    objective: F,
    analytic: &DMatrix<T>,
    x: &DMatrix<T>,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&DMatrix<T>) -> Result<T>,
{
    if probes == 0 {
        return Err(Error::Config("no probes".into()));
    }
    if !(step > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::Shape(format!("gradient {:?} vs point {:?}", analytic.shape(), x.shape())));
    }
    let base = objective(x)?;
    if !base.is_finite() {
        return Err(Error::numerical("finite differences", "objective non-finite at the base point"));
    }
    let total = x.len();
    let count = probes.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, total, count);
    let h = T::lit(step);
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for idx in coords.iter() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = objective(&probe)?;
        probe[idx] = orig - h;
        let down = objective(&probe)?;
        probe[idx] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numerical("finite differences", format!("objective non-finite near coordinate {idx}")));
        }
        let numeric = (up.as_f64() - down.as_f64()) / (2.0 * step);
        worst = worst.max((analytic[idx].as_f64() - numeric).abs());
    }
    Ok(GradCheckReport { max_rel_error: worst / (scale + 1e-12), probes: count, step })
}
