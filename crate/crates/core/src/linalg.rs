//! Dense symmetric helpers built on nalgebra.
//!
//! The regularised normalisation needs `(G + nεI)⁻¹` applied to
//! matrices of size n ≈ 10³. nalgebra's column-by-column triangular
//! solves are slow at that size, so the factor is inverted with a
//! recursive block scheme that pushes nearly all work into gemm.

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const BLOCK: usize = 64;

/// Inverse Cholesky factor `L⁻¹` of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor<T: Scalar> {
    linv: DMatrix<T>,
}

impl<T: Scalar> SpdFactor<T> {
    pub fn new(a: &DMatrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape(format!("{}x{} matrix is not square", a.nrows(), a.ncols())));
        }
        let chol = a
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("cholesky", "matrix is not positive definite"))?;
        let linv = lower_triangular_inverse(chol.l().as_view());
        Ok(Self { linv })
    }

    pub fn dim(&self) -> usize {
        self.linv.nrows()
    }

    /// `A⁻¹ B = L⁻ᵀ (L⁻¹ B)`.
    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        // explicit transpose keeps both products on the gemm path; tr_mul is a per-entry dot loop
        self.linv.transpose() * (&self.linv * b)
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`, exactly symmetrised.
    pub fn inverse(&self) -> DMatrix<T> {
        symmetrize(&(self.linv.transpose() * &self.linv))
    }
}

fn lower_triangular_inverse<T: Scalar>(l: DMatrixView<'_, T>) -> DMatrix<T> {
    let n = l.nrows();
    if n <= BLOCK {
        let mut out = DMatrix::<T>::identity(n, n);
        // forward substitution column by column; l has a strictly positive diagonal
        for c in 0..n {
            for r in c..n {
                let mut acc = if r == c { T::one() } else { T::zero() };
                for k in c..r {
                    acc -= l[(r, k)] * out[(k, c)];
                }
                out[(r, c)] = acc / l[(r, r)];
            }
        }
        return out;
    }
    let h = n / 2;
    let a_inv = lower_triangular_inverse(l.view((0, 0), (h, h)));
    let c_inv = lower_triangular_inverse(l.view((h, h), (n - h, n - h)));
    let b = l.view((h, 0), (n - h, h));
    let lower_left = -(&c_inv * (b * &a_inv));
    let mut out = DMatrix::<T>::zeros(n, n);
    out.view_mut((0, 0), (h, h)).copy_from(&a_inv);
    out.view_mut((h, h), (n - h, n - h)).copy_from(&c_inv);
    out.view_mut((h, 0), (n - h, h)).copy_from(&lower_left);
    out
}

/// `½(M + Mᵀ)`; the result is exactly symmetric.
pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let n = m.nrows();
    let half = T::lit(0.5);
    let mut out = DMatrix::<T>::zeros(n, n);
    for j in 0..n {
        out[(j, j)] = m[(j, j)];
        for i in (j + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// `Tr(A B) = Σ_ij A_ij B_ji` without forming the product.
pub fn trace_of_product<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    debug_assert_eq!(a.shape(), (b.ncols(), b.nrows()));
    let mut acc = T::zero();
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub(crate) fn all_finite<T: Scalar>(m: &DMatrix<T>) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * (n as f64)
    }

    #[test]
    fn inverse_matches_lu_across_block_boundary() {
        for &n in &[1, 5, 64, 65, 130, 201] {
            let a = random_spd(n, n as u64);
            let inv = SpdFactor::new(&a).unwrap().inverse();
            let reference = a.clone().lu().try_inverse().unwrap();
            let err = (&inv - &reference).amax();
            assert!(err < 1e-12, "n={n} err={err}");
        }
    }

    #[test]
    fn solve_recovers_rhs() {
        let a = random_spd(90, 3);
        let b = DMatrix::<f64>::from_fn(90, 4, |i, j| (i * 4 + j) as f64 / 7.0);
        let x = SpdFactor::new(&a).unwrap().solve(&b);
        assert!((&a * x - b).amax() < 1e-10);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(SpdFactor::new(&a), Err(Error::Numerical { .. })));
    }

    #[test]
    fn trace_of_product_matches_gemm() {
        let a = random_spd(17, 1);
        let b = random_spd(17, 2);
        let direct = (&a * &b).trace();
        assert!((trace_of_product(&a, &b) - direct).abs() < 1e-9 * direct.abs());
    }
}
