//! Positive-definite scaling matrices and the norms used for certification.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Largest dimension for which the exact `inf -> 2` norm is enumerated.
pub const MAX_EXACT_NORM_DIM: usize = 25;

const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric positive-definite weighting of per-feature privacy importance.
///
/// The eigendecomposition is computed once; every fractional power is read
/// off it, so all powers commute with each other exactly up to rounding.
#[derive(Debug, Clone)]
pub struct ScalingMatrix {
    pi: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl ScalingMatrix {
    pub fn new(pi: DMatrix<f64>) -> Result<Self> {
        if !pi.is_square() || pi.nrows() == 0 {
            return Err(Error::dim("scaling matrix", pi.nrows(), pi.ncols()));
        }
        if pi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("scaling matrix has non-finite entries".into()));
        }
        let scale = pi.amax().max(f64::MIN_POSITIVE);
        let asym = (&pi - pi.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let sym = (&pi + pi.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        if let Some((index, &eigenvalue)) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .filter(|(_, v)| **v <= 0.0)
        {
            return Err(Error::NotPositiveDefinite { index, eigenvalue });
        }
        Ok(Self {
            pi: sym,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn identity(p: usize) -> Self {
        Self {
            pi: DMatrix::identity(p, p),
            eigenvalues: DVector::from_element(p, 1.0),
            eigenvectors: DMatrix::identity(p, p),
        }
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.pi.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.pi
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn is_diagonal(&self) -> bool {
        let p = self.dim();
        (0..p).all(|i| (0..p).all(|j| i == j || self.pi[(i, j)] == 0.0))
    }

    pub fn diagonal_entries(&self) -> Vec<f64> {
        self.pi.diagonal().iter().copied().collect()
    }

    /// `Pi^exponent` via the symmetric eigendecomposition.
    pub fn power(&self, exponent: f64) -> DMatrix<f64> {
        let powered = self.eigenvalues.map(|l| l.powf(exponent));
        spectral(&self.eigenvectors, &powered)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.power(-1.0)
    }

    pub fn trace_power(&self, exponent: f64) -> f64 {
        self.eigenvalues.iter().map(|l| l.powf(exponent)).sum()
    }

    /// Hex SHA-256 of the matrix entries (row-major, little-endian f64).
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dim() as u64).to_le_bytes());
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                hasher.update(self.pi[(i, j)].to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// `V diag(values) V^T`, symmetrized.
pub(crate) fn spectral(vectors: &DMatrix<f64>, values: &DVector<f64>) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |i, j| vectors[(i, j)] * values[j]);
    let m = &scaled * vectors.transpose();
    (&m + m.transpose()) * 0.5
}

/// Fractional power of an SPD matrix. Spelled as a free function so the
/// exponent set used throughout (`-1, -1/2, 1/4, 1/2`) reads naturally.
pub fn matrix_power(m: &ScalingMatrix, exponent: f64) -> Result<DMatrix<f64>> {
    if !exponent.is_finite() {
        return Err(Error::Domain(format!("matrix exponent {exponent} is not finite")));
    }
    Ok(m.power(exponent))
}

/// Symmetric square root of a symmetric PSD matrix (tiny negative eigenvalues
/// from rounding are clamped to zero).
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if let Some((index, &eigenvalue)) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .find(|(_, v)| **v < -1e-10 * scale)
    {
        return Err(Error::NotPositiveDefinite { index, eigenvalue });
    }
    Ok(spectral(&eig.eigenvectors, &eig.eigenvalues.map(|l| l.max(0.0).sqrt())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Vertex enumeration, refused above [`MAX_EXACT_NORM_DIM`].
    #[default]
    Exact,
    /// `||M||_2 * sqrt(p)`, always available.
    UpperBound,
}

/// Induced norm `max ||M x||_2 / ||x||_inf`.
///
/// The maximum of the convex map `x -> ||Mx||_2` over the unit inf-ball sits
/// at a vertex, so the exact value is a maximum over sign vectors. Only half
/// of them are visited since `s` and `-s` give the same norm.
pub fn induced_inf_to_2_norm(m: &DMatrix<f64>, mode: NormMode) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("matrix has non-finite entries".into()));
    }
    let p = m.ncols();
    if p == 0 {
        return Ok(0.0);
    }
    match mode {
        NormMode::UpperBound => {
            let spectral_norm = m.clone().svd(false, false).singular_values.max();
            Ok(spectral_norm * (p as f64).sqrt())
        }
        NormMode::Exact => {
            if p > MAX_EXACT_NORM_DIM {
                return Err(Error::NormTooLarge {
                    p,
                    max: MAX_EXACT_NORM_DIM,
                });
            }
            // Walk the sign patterns in Gray-code order so each step flips one
            // column: Ms changes by +-2 * column j.
            let rows = m.nrows();
            let mut acc: Vec<f64> = (0..rows).map(|i| m.row(i).sum()).collect();
            let mut signs = vec![1.0; p];
            let mut best = acc.iter().map(|v| v * v).sum::<f64>();
            let patterns: u64 = 1u64 << (p - 1);
            for k in 1..patterns {
                let j = k.trailing_zeros() as usize;
                signs[j] = -signs[j];
                let factor = 2.0 * signs[j];
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += factor * m[(i, j)];
                }
                let norm2 = acc.iter().map(|v| v * v).sum::<f64>();
                if norm2 > best {
                    best = norm2;
                }
            }
            Ok(best.sqrt())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn brute_force(m: &DMatrix<f64>) -> f64 {
        let p = m.ncols();
        let mut best: f64 = 0.0;
        for mask in 0..(1u32 << p) {
            let s = DVector::from_fn(p, |j, _| if mask >> j & 1 == 1 { 1.0 } else { -1.0 });
            best = best.max((m * s).norm());
        }
        best
    }

    #[test]
    fn power_examples() {
        let i2 = ScalingMatrix::identity(2);
        assert_eq!(matrix_power(&i2, 0.5).unwrap(), DMatrix::identity(2, 2));

        let d = ScalingMatrix::diagonal(&[4.0, 1.0]).unwrap();
        let r = matrix_power(&d, -0.5).unwrap();
        assert_relative_eq!(r, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]), epsilon = 1e-14);
        // cross-check: squaring and inverting recovers Pi
        let back = (&r * &r).try_inverse().unwrap();
        assert_relative_eq!(back, d.matrix().clone(), epsilon = 1e-12);

        let s = ScalingMatrix::diagonal(&[16.0]).unwrap();
        assert_relative_eq!(matrix_power(&s, 0.25).unwrap()[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn rejects_indefinite_with_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match ScalingMatrix::new(m) {
            Err(Error::NotPositiveDefinite { eigenvalue, .. }) => {
                assert_relative_eq!(eigenvalue, -1.0, epsilon = 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(ScalingMatrix::new(asym), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn norm_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(
            induced_inf_to_2_norm(&i2, NormMode::Exact).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-15
        );
        let d3 = DMatrix::from_element(1, 1, 3.0);
        assert_eq!(induced_inf_to_2_norm(&d3, NormMode::Exact).unwrap(), 3.0);
        let d12 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        assert_relative_eq!(
            induced_inf_to_2_norm(&d12, NormMode::Exact).unwrap(),
            5f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn norm_refuses_large_p_but_bound_works() {
        let m = DMatrix::<f64>::identity(26, 26);
        assert!(matches!(
            induced_inf_to_2_norm(&m, NormMode::Exact),
            Err(Error::NormTooLarge { p: 26, .. })
        ));
        let b = induced_inf_to_2_norm(&m, NormMode::UpperBound).unwrap();
        assert_relative_eq!(b, 26f64.sqrt(), epsilon = 1e-12);
    }

    fn random_spd(p: usize, entries: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |i, j| entries[i * p + j]);
        &a * a.transpose() + DMatrix::identity(p, p) * 0.5
    }

    proptest! {
        #[test]
        fn sqrt_squares_back(p in 1usize..6, entries in proptest::collection::vec(-2.0f64..2.0, 36)) {
            let pi = random_spd(p, &entries);
            let s = ScalingMatrix::new(pi.clone()).unwrap();
            let half = s.power(0.5);
            let err = (&half * &half - &pi).norm() / pi.norm();
            prop_assert!(err < 1e-10);
            let commute = (&half * &pi - &pi * &half).norm() / pi.norm();
            prop_assert!(commute < 1e-10);
            prop_assert!((&half - half.transpose()).amax() < 1e-12);
        }

        #[test]
        fn exact_norm_matches_brute_force(rows in 1usize..5, p in 1usize..9,
                                          entries in proptest::collection::vec(-3.0f64..3.0, 72)) {
            let m = DMatrix::from_fn(rows, p, |i, j| entries[i * p + j]);
            let fast = induced_inf_to_2_norm(&m, NormMode::Exact).unwrap();
            let slow = brute_force(&m);
            prop_assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0));
            let bound = induced_inf_to_2_norm(&m, NormMode::UpperBound).unwrap();
            prop_assert!(bound >= fast * (1.0 - 1e-12));
        }
    }
}
