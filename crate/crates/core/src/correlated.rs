//! Correlated noise that leaves the trained SVM unchanged.
//!
//! With `c = omega * y` (elementwise), a perturbation `w = [w_1; ...; w_q]`
//! of the stacked rows keeps every KKT equation intact when
//!
//! ```text
//! sum_i c_i w_i = 0      and      alpha' w_i = 0 for every i,
//! ```
//!
//! i.e. `Omega w = 0` with `Omega = [c' (x) I_p ; I_q (x) alpha']`. Writing the
//! perturbation as the `p x q` matrix `W = [w_1 ... w_q]`, the conditions
//! read `W c = 0`, `alpha' W = 0`, so the null space is `{U Z C'}` with `U`
//! an orthonormal basis of `alpha`'s complement and `C` one of `c`'s. Hence
//! `Psi = C (x) U`, built from two Householder reflections instead of a
//! dense factorization of the `(p + q) x qp` operator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::privacy::PrivacyCertificate;
use crate::scaling::ScalingMatrix;
use crate::stream::RandomStream;
use crate::svm::SvmSolution;

/// Relative singular-value threshold for rank decisions.
pub const RANK_TOL: f64 = 1e-10;
/// Largest KKT residual accepted from the solution that defines `Omega`.
pub const MAX_KKT_RESIDUAL: f64 = 1e-6;

/// Orthonormal basis of the complement of `v` (`n x (n-1)`), or `I_n` when
/// `v` is treated as zero.
fn complement_basis(v: &DVector<f64>, is_zero: bool) -> DMatrix<f64> {
    let n = v.len();
    if is_zero {
        return DMatrix::identity(n, n);
    }
    let mut w = v / v.norm();
    let s = if w[0] >= 0.0 { 1.0 } else { -1.0 };
    w[0] += s;
    let wn2 = w.norm_squared();
    // columns 1.. of the reflection I - 2 w w' / w'w
    DMatrix::from_fn(n, n - 1, |i, j| {
        let col = j + 1;
        let delta = if i == col { 1.0 } else { 0.0 };
        delta - 2.0 * w[i] * w[col] / wn2
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceOperator {
    q: usize,
    p: usize,
    c: DVector<f64>,
    alpha: DVector<f64>,
    u: DMatrix<f64>,
    cbasis: DMatrix<f64>,
    rank: usize,
}

impl InvarianceOperator {
    /// Operator for weights `c = omega * y` and normal vector `alpha`.
    pub fn from_parts(c: DVector<f64>, alpha: DVector<f64>) -> Result<Self> {
        let (q, p) = (c.len(), alpha.len());
        if q == 0 || p == 0 {
            return Err(Error::Domain("invariance operator needs q >= 1 and p >= 1".into()));
        }
        let (cn, an) = (c.norm(), alpha.norm());
        let sigma_max = (cn * cn + an * an).sqrt();
        let c_zero = cn <= RANK_TOL * sigma_max || sigma_max == 0.0;
        let a_zero = an <= RANK_TOL * sigma_max || sigma_max == 0.0;
        let rank = match (c_zero, a_zero) {
            (true, true) => 0,
            (false, true) => p,
            (true, false) => q,
            (false, false) => p + q - 1,
        };
        if rank == q * p {
            return Err(Error::TrivialNullSpace { q, p });
        }
        let u = complement_basis(&alpha, a_zero);
        let cbasis = complement_basis(&c, c_zero);
        Ok(Self {
            q,
            p,
            c,
            alpha,
            u,
            cbasis,
            rank,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Dimension `d = qp - rank` of the null space.
    pub fn null_dim(&self) -> usize {
        self.u.ncols() * self.cbasis.ncols()
    }

    /// Basis of `alpha`'s complement in feature space.
    pub fn feature_basis(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Basis of `c`'s complement in row space.
    pub fn row_basis(&self) -> &DMatrix<f64> {
        &self.cbasis
    }

    /// Dense `Omega`, `(p + q) x qp`.
    pub fn omega_matrix(&self) -> DMatrix<f64> {
        let (q, p) = (self.q, self.p);
        let mut m = DMatrix::zeros(p + q, q * p);
        for i in 0..q {
            for j in 0..p {
                m[(j, i * p + j)] = self.c[i];
                m[(p + i, i * p + j)] = self.alpha[j];
            }
        }
        m
    }

    /// Dense `Psi = C (x) U`, `qp x d`.
    pub fn psi_matrix(&self) -> DMatrix<f64> {
        self.cbasis.kronecker(&self.u)
    }

    pub fn omega_frobenius(&self) -> f64 {
        ((self.p as f64) * self.c.norm_squared() + (self.q as f64) * self.alpha.norm_squared()).sqrt()
    }

    /// `Omega w` without forming `Omega`.
    pub fn apply_omega(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let (q, p) = (self.q, self.p);
        if w.len() != q * p {
            return Err(Error::dim("stacked perturbation", q * p, w.len()));
        }
        let mut out = DVector::zeros(p + q);
        for i in 0..q {
            let wi = w.rows(i * p, p);
            for j in 0..p {
                out[j] += self.c[i] * wi[j];
            }
            out[p + i] = self.alpha.dot(&wi);
        }
        Ok(out)
    }

    /// `Psi z` as a stacked perturbation, with `z = vec(Z)` column-major.
    pub fn apply_psi(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let (pn, qn) = (self.u.ncols(), self.cbasis.ncols());
        if z.len() != pn * qn {
            return Err(Error::dim("null-space coordinates", pn * qn, z.len()));
        }
        let zm = DMatrix::from_column_slice(pn, qn, z.as_slice());
        let w = &self.u * zm * self.cbasis.transpose();
        Ok(DVector::from_column_slice(w.as_slice()))
    }

    /// `Psi' w`.
    pub fn psi_transpose(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let (q, p) = (self.q, self.p);
        if w.len() != q * p {
            return Err(Error::dim("stacked perturbation", q * p, w.len()));
        }
        let wm = DMatrix::from_column_slice(p, q, w.as_slice());
        let z = self.u.transpose() * wm * &self.cbasis;
        Ok(DVector::from_column_slice(z.as_slice()))
    }

    /// `Tr((I_q (x) Pi^-1) Psi Psi') = Tr(C'C) Tr(U' Pi^-1 U)`.
    pub fn weighted_trace(&self, scaling: &ScalingMatrix) -> Result<f64> {
        if scaling.dim() != self.p {
            return Err(Error::dim("scaling vs features", self.p, scaling.dim()));
        }
        let inner = (self.u.transpose() * scaling.inverse() * &self.u).trace();
        Ok(self.cbasis.ncols() as f64 * inner)
    }

    /// Squared norm of row `i` of `C`: the share of row `i` in the support.
    pub fn row_share(&self, i: usize) -> f64 {
        self.cbasis.row(i).norm_squared()
    }
}

/// Builds the operator from a trained solution on `data`.
pub fn build_invariance_operator(solution: &SvmSolution, data: &Dataset) -> Result<InvarianceOperator> {
    if !data.labels().is_binary() {
        return Err(Error::Domain("invariance operator needs binary labels".into()));
    }
    if solution.omega.len() != data.q() {
        return Err(Error::dim("multipliers vs rows", data.q(), solution.omega.len()));
    }
    if solution.alpha.len() != data.p() {
        return Err(Error::dim("alpha vs features", data.p(), solution.alpha.len()));
    }
    if !(solution.kkt_residual <= MAX_KKT_RESIDUAL) {
        return Err(Error::Domain(format!(
            "solution KKT residual {:e} exceeds {MAX_KKT_RESIDUAL:e}",
            solution.kkt_residual
        )));
    }
    let y = data.label_values();
    let c = DVector::from_fn(data.q(), |i, _| solution.omega[i] * y[i]);
    InvarianceOperator::from_parts(c, solution.alpha.clone())
}

/// Gaussian on the null space with per-direction variance `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatedMechanism {
    pub operator: InvarianceOperator,
    pub m: f64,
}

impl CorrelatedMechanism {
    pub fn new(operator: InvarianceOperator, m: f64) -> Result<Self> {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::Domain(format!("variance cap m must be non-negative, got {m}")));
        }
        Ok(Self { operator, m })
    }

    /// Dense `m Psi Psi'`.
    pub fn covariance_implied(&self) -> DMatrix<f64> {
        let psi = self.operator.psi_matrix();
        &psi * psi.transpose() * self.m
    }
}

/// One stacked perturbation `w = Psi z`, `z ~ N(0, m I_d)`.
pub fn sample_correlated(mechanism: &CorrelatedMechanism, stream: RandomStream) -> DVector<f64> {
    let d = mechanism.operator.null_dim();
    let mut rng = stream.rng();
    let sd = mechanism.m.sqrt();
    let z = DVector::from_fn(d, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
    mechanism.operator.apply_psi(&z).expect("dimension is the operator's own")
}

/// Floors for the correlated release.
///
/// The ambient information `Psi Psi' / m` is singular, so the tight per-row
/// floor is infinite. `weak_floor` is `m / Tr((I (x) Pi^-1) Psi Psi')`.
/// `support_floor` is the smallest per-row floor on the support,
/// `min_i m |C_i|^2 Tr(Pi U U')`, which is what an unbiased estimator
/// restricted to `im(Psi)` cannot beat.
pub fn correlated_certificate(mechanism: &CorrelatedMechanism, scaling: &ScalingMatrix) -> Result<PrivacyCertificate> {
    let op = &mechanism.operator;
    let m = mechanism.m;
    let weighted = op.weighted_trace(scaling)?;
    let per_feature = (op.u.transpose() * scaling.matrix() * &op.u).trace();
    let min_share = (0..op.q).map(|i| op.row_share(i)).fold(f64::INFINITY, f64::min);
    let d = op.null_dim() as f64;
    Ok(PrivacyCertificate {
        crb_floor: f64::INFINITY,
        weak_floor: if weighted > 0.0 { m / weighted } else { f64::INFINITY },
        fisher_trace: if m > 0.0 { d / m } else { f64::INFINITY },
        quadrature_error: 0.0,
        support_floor: Some(m * min_share * per_feature),
        dp_pairs: Vec::new(),
        adversary_floor_formula: Vec::new(),
        flags: vec!["singular-information".to_string()],
    })
}

/// Releases `data + w` and its certificate under `Pi = I`.
pub fn correlated_obfuscate(data: &Dataset, solution: &SvmSolution, m: f64, stream: RandomStream) -> Result<(Dataset, PrivacyCertificate)> {
    correlated_obfuscate_with(data, solution, m, &ScalingMatrix::identity(data.p()), stream)
}

pub fn correlated_obfuscate_with(
    data: &Dataset,
    solution: &SvmSolution,
    m: f64,
    scaling: &ScalingMatrix,
    stream: RandomStream,
) -> Result<(Dataset, PrivacyCertificate)> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Domain(format!("variance cap m must be positive, got {m}")));
    }
    let op = build_invariance_operator(solution, data)?;
    let mech = CorrelatedMechanism::new(op, m)?;
    let cert = correlated_certificate(&mech, scaling)?;
    let w = sample_correlated(&mech, stream);
    let released = data.from_stacked(&(data.stacked() + w))?;
    Ok((released, cert))
}

/// `Tr((I (x) Pi^-1) I_D) ` for the covariance `m Psi diag(dvals) Psi'`,
/// whose information on the support is `Psi diag(1/dvals) Psi' / m`.
pub fn support_objective(operator: &InvarianceOperator, scaling: &ScalingMatrix, dvals: &[f64], m: f64) -> Result<f64> {
    if dvals.len() != operator.null_dim() {
        return Err(Error::dim("support variances", operator.null_dim(), dvals.len()));
    }
    if dvals.iter().any(|v| !(*v > 0.0)) || !(m > 0.0) {
        return Err(Error::Domain("support variances and m must be positive".into()));
    }
    // diagonal of Psi' (I (x) Pi^-1) Psi = kron(diag(C'C), diag(U' Pi^-1 U))
    let inner = operator.u.transpose() * scaling.inverse() * &operator.u;
    let outer = operator.cbasis.transpose() * &operator.cbasis;
    let pn = operator.u.ncols();
    Ok(dvals
        .iter()
        .enumerate()
        .map(|(k, dv)| outer[(k / pn, k / pn)] * inner[(k % pn, k % pn)] / dv)
        .sum::<f64>()
        / m)
}
