//! Fisher information, Cramér–Rao privacy floors and (ε, δ) certification.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::{induced_inf_to_2_norm, NormMode, ScalingMatrix};
use crate::stream::RandomStream;

/// A sampleable additive noise law with known Fisher information and second
/// moment.
pub trait NoiseMechanism: Send + Sync {
    fn kind(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn fisher_information(&self) -> Result<FisherInfo>;

    /// `V_nn = E[n n']`.
    fn second_moment(&self) -> Result<DMatrix<f64>>;

    /// `count` i.i.d. rows. Row `i` draws from `stream.fork(i)`, so any block
    /// of rows can be regenerated on its own.
    fn sample(&self, count: usize, stream: RandomStream) -> DMatrix<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    matrix: DMatrix<f64>,
    quadrature_error: f64,
    /// Set when the value is a known closed form for a density outside the
    /// smoothness class the bound assumes (the Laplace kink).
    analytic_limit: bool,
}

impl FisherInfo {
    pub fn new(matrix: DMatrix<f64>, quadrature_error: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::dim("fisher information", matrix.nrows(), matrix.ncols()));
        }
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-10 * matrix.amax().max(1.0) {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        if sym.nrows() > 0 {
            let eig = SymmetricEigen::new(sym.clone());
            if let Some((index, &eigenvalue)) = eig.eigenvalues.iter().enumerate().find(|(_, v)| **v < -1e-10) {
                return Err(Error::NotPositiveDefinite { index, eigenvalue });
            }
        }
        Ok(Self {
            matrix: sym,
            quadrature_error: quadrature_error.abs(),
            analytic_limit: false,
        })
    }

    pub fn exact(matrix: DMatrix<f64>) -> Result<Self> {
        Self::new(matrix, 0.0)
    }

    pub fn flagged_analytic_limit(mut self) -> Self {
        self.analytic_limit = true;
        self
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn quadrature_error(&self) -> f64 {
        self.quadrature_error
    }

    pub fn is_analytic_limit(&self) -> bool {
        self.analytic_limit
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

pub fn fisher_information(mechanism: &dyn NoiseMechanism) -> Result<FisherInfo> {
    mechanism.fisher_information()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpPair {
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversaryFloor {
    pub epsilon: f64,
    pub delta: f64,
    pub floor: f64,
}

/// Privacy guarantees attached to a release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyCertificate {
    /// `Tr(Pi I^-1)`; infinite when `I` is singular.
    pub crb_floor: f64,
    /// `1 / Tr(Pi^-1 I)`.
    pub weak_floor: f64,
    pub fisher_trace: f64,
    pub quadrature_error: f64,
    /// Floor on the noise support for degenerate (correlated) mechanisms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_floor: Option<f64>,
    #[serde(default)]
    pub dp_pairs: Vec<DpPair>,
    #[serde(default)]
    pub adversary_floor_formula: Vec<AdversaryFloor>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl PrivacyCertificate {
    /// Adds `(epsilon_min(delta), delta)` for each `delta`, with the matching
    /// adversary floor.
    pub fn certify_dp(&mut self, lambda: f64, scaling: &ScalingMatrix, deltas: &[f64], mode: NormMode) -> Result<()> {
        for &delta in deltas {
            let epsilon = dp_certify_with(lambda, scaling, delta, mode)?;
            let floor = adversary_floor_with(epsilon, delta, scaling, mode)?;
            self.dp_pairs.push(DpPair { epsilon, delta });
            self.adversary_floor_formula.push(AdversaryFloor { epsilon, delta, floor });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("certificate serializes")
    }
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

/// Both Cramér–Rao floors for an estimator of one row.
pub fn crb_bounds(info: &FisherInfo, scaling: &ScalingMatrix) -> Result<PrivacyCertificate> {
    let p = scaling.dim();
    if info.dim() != p {
        return Err(Error::dim("fisher information vs scaling", p, info.dim()));
    }
    let i = info.matrix();
    let weak_denominator = trace_product(&scaling.inverse(), i);
    let weak_floor = if weak_denominator > 0.0 {
        1.0 / weak_denominator
    } else {
        f64::INFINITY
    };
    let crb_floor = match i.clone().cholesky() {
        Some(ch) if SymmetricEigen::new(i.clone()).eigenvalues.min() > 1e-14 * i.amax() => {
            trace_product(scaling.matrix(), &ch.inverse())
        }
        _ => f64::INFINITY,
    };
    let mut flags = Vec::new();
    if info.is_analytic_limit() {
        flags.push("analytic-limit".to_string());
    }
    Ok(PrivacyCertificate {
        crb_floor,
        weak_floor,
        fisher_trace: i.trace(),
        quadrature_error: info.quadrature_error(),
        support_floor: None,
        dp_pairs: Vec::new(),
        adversary_floor_formula: Vec::new(),
        flags,
    })
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

fn log_factor(delta: f64) -> f64 {
    1.0 + (2.0 * (1.0 / delta).ln()).sqrt()
}

/// `||Pi^{1/4}||_{inf,2}`.
pub fn quarter_power_norm(scaling: &ScalingMatrix, mode: NormMode) -> Result<f64> {
    induced_inf_to_2_norm(&scaling.power(0.25), mode)
}

/// Smallest ε for which the optimal Gaussian at `lambda` is (ε, δ)-locally
/// private: `lambda^{1/4} ||Pi^{1/4}||_{inf,2} (1 + sqrt(2 ln(1/δ)))`.
pub fn dp_certify(lambda: f64, scaling: &ScalingMatrix, delta: f64) -> Result<f64> {
    dp_certify_with(lambda, scaling, delta, NormMode::Exact)
}

pub fn dp_certify_with(lambda: f64, scaling: &ScalingMatrix, delta: f64, mode: NormMode) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    check_delta(delta)?;
    Ok(lambda.powf(0.25) * quarter_power_norm(scaling, mode)? * log_factor(delta))
}

/// Lower bound on the weighted reconstruction error for a Gaussian mechanism
/// that is exactly (ε, δ)-private:
/// `Tr(Pi^{1/2}) ||Pi^{1/4}||^2_{inf,2} (1 + sqrt(2 ln(1/δ)))^2 / ε^2`.
pub fn adversary_floor(epsilon: f64, delta: f64, scaling: &ScalingMatrix) -> Result<f64> {
    adversary_floor_with(epsilon, delta, scaling, NormMode::Exact)
}

pub fn adversary_floor_with(epsilon: f64, delta: f64, scaling: &ScalingMatrix, mode: NormMode) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    check_delta(delta)?;
    let norm = quarter_power_norm(scaling, mode)?;
    Ok(scaling.trace_power(0.5) * norm * norm * log_factor(delta).powi(2) / (epsilon * epsilon))
}

/// `(x - x_hat)' Pi (x - x_hat)`, the weighted error whose expectation the
/// floors bound.
pub fn weighted_squared_error(scaling: &ScalingMatrix, diff: &[f64]) -> f64 {
    let pi = scaling.matrix();
    let mut s = 0.0;
    for (i, di) in diff.iter().enumerate() {
        for (j, dj) in diff.iter().enumerate() {
            s += di * pi[(i, j)] * dj;
        }
    }
    s
}
