//! Independent per-row noise: the optimal Gaussian, general Gaussians and
//! the matched Laplace baseline.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::privacy::{FisherInfo, NoiseMechanism};
use crate::scaling::{psd_sqrt, ScalingMatrix};
use crate::stream::RandomStream;

/// Largest accepted λ; beyond it the covariance is numerically zero.
pub const LAMBDA_CAP: f64 = 1e12;

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= LAMBDA_CAP) {
        return Err(Error::Domain(format!("lambda must lie in (0, {LAMBDA_CAP:e}], got {lambda}")));
    }
    Ok(())
}

/// Zero-mean Gaussian noise with an arbitrary SPD covariance.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    covariance: DMatrix<f64>,
    root: DMatrix<f64>,
}

impl GaussianNoise {
    pub fn new(covariance: DMatrix<f64>) -> Result<Self> {
        // validates symmetry and definiteness
        ScalingMatrix::new(covariance.clone())?;
        let root = psd_sqrt(&covariance)?;
        Ok(Self { covariance, root })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

fn gaussian_rows(root: &DMatrix<f64>, count: usize, stream: RandomStream) -> DMatrix<f64> {
    let p = root.nrows();
    let mut out = DMatrix::zeros(count, p);
    let mut z = DVector::zeros(p);
    for i in 0..count {
        let mut rng = stream.fork(i as u64).rng();
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let n = root * &z;
        out.row_mut(i).copy_from(&n.transpose());
    }
    out
}

impl NoiseMechanism for GaussianNoise {
    fn kind(&self) -> &'static str {
        "gaussian"
    }

    fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    fn fisher_information(&self) -> Result<FisherInfo> {
        let inv = self
            .covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Eigen("covariance lost definiteness".into()))?
            .inverse();
        FisherInfo::exact((&inv + inv.transpose()) * 0.5)
    }

    fn second_moment(&self) -> Result<DMatrix<f64>> {
        Ok(self.covariance.clone())
    }

    fn sample(&self, count: usize, stream: RandomStream) -> DMatrix<f64> {
        gaussian_rows(&self.root, count, stream)
    }
}

/// Minimizer of `Tr(Pi^-1 I) + lambda Tr(V_nn)` over all noise densities:
/// Gaussian with covariance `Pi^{-1/2} / sqrt(lambda)`.
#[derive(Debug, Clone)]
pub struct GaussianMechanism {
    noise: GaussianNoise,
    lambda: f64,
    scaling: ScalingMatrix,
}

impl GaussianMechanism {
    pub fn covariance(&self) -> &DMatrix<f64> {
        self.noise.covariance()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn scaling(&self) -> &ScalingMatrix {
        &self.scaling
    }

    /// Value of the density `det(2 pi Sigma)^{-1/2} exp(-(sqrt(lambda)/2) n' Pi^{1/2} n)`.
    pub fn density(&self, n: &[f64]) -> Result<f64> {
        let p = self.scaling.dim();
        if n.len() != p {
            return Err(Error::dim("noise vector", p, n.len()));
        }
        let half = self.scaling.power(0.5);
        let v = DVector::from_column_slice(n);
        let quad = (v.transpose() * &half * &v)[(0, 0)];
        let det = (self.covariance() * (2.0 * std::f64::consts::PI)).determinant();
        Ok((-0.5 * self.lambda.sqrt() * quad).exp() / det.sqrt())
    }
}

impl NoiseMechanism for GaussianMechanism {
    fn kind(&self) -> &'static str {
        "optimal_gaussian"
    }

    fn dim(&self) -> usize {
        self.scaling.dim()
    }

    /// `sqrt(lambda) Pi^{1/2}`, read off the eigendecomposition of `Pi`.
    fn fisher_information(&self) -> Result<FisherInfo> {
        FisherInfo::exact(self.scaling.power(0.5) * self.lambda.sqrt())
    }

    fn second_moment(&self) -> Result<DMatrix<f64>> {
        self.noise.second_moment()
    }

    fn sample(&self, count: usize, stream: RandomStream) -> DMatrix<f64> {
        self.noise.sample(count, stream)
    }
}

pub fn optimal_iid_mechanism(lambda: f64, scaling: &ScalingMatrix) -> Result<GaussianMechanism> {
    check_lambda(lambda)?;
    let covariance = scaling.power(-0.5) / lambda.sqrt();
    let root = scaling.power(-0.25) / lambda.powf(0.25);
    Ok(GaussianMechanism {
        noise: GaussianNoise { covariance, root },
        lambda,
        scaling: scaling.clone(),
    })
}

/// Independent Laplace coordinates with scales `b_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceMechanism {
    scales: Vec<f64>,
    trace_matched: bool,
}

impl LaplaceMechanism {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() || scales.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::Domain("Laplace scales must be positive and finite".into()));
        }
        Ok(Self {
            scales,
            trace_matched: false,
        })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// True when the scales came from the scalar trace-matching fallback
    /// (non-diagonal `Pi`).
    pub fn is_trace_matched(&self) -> bool {
        self.trace_matched
    }

    pub fn flags(&self) -> Vec<String> {
        let mut f = vec!["analytic-limit".to_string()];
        if self.trace_matched {
            f.push("trace-matched".to_string());
        }
        f
    }
}

impl NoiseMechanism for LaplaceMechanism {
    fn kind(&self) -> &'static str {
        "laplace_matched"
    }

    fn dim(&self) -> usize {
        self.scales.len()
    }

    /// `diag(1 / b_j^2)`. The density has a kink at 0 so this is the
    /// closed-form limit, flagged as such.
    fn fisher_information(&self) -> Result<FisherInfo> {
        let d = DVector::from_iterator(self.scales.len(), self.scales.iter().map(|b| 1.0 / (b * b)));
        Ok(FisherInfo::exact(DMatrix::from_diagonal(&d))?.flagged_analytic_limit())
    }

    fn second_moment(&self) -> Result<DMatrix<f64>> {
        let d = DVector::from_iterator(self.scales.len(), self.scales.iter().map(|b| 2.0 * b * b));
        Ok(DMatrix::from_diagonal(&d))
    }

    fn sample(&self, count: usize, stream: RandomStream) -> DMatrix<f64> {
        let p = self.scales.len();
        let mut out = DMatrix::zeros(count, p);
        for i in 0..count {
            let mut rng = stream.fork(i as u64).rng();
            for j in 0..p {
                let u: f64 = rng.random::<f64>() - 0.5;
                out[(i, j)] = -self.scales[j] * u.signum() * (1.0 - 2.0 * u.abs()).ln();
            }
        }
        out
    }
}

/// Laplace mechanism with the same tight floor `Tr(Pi I^-1)` as `mechanism`.
///
/// With diagonal `Pi` each coordinate gets `b_j^2 = Sigma_jj`; otherwise one
/// scale `b^2 = Tr(Pi Sigma) / Tr(Pi)` is shared and the result is flagged.
pub fn matched_laplace_baseline(mechanism: &GaussianMechanism) -> Result<LaplaceMechanism> {
    let sigma = mechanism.covariance();
    let scaling = mechanism.scaling();
    let p = scaling.dim();
    if scaling.is_diagonal() {
        let scales = (0..p).map(|j| sigma[(j, j)].sqrt()).collect();
        LaplaceMechanism::new(scales)
    } else {
        let pi = scaling.matrix();
        let b2 = pi.component_mul(sigma).sum() / pi.trace();
        let mut l = LaplaceMechanism::new(vec![b2.sqrt(); p])?;
        l.trace_matched = true;
        Ok(l)
    }
}

/// `count x p` matrix of i.i.d. noise rows.
pub fn sample_iid(mechanism: &dyn NoiseMechanism, count: usize, stream: RandomStream) -> DMatrix<f64> {
    mechanism.sample(count, stream)
}

/// `Tr(Pi^-1 I) + lambda Tr(V_nn)`.
pub fn p_lambda_objective(density: &dyn NoiseMechanism, lambda: f64, scaling: &ScalingMatrix) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    if density.dim() != scaling.dim() {
        return Err(Error::dim("density vs scaling", scaling.dim(), density.dim()));
    }
    let info = density.fisher_information()?;
    let v = density.second_moment()?;
    Ok(scaling.inverse().component_mul(info.matrix()).sum() + lambda * v.trace())
}

/// Closed-form optimum `2 sqrt(lambda) Tr(Pi^{-1/2})`.
pub fn optimal_objective(lambda: f64, scaling: &ScalingMatrix) -> f64 {
    2.0 * lambda.sqrt() * scaling.trace_power(-0.5)
}

/// Adds one fresh noise row to every row of `data`. Labels are untouched.
pub fn obfuscate(data: &Dataset, mechanism: &dyn NoiseMechanism, stream: RandomStream) -> Result<Dataset> {
    if mechanism.dim() != data.p() {
        return Err(Error::dim("mechanism vs features", data.p(), mechanism.dim()));
    }
    let noise = mechanism.sample(data.q(), stream);
    data.with_features(data.features() + noise)
}
