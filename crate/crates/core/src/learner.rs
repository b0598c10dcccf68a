//! Learners trained by minimizing a smooth loss, and empirical utility
//! certificates for training on noisy data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::privacy::NoiseMechanism;
use crate::stream::RandomStream;
use crate::svm::{train_svm, SvmConfig};

/// Which probability floor applies: `1 - q c^2 Tr(V) / eps^2` for the SVM,
/// `1 - q^2 c^2 Tr(V) / eps^2` for a general smooth loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    SvmQ,
    GeneralQSquared,
}

pub trait Learner: Send + Sync {
    fn name(&self) -> &'static str;

    fn bound_kind(&self) -> BoundKind;

    /// Minimizer of [`Learner::loss`] on `data`.
    fn fit(&self, data: &Dataset) -> Result<DVector<f64>>;

    fn loss(&self, phi: &DVector<f64>, data: &Dataset) -> Result<f64>;

    fn gradient(&self, phi: &DVector<f64>, data: &Dataset) -> Result<DVector<f64>>;

    /// Exact Hessian in `phi`, when the learner provides one.
    fn hessian(&self, _phi: &DVector<f64>, _data: &Dataset) -> Result<Option<DMatrix<f64>>> {
        Ok(None)
    }

    /// Size of the first-order optimality violation at `phi`.
    fn stationarity(&self, phi: &DVector<f64>, data: &Dataset) -> Result<f64> {
        Ok(self.gradient(phi, data)?.amax())
    }
}

/// `sigma phi'phi + sum_i (y_i - phi'x_i)^2 / q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeLearner {
    pub sigma: f64,
}

impl RidgeLearner {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }
}

fn check_phi(phi: &DVector<f64>, expected: usize) -> Result<()> {
    if phi.len() != expected {
        return Err(Error::dim("parameter vector", expected, phi.len()));
    }
    Ok(())
}

/// `(sigma q I + X'X)^-1 X'y`.
pub fn fit_ridge(data: &Dataset, sigma: f64) -> Result<DVector<f64>> {
    RidgeLearner::new(sigma)?.fit(data)
}

impl Learner for RidgeLearner {
    fn name(&self) -> &'static str {
        "ridge"
    }

    fn bound_kind(&self) -> BoundKind {
        BoundKind::GeneralQSquared
    }

    fn fit(&self, data: &Dataset) -> Result<DVector<f64>> {
        let x = data.features();
        let y = DVector::from_column_slice(data.label_values());
        let mut a = x.transpose() * x;
        let shift = self.sigma * data.q() as f64;
        for j in 0..data.p() {
            a[(j, j)] += shift;
        }
        let rhs = x.transpose() * y;
        let ch = a
            .cholesky()
            .ok_or_else(|| Error::Eigen("ridge normal matrix is not positive definite".into()))?;
        Ok(ch.solve(&rhs))
    }

    fn loss(&self, phi: &DVector<f64>, data: &Dataset) -> Result<f64> {
        check_phi(phi, data.p())?;
        let y = DVector::from_column_slice(data.label_values());
        let r = y - data.features() * phi;
        Ok(self.sigma * phi.norm_squared() + r.norm_squared() / data.q() as f64)
    }

    fn gradient(&self, phi: &DVector<f64>, data: &Dataset) -> Result<DVector<f64>> {
        check_phi(phi, data.p())?;
        let y = DVector::from_column_slice(data.label_values());
        let r = y - data.features() * phi;
        Ok(phi * (2.0 * self.sigma) - data.features().transpose() * r * (2.0 / data.q() as f64))
    }

    fn hessian(&self, phi: &DVector<f64>, data: &Dataset) -> Result<Option<DMatrix<f64>>> {
        check_phi(phi, data.p())?;
        let x = data.features();
        let mut h = x.transpose() * x * (2.0 / data.q() as f64);
        for j in 0..data.p() {
            h[(j, j)] += 2.0 * self.sigma;
        }
        Ok(Some(h))
    }
}

/// The regularized SVM with slacks eliminated; `phi = [alpha; beta]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmLearner {
    pub config: SvmConfig,
}

/// Rows within this distance of their kink count as on the kink.
const KINK_TOL: f64 = 1e-9;

impl SvmLearner {
    fn residuals(&self, phi: &DVector<f64>, data: &Dataset) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if !data.labels().is_binary() {
            return Err(Error::Domain("SVM learner needs binary labels".into()));
        }
        let p = data.p();
        check_phi(phi, p + 1)?;
        let y = data.label_values();
        let rows = DMatrix::from_fn(data.q(), p + 1, |i, j| {
            if j < p {
                y[i] * data.features()[(i, j)]
            } else {
                y[i]
            }
        });
        let r = DVector::from_fn(data.q(), |i, _| 1.0 - rows.row(i).dot(&phi.transpose()));
        Ok((rows, r))
    }

    fn smooth_part(&self, phi: &DVector<f64>) -> DVector<f64> {
        let mut g = phi.clone();
        let n = g.len();
        g[n - 1] *= self.config.rho;
        g
    }
}

impl Learner for SvmLearner {
    fn name(&self) -> &'static str {
        "svm"
    }

    fn bound_kind(&self) -> BoundKind {
        BoundKind::SvmQ
    }

    fn fit(&self, data: &Dataset) -> Result<DVector<f64>> {
        let sol = train_svm(data, &self.config)?;
        let p = data.p();
        Ok(DVector::from_fn(p + 1, |j, _| if j < p { sol.alpha[j] } else { sol.beta }))
    }

    fn loss(&self, phi: &DVector<f64>, data: &Dataset) -> Result<f64> {
        let (_, r) = self.residuals(phi, data)?;
        let n = phi.len();
        let (theta, rho) = (self.config.theta, self.config.rho);
        let head = 0.5 * phi.rows(0, n - 1).norm_squared() + 0.5 * rho * phi[n - 1] * phi[n - 1];
        Ok(head + r.iter().map(|v| v.max(0.0)).map(|x| 0.5 * rho * x * x + theta * x).sum::<f64>())
    }

    /// Gradient away from kinks; rows exactly at `r = 0` take the right-hand
    /// (inactive) branch.
    fn gradient(&self, phi: &DVector<f64>, data: &Dataset) -> Result<DVector<f64>> {
        let (rows, r) = self.residuals(phi, data)?;
        let mut g = self.smooth_part(phi);
        for i in 0..r.len() {
            if r[i] > 0.0 {
                g -= rows.row(i).transpose() * (self.config.rho * r[i] + self.config.theta);
            }
        }
        Ok(g)
    }

    fn hessian(&self, phi: &DVector<f64>, data: &Dataset) -> Result<Option<DMatrix<f64>>> {
        let (rows, r) = self.residuals(phi, data)?;
        let n = phi.len();
        let mut h = DMatrix::identity(n, n);
        h[(n - 1, n - 1)] = self.config.rho;
        for i in 0..r.len() {
            if r[i] > KINK_TOL {
                let a = rows.row(i).transpose();
                h += &a * a.transpose() * self.config.rho;
            }
        }
        Ok(Some(h))
    }

    /// Distance of zero from the subdifferential, with kink multipliers
    /// fitted by least squares and clamped to `[0, theta]`.
    fn stationarity(&self, phi: &DVector<f64>, data: &Dataset) -> Result<f64> {
        let (rows, r) = self.residuals(phi, data)?;
        let mut g = self.smooth_part(phi);
        let mut kink = Vec::new();
        for i in 0..r.len() {
            if r[i].abs() <= KINK_TOL {
                kink.push(i);
            } else if r[i] > 0.0 {
                g -= rows.row(i).transpose() * (self.config.rho * r[i] + self.config.theta);
            }
        }
        if kink.is_empty() {
            return Ok(g.amax());
        }
        let a = DMatrix::from_fn(phi.len(), kink.len(), |j, k| rows[(kink[k], j)]);
        let nu = a
            .clone()
            .svd(true, true)
            .solve(&g, 1e-12)
            .map_err(|e| Error::Eigen(e.to_string()))?
            .map(|v| v.clamp(0.0, self.config.theta));
        Ok((g - a * nu).amax())
    }
}

/// Empirical stand-ins for the constants `c` and `eps_0` of the utility bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityCertificate {
    /// `max(1, 1.5 * largest stable ratio)`.
    pub c_estimate: f64,
    pub epsilon_0_estimate: f64,
    pub bound_kind: BoundKind,
    /// Largest observed `|d phi| / sum_i |d x_i|` on the stable rungs.
    pub max_ratio: f64,
    pub trials: usize,
    pub stable_scales: usize,
}

impl UtilityCertificate {
    /// `1 - (q or q^2) c^2 Tr(V) / eps^2`, clamped to `[0, 1]`.
    pub fn probability_floor(&self, epsilon: f64, trace_v: f64, q: usize) -> f64 {
        let q = q as f64;
        let mult = match self.bound_kind {
            BoundKind::SvmQ => q,
            BoundKind::GeneralQSquared => q * q,
        };
        (1.0 - mult * self.c_estimate * self.c_estimate * trace_v / (epsilon * epsilon)).clamp(0.0, 1.0)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("certificate serializes")
    }
}

pub const SAFETY_FACTOR: f64 = 1.5;
pub const MIN_TRIALS: usize = 30;
/// Perturbation magnitudes tried: `scale * 2^k` for `k < LADDER`.
pub const LADDER: usize = 8;
const MAX_CONDITION: f64 = 1e12;

fn condition_number(h: &DMatrix<f64>) -> f64 {
    let e = SymmetricEigen::new(h.clone()).eigenvalues;
    let (lo, hi) = (e.min(), e.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Estimates the sensitivity constant by refitting on randomly perturbed
/// copies of `data`.
///
/// Every row is perturbed by i.i.d. normal entries of standard deviation
/// `perturbation_scale * 2^k` on a ladder of `k`. The ratio
/// `|phi' - phi| / sum_i |dx_i|` is recorded per trial; rungs whose largest
/// ratio stays within a factor 2 of the first rung's are stable. `eps_0` is
/// `c` times the mean input displacement on the largest stable rung.
pub fn estimate_sensitivity(
    learner: &dyn Learner,
    data: &Dataset,
    trials: usize,
    perturbation_scale: f64,
    stream: RandomStream,
) -> Result<UtilityCertificate> {
    if trials < MIN_TRIALS {
        return Err(Error::Domain(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    if !(perturbation_scale > 0.0 && perturbation_scale.is_finite()) {
        return Err(Error::Domain(format!("perturbation scale must be positive, got {perturbation_scale}")));
    }
    let phi = learner.fit(data)?;
    if let Some(h) = learner.hessian(&phi, data)? {
        let condition = condition_number(&h);
        if condition > MAX_CONDITION {
            return Err(Error::IllConditioned { condition });
        }
    }
    let (q, p) = (data.q(), data.p());
    let mut rungs = Vec::with_capacity(LADDER);
    for k in 0..LADDER {
        let scale = perturbation_scale * 2f64.powi(k as i32);
        let rung_stream = stream.fork(k as u64);
        let results = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = rung_stream.fork(t as u64).rng();
                let dx = DMatrix::from_fn(q, p, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
                let input: f64 = dx.row_iter().map(|r| r.norm()).sum();
                if input == 0.0 {
                    return Ok(None);
                }
                let moved = data.with_features(data.features() + dx)?;
                let phi2 = learner.fit(&moved).map_err(|e| Error::Trial {
                    trial: t,
                    source: Box::new(e),
                })?;
                Ok(Some(((phi2 - &phi).norm() / input, input)))
            })
            .collect::<Result<Vec<_>>>()?;
        let kept: Vec<(f64, f64)> = results.into_iter().flatten().collect();
        if kept.is_empty() {
            continue;
        }
        let max_ratio = kept.iter().map(|r| r.0).fold(0.0, f64::max);
        let mean_input = kept.iter().map(|r| r.1).sum::<f64>() / kept.len() as f64;
        rungs.push((max_ratio, mean_input));
    }
    let (base, _) = *rungs
        .first()
        .ok_or_else(|| Error::Domain("every perturbation was zero".into()))?;
    let stable: Vec<&(f64, f64)> = rungs
        .iter()
        .take_while(|(r, _)| *r <= 2.0 * base && *r >= 0.5 * base)
        .collect();
    let max_ratio = stable.iter().map(|r| r.0).fold(0.0, f64::max);
    let radius = stable.last().map(|r| r.1).unwrap_or(0.0);
    let c = (SAFETY_FACTOR * max_ratio).max(1.0);
    Ok(UtilityCertificate {
        c_estimate: c,
        epsilon_0_estimate: c * radius,
        bound_kind: learner.bound_kind(),
        max_ratio,
        trials,
        stable_scales: stable.len(),
    })
}

/// The probability floor for noise `mechanism`, refused outside `(0, eps_0)`.
pub fn utility_floor(certificate: &UtilityCertificate, mechanism: &dyn NoiseMechanism, epsilon: f64, q: usize) -> Result<f64> {
    let trace_v = mechanism.second_moment()?.trace();
    utility_floor_for_trace(certificate, trace_v, epsilon, q)
}

pub fn utility_floor_for_trace(certificate: &UtilityCertificate, trace_v: f64, epsilon: f64, q: usize) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    if epsilon >= certificate.epsilon_0_estimate {
        return Err(Error::Domain(format!(
            "epsilon {epsilon} is outside the validity radius {}",
            certificate.epsilon_0_estimate
        )));
    }
    if !(trace_v >= 0.0) {
        return Err(Error::Domain("noise second moment has negative trace".into()));
    }
    Ok(certificate.probability_floor(epsilon, trace_v, q))
}
