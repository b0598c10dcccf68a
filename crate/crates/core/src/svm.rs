//! Regularized soft-margin linear SVM.
//!
//! Solves
//!
//! ```text
//! min  1/2 a'a + rho/2 (b^2 + xi'xi) + theta 1'xi
//! s.t. y_i (a'x_i + b) >= 1 - xi_i,  xi_i >= 0
//! ```
//!
//! The slacks are eliminated (`xi_i = max(0, r_i)` with margin residual
//! `r_i = 1 - y_i (a'x_i + b)`), leaving a strictly convex piecewise
//! quadratic in `z = (a, b)` of dimension `p + 1`. Its kinks sit at
//! `r_i = 0`; the solver is a primal active-set method that walks from
//! kink to kink. Each row is either on the hinge branch (`r_i > 0`), the
//! flat branch (`r_i < 0`) or held at its kink (`r_i = 0`, working set).
//! Every iteration solves the equality-constrained quadratic for the current
//! assignment, steps toward it until a free row hits its kink, and, on a
//! full step, releases the working-set row whose multiplier leaves
//! `[0, theta]`. The multipliers of the final solve are the KKT multipliers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    /// Slack weight.
    pub theta: f64,
    /// Strict-convexity regularization on `b` and `xi`.
    pub rho: f64,
    /// Target for [`kkt_residual`].
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            theta: 1.0,
            rho: 1e-2,
            tolerance: 1e-8,
            max_iterations: 100_000,
        }
    }
}

impl SvmConfig {
    pub fn new(theta: f64, rho: f64) -> Result<Self> {
        let c = Self {
            theta,
            rho,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Domain(format!("theta must be positive, got {}", self.theta)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Domain(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Domain(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Domain("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Primal solution with the KKT multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmSolution {
    pub alpha: DVector<f64>,
    pub beta: f64,
    pub xi: DVector<f64>,
    /// Multipliers of the margin constraints.
    pub omega: DVector<f64>,
    /// Multipliers of `xi >= 0`.
    pub sigma_mult: DVector<f64>,
    pub kkt_residual: f64,
}

impl SvmSolution {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.alpha.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + self.beta
    }

    /// `[alpha; beta; xi]` as one vector.
    pub fn stacked(&self) -> DVector<f64> {
        let p = self.alpha.len();
        let q = self.xi.len();
        DVector::from_fn(p + 1 + q, |k, _| {
            if k < p {
                self.alpha[k]
            } else if k == p {
                self.beta
            } else {
                self.xi[k - p - 1]
            }
        })
    }
}

fn binary_labels(data: &Dataset) -> Result<&[f64]> {
    if !data.labels().is_binary() {
        return Err(Error::Domain("SVM training needs binary labels".into()));
    }
    Ok(data.label_values())
}

/// Margin values `y_i (a'x_i + b)`.
fn margins(data: &Dataset, alpha: &DVector<f64>, beta: f64) -> DVector<f64> {
    let y = data.label_values();
    let fx = data.features() * alpha;
    DVector::from_fn(data.q(), |i, _| y[i] * (fx[i] + beta))
}

/// `1/2 a'a + rho/2 (b^2 + xi'xi) + theta 1'xi`.
pub fn regularized_objective(config: &SvmConfig, alpha: &DVector<f64>, beta: f64, xi: &DVector<f64>) -> f64 {
    0.5 * alpha.norm_squared() + 0.5 * config.rho * (beta * beta + xi.norm_squared()) + config.theta * xi.sum()
}

/// The unregularized soft-margin objective `1/2 a'a + theta 1'xi`.
pub fn hinge_objective(theta: f64, alpha: &DVector<f64>, xi: &DVector<f64>) -> f64 {
    0.5 * alpha.norm_squared() + theta * xi.sum()
}

/// Smallest feasible slack for `(a, b)`: `xi_i = max(0, 1 - y_i(a'x_i + b))`.
pub fn feasible_slack(data: &Dataset, alpha: &DVector<f64>, beta: f64) -> DVector<f64> {
    margins(data, alpha, beta).map(|m| (1.0 - m).max(0.0))
}

/// Max-norm over every KKT equation: stationarity in `a`, `b`, `xi`, primal
/// and dual feasibility, and both complementary-slackness products.
pub fn kkt_residual(data: &Dataset, config: &SvmConfig, candidate: &SvmSolution) -> Result<f64> {
    let (q, p) = (data.q(), data.p());
    if candidate.alpha.len() != p {
        return Err(Error::dim("alpha", p, candidate.alpha.len()));
    }
    for (name, v) in [
        ("xi", &candidate.xi),
        ("omega", &candidate.omega),
        ("sigma", &candidate.sigma_mult),
    ] {
        if v.len() != q {
            return Err(Error::dim(name, q, v.len()));
        }
    }
    let y = binary_labels(data)?;
    let (theta, rho) = (config.theta, config.rho);
    let wy = DVector::from_fn(q, |i, _| candidate.omega[i] * y[i]);
    let mut res: f64 = 0.0;

    let alpha_stat = &candidate.alpha - data.features().transpose() * &wy;
    res = res.max(alpha_stat.amax());
    res = res.max((candidate.beta - wy.sum() / rho).abs());

    let m = margins(data, &candidate.alpha, candidate.beta);
    for i in 0..q {
        let (xi, w, s) = (candidate.xi[i], candidate.omega[i], candidate.sigma_mult[i]);
        res = res.max((rho * xi + theta - w - s).abs());
        res = res.max((1.0 - xi - m[i]).max(0.0));
        res = res.max((-xi).max(0.0));
        res = res.max((-w).max(0.0));
        res = res.max((-s).max(0.0));
        res = res.max((w * (m[i] - 1.0 + xi)).abs());
        res = res.max((xi * s).abs());
    }
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    Hinge,
    Flat,
    Kink,
}

struct ActiveSet<'a> {
    rows: &'a DMatrix<f64>,
    config: &'a SvmConfig,
    branch: Vec<Branch>,
    working: Vec<usize>,
}

impl ActiveSet<'_> {
    /// Minimizes the quadratic of the current branch assignment subject to
    /// the working-set rows sitting at their kink. Returns `(z, nu)`.
    fn solve(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.rows.ncols();
        let k = self.working.len();
        let (theta, rho) = (self.config.theta, self.config.rho);
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        for j in 0..n - 1 {
            kkt[(j, j)] = 1.0;
        }
        kkt[(n - 1, n - 1)] = rho;
        for (i, row) in self.rows.row_iter().enumerate() {
            if self.branch[i] != Branch::Hinge {
                continue;
            }
            for a in 0..n {
                rhs[a] += (theta + rho) * row[a];
                for b in 0..n {
                    kkt[(a, b)] += rho * row[a] * row[b];
                }
            }
        }
        for (slot, &i) in self.working.iter().enumerate() {
            for a in 0..n {
                kkt[(n + slot, a)] = self.rows[(i, a)];
                kkt[(a, n + slot)] = self.rows[(i, a)];
            }
            rhs[n + slot] = 1.0;
        }
        let lu = kkt.clone().full_piv_lu();
        let sol = match lu.solve(&rhs) {
            Some(mut sol) => {
                // one step of iterative refinement
                let resid = &rhs - &kkt * &sol;
                if let Some(corr) = lu.solve(&resid) {
                    sol += corr;
                }
                sol
            }
            // dependent kink rows: minimum-norm multipliers share the load
            None => kkt.svd(true, true).solve(&rhs, 1e-12).ok()?,
        };
        let z = sol.rows(0, n).into_owned();
        let nu = -sol.rows(n, k).into_owned();
        Some((z, nu))
    }
}

/// Trains the regularized SVM starting from `(a, b) = 0`.
pub fn train_svm(data: &Dataset, config: &SvmConfig) -> Result<SvmSolution> {
    train_svm_from(data, config, None)
}

/// Trains the regularized SVM from an optional starting point `(a, b)`.
pub fn train_svm_from(data: &Dataset, config: &SvmConfig, start: Option<(&DVector<f64>, f64)>) -> Result<SvmSolution> {
    config.validate()?;
    let y = binary_labels(data)?;
    let (q, p) = (data.q(), data.p());
    let n = p + 1;
    // rows a_i = y_i [x_i; 1]
    let rows = DMatrix::from_fn(q, n, |i, j| if j < p { y[i] * data.features()[(i, j)] } else { y[i] });

    let mut z = DVector::zeros(n);
    if let Some((alpha, beta)) = start {
        if alpha.len() != p {
            return Err(Error::dim("initial alpha", p, alpha.len()));
        }
        z.rows_mut(0, p).copy_from(alpha);
        z[p] = beta;
    }
    let residual_of = |z: &DVector<f64>| DVector::from_fn(q, |i, _| 1.0 - rows.row(i).dot(&z.transpose()));
    let r0 = residual_of(&z);
    let mut set = ActiveSet {
        rows: &rows,
        config,
        branch: r0.iter().map(|r| if *r > 0.0 { Branch::Hinge } else { Branch::Flat }).collect(),
        working: Vec::new(),
    };

    let mult_tol = 1e-11 * config.theta.max(1.0);
    let mut iterations = 0;
    let mut nu = DVector::zeros(0);
    let converged = loop {
        if iterations >= config.max_iterations {
            break false;
        }
        iterations += 1;
        let Some((target, new_nu)) = set.solve() else {
            return Err(Error::Eigen("singular KKT system in SVM active-set step".into()));
        };
        nu = new_nu;
        let d = &target - &z;
        let dnorm = d.amax();
        let r = residual_of(&z);

        // ratio test over free rows
        let mut step = 1.0;
        let mut blocking = None;
        // a step at roundoff level means the working set already pins z
        if dnorm > 1e-13 * (1.0 + z.amax()) {
            for i in 0..q {
                let slope = rows.row(i).dot(&d.transpose());
                let eps = 1e-13 * dnorm * rows.row(i).amax().max(1.0);
                let t = match set.branch[i] {
                    Branch::Hinge if slope > eps => r[i].max(0.0) / slope,
                    Branch::Flat if slope < -eps => r[i].min(0.0) / slope,
                    _ => continue,
                };
                if t < step {
                    step = t;
                    blocking = Some(i);
                }
            }
        }
        z += &d * step;

        if let Some(i) = blocking {
            set.branch[i] = Branch::Kink;
            set.working.push(i);
            continue;
        }

        // full step: release the worst multiplier outside [0, theta]
        let mut worst: Option<(usize, f64)> = None;
        for (slot, &v) in nu.iter().enumerate() {
            let violation = if v < -mult_tol {
                -v
            } else if v > config.theta + mult_tol {
                v - config.theta
            } else {
                0.0
            };
            if violation > 0.0 && worst.is_none_or(|(_, w)| violation > w) {
                worst = Some((slot, violation));
            }
        }
        match worst {
            None => break true,
            Some((slot, _)) => {
                let i = set.working.remove(slot);
                set.branch[i] = if nu[slot] < 0.0 { Branch::Flat } else { Branch::Hinge };
                let mut kept = nu.as_slice().to_vec();
                kept.remove(slot);
                nu = DVector::from_vec(kept);
            }
        }
    };

    let solution = assemble(data, config, &z, &set, &nu)?;
    if !converged || solution.kkt_residual > config.tolerance {
        return Err(Error::SolverNotConverged {
            iterations,
            residual: solution.kkt_residual,
            best: Box::new(solution),
        });
    }
    Ok(solution)
}

/// Recovers `(xi, omega, sigma)` from the final point and branch assignment.
fn assemble(data: &Dataset, config: &SvmConfig, z: &DVector<f64>, set: &ActiveSet<'_>, nu: &DVector<f64>) -> Result<SvmSolution> {
    let (q, p) = (data.q(), data.p());
    let alpha = z.rows(0, p).into_owned();
    let beta = z[p];
    let m = margins(data, &alpha, beta);
    let mut xi = DVector::zeros(q);
    let mut omega = DVector::zeros(q);
    let mut sigma = DVector::zeros(q);
    for i in 0..q {
        match set.branch[i] {
            Branch::Hinge => {
                xi[i] = (1.0 - m[i]).max(0.0);
                omega[i] = config.theta + config.rho * xi[i];
            }
            Branch::Flat => {
                sigma[i] = config.theta;
            }
            Branch::Kink => {}
        }
    }
    for (slot, &i) in set.working.iter().enumerate() {
        let w = nu.get(slot).copied().unwrap_or(0.0).clamp(0.0, config.theta);
        omega[i] = w;
        sigma[i] = config.theta - w;
    }
    let mut sol = SvmSolution {
        alpha,
        beta,
        xi,
        omega,
        sigma_mult: sigma,
        kkt_residual: 0.0,
    };
    sol.kkt_residual = kkt_residual(data, config, &sol)?;
    Ok(sol)
}

/// For each `rho_k`, the unregularized objective at the regularized solution
/// minus the same quantity at the smallest `rho` in the sequence.
pub fn verify_rho_limit(data: &Dataset, config: &SvmConfig, rho_sequence: &[f64]) -> Result<Vec<f64>> {
    if rho_sequence.is_empty() {
        return Err(Error::Domain("rho sequence is empty".into()));
    }
    if rho_sequence.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Domain("rho values must be positive".into()));
    }
    if rho_sequence.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Domain("rho sequence must be strictly decreasing".into()));
    }
    let objectives = rho_sequence
        .iter()
        .map(|&rho| {
            let cfg = SvmConfig { rho, ..*config };
            let sol = train_svm(data, &cfg)?;
            Ok(hinge_objective(config.theta, &sol.alpha, &sol.xi))
        })
        .collect::<Result<Vec<f64>>>()?;
    let reference = *objectives.last().expect("non-empty");
    Ok(objectives.iter().map(|o| o - reference).collect())
}

/// Fraction of rows with `y_i (a'x_i + b) > 0`.
pub fn success_rate(data: &Dataset, alpha: &DVector<f64>, beta: f64) -> Result<f64> {
    binary_labels(data)?;
    if alpha.len() != data.p() {
        return Err(Error::dim("alpha", data.p(), alpha.len()));
    }
    let m = margins(data, alpha, beta);
    Ok(m.iter().filter(|v| **v > 0.0).count() as f64 / data.q() as f64)
}

/// Plain-text model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub theta: f64,
    pub rho: f64,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub kkt_residual: f64,
}

impl SvmModel {
    pub fn from_solution(config: &SvmConfig, sol: &SvmSolution) -> Self {
        Self {
            theta: config.theta,
            rho: config.rho,
            alpha: sol.alpha.iter().copied().collect(),
            beta: sol.beta,
            kkt_residual: sol.kkt_residual,
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("model file: {e}")))
    }
}
