//! Optimal noise supported on a box.
//!
//! With a diagonal scaling `Pi = diag(theta_i)` and support
//! `prod [lower_i, upper_i]`, the optimal density factorizes. Coordinate `i`
//! is the squared ground state of
//!
//! ```text
//! -u'' + (lambda / (4 theta_i)) m^2 u = mu u   on [sqrt(theta_i) lower_i, sqrt(theta_i) upper_i]
//! u = 0 at both ends,  int u^2 dm = 1
//! ```
//!
//! read in the variable `m = sqrt(theta_i) n`, so the density in `n` is
//! `sqrt(theta_i) u(sqrt(theta_i) n)^2`. Its objective contribution
//! `I_i / theta_i + lambda Var_i` equals `4 mu`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::{FisherInfo, NoiseMechanism};
use crate::stream::RandomStream;

pub const MIN_GRID_POINTS: usize = 64;
/// Default bound on `ode_residual / (mu max u)`.
pub const DEFAULT_RELATIVE_RESIDUAL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxConstraint {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Diagonal of `Pi`.
    pub theta_diag: Vec<f64>,
}

impl BoxConstraint {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, theta_diag: Vec<f64>) -> Result<Self> {
        let p = lower.len();
        if p == 0 {
            return Err(Error::Domain("box needs at least one coordinate".into()));
        }
        if upper.len() != p {
            return Err(Error::dim("box upper bounds", p, upper.len()));
        }
        if theta_diag.len() != p {
            return Err(Error::dim("box scaling diagonal", p, theta_diag.len()));
        }
        for i in 0..p {
            if !(lower[i].is_finite() && upper[i].is_finite() && lower[i] < upper[i]) {
                return Err(Error::Domain(format!(
                    "coordinate {i}: need finite lower < upper, got [{}, {}]",
                    lower[i], upper[i]
                )));
            }
            if !(theta_diag[i] > 0.0 && theta_diag[i].is_finite()) {
                return Err(Error::Domain(format!("coordinate {i}: theta must be positive")));
            }
        }
        Ok(Self {
            lower,
            upper,
            theta_diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, n: &[f64]) -> bool {
        n.len() == self.dim() && n.iter().enumerate().all(|(i, v)| *v > self.lower[i] && *v < self.upper[i])
    }
}

/// Discrete ground state on a uniform grid that includes both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSolution1D {
    pub grid: Vec<f64>,
    pub u_values: Vec<f64>,
    pub mu: f64,
    /// Max-norm residual of the ODE with a fourth-order stencil for `u''`.
    pub ode_residual: f64,
    pub normalization_error: f64,
    /// Coefficient `lambda / (4 theta)` of the potential.
    pub potential: f64,
}

/// Number of eigenvalues of the tridiagonal matrix below `x`.
fn sturm_count(diag: &[f64], off2: f64, x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for (k, d) in diag.iter().enumerate() {
        q = if k == 0 { d - x } else { d - x - off2 / q };
        if q == 0.0 {
            q = -f64::EPSILON * (d.abs() + x.abs()).max(f64::MIN_POSITIVE);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Solves `(T - shift) y = rhs` for `T` with constant off-diagonal `off`.
fn thomas(diag: &[f64], off: f64, shift: f64, rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0] - shift;
    c[0] = off / denom;
    d[0] = rhs[0] / denom;
    for k in 1..n {
        denom = diag[k] - shift - off * c[k - 1];
        c[k] = off / denom;
        d[k] = (rhs[k] - off * d[k - 1]) / denom;
    }
    let mut y = vec![0.0; n];
    y[n - 1] = d[n - 1];
    for k in (0..n - 1).rev() {
        y[k] = d[k] - c[k] * y[k + 1];
    }
    y
}

struct Operator {
    h: f64,
    diag: Vec<f64>,
    potential_values: Vec<f64>,
}

impl Operator {
    fn new(grid: &[f64], potential: f64) -> Self {
        let h = grid[1] - grid[0];
        let interior = &grid[1..grid.len() - 1];
        let potential_values: Vec<f64> = interior.iter().map(|m| potential * m * m).collect();
        let diag = potential_values.iter().map(|v| 2.0 / (h * h) + v).collect();
        Self {
            h,
            diag,
            potential_values,
        }
    }

    fn off(&self) -> f64 {
        -1.0 / (self.h * self.h)
    }

    /// `v'Tv / v'v` written as a sum of squares, free of cancellation.
    fn rayleigh(&self, v: &[f64]) -> f64 {
        let mut kinetic = 0.0;
        let mut prev = 0.0;
        for &x in v.iter().chain(std::iter::once(&0.0)) {
            kinetic += (x - prev) * (x - prev);
            prev = x;
        }
        let potential: f64 = v.iter().zip(&self.potential_values).map(|(x, w)| w * x * x).sum();
        let norm: f64 = v.iter().map(|x| x * x).sum();
        (kinetic / (self.h * self.h) + potential) / norm
    }

    /// Smallest eigenvalue bracket `[lo, hi]` with `count(lo) = 0`.
    fn bracket(&self) -> (f64, f64) {
        let off = self.off();
        let off2 = off * off;
        let mut lo = self.diag.iter().copied().fold(f64::INFINITY, f64::min) - 2.0 * off.abs();
        let mut hi = self.diag.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 2.0 * off.abs();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if sturm_count(&self.diag, off2, mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (lo, hi)
    }

    fn inverse_iteration(&self, shift: f64, start: &[f64], steps: usize) -> Vec<f64> {
        let mut v = start.to_vec();
        for _ in 0..steps {
            v = thomas(&self.diag, self.off(), shift, &v);
            let scale = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
            if !(scale > 0.0 && scale.is_finite()) {
                break;
            }
            v.iter_mut().for_each(|x| *x /= scale);
        }
        v
    }
}

fn uniform_grid(lower: f64, upper: f64, points: usize) -> Vec<f64> {
    let h = (upper - lower) / (points - 1) as f64;
    (0..points)
        .map(|k| if k == points - 1 { upper } else { lower + h * k as f64 })
        .collect()
}

/// Ground state of `-u'' + (lambda / (4 theta)) n^2 u = mu u` on
/// `[lower, upper]` with Dirichlet ends, as a probability density `u^2`.
pub fn solve_ground_state(lambda: f64, theta: f64, lower: f64, upper: f64, grid_points: usize) -> Result<EigenSolution1D> {
    solve_ground_state_with(lambda, theta, lower, upper, grid_points, DEFAULT_RELATIVE_RESIDUAL)
}

pub fn solve_ground_state_with(
    lambda: f64,
    theta: f64,
    lower: f64,
    upper: f64,
    grid_points: usize,
    relative_residual_target: f64,
) -> Result<EigenSolution1D> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Domain(format!("theta must be positive, got {theta}")));
    }
    if !(lower.is_finite() && upper.is_finite() && lower < upper) {
        return Err(Error::Domain(format!("need finite lower < upper, got [{lower}, {upper}]")));
    }
    if grid_points < MIN_GRID_POINTS {
        return Err(Error::Domain(format!("grid needs at least {MIN_GRID_POINTS} points, got {grid_points}")));
    }
    let potential = lambda / (4.0 * theta);
    let grid = uniform_grid(lower, upper, grid_points);
    let op = Operator::new(&grid, potential);
    let (lo, _) = op.bracket();

    // all pivots of T - lo are positive, so the elimination is stable
    let shift = lo - f64::EPSILON * lo.abs();
    let v = op.inverse_iteration(shift, &vec![1.0; op.diag.len()], 4);
    let mu = op.rayleigh(&v);
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Eigen(format!("ground eigenvalue is not positive: {mu}")));
    }
    let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let h = op.h;
    let mass: f64 = v.iter().map(|x| x * x).sum::<f64>() * h;
    let scale = sign / mass.sqrt();
    let mut u_values = Vec::with_capacity(grid_points);
    u_values.push(0.0);
    u_values.extend(v.iter().map(|x| (x * scale).max(0.0)));
    u_values.push(0.0);

    let normalization_error = (u_values.iter().map(|x| x * x).sum::<f64>() * h - 1.0).abs();
    let ode_residual = fourth_order_residual(&grid, &u_values, potential, mu);
    let umax = u_values.iter().copied().fold(0.0, f64::max);
    let relative = ode_residual / (mu * umax);
    if relative > relative_residual_target {
        return Err(Error::GridTooCoarse {
            grid_points,
            achieved: relative,
            target: relative_residual_target,
        });
    }
    Ok(EigenSolution1D {
        grid,
        u_values,
        mu,
        ode_residual,
        normalization_error,
        potential,
    })
}

/// `max |u'' + (mu - V) u|` with a five-point `u''`; ghost values beyond the
/// ends come from the odd reflection `u(a - h) = -u(a + h)`.
fn fourth_order_residual(grid: &[f64], u: &[f64], potential: f64, mu: f64) -> f64 {
    let n = u.len();
    let h = grid[1] - grid[0];
    let at = |k: isize| -> f64 {
        if k < 0 {
            -u[(-k) as usize]
        } else if k as usize >= n {
            -u[2 * (n - 1) - k as usize]
        } else {
            u[k as usize]
        }
    };
    let mut worst: f64 = 0.0;
    for k in 1..n - 1 {
        let k = k as isize;
        let d2 = (-at(k - 2) + 16.0 * at(k - 1) - 30.0 * at(k) + 16.0 * at(k + 1) - at(k + 2)) / (12.0 * h * h);
        let m = grid[k as usize];
        worst = worst.max((d2 + (mu - potential * m * m) * at(k)).abs());
    }
    worst
}

/// Outcome of re-solving with `mu` held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualAscentCheck {
    pub mu: f64,
    pub u_change: f64,
}

impl EigenSolution1D {
    pub fn spacing(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    /// `int u'^2` with forward differences; equals `mu - int V u^2` on the grid.
    pub fn kinetic(&self) -> f64 {
        let h = self.spacing();
        self.u_values.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / h
    }

    /// `4 int u'^2` and an error estimate from central differences.
    pub fn fisher(&self) -> (f64, f64) {
        let h = self.spacing();
        let u = &self.u_values;
        let n = u.len();
        let deriv = |k: usize| -> f64 {
            if k == 0 {
                (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h)
            } else if k == n - 1 {
                (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * h)
            } else {
                (u[k + 1] - u[k - 1]) / (2.0 * h)
            }
        };
        let central: f64 = (0..n)
            .map(|k| {
                let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
                w * deriv(k).powi(2)
            })
            .sum::<f64>()
            * h;
        let value = 4.0 * self.kinetic();
        (value, (value - 4.0 * central).abs())
    }

    /// One shifted inverse-iteration solve with `mu` fixed.
    pub fn dual_ascent_check(&self) -> DualAscentCheck {
        let op = Operator::new(&self.grid, self.potential);
        let interior = &self.u_values[1..self.u_values.len() - 1];
        let shift = self.mu * (1.0 - 1e-9);
        let v = op.inverse_iteration(shift, interior, 1);
        let norm = (v.iter().map(|x| x * x).sum::<f64>() * op.h).sqrt();
        let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        let u_change = v
            .iter()
            .zip(interior)
            .map(|(a, b)| (sign * a / norm - b).abs())
            .fold(0.0, f64::max);
        DualAscentCheck {
            mu: op.rayleigh(&v),
            u_change,
        }
    }

    /// Two-column CSV `grid,u`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["grid", "u"])?;
        for (x, u) in self.grid.iter().zip(&self.u_values) {
            w.write_record([x.to_string(), u.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One coordinate of the box mechanism, as a piecewise-linear density in `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedFactor {
    pub theta: f64,
    pub solution: EigenSolution1D,
    nodes: Vec<f64>,
    density: Vec<f64>,
    cdf: Vec<f64>,
}

impl ConstrainedFactor {
    fn new(lambda: f64, theta: f64, lower: f64, upper: f64, grid_points: usize) -> Result<Self> {
        let r = theta.sqrt();
        let solution = solve_ground_state(lambda, theta, r * lower, r * upper, grid_points)?;
        let mut nodes: Vec<f64> = solution.grid.iter().map(|m| m / r).collect();
        nodes[0] = lower;
        *nodes.last_mut().expect("grid is non-empty") = upper;
        let density: Vec<f64> = solution.u_values.iter().map(|u| r * u * u).collect();
        let mut cdf = vec![0.0; nodes.len()];
        for k in 1..nodes.len() {
            cdf[k] = cdf[k - 1] + 0.5 * (nodes[k] - nodes[k - 1]) * (density[k] + density[k - 1]);
        }
        Ok(Self {
            theta,
            solution,
            nodes,
            density,
            cdf,
        })
    }

    pub fn support(&self) -> (f64, f64) {
        (self.nodes[0], self.nodes[self.nodes.len() - 1])
    }

    fn segment(&self, x: f64) -> Option<usize> {
        let (a, b) = self.support();
        if !(x >= a && x <= b) {
            return None;
        }
        Some(self.nodes.partition_point(|v| *v <= x).clamp(1, self.nodes.len() - 1) - 1)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self.segment(x) {
            None => 0.0,
            Some(k) => {
                let t = (x - self.nodes[k]) / (self.nodes[k + 1] - self.nodes[k]);
                self.density[k] + t * (self.density[k + 1] - self.density[k])
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (a, b) = self.support();
        if x <= a {
            return 0.0;
        }
        if x >= b {
            return self.mass();
        }
        let k = self.segment(x).expect("inside support");
        let w = self.nodes[k + 1] - self.nodes[k];
        let t = x - self.nodes[k];
        let slope = (self.density[k + 1] - self.density[k]) / w;
        self.cdf[k] + self.density[k] * t + 0.5 * slope * t * t
    }

    pub fn mass(&self) -> f64 {
        self.cdf[self.cdf.len() - 1]
    }

    /// `int n^k f(n) dn` for `k <= 2`, exact for the piecewise-linear density.
    fn moment(&self, power: i32) -> f64 {
        self.nodes
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, f)| {
                let mid = 0.5 * (x[0] + x[1]);
                let g = |v: f64, fv: f64| v.powi(power) * fv;
                (x[1] - x[0]) / 6.0 * (g(x[0], f[0]) + 4.0 * g(mid, 0.5 * (f[0] + f[1])) + g(x[1], f[1]))
            })
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn second_moment(&self) -> f64 {
        self.moment(2)
    }

    /// Fisher information of the factor in `n` and its error estimate.
    pub fn fisher(&self) -> (f64, f64) {
        let (value, error) = self.solution.fisher();
        (self.theta * value, self.theta * error)
    }

    /// Inverse-CDF draw, strictly inside the support.
    pub fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let target = rng.random::<f64>() * self.mass();
        let k = (self.cdf.partition_point(|c| *c <= target)).clamp(1, self.cdf.len() - 1) - 1;
        let rem = target - self.cdf[k];
        let w = self.nodes[k + 1] - self.nodes[k];
        let f0 = self.density[k];
        let slope = (self.density[k + 1] - f0) / w;
        // solve f0 t + slope t^2 / 2 = rem in the stable form
        let disc = (f0 * f0 + 2.0 * slope * rem).max(0.0);
        let t = if f0 + disc.sqrt() > 0.0 {
            2.0 * rem / (f0 + disc.sqrt())
        } else {
            0.5 * w
        };
        let x = self.nodes[k] + t.clamp(0.0, w);
        let (a, b) = self.support();
        x.clamp(a.next_up(), b.next_down())
    }
}

/// Product-form optimal noise on a box.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedMechanism {
    pub constraint: BoxConstraint,
    pub lambda: f64,
    pub grid_points: usize,
    factors: Vec<ConstrainedFactor>,
}

impl ConstrainedMechanism {
    pub fn factors(&self) -> &[ConstrainedFactor] {
        &self.factors
    }

    /// Joint density at `n`.
    pub fn density(&self, n: &[f64]) -> f64 {
        n.iter().zip(&self.factors).map(|(x, f)| f.pdf(*x)).product()
    }

    /// Largest fourth-order ODE residual over the factors.
    pub fn max_ode_residual(&self) -> f64 {
        self.factors.iter().map(|f| f.solution.ode_residual).fold(0.0, f64::max)
    }
}

pub fn constrained_mechanism(constraint: &BoxConstraint, lambda: f64, grid_points: usize) -> Result<ConstrainedMechanism> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    let factors = (0..constraint.dim())
        .into_par_iter()
        .map(|i| {
            ConstrainedFactor::new(
                lambda,
                constraint.theta_diag[i],
                constraint.lower[i],
                constraint.upper[i],
                grid_points,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConstrainedMechanism {
        constraint: constraint.clone(),
        lambda,
        grid_points,
        factors,
    })
}

impl NoiseMechanism for ConstrainedMechanism {
    fn kind(&self) -> &'static str {
        "constrained"
    }

    fn dim(&self) -> usize {
        self.factors.len()
    }

    fn fisher_information(&self) -> Result<FisherInfo> {
        let p = self.factors.len();
        let parts: Vec<(f64, f64)> = self.factors.iter().map(|f| f.fisher()).collect();
        let m = DMatrix::from_fn(p, p, |i, j| if i == j { parts[i].0 } else { 0.0 });
        FisherInfo::new(m, parts.iter().map(|x| x.1).sum())
    }

    fn second_moment(&self) -> Result<DMatrix<f64>> {
        let p = self.factors.len();
        let means: Vec<f64> = self.factors.iter().map(|f| f.mean()).collect();
        Ok(DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                self.factors[i].second_moment()
            } else {
                means[i] * means[j]
            }
        }))
    }

    fn sample(&self, count: usize, stream: RandomStream) -> DMatrix<f64> {
        sample_constrained(self, count, stream)
    }
}

pub fn sample_constrained(mechanism: &ConstrainedMechanism, count: usize, stream: RandomStream) -> DMatrix<f64> {
    let p = mechanism.factors.len();
    let mut out = DMatrix::zeros(count, p);
    for i in 0..count {
        let mut rng = stream.fork(i as u64).rng();
        for (j, f) in mechanism.factors.iter().enumerate() {
            out[(i, j)] = f.sample(&mut rng);
        }
    }
    out
}
