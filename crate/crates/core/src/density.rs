//! One-dimensional noise densities and their product extension.
//!
//! These back the comparison battery for the optimal mechanism and any
//! separable noise law whose Fisher information is found by quadrature.

use std::f64::consts::PI;
use std::fmt::Debug;

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal, StudentT as StudentTDist};

use crate::error::{Error, Result};
use crate::privacy::{FisherInfo, NoiseMechanism};
use crate::quadrature::{integrate_split, DEFAULT_ABS_TOL};
use crate::stream::RandomStream;

/// Normalization slack accepted before a density is rejected.
pub const MASS_TOL: f64 = 1e-6;

pub trait Density1D: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn pdf(&self, x: f64) -> f64;

    /// `d/dx ln pdf(x)`.
    fn score(&self, x: f64) -> f64;

    /// Points where the density is not smooth; quadrature splits there.
    fn breaks(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1D {
    pub sd: f64,
}

impl Density1D for Gaussian1D {
    fn name(&self) -> &'static str {
        "gaussian"
    }
    fn pdf(&self, x: f64) -> f64 {
        let z = x / self.sd;
        (-0.5 * z * z).exp() / (self.sd * (2.0 * PI).sqrt())
    }
    fn score(&self, x: f64) -> f64 {
        -x / (self.sd * self.sd)
    }
    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.sd * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Laplace1D {
    pub scale: f64,
}

impl Density1D for Laplace1D {
    fn name(&self) -> &'static str {
        "laplace"
    }
    fn pdf(&self, x: f64) -> f64 {
        (-x.abs() / self.scale).exp() / (2.0 * self.scale)
    }
    fn score(&self, x: f64) -> f64 {
        -x.signum() / self.scale
    }
    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let u: f64 = rng.random::<f64>() - 0.5;
        -self.scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }
}

/// Logistic density with scale `s`: variance `pi^2 s^2 / 3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logistic1D {
    pub scale: f64,
}

impl Logistic1D {
    pub fn with_variance(variance: f64) -> Self {
        Self {
            scale: (3.0 * variance).sqrt() / PI,
        }
    }
}

impl Density1D for Logistic1D {
    fn name(&self) -> &'static str {
        "logistic"
    }
    fn pdf(&self, x: f64) -> f64 {
        let e = (-(x / self.scale).abs()).exp();
        e / (self.scale * (1.0 + e) * (1.0 + e))
    }
    fn score(&self, x: f64) -> f64 {
        -(x / (2.0 * self.scale)).tanh() / self.scale
    }
    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        self.scale * (u / (1.0 - u)).ln()
    }
}

/// Scaled Student-t with `nu` degrees of freedom: variance
/// `s^2 nu / (nu - 2)` for `nu > 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentT1D {
    pub nu: f64,
    pub scale: f64,
}

impl StudentT1D {
    pub fn with_variance(nu: f64, variance: f64) -> Result<Self> {
        if !(nu > 2.0) {
            return Err(Error::Domain(format!("finite variance needs nu > 2, got {nu}")));
        }
        Ok(Self {
            nu,
            scale: (variance * (nu - 2.0) / nu).sqrt(),
        })
    }

    fn log_norm(&self) -> f64 {
        ln_gamma((self.nu + 1.0) / 2.0) - ln_gamma(self.nu / 2.0) - 0.5 * (self.nu * PI).ln() - self.scale.ln()
    }
}

impl Density1D for StudentT1D {
    fn name(&self) -> &'static str {
        "student_t"
    }
    fn pdf(&self, x: f64) -> f64 {
        let z = x / self.scale;
        (self.log_norm() - 0.5 * (self.nu + 1.0) * (1.0 + z * z / self.nu).ln()).exp()
    }
    fn score(&self, x: f64) -> f64 {
        -(self.nu + 1.0) * x / (self.nu * self.scale * self.scale + x * x)
    }
    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let t = StudentTDist::new(self.nu).expect("nu > 0");
        self.scale * t.sample(rng)
    }
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Moments and Fisher information of one factor, by quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorSummary {
    pub mass: f64,
    pub mean: f64,
    pub second_moment: f64,
    pub fisher: f64,
    pub error: f64,
}

pub fn summarize(d: &dyn Density1D) -> Result<FactorSummary> {
    let (a, b) = d.support();
    let breaks = d.breaks();
    let tol = DEFAULT_ABS_TOL;
    let mass = integrate_split(|x| d.pdf(x), a, b, &breaks, tol * 1e-2)?;
    if (mass.value - 1.0).abs() > MASS_TOL {
        return Err(Error::NotNormalized { mass: mass.value });
    }
    let mean = integrate_split(|x| x * d.pdf(x), a, b, &breaks, tol)?;
    let second = integrate_split(|x| x * x * d.pdf(x), a, b, &breaks, tol)?;
    let fisher = integrate_split(
        |x| {
            let f = d.pdf(x);
            if f > 0.0 {
                let s = d.score(x);
                f * s * s
            } else {
                0.0
            }
        },
        a,
        b,
        &breaks,
        tol,
    )?;
    Ok(FactorSummary {
        mass: mass.value,
        mean: mean.value,
        second_moment: second.value,
        fisher: fisher.value,
        error: mass.error + mean.error + second.error + fisher.error,
    })
}

/// Noise with independent coordinates, coordinate `j` drawn from `factors[j]`.
#[derive(Debug)]
pub struct ProductDensity {
    factors: Vec<Box<dyn Density1D>>,
}

impl ProductDensity {
    pub fn new(factors: Vec<Box<dyn Density1D>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Domain("product density needs at least one factor".into()));
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[Box<dyn Density1D>] {
        &self.factors
    }

    pub fn summaries(&self) -> Result<Vec<FactorSummary>> {
        self.factors.iter().map(|f| summarize(f.as_ref())).collect()
    }
}

impl NoiseMechanism for ProductDensity {
    fn kind(&self) -> &'static str {
        "product"
    }

    fn dim(&self) -> usize {
        self.factors.len()
    }

    fn fisher_information(&self) -> Result<FisherInfo> {
        let s = self.summaries()?;
        let diag = DMatrix::from_fn(s.len(), s.len(), |i, j| if i == j { s[i].fisher } else { 0.0 });
        FisherInfo::new(diag, s.iter().map(|f| f.error).sum())
    }

    fn second_moment(&self) -> Result<DMatrix<f64>> {
        let s = self.summaries()?;
        Ok(DMatrix::from_fn(s.len(), s.len(), |i, j| {
            if i == j {
                s[i].second_moment
            } else {
                s[i].mean * s[j].mean
            }
        }))
    }

    fn sample(&self, count: usize, stream: RandomStream) -> DMatrix<f64> {
        let p = self.factors.len();
        let mut out = DMatrix::zeros(count, p);
        for i in 0..count {
            let mut rng = stream.fork(i as u64).rng();
            for j in 0..p {
                out[(i, j)] = self.factors[j].sample(&mut rng);
            }
        }
        out
    }
}
