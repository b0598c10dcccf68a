//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use fisher_release::dataset::{Dataset, Labels};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Solves the regularized SVM through its dual by exact coordinate ascent:
///
/// max_{w >= 0} 1'w - 1/2 w'Kw - (y'w)^2 / (2 rho) - sum (w_i - theta)_+^2 / (2 rho)
///
/// with K_ij = y_i y_j x_i'x_j, then maps back with a = sum w_i y_i x_i and
/// b = y'w / rho. Shares no code with the primal active-set solver.
pub fn dual_oracle(data: &Dataset, theta: f64, rho: f64) -> (DVector<f64>, f64, DVector<f64>) {
    let x = data.features();
    let y = data.label_values();
    let (q, p) = (data.q(), data.p());
    let mut w = DVector::<f64>::zeros(q);
    let mut u = DVector::<f64>::zeros(p);
    let mut s = 0.0;
    let kdiag: Vec<f64> = (0..q).map(|i| x.row(i).norm_squared()).collect();
    for _sweep in 0..2_000_000 {
        let mut max_change: f64 = 0.0;
        for i in 0..q {
            let xi = x.row(i).transpose();
            let c0 = 1.0 - y[i] * xi.dot(&u) - y[i] * s / rho - (w[i] - theta).max(0.0) / rho;
            // derivative f(t) = c0 - a (t - w_i) - ((t - theta)_+ - (w_i - theta)_+) / rho
            let a = kdiag[i] + 1.0 / rho;
            let base = c0 + (w[i] - theta).max(0.0) / rho;
            let f = |t: f64| base - a * (t - w[i]) - (t - theta).max(0.0) / rho;
            let t = if f(0.0) <= 0.0 {
                0.0
            } else {
                let t1 = w[i] + base / a;
                if t1 <= theta {
                    t1
                } else {
                    (base + a * w[i] + theta / rho) / (a + 1.0 / rho)
                }
            };
            let delta = t - w[i];
            if delta != 0.0 {
                u += &xi * (delta * y[i]);
                s += delta * y[i];
                w[i] = t;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < 1e-16 {
            break;
        }
    }
    // recompute from scratch to shed accumulated drift
    let alpha = DVector::from_fn(p, |j, _| (0..q).map(|i| w[i] * y[i] * x[(i, j)]).sum());
    let beta = (0..q).map(|i| w[i] * y[i]).sum::<f64>() / rho;
    (alpha, beta, w)
}

pub fn random_binary_dataset(seed: u64, q: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(q);
    let x = DMatrix::from_fn(q, p, |_, _| rng.random_range(-2.0..2.0));
    let shift: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut feats = x.clone();
    for i in 0..q {
        let y = if i % 2 == 0 { 1.0 } else { -1.0 };
        for j in 0..p {
            feats[(i, j)] += y * shift[j];
        }
        labels.push(y);
    }
    Dataset::new(feats, Labels::Binary(labels)).unwrap()
}

/// `A A' + shift I` with `A` uniform in `[-1, 1]`.
pub fn random_spd(seed: u64, p: usize, shift: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    let mut m = &a * a.transpose();
    for j in 0..p {
        m[(j, j)] += shift;
    }
    (&m + m.transpose()) * 0.5
}

/// Principal square root by the Denman-Beavers iteration.
pub fn denman_beavers_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        let y2 = (&y + zi) * 0.5;
        let z2 = (&z + yi) * 0.5;
        let change = (&y2 - &y).amax();
        y = y2;
        z = z2;
        if change < 1e-15 * y.amax() {
            break;
        }
    }
    y
}

/// `max_{s in {-1,1}^p} |A s|_2` by enumeration.
pub fn brute_inf_to_2(a: &DMatrix<f64>) -> f64 {
    let p = a.ncols();
    let mut best: f64 = 0.0;
    for mask in 0u32..(1 << p) {
        let s = DVector::from_fn(p, |j, _| if mask >> j & 1 == 1 { 1.0 } else { -1.0 });
        best = best.max((a * s).norm());
    }
    best
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + h * k as f64);
    }
    s * h / 3.0
}
