//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always reach
//! stdout.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{dual_oracle, random_binary_dataset, random_spd};
use fisher_release::constrained::{solve_ground_state, solve_ground_state_with};
use fisher_release::correlated::{build_invariance_operator, sample_correlated, CorrelatedMechanism, correlated_certificate};
use fisher_release::dataset::{CsvOptions, CsvTable, Dataset, LabelColumn, LabelEncoding, Labels};
use fisher_release::density::{Density1D, Logistic1D, ProductDensity, StudentT1D};
use fisher_release::harness::{run_experiment, ExperimentConfig, MechanismKind};
use fisher_release::iid::{obfuscate, optimal_iid_mechanism, optimal_objective, p_lambda_objective, sample_iid, GaussianNoise};
use fisher_release::learner::{estimate_sensitivity, utility_floor, Learner, RidgeLearner, SvmLearner};
use fisher_release::privacy::{adversary_floor, crb_bounds, dp_certify, weighted_squared_error, NoiseMechanism};
use fisher_release::scaling::ScalingMatrix;
use fisher_release::stream::RandomStream;
use fisher_release::svm::{train_svm, verify_rho_limit, SvmConfig};
use fisher_release::synthetic::{BlobSpec, LinearSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn crb_floors() -> Check {
    let s = ScalingMatrix::identity(2);
    let mut got = Vec::new();
    for (lambda, expect) in [(1e-4, 200.0), (1e-2, 20.0), (1.0, 2.0)] {
        let m = ok(optimal_iid_mechanism(lambda, &s))?;
        let floor = ok(crb_bounds(&ok(m.fisher_information())?, &s))?.crb_floor;
        ensure!((floor - expect).abs() <= 1e-9, "lambda {lambda}: floor {floor}, expected {expect}");
        got.push(floor);
    }
    Ok(format!("floors {got:?}"))
}

fn crb_tightness() -> Check {
    let n = 100_000;
    let mut notes = Vec::new();
    for (k, (s, lambda)) in [
        (ScalingMatrix::identity(2), 1e-2),
        (ok(ScalingMatrix::new(random_spd(5, 3, 0.3)))?, 0.5),
    ]
    .into_iter()
    .enumerate()
    {
        let m = ok(optimal_iid_mechanism(lambda, &s))?;
        let floor = ok(crb_bounds(&ok(m.fisher_information())?, &s))?.crb_floor;
        let noise = sample_iid(&m, n, RandomStream::new(k as u64, 9));
        // the unbiased read-out x_hat = x + n errs by the noise row
        let errs: Vec<f64> = noise
            .row_iter()
            .map(|r| weighted_squared_error(&s, &r.iter().copied().collect::<Vec<_>>()))
            .collect();
        let mean = errs.iter().sum::<f64>() / n as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        ensure!((mean - floor).abs() <= 3.0 * se, "case {k}: mean {mean}, floor {floor}, se {se}");
        notes.push(format!("{:.2} se", (mean - floor).abs() / se));
    }
    Ok(format!("deviation {}", notes.join(", ")))
}

fn battery_optimality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut margin = f64::INFINITY;
    for k in 0..5u64 {
        let p = 2 + (k as usize) % 2;
        let s = ok(ScalingMatrix::new(random_spd(300 + k, p, 0.3)))?;
        let lambda = 10f64.powf(rng.random_range(-2.0..2.0));
        let bound = 2.0 * lambda.sqrt() * s.trace_power(-0.5);
        ensure!((optimal_objective(lambda, &s) - bound).abs() <= 1e-9 * bound, "closed form mismatch");
        let pinv = s.inverse();
        let variances: Vec<f64> = (0..p).map(|j| (pinv[(j, j)] / lambda).sqrt()).collect();
        let product = |f: &dyn Fn(f64) -> Box<dyn Density1D>| -> std::result::Result<Box<dyn NoiseMechanism>, String> {
            Ok(Box::new(ok(ProductDensity::new(variances.iter().map(|v| f(*v)).collect()))?))
        };
        let battery: Vec<(&str, Box<dyn NoiseMechanism>)> = vec![
            ("logistic", product(&|v| Box::new(Logistic1D::with_variance(v)))?),
            ("t5", product(&|v| Box::new(StudentT1D::with_variance(5.0, v).unwrap()))?),
            ("t10", product(&|v| Box::new(StudentT1D::with_variance(10.0, v).unwrap()))?),
            ("perturbed gaussian", {
                let opt = ok(optimal_iid_mechanism(lambda, &s))?;
                let bump = random_spd(400 + k, p, 0.0) * (0.2 * opt.covariance().trace() / p as f64);
                Box::new(ok(GaussianNoise::new(opt.covariance() + bump))?)
            }),
        ];
        for (name, density) in battery {
            let obj = ok(p_lambda_objective(density.as_ref(), lambda, &s))?;
            ensure!(obj >= bound - 1e-6, "{name} at lambda {lambda}: {obj} < {bound}");
            margin = margin.min(obj - bound);
        }
    }
    Ok(format!("smallest excess {margin:.3e}"))
}

fn dp_certification() -> Check {
    let one = ScalingMatrix::identity(1);
    let delta = (-0.5f64).exp();
    let eps = ok(dp_certify(1.0, &one, delta))?;
    ensure!((eps - 2.0).abs() <= 1e-12, "epsilon_min {eps}");
    let floor = ok(adversary_floor(2.0, delta, &one))?;
    ensure!((floor - 1.0).abs() <= 1e-12, "adversary floor {floor}");
    let s = ok(ScalingMatrix::new(random_spd(3, 3, 0.3)))?;
    let lambdas: Vec<f64> = (0..10).map(|k| 10f64.powf(-4.0 + 0.5 * k as f64)).collect();
    let deltas: Vec<f64> = (0..10).map(|k| 10f64.powf(-9.0 + 0.9 * k as f64)).collect();
    let grid: Vec<Vec<f64>> = lambdas
        .iter()
        .map(|l| deltas.iter().map(|d| dp_certify(*l, &s, *d).unwrap()).collect())
        .collect();
    for i in 0..10 {
        for j in 0..10 {
            ensure!(i == 0 || grid[i][j] > grid[i - 1][j], "not increasing in lambda at ({i},{j})");
            ensure!(j == 0 || grid[i][j] < grid[i][j - 1], "not decreasing in delta at ({i},{j})");
        }
    }
    Ok(format!("epsilon_min {eps}, floor {floor}"))
}

fn schrodinger_solver() -> Check {
    let (a, b) = (-0.5, 1.5);
    let l = b - a;
    let free = ok(solve_ground_state(0.0, 1.0, a, b, 1024))?;
    let mu_free = (PI / l).powi(2);
    ensure!((free.mu - mu_free).abs() <= 1e-4 * mu_free, "box mu {} vs {mu_free}", free.mu);
    let sine = free
        .grid
        .iter()
        .zip(&free.u_values)
        .map(|(x, u)| (u - (2.0 / l).sqrt() * (PI * (x - a) / l).sin()).abs())
        .fold(0.0, f64::max);
    ensure!(sine <= 1e-4, "sine sup error {sine}");

    let harm = ok(solve_ground_state(4.0, 1.0, -8.0, 8.0, 1024))?;
    ensure!((harm.mu - 1.0).abs() <= 1e-3, "harmonic mu {}", harm.mu);
    let gauss = harm
        .grid
        .iter()
        .zip(&harm.u_values)
        .map(|(x, u)| (u - PI.powf(-0.25) * (-x * x / 2.0).exp()).abs())
        .fold(0.0, f64::max);
    ensure!(gauss <= 1e-3, "gaussian sup error {gauss}");
    ensure!(free.normalization_error <= 1e-6 && harm.normalization_error <= 1e-6, "normalization");

    let errs: Vec<f64> = [64usize, 128, 256]
        .iter()
        .map(|c| solve_ground_state_with(4.0, 1.0, -8.0, 8.0, c + 1, 1.0).map(|s| (s.mu - 1.0).abs()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    ensure!(ratios.iter().all(|r| (r - 4.0).abs() < 0.3), "convergence ratios {ratios:?}");
    Ok(format!("mu {:.6} / {:.6}, halving ratios {ratios:.3?}", free.mu, harm.mu))
}

/// Reads a user-supplied WDBC table, with or without a header row.
fn load_wdbc(path: &Path) -> std::result::Result<Dataset, String> {
    let text = ok(std::fs::read_to_string(path))?;
    let first = text.lines().next().unwrap_or("");
    let text = if first.split(',').next().is_some_and(|f| f.trim().parse::<f64>().is_ok()) {
        let names: Vec<String> = (1..=30).map(|k| format!("f{k}")).collect();
        format!("id,diagnosis,{}\n{text}", names.join(","))
    } else {
        text
    };
    let options = CsvOptions {
        label_column: LabelColumn::parse("diagnosis"),
        encoding: ok(LabelEncoding::parse_map("M=1,B=-1"))?,
        standardize: false,
        ignore_columns: vec![LabelColumn::parse("id")],
    };
    Ok(ok(CsvTable::from_bytes(text.as_bytes(), &options))?.dataset)
}

fn correlated_invariance() -> Check {
    let data = ok(BlobSpec::two_blobs().generate(RandomStream::new(20190601, 2)))?;
    let cfg = SvmConfig::default();
    let sol = ok(train_svm(&data, &cfg))?;
    let mech = ok(CorrelatedMechanism::new(ok(build_invariance_operator(&sol, &data))?, 100.0))?;
    let tol = 10.0 * cfg.tolerance;
    let mut worst: f64 = 0.0;
    for t in 0..50u64 {
        let w = sample_correlated(&mech, RandomStream::new(20190601, 1).fork(t));
        let ow = ok(mech.operator.apply_omega(&w))?.norm();
        ensure!(ow <= 1e-8 * w.norm(), "trial {t}: |Omega w| = {ow:e}");
        let released = ok(data.from_stacked(&(data.stacked() + &w)))?;
        let again = ok(train_svm(&released, &cfg))?;
        let diff = (&again.alpha - &sol.alpha)
            .amax()
            .max((again.beta - sol.beta).abs())
            .max((&again.xi - &sol.xi).amax());
        ensure!(diff <= tol, "trial {t}: solution moved by {diff:e}");
        worst = worst.max(diff);
    }
    let wdbc = match std::env::var_os("FISHER_WDBC_CSV") {
        None => "WDBC check skipped (FISHER_WDBC_CSV unset)".to_string(),
        Some(path) => {
            let data = load_wdbc(Path::new(&path))?;
            let sol = ok(train_svm(&data, &SvmConfig::new(1.0, 0.01).map_err(|e| e.to_string())?))?;
            let m = 1.0;
            let mech = ok(CorrelatedMechanism::new(ok(build_invariance_operator(&sol, &data))?, m))?;
            let cert = ok(correlated_certificate(&mech, &ScalingMatrix::identity(data.p())))?;
            let floor = cert.support_floor.unwrap_or(cert.weak_floor) / m;
            ensure!(floor >= 28.4 * 0.95, "WDBC floor {floor:.3} m is below 28.4 m within 5%");
            format!("WDBC floor {floor:.2} m")
        }
    };
    Ok(format!("worst drift {worst:.1e}; {wdbc}"))
}

fn svm_solver() -> Check {
    let cfg = SvmConfig::default();
    let mut worst_gap: f64 = 0.0;
    for seed in 0..10u64 {
        let q = 6 + (seed as usize * 7) % 15;
        let p = 1 + (seed as usize) % 5;
        let d = random_binary_dataset(seed, q, p);
        let sol = ok(train_svm(&d, &cfg))?;
        ensure!(sol.kkt_residual <= 1e-8, "seed {seed}: residual {:e}", sol.kkt_residual);
        let (a, b, _) = dual_oracle(&d, cfg.theta, cfg.rho);
        let gap = (&sol.alpha - a).amax().max((sol.beta - b).abs());
        ensure!(gap <= 1e-6, "seed {seed}: oracle gap {gap:e}");
        worst_gap = worst_gap.max(gap);
    }
    let blobs = ok(BlobSpec::two_blobs().generate(RandomStream::new(20190601, 2)))?;
    ensure!(ok(train_svm(&blobs, &cfg))?.kkt_residual <= 1e-8, "blob fixture residual");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    for _ in 0..15 {
        let x = [rng.random_range(-1.0..3.0), rng.random_range(-2.0..2.0)];
        let y = if rng.random_bool(0.8) { 1.0 } else { -1.0 };
        rows.extend_from_slice(&x);
        labels.push(y);
        rows.extend_from_slice(&[-x[0], -x[1]]);
        labels.push(-y);
    }
    let sym = ok(Dataset::new(DMatrix::from_row_slice(30, 2, &rows), Labels::Binary(labels)))?;
    let sol = ok(train_svm(&sym, &cfg))?;
    ensure!(sol.beta.abs() <= cfg.tolerance, "symmetric beta {}", sol.beta);

    let two = ok(Dataset::new(DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]), Labels::Binary(vec![-1.0, 1.0])))?;
    let rhos: Vec<f64> = (0..7).map(|k| 10f64.powi(-k)).collect();
    let gaps = ok(verify_rho_limit(&two, &cfg, &rhos))?;
    ensure!(gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12), "gaps not decreasing {gaps:?}");
    let last = *gaps.last().unwrap();
    ensure!(last < 1e-4, "final gap {last:e}");
    Ok(format!("oracle gap {worst_gap:.1e}, final rho gap {last:.1e}"))
}

fn matched_comparison() -> Check {
    let mut c = ok(ExperimentConfig::load(&configs_dir().join("blobs.toml")))?;
    c.mechanisms = vec![MechanismKind::OptimalGaussian, MechanismKind::LaplaceMatched];
    c.trials = 100;
    let out = ok(run_experiment(&c))?;
    for cmp in &out.summary.comparison {
        ensure!(
            cmp.difference >= -2.0 * cmp.difference_stderr,
            "lambda {}: optimal {} below laplace {} by more than 2 se",
            cmp.lambda,
            cmp.optimal,
            cmp.laplace
        );
    }
    let opt: Vec<_> = out.records.iter().filter(|r| r.mechanism == "optimal_gaussian").collect();
    for w in opt.windows(2) {
        ensure!(
            w[1].value >= w[0].value - w[0].stderr.max(w[1].stderr),
            "success drops from {} to {} between lambda {:?} and {:?}",
            w[0].value,
            w[1].value,
            w[0].lambda,
            w[1].lambda
        );
    }

    let ridge = ok(ExperimentConfig::from_text(
        r#"
seed = 20190601
trials = 100
learner = "ridge"
sigma = 1e-5
mechanisms = ["optimal_gaussian", "laplace_matched"]
lambda_grid = [1e-4, 1e-3, 1e-2, 1e-1, 1.0]

[dataset]
kind = "linear"
weights = [1.0, -2.0, 0.5]
count = 200
noise_sd = 0.1
"#,
        Path::new("."),
    ))?;
    let rout = ok(run_experiment(&ridge))?;
    for cmp in &rout.summary.comparison {
        ensure!(
            cmp.difference <= 2.0 * cmp.difference_stderr,
            "ridge lambda {}: optimal loss {} above laplace {} by more than 2 se",
            cmp.lambda,
            cmp.optimal,
            cmp.laplace
        );
    }
    let diffs: Vec<String> = out.summary.comparison.iter().map(|c| format!("{:+.3}", c.difference)).collect();
    Ok(format!("svm differences [{}]", diffs.join(", ")))
}

fn utility_floors() -> Check {
    let mut lines = Vec::new();
    let blobs = ok(BlobSpec::two_blobs().generate(RandomStream::new(20190601, 2)))?;
    let svm = SvmLearner { config: SvmConfig::default() };
    let svm_cert = ok(estimate_sensitivity(&svm, &blobs, 30, 1e-3, RandomStream::new(8, 0)))?;
    let linear = ok(LinearSpec {
        weights: vec![1.5, -0.5, 2.0],
        count: 60,
        noise_sd: 0.3,
        feature_scale: None,
    }
    .generate(RandomStream::new(11, 2)))?;
    let ridge = ok(RidgeLearner::new(1e-2))?;
    let ridge_cert = ok(estimate_sensitivity(&ridge, &linear, 30, 1e-3, RandomStream::new(9, 0)))?;

    let cases: Vec<(&str, &dyn Learner, &Dataset, &fisher_release::learner::UtilityCertificate, f64, f64)> = vec![
        ("svm", &svm, &blobs, &svm_cert, 1.0, 1.0),
        ("svm", &svm, &blobs, &svm_cert, 1e8, 1.0),
        ("svm", &svm, &blobs, &svm_cert, 1e8, 0.1),
        ("ridge", &ridge, &linear, &ridge_cert, 1e12, 0.5),
        ("ridge", &ridge, &linear, &ridge_cert, 1e10, 0.5),
    ];
    for (name, learner, data, cert, lambda, eps) in cases {
        let phi = ok(learner.fit(data))?;
        let mech = ok(optimal_iid_mechanism(lambda, &ScalingMatrix::identity(data.p())))?;
        let floor = ok(utility_floor(cert, &mech, eps, data.q()))?;
        let mut hits = 0;
        for t in 0..500u64 {
            let noisy = ok(obfuscate(data, &mech, RandomStream::new(77, 0).fork(t)))?;
            if (ok(learner.fit(&noisy))? - &phi).norm() <= eps {
                hits += 1;
            }
        }
        let freq = hits as f64 / 500.0;
        ensure!(freq >= floor, "{name} lambda {lambda} eps {eps}: frequency {freq} < floor {floor}");
        lines.push(format!("{name}@{lambda:e}/{eps}: {freq:.3}>={floor:.3}"));
    }
    Ok(lines.join(", "))
}

fn determinism() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let config = configs_dir().join("blobs.toml");
    let mut outputs = Vec::new();
    for workers in ["1", "4", "1"] {
        let out = dir.path().join(format!("run{}", outputs.len()));
        let status = ok(Command::new(env!("CARGO_BIN_EXE_fisher-release"))
            .args(["experiment", "--config"])
            .arg(&config)
            .arg("--output-dir")
            .arg(&out)
            .args(["--workers", workers])
            .output())?;
        ensure!(status.status.success(), "experiment failed: {}", String::from_utf8_lossy(&status.stderr));
        outputs.push((
            ok(std::fs::read(out.join("metrics.csv")))?,
            ok(std::fs::read(out.join("summary.toml")))?,
        ));
    }
    ensure!(outputs[0] == outputs[1], "output differs between 1 and 4 workers");
    ensure!(outputs[0] == outputs[2], "output differs between repeated runs");
    Ok(format!("{} metric bytes identical across runs", outputs[0].0.len()))
}

/// Number, name, time budget, check.
type Criterion = (u32, &'static str, Duration, fn() -> Check);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "CRB floors", Duration::from_secs(1), crb_floors),
        (2, "CRB tightness", Duration::from_secs(10), crb_tightness),
        (3, "Gaussian optimality over battery", Duration::from_secs(30), battery_optimality),
        (4, "DP certification", Duration::from_secs(1), dp_certification),
        (5, "Schrodinger solver", Duration::from_secs(5), schrodinger_solver),
        (6, "Correlated invariance", Duration::from_secs(30), correlated_invariance),
        (7, "SVM solver correctness", Duration::from_secs(30), svm_solver),
        (8, "Matched-privacy comparison", Duration::from_secs(300), matched_comparison),
        (9, "Utility floors one-sided", Duration::from_secs(300), utility_floors),
        (10, "Determinism", Duration::from_secs(300), determinism),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(note) if elapsed > limit => Err(format!("{note}; took {elapsed:.2?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(note) => println!("PASS criterion {id:>2} {name} ({elapsed:.2?}): {note}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name} ({elapsed:.2?}): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
