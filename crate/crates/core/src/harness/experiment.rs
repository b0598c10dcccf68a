//! Trial loops over mechanisms and `lambda`, with paired streams.
//!
//! Trial `t` at grid index `k` draws from `RandomStream::new(seed, 0)
//! .fork(k).fork(t)` whatever the mechanism, so the optimal and Laplace rows
//! at one `lambda` share their randomness. The correlated mechanism, which
//! has no `lambda`, uses `RandomStream::new(seed, 1).fork(t)`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LearnerKind, MechanismKind};
use super::{dataset_digest, sha256_hex};
use crate::constrained::{constrained_mechanism, BoxConstraint};
use crate::correlated::{build_invariance_operator, correlated_certificate, sample_correlated, CorrelatedMechanism};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::iid::{matched_laplace_baseline, obfuscate, optimal_iid_mechanism};
use crate::learner::{Learner, RidgeLearner};
use crate::privacy::{crb_bounds, NoiseMechanism, PrivacyCertificate};
use crate::scaling::{NormMode, ScalingMatrix};
use crate::stream::RandomStream;
use crate::svm::{success_rate, train_svm, SvmConfig};

pub const METRICS_HEADER: [&str; 7] = ["mechanism", "lambda", "metric", "value", "stderr", "privacy_floor", "trials"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mechanism: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// `success_rate` for the SVM, `expected_loss` for ridge.
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub privacy_floor: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub lambda: f64,
    pub optimal: f64,
    pub laplace: f64,
    /// Common `Tr(Pi I^-1)` of the two rows.
    pub privacy_floor: f64,
    /// Mean of `optimal - laplace` over paired trials.
    pub difference: f64,
    pub difference_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateEntry {
    pub mechanism: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub certificate: PrivacyCertificate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub trials: usize,
    pub learner: LearnerKind,
    pub metric: String,
    pub config_sha256: String,
    pub data_sha256: String,
    /// Metric of the learner trained on the original data.
    pub noiseless: f64,
    #[serde(default)]
    pub comparison: Vec<PairedComparison>,
    #[serde(default)]
    pub certificates: Vec<CertificateEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
    /// Per-trial metric values, parallel to `records`.
    pub trial_values: Vec<Vec<f64>>,
}

impl ExperimentOutput {
    pub fn write_metrics<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.mechanism.clone(),
                r.lambda.map(|l| l.to_string()).unwrap_or_default(),
                r.metric.clone(),
                r.value.to_string(),
                r.stderr.to_string(),
                r.privacy_floor.to_string(),
                r.trials.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_text(&self) -> String {
        toml::to_string(&self.summary).expect("summary serializes")
    }

    /// Writes `metrics.csv` and `summary.toml` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        self.write_metrics(&mut buf)?;
        std::fs::write(dir.join("metrics.csv"), buf)?;
        std::fs::write(dir.join("summary.toml"), self.summary_text())?;
        Ok(())
    }
}

/// Mean and standard error (sample deviation over `sqrt(n)`), summed in
/// index order.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    data: &'a Dataset,
    svm: SvmConfig,
}

impl Context<'_> {
    fn metric_name(&self) -> &'static str {
        match self.config.learner {
            LearnerKind::Svm => "success_rate",
            LearnerKind::Ridge => "expected_loss",
        }
    }

    /// Trains on `noisy` and scores against the original data.
    fn score(&self, noisy: &Dataset) -> Result<f64> {
        match self.config.learner {
            LearnerKind::Svm => {
                let sol = train_svm(noisy, &self.svm)?;
                success_rate(self.data, &sol.alpha, sol.beta)
            }
            LearnerKind::Ridge => {
                let ridge = RidgeLearner::new(self.config.sigma)?;
                let phi = ridge.fit(noisy)?;
                ridge.loss(&phi, self.data)
            }
        }
    }

    fn noiseless(&self) -> Result<f64> {
        self.score(self.data)
    }

    fn run_trials<F>(&self, stream_of: F, draw: &(dyn Fn(RandomStream) -> Result<Dataset> + Sync)) -> Result<Vec<f64>>
    where
        F: Fn(usize) -> RandomStream + Sync,
    {
        (0..self.config.trials)
            .into_par_iter()
            .map(|t| {
                draw(stream_of(t))
                    .and_then(|noisy| self.score(&noisy))
                    .map_err(|e| Error::Trial {
                        trial: t,
                        source: Box::new(e),
                    })
            })
            .collect()
    }
}

fn check_learner_data(config: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if config.learner == LearnerKind::Svm && !data.labels().is_binary() {
        return Err(Error::Config("the svm learner needs binary labels".into()));
    }
    Ok(())
}

fn box_constraint(config: &ExperimentConfig, scaling: &ScalingMatrix) -> Result<(BoxConstraint, usize)> {
    let spec = config
        .box_spec
        .as_ref()
        .ok_or_else(|| Error::Config("the constrained mechanism needs a [box] table".into()))?;
    if !scaling.is_diagonal() {
        return Err(Error::Config("the constrained mechanism needs a diagonal Pi".into()));
    }
    let b = BoxConstraint::new(spec.lower.clone(), spec.upper.clone(), scaling.diagonal_entries())?;
    Ok((b, spec.grid_points))
}

/// Runs every (`lambda`, mechanism) cell on the current rayon pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let data = config.load_dataset()?;
    check_learner_data(config, &data)?;
    let scaling = config.scaling(data.p())?;
    if scaling.dim() != data.p() {
        return Err(Error::dim("Pi vs features", data.p(), scaling.dim()));
    }
    let ctx = Context {
        config,
        data: &data,
        svm: SvmConfig::new(config.theta, config.rho)?,
    };
    let metric = ctx.metric_name().to_string();
    let noiseless = ctx.noiseless()?;

    let mut records = Vec::new();
    let mut trial_values = Vec::new();
    let mut certificates = Vec::new();
    let mut comparison = Vec::new();
    let base = RandomStream::new(config.seed, 0);

    for (k, &lambda) in config.lambda_grid.iter().enumerate() {
        let cell = base.fork(k as u64);
        let stream_of = |t: usize| cell.fork(t as u64);
        let mut paired: [Option<(Vec<f64>, f64)>; 2] = [None, None];
        for &kind in config.mechanisms.iter().filter(|m| m.uses_lambda()) {
            let gaussian = optimal_iid_mechanism(lambda, &scaling)?;
            let mech: Box<dyn NoiseMechanism> = match kind {
                MechanismKind::OptimalGaussian => Box::new(gaussian),
                MechanismKind::LaplaceMatched => Box::new(matched_laplace_baseline(&gaussian)?),
                MechanismKind::Constrained => {
                    let (b, grid) = box_constraint(config, &scaling)?;
                    Box::new(constrained_mechanism(&b, lambda, grid)?)
                }
                MechanismKind::Correlated => unreachable!("filtered above"),
            };
            let info = mech.fisher_information()?;
            let mut cert = crb_bounds(&info, &scaling)?;
            if kind == MechanismKind::OptimalGaussian {
                cert.certify_dp(lambda, &scaling, &config.deltas, NormMode::default())?;
            }
            let draw = |s: RandomStream| obfuscate(&data, mech.as_ref(), s);
            let values = ctx.run_trials(stream_of, &draw)?;
            let (value, stderr) = mean_stderr(&values);
            match kind {
                MechanismKind::OptimalGaussian => paired[0] = Some((values.clone(), cert.crb_floor)),
                MechanismKind::LaplaceMatched => paired[1] = Some((values.clone(), cert.crb_floor)),
                _ => {}
            }
            records.push(MetricsRecord {
                mechanism: kind.as_str().to_string(),
                lambda: Some(lambda),
                metric: metric.clone(),
                value,
                stderr,
                privacy_floor: cert.crb_floor,
                trials: config.trials,
            });
            trial_values.push(values);
            certificates.push(CertificateEntry {
                mechanism: kind.as_str().to_string(),
                lambda: Some(lambda),
                certificate: cert,
            });
        }
        if let [Some((opt, floor)), Some((lap, _))] = &paired {
            let diffs: Vec<f64> = opt.iter().zip(lap).map(|(a, b)| a - b).collect();
            let (difference, difference_stderr) = mean_stderr(&diffs);
            comparison.push(PairedComparison {
                lambda,
                optimal: mean_stderr(opt).0,
                laplace: mean_stderr(lap).0,
                privacy_floor: *floor,
                difference,
                difference_stderr,
            });
        }
    }

    if config.mechanisms.contains(&MechanismKind::Correlated) {
        let m = config.m.expect("validated");
        let sol = train_svm(&data, &ctx.svm)?;
        let op = build_invariance_operator(&sol, &data)?;
        let mech = CorrelatedMechanism::new(op, m)?;
        let cert = correlated_certificate(&mech, &scaling)?;
        let corr = RandomStream::new(config.seed, 1);
        let draw = |s: RandomStream| {
            let w = sample_correlated(&mech, s);
            data.from_stacked(&(data.stacked() + w))
        };
        let values = ctx.run_trials(|t| corr.fork(t as u64), &draw)?;
        let (value, stderr) = mean_stderr(&values);
        records.push(MetricsRecord {
            mechanism: MechanismKind::Correlated.as_str().to_string(),
            lambda: None,
            metric: metric.clone(),
            value,
            stderr,
            privacy_floor: cert.support_floor.unwrap_or(cert.weak_floor),
            trials: config.trials,
        });
        trial_values.push(values);
        certificates.push(CertificateEntry {
            mechanism: MechanismKind::Correlated.as_str().to_string(),
            lambda: None,
            certificate: cert,
        });
    }

    let config_text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    Ok(ExperimentOutput {
        records,
        trial_values,
        summary: Summary {
            seed: config.seed,
            trials: config.trials,
            learner: config.learner,
            metric,
            config_sha256: sha256_hex(config_text.as_bytes()),
            data_sha256: dataset_digest(&data),
            noiseless,
            comparison,
            certificates,
        },
    })
}

/// [`run_experiment`] on a dedicated pool of `workers` threads (all cores
/// when `None`). Output does not depend on the worker count.
pub fn run_experiment_with_workers(config: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentOutput> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment(config))
}

/// Optimal Gaussian against the matched Laplace baseline at every `lambda`
/// of the grid, on paired trials.
pub fn compare_mechanisms(config: &ExperimentConfig) -> Result<Vec<PairedComparison>> {
    let mut c = config.clone();
    c.mechanisms = vec![MechanismKind::OptimalGaussian, MechanismKind::LaplaceMatched];
    Ok(run_experiment(&c)?.summary.comparison)
}
