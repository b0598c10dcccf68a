//! Command-line front end. Errors go to stderr as `error[category]: ...`
//! and select the exit code; usage errors exit with 2.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::constrained::{constrained_mechanism, solve_ground_state, BoxConstraint};
use crate::correlated::{build_invariance_operator, correlated_obfuscate_with};
use crate::dataset::{CsvOptions, CsvTable, Dataset, LabelColumn, LabelEncoding};
use crate::error::{Error, Result};
use crate::harness::manifest::CorrelatedParams;
use crate::harness::{parse_pi, run_experiment_with_workers, sha256_hex, ExperimentConfig, ReleaseManifest};
use crate::iid::{matched_laplace_baseline, obfuscate, optimal_iid_mechanism};
use crate::learner::{Learner, RidgeLearner};
use crate::privacy::{crb_bounds, NoiseMechanism, PrivacyCertificate};
use crate::scaling::NormMode;
use crate::stream::RandomStream;
use crate::svm::{train_svm, SvmConfig, SvmModel};

#[derive(Debug, Parser)]
#[command(name = "fisher-release", version, about = "Noise mechanisms for private release of tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Add noise to a CSV dataset and write the release with its manifest.
    Obfuscate(ObfuscateArgs),
    /// Fit a model to a CSV dataset.
    Train(TrainArgs),
    /// Privacy certificate of the optimal Gaussian mechanism.
    Certify(CertifyArgs),
    /// Ground state of the one-dimensional box problem, as CSV.
    Eigen(EigenArgs),
    /// Run an experiment config and write metrics and a summary.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    /// Label column, by header name or zero-based index.
    #[arg(long)]
    label_column: String,
    /// Binary label map such as `M=1,B=-1`.
    #[arg(long, conflicts_with = "real_labels")]
    label_map: Option<String>,
    /// Treat labels as real responses.
    #[arg(long)]
    real_labels: bool,
    /// Columns to drop on load (repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    ignore: Vec<String>,
    #[arg(long)]
    standardize: bool,
}

impl InputArgs {
    fn options(&self) -> Result<CsvOptions> {
        let encoding = match (&self.label_map, self.real_labels) {
            (Some(map), _) => LabelEncoding::parse_map(map)?,
            (None, true) => LabelEncoding::Real,
            (None, false) => LabelEncoding::BinaryNumeric,
        };
        Ok(CsvOptions {
            label_column: LabelColumn::parse(&self.label_column),
            encoding,
            standardize: self.standardize,
            ignore_columns: self.ignore.iter().map(|s| LabelColumn::parse(s)).collect(),
        })
    }

    fn load(&self) -> Result<(Vec<u8>, CsvTable)> {
        let bytes = std::fs::read(&self.input)?;
        let table = CsvTable::from_bytes(&bytes, &self.options()?)?;
        Ok((bytes, table))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MechanismArg {
    OptimalGaussian,
    LaplaceMatched,
    Constrained,
    Correlated,
}

#[derive(Debug, Args)]
struct ObfuscateArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    output: PathBuf,
    /// Defaults to `<output>.manifest.toml`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    mechanism: MechanismArg,
    #[arg(long)]
    lambda: Option<f64>,
    /// Variance cap of the correlated mechanism.
    #[arg(long)]
    m: Option<f64>,
    #[arg(long, default_value = "identity")]
    pi: String,
    /// Box lower bounds, one per feature or a single shared value.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lower: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    upper: Vec<f64>,
    #[arg(long, default_value_t = 512)]
    grid_points: usize,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, default_value_t = 1e-2)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    stream_id: u64,
    /// δ values to certify (optimal Gaussian only).
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LearnerArg {
    Svm,
    Ridge,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum, default_value = "svm")]
    learner: LearnerArg,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, default_value_t = 1e-2)]
    rho: f64,
    #[arg(long, default_value_t = 1e-5)]
    sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormArg {
    Exact,
    Upper,
}

#[derive(Debug, Args)]
struct CertifyArgs {
    #[arg(long)]
    lambda: f64,
    /// `identity:p`, `diag:a,b,...` or `file:path`.
    #[arg(long)]
    pi: String,
    #[arg(long, value_delimiter = ',', required = true)]
    delta: Vec<f64>,
    #[arg(long, value_enum, default_value = "exact")]
    norm: NormArg,
    /// Also write the certificate here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EigenArgs {
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, allow_hyphen_values = true)]
    lower: f64,
    #[arg(long, allow_hyphen_values = true)]
    upper: f64,
    #[arg(long, default_value_t = 1024)]
    grid_points: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    workers: Option<usize>,
}

/// Ridge model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub sigma: f64,
    pub phi: Vec<f64>,
}

fn expand(values: &[f64], p: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; p]),
        n if n == p => Ok(values.to_vec()),
        0 => Err(Error::Config(format!("--{what} is required for the constrained mechanism"))),
        n => Err(Error::dim("box bounds", p, n)),
    }
}

fn need_lambda(lambda: Option<f64>) -> Result<f64> {
    lambda.ok_or_else(|| Error::Config("--lambda is required for this mechanism".into()))
}

fn obfuscate_cmd(args: &ObfuscateArgs) -> Result<()> {
    let (bytes, table) = args.input.load()?;
    let data = &table.dataset;
    let scaling = parse_pi(&args.pi, data.p(), Path::new("."))?;
    if scaling.dim() != data.p() {
        return Err(Error::dim("Pi vs features", data.p(), scaling.dim()));
    }
    let stream = RandomStream::new(args.seed, args.stream_id);
    let mut manifest = ReleaseManifest {
        mechanism: String::new(),
        seed: args.seed,
        stream_id: args.stream_id,
        input_sha256: sha256_hex(&bytes),
        rows: data.q(),
        features: data.p(),
        pi_digest: scaling.digest(),
        lambda: None,
        m: None,
        grid_points: None,
        standardization: table.standardization.clone(),
        box_constraint: None,
        correlated: None,
        certificate: PrivacyCertificate {
            crb_floor: f64::INFINITY,
            weak_floor: f64::INFINITY,
            fisher_trace: 0.0,
            quadrature_error: 0.0,
            support_floor: None,
            dp_pairs: Vec::new(),
            adversary_floor_formula: Vec::new(),
            flags: Vec::new(),
        },
    };
    let iid = |mech: &dyn NoiseMechanism| -> Result<(Dataset, PrivacyCertificate)> {
        let cert = crb_bounds(&mech.fisher_information()?, &scaling)?;
        Ok((obfuscate(data, mech, stream)?, cert))
    };
    let (released, certificate) = match args.mechanism {
        MechanismArg::OptimalGaussian => {
            let lambda = need_lambda(args.lambda)?;
            manifest.lambda = Some(lambda);
            let g = optimal_iid_mechanism(lambda, &scaling)?;
            let (r, mut c) = iid(&g)?;
            c.certify_dp(lambda, &scaling, &args.delta, NormMode::default())?;
            (r, c)
        }
        MechanismArg::LaplaceMatched => {
            let lambda = need_lambda(args.lambda)?;
            manifest.lambda = Some(lambda);
            let l = matched_laplace_baseline(&optimal_iid_mechanism(lambda, &scaling)?)?;
            let (r, mut c) = iid(&l)?;
            c.flags = l.flags();
            (r, c)
        }
        MechanismArg::Constrained => {
            let lambda = need_lambda(args.lambda)?;
            if !scaling.is_diagonal() {
                return Err(Error::Config("the constrained mechanism needs a diagonal Pi".into()));
            }
            let b = BoxConstraint::new(
                expand(&args.lower, data.p(), "lower")?,
                expand(&args.upper, data.p(), "upper")?,
                scaling.diagonal_entries(),
            )?;
            let mech = constrained_mechanism(&b, lambda, args.grid_points)?;
            manifest.lambda = Some(lambda);
            manifest.grid_points = Some(args.grid_points);
            manifest.box_constraint = Some(b);
            iid(&mech)?
        }
        MechanismArg::Correlated => {
            let m = args
                .m
                .ok_or_else(|| Error::Config("--m is required for the correlated mechanism".into()))?;
            let svm = SvmConfig::new(args.theta, args.rho)?;
            let sol = train_svm(data, &svm)?;
            let op = build_invariance_operator(&sol, data)?;
            manifest.m = Some(m);
            manifest.correlated = Some(CorrelatedParams {
                theta: args.theta,
                rho: args.rho,
                rank: op.rank(),
                null_dim: op.null_dim(),
            });
            correlated_obfuscate_with(data, &sol, m, &scaling, stream)?
        }
    };
    manifest.mechanism = args.mechanism.to_possible_value().expect("named").get_name().to_string();
    manifest.certificate = certificate;
    let released = match &table.standardization {
        Some(s) => released.with_features(s.invert(released.features()))?,
        None => released,
    };
    let mut out = Vec::new();
    table.write_release(&released, &mut out)?;
    std::fs::write(&args.output, out)?;
    let manifest_path = args.manifest.clone().unwrap_or_else(|| {
        let mut p = args.output.clone().into_os_string();
        p.push(".manifest.toml");
        PathBuf::from(p)
    });
    std::fs::write(manifest_path, manifest.to_text())?;
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let (_, table) = args.input.load()?;
    let text = match args.learner {
        LearnerArg::Svm => {
            let cfg = SvmConfig::new(args.theta, args.rho)?;
            let sol = train_svm(&table.dataset, &cfg)?;
            SvmModel::from_solution(&cfg, &sol).to_text()
        }
        LearnerArg::Ridge => {
            let phi = RidgeLearner::new(args.sigma)?.fit(&table.dataset)?;
            let model = RidgeModel {
                sigma: args.sigma,
                phi: phi.iter().copied().collect(),
            };
            toml::to_string(&model).expect("model serializes")
        }
    };
    std::fs::write(&args.output, text)?;
    Ok(())
}

fn certify_cmd(args: &CertifyArgs, stdout: &mut dyn Write) -> Result<()> {
    let scaling = parse_pi(&args.pi, 1, Path::new("."))?;
    let mech = optimal_iid_mechanism(args.lambda, &scaling)?;
    let mut cert = crb_bounds(&mech.fisher_information()?, &scaling)?;
    let mode = match args.norm {
        NormArg::Exact => NormMode::Exact,
        NormArg::Upper => NormMode::UpperBound,
    };
    cert.certify_dp(args.lambda, &scaling, &args.delta, mode)?;
    for pair in &cert.dp_pairs {
        writeln!(stdout, "epsilon_min = {} (delta = {})", pair.epsilon, pair.delta)?;
    }
    write!(stdout, "{}", cert.to_text())?;
    if let Some(path) = &args.output {
        std::fs::write(path, cert.to_text())?;
    }
    Ok(())
}

fn eigen_cmd(args: &EigenArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let sol = solve_ground_state(args.lambda, args.theta, args.lower, args.upper, args.grid_points)?;
    match &args.output {
        Some(path) => {
            let mut buf = Vec::new();
            sol.write_csv(&mut buf)?;
            std::fs::write(path, buf)?;
        }
        None => sol.write_csv(&mut *stdout)?,
    }
    writeln!(
        stderr,
        "mu = {}, ode residual = {:e}, normalization error = {:e}",
        sol.mu, sol.ode_residual, sol.normalization_error
    )?;
    Ok(())
}

fn experiment_cmd(args: &ExperimentArgs) -> Result<()> {
    let config = ExperimentConfig::load(&args.config)?;
    let out = run_experiment_with_workers(&config, args.workers)?;
    out.write_to(&args.output_dir)
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let target: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(target, "{}", e.render());
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Obfuscate(a) => obfuscate_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Certify(a) => certify_cmd(a, stdout),
        Command::Eigen(a) => eigen_cmd(a, stdout, stderr),
        Command::Experiment(a) => experiment_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            let _ = writeln!(stderr, "error[{cat}]: {e}");
            cat.exit_code()
        }
    }
}
