//! Experiment configuration and the shared `Pi` / dataset loaders.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{CsvOptions, CsvTable, Dataset, LabelColumn, LabelEncoding};
use crate::error::{Error, Result};
use crate::scaling::ScalingMatrix;
use crate::stream::RandomStream;
use crate::synthetic::{BlobSpec, LinearSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    OptimalGaussian,
    LaplaceMatched,
    Constrained,
    Correlated,
}

impl MechanismKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MechanismKind::OptimalGaussian => "optimal_gaussian",
            MechanismKind::LaplaceMatched => "laplace_matched",
            MechanismKind::Constrained => "constrained",
            MechanismKind::Correlated => "correlated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "optimal_gaussian" => Ok(MechanismKind::OptimalGaussian),
            "laplace_matched" => Ok(MechanismKind::LaplaceMatched),
            "constrained" => Ok(MechanismKind::Constrained),
            "correlated" => Ok(MechanismKind::Correlated),
            other => Err(Error::Config(format!("unknown mechanism '{other}'"))),
        }
    }

    /// Whether the mechanism is indexed by `lambda`.
    pub fn uses_lambda(self) -> bool {
        !matches!(self, MechanismKind::Correlated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Svm,
    Ridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs(BlobSpec),
    Linear(LinearSpec),
    Csv(CsvSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub label_column: String,
    /// `"M=1,B=-1"`; absent means numeric labels.
    #[serde(default)]
    pub label_map: Option<String>,
    /// Read labels as real responses instead of classes.
    #[serde(default)]
    pub real_labels: bool,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub ignore_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
}

fn default_grid() -> usize {
    512
}
fn default_trials() -> usize {
    100
}
fn default_theta() -> f64 {
    1.0
}
fn default_rho() -> f64 {
    1e-2
}
fn default_sigma() -> f64 {
    1e-5
}
fn default_pi() -> String {
    "identity".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub learner: LearnerKind,
    pub mechanisms: Vec<MechanismKind>,
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    /// Variance cap of the correlated mechanism.
    #[serde(default)]
    pub m: Option<f64>,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Same grammar as the CLI: `identity`, `identity:p`, `diag:a,b,...`,
    /// `file:path`.
    #[serde(default = "default_pi")]
    pub pi: String,
    /// δ values certified for each λ in the summary.
    #[serde(default)]
    pub deltas: Vec<f64>,
    #[serde(default, rename = "box")]
    pub box_spec: Option<BoxSpec>,
    pub dataset: DatasetSource,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, &dir)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.mechanisms.is_empty() {
            return Err(Error::Config("no mechanisms listed".into()));
        }
        if self.mechanisms.iter().any(|m| m.uses_lambda()) && self.lambda_grid.is_empty() {
            return Err(Error::Config("lambda_grid is empty".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Config("lambda_grid values must be positive".into()));
        }
        if self.mechanisms.contains(&MechanismKind::Correlated) {
            if self.learner != LearnerKind::Svm {
                return Err(Error::Config("the correlated mechanism is defined for the svm learner only".into()));
            }
            match self.m {
                Some(m) if m > 0.0 && m.is_finite() => {}
                _ => return Err(Error::Config("the correlated mechanism needs a positive m".into())),
            }
        }
        if self.mechanisms.contains(&MechanismKind::Constrained) && self.box_spec.is_none() {
            return Err(Error::Config("the constrained mechanism needs a [box] table".into()));
        }
        for (name, v) in [("theta", self.theta), ("rho", self.rho), ("sigma", self.sigma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.deltas.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return Err(Error::Config("deltas must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// The dataset named by the config. Synthetic sources draw from stream
    /// id 2 of the seed, apart from every trial stream.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let stream = RandomStream::new(self.seed, 2);
        match &self.dataset {
            DatasetSource::Blobs(b) => b.generate(stream),
            DatasetSource::Linear(l) => l.generate(stream),
            DatasetSource::Csv(c) => {
                let path = if c.path.is_absolute() {
                    c.path.clone()
                } else {
                    self.base_dir.join(&c.path)
                };
                let encoding = match (&c.label_map, c.real_labels) {
                    (Some(_), true) => {
                        return Err(Error::Config("label_map and real_labels are exclusive".into()));
                    }
                    (Some(map), false) => LabelEncoding::parse_map(map)?,
                    (None, true) => LabelEncoding::Real,
                    (None, false) => LabelEncoding::BinaryNumeric,
                };
                let options = CsvOptions {
                    label_column: LabelColumn::parse(&c.label_column),
                    encoding,
                    standardize: c.standardize,
                    ignore_columns: c.ignore_columns.iter().map(|s| LabelColumn::parse(s)).collect(),
                };
                Ok(CsvTable::read(&path, &options)?.dataset)
            }
        }
    }

    pub fn scaling(&self, p: usize) -> Result<ScalingMatrix> {
        parse_pi(&self.pi, p, &self.base_dir)
    }
}

/// Parses a `Pi` spec: `identity`, `identity:p`, `diag:a,b,...` or
/// `file:path` (rows of comma or whitespace separated numbers).
pub fn parse_pi(spec: &str, p: usize, base_dir: &Path) -> Result<ScalingMatrix> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let s = match kind.trim() {
        "identity" => {
            let dim = if arg.trim().is_empty() {
                p
            } else {
                arg.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad identity dimension '{arg}'")))?
            };
            if dim == 0 {
                return Err(Error::Config("identity dimension must be positive".into()));
            }
            ScalingMatrix::identity(dim)
        }
        "diag" => {
            let values = arg
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad diagonal entry '{v}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            ScalingMatrix::diagonal(&values)?
        }
        "file" => {
            let path = Path::new(arg.trim());
            let path = if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            };
            let text = std::fs::read_to_string(&path)?;
            let rows: Vec<Vec<f64>> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.split(|c: char| c == ',' || c.is_whitespace())
                        .filter(|t| !t.is_empty())
                        .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("bad matrix entry '{t}'"))))
                        .collect()
                })
                .collect::<Result<_>>()?;
            let n = rows.len();
            if n == 0 || rows.iter().any(|r| r.len() != n) {
                return Err(Error::Config("matrix file must hold a square matrix".into()));
            }
            ScalingMatrix::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))?
        }
        other => return Err(Error::Config(format!("unknown Pi kind '{other}'"))),
    };
    Ok(s)
}
