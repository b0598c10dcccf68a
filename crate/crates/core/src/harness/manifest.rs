//! What gets written next to a released dataset.

use serde::{Deserialize, Serialize};

use crate::constrained::BoxConstraint;
use crate::dataset::Standardization;
use crate::error::{Error, Result};
use crate::privacy::PrivacyCertificate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseManifest {
    pub mechanism: String,
    pub seed: u64,
    pub stream_id: u64,
    /// sha256 of the input file bytes.
    pub input_sha256: String,
    pub rows: usize,
    pub features: usize,
    pub pi_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
    /// Set when noise was added in standardized coordinates; the certificate
    /// refers to those coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub box_constraint: Option<BoxConstraint>,
    /// SVM settings, rank of `Omega` and null-space dimension of a
    /// correlated release. The basis itself is withheld since it encodes
    /// the support vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlated: Option<CorrelatedParams>,
    pub certificate: PrivacyCertificate,
}

impl ReleaseManifest {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedParams {
    pub theta: f64,
    pub rho: f64,
    pub rank: usize,
    pub null_dim: usize,
}
