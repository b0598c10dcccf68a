//! Synthetic datasets for experiments and tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::stream::RandomStream;

/// Gaussian blobs with isotropic spread, one blob per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub centers: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    /// Class label (`-1` or `+1`) of each blob.
    pub labels: Vec<f64>,
    #[serde(default = "one")]
    pub spread: f64,
}

fn one() -> f64 {
    1.0
}

impl BlobSpec {
    /// 50 points around the origin labelled `+1` and 50 around `(0, 5)`
    /// labelled `-1`, unit covariance.
    pub fn two_blobs() -> Self {
        Self {
            centers: vec![vec![0.0, 0.0], vec![0.0, 5.0]],
            counts: vec![50, 50],
            labels: vec![1.0, -1.0],
            spread: 1.0,
        }
    }

    pub fn generate(&self, stream: RandomStream) -> Result<Dataset> {
        let k = self.centers.len();
        if k == 0 || self.counts.len() != k || self.labels.len() != k {
            return Err(Error::Config("blob spec needs matching centers, counts and labels".into()));
        }
        let p = self.centers[0].len();
        if p == 0 || self.centers.iter().any(|c| c.len() != p) {
            return Err(Error::Config("blob centers must share one non-zero dimension".into()));
        }
        if !(self.spread >= 0.0) {
            return Err(Error::Config("blob spread must be non-negative".into()));
        }
        let q: usize = self.counts.iter().sum();
        let mut rng = stream.rng();
        let mut features = DMatrix::zeros(q, p);
        let mut labels = Vec::with_capacity(q);
        let mut row = 0;
        for (blob, center) in self.centers.iter().enumerate() {
            for _ in 0..self.counts[blob] {
                for j in 0..p {
                    let z: f64 = rng.sample(StandardNormal);
                    features[(row, j)] = center[j] + self.spread * z;
                }
                labels.push(self.labels[blob]);
                row += 1;
            }
        }
        Dataset::new(features, Labels::Binary(labels))
    }
}

/// Linear model `y = w'x + noise` with standard-normal features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub weights: Vec<f64>,
    pub count: usize,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub feature_scale: Option<f64>,
}

impl LinearSpec {
    pub fn generate(&self, stream: RandomStream) -> Result<Dataset> {
        let p = self.weights.len();
        if p == 0 || self.count == 0 {
            return Err(Error::Config("linear spec needs weights and a positive count".into()));
        }
        let scale = self.feature_scale.unwrap_or(1.0);
        let mut rng = stream.rng();
        let features = DMatrix::from_fn(self.count, p, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let w = DVector::from_column_slice(&self.weights);
        let fitted = &features * &w;
        let y = fitted
            .iter()
            .map(|f| f + self.noise_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::new(features, Labels::Real(y))
    }
}
