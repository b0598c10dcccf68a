//! Experiment orchestration, release manifests and file digests.

pub mod config;
pub mod experiment;
pub mod manifest;

use sha2::{Digest, Sha256};

use crate::dataset::Dataset;

pub use config::{parse_pi, DatasetSource, ExperimentConfig, LearnerKind, MechanismKind};
pub use experiment::{
    compare_mechanisms, run_experiment, run_experiment_with_workers, ExperimentOutput, MetricsRecord, PairedComparison,
};
pub use manifest::ReleaseManifest;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the feature matrix (row-major) and labels as little-endian f64.
pub fn dataset_digest(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((data.q() as u64).to_le_bytes());
    h.update((data.p() as u64).to_le_bytes());
    for i in 0..data.q() {
        for v in data.row(i).iter() {
            h.update(v.to_le_bytes());
        }
    }
    for v in data.label_values() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
