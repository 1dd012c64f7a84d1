//! Run manifests: a structured record sufficient to reproduce an output
//! bit-exactly, written next to every composed image.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compose::CompositionConfig;
use crate::energy::EnergyReport;
use crate::tensor::hex_digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepPhase {
    /// Latent merge at the initiation index.
    Init,
    /// Plain step from the initiation index into the window.
    Entry,
    /// Guided window step: normalization and/or optimization plus
    /// replacement.
    Window,
    /// Plain denoising outside the window.
    Free,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    /// Source grid index of this step (or the merge index for Init).
    pub index: usize,
    pub phase: StepPhase,
    /// Normalization blend applied at this index, when any.
    pub lambda: Option<f64>,
    pub normalized: bool,
    pub energy: Option<EnergyReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: CompositionConfig,
    pub seed: u64,
    pub schedule_digest: String,
    pub prompt: String,
    pub user_box: String,
    pub steps: Vec<StepRecord>,
    pub input_digests: BTreeMap<String, String>,
    pub output_digest: String,
    pub wall_time_ms: u64,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> crate::error::Result<Self> {
        serde_json::from_str(s).map_err(|e| crate::error::Error::Format(format!("manifest: {e}")))
    }

    /// Digest over everything except wall time, for reproducibility checks.
    pub fn stable_digest(&self) -> String {
        let mut clone = self.clone();
        clone.wall_time_ms = 0;
        let mut hasher = Sha256::new();
        hasher.update(clone.to_json().as_bytes());
        hex_digest(hasher)
    }
}
