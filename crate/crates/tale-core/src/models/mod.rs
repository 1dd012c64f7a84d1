//! Model interfaces used by the composition pipeline plus desk-scale
//! implementations: a closed-form Gaussian-mixture denoiser, a linear
//! autoencoder, a seeded linear embedder, a fixed convolutional feature bank,
//! a small trainable noise-prediction network, and a synthetic two-domain
//! dataset generator.

mod analytic;
mod convnet;
mod dataset;
mod embedder;
mod features;
mod linear_ae;
mod toy_denoiser;

pub use analytic::{analytic_denoiser_eps, AnalyticDenoiser, GaussianMixtureModel, MixtureComponent};
pub use dataset::{make_toy_domains, ToyDataset, ToySample, TOY_CANVAS};
pub use embedder::ToyEmbedder;
pub use features::ConvFeatureBank;
pub use linear_ae::LinearAutoencoder;
pub use toy_denoiser::{train_toy_denoiser, ToyDenoiser, TrainingConfig, TrainingReport};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{sha256_hex, LatentTensor};

/// Text prompt with a stable identity for seeded embedding lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub embedding_id: u64,
    pub class_tag: Option<String>,
}

impl PromptSpec {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let embedding_id = stable_text_id(&text);
        Self {
            text,
            embedding_id,
            class_tag: None,
        }
    }

    pub fn with_class(text: impl Into<String>, class_tag: impl Into<String>) -> Self {
        let mut p = Self::new(text);
        p.class_tag = Some(class_tag.into());
        p
    }
}

/// Stable 64-bit id for a prompt text: identical text, identical id.
pub fn stable_text_id(text: &str) -> u64 {
    let hex = sha256_hex(text.as_bytes());
    u64::from_str_radix(&hex[..16], 16).expect("sha256 hex prefix")
}

/// Noise predictor eps_theta over the latent grid.
pub trait Denoiser: Send + Sync {
    /// Predicted noise for z at grid index `index`; shape-preserving and
    /// deterministic for fixed inputs.
    fn predict(&self, z: &LatentTensor, index: usize, cond: Option<&PromptSpec>)
        -> Result<LatentTensor>;

    /// Transposed-Jacobian product J_eps(z)^T v, for gradient modes that
    /// differentiate through the denoiser. Optional.
    fn jacobian_adjoint_vec(
        &self,
        _z: &LatentTensor,
        _index: usize,
        _cond: Option<&PromptSpec>,
        _v: &LatentTensor,
    ) -> Result<LatentTensor> {
        Err(crate::error::Error::UnsupportedMode(
            "denoiser has no Jacobian adjoint".into(),
        ))
    }
}

/// Pixel <-> latent codec with a fixed spatial downscale factor.
pub trait Autoencoder: Send + Sync {
    fn downscale(&self) -> usize;

    fn encode(&self, x: &LatentTensor) -> Result<LatentTensor>;

    fn decode(&self, z: &LatentTensor) -> Result<LatentTensor>;

    /// Transposed-Jacobian product of decode: maps a pixel-shaped
    /// cotangent to a latent-shaped one.
    fn decode_adjoint_vec(&self, v: &LatentTensor) -> Result<LatentTensor>;
}

/// Joint image/text embedding with a cosine geometry.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_image(&self, x: &LatentTensor) -> Result<Vec<f64>>;

    fn embed_text(&self, p: &PromptSpec) -> Vec<f64>;

    /// Transposed-Jacobian product of embed_image: maps an embedding-space
    /// cotangent to a pixel-shaped gradient carrier.
    fn image_grad_adjoint(&self, x: &LatentTensor, v: &[f64]) -> Result<LatentTensor>;
}

/// Fixed feature maps whose Gram matrix carries second-order style
/// information.
pub trait FeatureBank: Send + Sync {
    fn num_features(&self) -> usize;

    /// K feature maps as a K-channel tensor.
    fn features(&self, x: &LatentTensor) -> Result<LatentTensor>;

    /// K x K Gram matrix, row-major: G_ij = sum_p F_i(p) F_j(p) / (H W).
    fn gram(&self, x: &LatentTensor) -> Result<Vec<f64>>;

    /// Transposed-Jacobian product of gram: maps a K x K cotangent to a
    /// pixel-shaped gradient carrier.
    fn gram_grad_adjoint(&self, x: &LatentTensor, d_gram: &[f64]) -> Result<LatentTensor>;
}

/// The four model implementations one run executes against. Immutable and
/// shareable across threads.
#[derive(Clone)]
pub struct ModelBundle {
    pub denoiser: Arc<dyn Denoiser>,
    pub autoencoder: Arc<dyn Autoencoder>,
    pub embedder: Arc<dyn Embedder>,
    pub feature_bank: Arc<dyn FeatureBank>,
}

impl ModelBundle {
    pub fn new(
        denoiser: Arc<dyn Denoiser>,
        autoencoder: Arc<dyn Autoencoder>,
        embedder: Arc<dyn Embedder>,
        feature_bank: Arc<dyn FeatureBank>,
    ) -> Self {
        Self {
            denoiser,
            autoencoder,
            embedder,
            feature_bank,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_id_stable() {
        let a = PromptSpec::new("a red disc on gray stripes");
        let b = PromptSpec::new("a red disc on gray stripes");
        let c = PromptSpec::new("a blue square on gray stripes");
        assert_eq!(a.embedding_id, b.embedding_id);
        assert_ne!(a.embedding_id, c.embedding_id);
    }
}
