//! Closed-form optimal denoiser for isotropic Gaussian-mixture data.
//!
//! Under the variance-preserving forward process, a mixture
//! sum_k w_k N(m_k, s_k^2 I) diffuses to p_t(z) = sum_k w_k N(alpha_t m_k,
//! v_k I) with v_k = alpha_t^2 s_k^2 + sigma_t^2, so the exact noise
//! prediction eps_hat = -sigma_t grad_z log p_t(z) is available in closed
//! form. This backend makes every solver and guidance equation checkable
//! against an analytic reference.

use crate::error::{Error, Result};
use crate::models::{Denoiser, PromptSpec};
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: LatentTensor,
    /// Isotropic standard deviation; zero means a point mass.
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct GaussianMixtureModel {
    components: Vec<MixtureComponent>,
}

impl GaussianMixtureModel {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidConfig("mixture needs >= 1 component".into()));
        }
        let shape = components[0].mean.shape();
        if components.iter().any(|c| c.mean.shape() != shape) {
            return Err(Error::shape(
                format!("{shape:?}"),
                "mixture means of differing shapes",
            ));
        }
        if components.iter().any(|c| c.weight <= 0.0 || c.std < 0.0) {
            return Err(Error::InvalidConfig(
                "mixture weights must be positive and stds nonnegative".into(),
            ));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    pub fn point_mass(mean: LatentTensor) -> Self {
        Self {
            components: vec![MixtureComponent {
                weight: 1.0,
                mean,
                std: 0.0,
            }],
        }
    }

    pub fn single(mean: LatentTensor, std: f64) -> Self {
        Self {
            components: vec![MixtureComponent {
                weight: 1.0,
                mean,
                std,
            }],
        }
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    fn shape(&self) -> (usize, usize, usize) {
        self.components[0].mean.shape()
    }

    /// Per-component marginal variance at (alpha, sigma).
    fn variances(&self, alpha: f64, sigma: f64) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| alpha * alpha * c.std * c.std + sigma * sigma)
            .collect()
    }

    /// Unnormalized per-component log weights of p_t at z.
    fn component_log_terms(&self, z: &LatentTensor, alpha: f64, sigma: f64) -> Result<Vec<f64>> {
        let dims = z.len() as f64;
        let vars = self.variances(alpha, sigma);
        self.components
            .iter()
            .zip(vars)
            .map(|(c, v)| {
                let diff = z.add_scaled(&c.mean, -alpha)?;
                let sq = diff.dot(&diff)?;
                Ok(c.weight.ln()
                    - 0.5 * dims * (2.0 * std::f64::consts::PI * v).ln()
                    - 0.5 * sq / v)
            })
            .collect()
    }

    /// log p_t(z); the independent route used by the denoiser oracle.
    pub fn log_density(&self, z: &LatentTensor, alpha: f64, sigma: f64) -> Result<f64> {
        let terms = self.component_log_terms(z, alpha, sigma)?;
        Ok(log_sum_exp(&terms))
    }

    /// Posterior responsibilities gamma_k(z) under p_t.
    fn responsibilities(&self, z: &LatentTensor, alpha: f64, sigma: f64) -> Result<Vec<f64>> {
        let terms = self.component_log_terms(z, alpha, sigma)?;
        let lse = log_sum_exp(&terms);
        Ok(terms.iter().map(|t| (t - lse).exp()).collect())
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Exact eps_hat = -sigma_t grad_z log p_t(z) for mixture data.
pub fn analytic_denoiser_eps(
    gm: &GaussianMixtureModel,
    z: &LatentTensor,
    index: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    if z.shape() != gm.shape() {
        return Err(Error::shape(
            format!("{:?}", gm.shape()),
            format!("{:?}", z.shape()),
        ));
    }
    let (alpha, sigma) = schedule.alpha_sigma(index)?;
    let gamma = gm.responsibilities(z, alpha, sigma)?;
    let vars = gm.variances(alpha, sigma);
    let mut eps = LatentTensor::zeros(z.channels(), z.height(), z.width());
    for ((c, g), v) in gm.components.iter().zip(gamma).zip(vars) {
        // sigma * gamma_k * (z - alpha m_k) / v_k
        let diff = z.add_scaled(&c.mean, -alpha)?;
        eps = eps.add_scaled(&diff, sigma * g / v)?;
    }
    Ok(eps)
}

/// Denoiser backend wrapping a mixture and the schedule it diffuses under.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    gm: GaussianMixtureModel,
    schedule: NoiseSchedule,
}

impl AnalyticDenoiser {
    pub fn new(gm: GaussianMixtureModel, schedule: NoiseSchedule) -> Self {
        Self { gm, schedule }
    }

    pub fn mixture(&self) -> &GaussianMixtureModel {
        &self.gm
    }
}

impl Denoiser for AnalyticDenoiser {
    fn predict(
        &self,
        z: &LatentTensor,
        index: usize,
        _cond: Option<&PromptSpec>,
    ) -> Result<LatentTensor> {
        analytic_denoiser_eps(&self.gm, z, index, &self.schedule)
    }

    fn jacobian_adjoint_vec(
        &self,
        z: &LatentTensor,
        index: usize,
        _cond: Option<&PromptSpec>,
        v: &LatentTensor,
    ) -> Result<LatentTensor> {
        z.check_same_shape(v)?;
        let (alpha, sigma) = self.schedule.alpha_sigma(index)?;
        let gamma = self.gm.responsibilities(z, alpha, sigma)?;
        let vars = self.gm.variances(alpha, sigma);
        // With u_k = (z - alpha m_k) / v_k and u_bar = sum_k gamma_k u_k:
        // J = sigma [ (sum_k gamma_k / v_k) I + u_bar u_bar^T
        //             - sum_k gamma_k u_k u_k^T ],
        // which is symmetric, so the adjoint product equals the forward one.
        let us: Vec<LatentTensor> = self
            .gm
            .components
            .iter()
            .zip(&vars)
            .map(|(c, &v)| Ok(z.add_scaled(&c.mean, -alpha)?.scale(1.0 / v)))
            .collect::<Result<_>>()?;
        let mut u_bar = LatentTensor::zeros(z.channels(), z.height(), z.width());
        for (u, &g) in us.iter().zip(&gamma) {
            u_bar = u_bar.add_scaled(u, g)?;
        }
        let diag: f64 = gamma.iter().zip(&vars).map(|(g, v)| g / v).sum();
        let mut out = v.scale(diag);
        out = out.add_scaled(&u_bar, u_bar.dot(v)?)?;
        for (u, &g) in us.iter().zip(&gamma) {
            out = out.add_scaled(u, -g * u.dot(v)?)?;
        }
        Ok(out.scale(sigma))
    }
}
