//! Clean-image prediction, semantic and style energy functions, their
//! gradients with respect to the noisy latent, and the guided update applied
//! inside the optimization window.
//!
//! The scalar chain is z_t -> z0_hat = (z_t - sigma_t eps_hat)/alpha_t ->
//! x = decode(z0_hat) -> eta F(x) + eta' F'(x), with F one minus the cosine
//! between the image and prompt embeddings and F' the squared Frobenius
//! distance between the Gram matrix of the masked composite and that of the
//! background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::models::{Embedder, FeatureBank, ModelBundle, PromptSpec};
use crate::schedule::NoiseSchedule;
use crate::solver::{denoise_step, invert_step, Branch, SolverOrder, TrajectoryState};
use crate::tensor::{LatentTensor, Mask};

/// How the gradient of the energy chain treats the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// eps_hat treated as constant in z_t; the chain through the clean
    /// prediction and decoder is differentiated analytically.
    FrozenEps,
    /// Adds the denoiser's transposed-Jacobian term.
    ThroughDenoiser,
    /// Central differences on the scalar chain with eps_hat frozen at the
    /// base point; the oracle for frozen-eps.
    FiniteDifference,
}

impl std::str::FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen-eps" => Ok(GradientMode::FrozenEps),
            "through-denoiser" => Ok(GradientMode::ThroughDenoiser),
            "finite-difference" => Ok(GradientMode::FiniteDifference),
            other => Err(Error::InvalidConfig(format!(
                "unknown gradient mode '{other}'"
            ))),
        }
    }
}

/// Inner-loop state semantics of the guided update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidedMode {
    /// Default: descend on z_t for N iterations, then one denoise step and
    /// the replacement.
    LatentDescent,
    /// Alternative: denoise, subtract the masked gradient from the step
    /// output, and deterministically re-noise back to t between iterations.
    TimeTravel,
}

impl std::str::FromStr for GuidedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent-descent" => Ok(GuidedMode::LatentDescent),
            "time-travel" => Ok(GuidedMode::TimeTravel),
            other => Err(Error::InvalidConfig(format!("unknown guided mode '{other}'"))),
        }
    }
}

/// One-shot estimate of the final latent and image from a noisy latent.
#[derive(Debug, Clone)]
pub struct CleanPrediction {
    pub latent_clean: LatentTensor,
    pub pixel_clean: LatentTensor,
}

/// z0_hat = (z_t - sigma_t eps_hat) / alpha_t, decoded to pixel space.
pub fn predict_clean(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    index: usize,
    schedule: &NoiseSchedule,
    autoencoder: &dyn crate::models::Autoencoder,
) -> Result<CleanPrediction> {
    z_t.check_same_shape(eps_hat)?;
    let (alpha, sigma) = schedule.alpha_sigma(index)?;
    let latent_clean = z_t.add_scaled(eps_hat, -sigma)?.scale(1.0 / alpha);
    let pixel_clean = autoencoder.decode(&latent_clean)?;
    Ok(CleanPrediction {
        latent_clean,
        pixel_clean,
    })
}

const NORM_FLOOR: f64 = 1e-12;

fn cosine_parts(e: &[f64], p: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let ne = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ne <= NORM_FLOOR {
        return Err(Error::DegenerateEmbedding { norm: ne });
    }
    if np <= NORM_FLOOR {
        return Err(Error::DegenerateEmbedding { norm: np });
    }
    let dot: f64 = e.iter().zip(p).map(|(a, b)| a * b).sum();
    Ok((dot, ne, np, dot / (ne * np)))
}

/// F = 1 - cos(embed_image(x), embed_text(p)); range [0, 2].
pub fn semantic_energy(x: &LatentTensor, prompt: &PromptSpec, emb: &dyn Embedder) -> Result<f64> {
    let e = emb.embed_image(x)?;
    let p = emb.embed_text(prompt);
    let (_, _, _, cos) = cosine_parts(&e, &p)?;
    Ok(1.0 - cos)
}

/// F' = || gram(x masked to the user region) - gram(x_bg) ||_F^2.
pub fn style_energy(
    x: &LatentTensor,
    user_mask: &Mask,
    x_bg: &LatentTensor,
    fb: &dyn FeatureBank,
) -> Result<f64> {
    x.check_same_shape(x_bg)?;
    let g_masked = fb.gram(&x.mul_mask(user_mask)?)?;
    let g_bg = fb.gram(x_bg)?;
    Ok(g_masked
        .iter()
        .zip(&g_bg)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Condition shared by the energy chain: the prompt, the clean background
/// image and the pixel-resolution user mask.
pub struct EnergyCondition<'a> {
    pub prompt: &'a PromptSpec,
    pub background: &'a LatentTensor,
    pub user_mask: &'a Mask,
}

/// Scaled per-term gradients with the energy values they were evaluated at.
#[derive(Debug, Clone)]
pub struct EnergyGradient {
    /// grad_z of eta * F.
    pub semantic_grad: LatentTensor,
    /// grad_z of eta' * F'.
    pub style_grad: LatentTensor,
    pub semantic: f64,
    pub style: f64,
}

impl EnergyGradient {
    pub fn combined(&self) -> Result<LatentTensor> {
        self.semantic_grad.add(&self.style_grad)
    }
}

/// Pixel-space gradients of the raw energies at x, plus their values.
fn pixel_gradients(
    x: &LatentTensor,
    cond: &EnergyCondition<'_>,
    bundle: &ModelBundle,
) -> Result<(LatentTensor, LatentTensor, f64, f64)> {
    let emb = bundle.embedder.as_ref();
    let fb = bundle.feature_bank.as_ref();

    let e = emb.embed_image(x)?;
    let p = emb.embed_text(cond.prompt);
    let (_, ne, np, cos) = cosine_parts(&e, &p)?;
    let semantic = 1.0 - cos;
    // dF/de_i = cos e_i / |e|^2 - p_i / (|e| |p|)
    let g_e: Vec<f64> = e
        .iter()
        .zip(&p)
        .map(|(ei, pi)| cos * ei / (ne * ne) - pi / (ne * np))
        .collect();
    let g_sem = emb.image_grad_adjoint(x, &g_e)?;

    let masked = x.mul_mask(cond.user_mask)?;
    let g_masked = fb.gram(&masked)?;
    let g_bg = fb.gram(cond.background)?;
    let style: f64 = g_masked
        .iter()
        .zip(&g_bg)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let d_gram: Vec<f64> = g_masked
        .iter()
        .zip(&g_bg)
        .map(|(a, b)| 2.0 * (a - b))
        .collect();
    let g_sty = fb.gram_grad_adjoint(&masked, &d_gram)?.mul_mask(cond.user_mask)?;
    Ok((g_sem, g_sty, semantic, style))
}

/// Maps a pixel-space cotangent to the latent gradient under the chosen
/// mode: (1/alpha)(D^T g - sigma J_eps^T D^T g) with the Jacobian term only
/// in through-denoiser mode.
fn lift_to_latent(
    g_x: &LatentTensor,
    z_t: &LatentTensor,
    index: usize,
    cond: &EnergyCondition<'_>,
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    mode: GradientMode,
) -> Result<LatentTensor> {
    let (alpha, sigma) = schedule.alpha_sigma(index)?;
    let w = bundle.autoencoder.decode_adjoint_vec(g_x)?;
    let lifted = match mode {
        GradientMode::FrozenEps | GradientMode::FiniteDifference => w,
        GradientMode::ThroughDenoiser => {
            let jt = bundle
                .denoiser
                .jacobian_adjoint_vec(z_t, index, Some(cond.prompt), &w)?;
            w.add_scaled(&jt, -sigma)?
        }
    };
    Ok(lifted.scale(1.0 / alpha))
}

/// grad_z (eta F + eta' F'), split per term, before masking.
pub fn energy_gradient(
    z_t: &LatentTensor,
    index: usize,
    cond: &EnergyCondition<'_>,
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    mode: GradientMode,
    eta: f64,
    eta_style: f64,
) -> Result<EnergyGradient> {
    let eps_hat = bundle
        .denoiser
        .predict(z_t, index, Some(cond.prompt))?;
    match mode {
        GradientMode::FrozenEps | GradientMode::ThroughDenoiser => {
            let cp = predict_clean(z_t, &eps_hat, index, schedule, bundle.autoencoder.as_ref())?;
            let (g_sem_x, g_sty_x, semantic, style) =
                pixel_gradients(&cp.pixel_clean, cond, bundle)?;
            let semantic_grad =
                lift_to_latent(&g_sem_x, z_t, index, cond, bundle, schedule, mode)?.scale(eta);
            let style_grad =
                lift_to_latent(&g_sty_x, z_t, index, cond, bundle, schedule, mode)?.scale(eta_style);
            Ok(EnergyGradient {
                semantic_grad,
                style_grad,
                semantic,
                style,
            })
        }
        GradientMode::FiniteDifference => {
            let (alpha, sigma) = schedule.alpha_sigma(index)?;
            let decode_at = |z: &LatentTensor| -> Result<LatentTensor> {
                let clean = z.add_scaled(&eps_hat, -sigma)?.scale(1.0 / alpha);
                bundle.autoencoder.decode(&clean)
            };
            let base = decode_at(z_t)?;
            let semantic = semantic_energy(&base, cond.prompt, bundle.embedder.as_ref())?;
            let style = style_energy(
                &base,
                cond.user_mask,
                cond.background,
                bundle.feature_bank.as_ref(),
            )?;
            let h = 1e-3;
            let mut semantic_grad = LatentTensor::zeros(z_t.channels(), z_t.height(), z_t.width());
            let mut style_grad = semantic_grad.clone();
            for i in 0..z_t.len() {
                let mut zp = z_t.clone();
                zp.data_mut()[i] += h;
                let mut zm = z_t.clone();
                zm.data_mut()[i] -= h;
                let xp = decode_at(&zp)?;
                let xm = decode_at(&zm)?;
                let f_p = semantic_energy(&xp, cond.prompt, bundle.embedder.as_ref())?;
                let f_m = semantic_energy(&xm, cond.prompt, bundle.embedder.as_ref())?;
                semantic_grad.data_mut()[i] = eta * (f_p - f_m) / (2.0 * h);
                let s_p = style_energy(
                    &xp,
                    cond.user_mask,
                    cond.background,
                    bundle.feature_bank.as_ref(),
                )?;
                let s_m = style_energy(
                    &xm,
                    cond.user_mask,
                    cond.background,
                    bundle.feature_bank.as_ref(),
                )?;
                style_grad.data_mut()[i] = eta_style * (s_p - s_m) / (2.0 * h);
            }
            Ok(EnergyGradient {
                semantic_grad,
                style_grad,
                semantic,
                style,
            })
        }
    }
}

/// Inner-loop parameters of the guided update.
#[derive(Debug, Clone, Copy)]
pub struct GuidedParams {
    pub iters: usize,
    pub eta: f64,
    pub eta_style: f64,
    pub gradient_mode: GradientMode,
    pub guided_mode: GuidedMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub semantic: f64,
    pub style: f64,
    /// Norm of the applied masked semantic update, eta included.
    pub semantic_applied_norm: f64,
    /// Norm of the applied masked style update, eta' included.
    pub style_applied_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Energy values at window entry (first inner iteration), when evaluated.
    pub semantic: Option<f64>,
    pub style: Option<f64>,
    pub iterations: Vec<IterationRecord>,
}

impl EnergyReport {
    fn empty() -> Self {
        Self {
            semantic: None,
            style: None,
            iterations: Vec::new(),
        }
    }
}

fn plain_denoise_replace(
    z_t: &LatentTensor,
    z_bg_next: &LatentTensor,
    index: usize,
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    masks: &MaskSet,
    prompt: &PromptSpec,
) -> Result<LatentTensor> {
    let eps = bundle.denoiser.predict(z_t, index, Some(prompt))?;
    let state = TrajectoryState::new(index, z_t.clone(), Branch::Composite);
    let next = denoise_step(&state, &eps, schedule, SolverOrder::First)?;
    next.latent.select_masked(z_bg_next, &masks.latent_object)
}

/// Optimizes the object region of z_t for `iters` iterations, takes one
/// denoise step, and maintains the region outside the object from the
/// background trajectory by replacement. Steps inside the window are first
/// order: the latent edits between steps invalidate multistep history.
pub fn guided_step(
    z_t_res: &LatentTensor,
    z_bg_next: &LatentTensor,
    index: usize,
    params: &GuidedParams,
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    masks: &MaskSet,
    cond: &EnergyCondition<'_>,
) -> Result<(LatentTensor, EnergyReport)> {
    if index == 0 {
        return Err(Error::IndexUnderflow);
    }
    z_t_res.check_same_shape(z_bg_next)?;
    if masks.latent_object.is_empty() {
        return Err(Error::EmptyMask);
    }
    if params.iters == 0 {
        let out = plain_denoise_replace(
            z_t_res,
            z_bg_next,
            index,
            bundle,
            schedule,
            masks,
            cond.prompt,
        )?;
        return Ok((out, EnergyReport::empty()));
    }

    let mut report = EnergyReport::empty();
    let push_iteration = |report: &mut EnergyReport, g: &EnergyGradient, sem: f64, sty: f64| {
        if report.iterations.is_empty() {
            report.semantic = Some(g.semantic);
            report.style = Some(g.style);
        }
        report.iterations.push(IterationRecord {
            semantic: g.semantic,
            style: g.style,
            semantic_applied_norm: sem,
            style_applied_norm: sty,
        });
    };

    match params.guided_mode {
        GuidedMode::LatentDescent => {
            let mut z = z_t_res.clone();
            for _ in 0..params.iters {
                let g = energy_gradient(
                    &z,
                    index,
                    cond,
                    bundle,
                    schedule,
                    params.gradient_mode,
                    params.eta,
                    params.eta_style,
                )?;
                let upd_sem = g.semantic_grad.mul_mask(&masks.latent_object)?;
                let upd_sty = g.style_grad.mul_mask(&masks.latent_object)?;
                z = z.sub(&upd_sem)?.sub(&upd_sty)?;
                push_iteration(&mut report, &g, upd_sem.norm_l2(), upd_sty.norm_l2());
            }
            let out = plain_denoise_replace(
                &z,
                z_bg_next,
                index,
                bundle,
                schedule,
                masks,
                cond.prompt,
            )?;
            Ok((out, report))
        }
        GuidedMode::TimeTravel => {
            let mut z_t = z_t_res.clone();
            let mut optimized = None;
            for i in 0..params.iters {
                let eps = bundle.denoiser.predict(&z_t, index, Some(cond.prompt))?;
                let state = TrajectoryState::new(index, z_t.clone(), Branch::Composite);
                let next = denoise_step(&state, &eps, schedule, SolverOrder::First)?.latent;
                let g = energy_gradient(
                    &z_t,
                    index,
                    cond,
                    bundle,
                    schedule,
                    params.gradient_mode,
                    params.eta,
                    params.eta_style,
                )?;
                let upd_sem = g.semantic_grad.mul_mask(&masks.latent_object)?;
                let upd_sty = g.style_grad.mul_mask(&masks.latent_object)?;
                let cand = next.sub(&upd_sem)?.sub(&upd_sty)?;
                push_iteration(&mut report, &g, upd_sem.norm_l2(), upd_sty.norm_l2());
                if i + 1 < params.iters {
                    // Deterministic re-noise back to index t.
                    let eps_back = bundle
                        .denoiser
                        .predict(&cand, index - 1, Some(cond.prompt))?;
                    let st = TrajectoryState::new(index - 1, cand, Branch::Composite);
                    z_t = invert_step(&st, &eps_back, schedule)?.latent;
                } else {
                    optimized = Some(cand);
                }
            }
            let out = optimized
                .expect("iters > 0")
                .select_masked(z_bg_next, &masks.latent_object)?;
            Ok((out, report))
        }
    }
}
