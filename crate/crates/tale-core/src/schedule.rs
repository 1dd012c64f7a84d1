//! Variance-preserving diffusion scalar grid (alpha_t, sigma_t).
//!
//! Grid index 0 is the cleanest point, index T the noisiest; indices map 1:1
//! to integer timesteps, so the initiation index T' and window length tau
//! address this grid directly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::hex_digest;

/// Floor on sigma so division by sigma at the clean endpoint stays bounded.
pub const SIGMA_MIN: f64 = 1e-4;

/// Alpha at the noisy endpoint of the cosine grid. Data-prediction steps
/// divide by alpha, so the noisy end must stay well away from zero or any
/// imperfect (learned) noise prediction is amplified catastrophically;
/// pretrained latent-diffusion grids sit near this value too.
pub const ALPHA_NOISY_END: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Cosine,
    LinearBeta,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear-beta" => Ok(ScheduleKind::LinearBeta),
            other => Err(Error::InvalidConfig(format!(
                "unknown schedule kind '{other}' (expected cosine or linear-beta)"
            ))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Cosine => write!(f, "cosine"),
            ScheduleKind::LinearBeta => write!(f, "linear-beta"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    /// Continuous time in [0, 1].
    pub u: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Discretized variance-preserving schedule over a T-step grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    kind: ScheduleKind,
    grid: Vec<GridPoint>,
}

/// Builds a T-step grid; index 0 is cleanest, index T noisiest.
pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidSteps(steps));
    }
    let clip = |alpha_bar: f64| alpha_bar.clamp(SIGMA_MIN * SIGMA_MIN, 1.0 - SIGMA_MIN * SIGMA_MIN);
    let grid: Vec<GridPoint> = (0..=steps)
        .map(|i| {
            let u = i as f64 / steps as f64;
            let alpha_bar = clip(match kind {
                ScheduleKind::Cosine => {
                    // Cosine in a capped angle range: alpha(u) =
                    // cos(arccos(ALPHA_NOISY_END) u), which is the plain
                    // cos(pi u / 2) profile stopped before the zero crossing.
                    let c = (ALPHA_NOISY_END.acos() * u).cos();
                    c * c
                }
                ScheduleKind::LinearBeta => {
                    // beta(u) = beta_min + u (beta_max - beta_min)
                    const BETA_MIN: f64 = 0.1;
                    const BETA_MAX: f64 = 20.0;
                    (-(BETA_MIN * u + 0.5 * (BETA_MAX - BETA_MIN) * u * u)).exp()
                }
            });
            GridPoint {
                u,
                alpha: alpha_bar.sqrt(),
                sigma: (1.0 - alpha_bar).sqrt(),
            }
        })
        .collect();
    for w in grid.windows(2) {
        if !(w[0].alpha > w[1].alpha && w[0].sigma < w[1].sigma) {
            return Err(Error::InvalidConfig(format!(
                "schedule grid not strictly monotone at u={} (T={steps} too fine for the clip floor)",
                w[1].u
            )));
        }
    }
    Ok(NoiseSchedule { steps, kind, grid })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn grid(&self) -> &[GridPoint] {
        &self.grid
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index <= self.steps {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index,
                max: self.steps,
            })
        }
    }

    /// Grid entry i as an (alpha, sigma) pair.
    pub fn alpha_sigma(&self, index: usize) -> Result<(f64, f64)> {
        self.check_index(index)?;
        let g = self.grid[index];
        Ok((g.alpha, g.sigma))
    }

    /// log-SNR ln(alpha_i / sigma_i), strictly decreasing in i.
    pub fn log_snr(&self, index: usize) -> Result<f64> {
        let (alpha, sigma) = self.alpha_sigma(index)?;
        Ok((alpha / sigma).ln())
    }

    /// SHA-256 over the grid values, recorded in run manifests.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.steps as u64).to_le_bytes());
        hasher.update(self.kind.to_string().as_bytes());
        for g in &self.grid {
            hasher.update(g.u.to_le_bytes());
            hasher.update(g.alpha.to_le_bytes());
            hasher.update(g.sigma.to_le_bytes());
        }
        hex_digest(hasher)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = build_schedule(20, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.grid().len(), 21);
        let (a0, s0) = s.alpha_sigma(0).unwrap();
        let (at, st) = s.alpha_sigma(20).unwrap();
        assert!(a0 >= 0.999, "alpha_0 = {a0}");
        assert!((s0 - SIGMA_MIN).abs() < 1e-12);
        assert!(st >= 0.99, "sigma_T = {st}");
        assert!((at - ALPHA_NOISY_END).abs() < 1e-12);
    }

    #[test]
    fn vp_identity_holds() {
        for steps in [2, 5, 20, 50, 100] {
            for kind in [ScheduleKind::Cosine, ScheduleKind::LinearBeta] {
                let s = build_schedule(steps, kind).unwrap();
                for i in 0..=steps {
                    let (a, sg) = s.alpha_sigma(i).unwrap();
                    assert!(
                        (a * a + sg * sg - 1.0).abs() <= 1e-12,
                        "kind {kind} T={steps} i={i}"
                    );
                }
            }
        }
    }

    #[test]
    fn monotone_and_log_snr_decreasing() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::LinearBeta] {
            let s = build_schedule(50, kind).unwrap();
            for i in 0..50 {
                let (a0, s0) = s.alpha_sigma(i).unwrap();
                let (a1, s1) = s.alpha_sigma(i + 1).unwrap();
                assert!(a0 > a1 && s0 < s1);
                assert!(s.log_snr(i).unwrap() > s.log_snr(i + 1).unwrap());
            }
        }
    }

    #[test]
    fn too_few_steps_rejected() {
        assert!(matches!(
            build_schedule(0, ScheduleKind::Cosine),
            Err(Error::InvalidSteps(0))
        ));
        assert!(matches!(
            build_schedule(1, ScheduleKind::Cosine),
            Err(Error::InvalidSteps(1))
        ));
    }

    #[test]
    fn index_out_of_range() {
        let s = build_schedule(20, ScheduleKind::Cosine).unwrap();
        assert!(matches!(
            s.alpha_sigma(21),
            Err(Error::IndexOutOfRange { index: 21, max: 20 })
        ));
    }

    #[test]
    fn digest_distinguishes_kinds() {
        let a = build_schedule(20, ScheduleKind::Cosine).unwrap();
        let b = build_schedule(20, ScheduleKind::LinearBeta).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), build_schedule(20, ScheduleKind::Cosine).unwrap().digest());
    }
}
