//! Flat key = value configuration files and preset handling.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank
//! lines ignored. Keys are kebab-case and match the manifest's config echo.
//! Unknown keys are errors so typos surface immediately.
//!
//! ```text
//! # composition settings
//! t = 20
//! t-prime = 8
//! tau = 5
//! lambda0 = 0.1
//! lambda-slope = 0.5
//! n = 3
//! eta = 15
//! eta-style = 0.15
//! seed = 7
//! solver-order = 2
//! inversion-order = 1
//! gradient-mode = frozen-eps      # frozen-eps | through-denoiser | finite-difference
//! guided-mode = latent-descent    # latent-descent | time-travel
//! schedule = cosine               # cosine | linear-beta
//! skip-optimization = false
//! skip-normalization = false
//! baseline-init = false
//! latent-dilation = 0
//! eta-calibration = 0.0004
//! eta-style-calibration = 0.02
//! ```

use std::path::Path;

use crate::compose::CompositionConfig;
use crate::error::{Error, Result};
use crate::solver::SolverOrder;

/// Named starting points before file/flag overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Paper defaults for cross-domain composition.
    CrossDomain,
    /// Later initiation, constant lambda, optimization skipped.
    SameDomain,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-domain" => Ok(Preset::CrossDomain),
            "same-domain" => Ok(Preset::SameDomain),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset '{other}' (expected cross-domain or same-domain)"
            ))),
        }
    }
}

impl Preset {
    pub fn config(self) -> CompositionConfig {
        match self {
            Preset::CrossDomain => CompositionConfig::default(),
            Preset::SameDomain => CompositionConfig::same_domain(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::InvalidConfig(format!(
            "{key}: expected true or false, got '{other}'"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse '{v}'")))
}

fn parse_order(key: &str, v: &str) -> Result<SolverOrder> {
    let n: u64 = parse_num(key, v)?;
    SolverOrder::try_from(n).map_err(|_| {
        Error::InvalidConfig(format!("{key}: order must be 1 or 2, got '{v}'"))
    })
}

/// Applies one key = value pair onto a config.
pub fn apply_key(cfg: &mut CompositionConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "t" => cfg.steps = parse_num(key, value)?,
        "t-prime" => cfg.t_prime = parse_num(key, value)?,
        "tau" => cfg.tau = parse_num(key, value)?,
        "lambda0" => cfg.lambda0 = parse_num(key, value)?,
        "lambda-slope" => cfg.lambda_slope = parse_num(key, value)?,
        "n" => cfg.opt_iters = parse_num(key, value)?,
        "eta" => cfg.eta = parse_num(key, value)?,
        "eta-style" => cfg.eta_style = parse_num(key, value)?,
        "eta-calibration" => cfg.eta_calibration = parse_num(key, value)?,
        "eta-style-calibration" => cfg.eta_style_calibration = parse_num(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        "solver-order" => cfg.solver_order = parse_order(key, value)?,
        "inversion-order" => cfg.inversion_order = parse_order(key, value)?,
        "gradient-mode" => cfg.gradient_mode = value.parse()?,
        "guided-mode" => cfg.guided_mode = value.parse()?,
        "schedule" => cfg.schedule_kind = value.parse()?,
        "skip-optimization" => cfg.skip_optimization = parse_bool(key, value)?,
        "skip-normalization" => cfg.skip_normalization = parse_bool(key, value)?,
        "baseline-init" => cfg.baseline_init = parse_bool(key, value)?,
        "latent-dilation" => cfg.latent_object_dilation = parse_num(key, value)?,
        other => {
            return Err(Error::InvalidConfig(format!("unknown config key '{other}'")));
        }
    }
    Ok(())
}

/// Parses a config file's text onto an existing config.
pub fn apply_config_text(cfg: &mut CompositionConfig, text: &str) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
        })?;
        apply_key(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}

/// Loads a config file over the given base. Validation is the caller's last
/// step after any flag overrides.
pub fn load_config_file(base: CompositionConfig, path: &Path) -> Result<CompositionConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = base;
    apply_config_text(&mut cfg, &text)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::GradientMode;

    #[test]
    fn defaults_match_paper_settings() {
        let cfg = CompositionConfig::default();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.t_prime, 8);
        assert_eq!(cfg.tau, 5);
        assert_eq!(cfg.opt_iters, 3);
        assert_eq!(cfg.eta, 15.0);
        assert_eq!(cfg.eta_style, 0.15);
    }

    #[test]
    fn same_domain_preset() {
        let cfg = Preset::SameDomain.config();
        assert_eq!(cfg.t_prime, 6);
        assert_eq!(cfg.tau, 3);
        assert_eq!(cfg.lambda0, 0.1);
        assert_eq!(cfg.lambda_slope, 0.0);
        assert!(cfg.skip_optimization);
    }

    #[test]
    fn parse_text_with_comments() {
        let mut cfg = CompositionConfig::default();
        apply_config_text(
            &mut cfg,
            "# comment\n t = 30 \n t-prime = 12 # inline\n\n gradient-mode = through-denoiser\n skip-normalization = true\n",
        )
        .unwrap();
        assert_eq!(cfg.steps, 30);
        assert_eq!(cfg.t_prime, 12);
        assert_eq!(cfg.gradient_mode, GradientMode::ThroughDenoiser);
        assert!(cfg.skip_normalization);
    }

    #[test]
    fn unknown_key_names_offender() {
        let mut cfg = CompositionConfig::default();
        let err = apply_config_text(&mut cfg, "t-prmie = 8\n").unwrap_err();
        assert!(err.to_string().contains("t-prmie"), "{err}");
    }

    #[test]
    fn bad_value_names_key() {
        let mut cfg = CompositionConfig::default();
        let err = apply_config_text(&mut cfg, "eta = soup\n").unwrap_err();
        assert!(err.to_string().contains("eta"), "{err}");
        let err = apply_config_text(&mut cfg, "solver-order = 3\n").unwrap_err();
        assert!(err.to_string().contains("solver-order"), "{err}");
    }
}
