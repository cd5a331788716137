//! Classifier-free guidance for Gaussian autoregressive steps.
//!
//! Tilting `N(μc, σc²)^(1+ω) · N(μu, σu²)^(−ω)` gives another Gaussian
//! whenever its precision stays positive. Clipping the variance ratio
//! `s = σc²/σu²` to `[0, 1]` guarantees that and keeps the guided spread
//! at most `σc`. At `s = 1` the mean update is ordinary CFG.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

pub const LEGACY_SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Closed-form tilt with the clipped variance ratio.
    Proposed,
    /// Linear extrapolation of mean and standard deviation.
    Legacy,
    None,
}

impl core::str::FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(GuidanceMode::Proposed),
            "legacy" => Ok(GuidanceMode::Legacy),
            "none" => Ok(GuidanceMode::None),
            _ => Err(Error::Config(format!("unknown guidance mode {:?}", s))),
        }
    }
}

impl core::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            GuidanceMode::Proposed => "proposed",
            GuidanceMode::Legacy => "legacy",
            GuidanceMode::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    pub omega: f64,
    pub mode: GuidanceMode,
    /// Blocks to guide, in generation order. `None` guides every block that
    /// sees the condition.
    pub blocks: Option<Vec<usize>>,
}

impl GuidanceSpec {
    pub fn none() -> Self {
        GuidanceSpec { omega: 0.0, mode: GuidanceMode::None, blocks: None }
    }

    pub fn new(mode: GuidanceMode, omega: f64) -> Result<Self> {
        let spec = GuidanceSpec { omega, mode, blocks: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() || self.omega < 0.0 {
            return Err(Error::Invalid(format!("guidance weight must be >= 0, got {}", self.omega)));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.mode != GuidanceMode::None
    }
}

/// Counters kept while sampling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GuidanceStats {
    /// Backbone invocations, one per pass per autoregressive step.
    pub passes: u64,
    /// Times the legacy rule produced a spread below the floor.
    pub floor_hits: u64,
}

fn check_sigmas(sc: f64, su: f64) -> Result<()> {
    if sc > 0.0 && su > 0.0 && sc.is_finite() && su.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain { op: "guidance", detail: format!("sigmas must be positive, got {} and {}", sc, su) })
    }
}

/// Clipped variance ratio `clip(σc²/σu², 0, 1)`.
pub fn variance_ratio(sigma_c: f64, sigma_u: f64) -> f64 {
    let r = sigma_c / sigma_u;
    (r * r).clamp(0.0, 1.0)
}

/// Guided `(μ, σ)` under the clipped closed-form rule.
pub fn guided_gaussian(mu_c: f64, sigma_c: f64, mu_u: f64, sigma_u: f64, omega: f64) -> Result<(f64, f64)> {
    check_sigmas(sigma_c, sigma_u)?;
    let s = variance_ratio(sigma_c, sigma_u);
    if s == 1.0 {
        return Ok(standard_cfg(mu_c, sigma_c, mu_u, omega));
    }
    let denom = 1.0 + omega * (1.0 - s);
    let mu = mu_c + (omega * s / denom) * (mu_c - mu_u);
    Ok((mu, sigma_c / math::sqrt(denom)))
}

/// Mean extrapolation shared by diffusion-style guidance; spread unchanged.
pub fn standard_cfg(mu_c: f64, sigma_c: f64, mu_u: f64, omega: f64) -> (f64, f64) {
    (mu_c + omega * (mu_c - mu_u), sigma_c)
}

/// Linear extrapolation of both moments. The boolean reports whether the
/// spread had to be floored.
pub fn legacy_linear_guidance(mu_c: f64, sigma_c: f64, mu_u: f64, sigma_u: f64, omega: f64) -> Result<(f64, f64, bool)> {
    check_sigmas(sigma_c, sigma_u)?;
    let mu = mu_c + omega * (mu_c - mu_u);
    let sigma = sigma_c + omega * (sigma_c - sigma_u);
    if sigma < LEGACY_SIGMA_FLOOR {
        Ok((mu, LEGACY_SIGMA_FLOOR, true))
    } else {
        Ok((mu, sigma, false))
    }
}

/// Applies `mode` elementwise, updating `stats.floor_hits`.
pub fn combine(
    mode: GuidanceMode,
    omega: f64,
    cond: (&[f64], &[f64]),
    uncond: (&[f64], &[f64]),
    stats: &mut GuidanceStats,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = cond.0.len();
    let mut mu = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for i in 0..n {
        let (mc, sc, mu_u, su) = (cond.0[i], cond.1[i], uncond.0[i], uncond.1[i]);
        let (m, s) = match mode {
            GuidanceMode::Proposed => guided_gaussian(mc, sc, mu_u, su, omega)?,
            GuidanceMode::Legacy => {
                let (m, s, floored) = legacy_linear_guidance(mc, sc, mu_u, su, omega)?;
                stats.floor_hits += floored as u64;
                (m, s)
            }
            GuidanceMode::None => (mc, sc),
        };
        mu.push(m);
        sigma.push(s);
    }
    Ok((mu, sigma))
}
