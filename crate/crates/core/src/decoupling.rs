//! Effective noise levels of the decoupled scalar channel, the scalar
//! posterior-mean estimator and its MSE.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cbamp::{denoise_mean, DenoiserParams};
use crate::channel::BetaDistribution;
use crate::error::{Error, Result};
use crate::numerics::{omega, omega2, solve_fixed_point, FixedPointConfig};

/// Relative gap between the two state-evolution starts above which the
/// solution is reported as ambiguous.
pub const AMBIGUITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverMethod {
    Property1,
    StateEvolution,
}

impl std::fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverMethod::Property1 => "property1",
            SolverMethod::StateEvolution => "state-evolution",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveNoise {
    pub sigma_eff_sq: f64,
    pub sigma_peff_sq: f64,
    pub method: SolverMethod,
    pub residual: f64,
    pub iters: usize,
    /// Set when iterations from low and high starting points settle on
    /// different fixed points; `alternate` then holds the low-start one.
    pub ambiguous: bool,
    pub alternate: Option<f64>,
    pub trace: Vec<f64>,
}

fn check_lam(lam: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::param("lam", "must lie in [0, 1]"));
    }
    Ok(())
}

/// Posterior-mean estimate for `z = b + √η_p n` with `b` Bernoulli(λ)-gated `CN(0, 1)`.
pub fn scalar_pmmse(z: Complex64, lam: f64, eta_p: f64) -> Result<Complex64> {
    let dp = DenoiserParams::new(lam, 1.0, eta_p)?;
    Ok(denoise_mean(z, &dp))
}

/// MSE of [`scalar_pmmse`] when the true noise level equals the postulated one.
pub fn mse_matched(lam: f64, eta_p: f64) -> Result<f64> {
    check_lam(lam)?;
    if !(eta_p > 0.0) {
        return Err(Error::param("eta_p", "must be > 0"));
    }
    if lam == 0.0 {
        return Ok(0.0);
    }
    let a = (1.0 + eta_p) * (1.0 - lam) / (lam * eta_p);
    let w = omega(a, eta_p)?;
    Ok((lam * (1.0 - eta_p * eta_p / (1.0 + eta_p) * w)).max(0.0))
}

/// MSE of [`scalar_pmmse`] built for noise `η_p` when the true noise is `η`.
///
/// The second integral carries the density of `|z|²` under the true noise,
/// a two-exponential mixture, so its `e^{-d̄t}` term enters with a plus sign;
/// it is evaluated as `omega2(ā, b̄, -c̄, d̄)`.
pub fn mse_mismatched(lam: f64, eta_p: f64, eta: f64) -> Result<f64> {
    check_lam(lam)?;
    if !(eta_p > 0.0) {
        return Err(Error::param("eta_p", "must be > 0"));
    }
    if !(eta > 0.0) {
        return Err(Error::param("eta", "must be > 0"));
    }
    if lam == 0.0 {
        return Ok(0.0);
    }
    let a = (1.0 + eta_p) * (1.0 - lam) / (lam * eta_p);
    let b = eta_p * (1.0 + eta_p) / (1.0 + eta);
    let c = (1.0 + eta) * (1.0 - lam) / (lam * eta);
    let d = b / eta;
    let w = omega(a, b)?;
    let w2 = omega2(a, b, -c, d)?;
    let v = lam
        * (1.0 - 2.0 * eta_p * eta_p * (1.0 + eta_p) / ((1.0 + eta) * (1.0 + eta)) * w
            + eta_p * eta_p / (1.0 + eta) * w2);
    Ok(v.max(0.0))
}

/// Per-user MSE of the posterior-mean estimator on the decoupled channel
/// `z = θ + σ n`, averaged over `β`:
/// `λ(E{β} − E_β[λσ⁴/v²·∫ t e^{-tσ²/β} / (λ/v + (1−λ)e^{-t}/σ²) dt])`, `v = β + σ²`.
pub fn theory_mse(sigma_sq: f64, lam: f64, bd: &BetaDistribution) -> Result<f64> {
    check_lam(lam)?;
    if !(sigma_sq > 0.0) {
        return Err(Error::param("sigma_eff_sq", "must be > 0"));
    }
    if lam == 0.0 {
        return Ok(0.0);
    }
    bd.try_expect(|b| Ok(b * mse_matched(lam, sigma_sq / b)?))
}

fn mismatched_expectation(lam: f64, sp: f64, s: f64, bd: &BetaDistribution) -> Result<f64> {
    bd.try_expect(|b| Ok(b * mse_mismatched(lam, sp / b, s / b)?))
}

fn validate_inputs(lam: f64, gamma: f64, noise_var: f64) -> Result<()> {
    check_lam(lam)?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::param("gamma", "must be finite and >= 0"));
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::param("noise_var", "must be finite and > 0"));
    }
    Ok(())
}

/// Solves `σ² = σ0² + γ·theory_mse(σ²)` from both `σ0²` and
/// `σ0² + γλE{β}`. The high start is reported; a disagreement sets
/// `ambiguous`.
pub fn solve_state_evolution(
    lam: f64,
    gamma: f64,
    noise_var: f64,
    bd: &BetaDistribution,
    cfg: &FixedPointConfig,
) -> Result<EffectiveNoise> {
    validate_inputs(lam, gamma, noise_var)?;
    let map = |x: f64| Ok(noise_var + gamma * theory_mse(x, lam, bd)?);
    let high = noise_var + gamma * lam * bd.mean();
    let hi = solve_fixed_point(map, &FixedPointConfig { init: high, ..*cfg })?;
    let lo = solve_fixed_point(map, &FixedPointConfig { init: noise_var, ..*cfg })?;
    let gap = (hi.value - lo.value).abs() / hi.value;
    let ambiguous = gap > AMBIGUITY_TOL.max(10.0 * cfg.rel_tol);
    Ok(EffectiveNoise {
        sigma_eff_sq: hi.value,
        sigma_peff_sq: hi.value,
        method: SolverMethod::StateEvolution,
        residual: hi.residual,
        iters: hi.iters,
        ambiguous,
        alternate: ambiguous.then_some(lo.value),
        trace: hi.trace,
    })
}

/// Jointly iterates the pair
/// `σ_eff² = σ0² + γE{β·mse_mismatched(λ, σ_p-eff²/β, σ_eff²/β)}`,
/// `σ_p-eff² = σ0² + γE{β·mse_matched(λ, σ_p-eff²/β)}`
/// with damping until both relative residuals are below `cfg.rel_tol`.
/// `trace` records the `σ_eff²` iterates.
pub fn solve_property1(
    lam: f64,
    gamma: f64,
    noise_var: f64,
    bd: &BetaDistribution,
    cfg: &FixedPointConfig,
) -> Result<EffectiveNoise> {
    validate_inputs(lam, gamma, noise_var)?;
    cfg.validate()?;
    let start = noise_var + gamma * lam * bd.mean();
    let (mut s, mut sp) = (start, start);
    let mut trace = Vec::new();
    for iter in 0..cfg.max_iters {
        trace.push(s);
        let sp_map = noise_var + gamma * theory_mse(sp, lam, bd)?;
        let s_map = noise_var + gamma * mismatched_expectation(lam, sp, s, bd)?;
        if !sp_map.is_finite() || !s_map.is_finite() {
            return Err(Error::Divergence { iter });
        }
        let residual = ((s_map - s).abs() / s).max((sp_map - sp).abs() / sp);
        if residual <= cfg.rel_tol {
            return Ok(EffectiveNoise {
                sigma_eff_sq: s,
                sigma_peff_sq: sp,
                method: SolverMethod::Property1,
                residual,
                iters: iter + 1,
                ambiguous: false,
                alternate: None,
                trace,
            });
        }
        s += cfg.damping * (s_map - s);
        sp += cfg.damping * (sp_map - sp);
    }
    Err(Error::FixedPoint {
        iters: cfg.max_iters,
        last: s,
        trace,
    })
}

/// Default solver settings for the effective-noise equations: the generic
/// damped iteration with a `1e-8` relative residual target.
pub fn default_solver_config() -> FixedPointConfig {
    FixedPointConfig {
        rel_tol: 1e-8,
        ..FixedPointConfig::default()
    }
}
