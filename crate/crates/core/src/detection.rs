//! Activity detection on the decoupled channel: per-AP likelihood ratio
//! test, centralized vector test and distributed fusion of binary votes.

use nalgebra::DVector;
use num_complex::Complex64;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::cbamp::activity_posterior;
use crate::channel::BetaDistribution;
use crate::error::{Error, Result};

fn check_open_unit(lam: f64) -> Result<()> {
    if !(lam > 0.0 && lam < 1.0) {
        return Err(Error::param("lam", "must lie in (0, 1)"));
    }
    Ok(())
}

fn check_pos(key: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::param(key, "must be finite and > 0"));
    }
    Ok(())
}

/// `l′ = σ²(β+σ²)/β · ln((1−λ)(β+σ²)/(λσ²))`.
pub fn lrt_threshold(sigma_sq: f64, lam: f64, beta: f64) -> Result<f64> {
    check_open_unit(lam)?;
    check_pos("sigma_eff_sq", sigma_sq)?;
    check_pos("beta", beta)?;
    let v = beta + sigma_sq;
    Ok(sigma_sq * v / beta * ((1.0 - lam) * v / (lam * sigma_sq)).ln())
}

/// Active iff `|z|² > l′`.
pub fn lrt_decide(z: Complex64, sigma_sq: f64, lam: f64, beta: f64) -> Result<bool> {
    Ok(z.norm_sqr() > lrt_threshold(sigma_sq, lam, beta)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrtResult {
    /// `l′`, present when `β` is deterministic.
    pub threshold: Option<f64>,
    pub p_false_alarm: f64,
    pub p_miss: f64,
    pub p_err: f64,
}

/// False-alarm, miss and error probabilities averaged over `β`.
pub fn lrt_error_probs(sigma_sq: f64, lam: f64, bd: &BetaDistribution) -> Result<LrtResult> {
    check_open_unit(lam)?;
    check_pos("sigma_eff_sq", sigma_sq)?;
    let p_f = bd.try_expect(|b| Ok((-lrt_threshold(sigma_sq, lam, b)? / sigma_sq).exp()))?;
    let p_d = bd.try_expect(|b| Ok((-lrt_threshold(sigma_sq, lam, b)? / (b + sigma_sq)).exp()))?;
    let p_f = p_f.clamp(0.0, 1.0);
    let p_m = (1.0 - p_d).clamp(0.0, 1.0);
    let threshold = if bd.atoms.is_empty() {
        Some(lrt_threshold(sigma_sq, lam, bd.beta_max)?)
    } else {
        None
    };
    Ok(LrtResult {
        threshold,
        p_false_alarm: p_f,
        p_miss: p_m,
        p_err: (1.0 - lam) * p_f + lam * p_m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralizedStats {
    pub varsigma: f64,
    pub kappa: f64,
    pub decision: bool,
}

/// `ς = (1/(Mσ²)) Σ_j |z_j|² β_j/(β_j+σ²)`, `κ = (1/M) Σ_j ln(1 + β_j/σ²)`;
/// active iff `ς > κ`.
pub fn centralized_stats(z: &DVector<Complex64>, beta: &DVector<f64>, sigma_sq: f64) -> Result<CentralizedStats> {
    let m = z.len();
    if m == 0 || beta.len() != m {
        return Err(Error::Dimension(format!("{m} observations for {} coefficients", beta.len())));
    }
    check_pos("sigma_eff_sq", sigma_sq)?;
    if beta.iter().any(|&b| !(b >= 0.0)) {
        return Err(Error::param("beta", "must be >= 0"));
    }
    let mut varsigma = 0.0;
    let mut kappa = 0.0;
    for j in 0..m {
        let b = beta[j];
        varsigma += z[j].norm_sqr() * b / (b + sigma_sq);
        kappa += (b / sigma_sq).ln_1p();
    }
    let varsigma = varsigma / (m as f64 * sigma_sq);
    let kappa = kappa / m as f64;
    Ok(CentralizedStats {
        varsigma,
        kappa,
        decision: varsigma > kappa,
    })
}

/// Log-likelihood ratio of activity when AP `j` sees its own noise level
/// `τ_j`: `Σ_j [β_j|z_j|²/(τ_j(β_j+τ_j)) − ln(1 + β_j/τ_j)]`. Equals
/// `M(ς − κ)` when all `τ_j` coincide.
pub fn centralized_llr(z: &DVector<Complex64>, beta: &DVector<f64>, tau: &DVector<f64>) -> Result<f64> {
    let m = z.len();
    if m == 0 || beta.len() != m || tau.len() != m {
        return Err(Error::Dimension("z, beta and tau must share a nonzero length".into()));
    }
    let mut llr = 0.0;
    for j in 0..m {
        let (b, t) = (beta[j], tau[j]);
        check_pos("tau", t)?;
        llr += b * z[j].norm_sqr() / (t * (b + t)) - (b / t).ln_1p();
    }
    Ok(llr)
}

/// Vector posterior mean `z(σ²Λ⁻¹ + I)⁻¹ / (1 + ((1−λ)/λ) e^{−M(ς−κ)})`.
pub fn centralized_mmse(z: &DVector<Complex64>, beta: &DVector<f64>, sigma_sq: f64, lam: f64) -> Result<DVector<Complex64>> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::param("lam", "must lie in [0, 1]"));
    }
    let st = centralized_stats(z, beta, sigma_sq)?;
    let m = z.len() as f64;
    let pi = activity_posterior(lam, m * (st.varsigma - st.kappa));
    Ok(DVector::from_fn(z.len(), |j, _| {
        z[j] * (pi * beta[j] / (beta[j] + sigma_sq))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub chi: f64,
    pub rho: f64,
    pub m: usize,
    pub p_f_local: f64,
    pub p_m_local: f64,
    pub lam: f64,
}

/// Optimal fusion weights for `M` identical local detectors: declare active
/// iff the number of active votes exceeds `ρ`.
pub fn fusion_params(p_f_local: f64, p_m_local: f64, lam: f64, m: usize) -> Result<FusionParams> {
    check_open_unit(lam)?;
    if m == 0 {
        return Err(Error::param("num_aps", "must be >= 1"));
    }
    for (key, p) in [("p_f_local", p_f_local), ("p_m_local", p_m_local)] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidParam {
                key,
                reason: format!("must lie strictly inside (0, 1), got {p}"),
            });
        }
    }
    if p_f_local + p_m_local >= 1.0 {
        return Err(Error::domain(format!(
            "local detector no better than chance (P_F + P_M = {})",
            p_f_local + p_m_local
        )));
    }
    let chi = ((1.0 - p_m_local) * (1.0 - p_f_local) / (p_m_local * p_f_local)).ln();
    let rho = (((1.0 - lam) / lam).ln() - m as f64 * (p_m_local / (1.0 - p_f_local)).ln()) / chi;
    Ok(FusionParams {
        chi,
        rho,
        m,
        p_f_local,
        p_m_local,
        lam,
    })
}

/// Fused decision from the number of active votes.
pub fn fusion_decide(votes: usize, fp: &FusionParams) -> bool {
    votes as f64 > fp.rho
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionErrors {
    pub p_false_alarm: f64,
    pub p_miss: f64,
    pub p_err: f64,
}

/// System-level error probabilities of the fused test from binomial vote counts.
pub fn fusion_error_probs(fp: &FusionParams) -> Result<FusionErrors> {
    let n = fp.m as u64;
    let cdf = |p: f64| -> Result<f64> {
        if fp.rho < 0.0 {
            return Ok(0.0);
        }
        let k = fp.rho.floor().min(n as f64) as u64;
        let bin = Binomial::new(p, n).map_err(|e| Error::domain(e.to_string()))?;
        Ok(bin.cdf(k))
    };
    let p_f = (1.0 - cdf(fp.p_f_local)?).clamp(0.0, 1.0);
    let p_m = cdf(1.0 - fp.p_m_local)?.clamp(0.0, 1.0);
    Ok(FusionErrors {
        p_false_alarm: p_f,
        p_miss: p_m,
        p_err: (1.0 - fp.lam) * p_f + fp.lam * p_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbamp::{denoise_mean, DenoiserParams};
    use crate::channel::complex_gaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_values() {
        let t = lrt_threshold(1.0, 0.5, 1.0).unwrap();
        assert!((t - 2.0 * 2f64.ln()).abs() < 1e-15);
        for &lam in &[0.01, 0.2, 0.49] {
            for &b in &[1e-3, 1.0, 1e3] {
                assert!(lrt_threshold(0.5, lam, b).unwrap() > 0.0);
            }
        }
        assert!(lrt_threshold(1.0, 0.0, 1.0).is_err());
        assert!(lrt_threshold(0.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn threshold_log_growth() {
        // l′/σ² − ln(β/σ²) → ln((1−λ)/λ) as β/σ² → ∞.
        let lam: f64 = 0.4;
        for &r in &[1e6, 1e8, 1e10] {
            let t = lrt_threshold(1.0, lam, r).unwrap();
            let gap = t - r.ln() - ((1.0 - lam) / lam).ln();
            assert!(gap.abs() < 1e-4, "{gap}");
        }
    }

    #[test]
    fn decide_basics_and_ratio_form() {
        assert!(!lrt_decide(Complex64::new(0.0, 0.0), 0.3, 0.1, 1.0).unwrap());
        let t = lrt_threshold(0.3, 0.1, 1.0).unwrap();
        assert!(lrt_decide(Complex64::new((2.0 * t).sqrt(), 0.0), 0.3, 0.1, 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let s: f64 = rng.random_range(0.01..2.0);
            let b: f64 = rng.random_range(0.01..5.0);
            let lam: f64 = rng.random_range(0.01..0.49);
            let z = complex_gaussian(&mut rng, b + s);
            let p1 = (-z.norm_sqr() / (b + s)).exp() / (b + s);
            let p0 = (-z.norm_sqr() / s).exp() / s;
            let ratio_rule = p1 / p0 > (1.0 - lam) / lam;
            let margin = (z.norm_sqr() - lrt_threshold(s, lam, b).unwrap()).abs();
            if margin > 1e-9 {
                assert_eq!(lrt_decide(z, s, lam, b).unwrap(), ratio_rule);
            }
        }
    }

    #[test]
    fn phase_invariance() {
        let z = Complex64::new(0.3, 0.4);
        for k in 0..8 {
            let w = z * Complex64::from_polar(1.0, k as f64);
            assert_eq!(lrt_decide(w, 0.2, 0.1, 1.0).unwrap(), lrt_decide(z, 0.2, 0.1, 1.0).unwrap());
        }
    }

    #[test]
    fn point_mass_error_probs() {
        let bd = BetaDistribution::point(1.0).unwrap();
        let r = lrt_error_probs(1.0, 0.5, &bd).unwrap();
        assert!((r.p_false_alarm - 0.25).abs() < 1e-14);
        assert!((r.p_miss - 0.5).abs() < 1e-14);
        assert!((r.p_err - 0.375).abs() < 1e-14);
        assert!((r.threshold.unwrap() - 2.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn small_noise_limit() {
        let bd = BetaDistribution::from_geometry(500.0, 2.5, 50.0).unwrap();
        let r = lrt_error_probs(1e-14, 0.1, &bd).unwrap();
        assert!(r.p_false_alarm < 1e-4 && r.p_miss < 1e-2, "{r:?}");
    }

    #[test]
    fn error_probs_match_decoupled_monte_carlo() {
        let b0 = 2e-7;
        let s = 1e-7;
        let lam = 0.1;
        let bd = BetaDistribution::point(b0).unwrap();
        let r = lrt_error_probs(s, lam, &bd).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let mut errs = 0usize;
        for _ in 0..n {
            let active = rng.random::<f64>() < lam;
            let th = if active { complex_gaussian(&mut rng, b0) } else { Complex64::new(0.0, 0.0) };
            let z = th + complex_gaussian(&mut rng, s);
            if lrt_decide(z, s, lam, b0).unwrap() != active {
                errs += 1;
            }
        }
        let p = errs as f64 / n as f64;
        let se = (r.p_err * (1.0 - r.p_err) / n as f64).sqrt();
        assert!((p - r.p_err).abs() < 3.0 * se, "{p} vs {}", r.p_err);
    }

    #[test]
    fn centralized_single_ap_matches_half_prior_lrt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let b: f64 = rng.random_range(0.01..3.0);
            let s: f64 = rng.random_range(0.01..1.0);
            let z = complex_gaussian(&mut rng, b + s);
            let st = centralized_stats(&DVector::from_element(1, z), &DVector::from_element(1, b), s).unwrap();
            let margin = (z.norm_sqr() - lrt_threshold(s, 0.5, b).unwrap()).abs();
            if margin > 1e-9 {
                assert_eq!(st.decision, lrt_decide(z, s, 0.5, b).unwrap());
            }
        }
        let zero = centralized_stats(&DVector::zeros(3), &DVector::from_element(3, 1.0), 0.5).unwrap();
        assert!(!zero.decision && zero.varsigma == 0.0 && zero.kappa > 0.0);
        assert!(centralized_stats(&DVector::zeros(3), &DVector::from_element(2, 1.0), 0.5).is_err());
    }

    #[test]
    fn equal_beta_sandwich() {
        let (b, s) = (2.0, 0.5);
        let st = centralized_stats(&DVector::zeros(4), &DVector::from_element(4, b), s).unwrap();
        assert!(b / (b + s) < st.kappa && st.kappa < b / s);
    }

    #[test]
    fn llr_matches_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = DVector::from_fn(6, |_, _| complex_gaussian(&mut rng, 1.0));
        let beta = DVector::from_fn(6, |i, _| 0.2 + i as f64 * 0.3);
        let st = centralized_stats(&z, &beta, 0.4).unwrap();
        let llr = centralized_llr(&z, &beta, &DVector::from_element(6, 0.4)).unwrap();
        assert!((llr - 6.0 * (st.varsigma - st.kappa)).abs() < 1e-12);
    }

    #[test]
    fn centralized_mmse_reductions() {
        let z1 = DVector::from_element(1, Complex64::new(0.8, -0.3));
        let b1 = DVector::from_element(1, 1.7);
        let v = centralized_mmse(&z1, &b1, 0.4, 0.1).unwrap();
        let dp = DenoiserParams::new(0.1, 1.7, 0.4).unwrap();
        assert!((v[0] - denoise_mean(z1[0], &dp)).norm() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let beta = DVector::from_fn(5, |i, _| 0.5 + i as f64);
        let z = DVector::from_fn(5, |j, _| complex_gaussian(&mut rng, beta[j] + 0.3));
        let w = centralized_mmse(&z, &beta, 0.3, 1.0).unwrap();
        for j in 0..5 {
            assert!((w[j] - z[j] * (beta[j] / (beta[j] + 0.3))).norm() < 1e-15);
        }
        // Many strongly active observations: posterior activity ≈ 1.
        let m = 200;
        let beta = DVector::from_element(m, 1.0);
        let z = DVector::from_fn(m, |_, _| complex_gaussian(&mut rng, 1.01));
        let w = centralized_mmse(&z, &beta, 0.01, 0.1).unwrap();
        for j in 0..m {
            assert!((w[j] - z[j] / 1.01).norm() < 1e-9);
        }
    }

    #[test]
    fn fusion_examples() {
        let fp = fusion_params(0.25, 0.5, 0.5, 1).unwrap();
        assert!((fp.chi - 3f64.ln()).abs() < 1e-14);
        assert!((fp.rho - 1.5f64.ln() / 3f64.ln()).abs() < 1e-14);
        assert!(fusion_decide(1, &fp) && !fusion_decide(0, &fp));
        let e = fusion_error_probs(&fp).unwrap();
        assert!((e.p_false_alarm - 0.25).abs() < 1e-14);
        assert!((e.p_miss - 0.5).abs() < 1e-14);
        for m in [1, 4, 7, 16] {
            let fp = fusion_params(0.2, 0.2, 0.5, m).unwrap();
            assert!((fp.rho - m as f64 / 2.0).abs() < 1e-12);
        }
        let e = fusion_error_probs(&fusion_params(1e-9, 1e-9, 0.1, 5).unwrap()).unwrap();
        assert!(e.p_err < 1e-6);
        assert!(fusion_params(0.6, 0.5, 0.1, 3).is_err());
        assert!(fusion_params(0.0, 0.5, 0.1, 3).is_err());
    }

    #[test]
    fn negative_rho_always_active() {
        let fp = FusionParams { chi: 1.0, rho: -0.5, m: 3, p_f_local: 0.1, p_m_local: 0.1, lam: 0.1 };
        let e = fusion_error_probs(&fp).unwrap();
        assert_eq!(e.p_false_alarm, 1.0);
        assert_eq!(e.p_miss, 0.0);
    }

    #[test]
    fn fusion_matches_exhaustive_enumeration() {
        let m = 16usize;
        let (pf, pm) = (0.2, 0.2);
        let fp = fusion_params(pf, pm, 0.5, m).unwrap();
        let e = fusion_error_probs(&fp).unwrap();
        let (mut false_alarm, mut miss) = (0.0, 0.0);
        for pattern in 0u32..(1 << m) {
            let votes = pattern.count_ones() as usize;
            let k = votes as i32;
            let p_h0 = pf.powi(k) * (1.0 - pf).powi(m as i32 - k);
            let p_h1 = (1.0 - pm).powi(k) * pm.powi(m as i32 - k);
            if fusion_decide(votes, &fp) {
                false_alarm += p_h0;
            } else {
                miss += p_h1;
            }
        }
        assert!((e.p_false_alarm - false_alarm).abs() < 1e-12);
        assert!((e.p_miss - miss).abs() < 1e-12);
    }
}
