//! Complex Bayesian AMP for one AP's received pilot vector, with the
//! Bernoulli-Gaussian posterior denoiser.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Exponent clamp applied before `exp` inside the activity posterior.
pub const EXP_CLAMP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserParams {
    pub lam: f64,
    pub beta: f64,
    pub xi: f64,
}

impl DenoiserParams {
    pub fn new(lam: f64, beta: f64, xi: f64) -> Result<Self> {
        let dp = Self { lam, beta, xi };
        dp.validate()?;
        Ok(dp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lam) {
            return Err(Error::param("lam", "must lie in [0, 1]"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::param("beta", "must be > 0"));
        }
        if !(self.xi > 0.0) {
            return Err(Error::param("xi", "must be > 0"));
        }
        Ok(())
    }
}

/// Logistic of `-s` with `s` clamped, i.e. `1 / (1 + e^s)`.
pub(crate) fn logistic_neg(s: f64) -> f64 {
    1.0 / (1.0 + s.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
}

/// Log prior odds of inactivity, `ln((1-λ)/λ)`, with the endpoints mapped to ±∞.
pub(crate) fn log_prior_odds(lam: f64) -> f64 {
    if lam <= 0.0 {
        f64::INFINITY
    } else if lam >= 1.0 {
        f64::NEG_INFINITY
    } else {
        ((1.0 - lam) / lam).ln()
    }
}

/// Posterior activity probability from the log-likelihood ratio of the
/// active hypothesis.
pub(crate) fn activity_posterior(lam: f64, llr: f64) -> f64 {
    let odds = log_prior_odds(lam);
    if odds == f64::INFINITY {
        0.0
    } else if odds == f64::NEG_INFINITY {
        1.0
    } else {
        logistic_neg(odds - llr)
    }
}

/// Log-likelihood ratio of activity for one observation with power `r2`.
pub(crate) fn llr_term(r2: f64, beta: f64, xi: f64) -> f64 {
    beta * r2 / (xi * (beta + xi)) - (beta / xi).ln_1p()
}

/// Posterior mean and variance given the activity probability `g`.
#[inline]
pub(crate) fn gated_wiener(r: Complex64, g: f64, beta: f64, xi: f64) -> (Complex64, f64) {
    let r2 = r.norm_sqr();
    let s = beta + xi;
    let mean = r * (g * beta / s);
    let var = g * (beta * xi / s + (1.0 - g) * beta * beta * r2 / (s * s));
    (mean, var)
}

/// `G(|r|²; ξ, λ, β)`, the posterior probability that the coefficient is active.
pub fn activity_prob(r2: f64, dp: &DenoiserParams) -> f64 {
    let DenoiserParams { lam, beta, xi } = *dp;
    activity_posterior(lam, llr_term(r2, beta, xi))
}

/// Posterior mean of `θ` given `r = θ + noise` with noise variance `ξ`.
pub fn denoise_mean(r: Complex64, dp: &DenoiserParams) -> Complex64 {
    let g = activity_prob(r.norm_sqr(), dp);
    r * (g * dp.beta / (dp.beta + dp.xi))
}

/// Posterior variance `E|θ - θ̂|²`.
pub fn denoise_var(r: Complex64, dp: &DenoiserParams) -> f64 {
    denoise(r, dp).1
}

/// Mean and variance in one pass.
pub fn denoise(r: Complex64, dp: &DenoiserParams) -> (Complex64, f64) {
    let g = activity_prob(r.norm_sqr(), dp);
    gated_wiener(r, g, dp.beta, dp.xi)
}

/// Iterate of the algorithm after one full pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpState {
    pub theta_hat: DVector<Complex64>,
    pub kappa_hat: DVector<f64>,
    pub z: DVector<f64>,
    pub p: DVector<Complex64>,
    pub r_hat: DVector<Complex64>,
    pub tau: DVector<f64>,
    pub iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmpConfig {
    pub max_iters: usize,
    /// Relative change of `θ̂` at which iteration stops.
    pub stop_tol: f64,
    /// Keep every intermediate state, not only the final one.
    pub keep_states: bool,
}

impl Default for AmpConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            stop_tol: 1e-6,
            keep_states: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmpTraceRow {
    pub iter: usize,
    pub mean_tau: f64,
    /// Empirical MSE of `θ̂` against the true channel, when supplied.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AmpRun {
    pub state: AmpState,
    pub converged: bool,
    pub trace: Vec<AmpTraceRow>,
    pub states: Vec<AmpState>,
}

pub(crate) fn check_dims(y_len: usize, phi: &DMatrix<Complex64>, beta_len: usize) -> Result<()> {
    let (l, n) = phi.shape();
    if y_len != l {
        return Err(Error::Dimension(format!("y has length {y_len}, pilot matrix has {l} rows")));
    }
    if beta_len != n {
        return Err(Error::Dimension(format!("beta has length {beta_len}, pilot matrix has {n} columns")));
    }
    Ok(())
}

/// Output-side update of one AMP pass: returns `(z, p, τ, r̂)` from the
/// previous estimate, variances, `z` and `p`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_step(
    y: &DVector<Complex64>,
    phi: &DMatrix<Complex64>,
    phi_sq: &DMatrix<f64>,
    theta: &DVector<Complex64>,
    kappa: &DVector<f64>,
    z_prev: &DVector<f64>,
    p_prev: &DVector<Complex64>,
    noise_var: f64,
) -> (DVector<f64>, DVector<Complex64>, DVector<f64>, DVector<Complex64>) {
    let l = y.len();
    let z = phi_sq * kappa;
    let mut p = phi * theta;
    for j in 0..l {
        p[j] -= (y[j] - p_prev[j]) * (z[j] / (noise_var + z_prev[j]));
    }
    let inv = z.map(|v| 1.0 / (noise_var + v));
    let tau = phi_sq.tr_mul(&inv).map(|v| 1.0 / v);
    let scaled = DVector::from_fn(l, |j, _| (y[j] - p[j]) * inv[j]);
    let back = phi.ad_mul(&scaled);
    let r_hat = DVector::from_fn(theta.len(), |i, _| theta[i] + back[i] * tau[i]);
    (z, p, tau, r_hat)
}

/// Runs CB-AMP on `y = Φθ + n`.
///
/// `beta` holds the large-scale coefficients of this AP, `noise_var` is
/// `σ0²`. When `truth` is given, the trace carries the per-iteration MSE.
pub fn amp_iterate(
    y: &DVector<Complex64>,
    phi: &DMatrix<Complex64>,
    beta: &DVector<f64>,
    lam: f64,
    noise_var: f64,
    cfg: &AmpConfig,
    truth: Option<&DVector<Complex64>>,
) -> Result<AmpRun> {
    check_dims(y.len(), phi, beta.len())?;
    if !(noise_var > 0.0) {
        return Err(Error::param("noise_var", "must be > 0"));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::param("lam", "must lie in [0, 1]"));
    }
    if beta.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::param("beta", "all entries must be > 0"));
    }
    if let Some(t) = truth {
        if t.len() != beta.len() {
            return Err(Error::Dimension("truth length differs from number of users".into()));
        }
    }
    let (l, n) = phi.shape();
    let phi_sq = phi.map(|v| v.norm_sqr());

    let mut theta = DVector::<Complex64>::zeros(n);
    let mut kappa = beta * lam;
    let mut z_prev = DVector::<f64>::from_element(l, 1.0);
    let mut p = y.clone();
    let mut trace = Vec::new();
    let mut states = Vec::new();
    let mut last: Option<AmpState> = None;

    for iter in 1..=cfg.max_iters {
        let (z, p_new, tau, r_hat) = linear_step(y, phi, &phi_sq, &theta, &kappa, &z_prev, &p, noise_var);
        p = p_new;

        let mut theta_new = DVector::<Complex64>::zeros(n);
        let mut kappa_new = DVector::<f64>::zeros(n);
        for i in 0..n {
            let dp = DenoiserParams {
                lam,
                beta: beta[i],
                xi: tau[i],
            };
            let (m, v) = denoise(r_hat[i], &dp);
            theta_new[i] = m;
            kappa_new[i] = v;
        }
        if theta_new.iter().any(|v| !v.re.is_finite() || !v.im.is_finite())
            || kappa_new.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Divergence { iter });
        }
        let diff = (&theta_new - &theta).norm();
        let scale = theta_new.norm();
        theta = theta_new;
        kappa = kappa_new;
        z_prev = z.clone();

        let state = AmpState {
            theta_hat: theta.clone(),
            kappa_hat: kappa.clone(),
            z,
            p: p.clone(),
            r_hat,
            tau,
            iter,
        };
        trace.push(AmpTraceRow {
            iter,
            mean_tau: state.tau.mean(),
            mse: truth.map(|t| empirical_mse(t, &state.theta_hat)),
        });
        let converged = diff == 0.0 || diff <= cfg.stop_tol * scale;
        if cfg.keep_states {
            states.push(state.clone());
        }
        if converged {
            return Ok(AmpRun {
                state,
                converged: true,
                trace,
                states,
            });
        }
        last = Some(state);
    }
    Ok(AmpRun {
        state: last.expect("max_iters >= 1"),
        converged: false,
        trace,
        states,
    })
}

/// `(1/N) Σ |θ_i - θ̂_i|²`.
pub fn empirical_mse(truth: &DVector<Complex64>, estimate: &DVector<Complex64>) -> f64 {
    assert_eq!(truth.len(), estimate.len(), "length mismatch");
    if truth.is_empty() {
        return 0.0;
    }
    truth
        .iter()
        .zip(estimate.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        / truth.len() as f64
}

/// Writes `iter,mean_tau,mse` rows (empty `mse` when no truth was supplied).
pub fn write_trace_csv<W: Write>(trace: &[AmpTraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "mean_tau", "mse"])?;
    for row in trace {
        w.write_record([
            row.iter.to_string(),
            format!("{:e}", row.mean_tau),
            row.mse.map(|m| format!("{m:e}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::QuadConfig;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn wiener_and_zero_limits() {
        let r = c(0.7, -0.2);
        let dp = DenoiserParams::new(1.0, 2.0, 0.5).unwrap();
        assert!((denoise_mean(r, &dp) - r * 0.8).norm() < 1e-15);
        assert!((denoise_var(r, &dp) - 0.4).abs() < 1e-15);
        let dp = DenoiserParams::new(0.0, 2.0, 0.5).unwrap();
        assert_eq!(denoise_mean(r, &dp), c(0.0, 0.0));
        assert_eq!(denoise_var(r, &dp), 0.0);
    }

    #[test]
    fn variance_matches_product_form() {
        // βG[(β(ξ+|r|²)+ξ²)/(β+ξ)² − Gβ|r|²/(β+ξ)²]
        for &(re, im, beta, lam, xi) in &[(0.5, 0.0, 2.0, 0.2, 0.3), (1.3, -0.4, 0.7, 0.05, 0.9), (0.01, 0.02, 5.0, 0.4, 0.01)] {
            let r = c(re, im);
            let dp = DenoiserParams::new(lam, beta, xi).unwrap();
            let g = activity_prob(r.norm_sqr(), &dp);
            let r2 = r.norm_sqr();
            let s2 = (beta + xi) * (beta + xi);
            let direct = beta * g * ((beta * (xi + r2) + xi * xi) / s2 - g * beta * r2 / s2);
            assert!((denoise_var(r, &dp) - direct).abs() < 1e-14 * direct.max(1e-300));
        }
    }

    /// Posterior mean by integrating the two-component posterior over the
    /// active component's value on a polar grid.
    fn posterior_mean_oracle(r: Complex64, dp: &DenoiserParams) -> Complex64 {
        let DenoiserParams { lam, beta, xi } = *dp;
        // Active: θ ~ CN(0, β), likelihood CN(r; θ, ξ). Integrate numerator and
        // evidence over θ = ρ e^{iφ}.
        let cfg = QuadConfig {
            abs_tol: 1e-13,
            rel_tol: 1e-11,
            max_intervals: 2000,
        };
        let lik = |th: Complex64| (-(r - th).norm_sqr() / xi).exp() / (std::f64::consts::PI * xi);
        let prior = |th: Complex64| (-th.norm_sqr() / beta).exp() / (std::f64::consts::PI * beta);
        let rmax = 12.0 * (beta.sqrt() + r.norm());
        let radial = |f: &dyn Fn(Complex64) -> f64| {
            cfg.integrate(
                |rho| {
                    rho * cfg
                        .integrate(|phi| f(Complex64::from_polar(rho, phi)), 0.0, 2.0 * std::f64::consts::PI)
                        .unwrap()
                },
                0.0,
                rmax,
            )
            .unwrap()
        };
        let ev_active = radial(&|th| lik(th) * prior(th));
        let num_re = radial(&|th| th.re * lik(th) * prior(th));
        let num_im = radial(&|th| th.im * lik(th) * prior(th));
        let ev_inactive = (-r.norm_sqr() / xi).exp() / (std::f64::consts::PI * xi);
        let z = lam * ev_active + (1.0 - lam) * ev_inactive;
        c(lam * num_re / z, lam * num_im / z)
    }

    #[test]
    fn mean_matches_bayes_rule_oracle() {
        let dp = DenoiserParams::new(0.1, 1.0, 0.1).unwrap();
        let r = c(1.0, 0.0);
        let oracle = posterior_mean_oracle(r, &dp);
        assert!((denoise_mean(r, &dp) - oracle).norm() < 1e-8, "{oracle}");
        let dp = DenoiserParams::new(0.3, 0.5, 0.8).unwrap();
        let r = c(-0.4, 0.9);
        let oracle = posterior_mean_oracle(r, &dp);
        assert!((denoise_mean(r, &dp) - oracle).norm() < 1e-8);
    }

    /// Wirtinger derivative ∂f/∂r by central differences.
    pub(crate) fn wirtinger(f: impl Fn(Complex64) -> Complex64, r: Complex64, h: f64) -> Complex64 {
        let dx = (f(r + c(h, 0.0)) - f(r - c(h, 0.0))) / (2.0 * h);
        let dy = (f(r + c(0.0, h)) - f(r - c(0.0, h))) / (2.0 * h);
        (dx - c(0.0, 1.0) * dy) * 0.5
    }

    #[test]
    fn variance_is_noise_times_derivative() {
        let dp = DenoiserParams::new(0.2, 2.0, 0.3).unwrap();
        let r = c(0.5, 0.0);
        let d = wirtinger(|x| denoise_mean(x, &dp), r, 1e-6);
        let v = denoise_var(r, &dp);
        assert!((dp.xi * d.re - v).abs() < 1e-5 * v, "{} vs {v}", dp.xi * d.re);
        assert!(d.im.abs() < 1e-6);
    }

    #[test]
    fn extreme_arguments_stay_finite() {
        let dp = DenoiserParams::new(1e-6, 1e-9, 1e-12).unwrap();
        for r in [c(0.0, 0.0), c(1e3, 0.0), c(1e-8, 1e-8)] {
            let (m, v) = denoise(r, &dp);
            assert!(m.re.is_finite() && m.im.is_finite() && v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn zero_data_shrinks_to_zero() {
        let l = 10;
        let n = 30;
        let phi = DMatrix::from_fn(l, n, |a, b| c(((a * 7 + b * 3) % 5) as f64 - 2.0, ((a + b) % 3) as f64 - 1.0) * 0.2);
        let beta = DVector::from_element(n, 1.0);
        let y = DVector::zeros(l);
        let run = amp_iterate(&y, &phi, &beta, 0.1, 0.01, &AmpConfig::default(), None).unwrap();
        assert!(run.state.theta_hat.norm() < 1e-12);
        assert!(run.converged);
    }

    #[test]
    fn dimension_errors() {
        let phi = DMatrix::<Complex64>::zeros(3, 4);
        let beta = DVector::from_element(4, 1.0);
        assert!(matches!(
            amp_iterate(&DVector::zeros(2), &phi, &beta, 0.1, 1.0, &AmpConfig::default(), None),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            amp_iterate(&DVector::zeros(3), &phi, &DVector::from_element(5, 1.0), 0.1, 1.0, &AmpConfig::default(), None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mse_helpers() {
        let a = DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 2.0)]);
        let z = DVector::zeros(2);
        assert_eq!(empirical_mse(&a, &a), 0.0);
        assert!((empirical_mse(&a, &z) - 2.5).abs() < 1e-15);
        let rows = [AmpTraceRow { iter: 1, mean_tau: 0.5, mse: Some(0.25) }, AmpTraceRow { iter: 2, mean_tau: 0.4, mse: None }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("iter,mean_tau,mse\n1,5e-1,2.5e-1\n2,4e-1,\n"));
    }
}
