//! Joint estimation across all APs (multiple measurement vectors).
//!
//! Each AP column runs the same output-side AMP update as the single-AP
//! algorithm, which yields per-entry noise levels `τ_ij`. The input side then
//! denoises each user's row jointly: activity is shared across APs, so the
//! posterior activity probability pools the evidence of all `M` observations.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::cbamp::{activity_posterior, check_dims, gated_wiener, linear_step, llr_term, AmpConfig, AmpTraceRow};
use crate::detection::centralized_mmse;
use crate::error::{Error, Result};

/// Row denoiser with a common noise level `τ` for all APs.
pub fn mmv_denoise_row(z_row: &DVector<Complex64>, beta_row: &DVector<f64>, lam: f64, tau: f64) -> Result<DVector<Complex64>> {
    centralized_mmse(z_row, beta_row, tau, lam)
}

/// Row denoiser with one noise level per AP. Returns the posterior mean and
/// the per-entry posterior variance.
pub fn mmv_denoise_row_hetero(
    z_row: &DVector<Complex64>,
    beta_row: &DVector<f64>,
    tau_row: &DVector<f64>,
    lam: f64,
) -> Result<(DVector<Complex64>, DVector<f64>)> {
    let m = z_row.len();
    if beta_row.len() != m || tau_row.len() != m || m == 0 {
        return Err(Error::Dimension("row inputs must share a nonzero length".into()));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::param("lam", "must lie in [0, 1]"));
    }
    if tau_row.iter().any(|&t| !(t > 0.0)) || beta_row.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::domain("row denoiser needs β > 0 and τ > 0"));
    }
    Ok(denoise_row(z_row.as_slice(), beta_row.as_slice(), tau_row.as_slice(), lam))
}

fn denoise_row(r: &[Complex64], beta: &[f64], tau: &[f64], lam: f64) -> (DVector<Complex64>, DVector<f64>) {
    let llr: f64 = (0..r.len()).map(|j| llr_term(r[j].norm_sqr(), beta[j], tau[j])).sum();
    let g = activity_posterior(lam, llr);
    let mut mean = DVector::zeros(r.len());
    let mut var = DVector::zeros(r.len());
    for j in 0..r.len() {
        let (mu, v) = gated_wiener(r[j], g, beta[j], tau[j]);
        mean[j] = mu;
        var[j] = v;
    }
    (mean, var)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmvState {
    /// `N × M`.
    pub theta_hat: DMatrix<Complex64>,
    /// `Y − P`, `L × M`.
    pub residual: DMatrix<Complex64>,
    /// Mean of `tau_matrix`.
    pub tau: f64,
    /// Per-entry noise levels, `N × M`.
    pub tau_matrix: DMatrix<f64>,
    /// Denoiser inputs, `N × M`.
    pub r_hat: DMatrix<Complex64>,
    pub iter: usize,
}

#[derive(Debug, Clone)]
pub struct MmvRun {
    pub state: MmvState,
    pub converged: bool,
    pub trace: Vec<AmpTraceRow>,
    pub states: Vec<MmvState>,
}

/// Joint AMP over `Y = ΦΘ + N` with `Y: L × M`, `beta: M × N`.
pub fn mmv_amp(
    y: &DMatrix<Complex64>,
    phi: &DMatrix<Complex64>,
    beta: &DMatrix<f64>,
    lam: f64,
    noise_var: f64,
    cfg: &AmpConfig,
    truth: Option<&DMatrix<Complex64>>,
) -> Result<MmvRun> {
    let (l, n) = phi.shape();
    let m = y.ncols();
    check_dims(y.nrows(), phi, beta.ncols())?;
    if beta.nrows() != m {
        return Err(Error::Dimension(format!("beta has {} rows for {m} APs", beta.nrows())));
    }
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
        if t.shape() != (n, m) {
            return Err(Error::Dimension("truth must be N × M".into()));
        }
    }
    let phi_sq = phi.map(|v| v.norm_sqr());
    let beta_t = beta.transpose();
    let ycols: Vec<DVector<Complex64>> = (0..m).map(|j| y.column(j).into_owned()).collect();

    let mut theta: Vec<DVector<Complex64>> = vec![DVector::zeros(n); m];
    let mut kappa: Vec<DVector<f64>> = (0..m).map(|j| beta_t.column(j) * lam).collect();
    let mut z_prev: Vec<DVector<f64>> = vec![DVector::from_element(l, 1.0); m];
    let mut p: Vec<DVector<Complex64>> = ycols.clone();
    let mut trace = Vec::new();
    let mut states = Vec::new();
    let mut last = None;

    for iter in 1..=cfg.max_iters {
        let mut tau_m = DMatrix::<f64>::zeros(n, m);
        let mut r_m = DMatrix::<Complex64>::zeros(n, m);
        for j in 0..m {
            let (z, pj, tau, r_hat) = linear_step(&ycols[j], phi, &phi_sq, &theta[j], &kappa[j], &z_prev[j], &p[j], noise_var);
            tau_m.set_column(j, &tau);
            r_m.set_column(j, &r_hat);
            z_prev[j] = z;
            p[j] = pj;
        }
        let mut theta_new = DMatrix::<Complex64>::zeros(n, m);
        let mut kappa_new = DMatrix::<f64>::zeros(n, m);
        let mut rbuf = vec![Complex64::new(0.0, 0.0); m];
        let mut bbuf = vec![0.0; m];
        let mut tbuf = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                rbuf[j] = r_m[(i, j)];
                bbuf[j] = beta[(j, i)];
                tbuf[j] = tau_m[(i, j)];
            }
            let (mu, v) = denoise_row(&rbuf, &bbuf, &tbuf, lam);
            for j in 0..m {
                theta_new[(i, j)] = mu[j];
                kappa_new[(i, j)] = v[j];
            }
        }
        if theta_new.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) || kappa_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iter });
        }
        let diff = theta
            .iter()
            .enumerate()
            .map(|(j, t)| (theta_new.column(j) - t).norm_squared())
            .sum::<f64>()
            .sqrt();
        let scale = theta_new.norm();
        for j in 0..m {
            theta[j] = theta_new.column(j).into_owned();
            kappa[j] = kappa_new.column(j).into_owned();
        }
        let residual = DMatrix::from_fn(l, m, |a, j| ycols[j][a] - p[j][a]);
        let state = MmvState {
            tau: tau_m.mean(),
            theta_hat: theta_new,
            residual,
            tau_matrix: tau_m,
            r_hat: r_m,
            iter,
        };
        trace.push(AmpTraceRow {
            iter,
            mean_tau: state.tau,
            mse: truth.map(|t| (t - &state.theta_hat).norm_squared() / (n * m) as f64),
        });
        let converged = diff == 0.0 || diff <= cfg.stop_tol * scale;
        if cfg.keep_states {
            states.push(state.clone());
        }
        if converged {
            return Ok(MmvRun { state, converged, trace, states });
        }
        last = Some(state);
    }
    Ok(MmvRun {
        state: last.expect("max_iters >= 1"),
        converged: false,
        trace,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbamp::{amp_iterate, denoise, DenoiserParams};
    use crate::channel::complex_gaussian;
    use crate::numerics::QuadConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn single_ap_row_matches_scalar_denoiser() {
        let r = Complex64::new(0.4, -1.1);
        let (mu, v) = mmv_denoise_row_hetero(&DVector::from_element(1, r), &DVector::from_element(1, 1.3), &DVector::from_element(1, 0.6), 0.15).unwrap();
        let (m0, v0) = denoise(r, &DenoiserParams::new(0.15, 1.3, 0.6).unwrap());
        assert_eq!(mu[0], m0);
        assert_eq!(v[0], v0);
        let s = mmv_denoise_row(&DVector::from_element(1, r), &DVector::from_element(1, 1.3), 0.15, 0.6).unwrap();
        assert!((s[0] - m0).norm() < 1e-15);
    }

    #[test]
    fn full_activity_is_rowwise_wiener() {
        let z = DVector::from_vec(vec![Complex64::new(1.0, 0.5), Complex64::new(-0.2, 0.1)]);
        let b = DVector::from_vec(vec![2.0, 0.5]);
        let w = mmv_denoise_row(&z, &b, 1.0, 0.5).unwrap();
        assert!((w[0] - z[0] * 0.8).norm() < 1e-15);
        assert!((w[1] - z[1] * 0.5).norm() < 1e-15);
    }

    #[test]
    fn row_mean_matches_quadrature_posterior() {
        let lam = 0.2;
        let beta = [1.0, 0.4, 2.5];
        let tau = [0.3, 0.3, 0.3];
        let z = [Complex64::new(0.6, 0.2), Complex64::new(-0.3, 0.5), Complex64::new(0.1, -0.9)];
        let cfg = QuadConfig { abs_tol: 1e-13, rel_tol: 1e-11, max_intervals: 2000 };
        // Per-AP evidence and first moment under the active hypothesis, by
        // polar quadrature of likelihood × prior.
        let mut ev = [0.0; 3];
        let mut num = [Complex64::new(0.0, 0.0); 3];
        for j in 0..3 {
            let (b, t, zj) = (beta[j], tau[j], z[j]);
            let dens = |th: Complex64| (-(zj - th).norm_sqr() / t).exp() / (PI * t) * (-th.norm_sqr() / b).exp() / (PI * b);
            let polar = |f: &dyn Fn(Complex64) -> f64| {
                cfg.integrate(|rho| rho * cfg.integrate(|a| f(Complex64::from_polar(rho, a)), 0.0, 2.0 * PI).unwrap(), 0.0, 12.0 * (b.sqrt() + zj.norm()))
                    .unwrap()
            };
            ev[j] = polar(&|th| dens(th));
            num[j] = Complex64::new(polar(&|th| th.re * dens(th)), polar(&|th| th.im * dens(th)));
        }
        let ev1: f64 = ev.iter().product();
        let ev0: f64 = (0..3).map(|j| (-z[j].norm_sqr() / tau[j]).exp() / (PI * tau[j])).product();
        let post = lam * ev1 / (lam * ev1 + (1.0 - lam) * ev0);
        let got = mmv_denoise_row(&DVector::from_row_slice(&z), &DVector::from_row_slice(&beta), lam, 0.3).unwrap();
        for j in 0..3 {
            let expect = num[j] / ev[j] * post;
            assert!((got[j] - expect).norm() < 1e-8, "{} vs {expect}", got[j]);
        }
    }

    fn synthetic(l: usize, n: usize, m: usize, seed: u64) -> (DMatrix<Complex64>, DMatrix<Complex64>, DMatrix<f64>, DMatrix<Complex64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = DMatrix::from_fn(l, n, |_, _| complex_gaussian(&mut rng, 1.0 / l as f64));
        let beta = DMatrix::from_fn(m, n, |_, _| 0.2 + rand::Rng::random::<f64>(&mut rng));
        let active: Vec<bool> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng) < 0.1).collect();
        let theta = DMatrix::from_fn(n, m, |i, j| if active[i] { complex_gaussian(&mut rng, beta[(j, i)]) } else { Complex64::new(0.0, 0.0) });
        let noise = DMatrix::from_fn(l, m, |_, _| complex_gaussian(&mut rng, 1e-3));
        let y = &phi * &theta + noise;
        (y, phi, beta, theta)
    }

    #[test]
    fn single_ap_trajectory_matches_cbamp() {
        let (y, phi, beta, theta) = synthetic(40, 120, 1, 1);
        let cfg = AmpConfig { keep_states: true, ..AmpConfig::default() };
        let mm = mmv_amp(&y, &phi, &beta, 0.1, 1e-3, &cfg, Some(&theta)).unwrap();
        let sm = amp_iterate(&y.column(0).into_owned(), &phi, &beta.row(0).transpose(), 0.1, 1e-3, &cfg, Some(&theta.column(0).into_owned())).unwrap();
        assert_eq!(mm.states.len(), sm.states.len());
        for (a, b) in mm.states.iter().zip(&sm.states) {
            assert!((a.theta_hat.column(0) - &b.theta_hat).norm() <= 1e-8 * b.theta_hat.norm().max(1e-300));
        }
    }

    #[test]
    fn zero_scene_gives_zero_estimate() {
        let (_, phi, beta, _) = synthetic(20, 50, 3, 2);
        let y = DMatrix::zeros(20, 3);
        let run = mmv_amp(&y, &phi, &beta, 0.1, 1e-3, &AmpConfig::default(), None).unwrap();
        assert!(run.state.theta_hat.norm() < 1e-12);
    }

    #[test]
    fn joint_estimation_beats_separate() {
        use crate::channel::{generate_scene, SnrReference, SystemParams};
        let p = SystemParams {
            num_users: 400,
            num_pilots: 40,
            num_aps: 4,
            noise_var: SnrReference::RefDistance.noise_var(30.0, 2.5, 50.0),
            seed: 12,
            ..SystemParams::desk()
        };
        let s = generate_scene(&p).unwrap();
        let (y, theta) = (s.received(), s.effective_channel());
        let cfg = AmpConfig::default();
        let mm = mmv_amp(&y, &s.pilot, &s.beta, 0.1, p.noise_var, &cfg, None).unwrap();
        let mut smv = 0.0;
        for j in 0..4 {
            let r = amp_iterate(&y.column(j).into_owned(), &s.pilot, &s.beta_at(j).unwrap(), 0.1, p.noise_var, &cfg, None).unwrap();
            smv += (r.state.theta_hat - theta.column(j)).norm_squared();
        }
        let mmv = (mm.state.theta_hat - &theta).norm_squared();
        assert!(mmv < smv, "{mmv} vs {smv}");
    }

    #[test]
    fn dimension_checks() {
        let (y, phi, beta, _) = synthetic(10, 20, 2, 4);
        assert!(mmv_amp(&y, &phi, &beta.rows(0, 1).into_owned(), 0.1, 1e-3, &AmpConfig::default(), None).is_err());
        assert!(mmv_denoise_row_hetero(&DVector::zeros(2), &DVector::from_element(3, 1.0), &DVector::from_element(2, 1.0), 0.1).is_err());
    }
}
