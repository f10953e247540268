//! Known-support MMSE estimation and its asymptotic MSE.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::channel::BetaDistribution;
use crate::error::{Error, Result};
use crate::numerics::bisect;

/// Condition number above which the regularized Gram matrix counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Length-`N` estimate, exactly zero off the support.
    pub theta_hat: DVector<Complex64>,
    /// `(1/N)·tr((Φ_sᴴΦ_s/σ0² + Λ_s⁻¹)⁻¹)`.
    pub mse: f64,
    pub support_size: usize,
}

/// `F = Φ_sᴴΦ_s + σ0²Λ_s⁻¹` with its eigenvalues, after the condition check.
fn regularized_gram(phi_s: &DMatrix<Complex64>, beta_s: &[f64], noise_var: f64) -> Result<(DMatrix<Complex64>, DVector<f64>)> {
    let k = phi_s.ncols();
    if beta_s.len() != k {
        return Err(Error::Dimension(format!("{} coefficients for {k} support columns", beta_s.len())));
    }
    if beta_s.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::param("beta", "support coefficients must be > 0"));
    }
    if !(noise_var > 0.0) {
        return Err(Error::param("noise_var", "must be > 0"));
    }
    let mut f = phi_s.ad_mul(phi_s);
    for (i, &b) in beta_s.iter().enumerate() {
        f[(i, i)] += Complex64::new(noise_var / b, 0.0);
    }
    // Enforce exact Hermitian symmetry before the eigen-solve.
    let f = (&f + f.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(f.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Singular { cond });
    }
    Ok((f, eig))
}

fn gather(phi: &DMatrix<Complex64>, support: &[usize]) -> Result<DMatrix<Complex64>> {
    let n = phi.ncols();
    for &i in support {
        if i >= n {
            return Err(Error::OutOfRange { index: i, len: n });
        }
    }
    Ok(phi.select_columns(support))
}

/// Estimate with the active set known. `beta` has one entry per user; only
/// the entries on `support` are used.
pub fn oracle_estimate(
    y: &DVector<Complex64>,
    phi: &DMatrix<Complex64>,
    support: &[usize],
    beta: &DVector<f64>,
    noise_var: f64,
) -> Result<OracleResult> {
    let (l, n) = phi.shape();
    if y.len() != l || beta.len() != n {
        return Err(Error::Dimension("y, pilot matrix and beta disagree".into()));
    }
    let mut theta_hat = DVector::zeros(n);
    if support.is_empty() {
        return Ok(OracleResult {
            theta_hat,
            mse: 0.0,
            support_size: 0,
        });
    }
    let phi_s = gather(phi, support)?;
    let beta_s: Vec<f64> = support.iter().map(|&i| beta[i]).collect();
    let (f, eig) = regularized_gram(&phi_s, &beta_s, noise_var)?;
    let rhs = phi_s.ad_mul(y);
    let chol = f.cholesky().ok_or(Error::Singular { cond: f64::INFINITY })?;
    let sol = chol.solve(&rhs);
    for (k, &i) in support.iter().enumerate() {
        theta_hat[i] = sol[k];
    }
    let mse = noise_var * eig.iter().map(|v| 1.0 / v).sum::<f64>() / n as f64;
    Ok(OracleResult {
        theta_hat,
        mse,
        support_size: support.len(),
    })
}

/// `(1/N)·tr((Φ_sᴴΦ_s/σ0² + Λ_s⁻¹)⁻¹)` for the support columns `phi_s`.
pub fn oracle_mse_exact(phi_s: &DMatrix<Complex64>, beta_s: &[f64], noise_var: f64, num_users: usize) -> Result<f64> {
    if num_users == 0 {
        return Err(Error::param("num_users", "must be >= 1"));
    }
    if phi_s.ncols() == 0 {
        return Ok(0.0);
    }
    let (_, eig) = regularized_gram(phi_s, beta_s, noise_var)?;
    Ok(noise_var * eig.iter().map(|v| 1.0 / v).sum::<f64>() / num_users as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleAsymptotic {
    /// Root `ς*` of the spectral fixed point.
    pub varsigma: f64,
    pub mse: f64,
}

/// Solves `E{β/(β+ς)} = (ς − σ0²)/(λγς)` for `ς > σ0²` by bracketed
/// bisection and returns `MSE = (ς − σ0²)/γ`.
pub fn oracle_mse_asymptotic(lam: f64, gamma: f64, noise_var: f64, bd: &BetaDistribution) -> Result<OracleAsymptotic> {
    if !(lam > 0.0 && lam <= 1.0) || !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::domain(format!("asymptotic oracle MSE needs λγ > 0 (λ={lam}, γ={gamma})")));
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::param("noise_var", "must be finite and > 0"));
    }
    let k = lam * gamma;
    let h = |s: f64| Ok(bd.expect(|b| b / (b + s)) - (s - noise_var) / (k * s));
    let lo = noise_var * (1.0 + 1e-12);
    if h(lo)? <= 0.0 {
        return Err(Error::NoRoot("left side does not exceed right side at σ0²".into()));
    }
    let mut hi = 2.0 * noise_var;
    let mut grow = 0;
    while h(hi)? > 0.0 {
        hi *= 4.0;
        grow += 1;
        if grow > 400 || !hi.is_finite() {
            return Err(Error::NoRoot("no sign change while growing the bracket".into()));
        }
    }
    let s = bisect(h, lo, hi, 1e-14)?;
    Ok(OracleAsymptotic {
        varsigma: s,
        mse: (s - noise_var) / gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::complex_gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_phi(l: usize, n: usize, seed: u64) -> DMatrix<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(l, n, |_, _| complex_gaussian(&mut rng, 1.0 / l as f64))
    }

    #[test]
    fn empty_support() {
        let phi = random_phi(4, 6, 1);
        let r = oracle_estimate(&DVector::zeros(4), &phi, &[], &DVector::from_element(6, 1.0), 0.1).unwrap();
        assert!(r.theta_hat.iter().all(|v| v.norm() == 0.0));
        assert_eq!(r.mse, 0.0);
        assert_eq!(oracle_mse_exact(&DMatrix::zeros(4, 0), &[], 0.1, 6).unwrap(), 0.0);
    }

    #[test]
    fn single_user_closed_form() {
        let phi = random_phi(8, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = DVector::from_fn(8, |_, _| complex_gaussian(&mut rng, 1.0));
        let beta = DVector::from_vec(vec![0.5, 2.0, 1.5, 0.3, 0.9]);
        let s0 = 0.2;
        let r = oracle_estimate(&y, &phi, &[2], &beta, s0).unwrap();
        let col = phi.column(2);
        let energy = col.norm_squared();
        let expect = col.dotc(&y) / (energy + s0 / 1.5);
        assert!((r.theta_hat[2] - expect).norm() < 1e-13);
        for i in [0, 1, 3, 4] {
            assert_eq!(r.theta_hat[i], Complex64::new(0.0, 0.0));
        }
        let mse = oracle_mse_exact(&phi.columns(2, 1).into_owned(), &[1.5], s0, 5).unwrap();
        assert!((mse - (energy / s0 + 1.0 / 1.5).recip() / 5.0).abs() < 1e-15);
        assert!((r.mse - mse).abs() < 1e-15);
    }

    #[test]
    fn noiseless_limit_recovers_truth() {
        let (l, n) = (20, 40);
        let phi = random_phi(l, n, 4);
        let support = [1, 5, 9, 17, 30, 33];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut theta = DVector::zeros(n);
        for &i in &support {
            theta[i] = complex_gaussian(&mut rng, 1.0);
        }
        let y = &phi * &theta;
        let beta = DVector::from_element(n, 1.0);
        let r = oracle_estimate(&y, &phi, &support, &beta, 1e-10).unwrap();
        assert!((r.theta_hat - theta).norm() < 1e-7);
    }

    #[test]
    fn exact_mse_matches_monte_carlo() {
        let (l, n) = (12, 30);
        let phi = random_phi(l, n, 6);
        let support: Vec<usize> = vec![0, 3, 7, 8, 20];
        let beta = DVector::from_fn(n, |i, _| 0.5 + 0.1 * i as f64);
        let s0 = 0.3;
        let phi_s = phi.select_columns(&support);
        let beta_s: Vec<f64> = support.iter().map(|&i| beta[i]).collect();
        let exact = oracle_mse_exact(&phi_s, &beta_s, s0, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000;
        let (mut acc, mut acc2) = (0.0, 0.0);
        for _ in 0..trials {
            let mut theta = DVector::zeros(n);
            for &i in &support {
                theta[i] = complex_gaussian(&mut rng, beta[i]);
            }
            let noise = DVector::from_fn(l, |_, _| complex_gaussian(&mut rng, s0));
            let y = &phi * &theta + noise;
            let est = oracle_estimate(&y, &phi, &support, &beta, s0).unwrap();
            let e = (est.theta_hat - theta).norm_squared() / n as f64;
            acc += e;
            acc2 += e * e;
        }
        let m = acc / trials as f64;
        let se = ((acc2 / trials as f64 - m * m) / trials as f64).sqrt();
        assert!((m - exact).abs() < 3.0 * se, "{m} ± {se} vs {exact}");
    }

    #[test]
    fn singular_system_is_reported() {
        let mut phi = random_phi(4, 3, 8);
        let c0 = phi.column(0).into_owned();
        phi.set_column(1, &c0);
        // Tiny noise against huge β leaves a rank-deficient Gram matrix.
        let r = oracle_estimate(&DVector::zeros(4), &phi, &[0, 1], &DVector::from_element(3, 1e10), 1e-12);
        assert!(matches!(r, Err(Error::Singular { .. })));
        assert!(oracle_estimate(&DVector::zeros(4), &phi, &[7], &DVector::from_element(3, 1.0), 0.1).is_err());
    }

    #[test]
    fn point_mass_quadratic_root() {
        let b0 = 2.0;
        let bd = BetaDistribution::point(b0).unwrap();
        for &(lam, gamma, s0) in &[(0.1, 4.0, 0.01), (0.05, 13.3, 1e-3), (0.4, 2.0, 1.0)] {
            let k: f64 = lam * gamma;
            let p = b0 - s0 - k * b0;
            let root = 0.5 * (-p + (p * p + 4.0 * s0 * b0).sqrt());
            let r = oracle_mse_asymptotic(lam, gamma, s0, &bd).unwrap();
            assert!((r.varsigma - root).abs() < 1e-10 * root, "{} vs {root}", r.varsigma);
            assert!((r.mse - (root - s0) / gamma).abs() < 1e-10 * r.mse);
        }
    }

    #[test]
    fn asymptotic_domain_and_monotonicity() {
        let bd = BetaDistribution::from_geometry(500.0, 2.5, 50.0).unwrap();
        assert!(oracle_mse_asymptotic(0.0, 4.0, 1e-8, &bd).is_err());
        let s_small = oracle_mse_asymptotic(1e-6, 1e-3, 1e-8, &bd).unwrap();
        assert!((s_small.varsigma - 1e-8) / 1e-8 < 1e-6);
        let mut prev = f64::INFINITY;
        for snr in [0.0, 10.0, 20.0, 30.0, 40.0] {
            let s0 = 50f64.powf(-2.5) * 10f64.powf(-snr / 10.0);
            let v = oracle_mse_asymptotic(0.05, 13.3, s0, &bd).unwrap().mse;
            assert!(v <= prev);
            prev = v;
        }
        let a = oracle_mse_asymptotic(0.05, 13.3, 1e-8, &bd).unwrap().mse;
        let b = oracle_mse_asymptotic(0.1, 13.3, 1e-8, &bd).unwrap().mse;
        assert!(b >= a);
    }
}
