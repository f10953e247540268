//! Network geometry, fading, user activity, pilots and received pilot signals.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kronrod_rule, QuadConfig};

/// Distances below this are redrawn when placing users.
pub const MIN_DISTANCE: f64 = 0.1;

/// How a nominal SNR in dB is turned into a noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnrReference {
    /// SNR of a user at the reference distance: `σ0² = d0^{-α}·10^{-SNR/10}`.
    RefDistance,
    /// SNR of unit pre-pathloss power: `σ0² = 10^{-SNR/10}`.
    Unit,
}

impl SnrReference {
    pub fn noise_var(self, snr_db: f64, pathloss_exp: f64, ref_dist: f64) -> f64 {
        let unit = 10f64.powf(-snr_db / 10.0);
        match self {
            SnrReference::RefDistance => ref_dist.powf(-pathloss_exp) * unit,
            SnrReference::Unit => unit,
        }
    }

    pub fn snr_db(self, noise_var: f64, pathloss_exp: f64, ref_dist: f64) -> f64 {
        let signal = match self {
            SnrReference::RefDistance => ref_dist.powf(-pathloss_exp),
            SnrReference::Unit => 1.0,
        };
        10.0 * (signal / noise_var).log10()
    }
}

impl std::str::FromStr for SnrReference {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ref-distance" => Ok(SnrReference::RefDistance),
            "unit" => Ok(SnrReference::Unit),
            other => Err(Error::domain(format!(
                "unknown SNR reference `{other}` (expected `ref-distance` or `unit`)"
            ))),
        }
    }
}

impl std::fmt::Display for SnrReference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SnrReference::RefDistance => "ref-distance",
            SnrReference::Unit => "unit",
        })
    }
}

/// Generative configuration of one system instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub num_users: usize,
    pub num_pilots: usize,
    pub num_aps: usize,
    pub activity_prob: f64,
    pub radius: f64,
    pub pathloss_exp: f64,
    pub ref_dist: f64,
    pub noise_var: f64,
    pub seed: u64,
}

impl SystemParams {
    /// Desk-scale defaults: N = 1000, L = 75, M = 10, λ = 0.1, 30 dB at the
    /// reference distance, R = 500 m, α = 2.5, d0 = 50 m.
    pub fn desk() -> Self {
        Self {
            num_users: 1000,
            num_pilots: 75,
            num_aps: 10,
            activity_prob: 0.1,
            radius: 500.0,
            pathloss_exp: 2.5,
            ref_dist: 50.0,
            noise_var: SnrReference::RefDistance.noise_var(30.0, 2.5, 50.0),
            seed: 0,
        }
    }

    /// Full-scale defaults: N = 4000, L = 300.
    pub fn paper_scale() -> Self {
        Self {
            num_users: 4000,
            num_pilots: 300,
            ..Self::desk()
        }
    }

    pub fn gamma(&self) -> f64 {
        self.num_users as f64 / self.num_pilots as f64
    }

    pub fn beta_max(&self) -> f64 {
        self.ref_dist.powf(-self.pathloss_exp)
    }

    pub fn beta_min(&self) -> f64 {
        (2.0 * self.radius).powf(-self.pathloss_exp)
    }

    /// Checks everything except the activity probability bound.
    pub fn validate_geometry(&self) -> Result<()> {
        if self.num_users == 0 {
            return Err(Error::param("num_users", "must be >= 1"));
        }
        if self.num_pilots == 0 {
            return Err(Error::param("num_pilots", "must be >= 1"));
        }
        if self.num_aps == 0 {
            return Err(Error::param("num_aps", "must be >= 1"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::param("radius", "must be finite and > 0"));
        }
        if !(self.pathloss_exp > 0.0 && self.pathloss_exp.is_finite()) {
            return Err(Error::param("pathloss_exp", "must be finite and > 0"));
        }
        if !(self.ref_dist > 0.0 && self.ref_dist < 2.0 * self.radius) {
            return Err(Error::param("ref_dist", "must lie in (0, 2*radius)"));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::param("noise_var", "must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.activity_prob) {
            return Err(Error::param("activity_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Full validation, including `0 ≤ λ < 0.5`.
    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        if !(self.activity_prob >= 0.0 && self.activity_prob < 0.5) {
            return Err(Error::param("activity_prob", "must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// `min(d^{-α}, d0^{-α})`.
pub fn large_scale_fading(d: f64, pathloss_exp: f64, ref_dist: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::domain(format!("distance must be > 0, got {d}")));
    }
    Ok(d.max(ref_dist).powf(-pathloss_exp))
}

/// Density of the distance between two independent uniform points in a disc
/// of radius `radius`.
pub fn distance_pdf(d: f64, radius: f64) -> f64 {
    if !(d > 0.0 && d < 2.0 * radius) {
        return 0.0;
    }
    let x = d / (2.0 * radius);
    4.0 * d / (PI * radius * radius) * (x.acos() - x * (1.0 - x * x).sqrt())
}

/// Distribution of the large-scale fading coefficient, stored as a discrete
/// quadrature rule: weighted atoms for the continuous part plus an exact atom
/// at `beta_max` for the clamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaDistribution {
    /// `(β, weight)` pairs; weights sum to one including `point_mass`.
    pub atoms: Vec<(f64, f64)>,
    pub point_mass: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    geometry: Option<(f64, f64, f64)>,
}

/// Number of log-spaced distance panels in the fixed product rule.
pub const BETA_PANELS: usize = 48;

impl BetaDistribution {
    /// Law induced by uniform placement in a disc of radius `radius`.
    pub fn from_geometry(radius: f64, pathloss_exp: f64, ref_dist: f64) -> Result<Self> {
        Self::from_geometry_with_panels(radius, pathloss_exp, ref_dist, BETA_PANELS)
    }

    pub fn from_params(p: &SystemParams) -> Result<Self> {
        Self::from_geometry(p.radius, p.pathloss_exp, p.ref_dist)
    }

    pub fn from_geometry_with_panels(
        radius: f64,
        pathloss_exp: f64,
        ref_dist: f64,
        panels: usize,
    ) -> Result<Self> {
        if !(radius > 0.0 && pathloss_exp > 0.0 && ref_dist > 0.0 && ref_dist <= 2.0 * radius) {
            return Err(Error::domain("geometry requires radius, α > 0 and 0 < d0 <= 2R"));
        }
        let d_max = 2.0 * radius;
        let point_mass = QuadConfig::rel(1e-13)
            .integrate(|d| distance_pdf(d, radius), 0.0, ref_dist)?
            .min(1.0);
        let mut atoms = Vec::with_capacity(panels * 15);
        if ref_dist < d_max {
            // Panels uniform in ln d; the density in u = ln d is p(e^u) e^u.
            let (u0, u1) = (ref_dist.ln(), d_max.ln());
            let h = (u1 - u0) / panels as f64;
            for k in 0..panels {
                let a = u0 + h * k as f64;
                for (u, w) in kronrod_rule(a, a + h) {
                    let d = u.exp();
                    let weight = w * distance_pdf(d, radius) * d;
                    if weight > 0.0 {
                        atoms.push((d.powf(-pathloss_exp), weight));
                    }
                }
            }
        }
        Ok(Self {
            atoms,
            point_mass,
            beta_min: d_max.powf(-pathloss_exp),
            beta_max: ref_dist.powf(-pathloss_exp),
            geometry: Some((radius, pathloss_exp, ref_dist)),
        })
    }

    /// Degenerate law `β ≡ b`.
    pub fn point(b: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::domain("point-mass β must be finite and > 0"));
        }
        Ok(Self {
            atoms: Vec::new(),
            point_mass: 1.0,
            beta_min: b,
            beta_max: b,
            geometry: None,
        })
    }

    /// Total probability of the stored rule (one up to quadrature error).
    pub fn total_mass(&self) -> f64 {
        self.point_mass + self.atoms.iter().map(|a| a.1).sum::<f64>()
    }

    /// `E{g(β)}` under the fixed rule.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut g: F) -> f64 {
        let mut acc = if self.point_mass > 0.0 {
            self.point_mass * g(self.beta_max)
        } else {
            0.0
        };
        for &(b, w) in &self.atoms {
            acc += w * g(b);
        }
        acc
    }

    /// Fallible variant of [`expect`](Self::expect).
    pub fn try_expect<F: FnMut(f64) -> Result<f64>>(&self, mut g: F) -> Result<f64> {
        let mut acc = if self.point_mass > 0.0 {
            self.point_mass * g(self.beta_max)?
        } else {
            0.0
        };
        for &(b, w) in &self.atoms {
            acc += w * g(b)?;
        }
        Ok(acc)
    }

    /// `E{g(β)}` by adaptive quadrature over distance, independent of the
    /// fixed rule. Only available for geometric laws.
    pub fn expect_adaptive<F: Fn(f64) -> f64>(&self, g: F, rel_tol: f64) -> Result<f64> {
        let Some((radius, alpha, d0)) = self.geometry else {
            return Ok(self.point_mass * g(self.beta_max));
        };
        let cont = QuadConfig::rel(rel_tol)
            .integrate(|d| g(d.powf(-alpha)) * distance_pdf(d, radius), d0, 2.0 * radius)?;
        Ok(self.point_mass * g(self.beta_max) + cont)
    }

    pub fn mean(&self) -> f64 {
        self.expect(|b| b)
    }

    /// Continuous density of β on `(beta_min, beta_max)`.
    pub fn pdf(&self, beta: f64) -> f64 {
        let Some((radius, alpha, _)) = self.geometry else {
            return 0.0;
        };
        if !(beta > self.beta_min && beta < self.beta_max) {
            return 0.0;
        }
        let d = beta.powf(-1.0 / alpha);
        distance_pdf(d, radius) * d / (alpha * beta)
    }

    /// `P(β ≤ beta)`.
    pub fn cdf(&self, beta: f64) -> Result<f64> {
        if beta >= self.beta_max {
            return Ok(1.0);
        }
        let Some((radius, alpha, _)) = self.geometry else {
            return Ok(0.0);
        };
        if beta <= self.beta_min {
            return Ok(0.0);
        }
        let d = beta.powf(-1.0 / alpha);
        let v = QuadConfig::rel(1e-12).integrate(|x| distance_pdf(x, radius), d, 2.0 * radius)?;
        Ok(v.clamp(0.0, 1.0))
    }

    /// `n` log-spaced `(β, density)` samples of the continuous part.
    pub fn tabulate(&self, n: usize) -> Vec<(f64, f64)> {
        if n == 0 || self.geometry.is_none() {
            return Vec::new();
        }
        let (lo, hi) = (self.beta_min.ln(), self.beta_max.ln());
        (0..n)
            .map(|k| {
                let t = (k as f64 + 0.5) / n as f64;
                let b = (lo + t * (hi - lo)).exp();
                (b, self.pdf(b))
            })
            .collect()
    }
}

/// One realized system instance.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkScene {
    pub params: SystemParams,
    pub ap_positions: Vec<[f64; 2]>,
    pub user_positions: Vec<[f64; 2]>,
    /// `M × N`.
    pub beta: DMatrix<f64>,
    pub activity: Vec<bool>,
    /// `M × N`.
    pub small_scale: DMatrix<Complex64>,
    /// `L × N`.
    pub pilot: DMatrix<Complex64>,
    /// `L × M`.
    pub noise: DMatrix<Complex64>,
}

fn uniform_in_disc<R: Rng>(rng: &mut R, radius: f64) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let t = 2.0 * PI * rng.random::<f64>();
    [r * t.cos(), r * t.sin()]
}

/// Circularly symmetric complex Gaussian with variance `var`.
pub fn complex_gaussian<R: Rng>(rng: &mut R, var: f64) -> Complex64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Draws a full scene from `params` (reproducible from `params.seed`).
///
/// Only the geometric checks apply, so `λ = 1` is accepted here.
pub fn generate_scene(params: &SystemParams) -> Result<NetworkScene> {
    params.validate_geometry()?;
    let (n, l, m) = (params.num_users, params.num_pilots, params.num_aps);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let ap_positions: Vec<[f64; 2]> = (0..m).map(|_| uniform_in_disc(&mut rng, params.radius)).collect();
    let mut user_positions = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = uniform_in_disc(&mut rng, params.radius);
        while ap_positions.iter().any(|a| dist(a, &u) < MIN_DISTANCE) {
            u = uniform_in_disc(&mut rng, params.radius);
        }
        user_positions.push(u);
    }
    let beta = DMatrix::from_fn(m, n, |j, i| {
        dist(&ap_positions[j], &user_positions[i])
            .max(params.ref_dist)
            .powf(-params.pathloss_exp)
    });
    let activity: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < params.activity_prob).collect();
    let small_scale = DMatrix::from_fn(m, n, |_, _| complex_gaussian(&mut rng, 1.0));
    let pilot_var = 1.0 / l as f64;
    let pilot = DMatrix::from_fn(l, n, |_, _| complex_gaussian(&mut rng, pilot_var));
    let noise = DMatrix::from_fn(l, m, |_, _| complex_gaussian(&mut rng, params.noise_var));
    Ok(NetworkScene {
        params: params.clone(),
        ap_positions,
        user_positions,
        beta,
        activity,
        small_scale,
        pilot,
        noise,
    })
}

impl NetworkScene {
    fn check_ap(&self, j: usize) -> Result<()> {
        if j >= self.params.num_aps {
            return Err(Error::OutOfRange {
                index: j,
                len: self.params.num_aps,
            });
        }
        Ok(())
    }

    /// `θ_ij = a_i √β_ij h_ij` as an `N × M` matrix (column `j` is AP `j`).
    pub fn effective_channel(&self) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.params.num_users, self.params.num_aps, |i, j| {
            if self.activity[i] {
                self.small_scale[(j, i)] * self.beta[(j, i)].sqrt()
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
    }

    /// Effective channel seen by AP `j` (0-based).
    pub fn effective_channel_at(&self, j: usize) -> Result<DVector<Complex64>> {
        self.check_ap(j)?;
        Ok(DVector::from_fn(self.params.num_users, |i, _| {
            if self.activity[i] {
                self.small_scale[(j, i)] * self.beta[(j, i)].sqrt()
            } else {
                Complex64::new(0.0, 0.0)
            }
        }))
    }

    /// Large-scale coefficients `β_j` of AP `j` (0-based) as a length-`N` vector.
    pub fn beta_at(&self, j: usize) -> Result<DVector<f64>> {
        self.check_ap(j)?;
        Ok(self.beta.row(j).transpose())
    }

    /// `y_j = Φ θ_j + n_j` for AP `j` (0-based).
    pub fn synthesize_received(&self, j: usize) -> Result<DVector<Complex64>> {
        let theta = self.effective_channel_at(j)?;
        Ok(&self.pilot * theta + self.noise.column(j))
    }

    /// All received pilot signals, `L × M`.
    pub fn received(&self) -> DMatrix<Complex64> {
        &self.pilot * self.effective_channel() + &self.noise
    }

    pub fn num_active(&self) -> usize {
        self.activity.iter().filter(|&&a| a).count()
    }

    pub fn dump(&self) -> SceneDump {
        SceneDump {
            params: self.params.clone(),
            ap_positions: self.ap_positions.clone(),
            user_positions: self.user_positions.clone(),
            beta: self.beta.row_iter().map(|r| r.iter().copied().collect()).collect(),
            activity: self.activity.clone(),
        }
    }
}

/// Serializable summary of a scene: geometry, fading, activity and the seed
/// (inside `params`) from which the full scene can be regenerated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDump {
    pub params: SystemParams,
    pub ap_positions: Vec<[f64; 2]>,
    pub user_positions: Vec<[f64; 2]>,
    /// Row-major `M × N`.
    pub beta: Vec<Vec<f64>>,
    pub activity: Vec<bool>,
}

impl SceneDump {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Regenerates the full scene from the stored seed.
    pub fn replay(&self) -> Result<NetworkScene> {
        generate_scene(&self.params)
    }
}
