//! Shared numerical machinery: adaptive Gauss-Kronrod quadrature (finite and
//! semi-infinite ranges), the special integrals `omega` and `omega2` that
//! appear in the scalar-channel MSE expressions, damped fixed-point iteration
//! and bracketed bisection.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

// 15-point Kronrod extension of the 7-point Gauss rule (QUADPACK qk15).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Nodes and weights of the 15-point Kronrod rule mapped to `[a, b]`, for
/// callers that need a fixed (non-adaptive) product rule.
pub fn kronrod_rule(a: f64, b: f64) -> [(f64, f64); 15] {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut out = [(center, WGK[7] * half); 15];
    for j in 0..7 {
        out[2 * j] = (center - half * XGK[j], WGK[j] * half);
        out[2 * j + 1] = (center + half * XGK[j], WGK[j] * half);
    }
    out
}

/// Relative level below which a decaying integrand is treated as zero when a
/// semi-infinite range is truncated.
pub const TAIL_CUTOFF: f64 = 1e-14;

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut res_k = fc * WGK[7];
    let mut res_g = fc * WG[3];
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 7];
    let mut fv2 = [0.0; 7];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    let res_abs = res_abs * half.abs();
    let res_asc = res_asc * half.abs();
    let mut error = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && error != 0.0 {
        error = res_asc * (200.0 * error / res_asc).powf(1.5).min(1.0);
    }
    let floor = 50.0 * f64::EPSILON * res_abs;
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(floor);
    }
    Segment { a, b, value, error }
}

/// Tolerances for adaptive quadrature. Integration stops once the estimated
/// error is below `abs_tol` or below `rel_tol * |estimate|`.
#[derive(Debug, Clone, Copy)]
pub struct QuadConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            abs_tol: 0.0,
            rel_tol: 1e-10,
            max_intervals: 2000,
        }
    }
}

impl QuadConfig {
    pub fn rel(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    fn accept(&self, value: f64, error: f64) -> bool {
        error <= self.abs_tol || error <= self.rel_tol * value.abs()
    }

    /// Integrates `f` over `[a, b]` (finite).
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> Result<f64> {
        self.integrate_pieces(&f, &[a, b])
    }

    /// Integrates over `[points[0], points[last]]`, seeding the adaptive
    /// subdivision with the given (sorted) break points.
    pub fn integrate_pieces<F: Fn(f64) -> f64>(&self, f: &F, points: &[f64]) -> Result<f64> {
        if points.len() < 2 {
            return Err(Error::domain("quadrature needs at least two points"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::domain("finite quadrature given a non-finite bound"));
        }
        let mut heap = BinaryHeap::new();
        let mut total = 0.0;
        let mut total_err = 0.0;
        for w in points.windows(2) {
            if w[1] <= w[0] {
                continue;
            }
            let seg = kronrod15(f, w[0], w[1]);
            total += seg.value;
            total_err += seg.error;
            heap.push(seg);
        }
        if heap.is_empty() {
            return Ok(0.0);
        }
        while !self.accept(total, total_err) {
            if heap.len() >= self.max_intervals {
                return Err(Error::Quadrature {
                    estimate: total,
                    error: total_err,
                });
            }
            let worst = heap.pop().expect("heap is non-empty");
            let mid = 0.5 * (worst.a + worst.b);
            if mid <= worst.a || mid >= worst.b {
                // Interval no longer splittable in floating point.
                heap.push(worst);
                return Err(Error::Quadrature {
                    estimate: total,
                    error: total_err,
                });
            }
            let left = kronrod15(f, worst.a, mid);
            let right = kronrod15(f, mid, worst.b);
            total += left.value + right.value - worst.value;
            total_err += left.error + right.error - worst.error;
            heap.push(left);
            heap.push(right);
        }
        // Re-sum to shed accumulated cancellation in the running total.
        Ok(heap.iter().map(|s| s.value).sum())
    }

    /// Integrates `f` over `[a, ∞)`.
    ///
    /// The range is truncated where `|f|` has fallen below [`TAIL_CUTOFF`]
    /// times its running maximum on a geometric grid `a + scale·2^k`; the grid
    /// points and any `hints` (e.g. known transition points) seed the
    /// subdivision of the finite remainder.
    pub fn integrate_to_infinity<F: Fn(f64) -> f64>(
        &self,
        f: F,
        a: f64,
        scale: f64,
        hints: &[f64],
    ) -> Result<f64> {
        if !a.is_finite() || !(scale > 0.0) {
            return Err(Error::domain("semi-infinite quadrature needs finite a and scale > 0"));
        }
        let mut points = vec![a];
        let mut running_max = f(a).abs();
        let mut below = 0;
        let mut step = scale;
        loop {
            let t = a + step;
            if !t.is_finite() || step > 1e300 {
                return Err(Error::Quadrature {
                    estimate: f64::NAN,
                    error: f64::INFINITY,
                });
            }
            let v = f(t).abs();
            if !v.is_finite() {
                return Err(Error::domain(format!("integrand not finite at t = {t:e}")));
            }
            points.push(t);
            running_max = running_max.max(v);
            if running_max > 0.0 && v <= TAIL_CUTOFF * running_max {
                below += 1;
                if below >= 2 {
                    break;
                }
            } else {
                below = 0;
            }
            step *= 2.0;
        }
        let end = *points.last().expect("non-empty");
        points.extend(hints.iter().copied().filter(|&h| h > a && h < end));
        points.sort_by(f64::total_cmp);
        points.dedup();
        self.integrate_pieces(&f, &points)
    }
}

/// Adaptive quadrature of `f` over `[a, b]` where `b` may be `+∞`; the
/// estimate meets absolute-or-relative error `tol`.
pub fn quad<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let cfg = QuadConfig {
        abs_tol: tol,
        rel_tol: tol,
        ..QuadConfig::default()
    };
    if b == f64::INFINITY {
        cfg.integrate_to_infinity(f, a, 1.0, &[])
    } else {
        cfg.integrate(f, a, b)
    }
}

/// `ω(a, b) = ∫₀^∞ t e^{-bt} / (1 + a e^{-t}) dt` for `a ≥ 0`, `b > 0`.
pub fn omega(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::domain(format!("omega(a={a}, b={b}) requires a >= 0, b > 0")));
    }
    let f = |t: f64| t * (-b * t).exp() / (1.0 + a * (-t).exp());
    let hints: Vec<f64> = (a > 1.0).then(|| a.ln()).into_iter().collect();
    QuadConfig::rel(1e-11).integrate_to_infinity(f, 0.0, (1.0 / b).min(1.0), &hints)
}

/// `ω₂(a, b, c, d) = ∫₀^∞ t e^{-bt} (1 - c e^{-dt}) / (1 + a e^{-t})² dt`.
///
/// `c` may be negative; the scalar MSE with a mismatched noise level uses
/// `c < 0` (a mixture density, which is a sum of exponentials).
pub fn omega2(a: f64, b: f64, c: f64, d: f64) -> Result<f64> {
    let ok = a >= 0.0 && b > 0.0 && d >= 0.0 && [a, b, c, d].iter().all(|v| v.is_finite());
    if !ok {
        return Err(Error::domain(format!(
            "omega2(a={a}, b={b}, c={c}, d={d}) requires a >= 0, b > 0, d >= 0"
        )));
    }
    let f = |t: f64| {
        let q = 1.0 + a * (-t).exp();
        t * (-b * t).exp() * (1.0 - c * (-d * t).exp()) / (q * q)
    };
    let mut hints = Vec::new();
    if a > 1.0 {
        hints.push(a.ln());
    }
    if c > 1.0 && d > 0.0 {
        hints.push(c.ln() / d);
    }
    QuadConfig::rel(1e-11).integrate_to_infinity(f, 0.0, (1.0 / b).min(1.0), &hints)
}

/// Damped fixed-point iteration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Weight on the new map value: `x ← (1-δ)x + δ·map(x)`.
    pub damping: f64,
    pub init: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            rel_tol: 1e-9,
            damping: 0.7,
            init: 1.0,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::param("rel_tol", "must be > 0"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::param("damping", "must lie in (0, 1]"));
        }
        if !(self.init > 0.0) || !self.init.is_finite() {
            return Err(Error::param("init", "must be finite and > 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointSolution {
    pub value: f64,
    pub iters: usize,
    /// `|map(x) - x| / x` at the returned `x`.
    pub residual: f64,
    pub trace: Vec<f64>,
}

/// Solves `x = map(x)` on `(0, ∞)` by damped iteration.
///
/// Stops when the undamped relative residual `|map(x) - x| / x` drops to
/// `rel_tol`, so the returned point satisfies `|x - map(x)| ≤ rel_tol·x`.
pub fn solve_fixed_point<F>(mut map: F, cfg: &FixedPointConfig) -> Result<FixedPointSolution>
where
    F: FnMut(f64) -> Result<f64>,
{
    cfg.validate()?;
    let mut x = cfg.init;
    let mut trace = Vec::with_capacity(64);
    for iter in 0..cfg.max_iters {
        trace.push(x);
        let gx = map(x)?;
        if !gx.is_finite() {
            return Err(Error::Divergence { iter });
        }
        let residual = (gx - x).abs() / x.abs();
        if residual <= cfg.rel_tol {
            return Ok(FixedPointSolution {
                value: x,
                iters: iter + 1,
                residual,
                trace,
            });
        }
        x = (1.0 - cfg.damping) * x + cfg.damping * gx;
        if !(x > 0.0) {
            return Err(Error::Divergence { iter });
        }
    }
    Err(Error::FixedPoint {
        iters: cfg.max_iters,
        last: x,
        trace,
    })
}

/// Bisection for a sign change of `f` on `[lo, hi]`, to relative width `rel_tol`.
pub fn bisect<F: FnMut(f64) -> Result<f64>>(mut f: F, mut lo: f64, mut hi: f64, rel_tol: f64) -> Result<f64> {
    let mut f_lo = f(lo)?;
    let f_hi = f(hi)?;
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::NoRoot(format!(
            "no sign change on [{lo:e}, {hi:e}] ({f_lo:e}, {f_hi:e})"
        )));
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if (hi - lo) <= rel_tol * mid.abs() || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        let f_mid = f(mid)?;
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
