//! Monte Carlo sweeps over pilots, SNR or number of APs, with theory curves
//! alongside simulated ones, and CSV/JSON output.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cbamp::{amp_iterate, AmpConfig};
use crate::channel::{generate_scene, BetaDistribution, NetworkScene, SnrReference, SystemParams};
use crate::decoupling::{default_solver_config, solve_state_evolution, theory_mse};
use crate::detection::{centralized_llr, fusion_decide, fusion_error_probs, fusion_params, lrt_decide, lrt_error_probs, FusionParams};
use crate::error::{Error, Result};
use crate::mmv::mmv_amp;
use crate::oracle::{oracle_mse_asymptotic, oracle_mse_exact};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SweepVar {
    Pilots,
    Snr,
    NumAps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Known-support MSE, exact finite-size trace formula per scene.
    OracleExact,
    /// Known-support MSE from the large-system fixed point.
    OracleAsym,
    /// Decoupled-channel MSE at the state-evolution noise level.
    SmvTheory,
    /// Per-AP CB-AMP MSE.
    SmvCbamp,
    /// Joint-AP AMP MSE.
    MmvAmp,
    /// Per-AP likelihood ratio test, decoupled-channel error probability.
    LrtTheory,
    /// Per-AP likelihood ratio test on CB-AMP outputs.
    LrtEmp,
    /// Centralized test on per-AP CB-AMP outputs.
    CentSmv,
    /// Centralized test on joint-AP AMP outputs.
    CentMmv,
    /// Fusion of per-AP votes from CB-AMP outputs.
    DistFusion,
    /// Binomial error probability of the fused test at the theory noise level.
    DistTheory,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::OracleExact,
        Method::OracleAsym,
        Method::SmvTheory,
        Method::SmvCbamp,
        Method::MmvAmp,
        Method::LrtTheory,
        Method::LrtEmp,
        Method::CentSmv,
        Method::CentMmv,
        Method::DistFusion,
        Method::DistTheory,
    ];

    /// Deterministic methods carry no Monte Carlo variance.
    pub fn is_theory(self) -> bool {
        matches!(self, Method::OracleAsym | Method::SmvTheory | Method::LrtTheory | Method::DistTheory)
    }

    fn needs_smv(self) -> bool {
        matches!(self, Method::SmvCbamp | Method::LrtEmp | Method::CentSmv | Method::DistFusion)
    }

    fn needs_mmv(self) -> bool {
        matches!(self, Method::MmvAmp | Method::CentMmv)
    }
}

macro_rules! name_table {
    ($ty:ty { $($v:ident),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => stringify!($v)),* })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $(stringify!($v) => Ok(Self::$v),)*
                    other => Err(Error::domain(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty),
                        [$(stringify!($v)),*].join(", ")
                    ))),
                }
            }
        }
    };
}

name_table!(SweepVar { Pilots, Snr, NumAps });
name_table!(Method {
    OracleExact,
    OracleAsym,
    SmvTheory,
    SmvCbamp,
    MmvAmp,
    LrtTheory,
    LrtEmp,
    CentSmv,
    CentMmv,
    DistFusion,
    DistTheory,
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: SystemParams,
    pub snr_reference: SnrReference,
    pub sweep_var: SweepVar,
    pub values: Vec<f64>,
    pub trials: usize,
    pub methods: Vec<Method>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.trials == 0 {
            return Err(Error::param("trials", "must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::param("methods", "at least one method is required"));
        }
        if self.values.is_empty() {
            return Err(Error::param("values", "at least one sweep value is required"));
        }
        let up = self.values.windows(2).all(|w| w[1] > w[0]);
        let down = self.values.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            return Err(Error::param("values", "must be strictly monotone"));
        }
        for &v in &self.values {
            self.params_at(v)?;
        }
        Ok(())
    }

    /// System parameters at one sweep value.
    pub fn params_at(&self, value: f64) -> Result<SystemParams> {
        let mut p = self.base.clone();
        let count = |key: &'static str| -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::param(key, format!("sweep value {value} is not a positive integer")))
            }
        };
        match self.sweep_var {
            SweepVar::Pilots => p.num_pilots = count("num_pilots")?,
            SweepVar::NumAps => p.num_aps = count("num_aps")?,
            SweepVar::Snr => {
                if !value.is_finite() {
                    return Err(Error::param("snr_db", "must be finite"));
                }
                p.noise_var = self.snr_reference.noise_var(value, p.pathloss_exp, p.ref_dist);
            }
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub sweep_var: SweepVar,
    pub sweep_value: f64,
    pub metric: f64,
    pub stderr: f64,
    pub trials: usize,
    pub seed: u64,
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of one trial, independent of execution order.
pub fn trial_seed(seed: u64, value_index: usize, trial: usize) -> u64 {
    seed ^ splitmix64(((value_index as u64) << 32) ^ trial as u64)
}

/// Quantities shared by all trials at one sweep value.
#[derive(Debug, Clone)]
pub struct TheoryPoint {
    pub sigma_eff_sq: f64,
    pub fusion: Option<FusionParams>,
}

fn theory_point(p: &SystemParams, bd: &BetaDistribution, methods: &[Method]) -> Result<TheoryPoint> {
    let se = solve_state_evolution(p.activity_prob, p.gamma(), p.noise_var, bd, &default_solver_config())?;
    let fusion = if methods.iter().any(|m| matches!(m, Method::DistFusion | Method::DistTheory)) {
        let lrt = lrt_error_probs(se.sigma_eff_sq, p.activity_prob, bd)?;
        Some(fusion_params(lrt.p_false_alarm, lrt.p_miss, p.activity_prob, p.num_aps)?)
    } else {
        None
    };
    Ok(TheoryPoint {
        sigma_eff_sq: se.sigma_eff_sq,
        fusion,
    })
}

fn theory_metric(method: Method, p: &SystemParams, bd: &BetaDistribution, tp: &TheoryPoint) -> Result<f64> {
    let lam = p.activity_prob;
    match method {
        Method::OracleAsym => Ok(oracle_mse_asymptotic(lam, p.gamma(), p.noise_var, bd)?.mse),
        Method::SmvTheory => theory_mse(tp.sigma_eff_sq, lam, bd),
        Method::LrtTheory => Ok(lrt_error_probs(tp.sigma_eff_sq, lam, bd)?.p_err),
        Method::DistTheory => {
            let fp = tp.fusion.as_ref().ok_or_else(|| Error::domain("fusion parameters missing"))?;
            Ok(fusion_error_probs(fp)?.p_err)
        }
        _ => unreachable!("not a theory method"),
    }
}

/// Per-method metrics of one simulated scene, in the order of `methods`.
pub fn trial_metrics(scene: &NetworkScene, methods: &[Method], tp: &TheoryPoint, amp: &AmpConfig) -> Result<Vec<f64>> {
    let p = &scene.params;
    let (n, m) = (p.num_users, p.num_aps);
    let lam = p.activity_prob;
    let y = scene.received();
    let theta = scene.effective_channel();
    let nm = (n * m) as f64;

    let smv = if methods.iter().any(|x| x.needs_smv()) {
        let mut runs = Vec::with_capacity(m);
        for j in 0..m {
            let yj = y.column(j).into_owned();
            runs.push(amp_iterate(&yj, &scene.pilot, &scene.beta_at(j)?, lam, p.noise_var, amp, None)?.state);
        }
        Some(runs)
    } else {
        None
    };
    let mmv = if methods.iter().any(|x| x.needs_mmv()) {
        Some(mmv_amp(&y, &scene.pilot, &scene.beta, lam, p.noise_var, amp, None)?.state)
    } else {
        None
    };
    let errors = |decide: &dyn Fn(usize) -> Result<bool>| -> Result<f64> {
        let mut wrong = 0usize;
        for i in 0..n {
            if decide(i)? != scene.activity[i] {
                wrong += 1;
            }
        }
        Ok(wrong as f64 / n as f64)
    };

    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let v = match method {
            Method::OracleExact => {
                let support: Vec<usize> = (0..n).filter(|&i| scene.activity[i]).collect();
                let phi_s = scene.pilot.select_columns(&support);
                let mut acc = 0.0;
                for j in 0..m {
                    let beta_s: Vec<f64> = support.iter().map(|&i| scene.beta[(j, i)]).collect();
                    acc += oracle_mse_exact(&phi_s, &beta_s, p.noise_var, n)?;
                }
                acc / m as f64
            }
            Method::SmvCbamp => {
                let runs = smv.as_ref().expect("computed above");
                (0..m).map(|j| (&runs[j].theta_hat - theta.column(j)).norm_squared()).sum::<f64>() / nm
            }
            Method::LrtEmp => {
                let runs = smv.as_ref().expect("computed above");
                let mut wrong = 0usize;
                for (j, st) in runs.iter().enumerate() {
                    for i in 0..n {
                        if lrt_decide(st.r_hat[i], st.tau[i], lam, scene.beta[(j, i)])? != scene.activity[i] {
                            wrong += 1;
                        }
                    }
                }
                wrong as f64 / nm
            }
            Method::CentSmv => {
                let runs = smv.as_ref().expect("computed above");
                errors(&|i| {
                    let z = DVector::from_fn(m, |j, _| runs[j].r_hat[i]);
                    let tau = DVector::from_fn(m, |j, _| runs[j].tau[i]);
                    Ok(centralized_llr(&z, &scene.beta.column(i).into_owned(), &tau)? > 0.0)
                })?
            }
            Method::CentMmv => {
                let st = mmv.as_ref().expect("computed above");
                errors(&|i| {
                    let z = st.r_hat.row(i).transpose();
                    let tau = st.tau_matrix.row(i).transpose();
                    Ok(centralized_llr(&z, &scene.beta.column(i).into_owned(), &tau)? > 0.0)
                })?
            }
            Method::DistFusion => {
                let runs = smv.as_ref().expect("computed above");
                let fp = tp.fusion.as_ref().ok_or_else(|| Error::domain("fusion parameters missing"))?;
                errors(&|i| {
                    let mut votes = 0;
                    for (j, st) in runs.iter().enumerate() {
                        if lrt_decide(st.r_hat[i], st.tau[i], lam, scene.beta[(j, i)])? {
                            votes += 1;
                        }
                    }
                    Ok(fusion_decide(votes, fp))
                })?
            }
            Method::MmvAmp => {
                let st = mmv.as_ref().expect("computed above");
                (&st.theta_hat - &theta).norm_squared() / nm
            }
            _ => f64::NAN,
        };
        out.push(v);
    }
    Ok(out)
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs every requested method at every sweep value.
///
/// Simulated methods share one scene per trial, so comparisons between them
/// are paired. Output rows are ordered by sweep value, then method.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<ResultRow>> {
    run_sweep_with(spec, &AmpConfig::default())
}

pub fn run_sweep_with(spec: &SweepSpec, amp: &AmpConfig) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let mut methods = spec.methods.clone();
    methods.sort();
    methods.dedup();
    let bd = BetaDistribution::from_params(&spec.base)?;
    let sim: Vec<Method> = methods.iter().copied().filter(|m| !m.is_theory()).collect();
    let mut rows = Vec::new();
    for (vi, &value) in spec.values.iter().enumerate() {
        let p = spec.params_at(value)?;
        let ctx = |method: &str, trial: Option<usize>| match trial {
            Some(t) => format!("{method} at {}={value}, trial {t}", spec.sweep_var),
            None => format!("{method} at {}={value}", spec.sweep_var),
        };
        let needs_theory = methods.iter().any(|m| m.is_theory() || *m == Method::DistFusion);
        let tp = if needs_theory {
            theory_point(&p, &bd, &methods).map_err(|e| e.context(ctx("theory", None)))?
        } else {
            TheoryPoint {
                sigma_eff_sq: f64::NAN,
                fusion: None,
            }
        };
        let per_trial: Vec<Vec<f64>> = if sim.is_empty() {
            Vec::new()
        } else {
            (0..spec.trials)
                .into_par_iter()
                .map(|t| {
                    let mut pt = p.clone();
                    pt.seed = trial_seed(spec.base.seed, vi, t);
                    let scene = generate_scene(&pt)?;
                    trial_metrics(&scene, &sim, &tp, amp)
                })
                .collect::<Vec<Result<Vec<f64>>>>()
                .into_iter()
                .enumerate()
                .map(|(t, r)| r.map_err(|e| e.context(ctx("simulation", Some(t)))))
                .collect::<Result<_>>()?
        };
        for &method in &methods {
            let (metric, stderr, trials) = if method.is_theory() {
                let v = theory_metric(method, &p, &bd, &tp).map_err(|e| e.context(ctx(&method.to_string(), None)))?;
                (v, 0.0, 1)
            } else {
                let k = sim.iter().position(|&m| m == method).expect("simulated method");
                let xs: Vec<f64> = per_trial.iter().map(|r| r[k]).collect();
                let (m, s) = mean_stderr(&xs);
                (m, s, spec.trials)
            };
            rows.push(ResultRow {
                method,
                sweep_var: spec.sweep_var,
                sweep_value: value,
                metric,
                stderr,
                trials,
                seed: spec.base.seed,
            });
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: [&str; 7] = ["method", "sweep_var", "sweep_value", "metric", "stderr", "trials", "seed"];

/// Writes rows as CSV (floats in shortest round-trip exponent form).
pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.sweep_var.to_string(),
            format!("{:e}", r.sweep_value),
            format!("{:e}", r.metric),
            format!("{:e}", r.stderr),
            r.trials.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::from(e).context(format!("creating {}", path.display())))?;
    write_csv(rows, std::io::BufWriter::new(f))
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::domain(format!("unexpected CSV header {header:?}")));
    }
    let num = |s: &str, key: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::domain(format!("bad {key} `{s}`")))
    };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        rows.push(ResultRow {
            method: rec[0].parse()?,
            sweep_var: rec[1].parse()?,
            sweep_value: num(&rec[2], "sweep_value")?,
            metric: num(&rec[3], "metric")?,
            stderr: num(&rec[4], "stderr")?,
            trials: rec[5].parse().map_err(|_| Error::domain("bad trials"))?,
            seed: rec[6].parse().map_err(|_| Error::domain("bad seed"))?,
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a SweepSpec,
    rows: &'a [ResultRow],
}

/// JSON document with the sweep configuration and its rows.
pub fn summary_json(spec: &SweepSpec, rows: &[ResultRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Summary { config: spec, rows })?)
}
