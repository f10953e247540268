//! `key = value` run configuration with `#` comments.
//!
//! Defaults come from a scale preset, then the file, then command-line
//! overrides. Unknown keys are rejected.

use std::fmt::Write as _;

use crate::channel::{SnrReference, SystemParams};
use crate::error::{Error, Result};
use crate::experiments::{Method, SweepSpec, SweepVar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

/// Noise level given either directly or as an SNR in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    SnrDb(f64),
    NoiseVar(f64),
}

pub const DEFAULT_TRIALS: usize = 20;

pub const KEYS: [&str; 15] = [
    "num_users",
    "num_pilots",
    "num_aps",
    "activity_prob",
    "radius",
    "pathloss_exp",
    "ref_dist",
    "snr_db",
    "noise_var",
    "snr_reference",
    "seed",
    "trials",
    "sweep",
    "values",
    "methods",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub num_users: usize,
    pub num_pilots: usize,
    pub num_aps: usize,
    pub activity_prob: f64,
    pub radius: f64,
    pub pathloss_exp: f64,
    pub ref_dist: f64,
    pub noise: NoiseSpec,
    pub snr_reference: SnrReference,
    pub seed: u64,
    pub trials: usize,
    pub sweep: Option<SweepVar>,
    pub values: Option<Vec<f64>>,
    pub methods: Option<Vec<Method>>,
}

fn cfg_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| cfg_err(key, format!("cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl RunConfig {
    pub fn defaults(scale: Scale) -> Self {
        let p = match scale {
            Scale::Desk => SystemParams::desk(),
            Scale::Paper => SystemParams::paper_scale(),
        };
        RunConfig {
            num_users: p.num_users,
            num_pilots: p.num_pilots,
            num_aps: p.num_aps,
            activity_prob: p.activity_prob,
            radius: p.radius,
            pathloss_exp: p.pathloss_exp,
            ref_dist: p.ref_dist,
            noise: NoiseSpec::SnrDb(30.0),
            snr_reference: SnrReference::RefDistance,
            seed: p.seed,
            trials: DEFAULT_TRIALS,
            sweep: None,
            values: None,
            methods: None,
        }
    }

    /// Assigns one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "num_users" => self.num_users = parse_num(key, v)?,
            "num_pilots" => self.num_pilots = parse_num(key, v)?,
            "num_aps" => self.num_aps = parse_num(key, v)?,
            "activity_prob" => self.activity_prob = parse_num(key, v)?,
            "radius" => self.radius = parse_num(key, v)?,
            "pathloss_exp" => self.pathloss_exp = parse_num(key, v)?,
            "ref_dist" => self.ref_dist = parse_num(key, v)?,
            "snr_db" => self.noise = NoiseSpec::SnrDb(parse_num(key, v)?),
            "noise_var" => self.noise = NoiseSpec::NoiseVar(parse_num(key, v)?),
            "snr_reference" => self.snr_reference = v.parse().map_err(|e: Error| cfg_err(key, e.to_string()))?,
            "seed" => self.seed = parse_num(key, v)?,
            "trials" => self.trials = parse_num(key, v)?,
            "sweep" => self.sweep = Some(v.parse().map_err(|e: Error| cfg_err(key, e.to_string()))?),
            "values" => self.values = Some(parse_list(key, v)?),
            "methods" => {
                let ms: Vec<Method> = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|e: Error| cfg_err(key, e.to_string())))
                    .collect::<Result<_>>()?;
                self.methods = Some(ms);
            }
            other => return Err(cfg_err(other, format!("unknown key (expected one of: {})", KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Applies the lines of a configuration file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut noise_keys = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(&format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if k == "snr_db" || k == "noise_var" {
                noise_keys.push(k.to_string());
            }
            self.set(k, v).map_err(|e| e.context(format!("line {}", lineno + 1)))?;
        }
        if noise_keys.iter().any(|k| k == "snr_db") && noise_keys.iter().any(|k| k == "noise_var") {
            return Err(cfg_err("noise_var", "conflicts with snr_db; give only one"));
        }
        Ok(())
    }

    /// Scale defaults, then `text`, then `overrides`, then validation.
    pub fn load(scale: Scale, text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::defaults(scale);
        cfg.apply_text(text)?;
        for (k, v) in overrides {
            cfg.set(k, v).map_err(|e| e.context("override"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn noise_var(&self) -> f64 {
        match self.noise {
            NoiseSpec::NoiseVar(v) => v,
            NoiseSpec::SnrDb(s) => self.snr_reference.noise_var(s, self.pathloss_exp, self.ref_dist),
        }
    }

    pub fn params(&self) -> SystemParams {
        SystemParams {
            num_users: self.num_users,
            num_pilots: self.num_pilots,
            num_aps: self.num_aps,
            activity_prob: self.activity_prob,
            radius: self.radius,
            pathloss_exp: self.pathloss_exp,
            ref_dist: self.ref_dist,
            noise_var: self.noise_var(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if self.trials == 0 {
            return Err(cfg_err("trials", "must be >= 1"));
        }
        if let NoiseSpec::SnrDb(s) = self.noise {
            if !s.is_finite() {
                return Err(cfg_err("snr_db", "must be finite"));
            }
        }
        Ok(())
    }

    /// Builds a sweep over `sweep_var`, taking values and methods from the
    /// configuration when set and from the given defaults otherwise.
    pub fn sweep_spec(&self, sweep_var: SweepVar, values: &[f64], methods: &[Method]) -> Result<SweepSpec> {
        if let Some(v) = self.sweep {
            if v != sweep_var {
                return Err(cfg_err("sweep", format!("`{v}` conflicts with the requested sweep over `{sweep_var}`")));
            }
        }
        let spec = SweepSpec {
            base: self.params(),
            snr_reference: self.snr_reference,
            sweep_var,
            values: self.values.clone().unwrap_or_else(|| values.to_vec()),
            trials: self.trials,
            methods: self.methods.clone().unwrap_or_else(|| methods.to_vec()),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Serializes to text that `load` reads back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |xs: Vec<String>| xs.join(", ");
        writeln!(s, "num_users = {}", self.num_users).unwrap();
        writeln!(s, "num_pilots = {}", self.num_pilots).unwrap();
        writeln!(s, "num_aps = {}", self.num_aps).unwrap();
        writeln!(s, "activity_prob = {:?}", self.activity_prob).unwrap();
        writeln!(s, "radius = {:?}", self.radius).unwrap();
        writeln!(s, "pathloss_exp = {:?}", self.pathloss_exp).unwrap();
        writeln!(s, "ref_dist = {:?}", self.ref_dist).unwrap();
        match self.noise {
            NoiseSpec::SnrDb(v) => writeln!(s, "snr_db = {v:?}").unwrap(),
            NoiseSpec::NoiseVar(v) => writeln!(s, "noise_var = {v:e}").unwrap(),
        }
        writeln!(s, "snr_reference = {}", self.snr_reference).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "trials = {}", self.trials).unwrap();
        if let Some(v) = self.sweep {
            writeln!(s, "sweep = {v}").unwrap();
        }
        if let Some(v) = &self.values {
            writeln!(s, "values = {}", join(v.iter().map(|x| format!("{x:?}")).collect())).unwrap();
        }
        if let Some(v) = &self.methods {
            writeln!(s, "methods = {}", join(v.iter().map(|x| x.to_string()).collect())).unwrap();
        }
        s
    }
}
