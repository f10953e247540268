use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cellfree::channel::BetaDistribution;
use cellfree::config::{RunConfig, Scale};
use cellfree::decoupling::{default_solver_config, solve_property1, solve_state_evolution, EffectiveNoise};
use cellfree::experiments::{emit_csv, run_sweep, summary_json, Method, ResultRow, SweepSpec, SweepVar};
use cellfree::oracle::oracle_mse_asymptotic;
use cellfree::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cellfree", version, about = "Activity detection and channel estimation for cell-free massive MIMO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// N=1000 preset (default).
    #[arg(long, global = true, conflicts_with = "paper_scale")]
    desk_scale: bool,
    /// N=4000 preset.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Comma-separated sweep values.
    #[arg(long, global = true, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Monte Carlo trials per sweep value.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Effective noise level from both solvers.
    FixedPoint,
    /// Large-system oracle MSE.
    OracleAsym,
    /// MSE against the number of pilots.
    #[command(name = "mse-vs-pilots")]
    MsePilots,
    /// MSE against SNR.
    #[command(name = "mse-vs-snr")]
    MseSnr,
    /// Single-AP detection error.
    LrtSingle {
        #[arg(long, value_enum, default_value_t = LrtAxis::Pilots)]
        vs: LrtAxis,
    },
    /// Centralized detection error against the number of APs.
    DetectCentralized,
    /// Distributed detection error against the number of APs.
    DetectDistributed,
    /// All six sweeps.
    ReproduceAll,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum LrtAxis {
    Pilots,
    Snr,
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

struct Sweep {
    name: &'static str,
    var: SweepVar,
    values: Vec<f64>,
    methods: &'static [Method],
}

const MSE_METHODS: &[Method] = &[Method::OracleExact, Method::OracleAsym, Method::SmvTheory, Method::SmvCbamp, Method::MmvAmp];
const LRT_METHODS: &[Method] = &[Method::LrtTheory, Method::LrtEmp];
const CENT_METHODS: &[Method] = &[Method::CentSmv, Method::CentMmv];
const DIST_METHODS: &[Method] = &[Method::DistFusion, Method::DistTheory];

fn pilot_values(scale: Scale) -> Vec<f64> {
    let desk = [25.0, 50.0, 75.0, 100.0, 150.0, 200.0];
    match scale {
        Scale::Desk => desk.to_vec(),
        Scale::Paper => desk.iter().map(|v| 4.0 * v).collect(),
    }
}

fn snr_values() -> Vec<f64> {
    vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0]
}

fn ap_values() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0, 16.0]
}

fn sweep_for(cmd: Command, scale: Scale) -> Vec<Sweep> {
    let mse_pilots = Sweep { name: "mse_vs_pilots", var: SweepVar::Pilots, values: pilot_values(scale), methods: MSE_METHODS };
    let mse_snr = Sweep { name: "mse_vs_snr", var: SweepVar::Snr, values: snr_values(), methods: MSE_METHODS };
    let lrt_pilots = Sweep { name: "lrt_vs_pilots", var: SweepVar::Pilots, values: pilot_values(scale), methods: LRT_METHODS };
    let lrt_snr = Sweep { name: "lrt_vs_snr", var: SweepVar::Snr, values: snr_values(), methods: LRT_METHODS };
    let cent = Sweep { name: "centralized_vs_aps", var: SweepVar::NumAps, values: ap_values(), methods: CENT_METHODS };
    let dist = Sweep { name: "distributed_vs_aps", var: SweepVar::NumAps, values: ap_values(), methods: DIST_METHODS };
    match cmd {
        Command::MsePilots => vec![mse_pilots],
        Command::MseSnr => vec![mse_snr],
        Command::LrtSingle { vs: LrtAxis::Pilots } => vec![lrt_pilots],
        Command::LrtSingle { vs: LrtAxis::Snr } => vec![lrt_snr],
        Command::DetectCentralized => vec![cent],
        Command::DetectDistributed => vec![dist],
        Command::ReproduceAll => vec![mse_pilots, mse_snr, lrt_pilots, lrt_snr, cent, dist],
        Command::FixedPoint | Command::OracleAsym => Vec::new(),
    }
}

fn load_config(common: &Common) -> Result<(RunConfig, Scale)> {
    let scale = if common.paper_scale { Scale::Paper } else { Scale::Desk };
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::from(e).context(format!("reading {}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = common.trials {
        overrides.push(("trials".into(), t.to_string()));
    }
    let mut cfg = RunConfig::load(scale, &text, &overrides)?;
    if let Some(v) = &common.values {
        cfg.values = Some(v.clone());
    }
    Ok((cfg, scale))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).context(format!("creating {}", path.display())))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn print_rows(name: &str, rows: &[ResultRow]) {
    println!("{name}");
    println!("  {:<12} {:>12} {:>14} {:>12}", "method", "value", "metric", "stderr");
    for r in rows {
        println!("  {:<12} {:>12} {:>14.6e} {:>12.3e}", r.method.to_string(), r.sweep_value, r.metric, r.stderr);
    }
}

fn fixed_point(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = cfg.params();
    let bd = BetaDistribution::from_params(&p)?;
    let solver = default_solver_config();
    let se = solve_state_evolution(p.activity_prob, p.gamma(), p.noise_var, &bd, &solver)?;
    let p1 = solve_property1(p.activity_prob, p.gamma(), p.noise_var, &bd, &solver)?;
    let snr = cfg.snr_reference.snr_db(p.noise_var, p.pathloss_exp, p.ref_dist);
    let mut csv = String::from("lambda,gamma,snr_db,sigma_eff_sq,method,iters,residual\n");
    let mut line = |e: &EffectiveNoise| {
        csv.push_str(&format!("{:e},{:e},{:e},{:e},{},{},{:e}\n", p.activity_prob, p.gamma(), snr, e.sigma_eff_sq, e.method, e.iters, e.residual));
        println!("{}: sigma_eff^2 = {:.6e} ({} iterations, residual {:.2e})", e.method, e.sigma_eff_sq, e.iters, e.residual);
        if e.ambiguous {
            println!("  warning: ambiguous fixed point, alternate solution {:.6e}", e.alternate.unwrap_or(f64::NAN));
        }
    };
    println!("lambda = {}, gamma = {}, SNR = {snr:.2} dB, sigma0^2 = {:.6e}", p.activity_prob, p.gamma(), p.noise_var);
    line(&se);
    line(&p1);
    let path = out.join("fixed_point.csv");
    write_text(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn oracle_asym(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = cfg.params();
    let bd = BetaDistribution::from_params(&p)?;
    let o = oracle_mse_asymptotic(p.activity_prob, p.gamma(), p.noise_var, &bd)?;
    let snr = cfg.snr_reference.snr_db(p.noise_var, p.pathloss_exp, p.ref_dist);
    let csv = format!("lambda,gamma,snr_db,varsigma,mse\n{:e},{:e},{:e},{:e},{:e}\n", p.activity_prob, p.gamma(), snr, o.varsigma, o.mse);
    println!("lambda = {}, gamma = {}, SNR = {snr:.2} dB: varsigma = {:.6e}, oracle MSE = {:.6e}", p.activity_prob, p.gamma(), o.varsigma, o.mse);
    let path = out.join("oracle_asym.csv");
    write_text(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_sweeps(cmd: Command, cfg: &RunConfig, scale: Scale, out: &Path) -> Result<()> {
    let sweeps = sweep_for(cmd, scale);
    let all = matches!(cmd, Command::ReproduceAll);
    if all && (cfg.values.is_some() || cfg.methods.is_some() || cfg.sweep.is_some()) {
        return Err(Error::Config {
            key: "values".into(),
            reason: "reproduce-all uses fixed sweeps; values, methods and sweep cannot be set".into(),
        });
    }
    for s in sweeps {
        let spec: SweepSpec = cfg.sweep_spec(s.var, &s.values, s.methods)?;
        let rows = run_sweep(&spec).map_err(|e| e.context(s.name))?;
        let csv = out.join(format!("{}.csv", s.name));
        emit_csv(&rows, &csv)?;
        write_text(&out.join(format!("{}.json", s.name)), &summary_json(&spec, &rows)?)?;
        print_rows(s.name, &rows);
        println!("wrote {}", csv.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config { key: "threads".into(), reason: e.to_string() })?;
    }
    let (cfg, scale) = load_config(&cli.common)?;
    create_out(&cli.common.out)?;
    match cli.command {
        Command::FixedPoint => fixed_point(&cfg, &cli.common.out),
        Command::OracleAsym => oracle_asym(&cfg, &cli.common.out),
        cmd => run_sweeps(cmd, &cfg, scale, &cli.common.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
