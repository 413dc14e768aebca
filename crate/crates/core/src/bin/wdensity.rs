use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use wiener_density::density::MethodTag;
use wiener_density::experiment::{
    emit_outputs, run_experiment_with_threads, ExperimentConfig, Preset,
};
use wiener_density::volterra::{c_h_constant, kernel_identity_suite};
use wiener_density::Error;

#[derive(Parser)]
#[command(name = "wdensity", version, about = "Malliavin-calculus density estimation with Gaussian envelope checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config and write CSV/JSON outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; results do not depend on this.
        #[arg(long, env = "WDENSITY_THREADS")]
        threads: Option<usize>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check int_0^t K_H(t,s)^2 ds = t^{2H} and print c_H.
    ValidateKernel {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.6, 0.75, 0.9])]
        hurst: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0])]
        times: Vec<f64>,
        #[arg(long, default_value_t = 512)]
        cells: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Linear preset: Nourdin-Viens density against the exact Gaussian.
    GaussianSanity {
        #[arg(long, default_value_t = 50_000)]
        n_paths: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        tol: f64,
        #[arg(long, env = "WDENSITY_THREADS")]
        threads: Option<usize>,
        /// Also write the full outputs here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the model presets.
    Presets,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn fail(err: &Error, out: Option<&Path>) -> ExitCode {
    let rec = ErrorRecord {
        error: err.kind(),
        message: err.to_string(),
        exit_code: err.exit_code(),
    };
    let json = serde_json::to_string_pretty(&rec).unwrap_or_default();
    eprintln!("{json}");
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), format!("{json}\n"));
        }
    }
    ExitCode::from(err.exit_code() as u8)
}

fn run(config: &Path, out: &Path, threads: Option<usize>, seed: Option<u64>) -> Result<i32, Error> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let start = Instant::now();
    let report = run_experiment_with_threads(&cfg, threads)?;
    let paths = emit_outputs(&report, out)?;
    for (stage, secs) in &report.timings {
        eprintln!("{stage}: {secs:.2}s");
    }
    eprintln!("total: {:.2}s", start.elapsed().as_secs_f64());
    for a in &report.audits {
        println!(
            "audit {:<24} {} checked={} violations={}",
            serde_json::to_string(&a.id).unwrap_or_default().trim_matches('"'),
            if a.passed() { "pass" } else { "FAIL" },
            a.checked,
            a.violations
        );
    }
    for c in &report.checks {
        println!(
            "envelope {:<14} {} checked={} violations={}",
            c.report.method.as_str(),
            if c.report.passed() { "pass" } else { "FAIL" },
            c.report.checked,
            c.report.violations.len()
        );
    }
    println!("outcome: {:?}; outputs in {}", report.outcome(), paths.density_csv.parent().unwrap_or(out).display());
    Ok(report.exit_code())
}

fn validate_kernel(hurst: &[f64], times: &[f64], cells: usize, tol: f64) -> Result<i32, Error> {
    let start = Instant::now();
    let rows = kernel_identity_suite(hurst, times, cells + 1)?;
    let mut ok = true;
    println!("hurst,t,integral,target,rel_error");
    for r in &rows {
        ok &= r.rel_error <= tol;
        println!("{},{},{:.16e},{:.16e},{:.3e}", r.hurst, r.t, r.integral, r.target, r.rel_error);
    }
    for h in hurst {
        println!("c_H({h}) = {:.16e}", c_h_constant(*h)?);
    }
    eprintln!("runtime: {:.2}s", start.elapsed().as_secs_f64());
    Ok(if ok { 0 } else { 2 })
}

fn gaussian_sanity(n_paths: usize, seed: u64, tol: f64, threads: Option<usize>, out: Option<&Path>) -> Result<i32, Error> {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::preset(Preset::Linear, n_paths, seed);
    cfg.x_grid = wiener_density::experiment::GridSpec::Range {
        min: -3.0,
        max: 3.0,
        points: 121,
    };
    let report = run_experiment_with_threads(&cfg, threads)?;
    if let Some(dir) = out {
        emit_outputs(&report, dir)?;
    }
    let nv = report
        .density(MethodTag::NourdinViens)
        .ok_or_else(|| Error::Numerical("no Nourdin-Viens density".into()))?;
    let err = nv
        .x_grid
        .iter()
        .zip(&nv.values)
        .map(|(x, v)| (v - (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
        .fold(0.0, f64::max);
    println!("max |rho_nv - phi| on [-3, 3] = {err:.3e} (tol {tol}), mass {:.6}", nv.mass);
    eprintln!("runtime: {:.2}s", start.elapsed().as_secs_f64());
    Ok(if err <= tol { 0 } else { 2 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (result, out) = match &cli.command {
        Command::Run {
            config,
            out,
            threads,
            seed,
        } => (run(config, out, *threads, *seed), Some(out.as_path())),
        Command::ValidateKernel { hurst, times, cells, tol } => (validate_kernel(hurst, times, *cells, *tol), None),
        Command::GaussianSanity {
            n_paths,
            seed,
            tol,
            threads,
            out,
        } => (gaussian_sanity(*n_paths, *seed, *tol, *threads, out.as_deref()), out.as_deref()),
        Command::Presets => {
            for p in Preset::ALL {
                println!("{:<18} {}", p.name(), p.description());
            }
            (Ok(0), None)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => fail(&e, out),
    }
}
