use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use viscofrac_core::sim_driver::{self, Severity, SimConfig, SimOutput};

#[derive(Parser)]
#[command(name = "viscofrac", version, about = "Phase-field fracture in nonlinear Kelvin-Voigt solids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a parameter, e.g. `--param dt=0.005`. Repeatable.
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
        /// Output directory; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a configuration without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
    },
    /// Run one simulation per value of a parameter, concurrently.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `KEY=V1,V2,...`, e.g. `n=10,100,1000`.
        #[arg(long)]
        param: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn split_param(raw: &str) -> Result<(&str, &str)> {
    raw.split_once('=').with_context(|| format!("expected KEY=VALUE, got `{raw}`"))
}

fn load(path: &Path, params: &[String]) -> Result<SimConfig> {
    let mut cfg = SimConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    for p in params {
        let (k, v) = split_param(p)?;
        cfg = cfg.set_param(k, v)?;
    }
    Ok(cfg)
}

fn output_dir(cfg: &SimConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("viscofrac_out"))
}

fn report(out: &SimOutput, dir: &Path) {
    let meta = &out.metadata;
    println!(
        "{} steps, {} Newton iterations, worst inequality excess {:e}, max strain {:.6}, outputs in {}",
        meta.steps,
        meta.total_newton_iterations,
        meta.worst_inequality_excess,
        meta.max_strain_norm,
        dir.display()
    );
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, params, out } => {
            let cfg = load(&config, &params)?;
            let dir = output_dir(&cfg, out);
            let result = sim_driver::run(&cfg)?;
            sim_driver::write_outputs(&result, &dir, cfg.output.vtk)?;
            report(&result, &dir);
        }
        Command::Validate { config, params } => {
            let cfg = load(&config, &params)?;
            let v = sim_driver::validate(&cfg)?;
            for f in &v.findings {
                let tag = match f.severity {
                    Severity::Error => "error",
                    Severity::Warning => "warning",
                    Severity::Info => "info",
                };
                println!("{tag}: {}", f.message);
            }
            if !v.safety_strain.is_nan() {
                println!("safety strain C* = {:e}", v.safety_strain);
            }
            if !v.passed() {
                bail!("configuration is invalid");
            }
            println!("configuration is valid");
        }
        Command::Sweep { config, param, out } => {
            let cfg = load(&config, &[])?;
            let (key, values) = split_param(&param)?;
            let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
            let base = output_dir(&cfg, out);
            let mut failed = 0;
            for (value, result) in sim_driver::sweep(&cfg, key, &values) {
                let dir = base.join(format!("{key}_{value}"));
                match result {
                    Ok(res) => {
                        sim_driver::write_outputs(&res, &dir, cfg.output.vtk)?;
                        print!("{key}={value}: ");
                        report(&res, &dir);
                    }
                    Err(e) => {
                        failed += 1;
                        eprintln!("{key}={value}: {e}");
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} of {} runs failed", values.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
