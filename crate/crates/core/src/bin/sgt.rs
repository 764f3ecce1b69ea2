use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use sgtorus::config::initial_certificate;
use sgtorus::io::{self, Snapshot};
use sgtorus::oracle;
use sgtorus::stepper::{run_observed, self_convergence, MonitorLimits};
use sgtorus::{RunConfig, SgError};

/// Exit code when the run finished but an asserted monitor failed.
const MONITOR_FAILED: u8 = 20;

#[derive(Parser)]
#[command(name = "sgt", version, about = "Semi-geostrophic flow on the torus with variable Coriolis parameter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration, writing snapshots and monitors.csv.
    Run {
        config: PathBuf,
        /// Overrides the output directory of the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a configuration and print its initial certificates.
    Check { config: PathBuf },
    /// Time-step self-convergence study.
    Convergence {
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        halvings: usize,
        #[arg(long, default_value_t = 1.6)]
        min_ratio: f64,
        #[arg(long, default_value_t = 2.6)]
        max_ratio: f64,
    },
    /// Compare one Monge–Ampère step with the brute-force coupled solve (n ≤ 8).
    Oracle {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Sup and mean differences per array between two snapshots.
    Diff { a: PathBuf, b: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(MONITOR_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("SGT_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| format!("SGT_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn dispatch(cmd: Command) -> sgtorus::Result<bool> {
    match cmd {
        Command::Run { config, out } => run_cmd(&config, out),
        Command::Check { config } => check(&config),
        Command::Convergence {
            config,
            halvings,
            min_ratio,
            max_ratio,
        } => convergence(&config, halvings, min_ratio, max_ratio),
        Command::Oracle { config, tol } => oracle_cmd(&config, tol),
        Command::Diff { a, b } => diff(&a, &b),
    }
}

fn run_cmd(path: &Path, out: Option<PathBuf>) -> sgtorus::Result<bool> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| SgError::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    let initial = cfg.initial_field()?;
    let mut records = Vec::new();
    let result = run_observed(&cfg, |state, record| {
        let snap = Snapshot::from_state(state, &initial)?;
        io::write_snapshot(&snap, &io::snapshot_path(&cfg.out_dir, state.step))?;
        records.push(*record);
        Ok(())
    });
    let traj = match result {
        Ok(traj) => traj,
        Err(e) => {
            io::write_atomic(&cfg.out_dir.join("monitors.csv"), io::monitors_csv(&records).as_bytes())?;
            return Err(e);
        }
    };
    io::write_atomic(&cfg.out_dir.join("monitors.csv"), io::monitors_csv(&traj.records).as_bytes())?;
    let s = &traj.summary;
    println!("steps            {}", s.steps);
    println!("max det_err      {:e}", s.max_det_err);
    println!("min convexity    {:e}", s.min_convexity);
    println!("nu drift         {:e}", s.nu_drift);
    println!("max incr / dt    {:e}", s.max_increment_ratio);
    println!("max round trip   {:e}", s.max_round_trip);
    println!("max mass drift   {:e}", s.max_mass_drift);
    let violations = traj.violations(&MonitorLimits::default());
    for v in &violations {
        println!("FAIL {v}");
    }
    Ok(violations.is_empty())
}

fn check(path: &Path) -> sgtorus::Result<bool> {
    let cfg = RunConfig::from_file(path)?;
    let cert = initial_certificate(&cfg)?;
    println!("model        {}", cfg.model.name());
    println!("n            {}", cfg.n);
    println!(
        "lambda_min   {:e} at ({}, {})",
        cert.lambda_min, cert.lambda_point[0], cert.lambda_point[1]
    );
    println!("c0           {:e}", cert.c0);
    println!("f_min        {:e}", cert.f_min);
    println!("init min     {:e}", cert.init_min);
    println!("init mean    {:e}", cert.init_mean);
    Ok(true)
}

fn convergence(path: &Path, halvings: usize, lo: f64, hi: f64) -> sgtorus::Result<bool> {
    let cfg = RunConfig::from_file(path)?;
    let study = self_convergence(&cfg, halvings)?;
    println!("dt,error,ratio,order");
    for (i, (dt, e)) in study.dts.iter().zip(&study.errors).enumerate() {
        match study.ratios.get(i) {
            Some(r) => println!("{dt:e},{e:e},{r:.4},{:.4}", r.log2()),
            None => println!("{dt:e},{e:e},,"),
        }
    }
    let ok = study.ratios.iter().all(|r| (lo..=hi).contains(r));
    if !ok {
        println!("FAIL ratios outside [{lo}, {hi}]");
    }
    Ok(ok)
}

fn oracle_cmd(path: &Path, tol: f64) -> sgtorus::Result<bool> {
    let cfg = RunConfig::from_file(path)?;
    let cert = initial_certificate(&cfg)?;
    let cor = Arc::new(cfg.coriolis()?);
    let p = cfg.initial_field()?;
    let cmp = oracle::compare(&p, cfg.dt, cfg.model, &cor, &cfg.step_params(cert.c0))?;
    println!("sup |q - q_oracle|   {:e}", cmp.dq);
    println!("sup |z - z_oracle|   {:e}", cmp.dz);
    println!("oracle residual      {:e}", cmp.oracle_residual);
    println!("oracle iterations    {}", cmp.oracle_iterations);
    let ok = cmp.sup() <= tol;
    if !ok {
        println!("FAIL difference above {tol:e}");
    }
    Ok(ok)
}

fn diff(a: &Path, b: &Path) -> sgtorus::Result<bool> {
    let (sa, sb) = (io::read_snapshot(a)?, io::read_snapshot(b)?);
    println!("array,sup,mean");
    for (name, sup, mean) in io::diff(&sa, &sb)? {
        println!("{name},{},{}", io::fmt17(sup), io::fmt17(mean));
    }
    Ok(true)
}
