use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use swingid::harness::{
    default_config_toml, load_config, plan_and_execute, run_checks, run_estimation, run_sweep, run_trial,
    success_check, write_logs, write_sweep, RunLog, TrialConfig,
};

#[derive(Parser)]
#[command(name = "swingid", version, about = "Identify a suspended mass's string length, then plan a swing with it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Excite the rig and estimate the string length.
    Estimate(Common),
    /// Plan the swing at a given length and execute it on the simulated rig.
    Plan {
        #[command(flatten)]
        common: Common,
        /// String length to plan with, m.
        #[arg(long)]
        length: f64,
    },
    /// Estimation followed by planning and execution.
    Trial(Common),
    /// Every initial estimate, with and without estimation.
    Sweep(Common),
    /// Randomized derivative and invariant checks.
    Check {
        #[command(flatten)]
        common: Common,
        /// Random points per check.
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for CSV and JSON logs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plan directly with the initial estimate.
    #[arg(long)]
    no_estimation: bool,
    /// Initial estimate of the string length, m.
    #[arg(long)]
    theta0: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<TrialConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => TrialConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(theta0) = self.theta0 {
            cfg.theta0 = theta0;
        }
        if self.no_estimation {
            cfg.use_estimation = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_csv(log: &RunLog, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    log.write_csv(&dir.join(name))?;
    Ok(())
}

fn estimate(common: &Common) -> Result<bool> {
    let cfg = common.config()?;
    let out = run_estimation(&cfg)?;
    for r in &out.ticks {
        println!("t = {:4.1} s  theta_hat = {:.5} m  beta = {:.3}", r.t, r.theta_hat, r.beta_value);
    }
    println!("final estimate {:.5} m after {} actions", out.theta_final, out.sac_actions);
    if let Some(dir) = &common.out {
        write_csv(&out.log, dir, "estimation.csv")?;
    }
    Ok(true)
}

fn plan(common: &Common, length: f64) -> Result<bool> {
    let cfg = common.config()?;
    let exec = plan_and_execute(&cfg, length)?;
    let m = exec.terminal_mass;
    let success = success_check(&m, &cfg.success);
    println!(
        "plan at {length:.3} m: {} iterations, cost {:.4e}, |DJ.zeta| {:.2e}",
        exec.plan.iterations, exec.plan.cost, exec.plan.slope
    );
    println!(
        "terminal mass x = {:.4} m, z = {:.4} m, speed {:.4} m/s: {}",
        m[0],
        m[1],
        m.fixed_rows::<2>(2).norm(),
        if success { "success" } else { "failure" }
    );
    if let Some(dir) = &common.out {
        write_csv(&exec.plan_log, dir, "plan.csv")?;
        write_csv(&exec.log, dir, "execution.csv")?;
    }
    Ok(success)
}

fn trial(common: &Common) -> Result<bool> {
    let cfg = common.config()?;
    let r = run_trial(&cfg)?;
    println!("initial estimate {:.3} m, final {:.5} m", r.theta0, r.theta_final);
    match (&r.execution, &r.failure) {
        (Some(x), _) => {
            let m = x.terminal_mass;
            println!("terminal mass x = {:.4} m, z = {:.4} m, speed {:.4} m/s", m[0], m[1], m.fixed_rows::<2>(2).norm());
        }
        (None, Some(msg)) => println!("planning failed: {msg}"),
        (None, None) => {}
    }
    println!("{}", if r.success { "success" } else { "failure" });
    if let Some(dir) = &common.out {
        write_logs(&r, dir)?;
    }
    Ok(r.success)
}

fn sweep(common: &Common) -> Result<bool> {
    let cfg = common.config()?;
    let s = run_sweep(&cfg)?;
    println!("{:>8}  {:>10}  {:>10}  {:>10}", "theta0", "estimated", "with", "without");
    let with: Vec<_> = s.column(true).collect();
    let without: Vec<_> = s.column(false).collect();
    let mark = |ok: bool| if ok { "success" } else { "failure" };
    for (a, b) in with.iter().zip(&without) {
        println!("{:8.3}  {:10.5}  {:>10}  {:>10}", a.theta0, a.theta_final, mark(a.success), mark(b.success));
    }
    println!("final estimates: mean {:.5} m, std {:.5} m", s.mean_theta, s.std_theta);
    if let Some(dir) = &common.out {
        write_sweep(&s, dir)?;
    }
    Ok(true)
}

fn check(common: &Common, points: usize) -> Result<bool> {
    let seed = common.config()?.seed;
    let reports = run_checks(seed, points)?;
    for r in &reports {
        println!("{:<18} {}  {}", r.name, if r.passed { "pass" } else { "FAIL" }, r.detail);
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Estimate(c) => estimate(c),
        Command::Plan { common, length } => {
            if !(length.is_finite() && *length > 0.0) {
                bail!("--length must be a positive length in metres");
            }
            plan(common, *length)
        }
        Command::Trial(c) => trial(c),
        Command::Sweep(c) => sweep(c),
        Command::Check { common, points } => check(common, *points),
        Command::DefaultConfig => {
            print!("{}", default_config_toml());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
