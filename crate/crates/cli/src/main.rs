mod config;
mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Parser;
use serde_json::json;

use config::{Config, Experiment, KernelName};

/// Config-driven studies of chaos rough lifts, Malliavin RDEs and greedy tails.
#[derive(Parser, Debug)]
#[command(name = "chaosrough", version)]
struct Cli {
    experiment: Experiment,
    /// JSON config; every field is optional and flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; sample `i` of component `j` uses its own stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Output directory for manifest.json, results.csv and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    kernel: Option<KernelName>,
    /// Chaos order of the kernel.
    #[arg(long)]
    order: Option<usize>,
    /// Dyadic grid level.
    #[arg(long)]
    level: Option<u32>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

impl Cli {
    fn config(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(samples => samples);
        set!(out => out);
        set!(kernel => kernel.name);
        set!(level => kernel.level);
        set!(p => p);
        set!(rho => rho);
        set!(alpha => alpha);
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        if self.order.is_some() {
            c.kernel.order = self.order;
        }
        c.resolve(self.experiment)
    }
}

fn write_artifacts(cfg: &Config, out: &experiments::Outcome, wall: f64, threads: usize) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let experiment = cfg.experiment.expect("resolved").name();
    let passed = out.assertions.iter().all(|a| a.passed);
    let manifest = json!({
        "experiment": experiment,
        "config": cfg,
        "versions": {
            "chaosrough": chaosrough::VERSION,
            "cli": env!("CARGO_PKG_VERSION"),
        },
        "threads": threads,
        "wall_time_s": wall,
        "anchors": out.anchors,
        "assertions": out.assertions,
        "passed": passed,
        "files": ["results.csv", "report.json"],
    });
    // Wall time and thread count stay out of the result files so reruns are byte-identical.
    let report =
        json!({ "experiment": experiment, "passed": passed, "assertions": out.assertions, "report": out.report });
    std::fs::write(cfg.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    std::fs::write(cfg.out.join("results.csv"), &out.csv)?;
    std::fs::write(cfg.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}

/// `Ok(false)` when an assertion failed.
fn run(cli: &Cli) -> Result<bool> {
    let cfg = cli.config()?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = cfg.threads {
            b = b.num_threads(t);
        }
        b.build().context("building worker pool")?
    };
    let start = Instant::now();
    let kernel = cfg.build_kernel()?;
    let outcome = pool.install(|| experiments::run(&cfg, &kernel))?;
    let wall = start.elapsed().as_secs_f64();
    write_artifacts(&cfg, &outcome, wall, pool.current_num_threads())?;
    for a in &outcome.assertions {
        println!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    println!("wrote {} in {wall:.2}s", cfg.out.display());
    Ok(outcome.assertions.iter().all(|a| a.passed))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
