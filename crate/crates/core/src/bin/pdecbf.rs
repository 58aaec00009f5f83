use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use pdecbf::scenario::{load_scenario, run_scenario, write_outputs, Report, RunOptions, Scenario};
use pdecbf::Error;

#[derive(Parser)]
#[command(name = "pdecbf", version, about = "Safe adaptive boundary control of a PDE-ODE cascade")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run every scenario matching a glob.
    Sweep {
        pattern: String,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Output root; each scenario writes to OUT/<name> (or OUT itself for `run`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Field snapshot stride in steps.
    #[arg(long)]
    stride: Option<usize>,
    /// Treat warnings as failures.
    #[arg(long)]
    strict: bool,
}

#[derive(Serialize)]
struct SweepRow {
    config: PathBuf,
    name: String,
    pass: bool,
    error: Option<String>,
    failed: Vec<String>,
}

fn options(c: &Common) -> Result<RunOptions, Error> {
    if c.stride == Some(0) {
        return Err(Error::Config("--stride must be positive".into()));
    }
    Ok(RunOptions { stride: c.stride, strict: c.strict, skip_residuals: false })
}

fn out_dir(sc: &Scenario, root: Option<&Path>, single: bool) -> PathBuf {
    match (root, single) {
        (Some(r), true) => r.to_path_buf(),
        (Some(r), false) => r.join(&sc.name),
        (None, _) => sc.output.dir.clone().unwrap_or_else(|| PathBuf::from("out").join(&sc.name)),
    }
}

fn print_report(r: &Report, strict: bool) {
    for c in &r.checks {
        let tag = if c.pass {
            "PASS"
        } else if c.warning && !strict {
            "WARN"
        } else {
            "FAIL"
        };
        println!("  {tag} {}: {}", c.name, c.detail);
    }
    println!("{} {}", if r.pass { "PASS" } else { "FAIL" }, r.name);
}

fn run_one(path: &Path, common: &Common, dir: &Path) -> Result<Report, Error> {
    let sc = load_scenario(path)?;
    let out = run_scenario(&sc, &options(common)?)?;
    write_outputs(&out, dir)?;
    Ok(out.report)
}

fn cmd_run(config: &Path, common: &Common) -> Result<bool, Error> {
    let sc = load_scenario(config)?;
    let dir = out_dir(&sc, common.out.as_deref(), true);
    let report = run_one(config, common, &dir)?;
    print_report(&report, common.strict);
    println!("outputs in {}", dir.display());
    Ok(report.pass)
}

fn cmd_sweep(pattern: &str, jobs: usize, common: &Common) -> Result<bool, Error> {
    let mut paths: Vec<PathBuf> =
        glob::glob(pattern).map_err(|e| Error::Config(format!("bad glob {pattern}: {e}")))?.filter_map(|p| p.ok()).collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no scenario matches {pattern}")));
    }
    let mut planned = Vec::new();
    let mut seen: HashMap<PathBuf, PathBuf> = HashMap::new();
    for p in &paths {
        let sc = load_scenario(p)?;
        let dir = out_dir(&sc, common.out.as_deref(), false);
        if let Some(prev) = seen.insert(dir.clone(), p.clone()) {
            return Err(Error::Config(format!("output collision: {} and {} both write to {}", prev.display(), p.display(), dir.display())));
        }
        planned.push((p.clone(), sc.name, dir));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<(PathBuf, String, Result<Report, Error>)> =
        pool.install(|| planned.par_iter().map(|(p, name, dir)| (p.clone(), name.clone(), run_one(p, common, dir))).collect());
    let mut rows = Vec::new();
    for (config, name, res) in results {
        let row = match res {
            Ok(r) => {
                print_report(&r, common.strict);
                let failed = r.checks.iter().filter(|c| !c.pass && !(c.warning && !common.strict)).map(|c| c.name.clone()).collect();
                SweepRow { config, name, pass: r.pass, error: None, failed }
            }
            Err(e) => {
                println!("FAIL {name}: {e}");
                SweepRow { config, name, pass: false, error: Some(e.to_string()), failed: vec![] }
            }
        };
        rows.push(row);
    }
    let passed = rows.iter().filter(|r| r.pass).count();
    println!("{passed}/{} scenarios passed", rows.len());
    let root = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&root)?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(root.join("sweep.json"), json)?;
    Ok(passed == rows.len())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Run { config, common } => cmd_run(config, common),
        Command::Sweep { pattern, jobs, common } => cmd_sweep(pattern, *jobs, common),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
