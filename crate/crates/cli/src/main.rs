use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mosaic_sim::engine::{self, workload::profile_library, Mode, RunConfig};
use mosaic_sim::paging::PagingMode;
use mosaic_sim::suite::{self, Baseline, SuiteSpec};
use mosaic_sim::Error;

#[derive(Parser)]
#[command(name = "mosaic", version, about = "GPU memory manager simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation and print its summary.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// gpu_mmu, mosaic or ideal
        #[arg(long)]
        mode: Option<String>,
        /// prefault, demand_base or demand_large
        #[arg(long)]
        paging: Option<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Also write the per-interval CSV here.
        #[arg(long)]
        intervals: Option<PathBuf>,
    },
    /// Run a sweep and write runs.csv and aggregate.csv.
    Suite {
        suite: PathBuf,
        /// Overrides the suite's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
        /// gpu_mmu or gpu_mmu_prefault
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Recompute the aggregate table from a runs.csv.
    Aggregate { runs: PathBuf },
    /// Print the default run configuration.
    DefaultConfig,
    /// List the built-in application profiles.
    Profiles,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    mode: Option<String>,
    paging: Option<String>,
    format: Format,
    intervals: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = RunConfig::from_toml(&read(config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if let Some(p) = paging {
        cfg.paging = p.parse::<PagingMode>()?;
    }
    cfg.validate()?;
    let m = engine::run(&cfg)?;
    if let Some(p) = intervals {
        fs::write(&p, m.interval_csv()).with_context(|| format!("cannot write {}", p.display()))?;
    }
    match format {
        Format::Csv => print!("{}", m.summary_csv()),
        Format::Json => println!("{}", serde_json::to_string_pretty(&m)?),
    }
    Ok(())
}

fn cmd_suite(path: &Path, out: Option<PathBuf>, jobs: usize, baseline: Option<String>, format: Format) -> Result<()> {
    let mut spec = SuiteSpec::from_toml(&read(path)?)?;
    if let Some(b) = baseline {
        spec.baseline = b.parse::<Baseline>()?;
    }
    let res = suite::run_suite(&spec, jobs)?;
    if let Some(dir) = out.or(spec.output_dir.clone()) {
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        fs::write(dir.join("runs.csv"), suite::runs_csv(&res.rows))?;
        fs::write(dir.join("aggregate.csv"), suite::aggregate_csv(&res.aggregates))?;
    }
    match format {
        Format::Csv => {
            print!("{}", suite::runs_csv(&res.rows));
            println!();
            print!("{}", suite::aggregate_csv(&res.aggregates));
        }
        Format::Json => println!("{}", serde_json::to_string_pretty(&res)?),
    }
    let failed = res.rows.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", res.rows.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Run {
            config,
            seed,
            mode,
            paging,
            format,
            intervals,
        } => cmd_run(&config, seed, mode, paging, format, intervals),
        Cmd::Suite {
            suite,
            out,
            jobs,
            baseline,
            format,
        } => cmd_suite(&suite, out, jobs, baseline, format),
        Cmd::Aggregate { runs } => read(&runs).and_then(|t| {
            let rows = suite::parse_runs_csv(&t)?;
            print!("{}", suite::aggregate_csv(&suite::aggregate(&rows)));
            Ok(())
        }),
        Cmd::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
        Cmd::Profiles => {
            for p in profile_library() {
                println!("{}", p.name);
            }
            Ok(())
        }
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // 2 for bad input, 1 for anything that went wrong while running
            let bad_input = e.downcast_ref::<mosaic_sim::error::ConfigError>().is_some()
                || matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)))
                || e.downcast_ref::<std::io::Error>().is_some();
            ExitCode::from(if bad_input { 2 } else { 1 })
        }
    }
}
