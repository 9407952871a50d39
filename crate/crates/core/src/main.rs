use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use active_vtr::harness::{self, ExperimentSpec, PhaseRecord, RunRecord, OUTPUT_ENV};
use active_vtr::planners::PanTiltGrid;
use active_vtr::vtr::{self, Phase};
use active_vtr::{Error, Fidelity, PlannerKind, Result};

#[derive(Parser)]
#[command(name = "active-vtr", version, about = "Active pan-tilt view planning in a simulated visual teach-and-repeat loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Teach one path and write its trajectory and inlier series.
    Teach(RunArgs),
    /// Teach, then repeat on the frozen map.
    Repeat(RunArgs),
    /// Seeded teach-and-repeat grid over scenarios, planners and seeds.
    Batch(BatchArgs),
    /// Planner timing at several map sizes.
    Bench(BenchArgs),
    /// Recompute CR and AP-RMSE from the trajectories of a finished batch.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct Common {
    /// Preset name (path1..path4) or scenario TOML file.
    #[arg(long, default_value = "path1")]
    scenario: String,
    #[arg(long, default_value_t = Fidelity::Ideal)]
    fidelity: Fidelity,
    #[arg(long, env = OUTPUT_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = PlannerKind::Flaf)]
    planner: PlannerKind,
    /// Overrides the scenario's rng_seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BatchArgs {
    /// Preset names or scenario files, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "path1,path2,path3,path4")]
    scenario: Vec<String>,
    /// Planners, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "passive,udvp,flaf_noscore,flaf")]
    planner: Vec<PlannerKind>,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// First seed; run k uses seed + k.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = Fidelity::Ideal)]
    fidelity: Fidelity,
    #[arg(long, env = OUTPUT_ENV, default_value = "out")]
    out: PathBuf,
    /// Record planner wall time (makes the CSV files machine dependent).
    #[arg(long)]
    time: bool,
    /// Batch worker threads, 0 for one per core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1000,5000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Grid step in degrees.
    #[arg(long, default_value_t = 2.0)]
    step: f64,
    #[arg(long, env = OUTPUT_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long, env = OUTPUT_ENV, default_value = "out")]
    out: PathBuf,
}

fn describe(label: &str, p: &PhaseRecord) {
    info!(
        "{label}: {} cr {:.2}% mean inliers {:.1}{}{}",
        if p.completed { "completed" } else { "failed" },
        100.0 * p.completion_rate,
        p.mean_inliers,
        p.failure_cause.map(|c| format!(" cause {}", c.as_str())).unwrap_or_default(),
        p.ap_rmse.filter(|_| p.phase == Phase::Repeat).map(|e| format!(" ap-rmse {e:.4} m")).unwrap_or_default(),
    );
}

fn write_phase(out: &Path, record: &RunRecord, p: &PhaseRecord) -> Result<()> {
    fs::create_dir_all(out)?;
    let file = out.join(format!("{}.tum", record.stem(p.phase)));
    vtr::write_tum(&file, &p.trajectory)?;
    harness::write_steps_csv(&out.join(format!("{}_steps.csv", record.stem(p.phase))), p)?;
    info!("wrote {}", file.display());
    Ok(())
}

fn single(args: &RunArgs, with_repeat: bool) -> Result<bool> {
    let scenario = harness::load_scenario(&args.common.scenario)?;
    let seed = args.seed.unwrap_or(scenario.rng_seed);
    let mut record = harness::run_one(&scenario, args.planner, seed, args.common.fidelity)?;
    if !with_repeat {
        record.repeat = None;
    }
    describe("teach", &record.teach);
    write_phase(&args.common.out, &record, &record.teach)?;
    if !with_repeat {
        return Ok(record.teach.completed);
    }
    match &record.repeat {
        Some(r) => {
            describe("repeat", r);
            write_phase(&args.common.out, &record, r)?;
            Ok(r.completed)
        }
        None => {
            warn!("teaching failed, nothing to repeat");
            Ok(false)
        }
    }
}

fn batch(args: &BatchArgs) -> Result<bool> {
    let spec = ExperimentSpec {
        scenario_paths: args.scenario.clone(),
        planners: args.planner.clone(),
        n_runs: args.runs,
        seed_base: args.seed,
        fidelity: args.fidelity,
        output_dir: args.out.clone(),
        measure_time: args.time,
        jobs: args.jobs,
    };
    let outcome = harness::run_batch(&spec)?;
    println!(
        "{:<8} {:<13} {:>8} {:>8} {:>8} {:>10} {:>10} {:>8}",
        "path", "planner", "teach%", "CR%", "SR%", "time_s", "ap_rmse_m", "inliers"
    );
    for r in &outcome.summary {
        println!(
            "{:<8} {:<13} {:>8.1} {:>8.2} {:>8.1} {:>10} {:>10} {:>8.1}",
            r.path,
            r.planner.as_str(),
            r.teach_sr,
            r.cr_mean,
            r.sr,
            r.time_mean.map(|t| format!("{t:.5}")).unwrap_or_else(|| "-".into()),
            r.ap_rmse_mean.map(|e| format!("{e:.4}")).unwrap_or_else(|| "-".into()),
            r.mean_inliers,
        );
    }
    Ok(outcome.all_succeeded())
}

fn bench(args: &BenchArgs) -> Result<bool> {
    let grid = PanTiltGrid::with_step_deg(args.step);
    let rows = harness::bench_planners(&args.sizes, &grid, args.reps, args.workers)?;
    fs::create_dir_all(&args.out)?;
    harness::write_bench_csv(&args.out.join("bench.csv"), &rows)?;
    println!("grid: {} samples", grid.len());
    println!("{:<13} {:>7} {:>7} {:>12} {:>12} {:>6}", "planner", "points", "workers", "mean_ms", "std_ms", "equal");
    for r in &rows {
        println!(
            "{:<13} {:>7} {:>7} {:>12.3} {:>12.3} {:>6}",
            r.planner.as_str(),
            r.points,
            r.workers,
            1e3 * r.mean_s,
            1e3 * r.std_s,
            r.matches_serial
        );
    }
    Ok(rows.iter().all(|r| r.matches_serial))
}

fn metrics(args: &MetricsArgs) -> Result<bool> {
    let rows = harness::recompute_metrics(&args.out)?;
    println!("{:<40} {:>8} {:>10}", "run", "CR%", "ap_rmse_m");
    for r in &rows {
        println!("{:<40} {:>8.2} {:>10.4}", r.run, 100.0 * r.cr, r.ap_rmse);
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Teach(a) => single(a, false),
        Command::Repeat(a) => single(a, true),
        Command::Batch(a) => batch(a),
        Command::Bench(a) => bench(a),
        Command::Metrics(a) => metrics(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ (Error::Config(_) | Error::Parse { .. } | Error::InvalidScenario(_))) => {
            error!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
