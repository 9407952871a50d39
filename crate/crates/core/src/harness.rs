//! Experiment batches, planner benchmarks, preset scenarios and result export.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PanTilt, Pose3, PtuModel};
use crate::observation::Perception;
use crate::planners::{PanTiltGrid, PlanInput, Planner, PlannerKind};
use crate::vtr::{self, ap_rmse, FailureCause, Fidelity, Phase, RunResult, TimedPose};
use crate::world::{MapPoint, Scenario};

/// Shipped scenarios, addressable by name wherever a scenario path is accepted.
pub const PRESETS: [(&str, &str); 4] = [
    ("path1", include_str!("../presets/path1.toml")),
    ("path2", include_str!("../presets/path2.toml")),
    ("path3", include_str!("../presets/path3.toml")),
    ("path4", include_str!("../presets/path4.toml")),
];

/// Environment variable overriding the default output directory.
pub const OUTPUT_ENV: &str = "ACTIVE_VTR_OUT";

pub fn preset(name: &str) -> Result<Scenario> {
    let (label, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
    let mut scenario = Scenario::from_toml_str(text, &format!("preset {label}"))?;
    if scenario.name.is_empty() {
        scenario.name = label.to_string();
    }
    Ok(scenario)
}

/// Loads a preset by name or a scenario file by path.
pub fn load_scenario(source: &str) -> Result<Scenario> {
    if PRESETS.iter().any(|(n, _)| *n == source) {
        return preset(source);
    }
    let path = Path::new(source);
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read scenario {source}: {e}")))?;
    let mut scenario = Scenario::from_toml_str(&text, source)?;
    if scenario.name.is_empty() {
        scenario.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into());
    }
    Ok(scenario)
}

/// One seeded experiment grid: every scenario × planner × seed is taught and
/// then repeated.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub scenario_paths: Vec<String>,
    pub planners: Vec<PlannerKind>,
    pub n_runs: usize,
    /// Run `k` uses `rng_seed = seed_base + k`.
    pub seed_base: u64,
    pub fidelity: Fidelity,
    pub output_dir: PathBuf,
    /// Record planner wall time. Off keeps every CSV byte-stable.
    pub measure_time: bool,
    /// Batch worker threads; 0 picks the rayon default.
    pub jobs: usize,
}

impl ExperimentSpec {
    pub fn new(scenario_paths: Vec<String>, planners: Vec<PlannerKind>, n_runs: usize) -> Self {
        Self {
            scenario_paths,
            planners,
            n_runs,
            seed_base: 0,
            fidelity: Fidelity::Ideal,
            output_dir: PathBuf::from("out"),
            measure_time: false,
            jobs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario_paths.is_empty() {
            return Err(Error::Config("no scenario given".into()));
        }
        if self.planners.is_empty() {
            return Err(Error::Config("no planner given".into()));
        }
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one teach or repeat phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub completed: bool,
    pub completion_rate: f64,
    pub failure_cause: Option<FailureCause>,
    pub ap_rmse: Option<f64>,
    pub planner_time_mean: f64,
    pub planner_calls: usize,
    pub mean_inliers: f64,
    pub inlier_series: Vec<usize>,
    pub tracking_series: Vec<bool>,
    pub ptu_series: Vec<PanTilt>,
    pub trajectory: Vec<TimedPose>,
}

impl PhaseRecord {
    fn from_run(run: RunResult, ap_rmse: Option<f64>) -> Self {
        Self {
            phase: run.phase,
            completed: run.completed,
            completion_rate: run.completion_rate,
            failure_cause: run.failure_cause,
            ap_rmse,
            planner_time_mean: run.planner_time_mean,
            planner_calls: run.planner_calls,
            mean_inliers: run.mean_inliers(),
            tracking_series: run.steps.iter().map(|s| s.tracking).collect(),
            ptu_series: run.steps.iter().map(|s| s.ptu_angles).collect(),
            inlier_series: run.inlier_series,
            trajectory: run.trajectory,
        }
    }
}

/// Teach plus (when teaching succeeded) repeat for one path, planner and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub path: String,
    pub planner: PlannerKind,
    pub seed: u64,
    pub teach: PhaseRecord,
    pub repeat: Option<PhaseRecord>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.repeat.as_ref().is_some_and(|r| r.completed)
    }

    /// Repeat completion rate, 0 when teaching failed.
    pub fn repeat_cr(&self) -> f64 {
        self.repeat.as_ref().map_or(0.0, |r| r.completion_rate)
    }

    /// File stem shared by every per-run output.
    pub fn stem(&self, phase: Phase) -> String {
        format!("{}_{}_s{}_{}", self.path, self.planner, self.seed, phase.as_str())
    }
}

/// Teaches and repeats one scenario with `rng_seed` replaced by `seed`.
pub fn run_one(scenario: &Scenario, kind: PlannerKind, seed: u64, fidelity: Fidelity) -> Result<RunRecord> {
    let mut scenario = scenario.clone();
    scenario.rng_seed = seed;
    let (taught, teach) = vtr::teach(&scenario, kind, fidelity)?;
    debug!(
        "{} {} seed {}: teach {} ({} keyframes, {} map points)",
        scenario.name,
        kind,
        seed,
        if teach.completed { "completed" } else { "failed" },
        taught.keyframes.len(),
        taught.map_points.len()
    );
    let repeat = if teach.completed {
        let run = vtr::repeat(&taught, &scenario, kind, fidelity)?;
        let err = ap_rmse(&run.trajectory, &taught.trajectory).ok();
        Some(PhaseRecord::from_run(run, err))
    } else {
        None
    };
    Ok(RunRecord {
        path: scenario.name.clone(),
        planner: kind,
        seed,
        teach: PhaseRecord::from_run(teach, Some(0.0)),
        repeat,
    })
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs the full grid in memory and returns the records in
/// (scenario, planner, seed) order. `sink` sees every record before its
/// trajectories are dropped.
pub fn run_grid<F>(spec: &ExperimentSpec, keep_trajectories: bool, sink: F) -> Result<Vec<RunRecord>>
where
    F: Fn(&RunRecord) -> Result<()> + Sync,
{
    spec.validate()?;
    let scenarios = spec
        .scenario_paths
        .iter()
        .map(|s| load_scenario(s))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for (si, _) in scenarios.iter().enumerate() {
        for (pi, &kind) in spec.planners.iter().enumerate() {
            for k in 0..spec.n_runs {
                jobs.push((si, pi, kind, spec.seed_base + k as u64));
            }
        }
    }
    let mut results = with_pool(spec.jobs, || {
        jobs.par_iter()
            .map(|&(si, pi, kind, seed)| {
                let mut record = run_one(&scenarios[si], kind, seed, spec.fidelity)?;
                if !spec.measure_time {
                    record.teach.planner_time_mean = 0.0;
                    if let Some(r) = record.repeat.as_mut() {
                        r.planner_time_mean = 0.0;
                    }
                }
                sink(&record)?;
                if !keep_trajectories {
                    record.teach.trajectory = Vec::new();
                    if let Some(r) = record.repeat.as_mut() {
                        r.trajectory = Vec::new();
                    }
                }
                Ok(((si, pi, seed), record))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    results.sort_by_key(|r| r.0);
    Ok(results.into_iter().map(|(_, r)| r).collect())
}

/// Aggregate of one (path, planner) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub path: String,
    pub planner: PlannerKind,
    /// Share of seeds whose teaching completed, percent.
    pub teach_sr: f64,
    /// Mean repeat completion rate, percent; failed teaching counts as 0.
    pub cr_mean: f64,
    pub sr: f64,
    pub time_mean: Option<f64>,
    pub ap_rmse_mean: Option<f64>,
    pub mean_inliers: f64,
    pub n_runs: usize,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Reduces records to one row per (path, planner), in order of first
/// appearance.
pub fn summarize(records: &[RunRecord], measured: bool) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, PlannerKind)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(p, k)| *p == r.path && *k == r.planner) {
            keys.push((r.path.clone(), r.planner));
        }
    }
    keys.into_iter()
        .map(|(path, planner)| {
            let cell: Vec<&RunRecord> = records.iter().filter(|r| r.path == path && r.planner == planner).collect();
            let n = cell.len();
            let pct = |count: usize| 100.0 * count as f64 / n as f64;
            let repeats: Vec<&PhaseRecord> = cell.iter().filter_map(|r| r.repeat.as_ref()).collect();
            let times: Vec<f64> = cell
                .iter()
                .flat_map(|r| std::iter::once(&r.teach).chain(r.repeat.as_ref()))
                .filter(|p| p.planner_calls > 0)
                .map(|p| p.planner_time_mean)
                .collect();
            let errors: Vec<f64> = repeats.iter().filter_map(|r| r.ap_rmse).collect();
            let inliers: Vec<f64> = repeats.iter().map(|r| r.mean_inliers).collect();
            SummaryRow {
                path,
                planner,
                teach_sr: pct(cell.iter().filter(|r| r.teach.completed).count()),
                cr_mean: 100.0 * cell.iter().map(|r| r.repeat_cr()).sum::<f64>() / n as f64,
                sr: pct(cell.iter().filter(|r| r.succeeded()).count()),
                time_mean: if measured && planner != PlannerKind::Passive { mean(&times) } else { None },
                ap_rmse_mean: mean(&errors),
                mean_inliers: mean(&inliers).unwrap_or(0.0),
                n_runs: n,
            }
        })
        .collect()
}

fn opt(value: Option<f64>, digits: usize) -> String {
    value.map(|v| format!("{v:.digits$}")).unwrap_or_default()
}

pub fn write_runs_csv(path: &Path, records: &[RunRecord], measured: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "path",
        "planner",
        "seed",
        "phase",
        "completed",
        "cr",
        "ap_rmse_m",
        "planner_time_s",
        "mean_inliers",
    ])?;
    for r in records {
        for p in std::iter::once(&r.teach).chain(r.repeat.as_ref()) {
            let time = (measured && p.planner_calls > 0).then_some(p.planner_time_mean);
            w.write_record([
                r.path.clone(),
                r.planner.to_string(),
                r.seed.to_string(),
                p.phase.as_str().to_string(),
                p.completed.to_string(),
                format!("{:.6}", p.completion_rate),
                opt(p.ap_rmse, 6),
                opt(time, 6),
                format!("{:.3}", p.mean_inliers),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "path",
        "planner",
        "teach_sr_pct",
        "cr_mean_pct",
        "sr_pct",
        "time_mean_s",
        "ap_rmse_mean_m",
        "mean_inliers",
        "n_runs",
    ])?;
    for r in rows {
        w.write_record([
            r.path.clone(),
            r.planner.to_string(),
            format!("{:.2}", r.teach_sr),
            format!("{:.2}", r.cr_mean),
            format!("{:.2}", r.sr),
            opt(r.time_mean, 6),
            opt(r.ap_rmse_mean, 6),
            format!("{:.3}", r.mean_inliers),
            r.n_runs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step series: pose, PTU angles, inlier count and tracking flag.
pub fn write_steps_csv(path: &Path, record: &PhaseRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "t", "x", "y", "heading_deg", "pan_deg", "tilt_deg", "inliers", "tracking"])?;
    for (k, pose) in record.trajectory.iter().enumerate() {
        let (x, y, th) = pose.pose.planar();
        let q = record.ptu_series.get(k).copied().unwrap_or_default();
        w.write_record([
            k.to_string(),
            format!("{:.6}", pose.t),
            format!("{x:.6}"),
            format!("{y:.6}"),
            format!("{:.4}", th.to_degrees()),
            format!("{:.4}", q.pan.to_degrees()),
            format!("{:.4}", q.tilt.to_degrees()),
            record.inlier_series.get(k).copied().unwrap_or(0).to_string(),
            u8::from(record.tracking_series.get(k).copied().unwrap_or(false)).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_run_files(dir: &Path, record: &RunRecord) -> Result<()> {
    for p in std::iter::once(&record.teach).chain(record.repeat.as_ref()) {
        let stem = record.stem(p.phase);
        vtr::write_tum(&dir.join("trajectories").join(format!("{stem}.tum")), &p.trajectory)?;
        write_steps_csv(&dir.join("inliers").join(format!("{stem}.csv")), p)?;
    }
    Ok(())
}

/// Everything a batch produced.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

impl BatchOutcome {
    /// True when every taught path was also repeated to completion.
    pub fn all_succeeded(&self) -> bool {
        self.records.iter().all(RunRecord::succeeded)
    }
}

/// Runs the grid and writes `runs.csv`, `summary.csv`, `trajectories/*.tum`
/// and `inliers/*.csv` below the output directory.
pub fn run_batch(spec: &ExperimentSpec) -> Result<BatchOutcome> {
    spec.validate()?;
    let dir = &spec.output_dir;
    fs::create_dir_all(dir.join("trajectories"))?;
    fs::create_dir_all(dir.join("inliers"))?;
    let started = Instant::now();
    let records = run_grid(spec, false, |record| write_run_files(dir, record))?;
    let summary = summarize(&records, spec.measure_time);
    write_runs_csv(&dir.join("runs.csv"), &records, spec.measure_time)?;
    write_summary_csv(&dir.join("summary.csv"), &summary)?;
    info!(
        "{} runs finished in {:.1} s, results in {}",
        records.len(),
        started.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(BatchOutcome { records, summary })
}

/// CR and AP-RMSE recomputed from the trajectory files of a finished batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub cr: f64,
    pub ap_rmse: f64,
}

/// Pairs every `*_repeat.tum` with its `*_teach.tum` and recomputes the
/// repeat metrics. Writes `metrics.csv` next to the trajectories folder.
pub fn recompute_metrics(output_dir: &Path) -> Result<Vec<MetricsRow>> {
    let traj_dir = output_dir.join("trajectories");
    let mut names: Vec<String> = fs::read_dir(&traj_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with("_repeat.tum"))
        .collect();
    names.sort();
    let tolerance = vtr::ControllerConfig::default().goal_tolerance;
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let run = name.trim_end_matches("_repeat.tum").to_string();
        let taught = vtr::read_tum(&traj_dir.join(format!("{run}_teach.tum")))?;
        let repeated = vtr::read_tum(&traj_dir.join(&name))?;
        let poses: Vec<Pose3> = taught.iter().map(|p| p.pose).collect();
        rows.push(MetricsRow {
            cr: if reached_goal(&repeated, &poses, tolerance) { 1.0 } else { vtr::completion_rate(&repeated, &poses)? },
            ap_rmse: ap_rmse(&repeated, &taught)?,
            run,
        });
    }
    let mut w = csv::Writer::from_path(output_dir.join("metrics.csv"))?;
    w.write_record(["run", "cr", "ap_rmse_m"])?;
    for r in &rows {
        w.write_record([r.run.clone(), format!("{:.6}", r.cr), format!("{:.6}", r.ap_rmse)])?;
    }
    w.flush()?;
    Ok(rows)
}

/// A repeat that ended within the goal tolerance counts as complete.
fn reached_goal(repeated: &[TimedPose], taught: &[Pose3], tolerance: f64) -> bool {
    match (repeated.last(), taught.last()) {
        (Some(r), Some(goal)) => {
            let d = r.pose.translation - goal.translation;
            d.x.hypot(d.y) < tolerance
        }
        _ => false,
    }
}

/// Timing of one planner at one map size.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub planner: PlannerKind,
    pub points: usize,
    pub workers: usize,
    pub reps: usize,
    pub mean_s: f64,
    pub std_s: f64,
    /// Argmax and full score grid equal the single-worker result.
    pub matches_serial: bool,
}

/// Random map points in front of a robot at the origin, all facing it.
pub fn bench_scene(n: usize, seed: u64) -> Vec<MapPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eye = Vector3::new(0.0, 0.0, 0.5);
    (0..n)
        .map(|id| {
            let bearing: f64 = rng.random_range(-1.2..1.2);
            let range: f64 = rng.random_range(1.0..8.0);
            let position = Vector3::new(
                range * bearing.cos(),
                range * bearing.sin(),
                rng.random_range(0.0..2.5),
            );
            let jitter = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.3..0.3),
            );
            MapPoint {
                id,
                position,
                mean_view_dir: ((eye - position).normalize() + jitter).normalize(),
                d1: 0.5,
                d2: 12.0,
                observing_keyframes: Default::default(),
                scene_point_id: id,
                wall_id: None,
            }
        })
        .collect()
}

fn stats(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean and spread of planner wall time per map size, single-worker and with
/// `workers` threads. Passive is omitted since it does no work.
pub fn bench_planners(sizes: &[usize], grid: &PanTiltGrid, reps: usize, workers: usize) -> Result<Vec<BenchRow>> {
    if reps == 0 {
        return Err(Error::Config("bench needs at least one repetition".into()));
    }
    let walls = [];
    let perception = Perception::new(CameraIntrinsics::default(), &walls);
    let ptu = PtuModel::default();
    let robot = Pose3::from_planar(0.0, 0.0, 0.0, 0.5);
    let input = PlanInput {
        perception: &perception,
        ptu: &ptu,
        robot_pose: &robot,
        current: PanTilt::zero(),
    };
    let mut rows = Vec::new();
    for &size in sizes {
        let points = bench_scene(size, size as u64);
        let refs: Vec<&MapPoint> = points.iter().collect();
        for kind in [PlannerKind::Flaf, PlannerKind::FlafNoscore, PlannerKind::Udvp] {
            let serial = Planner::new(kind, *grid, 10.0);
            let reference = serial.plan(&input, &refs);
            let mut configs = vec![(1usize, serial)];
            if workers > 1 {
                configs.push((workers, Planner::new(kind, *grid, 10.0).with_workers(workers)));
            }
            for (w, planner) in configs {
                let mut times = Vec::with_capacity(reps);
                let mut same = true;
                for _ in 0..reps {
                    let r = planner.plan(&input, &refs);
                    times.push(r.elapsed);
                    same &= r.best == reference.best && r.best_index == reference.best_index && r.scores == reference.scores;
                }
                let (mean_s, std_s) = stats(&times);
                rows.push(BenchRow {
                    planner: kind,
                    points: size,
                    workers: w,
                    reps,
                    mean_s,
                    std_s,
                    matches_serial: same,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["planner", "points", "workers", "reps", "mean_s", "std_s", "matches_serial"])?;
    for r in rows {
        w.write_record([
            r.planner.to_string(),
            r.points.to_string(),
            r.workers.to_string(),
            r.reps.to_string(),
            format!("{:.9}", r.mean_s),
            format!("{:.9}", r.std_s),
            r.matches_serial.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
