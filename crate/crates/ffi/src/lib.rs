//! C ABI over the `active-vtr` simulator.
//!
//! Scenarios and finished runs are opaque heap handles owned by the caller and
//! released with their `*_free` function. Every fallible call returns an
//! [`AvtrStatus`]; on failure a message is kept per thread and can be copied
//! out with [`avtr_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::Vector3;

use active_vtr::harness::{self, PhaseRecord, RunRecord};
use active_vtr::observation::Perception;
use active_vtr::planners::{PlanInput, Planner, PlannerConfig};
use active_vtr::vtr::{self, FailureCause};
use active_vtr::world::MapPoint;
use active_vtr::{CameraIntrinsics, Error, Fidelity, PanTilt, PlannerKind, Pose3, PtuModel, Scenario};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvtrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidScenario = 3,
    Io = 4,
    Numeric = 5,
    /// The requested phase was never run (repeat after a failed teach).
    NoData = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvtrPlanner {
    Flaf = 0,
    FlafNoscore = 1,
    Udvp = 2,
    Passive = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvtrFidelity {
    Ideal = 0,
    Noisy = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvtrPhase {
    Teach = 0,
    Repeat = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvtrFailure {
    None = 0,
    TrackingLostTimeout = 1,
    Deviation = 2,
    TeachMapGap = 3,
    Stalled = 4,
}

/// Outcome of one phase of a run.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AvtrPhaseSummary {
    pub completed: bool,
    /// Completion rate in [0, 1].
    pub completion_rate: f64,
    pub mean_inliers: f64,
    /// Absolute position RMSE against the taught trajectory, meters; 0 for
    /// the teach phase itself and NaN when it could not be computed.
    pub ap_rmse: f64,
    pub failure: AvtrFailure,
    pub steps: usize,
}

/// Map point handed to [`avtr_plan`]. Positions are in the world frame.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AvtrMapPoint {
    pub position: [f64; 3],
    /// Unit direction from the point toward its observing cameras.
    pub mean_view_dir: [f64; 3],
    pub d1: f64,
    pub d2: f64,
}

/// Planar robot pose: position, heading in radians and mount height.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AvtrPose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub height: f64,
}

/// Pan and tilt, radians.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AvtrPanTilt {
    pub pan: f64,
    pub tilt: f64,
}

/// Opaque scenario handle.
pub struct AvtrScenario(Scenario);

/// Opaque handle to a finished teach-and-repeat run.
pub struct AvtrRun(RunRecord);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(error: &Error) -> AvtrStatus {
    match error {
        Error::InvalidScenario(_) | Error::Parse { .. } => AvtrStatus::InvalidScenario,
        Error::Config(_) => AvtrStatus::InvalidArgument,
        Error::Io(_) | Error::Csv(_) => AvtrStatus::Io,
        _ => AvtrStatus::Numeric,
    }
}

struct Failure(AvtrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `body`, records any failure or panic and maps it to a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> AvtrStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => AvtrStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {message}"));
            AvtrStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(AvtrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn string<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(AvtrStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

impl From<AvtrPlanner> for PlannerKind {
    fn from(p: AvtrPlanner) -> Self {
        match p {
            AvtrPlanner::Flaf => PlannerKind::Flaf,
            AvtrPlanner::FlafNoscore => PlannerKind::FlafNoscore,
            AvtrPlanner::Udvp => PlannerKind::Udvp,
            AvtrPlanner::Passive => PlannerKind::Passive,
        }
    }
}

impl From<AvtrFidelity> for Fidelity {
    fn from(f: AvtrFidelity) -> Self {
        match f {
            AvtrFidelity::Ideal => Fidelity::Ideal,
            AvtrFidelity::Noisy => Fidelity::Noisy,
        }
    }
}

impl From<Option<FailureCause>> for AvtrFailure {
    fn from(c: Option<FailureCause>) -> Self {
        match c {
            None => AvtrFailure::None,
            Some(FailureCause::TrackingLostTimeout) => AvtrFailure::TrackingLostTimeout,
            Some(FailureCause::Deviation) => AvtrFailure::Deviation,
            Some(FailureCause::TeachMapGap) => AvtrFailure::TeachMapGap,
            Some(FailureCause::Stalled) => AvtrFailure::Stalled,
        }
    }
}

fn phase_of(run: &AvtrRun, phase: AvtrPhase) -> Result<&PhaseRecord, Failure> {
    match phase {
        AvtrPhase::Teach => Ok(&run.0.teach),
        AvtrPhase::Repeat => run
            .0
            .repeat
            .as_ref()
            .ok_or_else(|| Failure(AvtrStatus::NoData, "teaching failed, no repeat phase".into())),
    }
}

/// Length in bytes of the last error message on this thread, 0 if none.
#[no_mangle]
pub extern "C" fn avtr_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |s| s.as_bytes().len()))
}

/// Copies the last error message, NUL terminated and truncated to `len`
/// bytes. Returns the number of bytes written without the terminator, or -1
/// when `buf` is null or `len` is 0.
///
/// # Safety
/// `buf` must point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn avtr_last_error_message(buf: *mut c_char, len: usize) -> i64 {
    if buf.is_null() || len == 0 {
        return -1;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |s| s.as_bytes());
        let n = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
        n as i64
    })
}

/// Loads a shipped preset by name (`path1`..`path4`) or a scenario TOML file.
///
/// # Safety
/// `source` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avtr_scenario_load(source: *const c_char, out: *mut *mut AvtrScenario) -> AvtrStatus {
    guard(|| {
        let source = string(source, "source")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let scenario = harness::load_scenario(source)?;
        *out = Box::into_raw(Box::new(AvtrScenario(scenario)));
        Ok(())
    })
}

/// Parses a scenario from TOML text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avtr_scenario_from_toml(text: *const c_char, out: *mut *mut AvtrScenario) -> AvtrStatus {
    guard(|| {
        let text = string(text, "text")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let scenario = Scenario::from_toml_str(text, "<ffi>")?;
        *out = Box::into_raw(Box::new(AvtrScenario(scenario)));
        Ok(())
    })
}

/// Length of the taught path, meters.
///
/// # Safety
/// `scenario` must come from a scenario constructor and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn avtr_scenario_path_length(scenario: *const AvtrScenario, out: *mut f64) -> AvtrStatus {
    guard(|| {
        let scenario = borrow(scenario, "scenario")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = scenario.0.path_length();
        Ok(())
    })
}

/// Releases a scenario. Null is ignored.
///
/// # Safety
/// `scenario` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn avtr_scenario_free(scenario: *mut AvtrScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Teaches the scenario with `planner`, then repeats on the frozen map.
/// A failed teach still yields a run; its repeat phase reports `NoData`.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avtr_run(
    scenario: *const AvtrScenario,
    planner: AvtrPlanner,
    fidelity: AvtrFidelity,
    seed: u64,
    out: *mut *mut AvtrRun,
) -> AvtrStatus {
    guard(|| {
        let scenario = borrow(scenario, "scenario")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let record = harness::run_one(&scenario.0, planner.into(), seed, fidelity.into())?;
        *out = Box::into_raw(Box::new(AvtrRun(record)));
        Ok(())
    })
}

/// Summary of one phase of a run.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avtr_run_phase_summary(
    run: *const AvtrRun,
    phase: AvtrPhase,
    out: *mut AvtrPhaseSummary,
) -> AvtrStatus {
    guard(|| {
        let run = borrow(run, "run")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = phase_of(run, phase)?;
        *out = AvtrPhaseSummary {
            completed: p.completed,
            completion_rate: p.completion_rate,
            mean_inliers: p.mean_inliers,
            ap_rmse: p.ap_rmse.unwrap_or(f64::NAN),
            failure: p.failure_cause.into(),
            steps: p.inlier_series.len(),
        };
        Ok(())
    })
}

/// Copies the per-step inlier counts of a phase into `buf`, up to `cap`
/// entries, and stores the full series length in `len`. Pass a null `buf`
/// with `cap` 0 to query the length.
///
/// # Safety
/// `buf` must hold `cap` writable entries unless `cap` is 0.
#[no_mangle]
pub unsafe extern "C" fn avtr_run_inliers(
    run: *const AvtrRun,
    phase: AvtrPhase,
    buf: *mut usize,
    cap: usize,
    len: *mut usize,
) -> AvtrStatus {
    guard(|| {
        let run = borrow(run, "run")?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        let series = &phase_of(run, phase)?.inlier_series;
        *len = series.len();
        if cap > 0 {
            if buf.is_null() {
                return Err(null("buf"));
            }
            ptr::copy_nonoverlapping(series.as_ptr(), buf, series.len().min(cap));
        }
        Ok(())
    })
}

/// Writes the trajectory of a phase as a TUM file.
///
/// # Safety
/// `run` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn avtr_run_write_tum(run: *const AvtrRun, phase: AvtrPhase, path: *const c_char) -> AvtrStatus {
    guard(|| {
        let run = borrow(run, "run")?;
        let path = string(path, "path")?;
        vtr::write_tum(Path::new(path), &phase_of(run, phase)?.trajectory)?;
        Ok(())
    })
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn avtr_run_free(run: *mut AvtrRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// One planning call on the default grid and camera with no occluders.
/// Writes the chosen angles to `best` and the objective value to `score`
/// (may be null).
///
/// # Safety
/// `points` must hold `n` entries unless `n` is 0; `best` must be valid.
#[no_mangle]
pub unsafe extern "C" fn avtr_plan(
    planner: AvtrPlanner,
    robot: AvtrPose2,
    current: AvtrPanTilt,
    points: *const AvtrMapPoint,
    n: usize,
    best: *mut AvtrPanTilt,
    score: *mut f64,
) -> AvtrStatus {
    guard(|| {
        let best = best.as_mut().ok_or_else(|| null("best"))?;
        let raw: &[AvtrMapPoint] = match n {
            0 => &[],
            _ if points.is_null() => return Err(null("points")),
            _ => std::slice::from_raw_parts(points, n),
        };
        let mut map = Vec::with_capacity(n);
        for (id, p) in raw.iter().enumerate() {
            let dir = Vector3::from(p.mean_view_dir);
            let finite = p.position.iter().chain(&p.mean_view_dir).all(|v| v.is_finite());
            if !finite || dir.norm() < 1e-9 || !(p.d1 > 0.0 && p.d1 < p.d2) {
                return Err(Failure(AvtrStatus::InvalidArgument, format!("map point {id} is malformed")));
            }
            map.push(MapPoint {
                id,
                position: Vector3::from(p.position),
                mean_view_dir: dir.normalize(),
                d1: p.d1,
                d2: p.d2,
                observing_keyframes: Default::default(),
                scene_point_id: id,
                wall_id: None,
            });
        }
        let refs: Vec<&MapPoint> = map.iter().collect();
        let perception = Perception::new(CameraIntrinsics::default(), &[]);
        let ptu = PtuModel::default();
        let pose = Pose3::from_planar(robot.x, robot.y, robot.heading, robot.height);
        let input = PlanInput {
            perception: &perception,
            ptu: &ptu,
            robot_pose: &pose,
            current: PanTilt::new(current.pan, current.tilt),
        };
        let result = Planner::from_config(planner.into(), &PlannerConfig::default()).plan(&input, &refs);
        *best = AvtrPanTilt {
            pan: result.best.pan,
            tilt: result.best.tilt,
        };
        if let Some(score) = score.as_mut() {
            *score = result.best_score;
        }
        Ok(())
    })
}
