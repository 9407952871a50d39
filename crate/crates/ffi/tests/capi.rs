use std::ffi::{c_char, CString};
use std::ptr;

use active_vtr_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; avtr_last_error_length() + 1];
    let n = unsafe { avtr_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n >= 0);
    let bytes: Vec<u8> = buf[..n as usize].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn load(name: &str) -> *mut AvtrScenario {
    let source = CString::new(name).unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { avtr_scenario_load(source.as_ptr(), &mut handle) };
    assert_eq!(status, AvtrStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

const CORRIDOR: &str = r#"
name = "ffi_corridor"
texture_density = 14.0
taught_path = [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]

[[walls]]
start = [-2.0, -1.5]
end = [6.0, -1.5]

[[walls]]
start = [6.0, 1.5]
end = [-2.0, 1.5]
"#;

#[test]
fn preset_loads_and_reports_length() {
    let scenario = load("path1");
    let mut length = 0.0;
    assert_eq!(unsafe { avtr_scenario_path_length(scenario, &mut length) }, AvtrStatus::Ok);
    assert!(length > 1.0);
    unsafe { avtr_scenario_free(scenario) };
}

#[test]
fn unknown_scenario_sets_message() {
    let source = CString::new("/nonexistent/scenario.toml").unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { avtr_scenario_load(source.as_ptr(), &mut handle) };
    assert_eq!(status, AvtrStatus::InvalidArgument);
    assert!(handle.is_null());
    assert!(last_error().contains("cannot read scenario"));
}

#[test]
fn malformed_toml_is_invalid_scenario() {
    let text = CString::new("taught_path = 3").unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { avtr_scenario_from_toml(text.as_ptr(), &mut handle) };
    assert_eq!(status, AvtrStatus::InvalidScenario);
    assert!(!last_error().is_empty());
}

#[test]
fn null_arguments_are_rejected() {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { avtr_scenario_load(ptr::null(), &mut handle) }, AvtrStatus::NullPointer);
    assert_eq!(last_error(), "source is null");
    let mut length = 0.0;
    assert_eq!(unsafe { avtr_scenario_path_length(ptr::null(), &mut length) }, AvtrStatus::NullPointer);
    let mut run = ptr::null_mut();
    assert_eq!(
        unsafe { avtr_run(ptr::null(), AvtrPlanner::Flaf, AvtrFidelity::Ideal, 0, &mut run) },
        AvtrStatus::NullPointer
    );
    unsafe {
        avtr_scenario_free(ptr::null_mut());
        avtr_run_free(ptr::null_mut());
    }
}

#[test]
fn success_clears_previous_error() {
    let mut handle = ptr::null_mut();
    unsafe { avtr_scenario_load(ptr::null(), &mut handle) };
    assert!(avtr_last_error_length() > 0);
    let scenario = load("path2");
    assert_eq!(avtr_last_error_length(), 0);
    unsafe { avtr_scenario_free(scenario) };
}

#[test]
fn error_message_truncates_to_buffer() {
    let mut handle = ptr::null_mut();
    unsafe { avtr_scenario_load(ptr::null(), &mut handle) };
    let mut buf = [0 as c_char; 4];
    let n = unsafe { avtr_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, 3);
    assert_eq!(buf[3], 0);
    assert_eq!(unsafe { avtr_last_error_message(ptr::null_mut(), 8) }, -1);
}

#[test]
fn run_round_trip() {
    let text = CString::new(CORRIDOR).unwrap();
    let mut scenario = ptr::null_mut();
    assert_eq!(unsafe { avtr_scenario_from_toml(text.as_ptr(), &mut scenario) }, AvtrStatus::Ok, "{}", last_error());
    let mut run = ptr::null_mut();
    let status = unsafe { avtr_run(scenario, AvtrPlanner::Flaf, AvtrFidelity::Ideal, 3, &mut run) };
    assert_eq!(status, AvtrStatus::Ok, "{}", last_error());

    let mut teach = AvtrPhaseSummary {
        completed: false,
        completion_rate: 0.0,
        mean_inliers: 0.0,
        ap_rmse: 0.0,
        failure: AvtrFailure::Stalled,
        steps: 0,
    };
    assert_eq!(unsafe { avtr_run_phase_summary(run, AvtrPhase::Teach, &mut teach) }, AvtrStatus::Ok);
    assert!(teach.completed);
    assert_eq!(teach.failure, AvtrFailure::None);
    assert_eq!(teach.ap_rmse, 0.0);
    assert!(teach.steps > 0);

    let mut repeat = teach;
    assert_eq!(unsafe { avtr_run_phase_summary(run, AvtrPhase::Repeat, &mut repeat) }, AvtrStatus::Ok);
    assert!(repeat.completed);
    assert!(repeat.ap_rmse.is_finite());

    let mut len = 0;
    assert_eq!(unsafe { avtr_run_inliers(run, AvtrPhase::Teach, ptr::null_mut(), 0, &mut len) }, AvtrStatus::Ok);
    assert_eq!(len, teach.steps);
    let mut series = vec![0usize; len];
    assert_eq!(
        unsafe { avtr_run_inliers(run, AvtrPhase::Teach, series.as_mut_ptr(), series.len(), &mut len) },
        AvtrStatus::Ok
    );
    let mean = series.iter().sum::<usize>() as f64 / len as f64;
    assert!((mean - teach.mean_inliers).abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("teach.tum");
    let path = CString::new(file.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { avtr_run_write_tum(run, AvtrPhase::Teach, path.as_ptr()) }, AvtrStatus::Ok);
    let lines = std::fs::read_to_string(&file).unwrap().lines().count();
    assert!(lines > 1);

    unsafe {
        avtr_run_free(run);
        avtr_scenario_free(scenario);
    }
}

#[test]
fn failed_teach_has_no_repeat() {
    let text = CString::new(CORRIDOR.replace("texture_density = 14.0", "texture_density = 0.0")).unwrap();
    let mut scenario = ptr::null_mut();
    assert_eq!(unsafe { avtr_scenario_from_toml(text.as_ptr(), &mut scenario) }, AvtrStatus::Ok, "{}", last_error());
    let mut run = ptr::null_mut();
    assert_eq!(
        unsafe { avtr_run(scenario, AvtrPlanner::Passive, AvtrFidelity::Ideal, 0, &mut run) },
        AvtrStatus::Ok,
        "{}",
        last_error()
    );
    let mut summary = AvtrPhaseSummary {
        completed: true,
        completion_rate: 1.0,
        mean_inliers: 0.0,
        ap_rmse: 0.0,
        failure: AvtrFailure::None,
        steps: 0,
    };
    assert_eq!(unsafe { avtr_run_phase_summary(run, AvtrPhase::Teach, &mut summary) }, AvtrStatus::Ok);
    assert!(!summary.completed);
    assert_ne!(summary.failure, AvtrFailure::None);
    assert_eq!(unsafe { avtr_run_phase_summary(run, AvtrPhase::Repeat, &mut summary) }, AvtrStatus::NoData);
    unsafe {
        avtr_run_free(run);
        avtr_scenario_free(scenario);
    }
}

fn point(position: [f64; 3], toward: [f64; 3]) -> AvtrMapPoint {
    let d = [toward[0] - position[0], toward[1] - position[1], toward[2] - position[2]];
    AvtrMapPoint {
        position,
        mean_view_dir: d,
        d1: 0.5,
        d2: 6.0,
    }
}

#[test]
fn plan_turns_toward_the_points() {
    let robot = AvtrPose2 {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
        height: 0.5,
    };
    // A cluster well to the left, observed from the robot's position.
    let points: Vec<AvtrMapPoint> = (0..20)
        .map(|i| point([2.0, 2.5 + 0.05 * i as f64, 0.3 + 0.02 * i as f64], [0.0, 0.0, 0.5]))
        .collect();
    let mut best = AvtrPanTilt::default();
    let mut score = f64::NAN;
    let status = unsafe {
        avtr_plan(AvtrPlanner::Flaf, robot, AvtrPanTilt::default(), points.as_ptr(), points.len(), &mut best, &mut score)
    };
    assert_eq!(status, AvtrStatus::Ok, "{}", last_error());
    assert!(best.pan > 0.0, "pan {}", best.pan);
    assert!(score > 0.0);

    let status = unsafe {
        avtr_plan(AvtrPlanner::Passive, robot, AvtrPanTilt::default(), points.as_ptr(), points.len(), &mut best, ptr::null_mut())
    };
    assert_eq!(status, AvtrStatus::Ok);
    assert_eq!((best.pan, best.tilt), (0.0, 0.0));
}

#[test]
fn plan_rejects_malformed_points() {
    let robot = AvtrPose2 {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
        height: 0.5,
    };
    let mut bad = point([2.0, 0.0, 0.5], [0.0, 0.0, 0.5]);
    bad.d2 = 0.1;
    let mut best = AvtrPanTilt::default();
    let status = unsafe { avtr_plan(AvtrPlanner::Udvp, robot, AvtrPanTilt::default(), &bad, 1, &mut best, ptr::null_mut()) };
    assert_eq!(status, AvtrStatus::InvalidArgument);
    assert!(last_error().contains("map point 0"));
    let status =
        unsafe { avtr_plan(AvtrPlanner::Udvp, robot, AvtrPanTilt::default(), ptr::null(), 3, &mut best, ptr::null_mut()) };
    assert_eq!(status, AvtrStatus::NullPointer);
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/active_vtr.h");
    for name in [
        "avtr_last_error_length",
        "avtr_last_error_message",
        "avtr_scenario_load",
        "avtr_scenario_from_toml",
        "avtr_scenario_path_length",
        "avtr_scenario_free",
        "avtr_run",
        "avtr_run_phase_summary",
        "avtr_run_inliers",
        "avtr_run_write_tum",
        "avtr_run_free",
        "avtr_plan",
        "typedef struct AvtrScenario AvtrScenario",
        "AVTR_STATUS_NO_DATA = 6",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
