//! Teach-and-repeat loop: guided teaching with incremental mapping, repeat on
//! the frozen map, reference search, PD control and run metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, PanTilt, Pose3, PtuModel};
use crate::observation::{
    refine_pairs, step_tracking, try_relocalize, IdentifiabilityMode, Observation, Perception,
    TrackingState,
};
use crate::planners::{PlanInput, Planner, PlannerKind};
use crate::world::{
    build_local_map, generate_scene, surface_visible, update_mean_view_dir, Keyframe, MapPoint,
    Scenario, Scene,
};

/// Localization surrogate used while tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Estimate equals the true pose; no pixel noise.
    #[default]
    Ideal,
    /// Noisy pixels and Gauss-Newton refinement from a motion prior.
    Noisy,
}

impl Fidelity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Fidelity::Ideal => "ideal",
            Fidelity::Noisy => "noisy",
        }
    }
}

impl fmt::Display for Fidelity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fidelity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ideal" => Ok(Fidelity::Ideal),
            "noisy" => Ok(Fidelity::Noisy),
            other => Err(Error::Config(format!("unknown fidelity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerGains {
    pub kp_lin: f64,
    pub kd_lin: f64,
    pub kp_head: f64,
    pub kd_head: f64,
    pub kp_lat: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            kp_lin: 0.8,
            kd_lin: 0.1,
            kp_head: 1.5,
            kd_head: 0.1,
            kp_lat: 2.0,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        let all = [self.kp_lin, self.kd_lin, self.kp_head, self.kd_head, self.kp_lat];
        if all.iter().all(|g| *g >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("controller gains must be non-negative".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub gains: ControllerGains,
    pub v_max: f64,
    pub omega_max: f64,
    /// Teaching speed along the guided path, m/s.
    pub v_teach: f64,
    /// Turn rate for in-place rotations while teaching, rad/s.
    pub omega_teach: f64,
    /// Fillet radius of guided corners, meters.
    pub turn_radius: f64,
    /// Initial repeat offset to the left of the first key pose, meters.
    pub init_lateral_offset: f64,
    pub init_heading_offset_deg: f64,
    pub lost_timeout_steps: usize,
    /// Lateral distance from the taught path that aborts a repeat, meters.
    pub deviation_limit: f64,
    pub goal_tolerance: f64,
    /// Number of key poses in the reference search window.
    pub reference_window: usize,
    /// Longitudinal distance a reference must lead the robot by, meters.
    pub min_lookahead: f64,
    /// Repeat step cap as a multiple of the teaching duration.
    pub step_limit_factor: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            gains: ControllerGains::default(),
            v_max: 1.0,
            omega_max: 1.5,
            v_teach: 0.5,
            omega_teach: 0.8,
            turn_radius: 0.5,
            init_lateral_offset: 0.1,
            init_heading_offset_deg: 5.0,
            lost_timeout_steps: 60,
            deviation_limit: 1.0,
            goal_tolerance: 0.05,
            reference_window: 10,
            min_lookahead: 0.6,
            step_limit_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    pub keyframe_translation: f64,
    pub keyframe_rotation_deg: f64,
    /// Insert a keyframe when fewer than this fraction of the reference
    /// keyframe's points are still tracked.
    pub keyframe_tracked_fraction: f64,
    /// Minimum spacing, in steps, of keyframes triggered by the tracked
    /// fraction.
    pub keyframe_min_interval_steps: usize,
    /// `d1 = d/ratio`, `d2 = d·ratio` with `d` the creation distance.
    pub range_ratio: f64,
    /// Fixed `[d1, d2]` for every new map point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range_override: Option<[f64; 2]>,
    pub feature_min_range: f64,
    pub feature_max_range: f64,
    /// Largest angle between a surface normal and the viewing ray at which a
    /// feature is detected.
    pub feature_max_angle_deg: f64,
    /// Keyframes after which an untriangulated first sighting is dropped.
    pub pending_max_age: usize,
    /// A tracked feature is re-triangulated once its distance leaves
    /// `[d1·renew_ratio, d2/renew_ratio]`, so a fresh point exists before the
    /// old one expires.
    pub renew_ratio: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            keyframe_translation: 0.3,
            keyframe_rotation_deg: 10.0,
            keyframe_tracked_fraction: 0.7,
            keyframe_min_interval_steps: 6,
            range_ratio: 1.4,
            range_override: None,
            feature_min_range: 0.3,
            feature_max_range: 6.0,
            feature_max_angle_deg: 70.0,
            pending_max_age: 6,
            renew_ratio: 1.2,
        }
    }
}

/// Planar robot state lifted to 3-D at a fixed height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub pose: Pose3,
    pub linear_velocity: f64,
    pub angular_velocity: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, heading: f64, height: f64) -> Self {
        Self {
            pose: Pose3::from_planar(x, y, heading, height),
            linear_velocity: 0.0,
            angular_velocity: 0.0,
        }
    }

    pub fn planar(&self) -> (f64, f64, f64) {
        self.pose.planar()
    }

    /// Applies a clamped `(v, ω)` command for `dt` seconds.
    pub fn step(&mut self, v: f64, omega: f64, v_max: f64, omega_max: f64, dt: f64) {
        let v = v.clamp(-v_max, v_max);
        let omega = omega.clamp(-omega_max, omega_max);
        let (x, y, th) = self.planar();
        let (x, y, th) = integrate_unicycle(x, y, th, v, omega, dt);
        self.pose = Pose3::from_planar(x, y, th, self.pose.translation.z);
        self.linear_velocity = v;
        self.angular_velocity = omega;
    }
}

/// Exact arc integration of unicycle kinematics.
pub fn integrate_unicycle(x: f64, y: f64, th: f64, v: f64, omega: f64, dt: f64) -> (f64, f64, f64) {
    let th1 = th + omega * dt;
    if omega.abs() < 1e-12 {
        (x + v * dt * th.cos(), y + v * dt * th.sin(), wrap_angle(th1))
    } else {
        let r = v / omega;
        (
            x + r * (th1.sin() - th.sin()),
            y - r * (th1.cos() - th.cos()),
            wrap_angle(th1),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Pose3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teach,
    Repeat,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Teach => "teach",
            Phase::Repeat => "repeat",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureCause {
    TrackingLostTimeout,
    Deviation,
    TeachMapGap,
    /// Repeat hit its step cap without finishing.
    Stalled,
}

impl FailureCause {
    pub fn as_str(&self) -> &'static str {
        match self {
            FailureCause::TrackingLostTimeout => "TRACKING_LOST_TIMEOUT",
            FailureCause::Deviation => "DEVIATION",
            FailureCause::TeachMapGap => "TEACH_MAP_GAP",
            FailureCause::Stalled => "STALLED",
        }
    }
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-step record of a simulation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub t: f64,
    pub robot_pose: Pose3,
    pub camera_pose: Pose3,
    pub ptu_angles: PanTilt,
    /// Estimated robot pose while localized.
    pub estimate: Option<Pose3>,
    pub inliers: usize,
    pub tracking: bool,
    pub reference: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub phase: Phase,
    pub planner: PlannerKind,
    pub fidelity: Fidelity,
    pub completed: bool,
    pub completion_rate: f64,
    pub failure_cause: Option<FailureCause>,
    pub trajectory: Vec<TimedPose>,
    pub planner_time_mean: f64,
    pub planner_calls: usize,
    pub inlier_series: Vec<usize>,
    pub steps: Vec<StepLog>,
    pub path_length: f64,
}

impl RunResult {
    pub fn mean_inliers(&self) -> f64 {
        if self.inlier_series.is_empty() {
            return 0.0;
        }
        self.inlier_series.iter().sum::<usize>() as f64 / self.inlier_series.len() as f64
    }

    /// Largest deviation of a logged robot pose from the one recovered out of
    /// the logged camera pose and PTU angles.
    pub fn max_chain_residual(&self, ptu: &PtuModel) -> f64 {
        self.steps
            .iter()
            .map(|s| {
                ptu.robot_pose_from_camera(&s.camera_pose, s.ptu_angles)
                    .max_abs_diff(&s.robot_pose)
            })
            .fold(0.0, f64::max)
    }

    /// Reference indices of the localized steps, in order.
    pub fn reference_indices(&self) -> Vec<usize> {
        self.steps.iter().filter_map(|s| s.reference).collect()
    }
}

/// Result of teaching: key robot poses plus the map they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct TaughtPath {
    pub planner: PlannerKind,
    pub key_robot_poses: Vec<Pose3>,
    pub keyframes: Vec<Keyframe>,
    pub map_points: Vec<MapPoint>,
    /// Dense ground-truth teaching trajectory.
    pub trajectory: Vec<TimedPose>,
}

fn hash_pose(h: &mut impl Hasher, p: &Pose3) {
    for v in p.quaternion_xyzw() {
        v.to_bits().hash(h);
    }
    for v in p.translation.iter() {
        v.to_bits().hash(h);
    }
}

fn hash_vec(h: &mut impl Hasher, v: &Vector3<f64>) {
    for x in v.iter() {
        x.to_bits().hash(h);
    }
}

impl TaughtPath {
    pub fn polyline(&self) -> Vec<Vector2<f64>> {
        planar_polyline(self.key_robot_poses.iter())
    }

    pub fn length(&self) -> f64 {
        polyline_length(&self.polyline())
    }

    pub fn duration(&self) -> f64 {
        match (self.trajectory.first(), self.trajectory.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Hash over every keyframe, map point and key pose.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for kf in &self.keyframes {
            kf.id.hash(&mut h);
            hash_pose(&mut h, &kf.camera_pose);
            hash_pose(&mut h, &kf.robot_pose);
            kf.ptu_angles.pan.to_bits().hash(&mut h);
            kf.ptu_angles.tilt.to_bits().hash(&mut h);
            kf.timestamp.to_bits().hash(&mut h);
            kf.observed_points.hash(&mut h);
        }
        for p in &self.map_points {
            p.id.hash(&mut h);
            hash_vec(&mut h, &p.position);
            hash_vec(&mut h, &p.mean_view_dir);
            p.d1.to_bits().hash(&mut h);
            p.d2.to_bits().hash(&mut h);
            p.observing_keyframes.hash(&mut h);
            p.scene_point_id.hash(&mut h);
            p.wall_id.hash(&mut h);
        }
        for p in &self.key_robot_poses {
            hash_pose(&mut h, p);
        }
        h.finish()
    }

    pub fn max_chain_residual(&self, ptu: &PtuModel) -> f64 {
        self.keyframes
            .iter()
            .zip(&self.key_robot_poses)
            .map(|(kf, r)| {
                ptu.robot_pose_from_camera(&kf.camera_pose, kf.ptu_angles)
                    .max_abs_diff(r)
            })
            .fold(0.0, f64::max)
    }
}

fn planar_polyline<'a>(poses: impl Iterator<Item = &'a Pose3>) -> Vec<Vector2<f64>> {
    let mut out: Vec<Vector2<f64>> = Vec::new();
    for p in poses {
        let q = Vector2::new(p.translation.x, p.translation.y);
        if out.last().is_none_or(|l| (l - q).norm() > 1e-9) {
            out.push(q);
        }
    }
    out
}

pub fn polyline_length(points: &[Vector2<f64>]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Monotone progress along a polyline. Each update searches only a window of
/// arc length ahead of the current progress, so revisiting the start of a
/// loop does not count as finishing it.
#[derive(Debug, Clone)]
pub struct ProgressTracker {
    points: Vec<Vector2<f64>>,
    cumulative: Vec<f64>,
    segment: usize,
    progress: f64,
    last: Option<Vector2<f64>>,
}

impl ProgressTracker {
    const MIN_WINDOW: f64 = 2.0;

    pub fn new(points: Vec<Vector2<f64>>) -> Self {
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                acc += (p - points[i - 1]).norm();
            }
            cumulative.push(acc);
        }
        Self {
            points,
            cumulative,
            segment: 0,
            progress: 0.0,
            last: None,
        }
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    /// Advances with a new position; returns its distance to the polyline
    /// within the search window.
    pub fn update(&mut self, p: Vector2<f64>) -> f64 {
        if self.points.len() < 2 {
            return self.points.first().map_or(0.0, |q| (p - q).norm());
        }
        let moved = self.last.map_or(0.0, |l| (p - l).norm());
        self.last = Some(p);
        let window = Self::MIN_WINDOW.max(2.0 * moved);
        let mut best: Option<(f64, f64, usize)> = None;
        for j in self.segment..self.points.len() - 1 {
            if self.cumulative[j] > self.progress + window {
                break;
            }
            let a = self.points[j];
            let ab = self.points[j + 1] - a;
            let len2 = ab.norm_squared();
            let t = if len2 > 0.0 {
                ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = (p - (a + ab * t)).norm();
            let arc = self.cumulative[j] + t * len2.sqrt();
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, arc, j));
            }
        }
        let (d, arc, j) = best.expect("at least one segment");
        if arc > self.progress {
            self.progress = arc;
            self.segment = j;
        }
        d
    }
}

/// Fraction of the taught polyline covered by the trajectory's monotone
/// nearest-projection progress.
pub fn completion_rate(trajectory: &[TimedPose], taught: &[Pose3]) -> Result<f64> {
    let polyline = planar_polyline(taught.iter());
    if polyline.len() < 2 || trajectory.is_empty() {
        return Err(Error::ShortTrajectory);
    }
    let mut tracker = ProgressTracker::new(polyline);
    for p in trajectory {
        tracker.update(Vector2::new(p.pose.translation.x, p.pose.translation.y));
    }
    Ok((tracker.progress() / tracker.total()).clamp(0.0, 1.0))
}

fn normalized_times(traj: &[TimedPose]) -> Result<Vec<f64>> {
    let t0 = traj[0].t;
    let span = traj[traj.len() - 1].t - t0;
    if !(span > 0.0) {
        return Err(Error::ShortTrajectory);
    }
    Ok(traj.iter().map(|p| (p.t - t0) / span).collect())
}

/// Translational RMSE after associating poses by normalized time.
pub fn ap_rmse(repeat: &[TimedPose], taught: &[TimedPose]) -> Result<f64> {
    if repeat.len() < 2 || taught.len() < 2 {
        return Err(Error::ShortTrajectory);
    }
    let tr = normalized_times(repeat)?;
    let tt = normalized_times(taught)?;
    let mut sum = 0.0;
    for (pose, &tau) in repeat.iter().zip(&tr) {
        let i = tt.partition_point(|&x| x < tau);
        let j = if i == 0 {
            0
        } else if i == tt.len() || (tau - tt[i - 1]) <= (tt[i] - tau) {
            i - 1
        } else {
            i
        };
        sum += (pose.pose.translation - taught[j].pose.translation).norm_squared();
    }
    Ok((sum / repeat.len() as f64).sqrt())
}

/// Pose error expressed in the estimate's frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseError {
    pub longitudinal: f64,
    pub lateral: f64,
    pub heading: f64,
}

pub fn pose_error(reference: &Pose3, estimate: &Pose3) -> PoseError {
    let (xr, yr, thr) = reference.planar();
    let (x, y, th) = estimate.planar();
    let (s, c) = th.sin_cos();
    let (dx, dy) = (xr - x, yr - y);
    PoseError {
        longitudinal: c * dx + s * dy,
        lateral: -s * dx + c * dy,
        heading: wrap_angle(thr - th),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    pub v: f64,
    pub omega: f64,
    pub error: PoseError,
}

/// PD law on the robot-frame pose error. Derivatives are backward differences
/// against `prev_error`, or zero without one.
pub fn pd_control(
    reference: &Pose3,
    estimate: &Pose3,
    prev_error: Option<PoseError>,
    config: &ControllerConfig,
    dt: f64,
) -> Command {
    let e = pose_error(reference, estimate);
    let (de_long, de_head) = match prev_error {
        Some(p) if dt > 0.0 => (
            (e.longitudinal - p.longitudinal) / dt,
            wrap_angle(e.heading - p.heading) / dt,
        ),
        _ => (0.0, 0.0),
    };
    let g = &config.gains;
    let v = (g.kp_lin * e.longitudinal + g.kd_lin * de_long).clamp(0.0, config.v_max);
    let omega = (g.kp_head * e.heading + g.kd_head * de_head + g.kp_lat * e.lateral)
        .clamp(-config.omega_max, config.omega_max);
    Command { v, omega, error: e }
}

const AHEAD_EPS: f64 = 1e-9;

/// Nearest key pose ahead of `current` within a 10-wide window around
/// `last_index`.
pub fn reference_search(current: &Pose3, key_poses: &[Pose3], last_index: usize) -> usize {
    reference_search_with(current, key_poses, last_index, 10, 0.0)
}

/// Window `[last − w/2, last + w/2)`, clamped. Prefers the nearest candidate
/// leading by more than `min_lookahead`, then the one leading the most; never
/// returns less than `last_index`.
pub fn reference_search_with(
    current: &Pose3,
    key_poses: &[Pose3],
    last_index: usize,
    window: usize,
    min_lookahead: f64,
) -> usize {
    if key_poses.is_empty() {
        return 0;
    }
    let last = last_index.min(key_poses.len() - 1);
    let half = window / 2;
    let lo = last.saturating_sub(half);
    let hi = (last + half).min(key_poses.len());
    let mut nearest: Option<(usize, f64)> = None;
    let mut leading: Option<(usize, f64)> = None;
    for (i, key) in key_poses.iter().enumerate().take(hi).skip(lo) {
        let rel = current.inverse_transform_point(&key.center());
        if rel.x <= AHEAD_EPS {
            continue;
        }
        if rel.x > min_lookahead {
            let d = rel.norm();
            if nearest.is_none_or(|(_, bd)| d < bd) {
                nearest = Some((i, d));
            }
        }
        if leading.is_none_or(|(_, bl)| rel.x > bl) {
            leading = Some((i, rel.x));
        }
    }
    nearest
        .or(leading)
        .map_or(last, |(i, _)| i)
        .max(last)
}

/// One sample of the guided teaching motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Rotate { x: f64, y: f64, from: f64, delta: f64, rate: f64 },
    Line { x: f64, y: f64, heading: f64, length: f64, v: f64 },
    Arc { x: f64, y: f64, heading: f64, sweep: f64, radius: f64, v: f64 },
}

impl Primitive {
    fn duration(&self) -> f64 {
        match *self {
            Primitive::Rotate { delta, rate, .. } => delta.abs() / rate,
            Primitive::Line { length, v, .. } => length / v,
            Primitive::Arc { sweep, radius, v, .. } => sweep.abs() * radius / v,
        }
    }

    fn at(&self, tau: f64) -> GuidanceSample {
        match *self {
            Primitive::Rotate { x, y, from, delta, rate } => {
                let w = rate * delta.signum();
                GuidanceSample { t: tau, x, y, heading: wrap_angle(from + w * tau), v: 0.0, omega: w }
            }
            Primitive::Line { x, y, heading, v, .. } => GuidanceSample {
                t: tau,
                x: x + v * tau * heading.cos(),
                y: y + v * tau * heading.sin(),
                heading,
                v,
                omega: 0.0,
            },
            Primitive::Arc { x, y, heading, sweep, radius, v } => {
                let w = sweep.signum() * v / radius;
                let (px, py, th) = integrate_unicycle(x, y, heading, v, w, tau);
                GuidanceSample { t: tau, x: px, y: py, heading: th, v, omega: w }
            }
        }
    }
}

const U_TURN_LIMIT: f64 = 170.0 * std::f64::consts::PI / 180.0;

fn guidance_primitives(scenario: &Scenario) -> Vec<Primitive> {
    let c = &scenario.controller;
    let pts: Vec<Vector2<f64>> = scenario
        .taught_path
        .iter()
        .map(|w| Vector2::new(w[0], w[1]))
        .collect();
    let n = pts.len();
    let headings: Vec<f64> = pts.windows(2).map(|w| (w[1].y - w[0].y).atan2(w[1].x - w[0].x)).collect();
    let lengths: Vec<f64> = pts.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    // corner fillets at interior vertices: (radius, tangent length, turn)
    let mut corner = vec![(0.0, 0.0, 0.0); n];
    for i in 1..n - 1 {
        let turn = wrap_angle(headings[i] - headings[i - 1]);
        if turn.abs() < 1e-9 || turn.abs() > U_TURN_LIMIT || c.turn_radius <= 0.0 {
            corner[i] = (0.0, 0.0, turn);
            continue;
        }
        let half_tan = (turn.abs() / 2.0).tan();
        let r = c.turn_radius.min(0.5 * lengths[i - 1].min(lengths[i]) / half_tan);
        corner[i] = (r, r * half_tan, turn);
    }
    let mut out = Vec::new();
    let start_heading = scenario.taught_path[0][2].to_radians();
    let first = wrap_angle(headings[0] - start_heading);
    if first.abs() > 1e-9 {
        out.push(Primitive::Rotate { x: pts[0].x, y: pts[0].y, from: start_heading, delta: first, rate: c.omega_teach });
    }
    for i in 0..n - 1 {
        let dir = Vector2::new(headings[i].cos(), headings[i].sin());
        let start = pts[i] + dir * corner[i].1;
        let length = lengths[i] - corner[i].1 - corner[i + 1].1;
        if length > 1e-12 {
            out.push(Primitive::Line { x: start.x, y: start.y, heading: headings[i], length, v: c.v_teach });
        }
        if i + 1 < n - 1 {
            let (r, tl, turn) = corner[i + 1];
            if turn.abs() < 1e-9 {
                continue;
            }
            let at = pts[i + 1] - dir * tl;
            if r > 0.0 {
                out.push(Primitive::Arc { x: at.x, y: at.y, heading: headings[i], sweep: turn, radius: r, v: c.v_teach });
            } else {
                out.push(Primitive::Rotate { x: at.x, y: at.y, from: headings[i], delta: turn, rate: c.omega_teach });
            }
        }
    }
    let end_heading = scenario.taught_path[n - 1][2].to_radians();
    let last = wrap_angle(end_heading - headings[n - 2]);
    if last.abs() > 1e-9 {
        out.push(Primitive::Rotate { x: pts[n - 1].x, y: pts[n - 1].y, from: headings[n - 2], delta: last, rate: c.omega_teach });
    }
    out
}

/// Ground-truth teaching motion sampled at the simulation rate. The final
/// sample is the exact end of the path.
pub fn guidance_path(scenario: &Scenario) -> Vec<GuidanceSample> {
    let prims = guidance_primitives(scenario);
    let durations: Vec<f64> = prims.iter().map(|p| p.duration()).collect();
    let total: f64 = durations.iter().sum();
    let dt = scenario.dt();
    let steps = (total / dt - 1e-9).ceil().max(0.0) as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut idx = 0;
    let mut offset = 0.0;
    for k in 0..=steps {
        let t = (k as f64 * dt).min(total);
        while idx + 1 < prims.len() && t > offset + durations[idx] {
            offset += durations[idx];
            idx += 1;
        }
        let mut s = match prims.get(idx) {
            Some(p) => p.at((t - offset).min(durations[idx])),
            None => {
                let w = scenario.taught_path[0];
                GuidanceSample { t, x: w[0], y: w[1], heading: w[2].to_radians(), v: 0.0, omega: 0.0 }
            }
        };
        s.t = t;
        out.push(s);
    }
    out
}

fn slew(current: PanTilt, target: PanTilt, max_step: Option<f64>) -> PanTilt {
    match max_step {
        Some(m) => PanTilt::new(
            current.pan + (target.pan - current.pan).clamp(-m, m),
            current.tilt + (target.tilt - current.tilt).clamp(-m, m),
        ),
        None => target,
    }
}

fn run_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match phase {
        Phase::Teach => 1 << 32,
        Phase::Repeat => (1 << 32) + 1,
    });
    rng
}

/// Settings shared by the teach and repeat loops.
struct Sim<'a> {
    scenario: &'a Scenario,
    perception: Perception<'a>,
    ptu: PtuModel,
    planner: Planner,
    fidelity: Fidelity,
    mode: IdentifiabilityMode,
    sigma: f64,
    slew_step: Option<f64>,
    height: f64,
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario, kind: PlannerKind, fidelity: Fidelity) -> Self {
        let obs = &scenario.observation;
        let rate = scenario.planner.slew_rate_deg_s;
        Self {
            scenario,
            perception: Perception::new(scenario.camera.intrinsics(), &scenario.walls)
                .with_max_view_angle(obs.max_view_angle_deg.to_radians()),
            ptu: scenario.camera.ptu(),
            planner: Planner::from_config(kind, &scenario.planner),
            fidelity,
            mode: obs.identifiability_mode,
            sigma: match fidelity {
                Fidelity::Ideal => 0.0,
                Fidelity::Noisy => obs.pixel_noise_sigma,
            },
            slew_step: (rate > 0.0).then(|| rate.to_radians() * scenario.dt()),
            height: scenario.camera.mount_height,
        }
    }

    fn estimate_camera(
        &self,
        truth: &Pose3,
        predicted: &Pose3,
        observations: &[Observation],
        points: &[MapPoint],
    ) -> Pose3 {
        match self.fidelity {
            Fidelity::Ideal => *truth,
            Fidelity::Noisy => {
                let pairs: Vec<_> = observations.iter().map(|o| (o, &points[o.point_id])).collect();
                refine_pairs(&self.perception.intrinsics, predicted, &pairs)
                    .map(|r| r.pose)
                    .unwrap_or(*predicted)
            }
        }
    }

    fn local_points<'p>(
        &self,
        keyframes: &[Keyframe],
        points: &'p [MapPoint],
        observed: &BTreeSet<usize>,
    ) -> Vec<&'p MapPoint> {
        build_local_map(keyframes, points, observed)
            .points
            .iter()
            .map(|&i| &points[i])
            .collect()
    }

    fn plan(&self, robot: &Pose3, current: PanTilt, local: &[&MapPoint]) -> (PanTilt, f64) {
        let input = PlanInput {
            perception: &self.perception,
            ptu: &self.ptu,
            robot_pose: robot,
            current,
        };
        let r = self.planner.plan(&input, local);
        (self.ptu.clamp(r.best), r.elapsed)
    }

    /// Identified local-map points, one per physical feature (the newest
    /// duplicate wins).
    fn observe(
        &self,
        camera: &Pose3,
        local: &[&MapPoint],
        points: &[MapPoint],
        rng: &mut ChaCha8Rng,
    ) -> Vec<Observation> {
        let all = self.perception.observe_frame(camera, local.iter().copied(), self.mode, self.sigma, rng);
        let mut newest: BTreeMap<usize, Observation> = BTreeMap::new();
        for o in all {
            let feature = points[o.point_id].scene_point_id;
            match newest.get(&feature) {
                Some(prev) if prev.point_id > o.point_id => {}
                _ => {
                    newest.insert(feature, o);
                }
            }
        }
        let mut out: Vec<Observation> = newest.into_values().collect();
        out.sort_by_key(|o| o.point_id);
        out
    }

    fn unique_features(ids: BTreeSet<usize>, points: &[MapPoint]) -> BTreeSet<usize> {
        let mut newest: BTreeMap<usize, usize> = BTreeMap::new();
        for id in ids {
            let e = newest.entry(points[id].scene_point_id).or_insert(id);
            *e = (*e).max(id);
        }
        newest.into_values().collect()
    }

    fn max_lost(&self) -> usize {
        self.scenario.controller.lost_timeout_steps
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    keyframe: usize,
    distance: f64,
}

/// Map under construction during teaching.
struct Mapper<'a> {
    scene: &'a Scene,
    config: &'a MappingConfig,
    keyframes: Vec<Keyframe>,
    points: Vec<MapPoint>,
    pending: Vec<Option<Pending>>,
    key_robot_poses: Vec<Pose3>,
    last_keyframe_step: usize,
}

impl<'a> Mapper<'a> {
    fn new(scene: &'a Scene, config: &'a MappingConfig) -> Self {
        Self {
            scene,
            config,
            keyframes: Vec::new(),
            points: Vec::new(),
            pending: vec![None; scene.points.len()],
            key_robot_poses: Vec::new(),
            last_keyframe_step: 0,
        }
    }

    fn needs_keyframe(&self, step: usize, camera: &Pose3, observed: &BTreeSet<usize>) -> bool {
        let Some(last) = self.keyframes.last() else {
            return true;
        };
        let c = self.config;
        if (camera.center() - last.camera_pose.center()).norm() > c.keyframe_translation
            || camera.rotation_angle_to(&last.camera_pose) > c.keyframe_rotation_deg.to_radians()
        {
            return true;
        }
        if last.observed_points.is_empty()
            || step < self.last_keyframe_step + c.keyframe_min_interval_steps
        {
            return false;
        }
        let kept = last.observed_points.intersection(observed).count();
        (kept as f64) < c.keyframe_tracked_fraction * last.observed_points.len() as f64
    }

    /// Inserts a keyframe and triangulates second sightings. Returns the ids
    /// of the new map points.
    #[allow(clippy::too_many_arguments)]
    fn insert_keyframe(
        &mut self,
        step: usize,
        t: f64,
        camera: Pose3,
        ptu_angles: PanTilt,
        ptu: &PtuModel,
        true_camera: &Pose3,
        perception: &Perception<'_>,
        observed: &BTreeSet<usize>,
    ) -> Vec<usize> {
        let id = self.keyframes.len();
        let robot_pose = ptu.robot_pose_from_camera(&camera, ptu_angles);
        for &pid in observed {
            self.points[pid].observing_keyframes.insert(id);
        }
        self.keyframes.push(Keyframe {
            id,
            camera_pose: camera,
            ptu_angles,
            robot_pose,
            timestamp: t,
            observed_points: observed.clone(),
        });
        self.key_robot_poses.push(robot_pose);
        self.last_keyframe_step = step;
        for &pid in observed {
            if let Ok(p) = update_mean_view_dir(&self.points[pid], &self.keyframes) {
                self.points[pid].mean_view_dir = p.mean_view_dir;
            }
        }

        let c = self.config;
        let eye = true_camera.center();
        let claimed: BTreeSet<usize> = observed
            .iter()
            .map(|&pid| &self.points[pid])
            .filter(|p| {
                let d = (eye - p.position).norm();
                d >= p.d1 * c.renew_ratio && d <= p.d2 / c.renew_ratio
            })
            .map(|p| p.scene_point_id)
            .collect();
        let cos_max = c.feature_max_angle_deg.to_radians().cos();
        let mut created = Vec::new();
        for sp in &self.scene.points {
            let to_eye = eye - sp.position;
            let dist = to_eye.norm();
            if dist < c.feature_min_range
                || dist > c.feature_max_range
                || sp.surface_normal.dot(&to_eye) < cos_max * dist
                || claimed.contains(&sp.id)
                || perception.pixel_in_view(true_camera, &sp.position).is_none()
                || !surface_visible(perception.walls, &eye, &sp.position, Some(sp.wall_id))
            {
                continue;
            }
            let triangulate = self.pending[sp.id].filter(|p| {
                p.keyframe != id
                    && id - p.keyframe <= c.pending_max_age
                    && dist >= p.distance / c.range_ratio
                    && dist <= p.distance * c.range_ratio
            });
            let Some(first) = triangulate else {
                self.pending[sp.id] = Some(Pending { keyframe: id, distance: dist });
                continue;
            };
            let pid = self.points.len();
            let (d1, d2) = match c.range_override {
                Some([a, b]) => (a, b),
                None => (first.distance / c.range_ratio, first.distance * c.range_ratio),
            };
            let first_center = self.keyframes[first.keyframe].camera_pose.center();
            let mean = (first_center - sp.position).normalize() + (camera.center() - sp.position).normalize();
            let mean_view_dir = if mean.norm() > 1e-9 { mean.normalize() } else { to_eye / dist };
            self.points.push(MapPoint {
                id: pid,
                position: sp.position,
                mean_view_dir,
                d1,
                d2,
                observing_keyframes: [first.keyframe, id].into_iter().collect(),
                scene_point_id: sp.id,
                wall_id: Some(sp.wall_id),
            });
            self.keyframes[first.keyframe].observed_points.insert(pid);
            self.keyframes[id].observed_points.insert(pid);
            self.pending[sp.id] = None;
            created.push(pid);
        }
        created
    }
}

struct Timing {
    total: f64,
    calls: usize,
}

impl Timing {
    fn new() -> Self {
        Self { total: 0.0, calls: 0 }
    }

    fn add(&mut self, elapsed: f64) {
        self.total += elapsed;
        self.calls += 1;
    }

    fn mean(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.total / self.calls as f64
        }
    }
}

/// Teaches the scenario's path under ideal guidance while building the map.
pub fn teach(
    scenario: &Scenario,
    planner_kind: PlannerKind,
    fidelity: Fidelity,
) -> Result<(TaughtPath, RunResult)> {
    scenario.validate()?;
    scenario.controller.gains.validate()?;
    let scene = generate_scene(scenario)?;
    let guidance = guidance_path(scenario);
    let sim = Sim::new(scenario, planner_kind, fidelity);
    let obs_cfg = &scenario.observation;
    let mut rng = run_rng(scenario.rng_seed, Phase::Teach);
    let mut mapper = Mapper::new(&scene, &scenario.mapping);

    let mut state = TrackingState::tracking(0);
    let mut observed: BTreeSet<usize> = BTreeSet::new();
    let mut ptu_cmd = PanTilt::zero();
    let mut ptu_now = PanTilt::zero();
    let mut estimate = Pose3::from_planar(guidance[0].x, guidance[0].y, guidance[0].heading, sim.height);
    let mut timing = Timing::new();
    let mut steps = Vec::with_capacity(guidance.len());
    let mut failure = None;
    let last_step = guidance.len() - 1;

    for (k, g) in guidance.iter().enumerate() {
        let robot = Pose3::from_planar(g.x, g.y, g.heading, sim.height);
        let camera = sim.ptu.camera_pose_from_robot(&robot, ptu_now);
        if k > 0 {
            let prev = &guidance[k - 1];
            let (x, y, th) = estimate.planar();
            let (x, y, th) = integrate_unicycle(x, y, th, prev.v, prev.omega, g.t - prev.t);
            estimate = Pose3::from_planar(x, y, th, sim.height);
        }
        let predicted_camera = sim.ptu.camera_pose_from_robot(&estimate, ptu_now);
        let mut inliers = 0;
        let mut localized = None;

        if mapper.keyframes.len() < 2 {
            // initialization: the first two keyframes anchor the map at the
            // true pose
            if mapper.needs_keyframe(k, &camera, &observed) {
                let new = mapper.insert_keyframe(k, g.t, camera, ptu_now, &sim.ptu, &camera, &sim.perception, &observed);
                observed.extend(new);
            }
            estimate = robot;
            localized = Some(robot);
        } else {
            let source = if observed.is_empty() {
                mapper.keyframes.last().map(|kf| kf.observed_points.clone()).unwrap_or_default()
            } else {
                observed.clone()
            };
            let local = sim.local_points(&mapper.keyframes, &mapper.points, &source);
            let observations = sim.observe(&camera, &local, &mapper.points, &mut rng);
            inliers = observations.len();
            let was_lost = !state.is_tracking();
            state = step_tracking(state, inliers, obs_cfg.theta_track);
            let mut current: Option<(Pose3, BTreeSet<usize>)> = None;
            if state.is_tracking() {
                let cam = sim.estimate_camera(&camera, &predicted_camera, &observations, &mapper.points);
                current = Some((cam, observations.iter().map(|o| o.point_id).collect()));
            } else if was_lost {
                let reloc = try_relocalize(&sim.perception, &camera, &mapper.keyframes, &mapper.points, obs_cfg.theta_reloc, sim.mode, sim.sigma, &mut rng)
                    .map(|r| (r.pose, Sim::unique_features(r.observed, &mapper.points)))
                    .filter(|(_, seen)| seen.len() >= obs_cfg.theta_reloc);
                if let Some((pose, seen)) = reloc {
                    state = state.relocalized(seen.len());
                    inliers = seen.len();
                    let cam = match fidelity {
                        Fidelity::Ideal => camera,
                        Fidelity::Noisy => pose,
                    };
                    current = Some((cam, seen));
                }
            }
            if let Some((cam, mut seen)) = current {
                if mapper.needs_keyframe(k, &cam, &seen) || k == last_step {
                    let new = mapper.insert_keyframe(k, g.t, cam, ptu_now, &sim.ptu, &camera, &sim.perception, &seen);
                    seen.extend(new);
                }
                observed = seen;
                estimate = sim.ptu.robot_pose_from_camera(&cam, ptu_now);
                localized = Some(estimate);
            } else if state.steps_lost > sim.max_lost() || k == last_step {
                failure = Some(FailureCause::TeachMapGap);
            }
        }

        steps.push(StepLog {
            t: g.t,
            robot_pose: robot,
            camera_pose: camera,
            ptu_angles: ptu_now,
            estimate: localized,
            inliers,
            tracking: localized.is_some(),
            reference: None,
        });
        if failure.is_some() {
            break;
        }
        if localized.is_some() && k % scenario.plan_every_steps == 0 {
            let local = sim.local_points(&mapper.keyframes, &mapper.points, &observed);
            let (q, elapsed) = sim.plan(&estimate, ptu_cmd, &local);
            ptu_cmd = q;
            if planner_kind != PlannerKind::Passive {
                timing.add(elapsed);
            }
        }
        ptu_now = slew(ptu_now, ptu_cmd, sim.slew_step);
    }

    let trajectory: Vec<TimedPose> = steps.iter().map(|s| TimedPose { t: s.t, pose: s.robot_pose }).collect();
    let guide_poses: Vec<Pose3> = guidance.iter().map(|g| Pose3::from_planar(g.x, g.y, g.heading, sim.height)).collect();
    let completion_rate = completion_rate(&trajectory, &guide_poses).unwrap_or(0.0);
    let path_length = polyline_length(&planar_polyline(guide_poses.iter()));
    let result = RunResult {
        phase: Phase::Teach,
        planner: planner_kind,
        fidelity,
        completed: failure.is_none(),
        completion_rate: if failure.is_none() { 1.0 } else { completion_rate },
        failure_cause: failure,
        inlier_series: steps.iter().map(|s| s.inliers).collect(),
        trajectory: trajectory.clone(),
        planner_time_mean: timing.mean(),
        planner_calls: timing.calls,
        steps,
        path_length,
    };
    let taught = TaughtPath {
        planner: planner_kind,
        key_robot_poses: mapper.key_robot_poses,
        keyframes: mapper.keyframes,
        map_points: mapper.points,
        trajectory,
    };
    Ok((taught, result))
}

/// Starting pose of a repeat: the first key pose shifted left and rotated by
/// the configured offsets.
pub fn repeat_start(taught: &TaughtPath, config: &ControllerConfig) -> Pose3 {
    let first = taught.key_robot_poses[0];
    let (x, y, th) = first.planar();
    let lat = config.init_lateral_offset;
    Pose3::from_planar(
        x - th.sin() * lat,
        y + th.cos() * lat,
        th + config.init_heading_offset_deg.to_radians(),
        first.translation.z,
    )
}

/// Repeats a taught path on the frozen map.
pub fn repeat(
    taught: &TaughtPath,
    scenario: &Scenario,
    planner_kind: PlannerKind,
    fidelity: Fidelity,
) -> Result<RunResult> {
    repeat_from(taught, scenario, planner_kind, fidelity, repeat_start(taught, &scenario.controller))
}

pub fn repeat_from(
    taught: &TaughtPath,
    scenario: &Scenario,
    planner_kind: PlannerKind,
    fidelity: Fidelity,
    start: Pose3,
) -> Result<RunResult> {
    scenario.validate()?;
    let ctl = &scenario.controller;
    ctl.gains.validate()?;
    let polyline = taught.polyline();
    if taught.keyframes.is_empty() || polyline.len() < 2 {
        return Err(Error::ShortTrajectory);
    }
    let sim = Sim::new(scenario, planner_kind, fidelity);
    let obs_cfg = &scenario.observation;
    let dt = scenario.dt();
    let keys = &taught.key_robot_poses;
    let points = &taught.map_points;
    let mut rng = run_rng(scenario.rng_seed, Phase::Repeat);
    let mut tracker = ProgressTracker::new(polyline);
    let path_length = tracker.total();
    let max_steps = ((taught.duration() / dt) * ctl.step_limit_factor).ceil() as usize + 400;

    let mut robot = RobotState {
        pose: Pose3::from_planar(start.planar().0, start.planar().1, start.planar().2, sim.height),
        linear_velocity: 0.0,
        angular_velocity: 0.0,
    };
    let mut ptu_cmd = taught.keyframes[0].ptu_angles;
    let mut ptu_now = ptu_cmd;
    let mut state = TrackingState::lost();
    let mut observed: BTreeSet<usize> = BTreeSet::new();
    let mut estimate = robot.pose;
    let mut reference = 0usize;
    let mut prev_error: Option<PoseError> = None;
    let mut timing = Timing::new();
    let mut steps = Vec::new();
    let mut failure = None;
    let mut completed = false;

    for k in 0..max_steps {
        let t = k as f64 * dt;
        let camera = sim.ptu.camera_pose_from_robot(&robot.pose, ptu_now);
        let predicted_camera = sim.ptu.camera_pose_from_robot(&estimate, ptu_now);
        let was_lost = !state.is_tracking();
        let mut inliers = 0;
        let mut current: Option<(Pose3, BTreeSet<usize>)> = None;
        if !observed.is_empty() {
            let local = sim.local_points(&taught.keyframes, points, &observed);
            let observations = sim.observe(&camera, &local, points, &mut rng);
            inliers = observations.len();
            state = step_tracking(state, inliers, obs_cfg.theta_track);
            if state.is_tracking() {
                let cam = sim.estimate_camera(&camera, &predicted_camera, &observations, points);
                current = Some((cam, observations.iter().map(|o| o.point_id).collect()));
            }
        } else {
            state = step_tracking(state, 0, obs_cfg.theta_track.max(1));
        }
        if current.is_none() && (was_lost || observed.is_empty()) {
            let reloc = try_relocalize(&sim.perception, &camera, &taught.keyframes, points, obs_cfg.theta_reloc, sim.mode, sim.sigma, &mut rng)
                .map(|r| (r.pose, Sim::unique_features(r.observed, points)))
                .filter(|(_, seen)| seen.len() >= obs_cfg.theta_reloc);
            if let Some((pose, seen)) = reloc {
                state = state.relocalized(seen.len());
                inliers = seen.len();
                let cam = match fidelity {
                    Fidelity::Ideal => camera,
                    Fidelity::Noisy => pose,
                };
                current = Some((cam, seen));
            }
        }

        let mut v = 0.0;
        let mut omega = 0.0;
        let localized = current.is_some();
        if let Some((cam, seen)) = current {
            observed = seen;
            estimate = sim.ptu.robot_pose_from_camera(&cam, ptu_now);
            let next = reference_search_with(&estimate, keys, reference, ctl.reference_window, ctl.min_lookahead);
            if next != reference {
                prev_error = None;
                reference = next;
            }
            let cmd = pd_control(&keys[reference], &estimate, prev_error, ctl, dt);
            prev_error = Some(cmd.error);
            v = cmd.v;
            omega = cmd.omega;
            if k % scenario.plan_every_steps == 0 {
                let local = sim.local_points(&taught.keyframes, points, &observed);
                let (q, elapsed) = sim.plan(&estimate, ptu_cmd, &local);
                ptu_cmd = q;
                if planner_kind != PlannerKind::Passive {
                    timing.add(elapsed);
                }
            }
        } else {
            prev_error = None;
        }

        steps.push(StepLog {
            t,
            robot_pose: robot.pose,
            camera_pose: camera,
            ptu_angles: ptu_now,
            estimate: localized.then_some(estimate),
            inliers,
            tracking: localized,
            reference: localized.then_some(reference),
        });
        let p = robot.pose.translation;
        let lateral = tracker.update(Vector2::new(p.x, p.y));
        let goal = keys[keys.len() - 1].translation;
        if reference == keys.len() - 1 && (Vector2::new(p.x - goal.x, p.y - goal.y)).norm() < ctl.goal_tolerance {
            completed = true;
            break;
        }
        if lateral > ctl.deviation_limit {
            failure = Some(FailureCause::Deviation);
            break;
        }
        if state.steps_lost > ctl.lost_timeout_steps {
            failure = Some(FailureCause::TrackingLostTimeout);
            break;
        }
        robot.step(v, omega, ctl.v_max, ctl.omega_max, dt);
        ptu_now = slew(ptu_now, ptu_cmd, sim.slew_step);
        if !localized {
            // the planner's last command keeps executing while lost
            estimate = robot.pose;
        }
    }
    if !completed && failure.is_none() {
        failure = Some(FailureCause::Stalled);
    }
    let completion_rate = if completed {
        1.0
    } else if path_length > 0.0 {
        (tracker.progress() / path_length).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(RunResult {
        phase: Phase::Repeat,
        planner: planner_kind,
        fidelity,
        completed,
        completion_rate,
        failure_cause: failure,
        trajectory: steps.iter().map(|s| TimedPose { t: s.t, pose: s.robot_pose }).collect(),
        planner_time_mean: timing.mean(),
        planner_calls: timing.calls,
        inlier_series: steps.iter().map(|s| s.inliers).collect(),
        steps,
        path_length,
    })
}

/// `timestamp tx ty tz qx qy qz qw` lines.
pub fn format_tum(trajectory: &[TimedPose]) -> String {
    let mut out = String::with_capacity(trajectory.len() * 96);
    for p in trajectory {
        let t = p.pose.translation;
        let q = p.pose.quaternion_xyzw();
        out.push_str(&format!(
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
            p.t, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        ));
    }
    out
}

pub fn parse_tum(text: &str, origin: &str) -> Result<Vec<TimedPose>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let values = values.map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: format!("line {}: {e}", n + 1),
        })?;
        if values.len() != 8 {
            return Err(Error::Parse {
                path: origin.to_string(),
                message: format!("line {}: expected 8 fields, found {}", n + 1, values.len()),
            });
        }
        out.push(TimedPose {
            t: values[0],
            pose: Pose3::from_quaternion_xyzw(
                [values[4], values[5], values[6], values[7]],
                Vector3::new(values[1], values[2], values[3]),
            ),
        });
    }
    Ok(out)
}

pub fn write_tum(path: &Path, trajectory: &[TimedPose]) -> Result<()> {
    fs::write(path, format_tum(trajectory))?;
    Ok(())
}

pub fn read_tum(path: &Path) -> Result<Vec<TimedPose>> {
    let text = fs::read_to_string(path)?;
    parse_tum(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Wall;
    use approx::assert_relative_eq;

    fn tp(t: f64, x: f64, y: f64) -> TimedPose {
        TimedPose { t, pose: Pose3::from_planar(x, y, 0.0, 0.0) }
    }

    fn line_poses(xs: &[(f64, f64)]) -> Vec<Pose3> {
        xs.iter().map(|&(x, y)| Pose3::from_planar(x, y, 0.0, 0.0)).collect()
    }

    #[test]
    fn unicycle_straight_and_arc() {
        let (x, y, th) = integrate_unicycle(0.0, 0.0, 0.0, 1.0, 0.0, 2.0);
        assert_relative_eq!(x, 2.0);
        assert_relative_eq!(y, 0.0);
        assert_relative_eq!(th, 0.0);
        // quarter circle of radius 1
        let w = std::f64::consts::FRAC_PI_2;
        let (x, y, th) = integrate_unicycle(0.0, 0.0, 0.0, w, w, 1.0);
        assert_relative_eq!(x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(th, w, epsilon = 1e-12);
        let mut s = RobotState::new(0.0, 0.0, 0.0, 0.5);
        s.step(3.0, -4.0, 1.0, 1.5, 0.1);
        assert_eq!(s.linear_velocity, 1.0);
        assert_eq!(s.angular_velocity, -1.5);
    }

    #[test]
    fn pd_zero_error() {
        let c = ControllerConfig::default();
        let p = Pose3::from_planar(1.0, 2.0, 0.3, 0.5);
        let cmd = pd_control(&p, &p, None, &c, 0.05);
        assert_eq!((cmd.v, cmd.omega), (0.0, 0.0));
    }

    #[test]
    fn pd_pure_heading() {
        let c = ControllerConfig::default();
        let est = Pose3::from_planar(0.0, 0.0, 0.0, 0.0);
        let reference = Pose3::from_planar(0.0, 0.0, 10f64.to_radians(), 0.0);
        let e = pose_error(&reference, &est);
        let cmd = pd_control(&reference, &est, Some(e), &c, 0.05);
        assert_eq!(cmd.v, 0.0);
        assert_relative_eq!(cmd.omega, 1.5 * 10f64.to_radians(), epsilon = 1e-15);
    }

    #[test]
    fn pd_scripted_sequence() {
        let c = ControllerConfig::default();
        let dt = 0.05;
        let est = Pose3::from_planar(0.0, 0.0, 0.0, 0.0);
        // (longitudinal, lateral, heading) errors over three steps
        let seq = [(0.5, 0.1, 0.2), (0.4, 0.05, 0.1), (0.3, -0.02, 0.05)];
        let mut prev = None;
        let mut prev_e: Option<(f64, f64, f64)> = None;
        for &(el, ea, eh) in &seq {
            let reference = Pose3::from_planar(el, ea, eh, 0.0);
            let cmd = pd_control(&reference, &est, prev, &c, dt);
            let (dl, dh) = match prev_e {
                Some((pl, _, ph)) => ((el - pl) / dt, (eh - ph) / dt),
                None => (0.0, 0.0),
            };
            let v = (0.8 * el + 0.1 * dl).clamp(0.0, 1.0);
            let w = (1.5 * eh + 0.1 * dh + 2.0 * ea).clamp(-1.5, 1.5);
            assert_relative_eq!(cmd.v, v, epsilon = 1e-12);
            assert_relative_eq!(cmd.omega, w, epsilon = 1e-12);
            prev = Some(cmd.error);
            prev_e = Some((el, ea, eh));
        }
        // hand values for the last step: v = 0.24 - 0.2 = 0.04,
        // ω = 0.075 - 0.1 - 0.04 = -0.065
        let reference = Pose3::from_planar(0.3, -0.02, 0.05, 0.0);
        let prev = pose_error(&Pose3::from_planar(0.4, 0.05, 0.1, 0.0), &est);
        let cmd = pd_control(&reference, &est, Some(prev), &c, dt);
        assert_relative_eq!(cmd.v, 0.04, epsilon = 1e-12);
        assert_relative_eq!(cmd.omega, -0.065, epsilon = 1e-12);
    }

    fn straight_keys(n: usize, spacing: f64) -> Vec<Pose3> {
        (0..n).map(|i| Pose3::from_planar(i as f64 * spacing, 0.0, 0.0, 0.5)).collect()
    }

    #[test]
    fn reference_search_examples() {
        let keys = straight_keys(30, 0.3);
        assert_eq!(reference_search(&keys[7], &keys, 7), 8);
        let end = keys[29];
        assert_eq!(reference_search(&end, &keys, 29), 29);
        // beyond the window: the nearest ahead (index 3) is outside [10, 20)
        let behind = Pose3::from_planar(0.5, 0.0, 0.0, 0.5);
        let r = reference_search(&behind, &keys, 15);
        assert!((10..20).contains(&r));
        assert_eq!(r, 15);
        // the result never decreases
        let back = Pose3::from_planar(0.0, 0.0, 0.0, 0.5);
        assert_eq!(reference_search(&back, &keys, 12), 12);
        assert_eq!(reference_search_with(&keys[7], &keys, 7, 10, 0.5), 9);
    }

    #[test]
    fn completion_rate_straight_midpoint() {
        let taught = line_poses(&[(0.0, 0.0), (10.0, 0.0)]);
        let traj: Vec<_> = (0..=50).map(|i| tp(i as f64, i as f64 * 0.1, 0.05)).collect();
        assert_relative_eq!(completion_rate(&traj, &taught).unwrap(), 0.5, epsilon = 1e-9);
        assert_relative_eq!(completion_rate(&traj[..1], &taught).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn completion_rate_three_segments() {
        // 4 m, 3 m, 5 m; stop 1.2 m into the second segment
        let taught = line_poses(&[(0.0, 0.0), (4.0, 0.0), (4.0, 3.0), (9.0, 3.0)]);
        let mut traj: Vec<_> = (0..=8).map(|i| tp(i as f64, i as f64 * 0.5, 0.0)).collect();
        traj.extend((1..=4).map(|i| tp(8.0 + i as f64, 4.0, i as f64 * 0.3)));
        let expected = (4.0 + 1.2) / 12.0;
        assert_relative_eq!(completion_rate(&traj, &taught).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn completion_rate_loop_does_not_jump_to_end() {
        let taught = line_poses(&[(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0), (0.0, 0.05)]);
        let traj = vec![tp(0.0, 0.0, 0.0), tp(1.0, 0.0, 0.02)];
        assert!(completion_rate(&traj, &taught).unwrap() < 0.01);
    }

    #[test]
    fn ap_rmse_cases() {
        let a: Vec<_> = (0..10).map(|i| tp(i as f64, i as f64, 0.0)).collect();
        assert_eq!(ap_rmse(&a, &a).unwrap(), 0.0);
        let shifted: Vec<_> = (0..10).map(|i| tp(2.0 * i as f64 + 5.0, i as f64, 0.3)).collect();
        assert_relative_eq!(ap_rmse(&shifted, &a).unwrap(), 0.3, epsilon = 1e-12);
        assert!(matches!(ap_rmse(&a[..1], &a), Err(Error::ShortTrajectory)));

        // taught at τ = 0, 0.5, 1; repeat at τ = 0, 0.4, 1 → pairs (0,0), (0.4→0.5), (1,1)
        let taught = vec![tp(0.0, 0.0, 0.0), tp(1.0, 1.0, 0.0), tp(2.0, 2.0, 0.0)];
        let rep = vec![tp(0.0, 0.0, 0.1), tp(4.0, 1.2, 0.0), tp(10.0, 2.0, -0.2)];
        let expected = ((0.01 + 0.04 + 0.04) / 3.0f64).sqrt();
        assert_relative_eq!(ap_rmse(&rep, &taught).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn tum_round_trip() {
        let traj = vec![
            TimedPose { t: 0.0, pose: Pose3::from_planar(1.0, 2.0, 0.3, 0.5) },
            TimedPose { t: 0.05, pose: Pose3::from_planar(1.1, 2.0, 0.31, 0.5) },
        ];
        let text = format_tum(&traj);
        assert_eq!(text.lines().count(), 2);
        let back = parse_tum(&text, "mem").unwrap();
        for (a, b) in traj.iter().zip(&back) {
            assert!(a.pose.max_abs_diff(&b.pose) < 1e-8);
        }
        assert!(parse_tum("0 1 2", "mem").is_err());
        assert!(parse_tum("# comment\n\n", "mem").unwrap().is_empty());
    }

    fn corridor(length: f64, density: f64) -> Scenario {
        let walls = vec![
            // texture faces the left of start → end
            Wall::new([-3.0, -1.5], [length + 4.0, -1.5]),
            Wall::new([length + 4.0, 1.5], [-3.0, 1.5]),
            Wall::new([length + 4.0, -1.5], [length + 4.0, 1.5]),
            Wall::new([-3.0, 1.5], [-3.0, -1.5]),
        ];
        let mut s = Scenario::new(walls, density, vec![[0.0, 0.0, 0.0], [length, 0.0, 0.0]]);
        s.rng_seed = 3;
        s
    }

    #[test]
    fn guidance_follows_waypoints() {
        let mut s = corridor(4.0, 10.0);
        s.taught_path = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2.0, 2.0, 90.0]];
        let g = guidance_path(&s);
        let last = g.last().unwrap();
        assert_relative_eq!(last.x, 2.0, epsilon = 1e-9);
        assert_relative_eq!(last.y, 2.0, epsilon = 1e-9);
        assert_relative_eq!(last.heading, std::f64::consts::FRAC_PI_2, epsilon = 1e-9);
        for w in g.windows(2) {
            let d = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
            assert!(d <= 0.5 * s.dt() + 1e-9);
        }
    }

    #[test]
    fn teach_and_repeat_textured_corridor() {
        let s = corridor(6.0, 20.0);
        let (taught, result) = teach(&s, PlannerKind::Passive, Fidelity::Ideal).unwrap();
        assert!(result.completed, "{:?}", result.failure_cause);
        assert!(taught.keyframes.len() > 5);
        assert!(taught.max_chain_residual(&s.camera.ptu()) < 1e-10);
        for p in &taught.map_points {
            assert!(p.observing_keyframes.len() >= 2);
            assert!(p.d1 < p.d2);
            assert_relative_eq!(p.mean_view_dir.norm(), 1.0, epsilon = 1e-9);
        }
        let before = taught.content_hash();
        let rep = repeat(&taught, &s, PlannerKind::Flaf, Fidelity::Ideal).unwrap();
        assert_eq!(taught.content_hash(), before);
        assert!(rep.completed, "{:?}", rep.failure_cause);
        assert!(rep.completion_rate > 0.99 && rep.completion_rate <= 1.01);
        assert!(rep.max_chain_residual(&s.camera.ptu()) < 1e-10);
        let refs = rep.reference_indices();
        assert!(refs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn teach_is_deterministic() {
        let s = corridor(3.0, 15.0);
        let (a, _) = teach(&s, PlannerKind::Flaf, Fidelity::Ideal).unwrap();
        let (b, _) = teach(&s, PlannerKind::Flaf, Fidelity::Ideal).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a, b);
    }

    #[test]
    fn straight_repeat_stays_on_line() {
        let mut s = corridor(6.0, 20.0);
        s.controller.init_lateral_offset = 0.0;
        s.controller.init_heading_offset_deg = 0.0;
        let (taught, _) = teach(&s, PlannerKind::Passive, Fidelity::Ideal).unwrap();
        let rep = repeat(&taught, &s, PlannerKind::Passive, Fidelity::Ideal).unwrap();
        assert!(rep.completed);
        let max_lat = rep.trajectory.iter().map(|p| p.pose.translation.y.abs()).fold(0.0, f64::max);
        assert!(max_lat < 0.02, "{max_lat}");
    }

    #[test]
    fn blank_corridor_fails_teaching() {
        let s = corridor(6.0, 0.0);
        let (_, result) = teach(&s, PlannerKind::Passive, Fidelity::Ideal).unwrap();
        assert!(!result.completed);
        assert_eq!(result.failure_cause, Some(FailureCause::TeachMapGap));
        assert!(result.completion_rate < 1.0);
    }
}
