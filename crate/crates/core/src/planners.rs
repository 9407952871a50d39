//! Sampling-based next-best-view planning over a pan-tilt grid.
//!
//! Every grid planner scores each sample's camera pose against the current
//! local map and picks the argmax. The scorers differ only in the per-point
//! contribution:
//!
//! | planner        | candidate points                     | contribution        |
//! |----------------|--------------------------------------|---------------------|
//! | `flaf`         | range- and view-angle-gated (`S_r`)  | `cos α₁ · cos α₂`   |
//! | `flaf_noscore` | same `S_r`                           | `1`                 |
//! | `udvp`         | every local-map point                | `max(0, 1 − d/d_cap)` |
//! | `passive`      | none                                 | camera held forward |
//!
//! A point contributes only when it lands inside the sample's image with
//! positive depth and is not occluded. Gates and occlusion are evaluated once
//! per planning tick from the PTU mount center, which does not depend on the
//! sample.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PanTilt, Pose3, PtuModel};
use crate::observation::Perception;
use crate::world::{surface_visible, MapPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Flaf,
    FlafNoscore,
    Udvp,
    Passive,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 4] = [
        PlannerKind::Flaf,
        PlannerKind::FlafNoscore,
        PlannerKind::Udvp,
        PlannerKind::Passive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerKind::Flaf => "flaf",
            PlannerKind::FlafNoscore => "flaf_noscore",
            PlannerKind::Udvp => "udvp",
            PlannerKind::Passive => "passive",
        }
    }
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "flaf" => Ok(PlannerKind::Flaf),
            "flaf_noscore" | "flaf_no_score" => Ok(PlannerKind::FlafNoscore),
            "udvp" => Ok(PlannerKind::Udvp),
            "passive" => Ok(PlannerKind::Passive),
            other => Err(Error::Config(format!("unknown planner `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub pan_min_deg: f64,
    pub pan_max_deg: f64,
    pub tilt_min_deg: f64,
    pub tilt_max_deg: f64,
    pub step_deg: f64,
    /// Distance at which the UDVP weight reaches zero, meters.
    pub d_cap: f64,
    /// PTU slew limit in deg/s; `0` moves instantly.
    pub slew_rate_deg_s: f64,
    pub workers: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            pan_min_deg: -30.0,
            pan_max_deg: 30.0,
            tilt_min_deg: -30.0,
            tilt_max_deg: 30.0,
            step_deg: 2.0,
            d_cap: 10.0,
            slew_rate_deg_s: 0.0,
            workers: 1,
        }
    }
}

impl PlannerConfig {
    pub fn grid(&self) -> PanTiltGrid {
        PanTiltGrid {
            pan_min: self.pan_min_deg.to_radians(),
            pan_max: self.pan_max_deg.to_radians(),
            tilt_min: self.tilt_min_deg.to_radians(),
            tilt_max: self.tilt_max_deg.to_radians(),
            step: self.step_deg.to_radians(),
        }
    }
}

/// Half-open pan × tilt sampling grid, pan-major ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanTiltGrid {
    pub pan_min: f64,
    pub pan_max: f64,
    pub tilt_min: f64,
    pub tilt_max: f64,
    pub step: f64,
}

impl Default for PanTiltGrid {
    fn default() -> Self {
        PlannerConfig::default().grid()
    }
}

fn axis_count(lo: f64, hi: f64, step: f64) -> usize {
    if !(step > 0.0) || hi <= lo {
        return 0;
    }
    ((hi - lo) / step - 1e-9).ceil().max(0.0) as usize
}

impl PanTiltGrid {
    pub fn with_step_deg(step_deg: f64) -> Self {
        Self {
            step: step_deg.to_radians(),
            ..Self::default()
        }
    }

    pub fn pans(&self) -> Vec<f64> {
        (0..axis_count(self.pan_min, self.pan_max, self.step))
            .map(|i| self.pan_min + i as f64 * self.step)
            .collect()
    }

    pub fn tilts(&self) -> Vec<f64> {
        (0..axis_count(self.tilt_min, self.tilt_max, self.step))
            .map(|i| self.tilt_min + i as f64 * self.step)
            .collect()
    }

    pub fn len(&self) -> usize {
        axis_count(self.pan_min, self.pan_max, self.step)
            * axis_count(self.tilt_min, self.tilt_max, self.step)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> Vec<PanTilt> {
        let tilts = self.tilts();
        self.pans()
            .into_iter()
            .flat_map(|p| tilts.iter().map(move |&t| PanTilt::new(p, t)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub best: PanTilt,
    pub best_score: f64,
    /// Pan-major scores of every grid sample.
    pub scores: Option<Vec<f64>>,
    /// Grid index of `best`; `None` when the current angles were held.
    pub best_index: Option<usize>,
    /// Wall time of the planning call, seconds.
    pub elapsed: f64,
}

impl PlanResult {
    fn hold(current: PanTilt, scores: Option<Vec<f64>>, started: Instant) -> Self {
        Self {
            best: current,
            best_score: 0.0,
            scores,
            best_index: None,
            elapsed: started.elapsed().as_secs_f64(),
        }
    }
}

/// Everything a planner needs for one tick.
#[derive(Debug, Clone, Copy)]
pub struct PlanInput<'a> {
    pub perception: &'a Perception<'a>,
    pub ptu: &'a PtuModel,
    pub robot_pose: &'a Pose3,
    pub current: PanTilt,
}

/// `S_r`: local-map points inside their identifiability range and view-angle
/// limit as seen from the mount center, and not occluded from it.
pub fn filter_s_r<'p>(
    perception: &Perception<'_>,
    robot_pose: &Pose3,
    points: impl IntoIterator<Item = &'p MapPoint>,
) -> Vec<&'p MapPoint> {
    let eye = robot_pose.center();
    let cos_limit = perception.max_view_angle.cos();
    points
        .into_iter()
        .filter(|p| {
            let to_eye = eye - p.position;
            let dist = to_eye.norm();
            dist > 0.0
                && p.d1 <= dist
                && dist <= p.d2
                && p.mean_view_dir.dot(&to_eye) / dist >= cos_limit
                && surface_visible(perception.walls, &eye, &p.position, p.wall_id)
        })
        .collect()
}

/// Sum of `cos α₁ · cos α₂` over the points of `s_r` that a camera at
/// `sample_camera` sees unoccluded inside its image.
pub fn flaf_score(perception: &Perception<'_>, sample_camera: &Pose3, s_r: &[&MapPoint]) -> f64 {
    let eye = sample_camera.center();
    let focal = sample_camera.forward();
    let mut score = 0.0;
    for p in s_r {
        if perception.pixel_in_view(sample_camera, &p.position).is_none()
            || !surface_visible(perception.walls, &eye, &p.position, p.wall_id)
        {
            continue;
        }
        let ray = p.position - eye;
        let dist = ray.norm();
        let cos_a1 = focal.dot(&ray) / dist;
        let cos_a2 = -p.mean_view_dir.dot(&ray) / dist;
        score += cos_a1.max(0.0) * cos_a2.max(0.0);
    }
    score
}

/// Relative tolerance under which two sample scores count as tied.
pub const TIE_EPS: f64 = 1e-9;

const ANGLE_EPS: f64 = 1e-9;

fn cmp_abs(a: f64, b: f64) -> Ordering {
    if (a.abs() - b.abs()).abs() <= ANGLE_EPS {
        Ordering::Equal
    } else {
        a.abs().partial_cmp(&b.abs()).unwrap_or(Ordering::Equal)
    }
}

fn sign_rank(a: f64) -> u8 {
    u8::from(a > ANGLE_EPS)
}

/// Ordering of tied samples: smaller |pan|, then smaller |tilt|, then
/// negative pan before positive, then negative tilt before positive.
pub fn tie_order(a: PanTilt, b: PanTilt) -> Ordering {
    cmp_abs(a.pan, b.pan)
        .then_with(|| cmp_abs(a.tilt, b.tilt))
        .then_with(|| sign_rank(a.pan).cmp(&sign_rank(b.pan)))
        .then_with(|| sign_rank(a.tilt).cmp(&sign_rank(b.tilt)))
}

/// Index of the best score under the tie rule.
pub fn select_best(samples: &[PanTilt], scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        let Some(b) = best else {
            best = Some(i);
            continue;
        };
        let sb = scores[b];
        let eps = TIE_EPS * sb.abs().max(1.0);
        if s > sb + eps || ((s - sb).abs() <= eps && tie_order(samples[i], samples[b]) == Ordering::Less)
        {
            best = Some(i);
        }
    }
    best
}

/// Point prepared for the scoring kernel: offset from the mount center and a
/// per-point weight.
#[derive(Debug, Clone, Default)]
struct PreparedPoints {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    weight: Vec<f64>,
    /// Points in world coordinates, only needed with a lever arm.
    positions: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
}

impl PreparedPoints {
    fn len(&self) -> usize {
        self.weight.len()
    }

    fn push(&mut self, d: Vector3<f64>, weight: f64, position: Vector3<f64>, normal: Vector3<f64>) {
        self.dx.push(d.x);
        self.dy.push(d.y);
        self.dz.push(d.z);
        self.weight.push(weight);
        self.positions.push(position);
        self.normals.push(normal);
    }
}

/// Grid view planner.
pub struct Planner {
    pub kind: PlannerKind,
    pub grid: PanTiltGrid,
    pub d_cap: f64,
    samples: Vec<PanTilt>,
    pool: Option<rayon::ThreadPool>,
}

impl fmt::Debug for Planner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Planner")
            .field("kind", &self.kind)
            .field("grid", &self.grid)
            .field("d_cap", &self.d_cap)
            .field("workers", &self.workers())
            .finish()
    }
}

impl Planner {
    pub fn new(kind: PlannerKind, grid: PanTiltGrid, d_cap: f64) -> Self {
        Self {
            kind,
            grid,
            d_cap,
            samples: grid.samples(),
            pool: None,
        }
    }

    pub fn from_config(kind: PlannerKind, config: &PlannerConfig) -> Self {
        Self::new(kind, config.grid(), config.d_cap).with_workers(config.workers)
    }

    /// Evaluates the grid on `workers` threads (`≤ 1` runs inline).
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.pool = (workers > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("thread pool")
        });
        self
    }

    pub fn workers(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    pub fn samples(&self) -> &[PanTilt] {
        &self.samples
    }

    pub fn plan(&self, input: &PlanInput<'_>, local_points: &[&MapPoint]) -> PlanResult {
        let started = Instant::now();
        if self.kind == PlannerKind::Passive {
            return PlanResult {
                best: PanTilt::zero(),
                best_score: 0.0,
                scores: None,
                best_index: None,
                elapsed: started.elapsed().as_secs_f64(),
            };
        }
        if self.samples.is_empty() {
            return PlanResult::hold(input.current, None, started);
        }
        let prepared = self.prepare(input, local_points);
        if prepared.len() == 0 {
            return PlanResult::hold(input.current, None, started);
        }
        let scores = self.score_grid(input, &prepared);
        match select_best(&self.samples, &scores) {
            Some(i) if scores[i] > 0.0 => PlanResult {
                best: self.samples[i],
                best_score: scores[i],
                best_index: Some(i),
                scores: Some(scores),
                elapsed: started.elapsed().as_secs_f64(),
            },
            _ => PlanResult::hold(input.current, Some(scores), started),
        }
    }

    fn prepare(&self, input: &PlanInput<'_>, local_points: &[&MapPoint]) -> PreparedPoints {
        let eye = input.robot_pose.center();
        let mut out = PreparedPoints::default();
        match self.kind {
            PlannerKind::Flaf | PlannerKind::FlafNoscore => {
                for p in filter_s_r(input.perception, input.robot_pose, local_points.iter().copied()) {
                    let d = p.position - eye;
                    let w = if self.kind == PlannerKind::Flaf {
                        -p.mean_view_dir.dot(&d) / d.norm_squared()
                    } else {
                        1.0
                    };
                    out.push(d, w, p.position, p.mean_view_dir);
                }
            }
            PlannerKind::Udvp => {
                for p in local_points {
                    let d = p.position - eye;
                    let w = 1.0 - d.norm() / self.d_cap;
                    if w > 0.0
                        && surface_visible(input.perception.walls, &eye, &p.position, p.wall_id)
                    {
                        out.push(d, w, p.position, p.mean_view_dir);
                    }
                }
            }
            PlannerKind::Passive => {}
        }
        out
    }

    fn score_grid(&self, input: &PlanInput<'_>, pts: &PreparedPoints) -> Vec<f64> {
        let pans = self.grid.pans();
        let tilts = self.grid.tilts();
        let row = |pan: f64| -> Vec<f64> {
            if input.ptu.lever_arm == Vector3::zeros() {
                self.score_pan_row(input, pts, pan, &tilts)
            } else {
                self.score_pan_row_lever(input, pts, pan, &tilts)
            }
        };
        let rows: Vec<Vec<f64>> = match &self.pool {
            Some(pool) => pool.install(|| pans.par_iter().map(|&p| row(p)).collect()),
            None => pans.iter().map(|&p| row(p)).collect(),
        };
        rows.into_iter().flatten().collect()
    }

    /// Zero lever arm: every sample shares the optical center, so points are
    /// rotated into the pan frame once and each tilt is a planar rotation.
    fn score_pan_row(
        &self,
        input: &PlanInput<'_>,
        pts: &PreparedPoints,
        pan: f64,
        tilts: &[f64],
    ) -> Vec<f64> {
        let r_pan: Matrix3<f64> = input.robot_pose.rotation_matrix()
            * Rotation3::from_axis_angle(&Vector3::z_axis(), pan).into_inner();
        let m = r_pan.transpose();
        let k = &input.perception.intrinsics;
        let (u_lo, u_hi) = (-k.cx, k.width - k.cx);
        let n = pts.len();
        let mut row = RowPoints::with_capacity(n);
        for i in 0..n {
            let (x, y, z) = (pts.dx[i], pts.dy[i], pts.dz[i]);
            let xp = m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)] * z;
            let yp = m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)] * z;
            let zp = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)] * z;
            let u = -k.fx * yp;
            // No tilt brings the depth above the xz-norm, so points outside
            // the horizontal bounds at that depth never enter the image.
            let reach = (xp * xp + zp * zp).sqrt() * (1.0 + 1e-12) + 1e-300;
            if u >= u_lo * reach && u <= u_hi * reach {
                row.x.push(xp);
                row.u.push(u);
                row.z.push(zp);
                row.w.push(pts.weight[i]);
            }
        }
        let kernel = TiltKernel {
            fy: k.fy,
            u_lo,
            u_hi,
            v_lo: -k.cy,
            v_hi: k.height - k.cy,
            weighted: self.kind == PlannerKind::Flaf,
        };
        let trig: Vec<(f64, f64)> = tilts.iter().map(|t| t.sin_cos()).collect();
        kernel.row(&row, &trig)
    }

    fn score_pan_row_lever(
        &self,
        input: &PlanInput<'_>,
        pts: &PreparedPoints,
        pan: f64,
        tilts: &[f64],
    ) -> Vec<f64> {
        let per = input.perception;
        tilts
            .iter()
            .map(|&tilt| {
                let cam = input
                    .ptu
                    .camera_pose_from_robot(input.robot_pose, PanTilt::new(pan, tilt));
                let eye = cam.center();
                let focal = cam.forward();
                let mut acc = 0.0;
                for i in 0..pts.len() {
                    let pos = &pts.positions[i];
                    if per.pixel_in_view(&cam, pos).is_none() {
                        continue;
                    }
                    let ray = pos - eye;
                    let dist = ray.norm();
                    acc += match self.kind {
                        PlannerKind::Flaf => {
                            let c1 = focal.dot(&ray) / dist;
                            let c2 = -pts.normals[i].dot(&ray) / dist;
                            c1.max(0.0) * c2.max(0.0)
                        }
                        PlannerKind::FlafNoscore => 1.0,
                        _ => (1.0 - dist / self.d_cap).max(0.0),
                    };
                }
                acc
            })
            .collect()
    }
}

/// Pan-frame coordinates of the points that can reach the image at one pan;
/// `u = −fx·y`.
#[derive(Debug, Default)]
struct RowPoints {
    x: Vec<f64>,
    u: Vec<f64>,
    z: Vec<f64>,
    w: Vec<f64>,
}

impl RowPoints {
    fn with_capacity(n: usize) -> Self {
        Self {
            x: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            w: Vec::with_capacity(n),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TiltKernel {
    fy: f64,
    u_lo: f64,
    u_hi: f64,
    v_lo: f64,
    v_hi: f64,
    weighted: bool,
}

const LANES: usize = 4;

impl TiltKernel {
    fn row(&self, pts: &RowPoints, trig: &[(f64, f64)]) -> Vec<f64> {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2, checked just above.
                return unsafe { self.row_avx2(pts, trig) };
            }
        }
        self.row_generic(pts, trig)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn row_avx2(&self, pts: &RowPoints, trig: &[(f64, f64)]) -> Vec<f64> {
        self.row_generic(pts, trig)
    }

    /// Sums with a fixed lane assignment so every build and worker count
    /// adds in the same order.
    #[inline(always)]
    fn row_generic(&self, pts: &RowPoints, trig: &[(f64, f64)]) -> Vec<f64> {
        let n = pts.x.len();
        let split = n - n % LANES;
        trig.iter()
            .map(|&(s, c)| {
                let mut acc = [0.0f64; LANES];
                let chunks = pts.x[..split]
                    .chunks_exact(LANES)
                    .zip(pts.u[..split].chunks_exact(LANES))
                    .zip(pts.z[..split].chunks_exact(LANES))
                    .zip(pts.w[..split].chunks_exact(LANES));
                for (((x, u), z), w) in chunks {
                    for l in 0..LANES {
                        acc[l] += self.term(s, c, x[l], u[l], z[l], w[l]);
                    }
                }
                for i in split..n {
                    acc[0] += self.term(s, c, pts.x[i], pts.u[i], pts.z[i], pts.w[i]);
                }
                (acc[0] + acc[1]) + (acc[2] + acc[3])
            })
            .collect()
    }

    #[inline(always)]
    fn term(&self, s: f64, c: f64, xp: f64, u: f64, zp: f64, w: f64) -> f64 {
        // camera body frame: x forward, y left, z up
        let x = c * xp - s * zp;
        let z = s * xp + c * zp;
        let v = -self.fy * z;
        let inside = (x > 0.0)
            & (u >= self.u_lo * x)
            & (u <= self.u_hi * x)
            & (v >= self.v_lo * x)
            & (v <= self.v_hi * x);
        let t = if self.weighted { x * w } else { w };
        if inside {
            t
        } else {
            0.0
        }
    }
}

pub fn plan_flaf(input: &PlanInput<'_>, points: &[&MapPoint], grid: &PanTiltGrid) -> PlanResult {
    Planner::new(PlannerKind::Flaf, *grid, PlannerConfig::default().d_cap).plan(input, points)
}

pub fn plan_flaf_noscore(
    input: &PlanInput<'_>,
    points: &[&MapPoint],
    grid: &PanTiltGrid,
) -> PlanResult {
    Planner::new(PlannerKind::FlafNoscore, *grid, PlannerConfig::default().d_cap).plan(input, points)
}

pub fn plan_udvp(
    input: &PlanInput<'_>,
    points: &[&MapPoint],
    grid: &PanTiltGrid,
    d_cap: f64,
) -> PlanResult {
    Planner::new(PlannerKind::Udvp, *grid, d_cap).plan(input, points)
}

pub fn plan_passive(input: &PlanInput<'_>, points: &[&MapPoint], grid: &PanTiltGrid) -> PlanResult {
    Planner::new(PlannerKind::Passive, *grid, PlannerConfig::default().d_cap).plan(input, points)
}
