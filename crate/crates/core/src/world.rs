//! Ground-truth scenes, scenario descriptions and the map built while teaching.

use std::collections::{BTreeSet, HashSet};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PanTilt, Pose3, PtuModel};
use crate::observation::ObservationConfig;
use crate::planners::PlannerConfig;
use crate::vtr::{ControllerConfig, MappingConfig};

/// Rectangular textured region along a wall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallPatch {
    /// Along-wall interval, meters from the wall start.
    pub from: f64,
    pub to: f64,
    #[serde(default)]
    pub z_min: f64,
    pub z_max: f64,
    pub density: f64,
}

/// Vertical wall standing on a 2-D segment. Texture faces the left side of
/// `start → end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub start: [f64; 2],
    pub end: [f64; 2],
    #[serde(default = "default_wall_height")]
    pub height: f64,
    /// Overrides the scenario-wide density for the whole wall.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default)]
    pub patches: Vec<WallPatch>,
}

fn default_wall_height() -> f64 {
    2.5
}

impl Wall {
    pub fn new(start: [f64; 2], end: [f64; 2]) -> Self {
        Self {
            start,
            end,
            height: default_wall_height(),
            density: None,
            patches: Vec::new(),
        }
    }

    pub fn with_density(mut self, density: f64) -> Self {
        self.density = Some(density);
        self
    }

    pub fn start2(&self) -> Vector2<f64> {
        Vector2::new(self.start[0], self.start[1])
    }

    pub fn end2(&self) -> Vector2<f64> {
        Vector2::new(self.end[0], self.end[1])
    }

    pub fn length(&self) -> f64 {
        (self.end2() - self.start2()).norm()
    }

    /// Unit normal of the textured face.
    pub fn normal(&self) -> Vector3<f64> {
        let d = (self.end2() - self.start2()) / self.length();
        Vector3::new(-d.y, d.x, 0.0)
    }

    pub fn point_at(&self, along: f64, z: f64) -> Vector3<f64> {
        let p = self.start2() + (self.end2() - self.start2()) * (along / self.length());
        Vector3::new(p.x, p.y, z)
    }

    /// Horizontal distance from `p` to the wall segment.
    pub fn distance_2d(&self, p: &Vector3<f64>) -> f64 {
        let a = self.start2();
        let ab = self.end2() - a;
        let ap = Vector2::new(p.x, p.y) - a;
        let t = (ap.dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        (ap - ab * t).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Exactly ⌊density·area⌋ points, stratified along the wall.
    #[default]
    Stratified,
    Poisson,
}

/// Waypoint `[x, y, heading_deg]`.
pub type Waypoint = [f64; 3];

fn default_sim_rate() -> f64 {
    20.0
}

fn default_plan_every() -> usize {
    5
}

fn default_mount_height() -> f64 {
    0.5
}

/// Camera and PTU hardware description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub width: f64,
    pub height: f64,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub pan_limit_deg: f64,
    pub tilt_limit_deg: f64,
    pub lever_arm: [f64; 3],
    /// Height of the PTU mount above the floor, meters.
    pub mount_height: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 480.0,
            hfov_deg: 69.0,
            vfov_deg: 42.0,
            pan_limit_deg: 30.0,
            tilt_limit_deg: 30.0,
            lever_arm: [0.0; 3],
            mount_height: default_mount_height(),
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::from_fov(
            self.width,
            self.height,
            self.hfov_deg.to_radians(),
            self.vfov_deg.to_radians(),
        )
    }

    pub fn ptu(&self) -> PtuModel {
        PtuModel {
            pan_limit: self.pan_limit_deg.to_radians(),
            tilt_limit: self.tilt_limit_deg.to_radians(),
            lever_arm: Vector3::from(self.lever_arm),
        }
    }
}

/// A complete experiment environment plus the run parameters of every module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub walls: Vec<Wall>,
    /// Default texture density for walls without their own, points/m².
    #[serde(default)]
    pub texture_density: f64,
    pub taught_path: Vec<Waypoint>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_sim_rate")]
    pub sim_rate_hz: f64,
    #[serde(default = "default_plan_every")]
    pub plan_every_steps: usize,
    #[serde(default)]
    pub sampling: SamplingMode,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub observation: ObservationConfig,
    #[serde(default)]
    pub mapping: MappingConfig,
}

impl Scenario {
    /// Minimal scenario with default module settings.
    pub fn new(walls: Vec<Wall>, texture_density: f64, taught_path: Vec<Waypoint>) -> Self {
        Self {
            name: String::new(),
            walls,
            texture_density,
            taught_path,
            rng_seed: 0,
            sim_rate_hz: default_sim_rate(),
            plan_every_steps: default_plan_every(),
            sampling: SamplingMode::default(),
            camera: CameraConfig::default(),
            planner: PlannerConfig::default(),
            controller: ControllerConfig::default(),
            observation: ObservationConfig::default(),
            mapping: MappingConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.walls.is_empty() {
            return Err(Error::InvalidScenario("wall list is empty".into()));
        }
        if self.taught_path.len() < 2 {
            return Err(Error::InvalidScenario(
                "taught_path needs at least two waypoints".into(),
            ));
        }
        for (i, w) in self.taught_path.windows(2).enumerate() {
            if (w[0][0] - w[1][0]).hypot(w[0][1] - w[1][1]) < 1e-9 {
                return Err(Error::InvalidScenario(format!(
                    "taught_path waypoints {i} and {} coincide",
                    i + 1
                )));
            }
        }
        if !(self.texture_density >= 0.0) {
            return Err(Error::InvalidScenario("texture_density must be ≥ 0".into()));
        }
        for (i, wall) in self.walls.iter().enumerate() {
            if wall.length() < 1e-9 || !(wall.height > 0.0) {
                return Err(Error::InvalidScenario(format!("wall {i} is degenerate")));
            }
            if wall.density.is_some_and(|d| !(d >= 0.0)) {
                return Err(Error::InvalidScenario(format!("wall {i} has negative density")));
            }
            for p in &wall.patches {
                if !(p.density >= 0.0) || p.to < p.from || p.z_max < p.z_min {
                    return Err(Error::InvalidScenario(format!("wall {i} has an invalid patch")));
                }
            }
        }
        if !(self.sim_rate_hz > 0.0) || self.plan_every_steps == 0 {
            return Err(Error::InvalidScenario(
                "sim_rate_hz and plan_every_steps must be positive".into(),
            ));
        }
        self.camera.intrinsics().validate()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sim_rate_hz
    }

    /// Length of the waypoint polyline.
    pub fn path_length(&self) -> f64 {
        self.taught_path
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }
}

/// Ground-truth textured surface point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePoint {
    pub id: usize,
    pub position: Vector3<f64>,
    pub surface_normal: Vector3<f64>,
    pub wall_id: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub walls: Vec<Wall>,
    pub points: Vec<ScenePoint>,
}

#[allow(clippy::too_many_arguments)]
fn sample_rect(
    wall: &Wall,
    wall_id: usize,
    (a0, a1): (f64, f64),
    (z0, z1): (f64, f64),
    density: f64,
    mode: SamplingMode,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<ScenePoint>,
) {
    let width = (a1 - a0).max(0.0);
    let height = (z1 - z0).max(0.0);
    let expected = density * width * height;
    if expected <= 0.0 {
        return;
    }
    let n = match mode {
        SamplingMode::Stratified => expected.floor() as usize,
        SamplingMode::Poisson => Poisson::new(expected)
            .map(|p| p.sample(rng) as usize)
            .unwrap_or(0),
    };
    let normal = wall.normal();
    for i in 0..n {
        let u = match mode {
            SamplingMode::Stratified => (i as f64 + rng.random::<f64>()) / n as f64,
            SamplingMode::Poisson => rng.random::<f64>(),
        };
        let v: f64 = rng.random();
        out.push(ScenePoint {
            id: out.len(),
            position: wall.point_at(a0 + u * width, z0 + v * height),
            surface_normal: normal,
            wall_id,
        });
    }
}

/// Samples texture points on every wall. Pure function of the scenario.
pub fn generate_scene(scenario: &Scenario) -> Result<Scene> {
    if scenario.walls.is_empty() {
        return Err(Error::InvalidScenario("wall list is empty".into()));
    }
    let mut points = Vec::new();
    for (wall_id, wall) in scenario.walls.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.rng_seed);
        rng.set_stream(wall_id as u64);
        let density = wall.density.unwrap_or(scenario.texture_density);
        let len = wall.length();
        sample_rect(
            wall,
            wall_id,
            (0.0, len),
            (0.0, wall.height),
            density,
            scenario.sampling,
            &mut rng,
            &mut points,
        );
        for patch in &wall.patches {
            sample_rect(
                wall,
                wall_id,
                (patch.from.max(0.0), patch.to.min(len)),
                (patch.z_min.max(0.0), patch.z_max.min(wall.height)),
                patch.density,
                scenario.sampling,
                &mut rng,
                &mut points,
            );
        }
    }
    Ok(Scene {
        walls: scenario.walls.clone(),
        points,
    })
}

const OCCLUSION_EPS: f64 = 1e-9;

/// True when the horizontal ray from `from` to `to` crosses a wall other than
/// `skip`. Heights are ignored.
pub fn ray_blocked(walls: &[Wall], from: &Vector3<f64>, to: &Vector3<f64>, skip: Option<usize>) -> bool {
    let p = Vector2::new(from.x, from.y);
    let r = Vector2::new(to.x - from.x, to.y - from.y);
    walls.iter().enumerate().any(|(i, w)| {
        if Some(i) == skip {
            return false;
        }
        let q = w.start2();
        let s = w.end2() - q;
        let denom = r.perp(&s);
        if denom.abs() < 1e-15 {
            return false;
        }
        let qp = q - p;
        let t = qp.perp(&s) / denom;
        let u = qp.perp(&r) / denom;
        t > OCCLUSION_EPS && t < 1.0 - OCCLUSION_EPS && (-OCCLUSION_EPS..=1.0 + OCCLUSION_EPS).contains(&u)
    })
}

/// A surface point is visible from `eye` when it faces the eye and no other
/// wall blocks the horizontal line of sight.
pub fn surface_visible(
    walls: &[Wall],
    eye: &Vector3<f64>,
    position: &Vector3<f64>,
    wall_id: Option<usize>,
) -> bool {
    if let Some(id) = wall_id {
        if let Some(w) = walls.get(id) {
            if w.normal().dot(&(eye - position)) <= 0.0 {
                return false;
            }
        }
    }
    !ray_blocked(walls, eye, position, wall_id)
}

/// Triangulated landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub id: usize,
    pub position: Vector3<f64>,
    /// Unit mean direction from the point toward its observing cameras.
    pub mean_view_dir: Vector3<f64>,
    pub d1: f64,
    pub d2: f64,
    pub observing_keyframes: BTreeSet<usize>,
    pub scene_point_id: usize,
    /// Wall carrying the underlying scene point (for occlusion tests).
    pub wall_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: usize,
    pub camera_pose: Pose3,
    pub ptu_angles: PanTilt,
    pub robot_pose: Pose3,
    pub timestamp: f64,
    pub observed_points: BTreeSet<usize>,
}

/// Covisible keyframes and the union of their points.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocalMap {
    pub keyframes: Vec<usize>,
    pub points: Vec<usize>,
}

impl LocalMap {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Local map of the current frame: every keyframe sharing at least one observed
/// point, plus all of those keyframes' points.
pub fn build_local_map(
    keyframes: &[Keyframe],
    points: &[MapPoint],
    current_observed: &BTreeSet<usize>,
) -> LocalMap {
    let mut kf_ids: BTreeSet<usize> = BTreeSet::new();
    for &pid in current_observed {
        if let Some(p) = points.get(pid) {
            kf_ids.extend(p.observing_keyframes.iter().copied());
        }
    }
    let mut seen = HashSet::new();
    let mut pts = Vec::new();
    for &k in &kf_ids {
        if let Some(kf) = keyframes.get(k) {
            for &pid in &kf.observed_points {
                if seen.insert(pid) {
                    pts.push(pid);
                }
            }
        }
    }
    pts.sort_unstable();
    LocalMap {
        keyframes: kf_ids.into_iter().collect(),
        points: pts,
    }
}

/// Recomputes `mean_view_dir` from the optical centers of the observing keyframes.
pub fn update_mean_view_dir(point: &MapPoint, keyframes: &[Keyframe]) -> Result<MapPoint> {
    let mut sum = Vector3::zeros();
    let mut count = 0;
    for &k in &point.observing_keyframes {
        let Some(kf) = keyframes.get(k) else { continue };
        let dir = kf.camera_pose.center() - point.position;
        let n = dir.norm();
        if n > 0.0 {
            sum += dir / n;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("map point has no observing keyframe"));
    }
    let mean = sum / count as f64;
    if mean.norm() < 1e-9 {
        return Err(Error::DegenerateNormal);
    }
    let mut out = point.clone();
    out.mean_view_dir = mean.normalize();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn kf(id: usize, center: Vector3<f64>, points: &[usize]) -> Keyframe {
        Keyframe {
            id,
            camera_pose: Pose3::from_translation(center),
            ptu_angles: PanTilt::zero(),
            robot_pose: Pose3::from_translation(center),
            timestamp: id as f64,
            observed_points: points.iter().copied().collect(),
        }
    }

    fn mp(id: usize, kfs: &[usize]) -> MapPoint {
        MapPoint {
            id,
            position: Vector3::zeros(),
            mean_view_dir: Vector3::x(),
            d1: 1.0,
            d2: 2.0,
            observing_keyframes: kfs.iter().copied().collect(),
            scene_point_id: id,
            wall_id: None,
        }
    }

    fn scenario_with(walls: Vec<Wall>, density: f64) -> Scenario {
        Scenario::new(walls, density, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    }

    #[test]
    fn zero_density_wall_is_empty() {
        let s = scenario_with(
            vec![
                Wall::new([0.0, 1.0], [5.0, 1.0]).with_density(0.0),
                Wall::new([5.0, -1.0], [0.0, -1.0]),
            ],
            10.0,
        );
        let scene = generate_scene(&s).unwrap();
        assert!(scene.points.iter().all(|p| p.wall_id == 1));
        assert_eq!(scene.points.len(), (10.0 * 5.0 * 2.5f64).floor() as usize);
    }

    #[test]
    fn deterministic_count_and_poisson_band() {
        let mut wall = Wall::new([0.0, 0.0], [2.0, 0.0]);
        wall.height = 2.0;
        let mut s = scenario_with(vec![wall], 25.0);
        assert_eq!(generate_scene(&s).unwrap().points.len(), 100);

        s.sampling = SamplingMode::Poisson;
        for seed in 0..20 {
            s.rng_seed = seed;
            let n = generate_scene(&s).unwrap().points.len() as f64;
            assert!((n - 100.0).abs() <= 30.0, "seed {seed}: {n}");
        }
    }

    #[test]
    fn scene_is_reproducible_and_on_walls() {
        let mut s = scenario_with(
            vec![
                Wall::new([5.0, 1.0], [0.0, 1.0]),
                Wall::new([0.0, -1.0], [5.0, -1.0]),
            ],
            8.0,
        );
        s.rng_seed = 42;
        s.walls[0].patches.push(WallPatch {
            from: 1.0,
            to: 2.0,
            z_min: 1.5,
            z_max: 2.0,
            density: 40.0,
        });
        let a = generate_scene(&s).unwrap();
        let b = generate_scene(&s).unwrap();
        assert_eq!(a.points, b.points);
        for p in &a.points {
            let w = &s.walls[p.wall_id];
            assert!(w.distance_2d(&p.position) < 1e-6);
            assert!((p.surface_normal.norm() - 1.0).abs() < 1e-9);
        }
        // normals face the corridor between the two walls
        assert!(a.points.iter().all(|p| p.surface_normal.dot(&(-p.position.y * Vector3::y())) > 0.0));
        s.rng_seed = 43;
        assert_ne!(generate_scene(&s).unwrap().points, a.points);
    }

    #[test]
    fn empty_walls_rejected() {
        let s = scenario_with(vec![], 1.0);
        assert!(matches!(generate_scene(&s), Err(Error::InvalidScenario(_))));
        assert!(s.validate().is_err());
    }

    #[test]
    fn validation_rejects_bad_paths() {
        let mut s = scenario_with(vec![Wall::new([0.0, 1.0], [1.0, 1.0])], 1.0);
        s.taught_path = vec![[0.0, 0.0, 0.0]];
        assert!(s.validate().is_err());
        s.taught_path = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 90.0]];
        assert!(s.validate().is_err());
        s.taught_path = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        s.texture_density = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn occlusion_by_other_wall() {
        let walls = vec![
            Wall::new([3.0, -1.0], [3.0, 1.0]), // facing -x toward the eye
            Wall::new([5.0, -1.0], [5.0, 1.0]),
        ];
        let eye = Vector3::new(0.0, 0.0, 0.5);
        let on_near = Vector3::new(3.0, 0.2, 1.0);
        let on_far = Vector3::new(5.0, 0.2, 1.0);
        assert!(surface_visible(&walls, &eye, &on_near, Some(0)));
        assert!(!surface_visible(&walls, &eye, &on_far, Some(1)));
        // back face of the near wall
        let behind = Vector3::new(6.0, 0.0, 0.5);
        assert!(!surface_visible(&walls, &behind, &on_near, Some(0)));
    }

    #[test]
    fn local_map_single_keyframe() {
        let kfs = vec![kf(0, Vector3::zeros(), &[0, 1]), kf(1, Vector3::x(), &[2, 3])];
        let pts = vec![mp(0, &[0]), mp(1, &[0]), mp(2, &[1]), mp(3, &[1])];
        let lm = build_local_map(&kfs, &pts, &[3].into_iter().collect());
        assert_eq!(lm.keyframes, vec![1]);
        assert_eq!(lm.points, vec![2, 3]);
    }

    #[test]
    fn local_map_covisible_chain_and_disjoint() {
        // KF0 and KF1 share point 1; KF2 is disjoint
        let kfs = vec![
            kf(0, Vector3::zeros(), &[0, 1]),
            kf(1, Vector3::x(), &[1, 2]),
            kf(2, Vector3::y(), &[3]),
        ];
        let pts = vec![mp(0, &[0]), mp(1, &[0, 1]), mp(2, &[1]), mp(3, &[2])];
        let lm = build_local_map(&kfs, &pts, &[1].into_iter().collect());
        assert_eq!(lm.keyframes, vec![0, 1]);
        assert_eq!(lm.points, vec![0, 1, 2]);
        assert!(build_local_map(&kfs, &pts, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn local_map_monotone_in_observations() {
        let kfs = vec![
            kf(0, Vector3::zeros(), &[0, 1]),
            kf(1, Vector3::x(), &[2]),
            kf(2, Vector3::y(), &[3, 1]),
        ];
        let pts = vec![mp(0, &[0]), mp(1, &[0, 2]), mp(2, &[1]), mp(3, &[2])];
        let mut obs = BTreeSet::new();
        let mut prev = BTreeSet::new();
        for p in [0, 2, 3, 1] {
            obs.insert(p);
            let lm = build_local_map(&kfs, &pts, &obs);
            let now: BTreeSet<_> = lm.keyframes.into_iter().collect();
            assert!(prev.is_subset(&now));
            prev = now;
        }
    }

    #[test]
    fn mean_view_dir_cases() {
        let kfs = vec![
            kf(0, Vector3::new(0.0, 3.0, 0.0), &[]),
            kf(1, Vector3::new(1.0, 1.0, 0.0), &[]),
            kf(2, Vector3::new(-1.0, 1.0, 0.0), &[]),
            kf(3, Vector3::new(2.0, 0.0, 2.0), &[]),
            kf(4, Vector3::new(0.0, -3.0, 0.0), &[]),
        ];
        let p = mp(0, &[0]);
        let one = update_mean_view_dir(&p, &kfs).unwrap();
        assert!((one.mean_view_dir - Vector3::y()).norm() < 1e-12);

        // symmetric about the x = 0 plane
        let two = update_mean_view_dir(&mp(0, &[1, 2]), &kfs).unwrap();
        assert!(two.mean_view_dir.x.abs() < 1e-12);

        // hand average of (1,1,0)/√2, (-1,1,0)/√2, (1,0,1)/√2
        let three = update_mean_view_dir(&mp(0, &[1, 2, 3]), &kfs).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let mean = Vector3::new(s, 2.0 * s, s) / 3.0;
        let expected = mean / mean.norm();
        assert_relative_eq!(three.mean_view_dir, expected, epsilon = 1e-12);

        assert!(matches!(
            update_mean_view_dir(&mp(0, &[0, 4]), &kfs),
            Err(Error::DegenerateNormal)
        ));
    }

    #[test]
    fn scenario_toml_round_trip() {
        let s = scenario_with(vec![Wall::new([0.0, 1.0], [5.0, 1.0])], 3.0);
        let text = s.to_toml_string().unwrap();
        let back = Scenario::from_toml_str(&text, "mem").unwrap();
        assert_eq!(back, s);
        let err = Scenario::from_toml_str("walls = 3", "bad.toml").unwrap_err();
        assert!(err.to_string().contains("bad.toml"));
    }
}
