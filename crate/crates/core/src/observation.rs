//! Simulated perception: feature identifiability, frame observation, local-map
//! tracking by Gauss-Newton pose refinement, and the tracking state machine.

use std::collections::BTreeSet;

use nalgebra::{Matrix2, Matrix2x6, Matrix3, Matrix6, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{body_to_optical, CameraIntrinsics, Pose3};
use crate::world::{surface_visible, Keyframe, MapPoint, Wall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifiabilityMode {
    /// Hard view-angle gate.
    #[default]
    Deterministic,
    /// Bernoulli draw with probability `cos α₂`.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationConfig {
    pub theta_track: usize,
    pub theta_reloc: usize,
    /// Pixel noise standard deviation used in the noisy fidelity.
    pub pixel_noise_sigma: f64,
    pub identifiability_mode: IdentifiabilityMode,
    pub max_view_angle_deg: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            theta_track: 20,
            theta_reloc: 30,
            pixel_noise_sigma: 0.5,
            identifiability_mode: IdentifiabilityMode::Deterministic,
            max_view_angle_deg: 60.0,
        }
    }
}

/// Matched feature of a map point in the current image.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub point_id: usize,
    pub pixel: Vector2<f64>,
    /// Information matrix used as the weight of the squared error.
    pub information: Matrix2<f64>,
}

/// Per-gate outcome for one point and one camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateReport {
    pub in_image: bool,
    pub unoccluded: bool,
    pub in_range: bool,
    /// Angle between the mean viewing direction and the ray to the camera.
    pub view_angle: f64,
    pub distance: f64,
}

/// Camera model plus the occluding geometry of the scene.
#[derive(Debug, Clone, Copy)]
pub struct Perception<'a> {
    pub intrinsics: CameraIntrinsics,
    pub walls: &'a [Wall],
    pub max_view_angle: f64,
}

impl<'a> Perception<'a> {
    pub fn new(intrinsics: CameraIntrinsics, walls: &'a [Wall]) -> Self {
        Self {
            intrinsics,
            walls,
            max_view_angle: 60f64.to_radians(),
        }
    }

    pub fn with_max_view_angle(mut self, angle: f64) -> Self {
        self.max_view_angle = angle;
        self
    }

    /// Pixel of `position` when it has positive depth and lands in the image.
    pub fn pixel_in_view(&self, camera: &Pose3, position: &Vector3<f64>) -> Option<Vector2<f64>> {
        let optical = body_to_optical(&camera.inverse_transform_point(position));
        if optical.z <= 0.0 {
            return None;
        }
        let px = self.intrinsics.project_optical(&optical);
        self.intrinsics.in_bounds(&px).then_some(px)
    }

    pub fn gates(&self, point: &MapPoint, camera: &Pose3) -> GateReport {
        let eye = camera.center();
        let to_eye = eye - point.position;
        let distance = to_eye.norm();
        let cos_a2 = if distance > 0.0 {
            (point.mean_view_dir.dot(&to_eye) / distance).clamp(-1.0, 1.0)
        } else {
            1.0
        };
        GateReport {
            in_image: self.pixel_in_view(camera, &point.position).is_some(),
            unoccluded: surface_visible(self.walls, &eye, &point.position, point.wall_id),
            in_range: point.d1 <= distance && distance <= point.d2,
            view_angle: cos_a2.acos(),
            distance,
        }
    }

    /// Cosine of the view angle when the geometric gates (image, range,
    /// occlusion) pass.
    fn geometric_cos(&self, point: &MapPoint, camera: &Pose3) -> Option<f64> {
        let eye = camera.center();
        let to_eye = eye - point.position;
        let distance = to_eye.norm();
        if !(point.d1 <= distance && distance <= point.d2) {
            return None;
        }
        let cos_a2 = (point.mean_view_dir.dot(&to_eye) / distance).clamp(-1.0, 1.0);
        self.pixel_in_view(camera, &point.position)?;
        if !surface_visible(self.walls, &eye, &point.position, point.wall_id) {
            return None;
        }
        Some(cos_a2)
    }

    /// Deterministic identifiability: in image, unoccluded, within `[d1, d2]`
    /// and view angle at most the configured limit.
    pub fn identifiable(&self, point: &MapPoint, camera: &Pose3) -> bool {
        let eye = camera.center();
        let to_eye = eye - point.position;
        let distance = to_eye.norm();
        if !(point.d1 <= distance && distance <= point.d2) {
            return false;
        }
        let cos_a2 = (point.mean_view_dir.dot(&to_eye) / distance).clamp(-1.0, 1.0);
        if cos_a2.acos() > self.max_view_angle {
            return false;
        }
        self.geometric_cos(point, camera).is_some()
    }

    /// Identification with probability `cos α₂` once the geometric gates pass.
    pub fn identify_probabilistic(
        &self,
        point: &MapPoint,
        camera: &Pose3,
        rng: &mut impl Rng,
    ) -> bool {
        match self.geometric_cos(point, camera) {
            Some(c) => bernoulli_cos(c, rng),
            None => false,
        }
    }

    pub fn identify(
        &self,
        point: &MapPoint,
        camera: &Pose3,
        mode: IdentifiabilityMode,
        rng: &mut impl Rng,
    ) -> bool {
        match mode {
            IdentifiabilityMode::Deterministic => self.identifiable(point, camera),
            IdentifiabilityMode::Stochastic => self.identify_probabilistic(point, camera, rng),
        }
    }

    /// One observation per identified point, with optional Gaussian pixel noise.
    pub fn observe_frame<'p>(
        &self,
        camera: &Pose3,
        points: impl IntoIterator<Item = &'p MapPoint>,
        mode: IdentifiabilityMode,
        pixel_noise_sigma: f64,
        rng: &mut impl Rng,
    ) -> Vec<Observation> {
        let information = if pixel_noise_sigma > 0.0 {
            Matrix2::identity() / (pixel_noise_sigma * pixel_noise_sigma)
        } else {
            Matrix2::identity()
        };
        let noise = (pixel_noise_sigma > 0.0).then(|| Normal::new(0.0, pixel_noise_sigma).unwrap());
        let mut out = Vec::new();
        for point in points {
            if !self.identify(point, camera, mode, rng) {
                continue;
            }
            let Some(mut pixel) = self.pixel_in_view(camera, &point.position) else {
                continue;
            };
            if let Some(n) = &noise {
                pixel += Vector2::new(n.sample(rng), n.sample(rng));
                if !self.intrinsics.in_bounds(&pixel) {
                    continue;
                }
            }
            out.push(Observation {
                point_id: point.id,
                pixel,
                information,
            });
        }
        out
    }

    /// `N_S`: deterministic count of identified local-map points.
    pub fn inlier_count<'p>(
        &self,
        camera: &Pose3,
        local_points: impl IntoIterator<Item = &'p MapPoint>,
    ) -> usize {
        local_points
            .into_iter()
            .filter(|p| self.identifiable(p, camera))
            .count()
    }
}

fn bernoulli_cos(cos_a2: f64, rng: &mut impl Rng) -> bool {
    let p = cos_a2.clamp(0.0, 1.0);
    // always draw so the stream position does not depend on the outcome
    let u: f64 = rng.random();
    u < p
}

/// Observed pixel minus the predicted projection.
pub fn reprojection_error(
    k: &CameraIntrinsics,
    obs: &Observation,
    point: &MapPoint,
    camera: &Pose3,
) -> Result<Vector2<f64>> {
    let optical = body_to_optical(&camera.inverse_transform_point(&point.position));
    if optical.z <= 0.0 {
        return Err(Error::BehindCamera(optical.z));
    }
    Ok(obs.pixel - k.project_optical(&optical))
}

/// Right-multiplicative update `X ∘ (Exp(ω), v)` with `δ = (ω, v)`.
pub fn apply_tangent(pose: &Pose3, delta: &Vector6<f64>) -> Pose3 {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    pose.compose(&Pose3::new(UnitQuaternion::from_scaled_axis(w), v))
}

fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Jacobian of the reprojection error with respect to the tangent update of
/// [`apply_tangent`].
pub fn reprojection_jacobian(
    k: &CameraIntrinsics,
    camera: &Pose3,
    position: &Vector3<f64>,
) -> Result<Matrix2x6<f64>> {
    let pb = camera.inverse_transform_point(position);
    let po = body_to_optical(&pb);
    if po.z <= 0.0 {
        return Err(Error::BehindCamera(po.z));
    }
    let iz = 1.0 / po.z;
    let dproj = nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * po.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * po.y * iz * iz,
    );
    let to_optical = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let d_body = {
        let mut m = nalgebra::Matrix3x6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&pb));
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
        m
    };
    Ok(-(dproj * to_optical * d_body))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub pose: Pose3,
    pub cost: f64,
    pub iterations: usize,
    /// Cost after every accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

const REFINE_MAX_ITERS: usize = 20;
const REFINE_STEP_TOL: f64 = 1e-10;
const REFINE_MAX_HALVINGS: usize = 12;

fn weighted_cost(
    k: &CameraIntrinsics,
    pose: &Pose3,
    pairs: &[(&Observation, &MapPoint)],
) -> Result<f64> {
    let mut cost = 0.0;
    for (obs, point) in pairs {
        let e = reprojection_error(k, obs, point, pose)?;
        cost += (e.transpose() * obs.information * e)[0];
    }
    Ok(cost)
}

/// Gauss-Newton minimization of `Σ eᵀ Ω e` over the 6-DoF camera pose.
///
/// A step that increases the cost is halved until it does not; when no
/// halving helps the iteration stops with the current (best) pose.
pub fn refine_pose_report(
    k: &CameraIntrinsics,
    init: &Pose3,
    observations: &[Observation],
    points: &[MapPoint],
) -> Result<RefineReport> {
    if observations.len() < 6 {
        return Err(Error::Underconstrained(observations.len()));
    }
    let mut pairs = Vec::with_capacity(observations.len());
    for obs in observations {
        let point = points
            .iter()
            .find(|p| p.id == obs.point_id)
            .or_else(|| points.get(obs.point_id).filter(|p| p.id == obs.point_id))
            .ok_or(Error::Degenerate("observation refers to an unknown map point"))?;
        pairs.push((obs, point));
    }
    refine_pairs(k, init, &pairs)
}

pub(crate) fn refine_pairs(
    k: &CameraIntrinsics,
    init: &Pose3,
    pairs: &[(&Observation, &MapPoint)],
) -> Result<RefineReport> {
    if pairs.len() < 6 {
        return Err(Error::Underconstrained(pairs.len()));
    }
    let mut pose = *init;
    let mut cost = weighted_cost(k, &pose, pairs)?;
    let mut history = vec![cost];
    let mut iterations = 0;
    for _ in 0..REFINE_MAX_ITERS {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (obs, point) in pairs {
            let j = reprojection_jacobian(k, &pose, &point.position)?;
            let e = reprojection_error(k, obs, point, &pose)?;
            let jt_w = j.transpose() * obs.information;
            h += jt_w * j;
            g += jt_w * e;
        }
        let eig = h.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > hi * 1e-14) || !lo.is_finite() {
            return Err(Error::DegenerateGeometry);
        }
        let Some(chol) = h.cholesky() else {
            return Err(Error::DegenerateGeometry);
        };
        let delta = -chol.solve(&g);
        iterations += 1;

        let mut step = delta;
        let mut accepted = false;
        for _ in 0..REFINE_MAX_HALVINGS {
            let candidate = apply_tangent(&pose, &step);
            if let Ok(c) = weighted_cost(k, &candidate, pairs) {
                if c <= cost {
                    pose = candidate;
                    cost = c;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(cost);
        if step.norm() < REFINE_STEP_TOL {
            break;
        }
    }
    Ok(RefineReport {
        pose,
        cost,
        iterations,
        cost_history: history,
    })
}

/// Refined pose and final weighted cost.
pub fn refine_pose(
    k: &CameraIntrinsics,
    init: &Pose3,
    observations: &[Observation],
    points: &[MapPoint],
) -> Result<(Pose3, f64)> {
    refine_pose_report(k, init, observations, points).map(|r| (r.pose, r.cost))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrackingMode {
    Tracking,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackingState {
    pub mode: TrackingMode,
    pub inlier_count: usize,
    pub steps_lost: usize,
}

impl TrackingState {
    pub fn tracking(inlier_count: usize) -> Self {
        Self {
            mode: TrackingMode::Tracking,
            inlier_count,
            steps_lost: 0,
        }
    }

    pub fn lost() -> Self {
        Self {
            mode: TrackingMode::Lost,
            inlier_count: 0,
            steps_lost: 0,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.mode == TrackingMode::Tracking
    }

    /// Result of a successful relocalization with `inliers` matched points.
    pub fn relocalized(&self, inliers: usize) -> Self {
        Self::tracking(inliers)
    }
}

/// Threshold transition on the inlier count (boundary inclusive).
pub fn step_tracking(state: TrackingState, inliers: usize, theta_track: usize) -> TrackingState {
    if inliers >= theta_track {
        TrackingState::tracking(inliers)
    } else {
        TrackingState {
            mode: TrackingMode::Lost,
            inlier_count: inliers,
            steps_lost: state.steps_lost + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relocalization {
    pub pose: Pose3,
    pub keyframe: usize,
    pub observed: BTreeSet<usize>,
}

/// Place-recognition proxy: picks the keyframe whose points are best
/// identified from the true camera pose and, when it reaches `theta_reloc`,
/// refines the pose from those points starting at the keyframe pose.
#[allow(clippy::too_many_arguments)]
pub fn try_relocalize(
    perception: &Perception<'_>,
    true_camera: &Pose3,
    keyframes: &[Keyframe],
    points: &[MapPoint],
    theta_reloc: usize,
    mode: IdentifiabilityMode,
    pixel_noise_sigma: f64,
    rng: &mut impl Rng,
) -> Option<Relocalization> {
    let identified: Vec<bool> = points
        .iter()
        .map(|p| perception.identify(p, true_camera, mode, rng))
        .collect();
    let mut best: Option<(usize, usize)> = None;
    for kf in keyframes {
        let n = kf
            .observed_points
            .iter()
            .filter(|&&p| identified.get(p).copied().unwrap_or(false))
            .count();
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((kf.id, n));
        }
    }
    let (kf_id, count) = best?;
    if count < theta_reloc.max(1) {
        return None;
    }
    let kf = keyframes.iter().find(|k| k.id == kf_id)?;
    let observed: BTreeSet<usize> = kf
        .observed_points
        .iter()
        .copied()
        .filter(|&p| identified.get(p).copied().unwrap_or(false))
        .collect();
    let information = if pixel_noise_sigma > 0.0 {
        Matrix2::identity() / (pixel_noise_sigma * pixel_noise_sigma)
    } else {
        Matrix2::identity()
    };
    let noise = (pixel_noise_sigma > 0.0).then(|| Normal::new(0.0, pixel_noise_sigma).unwrap());
    let mut obs = Vec::with_capacity(observed.len());
    for &pid in &observed {
        let point = &points[pid];
        let Some(mut pixel) = perception.pixel_in_view(true_camera, &point.position) else {
            continue;
        };
        if let Some(n) = &noise {
            pixel += Vector2::new(n.sample(rng), n.sample(rng));
        }
        obs.push(Observation {
            point_id: pid,
            pixel,
            information,
        });
    }
    let pairs: Vec<_> = obs.iter().map(|o| (o, &points[o.point_id])).collect();
    let report = refine_pairs(&perception.intrinsics, &kf.camera_pose, &pairs).ok()?;
    Some(Relocalization {
        pose: report.pose,
        keyframe: kf_id,
        observed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PanTilt;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn point_at(id: usize, position: Vector3<f64>, n: Vector3<f64>, d1: f64, d2: f64) -> MapPoint {
        MapPoint {
            id,
            position,
            mean_view_dir: n.normalize(),
            d1,
            d2,
            observing_keyframes: [0, 1].into_iter().collect(),
            scene_point_id: id,
            wall_id: None,
        }
    }

    /// Map point at `distance` on the focal line whose mean view direction
    /// makes `alpha2_deg` with the ray back to the origin camera.
    fn tilted_point(alpha2_deg: f64, distance: f64) -> MapPoint {
        let a = alpha2_deg.to_radians();
        let n = Vector3::new(-a.cos(), a.sin(), 0.0);
        point_at(0, Vector3::new(distance, 0.0, 0.0), n, 2.0, 4.0)
    }

    #[test]
    fn identifiable_gate_cases() {
        let walls = [];
        let per = Perception::new(CameraIntrinsics::default(), &walls);
        let cam = Pose3::identity();
        assert!(per.identifiable(&tilted_point(0.0, 3.0), &cam));
        assert!(per.identifiable(&tilted_point(59.9, 3.0), &cam));
        assert!(!per.identifiable(&tilted_point(61.0, 3.0), &cam));
        assert!(!per.identifiable(&tilted_point(0.0, 4.0 + 1e-6), &cam));
        assert!(!per.identifiable(&tilted_point(0.0, 2.0 - 1e-6), &cam));
        let mut behind = tilted_point(0.0, 3.0);
        behind.position = -behind.position;
        behind.mean_view_dir = Vector3::x();
        assert!(!per.identifiable(&behind, &cam));
    }

    #[test]
    fn identifiable_respects_occlusion() {
        let walls = [Wall::new([1.5, -1.0], [1.5, 1.0])];
        let per = Perception::new(CameraIntrinsics::default(), &walls);
        assert!(!per.identifiable(&tilted_point(0.0, 3.0), &Pose3::identity()));
    }

    #[test]
    fn probabilistic_identification_frequencies() {
        let walls = [];
        let per = Perception::new(CameraIntrinsics::default(), &walls);
        let cam = Pose3::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..1000).all(|_| per.identify_probabilistic(&tilted_point(0.0, 3.0), &cam, &mut rng)));
        assert!((0..1000).all(|_| !per.identify_probabilistic(&tilted_point(90.0, 3.0), &cam, &mut rng)));
        for deg in [30.0, 45.0, 60.0] {
            let p = tilted_point(deg, 3.0);
            let hits = (0..100_000)
                .filter(|_| per.identify_probabilistic(&p, &cam, &mut rng))
                .count();
            let freq = hits as f64 / 1e5;
            let expected = f64::cos(f64::to_radians(deg));
            assert!((freq - expected).abs() < 0.01, "{deg}°: {freq} vs {expected}");
        }
    }

    fn hand_scene() -> (Vec<MapPoint>, Vec<Wall>) {
        // camera at origin looking +x; wall at x = 6 blocks nothing closer
        let walls = vec![Wall::new([2.5, 3.0], [2.5, 1.0])];
        let toward = |p: Vector3<f64>| -p;
        let pts = vec![
            // 0: good
            point_at(0, Vector3::new(3.0, 0.5, 0.2), toward(Vector3::new(3.0, 0.5, 0.2)), 2.0, 4.0),
            // 1: outside horizontal FoV (bearing 45° > 34.5°)
            point_at(1, Vector3::new(3.0, -3.0, 0.0), toward(Vector3::new(3.0, -3.0, 0.0)), 2.0, 5.0),
            // 2: too far
            point_at(2, Vector3::new(5.0, 0.0, 0.0), toward(Vector3::new(5.0, 0.0, 0.0)), 2.0, 4.0),
            // 3: view angle 70°
            point_at(3, Vector3::new(3.0, 0.0, 0.0), Vector3::new(-(70f64.to_radians().cos()), 70f64.to_radians().sin(), 0.0), 2.0, 4.0),
            // 4: hidden behind the wall segment at x = 2.5, y ∈ [1, 3]
            point_at(4, Vector3::new(4.0, 2.0, 0.0), toward(Vector3::new(4.0, 2.0, 0.0)), 2.0, 6.0),
        ];
        (pts, walls)
    }

    #[test]
    fn observe_frame_matches_manual_gates() {
        let (pts, walls) = hand_scene();
        let per = Perception::new(CameraIntrinsics::default(), &walls);
        let cam = Pose3::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = per.observe_frame(&cam, &pts, IdentifiabilityMode::Deterministic, 0.0, &mut rng);
        let ids: Vec<_> = obs.iter().map(|o| o.point_id).collect();
        assert_eq!(ids, vec![0]);
        // bearing atan(2/4) = 26.6° is inside the FoV, so the wall is what hides it
        assert!(per.pixel_in_view(&cam, &pts[4].position).is_some());
        assert!(!per.gates(&pts[4], &cam).unoccluded);
        let r = per.gates(&pts[3], &cam);
        assert!(r.in_image && r.in_range && r.unoccluded);
        assert_relative_eq!(r.view_angle, 70f64.to_radians(), epsilon = 1e-12);

        // exact projection when noise-free
        let px = crate::geometry::project(&per.intrinsics, &cam, &pts[0].position).unwrap();
        assert_eq!(obs[0].pixel, px.pixel);
        assert_eq!(obs[0].information, Matrix2::identity());

        assert!(per
            .observe_frame(&cam, &[], IdentifiabilityMode::Deterministic, 0.5, &mut rng)
            .is_empty());
    }

    #[test]
    fn inlier_count_cases() {
        let walls = [];
        let per = Perception::new(CameraIntrinsics::default(), &walls);
        let cam = Pose3::identity();
        assert_eq!(per.inlier_count(&cam, &[]), 0);
        // 10 points on the focal line region; 4 fail one gate each
        let mut pts: Vec<MapPoint> = (0..10)
            .map(|i| {
                let p = Vector3::new(3.0, -0.5 + 0.1 * i as f64, 0.0);
                point_at(i, p, -p, 2.0, 4.0)
            })
            .collect();
        pts[1].d2 = 2.5; // range
        pts[3].mean_view_dir = Vector3::new(0.0, 1.0, 0.0); // ~80-90° view angle
        pts[5].position.x = -3.0; // behind
        pts[7].d1 = 3.2; // range
        assert_eq!(per.inlier_count(&cam, &pts), 6);
        pts.reverse();
        assert_eq!(per.inlier_count(&cam, &pts), 6);
    }

    #[test]
    fn reprojection_error_cases() {
        let k = CameraIntrinsics::default();
        let cam = Pose3::from_planar(0.3, -0.2, 0.1, 0.5);
        let p = point_at(0, Vector3::new(4.0, 0.3, 1.0), Vector3::x(), 1.0, 9.0);
        let exact = crate::geometry::project(&k, &cam, &p.position).unwrap().pixel;
        let mut obs = Observation {
            point_id: 0,
            pixel: exact,
            information: Matrix2::identity(),
        };
        assert_eq!(reprojection_error(&k, &obs, &p, &cam).unwrap(), Vector2::zeros());
        obs.pixel += Vector2::new(1.0, -2.0);
        let e = reprojection_error(&k, &obs, &p, &cam).unwrap();
        assert_relative_eq!(e, Vector2::new(1.0, -2.0), epsilon = 1e-9);

        // scalar recomputation
        let (s, c) = 0.1f64.sin_cos();
        let (dx, dy, dz) = (4.0 - 0.3, 0.3 + 0.2, 1.0 - 0.5);
        let (bx, by, bz) = (c * dx + s * dy, -s * dx + c * dy, dz);
        let u = k.fx * (-by) / bx + k.cx;
        let v = k.fy * (-bz) / bx + k.cy;
        assert_relative_eq!(e.x, obs.pixel.x - u, epsilon = 1e-9);
        assert_relative_eq!(e.y, obs.pixel.y - v, epsilon = 1e-9);

        let back = point_at(1, Vector3::new(-4.0, 0.0, 0.5), Vector3::x(), 1.0, 9.0);
        assert!(reprojection_error(&k, &obs, &back, &cam).is_err());
    }

    pub(crate) fn ring_points(n: usize, rng: &mut impl Rng, camera: &Pose3) -> Vec<MapPoint> {
        (0..n)
            .map(|i| {
                let local = Vector3::new(
                    rng.random_range(2.0..6.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.0..1.0),
                );
                let world = camera.transform_point(&local);
                point_at(i, world, camera.center() - world, 0.5, 20.0)
            })
            .collect()
    }

    fn exact_observations(k: &CameraIntrinsics, cam: &Pose3, pts: &[MapPoint]) -> Vec<Observation> {
        pts.iter()
            .map(|p| Observation {
                point_id: p.id,
                pixel: k.project_optical(&body_to_optical(&cam.inverse_transform_point(&p.position))),
                information: Matrix2::identity(),
            })
            .collect()
    }

    #[test]
    fn refine_at_truth_is_fixed_point() {
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = Pose3::from_planar(1.0, 2.0, 0.4, 0.5);
        let pts = ring_points(30, &mut rng, &cam);
        let obs = exact_observations(&k, &cam, &pts);
        let (pose, cost) = refine_pose(&k, &cam, &obs, &pts).unwrap();
        assert!(pose.max_abs_diff(&cam) < 1e-12);
        assert!(cost < 1e-18);
    }

    #[test]
    fn refine_converges_from_perturbation() {
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cam = Pose3::from_planar(-1.0, 0.5, 1.2, 0.5);
        let pts = ring_points(30, &mut rng, &cam);
        let obs = exact_observations(&k, &cam, &pts);
        let delta = Vector6::new(0.05, -0.04, 0.06, 0.06, -0.05, 0.06);
        let init = apply_tangent(&cam, &delta);
        let report = refine_pose_report(&k, &init, &obs, &pts).unwrap();
        assert!((report.pose.center() - cam.center()).norm() < 1e-6);
        assert!(report.pose.rotation_angle_to(&cam) < 1e-6);
        assert!(report.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn refine_error_paths() {
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = Pose3::identity();
        let pts = ring_points(5, &mut rng, &cam);
        let obs = exact_observations(&k, &cam, &pts);
        assert!(matches!(refine_pose(&k, &cam, &obs, &pts), Err(Error::Underconstrained(5))));

        // every point on the optical axis: rotation about it is unobservable
        let axis: Vec<MapPoint> = (0..8)
            .map(|i| point_at(i, Vector3::new(2.0 + i as f64, 0.0, 0.0), -Vector3::x(), 0.5, 20.0))
            .collect();
        let obs = exact_observations(&k, &cam, &axis);
        assert!(matches!(refine_pose(&k, &cam, &obs, &axis), Err(Error::DegenerateGeometry)));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cam = Pose3::from_planar(0.2, 0.1, 0.3, 0.5);
        let pts = ring_points(20, &mut rng, &cam);
        let h = 1e-6;
        for p in &pts {
            let j = reprojection_jacobian(&k, &cam, &p.position).unwrap();
            let obs = Observation { point_id: p.id, pixel: Vector2::zeros(), information: Matrix2::identity() };
            for c in 0..6 {
                let mut d = Vector6::zeros();
                d[c] = h;
                let ep = reprojection_error(&k, &obs, p, &apply_tangent(&cam, &d)).unwrap();
                let em = reprojection_error(&k, &obs, p, &apply_tangent(&cam, &(-d))).unwrap();
                let fd = (ep - em) / (2.0 * h);
                let an = j.column(c);
                let denom = fd.norm().max(an.norm()).max(1e-8);
                assert!((fd - an).norm() / denom < 1e-5, "col {c}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn tracking_state_machine() {
        let s = TrackingState::tracking(50);
        assert!(step_tracking(s, 20, 20).is_tracking());
        let lost = step_tracking(s, 19, 20);
        assert_eq!(lost.mode, TrackingMode::Lost);
        assert_eq!(lost.steps_lost, 1);
        let lost2 = step_tracking(lost, 3, 20);
        assert_eq!(lost2.steps_lost, 2);
        let back = lost2.relocalized(30);
        assert!(back.is_tracking());
        assert_eq!(back.steps_lost, 0);
    }

    fn reloc_fixture(n_points: usize) -> (Vec<Keyframe>, Vec<MapPoint>, Pose3) {
        let cam = Pose3::from_planar(0.0, 0.0, 0.0, 0.5);
        let pts: Vec<MapPoint> = (0..n_points)
            .map(|i| {
                let y = -1.0 + 2.0 * (i as f64 + 0.5) / n_points as f64;
                let z = 0.5 + 0.6 * ((i * 7 % 11) as f64 / 11.0 - 0.5);
                let p = Vector3::new(4.0, y, z);
                point_at(i, p, cam.center() - p, 2.0, 6.0)
            })
            .collect();
        let kf = Keyframe {
            id: 0,
            camera_pose: cam,
            ptu_angles: PanTilt::zero(),
            robot_pose: cam,
            timestamp: 0.0,
            observed_points: (0..n_points).collect(),
        };
        (vec![kf], pts, cam)
    }

    #[test]
    fn relocalization_cases() {
        let walls = [];
        let per = Perception::new(CameraIntrinsics::default(), &walls);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let det = IdentifiabilityMode::Deterministic;

        let (kfs, pts, cam) = reloc_fixture(40);
        let r = try_relocalize(&per, &cam, &kfs, &pts, 30, det, 0.0, &mut rng).unwrap();
        assert!(r.pose.max_abs_diff(&cam) < 1e-9);
        assert_eq!(r.observed.len(), 40);

        // borderline: exactly theta_reloc identifiable points
        let (kfs, pts, cam) = reloc_fixture(30);
        assert_eq!(per.inlier_count(&cam, &pts), 30);
        assert!(try_relocalize(&per, &cam, &kfs, &pts, 30, det, 0.0, &mut rng).is_some());
        assert!(try_relocalize(&per, &cam, &kfs, &pts, 31, det, 0.0, &mut rng).is_none());

        // facing away from every point
        let away = Pose3::from_planar(0.0, 0.0, std::f64::consts::PI, 0.5);
        assert!(try_relocalize(&per, &away, &kfs, &pts, 30, det, 0.0, &mut rng).is_none());
    }
}
