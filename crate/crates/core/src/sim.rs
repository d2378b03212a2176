//! Deterministic kinematic simulator closing the servo loop.
//!
//! A [`WorldState`] holds the vehicle, arm and object. Each step observes the
//! object (directly or through the keypoint tracker), runs one servo step and
//! integrates the command with explicit Euler. Episodes are reproducible from
//! the seed in [`SimConfig`].

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Vector2, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{rotation_distance, Pose, Rotation};
use crate::kinematics::{forward_kinematics, ArmParameters, KinematicState, JOINTS};
use crate::matching::{match_keypoints, KeypointSet, DEFAULT_KEYPOINTS, DEFAULT_TAU, DEFAULT_THETA_C};
use crate::posesolve::{accumulate_pose, robust_solve, CorrespondenceSet, RobustSolveParams};
use crate::servo::{ServoAction, ServoController, ServoStatus};

/// Header of the episode CSV table.
pub const CSV_HEADER: &str = "t,vx,vy,vz,wz,eta1,eta2,eta3,eta4,theta_err,ep_norm,dropped,solve_failed";

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct WorldState {
    pub kin: KinematicState,
    pub object_pose_world: Pose,
    /// Constant world-frame velocity of the object, m/s.
    pub object_velocity: Vector3<f64>,
    /// Uncommanded roll and pitch rates `(w_x, w_y)`, rad/s.
    pub disturbance: Vector2<f64>,
    pub time: f64,
}

impl WorldState {
    pub fn camera_pose_world(&self, params: &ArmParameters) -> Result<Pose> {
        Ok(forward_kinematics(params, &self.kin)?.camera)
    }

    /// Exact object pose in the camera frame.
    pub fn object_in_camera(&self, params: &ArmParameters) -> Result<Pose> {
        Ok(self.camera_pose_world(params)?.inverse().compose(&self.object_pose_world))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Per-draw rotation angle sigma, radians.
    pub pose_rot_sigma: f64,
    /// Per-axis translation sigma, meters.
    pub pose_trans_sigma: f64,
    /// Per-axis keypoint coordinate sigma, meters.
    pub keypoint_sigma: f64,
    /// Per-component sigma added to keypoint features.
    pub feature_sigma: f64,
    pub outlier_fraction: f64,
    pub drop_probability: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            pose_rot_sigma: 0.0,
            pose_trans_sigma: 0.0,
            keypoint_sigma: 0.0,
            feature_sigma: 0.0,
            outlier_fraction: 0.0,
            drop_probability: 0.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            ("pose_rot_sigma", self.pose_rot_sigma),
            ("pose_trans_sigma", self.pose_trans_sigma),
            ("keypoint_sigma", self.keypoint_sigma),
            ("feature_sigma", self.feature_sigma),
        ];
        for (name, s) in sigmas {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Domain(format!("{name} must be a finite non-negative number")));
            }
        }
        for (name, p) in [
            ("outlier_fraction", self.outlier_fraction),
            ("drop_probability", self.drop_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Applies `times` independent pose-noise draws. Each draw rotates by a
/// Gaussian angle about a uniform axis and shifts by Gaussian translation.
pub fn perturb_pose(p: &Pose, noise: &NoiseModel, times: u32, rng: &mut impl Rng) -> Pose {
    let mut out = *p;
    for _ in 0..times {
        let axis = loop {
            let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
            let n: f64 = v.norm();
            if n > 1e-12 {
                break v / n;
            }
        };
        let z: f64 = StandardNormal.sample(rng);
        let dt = Vector3::from_fn(|_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * noise.pose_trans_sigma
        });
        out = Pose::new(Rotation::exp(&(axis * (z * noise.pose_rot_sigma))).compose(&out.r), out.t + dt);
    }
    out
}

/// Advances the world by one explicit Euler step of length `dt`.
///
/// The vehicle moves by `R_WB v dt`; its attitude turns by
/// `(w_x, w_y, w_z) dt` in the body frame with `(w_x, w_y)` taken from the
/// disturbance. Joints outside their limits are clamped and the returned
/// flag is set.
pub fn integrate_step(
    params: &ArmParameters,
    state: &WorldState,
    action: &ServoAction,
    dt: f64,
) -> Result<(WorldState, bool)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    if !(action.joint_rates.iter().chain(action.vehicle_cmd.iter()).all(|v| v.is_finite())) {
        return Err(Error::Domain("action is not finite".into()));
    }
    let body = state.kin.vehicle_pose;
    let v = action.vehicle_cmd.xyz();
    let omega = Vector3::new(state.disturbance.x, state.disturbance.y, action.vehicle_cmd[3]);
    let vehicle_pose = Pose::new(
        body.r.compose(&Rotation::exp(&(omega * dt))).renormalized(),
        body.t + body.r.apply(&v) * dt,
    );

    let mut clamped = false;
    let mut joint_angles = state.kin.joint_angles;
    for (i, a) in joint_angles.iter_mut().enumerate() {
        let (lo, hi) = params.joint_limits[i];
        let next = *a + action.joint_rates[i] * dt;
        *a = next.clamp(lo, hi);
        clamped |= *a != next;
    }

    let mut object = state.object_pose_world;
    object.t += state.object_velocity * dt;
    Ok((
        WorldState {
            kin: KinematicState { vehicle_pose, joint_angles },
            object_pose_world: object,
            time: state.time + dt,
            ..*state
        },
        clamped,
    ))
}

/// Canonical object keypoints and their identity features.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    pub points: Vec<Vector3<f64>>,
    /// One unit-norm row per point.
    pub features: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectSpec {
    pub keypoints: usize,
    pub feature_dim: usize,
    /// Half side lengths of the box, meters.
    pub half_extents: Vector3<f64>,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self {
            keypoints: DEFAULT_KEYPOINTS,
            feature_dim: 64,
            half_extents: Vector3::new(0.12, 0.08, 0.06),
        }
    }
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints < 3 || self.feature_dim == 0 {
            return Err(Error::Domain("object needs at least 3 keypoints and a feature width".into()));
        }
        if !self.half_extents.iter().all(|h| *h > 0.0 && h.is_finite()) {
            return Err(Error::Domain("box half extents must be positive".into()));
        }
        Ok(())
    }
}

fn box_surface_point(rng: &mut impl Rng, h: &Vector3<f64>) -> Vector3<f64> {
    let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
    let mut pick = rng.random_range(0.0..areas.iter().sum::<f64>());
    let mut axis = 2;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            axis = i;
            break;
        }
        pick -= a;
    }
    let mut p = Vector3::from_fn(|i, _| rng.random_range(-h[i]..=h[i]));
    p[axis] = if rng.random::<bool>() { h[axis] } else { -h[axis] };
    p
}

impl ObjectModel {
    /// Best-candidate blue-noise samples on the surface of a box, with
    /// random unit features.
    pub fn generate(spec: &ObjectSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        const CANDIDATES: usize = 10;
        let mut points: Vec<Vector3<f64>> = Vec::with_capacity(spec.keypoints);
        while points.len() < spec.keypoints {
            let mut best = box_surface_point(&mut rng, &spec.half_extents);
            if !points.is_empty() {
                let mut best_gap = f64::NEG_INFINITY;
                for _ in 0..CANDIDATES {
                    let c = box_surface_point(&mut rng, &spec.half_extents);
                    let gap = points.iter().map(|p| (p - c).norm_squared()).fold(f64::INFINITY, f64::min);
                    if gap > best_gap {
                        (best, best_gap) = (c, gap);
                    }
                }
            }
            points.push(best);
        }
        let mut features = DMatrix::from_fn(spec.keypoints, spec.feature_dim, |_, _| {
            StandardNormal.sample(&mut rng)
        });
        for mut row in features.row_iter_mut() {
            let n = row.norm();
            row /= n;
        }
        Ok(Self { points, features })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Exact object pose in the camera frame.
    pub pose: Pose,
    /// Noisy keypoints in the camera frame, slots shuffled. `None` when the
    /// frame is dropped or no object model was given.
    pub keypoints: Option<KeypointSet>,
    pub dropped: bool,
}

/// Observes the object from the current camera.
///
/// Keypoints are the canonical points mapped into the camera frame with
/// Gaussian coordinate noise; a fraction of slots is replaced by uniform
/// outliers around the object and the slot order is shuffled.
pub fn observe(
    params: &ArmParameters,
    state: &WorldState,
    model: Option<&ObjectModel>,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Result<Observation> {
    let pose = state.object_in_camera(params)?;
    if pose.t.z <= 0.0 {
        return Err(Error::Domain(format!("object is behind the camera (Z = {})", pose.t.z)));
    }
    let dropped = noise.drop_probability > 0.0 && rng.random::<f64>() < noise.drop_probability;
    let keypoints = match model {
        Some(m) if !dropped => Some(synthesize_keypoints(&pose, m, noise, rng)?),
        _ => None,
    };
    Ok(Observation { pose, keypoints, dropped })
}

/// Keypoints of `model` seen at `pose`, perturbed per `noise`.
pub fn synthesize_keypoints(
    pose: &Pose,
    model: &ObjectModel,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Result<KeypointSet> {
    let n = model.len();
    let coord_noise = Normal::new(0.0, noise.keypoint_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let feat_noise = Normal::new(0.0, noise.feature_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let extent = model.points.iter().map(|p| p.amax()).fold(0.0, f64::max) * 2.0;

    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    let outliers = (noise.outlier_fraction * n as f64).round() as usize;
    let mut coords = DMatrix::zeros(n, 3);
    let mut features = DMatrix::zeros(n, model.features.ncols());
    for (slot, &src) in slots.iter().enumerate() {
        let p = if src < outliers {
            pose.t + Vector3::from_fn(|_, _| rng.random_range(-extent..=extent))
        } else {
            let mut p = pose.transform_point(&model.points[src]);
            if noise.keypoint_sigma > 0.0 {
                p += Vector3::from_fn(|_, _| coord_noise.sample(rng));
            }
            p
        };
        coords.row_mut(slot).copy_from(&p.transpose());
        for c in 0..features.ncols() {
            let jitter = if noise.feature_sigma > 0.0 { feat_noise.sample(rng) } else { 0.0 };
            features[(slot, c)] = model.features[(src, c)] + jitter;
        }
    }
    KeypointSet::new(coords, features)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerParams {
    pub tau: f64,
    pub theta_c: f64,
    pub solve: RobustSolveParams,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            theta_c: DEFAULT_THETA_C,
            solve: RobustSolveParams::default(),
        }
    }
}

/// Frame-to-frame keypoint tracker: match, solve the inter-frame delta and
/// accumulate it onto the running pose estimate.
#[derive(Clone, Debug)]
pub struct Tracker {
    params: TrackerParams,
    estimate: Pose,
    reference: Option<KeypointSet>,
    frames: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackUpdate {
    pub pose: Pose,
    pub matches: usize,
    /// The delta could not be solved; the estimate was held.
    pub solve_failed: bool,
}

impl Tracker {
    pub fn new(initial: Pose, params: TrackerParams) -> Self {
        Self {
            params,
            estimate: initial,
            reference: None,
            frames: 0,
        }
    }

    pub fn estimate(&self) -> &Pose {
        &self.estimate
    }

    pub fn set_estimate(&mut self, pose: Pose) {
        self.estimate = pose;
    }

    /// Consumes the keypoints of a new frame. The first frame only sets the
    /// reference. On a failed solve the estimate and reference are kept, so
    /// the next delta spans the gap.
    pub fn update(&mut self, keypoints: KeypointSet) -> Result<TrackUpdate> {
        self.frames += 1;
        let Some(reference) = &self.reference else {
            self.reference = Some(keypoints);
            return Ok(TrackUpdate { pose: self.estimate, matches: 0, solve_failed: false });
        };
        let matches = match_keypoints(reference, &keypoints, self.params.tau, self.params.theta_c)?;
        let (prev, curr) = matches
            .pairs
            .iter()
            .map(|&(i, j)| (reference.point(i), keypoints.point(j)))
            .unzip();
        let pairs = CorrespondenceSet::new(prev, curr)?;
        let solve = RobustSolveParams {
            rng_seed: self.params.solve.rng_seed.wrapping_add(self.frames),
            ..self.params.solve
        };
        match robust_solve(&pairs, &solve) {
            Ok(sol) => {
                self.estimate = accumulate_pose(&sol.pose, &self.estimate);
                self.reference = Some(keypoints);
                Ok(TrackUpdate { pose: self.estimate, matches: matches.len(), solve_failed: false })
            }
            Err(Error::SolveFailed { .. } | Error::Domain(_) | Error::Degenerate(_)) => Ok(TrackUpdate {
                pose: self.estimate,
                matches: matches.len(),
                solve_failed: true,
            }),
            Err(e) => Err(e),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ObservationMode {
    /// The servo sees the exact (optionally perturbed) pose.
    #[default]
    Direct,
    /// The servo sees the keypoint tracker's estimate.
    Tracker,
}

/// Where pose noise enters the estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoseNoiseMode {
    #[default]
    Off,
    /// Only the initial estimate.
    Init,
    /// The previous estimate before every update.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub arm: ArmParameters,
    pub controller: ServoController,
    pub dt: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub initial_joints: [f64; JOINTS],
    /// Desired object pose in the camera frame.
    pub desired: Pose,
    /// Initial rotation offset of the object (rotation vector, camera frame).
    pub initial_rotation: Vector3<f64>,
    /// Initial translation offset of the object from the desired position.
    pub initial_translation: Vector3<f64>,
    pub disturbance: Vector2<f64>,
    pub target_velocity: Vector3<f64>,
    pub mode: ObservationMode,
    pub noise: NoiseModel,
    pub pose_noise: PoseNoiseMode,
    /// Number of pose-noise draws per application.
    pub pose_noise_times: u32,
    pub object: ObjectSpec,
    pub tracker: TrackerParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            arm: ArmParameters::default(),
            controller: ServoController::default(),
            dt: 0.01,
            max_steps: 10_000,
            seed: 0,
            initial_joints: [0.0, 0.3, -0.3, 0.0],
            desired: Pose::from_translation(Vector3::new(0.0, 0.0, 1.0)),
            initial_rotation: Vector3::zeros(),
            initial_translation: Vector3::zeros(),
            disturbance: Vector2::zeros(),
            target_velocity: Vector3::zeros(),
            mode: ObservationMode::Direct,
            noise: NoiseModel::default(),
            pose_noise: PoseNoiseMode::Off,
            pose_noise_times: 0,
            object: ObjectSpec::default(),
            tracker: TrackerParams::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        self.arm.check_limits(&self.initial_joints)?;
        self.controller.validate()?;
        self.noise.validate()?;
        self.object.validate()?;
        self.tracker.solve.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain("dt must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Domain("max_steps must be positive".into()));
        }
        if !(self.tracker.tau > 0.0 && (0.0..=1.0).contains(&self.tracker.theta_c)) {
            return Err(Error::Domain("tracker needs tau > 0 and theta_c in [0, 1]".into()));
        }
        if self.desired.t.z <= 0.0 {
            return Err(Error::Domain("desired pose must be in front of the camera".into()));
        }
        Ok(())
    }

    /// World state at `t = 0`: vehicle at the origin and the object placed
    /// at the desired camera-frame pose displaced by the initial offsets.
    pub fn initial_state(&self) -> Result<WorldState> {
        let kin = KinematicState {
            vehicle_pose: Pose::identity(),
            joint_angles: self.initial_joints,
        };
        let camera = forward_kinematics(&self.arm, &kin)?.camera;
        let start = Pose::new(
            Rotation::exp(&self.initial_rotation).compose(&self.desired.r),
            self.desired.t + self.initial_translation,
        );
        Ok(WorldState {
            kin,
            object_pose_world: camera.compose(&start),
            object_velocity: self.target_velocity,
            disturbance: self.disturbance,
            time: 0.0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub t: f64,
    /// `(v_x, v_y, v_z, w_z)` commanded to the vehicle.
    pub vehicle_cmd: Vector4<f64>,
    pub joint_rates: Vector4<f64>,
    pub theta_err: f64,
    pub ep_norm: f64,
    pub tracked: Pose,
    pub truth: Pose,
    pub dropped: bool,
    pub solve_failed: bool,
}

impl EpisodeRecord {
    /// Rotation (rad) and translation (m) error of the estimate.
    pub fn tracking_error(&self) -> (f64, f64) {
        (
            rotation_distance(&self.tracked.r, &self.truth.r),
            (self.tracked.t - self.truth.t).norm(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpisodeStatus {
    Converged,
    NotConverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<EpisodeRecord>,
    pub status: EpisodeStatus,
    pub joint_clamped: bool,
}

impl EpisodeLog {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn last(&self) -> Option<&EpisodeRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{}", r.t);
            for v in r.vehicle_cmd.iter().chain(r.joint_rates.iter()) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(
                out,
                ",{},{},{},{}",
                r.theta_err, r.ep_norm, r.dropped as u8, r.solve_failed as u8
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// One row of the episode CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub vehicle_cmd: [f64; 4],
    pub joint_rates: [f64; 4],
    pub theta_err: f64,
    pub ep_norm: f64,
    pub dropped: bool,
    pub solve_failed: bool,
}

/// Parses a table written by [`EpisodeLog::to_csv`].
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Format(format!("trace must start with the header `{CSV_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = n + 2;
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {line_no}: {e}")))?;
        if vals.len() != 13 {
            return Err(Error::Format(format!("line {line_no}: expected 13 fields, got {}", vals.len())));
        }
        rows.push(TraceRow {
            t: vals[0],
            vehicle_cmd: [vals[1], vals[2], vals[3], vals[4]],
            joint_rates: [vals[5], vals[6], vals[7], vals[8]],
            theta_err: vals[9],
            ep_norm: vals[10],
            dropped: vals[11] != 0.0,
            solve_failed: vals[12] != 0.0,
        });
    }
    Ok(rows)
}

/// Runs observe, estimate, servo and integrate until the controller reports
/// convergence or `max_steps` records have been written.
///
/// Frame 0 initializes the estimate and is never dropped. On a dropped frame
/// the estimate is held and the vehicle hovers (zero command); convergence is
/// only declared on a fresh frame.
pub fn run_guidance(config: &SimConfig) -> Result<EpisodeLog> {
    config.validate()?;
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(config.seed ^ config.noise.seed.rotate_left(32));
        r.set_stream(k);
        r
    };
    let (mut obs_rng, mut drop_rng, mut pose_rng) = (stream(1), stream(2), stream(3));

    let model = match config.mode {
        ObservationMode::Tracker => Some(ObjectModel::generate(&config.object, config.seed)?),
        ObservationMode::Direct => None,
    };
    let frame_noise = NoiseModel { drop_probability: 0.0, ..config.noise };
    let times = config.pose_noise_times;
    let mut state = config.initial_state()?;
    let mut tracker: Option<Tracker> = None;
    let mut estimate = Pose::identity();
    let mut records = Vec::new();
    let mut status = EpisodeStatus::NotConverged;
    let mut joint_clamped = false;

    for step in 0..config.max_steps {
        let dropped = step > 0 && config.noise.drop_probability > 0.0 && drop_rng.random::<f64>() < config.noise.drop_probability;
        let truth = state.object_in_camera(&config.arm)?;
        let mut solve_failed = false;
        if !dropped {
            let obs = observe(&config.arm, &state, model.as_ref(), &frame_noise, &mut obs_rng)?;
            let perturb_now = match config.pose_noise {
                PoseNoiseMode::Off => false,
                PoseNoiseMode::Init => step == 0,
                PoseNoiseMode::All => true,
            };
            match (&mut tracker, obs.keypoints) {
                (None, kp) => {
                    let start = if perturb_now {
                        perturb_pose(&obs.pose, &config.noise, times, &mut pose_rng)
                    } else {
                        obs.pose
                    };
                    estimate = start;
                    if let Some(kp) = kp {
                        let mut t = Tracker::new(start, config.tracker);
                        t.update(kp)?;
                        tracker = Some(t);
                    }
                }
                (Some(t), Some(kp)) => {
                    if config.pose_noise == PoseNoiseMode::All {
                        let noisy = perturb_pose(t.estimate(), &config.noise, times, &mut pose_rng);
                        t.set_estimate(noisy);
                    }
                    let up = t.update(kp)?;
                    solve_failed = up.solve_failed;
                    estimate = up.pose;
                }
                (Some(_), None) => unreachable!("tracker mode always yields keypoints on fresh frames"),
            }
            if model.is_none() && step > 0 {
                estimate = if perturb_now {
                    perturb_pose(&obs.pose, &config.noise, times, &mut pose_rng)
                } else {
                    obs.pose
                };
            }
        }

        let out = config.controller.step(&estimate, &config.desired, &config.arm, &state.kin, &state.disturbance)?;
        let (action, converged) = if dropped {
            (ServoAction::default(), false)
        } else {
            (out.action, out.status == ServoStatus::Converged)
        };
        records.push(EpisodeRecord {
            t: state.time,
            vehicle_cmd: action.vehicle_cmd,
            joint_rates: action.joint_rates,
            theta_err: out.theta,
            ep_norm: out.epsilon_p.norm(),
            tracked: estimate,
            truth,
            dropped,
            solve_failed,
        });
        if converged {
            status = EpisodeStatus::Converged;
            break;
        }
        let (next, clamped) = integrate_step(&config.arm, &state, &action, config.dt)?;
        joint_clamped |= clamped;
        state = next;
    }
    Ok(EpisodeLog { records, status, joint_clamped })
}

/// Rotation (rad) and translation (m) error between the final estimate and
/// the truth.
pub fn final_tracking_error(log: &EpisodeLog) -> Option<(f64, f64)> {
    log.last().map(EpisodeRecord::tracking_error)
}

/// Summary of one seeded episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub status: EpisodeStatus,
    pub steps: usize,
    /// Final tracking error, radians.
    pub rotation_error: f64,
    /// Final tracking error, meters.
    pub translation_error: f64,
}

/// Runs `base` once per seed, in seed order.
pub fn run_seeds(base: &SimConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<SeedOutcome>> {
    seeds
        .into_iter()
        .map(|seed| {
            let log = run_guidance(&SimConfig { seed, ..base.clone() })?;
            let (rotation_error, translation_error) = final_tracking_error(&log).unwrap_or((0.0, 0.0));
            Ok(SeedOutcome {
                seed,
                status: log.status,
                steps: log.steps(),
                rotation_error,
                translation_error,
            })
        })
        .collect()
}

/// Mean of `f` over `outcomes`.
pub fn mean_of(outcomes: &[SeedOutcome], f: impl Fn(&SeedOutcome) -> f64) -> f64 {
    outcomes.iter().map(f).sum::<f64>() / outcomes.len().max(1) as f64
}
