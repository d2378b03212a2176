//! Frame chain of the aerial manipulator and its generalized Jacobian.
//!
//! Frames: world `W`, vehicle body `B`, manipulator base `L0`, links
//! `L1..L4` and the eye-in-hand camera `C`. Joint `i` rotates link `L_i`
//! about `joint_axes[i]` at the origin of `L_i`; the next joint sits
//! `link_lengths[i]` along the link's x axis. The camera is mounted at the
//! tip of link 4 through `camera_offset`.
//!
//! Velocities are ordered `(linear, angular)`. Vehicle velocities are in
//! the body frame and the camera velocity is expressed in the camera frame.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{skew, Pose, Rotation};

pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Jacobian = SMatrix<f64, 6, 10>;
pub type Matrix6x4 = SMatrix<f64, 6, 4>;
pub type Matrix6x2 = SMatrix<f64, 6, 2>;

pub const JOINTS: usize = 4;

/// Geometry of the 4-link arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmParameters {
    pub link_lengths: [f64; JOINTS],
    /// Unit joint axes, each in its own link frame.
    pub joint_axes: [Vector3<f64>; JOINTS],
    /// Pose of `L0` in `B`.
    pub base_offset: Pose,
    /// Pose of `C` relative to the tip of link 4 (in `L4` orientation).
    pub camera_offset: Pose,
    /// Inclusive `(min, max)` per joint, radians.
    pub joint_limits: [(f64, f64); JOINTS],
}

impl Default for ArmParameters {
    /// Yaw, pitch, pitch, roll arm hanging 8 cm under the body and pointing
    /// forward, with the camera looking straight down at the flange.
    fn default() -> Self {
        #[rustfmt::skip]
        let looking_down = Matrix3::new(
             0.0, -1.0,  0.0,
            -1.0,  0.0,  0.0,
             0.0,  0.0, -1.0,
        );
        Self {
            link_lengths: [0.10, 0.10, 0.08, 0.06],
            joint_axes: [Vector3::z(), Vector3::y(), Vector3::y(), Vector3::x()],
            base_offset: Pose::from_translation(Vector3::new(0.0, 0.0, -0.08)),
            camera_offset: Pose::from_rotation(Rotation::from_matrix_unchecked(looking_down)),
            joint_limits: [(-PI, PI); JOINTS],
        }
    }
}

impl ArmParameters {
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.link_lengths.iter().enumerate() {
            if !(l.is_finite() && *l > 0.0) {
                return Err(Error::Domain(format!("link {} length must be positive", i + 1)));
            }
        }
        for (i, a) in self.joint_axes.iter().enumerate() {
            if (a.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("joint {} axis is not unit length", i + 1)));
            }
        }
        for (i, (lo, hi)) in self.joint_limits.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::Domain(format!("joint {} limits are empty", i + 1)));
            }
        }
        for (name, p) in [("base_offset", &self.base_offset), ("camera_offset", &self.camera_offset)] {
            if Rotation::from_matrix(*p.r.matrix()).is_none() || !p.is_finite() {
                return Err(Error::Domain(format!("{name} is not a rigid transform")));
            }
        }
        Ok(())
    }

    /// Index of the first joint outside its limits.
    pub fn check_limits(&self, joint_angles: &[f64; JOINTS]) -> Result<()> {
        for (i, (&q, &(lo, hi))) in joint_angles.iter().zip(&self.joint_limits).enumerate() {
            if !(lo..=hi).contains(&q) {
                return Err(Error::JointLimit {
                    joint: i + 1,
                    angle: q,
                    min: lo,
                    max: hi,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct KinematicState {
    /// Pose of `B` in `W`.
    pub vehicle_pose: Pose,
    pub joint_angles: [f64; JOINTS],
}

/// `q = (p_dot, omega, eta_dot)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct GeneralizedVelocity {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
    pub joint_rates: Vector4<f64>,
}

impl GeneralizedVelocity {
    pub fn to_vector(&self) -> SVector<f64, 10> {
        let mut q = SVector::<f64, 10>::zeros();
        q.fixed_rows_mut::<3>(0).copy_from(&self.linear);
        q.fixed_rows_mut::<3>(3).copy_from(&self.angular);
        q.fixed_rows_mut::<4>(6).copy_from(&self.joint_rates);
        q
    }

    pub fn from_vector(q: &SVector<f64, 10>) -> Self {
        Self {
            linear: q.fixed_rows::<3>(0).into_owned(),
            angular: q.fixed_rows::<3>(3).into_owned(),
            joint_rates: q.fixed_rows::<4>(6).into_owned(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SpatialVelocity {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl SpatialVelocity {
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            linear: v.fixed_rows::<3>(0).into_owned(),
            angular: v.fixed_rows::<3>(3).into_owned(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameId {
    Body,
    Base,
    Link(usize),
    Camera,
}

/// World poses of every body-fixed frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameChain {
    pub body: Pose,
    pub base: Pose,
    pub links: [Pose; JOINTS],
    pub camera: Pose,
}

impl FrameChain {
    /// `None` for a link index outside `1..=4`.
    pub fn get(&self, frame: FrameId) -> Option<&Pose> {
        match frame {
            FrameId::Body => Some(&self.body),
            FrameId::Base => Some(&self.base),
            FrameId::Link(i) if (1..=JOINTS).contains(&i) => Some(&self.links[i - 1]),
            FrameId::Link(_) => None,
            FrameId::Camera => Some(&self.camera),
        }
    }
}

/// Generalized transformation matrix `[[R, 0], [skew(r) R, R]]` for the pose
/// `rel` of frame alpha in frame beta.
///
/// It maps `(angular, linear)` twists from alpha to beta; its transpose maps a
/// `(linear, angular)` twist of beta to the rigidly attached alpha.
pub fn generalized_transform(rel: &Pose) -> Matrix6 {
    let r = rel.r.matrix();
    let mut u = Matrix6::zeros();
    u.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    u.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    u.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&rel.t) * r));
    u
}

/// Link and camera poses relative to `B`, without limit checks.
fn body_chain(params: &ArmParameters, joint_angles: &[f64; JOINTS]) -> ([Pose; JOINTS], Pose) {
    let mut links = [Pose::identity(); JOINTS];
    let mut frame = params.base_offset;
    for i in 0..JOINTS {
        if i > 0 {
            frame = frame.compose(&link_offset(params, i - 1));
        }
        frame = frame.compose(&Pose::from_rotation(Rotation::about(
            &params.joint_axes[i],
            joint_angles[i],
        )));
        links[i] = frame;
    }
    let camera = frame
        .compose(&link_offset(params, JOINTS - 1))
        .compose(&params.camera_offset);
    (links, camera)
}

fn link_offset(params: &ArmParameters, link: usize) -> Pose {
    Pose::from_translation(Vector3::new(params.link_lengths[link], 0.0, 0.0))
}

/// Pose of the camera in the vehicle body frame.
pub fn camera_in_body(params: &ArmParameters, joint_angles: &[f64; JOINTS]) -> Pose {
    body_chain(params, joint_angles).1
}

/// World poses of `B`, `L0`, `L1..L4` and `C`.
///
/// Fails with [`Error::JointLimit`] naming the first joint outside its
/// limits.
pub fn forward_kinematics(params: &ArmParameters, state: &KinematicState) -> Result<FrameChain> {
    params.check_limits(&state.joint_angles)?;
    let body = state.vehicle_pose;
    let (links, camera) = body_chain(params, &state.joint_angles);
    Ok(FrameChain {
        body,
        base: body.compose(&params.base_offset),
        links: links.map(|l| body.compose(&l)),
        camera: body.compose(&camera),
    })
}

/// The 6x10 map from `q` to the camera velocity in the camera frame.
///
/// Columns 0..6 are `U(T_BC)^T`; column `6 + i` is `U(T_{L_i C})^T (0, a_i)`,
/// the unit rotation about joint axis `a_i` carried to the camera. Only
/// relative geometry enters, so the vehicle pose is ignored.
pub fn generalized_jacobian(params: &ArmParameters, state: &KinematicState) -> Jacobian {
    let (links, camera) = body_chain(params, &state.joint_angles);
    let mut j = Jacobian::zeros();
    j.fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&generalized_transform(&camera).transpose());
    for (i, link) in links.iter().enumerate() {
        let link_to_camera = link.inverse().compose(&camera);
        let mut joint_twist = Vector6::zeros();
        joint_twist
            .fixed_rows_mut::<3>(3)
            .copy_from(&params.joint_axes[i]);
        let column = generalized_transform(&link_to_camera).transpose() * joint_twist;
        j.set_column(6 + i, &column);
    }
    j
}

/// Arm Jacobian `J_m` in the manipulator base frame `L0`: the camera twist
/// due to joint rates, with both parts expressed in `L0`.
pub fn arm_jacobian_base(params: &ArmParameters, state: &KinematicState) -> Matrix6x4 {
    let (links, camera) = body_chain(params, &state.joint_angles);
    let base_inv = params.base_offset.inverse();
    let camera_in_base = base_inv.compose(&camera).t;
    let mut jm = Matrix6x4::zeros();
    for (i, link) in links.iter().enumerate() {
        let link_in_base = base_inv.compose(link);
        let axis = link_in_base.r.apply(&params.joint_axes[i]);
        let linear = axis.cross(&(camera_in_base - link_in_base.t));
        jm.fixed_view_mut::<3, 1>(0, i).copy_from(&linear);
        jm.fixed_view_mut::<3, 1>(3, i).copy_from(&axis);
    }
    jm
}

/// `V_C = J q`.
pub fn camera_velocity(j: &Jacobian, q: &GeneralizedVelocity) -> SpatialVelocity {
    SpatialVelocity::from_vector(&(j * q.to_vector()))
}

/// Column blocks of the generalized Jacobian used by the two servo loops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitJacobian {
    /// Arm columns, already in the camera frame (`R_bar_B^C J_m`).
    pub j_mr: Matrix6x4,
    /// Controllable vehicle columns `(v_x, v_y, v_z, w_z)`.
    pub j_s: Matrix6x4,
    /// Underactuated vehicle columns `(w_x, w_y)`.
    pub j_bar_s: Matrix6x2,
}

const J_S_COLUMNS: [usize; 4] = [0, 1, 2, 5];
const J_BAR_S_COLUMNS: [usize; 2] = [3, 4];

/// Splits `J` by column. Because `generalized_jacobian` already expresses
/// every column in the camera frame, no extra frame data is needed.
pub fn split_jacobians(j: &Jacobian) -> SplitJacobian {
    let mut j_s = Matrix6x4::zeros();
    for (k, &c) in J_S_COLUMNS.iter().enumerate() {
        j_s.set_column(k, &j.column(c));
    }
    let mut j_bar_s = Matrix6x2::zeros();
    for (k, &c) in J_BAR_S_COLUMNS.iter().enumerate() {
        j_bar_s.set_column(k, &j.column(c));
    }
    SplitJacobian {
        j_mr: j.fixed_view::<6, 4>(0, 6).into_owned(),
        j_s,
        j_bar_s,
    }
}

impl SplitJacobian {
    /// Inverse of [`split_jacobians`].
    pub fn reassemble(&self) -> Jacobian {
        let mut j = Jacobian::zeros();
        for (k, &c) in J_S_COLUMNS.iter().enumerate() {
            j.set_column(c, &self.j_s.column(k));
        }
        for (k, &c) in J_BAR_S_COLUMNS.iter().enumerate() {
            j.set_column(c, &self.j_bar_s.column(k));
        }
        j.fixed_view_mut::<6, 4>(0, 6).copy_from(&self.j_mr);
        j
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_log;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng) -> KinematicState {
        let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) - Vector3::repeat(0.5);
        KinematicState {
            vehicle_pose: Pose::new(
                Rotation::about(&axis, rng.random_range(0.0..PI)),
                Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..3.0)),
            ),
            joint_angles: std::array::from_fn(|_| rng.random_range(-2.5..2.5)),
        }
    }

    #[test]
    fn generalized_transform_examples() {
        assert_eq!(generalized_transform(&Pose::identity()), Matrix6::identity());

        let r = Rotation::about(&Vector3::new(1.0, 2.0, 3.0), 0.4);
        let u = generalized_transform(&Pose::from_rotation(r));
        assert_eq!(u.fixed_view::<3, 3>(0, 0).into_owned(), *r.matrix());
        assert_eq!(u.fixed_view::<3, 3>(3, 3).into_owned(), *r.matrix());
        assert_eq!(u.fixed_view::<3, 3>(3, 0).into_owned(), Matrix3::zeros());
        assert_eq!(u.fixed_view::<3, 3>(0, 3).into_owned(), Matrix3::zeros());

        let u = generalized_transform(&Pose::from_translation(Vector3::z()));
        assert_eq!(u.fixed_view::<3, 3>(3, 0).into_owned(), skew(&Vector3::z()));
    }

    #[test]
    fn generalized_transform_is_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = random_state(&mut rng).vehicle_pose;
            let b = random_state(&mut rng).vehicle_pose;
            let lhs = generalized_transform(&a.compose(&b));
            let rhs = generalized_transform(&a) * generalized_transform(&b);
            assert!((lhs - rhs).amax() < 1e-12);
            let inv = generalized_transform(&a) * generalized_transform(&a.inverse());
            assert!((inv - Matrix6::identity()).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_configuration_is_stretched_chain() {
        let params = ArmParameters::default();
        let chain = forward_kinematics(&params, &KinematicState::default()).unwrap();
        let reach: f64 = params.link_lengths.iter().sum();
        let expected = params
            .base_offset
            .compose(&Pose::from_translation(Vector3::new(reach, 0.0, 0.0)))
            .compose(&params.camera_offset);
        assert_relative_eq!(chain.camera.t, expected.t, epsilon = 1e-15);
        assert_relative_eq!(*chain.camera.r.matrix(), *expected.r.matrix(), epsilon = 1e-15);
        assert_eq!(chain.get(FrameId::Link(5)), None);
        assert_eq!(chain.get(FrameId::Body), Some(&Pose::identity()));
    }

    #[test]
    fn first_joint_rotates_rigidly() {
        let params = ArmParameters::default();
        let zero = forward_kinematics(&params, &KinematicState::default()).unwrap();
        let delta = 0.37;
        let mut state = KinematicState::default();
        state.joint_angles[0] = delta;
        let moved = forward_kinematics(&params, &state).unwrap();
        // Rotation about joint-1's axis through the joint-1 origin.
        let pivot = zero.links[0];
        let spin = Pose::from_rotation(Rotation::about(&params.joint_axes[0], delta));
        let expected = pivot.compose(&spin).compose(&pivot.inverse()).compose(&zero.camera);
        assert_relative_eq!(moved.camera.t, expected.t, epsilon = 1e-14);
        assert_relative_eq!(*moved.camera.r.matrix(), *expected.r.matrix(), epsilon = 1e-14);
    }

    #[test]
    fn vehicle_translation_shifts_camera() {
        let params = ArmParameters::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state = random_state(&mut rng);
        let shift = Vector3::new(0.3, -1.2, 2.0);
        let mut moved = state;
        moved.vehicle_pose.t += shift;
        let a = forward_kinematics(&params, &state).unwrap();
        let b = forward_kinematics(&params, &moved).unwrap();
        assert_relative_eq!(b.camera.t - a.camera.t, shift, epsilon = 1e-12);
    }

    #[test]
    fn joint_limit_violation_names_joint() {
        let params = ArmParameters::default();
        let mut state = KinematicState::default();
        state.joint_angles[2] = 3.5;
        match forward_kinematics(&params, &state) {
            Err(Error::JointLimit { joint, .. }) => assert_eq!(joint, 3),
            other => panic!("expected joint limit error, got {other:?}"),
        }
    }

    #[test]
    fn zero_rate_gives_zero_velocity() {
        let params = ArmParameters::default();
        let j = generalized_jacobian(&params, &KinematicState::default());
        let v = camera_velocity(&j, &GeneralizedVelocity::default());
        assert_eq!(v, SpatialVelocity::default());
    }

    #[test]
    fn vertical_vehicle_rate_in_camera_frame() {
        let params = ArmParameters::default();
        let state = KinematicState::default();
        let j = generalized_jacobian(&params, &state);
        let q = GeneralizedVelocity {
            linear: Vector3::z(),
            ..Default::default()
        };
        let v = camera_velocity(&j, &q);
        let r_bc = camera_in_body(&params, &state.joint_angles).r;
        assert_relative_eq!(v.linear, r_bc.transpose().apply(&Vector3::z()), epsilon = 1e-15);
        // Looking down: climbing moves the camera backwards along its axis.
        assert_relative_eq!(v.linear, -Vector3::z(), epsilon = 1e-15);
        assert_eq!(v.angular, Vector3::zeros());
    }

    #[test]
    fn identity_wiring_and_linearity() {
        let mut j = Jacobian::zeros();
        j.fixed_view_mut::<6, 6>(0, 0).copy_from(&Matrix6::identity());
        let q = GeneralizedVelocity {
            linear: Vector3::x(),
            ..Default::default()
        };
        assert_eq!(camera_velocity(&j, &q).linear, Vector3::x());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = generalized_jacobian(&ArmParameters::default(), &random_state(&mut rng));
        let q1 = GeneralizedVelocity::from_vector(&SVector::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        let q2 = GeneralizedVelocity::from_vector(&SVector::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        let sum = GeneralizedVelocity::from_vector(&(q1.to_vector() + q2.to_vector()));
        let lhs = camera_velocity(&j, &sum).to_vector();
        let rhs = camera_velocity(&j, &q1).to_vector() + camera_velocity(&j, &q2).to_vector();
        assert!((lhs - rhs).amax() < 1e-12);
    }

    /// Central differences of the camera pose along each generalized
    /// coordinate, with vehicle increments taken in the body frame.
    fn finite_difference_jacobian(params: &ArmParameters, state: &KinematicState, h: f64) -> Jacobian {
        let camera_at = |k: usize, step: f64| {
            let mut s = *state;
            match k {
                0..=2 => {
                    let mut d = Vector3::zeros();
                    d[k] = step;
                    s.vehicle_pose.t += s.vehicle_pose.r.apply(&d);
                }
                3..=5 => {
                    let mut d = Vector3::zeros();
                    d[k - 3] = step;
                    s.vehicle_pose.r = s.vehicle_pose.r.compose(&Rotation::exp(&d));
                }
                _ => s.joint_angles[k - 6] += step,
            }
            let (_, cam) = body_chain(params, &s.joint_angles);
            s.vehicle_pose.compose(&cam)
        };
        let reference = camera_at(0, 0.0);
        let mut j = Jacobian::zeros();
        for k in 0..10 {
            let plus = camera_at(k, h);
            let minus = camera_at(k, -h);
            let linear = reference.r.transpose().apply(&(plus.t - minus.t)) / (2.0 * h);
            let angular = rotation_log(&minus.r.transpose().compose(&plus.r)).rotation_vector() / (2.0 * h);
            j.fixed_view_mut::<3, 1>(0, k).copy_from(&linear);
            j.fixed_view_mut::<3, 1>(3, k).copy_from(&angular);
        }
        j
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let params = ArmParameters::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let state = random_state(&mut rng);
            let j = generalized_jacobian(&params, &state);
            let fd = finite_difference_jacobian(&params, &state, 1e-6);
            let err = (fd - j).amax() / (1.0 + j.amax());
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn jacobian_ignores_world_placement() {
        let params = ArmParameters::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = random_state(&mut rng);
        let mut shifted = state;
        shifted.vehicle_pose.t += Vector3::new(10.0, -4.0, 1.0);
        assert_eq!(generalized_jacobian(&params, &state), generalized_jacobian(&params, &shifted));
    }

    #[test]
    fn split_reassembles_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j = generalized_jacobian(&ArmParameters::default(), &random_state(&mut rng));
        let split = split_jacobians(&j);
        assert_eq!(split.reassemble(), j);
        assert_eq!(split.j_bar_s.column(0), j.column(3));
        assert_eq!(split.j_bar_s.column(1), j.column(4));
    }

    #[test]
    fn arm_block_is_rotated_base_jacobian() {
        let params = ArmParameters::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let state = random_state(&mut rng);
            let split = split_jacobians(&generalized_jacobian(&params, &state));
            let jm = arm_jacobian_base(&params, &state);
            let camera_in_base = params
                .base_offset
                .inverse()
                .compose(&camera_in_body(&params, &state.joint_angles));
            let r_bc = camera_in_base.r.transpose();
            let mut rbar = Matrix6::zeros();
            rbar.fixed_view_mut::<3, 3>(0, 0).copy_from(r_bc.matrix());
            rbar.fixed_view_mut::<3, 3>(3, 3).copy_from(r_bc.matrix());
            assert!((rbar * jm - split.j_mr).amax() < 1e-12);

            let eta_dot = Vector4::new(rng.random(), rng.random(), rng.random(), rng.random());
            let q = GeneralizedVelocity {
                joint_rates: eta_dot,
                ..Default::default()
            };
            let full = camera_velocity(&generalized_jacobian(&params, &state), &q).to_vector();
            assert!((split.j_mr * eta_dot - full).amax() < 1e-12);
        }
    }

    #[test]
    fn default_parameters_validate() {
        ArmParameters::default().validate().unwrap();
        let mut bad = ArmParameters::default();
        bad.link_lengths[1] = 0.0;
        assert!(bad.validate().is_err());
    }
}
