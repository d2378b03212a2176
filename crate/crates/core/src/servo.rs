//! Decoupled pose-based servo policy.
//!
//! The arm joints drive the rotation error `theta * u` to zero and the
//! vehicle drives the extended image coordinate `(X/Z, Y/Z, log Z)` of the
//! object toward its desired value. Roll and pitch rates of the vehicle are
//! not commandable; they enter as the measured disturbance `nabla`.

use nalgebra::{DMatrix, Dyn, Matrix3, OMatrix, SMatrix, Unit, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{rotation_log, skew, Pose, Rotation};
use crate::kinematics::{
    generalized_jacobian, split_jacobians, ArmParameters, KinematicState, Matrix6x2, Matrix6x4,
    SplitJacobian,
};

pub type InteractionMatrix = SMatrix<f64, 3, 6>;

/// Default relative truncation for pseudo-inverses.
pub const DEFAULT_PINV_TOLERANCE: f64 = 1e-10;
/// Below this angle the rotation interaction matrix is replaced by `I`.
pub const DEFAULT_THETA_SMALL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServoGains {
    /// Rotational loop gain, 1/s.
    pub lambda_r: f64,
    /// Translational loop gain, 1/s.
    pub lambda_p: f64,
}

impl Default for ServoGains {
    fn default() -> Self {
        Self {
            lambda_r: 0.25,
            lambda_p: 0.27,
        }
    }
}

impl ServoGains {
    pub fn new(lambda_r: f64, lambda_p: f64) -> Result<Self> {
        let g = Self { lambda_r, lambda_p };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_r > 0.0 && self.lambda_r.is_finite()) {
            return Err(Error::Domain("lambda_r must be positive".into()));
        }
        if !(self.lambda_p > 0.0 && self.lambda_p.is_finite()) {
            return Err(Error::Domain("lambda_p must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopThresholds {
    /// Rotation angle threshold, radians.
    pub delta_r: f64,
    /// Translation distance threshold, meters.
    pub delta_t: f64,
}

impl Default for StopThresholds {
    fn default() -> Self {
        Self {
            delta_r: 0.075,
            delta_t: 0.040,
        }
    }
}

impl StopThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_r > 0.0 && self.delta_t > 0.0) {
            return Err(Error::Domain("stop thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// `epsilon_r = theta * u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationalErrorState {
    pub epsilon_r: Vector3<f64>,
    pub theta: f64,
    pub u: Unit<Vector3<f64>>,
}

impl RotationalErrorState {
    /// Same error with its axis re-expressed through `r` (`u -> r u`).
    pub fn rotated(&self, r: &Rotation) -> Self {
        let u = Unit::new_unchecked(r.apply(&self.u));
        Self {
            epsilon_r: u.into_inner() * self.theta,
            theta: self.theta,
            u,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TranslationalErrorState {
    pub epsilon_p: Vector3<f64>,
}

/// One servo command.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ServoAction {
    /// Joint rates, rad/s.
    pub joint_rates: Vector4<f64>,
    /// `(v_x, v_y, v_z, w_z)` in the body frame.
    pub vehicle_cmd: Vector4<f64>,
}

impl ServoAction {
    pub fn is_zero(&self) -> bool {
        self.joint_rates == Vector4::zeros() && self.vehicle_cmd == Vector4::zeros()
    }
}

/// Output of one loop, with the numerical rank seen by its pseudo-inverse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopCommand {
    pub rates: Vector4<f64>,
    pub rank: usize,
    /// Set when the command was zeroed because the Jacobian lost rank.
    pub rank_deficient: bool,
}

/// Moore-Penrose inverse through the SVD, dropping singular values below
/// `tolerance * sigma_max`. Returns the inverse and the retained rank.
pub fn pseudo_inverse_with_rank(m: &DMatrix<f64>, tolerance: f64) -> (DMatrix<f64>, usize) {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return (DMatrix::zeros(cols, rows), 0);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let v_t = svd.v_t.as_ref().expect("svd v_t");
    let sigma_max = svd.singular_values.max();
    let cutoff = tolerance * sigma_max;
    let mut out = DMatrix::zeros(cols, rows);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            out += v_t.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    (out, rank)
}

pub fn pseudo_inverse(m: &DMatrix<f64>, tolerance: f64) -> DMatrix<f64> {
    pseudo_inverse_with_rank(m, tolerance).0
}

/// Fixed-size convenience wrapper around [`pseudo_inverse_with_rank`].
pub fn pinv_fixed<const R: usize, const C: usize>(
    m: &SMatrix<f64, R, C>,
    tolerance: f64,
) -> (SMatrix<f64, C, R>, usize) {
    let dynamic = DMatrix::from_column_slice(R, C, m.as_slice());
    let (inv, rank) = pseudo_inverse_with_rank(&dynamic, tolerance);
    (SMatrix::<f64, C, R>::from_column_slice(inv.as_slice()), rank)
}

/// `Delta R = R_current^T R_desired` and its axis-angle.
pub fn rotational_error(r_current: &Rotation, r_desired: &Rotation) -> RotationalErrorState {
    let delta = r_current.transpose().compose(r_desired);
    let a = rotation_log(&delta);
    RotationalErrorState {
        epsilon_r: a.rotation_vector(),
        theta: a.angle(),
        u: a.axis(),
    }
}

/// `1 - sinc(theta) / sinc^2(theta / 2)`, which equals
/// `1 - (theta/2) cot(theta/2)`.
fn interaction_curvature(theta: f64) -> f64 {
    if theta.abs() < 1e-4 {
        let t2 = theta * theta;
        t2 / 12.0 + t2 * t2 / 720.0
    } else {
        let half = 0.5 * theta;
        1.0 - half * half.cos() / half.sin()
    }
}

/// `L(u, theta) = I - (theta/2) [u]x + (1 - sinc(theta)/sinc^2(theta/2)) [u]x^2`.
pub fn rotation_interaction_matrix(u: &Unit<Vector3<f64>>, theta: f64) -> Matrix3<f64> {
    if theta == 0.0 {
        return Matrix3::identity();
    }
    let s = skew(u);
    Matrix3::identity() - s * (0.5 * theta) + s * s * interaction_curvature(theta)
}

fn rotation_demand(err: &RotationalErrorState, theta_small: f64, tolerance: f64) -> Vector3<f64> {
    // pinv([0 | M]) eps has a zero linear half and M^+ eps as angular half.
    let m = if err.theta < theta_small {
        Matrix3::identity()
    } else {
        rotation_interaction_matrix(&err.u, err.theta)
    };
    let mut stacked = SMatrix::<f64, 3, 6>::zeros();
    stacked.fixed_view_mut::<3, 3>(0, 3).copy_from(&m);
    let (pinv, _) = pinv_fixed(&stacked, tolerance);
    (pinv * err.epsilon_r).fixed_rows::<3>(3).into_owned()
}

/// `eta_dot = -lambda_r J_mr^+ [0 | M]^+ epsilon_r`, with `M = I` below
/// `theta_small` and `M = L(u, theta)` otherwise.
///
/// `err` must be expressed in the camera frame, like `j_mr`.
pub fn rotational_action(
    err: &RotationalErrorState,
    j_mr: &Matrix6x4,
    gains: &ServoGains,
    theta_small: f64,
) -> LoopCommand {
    rotational_action_with_tolerance(err, j_mr, gains, theta_small, DEFAULT_PINV_TOLERANCE)
}

pub fn rotational_action_with_tolerance(
    err: &RotationalErrorState,
    j_mr: &Matrix6x4,
    gains: &ServoGains,
    theta_small: f64,
    tolerance: f64,
) -> LoopCommand {
    let (j_pinv, rank) = pinv_fixed(j_mr, tolerance);
    if rank == 0 {
        return LoopCommand {
            rates: Vector4::zeros(),
            rank,
            rank_deficient: true,
        };
    }
    let mut twist = nalgebra::Vector6::zeros();
    twist
        .fixed_rows_mut::<3>(3)
        .copy_from(&rotation_demand(err, theta_small, tolerance));
    LoopCommand {
        rates: -gains.lambda_r * (j_pinv * twist),
        rank,
        rank_deficient: false,
    }
}

/// `(X/Z, Y/Z, log Z)`; fails unless `Z > 0`.
pub fn extended_image_coordinate(t: &Vector3<f64>) -> Result<Vector3<f64>> {
    if !(t.z > 0.0) || !t.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!(
            "object depth {} is not in front of the camera",
            t.z
        )));
    }
    Ok(Vector3::new(t.x / t.z, t.y / t.z, t.z.ln()))
}

/// `L = [L_Z | L(x, y)]`, the interaction matrix of the extended image
/// coordinate for a `(linear, angular)` camera twist.
#[rustfmt::skip]
pub fn translation_interaction_matrix(x: f64, y: f64, z: f64) -> Result<InteractionMatrix> {
    if !(z > 0.0) {
        return Err(Error::Domain(format!("depth {z} must be positive")));
    }
    let inv_z = 1.0 / z;
    Ok(InteractionMatrix::from_row_slice(&[
        -inv_z,  0.0,     x * inv_z,  x * y,       -(1.0 + x * x),  y,
         0.0,   -inv_z,   y * inv_z,  1.0 + y * y, -x * y,         -x,
         0.0,    0.0,    -inv_z,     -y,            x,              0.0,
    ]))
}

/// `upsilon = -J_s^+ (lambda_p L^+ epsilon_p + J_bar_s nabla)`.
pub fn translational_action(
    err: &TranslationalErrorState,
    l: &InteractionMatrix,
    j_s: &Matrix6x4,
    j_bar_s: &Matrix6x2,
    nabla: &Vector2<f64>,
    gains: &ServoGains,
) -> LoopCommand {
    translational_action_with_tolerance(err, l, j_s, j_bar_s, nabla, gains, DEFAULT_PINV_TOLERANCE)
}

pub fn translational_action_with_tolerance(
    err: &TranslationalErrorState,
    l: &InteractionMatrix,
    j_s: &Matrix6x4,
    j_bar_s: &Matrix6x2,
    nabla: &Vector2<f64>,
    gains: &ServoGains,
    tolerance: f64,
) -> LoopCommand {
    let (j_pinv, rank) = pinv_fixed(j_s, tolerance);
    if rank < 4 {
        return LoopCommand {
            rates: Vector4::zeros(),
            rank,
            rank_deficient: true,
        };
    }
    let (l_pinv, _) = pinv_fixed(l, tolerance);
    let demand = gains.lambda_p * (l_pinv * err.epsilon_p) + j_bar_s * nabla;
    LoopCommand {
        rates: -(j_pinv * demand),
        rank,
        rank_deficient: false,
    }
}

/// Both loops solved together so that each cancels the other's effect on
/// its own error.
///
/// Unknowns are `(upsilon, eta_dot)`. The rows ask for the camera angular
/// velocity `-lambda_r M^+ epsilon_r` and for the feature rate
/// `-lambda_p epsilon_p`, each after subtracting the measured roll/pitch
/// contribution `J_bar_s nabla`. The minimum-norm solution gives
/// `d(epsilon_r)/dt = -lambda_r epsilon_r` and
/// `d(epsilon_p)/dt = -lambda_p epsilon_p` whenever the 6x8 system has full
/// row rank.
#[allow(clippy::too_many_arguments)]
pub fn coupled_action(
    err_r: &RotationalErrorState,
    err_p: &TranslationalErrorState,
    l: &InteractionMatrix,
    split: &SplitJacobian,
    nabla: &Vector2<f64>,
    gains: &ServoGains,
    theta_small: f64,
    tolerance: f64,
) -> (ServoAction, usize) {
    let mut a = OMatrix::<f64, Dyn, Dyn>::zeros(6, 8);
    let ang_s = split.j_s.fixed_view::<3, 4>(3, 0);
    let ang_m = split.j_mr.fixed_view::<3, 4>(3, 0);
    a.view_mut((0, 0), (3, 4)).copy_from(&ang_s);
    a.view_mut((0, 4), (3, 4)).copy_from(&ang_m);
    a.view_mut((3, 0), (3, 4)).copy_from(&(l * split.j_s));
    a.view_mut((3, 4), (3, 4)).copy_from(&(l * split.j_mr));

    let disturbance = split.j_bar_s * nabla;
    let rot_rows = -gains.lambda_r * rotation_demand(err_r, theta_small, tolerance)
        - disturbance.fixed_rows::<3>(3);
    let feat_rows = -gains.lambda_p * err_p.epsilon_p - l * disturbance;
    let b = nalgebra::DVector::from_iterator(6, rot_rows.iter().chain(feat_rows.iter()).copied());

    let (a_pinv, rank) = pseudo_inverse_with_rank(&a, tolerance);
    let x = a_pinv * b;
    (
        ServoAction {
            vehicle_cmd: Vector4::new(x[0], x[1], x[2], x[3]),
            joint_rates: Vector4::new(x[4], x[5], x[6], x[7]),
        },
        rank,
    )
}

/// Which control law `pad_servo_step` applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ServoLaw {
    /// Joint solve with cross-coupling compensation ([`coupled_action`]).
    #[default]
    Coupled,
    /// The two independent laws [`rotational_action`] and
    /// [`translational_action`].
    Decoupled,
}

/// When the step reports convergence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StopGuard {
    /// Converged once both errors are under their thresholds.
    #[default]
    Both,
    /// Converged as soon as either error is under its threshold.
    Either,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServoStatus {
    Running,
    Converged,
}

/// Immutable servo configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServoController {
    pub gains: ServoGains,
    pub thresholds: StopThresholds,
    pub theta_small: f64,
    pub pinv_tolerance: f64,
    pub law: ServoLaw,
    pub guard: StopGuard,
    /// Feed the measured roll/pitch rates forward. Off only for A/B tests.
    pub compensate_underactuation: bool,
}

impl Default for ServoController {
    fn default() -> Self {
        Self {
            gains: ServoGains::default(),
            thresholds: StopThresholds::default(),
            theta_small: DEFAULT_THETA_SMALL,
            pinv_tolerance: DEFAULT_PINV_TOLERANCE,
            law: ServoLaw::default(),
            guard: StopGuard::default(),
            compensate_underactuation: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServoStep {
    pub action: ServoAction,
    pub status: ServoStatus,
    /// Rotation error angle, radians.
    pub theta: f64,
    /// `|T* - T|`, meters.
    pub translation_error: f64,
    pub epsilon_p: Vector3<f64>,
    /// A loop lost rank and returned a zero command.
    pub rank_deficient: bool,
}

impl ServoController {
    pub fn validate(&self) -> Result<()> {
        self.gains.validate()?;
        self.thresholds.validate()?;
        if !(self.theta_small >= 0.0) {
            return Err(Error::Domain("theta_small must be non-negative".into()));
        }
        if !(self.pinv_tolerance > 0.0 && self.pinv_tolerance < 1.0) {
            return Err(Error::Domain("pinv tolerance must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn is_converged(&self, theta: f64, translation_error: f64) -> bool {
        let rot_ok = theta < self.thresholds.delta_r;
        let trans_ok = translation_error < self.thresholds.delta_t;
        match self.guard {
            StopGuard::Both => rot_ok && trans_ok,
            StopGuard::Either => rot_ok || trans_ok,
        }
    }

    /// One policy step. `current` and `desired` are object poses in the
    /// camera frame; `nabla` is the measured `(w_x, w_y)` of the vehicle.
    pub fn step(
        &self,
        current: &Pose,
        desired: &Pose,
        params: &ArmParameters,
        state: &KinematicState,
        nabla: &Vector2<f64>,
    ) -> Result<ServoStep> {
        pad_servo_step(current, desired, params, state, nabla, self)
    }
}

/// One iteration of the pose-aware discrete servo policy.
///
/// The rotation error `Delta R = R^T R*` lives in the object frame; it is
/// rotated into the camera frame (`u_c = R u`, i.e. the axis of `R* R^T`)
/// before entering the camera-frame Jacobians.
pub fn pad_servo_step(
    current: &Pose,
    desired: &Pose,
    params: &ArmParameters,
    state: &KinematicState,
    nabla: &Vector2<f64>,
    ctl: &ServoController,
) -> Result<ServoStep> {
    let err_obj = rotational_error(&current.r, &desired.r);
    let translation_error = (desired.t - current.t).norm();
    let m_e = extended_image_coordinate(&current.t)?;
    let m_e_desired = extended_image_coordinate(&desired.t)?;
    let epsilon_p = m_e - m_e_desired;

    if ctl.is_converged(err_obj.theta, translation_error) {
        return Ok(ServoStep {
            action: ServoAction::default(),
            status: ServoStatus::Converged,
            theta: err_obj.theta,
            translation_error,
            epsilon_p,
            rank_deficient: false,
        });
    }

    let err_cam = err_obj.rotated(&current.r);
    let err_p = TranslationalErrorState { epsilon_p };
    let l = translation_interaction_matrix(m_e.x, m_e.y, current.t.z)?;
    let split = split_jacobians(&generalized_jacobian(params, state));
    let nabla_ff = if ctl.compensate_underactuation {
        *nabla
    } else {
        Vector2::zeros()
    };

    let (action, rank_deficient) = match ctl.law {
        ServoLaw::Coupled => {
            let (action, rank) = coupled_action(
                &err_cam,
                &err_p,
                &l,
                &split,
                &nabla_ff,
                &ctl.gains,
                ctl.theta_small,
                ctl.pinv_tolerance,
            );
            (action, rank < 6)
        }
        ServoLaw::Decoupled => {
            let rot = rotational_action_with_tolerance(
                &err_cam,
                &split.j_mr,
                &ctl.gains,
                ctl.theta_small,
                ctl.pinv_tolerance,
            );
            let tra = translational_action_with_tolerance(
                &err_p,
                &l,
                &split.j_s,
                &split.j_bar_s,
                &nabla_ff,
                &ctl.gains,
                ctl.pinv_tolerance,
            );
            (
                ServoAction {
                    joint_rates: rot.rates,
                    vehicle_cmd: tra.rates,
                },
                rot.rank_deficient || tra.rank_deficient,
            )
        }
    };

    Ok(ServoStep {
        action,
        status: ServoStatus::Running,
        theta: err_obj.theta,
        translation_error,
        epsilon_p,
        rank_deficient,
    })
}
