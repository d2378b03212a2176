//! Rotations and rigid transforms.
//!
//! `Rotation` is a thin newtype around a 3x3 orthonormal matrix and `Pose`
//! pairs it with a translation. Everything here is a plain value type.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Unit, Vector3};

/// Below this angle the log map uses the first-order series.
const LOG_SERIES_ANGLE: f64 = 1e-7;

/// Orthogonality defect above which accumulated rotations are projected
/// back onto SO(3).
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-8;

/// Antisymmetric (cross-product) matrix of `v`: `skew(v) * w == v x w`.
#[rustfmt::skip]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
         0.0, -v.z,  v.y,
         v.z,  0.0, -v.x,
        -v.y,  v.x,  0.0,
    )
}

/// Inverse of [`skew`]; reads the antisymmetric part only.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(m.m32 - m.m23, m.m13 - m.m31, m.m21 - m.m12)
}

/// Unit rotation axis and angle in `[0, pi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle {
    axis: Unit<Vector3<f64>>,
    angle: f64,
}

impl AxisAngle {
    /// Builds an axis-angle pair, normalizing `axis`. Negative angles flip
    /// the axis; angles beyond pi are wrapped.
    ///
    /// Returns `None` for a zero or non-finite axis.
    pub fn new(axis: Vector3<f64>, angle: f64) -> Option<Self> {
        let axis = Unit::try_new(axis, 1e-300)?;
        if !angle.is_finite() {
            return None;
        }
        Some(Self::from_rotation_vector(axis.into_inner() * angle))
    }

    /// Identity rotation with the conventional x axis.
    pub fn identity() -> Self {
        Self {
            axis: Vector3::x_axis(),
            angle: 0.0,
        }
    }

    /// Interprets `w` as `theta * u`. Rotation vectors longer than pi are
    /// wrapped into `[0, pi]`.
    pub fn from_rotation_vector(w: Vector3<f64>) -> Self {
        let norm = w.norm();
        if norm == 0.0 {
            return Self::identity();
        }
        let axis = Unit::new_unchecked(w / norm);
        let wrapped = norm.rem_euclid(2.0 * PI);
        if wrapped <= PI {
            Self {
                axis,
                angle: wrapped,
            }
        } else {
            Self {
                axis: -axis,
                angle: 2.0 * PI - wrapped,
            }
        }
    }

    pub fn axis(&self) -> Unit<Vector3<f64>> {
        self.axis
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    /// `theta * u`.
    pub fn rotation_vector(&self) -> Vector3<f64> {
        self.axis.into_inner() * self.angle
    }
}

/// A 3x3 rotation matrix (orthonormal, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps `m` after checking `m^T m = I` and `det m = 1` within 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let candidate = Self(m);
        let ok = m.iter().all(|v| v.is_finite())
            && candidate.orthogonality_defect() <= 1e-9
            && (m.determinant() - 1.0).abs() <= 1e-9;
        ok.then_some(candidate)
    }

    /// Wraps `m` without validation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Nearest rotation to an arbitrary 3x3 matrix (polar decomposition).
    pub fn nearest(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut correction = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            correction[(2, 2)] = -1.0;
        }
        Self(u * correction * v_t)
    }

    /// Rotation of `angle` radians about the (not necessarily unit) `axis`.
    pub fn about(axis: &Vector3<f64>, angle: f64) -> Self {
        match AxisAngle::new(*axis, angle) {
            Some(a) => rotation_exp(&a),
            None => Self::identity(),
        }
    }

    /// Exponential of a rotation vector.
    pub fn exp(w: &Vector3<f64>) -> Self {
        rotation_exp(&AxisAngle::from_rotation_vector(*w))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// `theta` of `log(self)`.
    pub fn angle(&self) -> f64 {
        rotation_log(self).angle()
    }

    /// Max-abs entry of `R^T R - I`.
    pub fn orthogonality_defect(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }

    /// Projects back onto SO(3) when the defect exceeds
    /// [`ORTHONORMALITY_TOLERANCE`]; returns `self` otherwise.
    pub fn renormalized(&self) -> Self {
        if self.orthogonality_defect() > ORTHONORMALITY_TOLERANCE {
            Self::nearest(&self.0)
        } else {
            *self
        }
    }
}

/// Rodrigues formula.
pub fn rotation_exp(a: &AxisAngle) -> Rotation {
    let k = skew(&a.axis);
    let (s, c) = a.angle.sin_cos();
    Rotation(Matrix3::identity() + k * s + k * k * (1.0 - c))
}

/// Axis and angle of `r`.
///
/// The angle comes from `atan2(|vee(R)|, (tr R - 1) / 2)`. Small angles use
/// the first-order series of the vee map; large angles read the axis from
/// the symmetric part `(R + R^T)/2 - cos(theta) I = (1 - cos theta) u u^T`
/// pivoting on its largest diagonal entry. At exactly pi the sign of the
/// axis is chosen so that its pivot component is positive.
pub fn rotation_log(r: &Rotation) -> AxisAngle {
    let m = r.matrix();
    let w = vee(m);
    let sin_theta = w.norm();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < LOG_SERIES_ANGLE {
        // sin(theta) ~ theta, so w itself is theta * u to first order.
        return match Unit::try_new(w, 0.0) {
            Some(axis) if sin_theta > 0.0 => AxisAngle {
                axis,
                angle: sin_theta,
            },
            _ => AxisAngle::identity(),
        };
    }

    if cos_theta > -0.5 {
        let axis = Unit::new_normalize(w);
        return AxisAngle { axis, angle: theta };
    }

    let one_minus_cos = 1.0 - cos_theta;
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
    let pivot = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap_or(0);
    let pivot_value = (sym[(pivot, pivot)] / one_minus_cos).max(0.0).sqrt();
    let mut u = Vector3::zeros();
    for k in 0..3 {
        u[k] = sym[(k, pivot)] / (one_minus_cos * pivot_value);
    }
    if u.dot(&w) < 0.0 {
        u = -u;
    }
    AxisAngle {
        axis: Unit::new_normalize(u),
        angle: theta,
    }
}

/// Rigid transform `x -> r x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub r: Rotation,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn new(r: Rotation, t: Vector3<f64>) -> Self {
        Self { r, t }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            r: Rotation::identity(),
            t,
        }
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self {
            r,
            t: Vector3::zeros(),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        pose_compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        pose_inverse(self)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r.apply(p) + self.t
    }

    /// Same pose with the rotation re-projected onto SO(3) if it drifted.
    pub fn renormalized(&self) -> Pose {
        Pose {
            r: self.r.renormalized(),
            t: self.t,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().chain(self.r.matrix().iter()).all(|v| v.is_finite())
    }
}

/// `a * b`: apply `b` first, then `a`.
pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        r: a.r.compose(&b.r),
        t: a.r.apply(&b.t) + a.t,
    }
}

pub fn pose_inverse(p: &Pose) -> Pose {
    let r_inv = p.r.transpose();
    Pose {
        r: r_inv,
        t: -r_inv.apply(&p.t),
    }
}

/// Geodesic distance between two rotations, radians.
pub fn rotation_distance(a: &Rotation, b: &Rotation) -> f64 {
    a.transpose().compose(b).angle()
}
