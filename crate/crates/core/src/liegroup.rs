//! Matrix Lie group primitives for SO(3) and SE(3).
//!
//! Provides the hat/vee operators, the exponential map, the Cayley map
//! `cay(A) = (I - A/2)^-1 (I + A/2)` together with its inverse
//! `cay^-1(M) = 2 (M - I)(M + I)^-1`, pose adjoints, and the Cayley
//! Jacobians used by the Gauss-Newton solvers.
//!
//! Pose vectors are always ordered `(rho, phi)`: translational block first,
//! rotational block second.  The Cayley map is globally defined on the
//! algebra side but its inverse is singular at rotation angle pi; the
//! inverse maps report an error there instead of clamping.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Mat6 = Matrix6<f64>;

/// Validation tolerance for stored group elements.
pub const GROUP_TOL: f64 = 1e-9;
/// Tolerance expected of freshly constructed maps (exp, cay).
pub const FRESH_MAP_TOL: f64 = 1e-12;
/// The inverse Cayley and logarithm maps reject inputs whose rotation angle
/// is within this distance of pi.
pub const ANGLE_SINGULARITY_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Error)]
pub enum GeometryError {
    #[error("not a rotation matrix: {reason} (defect {defect:.3e})")]
    NotARotation { reason: &'static str, defect: f64 },
    #[error("not a pose matrix: {0}")]
    NotAPose(String),
    #[error("not an adjoint matrix: {0}")]
    NotAnAdjoint(String),
    #[error("matrix does not match the expected {pattern} pattern (defect {defect:.3e})")]
    BadHatPattern { pattern: &'static str, defect: f64 },
    #[error("rotation angle {angle:.6} is within {margin:.1e} of pi; the inverse map is singular there")]
    NearAngleSingularity { angle: f64, margin: f64 },
    #[error("logarithm ill-conditioned: rotation angle {0:.6} is too close to pi")]
    IllConditionedLog(f64),
    #[error("linear solve failed: {0}")]
    SingularFactor(&'static str),
    #[error("matrix is rank deficient (sigma_min/sigma_max = {0:.3e})")]
    RankDeficient(f64),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// A validated element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Mat3);

impl RotationMatrix {
    /// Validates `C C^T = I` and `det(C) = 1` to [`GROUP_TOL`].
    pub fn new(m: Mat3) -> Result<Self, GeometryError> {
        let defect = orthogonality_defect(&m);
        if !defect.is_finite() {
            return Err(GeometryError::NonFinite("RotationMatrix::new"));
        }
        if defect > GROUP_TOL {
            return Err(GeometryError::NotARotation {
                reason: "C C^T != I",
                defect,
            });
        }
        let det = m.determinant();
        if (det - 1.0).abs() > GROUP_TOL {
            return Err(GeometryError::NotARotation {
                reason: "det(C) != 1",
                defect: (det - 1.0).abs(),
            });
        }
        Ok(Self(m))
    }

    /// Constructor for matrices produced by the maps in this module, which
    /// are orthogonal to close to machine precision by construction.
    fn from_map(m: Mat3) -> Self {
        debug_assert!(
            orthogonality_defect(&m) <= 1e-11 && (m.determinant() - 1.0).abs() <= 1e-11,
            "map output violated SO(3) invariants"
        );
        Self(m)
    }

    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn into_matrix(self) -> Mat3 {
        self.0
    }

    /// The inverse rotation.
    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    pub fn column(&self, i: usize) -> Vec3 {
        self.0.column(i).into_owned()
    }

    /// Rotation angle in [0, pi], recovered from the trace.
    pub fn angle(&self) -> f64 {
        let c = ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn orthogonality_defect(&self) -> f64 {
        orthogonality_defect(&self.0)
    }
}

impl std::ops::Mul for RotationMatrix {
    type Output = RotationMatrix;
    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        self.compose(&rhs)
    }
}

/// A validated element of SE(3): rotation block, translation block, and an
/// exact `(0, 0, 0, 1)` bottom row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMatrix {
    rotation: RotationMatrix,
    translation: Vec3,
}

impl PoseMatrix {
    pub fn new(m: Mat4) -> Result<Self, GeometryError> {
        let bottom = m.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(GeometryError::NotAPose(format!(
                "bottom row {:?} is not exactly (0, 0, 0, 1)",
                [bottom[0], bottom[1], bottom[2], bottom[3]]
            )));
        }
        let rot = m.fixed_view::<3, 3>(0, 0).into_owned();
        let rotation =
            RotationMatrix::new(rot).map_err(|e| GeometryError::NotAPose(e.to_string()))?;
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("PoseMatrix::new"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_parts(rotation: RotationMatrix, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::from_parts(RotationMatrix::identity(), Vec3::zeros())
    }

    pub fn rotation(&self) -> &RotationMatrix {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn matrix(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Analytic inverse `[C^T, -C^T r]`; the bottom row stays exact.
    pub fn inverse(&self) -> Self {
        let ct = self.rotation.inverse();
        let t = -(ct.matrix() * self.translation);
        Self::from_parts(ct, t)
    }

    pub fn compose(&self, other: &Self) -> Self {
        let rotation = self.rotation.compose(&other.rotation);
        let translation = self.rotation.matrix() * other.translation + self.translation;
        Self::from_parts(rotation, translation)
    }
}

impl std::ops::Mul for PoseMatrix {
    type Output = PoseMatrix;
    fn mul(self, rhs: PoseMatrix) -> PoseMatrix {
        self.compose(&rhs)
    }
}

/// A validated 6x6 adjoint `[[C, r^ C], [0, C]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointMatrix(Mat6);

impl AdjointMatrix {
    pub fn new(m: Mat6) -> Result<Self, GeometryError> {
        let top_left = m.fixed_view::<3, 3>(0, 0).into_owned();
        let bottom_right = m.fixed_view::<3, 3>(3, 3).into_owned();
        let bottom_left = m.fixed_view::<3, 3>(3, 0).into_owned();
        if bottom_left.norm() > GROUP_TOL {
            return Err(GeometryError::NotAnAdjoint(format!(
                "lower-left block has norm {:.3e}",
                bottom_left.norm()
            )));
        }
        if (top_left - bottom_right).norm() > GROUP_TOL {
            return Err(GeometryError::NotAnAdjoint(
                "diagonal blocks differ".to_string(),
            ));
        }
        RotationMatrix::new(top_left)
            .map_err(|e| GeometryError::NotAnAdjoint(format!("diagonal block: {e}")))?;
        Ok(Self(m))
    }

    fn from_map(m: Mat6) -> Self {
        debug_assert!(Self::new(m).is_ok(), "map output violated adjoint invariants");
        Self(m)
    }

    pub fn identity() -> Self {
        Self(Mat6::identity())
    }

    pub fn matrix(&self) -> &Mat6 {
        &self.0
    }
}

fn orthogonality_defect(m: &Mat3) -> f64 {
    (m * m.transpose() - Mat3::identity()).norm()
}

/// Skew-symmetric operator: `hat(v) w = v x w`.
pub fn hat_so3(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Inverse of [`hat_so3`]; rejects matrices that are not skew to 1e-9.
pub fn vee_so3(m: &Mat3) -> Result<Vec3, GeometryError> {
    let defect = (m + m.transpose()).norm();
    if !(defect <= GROUP_TOL) {
        return Err(GeometryError::BadHatPattern {
            pattern: "so(3) skew",
            defect,
        });
    }
    Ok(Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    ))
}

/// 4x4 hat for pose vectors: `[[phi^, rho], [0, 0]]`.
pub fn hat_se3(v: &Vec6) -> Mat4 {
    let rho = v.fixed_rows::<3>(0).into_owned();
    let phi = v.fixed_rows::<3>(3).into_owned();
    let mut m = Mat4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat_so3(&phi));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&rho);
    m
}

pub fn vee_se3(m: &Mat4) -> Result<Vec6, GeometryError> {
    let bottom = m.row(3);
    let defect = (bottom[0].powi(2) + bottom[1].powi(2) + bottom[2].powi(2) + bottom[3].powi(2))
        .sqrt();
    if !(defect <= GROUP_TOL) {
        return Err(GeometryError::BadHatPattern {
            pattern: "se(3) bottom row",
            defect,
        });
    }
    let phi = vee_so3(&m.fixed_view::<3, 3>(0, 0).into_owned()).map_err(|_| {
        GeometryError::BadHatPattern {
            pattern: "se(3) rotation block",
            defect: (m.fixed_view::<3, 3>(0, 0).into_owned()
                + m.fixed_view::<3, 3>(0, 0).transpose())
            .norm(),
        }
    })?;
    let rho = m.fixed_view::<3, 1>(0, 3).into_owned();
    let mut v = Vec6::zeros();
    v.fixed_rows_mut::<3>(0).copy_from(&rho);
    v.fixed_rows_mut::<3>(3).copy_from(&phi);
    Ok(v)
}

/// 6x6 hat for the adjoint algebra: `[[phi^, rho^], [0, phi^]]`.
pub fn curly_hat(v: &Vec6) -> Mat6 {
    let rho = v.fixed_rows::<3>(0).into_owned();
    let phi = v.fixed_rows::<3>(3).into_owned();
    let ph = hat_so3(&phi);
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ph);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat_so3(&rho));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ph);
    m
}

pub fn curly_vee(m: &Mat6) -> Result<Vec6, GeometryError> {
    let bottom_left = m.fixed_view::<3, 3>(3, 0).into_owned();
    if !(bottom_left.norm() <= GROUP_TOL) {
        return Err(GeometryError::BadHatPattern {
            pattern: "adjoint algebra lower-left",
            defect: bottom_left.norm(),
        });
    }
    let top = m.fixed_view::<3, 3>(0, 0).into_owned();
    let bot = m.fixed_view::<3, 3>(3, 3).into_owned();
    if !((top - bot).norm() <= GROUP_TOL) {
        return Err(GeometryError::BadHatPattern {
            pattern: "adjoint algebra diagonal blocks",
            defect: (top - bot).norm(),
        });
    }
    let phi = vee_so3(&(0.5 * (top + bot)))?;
    let rho = vee_so3(&m.fixed_view::<3, 3>(0, 3).into_owned())?;
    let mut v = Vec6::zeros();
    v.fixed_rows_mut::<3>(0).copy_from(&rho);
    v.fixed_rows_mut::<3>(3).copy_from(&phi);
    Ok(v)
}

/// Rodrigues formula for the SO(3) exponential.
pub fn exp_so3(phi: &Vec3) -> RotationMatrix {
    let theta = phi.norm();
    let h = hat_so3(phi);
    let (a, b) = sin_cos_coeffs(theta);
    RotationMatrix::from_map(Mat3::identity() + a * h + b * (h * h))
}

/// Coefficients sin(t)/t and (1-cos(t))/t^2 with small-angle series.
fn sin_cos_coeffs(theta: f64) -> (f64, f64) {
    if theta < 1e-6 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    }
}

/// Principal logarithm on SO(3); errors within [`ANGLE_SINGULARITY_MARGIN`] of pi.
pub fn log_so3(c: &RotationMatrix) -> Result<Vec3, GeometryError> {
    let theta = c.angle();
    if std::f64::consts::PI - theta < ANGLE_SINGULARITY_MARGIN {
        return Err(GeometryError::IllConditionedLog(theta));
    }
    let skew = 0.5 * (c.matrix() - c.matrix().transpose());
    let w = Vec3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]);
    if theta < 1e-6 {
        // w = sin(theta) a, so scale by theta/sin(theta) ~ 1 + theta^2/6.
        Ok(w * (1.0 + theta * theta / 6.0))
    } else {
        Ok(w * (theta / theta.sin()))
    }
}

/// SE(3) exponential (rotation via Rodrigues, translation via the V matrix).
pub fn exp_se3(xi: &Vec6) -> PoseMatrix {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let c = exp_so3(&phi);
    PoseMatrix::from_parts(c, se3_v_matrix(&phi) * rho)
}

pub fn log_se3(t: &PoseMatrix) -> Result<Vec6, GeometryError> {
    let phi = log_so3(t.rotation())?;
    let v = se3_v_matrix(&phi);
    let rho = v
        .lu()
        .solve(t.translation())
        .ok_or(GeometryError::SingularFactor("log_se3 V matrix"))?;
    let mut xi = Vec6::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(&rho);
    xi.fixed_rows_mut::<3>(3).copy_from(&phi);
    Ok(xi)
}

fn se3_v_matrix(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let h = hat_so3(phi);
    let (b, c) = if theta < 1e-6 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    };
    Mat3::identity() + b * h + c * (h * h)
}

/// Cayley map on SO(3): `(I - phi^/2)^-1 (I + phi^/2)`.
///
/// Globally defined; the rotation angle of the result is `2 atan(|phi|/2)`.
pub fn cay_so3(phi: &Vec3) -> RotationMatrix {
    // Closed form: the inverse of (I - h/2) is (I + h/2 + h h /4) / (1 + |phi|^2/4).
    let h = hat_so3(phi);
    let s = 1.0 + 0.25 * phi.norm_squared();
    let inv = (Mat3::identity() + 0.5 * h + 0.25 * (phi * phi.transpose())) / s;
    RotationMatrix::from_map(inv * (Mat3::identity() + 0.5 * h))
}

/// Inverse Cayley map on SO(3): `vee(2 (C - I)(C + I)^-1)`.
pub fn cay_inv_so3(c: &RotationMatrix) -> Result<Vec3, GeometryError> {
    let angle = c.angle();
    if std::f64::consts::PI - angle < ANGLE_SINGULARITY_MARGIN {
        return Err(GeometryError::NearAngleSingularity {
            angle,
            margin: ANGLE_SINGULARITY_MARGIN,
        });
    }
    let m = c.matrix();
    let rhs = 2.0 * (m - Mat3::identity());
    let sol = (m + Mat3::identity())
        .transpose()
        .lu()
        .solve(&rhs.transpose())
        .ok_or(GeometryError::SingularFactor("cay_inv_so3: C + I"))?;
    // Solved (C + I)^T X^T = rhs^T, i.e. X = rhs (C + I)^-1.
    let a = sol.transpose();
    let skew = 0.5 * (a - a.transpose());
    Ok(Vec3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]))
}

/// Cayley map on SE(3).
pub fn cay_se3(xi: &Vec6) -> PoseMatrix {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let c = cay_so3(&phi);
    // Translation block is (I - phi^/2)^-1 rho.
    let s = 1.0 + 0.25 * phi.norm_squared();
    let h = hat_so3(&phi);
    let inv = (Mat3::identity() + 0.5 * h + 0.25 * (phi * phi.transpose())) / s;
    PoseMatrix::from_parts(c, inv * rho)
}

/// Inverse Cayley map on SE(3).
pub fn cay_inv_se3(t: &PoseMatrix) -> Result<Vec6, GeometryError> {
    let phi = cay_inv_so3(t.rotation())?;
    let rho = (Mat3::identity() - 0.5 * hat_so3(&phi)) * t.translation();
    let mut xi = Vec6::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(&rho);
    xi.fixed_rows_mut::<3>(3).copy_from(&phi);
    Ok(xi)
}

/// Cayley map into Ad(SE(3)): `cay(xi_curlyhat)`.
///
/// Note this is not the adjoint of [`cay_se3`] for generic inputs.
pub fn cay_adj(xi: &Vec6) -> Result<AdjointMatrix, GeometryError> {
    let ch = curly_hat(xi);
    let lhs = Mat6::identity() - 0.5 * ch;
    let rhs = Mat6::identity() + 0.5 * ch;
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or(GeometryError::SingularFactor("cay_adj: I - xi_curlyhat/2"))?;
    Ok(AdjointMatrix::from_map(sol))
}

/// Inverse Cayley map on Ad(SE(3)): `curly_vee(2 (A - I)(A + I)^-1)`.
pub fn cay_inv_adj(a: &AdjointMatrix) -> Result<Vec6, GeometryError> {
    let m = a.matrix();
    let rhs = 2.0 * (m - Mat6::identity());
    let sol = (m + Mat6::identity())
        .transpose()
        .lu()
        .solve(&rhs.transpose())
        .ok_or(GeometryError::SingularFactor("cay_inv_adj: A + I"))?;
    curly_vee(&sol.transpose())
}

/// Adjoint of a pose: `[[C, r^ C], [0, C]]`.
pub fn adjoint(t: &PoseMatrix) -> AdjointMatrix {
    let c = t.rotation().matrix();
    let rc = hat_so3(t.translation()) * c;
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(c);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&rc);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(c);
    AdjointMatrix::from_map(m)
}

/// Inverse left Cayley Jacobian on SO(3): `I - phi^/2 + phi phi^T / 4`.
pub fn jac_cay_so3_inv(phi: &Vec3) -> Mat3 {
    Mat3::identity() - 0.5 * hat_so3(phi) + 0.25 * (phi * phi.transpose())
}

/// Left Cayley Jacobian on SO(3): `(I + phi^/2) / (1 + phi^T phi / 4)`.
pub fn jac_cay_so3(phi: &Vec3) -> Mat3 {
    (Mat3::identity() + 0.5 * hat_so3(phi)) / (1.0 + 0.25 * phi.norm_squared())
}

/// Inverse left Cayley Jacobian on SE(3):
/// `I - xi_curlyhat/2 + Lambda(xi xi^T)/4` with
/// `Lambda = [[0, phi^ rho^], [0, phi phi^T]]`.
pub fn jac_cay_se3_inv(xi: &Vec6) -> Mat6 {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let mut lambda = Mat6::zeros();
    lambda
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(hat_so3(&phi) * hat_so3(&rho)));
    lambda
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(phi * phi.transpose()));
    Mat6::identity() - 0.5 * curly_hat(xi) + 0.25 * lambda
}

/// Nearest rotation in the Frobenius norm: orthogonal polar factor with a
/// determinant correction so the result lands in SO(3), not just O(3).
pub fn project_to_so3(m: &Mat3) -> Result<RotationMatrix, GeometryError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("project_to_so3"));
    }
    let svd = m.svd(true, true);
    let u = svd.u.ok_or(GeometryError::SingularFactor("svd u"))?;
    let v_t = svd.v_t.ok_or(GeometryError::SingularFactor("svd v_t"))?;
    let sv = svd.singular_values;
    let s_max = sv.max();
    if s_max <= 0.0 || sv.min() <= 1e-12 * s_max {
        return Err(GeometryError::RankDeficient(if s_max > 0.0 {
            sv.min() / s_max
        } else {
            0.0
        }));
    }
    let d = (u * v_t).determinant();
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, sign));
    let r = u * fix * v_t;
    // Re-validate: the polar factor of a well-conditioned matrix is orthogonal
    // to machine precision.
    RotationMatrix::new(r)
}

/// Splits a pose vector into its `(rho, phi)` blocks.
pub fn split_xi(xi: &Vec6) -> (Vec3, Vec3) {
    (
        xi.fixed_rows::<3>(0).into_owned(),
        xi.fixed_rows::<3>(3).into_owned(),
    )
}

/// Stacks `(rho, phi)` blocks into a pose vector.
pub fn join_xi(rho: &Vec3, phi: &Vec3) -> Vec6 {
    let mut xi = Vec6::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(rho);
    xi.fixed_rows_mut::<3>(3).copy_from(phi);
    xi
}

/// `|cay^-1(C1 C2^T)|`, the Cayley-coordinate rotation error.
pub fn rotation_error(c1: &RotationMatrix, c2: &RotationMatrix) -> Result<f64, GeometryError> {
    Ok(cay_inv_so3(&c1.compose(&c2.inverse()))?.norm())
}

/// `|cay^-1(T1 T2^-1)|`, the Cayley-coordinate pose error.
pub fn pose_error(t1: &PoseMatrix, t2: &PoseMatrix) -> Result<f64, GeometryError> {
    Ok(cay_inv_se3(&t1.compose(&t2.inverse()))?.norm())
}
