//! The four estimation problems: rotation averaging, pose averaging,
//! discrete-time trajectory estimation, and continuous-time trajectory
//! estimation with a white-noise-on-acceleration motion prior.
//!
//! Each problem owns its measurements and SPD weights, evaluates its cost
//! at an estimate, and can be simulated from a groundtruth using the Cayley
//! generative model of [`crate::noise`].  Instances serialize to JSON so
//! they can be replayed across solver versions (see `docs` in the README
//! for the schema).

use crate::liegroup::{
    cay_inv_se3, cay_inv_so3, cay_se3, GeometryError, Mat3, Mat6, PoseMatrix,
    RotationMatrix, Vec3, Vec6,
};
use crate::noise::{sample_pose, sample_rotation, LieGaussian, MapKind, NoiseError};
use nalgebra::{Cholesky, SMatrix};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Mat12 = SMatrix<f64, 12, 12>;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("problem needs at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("weight {index} is not symmetric positive definite")]
    WeightNotSpd { index: usize },
    #[error("timestamps must be strictly increasing (violated at index {0})")]
    TimestampsNotIncreasing(usize),
    #[error("measurement index {index} out of range for {states} states")]
    MeasurementIndexOutOfRange { index: usize, states: usize },
    #[error("duplicate measurement at state index {0}")]
    DuplicateMeasurement(usize),
    #[error("estimate has {got} poses but the problem has {expected} states")]
    WrongStateCount { expected: usize, got: usize },
    #[error("continuous-time cost needs twist estimates")]
    MissingTwists,
    #[error("interval length must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

fn check_spd(m_dim: usize, entries: &[f64], index: usize) -> Result<(), ProblemError> {
    let m = nalgebra::DMatrix::from_row_slice(m_dim, m_dim, entries);
    if (&m - m.transpose()).norm() > 1e-9 || Cholesky::new(m).is_none() {
        return Err(ProblemError::WeightNotSpd { index });
    }
    Ok(())
}

fn check_spd3(w: &Mat3, index: usize) -> Result<(), ProblemError> {
    check_spd(3, w.transpose().as_slice(), index)
}

fn check_spd6(w: &Mat6, index: usize) -> Result<(), ProblemError> {
    check_spd(6, w.transpose().as_slice(), index)
}

/// Averaging M noisy rotations under Cayley-coordinate residuals.
#[derive(Debug, Clone)]
pub struct RotationAveragingProblem {
    measurements: Vec<RotationMatrix>,
    weights: Vec<Mat3>,
}

impl RotationAveragingProblem {
    pub fn new(
        measurements: Vec<RotationMatrix>,
        weights: Vec<Mat3>,
    ) -> Result<Self, ProblemError> {
        if measurements.is_empty() || measurements.len() != weights.len() {
            return Err(ProblemError::TooFew {
                what: "matched measurements/weights",
                needed: 1,
                got: measurements.len().min(weights.len()),
            });
        }
        for (i, w) in weights.iter().enumerate() {
            check_spd3(w, i)?;
        }
        Ok(Self {
            measurements,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn measurements(&self) -> &[RotationMatrix] {
        &self.measurements
    }

    pub fn weights(&self) -> &[Mat3] {
        &self.weights
    }
}

/// Averaging M noisy poses.
#[derive(Debug, Clone)]
pub struct PoseAveragingProblem {
    measurements: Vec<PoseMatrix>,
    weights: Vec<Mat6>,
}

impl PoseAveragingProblem {
    pub fn new(measurements: Vec<PoseMatrix>, weights: Vec<Mat6>) -> Result<Self, ProblemError> {
        if measurements.is_empty() || measurements.len() != weights.len() {
            return Err(ProblemError::TooFew {
                what: "matched measurements/weights",
                needed: 1,
                got: measurements.len().min(weights.len()),
            });
        }
        for (i, w) in weights.iter().enumerate() {
            check_spd6(w, i)?;
        }
        Ok(Self {
            measurements,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn measurements(&self) -> &[PoseMatrix] {
        &self.measurements
    }

    pub fn weights(&self) -> &[Mat6] {
        &self.weights
    }
}

/// K absolute pose measurements plus K-1 relative measurements linking
/// consecutive states.
#[derive(Debug, Clone)]
pub struct DiscreteTrajectoryProblem {
    absolute: Vec<(PoseMatrix, Mat6)>,
    relative: Vec<(PoseMatrix, Mat6)>,
}

impl DiscreteTrajectoryProblem {
    pub fn new(
        absolute: Vec<(PoseMatrix, Mat6)>,
        relative: Vec<(PoseMatrix, Mat6)>,
    ) -> Result<Self, ProblemError> {
        if absolute.len() < 2 {
            return Err(ProblemError::TooFew {
                what: "states",
                needed: 2,
                got: absolute.len(),
            });
        }
        if relative.len() != absolute.len() - 1 {
            return Err(ProblemError::TooFew {
                what: "relative measurements (need K-1)",
                needed: absolute.len() - 1,
                got: relative.len(),
            });
        }
        for (i, (_, w)) in absolute.iter().chain(relative.iter()).enumerate() {
            check_spd6(w, i)?;
        }
        Ok(Self { absolute, relative })
    }

    pub fn num_states(&self) -> usize {
        self.absolute.len()
    }

    pub fn absolute(&self) -> &[(PoseMatrix, Mat6)] {
        &self.absolute
    }

    pub fn relative(&self) -> &[(PoseMatrix, Mat6)] {
        &self.relative
    }
}

/// A sparse absolute pose measurement attached to state `index`.
#[derive(Debug, Clone)]
pub struct PoseMeasurement {
    pub index: usize,
    pub pose: PoseMatrix,
    pub weight: Mat6,
}

/// Continuous-time trajectory estimation: timestamps, sparse pose
/// measurements, the WNOA power-spectral density, and an initial-velocity
/// prior.  States carry both a pose and a twist.
#[derive(Debug, Clone)]
pub struct ContinuousTrajectoryProblem {
    timestamps: Vec<f64>,
    measurements: Vec<PoseMeasurement>,
    qc: Mat6,
    v0_mean: Vec6,
    q1: Mat6,
}

impl ContinuousTrajectoryProblem {
    pub fn new(
        timestamps: Vec<f64>,
        measurements: Vec<PoseMeasurement>,
        qc: Mat6,
        v0_mean: Vec6,
        q1: Mat6,
    ) -> Result<Self, ProblemError> {
        if timestamps.len() < 2 {
            return Err(ProblemError::TooFew {
                what: "timestamps",
                needed: 2,
                got: timestamps.len(),
            });
        }
        for i in 1..timestamps.len() {
            if timestamps[i] <= timestamps[i - 1] {
                return Err(ProblemError::TimestampsNotIncreasing(i));
            }
        }
        if measurements.is_empty() {
            return Err(ProblemError::TooFew {
                what: "pose measurements",
                needed: 1,
                got: 0,
            });
        }
        let mut seen = vec![false; timestamps.len()];
        for m in &measurements {
            if m.index >= timestamps.len() {
                return Err(ProblemError::MeasurementIndexOutOfRange {
                    index: m.index,
                    states: timestamps.len(),
                });
            }
            if seen[m.index] {
                return Err(ProblemError::DuplicateMeasurement(m.index));
            }
            seen[m.index] = true;
            check_spd6(&m.weight, m.index)?;
        }
        check_spd6(&qc, usize::MAX)?;
        check_spd6(&q1, usize::MAX)?;
        let mut measurements = measurements;
        measurements.sort_by_key(|m| m.index);
        Ok(Self {
            timestamps,
            measurements,
            qc,
            v0_mean,
            q1,
        })
    }

    pub fn num_states(&self) -> usize {
        self.timestamps.len()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn measurements(&self) -> &[PoseMeasurement] {
        &self.measurements
    }

    pub fn qc(&self) -> &Mat6 {
        &self.qc
    }

    pub fn v0_mean(&self) -> &Vec6 {
        &self.v0_mean
    }

    pub fn q1(&self) -> &Mat6 {
        &self.q1
    }
}

/// A trajectory estimate: K poses, plus K twists for the continuous problem.
#[derive(Debug, Clone)]
pub struct TrajectoryEstimate {
    pub poses: Vec<PoseMatrix>,
    pub twists: Option<Vec<Vec6>>,
}

impl TrajectoryEstimate {
    pub fn poses_only(poses: Vec<PoseMatrix>) -> Self {
        Self {
            poses,
            twists: None,
        }
    }

    pub fn with_twists(poses: Vec<PoseMatrix>, twists: Vec<Vec6>) -> Self {
        Self {
            poses,
            twists: Some(twists),
        }
    }
}

/// `sum_m cay^-1(C C_m^T)^{vT} W_m cay^-1(C C_m^T)^v`.
pub fn cost_rotation_averaging(
    p: &RotationAveragingProblem,
    c: &RotationMatrix,
) -> Result<f64, ProblemError> {
    let mut cost = 0.0;
    for (meas, w) in p.measurements.iter().zip(&p.weights) {
        let phi = cay_inv_so3(&c.compose(&meas.inverse()))?;
        cost += (phi.transpose() * w * phi)[0];
    }
    Ok(cost)
}

/// `sum_m cay^-1(T T_m^-1)^{vT} W_m cay^-1(T T_m^-1)^v`.
pub fn cost_pose_averaging(p: &PoseAveragingProblem, t: &PoseMatrix) -> Result<f64, ProblemError> {
    let mut cost = 0.0;
    for (meas, w) in p.measurements.iter().zip(&p.weights) {
        let xi = cay_inv_se3(&t.compose(&meas.inverse()))?;
        cost += (xi.transpose() * w * xi)[0];
    }
    Ok(cost)
}

/// Absolute terms plus relative terms `cay^-1(T_{k+1} T_k^-1 T_rel^-1)`.
pub fn cost_discrete(
    p: &DiscreteTrajectoryProblem,
    est: &TrajectoryEstimate,
) -> Result<f64, ProblemError> {
    if est.poses.len() != p.num_states() {
        return Err(ProblemError::WrongStateCount {
            expected: p.num_states(),
            got: est.poses.len(),
        });
    }
    let mut cost = 0.0;
    for (k, (meas, w)) in p.absolute.iter().enumerate() {
        let xi = cay_inv_se3(&est.poses[k].compose(&meas.inverse()))?;
        cost += (xi.transpose() * w * xi)[0];
    }
    for (k, (meas, w)) in p.relative.iter().enumerate() {
        let step = est.poses[k + 1].compose(&est.poses[k].inverse());
        let xi = cay_inv_se3(&step.compose(&meas.inverse()))?;
        cost += (xi.transpose() * w * xi)[0];
    }
    Ok(cost)
}

/// Measurement terms, the initial-twist prior, and the WNOA interval terms
/// `e_{k+1,k} = [(dt w_k - cay^-1(T_{k+1} T_k^-1)); (w_k - w_{k+1})]`.
pub fn cost_continuous(
    p: &ContinuousTrajectoryProblem,
    est: &TrajectoryEstimate,
) -> Result<f64, ProblemError> {
    if est.poses.len() != p.num_states() {
        return Err(ProblemError::WrongStateCount {
            expected: p.num_states(),
            got: est.poses.len(),
        });
    }
    let twists = est.twists.as_ref().ok_or(ProblemError::MissingTwists)?;
    if twists.len() != p.num_states() {
        return Err(ProblemError::WrongStateCount {
            expected: p.num_states(),
            got: twists.len(),
        });
    }
    let mut cost = 0.0;
    for m in &p.measurements {
        let xi = cay_inv_se3(&est.poses[m.index].compose(&m.pose.inverse()))?;
        cost += (xi.transpose() * m.weight * xi)[0];
    }
    let dv = p.v0_mean - twists[0];
    let q1_inv = Cholesky::new(p.q1)
        .expect("validated SPD")
        .inverse();
    cost += (dv.transpose() * q1_inv * dv)[0];
    for k in 0..p.num_states() - 1 {
        let dt = p.timestamps[k + 1] - p.timestamps[k];
        let xi = cay_inv_se3(&est.poses[k + 1].compose(&est.poses[k].inverse()))?;
        let mut e = nalgebra::SVector::<f64, 12>::zeros();
        e.fixed_rows_mut::<6>(0).copy_from(&(dt * twists[k] - xi));
        e.fixed_rows_mut::<6>(6)
            .copy_from(&(twists[k] - twists[k + 1]));
        let q = wnoa_q(p.timestamps[k], p.timestamps[k + 1], &p.qc)?;
        let q_inv = Cholesky::new(q).expect("wnoa_q is SPD").inverse();
        cost += (e.transpose() * q_inv * e)[0];
    }
    Ok(cost)
}

/// WNOA process-noise covariance over one interval:
/// `[[dt^3 Qc / 3, dt^2 Qc / 2], [dt^2 Qc / 2, dt Qc]]`.
pub fn wnoa_q(t0: f64, t1: f64, qc: &Mat6) -> Result<Mat12, ProblemError> {
    let dt = t1 - t0;
    if !(dt > 0.0) {
        return Err(ProblemError::NonPositiveInterval(dt));
    }
    let mut q = Mat12::zeros();
    q.fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&(qc * (dt * dt * dt / 3.0)));
    q.fixed_view_mut::<6, 6>(0, 6)
        .copy_from(&(qc * (dt * dt / 2.0)));
    q.fixed_view_mut::<6, 6>(6, 0)
        .copy_from(&(qc * (dt * dt / 2.0)));
    q.fixed_view_mut::<6, 6>(6, 6).copy_from(&(qc * dt));
    Ok(q)
}

/// Weight for an isotropic noise level: `W = I / sigma^2`, or `I` in the
/// noiseless limit where any SPD weight leaves the zero-cost optimum intact.
pub fn isotropic_weight3(sigma: f64) -> Mat3 {
    if sigma > 0.0 {
        Mat3::identity() / (sigma * sigma)
    } else {
        Mat3::identity()
    }
}

pub fn isotropic_weight6(sigma: f64) -> Mat6 {
    if sigma > 0.0 {
        Mat6::identity() / (sigma * sigma)
    } else {
        Mat6::identity()
    }
}

fn rotation_noise(
    mean: &RotationMatrix,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<RotationMatrix, ProblemError> {
    if sigma == 0.0 {
        return Ok(*mean);
    }
    let model = LieGaussian::isotropic_rotation(*mean, sigma, MapKind::Cayley)?;
    Ok(sample_rotation(&model, rng)?)
}

fn pose_noise(
    mean: &PoseMatrix,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<PoseMatrix, ProblemError> {
    if sigma == 0.0 {
        return Ok(*mean);
    }
    let model = LieGaussian::isotropic_pose(*mean, sigma, MapKind::Cayley)?;
    Ok(sample_pose(&model, rng)?)
}

/// Draws `m` noisy copies of `groundtruth` with `W_m^-1 = sigma^2 I`.
pub fn simulate_rotation_averaging(
    groundtruth: &RotationMatrix,
    m: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<RotationAveragingProblem, ProblemError> {
    let mut measurements = Vec::with_capacity(m);
    for _ in 0..m {
        measurements.push(rotation_noise(groundtruth, sigma, rng)?);
    }
    RotationAveragingProblem::new(measurements, vec![isotropic_weight3(sigma); m])
}

pub fn simulate_pose_averaging(
    groundtruth: &PoseMatrix,
    m: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<PoseAveragingProblem, ProblemError> {
    let mut measurements = Vec::with_capacity(m);
    for _ in 0..m {
        measurements.push(pose_noise(groundtruth, sigma, rng)?);
    }
    PoseAveragingProblem::new(measurements, vec![isotropic_weight6(sigma); m])
}

/// Absolute measurements around each `T_k` and relative measurements around
/// each `T_{k+1} T_k^-1`.
pub fn simulate_discrete(
    groundtruth: &[PoseMatrix],
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<DiscreteTrajectoryProblem, ProblemError> {
    let w = isotropic_weight6(sigma);
    let mut absolute = Vec::with_capacity(groundtruth.len());
    for t in groundtruth {
        absolute.push((pose_noise(t, sigma, rng)?, w));
    }
    let mut relative = Vec::with_capacity(groundtruth.len().saturating_sub(1));
    for k in 0..groundtruth.len().saturating_sub(1) {
        let step = groundtruth[k + 1].compose(&groundtruth[k].inverse());
        relative.push((pose_noise(&step, sigma, rng)?, w));
    }
    DiscreteTrajectoryProblem::new(absolute, relative)
}

/// Noisy absolute measurements at `measured` indices; the initial-velocity
/// prior mean is taken from the groundtruth twist so a noiseless instance
/// has zero cost at the groundtruth.
pub fn simulate_continuous(
    timestamps: &[f64],
    groundtruth: &TrajectoryEstimate,
    measured: &[usize],
    sigma: f64,
    qc: Mat6,
    q1: Mat6,
    rng: &mut impl Rng,
) -> Result<ContinuousTrajectoryProblem, ProblemError> {
    let w = isotropic_weight6(sigma);
    let mut measurements = Vec::with_capacity(measured.len());
    for &idx in measured {
        if idx >= groundtruth.poses.len() {
            return Err(ProblemError::MeasurementIndexOutOfRange {
                index: idx,
                states: groundtruth.poses.len(),
            });
        }
        measurements.push(PoseMeasurement {
            index: idx,
            pose: pose_noise(&groundtruth.poses[idx], sigma, rng)?,
            weight: w,
        });
    }
    let v0 = groundtruth
        .twists
        .as_ref()
        .and_then(|t| t.first().copied())
        .unwrap_or_else(Vec6::zeros);
    ContinuousTrajectoryProblem::new(timestamps.to_vec(), measurements, qc, v0, q1)
}

/// Groundtruth arc for the discrete problem: body-frame steps of unit
/// translation with a gentle constant turn, so poses sit one distance unit
/// apart.
pub fn discrete_groundtruth(k: usize) -> Vec<PoseMatrix> {
    let turn = crate::liegroup::cay_so3(&Vec3::new(0.02, 0.05, 0.25));
    let step = PoseMatrix::from_parts(turn, Vec3::new(1.0, 0.0, 0.0));
    let mut poses = Vec::with_capacity(k);
    let mut t = PoseMatrix::identity();
    for _ in 0..k {
        poses.push(t);
        t = t.compose(&step);
    }
    poses
}

/// Constant-twist groundtruth for the continuous problem:
/// `T_{k+1} = cay((dt * twist)^) T_k`, which zeroes every WNOA error term
/// when the estimate carries the same constant twist.
pub fn continuous_groundtruth(timestamps: &[f64], twist: &Vec6) -> TrajectoryEstimate {
    let mut poses = Vec::with_capacity(timestamps.len());
    let mut t = PoseMatrix::identity();
    for k in 0..timestamps.len() {
        if k > 0 {
            let dt = timestamps[k] - timestamps[k - 1];
            t = cay_se3(&(dt * twist)).compose(&t);
        }
        poses.push(t);
    }
    TrajectoryEstimate::with_twists(poses, vec![*twist; timestamps.len()])
}

/// Default measurement pattern for the continuous problem: first, middle,
/// and last state.
pub fn start_middle_end(k: usize) -> Vec<usize> {
    if k <= 2 {
        (0..k).collect()
    } else {
        vec![0, k / 2, k - 1]
    }
}

// --- JSON serialization -------------------------------------------------
//
// Matrices are stored as row-major nested arrays and validated on load, so
// corrupted files are rejected instead of producing invalid group elements.

mod dto {
    use super::*;

    pub fn mat3_rows(m: &Mat3) -> Vec<Vec<f64>> {
        (0..3).map(|i| (0..3).map(|j| m[(i, j)]).collect()).collect()
    }

    pub fn mat6_rows(m: &Mat6) -> Vec<Vec<f64>> {
        (0..6).map(|i| (0..6).map(|j| m[(i, j)]).collect()).collect()
    }

    pub fn mat3_from(rows: &[Vec<f64>]) -> Result<Mat3, String> {
        if rows.len() != 3 || rows.iter().any(|r| r.len() != 3) {
            return Err("expected 3x3 matrix".into());
        }
        Ok(Mat3::from_fn(|i, j| rows[i][j]))
    }

    pub fn mat6_from(rows: &[Vec<f64>]) -> Result<Mat6, String> {
        if rows.len() != 6 || rows.iter().any(|r| r.len() != 6) {
            return Err("expected 6x6 matrix".into());
        }
        Ok(Mat6::from_fn(|i, j| rows[i][j]))
    }

    pub fn vec6_from(v: &[f64]) -> Result<Vec6, String> {
        if v.len() != 6 {
            return Err("expected 6-vector".into());
        }
        Ok(Vec6::from_row_slice(v))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseDto {
    rotation: Vec<Vec<f64>>,
    translation: Vec<f64>,
}

impl PoseDto {
    fn from_pose(t: &PoseMatrix) -> Self {
        Self {
            rotation: dto::mat3_rows(t.rotation().matrix()),
            translation: t.translation().iter().copied().collect(),
        }
    }

    fn to_pose(&self) -> Result<PoseMatrix, String> {
        let rot = RotationMatrix::new(dto::mat3_from(&self.rotation)?).map_err(|e| e.to_string())?;
        if self.translation.len() != 3 {
            return Err("expected 3-vector translation".into());
        }
        Ok(PoseMatrix::from_parts(
            rot,
            Vec3::from_row_slice(&self.translation),
        ))
    }
}

/// Serializable wrapper for any of the four problem instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemJson {
    RotationAveraging {
        measurements: Vec<Vec<Vec<f64>>>,
        weights: Vec<Vec<Vec<f64>>>,
    },
    PoseAveraging {
        measurements: Vec<PoseDto>,
        weights: Vec<Vec<Vec<f64>>>,
    },
    DiscreteTrajectory {
        absolute: Vec<PoseDto>,
        absolute_weights: Vec<Vec<Vec<f64>>>,
        relative: Vec<PoseDto>,
        relative_weights: Vec<Vec<Vec<f64>>>,
    },
    ContinuousTrajectory {
        timestamps: Vec<f64>,
        measurement_indices: Vec<usize>,
        measurements: Vec<PoseDto>,
        weights: Vec<Vec<Vec<f64>>>,
        qc: Vec<Vec<f64>>,
        v0_mean: Vec<f64>,
        q1: Vec<Vec<f64>>,
    },
}

/// One of the four problem instances, as passed around the pipeline.
#[derive(Debug, Clone)]
pub enum ProblemInstance {
    Rotation(RotationAveragingProblem),
    Pose(PoseAveragingProblem),
    Discrete(DiscreteTrajectoryProblem),
    Continuous(ContinuousTrajectoryProblem),
}

impl ProblemInstance {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Rotation(_) => "rotation_averaging",
            Self::Pose(_) => "pose_averaging",
            Self::Discrete(_) => "discrete_trajectory",
            Self::Continuous(_) => "continuous_trajectory",
        }
    }

    pub fn to_json(&self) -> ProblemJson {
        match self {
            Self::Rotation(p) => ProblemJson::RotationAveraging {
                measurements: p.measurements.iter().map(|c| dto::mat3_rows(c.matrix())).collect(),
                weights: p.weights.iter().map(dto::mat3_rows).collect(),
            },
            Self::Pose(p) => ProblemJson::PoseAveraging {
                measurements: p.measurements.iter().map(PoseDto::from_pose).collect(),
                weights: p.weights.iter().map(dto::mat6_rows).collect(),
            },
            Self::Discrete(p) => ProblemJson::DiscreteTrajectory {
                absolute: p.absolute.iter().map(|(t, _)| PoseDto::from_pose(t)).collect(),
                absolute_weights: p.absolute.iter().map(|(_, w)| dto::mat6_rows(w)).collect(),
                relative: p.relative.iter().map(|(t, _)| PoseDto::from_pose(t)).collect(),
                relative_weights: p.relative.iter().map(|(_, w)| dto::mat6_rows(w)).collect(),
            },
            Self::Continuous(p) => ProblemJson::ContinuousTrajectory {
                timestamps: p.timestamps.clone(),
                measurement_indices: p.measurements.iter().map(|m| m.index).collect(),
                measurements: p.measurements.iter().map(|m| PoseDto::from_pose(&m.pose)).collect(),
                weights: p.measurements.iter().map(|m| dto::mat6_rows(&m.weight)).collect(),
                qc: dto::mat6_rows(&p.qc),
                v0_mean: p.v0_mean.iter().copied().collect(),
                q1: dto::mat6_rows(&p.q1),
            },
        }
    }

    pub fn from_json(json: &ProblemJson) -> Result<Self, String> {
        match json {
            ProblemJson::RotationAveraging {
                measurements,
                weights,
            } => {
                let meas = measurements
                    .iter()
                    .map(|rows| {
                        RotationMatrix::new(dto::mat3_from(rows)?).map_err(|e| e.to_string())
                    })
                    .collect::<Result<Vec<_>, String>>()?;
                let w = weights
                    .iter()
                    .map(|rows| dto::mat3_from(rows))
                    .collect::<Result<Vec<_>, String>>()?;
                RotationAveragingProblem::new(meas, w)
                    .map(Self::Rotation)
                    .map_err(|e| e.to_string())
            }
            ProblemJson::PoseAveraging {
                measurements,
                weights,
            } => {
                let meas = measurements
                    .iter()
                    .map(|d| d.to_pose())
                    .collect::<Result<Vec<_>, String>>()?;
                let w = weights
                    .iter()
                    .map(|rows| dto::mat6_from(rows))
                    .collect::<Result<Vec<_>, String>>()?;
                PoseAveragingProblem::new(meas, w)
                    .map(Self::Pose)
                    .map_err(|e| e.to_string())
            }
            ProblemJson::DiscreteTrajectory {
                absolute,
                absolute_weights,
                relative,
                relative_weights,
            } => {
                if absolute.len() != absolute_weights.len()
                    || relative.len() != relative_weights.len()
                {
                    return Err("mismatched measurement/weight counts".into());
                }
                let abs = absolute
                    .iter()
                    .zip(absolute_weights)
                    .map(|(d, w)| Ok((d.to_pose()?, dto::mat6_from(w)?)))
                    .collect::<Result<Vec<_>, String>>()?;
                let rel = relative
                    .iter()
                    .zip(relative_weights)
                    .map(|(d, w)| Ok((d.to_pose()?, dto::mat6_from(w)?)))
                    .collect::<Result<Vec<_>, String>>()?;
                DiscreteTrajectoryProblem::new(abs, rel)
                    .map(Self::Discrete)
                    .map_err(|e| e.to_string())
            }
            ProblemJson::ContinuousTrajectory {
                timestamps,
                measurement_indices,
                measurements,
                weights,
                qc,
                v0_mean,
                q1,
            } => {
                if measurement_indices.len() != measurements.len()
                    || measurements.len() != weights.len()
                {
                    return Err("mismatched measurement arrays".into());
                }
                let meas = measurement_indices
                    .iter()
                    .zip(measurements)
                    .zip(weights)
                    .map(|((&index, d), w)| {
                        Ok(PoseMeasurement {
                            index,
                            pose: d.to_pose()?,
                            weight: dto::mat6_from(w)?,
                        })
                    })
                    .collect::<Result<Vec<_>, String>>()?;
                ContinuousTrajectoryProblem::new(
                    timestamps.clone(),
                    meas,
                    dto::mat6_from(qc)?,
                    dto::vec6_from(v0_mean)?,
                    dto::mat6_from(q1)?,
                )
                .map(Self::Continuous)
                .map_err(|e| e.to_string())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::cay_so3;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn rotation_cost_zero_at_coincident_measurements() {
        let c = cay_so3(&Vec3::new(0.2, -0.1, 0.4));
        let p = RotationAveragingProblem::new(vec![c; 4], vec![Mat3::identity(); 4]).unwrap();
        assert!(cost_rotation_averaging(&p, &c).unwrap() < 1e-18);
    }

    #[test]
    fn rotation_cost_single_term_closed_form() {
        // M = 1, W = I, C = cay((x,0,0)) C1 gives cost x^2.
        let c1 = cay_so3(&Vec3::new(0.3, 0.5, -0.2));
        let p = RotationAveragingProblem::new(vec![c1], vec![Mat3::identity()]).unwrap();
        for &x in &[0.1, 0.7, 1.9] {
            let c = cay_so3(&Vec3::new(x, 0.0, 0.0)).compose(&c1);
            assert_relative_eq!(cost_rotation_averaging(&p, &c).unwrap(), x * x, epsilon = 1e-12);
        }
    }

    /// Scalar trig oracle for a single-axis two-measurement family: all
    /// rotations share the x axis, so the cost reduces to
    /// `sum_m (2 tan((theta - theta_m)/2))^2`.
    #[test]
    fn rotation_cost_matches_axis_family_oracle() {
        let a = 0.8f64;
        let b = -0.4f64;
        let p = RotationAveragingProblem::new(
            vec![
                cay_so3(&Vec3::new(a, 0.0, 0.0)),
                cay_so3(&Vec3::new(b, 0.0, 0.0)),
            ],
            vec![Mat3::identity(); 2],
        )
        .unwrap();
        let angle_of = |coord: f64| 2.0 * (coord / 2.0).atan();
        for i in -20..=20 {
            let t = i as f64 * 0.1;
            let c = cay_so3(&Vec3::new(t, 0.0, 0.0));
            let oracle: f64 = [a, b]
                .iter()
                .map(|&m| {
                    let d = angle_of(t) - angle_of(m);
                    (2.0 * (d / 2.0).tan()).powi(2)
                })
                .sum();
            assert_relative_eq!(
                cost_rotation_averaging(&p, &c).unwrap(),
                oracle,
                epsilon = 1e-9,
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn cost_increases_along_ray_from_minimizer() {
        let c0 = cay_so3(&Vec3::new(0.1, 0.2, 0.3));
        let p = RotationAveragingProblem::new(vec![c0; 3], vec![Mat3::identity(); 3]).unwrap();
        let mut prev = 0.0;
        for i in 1..30 {
            let t = i as f64 * 0.05;
            let c = cay_so3(&Vec3::new(t, 0.0, 0.0)).compose(&c0);
            let cost = cost_rotation_averaging(&p, &c).unwrap();
            assert!(cost > prev);
            prev = cost;
        }
    }

    #[test]
    fn simulate_is_deterministic_and_noiseless_at_sigma_zero() {
        let gt = cay_so3(&Vec3::new(0.4, -0.2, 0.1));
        let p0 = simulate_rotation_averaging(&gt, 5, 0.0, &mut rng(1)).unwrap();
        assert!(cost_rotation_averaging(&p0, &gt).unwrap() < 1e-18);

        let p1 = simulate_rotation_averaging(&gt, 5, 0.3, &mut rng(2)).unwrap();
        let p2 = simulate_rotation_averaging(&gt, 5, 0.3, &mut rng(2)).unwrap();
        for (a, b) in p1.measurements().iter().zip(p2.measurements()) {
            assert_eq!(a.matrix(), b.matrix());
        }
    }

    #[test]
    fn discrete_cost_examples() {
        let gt = discrete_groundtruth(4);
        // Consecutive poses one unit apart.
        for w in gt.windows(2) {
            assert_relative_eq!((w[1].translation() - w[0].translation()).norm(), 1.0, epsilon = 1e-12);
        }
        let p = simulate_discrete(&gt, 0.0, &mut rng(3)).unwrap();
        let est = TrajectoryEstimate::poses_only(gt.clone());
        assert!(cost_discrete(&p, &est).unwrap() < 1e-18);

        // K = 2 hand case: identity absolute measurements and identity
        // relative measurement, T1 = I, T2 = cay(xi): the relative residual
        // is exactly xi and the absolute residual of state 2 is xi again.
        let xi = Vec6::from_row_slice(&[0.1, -0.2, 0.05, 0.02, 0.03, -0.01]);
        let w_rel = Mat6::identity() * 2.0;
        let p2 = DiscreteTrajectoryProblem::new(
            vec![
                (PoseMatrix::identity(), Mat6::identity()),
                (PoseMatrix::identity(), Mat6::identity()),
            ],
            vec![(PoseMatrix::identity(), w_rel)],
        )
        .unwrap();
        let t2 = cay_se3(&xi);
        let est2 = TrajectoryEstimate::poses_only(vec![PoseMatrix::identity(), t2]);
        let expected = (xi.transpose() * w_rel * xi)[0] + (xi.transpose() * xi)[0];
        assert_relative_eq!(cost_discrete(&p2, &est2).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn wnoa_q_block_values() {
        let q = wnoa_q(0.0, 1.0, &Mat6::identity()).unwrap();
        assert_relative_eq!(
            q.fixed_view::<6, 6>(0, 0).into_owned(),
            Mat6::identity() / 3.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            q.fixed_view::<6, 6>(0, 6).into_owned(),
            Mat6::identity() / 2.0,
            epsilon = 1e-15
        );
        let q2 = wnoa_q(1.0, 3.0, &Mat6::identity()).unwrap();
        assert_relative_eq!(
            q2.fixed_view::<6, 6>(0, 0).into_owned(),
            Mat6::identity() * (8.0 / 3.0),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            q2.fixed_view::<6, 6>(0, 6).into_owned(),
            Mat6::identity() * 2.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            q2.fixed_view::<6, 6>(6, 6).into_owned(),
            Mat6::identity() * 2.0,
            epsilon = 1e-15
        );
        assert!(wnoa_q(1.0, 1.0, &Mat6::identity()).is_err());
    }

    #[test]
    fn wnoa_q_is_spd_for_random_intervals() {
        let mut r = rng(4);
        for _ in 0..100 {
            let dt: f64 = rand::Rng::gen_range(&mut r, 1e-3..10.0);
            let q = wnoa_q(0.0, dt, &Mat6::identity()).unwrap();
            assert!(Cholesky::new(q).is_some(), "dt {dt}: Q not SPD");
        }
    }

    #[test]
    fn continuous_constant_twist_is_in_prior_null_space() {
        let ts: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let twist = Vec6::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.2]);
        let gt = continuous_groundtruth(&ts, &twist);
        let p = simulate_continuous(
            &ts,
            &gt,
            &start_middle_end(5),
            0.0,
            Mat6::identity(),
            Mat6::identity(),
            &mut rng(5),
        )
        .unwrap();
        assert!(cost_continuous(&p, &gt).unwrap() < 1e-18);
    }

    #[test]
    fn cost_is_order_invariant() {
        let gt = cay_so3(&Vec3::new(0.4, -0.2, 0.1));
        let p = simulate_rotation_averaging(&gt, 6, 0.4, &mut rng(6)).unwrap();
        let mut meas = p.measurements().to_vec();
        let mut w = p.weights().to_vec();
        meas.reverse();
        w.reverse();
        let q = RotationAveragingProblem::new(meas, w).unwrap();
        let c = cay_so3(&Vec3::new(0.9, 0.0, -0.3));
        assert_relative_eq!(
            cost_rotation_averaging(&p, &c).unwrap(),
            cost_rotation_averaging(&q, &c).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        assert!(RotationAveragingProblem::new(vec![], vec![]).is_err());
        let bad_w = Mat3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0));
        assert!(
            RotationAveragingProblem::new(vec![RotationMatrix::identity()], vec![bad_w]).is_err()
        );
        assert!(ContinuousTrajectoryProblem::new(
            vec![0.0, 0.0],
            vec![PoseMeasurement {
                index: 0,
                pose: PoseMatrix::identity(),
                weight: Mat6::identity()
            }],
            Mat6::identity(),
            Vec6::zeros(),
            Mat6::identity()
        )
        .is_err());
    }

    #[test]
    fn json_round_trip() {
        let gt = discrete_groundtruth(3);
        let p = simulate_discrete(&gt, 0.2, &mut rng(7)).unwrap();
        let inst = ProblemInstance::Discrete(p);
        let json = serde_json::to_string(&inst.to_json()).unwrap();
        let parsed: ProblemJson = serde_json::from_str(&json).unwrap();
        let back = ProblemInstance::from_json(&parsed).unwrap();
        let json2 = serde_json::to_string(&back.to_json()).unwrap();
        assert_eq!(json, json2);
    }
}
