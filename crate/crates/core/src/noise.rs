//! Generative noise models on SO(3) and SE(3).
//!
//! Noise lives in the Lie algebra: a zero-mean Gaussian sample `phi` is
//! pushed through the exponential or Cayley map and applied as a left
//! perturbation, `C = map(phi^) C_mean`.  The module also carries the
//! machinery for comparing the two maps: the second-order covariance
//! correction that makes a Cayley-coordinate Gaussian mimic an
//! exponential-coordinate one, and scalar angle densities with quadrature
//! for their standard deviation.

use crate::liegroup::{cay_so3, exp_se3, exp_so3, PoseMatrix, RotationMatrix};
use crate::liegroup::{cay_se3, Mat3, Mat6, Vec3, Vec6};
use nalgebra::Cholesky;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum NoiseError {
    #[error("covariance is not symmetric (defect {0:.3e})")]
    NotSymmetric(f64),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("angle {0} outside the open interval (-pi, pi) required by the Cayley density")]
    OutsideDomain(f64),
    #[error("model has a {expected} mean but a {found} operation was requested")]
    WrongVariant {
        expected: &'static str,
        found: &'static str,
    },
}

/// Which algebra-to-group map drives the distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Exponential,
    Cayley,
}

const SYMMETRY_TOL: f64 = 1e-12;

/// A Gaussian on a Lie algebra pushed through `map` onto the group, with a
/// group-valued mean.  Covariances must be symmetric and positive definite.
#[derive(Debug, Clone)]
pub enum LieGaussian {
    Rotation {
        mean: RotationMatrix,
        cov: Mat3,
        map: MapKind,
        chol: Mat3,
    },
    Pose {
        mean: PoseMatrix,
        cov: Mat6,
        map: MapKind,
        chol: Mat6,
    },
}

impl LieGaussian {
    pub fn rotation(mean: RotationMatrix, cov: Mat3, map: MapKind) -> Result<Self, NoiseError> {
        let defect = (cov - cov.transpose()).norm();
        if defect > SYMMETRY_TOL {
            return Err(NoiseError::NotSymmetric(defect));
        }
        let chol = Cholesky::new(cov).ok_or(NoiseError::NotPositiveDefinite)?;
        Ok(Self::Rotation {
            mean,
            cov,
            map,
            chol: chol.l(),
        })
    }

    pub fn pose(mean: PoseMatrix, cov: Mat6, map: MapKind) -> Result<Self, NoiseError> {
        let defect = (cov - cov.transpose()).norm();
        if defect > SYMMETRY_TOL {
            return Err(NoiseError::NotSymmetric(defect));
        }
        let chol = Cholesky::new(cov).ok_or(NoiseError::NotPositiveDefinite)?;
        Ok(Self::Pose {
            mean,
            cov,
            map,
            chol: chol.l(),
        })
    }

    /// Isotropic rotation model with covariance `sigma^2 I`.
    pub fn isotropic_rotation(
        mean: RotationMatrix,
        sigma: f64,
        map: MapKind,
    ) -> Result<Self, NoiseError> {
        Self::rotation(mean, Mat3::identity() * sigma * sigma, map)
    }

    pub fn isotropic_pose(mean: PoseMatrix, sigma: f64, map: MapKind) -> Result<Self, NoiseError> {
        Self::pose(mean, Mat6::identity() * sigma * sigma, map)
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws `C = map(phi^) C_mean` with `phi ~ N(0, cov)`.
pub fn sample_rotation<R: Rng>(
    model: &LieGaussian,
    rng: &mut R,
) -> Result<RotationMatrix, NoiseError> {
    match model {
        LieGaussian::Rotation { mean, map, chol, .. } => {
            let z = Vec3::from_fn(|_, _| standard_normal(rng));
            let phi = chol * z;
            let perturb = match map {
                MapKind::Exponential => exp_so3(&phi),
                MapKind::Cayley => cay_so3(&phi),
            };
            Ok(perturb.compose(mean))
        }
        LieGaussian::Pose { .. } => Err(NoiseError::WrongVariant {
            expected: "pose",
            found: "rotation sample",
        }),
    }
}

/// Draws `T = map(xi^) T_mean` with `xi ~ N(0, cov)`; same left-perturbation
/// convention as [`sample_rotation`].
pub fn sample_pose<R: Rng>(model: &LieGaussian, rng: &mut R) -> Result<PoseMatrix, NoiseError> {
    match model {
        LieGaussian::Pose { mean, map, chol, .. } => {
            let z = Vec6::from_fn(|_, _| standard_normal(rng));
            let xi = chol * z;
            let perturb = match map {
                MapKind::Exponential => exp_se3(&xi),
                MapKind::Cayley => cay_se3(&xi),
            };
            Ok(perturb.compose(mean))
        }
        LieGaussian::Rotation { .. } => Err(NoiseError::WrongVariant {
            expected: "rotation",
            found: "pose sample",
        }),
    }
}

/// Second-order moment matching from exponential to Cayley coordinates:
/// `Sigma_2 = Sigma_1 + (tr(Sigma_1) I + 2 Sigma_1) Sigma_1 / 6`.
///
/// The correction term is positive semidefinite, so the output dominates the
/// input.  In one dimension this reduces to `sigma_2^2 = sigma_1^2 + sigma_1^4/2`.
pub fn cov_exp_to_cay(sigma1: &Mat3) -> Result<Mat3, NoiseError> {
    let defect = (sigma1 - sigma1.transpose()).norm();
    if defect > SYMMETRY_TOL {
        return Err(NoiseError::NotSymmetric(defect));
    }
    Cholesky::new(*sigma1).ok_or(NoiseError::NotPositiveDefinite)?;
    let corrected =
        sigma1 + (Mat3::identity() * sigma1.trace() + 2.0 * sigma1) * sigma1 / 6.0;
    Ok(corrected)
}

/// Scalar density on the rotation angle for a single-axis family.
///
/// For the exponential map the angle is exactly the coordinate, giving a
/// Gaussian.  For the Cayley map the coordinate is `2 tan(varphi/2)`, so the
/// change of variables brings in a `sec^2(varphi/2)` factor and confines the
/// angle to (-pi, pi).
#[derive(Debug, Clone, Copy)]
pub struct AngleDensity {
    pub map: MapKind,
    pub sigma: f64,
}

impl AngleDensity {
    pub fn new(map: MapKind, sigma: f64) -> Result<Self, NoiseError> {
        if !(sigma > 0.0) {
            return Err(NoiseError::NonPositiveSigma(sigma));
        }
        Ok(Self { map, sigma })
    }
}

/// Evaluates the angle density at `varphi`.
pub fn angle_density(d: &AngleDensity, varphi: f64) -> Result<f64, NoiseError> {
    let s2 = d.sigma * d.sigma;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * s2).sqrt();
    match d.map {
        MapKind::Exponential => Ok(norm * (-0.5 * varphi * varphi / s2).exp()),
        MapKind::Cayley => {
            if varphi.abs() >= std::f64::consts::PI {
                return Err(NoiseError::OutsideDomain(varphi));
            }
            let half = 0.5 * varphi;
            let coord = 2.0 * half.tan();
            let sec2 = 1.0 / (half.cos() * half.cos());
            Ok(norm * (-0.5 * coord * coord / s2).exp() * sec2)
        }
    }
}

/// Standard deviation of the angle under `d`, computed by adaptive Simpson
/// quadrature of `varphi^2 p(varphi)` on (-pi, pi), relative accuracy ~1e-5.
pub fn numeric_angle_std(d: &AngleDensity) -> f64 {
    let f = |phi: f64| phi * phi * angle_density(d, phi).unwrap_or(0.0);
    integrate(&f).sqrt()
}

/// Total mass of the density on (-pi, pi), for normalization checks.
pub fn angle_density_mass(d: &AngleDensity) -> f64 {
    let f = |phi: f64| angle_density(d, phi).unwrap_or(0.0);
    integrate(&f)
}

/// Adaptive Simpson on (-pi + 1e-9, pi - 1e-9).  The sec^2 integrand is
/// smooth away from the endpoints and the Gaussian factor kills them, so the
/// clipped interval loses nothing.
fn integrate(f: &dyn Fn(f64) -> f64) -> f64 {
    let a = -std::f64::consts::PI + 1e-9;
    let b = std::f64::consts::PI - 1e-9;
    // Split the interval so narrow peaks near zero are not missed by the
    // first coarse Simpson estimate.
    let knots = [a, a / 2.0, -0.5, 0.0, 0.5, b / 2.0, b];
    let mut total = 0.0;
    for w in knots.windows(2) {
        total += adaptive_simpson(f, w[0], w[1], 1e-10, 60);
    }
    total
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let whole = simpson(f, a, b);
    let left = simpson(f, a, m);
    let right = simpson(f, m, b);
    let err = left + right - whole;
    if depth == 0 || err.abs() <= 15.0 * tol {
        return left + right + err / 15.0;
    }
    adaptive_simpson(f, a, m, tol / 2.0, depth - 1)
        + adaptive_simpson(f, m, b, tol / 2.0, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{cay_inv_se3, cay_inv_so3};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn vanishing_covariance_returns_mean() {
        let mean = cay_so3(&Vec3::new(0.3, -0.4, 0.2));
        let model =
            LieGaussian::rotation(mean, Mat3::identity() * 1e-20, MapKind::Cayley).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let sample = sample_rotation(&model, &mut rng).unwrap();
        assert!((sample.matrix() - mean.matrix()).norm() < 1e-8);

        let pmean = cay_se3(&Vec6::repeat(0.2));
        let pmodel = LieGaussian::pose(pmean, Mat6::identity() * 1e-20, MapKind::Cayley).unwrap();
        let psample = sample_pose(&pmodel, &mut rng).unwrap();
        assert!((psample.matrix() - pmean.matrix()).norm() < 1e-8);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let mean = RotationMatrix::identity();
        let model = LieGaussian::isotropic_rotation(mean, 0.3, MapKind::Cayley).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| *sample_rotation(&model, &mut rng).unwrap().matrix())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    /// Monte-Carlo oracle: the empirical mean and covariance of the algebra
    /// residuals must match the model.
    #[test]
    fn sample_statistics_match_model() {
        let mean = cay_so3(&Vec3::new(0.1, 0.2, -0.3));
        let cov = Mat3::new(0.04, 0.01, 0.0, 0.01, 0.09, -0.005, 0.0, -0.005, 0.0625);
        let model = LieGaussian::rotation(mean, cov, MapKind::Cayley).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let n = 100_000;
        let mut sum = Vec3::zeros();
        let mut sum_outer = Mat3::zeros();
        for _ in 0..n {
            let c = sample_rotation(&model, &mut rng).unwrap();
            let phi = cay_inv_so3(&c.compose(&mean.inverse())).unwrap();
            sum += phi;
            sum_outer += phi * phi.transpose();
        }
        let emp_mean = sum / n as f64;
        let emp_cov = sum_outer / n as f64 - emp_mean * emp_mean.transpose();
        // CLT bound per axis: 4 sigma / sqrt(N).
        for i in 0..3 {
            let bound = 4.0 * cov[(i, i)].sqrt() / (n as f64).sqrt();
            assert!(emp_mean[i].abs() <= bound, "axis {i}: {} > {bound}", emp_mean[i]);
        }
        assert!((emp_cov - cov).norm() <= 0.05 * cov.norm());
    }

    #[test]
    fn pose_sample_statistics_match_model() {
        let mean = cay_se3(&Vec6::repeat(0.1));
        let model = LieGaussian::isotropic_pose(mean, 0.2, MapKind::Cayley).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let n = 100_000;
        let mut sum = Vec6::zeros();
        let mut sum_outer = Mat6::zeros();
        for _ in 0..n {
            let t = sample_pose(&model, &mut rng).unwrap();
            let xi = cay_inv_se3(&t.compose(&mean.inverse())).unwrap();
            sum += xi;
            sum_outer += xi * xi.transpose();
        }
        let emp_mean = sum / n as f64;
        let emp_cov = sum_outer / n as f64 - emp_mean * emp_mean.transpose();
        let cov = Mat6::identity() * 0.04;
        for i in 0..6 {
            let bound = 4.0 * 0.2 / (n as f64).sqrt();
            assert!(emp_mean[i].abs() <= bound);
        }
        assert!((emp_cov - cov).norm() <= 0.05 * cov.norm());
    }

    #[test]
    fn rejects_bad_covariances() {
        let mut asym = Mat3::identity();
        asym[(0, 1)] = 1e-6;
        assert!(matches!(
            LieGaussian::rotation(RotationMatrix::identity(), asym, MapKind::Cayley),
            Err(NoiseError::NotSymmetric(_))
        ));
        let indef = Mat3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0));
        assert!(matches!(
            cov_exp_to_cay(&indef),
            Err(NoiseError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn cov_correction_examples() {
        // One-axis family: leading entry follows sigma^2 + sigma^4/2.
        let eps = 1e-12;
        let s1 = Mat3::from_diagonal(&Vec3::new(0.25, eps, eps));
        let s2 = cov_exp_to_cay(&s1).unwrap();
        assert_relative_eq!(s2[(0, 0)], 0.25 + 0.5 * 0.25 * 0.25, epsilon = 1e-9);

        // Zero (limit): correction vanishes with the input.
        let tiny = Mat3::identity() * 1e-30;
        assert!((cov_exp_to_cay(&tiny).unwrap() - tiny).norm() < 1e-30);

        // Isotropic input: sigma^2 I -> (sigma^2 + 5 sigma^4 / 6) I.
        let s = 0.3f64;
        let iso = Mat3::identity() * s * s;
        let out = cov_exp_to_cay(&iso).unwrap();
        let expected = s * s + 5.0 / 6.0 * s.powi(4);
        assert_relative_eq!(out, Mat3::identity() * expected, epsilon = 1e-15);
    }

    #[test]
    fn cov_correction_dominates_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = Mat3::from_fn(|_, _| rand::Rng::gen_range(&mut rng, -0.5..0.5));
            let spd = a * a.transpose() + Mat3::identity() * 0.01;
            let diff = cov_exp_to_cay(&spd).unwrap() - spd;
            let eig = nalgebra::SymmetricEigen::new(diff);
            assert!(eig.eigenvalues.min() >= -1e-12);
        }
    }

    #[test]
    fn exp_density_at_origin() {
        let d = AngleDensity::new(MapKind::Exponential, 1.0).unwrap();
        assert_relative_eq!(
            angle_density(&d, 0.0).unwrap(),
            1.0 / (2.0 * std::f64::consts::PI).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn cay_density_is_even_and_normalized() {
        for sigma in [0.2, 0.5, 1.0] {
            let d = AngleDensity::new(MapKind::Cayley, sigma).unwrap();
            for i in 1..20 {
                let phi = i as f64 * 0.15;
                assert_relative_eq!(
                    angle_density(&d, phi).unwrap(),
                    angle_density(&d, -phi).unwrap(),
                    epsilon = 1e-14
                );
            }
            let mass = angle_density_mass(&d);
            assert!((mass - 1.0).abs() <= 1e-6, "sigma {sigma}: mass {mass}");
        }
        let d = AngleDensity::new(MapKind::Cayley, 0.5).unwrap();
        assert!(angle_density(&d, 3.2).is_err());
    }

    #[test]
    fn numeric_std_of_gaussian() {
        let d = AngleDensity::new(MapKind::Exponential, 0.3).unwrap();
        assert_relative_eq!(numeric_angle_std(&d), 0.3, epsilon = 3e-6);
    }

    #[test]
    fn second_order_matching_beats_first_order() {
        for sigma1 in [0.1f64, 0.2, 0.5] {
            let sigma2 = (sigma1 * sigma1 + 0.5 * sigma1.powi(4)).sqrt();
            let second = AngleDensity::new(MapKind::Cayley, sigma2).unwrap();
            let first = AngleDensity::new(MapKind::Cayley, sigma1).unwrap();
            let err2 = (numeric_angle_std(&second) - sigma1).abs();
            let err1 = (numeric_angle_std(&first) - sigma1).abs();
            assert!(
                err2 <= err1,
                "sigma1 {sigma1}: second-order err {err2} vs first-order {err1}"
            );
            assert!(err2 <= 0.02 * sigma1, "sigma1 {sigma1}: err {err2}");
        }
    }
}
