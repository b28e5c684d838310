//! Gauss-Newton local solvers for the four estimation problems.
//!
//! Each solver perturbs its operating point on the manifold through the
//! Cayley map, `C <- cay(psi^) C_op`, linearizes the residuals with the
//! inverse Cayley Jacobians, and solves the normal equations for the
//! optimal perturbation.  The trajectory problems run a backtracking
//! Armijo line search by default; the averaging problems take plain full
//! steps.  Convergence requires both a step norm below `step_tol` and a
//! relative cost change below `rel_cost_tol`, so the solver does not stop
//! prematurely on flat regions.

use crate::liegroup::{
    adjoint, cay_inv_se3, cay_inv_so3, cay_se3, cay_so3, exp_so3, jac_cay_se3_inv,
    jac_cay_so3_inv, GeometryError, Mat3, PoseMatrix, RotationMatrix, Vec3, Vec6,
};
use crate::problems::{
    cost_continuous, cost_discrete, cost_pose_averaging, cost_rotation_averaging, wnoa_q,
    ContinuousTrajectoryProblem, DiscreteTrajectoryProblem, PoseAveragingProblem, ProblemError,
    RotationAveragingProblem, TrajectoryEstimate,
};
use nalgebra::{Cholesky, DMatrix, DVector, SMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GnError {
    #[error("normal equations are singular")]
    SingularNormalEquations,
    #[error("estimate has wrong number of states")]
    WrongStateCount,
    #[error("continuous solver needs twist estimates")]
    MissingTwists,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone)]
pub struct GnOptions {
    pub max_iterations: usize,
    /// Step-norm convergence tolerance.
    pub step_tol: f64,
    /// Relative cost-change convergence tolerance.
    pub rel_cost_tol: f64,
    pub line_search: bool,
    /// Backtracking factor in (0, 1).
    pub backtrack_factor: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    pub max_backtracks: usize,
}

impl Default for GnOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tol: 1e-6,
            rel_cost_tol: 1e-10,
            line_search: false,
            backtrack_factor: 0.5,
            armijo_c: 1e-4,
            max_backtracks: 40,
        }
    }
}

impl GnOptions {
    /// Plain Gauss-Newton, as used for the averaging problems.
    pub fn averaging() -> Self {
        Self::default()
    }

    /// Line search on, as the trajectory problems need for smooth
    /// convergence.
    pub fn trajectory() -> Self {
        Self {
            line_search: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct GnResult<E> {
    pub estimate: E,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each applied step, starting with the initial cost.
    /// Non-increasing when the line search is enabled.
    pub cost_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSearchOutcome {
    FullStep,
    Backtracked(usize),
    /// The direction was not a descent direction; step 0 returned.
    NonDescent,
    /// No step satisfying Armijo was found within the backtrack budget.
    Exhausted,
}

/// Backtracking Armijo line search along a fixed direction.  `cost_at`
/// evaluates the true cost at a trial step length, returning `None` where
/// the cost is undefined (e.g. a residual hits the Cayley singularity),
/// which is treated as an unacceptable trial.
pub fn line_search(
    mut cost_at: impl FnMut(f64) -> Option<f64>,
    f0: f64,
    directional_derivative: f64,
    o: &GnOptions,
) -> (f64, LineSearchOutcome) {
    if directional_derivative >= 0.0 {
        return (0.0, LineSearchOutcome::NonDescent);
    }
    let mut alpha = 1.0;
    for k in 0..=o.max_backtracks {
        if let Some(f) = cost_at(alpha) {
            if f <= f0 + o.armijo_c * alpha * directional_derivative {
                return (
                    alpha,
                    if k == 0 {
                        LineSearchOutcome::FullStep
                    } else {
                        LineSearchOutcome::Backtracked(k)
                    },
                );
            }
        }
        alpha *= o.backtrack_factor;
    }
    (0.0, LineSearchOutcome::Exhausted)
}

struct Linearization {
    h: DMatrix<f64>,
    g: DVector<f64>,
    cost: f64,
}

/// Shared Gauss-Newton driver: linearize, solve `H step = -g`, line
/// search, retract, repeat.
fn run_gn<E: Clone>(
    mut estimate: E,
    opts: &GnOptions,
    mut linearize: impl FnMut(&E) -> Result<Linearization, GnError>,
    retract: impl Fn(&E, &DVector<f64>, f64) -> E,
    cost_of: impl Fn(&E) -> Option<f64>,
) -> Result<GnResult<E>, GnError> {
    let mut lin = linearize(&estimate)?;
    let mut cost_trace = vec![lin.cost];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iterations {
        let chol = Cholesky::new(lin.h.clone()).ok_or(GnError::SingularNormalEquations)?;
        let step = chol.solve(&(-&lin.g));
        if step.norm() < opts.step_tol {
            converged = true;
            break;
        }
        let alpha = if opts.line_search {
            let g0 = 2.0 * lin.g.dot(&step);
            let (alpha, outcome) =
                line_search(|a| cost_of(&retract(&estimate, &step, a)), lin.cost, g0, opts);
            if matches!(
                outcome,
                LineSearchOutcome::NonDescent | LineSearchOutcome::Exhausted
            ) {
                break;
            }
            alpha
        } else {
            1.0
        };

        estimate = retract(&estimate, &step, alpha);
        let next = linearize(&estimate)?;
        iterations += 1;
        cost_trace.push(next.cost);
        let step_small = alpha * step.norm() < opts.step_tol;
        let cost_small =
            (lin.cost - next.cost).abs() <= opts.rel_cost_tol * (1.0 + next.cost.abs());
        lin = next;
        if step_small && cost_small {
            converged = true;
            break;
        }
    }

    Ok(GnResult {
        estimate,
        cost: lin.cost,
        iterations,
        converged,
        cost_trace,
    })
}

/// Gauss-Newton on SO(3): `C = cay(psi^) C_op` with normal equations built
/// from `J_c(phi_op_m)^-1`.
pub fn gn_rotation_averaging(
    p: &RotationAveragingProblem,
    init: &RotationMatrix,
    opts: &GnOptions,
) -> Result<GnResult<RotationMatrix>, GnError> {
    run_gn(
        *init,
        opts,
        |c_op| {
            let mut h = DMatrix::<f64>::zeros(3, 3);
            let mut g = DVector::<f64>::zeros(3);
            let mut cost = 0.0;
            for (meas, w) in p.measurements().iter().zip(p.weights()) {
                let phi = cay_inv_so3(&c_op.compose(&meas.inverse()))?;
                let j = jac_cay_so3_inv(&phi);
                let jtw = j.transpose() * w;
                let hk: Mat3 = jtw * j;
                let gk: Vec3 = jtw * phi;
                for a in 0..3 {
                    for b in 0..3 {
                        h[(a, b)] += hk[(a, b)];
                    }
                    g[a] += gk[a];
                }
                cost += (phi.transpose() * w * phi)[0];
            }
            Ok(Linearization { h, g, cost })
        },
        |c_op, step, alpha| {
            let psi = Vec3::new(step[0], step[1], step[2]) * alpha;
            cay_so3(&psi).compose(c_op)
        },
        |c| cost_rotation_averaging(p, c).ok(),
    )
}

/// Gauss-Newton on SE(3): `T = cay(eps^) T_op`.
pub fn gn_pose_averaging(
    p: &PoseAveragingProblem,
    init: &PoseMatrix,
    opts: &GnOptions,
) -> Result<GnResult<PoseMatrix>, GnError> {
    run_gn(
        *init,
        opts,
        |t_op| {
            let mut h = DMatrix::<f64>::zeros(6, 6);
            let mut g = DVector::<f64>::zeros(6);
            let mut cost = 0.0;
            for (meas, w) in p.measurements().iter().zip(p.weights()) {
                let xi = cay_inv_se3(&t_op.compose(&meas.inverse()))?;
                let j = jac_cay_se3_inv(&xi);
                let jtw = j.transpose() * w;
                let hk = jtw * j;
                let gk = jtw * xi;
                for a in 0..6 {
                    for b in 0..6 {
                        h[(a, b)] += hk[(a, b)];
                    }
                    g[a] += gk[a];
                }
                cost += (xi.transpose() * w * xi)[0];
            }
            Ok(Linearization { h, g, cost })
        },
        |t_op, step, alpha| {
            let eps = Vec6::from_fn(|i, _| step[i]) * alpha;
            cay_se3(&eps).compose(t_op)
        },
        |t| cost_pose_averaging(p, t).ok(),
    )
}

fn add_block6(h: &mut DMatrix<f64>, row: usize, col: usize, block: &SMatrix<f64, 6, 6>) {
    for a in 0..6 {
        for b in 0..6 {
            h[(6 * row + a, 6 * col + b)] += block[(a, b)];
        }
    }
}

fn add_vec6(g: &mut DVector<f64>, row: usize, v: &Vec6) {
    for a in 0..6 {
        g[6 * row + a] += v[a];
    }
}

fn retract_poses(poses: &[PoseMatrix], step: &DVector<f64>, alpha: f64) -> Vec<PoseMatrix> {
    poses
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let eps = Vec6::from_fn(|i, _| alpha * step[6 * k + i]);
            cay_se3(&eps).compose(t)
        })
        .collect()
}

/// Gauss-Newton for the discrete trajectory problem: block system over the
/// per-state perturbations, with the relative rows coupling consecutive
/// states through `J_c(xi_op)^-1 Ad(T_op,k+1 T_op,k^-1)`.
pub fn gn_discrete(
    p: &DiscreteTrajectoryProblem,
    init: &TrajectoryEstimate,
    opts: &GnOptions,
) -> Result<GnResult<TrajectoryEstimate>, GnError> {
    let k_count = p.num_states();
    if init.poses.len() != k_count {
        return Err(GnError::WrongStateCount);
    }
    run_gn(
        init.clone(),
        opts,
        |est| {
            let mut h = DMatrix::<f64>::zeros(6 * k_count, 6 * k_count);
            let mut g = DVector::<f64>::zeros(6 * k_count);
            let mut cost = 0.0;
            for (k, (meas, w)) in p.absolute().iter().enumerate() {
                let xi = cay_inv_se3(&est.poses[k].compose(&meas.inverse()))?;
                let j = jac_cay_se3_inv(&xi);
                let jtw = j.transpose() * w;
                add_block6(&mut h, k, k, &(jtw * j));
                add_vec6(&mut g, k, &(jtw * xi));
                cost += (xi.transpose() * w * xi)[0];
            }
            for (k, (meas, w)) in p.relative().iter().enumerate() {
                let step_pose = est.poses[k + 1].compose(&est.poses[k].inverse());
                let xi = cay_inv_se3(&step_pose.compose(&meas.inverse()))?;
                let j = jac_cay_se3_inv(&xi);
                let t_op = adjoint(&step_pose);
                // Residual linearization: xi + J eps_{k+1} - J T_op eps_k.
                let b_next = j;
                let b_prev = -j * t_op.matrix();
                let wj_next = b_next.transpose() * w;
                let wj_prev = b_prev.transpose() * w;
                add_block6(&mut h, k + 1, k + 1, &(wj_next * b_next));
                add_block6(&mut h, k, k, &(wj_prev * b_prev));
                add_block6(&mut h, k + 1, k, &(wj_next * b_prev));
                add_block6(&mut h, k, k + 1, &(wj_prev * b_next));
                add_vec6(&mut g, k + 1, &(wj_next * xi));
                add_vec6(&mut g, k, &(wj_prev * xi));
                cost += (xi.transpose() * w * xi)[0];
            }
            Ok(Linearization { h, g, cost })
        },
        |est, step, alpha| TrajectoryEstimate {
            poses: retract_poses(&est.poses, step, alpha),
            twists: est.twists.clone(),
        },
        |est| cost_discrete(p, est).ok(),
    )
}

/// Gauss-Newton for the continuous problem over stacked
/// `(pose perturbation, twist perturbation)` states; missing measurements
/// simply contribute no rows.
pub fn gn_continuous(
    p: &ContinuousTrajectoryProblem,
    init: &TrajectoryEstimate,
    opts: &GnOptions,
) -> Result<GnResult<TrajectoryEstimate>, GnError> {
    let k_count = p.num_states();
    if init.poses.len() != k_count {
        return Err(GnError::WrongStateCount);
    }
    if init.twists.as_ref().map(|t| t.len()) != Some(k_count) {
        return Err(GnError::MissingTwists);
    }
    let q1_inv = Cholesky::new(*p.q1()).expect("validated SPD").inverse();

    run_gn(
        init.clone(),
        opts,
        |est| {
            let twists = est.twists.as_ref().expect("checked above");
            let dim = 12 * k_count;
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut g = DVector::<f64>::zeros(dim);
            let mut cost = 0.0;

            for m in p.measurements() {
                let k = m.index;
                let xi = cay_inv_se3(&est.poses[k].compose(&m.pose.inverse()))?;
                let j = jac_cay_se3_inv(&xi);
                let jtw = j.transpose() * m.weight;
                let hb = jtw * j;
                let gb = jtw * xi;
                for a in 0..6 {
                    for b in 0..6 {
                        h[(12 * k + a, 12 * k + b)] += hb[(a, b)];
                    }
                    g[12 * k + a] += gb[a];
                }
                cost += (xi.transpose() * m.weight * xi)[0];
            }

            // Initial-twist prior: residual (v0_mean - w_1) - eta_1.
            let dv = p.v0_mean() - twists[0];
            for a in 0..6 {
                for b in 0..6 {
                    h[(6 + a, 6 + b)] += q1_inv[(a, b)];
                }
            }
            let gp = q1_inv * dv;
            for a in 0..6 {
                g[6 + a] -= gp[a];
            }
            cost += (dv.transpose() * q1_inv * dv)[0];

            for k in 0..k_count - 1 {
                let dt = p.timestamps()[k + 1] - p.timestamps()[k];
                let q = wnoa_q(p.timestamps()[k], p.timestamps()[k + 1], p.qc())?;
                let q_inv = Cholesky::new(q).expect("WNOA covariance is SPD").inverse();
                let step_pose = est.poses[k + 1].compose(&est.poses[k].inverse());
                let xi = cay_inv_se3(&step_pose)?;
                let j = jac_cay_se3_inv(&xi);
                let t_op = adjoint(&step_pose);

                let mut e_op = SMatrix::<f64, 12, 1>::zeros();
                e_op.fixed_rows_mut::<6>(0)
                    .copy_from(&(dt * twists[k] - xi));
                e_op.fixed_rows_mut::<6>(6)
                    .copy_from(&(twists[k] - twists[k + 1]));

                // residual = e_op + F_k x_k - E_{k+1} x_{k+1}.
                let mut f_k = SMatrix::<f64, 12, 12>::zeros();
                f_k.fixed_view_mut::<6, 6>(0, 0)
                    .copy_from(&(j * t_op.matrix()));
                f_k.fixed_view_mut::<6, 6>(0, 6)
                    .copy_from(&(SMatrix::<f64, 6, 6>::identity() * dt));
                f_k.fixed_view_mut::<6, 6>(6, 6)
                    .copy_from(&SMatrix::<f64, 6, 6>::identity());
                let mut e_next = SMatrix::<f64, 12, 12>::zeros();
                e_next.fixed_view_mut::<6, 6>(0, 0).copy_from(&j);
                e_next
                    .fixed_view_mut::<6, 6>(6, 6)
                    .copy_from(&SMatrix::<f64, 6, 6>::identity());

                let ftq = f_k.transpose() * q_inv;
                let etq = e_next.transpose() * q_inv;
                let h_kk = ftq * f_k;
                let h_nn = etq * e_next;
                let h_nk = -etq * f_k;
                let g_k = ftq * e_op;
                let g_n = -etq * e_op;
                for a in 0..12 {
                    for b in 0..12 {
                        h[(12 * k + a, 12 * k + b)] += h_kk[(a, b)];
                        h[(12 * (k + 1) + a, 12 * (k + 1) + b)] += h_nn[(a, b)];
                        h[(12 * (k + 1) + a, 12 * k + b)] += h_nk[(a, b)];
                        h[(12 * k + a, 12 * (k + 1) + b)] += h_nk[(b, a)];
                    }
                    g[12 * k + a] += g_k[a];
                    g[12 * (k + 1) + a] += g_n[a];
                }
                cost += (e_op.transpose() * q_inv * e_op)[0];
            }
            Ok(Linearization { h, g, cost })
        },
        |est, step, alpha| {
            let twists = est.twists.as_ref().expect("checked above");
            let poses = est
                .poses
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let eps = Vec6::from_fn(|i, _| alpha * step[12 * k + i]);
                    cay_se3(&eps).compose(t)
                })
                .collect();
            let new_twists = twists
                .iter()
                .enumerate()
                .map(|(k, w)| w + Vec6::from_fn(|i, _| alpha * step[12 * k + 6 + i]))
                .collect();
            TrajectoryEstimate::with_twists(poses, new_twists)
        },
        |est| cost_continuous(p, est).ok(),
    )
}

/// Random rotation for experiment initialization: axis uniform on the
/// sphere, angle uniform on [0, pi].
pub fn random_rotation_init<R: Rng>(rng: &mut R) -> RotationMatrix {
    let mut axis = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    while axis.norm() < 1e-9 {
        axis = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    }
    axis /= axis.norm();
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    exp_so3(&(axis * angle))
}

/// Random pose for experiment initialization: random rotation and a
/// translation drawn from `N(0, extent^2 I)`.
pub fn random_pose_init<R: Rng>(rng: &mut R, extent: f64) -> PoseMatrix {
    let r = Vec3::from_fn(|_, _| extent * rng.sample::<f64, _>(StandardNormal));
    PoseMatrix::from_parts(random_rotation_init(rng), r)
}

/// Random trajectory initialization; twists, when requested, are drawn
/// from `N(0, 0.25 I)`.
pub fn random_trajectory_init<R: Rng>(
    rng: &mut R,
    k: usize,
    extent: f64,
    with_twists: bool,
) -> TrajectoryEstimate {
    let poses = (0..k).map(|_| random_pose_init(rng, extent)).collect();
    if with_twists {
        let twists = (0..k)
            .map(|_| Vec6::from_fn(|_, _| 0.5 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        TrajectoryEstimate::with_twists(poses, twists)
    } else {
        TrajectoryEstimate::poses_only(poses)
    }
}

/// Spatial extent of a set of poses (max pairwise translation distance,
/// floored at 1), the scale used for random initialization.
pub fn trajectory_extent(poses: &[PoseMatrix]) -> f64 {
    let mut extent = 1.0f64;
    for a in poses {
        for b in poses {
            extent = extent.max((a.translation() - b.translation()).norm());
        }
    }
    extent
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn line_search_behaviour() {
        let o = GnOptions {
            line_search: true,
            ..GnOptions::default()
        };
        // Quadratic with minimum at alpha = 1: full step satisfies Armijo.
        let f = |a: f64| Some((a - 1.0) * (a - 1.0));
        let (alpha, outcome) = line_search(f, 1.0, -2.0, &o);
        assert_eq!(alpha, 1.0);
        assert_eq!(outcome, LineSearchOutcome::FullStep);

        // Cost increases at the full step: backtracks to something lower.
        let g = |a: f64| Some((a - 0.1) * (a - 0.1));
        let (alpha, outcome) = line_search(g, 0.01, -0.02, &o);
        assert!(alpha < 1.0 && alpha > 0.0);
        assert!(matches!(outcome, LineSearchOutcome::Backtracked(_)));
        assert!(g(alpha).unwrap() < 0.01);

        // Non-descent direction: step 0 with the flag.
        let (alpha, outcome) = line_search(|_| Some(1.0), 1.0, 0.5, &o);
        assert_eq!(alpha, 0.0);
        assert_eq!(outcome, LineSearchOutcome::NonDescent);
    }

    #[test]
    fn identical_measurements_converge_in_zero_iterations() {
        let c = cay_so3(&Vec3::new(0.2, -0.4, 0.1));
        let p = RotationAveragingProblem::new(vec![c; 5], vec![Mat3::identity(); 5]).unwrap();
        let out = gn_rotation_averaging(&p, &c, &GnOptions::averaging()).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.converged);
        assert!(out.cost < 1e-18);

        let t = cay_se3(&Vec6::repeat(0.1));
        let pp = PoseAveragingProblem::new(vec![t; 4], vec![crate::liegroup::Mat6::identity(); 4])
            .unwrap();
        let out = gn_pose_averaging(&pp, &t, &GnOptions::averaging()).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.cost < 1e-18);
    }

    #[test]
    fn rotation_averaging_converges_from_groundtruth() {
        let mut r = rng(1);
        let gt = random_rotation_init(&mut r);
        let p = simulate_rotation_averaging(&gt, 10, 0.2, &mut r).unwrap();
        let out = gn_rotation_averaging(&p, &gt, &GnOptions::averaging()).unwrap();
        assert!(out.converged);
        // Stationarity: the gradient at the solution is small relative to
        // the cost scale (H is bounded by the weights).
        let mut g = Vec3::zeros();
        for (meas, w) in p.measurements().iter().zip(p.weights()) {
            let phi = cay_inv_so3(&out.estimate.compose(&meas.inverse())).unwrap();
            g += jac_cay_so3_inv(&phi).transpose() * w * phi;
        }
        assert!(
            2.0 * g.norm() <= 1e-4 * (1.0 + out.cost),
            "gradient {} cost {}",
            g.norm(),
            out.cost
        );
    }

    #[test]
    fn noiseless_trajectories_converge_immediately() {
        let mut r = rng(2);
        let gt = discrete_groundtruth(4);
        let p = simulate_discrete(&gt, 0.0, &mut r).unwrap();
        let est = TrajectoryEstimate::poses_only(gt.clone());
        let out = gn_discrete(&p, &est, &GnOptions::trajectory()).unwrap();
        assert!(out.converged && out.cost < 1e-18 && out.iterations == 0);

        let ts: Vec<f64> = (0..4).map(|i| i as f64).collect();
        let twist = Vec6::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.2]);
        let gt = continuous_groundtruth(&ts, &twist);
        let pc = simulate_continuous(
            &ts,
            &gt,
            &start_middle_end(4),
            0.0,
            crate::liegroup::Mat6::identity(),
            crate::liegroup::Mat6::identity(),
            &mut r,
        )
        .unwrap();
        let out = gn_continuous(&pc, &gt, &GnOptions::trajectory()).unwrap();
        assert!(out.converged && out.cost < 1e-16, "cost {}", out.cost);
    }

    /// Finite-difference Gauss-Newton oracle: stack the residuals, FD the
    /// Jacobian about the current estimate, and form the normal-equation
    /// step.  The analytic first step must match.
    fn fd_step_discrete(p: &DiscreteTrajectoryProblem, est: &TrajectoryEstimate) -> DVector<f64> {
        let k = p.num_states();
        let dim = 6 * k;
        let res_dim = 6 * (2 * k - 1);
        let residuals = |eps: &DVector<f64>| -> DVector<f64> {
            let poses = retract_poses(&est.poses, eps, 1.0);
            let mut r = DVector::<f64>::zeros(res_dim);
            let mut row = 0;
            for (kk, (meas, _)) in p.absolute().iter().enumerate() {
                let xi = cay_inv_se3(&poses[kk].compose(&meas.inverse())).unwrap();
                for a in 0..6 {
                    r[row + a] = xi[a];
                }
                row += 6;
            }
            for (kk, (meas, _)) in p.relative().iter().enumerate() {
                let step = poses[kk + 1].compose(&poses[kk].inverse());
                let xi = cay_inv_se3(&step.compose(&meas.inverse())).unwrap();
                for a in 0..6 {
                    r[row + a] = xi[a];
                }
                row += 6;
            }
            r
        };
        let r0 = residuals(&DVector::zeros(dim));
        let hstep = 1e-6;
        let mut jac = DMatrix::<f64>::zeros(res_dim, dim);
        for c in 0..dim {
            let mut ep = DVector::<f64>::zeros(dim);
            ep[c] = hstep;
            let mut em = DVector::<f64>::zeros(dim);
            em[c] = -hstep;
            let col = (residuals(&ep) - residuals(&em)) / (2.0 * hstep);
            jac.set_column(c, &col);
        }
        // Block-diagonal weights in residual order.
        let mut w = DMatrix::<f64>::zeros(res_dim, res_dim);
        let mut row = 0;
        for (_, wk) in p.absolute() {
            for a in 0..6 {
                for b in 0..6 {
                    w[(row + a, row + b)] = wk[(a, b)];
                }
            }
            row += 6;
        }
        for (_, wk) in p.relative() {
            for a in 0..6 {
                for b in 0..6 {
                    w[(row + a, row + b)] = wk[(a, b)];
                }
            }
            row += 6;
        }
        let h = jac.transpose() * &w * &jac;
        let g = jac.transpose() * &w * r0;
        Cholesky::new(h).unwrap().solve(&(-g))
    }

    #[test]
    fn discrete_first_step_matches_fd_oracle() {
        let mut r = rng(3);
        let gt = discrete_groundtruth(2);
        let p = simulate_discrete(&gt, 0.15, &mut r).unwrap();
        let init = TrajectoryEstimate::poses_only(
            gt.iter()
                .map(|t| cay_se3(&Vec6::from_fn(|_, _| r.gen_range(-0.1..0.1))).compose(t))
                .collect(),
        );
        let fd = fd_step_discrete(&p, &init);

        // One plain GN iteration.
        let one = GnOptions {
            max_iterations: 1,
            line_search: false,
            ..GnOptions::default()
        };
        let out = gn_discrete(&p, &init, &one).unwrap();
        // Recover the applied step from the pose change.
        let mut applied = DVector::<f64>::zeros(12);
        for k in 0..2 {
            let eps =
                cay_inv_se3(&out.estimate.poses[k].compose(&init.poses[k].inverse())).unwrap();
            for a in 0..6 {
                applied[6 * k + a] = eps[a];
            }
        }
        assert!(
            (applied.clone() - &fd).norm() <= 1e-6 * (1.0 + fd.norm()),
            "analytic {applied:?} vs fd {fd:?}"
        );
    }

    #[test]
    fn trajectory_cost_traces_are_non_increasing_with_line_search() {
        let mut r = rng(4);
        for trial in 0..20 {
            let gt = discrete_groundtruth(4);
            let p = simulate_discrete(&gt, 0.4, &mut r).unwrap();
            let init = random_trajectory_init(&mut r, 4, trajectory_extent(&gt), false);
            if let Ok(out) = gn_discrete(&p, &init, &GnOptions::trajectory()) {
                for pair in out.cost_trace.windows(2) {
                    assert!(
                        pair[1] <= pair[0] + 1e-12,
                        "trial {trial}: cost rose {} -> {}",
                        pair[0],
                        pair[1]
                    );
                }
            }
        }
    }

    #[test]
    fn manifold_is_preserved_through_iterations() {
        let mut r = rng(5);
        let gt = random_rotation_init(&mut r);
        let p = simulate_rotation_averaging(&gt, 5, 0.5, &mut r).unwrap();
        let init = random_rotation_init(&mut r);
        let out = gn_rotation_averaging(&p, &init, &GnOptions::averaging()).unwrap();
        assert!(out.estimate.orthogonality_defect() <= 1e-10);
    }
}
