//! Lifting of the four estimation problems into homogenized QCQP form,
//! plus feasible-lift constructors used as oracles: a lift built from any
//! feasible estimate (residuals recomputed exactly) satisfies every
//! equality and redundant constraint, and its lifted cost equals the
//! problem cost.

use super::*;
use crate::liegroup::{
    cay_inv_se3, cay_inv_so3, hat_so3, split_xi, PoseMatrix, RotationMatrix,
};
use crate::problems::{
    wnoa_q, ContinuousTrajectoryProblem, DiscreteTrajectoryProblem, PoseAveragingProblem,
    RotationAveragingProblem, TrajectoryEstimate,
};
use nalgebra::DVector;

fn cols_of(layout: &VariableLayout, state: usize) -> [usize; 3] {
    [
        layout.start(BlockKind::RotationColumn { state, col: 0 }),
        layout.start(BlockKind::RotationColumn { state, col: 1 }),
        layout.start(BlockKind::RotationColumn { state, col: 2 }),
    ]
}

fn residual_rows(start: usize, len: usize) -> Vec<LinForm> {
    (0..len).map(|a| LinForm::var(start + a)).collect()
}

/// `(c_i + c_meas_i)^T rho / 2 - c_i^T r + c_meas_i^T r_meas = 0` per column.
fn emit_abs_trans_rho(
    out: &mut Vec<QuadExpr>,
    cols: [usize; 3],
    r: usize,
    rho: usize,
    meas_c: &RotationMatrix,
    meas_r: &Vec3,
) {
    for i in 0..3 {
        let ci_meas = meas_c.column(i);
        let mut e = QuadExpr::new();
        for a in 0..3 {
            e.quad(cols[i] + a, rho + a, 0.5);
            e.lin(rho + a, 0.5 * ci_meas[a]);
            e.quad(cols[i] + a, r + a, -1.0);
        }
        e.constant(ci_meas.dot(meas_r));
        out.push(e);
    }
}

/// `r^T r - r^T r_meas + r^T r_meas^ phi / 2 - r^T rho = 0`.
fn emit_abs_compactness(
    out: &mut Vec<QuadExpr>,
    r: usize,
    rho: usize,
    phi: usize,
    meas_r: &Vec3,
) {
    let mut e = QuadExpr::new();
    let rm_hat = hat_so3(meas_r);
    for a in 0..3 {
        e.quad(r + a, r + a, 1.0);
        e.lin(r + a, -meas_r[a]);
        e.quad(r + a, rho + a, -1.0);
        for b in 0..3 {
            e.quad(r + a, phi + b, 0.5 * rm_hat[(a, b)]);
        }
    }
    out.push(e);
}

/// `phi^T c_i - phi^T c_meas_i = 0` per column.
fn emit_abs_phi_col(out: &mut Vec<QuadExpr>, phi: usize, cols: [usize; 3], meas_c: &RotationMatrix) {
    for i in 0..3 {
        let ci_meas = meas_c.column(i);
        let mut e = QuadExpr::new();
        for a in 0..3 {
            e.quad(phi + a, cols[i] + a, 1.0);
            e.lin(phi + a, -ci_meas[a]);
        }
        out.push(e);
    }
}

/// `phi^T r - phi^T r_meas - phi^T rho = 0`.
fn emit_abs_phi_trans(out: &mut Vec<QuadExpr>, phi: usize, r: usize, rho: usize, meas_r: &Vec3) {
    let mut e = QuadExpr::new();
    for a in 0..3 {
        e.quad(phi + a, r + a, 1.0);
        e.lin(phi + a, -meas_r[a]);
        e.quad(phi + a, rho + a, -1.0);
    }
    out.push(e);
}

/// `c_m^T c_l - phi^T c_n / 2 - c_m^T c_meas_l + c_m^T c_meas_l^ phi / 2 = 0`
/// for the cyclic column triples of a rotation matrix.
fn emit_abs_col_cross(
    out: &mut Vec<QuadExpr>,
    phi: usize,
    cols: [usize; 3],
    meas_c: &RotationMatrix,
) {
    for (l, m, n) in [(0usize, 1usize, 2usize), (1, 2, 0), (2, 0, 1)] {
        let cl_meas = meas_c.column(l);
        let cl_hat = hat_so3(&cl_meas);
        let mut e = QuadExpr::new();
        for a in 0..3 {
            e.quad(cols[m] + a, cols[l] + a, 1.0);
            e.quad(phi + a, cols[n] + a, -0.5);
            e.lin(cols[m] + a, -cl_meas[a]);
            for b in 0..3 {
                e.quad(cols[m] + a, phi + b, 0.5 * cl_hat[(a, b)]);
            }
        }
        out.push(e);
    }
}

/// `(c_next_i + C_rel c_i)^T rho / 2 - c_next_i^T r_next
///  + c_i^T (r + C_rel^T r_rel) = 0` per column.
fn emit_rel_trans_rho(
    out: &mut Vec<QuadExpr>,
    cols_next: [usize; 3],
    cols: [usize; 3],
    r_next: usize,
    r: usize,
    rho: usize,
    rel_c: &Mat3,
    rel_r: &Vec3,
) {
    let back = rel_c.transpose() * rel_r;
    for i in 0..3 {
        let mut e = QuadExpr::new();
        for a in 0..3 {
            e.quad(cols_next[i] + a, rho + a, 0.5);
            for u in 0..3 {
                e.quad(cols[i] + u, rho + a, 0.5 * rel_c[(a, u)]);
            }
            e.quad(cols_next[i] + a, r_next + a, -1.0);
            e.quad(cols[i] + a, r + a, 1.0);
            e.lin(cols[i] + a, back[a]);
        }
        out.push(e);
    }
}

/// `r_next^T r_next - r_next^T rho - r^T rho - r^T r = 0`.
fn emit_rel_compactness(out: &mut Vec<QuadExpr>, r_next: usize, r: usize, rho: usize) {
    let mut e = QuadExpr::new();
    for a in 0..3 {
        e.quad(r_next + a, r_next + a, 1.0);
        e.quad(r_next + a, rho + a, -1.0);
        e.quad(r + a, rho + a, -1.0);
        e.quad(r + a, r + a, -1.0);
    }
    out.push(e);
}

/// `phi^T c_next_i - phi^T c_i = 0` per column.
fn emit_rel_phi_col(out: &mut Vec<QuadExpr>, phi: usize, cols_next: [usize; 3], cols: [usize; 3]) {
    for i in 0..3 {
        let mut e = QuadExpr::new();
        for a in 0..3 {
            e.quad(phi + a, cols_next[i] + a, 1.0);
            e.quad(phi + a, cols[i] + a, -1.0);
        }
        out.push(e);
    }
}

/// `phi^T r_next - phi^T r - phi^T rho = 0`.
fn emit_rel_phi_trans(out: &mut Vec<QuadExpr>, phi: usize, r_next: usize, r: usize, rho: usize) {
    let mut e = QuadExpr::new();
    for a in 0..3 {
        e.quad(phi + a, r_next + a, 1.0);
        e.quad(phi + a, r + a, -1.0);
        e.quad(phi + a, rho + a, -1.0);
    }
    out.push(e);
}

fn finish(
    layout: VariableLayout,
    cost: QuadExpr,
    equalities: Vec<QuadExpr>,
    redundant: Vec<(RedundantFamily, QuadExpr)>,
) -> QcqpInstance {
    let n = layout.dim();
    let mut instance = QcqpInstance {
        hom: SymMat::unit(n, 0, 0),
        cost: cost.into_symmat(n),
        equalities: equalities.into_iter().map(|e| e.into_symmat(n)).collect(),
        redundant: redundant
            .into_iter()
            .map(|(f, e)| (f, e.into_symmat(n)))
            .collect(),
        layout,
    };
    instance.dedup();
    instance
}

/// Lifts rotation averaging: layout `[hom, c1..c3, phi_1..phi_M]`, cost
/// `sum_m phi_m^T W_m phi_m`, six orthonormality constraints and nine
/// measurement constraints per measurement.  No redundant constraints are
/// needed; the relaxation is tight without them.
pub fn lift_rotation_averaging(p: &RotationAveragingProblem) -> QcqpInstance {
    let m_count = p.len();
    let mut kinds = vec![(BlockKind::Homogenization, 1)];
    for col in 0..3 {
        kinds.push((BlockKind::RotationColumn { state: 0, col }, 3));
    }
    for m in 0..m_count {
        kinds.push((BlockKind::ResidualPhi(ResidualTag::Measurement(m)), 3));
    }
    let layout = VariableLayout::build(kinds);
    let cols = cols_of(&layout, 0);

    let mut cost = QuadExpr::new();
    let mut eqs = Vec::new();
    emit_orthonormality(&mut eqs, cols);
    for m in 0..m_count {
        let phi = layout.start(BlockKind::ResidualPhi(ResidualTag::Measurement(m)));
        let w = &p.weights()[m];
        add_weighted_quadratic(&mut cost, &residual_rows(phi, 3), |i, j| w[(i, j)]);
        for i in 0..3 {
            emit_link(
                &mut eqs,
                phi,
                &Affine3::var(cols[i]),
                &Affine3::constant(p.measurements()[m].column(i)),
                None,
            );
        }
    }
    finish(layout, cost, eqs, Vec::new())
}

/// Lifts pose averaging: layout `[hom, c1..c3, r, (rho_m, phi_m)...]` with
/// the translation-rho and compactness redundant families.
pub fn lift_pose_averaging(p: &PoseAveragingProblem, cfg: &RedundantConfig) -> QcqpInstance {
    let m_count = p.len();
    let mut kinds = vec![(BlockKind::Homogenization, 1)];
    for col in 0..3 {
        kinds.push((BlockKind::RotationColumn { state: 0, col }, 3));
    }
    kinds.push((BlockKind::Translation { state: 0 }, 3));
    for m in 0..m_count {
        kinds.push((BlockKind::ResidualRho(ResidualTag::Measurement(m)), 3));
        kinds.push((BlockKind::ResidualPhi(ResidualTag::Measurement(m)), 3));
    }
    let layout = VariableLayout::build(kinds);
    let cols = cols_of(&layout, 0);
    let r = layout.start(BlockKind::Translation { state: 0 });

    let mut cost = QuadExpr::new();
    let mut eqs = Vec::new();
    let mut red = Vec::new();
    emit_orthonormality(&mut eqs, cols);
    for m in 0..m_count {
        let rho = layout.residual(ResidualTag::Measurement(m));
        let phi = rho + 3;
        let w = &p.weights()[m];
        add_weighted_quadratic(&mut cost, &residual_rows(rho, 6), |i, j| w[(i, j)]);
        let meas = &p.measurements()[m];
        for i in 0..3 {
            emit_link(
                &mut eqs,
                phi,
                &Affine3::var(cols[i]),
                &Affine3::constant(meas.rotation().column(i)),
                None,
            );
        }
        emit_link(
            &mut eqs,
            phi,
            &Affine3::var(r),
            &Affine3::constant(*meas.translation()),
            Some(rho),
        );
        if cfg.is_enabled(RedundantFamily::AbsTransRho) {
            let mut out = Vec::new();
            emit_abs_trans_rho(&mut out, cols, r, rho, meas.rotation(), meas.translation());
            red.extend(out.into_iter().map(|e| (RedundantFamily::AbsTransRho, e)));
        }
        if cfg.is_enabled(RedundantFamily::AbsCompactness) {
            let mut out = Vec::new();
            emit_abs_compactness(&mut out, r, rho, phi, meas.translation());
            red.extend(out.into_iter().map(|e| (RedundantFamily::AbsCompactness, e)));
        }
    }
    finish(layout, cost, eqs, red)
}

/// Lifts discrete-time trajectory estimation: per-state pose-averaging
/// structure plus relative-link constraints and their translation-rho
/// redundant rows.
pub fn lift_discrete(p: &DiscreteTrajectoryProblem, cfg: &RedundantConfig) -> QcqpInstance {
    let k_count = p.num_states();
    let mut kinds = vec![(BlockKind::Homogenization, 1)];
    for state in 0..k_count {
        for col in 0..3 {
            kinds.push((BlockKind::RotationColumn { state, col }, 3));
        }
        kinds.push((BlockKind::Translation { state }, 3));
    }
    for k in 0..k_count {
        kinds.push((BlockKind::ResidualRho(ResidualTag::Absolute(k)), 3));
        kinds.push((BlockKind::ResidualPhi(ResidualTag::Absolute(k)), 3));
    }
    for k in 0..k_count - 1 {
        kinds.push((BlockKind::ResidualRho(ResidualTag::Relative(k)), 3));
        kinds.push((BlockKind::ResidualPhi(ResidualTag::Relative(k)), 3));
    }
    let layout = VariableLayout::build(kinds);

    let mut cost = QuadExpr::new();
    let mut eqs = Vec::new();
    let mut red = Vec::new();
    for k in 0..k_count {
        let cols = cols_of(&layout, k);
        let r = layout.start(BlockKind::Translation { state: k });
        emit_orthonormality(&mut eqs, cols);

        let (meas, w) = &p.absolute()[k];
        let rho = layout.residual(ResidualTag::Absolute(k));
        let phi = rho + 3;
        add_weighted_quadratic(&mut cost, &residual_rows(rho, 6), |i, j| w[(i, j)]);
        for i in 0..3 {
            emit_link(
                &mut eqs,
                phi,
                &Affine3::var(cols[i]),
                &Affine3::constant(meas.rotation().column(i)),
                None,
            );
        }
        emit_link(
            &mut eqs,
            phi,
            &Affine3::var(r),
            &Affine3::constant(*meas.translation()),
            Some(rho),
        );
        if cfg.is_enabled(RedundantFamily::AbsTransRho) {
            let mut out = Vec::new();
            emit_abs_trans_rho(&mut out, cols, r, rho, meas.rotation(), meas.translation());
            red.extend(out.into_iter().map(|e| (RedundantFamily::AbsTransRho, e)));
        }
        if cfg.is_enabled(RedundantFamily::AbsCompactness) {
            let mut out = Vec::new();
            emit_abs_compactness(&mut out, r, rho, phi, meas.translation());
            red.extend(out.into_iter().map(|e| (RedundantFamily::AbsCompactness, e)));
        }
    }
    for k in 0..k_count - 1 {
        let cols0 = cols_of(&layout, k);
        let cols1 = cols_of(&layout, k + 1);
        let r0 = layout.start(BlockKind::Translation { state: k });
        let r1 = layout.start(BlockKind::Translation { state: k + 1 });
        let (meas, w) = &p.relative()[k];
        let rel_c = *meas.rotation().matrix();
        let rel_r = *meas.translation();
        let rho = layout.residual(ResidualTag::Relative(k));
        let phi = rho + 3;
        add_weighted_quadratic(&mut cost, &residual_rows(rho, 6), |i, j| w[(i, j)]);
        for i in 0..3 {
            emit_link(
                &mut eqs,
                phi,
                &Affine3::var(cols1[i]),
                &Affine3::rotated_var(rel_c, cols0[i]),
                None,
            );
        }
        emit_link(
            &mut eqs,
            phi,
            &Affine3::var(r1),
            &Affine3::affine(rel_c, r0, rel_r),
            Some(rho),
        );
        if cfg.is_enabled(RedundantFamily::RelTransRho) {
            let mut out = Vec::new();
            emit_rel_trans_rho(&mut out, cols1, cols0, r1, r0, rho, &rel_c, &rel_r);
            red.extend(out.into_iter().map(|e| (RedundantFamily::RelTransRho, e)));
        }
    }
    finish(layout, cost, eqs, red)
}

/// Lifts continuous-time trajectory estimation, before twist
/// marginalization.  Absolute measurement machinery exists only at measured
/// indices; relative links tie consecutive poses with no measurement
/// factor; twists enter the cost (motion prior) but no constraint, so
/// [`marginalize_unconstrained`] can remove them.  The full redundant list
/// is emitted: the two pose-averaging families, the phi-projection and
/// column-cross families at measured states, and the four relative-link
/// families per interval.
pub fn lift_continuous(p: &ContinuousTrajectoryProblem, cfg: &RedundantConfig) -> QcqpInstance {
    let k_count = p.num_states();
    let mut kinds = vec![(BlockKind::Homogenization, 1)];
    for state in 0..k_count {
        for col in 0..3 {
            kinds.push((BlockKind::RotationColumn { state, col }, 3));
        }
        kinds.push((BlockKind::Translation { state }, 3));
    }
    for m in p.measurements() {
        kinds.push((BlockKind::ResidualRho(ResidualTag::Absolute(m.index)), 3));
        kinds.push((BlockKind::ResidualPhi(ResidualTag::Absolute(m.index)), 3));
    }
    for k in 0..k_count - 1 {
        kinds.push((BlockKind::ResidualRho(ResidualTag::Relative(k)), 3));
        kinds.push((BlockKind::ResidualPhi(ResidualTag::Relative(k)), 3));
    }
    for state in 0..k_count {
        kinds.push((BlockKind::Twist { state }, 6));
    }
    let layout = VariableLayout::build(kinds);

    let mut cost = QuadExpr::new();
    let mut eqs = Vec::new();
    let mut red = Vec::new();

    for k in 0..k_count {
        emit_orthonormality(&mut eqs, cols_of(&layout, k));
    }

    for m in p.measurements() {
        let k = m.index;
        let cols = cols_of(&layout, k);
        let r = layout.start(BlockKind::Translation { state: k });
        let rho = layout.residual(ResidualTag::Absolute(k));
        let phi = rho + 3;
        add_weighted_quadratic(&mut cost, &residual_rows(rho, 6), |i, j| m.weight[(i, j)]);
        for i in 0..3 {
            emit_link(
                &mut eqs,
                phi,
                &Affine3::var(cols[i]),
                &Affine3::constant(m.pose.rotation().column(i)),
                None,
            );
        }
        emit_link(
            &mut eqs,
            phi,
            &Affine3::var(r),
            &Affine3::constant(*m.pose.translation()),
            Some(rho),
        );
        if cfg.is_enabled(RedundantFamily::AbsTransRho) {
            let mut out = Vec::new();
            emit_abs_trans_rho(&mut out, cols, r, rho, m.pose.rotation(), m.pose.translation());
            red.extend(out.into_iter().map(|e| (RedundantFamily::AbsTransRho, e)));
        }
        if cfg.is_enabled(RedundantFamily::AbsCompactness) {
            let mut out = Vec::new();
            emit_abs_compactness(&mut out, r, rho, phi, m.pose.translation());
            red.extend(out.into_iter().map(|e| (RedundantFamily::AbsCompactness, e)));
        }
        if cfg.is_enabled(RedundantFamily::AbsPhiCol) {
            let mut out = Vec::new();
            emit_abs_phi_col(&mut out, phi, cols, m.pose.rotation());
            red.extend(out.into_iter().map(|e| (RedundantFamily::AbsPhiCol, e)));
        }
        if cfg.is_enabled(RedundantFamily::AbsPhiTrans) {
            let mut out = Vec::new();
            emit_abs_phi_trans(&mut out, phi, r, rho, m.pose.translation());
            red.extend(out.into_iter().map(|e| (RedundantFamily::AbsPhiTrans, e)));
        }
        if cfg.is_enabled(RedundantFamily::AbsColCross) {
            let mut out = Vec::new();
            emit_abs_col_cross(&mut out, phi, cols, m.pose.rotation());
            red.extend(out.into_iter().map(|e| (RedundantFamily::AbsColCross, e)));
        }
    }

    for k in 0..k_count - 1 {
        let cols0 = cols_of(&layout, k);
        let cols1 = cols_of(&layout, k + 1);
        let r0 = layout.start(BlockKind::Translation { state: k });
        let r1 = layout.start(BlockKind::Translation { state: k + 1 });
        let rho = layout.residual(ResidualTag::Relative(k));
        let phi = rho + 3;
        for i in 0..3 {
            emit_link(
                &mut eqs,
                phi,
                &Affine3::var(cols1[i]),
                &Affine3::var(cols0[i]),
                None,
            );
        }
        emit_link(&mut eqs, phi, &Affine3::var(r1), &Affine3::var(r0), Some(rho));
        if cfg.is_enabled(RedundantFamily::RelTransRho) {
            let mut out = Vec::new();
            emit_rel_trans_rho(
                &mut out,
                cols1,
                cols0,
                r1,
                r0,
                rho,
                &Mat3::identity(),
                &Vec3::zeros(),
            );
            red.extend(out.into_iter().map(|e| (RedundantFamily::RelTransRho, e)));
        }
        if cfg.is_enabled(RedundantFamily::RelCompactness) {
            let mut out = Vec::new();
            emit_rel_compactness(&mut out, r1, r0, rho);
            red.extend(out.into_iter().map(|e| (RedundantFamily::RelCompactness, e)));
        }
        if cfg.is_enabled(RedundantFamily::RelPhiCol) {
            let mut out = Vec::new();
            emit_rel_phi_col(&mut out, phi, cols1, cols0);
            red.extend(out.into_iter().map(|e| (RedundantFamily::RelPhiCol, e)));
        }
        if cfg.is_enabled(RedundantFamily::RelPhiTrans) {
            let mut out = Vec::new();
            emit_rel_phi_trans(&mut out, phi, r1, r0, rho);
            red.extend(out.into_iter().map(|e| (RedundantFamily::RelPhiTrans, e)));
        }
    }

    // Motion-prior cost: initial-twist prior plus the WNOA interval terms.
    let twist = |state: usize| layout.start(BlockKind::Twist { state });
    let q1_inv = nalgebra::Cholesky::new(*p.q1()).expect("validated SPD").inverse();
    let prior_rows: Vec<LinForm> = (0..6)
        .map(|a| LinForm {
            constant: p.v0_mean()[a],
            terms: vec![(twist(0) + a, -1.0)],
        })
        .collect();
    add_weighted_quadratic(&mut cost, &prior_rows, |i, j| q1_inv[(i, j)]);

    for k in 0..k_count - 1 {
        let dt = p.timestamps()[k + 1] - p.timestamps()[k];
        let q = wnoa_q(p.timestamps()[k], p.timestamps()[k + 1], p.qc()).expect("dt > 0");
        let q_inv = nalgebra::Cholesky::new(q).expect("WNOA covariance is SPD").inverse();
        let xi_rel = layout.residual(ResidualTag::Relative(k));
        let mut rows: Vec<LinForm> = Vec::with_capacity(12);
        for a in 0..6 {
            rows.push(LinForm {
                constant: 0.0,
                terms: vec![(twist(k) + a, dt), (xi_rel + a, -1.0)],
            });
        }
        for a in 0..6 {
            rows.push(LinForm {
                constant: 0.0,
                terms: vec![(twist(k) + a, 1.0), (twist(k + 1) + a, -1.0)],
            });
        }
        add_weighted_quadratic(&mut cost, &rows, |i, j| q_inv[(i, j)]);
    }

    finish(layout, cost, eqs, red)
}

fn write_rotation(x: &mut DVector<f64>, layout: &VariableLayout, state: usize, c: &RotationMatrix) {
    for col in 0..3 {
        let start = layout.start(BlockKind::RotationColumn { state, col });
        for a in 0..3 {
            x[start + a] = c.matrix()[(a, col)];
        }
    }
}

fn write_vec3(x: &mut DVector<f64>, start: usize, v: &Vec3) {
    for a in 0..3 {
        x[start + a] = v[a];
    }
}

fn write_xi(x: &mut DVector<f64>, start: usize, xi: &Vec6) {
    let (rho, phi) = split_xi(xi);
    write_vec3(x, start, &rho);
    write_vec3(x, start + 3, &phi);
}

/// Lift of an arbitrary feasible estimate for rotation averaging, with the
/// residuals recomputed exactly.
pub fn feasible_lift_rotation(
    q: &QcqpInstance,
    p: &RotationAveragingProblem,
    c: &RotationMatrix,
) -> Result<DVector<f64>, QcqpError> {
    let mut x = DVector::zeros(q.dim());
    x[0] = 1.0;
    write_rotation(&mut x, &q.layout, 0, c);
    for (m, meas) in p.measurements().iter().enumerate() {
        let phi = cay_inv_so3(&c.compose(&meas.inverse()))?;
        write_vec3(
            &mut x,
            q.layout.start(BlockKind::ResidualPhi(ResidualTag::Measurement(m))),
            &phi,
        );
    }
    Ok(x)
}

pub fn feasible_lift_pose(
    q: &QcqpInstance,
    p: &PoseAveragingProblem,
    t: &PoseMatrix,
) -> Result<DVector<f64>, QcqpError> {
    let mut x = DVector::zeros(q.dim());
    x[0] = 1.0;
    write_rotation(&mut x, &q.layout, 0, t.rotation());
    write_vec3(
        &mut x,
        q.layout.start(BlockKind::Translation { state: 0 }),
        t.translation(),
    );
    for (m, meas) in p.measurements().iter().enumerate() {
        let xi = cay_inv_se3(&t.compose(&meas.inverse()))?;
        write_xi(&mut x, q.layout.residual(ResidualTag::Measurement(m)), &xi);
    }
    Ok(x)
}

pub fn feasible_lift_discrete(
    q: &QcqpInstance,
    p: &DiscreteTrajectoryProblem,
    est: &TrajectoryEstimate,
) -> Result<DVector<f64>, QcqpError> {
    let mut x = DVector::zeros(q.dim());
    x[0] = 1.0;
    for (k, pose) in est.poses.iter().enumerate() {
        write_rotation(&mut x, &q.layout, k, pose.rotation());
        write_vec3(
            &mut x,
            q.layout.start(BlockKind::Translation { state: k }),
            pose.translation(),
        );
    }
    for (k, (meas, _)) in p.absolute().iter().enumerate() {
        let xi = cay_inv_se3(&est.poses[k].compose(&meas.inverse()))?;
        write_xi(&mut x, q.layout.residual(ResidualTag::Absolute(k)), &xi);
    }
    for (k, (meas, _)) in p.relative().iter().enumerate() {
        let step = est.poses[k + 1].compose(&est.poses[k].inverse());
        let xi = cay_inv_se3(&step.compose(&meas.inverse()))?;
        write_xi(&mut x, q.layout.residual(ResidualTag::Relative(k)), &xi);
    }
    Ok(x)
}

/// Feasible lift for the continuous problem (pre-marginalization layout,
/// so the estimate must carry twists).
pub fn feasible_lift_continuous(
    q: &QcqpInstance,
    p: &ContinuousTrajectoryProblem,
    est: &TrajectoryEstimate,
) -> Result<DVector<f64>, QcqpError> {
    let twists = est
        .twists
        .as_ref()
        .ok_or(crate::problems::ProblemError::MissingTwists)?;
    let mut x = DVector::zeros(q.dim());
    x[0] = 1.0;
    for (k, pose) in est.poses.iter().enumerate() {
        write_rotation(&mut x, &q.layout, k, pose.rotation());
        write_vec3(
            &mut x,
            q.layout.start(BlockKind::Translation { state: k }),
            pose.translation(),
        );
    }
    for m in p.measurements() {
        let xi = cay_inv_se3(&est.poses[m.index].compose(&m.pose.inverse()))?;
        write_xi(&mut x, q.layout.residual(ResidualTag::Absolute(m.index)), &xi);
    }
    for k in 0..p.num_states() - 1 {
        let xi = cay_inv_se3(&est.poses[k + 1].compose(&est.poses[k].inverse()))?;
        write_xi(&mut x, q.layout.residual(ResidualTag::Relative(k)), &xi);
    }
    for (k, w) in twists.iter().enumerate() {
        let start = q.layout.start(BlockKind::Twist { state: k });
        for a in 0..6 {
            x[start + a] = w[a];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::cay_so3;
    use crate::problems::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_rotation(r: &mut ChaCha12Rng) -> RotationMatrix {
        cay_so3(&Vec3::from_fn(|_, _| r.gen_range(-1.2..1.2)))
    }

    fn random_pose(r: &mut ChaCha12Rng) -> PoseMatrix {
        PoseMatrix::from_parts(
            random_rotation(r),
            Vec3::from_fn(|_, _| r.gen_range(-2.0..2.0)),
        )
    }

    #[test]
    fn rotation_lift_counts() {
        let mut r = rng(1);
        let gt = random_rotation(&mut r);
        let p = simulate_rotation_averaging(&gt, 1, 0.1, &mut r).unwrap();
        let q = lift_rotation_averaging(&p);
        assert_eq!(q.dim(), 13);
        assert_eq!(q.equalities.len(), 15);
        assert!(q.redundant.is_empty());
    }

    #[test]
    fn pose_lift_counts() {
        let mut r = rng(2);
        let gt = random_pose(&mut r);
        let p = simulate_pose_averaging(&gt, 1, 0.1, &mut r).unwrap();
        let q = lift_pose_averaging(&p, &RedundantConfig::all());
        assert_eq!(q.dim(), 19);
        // 6 orthonormality + 9 rotation rows + 3 translation rows.
        assert_eq!(q.equalities.len(), 18);
        // 3 translation-rho rows + 1 compactness row.
        assert_eq!(q.redundant.len(), 4);
    }

    #[test]
    fn discrete_lift_counts() {
        let mut r = rng(3);
        let gt = discrete_groundtruth(2);
        let p = simulate_discrete(&gt, 0.1, &mut r).unwrap();
        let q = lift_discrete(&p, &RedundantConfig::all());
        assert_eq!(q.dim(), 43);
        assert_eq!(q.equalities.len(), 2 * 6 + 2 * 12 + 12);
        assert_eq!(q.redundant.len(), 2 * 4 + 3);
    }

    #[test]
    fn continuous_lift_counts() {
        let mut r = rng(4);
        let ts: Vec<f64> = (0..3).map(|i| i as f64).collect();
        let twist = Vec6::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.2]);
        let gt = continuous_groundtruth(&ts, &twist);
        let p = simulate_continuous(
            &ts,
            &gt,
            &[0, 2],
            0.1,
            crate::liegroup::Mat6::identity(),
            crate::liegroup::Mat6::identity(),
            &mut r,
        )
        .unwrap();
        let q = lift_continuous(&p, &RedundantConfig::all());
        // hom + 3 states * 12 + 2 measured * 6 + 2 intervals * 6 + 3 twists * 6.
        assert_eq!(q.dim(), 1 + 36 + 12 + 12 + 18);
        // 3 * 6 orthonormality + 2 * 12 absolute + 2 * 12 relative.
        assert_eq!(q.equalities.len(), 18 + 24 + 24);
        // Measured states contribute 3+1+3+1+3 = 11 rows, intervals 3+1+3+1 = 8.
        assert_eq!(q.redundant.len(), 2 * 11 + 2 * 8);
    }

    #[test]
    fn noiseless_groundtruth_lift_is_feasible_with_zero_cost() {
        let mut r = rng(5);
        let gt = random_rotation(&mut r);
        let p = simulate_rotation_averaging(&gt, 3, 0.0, &mut r).unwrap();
        let q = lift_rotation_averaging(&p);
        let x = feasible_lift_rotation(&q, &p, &gt).unwrap();
        assert!(q.check_feasibility(&x).unwrap() <= 1e-9);
        assert!(q.cost_at(&x).abs() <= 1e-18);
    }

    #[test]
    fn random_feasible_lifts_satisfy_all_constraints() {
        let mut r = rng(6);

        let gt = random_rotation(&mut r);
        let p_rot = simulate_rotation_averaging(&gt, 3, 0.3, &mut r).unwrap();
        let q_rot = lift_rotation_averaging(&p_rot);
        for _ in 0..100 {
            let est = random_rotation(&mut r);
            let x = feasible_lift_rotation(&q_rot, &p_rot, &est).unwrap();
            assert!(q_rot.check_feasibility(&x).unwrap() <= 1e-9);
            let direct = cost_rotation_averaging(&p_rot, &est).unwrap();
            assert_relative_eq!(q_rot.cost_at(&x), direct, max_relative = 1e-10);
        }

        let gt = random_pose(&mut r);
        let p_pose = simulate_pose_averaging(&gt, 3, 0.3, &mut r).unwrap();
        let q_pose = lift_pose_averaging(&p_pose, &RedundantConfig::all());
        for _ in 0..100 {
            let est = random_pose(&mut r);
            let x = feasible_lift_pose(&q_pose, &p_pose, &est).unwrap();
            assert!(q_pose.check_feasibility(&x).unwrap() <= 1e-9);
            let direct = cost_pose_averaging(&p_pose, &est).unwrap();
            assert_relative_eq!(q_pose.cost_at(&x), direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn trajectory_feasible_lifts_satisfy_all_constraints() {
        let mut r = rng(7);

        let gt = discrete_groundtruth(3);
        let p = simulate_discrete(&gt, 0.2, &mut r).unwrap();
        let q = lift_discrete(&p, &RedundantConfig::all());
        for _ in 0..100 {
            let est = TrajectoryEstimate::poses_only(
                (0..3).map(|_| random_pose(&mut r)).collect(),
            );
            let x = feasible_lift_discrete(&q, &p, &est).unwrap();
            assert!(q.check_feasibility(&x).unwrap() <= 1e-9);
            let direct = cost_discrete(&p, &est).unwrap();
            assert_relative_eq!(q.cost_at(&x), direct, max_relative = 1e-10);
        }

        let ts: Vec<f64> = vec![0.0, 0.8, 2.0];
        let twist = Vec6::from_row_slice(&[0.5, 0.1, 0.0, 0.0, 0.05, 0.2]);
        let gt = continuous_groundtruth(&ts, &twist);
        let pc = simulate_continuous(
            &ts,
            &gt,
            &[0, 2],
            0.2,
            crate::liegroup::Mat6::identity(),
            crate::liegroup::Mat6::identity(),
            &mut r,
        )
        .unwrap();
        let qc = lift_continuous(&pc, &RedundantConfig::all());
        for _ in 0..100 {
            let est = TrajectoryEstimate::with_twists(
                (0..3).map(|_| random_pose(&mut r)).collect(),
                (0..3)
                    .map(|_| Vec6::from_fn(|_, _| r.gen_range(-1.0..1.0)))
                    .collect(),
            );
            let x = feasible_lift_continuous(&qc, &pc, &est).unwrap();
            assert!(
                qc.check_feasibility(&x).unwrap() <= 1e-9,
                "violation {:.3e}",
                qc.check_feasibility(&x).unwrap()
            );
            let direct = cost_continuous(&pc, &est).unwrap();
            assert_relative_eq!(qc.cost_at(&x), direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn corrupted_lift_is_detected() {
        let mut r = rng(8);
        let gt = random_rotation(&mut r);
        let p = simulate_rotation_averaging(&gt, 2, 0.0, &mut r).unwrap();
        let q = lift_rotation_averaging(&p);
        let mut x = feasible_lift_rotation(&q, &p, &gt).unwrap();
        let col = q.layout.start(BlockKind::RotationColumn { state: 0, col: 0 });
        x[col] += 0.1;
        assert!(q.check_feasibility(&x).unwrap() >= 1e-3);

        let mut bad_hom = x.clone();
        bad_hom[0] = 0.5;
        assert!(matches!(
            q.check_feasibility(&bad_hom),
            Err(QcqpError::BadHomogenization(_))
        ));
    }

    #[test]
    fn marginalizing_twists_preserves_cost_minimum() {
        let mut r = rng(9);
        let ts: Vec<f64> = (0..4).map(|i| i as f64 * 0.9).collect();
        let twist = Vec6::from_row_slice(&[1.0, 0.0, 0.1, 0.02, 0.0, 0.3]);
        let gt = continuous_groundtruth(&ts, &twist);
        let p = simulate_continuous(
            &ts,
            &gt,
            &[0, 3],
            0.1,
            crate::liegroup::Mat6::identity(),
            crate::liegroup::Mat6::identity(),
            &mut r,
        )
        .unwrap();
        let q = lift_continuous(&p, &RedundantConfig::all());
        let (reduced, recovery) =
            marginalize_unconstrained(&q, |k| matches!(k, BlockKind::Twist { .. })).unwrap();
        assert_eq!(reduced.dim(), q.dim() - 4 * 6);

        // At a random feasible pose estimate: reduced cost at the retained
        // lift equals the full cost minimized over twists (via recovery).
        let est = TrajectoryEstimate::with_twists(
            (0..4).map(|_| random_pose(&mut r)).collect(),
            vec![Vec6::zeros(); 4],
        );
        let full = feasible_lift_continuous(&q, &p, &est).unwrap();
        let retained: Vec<f64> = (0..reduced.dim()).map(|i| full[i]).collect();
        let x_ret = DVector::from_vec(retained);
        assert!(reduced.check_feasibility(&x_ret).unwrap() <= 1e-9);
        let twists = recovery.recover_twists(&x_ret);
        let est_opt = TrajectoryEstimate::with_twists(
            est.poses.clone(),
            twists.iter().map(|(_, w)| *w).collect(),
        );
        let direct = cost_continuous(&p, &est_opt).unwrap();
        assert_relative_eq!(reduced.cost.quad_form(&x_ret), direct, max_relative = 1e-9);
    }
}
