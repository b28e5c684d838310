//! Standard-form semidefinite programming:
//! `min tr(C X)  s.t.  tr(A_i X) = b_i,  X >= 0`,
//! with Shor relaxation of QCQP instances, numerical scaling, an embedded
//! primal-dual interior-point solver, and SDPA sparse file export.

mod sdpa;
mod solver;

pub use sdpa::{export_sdpa, import_sdpa, write_sdpa};
pub use solver::{solve, IterStats, SdpSolution, SolveStatus, SolverOptions};

use crate::qcqp::{QcqpInstance, SymMat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("cost matrix is identically zero; nothing to scale")]
    ZeroCostMatrix,
    #[error("constraint {0} is empty")]
    EmptyConstraint(usize),
    #[error("sdpa parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A standard-form SDP.  The first constraint is the homogenization row
/// (`b = 1`); every other right-hand side is zero for the problems built
/// here, but arbitrary `b` is supported.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub n: usize,
    pub cost: SymMat,
    pub constraints: Vec<(SymMat, f64)>,
    /// Human-readable labels of rows dropped by the rank filter.
    pub pruned: Vec<String>,
}

/// Numerical-rank tolerance for the dependent-row filter.
const RANK_TOL: f64 = 1e-10;

/// Shor relaxation: drop `rank(X) = 1`, keep the cost and every equality
/// and redundant constraint.  Rows that are linearly dependent on earlier
/// rows (to relative tolerance 1e-10 in the Frobenius inner product) are
/// pruned and logged; the intentional redundant constraints survive
/// because they are independent in the lifted space.
pub fn relax(q: &QcqpInstance) -> SdpProblem {
    let labeled: Vec<(String, SymMat, f64)> = std::iter::once(("hom".to_string(), q.hom.clone(), 1.0))
        .chain(
            q.equalities
                .iter()
                .enumerate()
                .map(|(i, a)| (format!("equality[{i}]"), a.clone(), 0.0)),
        )
        .chain(
            q.redundant
                .iter()
                .enumerate()
                .map(|(j, (f, b))| (format!("redundant[{j}] ({})", f.name()), b.clone(), 0.0)),
        )
        .collect();

    let mut kept: Vec<(SymMat, f64)> = Vec::with_capacity(labeled.len());
    let mut pruned = Vec::new();
    // Incremental Gram-Schmidt in the Frobenius inner product, tracked
    // through the Cholesky factor of the Gram matrix of the kept rows.
    // The residual of each candidate against the kept span is evaluated
    // through an explicit sparse accumulation rather than the cancellation-
    // prone norm subtraction, so exactly dependent rows are detected
    // reliably at the 1e-10 tolerance.
    let mut chol_rows: Vec<Vec<f64>> = Vec::new();
    for (label, a, b) in labeled {
        let norm2 = a.inner(&a);
        if norm2 == 0.0 {
            pruned.push(format!("{label}: zero matrix"));
            continue;
        }
        let g: Vec<f64> = kept.iter().map(|(k, _)| k.inner(&a)).collect();
        // Forward substitution L w = g, then back substitution for the
        // projection coefficients c = L^-T w (G c = g with G = L L^T).
        let m = g.len();
        let mut w = vec![0.0; m];
        for i in 0..m {
            let mut acc = g[i];
            for j in 0..i {
                acc -= chol_rows[i][j] * w[j];
            }
            w[i] = acc / chol_rows[i][i];
        }
        let mut coeff = vec![0.0; m];
        for i in (0..m).rev() {
            let mut acc = w[i];
            for j in i + 1..m {
                acc -= chol_rows[j][i] * coeff[j];
            }
            coeff[i] = acc / chol_rows[i][i];
        }
        // Explicit residual a - sum coeff_i kept_i.
        let mut resid: std::collections::HashMap<(usize, usize), f64> = a
            .entries()
            .iter()
            .map(|&(i, j, v)| ((i, j), v))
            .collect();
        for (c, (k, _)) in coeff.iter().zip(&kept) {
            if *c == 0.0 {
                continue;
            }
            for &(i, j, v) in k.entries() {
                *resid.entry((i, j)).or_insert(0.0) -= c * v;
            }
        }
        let res2: f64 = resid
            .iter()
            .map(|(&(i, j), &v)| if i == j { v * v } else { 2.0 * v * v })
            .sum();
        if res2 <= RANK_TOL * RANK_TOL * norm2 {
            pruned.push(label);
            continue;
        }
        let mut row = w;
        row.push(res2.sqrt());
        chol_rows.push(row);
        kept.push((a, b));
    }

    SdpProblem {
        n: q.dim(),
        cost: q.cost.clone(),
        constraints: kept,
        pruned,
    }
}

/// Undoes [`scale`]: maps scaled objective values and dual variables back
/// to the original problem.  The primal matrix is unchanged by scaling.
#[derive(Debug, Clone)]
pub struct Descaling {
    pub cost_scale: f64,
    pub constraint_scales: Vec<f64>,
}

impl Descaling {
    pub fn objective(&self, scaled: f64) -> f64 {
        scaled * self.cost_scale
    }

    pub fn dual(&self, scaled_y: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(
            scaled_y.len(),
            scaled_y
                .iter()
                .zip(&self.constraint_scales)
                .map(|(y, f)| y * self.cost_scale / f),
        )
    }

    pub fn identity(m: usize) -> Self {
        Self {
            cost_scale: 1.0,
            constraint_scales: vec![1.0; m],
        }
    }
}

/// Normalizes the cost to unit max-abs entry and each constraint to unit
/// Frobenius norm (right-hand sides rescaled to match).  The feasible set
/// in `X` is unchanged; the returned map restores objective values and
/// duals exactly.
pub fn scale(p: &SdpProblem) -> Result<(SdpProblem, Descaling), SdpError> {
    let cost_scale = p
        .cost
        .entries()
        .iter()
        .map(|&(_, _, v)| v.abs())
        .fold(0.0f64, f64::max);
    if cost_scale == 0.0 {
        return Err(SdpError::ZeroCostMatrix);
    }
    let mut constraints = Vec::with_capacity(p.constraints.len());
    let mut constraint_scales = Vec::with_capacity(p.constraints.len());
    for (i, (a, b)) in p.constraints.iter().enumerate() {
        let f = a.norm_fro();
        if f == 0.0 {
            return Err(SdpError::EmptyConstraint(i));
        }
        constraints.push((a.scale(1.0 / f), b / f));
        constraint_scales.push(f);
    }
    Ok((
        SdpProblem {
            n: p.n,
            cost: p.cost.scale(1.0 / cost_scale),
            constraints,
            pruned: p.pruned.clone(),
        },
        Descaling {
            cost_scale,
            constraint_scales,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{cay_so3, Vec3};
    use crate::problems::simulate_rotation_averaging;
    use crate::qcqp::lift_rotation_averaging;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn relax_keeps_rotation_averaging_rows() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let gt = cay_so3(&Vec3::new(0.2, 0.1, -0.3));
        let p = simulate_rotation_averaging(&gt, 1, 0.1, &mut rng).unwrap();
        let q = lift_rotation_averaging(&p);
        let sdp = relax(&q);
        // hom + 6 orthonormality + 9 measurement rows, all independent.
        assert_eq!(sdp.constraints.len(), 16);
        assert!(sdp.pruned.is_empty());
    }

    #[test]
    fn relax_prunes_injected_duplicates() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let gt = cay_so3(&Vec3::new(0.2, 0.1, -0.3));
        let p = simulate_rotation_averaging(&gt, 2, 0.1, &mut rng).unwrap();
        let mut q = lift_rotation_averaging(&p);
        // Duplicate an equality verbatim and once rescaled.
        q.equalities.push(q.equalities[3].clone());
        q.equalities.push(q.equalities[5].scale(2.5));
        let sdp = relax(&q);
        assert_eq!(sdp.pruned.len(), 2);
        assert_eq!(sdp.constraints.len(), 1 + 6 + 18);
    }

    #[test]
    fn relaxed_objective_matches_qcqp_cost_on_rank_one_points() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let gt = cay_so3(&Vec3::new(0.5, -0.1, 0.2));
        let p = simulate_rotation_averaging(&gt, 3, 0.2, &mut rng).unwrap();
        let q = lift_rotation_averaging(&p);
        let sdp = relax(&q);
        let est = cay_so3(&Vec3::new(-0.3, 0.4, 0.1));
        let x = crate::qcqp::feasible_lift_rotation(&q, &p, &est).unwrap();
        let big_x = &x * x.transpose();
        assert_relative_eq!(
            sdp.cost.trace_product(&big_x),
            q.cost_at(&x),
            max_relative = 1e-12
        );
        for (a, b) in &sdp.constraints {
            assert_relative_eq!(a.trace_product(&big_x), *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn scaling_normalizes_and_descales_exactly() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        let gt = cay_so3(&Vec3::new(0.5, -0.1, 0.2));
        let p = simulate_rotation_averaging(&gt, 2, 0.05, &mut rng).unwrap();
        let q = lift_rotation_averaging(&p);
        let sdp = relax(&q);
        let (scaled, map) = scale(&sdp).unwrap();
        let max_abs = scaled
            .cost
            .entries()
            .iter()
            .map(|&(_, _, v)| v.abs())
            .fold(0.0f64, f64::max);
        assert_relative_eq!(max_abs, 1.0, epsilon = 1e-14);
        for (a, _) in &scaled.constraints {
            assert_relative_eq!(a.norm_fro(), 1.0, epsilon = 1e-12);
        }
        // Already-normalized problems pass through unchanged.
        let (rescaled, map2) = scale(&scaled).unwrap();
        assert_relative_eq!(map2.cost_scale, 1.0, epsilon = 1e-14);
        for ((a, _), (b, _)) in scaled.constraints.iter().zip(&rescaled.constraints) {
            assert_eq!(a.entries().len(), b.entries().len());
        }
        // Objective descaling is exact.
        assert_relative_eq!(map.objective(2.0), 2.0 * map.cost_scale);
    }
}
