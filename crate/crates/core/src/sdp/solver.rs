//! Primal-dual path-following interior-point solver with Nesterov-Todd
//! scaling and Mehrotra-style predictor-corrector steps.
//!
//! Dense linear algebra throughout: the lifted problems stay small
//! (n of a few hundred), so the per-iteration cost is dominated by a
//! handful of n^3 factorizations and the m x m Schur solve.

use super::{scale, Descaling, SdpProblem};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Relative duality-gap tolerance for optimality.
    pub gap_tol: f64,
    /// Primal/dual feasibility tolerance.
    pub feas_tol: f64,
    /// Apply cost/constraint scaling before solving.
    pub scaling: bool,
    /// Fraction-to-boundary step damping.
    pub step_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gap_tol: 1e-7,
            feas_tol: 1e-8,
            scaling: true,
            step_fraction: 0.98,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    NumericalFailure,
}

/// Per-iteration diagnostics, in the solver's (scaled) units.
#[derive(Debug, Clone, Copy)]
pub struct IterStats {
    pub mu: f64,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Upper bound on how far weak duality can be violated by the current
    /// infeasibility: `|y . r_p| + |tr(R_d X)|` bounds `d - p` from above.
    pub infeasibility_slack: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub s: DMatrix<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// `|b - A(X)| / (1 + |b|)` at the returned iterate (scaled problem).
    pub primal_residual: f64,
    /// `|C - S - A*(y)|_F / (1 + |C|_F)` at the returned iterate (scaled problem).
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub trace: Vec<IterStats>,
}

impl SdpSolution {
    pub fn relative_gap(&self) -> f64 {
        (self.primal_objective - self.dual_objective).abs()
            / (1.0 + self.primal_objective.abs() + self.dual_objective.abs())
    }
}

/// Solves the SDP.  Failure modes (iteration cap, ill-conditioned KKT
/// systems) are reported through `status`, never silently.
pub fn solve(p: &SdpProblem, opts: &SolverOptions) -> SdpSolution {
    let (scaled, descale) = if opts.scaling {
        match scale(p) {
            Ok(pair) => pair,
            Err(_) => (p.clone(), Descaling::identity(p.constraints.len())),
        }
    } else {
        (p.clone(), Descaling::identity(p.constraints.len()))
    };
    let mut sol = ipm(&scaled, opts);
    sol.primal_objective = descale.objective(sol.primal_objective);
    sol.dual_objective = descale.objective(sol.dual_objective);
    sol.y = descale.dual(&sol.y);
    sol.s *= descale.cost_scale;
    sol
}

struct Workspace {
    c: DMatrix<f64>,
    b: DVector<f64>,
    /// Full (mirrored) entry lists per constraint, for Schur assembly.
    full_entries: Vec<Vec<(usize, usize, f64)>>,
    /// Cholesky of the constraint Gram matrix `<A_i, A_j>`, used to project
    /// the roundoff left in `A(dX) - r_p` back out of each direction.
    gram: Option<Cholesky<f64, nalgebra::Dyn>>,
}

impl Workspace {
    fn new(p: &SdpProblem) -> Self {
        let m = p.constraints.len();
        let full_entries: Vec<Vec<(usize, usize, f64)>> = p
            .constraints
            .iter()
            .map(|(a, _)| {
                let mut v = Vec::with_capacity(a.entries().len() * 2);
                for &(i, j, val) in a.entries() {
                    v.push((i, j, val));
                    if i != j {
                        v.push((j, i, val));
                    }
                }
                v
            })
            .collect();
        let mut gram = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let g = p.constraints[i].0.inner(&p.constraints[j].0);
                gram[(i, j)] = g;
                gram[(j, i)] = g;
            }
        }
        Self {
            c: p.cost.to_dense(),
            b: DVector::from_iterator(m, p.constraints.iter().map(|(_, b)| *b)),
            full_entries,
            gram: Cholesky::new(gram),
        }
    }

    fn apply_constraints(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.full_entries.len());
        for (i, entries) in self.full_entries.iter().enumerate() {
            let mut tr = 0.0;
            for &(q, r, v) in entries {
                tr += v * x[(r, q)];
            }
            out[i] = tr;
        }
        out
    }

    /// Adds the least-norm combination of constraint matrices to `dx` so
    /// that `A(dx) = target` holds to machine precision, removing the
    /// roundoff from the scaled back-substitution.
    fn refine_feasibility(&self, dx: &mut DMatrix<f64>, target: &DVector<f64>) {
        let Some(gram) = &self.gram else { return };
        let err = target - self.apply_constraints(dx);
        let nu = gram.solve(&err);
        if !nu.iter().all(|v| v.is_finite()) {
            return;
        }
        for (i, entries) in self.full_entries.iter().enumerate() {
            let c = nu[i];
            if c != 0.0 {
                for &(p, q, v) in entries {
                    dx[(p, q)] += c * v;
                }
            }
        }
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Largest step `alpha` keeping `X + alpha D` positive semidefinite, via
/// the smallest eigenvalue of `L^-1 D L^-T`.
fn max_step(chol: &Cholesky<f64, nalgebra::Dyn>, d: &DMatrix<f64>) -> f64 {
    let l = chol.l();
    let z = l.solve_lower_triangular(d).expect("unit diagonal free solve");
    let y = l
        .solve_lower_triangular(&z.transpose())
        .expect("unit diagonal free solve");
    let eig = SymmetricEigen::new(sym(&y));
    let min = eig.eigenvalues.min();
    if min >= -1e-14 {
        f64::INFINITY
    } else {
        -1.0 / min
    }
}

/// Nesterov-Todd scaling point `W` with `W S W = X`, from `X = L L^T` and
/// the eigendecomposition of `L^T S L`.
fn nt_scaling(x_chol: &Cholesky<f64, nalgebra::Dyn>, s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let l = x_chol.l();
    let m = sym(&(l.transpose() * s * &l));
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.min() <= 0.0 {
        return None;
    }
    let inv_quarter =
        DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.powf(-0.25)));
    let g = l * eig.eigenvectors * inv_quarter;
    Some(sym(&(&g * g.transpose())))
}

struct Direction {
    dx: DMatrix<f64>,
    dy: DVector<f64>,
    ds: DMatrix<f64>,
}

/// Solves the Newton system for a given complementarity target `rc`
/// (the equation set `A(dX) = r_p`, `A*(dy) + dS = R_d`,
/// `dX + W dS W = rc`), reusing the factored Schur complement.
fn newton_direction(
    ws: &Workspace,
    schur: &Cholesky<f64, nalgebra::Dyn>,
    w: &DMatrix<f64>,
    r_p: &DVector<f64>,
    r_d: &DMatrix<f64>,
    rc: &DMatrix<f64>,
) -> Direction {
    let m = ws.full_entries.len();
    let wrdw = w * r_d * w;
    let mut rhs = DVector::zeros(m);
    for i in 0..m {
        let mut t_rc = 0.0;
        let mut t_wrdw = 0.0;
        for &(p, q, v) in &ws.full_entries[i] {
            t_rc += v * rc[(q, p)];
            t_wrdw += v * wrdw[(q, p)];
        }
        rhs[i] = r_p[i] - t_rc + t_wrdw;
    }
    let dy = schur.solve(&rhs);
    let mut ds = r_d.clone();
    for i in 0..m {
        let c = dy[i];
        if c != 0.0 {
            for &(p, q, v) in &ws.full_entries[i] {
                ds[(p, q)] -= c * v;
            }
        }
    }
    let ds = sym(&ds);
    let dx = sym(&(rc - w * &ds * w));
    Direction { dx, dy, ds }
}

fn assemble_schur(ws: &Workspace, w: &DMatrix<f64>) -> DMatrix<f64> {
    let m = ws.full_entries.len();
    let mut schur = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let mut acc = 0.0;
            for &(p, q, a) in &ws.full_entries[i] {
                let mut inner = 0.0;
                for &(r, s, bv) in &ws.full_entries[j] {
                    inner += bv * w[(q, r)] * w[(s, p)];
                }
                acc += a * inner;
            }
            schur[(i, j)] = acc;
            schur[(j, i)] = acc;
        }
    }
    schur
}

fn factor_with_ridge(mut schur: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let m = schur.nrows();
    let base = schur.trace().abs().max(1e-300) / m as f64;
    let mut ridge = 0.0;
    for attempt in 0..4 {
        if attempt > 0 {
            let bump = base * 1e-14 * 100f64.powi(attempt);
            for i in 0..m {
                schur[(i, i)] += bump - ridge;
            }
            ridge = bump;
        }
        if let Some(ch) = Cholesky::new(schur.clone()) {
            return Some(ch);
        }
    }
    None
}

fn ipm(p: &SdpProblem, opts: &SolverOptions) -> SdpSolution {
    let n = p.n;
    let m = p.constraints.len();
    let ws = Workspace::new(p);

    // Infeasible start: X = S = I (tau = 1 satisfies the scaled
    // homogenization row nearly), y = 0.
    let mut x = DMatrix::<f64>::identity(n, n);
    let mut s = DMatrix::<f64>::identity(n, n);
    let mut y = DVector::<f64>::zeros(m);
    let mut trace = Vec::new();

    let norm_b = ws.b.norm();
    let norm_c = ws.c.norm();
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = opts.max_iterations;
    let mut best_composite = f64::INFINITY;
    let mut since_improvement = 0usize;

    for it in 0..opts.max_iterations {
        let r_p = &ws.b - ws.apply_constraints(&x);
        let mut r_d = &ws.c - &s;
        for i in 0..m {
            let c = y[i];
            if c != 0.0 {
                for &(q, r, v) in &ws.full_entries[i] {
                    r_d[(q, r)] -= c * v;
                }
            }
        }
        let primal_objective = (&ws.c * &x).trace();
        let dual_objective = ws.b.dot(&y);
        let mu = (&x * &s).trace() / n as f64;
        let primal_residual = r_p.norm() / (1.0 + norm_b);
        let dual_residual = r_d.norm() / (1.0 + norm_c);
        let infeasibility_slack = y.dot(&r_p).abs() + (&r_d * &x).trace().abs();
        trace.push(IterStats {
            mu,
            primal_objective,
            dual_objective,
            primal_residual,
            dual_residual,
            infeasibility_slack,
        });

        let rel_gap = (primal_objective - dual_objective).abs()
            / (1.0 + primal_objective.abs() + dual_objective.abs());
        if rel_gap <= opts.gap_tol
            && mu / (1.0 + primal_objective.abs()) <= 10.0 * opts.gap_tol
            && primal_residual <= opts.feas_tol
            && dual_residual <= opts.feas_tol
        {
            status = SolveStatus::Optimal;
            iterations = it;
            break;
        }
        if !mu.is_finite() || !primal_residual.is_finite() || !dual_residual.is_finite() {
            status = SolveStatus::NumericalFailure;
            iterations = it;
            break;
        }
        // Stagnation exit: when the worst convergence ratio stops improving
        // the iterate has hit its double-precision floor for this problem.
        let composite = (rel_gap / opts.gap_tol)
            .max(primal_residual / opts.feas_tol)
            .max(dual_residual / opts.feas_tol);
        if composite < best_composite * 0.90 {
            best_composite = composite;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= 15 {
                status = SolveStatus::MaxIterations;
                iterations = it;
                break;
            }
        }

        let x_chol = match Cholesky::new(x.clone()) {
            Some(c) => c,
            None => {
                if std::env::var_os("CAYPOSE_IPM_DEBUG").is_some() { eprintln!("it {it}: X cholesky failed"); }
                status = SolveStatus::NumericalFailure;
                iterations = it;
                break;
            }
        };
        let s_chol = match Cholesky::new(s.clone()) {
            Some(c) => c,
            None => {
                if std::env::var_os("CAYPOSE_IPM_DEBUG").is_some() { eprintln!("it {it}: S cholesky failed"); }
                status = SolveStatus::NumericalFailure;
                iterations = it;
                break;
            }
        };
        let w = match nt_scaling(&x_chol, &s) {
            Some(w) => w,
            None => {
                if std::env::var_os("CAYPOSE_IPM_DEBUG").is_some() { eprintln!("it {it}: nt scaling failed"); }
                status = SolveStatus::NumericalFailure;
                iterations = it;
                break;
            }
        };
        let schur = match factor_with_ridge(assemble_schur(&ws, &w)) {
            Some(f) => f,
            None => {
                status = SolveStatus::NumericalFailure;
                iterations = it;
                break;
            }
        };
        let s_inv = s_chol.inverse();

        // Predictor: drive complementarity toward zero.
        let rc_aff = -&x;
        let aff = newton_direction(&ws, &schur, &w, &r_p, &r_d, &rc_aff);
        let ap_aff = (opts.step_fraction * max_step(&x_chol, &aff.dx)).min(1.0);
        let ad_aff = (opts.step_fraction * max_step(&s_chol, &aff.ds)).min(1.0);
        let mu_aff = ((&x + ap_aff * &aff.dx) * (&s + ad_aff * &aff.ds))
            .trace()
            .max(0.0)
            / n as f64;
        // Adaptive centering: aggressive when the affine step is long,
        // heavy centering when it is blocked near the cone boundary.
        let exponent = 1.0f64.max(3.0 * ap_aff.min(ad_aff).powi(2));
        let sigma = (mu_aff / mu).powf(exponent).clamp(1e-8, 1.0);
        // Floor on the complementarity target: pushing mu far below what
        // the gap tolerance requires only degrades the scaling-point
        // conditioning and with it the attainable feasibility.
        let mu_floor =
            (opts.gap_tol * (1.0 + primal_objective.abs()) / (3.0 * n as f64)).min(mu);
        let target = (sigma * mu).max(mu_floor);

        let rc = target * &s_inv - &x;
        let mut dir = newton_direction(&ws, &schur, &w, &r_p, &r_d, &rc);
        let mut ap = (opts.step_fraction * max_step(&x_chol, &dir.dx)).min(1.0);
        let mut ad = (opts.step_fraction * max_step(&s_chol, &dir.ds)).min(1.0);

        // If the corrected direction stalls, fall back to a plain
        // centering step; a stall with sane residuals is an iteration-limit
        // outcome, not a numerical failure.
        if ap.min(ad) < 1e-3 {
            let rc_center = 0.8 * mu * &s_inv - &x;
            dir = newton_direction(&ws, &schur, &w, &r_p, &r_d, &rc_center);
            ap = (opts.step_fraction * max_step(&x_chol, &dir.dx)).min(1.0);
            ad = (opts.step_fraction * max_step(&s_chol, &dir.ds)).min(1.0);
            if ap.min(ad) < 1e-6 {
                if std::env::var_os("CAYPOSE_IPM_DEBUG").is_some() {
                    eprintln!("it {it}: step lengths collapsed, stopping");
                }
                status = SolveStatus::MaxIterations;
                iterations = it;
                break;
            }
        }

        // Complementarity safeguard: damp both steps by a common factor so
        // mu never grows by more than 5% in one iteration (the trace of the
        // updated product is quadratic in the damping factor).
        let t0 = mu * n as f64;
        let t1 = ap * (&dir.dx * &s).trace();
        let t2 = ad * (&x * &dir.ds).trace();
        let t3 = ap * ad * (&dir.dx * &dir.ds).trace();
        let mu_after = |t: f64| (t0 + t * (t1 + t2) + t * t * t3) / n as f64;
        let mut damp = 1.0;
        while damp > 0.05 && mu_after(damp) > 1.05 * mu {
            damp *= 0.7;
        }

        if std::env::var_os("CAYPOSE_IPM_DEBUG").is_some() {
            eprintln!(
                "it {it:3}: sigma {sigma:9.2e} ap_aff {ap_aff:8.2e} ad_aff {ad_aff:8.2e} ap {ap:8.2e} ad {ad:8.2e} damp {damp:8.2e}"
            );
        }
        x = sym(&(&x + damp * ap * &dir.dx));
        y += damp * ad * &dir.dy;
        s = sym(&(&s + damp * ad * &dir.ds));
    }

    let primal_objective = (&ws.c * &x).trace();
    let dual_objective = ws.b.dot(&y);
    let r_p = &ws.b - ws.apply_constraints(&x);
    let mut r_d = &ws.c - &s;
    for i in 0..m {
        let c = y[i];
        if c != 0.0 {
            for &(q, r, v) in &ws.full_entries[i] {
                r_d[(q, r)] -= c * v;
            }
        }
    }
    SdpSolution {
        primal_residual: r_p.norm() / (1.0 + norm_b),
        dual_residual: r_d.norm() / (1.0 + norm_c),
        x,
        y,
        s,
        primal_objective,
        dual_objective,
        iterations,
        status,
        trace,
    }
}
