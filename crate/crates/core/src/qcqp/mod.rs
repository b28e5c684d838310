//! Homogenized QCQP assembly.
//!
//! Each estimation problem is lifted to
//! `min x^T Q x  s.t.  x^T A_0 x = 1,  x^T A_i x = 0,  x^T B_j x = 0`
//! where `x` stacks a homogenization scalar (index 0, value 1), rotation
//! columns, translations, Cayley residual variables, and (for the
//! continuous problem, before marginalization) twists.  The `B_j` are the
//! redundant constraints that tighten the semidefinite relaxation; they
//! hold on every feasible point of the original problem, so feasible lifts
//! satisfy them exactly.
//!
//! Linear terms are homogenized as symmetric rank-2 terms
//! `(e_0 l^T + l e_0^T)/2` and constants go to the `(0, 0)` entry.

mod builders;

pub use builders::{
    feasible_lift_continuous, feasible_lift_discrete, feasible_lift_pose,
    feasible_lift_rotation, lift_continuous, lift_discrete, lift_pose_averaging,
    lift_rotation_averaging,
};

use crate::liegroup::{Mat3, Vec3, Vec6};
use nalgebra::{DMatrix, DVector};
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QcqpError {
    #[error("lifted vector has length {got}, layout expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("homogenization entry must be 1, got {0}")]
    BadHomogenization(f64),
    #[error("blocks to marginalize appear in constraint {0}")]
    MarginalizedBlockConstrained(usize),
    #[error("the quadratic block of the marginalized variables is not positive definite")]
    MarginalBlockNotSpd,
    #[error("no blocks matched the marginalization request")]
    NothingToMarginalize,
    #[error(transparent)]
    Geometry(#[from] crate::liegroup::GeometryError),
    #[error(transparent)]
    Problem(#[from] crate::problems::ProblemError),
}

/// Sparse symmetric matrix stored as its upper triangle (i <= j).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymMat {
    /// Canonicalizes arbitrary (i, j, v) triplets: mirrors into the upper
    /// triangle, sorts, merges duplicates, and drops exact zeros.
    pub fn from_triplets(n: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets
            .into_iter()
            .map(|(i, j, v)| if i <= j { (i, j, v) } else { (j, i, v) })
            .collect();
        entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (i, j, v) in entries {
            debug_assert!(j < n);
            match merged.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => merged.push((i, j, v)),
            }
        }
        merged.retain(|&(_, _, v)| v != 0.0);
        Self { n, entries: merged }
    }

    pub fn unit(n: usize, i: usize, j: usize) -> Self {
        Self::from_triplets(n, [(i, j, 1.0)])
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for &(i, j, v) in &self.entries {
            if i == j {
                acc += v * x[i] * x[i];
            } else {
                acc += 2.0 * v * x[i] * x[j];
            }
        }
        acc
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.entries {
            m[(i, j)] = v;
            if i != j {
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>, drop_below: f64) -> Self {
        let n = m.nrows();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in i..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                if v.abs() > drop_below {
                    entries.push((i, j, v));
                }
            }
        }
        Self { n, entries }
    }

    /// Frobenius inner product with another symmetric matrix.
    pub fn inner(&self, other: &SymMat) -> f64 {
        let mut acc = 0.0;
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        while let (Some(&&(i1, j1, v1)), Some(&&(i2, j2, v2))) = (a.peek(), b.peek()) {
            match (i1, j1).cmp(&(i2, j2)) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    acc += if i1 == j1 { v1 * v2 } else { 2.0 * v1 * v2 };
                    a.next();
                    b.next();
                }
            }
        }
        acc
    }

    /// `tr(A D)` against a dense matrix.
    pub fn trace_product(&self, d: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for &(i, j, v) in &self.entries {
            acc += if i == j {
                v * d[(i, i)]
            } else {
                v * (d[(i, j)] + d[(j, i)])
            };
        }
        acc
    }

    pub fn norm_fro(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            n: self.n,
            entries: self.entries.iter().map(|&(i, j, v)| (i, j, v * s)).collect(),
        }
    }

    /// Accumulates `s * A` into a dense matrix (both triangles).
    pub fn add_to_dense(&self, d: &mut DMatrix<f64>, s: f64) {
        for &(i, j, v) in &self.entries {
            d[(i, j)] += s * v;
            if i != j {
                d[(j, i)] += s * v;
            }
        }
    }

    /// Hash of the scale- and sign-normalized triplet pattern, used to drop
    /// exact duplicates across constraint families.
    fn canonical_key(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let norm = self.norm_fro();
        if norm == 0.0 {
            return 0;
        }
        let sign = self.entries.first().map(|e| e.2.signum()).unwrap_or(1.0);
        for &(i, j, v) in &self.entries {
            i.hash(&mut h);
            j.hash(&mut h);
            (sign * v / norm).to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Accumulates coefficients of monomials `x_p x_q`; index 0 is the
/// homogenization variable, so linear terms are `quad(0, p, c)` and
/// constants are `quad(0, 0, c)`.
#[derive(Debug, Default, Clone)]
pub struct QuadExpr {
    terms: Vec<(usize, usize, f64)>,
}

impl QuadExpr {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `c * x_p * x_q`.
    pub fn quad(&mut self, p: usize, q: usize, c: f64) {
        if c != 0.0 {
            self.terms.push((p, q, c));
        }
    }

    /// Adds `c * x_p` (homogenized through index 0).
    pub fn lin(&mut self, p: usize, c: f64) {
        self.quad(0, p, c);
    }

    /// Adds a constant (homogenized to the (0, 0) entry).
    pub fn constant(&mut self, c: f64) {
        self.quad(0, 0, c);
    }

    /// Converts monomial coefficients into the symmetric matrix with the
    /// same quadratic form: `A_pq = c/2` off the diagonal, `A_pp = c`.
    pub fn into_symmat(self, n: usize) -> SymMat {
        SymMat::from_triplets(
            n,
            self.terms
                .into_iter()
                .map(|(p, q, c)| if p == q { (p, q, c) } else { (p, q, 0.5 * c) }),
        )
    }
}

/// A linear form in the lifted variables, used to assemble weighted
/// quadratic cost terms `row^T W row`.
#[derive(Debug, Clone, Default)]
pub struct LinForm {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl LinForm {
    pub fn var(index: usize) -> Self {
        Self {
            constant: 0.0,
            terms: vec![(index, 1.0)],
        }
    }

    pub fn scaled_var(index: usize, c: f64) -> Self {
        Self {
            constant: 0.0,
            terms: vec![(index, c)],
        }
    }
}

/// Adds `rows^T W rows` to the expression, for symmetric `W` given by a
/// lookup closure.
pub fn add_weighted_quadratic(
    expr: &mut QuadExpr,
    rows: &[LinForm],
    w: impl Fn(usize, usize) -> f64,
) {
    for (r, row_r) in rows.iter().enumerate() {
        for (s, row_s) in rows.iter().enumerate() {
            let c = w(r, s);
            if c == 0.0 {
                continue;
            }
            for &(p, a) in &row_r.terms {
                for &(q, b) in &row_s.terms {
                    expr.quad(p, q, c * a * b);
                }
            }
            if row_s.constant != 0.0 {
                for &(p, a) in &row_r.terms {
                    expr.lin(p, c * a * row_s.constant);
                }
            }
            if row_r.constant != 0.0 {
                for &(q, b) in &row_s.terms {
                    expr.lin(q, c * row_r.constant * b);
                }
            }
            if row_r.constant != 0.0 && row_s.constant != 0.0 {
                expr.constant(c * row_r.constant * row_s.constant);
            }
        }
    }
}

/// Tags a residual variable block with the factor it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResidualTag {
    /// Residual of measurement `m` in an averaging problem.
    Measurement(usize),
    /// Residual of the absolute measurement at state `k`.
    Absolute(usize),
    /// Residual of the link from state `k` to `k + 1`.
    Relative(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Homogenization,
    RotationColumn { state: usize, col: usize },
    Translation { state: usize },
    ResidualRho(ResidualTag),
    ResidualPhi(ResidualTag),
    Twist { state: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub kind: BlockKind,
    pub start: usize,
    pub len: usize,
}

/// Ordered, disjoint, exhaustive map from named blocks to index ranges in
/// the lifted vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableLayout {
    blocks: Vec<Block>,
    n: usize,
}

impl VariableLayout {
    fn build(kinds: impl IntoIterator<Item = (BlockKind, usize)>) -> Self {
        let mut blocks = Vec::new();
        let mut start = 0;
        for (kind, len) in kinds {
            blocks.push(Block { kind, start, len });
            start += len;
        }
        debug_assert!(matches!(
            blocks.first(),
            Some(Block {
                kind: BlockKind::Homogenization,
                start: 0,
                len: 1
            })
        ));
        Self { blocks, n: start }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn find(&self, kind: BlockKind) -> Option<Block> {
        self.blocks.iter().copied().find(|b| b.kind == kind)
    }

    pub fn start(&self, kind: BlockKind) -> usize {
        self.find(kind)
            .unwrap_or_else(|| panic!("layout has no block {kind:?}"))
            .start
    }

    /// Start of the 6-vector residual `(rho, phi)` for `tag`; the two blocks
    /// are laid out contiguously.
    pub fn residual(&self, tag: ResidualTag) -> usize {
        let rho = self.start(BlockKind::ResidualRho(tag));
        debug_assert_eq!(self.start(BlockKind::ResidualPhi(tag)), rho + 3);
        rho
    }

    pub fn states(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| match b.kind {
                BlockKind::Translation { state } => Some(state + 1),
                _ => None,
            })
            .max()
            .unwrap_or(1)
    }
}

/// Which redundant-constraint family a `B_j` belongs to; used by the
/// ablation toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedundantFamily {
    /// `(c_i + c_meas_i)^T rho / 2 = c_i^T r - c_meas_i^T r_meas`
    AbsTransRho,
    /// `r^T r = r^T r_meas - r^T r_meas^ phi / 2 + r^T rho` (keeps the
    /// search space compact)
    AbsCompactness,
    /// `phi^T c_i = phi^T c_meas_i`
    AbsPhiCol,
    /// `phi^T r = phi^T r_meas + phi^T rho`
    AbsPhiTrans,
    /// `c_m^T c_l - phi^T c_n / 2 = c_m^T c_meas_l - c_m^T c_meas_l^ phi / 2`
    AbsColCross,
    /// Relative-link analogue of `AbsTransRho`
    RelTransRho,
    /// Relative-link analogue of `AbsCompactness`
    RelCompactness,
    /// `phi^T c_{k+1,i} = phi^T c_{k,i}`
    RelPhiCol,
    /// `phi^T r_{k+1} = phi^T r_k + phi^T rho`
    RelPhiTrans,
}

impl RedundantFamily {
    pub const ALL: [RedundantFamily; 9] = [
        RedundantFamily::AbsTransRho,
        RedundantFamily::AbsCompactness,
        RedundantFamily::AbsPhiCol,
        RedundantFamily::AbsPhiTrans,
        RedundantFamily::AbsColCross,
        RedundantFamily::RelTransRho,
        RedundantFamily::RelCompactness,
        RedundantFamily::RelPhiCol,
        RedundantFamily::RelPhiTrans,
    ];

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "abs_trans_rho" => Self::AbsTransRho,
            "abs_compactness" => Self::AbsCompactness,
            "abs_phi_col" => Self::AbsPhiCol,
            "abs_phi_trans" => Self::AbsPhiTrans,
            "abs_col_cross" => Self::AbsColCross,
            "rel_trans_rho" => Self::RelTransRho,
            "rel_compactness" => Self::RelCompactness,
            "rel_phi_col" => Self::RelPhiCol,
            "rel_phi_trans" => Self::RelPhiTrans,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::AbsTransRho => "abs_trans_rho",
            Self::AbsCompactness => "abs_compactness",
            Self::AbsPhiCol => "abs_phi_col",
            Self::AbsPhiTrans => "abs_phi_trans",
            Self::AbsColCross => "abs_col_cross",
            Self::RelTransRho => "rel_trans_rho",
            Self::RelCompactness => "rel_compactness",
            Self::RelPhiCol => "rel_phi_col",
            Self::RelPhiTrans => "rel_phi_trans",
        }
    }
}

/// Enabled redundant families.  The compactness family stays on unless
/// everything is explicitly disabled, since it keeps the SDP search space
/// compact and the problem well posed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RedundantConfig {
    enabled: HashSet<RedundantFamily>,
}

impl Default for RedundantConfig {
    fn default() -> Self {
        Self::all()
    }
}

impl RedundantConfig {
    pub fn all() -> Self {
        Self {
            enabled: RedundantFamily::ALL.into_iter().collect(),
        }
    }

    /// No redundant constraints at all (for ablation baselines).
    pub fn none() -> Self {
        Self {
            enabled: HashSet::new(),
        }
    }

    /// Only the compactness families.
    pub fn compactness_only() -> Self {
        Self {
            enabled: [
                RedundantFamily::AbsCompactness,
                RedundantFamily::RelCompactness,
            ]
            .into_iter()
            .collect(),
        }
    }

    /// A custom family list; compactness is re-added unless the list is
    /// empty, matching the default non-removable policy.
    pub fn from_families(families: impl IntoIterator<Item = RedundantFamily>) -> Self {
        let mut enabled: HashSet<_> = families.into_iter().collect();
        if !enabled.is_empty() {
            enabled.insert(RedundantFamily::AbsCompactness);
            enabled.insert(RedundantFamily::RelCompactness);
        }
        Self { enabled }
    }

    pub fn is_enabled(&self, family: RedundantFamily) -> bool {
        self.enabled.contains(&family)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v: Vec<_> = self.enabled.iter().map(|f| f.name()).collect();
        v.sort();
        v
    }
}

/// The assembled homogenized QCQP.
#[derive(Debug, Clone)]
pub struct QcqpInstance {
    pub layout: VariableLayout,
    /// Symmetric cost matrix `Q`.
    pub cost: SymMat,
    /// Homogenization constraint `A_0` (selects the (0,0) entry, rhs 1).
    pub hom: SymMat,
    /// Equality constraints `A_i` with rhs 0.
    pub equalities: Vec<SymMat>,
    /// Redundant constraints `B_j` with rhs 0, tagged by family.
    pub redundant: Vec<(RedundantFamily, SymMat)>,
}

impl QcqpInstance {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Drops constraints whose canonicalized triplet pattern already
    /// appeared, either among the equalities or an earlier redundant row.
    pub(crate) fn dedup(&mut self) {
        let mut seen: HashSet<u64> = HashSet::new();
        seen.insert(self.hom.canonical_key());
        self.equalities.retain(|a| seen.insert(a.canonical_key()));
        self.redundant.retain(|(_, b)| seen.insert(b.canonical_key()));
    }

    /// Max constraint violation of a lifted point: the homogenization
    /// defect and every `|x^T A_i x|`, `|x^T B_j x|`.
    pub fn check_feasibility(&self, x: &DVector<f64>) -> Result<f64, QcqpError> {
        if x.len() != self.dim() {
            return Err(QcqpError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if (x[0] - 1.0).abs() > 1e-12 {
            return Err(QcqpError::BadHomogenization(x[0]));
        }
        let mut worst = (self.hom.quad_form(x) - 1.0).abs();
        for a in &self.equalities {
            worst = worst.max(a.quad_form(x).abs());
        }
        for (_, b) in &self.redundant {
            worst = worst.max(b.quad_form(x).abs());
        }
        Ok(worst)
    }

    pub fn cost_at(&self, x: &DVector<f64>) -> f64 {
        self.cost.quad_form(x)
    }
}

/// Maps a reduced solution back to the marginalized variables:
/// `w* = -Q_ww^-1 Q_wx x_retained`.
#[derive(Debug, Clone)]
pub struct MarginalRecovery {
    /// Blocks that were removed, in original order.
    pub removed: Vec<Block>,
    gain: DMatrix<f64>,
}

impl MarginalRecovery {
    /// Optimal marginalized variables given the retained lifted vector.
    pub fn recover(&self, x_retained: &DVector<f64>) -> DVector<f64> {
        &self.gain * x_retained
    }

    /// Recovered twist blocks keyed by state index, for trajectory
    /// estimates.
    pub fn recover_twists(&self, x_retained: &DVector<f64>) -> Vec<(usize, Vec6)> {
        let w = self.recover(x_retained);
        let mut out = Vec::new();
        let mut offset = 0;
        for b in &self.removed {
            if let BlockKind::Twist { state } = b.kind {
                out.push((state, Vec6::from_iterator((0..6).map(|i| w[offset + i]))));
            }
            offset += b.len;
        }
        out
    }
}

/// Schur-complement marginalization of blocks that appear in the cost but
/// in no constraint: `Q_red = Q_xx - Q_xw Q_ww^-1 Q_wx`, with a recovery
/// map for the removed variables.  The optimal value is preserved.
pub fn marginalize_unconstrained(
    q: &QcqpInstance,
    select: impl Fn(&BlockKind) -> bool,
) -> Result<(QcqpInstance, MarginalRecovery), QcqpError> {
    let removed: Vec<Block> = q.layout.blocks().iter().copied().filter(|b| select(&b.kind)).collect();
    if removed.is_empty() {
        return Err(QcqpError::NothingToMarginalize);
    }
    let n = q.dim();
    let mut is_removed = vec![false; n];
    for b in &removed {
        for i in b.start..b.start + b.len {
            is_removed[i] = true;
        }
    }
    for (ci, a) in std::iter::once(&q.hom)
        .chain(q.equalities.iter())
        .chain(q.redundant.iter().map(|(_, b)| b))
        .enumerate()
    {
        if a.entries().iter().any(|&(i, j, _)| is_removed[i] || is_removed[j]) {
            return Err(QcqpError::MarginalizedBlockConstrained(ci));
        }
    }

    let retained_idx: Vec<usize> = (0..n).filter(|&i| !is_removed[i]).collect();
    let removed_idx: Vec<usize> = (0..n).filter(|&i| is_removed[i]).collect();
    let dense = q.cost.to_dense();
    let q_xx = dense.select_rows(&retained_idx).select_columns(&retained_idx);
    let q_ww = dense.select_rows(&removed_idx).select_columns(&removed_idx);
    let q_wx = dense.select_rows(&removed_idx).select_columns(&retained_idx);
    let chol = nalgebra::Cholesky::new(q_ww).ok_or(QcqpError::MarginalBlockNotSpd)?;
    let gain = -chol.solve(&q_wx);
    // Q_red = Q_xx - Q_xw Q_ww^-1 Q_wx = Q_xx + Q_xw * gain.
    let reduced = &q_xx + q_wx.transpose() * &gain;

    let kinds: Vec<(BlockKind, usize)> = q
        .layout
        .blocks()
        .iter()
        .filter(|b| !select(&b.kind))
        .map(|b| (b.kind, b.len))
        .collect();
    let layout = VariableLayout::build(kinds);
    let remap: Vec<usize> = {
        let mut map = vec![usize::MAX; n];
        for (new, &old) in retained_idx.iter().enumerate() {
            map[old] = new;
        }
        map
    };
    let reduced_dim = layout.dim();
    let remap_mat = |m: &SymMat| {
        SymMat::from_triplets(
            reduced_dim,
            m.entries().iter().map(|&(i, j, v)| (remap[i], remap[j], v)),
        )
    };

    let instance = QcqpInstance {
        cost: SymMat::from_dense(&reduced, 0.0),
        hom: remap_mat(&q.hom),
        equalities: q.equalities.iter().map(&remap_mat).collect(),
        redundant: q
            .redundant
            .iter()
            .map(|(f, b)| (*f, remap_mat(b)))
            .collect(),
        layout,
    };
    Ok((
        instance,
        MarginalRecovery {
            removed,
            gain,
        },
    ))
}

// --- shared emission helpers used by the builders ------------------------

/// A 3-vector expression affine in the lifted variables: a sum of 3x3
/// matrices applied to 3-variable blocks, plus a constant.
#[derive(Debug, Clone, Default)]
pub(crate) struct Affine3 {
    terms: Vec<(usize, Mat3)>,
    constant: Vec3,
}

impl Affine3 {
    pub fn var(start: usize) -> Self {
        Self {
            terms: vec![(start, Mat3::identity())],
            constant: Vec3::zeros(),
        }
    }

    pub fn rotated_var(m: Mat3, start: usize) -> Self {
        Self {
            terms: vec![(start, m)],
            constant: Vec3::zeros(),
        }
    }

    pub fn constant(c: Vec3) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn affine(m: Mat3, start: usize, c: Vec3) -> Self {
        Self {
            terms: vec![(start, m)],
            constant: c,
        }
    }

    /// Adds `scale * V_row` to the expression.
    fn add_row(&self, expr: &mut QuadExpr, row: usize, scale: f64) {
        for &(start, ref m) in &self.terms {
            for u in 0..3 {
                expr.lin(start + u, scale * m[(row, u)]);
            }
        }
        expr.constant(scale * self.constant[row]);
    }

    /// Adds `scale * (phi x V)_row`, a bilinear term in phi and V.
    fn add_cross_row(&self, expr: &mut QuadExpr, phi: usize, row: usize, scale: f64) {
        let r1 = (row + 1) % 3;
        let r2 = (row + 2) % 3;
        for &(start, ref m) in &self.terms {
            for u in 0..3 {
                expr.quad(phi + r1, start + u, scale * m[(r2, u)]);
                expr.quad(phi + r2, start + u, -scale * m[(r1, u)]);
            }
        }
        expr.lin(phi + r1, scale * self.constant[r2]);
        expr.lin(phi + r2, -scale * self.constant[r1]);
    }
}

/// Emits the three rows of the Cayley link constraint
/// `(I - phi^/2) lhs = (I + phi^/2) rhs + rho`, the quadratic form every
/// measurement and relative-pose constraint takes after clearing the
/// Cayley denominator.
pub(crate) fn emit_link(
    out: &mut Vec<QuadExpr>,
    phi: usize,
    lhs: &Affine3,
    rhs: &Affine3,
    rho: Option<usize>,
) {
    for row in 0..3 {
        let mut expr = QuadExpr::new();
        lhs.add_row(&mut expr, row, 1.0);
        lhs.add_cross_row(&mut expr, phi, row, -0.5);
        rhs.add_row(&mut expr, row, -1.0);
        rhs.add_cross_row(&mut expr, phi, row, -0.5);
        if let Some(rho) = rho {
            expr.lin(rho + row, -1.0);
        }
        out.push(expr);
    }
}

/// Orthonormality constraints `c_i^T c_j = delta_ij` for `i <= j`.
pub(crate) fn emit_orthonormality(out: &mut Vec<QuadExpr>, cols: [usize; 3]) {
    for i in 0..3 {
        for j in i..3 {
            let mut expr = QuadExpr::new();
            for a in 0..3 {
                expr.quad(cols[i] + a, cols[j] + a, 1.0);
            }
            if i == j {
                expr.constant(-1.0);
            }
            out.push(expr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmat_quad_form_and_inner() {
        let a = SymMat::from_triplets(3, [(0, 1, 2.0), (1, 0, 1.0), (2, 2, 4.0), (0, 0, 1.0)]);
        // (0,1) and mirrored (1,0) merge to 3.0.
        assert_eq!(a.nnz(), 3);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        // x^T A x with A01 = 3: 1 + 2*3*1*2 + 4*9 = 49.
        assert_relative_eq!(a.quad_form(&x), 49.0);
        let d = a.to_dense();
        assert_relative_eq!((x.transpose() * &d * &x)[0], 49.0);
        assert_relative_eq!(a.inner(&a), d.iter().map(|v| v * v).sum::<f64>());
        assert_relative_eq!(a.trace_product(&d), a.inner(&a));
    }

    #[test]
    fn quad_expr_homogenization() {
        // 2 x1 x2 + 3 x1 + 5 with x = (1, a, b) gives 2ab + 3a + 5.
        let mut e = QuadExpr::new();
        e.quad(1, 2, 2.0);
        e.lin(1, 3.0);
        e.constant(5.0);
        let m = e.into_symmat(3);
        let x = DVector::from_vec(vec![1.0, 2.0, -1.5]);
        assert_relative_eq!(m.quad_form(&x), 2.0 * 2.0 * (-1.5) + 3.0 * 2.0 + 5.0);
    }

    #[test]
    fn weighted_quadratic_matches_direct_evaluation() {
        // rows = (x1 + 2, 3 x2 - x1), W = [[2, 1], [1, 4]].
        let rows = vec![
            LinForm {
                constant: 2.0,
                terms: vec![(1, 1.0)],
            },
            LinForm {
                constant: 0.0,
                terms: vec![(2, 3.0), (1, -1.0)],
            },
        ];
        let w = [[2.0, 1.0], [1.0, 4.0]];
        let mut e = QuadExpr::new();
        add_weighted_quadratic(&mut e, &rows, |i, j| w[i][j]);
        let m = e.into_symmat(3);
        let x = DVector::from_vec(vec![1.0, 0.7, -0.3]);
        let r0 = x[1] + 2.0;
        let r1 = 3.0 * x[2] - x[1];
        let direct = 2.0 * r0 * r0 + 2.0 * r0 * r1 + 4.0 * r1 * r1;
        assert_relative_eq!(m.quad_form(&x), direct, epsilon = 1e-14);
    }

    #[test]
    fn marginalize_scalar_example() {
        // Q = [[2, 1], [1, 2]] on (x, w), no constraints on w: reduced
        // cost is 2 - 1 * (1/2) * 1 = 3/2 on x alone.
        let layout = VariableLayout::build([
            (BlockKind::Homogenization, 1),
            (BlockKind::Twist { state: 0 }, 1),
        ]);
        let q = QcqpInstance {
            layout,
            cost: SymMat::from_triplets(2, [(0, 0, 2.0), (0, 1, 1.0), (1, 1, 2.0)]),
            hom: SymMat::unit(2, 0, 0),
            equalities: vec![],
            redundant: vec![],
        };
        let (red, rec) = marginalize_unconstrained(&q, |k| matches!(k, BlockKind::Twist { .. }))
            .unwrap();
        assert_eq!(red.dim(), 1);
        assert_relative_eq!(red.cost.to_dense()[(0, 0)], 1.5, epsilon = 1e-14);
        let w = rec.recover(&DVector::from_vec(vec![1.0]));
        assert_relative_eq!(w[0], -0.5, epsilon = 1e-14);
    }

    #[test]
    fn marginalize_rejects_constrained_blocks() {
        let layout = VariableLayout::build([
            (BlockKind::Homogenization, 1),
            (BlockKind::Twist { state: 0 }, 1),
        ]);
        let q = QcqpInstance {
            layout,
            cost: SymMat::from_triplets(2, [(0, 0, 2.0), (1, 1, 2.0)]),
            hom: SymMat::unit(2, 0, 0),
            equalities: vec![SymMat::unit(2, 1, 1)],
            redundant: vec![],
        };
        assert!(matches!(
            marginalize_unconstrained(&q, |k| matches!(k, BlockKind::Twist { .. })),
            Err(QcqpError::MarginalizedBlockConstrained(_))
        ));
    }

    #[test]
    fn marginalize_preserves_minimum_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20 {
            let nx = 4;
            let nw = 3;
            let n = nx + nw;
            let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let spd = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
            // Keep the leading block structure: hom + 3 retained + 3 twists.
            let layout = VariableLayout::build([
                (BlockKind::Homogenization, 1),
                (BlockKind::Translation { state: 0 }, 3),
                (BlockKind::Twist { state: 0 }, 3),
            ]);
            let q = QcqpInstance {
                layout,
                cost: SymMat::from_dense(&spd, 0.0),
                hom: SymMat::unit(n, 0, 0),
                equalities: vec![],
                redundant: vec![],
            };
            let (red, rec) =
                marginalize_unconstrained(&q, |k| matches!(k, BlockKind::Twist { .. })).unwrap();
            // For random retained x, min over w of the full quadratic must
            // equal the reduced quadratic at x.
            for _ in 0..5 {
                let mut x_ret = DVector::from_fn(nx, |_, _| rng.gen_range(-1.0..1.0));
                x_ret[0] = 1.0;
                let w = rec.recover(&x_ret);
                let mut full = DVector::zeros(n);
                full.rows_mut(0, nx).copy_from(&x_ret);
                full.rows_mut(nx, nw).copy_from(&w);
                let value_full = (full.transpose() * &spd * &full)[0];
                let value_red = red.cost.quad_form(&x_ret);
                assert_relative_eq!(value_full, value_red, epsilon = 1e-12, max_relative = 1e-12);
                // Dense-minimization oracle: perturbing w only increases it.
                for _ in 0..3 {
                    let dw = DVector::from_fn(nw, |_, _| rng.gen_range(-0.1..0.1));
                    let mut pert = full.clone();
                    pert.rows_mut(nx, nw).copy_from(&(w.clone() + dw));
                    assert!((pert.transpose() * &spd * &pert)[0] >= value_full - 1e-12);
                }
            }
        }
    }
}
