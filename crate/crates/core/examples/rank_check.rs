use caypose::harness::{generate_trial, lift_instance, ProblemKind};
use caypose::qcqp::{RedundantConfig, RedundantFamily};
use nalgebra::DMatrix;
use rand::SeedableRng;

fn svec_rows(mats: &[&caypose::qcqp::SymMat], n: usize) -> DMatrix<f64> {
    let dim = n * (n + 1) / 2;
    let idx = |i: usize, j: usize| i * n - i * (i + 1) / 2 + j; // i <= j
    let mut m = DMatrix::zeros(mats.len(), dim);
    for (r, a) in mats.iter().enumerate() {
        for &(i, j, v) in a.entries() {
            m[(r, idx(i, j))] = if i == j { v } else { v * std::f64::consts::SQRT_2 };
        }
    }
    m
}

fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    sv.iter().filter(|&&s| s > 1e-9 * max).count()
}

fn main() {
    let sigma: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
    let setup = generate_trial(ProblemKind::ContinuousTrajectory, 3, sigma, &mut rng).unwrap();
    let (inst, _) = lift_instance(&setup.problem, &RedundantConfig::all()).unwrap();
    let n = inst.dim();
    let base: Vec<&caypose::qcqp::SymMat> = std::iter::once(&inst.hom)
        .chain(inst.equalities.iter())
        .chain(inst.redundant.iter().filter(|(f, _)| *f != RedundantFamily::AbsColCross).map(|(_, b)| b))
        .collect();
    let with_cross: Vec<&caypose::qcqp::SymMat> = base
        .iter()
        .copied()
        .chain(inst.redundant.iter().filter(|(f, _)| *f == RedundantFamily::AbsColCross).map(|(_, b)| b))
        .collect();
    let cross_count = with_cross.len() - base.len();
    let r0 = rank(&svec_rows(&base, n));
    let r1 = rank(&svec_rows(&with_cross, n));
    println!("sigma {sigma}: base rows {} rank {r0}; + {cross_count} abs_col_cross rows -> rank {r1} (delta {})", base.len(), r1 - r0);
    // Also check each family for redundancy against everything else.
    for fam in RedundantFamily::ALL {
        let others: Vec<&caypose::qcqp::SymMat> = std::iter::once(&inst.hom)
            .chain(inst.equalities.iter())
            .chain(inst.redundant.iter().filter(|(f, _)| *f != fam).map(|(_, b)| b))
            .collect();
        let fam_rows: Vec<&caypose::qcqp::SymMat> =
            inst.redundant.iter().filter(|(f, _)| *f == fam).map(|(_, b)| b).collect();
        if fam_rows.is_empty() { continue; }
        let all: Vec<&caypose::qcqp::SymMat> = others.iter().copied().chain(fam_rows.iter().copied()).collect();
        let d = rank(&svec_rows(&all, n)) - rank(&svec_rows(&others, n));
        println!("family {:?}: {} rows add rank {}", fam, fam_rows.len(), d);
    }
}
