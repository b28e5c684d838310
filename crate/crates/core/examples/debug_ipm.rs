use caypose::harness::{generate_trial, lift_instance, ProblemKind};
use caypose::qcqp::RedundantConfig;
use caypose::sdp::{relax, solve, SolverOptions};
use rand::SeedableRng;

fn main() {
    let kind = std::env::args().nth(1).unwrap_or_else(|| "discrete".into());
    let k: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let sigma: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let kind = ProblemKind::parse(&kind).unwrap();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
    let setup = generate_trial(kind, k, sigma, &mut rng).unwrap();
    let (inst, _rec) = lift_instance(&setup.problem, &RedundantConfig::all()).unwrap();
    let sdp = relax(&inst);
    println!("n = {}, m = {} (pruned {})", sdp.n, sdp.constraints.len(), sdp.pruned.len());
    for p in &sdp.pruned { println!("pruned: {p}"); }
    let sol = solve(&sdp, &SolverOptions::default());
    println!("status {:?} after {} iters", sol.status, sol.iterations);
    for (i, t) in sol.trace.iter().enumerate() {
        println!(
            "it {i:3}: mu {:9.2e}  p {:12.5e}  d {:12.5e}  rp {:9.2e}  rd {:9.2e}",
            t.mu, t.primal_objective, t.dual_objective, t.primal_residual, t.dual_residual
        );
    }
}
