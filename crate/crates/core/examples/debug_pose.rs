use caypose::harness::{generate_trial, lift_instance, ProblemKind};
use caypose::qcqp::RedundantConfig;
use caypose::sdp::{relax, solve, SolverOptions};
use rand::SeedableRng;
use rand_chacha::rand_core::SeedableRng as _;

fn main() {
    let stream: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let sigma: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
    rng.set_stream(stream);
    let setup = generate_trial(ProblemKind::PoseAveraging, 10, sigma, &mut rng).unwrap();
    let (inst, _) = lift_instance(&setup.problem, &RedundantConfig::all()).unwrap();
    let sdp = relax(&inst);
    println!("n = {}, m = {}", sdp.n, sdp.constraints.len());
    let sol = solve(&sdp, &SolverOptions::default());
    println!("status {:?} after {} iters, gap {:.2e}, rp {:.2e} rd {:.2e}", sol.status, sol.iterations, sol.relative_gap(), sol.primal_residual, sol.dual_residual);
    for (i, t) in sol.trace.iter().enumerate() {
        if i > sol.trace.len().saturating_sub(8) || i < 4 {
            println!("it {i:3}: mu {:9.2e}  p {:12.5e}  d {:12.5e}  rp {:9.2e}  rd {:9.2e}", t.mu, t.primal_objective, t.dual_objective, t.primal_residual, t.dual_residual);
        }
    }
}
