use caypose::harness::*;
use caypose::qcqp::RedundantConfig;
use caypose::sdp::SolverOptions;
use caypose::localsolve::GnOptions;
use rand_chacha::rand_core::SeedableRng;

fn main() {
    let kind_s = std::env::args().nth(1).unwrap_or_else(|| "rotation".into());
    let size: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let sigma: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let max_stream: u64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(40);
    let kind = ProblemKind::parse(&kind_s).unwrap();
    let gn = match kind {
        ProblemKind::RotationAveraging | ProblemKind::PoseAveraging => GnOptions::averaging(),
        _ => GnOptions::trajectory(),
    };
    for stream in 0..max_stream {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(777);
        rng.set_stream(stream);
        let setup = match generate_trial(kind, size, sigma, &mut rng) { Ok(s) => s, Err(_) => continue };
        let mut record = serde_json::from_value::<TrialRecord>(serde_json::json!({
            "trial": 0, "sigma": sigma, "seed": 777u64, "stream": stream,
            "sdp_status": null, "log_svr": null, "rank1": false, "sdp_value": null,
            "extracted_cost": null, "certificate_gap": null, "det_ok": null,
            "local_random_cost": null, "local_random_converged": false,
            "local_groundtruth_cost": null, "local_found_global": false,
            "polish_gain": null, "sdp_ms": 0.0, "local_ms": 0.0, "error": null
        })).unwrap();
        let cert = run_pipeline(&setup, &RedundantConfig::all(), &SolverOptions::default(), &gn, 5.0, &mut rng, &mut record);
        if let (Some(cert), Some(local), true) = (cert, record.local_random_cost, record.local_random_converged) {
            if cert.rank1 && local > 1.1 * cert.sdp_value + 1e-6 {
                println!("WITNESS {kind_s} size {size} sigma {sigma} seed 777 stream {stream}: local {local:.6} vs sdp {:.6} (ratio {:.2})", cert.sdp_value, local / cert.sdp_value.max(1e-300));
            }
        }
    }
}
