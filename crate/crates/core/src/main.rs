//! Command-line front end: noise sweeps, single solves with certification,
//! SDPA export, and instance generation.
//!
//! Exit codes: 0 on success, 2 when individual sweep trials failed but the
//! sweep completed, 1 on fatal errors.

use anyhow::{anyhow, bail, Context, Result};
use caypose::harness::{
    certificate_to_json, emit_results, run_single, run_sweep, write_trajectory_csv, ProblemKind,
    ProblemSource, RedundantChoice, SolveMode, SweepConfig,
};
use caypose::problems::ProblemInstance;
use caypose::sdp::{export_sdpa, SolverOptions};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "caypose",
    version,
    about = "Certifiably optimal rotation and pose estimation via Cayley-map SDP relaxations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo tightness sweep over a noise grid.
    Sweep(SweepArgs),
    /// Solve one instance locally, globally (SDP + certificate), or both.
    Solve(SolveArgs),
    /// Export the relaxed SDP of an instance in SDPA sparse format.
    ExportSdpa(ExportArgs),
    /// Generate a problem instance and write it as JSON.
    Gen(GenArgs),
}

#[derive(Args)]
struct ProblemSpec {
    /// Problem kind (rotation | pose | discrete | continuous) or a path to
    /// an instance JSON file.
    #[arg(long)]
    problem: String,
    /// Number of measurements for the averaging problems.
    #[arg(long)]
    m: Option<usize>,
    /// Number of states for the trajectory problems.
    #[arg(long)]
    k: Option<usize>,
    /// Isotropic noise level (generator only).
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    /// Master random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ProblemSpec {
    fn size_for(&self, kind: ProblemKind) -> usize {
        match kind {
            ProblemKind::RotationAveraging | ProblemKind::PoseAveraging => {
                self.m.unwrap_or_else(|| kind.default_size())
            }
            _ => self.k.unwrap_or_else(|| kind.default_size()),
        }
    }

    fn source(&self) -> Result<ProblemSource> {
        if self.problem.ends_with(".json") || std::path::Path::new(&self.problem).exists() {
            Ok(ProblemSource::File(PathBuf::from(&self.problem)))
        } else {
            let kind = ProblemKind::parse(&self.problem)?;
            Ok(ProblemSource::Generated {
                kind,
                size: self.size_for(kind),
                sigma: self.sigma,
            })
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Problem kind (rotation | pose | discrete | continuous).
    #[arg(long)]
    problem: Option<String>,
    /// Comma-separated noise grid, e.g. `0.05,0.1,0.2`.
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Measurements per averaging instance.
    #[arg(long)]
    m: Option<usize>,
    /// States per trajectory instance.
    #[arg(long)]
    k: Option<usize>,
    /// Redundant families: all | none | compactness | comma-separated list.
    #[arg(long)]
    redundant: Option<String>,
    /// Output directory for records.csv and results.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; values present in it override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Partial config for file-based overrides.
#[derive(Deserialize, Default)]
struct SweepPatch {
    problem: Option<String>,
    size: Option<usize>,
    sigmas: Option<Vec<f64>>,
    trials: Option<usize>,
    seed: Option<u64>,
    redundant: Option<RedundantChoice>,
    rank1_threshold: Option<f64>,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    spec: ProblemSpec,
    /// local | global | both
    #[arg(long, default_value = "both")]
    mode: String,
    #[arg(long)]
    redundant: Option<String>,
    /// Rank-1 threshold on the log SVR.
    #[arg(long, default_value_t = 5.0)]
    threshold: f64,
    /// Certificate JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export the relaxed SDP here (SDPA sparse format).
    #[arg(long)]
    export_sdpa: Option<PathBuf>,
    /// Write the extracted trajectory as CSV for plotting.
    #[arg(long)]
    trajectory_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    spec: ProblemSpec,
    #[arg(long)]
    redundant: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    spec: ProblemSpec,
    /// Instance JSON output path.
    #[arg(long)]
    out: PathBuf,
}

fn parse_sigmas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("bad sigma '{t}': {e}"))
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    let patch: SweepPatch = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).context("parsing config")?
        }
        None => SweepPatch::default(),
    };

    // The config file wins over flags wherever it specifies a value.
    let problem_name = patch
        .problem
        .or(args.problem)
        .ok_or_else(|| anyhow!("--problem or a config file entry is required"))?;
    let problem = ProblemKind::parse(&problem_name)?;
    let sigmas = match (patch.sigmas, args.sigma) {
        (Some(s), _) => s,
        (None, Some(s)) => parse_sigmas(&s)?,
        (None, None) => bail!("--sigma or a config file entry is required"),
    };
    let trials = patch.trials.or(args.trials).unwrap_or(50);
    let seed = patch.seed.or(args.seed).unwrap_or(0);
    let size = patch.size.or(match problem {
        ProblemKind::RotationAveraging | ProblemKind::PoseAveraging => args.m,
        _ => args.k,
    });
    let redundant = match (patch.redundant, args.redundant) {
        (Some(r), _) => r,
        (None, Some(s)) => RedundantChoice::parse(&s)?,
        (None, None) => RedundantChoice::All,
    };

    let mut cfg = SweepConfig::new(problem, sigmas, trials, seed);
    if let Some(size) = size {
        cfg.size = size;
    }
    cfg.redundant = redundant;
    if let Some(t) = patch.rank1_threshold {
        cfg.rank1_threshold = t;
    }

    let result = run_sweep(&cfg)?;
    for s in &result.summaries {
        println!(
            "sigma {:>8.4}: rank1 {:>5.3}  local-global {:>5.3}  local-converged {:>5.3}  svr med {:>7.2}  failures {}",
            s.sigma,
            s.rank1_fraction,
            s.local_global_fraction,
            s.local_converged_fraction,
            s.svr_median,
            s.failures
        );
    }
    let out_dir = patch.out.or(args.out);
    if let Some(dir) = &out_dir {
        emit_results(&result, dir)?;
        println!(
            "wrote {} and {}",
            dir.join("records.csv").display(),
            dir.join("results.json").display()
        );
    }
    let failures: usize = result.summaries.iter().map(|s| s.failures).sum();
    Ok(if failures > 0 { 2 } else { 0 })
}

fn cmd_solve(args: SolveArgs) -> Result<i32> {
    let mode = SolveMode::parse(&args.mode)
        .ok_or_else(|| anyhow!("mode must be local, global, or both"))?;
    let redundant = match &args.redundant {
        Some(s) => RedundantChoice::parse(s)?,
        None => RedundantChoice::All,
    };
    let outcome = run_single(
        &args.spec.source()?,
        mode,
        &redundant,
        &SolverOptions::default(),
        args.threshold,
        args.spec.seed,
    )?;

    if let Some(cert) = &outcome.certificate {
        println!(
            "status {:?}  log_svr {:.2}  rank1 {}  sdp_value {:.6e}  extracted {:.6e}  gap {:.2e}",
            cert.solve_status,
            cert.log_svr,
            cert.rank1,
            cert.sdp_value,
            cert.extracted_cost,
            cert.relative_gap
        );
        if let Some(path) = &args.out {
            let json = serde_json::to_string_pretty(&certificate_to_json(cert))?;
            std::fs::write(path, json)?;
            println!("wrote certificate {}", path.display());
        }
        if let Some(path) = &args.trajectory_csv {
            let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_trajectory_csv(&cert.estimate, &mut file)?;
            println!("wrote trajectory {}", path.display());
        }
    }
    if let Some(cost) = outcome.record.local_random_cost {
        println!(
            "local (random init): cost {:.6e}  converged {}",
            cost, outcome.record.local_random_converged
        );
    }
    if let Some(path) = &args.export_sdpa {
        let sdp = outcome
            .sdp
            .as_ref()
            .ok_or_else(|| anyhow!("--export-sdpa needs mode global or both"))?;
        export_sdpa(sdp, path)?;
        println!("wrote sdpa {}", path.display());
    }
    Ok(if let Some(err) = &outcome.record.error {
        eprintln!("trial error: {err}");
        2
    } else {
        0
    })
}

fn cmd_export(args: ExportArgs) -> Result<i32> {
    let redundant = match &args.redundant {
        Some(s) => RedundantChoice::parse(s)?,
        None => RedundantChoice::All,
    };
    // max_iterations 0 builds the relaxation without spending solve time.
    let outcome = run_single(
        &args.spec.source()?,
        SolveMode::Global,
        &redundant,
        &SolverOptions {
            max_iterations: 0,
            ..Default::default()
        },
        5.0,
        args.spec.seed,
    )?;
    let sdp = outcome
        .sdp
        .ok_or_else(|| anyhow!("failed to build the relaxation"))?;
    export_sdpa(&sdp, &args.out)?;
    println!(
        "wrote {} (n = {}, constraints = {}, pruned = {})",
        args.out.display(),
        sdp.n,
        sdp.constraints.len(),
        sdp.pruned.len()
    );
    Ok(0)
}

fn cmd_gen(args: GenArgs) -> Result<i32> {
    let source = args.spec.source()?;
    let problem = match &source {
        ProblemSource::File(path) => {
            // Re-serialize an existing file (validates it on the way).
            let text = std::fs::read_to_string(path)?;
            let json: caypose::problems::ProblemJson = serde_json::from_str(&text)?;
            ProblemInstance::from_json(&json).map_err(|e| anyhow!(e))?
        }
        ProblemSource::Generated { kind, size, sigma } => {
            let mut rng =
                <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(args.spec.seed);
            caypose::harness::generate_trial(*kind, *size, *sigma, &mut rng)
                .map_err(|e| anyhow!(e))?
                .problem
        }
    };
    let json = serde_json::to_string_pretty(&problem.to_json())?;
    std::fs::write(&args.out, json)?;
    println!("wrote {} ({})", args.out.display(), problem.kind_name());
    Ok(0)
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Sweep(args) => cmd_sweep(args),
        Command::Solve(args) => cmd_solve(args),
        Command::ExportSdpa(args) => cmd_export(args),
        Command::Gen(args) => cmd_gen(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
