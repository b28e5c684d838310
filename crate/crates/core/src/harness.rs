//! Monte-Carlo experiment harness: seeded sweeps over noise levels with
//! per-trial records, tightness statistics, and machine-readable output.
//!
//! Every trial owns a counter-derived RNG stream (`master seed` +
//! `stream index`), so results are reproducible regardless of how the
//! worker pool schedules trials.  Individual trial failures are recorded
//! in the trial's `error` field and never abort a sweep.

use crate::certify::{certify, Certificate, EstimateKind, DEFAULT_RANK1_THRESHOLD};
use crate::liegroup::{Mat6, PoseMatrix, RotationMatrix, Vec6};
use crate::localsolve::{
    gn_continuous, gn_discrete, gn_pose_averaging, gn_rotation_averaging, random_pose_init,
    random_rotation_init, random_trajectory_init, trajectory_extent, GnOptions,
};
use crate::problems::{
    continuous_groundtruth, cost_continuous, cost_discrete, cost_pose_averaging,
    cost_rotation_averaging, discrete_groundtruth, simulate_continuous, simulate_discrete,
    simulate_pose_averaging, simulate_rotation_averaging, start_middle_end, ProblemInstance,
    ProblemJson, TrajectoryEstimate,
};
use crate::qcqp::{
    lift_continuous, lift_discrete, lift_pose_averaging, lift_rotation_averaging,
    marginalize_unconstrained, BlockKind, MarginalRecovery, QcqpInstance, RedundantConfig,
};
use crate::sdp::{relax, solve, SdpProblem, SdpSolution, SolveStatus, SolverOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("empty sigma grid")]
    EmptySigmaGrid,
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("unknown problem kind '{0}'")]
    UnknownProblemKind(String),
    #[error("unknown redundant family '{0}'")]
    UnknownFamily(String),
    #[error("problem file error: {0}")]
    ProblemFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    RotationAveraging,
    PoseAveraging,
    DiscreteTrajectory,
    ContinuousTrajectory,
}

impl ProblemKind {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        Ok(match s {
            "rotation" | "rotation_averaging" => Self::RotationAveraging,
            "pose" | "pose_averaging" => Self::PoseAveraging,
            "discrete" | "discrete_trajectory" => Self::DiscreteTrajectory,
            "continuous" | "continuous_trajectory" => Self::ContinuousTrajectory,
            other => return Err(HarnessError::UnknownProblemKind(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::RotationAveraging => "rotation_averaging",
            Self::PoseAveraging => "pose_averaging",
            Self::DiscreteTrajectory => "discrete_trajectory",
            Self::ContinuousTrajectory => "continuous_trajectory",
        }
    }

    /// Desk-scale default size: M measurements or K states.
    pub fn default_size(&self) -> usize {
        match self {
            Self::RotationAveraging | Self::PoseAveraging => 10,
            Self::DiscreteTrajectory => 8,
            Self::ContinuousTrajectory => 9,
        }
    }
}

/// Which redundant families a sweep enables, by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedundantChoice {
    All,
    None,
    CompactnessOnly,
    Families(Vec<String>),
}

impl Default for RedundantChoice {
    fn default() -> Self {
        Self::All
    }
}

impl RedundantChoice {
    pub fn to_config(&self) -> Result<RedundantConfig, HarnessError> {
        Ok(match self {
            Self::All => RedundantConfig::all(),
            Self::None => RedundantConfig::none(),
            Self::CompactnessOnly => RedundantConfig::compactness_only(),
            Self::Families(names) => {
                let mut families = Vec::new();
                for n in names {
                    families.push(
                        crate::qcqp::RedundantFamily::parse(n)
                            .ok_or_else(|| HarnessError::UnknownFamily(n.clone()))?,
                    );
                }
                RedundantConfig::from_families(families)
            }
        })
    }

    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        Ok(match s {
            "all" => Self::All,
            "none" => Self::None,
            "compactness" | "compactness_only" => Self::CompactnessOnly,
            list => {
                let names: Vec<String> = list.split(',').map(|t| t.trim().to_string()).collect();
                for n in &names {
                    if crate::qcqp::RedundantFamily::parse(n).is_none() {
                        return Err(HarnessError::UnknownFamily(n.clone()));
                    }
                }
                Self::Families(names)
            }
        })
    }
}

fn default_threshold() -> f64 {
    DEFAULT_RANK1_THRESHOLD
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub problem: ProblemKind,
    /// M for averaging, K for trajectories.
    pub size: usize,
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub redundant: RedundantChoice,
    #[serde(default = "default_threshold")]
    pub rank1_threshold: f64,
    #[serde(skip, default)]
    pub solver: SolverOptions,
    #[serde(skip, default)]
    pub gn: Option<GnOptions>,
}

impl SweepConfig {
    pub fn new(problem: ProblemKind, sigmas: Vec<f64>, trials: usize, seed: u64) -> Self {
        Self {
            size: problem.default_size(),
            problem,
            sigmas,
            trials,
            seed,
            redundant: RedundantChoice::All,
            rank1_threshold: DEFAULT_RANK1_THRESHOLD,
            solver: SolverOptions::default(),
            gn: None,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.sigmas.is_empty() {
            return Err(HarnessError::EmptySigmaGrid);
        }
        if self.trials == 0 {
            return Err(HarnessError::NoTrials);
        }
        Ok(())
    }

    fn gn_options(&self) -> GnOptions {
        self.gn.clone().unwrap_or_else(|| match self.problem {
            ProblemKind::RotationAveraging | ProblemKind::PoseAveraging => GnOptions::averaging(),
            _ => GnOptions::trajectory(),
        })
    }
}

/// Everything measured in one trial.  Costs are `None` where the stage did
/// not run or failed; `error` carries the first failure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub sigma: f64,
    pub seed: u64,
    pub stream: u64,
    pub sdp_status: Option<SolveStatus>,
    pub log_svr: Option<f64>,
    pub rank1: bool,
    pub sdp_value: Option<f64>,
    pub extracted_cost: Option<f64>,
    /// `(extracted_cost - sdp_value) / (1 + |sdp_value|)`.
    pub certificate_gap: Option<f64>,
    pub det_ok: Option<bool>,
    pub local_random_cost: Option<f64>,
    pub local_random_converged: bool,
    pub local_groundtruth_cost: Option<f64>,
    /// Randomly initialized local solve converged with a cost within
    /// relative 1e-5 of the SDP value.
    pub local_found_global: bool,
    /// Relative cost improvement of a local solve initialized at the
    /// extraction (only evaluated on rank-1 trials).
    pub polish_gain: Option<f64>,
    pub sdp_ms: f64,
    pub local_ms: f64,
    pub error: Option<String>,
}

impl TrialRecord {
    fn empty(trial: usize, sigma: f64, seed: u64, stream: u64) -> Self {
        Self {
            trial,
            sigma,
            seed,
            stream,
            sdp_status: None,
            log_svr: None,
            rank1: false,
            sdp_value: None,
            extracted_cost: None,
            certificate_gap: None,
            det_ok: None,
            local_random_cost: None,
            local_random_converged: false,
            local_groundtruth_cost: None,
            local_found_global: false,
            polish_gain: None,
            sdp_ms: 0.0,
            local_ms: 0.0,
            error: None,
        }
    }
}

/// Per-noise-level aggregate: success fractions and the log-SVR boxplot
/// statistics (quartiles by the median-of-halves convention, excluding the
/// overall median from both halves when the count is odd).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaSummary {
    pub sigma: f64,
    pub trials: usize,
    pub failures: usize,
    pub rank1_fraction: f64,
    pub local_global_fraction: f64,
    pub local_converged_fraction: f64,
    pub svr_min: f64,
    pub svr_q1: f64,
    pub svr_median: f64,
    pub svr_q3: f64,
    pub svr_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_problem: String,
    pub size: usize,
    pub seed: u64,
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<SigmaSummary>,
}

/// Median of a sorted slice.
fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// (q1, median, q3) by median-of-halves, excluding the middle element from
/// both halves when the count is odd.  For 1..=8 this yields (2.5, 4.5, 6.5).
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let med = median(&sorted);
    let half = n / 2;
    let lower = &sorted[..half];
    let upper = &sorted[n - half..];
    (median(lower), med, median(upper))
}

/// The fully assembled pipeline inputs for one trial.
pub struct TrialSetup {
    pub problem: ProblemInstance,
    pub groundtruth: GroundTruth,
}

#[derive(Debug, Clone)]
pub enum GroundTruth {
    Rotation(RotationMatrix),
    Pose(PoseMatrix),
    Trajectory(TrajectoryEstimate),
}

/// Deterministic per-trial generator.  Trajectory geometry is fixed per
/// problem kind; measurement noise and averaging groundtruths vary with
/// the RNG stream.
pub fn generate_trial(
    kind: ProblemKind,
    size: usize,
    sigma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<TrialSetup, String> {
    match kind {
        ProblemKind::RotationAveraging => {
            let gt = random_rotation_init(rng);
            let p = simulate_rotation_averaging(&gt, size, sigma, rng).map_err(|e| e.to_string())?;
            Ok(TrialSetup {
                problem: ProblemInstance::Rotation(p),
                groundtruth: GroundTruth::Rotation(gt),
            })
        }
        ProblemKind::PoseAveraging => {
            let gt = random_pose_init(rng, 1.0);
            let p = simulate_pose_averaging(&gt, size, sigma, rng).map_err(|e| e.to_string())?;
            Ok(TrialSetup {
                problem: ProblemInstance::Pose(p),
                groundtruth: GroundTruth::Pose(gt),
            })
        }
        ProblemKind::DiscreteTrajectory => {
            let gt = discrete_groundtruth(size);
            let p = simulate_discrete(&gt, sigma, rng).map_err(|e| e.to_string())?;
            Ok(TrialSetup {
                problem: ProblemInstance::Discrete(p),
                groundtruth: GroundTruth::Trajectory(TrajectoryEstimate::poses_only(gt)),
            })
        }
        ProblemKind::ContinuousTrajectory => {
            let timestamps: Vec<f64> = (0..size).map(|i| i as f64).collect();
            let twist = Vec6::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.2]);
            let gt = continuous_groundtruth(&timestamps, &twist);
            let p = simulate_continuous(
                &timestamps,
                &gt,
                &start_middle_end(size),
                sigma,
                Mat6::identity(),
                Mat6::identity(),
                rng,
            )
            .map_err(|e| e.to_string())?;
            Ok(TrialSetup {
                problem: ProblemInstance::Continuous(p),
                groundtruth: GroundTruth::Trajectory(gt),
            })
        }
    }
}

/// Lifts a problem instance, marginalizing twists for the continuous case.
pub fn lift_instance(
    problem: &ProblemInstance,
    cfg: &RedundantConfig,
) -> Result<(QcqpInstance, Option<MarginalRecovery>), String> {
    match problem {
        ProblemInstance::Rotation(p) => Ok((lift_rotation_averaging(p), None)),
        ProblemInstance::Pose(p) => Ok((lift_pose_averaging(p, cfg), None)),
        ProblemInstance::Discrete(p) => Ok((lift_discrete(p, cfg), None)),
        ProblemInstance::Continuous(p) => {
            let full = lift_continuous(p, cfg);
            let (reduced, recovery) =
                marginalize_unconstrained(&full, |k| matches!(k, BlockKind::Twist { .. }))
                    .map_err(|e| e.to_string())?;
            Ok((reduced, Some(recovery)))
        }
    }
}

fn local_solve_random(
    problem: &ProblemInstance,
    groundtruth: &GroundTruth,
    gn: &GnOptions,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, bool), String> {
    match problem {
        ProblemInstance::Rotation(p) => {
            let init = random_rotation_init(rng);
            let out = gn_rotation_averaging(p, &init, gn).map_err(|e| e.to_string())?;
            Ok((out.cost, out.converged))
        }
        ProblemInstance::Pose(p) => {
            let init = random_pose_init(rng, 1.0);
            let out = gn_pose_averaging(p, &init, gn).map_err(|e| e.to_string())?;
            Ok((out.cost, out.converged))
        }
        ProblemInstance::Discrete(p) => {
            let extent = match groundtruth {
                GroundTruth::Trajectory(t) => trajectory_extent(&t.poses),
                _ => 1.0,
            };
            let init = random_trajectory_init(rng, p.num_states(), extent, false);
            let out = gn_discrete(p, &init, gn).map_err(|e| e.to_string())?;
            Ok((out.cost, out.converged))
        }
        ProblemInstance::Continuous(p) => {
            let extent = match groundtruth {
                GroundTruth::Trajectory(t) => trajectory_extent(&t.poses),
                _ => 1.0,
            };
            let init = random_trajectory_init(rng, p.num_states(), extent, true);
            let out = gn_continuous(p, &init, gn).map_err(|e| e.to_string())?;
            Ok((out.cost, out.converged))
        }
    }
}

fn local_solve_from(
    problem: &ProblemInstance,
    init: &GroundTruth,
    gn: &GnOptions,
) -> Result<f64, String> {
    match (problem, init) {
        (ProblemInstance::Rotation(p), GroundTruth::Rotation(c)) => {
            Ok(gn_rotation_averaging(p, c, gn).map_err(|e| e.to_string())?.cost)
        }
        (ProblemInstance::Pose(p), GroundTruth::Pose(t)) => {
            Ok(gn_pose_averaging(p, t, gn).map_err(|e| e.to_string())?.cost)
        }
        (ProblemInstance::Discrete(p), GroundTruth::Trajectory(t)) => {
            Ok(gn_discrete(p, t, gn).map_err(|e| e.to_string())?.cost)
        }
        (ProblemInstance::Continuous(p), GroundTruth::Trajectory(t)) => {
            Ok(gn_continuous(p, t, gn).map_err(|e| e.to_string())?.cost)
        }
        _ => Err("estimate kind does not match problem".to_string()),
    }
}

fn estimate_to_groundtruth(e: &EstimateKind) -> GroundTruth {
    match e {
        EstimateKind::Rotation(c) => GroundTruth::Rotation(*c),
        EstimateKind::Pose(t) => GroundTruth::Pose(*t),
        EstimateKind::Trajectory(t) => GroundTruth::Trajectory(t.clone()),
    }
}

pub fn groundtruth_cost(problem: &ProblemInstance, gt: &GroundTruth) -> Result<f64, String> {
    match (problem, gt) {
        (ProblemInstance::Rotation(p), GroundTruth::Rotation(c)) => {
            cost_rotation_averaging(p, c).map_err(|e| e.to_string())
        }
        (ProblemInstance::Pose(p), GroundTruth::Pose(t)) => {
            cost_pose_averaging(p, t).map_err(|e| e.to_string())
        }
        (ProblemInstance::Discrete(p), GroundTruth::Trajectory(t)) => {
            cost_discrete(p, t).map_err(|e| e.to_string())
        }
        (ProblemInstance::Continuous(p), GroundTruth::Trajectory(t)) => {
            cost_continuous(p, t).map_err(|e| e.to_string())
        }
        _ => Err("estimate kind does not match problem".to_string()),
    }
}

/// Runs the full pipeline on one prepared trial: lift, relax, solve,
/// certify, local solves, and (on rank-1 trials) the extraction polish.
pub fn run_pipeline(
    setup: &TrialSetup,
    redundant: &RedundantConfig,
    solver: &SolverOptions,
    gn: &GnOptions,
    threshold: f64,
    rng: &mut ChaCha12Rng,
    record: &mut TrialRecord,
) -> Option<Certificate> {
    let t_local = Instant::now();
    match local_solve_random(&setup.problem, &setup.groundtruth, gn, rng) {
        Ok((cost, converged)) => {
            record.local_random_cost = Some(cost);
            record.local_random_converged = converged;
        }
        Err(e) => {
            record.error.get_or_insert(format!("local(random): {e}"));
        }
    }
    match local_solve_from(&setup.problem, &setup.groundtruth, gn) {
        Ok(cost) => record.local_groundtruth_cost = Some(cost),
        Err(e) => {
            record.error.get_or_insert(format!("local(groundtruth): {e}"));
        }
    }
    record.local_ms = t_local.elapsed().as_secs_f64() * 1e3;

    let t_sdp = Instant::now();
    let lifted = match lift_instance(&setup.problem, redundant) {
        Ok(pair) => pair,
        Err(e) => {
            record.error.get_or_insert(format!("lift: {e}"));
            return None;
        }
    };
    let (instance, recovery) = lifted;
    let sdp = relax(&instance);
    let solution = solve(&sdp, solver);
    record.sdp_ms = t_sdp.elapsed().as_secs_f64() * 1e3;
    record.sdp_status = Some(solution.status);
    record.sdp_value = Some(solution.primal_objective);
    if solution.status == SolveStatus::NumericalFailure {
        record.error.get_or_insert("sdp: numerical failure".to_string());
        return None;
    }

    let cert = match certify(
        &setup.problem,
        &solution,
        &instance.layout,
        recovery.as_ref(),
        threshold,
    ) {
        Ok(c) => c,
        Err(e) => {
            record.error.get_or_insert(format!("certify: {e}"));
            return None;
        }
    };
    record.log_svr = Some(cert.log_svr);
    record.rank1 = cert.rank1;
    record.extracted_cost = Some(cert.extracted_cost);
    record.certificate_gap = Some(cert.relative_gap);
    record.det_ok = Some(cert.det_ok);

    if let Some(rand_cost) = record.local_random_cost {
        let gap = (rand_cost - cert.sdp_value) / (1.0 + cert.sdp_value.abs());
        record.local_found_global = record.local_random_converged && gap.abs() <= 1e-5;
    }

    if cert.rank1 {
        let polish_init = estimate_to_groundtruth(&cert.estimate);
        if let Ok(polished) = local_solve_from(&setup.problem, &polish_init, gn) {
            record.polish_gain =
                Some((cert.extracted_cost - polished) / (1.0 + cert.extracted_cost.abs()));
        }
    }
    Some(cert)
}

fn run_trial(cfg: &SweepConfig, sigma: f64, trial: usize, stream: u64) -> TrialRecord {
    let mut record = TrialRecord::empty(trial, sigma, cfg.seed, stream);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let setup = match generate_trial(cfg.problem, cfg.size, sigma, &mut rng) {
        Ok(s) => s,
        Err(e) => {
            record.error = Some(format!("generate: {e}"));
            return record;
        }
    };
    let redundant = match cfg.redundant.to_config() {
        Ok(r) => r,
        Err(e) => {
            record.error = Some(format!("config: {e}"));
            return record;
        }
    };
    run_pipeline(
        &setup,
        &redundant,
        &cfg.solver,
        &cfg.gn_options(),
        cfg.rank1_threshold,
        &mut rng,
        &mut record,
    );
    record
}

/// Runs the sweep on a bounded worker pool.  Records are ordered by
/// (sigma index, trial index); aggregation is order-independent.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult, HarnessError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.sigmas.len())
        .flat_map(|si| (0..cfg.trials).map(move |t| (si, t)))
        .collect();
    let mut records: Vec<(usize, TrialRecord)> = jobs
        .par_iter()
        .map(|&(si, trial)| {
            let stream = (si * cfg.trials + trial) as u64;
            (si, run_trial(cfg, cfg.sigmas[si], trial, stream))
        })
        .collect();
    records.sort_by_key(|(si, r)| (*si, r.trial));

    let mut summaries = Vec::with_capacity(cfg.sigmas.len());
    for (si, &sigma) in cfg.sigmas.iter().enumerate() {
        let group: Vec<&TrialRecord> = records
            .iter()
            .filter(|(s, _)| *s == si)
            .map(|(_, r)| r)
            .collect();
        let trials = group.len();
        let failures = group.iter().filter(|r| r.error.is_some()).count();
        let rank1 = group.iter().filter(|r| r.rank1).count();
        let found = group.iter().filter(|r| r.local_found_global).count();
        let converged = group.iter().filter(|r| r.local_random_converged).count();
        let svrs: Vec<f64> = group.iter().filter_map(|r| r.log_svr).collect();
        let (q1, med, q3) = quartiles(&svrs);
        summaries.push(SigmaSummary {
            sigma,
            trials,
            failures,
            rank1_fraction: rank1 as f64 / trials as f64,
            local_global_fraction: found as f64 / trials as f64,
            local_converged_fraction: converged as f64 / trials as f64,
            svr_min: svrs.iter().copied().fold(f64::NAN, f64::min),
            svr_q1: q1,
            svr_median: med,
            svr_q3: q3,
            svr_max: svrs.iter().copied().fold(f64::NAN, f64::max),
        });
    }

    Ok(SweepResult {
        config_problem: cfg.problem.name().to_string(),
        size: cfg.size,
        seed: cfg.seed,
        records: records.into_iter().map(|(_, r)| r).collect(),
        summaries,
    })
}

/// Stable CSV column schema for trial records.
pub const CSV_HEADER: &str = "trial,sigma,seed,stream,sdp_status,log_svr,rank1,sdp_value,extracted_cost,certificate_gap,det_ok,local_random_cost,local_random_converged,local_groundtruth_cost,local_found_global,polish_gain,sdp_ms,local_ms,error";

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_records_csv<W: Write>(records: &[TrialRecord], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        let status = r
            .sdp_status
            .map(|s| format!("{s:?}").to_lowercase())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.trial,
            r.sigma,
            r.seed,
            r.stream,
            status,
            fmt_opt(&r.log_svr),
            r.rank1,
            fmt_opt(&r.sdp_value),
            fmt_opt(&r.extracted_cost),
            fmt_opt(&r.certificate_gap),
            fmt_opt(&r.det_ok),
            fmt_opt(&r.local_random_cost),
            r.local_random_converged,
            fmt_opt(&r.local_groundtruth_cost),
            r.local_found_global,
            fmt_opt(&r.polish_gain),
            r.sdp_ms,
            r.local_ms,
            r.error.as_deref().unwrap_or("").replace(',', ";"),
        )?;
    }
    Ok(())
}

pub fn emit_results(result: &SweepResult, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("records.csv"))?);
    write_records_csv(&result.records, &mut csv)?;
    let json = std::fs::File::create(dir.join("results.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(json), result)?;
    Ok(())
}

/// Serializable certificate view (estimates as plain arrays).
#[derive(Debug, Serialize)]
pub struct CertificateJson {
    pub log_svr: f64,
    pub svr_capped: bool,
    pub rank1: bool,
    pub threshold: f64,
    pub extracted_cost: f64,
    pub sdp_value: f64,
    pub relative_gap: f64,
    pub det_ok: bool,
    pub solve_status: String,
    pub estimate: serde_json::Value,
}

pub fn certificate_to_json(cert: &Certificate) -> CertificateJson {
    let estimate = match &cert.estimate {
        EstimateKind::Rotation(c) => serde_json::json!({
            "kind": "rotation",
            "rotation": rows3(c.matrix()),
        }),
        EstimateKind::Pose(t) => serde_json::json!({
            "kind": "pose",
            "rotation": rows3(t.rotation().matrix()),
            "translation": [t.translation()[0], t.translation()[1], t.translation()[2]],
        }),
        EstimateKind::Trajectory(traj) => serde_json::json!({
            "kind": "trajectory",
            "poses": traj.poses.iter().map(|t| serde_json::json!({
                "rotation": rows3(t.rotation().matrix()),
                "translation": [t.translation()[0], t.translation()[1], t.translation()[2]],
            })).collect::<Vec<_>>(),
            "twists": traj.twists.as_ref().map(|tw| tw.iter()
                .map(|w| (0..6).map(|i| w[i]).collect::<Vec<f64>>())
                .collect::<Vec<_>>()),
        }),
    };
    CertificateJson {
        log_svr: cert.log_svr,
        svr_capped: cert.svr_capped,
        rank1: cert.rank1,
        threshold: cert.threshold,
        extracted_cost: cert.extracted_cost,
        sdp_value: cert.sdp_value,
        relative_gap: cert.relative_gap,
        det_ok: cert.det_ok,
        solve_status: format!("{:?}", cert.solve_status).to_lowercase(),
        estimate,
    }
}

fn rows3(m: &crate::liegroup::Mat3) -> Vec<Vec<f64>> {
    (0..3).map(|i| (0..3).map(|j| m[(i, j)]).collect()).collect()
}

/// Writes the extracted trajectory as CSV (`state,x,y,z,r00..r22`).
pub fn write_trajectory_csv<W: Write>(
    estimate: &EstimateKind,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "state,x,y,z,r00,r01,r02,r10,r11,r12,r20,r21,r22")?;
    let poses: Vec<PoseMatrix> = match estimate {
        EstimateKind::Rotation(c) => vec![PoseMatrix::from_parts(*c, crate::liegroup::Vec3::zeros())],
        EstimateKind::Pose(t) => vec![*t],
        EstimateKind::Trajectory(t) => t.poses.clone(),
    };
    for (k, t) in poses.iter().enumerate() {
        let r = t.rotation().matrix();
        let p = t.translation();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            k,
            p[0],
            p[1],
            p[2],
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)]
        )?;
    }
    Ok(())
}

/// Where a single solve gets its problem from.
pub enum ProblemSource {
    File(std::path::PathBuf),
    Generated {
        kind: ProblemKind,
        size: usize,
        sigma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Local,
    Global,
    Both,
}

impl SolveMode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "local" => Self::Local,
            "global" => Self::Global,
            "both" => Self::Both,
            _ => return None,
        })
    }
}

pub struct SingleOutcome {
    pub record: TrialRecord,
    pub certificate: Option<Certificate>,
    pub problem: ProblemInstance,
    /// The relaxed SDP, retained for export.
    pub sdp: Option<SdpProblem>,
    pub solution: Option<SdpSolution>,
}

/// Runs one problem through the requested pipeline stages.  Generated
/// problems use the same per-seed stream-0 derivation as sweep trial 0, so
/// a `gen`-then-`solve` round trip reproduces the sweep's instance.
pub fn run_single(
    source: &ProblemSource,
    mode: SolveMode,
    redundant: &RedundantChoice,
    solver: &SolverOptions,
    threshold: f64,
    seed: u64,
) -> Result<SingleOutcome, HarnessError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (problem, groundtruth, sigma) = match source {
        ProblemSource::File(path) => {
            let text = std::fs::read_to_string(path)?;
            let json: ProblemJson = serde_json::from_str(&text)?;
            let inst =
                ProblemInstance::from_json(&json).map_err(HarnessError::ProblemFile)?;
            (inst, None, f64::NAN)
        }
        ProblemSource::Generated { kind, size, sigma } => {
            let setup = generate_trial(*kind, *size, *sigma, &mut rng)
                .map_err(HarnessError::ProblemFile)?;
            (setup.problem, Some(setup.groundtruth), *sigma)
        }
    };

    let mut record = TrialRecord::empty(0, sigma, seed, 0);
    let gn = match &problem {
        ProblemInstance::Rotation(_) | ProblemInstance::Pose(_) => GnOptions::averaging(),
        _ => GnOptions::trajectory(),
    };

    if matches!(mode, SolveMode::Local | SolveMode::Both) {
        let t0 = Instant::now();
        let gt_for_init = groundtruth.clone().unwrap_or_else(|| fallback_init(&problem));
        match local_solve_random(&problem, &gt_for_init, &gn, &mut rng) {
            Ok((cost, converged)) => {
                record.local_random_cost = Some(cost);
                record.local_random_converged = converged;
            }
            Err(e) => {
                record.error.get_or_insert(format!("local(random): {e}"));
            }
        }
        if let Some(gt) = &groundtruth {
            if let Ok(cost) = local_solve_from(&problem, gt, &gn) {
                record.local_groundtruth_cost = Some(cost);
            }
        }
        record.local_ms = t0.elapsed().as_secs_f64() * 1e3;
    }

    let mut certificate = None;
    let mut sdp_out = None;
    let mut solution_out = None;
    if matches!(mode, SolveMode::Global | SolveMode::Both) {
        let cfg = redundant.to_config()?;
        let t0 = Instant::now();
        match lift_instance(&problem, &cfg) {
            Ok((instance, recovery)) => {
                let sdp = relax(&instance);
                let solution = solve(&sdp, solver);
                record.sdp_ms = t0.elapsed().as_secs_f64() * 1e3;
                record.sdp_status = Some(solution.status);
                record.sdp_value = Some(solution.primal_objective);
                if solution.status != SolveStatus::NumericalFailure {
                    match certify(&problem, &solution, &instance.layout, recovery.as_ref(), threshold)
                    {
                        Ok(cert) => {
                            record.log_svr = Some(cert.log_svr);
                            record.rank1 = cert.rank1;
                            record.extracted_cost = Some(cert.extracted_cost);
                            record.certificate_gap = Some(cert.relative_gap);
                            record.det_ok = Some(cert.det_ok);
                            if let Some(rand_cost) = record.local_random_cost {
                                let gap = (rand_cost - cert.sdp_value)
                                    / (1.0 + cert.sdp_value.abs());
                                record.local_found_global =
                                    record.local_random_converged && gap.abs() <= 1e-5;
                            }
                            certificate = Some(cert);
                        }
                        Err(e) => {
                            record.error.get_or_insert(format!("certify: {e}"));
                        }
                    }
                } else {
                    record.error.get_or_insert("sdp: numerical failure".to_string());
                }
                sdp_out = Some(sdp);
                solution_out = Some(solution);
            }
            Err(e) => {
                record.error.get_or_insert(format!("lift: {e}"));
            }
        }
    }

    Ok(SingleOutcome {
        record,
        certificate,
        problem,
        sdp: sdp_out,
        solution: solution_out,
    })
}

fn fallback_init(problem: &ProblemInstance) -> GroundTruth {
    match problem {
        ProblemInstance::Rotation(_) => GroundTruth::Rotation(RotationMatrix::identity()),
        ProblemInstance::Pose(_) => GroundTruth::Pose(PoseMatrix::identity()),
        ProblemInstance::Discrete(p) => GroundTruth::Trajectory(TrajectoryEstimate::poses_only(
            vec![PoseMatrix::identity(); p.num_states()],
        )),
        ProblemInstance::Continuous(p) => GroundTruth::Trajectory(TrajectoryEstimate::with_twists(
            vec![PoseMatrix::identity(); p.num_states()],
            vec![Vec6::zeros(); p.num_states()],
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_follow_declared_convention() {
        let v: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        assert_eq!(quartiles(&v), (2.5, 4.5, 6.5));
        let odd: Vec<f64> = (1..=7).map(|i| i as f64).collect();
        // Median 4 excluded from both halves: {1,2,3} and {5,6,7}.
        assert_eq!(quartiles(&odd), (2.0, 4.0, 6.0));
    }

    #[test]
    fn noiseless_rotation_sweep_is_fully_tight() {
        let cfg = SweepConfig {
            size: 4,
            ..SweepConfig::new(ProblemKind::RotationAveraging, vec![0.0], 5, 7)
        };
        let result = run_sweep(&cfg).unwrap();
        assert_eq!(result.summaries.len(), 1);
        let s = &result.summaries[0];
        assert_eq!(s.failures, 0);
        assert_eq!(s.rank1_fraction, 1.0);
        for r in &result.records {
            assert!(r.certificate_gap.unwrap().abs() <= 1e-7);
        }
    }

    #[test]
    fn sweeps_are_deterministic() {
        let cfg = SweepConfig {
            size: 4,
            ..SweepConfig::new(ProblemKind::RotationAveraging, vec![0.3], 4, 11)
        };
        let a = run_sweep(&cfg).unwrap();
        let b = run_sweep(&cfg).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.log_svr, rb.log_svr);
            assert_eq!(ra.sdp_value, rb.sdp_value);
            assert_eq!(ra.local_random_cost, rb.local_random_cost);
        }
    }

    #[test]
    fn csv_header_only_for_empty_records() {
        let mut buf = Vec::new();
        write_records_csv(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.trim(), CSV_HEADER);
    }

    #[test]
    fn result_json_round_trips() {
        let cfg = SweepConfig {
            size: 3,
            ..SweepConfig::new(ProblemKind::RotationAveraging, vec![0.1], 2, 3)
        };
        let result = run_sweep(&cfg).unwrap();
        let json = serde_json::to_string(&result).unwrap();
        let back: SweepResult = serde_json::from_str(&json).unwrap();
        let json2 = serde_json::to_string(&back).unwrap();
        assert_eq!(json, json2);
    }
}
