//! Run dispatch and artifact persistence.
//!
//! Every run writes three artifacts into its output directory:
//!
//! - `trace.jsonl` — one record per algorithmic step with the fields
//!   s, phi, grad_norm, fluence, condition, track_err, pathlength_cum;
//!   numbers carry 17 significant digits so reruns are byte-identical.
//! - `field_final.csv` — `t,epsilon` rows of the final control field.
//! - `report.json` — summary metrics for comparison tooling.
//!
//! Exit status mapping: converged -> 0, stalled or budget exhausted -> 2,
//! singular correlation matrix or near-critical abort -> 3.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use qtrack::dmorph::{
    geodesic, run_unitary_tracking, CorrectionMode, InversionOptions, TrackingOptions,
};
use qtrack::landscape::{
    expectation, kinematic_optimum, nearest_kinematic_optimum, run_gradient_flow, StopRule,
};
use qtrack::linalg::RVec;
use qtrack::obstrack::{
    default_basis, run_observable_tracking, targets_from_geodesic, ObsTrackingOptions,
    ObservableTrackSpec,
};
use qtrack::qdyn::{propagate, ControlField};
use qtrack::trace::{OptimizationTrace, RunFailure, StopReason};
use qtrack::Error;

use crate::config::{Algorithm, CorrectionChoice, RunConfig, TargetChoice};

/// Summary of one run, persisted as report.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: String,
    pub seed: u64,
    pub final_phi: f64,
    pub phi_max: f64,
    pub iterations: usize,
    pub final_track_err: Option<f64>,
    pub pathlength: f64,
    pub geodesic_distance: Option<f64>,
    pub final_fluence: f64,
    pub stop_reason: String,
    pub exit_status: String,
    pub branch_cut_warnings: usize,
    pub system_fingerprint: String,
    pub wall_time_s: f64,
}

pub struct RunOutcome {
    pub report: RunReport,
    pub exit_code: i32,
}

fn exit_code_for_stop(stop: StopReason) -> (i32, &'static str) {
    match stop {
        StopReason::Converged
        | StopReason::TrackCompleted
        | StopReason::Critical
        | StopReason::GradientVanished => (0, "converged"),
        StopReason::SMaxReached | StopReason::StepLimit => (2, "budget_exhausted"),
    }
}

fn exit_code_for_error(err: &Error) -> (i32, &'static str) {
    match err {
        Error::StalledOptimization(_) => (2, "stalled"),
        Error::SingularGMatrix(_, _)
        | Error::SingularGamma(_, _)
        | Error::NearCriticalSingularity(_) => (3, "singular"),
        _ => (1, "error"),
    }
}

/// Format with 17 significant digits (round-trip exact for f64).
fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".into()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) => fmt_f64(v),
        None => "null".into(),
    }
}

fn write_trace(path: &Path, trace: &OptimizationTrace) -> Result<()> {
    let mut out = String::new();
    for r in &trace.records {
        out.push_str(&format!(
            "{{\"s\":{},\"phi\":{},\"grad_norm\":{},\"fluence\":{},\"condition\":{},\"track_err\":{},\"pathlength_cum\":{}}}\n",
            fmt_f64(r.s),
            fmt_f64(r.phi),
            fmt_f64(r.grad_norm),
            fmt_f64(r.fluence),
            fmt_opt(r.condition.filter(|c| c.is_finite())),
            fmt_opt(r.track_err),
            fmt_f64(r.pathlength_cum),
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn write_field(path: &Path, field: &RVec, grid: &qtrack::qdyn::TimeGrid) -> Result<()> {
    let mut out = String::from("t,epsilon\n");
    for j in 0..grid.q {
        out.push_str(&format!("{},{}\n", fmt_f64(grid.time(j)), fmt_f64(field[j])));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Dispatch a validated configuration, persist artifacts, and return the
/// report with its process exit code.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let started = std::time::Instant::now();

    let grid = config.time_grid.clone();
    let p = config.raw.grid.p;
    let ds = config.raw.grid.ds;
    let row0 = config.initial_row();
    let field = ControlField::new(row0, grid.clone(), ds)
        .map_err(|e| anyhow::anyhow!("initial field: {e}"))?;
    let (_, phi_max) = kinematic_optimum(&config.rho, &config.theta)
        .map_err(|e| anyhow::anyhow!("kinematic optimum: {e}"))?;

    let inversion = InversionOptions {
        strict: config.raw.options.strict,
        ..InversionOptions::default()
    };

    // Tracking targets share the geodesic toward the configured optimum.
    let make_track = |steps: usize| -> Result<qtrack::dmorph::GeodesicTrack> {
        let traj0 = propagate(&config.model, field.current(), &grid)
            .map_err(|e| anyhow::anyhow!("initial propagation: {e}"))?;
        let u0 = traj0.final_unitary().clone();
        let w = match config.raw.options.target {
            TargetChoice::Nearest => {
                nearest_kinematic_optimum(&u0, &config.rho, &config.theta)
                    .map_err(|e| anyhow::anyhow!("target optimum: {e}"))?
                    .0
            }
            TargetChoice::Canonical => {
                kinematic_optimum(&config.rho, &config.theta)
                    .map_err(|e| anyhow::anyhow!("target optimum: {e}"))?
                    .0
            }
        };
        geodesic(&u0, &w, steps).map_err(|e| anyhow::anyhow!("geodesic: {e}"))
    };

    let mut geodesic_distance = None;
    let driver_result: std::result::Result<OptimizationTrace, Box<RunFailure>> =
        match config.raw.algorithm {
            Algorithm::Grad => {
                let stop = StopRule {
                    phi_gap: 1e-6,
                    grad_tol: 1e-8,
                    s_max: config.s_max,
                    max_records: p,
                    ds0: ds,
                    ds_max: (ds * 100.0).max(0.5),
                    ds_min: 1e-12,
                    use_rk4: config.raw.options.rk4,
                };
                run_gradient_flow(&config.model, &field, &config.rho, &config.theta, &stop)
            }
            Algorithm::Utrack => {
                let polish = config.raw.options.polish_steps;
                let schedule_steps = p.saturating_sub(polish).max(2);
                let track = make_track(schedule_steps)?;
                geodesic_distance = Some(track.length());
                let opts = TrackingOptions {
                    correction: match config.raw.options.correction {
                        CorrectionChoice::Combined => CorrectionMode::Combined,
                        CorrectionChoice::Separate => CorrectionMode::Separate,
                        CorrectionChoice::None => CorrectionMode::None,
                    },
                    inversion,
                    fluence_weight: config
                        .raw
                        .options
                        .fluence
                        .then(|| RVec::from_element(grid.q, 1.0)),
                    morphing: config.raw.options.morphing,
                    polish_steps: polish,
                };
                run_unitary_tracking(
                    &config.model,
                    &field,
                    &track,
                    &config.rho,
                    &config.theta,
                    &opts,
                )
            }
            Algorithm::Vtrack => {
                let track = make_track(p)?;
                geodesic_distance = Some(track.length());
                let m = config.raw.options.observables.unwrap_or(config.model.dim);
                let basis = default_basis(&config.theta, m)
                    .map_err(|e| anyhow::anyhow!("observable basis: {e}"))?;
                let mut spec = targets_from_geodesic(&track, &config.rho, &basis)
                    .map_err(|e| anyhow::anyhow!("targets: {e}"))?;
                spec.beta = config.raw.options.beta;
                let opts = ObsTrackingOptions {
                    inversion,
                    fluence_weight: config
                        .raw
                        .options
                        .fluence
                        .then(|| RVec::from_element(grid.q, 1.0)),
                    use_rk4: config.raw.options.rk4,
                };
                run_observable_tracking(
                    &config.model,
                    &field,
                    &spec,
                    &basis,
                    &config.rho,
                    &config.theta,
                    &opts,
                )
            }
            Algorithm::Strack => {
                let traj0 = propagate(&config.model, field.current(), &grid)
                    .map_err(|e| anyhow::anyhow!("initial propagation: {e}"))?;
                let phi0 = expectation(traj0.final_unitary(), &config.rho, &config.theta)
                    .map_err(|e| anyhow::anyhow!("initial objective: {e}"))?;
                let ramp_to = config.raw.options.ramp_to.unwrap_or(phi_max);
                let mut spec = ObservableTrackSpec::scalar_ramp(phi0, ramp_to, p)
                    .map_err(|e| anyhow::anyhow!("ramp: {e}"))?;
                spec.beta = config.raw.options.beta;
                let basis = default_basis(&config.theta, 1)
                    .map_err(|e| anyhow::anyhow!("observable basis: {e}"))?;
                let opts = ObsTrackingOptions {
                    inversion,
                    fluence_weight: config
                        .raw
                        .options
                        .fluence
                        .then(|| RVec::from_element(grid.q, 1.0)),
                    use_rk4: config.raw.options.rk4,
                };
                run_observable_tracking(
                    &config.model,
                    &field,
                    &spec,
                    &basis,
                    &config.rho,
                    &config.theta,
                    &opts,
                )
            }
        };

    let (trace, exit_code, exit_status) = match driver_result {
        Ok(trace) => {
            let (code, status) = exit_code_for_stop(trace.stop);
            (trace, code, status)
        }
        Err(failure) => {
            let (code, status) = exit_code_for_error(&failure.error);
            eprintln!("run aborted: {}", failure.error);
            (failure.partial, code, status)
        }
    };

    write_trace(&out_dir.join("trace.jsonl"), &trace)?;
    write_field(&out_dir.join("field_final.csv"), &trace.final_field, &grid)?;

    let wall_time_s = started.elapsed().as_secs_f64();
    let (final_phi, final_track_err, pathlength, iterations) = match trace.records.last() {
        Some(rec) => (
            rec.phi,
            rec.track_err,
            rec.pathlength_cum,
            trace.records.len() - 1,
        ),
        None => (f64::NAN, None, 0.0, 0),
    };
    let report = RunReport {
        algorithm: config.raw.algorithm.as_str().into(),
        seed: config.seed,
        final_phi,
        phi_max,
        iterations,
        final_track_err,
        pathlength,
        geodesic_distance,
        final_fluence: trace
            .records
            .last()
            .map(|r| r.fluence)
            .unwrap_or(f64::NAN),
        stop_reason: trace.stop.as_str().into(),
        exit_status: exit_status.into(),
        branch_cut_warnings: trace.branch_cut_warnings,
        system_fingerprint: config.fingerprint(),
        wall_time_s,
    };
    let json = serde_json::to_string_pretty(&report).context("serializing report")?;
    let mut f = std::fs::File::create(out_dir.join("report.json"))?;
    writeln!(f, "{json}")?;

    Ok(RunOutcome { report, exit_code })
}
