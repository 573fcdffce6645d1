//! Per-step diagnostics shared by all optimization and tracking drivers.

use crate::error::Error;
use crate::linalg::{CMat, RVec};

/// One record per accepted algorithmic step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Algorithmic time of the record.
    pub s: f64,
    /// Objective value Tr(U rho U^dag Theta).
    pub phi: f64,
    /// L2([0,T]) norm of the field gradient a0.
    pub grad_norm: f64,
    /// Fluence of the current field row.
    pub fluence: f64,
    /// Condition number of the correlation matrix used this step, when a
    /// tracking algorithm ran one (infinite conditions are `f64::INFINITY`).
    pub condition: Option<f64>,
    /// Tracking error against the target track, when applicable.
    pub track_err: Option<f64>,
    /// Final-time propagator U(T, s).
    pub u_final: CMat,
    /// Accumulated pathlength in U(N) up to this record.
    pub pathlength_cum: f64,
}

/// Why a driver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The initial point was already critical (vanishing gradient).
    Critical,
    /// Objective reached the kinematic optimum within tolerance.
    Converged,
    /// Gradient norm fell below tolerance mid-run.
    GradientVanished,
    /// Algorithmic time exceeded its budget.
    SMaxReached,
    /// Record budget (p) exhausted.
    StepLimit,
    /// A tracking schedule was followed to its end.
    TrackCompleted,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Critical => "critical",
            StopReason::Converged => "converged",
            StopReason::GradientVanished => "gradient_vanished",
            StopReason::SMaxReached => "s_max_reached",
            StopReason::StepLimit => "step_limit",
            StopReason::TrackCompleted => "track_completed",
        }
    }
}

/// Full diagnostics of one optimization or tracking run.
#[derive(Debug, Clone)]
pub struct OptimizationTrace {
    pub records: Vec<StepRecord>,
    pub stop: StopReason,
    /// Number of principal-branch warnings raised by matrix logarithms.
    pub branch_cut_warnings: usize,
    /// The control-field row the run ended with.
    pub final_field: RVec,
}

impl OptimizationTrace {
    pub fn final_record(&self) -> &StepRecord {
        self.records.last().expect("trace has at least one record")
    }

    pub fn final_phi(&self) -> f64 {
        self.final_record().phi
    }

    /// Accumulated pathlength of the final record.
    pub fn pathlength(&self) -> f64 {
        self.final_record().pathlength_cum
    }
}

/// A driver failure carrying the diagnostics collected before the abort.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: OptimizationTrace,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for RunFailure {}

pub type DriverResult = std::result::Result<OptimizationTrace, Box<RunFailure>>;
