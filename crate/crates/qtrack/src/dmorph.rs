//! D-MORPH unitary-matrix tracking.
//!
//! The continuation variable `s` parameterizes a homotopy of control fields
//! `eps(s, t)`. A field increment `u = d eps/d s` produces, to first order,
//! `U(T) -> U(T) exp(i Delta ds)` where the Hermitian increment is pinned by
//! the constraint
//!
//! ```text
//! integral_0^T vec(mu(t)) u(t) dt = vec(Delta).
//! ```
//!
//! Solving the constraint through the pseudo-inverse of the dipole
//! correlation matrix `G = integral vec(mu) vec(mu)^T dt` gives the step
//!
//! ```text
//! u(t) = f_s(t) + vec(mu(t)) . G^+ (vec(Delta) - alpha),
//! alpha = integral vec(mu(t)) f_s(t) dt,
//! ```
//!
//! where the free function `f_s` moves the step within the constraint's null
//! space only. Geodesic targets, error correction, Hamiltonian morphing and
//! the fluence-minimizing free function are layered on top of this step.

use crate::error::{Error, Result};
use crate::gramian::{gramian_from_vectors, Gramian};
use crate::linalg::{
    eigh, expi_from_eigh, log_unitary, vec_hermitian, vec_hermitian_unchecked, CMat, Eigh, RVec,
};
use crate::landscape::{expectation, field_gradient};
use crate::qdyn::{
    dipole_trace, fluence, propagate_pair, ControlField, DensityMatrix, DipoleTrace, Observable,
    SystemModel, TimeGrid,
};
use crate::trace::{DriverResult, OptimizationTrace, RunFailure, StepRecord, StopReason};

/// Geodesic target track `Q(s) = U0 exp(i A s)` with `Q(1) = W`.
#[derive(Debug, Clone)]
pub struct GeodesicTrack {
    pub u0: CMat,
    pub w: CMat,
    /// Hermitian generator, eigen-angles on the principal branch.
    pub a: CMat,
    /// Uniform schedule s_k in [0, 1].
    pub schedule: Vec<f64>,
    /// Set when the endpoint logarithm hit the principal branch cut.
    pub branch_cut: bool,
    a_eig: Eigh,
}

impl GeodesicTrack {
    /// Track point Q(s).
    pub fn point(&self, s: f64) -> CMat {
        &self.u0 * expi_from_eigh(&self.a_eig, s)
    }

    /// Geodesic distance from U0 to W: ||A||_F.
    pub fn length(&self) -> f64 {
        self.a.norm()
    }
}

/// Shortest path between two unitaries with a uniform schedule of `p` points.
pub fn geodesic(u0: &CMat, w: &CMat, p: usize) -> Result<GeodesicTrack> {
    if p < 2 {
        return Err(Error::InvalidInput(format!(
            "geodesic schedule needs at least 2 points, got {p}"
        )));
    }
    if u0.nrows() != w.nrows() {
        return Err(Error::DimensionError(
            "geodesic endpoints have different dimensions".into(),
        ));
    }
    let log = log_unitary(&(u0.adjoint() * w))?;
    let a_eig = eigh(&log.hermitian)?;
    let schedule = (0..p).map(|k| k as f64 / (p - 1) as f64).collect();
    Ok(GeodesicTrack {
        u0: u0.clone(),
        w: w.clone(),
        a: log.hermitian,
        schedule,
        branch_cut: log.branch_cut,
        a_eig,
    })
}

/// Dipole correlation matrix `G = sum_j w_j vec(mu(t_j)) vec(mu(t_j))^T`
/// with trapezoid weights.
pub fn assemble_g(dip: &DipoleTrace) -> Result<Gramian> {
    let vecs: Vec<RVec> = dip.mus.iter().map(vec_hermitian_unchecked).collect();
    gramian_from_vectors(&vecs, &dip.grid.weights())
}

/// Inversion policy for the tracking steps.
#[derive(Debug, Clone, Copy)]
pub struct InversionOptions {
    /// Abort instead of degrading to the pseudo-inverse.
    pub strict: bool,
    /// Condition cap for strict mode.
    pub cond_cap: f64,
    /// Relative singular-value cutoff for the pseudo-inverse.
    pub pinv_cutoff: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            strict: false,
            cond_cap: 1e8,
            pinv_cutoff: 1e-10,
        }
    }
}

/// One D-MORPH field increment for a Hermitian target increment `Delta`.
///
/// The returned q-vector satisfies the discretized constraint
/// `sum_j w_j vec(mu(t_j)) u_j = vec(Delta)` exactly when G is
/// well-conditioned; `f_s` only moves the step within the null space.
pub fn dmorph_step(
    g: &Gramian,
    delta: &CMat,
    f_s: Option<&RVec>,
    dip: &DipoleTrace,
    opts: &InversionOptions,
) -> Result<RVec> {
    let q = dip.mus.len();
    if let Some(f) = f_s {
        if f.len() != q {
            return Err(Error::DimensionError(
                "free function length does not match grid".into(),
            ));
        }
    }
    if opts.strict {
        g.require_condition(opts.cond_cap, false)?;
    }
    let weights = dip.grid.weights();
    let vecs: Vec<RVec> = dip.mus.iter().map(vec_hermitian_unchecked).collect();
    let dim = vecs[0].len();

    let mut rhs = vec_hermitian(delta)?;
    if rhs.len() != dim {
        return Err(Error::DimensionError(
            "target increment dimension does not match dipole".into(),
        ));
    }
    if let Some(f) = f_s {
        let mut alpha = RVec::zeros(dim);
        for j in 0..q {
            alpha += vecs[j].scale(weights[j] * f[j]);
        }
        rhs -= alpha;
    }
    let y = g.pinv_apply(&rhs, opts.pinv_cutoff);
    let mut step = RVec::zeros(q);
    for j in 0..q {
        step[j] = vecs[j].dot(&y) + f_s.map_or(0.0, |f| f[j]);
    }
    Ok(step)
}

/// Combined error-correction increment: the Hermitian `Delta` with
/// `U_current exp(i Delta ds) = Q_next` exactly (up to the branch cut).
///
/// On track (`U_current = Q(s_k)`) this is the geodesic generator scaled by
/// the schedule ratio. Returns the increment and a branch-cut flag.
pub fn track_delta(q_next: &CMat, u_current: &CMat, ds: f64) -> Result<(CMat, bool)> {
    if !(ds > 0.0) {
        return Err(Error::InvalidInput(format!(
            "step size must be positive, got {ds}"
        )));
    }
    let log = log_unitary(&(u_current.adjoint() * q_next))?;
    Ok((log.hermitian.scale(1.0 / ds), log.branch_cut))
}

/// Morphing inhomogeneity `b(s, T) = -integral (vec(a1) eps + vec(a2)) dt`
/// with `a1 = U^dag(t) (dmu/ds) U(t)` and `a2 = dH0/ds`.
#[derive(Debug, Clone)]
pub struct MorphTerm {
    pub b: RVec,
}

/// Evaluate the morphing term for the current field row at parameter `s`.
/// Zero when morphing is disabled or the endpoints coincide.
pub fn morph_term(
    model: &SystemModel,
    field_row: &RVec,
    grid: &TimeGrid,
    s: f64,
) -> Result<MorphTerm> {
    let n = model.dim;
    let (dh0, dmu) = model.morph_rates();
    if dh0.norm() == 0.0 && dmu.norm() == 0.0 {
        return Ok(MorphTerm {
            b: RVec::zeros(n * n),
        });
    }
    let (h0_s, mu_s) = model.at(s);
    let traj = propagate_pair(&h0_s, &mu_s, field_row, grid)?;
    let weights = grid.weights();
    let mut acc = CMat::zeros(n, n);
    for j in 0..grid.q {
        let u = &traj.propagators[j];
        let m_prime = u.adjoint() * &dmu * u;
        acc += (m_prime.scale(field_row[j]) + &dh0).scale(weights[j]);
    }
    Ok(MorphTerm {
        b: vec_hermitian_unchecked(&acc).scale(-1.0),
    })
}

/// First-order compensation added to the tracking increment so that the
/// propagator stays on track while the Hamiltonian morphs:
/// `C = integral U^dag(t) (dH0/ds) U(t) dt - integral U^dag(t) (dmu/ds) U(t) eps(t) dt`.
pub fn morph_compensation(
    model: &SystemModel,
    traj: &crate::qdyn::PropagatorTrajectory,
    field_row: &RVec,
) -> CMat {
    let n = model.dim;
    let (dh0, dmu) = model.morph_rates();
    let mut acc = CMat::zeros(n, n);
    if dh0.norm() == 0.0 && dmu.norm() == 0.0 {
        return acc;
    }
    let weights = traj.grid.weights();
    for j in 0..traj.grid.q {
        let u = &traj.propagators[j];
        let h_prime = u.adjoint() * &dh0 * u;
        let m_prime = u.adjoint() * &dmu * u;
        acc += (h_prime - m_prime.scale(field_row[j])).scale(weights[j]);
    }
    acc
}

/// Fluence-minimizing free function `f(s, t) = -eps(s, t) W(t) / ds`.
///
/// With this choice the null-space component of the field is purged each
/// step while the tracking constraint is untouched.
pub fn fluence_free_function(field_row: &RVec, w_t: &RVec, ds: f64) -> Result<RVec> {
    if field_row.len() != w_t.len() {
        return Err(Error::DimensionError(
            "weight function length does not match field".into(),
        ));
    }
    if w_t.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidInput(
            "fluence weight function must be nonnegative".into(),
        ));
    }
    if !(ds > 0.0) {
        return Err(Error::InvalidInput(format!(
            "step size must be positive, got {ds}"
        )));
    }
    Ok(RVec::from_fn(field_row.len(), |j, _| {
        -field_row[j] * w_t[j] / ds
    }))
}

/// Off-diagonal mass ratio of the dipole autocorrelation kernel
/// `K(t_j, t_l) = Tr(mu(t_j) mu(t_l))`: 0 for a perfectly diagonal
/// (Dirac-like) kernel, approaching 1 for a constant kernel.
pub fn dirac_kernel_diagnostic(dip: &DipoleTrace) -> Result<f64> {
    let vecs: Vec<RVec> = dip.mus.iter().map(vec_hermitian_unchecked).collect();
    let q = vecs.len();
    let mut diag = 0.0f64;
    let mut total = 0.0f64;
    for j in 0..q {
        for l in 0..q {
            let k = vecs[j].dot(&vecs[l]);
            total += k * k;
            if j == l {
                diag += k * k;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::InvalidInput("zero dipole kernel".into()));
    }
    Ok(1.0 - diag / total)
}

/// Error-correction policy for `run_unitary_tracking`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionMode {
    /// Correction and next step in one increment:
    /// `Delta = log(U^dag Q(s_{k+1})) / (i ds)`.
    Combined,
    /// Geodesic increment plus a separate correction toward Q(s_k).
    Separate,
    /// Pure feed-forward geodesic increment; errors accumulate.
    None,
}

/// Options for the unitary tracking driver.
#[derive(Debug, Clone)]
pub struct TrackingOptions {
    pub correction: CorrectionMode,
    pub inversion: InversionOptions,
    /// Fluence-minimization weight W(t); `None` leaves f_s = 0.
    pub fluence_weight: Option<RVec>,
    /// Morph the Hamiltonian along the schedule (requires endpoints).
    pub morphing: bool,
    /// Correction-only steps appended after the schedule: the target is held
    /// at W and the free function is dropped, contracting any residual
    /// tracking error without touching the fluence budget. Useful for
    /// matching final errors between fluence-minimizing and plain runs.
    pub polish_steps: usize,
}

impl Default for TrackingOptions {
    fn default() -> Self {
        Self {
            correction: CorrectionMode::Combined,
            inversion: InversionOptions::default(),
            fluence_weight: None,
            morphing: false,
            polish_steps: 0,
        }
    }
}

/// Track a geodesic in U(N) with per-step D-MORPH field updates.
///
/// Per schedule point: propagate, assemble G, form the tracking increment
/// (with the configured error correction, morphing compensation and free
/// function), solve for the field step and update the field with explicit
/// Euler. The trace records the G condition number and the tracking error
/// `||U(T, s_k) - Q(s_k)||_F` at every step.
pub fn run_unitary_tracking(
    model: &SystemModel,
    field0: &ControlField,
    track: &GeodesicTrack,
    rho: &DensityMatrix,
    theta: &Observable,
    opts: &TrackingOptions,
) -> DriverResult {
    let grid = &field0.time_grid;
    let p = track.schedule.len();
    let mut eps = field0.rows()[0].clone();

    // Planned record points: the geodesic schedule, then the optional
    // correction-only polish tail holding the target at W.
    let mut points: Vec<(f64, CMat, bool)> = track
        .schedule
        .iter()
        .map(|&s| (s, track.point(s), false))
        .collect();
    let ds_last = track.schedule[p - 1] - track.schedule[p - 2];
    let s_end = track.schedule[p - 1];
    for j in 1..=opts.polish_steps {
        points.push((s_end + j as f64 * ds_last, track.w.clone(), true));
    }

    let mut records: Vec<StepRecord> = Vec::with_capacity(points.len());
    let mut branch_warnings = if track.branch_cut { 1 } else { 0 };
    let mut pathlength = 0.0f64;
    let mut prev_u: Option<CMat> = None;

    let fail = |error: Error, records: Vec<StepRecord>, warnings: usize, field: RVec| {
        Err(Box::new(RunFailure {
            error,
            partial: OptimizationTrace {
                records,
                stop: StopReason::StepLimit,
                branch_cut_warnings: warnings,
                final_field: field,
            },
        }))
    };

    for k in 0..points.len() {
        let (s_k, ref q_k, _) = points[k];
        let (h0_s, mu_s) = if opts.morphing {
            model.at(s_k.min(s_end))
        } else {
            (model.h0.clone(), model.mu.clone())
        };
        let traj = match propagate_pair(&h0_s, &mu_s, &eps, grid) {
            Ok(t) => t,
            Err(e) => return fail(e, records, branch_warnings, eps.clone()),
        };
        let dip = match dipole_trace(&traj, &mu_s) {
            Ok(d) => d,
            Err(e) => return fail(e, records, branch_warnings, eps.clone()),
        };
        let u_final = traj.final_unitary().clone();

        let g = match assemble_g(&dip) {
            Ok(g) => g,
            Err(e) => return fail(e, records, branch_warnings, eps.clone()),
        };
        let cond = match g.condition() {
            Ok(c) => c,
            Err(e) => return fail(e, records, branch_warnings, eps.clone()),
        };

        if let Some(prev) = &prev_u {
            match log_unitary(&(prev.adjoint() * &u_final)) {
                Ok(log) => {
                    pathlength += log.hermitian.norm();
                    if log.branch_cut {
                        branch_warnings += 1;
                    }
                }
                Err(e) => return fail(e, records, branch_warnings, eps.clone()),
            }
        }

        let track_err = (&u_final - q_k).norm();
        let phi = match expectation(&u_final, rho, theta) {
            Ok(v) => v,
            Err(e) => return fail(e, records, branch_warnings, eps.clone()),
        };
        let grad_norm = match field_gradient(&traj, &dip, rho, theta) {
            Ok(gf) => gf.l2_norm(grid),
            Err(e) => return fail(e, records, branch_warnings, eps.clone()),
        };
        records.push(StepRecord {
            s: s_k,
            phi,
            grad_norm,
            fluence: fluence(&eps, grid),
            condition: Some(cond.as_f64()),
            track_err: Some(track_err),
            u_final: u_final.clone(),
            pathlength_cum: pathlength,
        });
        prev_u = Some(u_final.clone());

        if k + 1 == points.len() {
            break;
        }
        let (s_next, ref q_next, polishing) = points[k + 1];
        let ds = s_next - s_k;

        let delta = if polishing {
            // Pure error correction toward the held target.
            match track_delta(q_next, &u_final, ds) {
                Ok((d, cut)) => {
                    if cut {
                        branch_warnings += 1;
                    }
                    d
                }
                Err(e) => return fail(e, records, branch_warnings, eps.clone()),
            }
        } else {
            match opts.correction {
                CorrectionMode::Combined => match track_delta(q_next, &u_final, ds) {
                    Ok((d, cut)) => {
                        if cut {
                            branch_warnings += 1;
                        }
                        d
                    }
                    Err(e) => return fail(e, records, branch_warnings, eps.clone()),
                },
                CorrectionMode::Separate => match track_delta(q_k, &u_final, ds) {
                    Ok((c, cut)) => {
                        if cut {
                            branch_warnings += 1;
                        }
                        &track.a + c
                    }
                    Err(e) => return fail(e, records, branch_warnings, eps.clone()),
                },
                CorrectionMode::None => track.a.clone(),
            }
        };
        let delta_eff = if opts.morphing && !polishing {
            &delta + morph_compensation(model, &traj, &eps)
        } else {
            delta
        };

        let f_s = match &opts.fluence_weight {
            Some(w) if !polishing => match fluence_free_function(&eps, w, ds) {
                Ok(f) => Some(f),
                Err(e) => return fail(e, records, branch_warnings, eps.clone()),
            },
            _ => None,
        };

        let step = match dmorph_step(&g, &delta_eff, f_s.as_ref(), &dip, &opts.inversion) {
            Ok(u) => u,
            Err(e) => return fail(e, records, branch_warnings, eps.clone()),
        };
        eps += step.scale(ds);
    }

    Ok(OptimizationTrace {
        records,
        stop: StopReason::TrackCompleted,
        branch_cut_warnings: branch_warnings,
        final_field: eps,
    })
}
