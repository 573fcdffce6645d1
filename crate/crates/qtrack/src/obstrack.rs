//! Measurement-assisted tracking of orthogonal observable expectation values.
//!
//! Instead of reconstructing the full propagator, the algorithm follows the
//! m-dimensional vector `v_i(s) = Tr(rho(T, s) Theta'_i)` of expectation
//! values of an orthonormal observable set along targets `w(s)` derived from
//! a geodesic in U(N). The field step solves
//!
//! ```text
//! d eps/d s = f_s + [beta (w - v) + dw/ds - a(s)]^T Gamma^+ (dv/d eps),
//! Gamma_ij = integral (dv_i/d eps)(dv_j/d eps) dt,
//! ```
//!
//! which reduces for m = 1 to the scalar expectation-value tracking equation
//! with denominator `gamma(s) = integral a0(t)^2 dt`. Near critical points
//! `gamma -> 0` and scalar tracking becomes singular; the m x m Gamma is
//! generically far better conditioned than the full N^2 x N^2 dipole
//! correlation matrix.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gramian::{gramian_from_vectors, Gramian};
use crate::landscape::{expectation, field_gradient, gradient_row};
use crate::linalg::{check_hermitian, vec_hermitian_unchecked, CMat, RVec};
use crate::dmorph::{fluence_free_function, GeodesicTrack, InversionOptions};
use crate::qdyn::{
    dipole_trace, fluence, propagate, ControlField, DensityMatrix, DipoleTrace, Observable,
    PropagatorTrajectory,
};
use crate::qdyn::TimeGrid;
use crate::trace::{DriverResult, OptimizationTrace, RunFailure, StepRecord, StopReason};

/// Orthonormal observable basis built from a raw (possibly dependent) set.
///
/// `ortho` spans the raw set with `Tr(Theta'_i Theta'_j) = delta_ij`;
/// `coeffs[(i, k)]` reconstructs `Theta_k = sum_i coeffs[(i, k)] Theta'_i`.
#[derive(Debug, Clone)]
pub struct ObservableBasis {
    pub raw: Vec<CMat>,
    pub ortho: Vec<CMat>,
    pub coeffs: crate::linalg::RMat,
}

impl ObservableBasis {
    pub fn len(&self) -> usize {
        self.ortho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ortho.is_empty()
    }
}

/// Modified Gram-Schmidt in the Hermitian vectorization; operators whose
/// residual norm falls below 1e-10 are dropped as dependent.
pub fn orthogonalize(raw: &[CMat]) -> Result<ObservableBasis> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("no observables supplied".into()));
    }
    let n_dim = raw[0].nrows();
    for (k, m) in raw.iter().enumerate() {
        check_hermitian(m, 1e-10, &format!("observable {k}"))?;
        if m.nrows() != n_dim {
            return Err(Error::DimensionError(
                "observables have mixed dimensions".into(),
            ));
        }
    }
    let mut ortho_vecs: Vec<RVec> = Vec::new();
    for m in raw {
        let mut v = vec_hermitian_unchecked(m);
        for o in &ortho_vecs {
            let overlap = o.dot(&v);
            v -= o.scale(overlap);
        }
        let norm = v.norm();
        if norm > 1e-10 {
            ortho_vecs.push(v.scale(1.0 / norm));
        }
    }
    if ortho_vecs.is_empty() {
        return Err(Error::InvalidInput(
            "all observables are zero or dependent".into(),
        ));
    }
    let m = ortho_vecs.len();
    let mut coeffs = crate::linalg::RMat::zeros(m, raw.len());
    for (k, op) in raw.iter().enumerate() {
        let v = vec_hermitian_unchecked(op);
        for (i, o) in ortho_vecs.iter().enumerate() {
            coeffs[(i, k)] = o.dot(&v);
        }
    }
    let ortho = ortho_vecs
        .iter()
        .map(|v| crate::linalg::unvec_hermitian(v).expect("orthonormal vector unvec"))
        .collect();
    Ok(ObservableBasis {
        raw: raw.to_vec(),
        ortho,
        coeffs,
    })
}

/// Default tracking basis: the objective observable first, padded with
/// traceless orthonormal Hermitian operators (off-diagonal pairs, then
/// adjacent diagonal differences) until `m` linearly independent operators
/// are collected.
///
/// The identity direction is deliberately excluded: its expectation value
/// responds to no control, so including it would only make Gamma singular.
/// For a qubit with a traceless objective this produces the Pauli basis.
pub fn default_basis(theta: &Observable, m: usize) -> Result<ObservableBasis> {
    let n = theta.matrix.nrows();
    if m == 0 || m > n * n {
        return Err(Error::InvalidInput(format!(
            "basis size {m} out of range for dimension {n}"
        )));
    }
    let mut candidates: Vec<CMat> = Vec::with_capacity(n * n);
    let sqrt2 = std::f64::consts::SQRT_2;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut re = CMat::zeros(n, n);
            re[(i, j)] = Complex64::new(1.0 / sqrt2, 0.0);
            re[(j, i)] = Complex64::new(1.0 / sqrt2, 0.0);
            candidates.push(re);
            let mut im = CMat::zeros(n, n);
            im[(i, j)] = Complex64::new(0.0, 1.0 / sqrt2);
            im[(j, i)] = Complex64::new(0.0, -1.0 / sqrt2);
            candidates.push(im);
        }
    }
    for i in 0..n - 1 {
        let mut d = CMat::zeros(n, n);
        d[(i, i)] = Complex64::new(1.0 / sqrt2, 0.0);
        d[(i + 1, i + 1)] = Complex64::new(-1.0 / sqrt2, 0.0);
        candidates.push(d);
    }
    let mut raw = vec![theta.matrix.clone()];
    let mut next = candidates.into_iter();
    loop {
        let basis = orthogonalize(&raw)?;
        if basis.len() >= m {
            return Ok(basis);
        }
        match next.next() {
            Some(cand) => raw.push(cand),
            None => return Ok(basis),
        }
    }
}

/// Expectation values of the orthonormal basis: `v_i = Re Tr(U rho U^dag Theta'_i)`.
pub fn observable_vector(u: &CMat, rho: &DensityMatrix, basis: &ObservableBasis) -> Result<RVec> {
    if u.nrows() != rho.matrix.nrows() {
        return Err(Error::DimensionError(
            "state dimension does not match propagator".into(),
        ));
    }
    let rho_t = u * &rho.matrix * u.adjoint();
    Ok(RVec::from_iterator(
        basis.len(),
        basis
            .ortho
            .iter()
            .map(|th| crate::linalg::trace_inner(&rho_t, th)),
    ))
}

/// Field gradients of each basis expectation value: row i is the gradient of
/// `v_i`, built with the same exact per-step insertion as `field_gradient`.
pub fn grad_observable_vector(
    traj: &PropagatorTrajectory,
    dip: &DipoleTrace,
    rho: &DensityMatrix,
    basis: &ObservableBasis,
) -> Result<Vec<RVec>> {
    if dip.grid != traj.grid {
        return Err(Error::DimensionError(
            "dipole trace and trajectory come from different grids".into(),
        ));
    }
    let u_final = traj.final_unitary();
    let mut rows = Vec::with_capacity(basis.len());
    for th in &basis.ortho {
        let th_t = u_final.adjoint() * th * u_final;
        let kernel = (&(&rho.matrix * &th_t) - &(th_t * &rho.matrix))
            .map(|z| z * Complex64::new(0.0, 1.0));
        rows.push(gradient_row(traj, &dip.mu, &kernel));
    }
    Ok(rows)
}

/// Observable correlation matrix `Gamma_ij = integral (dv_i)(dv_j) dt` with
/// trapezoid weights.
pub fn assemble_gamma(grad_v: &[RVec], grid: &TimeGrid) -> Result<Gramian> {
    if grad_v.is_empty() {
        return Err(Error::InvalidInput("no gradient rows".into()));
    }
    let m = grad_v.len();
    let q = grid.q;
    for row in grad_v {
        if row.len() != q {
            return Err(Error::DimensionError(
                "gradient row length does not match grid".into(),
            ));
        }
    }
    // Columns across rows at each time sample.
    let cols: Vec<RVec> = (0..q)
        .map(|j| RVec::from_iterator(m, grad_v.iter().map(|r| r[j])))
        .collect();
    gramian_from_vectors(&cols, &grid.weights())
}

/// Target tracks for the observable vector along the algorithmic schedule.
#[derive(Debug, Clone)]
pub struct ObservableTrackSpec {
    pub schedule: Vec<f64>,
    pub targets: ObservableTargets,
    /// Error-correction gain; defaults to 1/ds (and is clipped there).
    pub beta: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum ObservableTargets {
    /// Vector targets w(s_k) with their s-derivatives.
    Vector { w: Vec<RVec>, dw: Vec<RVec> },
    /// Scalar expectation-value targets P(s_k) with their s-derivatives.
    Scalar { p: Vec<f64>, dp: Vec<f64> },
}

impl ObservableTrackSpec {
    /// Linear scalar ramp from `p0` to `p1` over the schedule.
    pub fn scalar_ramp(p0: f64, p1: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidInput("ramp needs at least 2 points".into()));
        }
        let schedule: Vec<f64> = (0..steps).map(|k| k as f64 / (steps - 1) as f64).collect();
        let p = schedule.iter().map(|&s| p0 + (p1 - p0) * s).collect();
        let dp = vec![p1 - p0; steps];
        Ok(Self {
            schedule,
            targets: ObservableTargets::Scalar { p, dp },
            beta: None,
        })
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    fn effective_beta(&self, ds: f64) -> f64 {
        let cap = 1.0 / ds;
        self.beta.unwrap_or(cap).min(cap)
    }
}

/// Vector targets consistent with a geodesic track in U(N):
/// `w_i(s_k) = Re Tr(Q(s_k) rho Q(s_k)^dag Theta'_i)` and the analytic
/// derivative through `dQ/ds = Q (iA)`.
pub fn targets_from_geodesic(
    track: &GeodesicTrack,
    rho: &DensityMatrix,
    basis: &ObservableBasis,
) -> Result<ObservableTrackSpec> {
    let mut w = Vec::with_capacity(track.schedule.len());
    let mut dw = Vec::with_capacity(track.schedule.len());
    let comm = &(&track.a * &rho.matrix) - &(&rho.matrix * &track.a);
    let d_rho_gen = comm.map(|z| z * Complex64::new(0.0, 1.0));
    for &s in &track.schedule {
        let qs = track.point(s);
        let rho_s = &qs * &rho.matrix * qs.adjoint();
        let drho_s = &qs * &d_rho_gen * qs.adjoint();
        w.push(RVec::from_iterator(
            basis.len(),
            basis
                .ortho
                .iter()
                .map(|th| crate::linalg::trace_inner(&rho_s, th)),
        ));
        dw.push(RVec::from_iterator(
            basis.len(),
            basis
                .ortho
                .iter()
                .map(|th| crate::linalg::trace_inner(&drho_s, th)),
        ));
    }
    Ok(ObservableTrackSpec {
        schedule: track.schedule.clone(),
        targets: ObservableTargets::Vector { w, dw },
        beta: None,
    })
}

/// Scalar expectation-value track of the objective observable along a
/// geodesic.
pub fn scalar_targets_from_geodesic(
    track: &GeodesicTrack,
    rho: &DensityMatrix,
    theta: &Observable,
) -> Result<ObservableTrackSpec> {
    let comm = &(&track.a * &rho.matrix) - &(&rho.matrix * &track.a);
    let d_rho_gen = comm.map(|z| z * Complex64::new(0.0, 1.0));
    let mut p = Vec::with_capacity(track.schedule.len());
    let mut dp = Vec::with_capacity(track.schedule.len());
    for &s in &track.schedule {
        let qs = track.point(s);
        p.push(expectation(&qs, rho, theta)?);
        let drho_s = &qs * &d_rho_gen * qs.adjoint();
        dp.push(crate::linalg::trace_inner(&drho_s, &theta.matrix));
    }
    Ok(ObservableTrackSpec {
        schedule: track.schedule.clone(),
        targets: ObservableTargets::Scalar { p, dp },
        beta: None,
    })
}

/// One vector-tracking field increment.
///
/// Satisfies `integral grad_v . step dt = beta (w_next - v_now) + dw_ds`
/// when Gamma is well-conditioned; `f_s` only moves within the null space.
#[allow(clippy::too_many_arguments)]
pub fn vector_track_step(
    gamma: &Gramian,
    grad_v: &[RVec],
    w_next: &RVec,
    v_now: &RVec,
    dw_ds: &RVec,
    beta: f64,
    f_s: Option<&RVec>,
    grid: &TimeGrid,
    opts: &InversionOptions,
) -> Result<RVec> {
    let m = grad_v.len();
    if w_next.len() != m || v_now.len() != m || dw_ds.len() != m {
        return Err(Error::DimensionError(
            "target/measurement dimension does not match gradient rows".into(),
        ));
    }
    if opts.strict {
        gamma.require_condition(opts.cond_cap, true)?;
    }
    let weights = grid.weights();
    let q = grid.q;
    let mut rhs = RVec::from_iterator(
        m,
        (0..m).map(|i| beta * (w_next[i] - v_now[i]) + dw_ds[i]),
    );
    if let Some(f) = f_s {
        check_free_len(f, q)?;
        for i in 0..m {
            let a_i: f64 = (0..q).map(|j| weights[j] * grad_v[i][j] * f[j]).sum();
            rhs[i] -= a_i;
        }
    }
    let y = gamma.pinv_apply(&rhs, opts.pinv_cutoff);
    let mut step = RVec::zeros(q);
    for j in 0..q {
        let mut acc = f_s.map_or(0.0, |f| f[j]);
        for i in 0..m {
            acc += y[i] * grad_v[i][j];
        }
        step[j] = acc;
    }
    Ok(step)
}

fn check_free_len(f: &RVec, q: usize) -> Result<()> {
    if f.len() != q {
        return Err(Error::DimensionError(
            "free function length does not match grid".into(),
        ));
    }
    Ok(())
}

/// Scalar expectation-value tracking step:
/// `d eps/ds = f + [beta (P - phi) + dP/ds - integral a0 f dt] / gamma * a0`.
#[allow(clippy::too_many_arguments)]
pub fn scalar_track_step(
    gamma_s: f64,
    a0: &RVec,
    p_next: f64,
    phi_now: f64,
    dp_ds: f64,
    beta: f64,
    f_s: Option<&RVec>,
    grid: &TimeGrid,
) -> Result<RVec> {
    if gamma_s <= 1e-12 {
        return Err(Error::NearCriticalSingularity(gamma_s));
    }
    let weights = grid.weights();
    let mut num = beta * (p_next - phi_now) + dp_ds;
    if let Some(f) = f_s {
        check_free_len(f, grid.q)?;
        let overlap: f64 = (0..grid.q).map(|j| weights[j] * a0[j] * f[j]).sum();
        num -= overlap;
    }
    let scale = num / gamma_s;
    Ok(RVec::from_fn(grid.q, |j, _| {
        f_s.map_or(0.0, |f| f[j]) + scale * a0[j]
    }))
}

/// Dimension bound mode for the degenerate manifold M(s) of unitaries
/// producing a given expectation value.
#[derive(Debug, Clone)]
pub enum ManifoldDimMode {
    /// Maximal dimension: `sum n_i^2 + sum m_j^2 - N`.
    Max,
    /// Permutation-aligned overlap counts k[i][j] between the i-th rho block
    /// and the j-th theta block: `sum n_i^2 + sum m_j^2 - sum k_ij^2`.
    PermutationAligned(Vec<Vec<usize>>),
}

/// Dimension of the degenerate manifold for given eigenvalue multiplicity
/// partitions of rho and Theta.
pub fn degenerate_manifold_dim(
    rho_mults: &[usize],
    theta_mults: &[usize],
    mode: &ManifoldDimMode,
) -> Result<usize> {
    let n: usize = rho_mults.iter().sum();
    let n_theta: usize = theta_mults.iter().sum();
    if n == 0 || n != n_theta {
        return Err(Error::InvalidSpectrum(format!(
            "multiplicity partitions disagree: {n} vs {n_theta}"
        )));
    }
    if rho_mults.iter().chain(theta_mults.iter()).any(|&m| m == 0) {
        return Err(Error::InvalidSpectrum("zero multiplicity".into()));
    }
    let sum_sq =
        |v: &[usize]| -> usize { v.iter().map(|&x| x * x).sum() };
    let base = sum_sq(rho_mults) + sum_sq(theta_mults);
    match mode {
        ManifoldDimMode::Max => Ok(base - n),
        ManifoldDimMode::PermutationAligned(k) => {
            if k.len() != rho_mults.len() {
                return Err(Error::InvalidSpectrum(
                    "overlap matrix row count mismatch".into(),
                ));
            }
            let mut col_sums = vec![0usize; theta_mults.len()];
            let mut k_sq = 0usize;
            for (i, row) in k.iter().enumerate() {
                if row.len() != theta_mults.len() {
                    return Err(Error::InvalidSpectrum(
                        "overlap matrix column count mismatch".into(),
                    ));
                }
                let row_sum: usize = row.iter().sum();
                if row_sum != rho_mults[i] {
                    return Err(Error::InvalidSpectrum(format!(
                        "overlap row {i} sums to {row_sum}, expected {}",
                        rho_mults[i]
                    )));
                }
                for (j, &kij) in row.iter().enumerate() {
                    col_sums[j] += kij;
                    k_sq += kij * kij;
                }
            }
            for (j, &cs) in col_sums.iter().enumerate() {
                if cs != theta_mults[j] {
                    return Err(Error::InvalidSpectrum(format!(
                        "overlap column {j} sums to {cs}, expected {}",
                        theta_mults[j]
                    )));
                }
            }
            Ok(base - k_sq)
        }
    }
}

/// Options for the observable tracking driver.
#[derive(Debug, Clone)]
pub struct ObsTrackingOptions {
    pub inversion: InversionOptions,
    pub fluence_weight: Option<RVec>,
    /// Classical RK4 in s (targets Taylor-interpolated within each step);
    /// explicit Euler otherwise.
    pub use_rk4: bool,
}

impl Default for ObsTrackingOptions {
    fn default() -> Self {
        Self {
            inversion: InversionOptions::default(),
            fluence_weight: None,
            use_rk4: false,
        }
    }
}

struct ObsEval {
    phi: f64,
    grad_norm: f64,
    v: RVec,
    condition: f64,
    step_rhs_ready: ObsStepData,
    u_final: CMat,
}

enum ObsStepData {
    Vector { gamma: Gramian, grad_v: Vec<RVec> },
    Scalar { gamma_s: f64, a0: RVec },
}

fn eval_observable(
    model: &crate::qdyn::SystemModel,
    eps: &RVec,
    grid: &TimeGrid,
    rho: &DensityMatrix,
    theta: &Observable,
    basis: &ObservableBasis,
    scalar: bool,
) -> Result<ObsEval> {
    let traj = propagate(model, eps, grid)?;
    let dip = dipole_trace(&traj, &model.mu)?;
    let u_final = traj.final_unitary().clone();
    let phi = expectation(&u_final, rho, theta)?;
    let objective_grad = field_gradient(&traj, &dip, rho, theta)?;
    let grad_norm = objective_grad.l2_norm(grid);
    if scalar {
        let a0 = objective_grad.a0;
        let weights = grid.weights();
        let gamma_s: f64 = (0..grid.q).map(|j| weights[j] * a0[j] * a0[j]).sum();
        Ok(ObsEval {
            phi,
            grad_norm,
            v: RVec::from_element(1, phi),
            condition: 1.0,
            step_rhs_ready: ObsStepData::Scalar { gamma_s, a0 },
            u_final,
        })
    } else {
        let grad_v = grad_observable_vector(&traj, &dip, rho, basis)?;
        let gamma = assemble_gamma(&grad_v, grid)?;
        let condition = gamma.condition()?.as_f64();
        let v = observable_vector(&u_final, rho, basis)?;
        Ok(ObsEval {
            phi,
            grad_norm,
            v,
            condition,
            step_rhs_ready: ObsStepData::Vector { gamma, grad_v },
            u_final,
        })
    }
}

/// Track observable targets along the algorithmic schedule.
///
/// Vector mode follows `w(s)` over the supplied basis; scalar mode follows
/// `P(s)` for the objective observable. The trace records the tracking error
/// (`||w - v||` or `|P - phi|`), the Gamma condition number, the objective
/// and the fluence at every schedule point.
pub fn run_observable_tracking(
    model: &crate::qdyn::SystemModel,
    field0: &ControlField,
    spec: &ObservableTrackSpec,
    basis: &ObservableBasis,
    rho: &DensityMatrix,
    theta: &Observable,
    opts: &ObsTrackingOptions,
) -> DriverResult {
    let grid = &field0.time_grid;
    let p = spec.schedule.len();
    let scalar = matches!(spec.targets, ObservableTargets::Scalar { .. });
    let mut eps = field0.rows()[0].clone();

    let mut records: Vec<StepRecord> = Vec::with_capacity(p);
    let mut branch_warnings = 0usize;
    let mut pathlength = 0.0f64;
    let mut prev_u: Option<CMat> = None;

    macro_rules! try_or_fail {
        ($expr:expr, $records:expr, $warnings:expr) => {
            match $expr {
                Ok(v) => v,
                Err(e) => {
                    return Err(Box::new(RunFailure {
                        error: e,
                        partial: OptimizationTrace {
                            records: $records,
                            stop: StopReason::StepLimit,
                            branch_cut_warnings: $warnings,
                            final_field: eps.clone(),
                        },
                    }))
                }
            }
        };
    }

    // Target (value, derivative) at schedule index k, as m-vectors.
    let target_at = |k: usize| -> (RVec, RVec) {
        match &spec.targets {
            ObservableTargets::Vector { w, dw } => (w[k].clone(), dw[k].clone()),
            ObservableTargets::Scalar { p, dp } => (
                RVec::from_element(1, p[k]),
                RVec::from_element(1, dp[k]),
            ),
        }
    };

    for k in 0..p {
        let s_k = spec.schedule[k];
        let eval = try_or_fail!(
            eval_observable(model, &eps, grid, rho, theta, basis, scalar),
            records,
            branch_warnings
        );

        if let Some(prev) = &prev_u {
            let log = try_or_fail!(
                crate::linalg::log_unitary(&(prev.adjoint() * &eval.u_final)),
                records,
                branch_warnings
            );
            pathlength += log.hermitian.norm();
            if log.branch_cut {
                branch_warnings += 1;
            }
        }

        let (w_k, _) = target_at(k);
        let track_err = (&w_k - &eval.v).norm();
        records.push(StepRecord {
            s: s_k,
            phi: eval.phi,
            grad_norm: eval.grad_norm,
            fluence: fluence(&eps, grid),
            condition: Some(eval.condition),
            track_err: Some(track_err),
            u_final: eval.u_final.clone(),
            pathlength_cum: pathlength,
        });
        prev_u = Some(eval.u_final.clone());

        if k + 1 == p {
            break;
        }
        let ds = spec.schedule[k + 1] - spec.schedule[k];
        let beta = spec.effective_beta(ds);
        let (w_next, dw_next) = target_at(k + 1);
        let f_s = match &opts.fluence_weight {
            Some(w) => Some(try_or_fail!(
                fluence_free_function(&eps, w, ds),
                records,
                branch_warnings
            )),
            None => None,
        };

        let step_from = |eval: &ObsEval, w_tgt: &RVec, dw_tgt: &RVec| -> Result<RVec> {
            match &eval.step_rhs_ready {
                ObsStepData::Vector { gamma, grad_v } => vector_track_step(
                    gamma,
                    grad_v,
                    w_tgt,
                    &eval.v,
                    dw_tgt,
                    beta,
                    f_s.as_ref(),
                    grid,
                    &opts.inversion,
                ),
                ObsStepData::Scalar { gamma_s, a0 } => scalar_track_step(
                    *gamma_s,
                    a0,
                    w_tgt[0],
                    eval.v[0],
                    dw_tgt[0],
                    beta,
                    f_s.as_ref(),
                    grid,
                ),
            }
        };

        if opts.use_rk4 {
            // Stage targets Taylor-interpolated from the segment endpoints.
            let (w_k2, dw_k2) = {
                let (w_kk, dw_kk) = target_at(k);
                (&w_kk + dw_kk.scale(0.5 * ds), dw_kk)
            };
            let k1 = try_or_fail!(step_from(&eval, &w_k2, &dw_k2), records, branch_warnings);
            let e2 = try_or_fail!(
                eval_observable(model, &(&eps + k1.scale(0.5 * ds)), grid, rho, theta, basis, scalar),
                records,
                branch_warnings
            );
            let k2 = try_or_fail!(step_from(&e2, &w_k2, &dw_k2), records, branch_warnings);
            let e3 = try_or_fail!(
                eval_observable(model, &(&eps + k2.scale(0.5 * ds)), grid, rho, theta, basis, scalar),
                records,
                branch_warnings
            );
            let k3 = try_or_fail!(step_from(&e3, &w_k2, &dw_k2), records, branch_warnings);
            let e4 = try_or_fail!(
                eval_observable(model, &(&eps + k3.scale(ds)), grid, rho, theta, basis, scalar),
                records,
                branch_warnings
            );
            let k4 = try_or_fail!(
                step_from(&e4, &w_next, &dw_next),
                records,
                branch_warnings
            );
            eps += (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(ds / 6.0);
        } else {
            let step = try_or_fail!(
                step_from(&eval, &w_next, &dw_next),
                records,
                branch_warnings
            );
            eps += step.scale(ds);
        }
    }

    Ok(OptimizationTrace {
        records,
        stop: StopReason::TrackCompleted,
        branch_cut_warnings: branch_warnings,
        final_field: eps,
    })
}
