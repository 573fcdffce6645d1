//! Observable-expectation landscape: objective, gradients, gradient flows,
//! double-bracket dynamics and critical-manifold enumeration.
//!
//! The objective throughout is `Phi(U) = Tr(U rho U^dag Theta)`. Its gradient
//! on the field domain is
//!
//! ```text
//! a0(t) = i Tr([Theta(T), mu(t)] rho) = <mu(t), i[rho, Theta(T)]>,
//! Theta(T) = U(T)^dag Theta U(T),
//! ```
//!
//! discretized with the exact per-step Frechet insertion (see
//! [`PropagatorTrajectory::step_averaged_dipole`]) so that it matches central
//! finite differences of the discretized objective to quadrature precision.
//! The gradient on U(N) is `grad Phi = [Theta, U rho U^dag] U`, an ascent
//! direction whose isospectral projection is the double-bracket flow
//! `d rho/ds = [rho, [rho, Theta]]`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{
    eigh, log_unitary, trace_inner, CMat, CVec, RVec,
};
use crate::qdyn::{
    dipole_trace, fluence, propagate, ControlField, DensityMatrix, DipoleTrace, Observable,
    PropagatorTrajectory, TimeGrid,
};
use crate::trace::{DriverResult, OptimizationTrace, RunFailure, StepRecord, StopReason};

/// Field-domain gradient a0(t_j) = dPhi/d eps(t_j).
#[derive(Debug, Clone)]
pub struct GradientField {
    pub a0: RVec,
}

impl GradientField {
    /// L2([0,T]) norm, sqrt(integral a0^2 dt).
    pub fn l2_norm(&self, grid: &TimeGrid) -> f64 {
        let w = grid.weights();
        self.a0
            .iter()
            .zip(w.iter())
            .map(|(a, w)| w * a * a)
            .sum::<f64>()
            .sqrt()
    }
}

/// Expectation value Re Tr(U rho U^dag Theta).
pub fn expectation(u: &CMat, rho: &DensityMatrix, theta: &Observable) -> Result<f64> {
    if u.nrows() != rho.matrix.nrows() || u.nrows() != theta.matrix.nrows() {
        return Err(Error::DimensionError(format!(
            "expectation dimensions: U {}x{}, rho {}, theta {}",
            u.nrows(),
            u.ncols(),
            rho.matrix.nrows(),
            theta.matrix.nrows()
        )));
    }
    let val = (u * &rho.matrix * u.adjoint() * &theta.matrix).trace();
    if val.im.abs() > 1e-10 {
        return Err(Error::NumericalFailure(format!(
            "expectation has imaginary residue {:e}",
            val.im
        )));
    }
    Ok(val.re)
}

/// The Hermitian kernel K = i[rho, Theta(T)]; a0(t) = <mu(t), K>.
fn gradient_kernel(u_final: &CMat, rho: &CMat, theta: &CMat) -> CMat {
    let theta_t = u_final.adjoint() * theta * u_final;
    (&(rho * &theta_t) - &(theta_t * rho)).map(|z| z * Complex64::new(0.0, 1.0))
}

/// Gradient of Phi on the field domain, one entry per time sample.
///
/// The last sample is zero: with left-endpoint piecewise-constant fields the
/// value eps(t_{q-1}) never enters the propagation.
pub fn field_gradient(
    traj: &PropagatorTrajectory,
    dip: &DipoleTrace,
    rho: &DensityMatrix,
    theta: &Observable,
) -> Result<GradientField> {
    if dip.grid != traj.grid || dip.mus.len() != traj.propagators.len() {
        return Err(Error::DimensionError(
            "dipole trace and trajectory come from different grids".into(),
        ));
    }
    if rho.matrix.nrows() != traj.dim() || theta.matrix.nrows() != traj.dim() {
        return Err(Error::DimensionError(
            "state/observable dimension does not match trajectory".into(),
        ));
    }
    let kernel = gradient_kernel(traj.final_unitary(), &rho.matrix, &theta.matrix);
    Ok(GradientField {
        a0: gradient_row(traj, &dip.mu, &kernel),
    })
}

/// Shared evaluation of <mu_bar(t_j), K> for a Hermitian kernel K.
pub(crate) fn gradient_row(traj: &PropagatorTrajectory, mu: &CMat, kernel: &CMat) -> RVec {
    let q = traj.grid.q;
    let mut a0 = RVec::zeros(q);
    for j in 0..q - 1 {
        let avg = traj.step_averaged_dipole(mu, j);
        a0[j] = trace_inner(&avg, kernel);
    }
    a0
}

/// Gradient of Phi on U(N): [Theta, U rho U^dag] U.
///
/// `U^dag grad` is skew-Hermitian (a tangent direction) and vanishes exactly
/// at kinematic critical points.
pub fn unitary_gradient(u: &CMat, rho: &DensityMatrix, theta: &Observable) -> CMat {
    let conj = u * &rho.matrix * u.adjoint();
    (&(&theta.matrix * &conj) - &(&conj * &theta.matrix)) * u
}

/// Analytic kinematic optimum: the unitary aligning the descending
/// eigenvectors of rho with those of Theta, and the optimal value
/// `phi_max = sum_i eps_i^down lambda_i^down`.
pub fn kinematic_optimum(rho: &DensityMatrix, theta: &Observable) -> Result<(CMat, f64)> {
    let er = eigh(&rho.matrix)?;
    let et = eigh(&theta.matrix)?;
    let w = &et.vectors * er.vectors.adjoint();
    let phi_max = er
        .values
        .iter()
        .zip(et.values.iter())
        .map(|(e, l)| e * l)
        .sum();
    Ok((w, phi_max))
}

/// The optimum-manifold representative closest to `u0`.
///
/// The maximizers of Phi form a continuous manifold (block phases in the
/// eigenbasis pair); aligning the phases with the diagonal of `u0` in that
/// pair picks the representative a tracking run can reach without spending
/// pathlength on phase motion. Returns (W, phi_max).
pub fn nearest_kinematic_optimum(
    u0: &CMat,
    rho: &DensityMatrix,
    theta: &Observable,
) -> Result<(CMat, f64)> {
    if u0.nrows() != rho.matrix.nrows() {
        return Err(Error::DimensionError(
            "propagator dimension does not match the state".into(),
        ));
    }
    let er = eigh(&rho.matrix)?;
    let et = eigh(&theta.matrix)?;
    let u_hat = et.vectors.adjoint() * u0 * &er.vectors;
    let n = u_hat.nrows();
    let mut d = CMat::zeros(n, n);
    for k in 0..n {
        let z = u_hat[(k, k)];
        d[(k, k)] = if z.norm() > 1e-12 {
            z / z.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
    }
    let w = &et.vectors * d * er.vectors.adjoint();
    let phi_max = er
        .values
        .iter()
        .zip(et.values.iter())
        .map(|(e, l)| e * l)
        .sum();
    Ok((w, phi_max))
}

/// Representatives of the critical manifolds of Phi, one per distinct
/// eigenvalue-pairing class, sorted by descending critical value.
#[derive(Debug, Clone)]
pub struct CriticalManifoldSet {
    pub representatives: Vec<CMat>,
    pub critical_values: Vec<f64>,
}

/// Enumerate the critical manifolds U = V_theta P V_rho^dag over permutation
/// matrices P, collapsing permutations that pair the same eigenvalue blocks.
///
/// Guarded to N <= 6 (the enumeration is factorial in N).
pub fn critical_manifolds(rho: &DensityMatrix, theta: &Observable) -> Result<CriticalManifoldSet> {
    let n = rho.matrix.nrows();
    if n != theta.matrix.nrows() {
        return Err(Error::DimensionError(
            "rho and theta dimensions differ".into(),
        ));
    }
    if n > 6 {
        return Err(Error::InvalidInput(format!(
            "critical manifold enumeration is factorial; N = {n} exceeds the cap of 6"
        )));
    }
    let er = eigh(&rho.matrix)?;
    let et = eigh(&theta.matrix)?;
    let rho_block = block_ids(&er.values, 1e-9);
    let theta_block = block_ids(&et.values, 1e-9);

    let mut classes: std::collections::BTreeMap<Vec<(usize, usize)>, (Vec<usize>, f64)> =
        std::collections::BTreeMap::new();
    for perm in permutations(n) {
        let mut key: Vec<(usize, usize)> = (0..n)
            .map(|i| (theta_block[i], rho_block[perm[i]]))
            .collect();
        key.sort_unstable();
        let value: f64 = (0..n).map(|i| et.values[i] * er.values[perm[i]]).sum();
        classes.entry(key).or_insert((perm, value));
    }

    let mut entries: Vec<(Vec<usize>, f64)> = classes.into_values().collect();
    entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));

    let mut representatives = Vec::with_capacity(entries.len());
    let mut critical_values = Vec::with_capacity(entries.len());
    for (perm, value) in entries {
        // U maps the perm[i]-th rho-eigenvector onto the i-th theta-eigenvector.
        let mut u = CMat::zeros(n, n);
        for i in 0..n {
            let vt = et.vectors.column(i);
            let vr = er.vectors.column(perm[i]);
            u += vt * vr.adjoint();
        }
        representatives.push(u);
        critical_values.push(value);
    }
    Ok(CriticalManifoldSet {
        representatives,
        critical_values,
    })
}

fn block_ids(values: &RVec, tol: f64) -> Vec<usize> {
    let mut ids = Vec::with_capacity(values.len());
    let mut current = 0usize;
    for (k, &v) in values.iter().enumerate() {
        if k > 0 && (values[k - 1] - v).abs() > tol {
            current += 1;
        }
        ids.push(current);
    }
    ids
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..n).collect();
    heap_permute(&mut items, n, &mut out);
    out
}

fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Dimension of the subspace of skew-Hermitian directions on which the
/// gradient flow evolves: `D = N^2 - (N-n)^2 - sum n_i^2`, where the `n_i`
/// are the multiplicities of the distinct nonzero eigenvalues of rho and
/// `n` is their total count.
pub fn gradient_subspace_dim(nonzero_mults: &[usize], dim: usize) -> Result<usize> {
    if nonzero_mults.iter().any(|&m| m == 0) {
        return Err(Error::InvalidSpectrum(
            "zero multiplicity in spectrum".into(),
        ));
    }
    let n: usize = nonzero_mults.iter().sum();
    if n > dim {
        return Err(Error::InvalidSpectrum(format!(
            "multiplicities sum to {n}, exceeding dimension {dim}"
        )));
    }
    let sq: usize = nonzero_mults.iter().map(|m| m * m).sum();
    Ok(dim * dim - (dim - n) * (dim - n) - sq)
}

/// Right-hand side of the double-bracket flow: [rho, [rho, Theta]].
///
/// Hermitian and traceless for Hermitian inputs; vanishes iff [rho, Theta] = 0.
pub fn double_bracket_rhs(rho_s: &CMat, theta: &CMat) -> CMat {
    let inner = rho_s * theta - theta * rho_s;
    rho_s * &inner - &inner * rho_s
}

/// Classical RK4 integration of the double-bracket flow, returning the state
/// at every step (n_steps + 1 entries including s = 0).
pub fn rk4_double_bracket(rho0: &CMat, theta: &CMat, s_end: f64, n_steps: usize) -> Vec<CMat> {
    let h = s_end / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut rho = rho0.clone();
    states.push(rho.clone());
    for _ in 0..n_steps {
        let k1 = double_bracket_rhs(&rho, theta);
        let k2 = double_bracket_rhs(&(&rho + &k1.scale(h / 2.0)), theta);
        let k3 = double_bracket_rhs(&(&rho + &k2.scale(h / 2.0)), theta);
        let k4 = double_bracket_rhs(&(&rho + &k3.scale(h)), theta);
        rho += (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(h / 6.0);
        states.push(rho.clone());
    }
    states
}

/// Populations in the Theta-eigenbasis (descending eigenvalue order).
#[derive(Debug, Clone)]
pub struct SimplexState {
    pub x: RVec,
}

impl SimplexState {
    pub fn new(x: RVec) -> Result<Self> {
        if x.iter().any(|&v| v < -1e-12) {
            return Err(Error::InvalidInput("negative population".into()));
        }
        let sum: f64 = x.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "populations sum to {sum}, expected 1"
            )));
        }
        Ok(Self { x })
    }
}

fn theta_basis_populations(theta: &Observable, c0: &CVec) -> Result<RVec> {
    let norm = c0.norm();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidInput(format!(
            "initial state norm is {norm}, expected 1"
        )));
    }
    let et = eigh(&theta.matrix)?;
    let coeffs = et.vectors.adjoint() * c0;
    Ok(RVec::from_iterator(
        coeffs.len(),
        coeffs.iter().map(|c| c.norm_sqr()),
    ))
}

/// Populations evolved to algorithmic time `s` under the flow with rates
/// exp(2 s lambda_i), in the Theta-eigenbasis.
fn evolve_populations(x0: &RVec, lambdas: &RVec, s: f64) -> RVec {
    // Shift by the top eigenvalue to keep the exponentials bounded.
    let top = lambdas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = x0
        .iter()
        .zip(lambdas.iter())
        .map(|(x, l)| x * (2.0 * s * (l - top)).exp())
        .collect();
    let z: f64 = scaled.iter().sum();
    RVec::from_iterator(scaled.len(), scaled.into_iter().map(|v| v / z))
}

/// Closed-form integrated gradient flow for a pure initial state:
/// `x_i(s) = e^{2 s lambda_i} x_i(0) / sum_j e^{2 s lambda_j} x_j(0)`.
///
/// `c0` is the initial state vector in the computational basis; populations
/// are reported in the descending Theta-eigenbasis.
pub fn analytic_pure_flow(theta: &Observable, c0: &CVec, s: f64) -> Result<SimplexState> {
    let x0 = theta_basis_populations(theta, c0)?;
    SimplexState::new(evolve_populations(&x0, &theta.spectrum, s))
}

/// The s -> infinity limit of `analytic_pure_flow`: initial mass renormalized
/// on the highest eigenvalue cluster that carries any population. For a
/// simple top eigenvalue this is the basis point e_max; for a degenerate top
/// cluster with equal initial populations it is (1/k, ..., 1/k, 0, ..., 0).
pub fn analytic_pure_flow_limit(theta: &Observable, c0: &CVec) -> Result<SimplexState> {
    let x0 = theta_basis_populations(theta, c0)?;
    let lam = &theta.spectrum;
    let n = x0.len();
    let mut limit = RVec::zeros(n);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (lam[start] - lam[end]).abs() < 1e-9 {
            end += 1;
        }
        let mass: f64 = (start..end).map(|i| x0[i]).sum();
        if mass > 1e-14 {
            for i in start..end {
                limit[i] = x0[i] / mass;
            }
            return SimplexState::new(limit);
        }
        start = end;
    }
    Err(Error::InvalidInput("state carries no population".into()))
}

/// Distance of the flow trajectory to the basis point e_{i_star} and its
/// exact s-derivative.
///
/// `i_star` indexes the descending Theta-eigenbasis (0 = top eigenvalue).
pub fn distance_dynamics(
    theta: &Observable,
    x0: &SimplexState,
    i_star: usize,
    s: f64,
) -> Result<(f64, f64)> {
    let n = x0.x.len();
    if i_star >= n {
        return Err(Error::InvalidInput(format!(
            "index {i_star} out of range for dimension {n}"
        )));
    }
    if theta.spectrum.len() != n {
        return Err(Error::DimensionError(
            "state and observable dimensions differ".into(),
        ));
    }
    let x = evolve_populations(&x0.x, &theta.spectrum, s);
    let mut dist2 = 1.0 - 2.0 * x[i_star];
    for v in x.iter() {
        dist2 += v * v;
    }
    // Replicator form: dx_i/ds = 2 (lambda_i - lambda_bar) x_i.
    let lam = &theta.spectrum;
    let lambda_bar: f64 = x.iter().zip(lam.iter()).map(|(x, l)| x * l).sum();
    let mut deriv = -4.0 * x[i_star] * (lam[i_star] - lambda_bar);
    for (xi, li) in x.iter().zip(lam.iter()) {
        deriv += 4.0 * xi * xi * (li - lambda_bar);
    }
    Ok((dist2, deriv))
}

/// Total pathlength of the projected trajectory in U(N):
/// `sum_k || log(U(s_k)^dag U(s_{k+1})) ||_F`.
///
/// Returns the length and whether any segment hit the principal branch cut.
pub fn unitary_pathlength(trace: &OptimizationTrace) -> Result<(f64, bool)> {
    if trace.records.len() < 2 {
        return Ok((0.0, false));
    }
    let mut total = 0.0;
    let mut branch = false;
    for pair in trace.records.windows(2) {
        let log = log_unitary(&(pair[0].u_final.adjoint() * &pair[1].u_final))?;
        total += log.hermitian.norm();
        branch |= log.branch_cut;
    }
    Ok((total, branch))
}

/// Stop rules and step-size policy for the field gradient flow.
#[derive(Debug, Clone)]
pub struct StopRule {
    /// Stop when phi_max - phi < phi_gap.
    pub phi_gap: f64,
    /// Stop when the L2 gradient norm falls below this.
    pub grad_tol: f64,
    /// Algorithmic time budget.
    pub s_max: f64,
    /// Maximum number of records (the row budget p).
    pub max_records: usize,
    /// Initial step size.
    pub ds0: f64,
    /// Grow accepted steps up to this bound.
    pub ds_max: f64,
    /// Abort threshold for adaptive halving.
    pub ds_min: f64,
    /// Use classical RK4 for the s-update instead of explicit Euler.
    pub use_rk4: bool,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            phi_gap: 1e-6,
            grad_tol: 1e-8,
            s_max: 10.0,
            max_records: 10_000,
            ds0: 0.005,
            ds_max: 0.5,
            ds_min: 1e-12,
            use_rk4: false,
        }
    }
}

struct FlowEval {
    phi: f64,
    grad: GradientField,
    u_final: CMat,
}

fn eval_flow(
    model: &crate::qdyn::SystemModel,
    eps: &RVec,
    grid: &TimeGrid,
    rho: &DensityMatrix,
    theta: &Observable,
) -> Result<FlowEval> {
    let traj = propagate(model, eps, grid)?;
    let dip = dipole_trace(&traj, &model.mu)?;
    let phi = expectation(traj.final_unitary(), rho, theta)?;
    let grad = field_gradient(&traj, &dip, rho, theta)?;
    Ok(FlowEval {
        phi,
        grad,
        u_final: traj.final_unitary().clone(),
    })
}

/// Steepest-ascent flow of Phi on the field domain with adaptive step
/// halving (Phi never decreases by more than 1e-9 per accepted step).
pub fn run_gradient_flow(
    model: &crate::qdyn::SystemModel,
    field0: &ControlField,
    rho: &DensityMatrix,
    theta: &Observable,
    stop: &StopRule,
) -> DriverResult {
    let grid = &field0.time_grid;
    let mut eps = field0.rows()[0].clone();
    let mut records: Vec<StepRecord> = Vec::new();
    let mut branch_warnings = 0usize;
    let mut pathlength = 0.0f64;
    let mut s = 0.0f64;
    let mut ds = stop.ds0;

    macro_rules! fail {
        ($err:expr) => {
            return Err(Box::new(RunFailure {
                error: $err,
                partial: OptimizationTrace {
                    records,
                    stop: StopReason::StepLimit,
                    branch_cut_warnings: branch_warnings,
                    final_field: eps.clone(),
                },
            }))
        };
    }
    macro_rules! try_eval {
        ($row:expr) => {
            match eval_flow(model, $row, grid, rho, theta) {
                Ok(v) => v,
                Err(e) => fail!(e),
            }
        };
    }

    let phi_max = match kinematic_optimum(rho, theta) {
        Ok((_, v)) => v,
        Err(e) => fail!(e),
    };
    let mut eval = try_eval!(&eps);

    let push = |records: &mut Vec<StepRecord>,
                s: f64,
                eval: &FlowEval,
                eps: &RVec,
                pathlength: f64| {
        records.push(StepRecord {
            s,
            phi: eval.phi,
            grad_norm: eval.grad.l2_norm(grid),
            fluence: fluence(eps, grid),
            condition: None,
            track_err: None,
            u_final: eval.u_final.clone(),
            pathlength_cum: pathlength,
        });
    };
    push(&mut records, s, &eval, &eps, pathlength);

    macro_rules! finish {
        ($reason:expr) => {
            return Ok(OptimizationTrace {
                records,
                stop: $reason,
                branch_cut_warnings: branch_warnings,
                final_field: eps,
            })
        };
    }

    if eval.grad.l2_norm(grid) < stop.grad_tol {
        finish!(StopReason::Critical);
    }

    loop {
        if phi_max - eval.phi < stop.phi_gap {
            finish!(StopReason::Converged);
        }
        if s >= stop.s_max {
            finish!(StopReason::SMaxReached);
        }
        if records.len() >= stop.max_records {
            finish!(StopReason::StepLimit);
        }
        if eval.grad.l2_norm(grid) < stop.grad_tol {
            finish!(StopReason::GradientVanished);
        }

        // Adaptive halving: accept only non-decreasing objective moves.
        let (next_eps, next_eval) = loop {
            let candidate = if stop.use_rk4 {
                let k1 = eval.grad.a0.clone();
                let k2 = try_eval!(&(&eps + k1.scale(ds / 2.0))).grad.a0;
                let k3 = try_eval!(&(&eps + k2.scale(ds / 2.0))).grad.a0;
                let k4 = try_eval!(&(&eps + k3.scale(ds))).grad.a0;
                &eps + (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(ds / 6.0)
            } else {
                &eps + eval.grad.a0.scale(ds)
            };
            match eval_flow(model, &candidate, grid, rho, theta) {
                Ok(cand_eval) if cand_eval.phi >= eval.phi - 1e-9 => {
                    break (candidate, cand_eval);
                }
                Ok(_) | Err(_) if ds / 2.0 >= stop.ds_min => {
                    ds /= 2.0;
                }
                Ok(_) => fail!(Error::StalledOptimization(stop.ds_min)),
                Err(e) => fail!(e),
            }
        };

        let seg = match log_unitary(&(eval.u_final.adjoint() * &next_eval.u_final)) {
            Ok(seg) => seg,
            Err(e) => fail!(e),
        };
        pathlength += seg.hermitian.norm();
        if seg.branch_cut {
            branch_warnings += 1;
        }

        s += ds;
        eps = next_eps;
        eval = next_eval;
        push(&mut records, s, &eval, &eps, pathlength);
        ds = (ds * 1.5).min(stop.ds_max);
    }
}
