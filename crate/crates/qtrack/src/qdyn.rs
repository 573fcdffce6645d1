//! Finite-dimensional quantum dynamics under a discretized control field.
//!
//! The Hamiltonian follows the dipole form `H(t) = H0 - mu * eps(t)` with
//! hbar = 1. Fields are piecewise constant on a uniform time grid; the value
//! on `[t_j, t_{j+1})` is the left endpoint `eps(t_j)`, and each step
//! propagator `exp(-i H_j dt)` is computed exactly by eigendecomposition of
//! the Hermitian step Hamiltonian, so unitarity holds to machine precision.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{
    check_hermitian, eigh, expi_from_eigh, hermiticity_defect, multiplicities, phase_average,
    trapezoid_weights, CMat, Eigh, RVec,
};

/// Uniform time grid: `q` samples on `[0, T]`, spacing `dt = T/(q-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t_final: f64,
    pub q: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, q: usize) -> Result<Self> {
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(Error::InvalidInput(format!(
                "final time must be positive and finite, got {t_final}"
            )));
        }
        if q < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 time samples, got {q}"
            )));
        }
        Ok(Self { t_final, q })
    }

    pub fn dt(&self) -> f64 {
        self.t_final / (self.q - 1) as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt()
    }

    /// Trapezoid quadrature weights over the grid.
    pub fn weights(&self) -> RVec {
        trapezoid_weights(self.q, self.dt())
    }
}

/// Internal Hamiltonian and dipole operator, with optional morphing
/// endpoints for continuation in the algorithmic parameter `s`.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub dim: usize,
    pub h0: CMat,
    pub mu: CMat,
    pub morph: Option<MorphEndpoints>,
}

/// Linear-in-s morphing schedule between two (H0, mu) pairs.
#[derive(Debug, Clone)]
pub struct MorphEndpoints {
    pub h0_start: CMat,
    pub mu_start: CMat,
    pub h0_end: CMat,
    pub mu_end: CMat,
}

impl SystemModel {
    pub fn new(h0: CMat, mu: CMat) -> Result<Self> {
        let dim = h0.nrows();
        if dim < 2 {
            return Err(Error::InvalidInput(format!(
                "Hilbert dimension must be at least 2, got {dim}"
            )));
        }
        check_hermitian(&h0, 1e-12, "H0")?;
        check_hermitian(&mu, 1e-12, "mu")?;
        if mu.nrows() != dim {
            return Err(Error::DimensionError(format!(
                "mu is {}x{}, H0 is {dim}x{dim}",
                mu.nrows(),
                mu.ncols()
            )));
        }
        Ok(Self {
            dim,
            h0,
            mu,
            morph: None,
        })
    }

    pub fn with_morph(mut self, endpoints: MorphEndpoints) -> Result<Self> {
        for (m, name) in [
            (&endpoints.h0_start, "morph H0 start"),
            (&endpoints.mu_start, "morph mu start"),
            (&endpoints.h0_end, "morph H0 end"),
            (&endpoints.mu_end, "morph mu end"),
        ] {
            check_hermitian(m, 1e-12, name)?;
            if m.nrows() != self.dim {
                return Err(Error::DimensionError(format!(
                    "{name} is {}x{}, system dimension is {}",
                    m.nrows(),
                    m.ncols(),
                    self.dim
                )));
            }
        }
        self.morph = Some(endpoints);
        Ok(self)
    }

    /// Hamiltonian pair at algorithmic parameter `s`; linear interpolation
    /// between the endpoints when morphing is configured, the base pair
    /// otherwise.
    pub fn at(&self, s: f64) -> (CMat, CMat) {
        match &self.morph {
            Some(m) => (
                m.h0_start.scale(1.0 - s) + m.h0_end.scale(s),
                m.mu_start.scale(1.0 - s) + m.mu_end.scale(s),
            ),
            None => (self.h0.clone(), self.mu.clone()),
        }
    }

    /// s-derivatives (dH0/ds, dmu/ds); zero when morphing is disabled.
    pub fn morph_rates(&self) -> (CMat, CMat) {
        match &self.morph {
            Some(m) => (&m.h0_end - &m.h0_start, &m.mu_end - &m.mu_start),
            None => (
                CMat::zeros(self.dim, self.dim),
                CMat::zeros(self.dim, self.dim),
            ),
        }
    }
}

/// Discretized control field history: one row per algorithmic step.
#[derive(Debug, Clone)]
pub struct ControlField {
    rows: Vec<RVec>,
    pub time_grid: TimeGrid,
    pub ds: f64,
}

impl ControlField {
    pub fn new(initial: RVec, time_grid: TimeGrid, ds: f64) -> Result<Self> {
        if initial.len() != time_grid.q {
            return Err(Error::DimensionError(format!(
                "field row has {} samples, grid expects {}",
                initial.len(),
                time_grid.q
            )));
        }
        check_field(&initial)?;
        Ok(Self {
            rows: vec![initial],
            time_grid,
            ds,
        })
    }

    pub fn rows(&self) -> &[RVec] {
        &self.rows
    }

    pub fn current(&self) -> &RVec {
        self.rows.last().expect("field has at least one row")
    }

    pub fn push_row(&mut self, row: RVec) -> Result<()> {
        if row.len() != self.time_grid.q {
            return Err(Error::DimensionError(
                "field row length does not match grid".into(),
            ));
        }
        check_field(&row)?;
        self.rows.push(row);
        Ok(())
    }
}

fn check_field(row: &RVec) -> Result<()> {
    if let Some(bad) = row.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidField(format!(
            "field contains non-finite value {bad}"
        )));
    }
    Ok(())
}

/// Integrated squared field intensity over the grid (trapezoid rule).
pub fn fluence(row: &RVec, grid: &TimeGrid) -> f64 {
    let w = grid.weights();
    row.iter().zip(w.iter()).map(|(e, w)| w * e * e).sum()
}

/// Time-ordered propagators `U(t_j, 0)` together with the per-step
/// eigendecompositions of the step Hamiltonians (reused by gradients).
#[derive(Debug, Clone)]
pub struct PropagatorTrajectory {
    pub propagators: Vec<CMat>,
    step_eigs: Vec<Eigh>,
    pub grid: TimeGrid,
}

impl PropagatorTrajectory {
    pub fn final_unitary(&self) -> &CMat {
        self.propagators.last().expect("non-empty trajectory")
    }

    pub fn dim(&self) -> usize {
        self.propagators[0].nrows()
    }

    /// Heisenberg dipole averaged over step `j` (exact Frechet insertion):
    /// `U(t_j)^dag [ integral_0^1 e^{i tau H_j dt} mu e^{-i tau H_j dt} dtau ] U(t_j)`.
    ///
    /// This is the exact derivative kernel of the discretized propagation
    /// with respect to the field value on step `j`; it differs from the
    /// pointwise `mu(t_j)` by O(dt).
    pub fn step_averaged_dipole(&self, mu: &CMat, j: usize) -> CMat {
        let eig = &self.step_eigs[j];
        let dt = self.grid.dt();
        let v = &eig.vectors;
        let mut tilde = v.adjoint() * mu * v;
        let n = tilde.nrows();
        for a in 0..n {
            for b in 0..n {
                tilde[(a, b)] *= phase_average((eig.values[a] - eig.values[b]) * dt);
            }
        }
        let averaged = v * tilde * v.adjoint();
        let u = &self.propagators[j];
        u.adjoint() * averaged * u
    }

    pub fn n_steps(&self) -> usize {
        self.step_eigs.len()
    }
}

/// Propagate the Schrodinger equation for one field row.
///
/// `propagators[0] = I`; `propagators[j+1] = exp(-i (H0 - mu eps(t_j)) dt) propagators[j]`.
pub fn propagate(
    model: &SystemModel,
    field_row: &RVec,
    grid: &TimeGrid,
) -> Result<PropagatorTrajectory> {
    propagate_pair(&model.h0, &model.mu, field_row, grid)
}

/// As `propagate` but with an explicit (H0, mu) pair, e.g. a morphed system.
pub fn propagate_pair(
    h0: &CMat,
    mu: &CMat,
    field_row: &RVec,
    grid: &TimeGrid,
) -> Result<PropagatorTrajectory> {
    let n = h0.nrows();
    if field_row.len() != grid.q {
        return Err(Error::DimensionError(format!(
            "field row has {} samples, grid expects {}",
            field_row.len(),
            grid.q
        )));
    }
    check_field(field_row)?;
    let dt = grid.dt();
    let mut propagators = Vec::with_capacity(grid.q);
    let mut step_eigs = Vec::with_capacity(grid.q - 1);
    propagators.push(CMat::identity(n, n));
    for j in 0..grid.q - 1 {
        let h = h0 - mu.scale(field_row[j]);
        let eig = eigh(&h)?;
        let step = expi_from_eigh(&eig, -dt);
        let next = &step * &propagators[j];
        propagators.push(next);
        step_eigs.push(eig);
    }
    Ok(PropagatorTrajectory {
        propagators,
        step_eigs,
        grid: grid.clone(),
    })
}

/// Heisenberg-picture dipole operators `mu(t_j) = U(t_j,0)^dag mu U(t_j,0)`.
#[derive(Debug, Clone)]
pub struct DipoleTrace {
    pub mus: Vec<CMat>,
    /// The bare (Schrodinger-picture) dipole operator.
    pub mu: CMat,
    pub grid: TimeGrid,
}

pub fn dipole_trace(traj: &PropagatorTrajectory, mu: &CMat) -> Result<DipoleTrace> {
    if mu.nrows() != traj.dim() {
        return Err(Error::DimensionError(format!(
            "dipole operator is {}x{}, trajectory dimension is {}",
            mu.nrows(),
            mu.ncols(),
            traj.dim()
        )));
    }
    let mus = traj
        .propagators
        .iter()
        .map(|u| u.adjoint() * mu * u)
        .collect();
    Ok(DipoleTrace {
        mus,
        mu: mu.clone(),
        grid: traj.grid.clone(),
    })
}

/// Density matrix with a validated spectrum (descending eigenvalues).
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    pub matrix: CMat,
    pub spectrum: RVec,
}

impl DensityMatrix {
    pub fn new(matrix: CMat) -> Result<Self> {
        check_hermitian(&matrix, 1e-10, "density matrix")?;
        let eig = eigh(&matrix)?;
        if eig.values.iter().any(|&v| v < -1e-12) {
            return Err(Error::InvalidInput(format!(
                "density matrix has negative eigenvalue {:e}",
                eig.values[eig.values.len() - 1]
            )));
        }
        let trace: f64 = eig.values.iter().sum();
        if (trace - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "density matrix trace is {trace}, expected 1"
            )));
        }
        Ok(Self {
            matrix,
            spectrum: eig.values,
        })
    }

    /// Pure state |psi><psi| from a state vector (normalized internally).
    pub fn pure(psi: &crate::linalg::CVec) -> Result<Self> {
        let norm = psi.norm();
        if norm == 0.0 {
            return Err(Error::InvalidInput("zero state vector".into()));
        }
        let v = psi.map(|z| z / Complex64::new(norm, 0.0));
        Self::new(&v * v.adjoint())
    }

    /// Diagonal density matrix from populations (must sum to 1).
    pub fn from_populations(p: &[f64]) -> Result<Self> {
        let m = CMat::from_fn(p.len(), p.len(), |i, j| {
            if i == j {
                Complex64::new(p[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        Self::new(m)
    }

    /// Multiplicities of the nonzero eigenvalues (descending groups).
    pub fn nonzero_multiplicities(&self, tol: f64) -> Vec<usize> {
        multiplicities(&self.spectrum, tol)
            .into_iter()
            .filter(|&(v, _)| v.abs() > tol)
            .map(|(_, c)| c)
            .collect()
    }
}

/// Hermitian observable with a validated spectrum (descending eigenvalues).
#[derive(Debug, Clone)]
pub struct Observable {
    pub matrix: CMat,
    pub spectrum: RVec,
}

impl Observable {
    pub fn new(matrix: CMat) -> Result<Self> {
        check_hermitian(&matrix, 1e-12, "observable")?;
        let eig = eigh(&matrix)?;
        Ok(Self {
            matrix,
            spectrum: eig.values,
        })
    }

    pub fn multiplicities(&self, tol: f64) -> Vec<usize> {
        multiplicities(&self.spectrum, tol)
            .into_iter()
            .map(|(_, c)| c)
            .collect()
    }
}

/// Max elementwise Hermiticity defect across a dipole trace.
pub fn dipole_hermiticity_defect(dip: &DipoleTrace) -> f64 {
    dip.mus.iter().map(hermiticity_defect).fold(0.0, f64::max)
}
