//! Symmetric positive-semidefinite correlation (Gram) matrices with
//! condition monitoring and a singular-value pseudo-inverse.
//!
//! Both the N^2 x N^2 dipole correlation matrix G and the m x m observable
//! correlation matrix Gamma share this representation. Their invertibility
//! encodes local surjectivity of the control-to-propagator (respectively
//! control-to-observable) map; near-singularity is the central failure mode
//! of the tracking equations, so the condition number is always available.

use crate::error::{Error, Result};
use crate::linalg::{RMat, RVec};

/// Condition number of a PSD matrix, with an explicit infinite flag when
/// sigma_min < 1e-12 sigma_max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    Finite(f64),
    Infinite,
}

impl Condition {
    pub fn as_f64(&self) -> f64 {
        match self {
            Condition::Finite(c) => *c,
            Condition::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Condition::Finite(_))
    }
}

/// Symmetric PSD correlation matrix with precomputed singular values.
#[derive(Debug, Clone)]
pub struct Gramian {
    pub matrix: RMat,
    /// Singular values, descending (eigenvalues clipped at zero).
    pub singular_values: RVec,
    eigenvectors: RMat,
}

impl Gramian {
    /// Validate symmetry and positive semidefiniteness, then decompose.
    pub fn new(matrix: RMat) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() {
            return Err(Error::DimensionError("Gram matrix must be square".into()));
        }
        let asym = (&matrix - matrix.transpose()).norm();
        if !asym.is_finite() || asym > 1e-10 * (1.0 + matrix.norm()) {
            return Err(Error::InvalidInput(format!(
                "Gram matrix is not symmetric: defect {asym:e}"
            )));
        }
        let sym = (&matrix + matrix.transpose()).scale(0.5);
        let eig = nalgebra::linalg::SymmetricEigen::try_new(sym, 1e-14, 100_000).ok_or_else(
            || Error::NumericalFailure("Gram matrix eigensolver did not converge".into()),
        )?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut values = RVec::zeros(n);
        let mut vectors = RMat::zeros(n, n);
        for (col, &src) in order.iter().enumerate() {
            values[col] = eig.eigenvalues[src];
            vectors.set_column(col, &eig.eigenvectors.column(src));
        }
        let top = values[0].max(0.0);
        if values[n - 1] < -1e-9 * top.max(1e-300) {
            return Err(Error::InvalidInput(format!(
                "Gram matrix is not PSD: eigenvalue {:e}",
                values[n - 1]
            )));
        }
        let clipped = values.map(|v| v.max(0.0));
        Ok(Self {
            matrix,
            singular_values: clipped,
            eigenvectors: vectors,
        })
    }

    /// sigma_max / sigma_min, reported as infinite when
    /// sigma_min < 1e-12 sigma_max. Errors on the zero matrix.
    pub fn condition(&self) -> Result<Condition> {
        let max = self.singular_values[0];
        let min = self.singular_values[self.singular_values.len() - 1];
        if max <= 0.0 {
            return Err(Error::InvalidInput(
                "condition number of the zero matrix".into(),
            ));
        }
        if min < 1e-12 * max {
            Ok(Condition::Infinite)
        } else {
            Ok(Condition::Finite(max / min))
        }
    }

    /// Eigenvector for the k-th singular value (descending order).
    pub fn singular_vector(&self, k: usize) -> RVec {
        self.eigenvectors.column(k).clone_owned()
    }

    /// Pseudo-inverse application with a relative singular-value cutoff:
    /// directions with sigma < cutoff * sigma_max are dropped.
    pub fn pinv_apply(&self, rhs: &RVec, rel_cutoff: f64) -> RVec {
        let n = self.singular_values.len();
        let top = self.singular_values[0];
        let mut out = RVec::zeros(n);
        for k in 0..n {
            let sigma = self.singular_values[k];
            if sigma > rel_cutoff * top && sigma > 0.0 {
                let v = self.eigenvectors.column(k);
                let coeff = v.dot(rhs) / sigma;
                out += v.scale(coeff);
            }
        }
        out
    }

    /// Strict-mode guard: error when the condition number is infinite or
    /// exceeds `cap`.
    pub fn require_condition(&self, cap: f64, gamma: bool) -> Result<Condition> {
        let cond = self.condition()?;
        let bad = match cond {
            Condition::Infinite => true,
            Condition::Finite(c) => c > cap,
        };
        if bad {
            return Err(if gamma {
                Error::SingularGamma(cond.as_f64(), cap)
            } else {
                Error::SingularGMatrix(cond.as_f64(), cap)
            });
        }
        Ok(cond)
    }
}

/// Accumulate sum_j w_j v_j v_j^T from weighted column vectors.
pub fn gramian_from_vectors(vecs: &[RVec], weights: &RVec) -> Result<Gramian> {
    if vecs.is_empty() {
        return Err(Error::InvalidInput("no vectors to correlate".into()));
    }
    if vecs.len() != weights.len() {
        return Err(Error::DimensionError(
            "weight count does not match vector count".into(),
        ));
    }
    let dim = vecs[0].len();
    let mut g = RMat::zeros(dim, dim);
    for (v, &w) in vecs.iter().zip(weights.iter()) {
        // Rank-one update on the upper triangle, mirrored below.
        for a in 0..dim {
            let va = v[a] * w;
            for b in a..dim {
                g[(a, b)] += va * v[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    Gramian::new(g)
}
