//! Dense complex linear algebra helpers shared by all modules.
//!
//! Conventions used throughout the crate:
//!
//! - Hermitian eigendecompositions return eigenvalues in *descending* order
//!   with a deterministic phase fix on each eigenvector (the largest-modulus
//!   component is made real and positive), so repeated runs produce
//!   bit-identical results.
//! - `log_unitary` returns the Hermitian generator `A` with `U = exp(iA)` and
//!   eigen-angles on the principal branch (-pi, pi].
//! - The real vectorization of Hermitian matrices uses the orthonormal basis
//!   `E_ii` (diagonals first), then `(E_ij + E_ji)/sqrt(2)` and
//!   `i(E_ij - E_ji)/sqrt(2)` for `i < j` in row-major order, which makes
//!   `vec` an isometry for the trace inner product.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

pub const I1: Complex64 = Complex64::new(0.0, 1.0);

/// Maximum elementwise |M - M^dagger|.
pub fn hermiticity_defect(m: &CMat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let d = (m[(i, j)] - m[(j, i)].conj()).norm();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// Frobenius norm of U^dagger U - I.
pub fn unitarity_defect(u: &CMat) -> f64 {
    let n = u.nrows();
    (u.adjoint() * u - CMat::identity(n, n)).norm()
}

pub fn check_hermitian(m: &CMat, tol: f64, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionError(format!(
            "{what} is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    let defect = hermiticity_defect(m);
    if !defect.is_finite() || defect > tol {
        return Err(Error::InvalidInput(format!(
            "{what} is not Hermitian: defect {defect:e} > {tol:e}"
        )));
    }
    Ok(())
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

/// Re Tr(A B); exact trace inner product for Hermitian arguments.
pub fn trace_inner(a: &CMat, b: &CMat) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc.re
}

/// Hermitian eigendecomposition with descending eigenvalues and
/// deterministically phase-fixed eigenvectors.
#[derive(Debug, Clone)]
pub struct Eigh {
    /// Eigenvalues, descending.
    pub values: RVec,
    /// Eigenvectors as columns, aligned with `values`.
    pub vectors: CMat,
}

pub fn eigh(m: &CMat) -> Result<Eigh> {
    let n = m.nrows();
    let se = nalgebra::linalg::SymmetricEigen::try_new(m.clone(), 1e-14, 100_000)
        .ok_or_else(|| Error::NumericalFailure("Hermitian eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[b]
            .partial_cmp(&se.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut values = RVec::zeros(n);
    let mut vectors = CMat::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        values[col] = se.eigenvalues[src];
        let mut v = se.eigenvectors.column(src).clone_owned();
        // Deterministic phase: largest-modulus component real and positive.
        let mut best = 0usize;
        let mut best_mod = 0.0f64;
        for (k, e) in v.iter().enumerate() {
            if e.norm() > best_mod + 1e-15 {
                best_mod = e.norm();
                best = k;
            }
        }
        if best_mod > 0.0 {
            let phase = v[best].conj() / best_mod;
            v *= phase;
        }
        vectors.set_column(col, &v);
    }
    Ok(Eigh { values, vectors })
}

/// exp(i * factor * H) for Hermitian H, via eigendecomposition.
pub fn expi_hermitian(h: &CMat, factor: f64) -> Result<CMat> {
    let eig = eigh(h)?;
    Ok(expi_from_eigh(&eig, factor))
}

/// exp(i * factor * H) given a precomputed eigendecomposition of H.
pub fn expi_from_eigh(eig: &Eigh, factor: f64) -> CMat {
    let n = eig.values.len();
    let mut scaled = eig.vectors.clone();
    for j in 0..n {
        let ph = Complex64::from_polar(1.0, factor * eig.values[j]);
        for i in 0..n {
            scaled[(i, j)] *= ph;
        }
    }
    scaled * eig.vectors.adjoint()
}

/// Eigendecomposition of a unitary matrix: angles on the principal branch
/// (-pi, pi], orthonormal eigenvectors, and a flag set when an eigenvalue
/// lies within 1e-10 of -1 (the branch cut).
pub struct UnitaryEig {
    pub angles: Vec<f64>,
    pub vectors: CMat,
    pub branch_cut: bool,
}

/// Joint-diagonalization eigensolver for unitary matrices.
///
/// Stage one diagonalizes the Hermitian part (U + U^dagger)/2; stage two
/// resolves clusters (degenerate cosines, including the +/-theta ambiguity)
/// with the anti-Hermitian part restricted to each cluster.
pub fn eig_unitary(u: &CMat) -> Result<UnitaryEig> {
    let n = u.nrows();
    let defect = unitarity_defect(u);
    if !(defect < 1e-8) {
        return Err(Error::InvalidInput(format!(
            "matrix is not unitary: defect {defect:e}"
        )));
    }
    let herm = (u + u.adjoint()).scale(0.5);
    let eig = eigh(&herm)?;
    let mut vectors = eig.vectors.clone();

    // Resolve clusters of (near-)equal cosines against the sine part.
    let anti = (u - u.adjoint()).map(|z| z / (2.0 * I1));
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (eig.values[end] - eig.values[start]).abs() < 1e-8 {
            end += 1;
        }
        if end - start > 1 {
            let sub = vectors.columns(start, end - start).clone_owned();
            let block = sub.adjoint() * &anti * &sub;
            let block_eig = eigh(&block)?;
            let refined = sub * block_eig.vectors;
            for (off, col) in (start..end).enumerate() {
                vectors.set_column(col, &refined.column(off).clone_owned());
            }
        }
        start = end;
    }

    let mut angles = Vec::with_capacity(n);
    let mut branch_cut = false;
    for k in 0..n {
        let v = vectors.column(k);
        let lambda = (v.adjoint() * u * v)[(0, 0)];
        if (lambda + Complex64::new(1.0, 0.0)).norm() < 1e-10 {
            branch_cut = true;
            angles.push(std::f64::consts::PI);
        } else {
            angles.push(lambda.arg());
        }
    }
    Ok(UnitaryEig {
        angles,
        vectors,
        branch_cut,
    })
}

/// Result of `log_unitary`: `U = exp(i * hermitian)` with eigen-angles in
/// (-pi, pi]; `branch_cut` is set when an eigenvalue of U sat within 1e-10
/// of -1 and the angle was pinned to +pi.
#[derive(Debug, Clone)]
pub struct LogUnitary {
    pub hermitian: CMat,
    pub branch_cut: bool,
}

/// Principal matrix logarithm of a unitary, returned as the Hermitian
/// generator A with U = exp(iA).
pub fn log_unitary(u: &CMat) -> Result<LogUnitary> {
    let eig = eig_unitary(u)?;
    let n = u.nrows();
    let mut scaled = eig.vectors.clone();
    for j in 0..n {
        for i in 0..n {
            scaled[(i, j)] *= Complex64::new(eig.angles[j], 0.0);
        }
    }
    Ok(LogUnitary {
        hermitian: scaled * eig.vectors.adjoint(),
        branch_cut: eig.branch_cut,
    })
}

/// Geodesic distance on U(N): ||log_unitary(A^dagger B)||_F.
pub fn geodesic_distance(a: &CMat, b: &CMat) -> Result<(f64, bool)> {
    let log = log_unitary(&(a.adjoint() * b))?;
    Ok((log.hermitian.norm(), log.branch_cut))
}

/// Dimension of the real Hermitian vectorization of an n x n matrix.
pub fn vec_dim(n: usize) -> usize {
    n * n
}

/// Isometric real vectorization of a Hermitian matrix.
///
/// Tr(A B) = vec(A) . vec(B) for Hermitian A, B.
pub fn vec_hermitian(m: &CMat) -> Result<RVec> {
    check_hermitian(m, 1e-8, "vectorization input")?;
    Ok(vec_hermitian_unchecked(m))
}

/// As `vec_hermitian` but without the Hermiticity check; reads the upper
/// triangle and the real diagonal.
pub fn vec_hermitian_unchecked(m: &CMat) -> RVec {
    let n = m.nrows();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut v = RVec::zeros(n * n);
    for i in 0..n {
        v[i] = m[(i, i)].re;
    }
    let mut k = n;
    for i in 0..n {
        for j in (i + 1)..n {
            v[k] = sqrt2 * m[(i, j)].re;
            v[k + 1] = sqrt2 * m[(i, j)].im;
            k += 2;
        }
    }
    v
}

/// Inverse of `vec_hermitian`.
pub fn unvec_hermitian(v: &RVec) -> Result<CMat> {
    let len = v.len();
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len {
        return Err(Error::DimensionError(format!(
            "vector length {len} is not a perfect square"
        )));
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut m = CMat::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = Complex64::new(v[i], 0.0);
    }
    let mut k = n;
    for i in 0..n {
        for j in (i + 1)..n {
            let e = Complex64::new(v[k] / sqrt2, v[k + 1] / sqrt2);
            m[(i, j)] = e;
            m[(j, i)] = e.conj();
            k += 2;
        }
    }
    Ok(m)
}

/// Trapezoid quadrature weights on a uniform grid of `q` samples with
/// spacing `dt`.
pub fn trapezoid_weights(q: usize, dt: f64) -> RVec {
    let mut w = RVec::from_element(q, dt);
    w[0] = 0.5 * dt;
    w[q - 1] = 0.5 * dt;
    w
}

/// phi(ix) = (exp(ix) - 1)/(ix) = exp(ix/2) sinc(x/2); phi(0) = 1.
///
/// Appears in the exact derivative of a step propagator with respect to its
/// field value.
pub fn phase_average(x: f64) -> Complex64 {
    let half = 0.5 * x;
    let sinc = if half.abs() < 1e-6 {
        1.0 - half * half / 6.0
    } else {
        half.sin() / half
    };
    Complex64::from_polar(sinc, half)
}

/// Seeded random Hermitian matrix with entries of order `scale`.
pub fn random_hermitian<R: Rng>(n: usize, scale: f64, rng: &mut R) -> CMat {
    let mut m = CMat::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = Complex64::new(scale * (rng.random::<f64>() * 2.0 - 1.0), 0.0);
        for j in (i + 1)..n {
            let e = Complex64::new(
                scale * (rng.random::<f64>() * 2.0 - 1.0),
                scale * (rng.random::<f64>() * 2.0 - 1.0),
            );
            m[(i, j)] = e;
            m[(j, i)] = e.conj();
        }
    }
    m
}

/// Seeded random unitary from modified Gram-Schmidt orthonormalization of a
/// random complex matrix.
pub fn random_unitary<R: Rng>(n: usize, rng: &mut R) -> CMat {
    let mut m = CMat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = Complex64::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
        }
    }
    for col in 0..n {
        let mut v = m.column(col).clone_owned();
        for prev in 0..col {
            let p = m.column(prev);
            let overlap = (p.adjoint() * &v)[(0, 0)];
            v -= p.clone_owned() * overlap;
        }
        let norm = v.norm();
        v /= Complex64::new(norm, 0.0);
        m.set_column(col, &v);
    }
    m
}

/// Cluster a descending eigenvalue list into groups of (near-)equal values.
pub fn multiplicities(values: &RVec, tol: f64) -> Vec<(f64, usize)> {
    let mut groups: Vec<(f64, usize)> = Vec::new();
    for &v in values.iter() {
        match groups.last_mut() {
            Some((rep, count)) if (v - *rep).abs() <= tol => *count += 1,
            _ => groups.push((v, 1)),
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pauli_x() -> CMat {
        CMat::from_row_slice(
            2,
            2,
            &[
                Complex64::new(0.0, 0.0),
                Complex64::new(1.0, 0.0),
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 0.0),
            ],
        )
    }

    #[test]
    fn eigh_orders_descending_and_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 2..=5 {
            let m = random_hermitian(n, 1.0, &mut rng);
            let eig = eigh(&m).unwrap();
            for k in 1..n {
                assert!(eig.values[k - 1] >= eig.values[k] - 1e-12);
            }
            let mut rebuilt = CMat::zeros(n, n);
            for k in 0..n {
                let v = eig.vectors.column(k).clone_owned();
                rebuilt += (&v * v.adjoint()).scale(eig.values[k]);
            }
            assert!((rebuilt - &m).norm() < 1e-10);
        }
    }

    #[test]
    fn expi_matches_power_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_hermitian(3, 0.8, &mut rng);
        let got = expi_hermitian(&h, -0.7).unwrap();
        // Independent oracle: truncated power series of exp(-0.7 i H).
        let a = h.map(|z| z * Complex64::new(0.0, -0.7));
        let mut term = CMat::identity(3, 3);
        let mut series = CMat::identity(3, 3);
        for k in 1..40 {
            term = &term * &a / Complex64::new(k as f64, 0.0);
            series += &term;
        }
        assert!((got - series).norm() < 1e-12);
    }

    #[test]
    fn log_unitary_diagonal_case() {
        let u = CMat::from_diagonal(&CVec::from_vec(vec![
            Complex64::from_polar(1.0, std::f64::consts::PI / 3.0),
            Complex64::from_polar(1.0, -std::f64::consts::PI / 4.0),
        ]));
        let log = log_unitary(&u).unwrap();
        assert!(!log.branch_cut);
        assert!((log.hermitian[(0, 0)].re - std::f64::consts::PI / 3.0).abs() < 1e-12);
        assert!((log.hermitian[(1, 1)].re + std::f64::consts::PI / 4.0).abs() < 1e-12);
        assert!(log.hermitian[(0, 1)].norm() < 1e-12);
    }

    #[test]
    fn log_unitary_identity_is_zero() {
        let log = log_unitary(&CMat::identity(3, 3)).unwrap();
        assert!(log.hermitian.norm() < 1e-12);
    }

    #[test]
    fn log_unitary_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..=5 {
            let u = random_unitary(n, &mut rng);
            let log = log_unitary(&u).unwrap();
            assert!(hermiticity_defect(&log.hermitian) < 1e-10);
            let back = expi_hermitian(&log.hermitian, 1.0).unwrap();
            assert!((back - &u).norm() < 1e-8, "roundtrip failed at n={n}");
        }
    }

    #[test]
    fn log_unitary_flags_branch_cut() {
        let u = CMat::from_diagonal(&CVec::from_vec(vec![
            Complex64::new(-1.0, 0.0),
            Complex64::new(1.0, 0.0),
        ]));
        let log = log_unitary(&u).unwrap();
        assert!(log.branch_cut);
        assert!((log.hermitian[(0, 0)].re - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn log_unitary_resolves_conjugate_angle_pairs() {
        // cos(theta) degenerate between +theta and -theta: stage two must
        // separate them.
        let theta = 1.1;
        let diag = CMat::from_diagonal(&CVec::from_vec(vec![
            Complex64::from_polar(1.0, theta),
            Complex64::from_polar(1.0, -theta),
        ]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_unitary(2, &mut rng);
        let u = &v * diag * v.adjoint();
        let log = log_unitary(&u).unwrap();
        let back = expi_hermitian(&log.hermitian, 1.0).unwrap();
        assert!((back - &u).norm() < 1e-9);
        let eig = eigh(&log.hermitian).unwrap();
        assert!((eig.values[0] - theta).abs() < 1e-9);
        assert!((eig.values[1] + theta).abs() < 1e-9);
    }

    #[test]
    fn vec_hermitian_zero_and_pauli_norm() {
        assert!(vec_hermitian(&CMat::zeros(3, 3)).unwrap().norm() == 0.0);
        let v = vec_hermitian(&pauli_x()).unwrap();
        assert!((v.dot(&v) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn vec_hermitian_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for n in 2..=4 {
            let a = random_hermitian(n, 1.0, &mut rng);
            let b = random_hermitian(n, 1.0, &mut rng);
            let va = vec_hermitian(&a).unwrap();
            let vb = vec_hermitian(&b).unwrap();
            assert!((trace_inner(&a, &b) - va.dot(&vb)).abs() < 1e-12);
            let back = unvec_hermitian(&va).unwrap();
            assert!((back - &a).norm() < 1e-14);
        }
    }

    #[test]
    fn vec_hermitian_rejects_non_hermitian() {
        let mut m = CMat::zeros(2, 2);
        m[(0, 1)] = Complex64::new(1.0, 0.0);
        assert!(matches!(
            vec_hermitian(&m),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn phase_average_limits() {
        assert!((phase_average(0.0) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        let x = 0.3;
        let direct = (Complex64::from_polar(1.0, x) - Complex64::new(1.0, 0.0))
            / Complex64::new(0.0, x);
        assert!((phase_average(x) - direct).norm() < 1e-14);
    }

    #[test]
    fn random_unitary_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in 2..=5 {
            let u = random_unitary(n, &mut rng);
            assert!(unitarity_defect(&u) < 1e-12);
        }
    }

    #[test]
    fn multiplicities_cluster() {
        let v = RVec::from_vec(vec![2.0, 2.0, 1.0, 0.0, 0.0, 0.0]);
        let m = multiplicities(&v, 1e-9);
        assert_eq!(
            m.iter().map(|&(_, c)| c).collect::<Vec<_>>(),
            vec![2, 1, 3]
        );
    }
}
