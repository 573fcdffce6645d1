//! Simulated projective/POVM measurements and maximum-likelihood density
//! matrix reconstruction with Fisher-information uncertainty bounds.
//!
//! The estimate is parameterized as `rho = T^dag T` with `T` lower
//! triangular (real diagonal), which guarantees positivity and Hermiticity;
//! the unit trace is maintained by renormalizing the N^2 real parameters
//! after every projected gradient-ascent iteration. The covariance of the
//! parameters is the constrained inverse of the Fisher information,
//! `V = I^+ - I^+ u u^T I^+ / (u^T I^+ u)` with `u` the trace-constraint
//! gradient, so `V u = 0`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gramian::Gramian;
use crate::linalg::{check_hermitian, eigh, CMat, RMat, RVec};
use crate::qdyn::DensityMatrix;

/// A set of complete measurements; each group of PSD effects sums to the
/// identity.
#[derive(Debug, Clone)]
pub struct PovmSet {
    pub groups: Vec<PovmGroup>,
}

#[derive(Debug, Clone)]
pub struct PovmGroup {
    pub label: String,
    pub effects: Vec<CMat>,
}

impl PovmSet {
    pub fn new(groups: Vec<PovmGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidPovm("no measurement groups".into()));
        }
        let n = groups[0].effects[0].nrows();
        for g in &groups {
            let mut sum = CMat::zeros(n, n);
            for (i, f) in g.effects.iter().enumerate() {
                check_hermitian(f, 1e-10, &format!("effect {i} of group {}", g.label))
                    .map_err(|e| Error::InvalidPovm(e.to_string()))?;
                let eig = eigh(f)?;
                if eig.values[eig.values.len() - 1] < -1e-10 {
                    return Err(Error::InvalidPovm(format!(
                        "effect {i} of group {} is not PSD",
                        g.label
                    )));
                }
                sum += f;
            }
            if (sum - CMat::identity(n, n)).norm() > 1e-10 {
                return Err(Error::InvalidPovm(format!(
                    "group {} does not sum to the identity",
                    g.label
                )));
            }
        }
        Ok(Self { groups })
    }

    pub fn dim(&self) -> usize {
        self.groups[0].effects[0].nrows()
    }

    /// Total number of effects across groups.
    pub fn effect_count(&self) -> usize {
        self.groups.iter().map(|g| g.effects.len()).sum()
    }

    /// Pauli X/Y/Z eigenprojector measurements for a qubit.
    pub fn pauli_qubit() -> Self {
        let c = |re: f64, im: f64| Complex64::new(re, im);
        let proj = |a: Complex64, b: Complex64| -> CMat {
            let v = crate::linalg::CVec::from_vec(vec![a, b]);
            &v * v.adjoint()
        };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let groups = vec![
            PovmGroup {
                label: "z".into(),
                effects: vec![proj(c(1., 0.), c(0., 0.)), proj(c(0., 0.), c(1., 0.))],
            },
            PovmGroup {
                label: "x".into(),
                effects: vec![
                    proj(c(s, 0.), c(s, 0.)),
                    proj(c(s, 0.), c(-s, 0.)),
                ],
            },
            PovmGroup {
                label: "y".into(),
                effects: vec![
                    proj(c(s, 0.), c(0., s)),
                    proj(c(s, 0.), c(0., -s)),
                ],
            },
        ];
        Self::new(groups).expect("Pauli projectors are a valid POVM set")
    }

    /// Informationally complete default: the eigenprojector measurement of
    /// every element of the standard orthonormal Hermitian basis.
    pub fn standard_basis_projectors(n: usize) -> Result<Self> {
        let mut groups = Vec::with_capacity(n * n);
        for k in 0..n * n {
            let mut unit = RVec::zeros(n * n);
            unit[k] = 1.0;
            let op = crate::linalg::unvec_hermitian(&unit)?;
            let eig = eigh(&op)?;
            let effects = (0..n)
                .map(|j| {
                    let v = eig.vectors.column(j).clone_owned();
                    &v * v.adjoint()
                })
                .collect();
            groups.push(PovmGroup {
                label: format!("b{k}"),
                effects,
            });
        }
        Self::new(groups)
    }
}

/// Observed counts per effect, per group, for a fixed shot budget.
#[derive(Debug, Clone)]
pub struct MeasurementRecord {
    pub counts: Vec<Vec<u64>>,
    pub shots: u64,
    pub seed: u64,
}

impl MeasurementRecord {
    pub fn total_counts(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Draw multinomial counts from the Born probabilities `p_i = Tr(rho F_i)`
/// for every measurement group; deterministic for a fixed seed.
pub fn simulate_measurements(
    rho: &DensityMatrix,
    povms: &PovmSet,
    shots: u64,
    seed: u64,
) -> Result<MeasurementRecord> {
    if shots == 0 {
        return Err(Error::InvalidInput("need at least one shot".into()));
    }
    if povms.dim() != rho.matrix.nrows() {
        return Err(Error::DimensionError(
            "POVM dimension does not match the state".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = Vec::with_capacity(povms.groups.len());
    for g in &povms.groups {
        let mut probs: Vec<f64> = Vec::with_capacity(g.effects.len());
        for f in &g.effects {
            let p = (&rho.matrix * f).trace().re;
            if p < -1e-12 {
                return Err(Error::InvalidPovm(format!(
                    "negative Born probability {p:e} in group {}",
                    g.label
                )));
            }
            probs.push(p.max(0.0));
        }
        let z: f64 = probs.iter().sum();
        if (z - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidPovm(format!(
                "group {} probabilities sum to {z}",
                g.label
            )));
        }
        let mut group_counts = vec![0u64; probs.len()];
        for _ in 0..shots {
            let mut u = rng.random::<f64>() * z;
            let mut chosen = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                if u < p {
                    chosen = i;
                    break;
                }
                u -= p;
            }
            group_counts[chosen] += 1;
        }
        counts.push(group_counts);
    }
    Ok(MeasurementRecord {
        counts,
        shots,
        seed,
    })
}

/// Maximum-likelihood estimate of a density matrix.
#[derive(Debug, Clone)]
pub struct MleEstimate {
    pub rho_hat: DensityMatrix,
    /// The N^2 real parameters of the lower-triangular factor T.
    pub t_params: RVec,
    /// Counts-weighted log-likelihood sum_i n_i ln Tr(T^dag T F_i).
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Per-accepted-iteration mean log-likelihood (non-decreasing).
    pub ll_history: Vec<f64>,
}

fn t_matrix(params: &RVec, n: usize) -> CMat {
    let mut t = CMat::zeros(n, n);
    for j in 0..n {
        t[(j, j)] = Complex64::new(params[j], 0.0);
    }
    let mut idx = n;
    for j in 1..n {
        for k in 0..j {
            t[(j, k)] = Complex64::new(params[idx], params[idx + 1]);
            idx += 2;
        }
    }
    t
}

/// Born probabilities p_i = Tr(T^dag T F_i) for all effects, flattened.
fn probabilities(t: &CMat, povms: &PovmSet) -> Vec<f64> {
    let rho = t.adjoint() * t;
    povms
        .groups
        .iter()
        .flat_map(|g| g.effects.iter().map(|f| (&rho * f).trace().re))
        .collect()
}

/// Derivatives d p_i / d t_a for one effect, written into `out`.
fn effect_derivatives(t: &CMat, effect: &CMat, n: usize, out: &mut RVec) {
    // p = Tr(T^dag T F): d p = 2 Re[(F T^dag)_{kj}] for the real parameter
    // at (j, k) and -2 Im[...] for the imaginary one.
    let w = effect * t.adjoint();
    for j in 0..n {
        out[j] = 2.0 * w[(j, j)].re;
    }
    let mut idx = n;
    for j in 1..n {
        for k in 0..j {
            out[idx] = 2.0 * w[(k, j)].re;
            out[idx + 1] = -2.0 * w[(k, j)].im;
            idx += 2;
        }
    }
}

/// Projected gradient ascent on the likelihood of the counts, with the
/// trace constraint enforced by renormalizing `||t|| = 1` each iteration.
///
/// Terminates when the mean log-likelihood gain drops below 1e-10, the
/// projected gradient norm drops below 1e-6, or after 10^4 iterations.
pub fn mle_reconstruct(record: &MeasurementRecord, povms: &PovmSet) -> Result<MleEstimate> {
    let n = povms.dim();
    if record.counts.len() != povms.groups.len()
        || record
            .counts
            .iter()
            .zip(povms.groups.iter())
            .any(|(c, g)| c.len() != g.effects.len())
    {
        return Err(Error::InvalidRecord(
            "count table shape does not match the POVM set".into(),
        ));
    }
    let total = record.total_counts();
    if total == 0 {
        return Err(Error::InvalidRecord("record has no counts".into()));
    }
    let counts: Vec<f64> = record
        .counts
        .iter()
        .flatten()
        .map(|&c| c as f64)
        .collect();
    let effects: Vec<&CMat> = povms
        .groups
        .iter()
        .flat_map(|g| g.effects.iter())
        .collect();
    let n_params = n * n;

    // Mean log-likelihood of normalized parameters.
    let mean_ll = |params: &RVec| -> f64 {
        let t = t_matrix(params, n);
        probabilities(&t, povms)
            .iter()
            .zip(counts.iter())
            .map(|(&p, &c)| c * p.max(1e-300).ln())
            .sum::<f64>()
            / total as f64
    };

    let mut params = RVec::zeros(n_params);
    for j in 0..n {
        params[j] = 1.0 / (n as f64).sqrt();
    }
    let mut ll = mean_ll(&params);
    let mut ll_history = vec![ll];
    let mut lr = 0.1;
    let mut converged = false;
    let mut iterations = 0usize;

    let mut deriv = RVec::zeros(n_params);
    for iter in 0..10_000 {
        iterations = iter + 1;
        let t = t_matrix(&params, n);
        let probs = probabilities(&t, povms);
        let mut grad = RVec::zeros(n_params);
        for (i, f) in effects.iter().enumerate() {
            if counts[i] == 0.0 {
                continue;
            }
            effect_derivatives(&t, f, n, &mut deriv);
            grad += deriv.scale(counts[i] / probs[i].max(1e-300));
        }
        grad /= total as f64;
        // Project out the trace-constraint direction u = 2 t.
        let radial = params.dot(&grad);
        let projected = &grad - params.scale(radial / params.norm_squared());
        if projected.norm() < 1e-6 {
            converged = true;
            break;
        }

        // Backtracking line search keeps the likelihood non-decreasing.
        let mut accepted = false;
        while lr > 1e-18 {
            let mut candidate = &params + projected.scale(lr);
            candidate /= candidate.norm();
            let cand_ll = mean_ll(&candidate);
            if cand_ll >= ll {
                let gain = cand_ll - ll;
                params = candidate;
                ll = cand_ll;
                ll_history.push(ll);
                lr = (lr * 1.3).min(10.0);
                accepted = true;
                if gain < 1e-10 {
                    converged = true;
                }
                break;
            }
            lr *= 0.5;
        }
        if !accepted || converged {
            converged = converged || !accepted;
            break;
        }
    }

    let t = t_matrix(&params, n);
    let mut rho = t.adjoint() * &t;
    let tr = rho.trace().re;
    rho /= Complex64::new(tr, 0.0);
    // Scrub rounding asymmetry before validation.
    let rho = (&rho + rho.adjoint()).scale(0.5);
    let rho_hat = DensityMatrix::new(rho)?;
    let log_likelihood = mean_ll(&params) * total as f64;
    Ok(MleEstimate {
        rho_hat,
        t_params: params,
        log_likelihood,
        iterations,
        converged,
        ll_history,
    })
}

/// Constrained covariance of the MLE parameters from the expected Fisher
/// information (the variance of the score): `V = I^+ - I^+ u u^T I^+ / (u^T I^+ u)`.
///
/// Returns the covariance and a rank-deficiency flag set when the Fisher
/// matrix needed a pseudo-inverse.
pub fn fisher_covariance(
    estimate: &MleEstimate,
    record: &MeasurementRecord,
    povms: &PovmSet,
) -> Result<(RMat, bool)> {
    let n = povms.dim();
    let n_params = n * n;
    let t = t_matrix(&estimate.t_params, n);
    let probs = probabilities(&t, povms);
    let mut fisher = RMat::zeros(n_params, n_params);
    let mut deriv = RVec::zeros(n_params);
    let shots = record.shots as f64;
    let mut idx = 0usize;
    for g in &povms.groups {
        for f in &g.effects {
            let p = probs[idx].max(1e-12);
            effect_derivatives(&t, f, n, &mut deriv);
            for a in 0..n_params {
                let da = deriv[a] * shots / p;
                for b in a..n_params {
                    fisher[(a, b)] += da * deriv[b];
                }
            }
            idx += 1;
        }
    }
    for a in 0..n_params {
        for b in 0..a {
            fisher[(a, b)] = fisher[(b, a)];
        }
    }

    let gram = Gramian::new(fisher)?;
    let rank_deficient = !matches!(gram.condition(), Ok(crate::gramian::Condition::Finite(_)));
    let u = estimate.t_params.scale(2.0);
    // I^+ applied columnwise to build the inverse, then the constrained
    // projection.
    let mut inv = RMat::zeros(n_params, n_params);
    for b in 0..n_params {
        let mut e = RVec::zeros(n_params);
        e[b] = 1.0;
        let col = gram.pinv_apply(&e, 1e-12);
        inv.set_column(b, &col);
    }
    let inv = (&inv + inv.transpose()).scale(0.5);
    let iu = &inv * &u;
    let denom = u.dot(&iu);
    if denom <= 0.0 {
        return Err(Error::NumericalFailure(
            "trace-constraint direction annihilated by the Fisher matrix".into(),
        ));
    }
    let mut v = inv.clone();
    for a in 0..n_params {
        for b in 0..n_params {
            v[(a, b)] -= iu[a] * iu[b] / denom;
        }
    }
    let v = (&v + v.transpose()).scale(0.5);
    Ok((v, rank_deficient))
}

/// Trace distance (1/2) || a - b ||_1 between density matrices.
pub fn trace_distance(a: &CMat, b: &CMat) -> Result<f64> {
    let eig = eigh(&(a - b))?;
    Ok(0.5 * eig.values.iter().map(|v| v.abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn qubit_rho(x: f64, y: f64, z: f64) -> DensityMatrix {
        let m = CMat::from_row_slice(
            2,
            2,
            &[
                c(0.5 * (1.0 + z), 0.0),
                c(0.5 * x, -0.5 * y),
                c(0.5 * x, 0.5 * y),
                c(0.5 * (1.0 - z), 0.0),
            ],
        );
        DensityMatrix::new(m).unwrap()
    }

    #[test]
    fn povm_groups_are_validated() {
        let povms = PovmSet::pauli_qubit();
        assert_eq!(povms.groups.len(), 3);
        assert_eq!(povms.effect_count(), 6);
        let ic = PovmSet::standard_basis_projectors(3).unwrap();
        assert_eq!(ic.groups.len(), 9);

        // A group that does not resolve the identity is rejected.
        let half = CMat::identity(2, 2).scale(0.4);
        assert!(PovmSet::new(vec![PovmGroup {
            label: "bad".into(),
            effects: vec![half.clone(), half],
        }])
        .is_err());
    }

    #[test]
    fn pure_state_measurements_are_deterministic_in_its_basis() {
        let rho = qubit_rho(0.0, 0.0, 1.0);
        let record = simulate_measurements(&rho, &PovmSet::pauli_qubit(), 500, 7).unwrap();
        assert_eq!(record.counts[0][0], 500);
        assert_eq!(record.counts[0][1], 0);
    }

    #[test]
    fn same_seed_reproduces_the_record() {
        let rho = qubit_rho(0.3, -0.2, 0.4);
        let povms = PovmSet::pauli_qubit();
        let a = simulate_measurements(&rho, &povms, 2000, 42).unwrap();
        let b = simulate_measurements(&rho, &povms, 2000, 42).unwrap();
        assert_eq!(a.counts, b.counts);
        let c = simulate_measurements(&rho, &povms, 2000, 43).unwrap();
        assert_ne!(a.counts, c.counts);
    }

    #[test]
    fn maximally_mixed_frequencies_stay_within_binomial_bounds() {
        let rho = qubit_rho(0.0, 0.0, 0.0);
        let shots = 100_000u64;
        let record = simulate_measurements(&rho, &PovmSet::pauli_qubit(), shots, 11).unwrap();
        let sigma = 0.5 / (shots as f64).sqrt();
        for group in &record.counts {
            assert_eq!(group.iter().sum::<u64>(), shots);
            let f = group[0] as f64 / shots as f64;
            assert!((f - 0.5).abs() < 3.0 * sigma, "frequency {f}");
        }
    }

    fn exact_record(rho: &DensityMatrix, povms: &PovmSet, shots: u64) -> MeasurementRecord {
        let counts = povms
            .groups
            .iter()
            .map(|g| {
                g.effects
                    .iter()
                    .map(|f| ((&rho.matrix * f).trace().re * shots as f64).round() as u64)
                    .collect()
            })
            .collect();
        MeasurementRecord {
            counts,
            shots,
            seed: 0,
        }
    }

    #[test]
    fn mle_recovers_the_maximally_mixed_state_from_exact_frequencies() {
        let rho = qubit_rho(0.0, 0.0, 0.0);
        let povms = PovmSet::pauli_qubit();
        let record = exact_record(&rho, &povms, 10_000);
        let est = mle_reconstruct(&record, &povms).unwrap();
        assert!((&est.rho_hat.matrix - &rho.matrix).norm() < 1e-6);
    }

    #[test]
    fn mle_recovers_a_pure_state_from_exact_frequencies() {
        let rho = qubit_rho(0.0, 0.0, 1.0);
        let povms = PovmSet::pauli_qubit();
        let record = exact_record(&rho, &povms, 10_000);
        let est = mle_reconstruct(&record, &povms).unwrap();
        assert!(
            (&est.rho_hat.matrix - &rho.matrix).norm() < 1e-6,
            "distance {}",
            (&est.rho_hat.matrix - &rho.matrix).norm()
        );
    }

    #[test]
    fn mle_is_close_in_trace_distance_for_sampled_counts() {
        let rho = qubit_rho(0.4, 0.1, -0.5);
        let povms = PovmSet::pauli_qubit();
        let record = simulate_measurements(&rho, &povms, 10_000, 3).unwrap();
        let est = mle_reconstruct(&record, &povms).unwrap();
        let d = trace_distance(&est.rho_hat.matrix, &rho.matrix).unwrap();
        assert!(d < 0.05, "trace distance {d}");
        // Positivity by construction.
        let min_eig = est.rho_hat.spectrum[est.rho_hat.spectrum.len() - 1];
        assert!(min_eig >= -1e-12);
    }

    #[test]
    fn mle_likelihood_history_is_monotone() {
        let rho = qubit_rho(-0.3, 0.5, 0.2);
        let povms = PovmSet::pauli_qubit();
        let record = simulate_measurements(&rho, &povms, 5_000, 17).unwrap();
        let est = mle_reconstruct(&record, &povms).unwrap();
        for pair in est.ll_history.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-15);
        }
        assert!(est.converged);
    }

    #[test]
    fn mle_rejects_empty_records() {
        let povms = PovmSet::pauli_qubit();
        let record = MeasurementRecord {
            counts: vec![vec![0, 0], vec![0, 0], vec![0, 0]],
            shots: 0,
            seed: 0,
        };
        assert!(matches!(
            mle_reconstruct(&record, &povms),
            Err(Error::InvalidRecord(_))
        ));
    }

    #[test]
    fn fisher_covariance_annihilates_the_constraint_direction() {
        let rho = qubit_rho(0.2, -0.4, 0.3);
        let povms = PovmSet::pauli_qubit();
        let record = simulate_measurements(&rho, &povms, 10_000, 5).unwrap();
        let est = mle_reconstruct(&record, &povms).unwrap();
        let (v, _) = fisher_covariance(&est, &record, &povms).unwrap();
        let u = est.t_params.scale(2.0);
        assert!((&v * &u).norm() < 1e-8 * v.norm().max(1.0));
        // Symmetric PSD within tolerance.
        assert!((&v - v.transpose()).norm() < 1e-10);
        let eig = nalgebra::linalg::SymmetricEigen::new(v.clone());
        for &lambda in eig.eigenvalues.iter() {
            assert!(lambda > -1e-8 * v.norm());
        }
    }

    #[test]
    fn doubling_shots_halves_the_variances() {
        let rho = qubit_rho(0.2, -0.4, 0.3);
        let povms = PovmSet::pauli_qubit();
        let r1 = simulate_measurements(&rho, &povms, 10_000, 5).unwrap();
        let r2 = simulate_measurements(&rho, &povms, 20_000, 5).unwrap();
        let e1 = mle_reconstruct(&r1, &povms).unwrap();
        let e2 = mle_reconstruct(&r2, &povms).unwrap();
        let (v1, _) = fisher_covariance(&e1, &r1, &povms).unwrap();
        let (v2, _) = fisher_covariance(&e2, &r2, &povms).unwrap();
        for a in 0..4 {
            let ratio = v1[(a, a)] / v2[(a, a)];
            assert!(
                (ratio - 2.0).abs() < 0.4,
                "variance ratio {ratio} at parameter {a}"
            );
        }
    }

    #[test]
    fn estimates_tighten_with_more_shots() {
        let rho = qubit_rho(0.5, -0.1, 0.2);
        let povms = PovmSet::pauli_qubit();
        let mut medians = Vec::new();
        for &shots in &[1_000u64, 10_000, 100_000] {
            let mut dists: Vec<f64> = (0..5)
                .map(|seed| {
                    let rec = simulate_measurements(&rho, &povms, shots, seed).unwrap();
                    let est = mle_reconstruct(&rec, &povms).unwrap();
                    trace_distance(&est.rho_hat.matrix, &rho.matrix).unwrap()
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(dists[2]);
        }
        assert!(medians[0] > medians[1] && medians[1] > medians[2]);
    }
}
