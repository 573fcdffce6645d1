//! Run configuration: a single JSON file with explicit [re, im] complex
//! pairs and row-major matrices, validated against the system dimension on
//! load. Omitted fields take the documented defaults (q = 501, p = 201,
//! ds = 0.005, algorithm = grad).

use anyhow::{anyhow, bail, Context, Result};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use qtrack::linalg::{CMat, RVec};
use qtrack::qdyn::{DensityMatrix, MorphEndpoints, Observable, SystemModel, TimeGrid};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub system: SystemSection,
    /// Initial density matrix, row-major [re, im] pairs.
    pub rho0: Vec<[f64; 2]>,
    /// Objective observable, row-major [re, im] pairs.
    pub theta: Vec<[f64; 2]>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub options: OptionsSection,
    #[serde(default)]
    pub initial_field: InitialField,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n: usize,
    pub h0: Vec<[f64; 2]>,
    pub mu: Vec<[f64; 2]>,
    #[serde(default)]
    pub morph_start: Option<MatrixPair>,
    #[serde(default)]
    pub morph_end: Option<MatrixPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixPair {
    pub h0: Vec<[f64; 2]>,
    pub mu: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_ds")]
    pub ds: f64,
    /// Algorithmic time budget; defaults to ds * (p - 1).
    #[serde(default)]
    pub s_max: Option<f64>,
}

fn default_t_final() -> f64 {
    10.0
}
fn default_q() -> usize {
    501
}
fn default_p() -> usize {
    201
}
fn default_ds() -> f64 {
    0.005
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            t_final: default_t_final(),
            q: default_q(),
            p: default_p(),
            ds: default_ds(),
            s_max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Grad,
    Utrack,
    Vtrack,
    Strack,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Grad => "grad",
            Algorithm::Utrack => "utrack",
            Algorithm::Vtrack => "vtrack",
            Algorithm::Strack => "strack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionChoice {
    #[default]
    Combined,
    Separate,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetChoice {
    /// Optimum-manifold representative nearest to the starting propagator.
    #[default]
    Nearest,
    /// The canonical eigenvector-alignment representative.
    Canonical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsSection {
    /// Error-correction gain for observable tracking (default 1/ds).
    #[serde(default)]
    pub beta: Option<f64>,
    /// Fluence-minimizing free function with W(t) = 1.
    #[serde(default)]
    pub fluence: bool,
    /// Abort on ill-conditioned correlation matrices instead of degrading
    /// to the pseudo-inverse.
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub correction: CorrectionChoice,
    /// Number of orthogonal observables for vtrack (default: N).
    #[serde(default)]
    pub observables: Option<usize>,
    /// Classical RK4 for the s-update (default: explicit Euler).
    #[serde(default)]
    pub rk4: bool,
    /// Correction-only steps appended after a unitary tracking schedule.
    #[serde(default)]
    pub polish_steps: usize,
    #[serde(default)]
    pub target: TargetChoice,
    /// Scalar-tracking ramp endpoint (default: the kinematic optimum).
    #[serde(default)]
    pub ramp_to: Option<f64>,
    /// Enable Hamiltonian morphing over the schedule (requires endpoints).
    #[serde(default)]
    pub morphing: bool,
}

impl Default for OptionsSection {
    fn default() -> Self {
        Self {
            beta: None,
            fluence: false,
            strict: false,
            correction: CorrectionChoice::default(),
            observables: None,
            rk4: false,
            polish_steps: 0,
            target: TargetChoice::default(),
            ramp_to: None,
            morphing: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialField {
    Zero,
    Constant {
        value: f64,
    },
    /// Uniform per-sample noise in [-amplitude, amplitude], seeded.
    Random {
        amplitude: f64,
    },
    /// amplitude * cos(frequency * t + phase).
    Resonant {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl Default for InitialField {
    fn default() -> Self {
        InitialField::Random { amplitude: 0.1 }
    }
}

/// A fully validated configuration with constructed model objects.
#[derive(Debug)]
pub struct RunConfig {
    pub raw: RawConfig,
    pub model: SystemModel,
    pub rho: DensityMatrix,
    pub theta: Observable,
    pub time_grid: TimeGrid,
    pub s_max: f64,
    pub seed: u64,
}

fn parse_matrix(entries: &[[f64; 2]], n: usize, field: &str) -> Result<CMat> {
    if entries.len() != n * n {
        bail!(
            "config error at {field}: expected {} entries for a {n}x{n} matrix, got {}",
            n * n,
            entries.len()
        );
    }
    for (k, e) in entries.iter().enumerate() {
        if !e[0].is_finite() || !e[1].is_finite() {
            bail!("config error at {field}[{k}]: non-finite entry");
        }
    }
    Ok(CMat::from_fn(n, n, |i, j| {
        let e = entries[i * n + j];
        Complex64::new(e[0], e[1])
    }))
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let raw: RawConfig = serde_json::from_str(&text)
        .map_err(|e| anyhow!("config error: {e}"))?;
    validate(raw)
}

pub fn validate(raw: RawConfig) -> Result<RunConfig> {
    let n = raw.system.n;
    if n < 2 {
        bail!("config error at system.n: dimension must be at least 2, got {n}");
    }
    let h0 = parse_matrix(&raw.system.h0, n, "system.h0")?;
    let mu = parse_matrix(&raw.system.mu, n, "system.mu")?;
    let mut model = SystemModel::new(h0, mu)
        .map_err(|e| anyhow!("config error at system: {e}"))?;
    match (&raw.system.morph_start, &raw.system.morph_end) {
        (Some(start), Some(end)) => {
            let endpoints = MorphEndpoints {
                h0_start: parse_matrix(&start.h0, n, "system.morph_start.h0")?,
                mu_start: parse_matrix(&start.mu, n, "system.morph_start.mu")?,
                h0_end: parse_matrix(&end.h0, n, "system.morph_end.h0")?,
                mu_end: parse_matrix(&end.mu, n, "system.morph_end.mu")?,
            };
            model = model
                .with_morph(endpoints)
                .map_err(|e| anyhow!("config error at system.morph_start/morph_end: {e}"))?;
        }
        (None, None) => {}
        _ => bail!(
            "config error at system: morph_start and morph_end must be supplied together"
        ),
    }

    let rho_m = parse_matrix(&raw.rho0, n, "rho0")?;
    let rho = DensityMatrix::new(rho_m).map_err(|e| anyhow!("config error at rho0: {e}"))?;
    let theta_m = parse_matrix(&raw.theta, n, "theta")?;
    let theta = Observable::new(theta_m).map_err(|e| anyhow!("config error at theta: {e}"))?;

    let g = &raw.grid;
    if g.p < 2 {
        bail!("config error at grid.p: need at least 2 algorithmic steps");
    }
    if !(g.ds > 0.0) {
        bail!("config error at grid.ds: step must be positive");
    }
    let time_grid = TimeGrid::new(g.t_final, g.q)
        .map_err(|e| anyhow!("config error at grid: {e}"))?;
    let s_max = g.s_max.unwrap_or(g.ds * (g.p - 1) as f64);
    if !(s_max > 0.0) {
        bail!("config error at grid.s_max: must be positive");
    }
    if let Some(beta) = raw.options.beta {
        if beta < 0.0 {
            bail!("config error at options.beta: gain must be nonnegative");
        }
    }
    if let Some(m) = raw.options.observables {
        if m == 0 || m > n * n {
            bail!(
                "config error at options.observables: must be in 1..={} for dimension {n}",
                n * n
            );
        }
    }
    if raw.options.morphing && model.morph.is_none() {
        bail!("config error at options.morphing: no morph endpoints configured");
    }

    let seed = raw.seed;
    Ok(RunConfig {
        raw,
        model,
        rho,
        theta,
        time_grid,
        s_max,
        seed,
    })
}

impl RunConfig {
    /// Materialize the seeded initial field row.
    pub fn initial_row(&self) -> RVec {
        let q = self.time_grid.q;
        match &self.raw.initial_field {
            InitialField::Zero => RVec::zeros(q),
            InitialField::Constant { value } => RVec::from_element(q, *value),
            InitialField::Random { amplitude } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                RVec::from_fn(q, |_, _| amplitude * (rng.random::<f64>() * 2.0 - 1.0))
            }
            InitialField::Resonant {
                amplitude,
                frequency,
                phase,
            } => RVec::from_fn(q, |j, _| {
                let t = self.time_grid.time(j);
                amplitude * (frequency * t + phase).cos()
            }),
        }
    }

    /// Stable fingerprint of the physical problem, for compatibility checks
    /// in comparison reports.
    pub fn fingerprint(&self) -> String {
        let mut text = format!(
            "n={};T={:.12e};q={}",
            self.raw.system.n, self.raw.grid.t_final, self.raw.grid.q
        );
        let mut push = |m: &CMat| {
            for z in m.iter() {
                text.push_str(&format!("{:.12e},{:.12e};", z.re, z.im));
            }
        };
        push(&self.model.h0);
        push(&self.model.mu);
        push(&self.rho.matrix);
        push(&self.theta.matrix);
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "system": {
                "n": 2,
                "h0": [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [-1.0, 0.0]],
                "mu": [[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]
            },
            "rho0": [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
            "theta": [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [-1.0, 0.0]]
        })
    }

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let raw: RawConfig = serde_json::from_value(minimal()).unwrap();
        let cfg = validate(raw).unwrap();
        assert_eq!(cfg.raw.grid.q, 501);
        assert_eq!(cfg.raw.grid.p, 201);
        assert!((cfg.raw.grid.ds - 0.005).abs() < 1e-15);
        assert_eq!(cfg.raw.algorithm, Algorithm::Grad);
        assert!((cfg.s_max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_system_dimension_is_reported_by_name() {
        let mut v = minimal();
        v["system"].as_object_mut().unwrap().remove("n");
        let err = serde_json::from_value::<RawConfig>(v).unwrap_err();
        assert!(err.to_string().contains("missing field `n`"), "{err}");
    }

    #[test]
    fn non_hermitian_matrices_are_rejected_with_field_path() {
        let mut v = minimal();
        v["theta"][1] = serde_json::json!([0.5, 0.0]);
        let raw: RawConfig = serde_json::from_value(v).unwrap();
        let err = validate(raw).unwrap_err().to_string();
        assert!(err.contains("theta"), "{err}");
    }

    #[test]
    fn morph_dimension_mismatch_is_rejected() {
        let mut v = minimal();
        v["system"]["morph_start"] = serde_json::json!({
            "h0": [[0.0, 0.0]],
            "mu": [[0.0, 0.0]]
        });
        v["system"]["morph_end"] = serde_json::json!({
            "h0": [[0.0, 0.0]],
            "mu": [[0.0, 0.0]]
        });
        let raw: RawConfig = serde_json::from_value(v).unwrap();
        let err = validate(raw).unwrap_err().to_string();
        assert!(err.contains("morph_start"), "{err}");
    }

    #[test]
    fn initial_fields_are_deterministic_per_seed() {
        let mut v = minimal();
        v["initial_field"] = serde_json::json!({"kind": "random", "amplitude": 0.2});
        v["seed"] = serde_json::json!(7);
        let raw: RawConfig = serde_json::from_value(v).unwrap();
        let cfg = validate(raw).unwrap();
        let a = cfg.initial_row();
        let b = cfg.initial_row();
        assert_eq!(a, b);
        assert!(a.amax() <= 0.2);
    }

    #[test]
    fn fingerprint_tracks_the_physical_problem() {
        let raw: RawConfig = serde_json::from_value(minimal()).unwrap();
        let base = validate(raw).unwrap().fingerprint();
        let mut v = minimal();
        v["theta"][0] = serde_json::json!([2.0, 0.0]);
        let other: RawConfig = serde_json::from_value(v).unwrap();
        assert_ne!(base, validate(other).unwrap().fingerprint());
    }
}
