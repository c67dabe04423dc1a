//! Experiment configuration: one JSON key-tree, strictly validated,
//! canonically re-emittable, and content-hashed for the run manifest.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use amp_evolve_core::denoisers::DenoiserSpec;
use amp_evolve_core::ensembles::{validate as validate_ensemble, EnsembleSpec, EntryRule};
use amp_evolve_core::ScalarDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[clap(rename_all = "kebab-case")]
pub enum Mode {
    RunAmp,
    SePredict,
    VerifyTheorem1,
    VerifyPropositions,
    UniversalitySweep,
    ValidateEnsemble,
}

/// Problem dimensions: N plus either n or the aspect ratio ρ = n/N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeSpec {
    #[serde(rename = "N")]
    pub big_n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

impl SizeSpec {
    /// Resolved (n, N); ρ·N is rounded to the nearest integer and the
    /// rounding is reported in the manifest via the resolved value.
    pub fn resolve(&self) -> Result<(usize, usize), String> {
        match (self.n, self.rho) {
            (Some(n), None) => Ok((n, self.big_n)),
            (None, Some(rho)) => {
                if !(rho > 0.0 && rho <= 1.0) {
                    return Err(format!("rho = {rho} outside (0, 1]"));
                }
                let n = (rho * self.big_n as f64).round() as usize;
                if n == 0 {
                    return Err("rho*N rounds to zero".into());
                }
                Ok((n, self.big_n))
            }
            (Some(n), Some(rho)) => {
                let implied = (rho * self.big_n as f64).round() as usize;
                if implied != n {
                    return Err(format!("n = {n} inconsistent with rho*N = {implied}"));
                }
                Ok((n, self.big_n))
            }
            (None, None) => Err("size needs either n or rho".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// C in the C/√n tolerance for the inner-product identities.
    pub inner_c: f64,
    /// Relative tolerance on the SE-deviation statistic.
    pub se_rel: f64,
    /// Across-ensemble spread tolerance (relative to max(σ_t², 1e-3)).
    pub spread_rel: f64,
    /// KS threshold for h¹ Gaussianity.
    pub ks_h1: f64,
    /// KS threshold for the bilinear check.
    pub ks_bilinear: f64,
    /// Variance band for the bilinear check.
    pub bilinear_var: (f64, f64),
    /// Relative Frobenius residual for conditional resampling.
    pub resample_residual: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            inner_c: 8.0,
            se_rel: 0.10,
            spread_rel: 0.05,
            ks_h1: 0.04,
            ks_bilinear: 0.04,
            bilinear_var: (0.9, 1.1),
            resample_residual: 1e-8,
        }
    }
}

fn default_kappa() -> f64 {
    1.1402
}

fn default_iterations() -> usize {
    10
}

fn default_replications() -> usize {
    20
}

fn default_quadrature() -> usize {
    64
}

fn default_mc_budget() -> usize {
    1_000_000
}

/// A named ensemble entry for the universality sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedEnsemble {
    pub name: String,
    #[serde(flatten)]
    pub spec: EnsembleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
    /// Sweep-only: the ensembles compared under shared signals and seeds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ensembles: Vec<NamedEnsemble>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signal: Option<ScalarDistribution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<ScalarDistribution>,
    /// Custom denoisers; verify modes default to the CS adapter when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<DenoiserSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g: Option<DenoiserSpec>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// None = ∞ (cold start).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_init: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<SizeSpec>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_quadrature")]
    pub quadrature_order: usize,
    #[serde(default = "default_mc_budget")]
    pub mc_budget: usize,
    /// σ_0² override; the CS default is the analytic E[X0²]/ρ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma0_sq: Option<f64>,
    /// Iterations whose full vectors are kept/exported.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retain: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Parse failures carry the source location; semantic failures carry the
/// offending field.
#[derive(Debug)]
pub enum ConfigError {
    Parse { line: usize, column: usize, message: String },
    Semantic(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Parse { line, column, message } => {
                write!(f, "config parse error at line {line} column {column}: {message}")
            }
            ConfigError::Semantic(m) => write!(f, "config error: {m}"),
        }
    }
}

/// The standard four-ensemble sweep set.
pub fn standard_ensembles(alpha: f64) -> Vec<NamedEnsemble> {
    use ScalarDistribution::*;
    let uniform = UniformSym { halfwidth: 3f64.sqrt() };
    vec![
        NamedEnsemble {
            name: "gaussian".into(),
            spec: EnsembleSpec {
                rule: EntryRule::Homogeneous { dist: Gaussian { mean: 0.0, var: 1.0 } },
                alpha,
            },
        },
        NamedEnsemble {
            name: "rademacher".into(),
            spec: EnsembleSpec {
                rule: EntryRule::Homogeneous { dist: Rademacher },
                alpha,
            },
        },
        NamedEnsemble {
            name: "checkerboard".into(),
            spec: EnsembleSpec {
                rule: EntryRule::Checkerboard { even: Rademacher, odd: uniform.clone() },
                alpha,
            },
        },
        NamedEnsemble {
            name: "position_hash".into(),
            spec: EnsembleSpec {
                rule: EntryRule::PositionHash {
                    dists: vec![Gaussian { mean: 0.0, var: 1.0 }, Rademacher, uniform],
                    salt: 0,
                },
                alpha,
            },
        },
    ]
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    validate_config(&cfg)?;
    Ok(cfg)
}

fn require<T>(opt: &Option<T>, what: &str, mode: Mode) -> Result<(), ConfigError> {
    if opt.is_none() {
        return Err(ConfigError::Semantic(format!("{what} is required for mode {mode:?}")));
    }
    Ok(())
}

pub fn validate_config(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    if cfg.iterations == 0 {
        return Err(ConfigError::Semantic("iterations must be >= 1".into()));
    }
    if cfg.replications == 0 {
        return Err(ConfigError::Semantic("replications must be >= 1".into()));
    }
    if !(2..=256).contains(&cfg.quadrature_order) {
        return Err(ConfigError::Semantic(format!(
            "quadrature_order {} outside [2, 256]",
            cfg.quadrature_order
        )));
    }
    let needs_size = cfg.mode != Mode::ValidateEnsemble;
    if needs_size {
        require(&cfg.size, "size", cfg.mode)?;
        cfg.size.unwrap().resolve().map_err(ConfigError::Semantic)?;
    }
    match cfg.mode {
        Mode::ValidateEnsemble => {
            require(&cfg.ensemble, "ensemble", cfg.mode)?;
        }
        Mode::SePredict => {
            require(&cfg.signal, "signal", cfg.mode)?;
            require(&cfg.noise, "noise", cfg.mode)?;
        }
        Mode::UniversalitySweep => {
            require(&cfg.signal, "signal", cfg.mode)?;
            require(&cfg.noise, "noise", cfg.mode)?;
        }
        _ => {
            require(&cfg.ensemble, "ensemble", cfg.mode)?;
            require(&cfg.signal, "signal", cfg.mode)?;
            require(&cfg.noise, "noise", cfg.mode)?;
        }
    }
    // every referenced ensemble must validate (mean 0, variance 1,
    // alpha > 1) — except in validate-ensemble mode, whose whole job is
    // to produce that report
    if cfg.mode != Mode::ValidateEnsemble {
        let mut specs: Vec<(&str, &EnsembleSpec)> = Vec::new();
        if let Some(e) = &cfg.ensemble {
            specs.push(("ensemble", e));
        }
        for ne in &cfg.ensembles {
            specs.push((ne.name.as_str(), &ne.spec));
        }
        for (name, spec) in specs {
            let report = validate_ensemble(spec);
            if !report.pass {
                let detail = serde_json::to_string(&report).unwrap_or_default();
                return Err(ConfigError::Semantic(format!(
                    "ensemble '{name}' failed validation: {detail}"
                )));
            }
        }
    }
    for (label, d) in [("signal", &cfg.signal), ("noise", &cfg.noise)] {
        if let Some(dist) = d {
            dist.validate()
                .map_err(|e| ConfigError::Semantic(format!("{label}: {e}")))?;
        }
    }
    Ok(())
}

/// Canonical JSON of the parsed config: field order is fixed by the struct,
/// defaults are materialized.
pub fn emit_canonical(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

/// Hash of the canonical form; changes iff a semantic field changes.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut h = Sha256::new();
    h.update(emit_canonical(cfg).as_bytes());
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "mode": "run-amp",
        "ensemble": {"rule": {"type": "homogeneous", "dist": {"type": "gaussian", "mean": 0.0, "var": 1.0}}, "alpha": 2.0},
        "signal": {"type": "bernoulli_gaussian", "eps": 0.1, "var": 1.0},
        "noise": {"type": "gaussian", "mean": 0.0, "var": 1e-4},
        "size": {"N": 1000, "rho": 0.5}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.replications, 20);
        assert_eq!(cfg.quadrature_order, 64);
        assert!((cfg.kappa - 1.1402).abs() < 1e-12);
        assert_eq!(cfg.size.unwrap().resolve().unwrap(), (500, 1000));
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let bad = MINIMAL.replace("\"mode\"", "\"nonsense\": 1, \"mode\"");
        match parse_config(&bad) {
            Err(ConfigError::Parse { line, .. }) => assert!(line >= 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_entry_variance_is_semantic() {
        let bad = MINIMAL.replace("\"var\": 1.0}}, \"alpha\"", "\"var\": 0.9}}, \"alpha\"");
        match parse_config(&bad) {
            Err(ConfigError::Semantic(msg)) => assert!(msg.contains("failed validation")),
            other => panic!("expected semantic error, got {other:?}"),
        }
    }

    // [DERIVED] canonicalization oracle: emit-canonical then re-parse
    // reproduces the identical config.
    #[test]
    fn canonical_round_trip() {
        let cfg = parse_config(MINIMAL).unwrap();
        let canon = emit_canonical(&cfg);
        let cfg2 = parse_config(&canon).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(config_hash(&cfg), config_hash(&cfg2));
    }

    #[test]
    fn hash_tracks_semantic_changes() {
        let cfg = parse_config(MINIMAL).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.seed = 99;
        assert_ne!(config_hash(&cfg), config_hash(&cfg2));
        let reparsed = parse_config(&emit_canonical(&cfg)).unwrap();
        assert_eq!(config_hash(&cfg), config_hash(&reparsed));
    }

    #[test]
    fn size_consistency() {
        let s = SizeSpec { big_n: 1000, n: Some(400), rho: Some(0.5) };
        assert!(s.resolve().is_err());
        let s2 = SizeSpec { big_n: 1000, n: Some(500), rho: Some(0.5) };
        assert_eq!(s2.resolve().unwrap(), (500, 1000));
    }
}
