use std::path::{Path, PathBuf};

use neurosc::activation::Activation;
use neurosc::compiler::{CompileConfig, FunctionSpec};
use neurosc::fk::{OrderedCouplingSpec, DEFAULT_SWEEP};
use neurosc::integrate::IntegratorConfig;
use neurosc::operators::OperatorSpec;
use neurosc::oscillator::MultiLayerOscillator;
use neurosc::signal::InputEnsemble;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a run reads. Every section is optional; `seed` must come from
/// the file or from `--seed`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Input ensemble; its own `seed` is replaced by the run seed.
    #[serde(default)]
    pub ensemble: InputEnsemble,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub transform: TransformSection,
    #[serde(default)]
    pub reconstruct: ReconstructSection,
    #[serde(default)]
    pub compile: CompileSection,
    #[serde(default)]
    pub approx: ApproxSection,
    #[serde(default)]
    pub fk: FkSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    /// Random instance with two inputs and layer widths in 1..=4.
    Random {
        layers: usize,
        act: Activation,
        #[serde(default)]
        zero_bias: bool,
    },
    Explicit { oscillator: MultiLayerOscillator },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// Ensemble sample `index`, with the ensemble dimension set to the network's input dimension.
    Ensemble { index: u64 },
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub network: NetworkSpec,
    pub input: InputSpec,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            network: NetworkSpec::Random {
                layers: 3,
                act: Activation::Tanh,
                zero_bias: false,
            },
            input: InputSpec::Ensemble { index: 0 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSection {
    pub omegas: Vec<f64>,
    pub act: Activation,
    pub tol: f64,
    /// Scales `2^0, 2^-1, …` in the calibration sweep.
    pub sweep_points: usize,
    /// Ensemble samples used for the transform identity check.
    pub identity_inputs: usize,
}

impl Default for TransformSection {
    fn default() -> Self {
        Self {
            omegas: vec![1.0, 3.0, 10.0],
            act: Activation::Tanh,
            tol: 1e-3,
            sweep_points: 10,
            identity_inputs: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructSection {
    /// Target as a fraction of the ensemble sup bound.
    pub target_fraction: f64,
    /// Lag window; the whole interval when absent.
    pub window: Option<f64>,
    /// Ensemble sample shown in `reconstruction.csv`.
    pub sample_index: u64,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        Self {
            target_fraction: 0.05,
            window: None,
            sample_index: 1 << 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Ensemble,
    /// Ensemble samples plus a random offset, ramped in over `[-t0, 0]`.
    Warmup { offset_amp: f64, t0: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompileSection {
    pub operator: OperatorSpec,
    pub family: FamilySpec,
    /// Compiler settings; `seed` is replaced by the run seed.
    pub settings: CompileConfig,
}

impl Default for CompileSection {
    fn default() -> Self {
        Self {
            operator: OperatorSpec::Delay { dim: 1, delay: 0.2 },
            family: FamilySpec::Ensemble,
            settings: CompileConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproxSection {
    pub function: FunctionSpec,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n_steps: usize,
    pub eps: f64,
    pub probe_count: usize,
    pub settings: CompileConfig,
}

impl Default for ApproxSection {
    fn default() -> Self {
        Self {
            function: FunctionSpec::Identity,
            lo: vec![-1.0],
            hi: vec![1.0],
            n_steps: 2000,
            eps: 0.1,
            probe_count: 16,
            settings: CompileConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FkSection {
    /// Coupling structure; `seed` is replaced by the run seed.
    pub structure: OrderedCouplingSpec,
    pub eps_list: Vec<f64>,
    pub forcing_amp: f64,
    pub forcing_freq: f64,
}

impl Default for FkSection {
    fn default() -> Self {
        Self {
            structure: OrderedCouplingSpec::default(),
            eps_list: DEFAULT_SWEEP.to_vec(),
            forcing_amp: 0.5,
            forcing_freq: 1.3,
        }
    }
}

/// A parsed config with the seed and output directory settled.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// SHA-256 of the resolved config in canonical JSON.
    pub hash: String,
}

pub fn parse(text: &str, origin: &str) -> Result<RunConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            parse(&text, &p.display().to_string())
        }
    }
}

pub fn resolve(mut config: RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<Resolved, CliError> {
    let seed = seed.or(config.seed).ok_or_else(|| {
        CliError::Config("a seed is required: set \"seed\" in the config or pass --seed".into())
    })?;
    config.seed = Some(seed);
    config.ensemble.seed = seed;
    config.compile.settings.seed = seed;
    config.approx.settings.seed = seed;
    config.fk.structure.seed = seed;
    let out = out.or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    // The hash covers what determines the numbers, not where they are written.
    config.out = None;
    config
        .ensemble
        .validate()
        .and_then(|_| config.integrator.validate())
        .map_err(|e| CliError::Config(format!("ensemble/integrator: {e}")))?;
    let canonical = serde_json::to_string(&config).map_err(|e| CliError::Config(e.to_string()))?;
    let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
    config.out = Some(out.clone());
    Ok(Resolved { config, seed, out, hash })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        let c = parse("{}", "t").unwrap();
        assert!(c.seed.is_none());
        assert_eq!(c.transform.omegas, vec![1.0, 3.0, 10.0]);
        assert!(resolve(c.clone(), None, None).is_err());
        let r = resolve(c, Some(4), None).unwrap();
        assert_eq!(r.config.ensemble.seed, 4);
        assert_eq!(r.hash.len(), 64);
    }

    #[test]
    fn unknown_field_is_named() {
        let e = parse("{\n  \"seed\": 1,\n  \"sed\": 2\n}", "cfg.json").unwrap_err().to_string();
        assert!(e.contains("sed") && e.contains("line 3"), "{e}");
    }

    #[test]
    fn hash_follows_content() {
        let a = resolve(parse(r#"{"seed": 1}"#, "t").unwrap(), None, None).unwrap();
        let b = resolve(parse(r#"{"seed": 1}"#, "t").unwrap(), None, None).unwrap();
        let c = resolve(parse(r#"{"seed": 2}"#, "t").unwrap(), None, None).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
        let d = resolve(parse(r#"{"seed": 1}"#, "t").unwrap(), None, Some("elsewhere".into())).unwrap();
        assert_eq!(a.hash, d.hash);
    }

    #[test]
    fn sections_parse() {
        let c = parse(
            r#"{"seed": 3,
                "compile": {"operator": {"kind": "integral", "dim": 1}, "family": {"kind": "warmup", "offset_amp": 0.5, "t0": 0.1}},
                "approx": {"function": {"kind": "product"}, "lo": [-1, -1], "hi": [1, 1]},
                "simulate": {"network": {"kind": "random", "layers": 2, "act": "sine"}, "input": {"kind": "zero"}}}"#,
            "t",
        )
        .unwrap();
        assert!(matches!(c.compile.operator, OperatorSpec::Integral { dim: 1 }));
        assert!(matches!(c.compile.family, FamilySpec::Warmup { .. }));
        assert_eq!(c.approx.lo.len(), 2);
        assert!(matches!(c.simulate.input, InputSpec::Zero));
    }
}
