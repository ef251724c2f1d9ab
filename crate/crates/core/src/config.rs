//! Experiment configuration: a nested key-value document with `experiment`,
//! `task`, and `algorithm` sections, parsed strictly (unknown keys are
//! rejected) and validated field by field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::maml::MamlOuter;
use crate::tasks::scalar::ScalarOuter;
use crate::tasks::synth;
use crate::tasks::CompositionTask;

/// Defaults for the core hyperparameters when a config omits them.
pub const DEFAULT_TAU: usize = 5;
pub const DEFAULT_GAMMA: f64 = 0.2;
pub const DEFAULT_ETA: f64 = 0.01;
pub const DEFAULT_ROUNDS: usize = 100;
pub const DEFAULT_ETA_IN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Comfedl,
    Fedavg,
    ComfedlDamaml,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "comfedl" => Ok(Algorithm::Comfedl),
            "fedavg" => Ok(Algorithm::Fedavg),
            "comfedl-damaml" => Ok(Algorithm::ComfedlDamaml),
            other => Err(Error::validation(
                "algorithm",
                format!("unknown algorithm `{other}` (expected comfedl | fedavg | comfedl-damaml)"),
            )),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Comfedl => "comfedl",
            Algorithm::Fedavg => "fedavg",
            Algorithm::ComfedlDamaml => "comfedl-damaml",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    experiment: ExperimentSection,
    task: TaskSection,
    #[serde(default)]
    algorithm: AlgorithmSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    seed: u64,
    #[serde(default)]
    m: Option<usize>,
    #[serde(default)]
    tau: Option<usize>,
    #[serde(default, alias = "S")]
    rounds: Option<usize>,
    #[serde(default)]
    eta: Option<f64>,
    #[serde(default)]
    b: Option<usize>,
    #[serde(default)]
    b1: Option<usize>,
    #[serde(default)]
    gamma: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlgorithmSection {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    eta_in: Option<f64>,
}

/// Task description. One flat struct for all families; which fields apply is
/// validated per family so errors can name the offending key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub family: String,
    pub n: usize,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_client: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dominant_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minority_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heterogeneity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eig_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eig_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

pub const TASK_FAMILIES: &[&str] = &[
    "quadratic-dro",
    "logistic-dro",
    "imbalanced-classification",
    "quadratic-maml",
    "logistic-maml",
];

impl TaskSection {
    pub fn is_maml(&self) -> bool {
        self.family.ends_with("-maml")
    }
}

/// Fully resolved and validated experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub tau: usize,
    pub rounds: usize,
    pub eta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b1: Option<usize>,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_in: Option<f64>,
    pub algorithm: Algorithm,
    pub task: TaskSection,
}

/// Parses and validates the nested config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    let algorithm = match file.algorithm.name.as_deref() {
        Some(name) => Algorithm::parse(name)?,
        None => Algorithm::Comfedl,
    };
    let exp = file.experiment;
    let task = file.task;
    let cfg = ExperimentConfig {
        seed: exp.seed,
        n: task.n,
        m: exp.m.unwrap_or(task.n),
        tau: exp.tau.unwrap_or(DEFAULT_TAU),
        rounds: exp.rounds.unwrap_or(DEFAULT_ROUNDS),
        eta: exp.eta.unwrap_or(DEFAULT_ETA),
        b: exp.b,
        b1: exp.b1,
        gamma: exp.gamma.unwrap_or(DEFAULT_GAMMA),
        eta_in: file.algorithm.eta_in,
        algorithm,
        task,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::validation("n", "must be ≥ 1"));
        }
        if self.m == 0 || self.m > self.n {
            return Err(Error::validation(
                "m",
                format!("must satisfy 1 ≤ m ≤ n (m = {}, n = {})", self.m, self.n),
            ));
        }
        if self.tau == 0 {
            return Err(Error::validation("tau", "must be ≥ 1"));
        }
        if self.rounds == 0 {
            return Err(Error::validation("rounds", "must be ≥ 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::validation("eta", "must be finite and > 0"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation("gamma", "must be finite and > 0"));
        }
        if let Some(b) = self.b {
            if b == 0 {
                return Err(Error::validation("b", "must be ≥ 1"));
            }
        }
        if let Some(b1) = self.b1 {
            if b1 == 0 {
                return Err(Error::validation("b1", "must be ≥ 1"));
            }
        }
        if let Some(eta_in) = self.eta_in {
            if !(eta_in > 0.0 && eta_in.is_finite()) {
                return Err(Error::validation("eta_in", "must be finite and > 0"));
            }
        }
        if !TASK_FAMILIES.contains(&self.task.family.as_str()) {
            return Err(Error::validation(
                "task.family",
                format!(
                    "unknown family `{}` (expected one of {})",
                    self.task.family,
                    TASK_FAMILIES.join(" | ")
                ),
            ));
        }
        if self.task.d == 0 {
            return Err(Error::validation("task.d", "must be ≥ 1"));
        }
        if self.algorithm == Algorithm::ComfedlDamaml && !self.task.is_maml() {
            return Err(Error::validation(
                "algorithm",
                "comfedl-damaml requires a *-maml task family",
            ));
        }
        if let Some(r) = self.task.rho {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::validation("task.rho", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` override on top of the parsed values. The
    /// config is untouched when the value fails to parse or validate.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut staged = self.clone();
        staged.set_field(key, value)?;
        staged.validate()?;
        *self = staged;
        Ok(())
    }

    fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::validation(key, format!("cannot parse `{value}`")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "rounds" | "S" => self.rounds = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "b" => self.b = Some(parse(key, value)?),
            "b1" => self.b1 = Some(parse(key, value)?),
            "gamma" => self.gamma = parse(key, value)?,
            "eta_in" => self.eta_in = Some(parse(key, value)?),
            "algorithm" => self.algorithm = Algorithm::parse(value)?,
            "task.family" => self.task.family = value.to_string(),
            "task.n" => {
                self.task.n = parse(key, value)?;
                self.n = self.task.n;
            }
            "task.d" => self.task.d = parse(key, value)?,
            "task.classes" => self.task.classes = Some(parse(key, value)?),
            "task.samples_per_client" => self.task.samples_per_client = Some(parse(key, value)?),
            "task.dominant_size" => self.task.dominant_size = Some(parse(key, value)?),
            "task.minority_size" => self.task.minority_size = Some(parse(key, value)?),
            "task.rho" => self.task.rho = Some(parse(key, value)?),
            "task.support" => self.task.support = Some(parse(key, value)?),
            "task.query" => self.task.query = Some(parse(key, value)?),
            "task.center_scale" => self.task.center_scale = Some(parse(key, value)?),
            "task.jitter" => self.task.jitter = Some(parse(key, value)?),
            "task.heterogeneity" => self.task.heterogeneity = Some(parse(key, value)?),
            "task.separation" => self.task.separation = Some(parse(key, value)?),
            "task.data_seed" => self.task.data_seed = Some(parse(key, value)?),
            other => {
                return Err(Error::validation(
                    other,
                    "unknown override key".to_string(),
                ))
            }
        }
        Ok(())
    }

    /// Canonical TOML echo of the resolved configuration; also the byte
    /// stream the config hash is computed over.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// FNV-1a hash of the canonical form; stored in checkpoints to catch
    /// resumption under a different configuration.
    pub fn hash(&self) -> u64 {
        crate::telemetry::fnv1a64(self.canonical_toml().as_bytes())
    }

    /// MAML inner step, defaulted when the config omits it.
    pub fn eta_in_or_default(&self) -> f64 {
        self.eta_in.unwrap_or(DEFAULT_ETA_IN)
    }

    /// Builds the task described by the `task` section. The robust exp
    /// wrapper uses this config's γ; the plain baseline path ignores it.
    pub fn build_task(&self) -> Result<Box<dyn CompositionTask>> {
        let t = &self.task;
        let seed = t.data_seed.unwrap_or(self.seed);
        let scalar_outer = ScalarOuter::Exp { gamma: self.gamma };
        let maml_outer = MamlOuter::Exp { gamma: self.gamma };
        match t.family.as_str() {
            "quadratic-dro" => Ok(Box::new(synth::make_dro_quadratic(
                t.n,
                t.d,
                t.samples_per_client.unwrap_or(50),
                t.center_scale.unwrap_or(1.0),
                t.jitter.unwrap_or(0.25),
                seed,
                scalar_outer,
            )?)),
            "logistic-dro" => Ok(Box::new(synth::make_logistic_dro(
                t.n,
                t.d,
                t.samples_per_client.unwrap_or(50),
                t.heterogeneity.unwrap_or(0.5),
                seed,
                scalar_outer,
            )?)),
            "imbalanced-classification" => Ok(Box::new(synth::make_imbalanced_classification(
                t.n,
                t.dominant_size.unwrap_or(500),
                t.minority_size.unwrap_or(20),
                t.d,
                t.classes.unwrap_or(3),
                t.rho,
                t.separation.unwrap_or(2.0),
                seed,
                scalar_outer,
            )?)),
            "quadratic-maml" => Ok(Box::new(synth::make_maml_quadratic(
                t.n,
                t.d,
                t.support.unwrap_or(4),
                t.query.unwrap_or(4),
                t.eig_lo.unwrap_or(0.5),
                t.eig_hi.unwrap_or(1.5),
                seed,
                self.eta_in_or_default(),
                maml_outer,
            )?)),
            "logistic-maml" => Ok(Box::new(synth::make_maml_logistic(
                t.n,
                t.d,
                t.support.unwrap_or(20),
                t.query.unwrap_or(20),
                t.heterogeneity.unwrap_or(0.5),
                seed,
                self.eta_in_or_default(),
                maml_outer,
            )?)),
            other => Err(Error::validation(
                "task.family",
                format!("unknown family `{other}`"),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[experiment]
seed = 7

[task]
family = "quadratic-dro"
n = 4
d = 3
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.tau, 5);
        assert_eq!(cfg.gamma, 0.2);
        assert_eq!(cfg.eta, 0.01);
        assert_eq!(cfg.m, 4); // full participation
        assert_eq!(cfg.algorithm, Algorithm::Comfedl);
        assert!(cfg.b.is_none());
    }

    #[test]
    fn oversubscribed_m_names_field() {
        let text = MINIMAL.replace("seed = 7", "seed = 7\nm = 11");
        let err = parse_config(&text).unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "m"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn negative_gamma_names_field() {
        let text = MINIMAL.replace("seed = 7", "seed = 7\ngamma = -1.0");
        let err = parse_config(&text).unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "gamma"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let text = MINIMAL.replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(matches!(parse_config(&text), Err(Error::ConfigParse(_))));
    }

    #[test]
    fn unknown_family_rejected() {
        let text = MINIMAL.replace("quadratic-dro", "mystery-task");
        let err = parse_config(&text).unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "task.family"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn damaml_requires_maml_family() {
        let text = format!("{MINIMAL}\n[algorithm]\nname = \"comfedl-damaml\"\n");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn overrides_apply_and_revalidate() {
        let mut cfg = parse_config(MINIMAL).unwrap();
        cfg.apply_override("eta", "0.05").unwrap();
        assert_eq!(cfg.eta, 0.05);
        assert!(cfg.apply_override("eta", "-3").is_err());
        assert_eq!(cfg.eta, 0.05, "failed override must not stick");
        assert!(cfg.apply_override("nonsense", "1").is_err());
        cfg.apply_override("task.rho", "0.28").unwrap();
        assert_eq!(cfg.task.rho, Some(0.28));
    }

    #[test]
    fn hash_changes_with_any_field() {
        let cfg = parse_config(MINIMAL).unwrap();
        let mut other = cfg.clone();
        other.apply_override("eta", "0.05").unwrap();
        assert_ne!(cfg.hash(), other.hash());
        assert_eq!(cfg.hash(), parse_config(MINIMAL).unwrap().hash());
    }

    #[test]
    fn echo_reflects_overrides() {
        let mut cfg = parse_config(MINIMAL).unwrap();
        cfg.apply_override("eta", "0.05").unwrap();
        assert!(cfg.canonical_toml().contains("eta = 0.05"));
    }

    #[test]
    fn builds_every_family() {
        for family in TASK_FAMILIES {
            let text = MINIMAL.replace("quadratic-dro", family).replace(
                "d = 3",
                if family == &"imbalanced-classification" {
                    "d = 4"
                } else {
                    "d = 3"
                },
            );
            let cfg = parse_config(&text).unwrap();
            let task = cfg.build_task().unwrap();
            assert_eq!(task.clients(), 4);
        }
    }
}
