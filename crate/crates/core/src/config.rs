//! Experiment configuration: a nested TOML document whose leaves are
//! addressable by dotted keys such as `privacy.epsilon`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::ClientConfig;
use crate::clustering::ClusterAlgorithm;
use crate::dataset::Format;
use crate::error::{Error, Result};
use crate::model::EncoderKind;
use crate::negsampling::SamplerConfig;
use crate::privacy::PrivacyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: String,
    pub format: Format,
    /// Minimum interactions per user and per item.
    pub kcore: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: String::new(),
            format: Format::Canonical,
            kcore: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub dim: usize,
    /// Sequence encoder pooling window; 0 pools the whole prefix.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::MeanSeq,
            dim: 64,
            max_len: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterPopulation {
    /// Latest upload of every client seen so far.
    Cache,
    /// Only the current round's uploads.
    Round,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub count: usize,
    pub algorithm: ClusterAlgorithm,
    pub population: ClusterPopulation,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            count: 25,
            algorithm: ClusterAlgorithm::Ward,
            population: ClusterPopulation::Cache,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub users_per_round: usize,
    pub learning_rate: f64,
    pub max_rounds: u64,
    pub eval_every: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            users_per_round: 16,
            learning_rate: 1e-3,
            max_rounds: 10_000,
            eval_every: 100,
            patience: 5,
            seed: 0,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub exclude_seen: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { exclude_seen: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    /// Include wall-clock fields; turn off for byte-comparable logs.
    pub timings: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig { timings: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Repetitions; run `i` uses seed `federation.seed + i`.
    pub seeds: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { seeds: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub privacy: PrivacyConfig,
    pub cluster: ClusterConfig,
    pub sampler: SamplerConfig,
    pub client: ClientConfig,
    pub federation: FederationConfig,
    pub eval: EvalConfig,
    pub log: LogConfig,
    pub experiment: ExperimentSection,
}

fn leaf_keys(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaf_keys(&key, v, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Every dotted key accepted by [`ExperimentConfig::set`], sorted.
    pub fn valid_keys() -> Vec<String> {
        let value = toml::Value::try_from(ExperimentConfig::default()).expect("config serializes");
        let mut keys = Vec::new();
        leaf_keys("", &value, &mut keys);
        keys.sort();
        keys
    }

    /// Overrides one leaf; the text is parsed according to the leaf's type.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let unknown = || {
            Error::Config(format!(
                "unknown key `{key}`; valid keys: {}",
                Self::valid_keys().join(", ")
            ))
        };
        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            let table = node.as_table_mut().ok_or_else(unknown)?;
            node = table.get_mut(part).ok_or_else(unknown)?;
            if parts.peek().is_none() && node.is_table() {
                return Err(unknown());
            }
        }
        let bad = |ty: &str| Error::Config(format!("`{key}` expects {ty}, got `{raw}`"));
        *node = match node {
            toml::Value::Boolean(_) => toml::Value::Boolean(match raw {
                "true" | "1" | "yes" | "on" => true,
                "false" | "0" | "no" | "off" => false,
                _ => return Err(bad("a boolean")),
            }),
            toml::Value::Integer(_) => {
                toml::Value::Integer(raw.parse().map_err(|_| bad("an integer"))?)
            }
            toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| bad("a number"))?),
            toml::Value::String(_) => toml::Value::String(raw.to_string()),
            _ => return Err(unknown()),
        };
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {}", e.message())))?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let root = toml::Value::try_from(self).ok()?;
        let mut node = &root;
        for part in key.split('.') {
            node = node.as_table()?.get(part)?;
        }
        Some(match node {
            toml::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }

    /// Checks every module precondition that does not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.privacy.validate()?;
        if self.model.dim == 0 {
            return cfg_err("model.dim must be at least 1".into());
        }
        if self.cluster.count == 0 {
            return cfg_err("cluster.count must be at least 1".into());
        }
        if self.federation.users_per_round == 0 {
            return cfg_err("federation.users_per_round must be at least 1".into());
        }
        if !(self.federation.learning_rate > 0.0 && self.federation.learning_rate.is_finite()) {
            return cfg_err("federation.learning_rate must be positive".into());
        }
        if self.federation.eval_every == 0 {
            return cfg_err("federation.eval_every must be at least 1".into());
        }
        if self.dataset.kcore == 0 {
            return cfg_err("dataset.kcore must be at least 1".into());
        }
        if self.client.local_negatives_per_positive > self.client.local_pool_size {
            return cfg_err(format!(
                "client.local_negatives_per_positive ({}) exceeds client.local_pool_size ({})",
                self.client.local_negatives_per_positive, self.client.local_pool_size
            ));
        }
        if self.experiment.seeds == 0 {
            return cfg_err("experiment.seeds must be at least 1".into());
        }
        Ok(())
    }

    /// [`ExperimentConfig::validate`] plus the checks that depend on the data.
    pub fn validate_for(&self, num_users: usize, num_items: usize) -> Result<()> {
        self.validate()?;
        if self.federation.users_per_round > num_users {
            return Err(Error::PopulationTooSmall {
                population: num_users,
                requested: self.federation.users_per_round,
            });
        }
        if self.client.use_semi_hard {
            self.sampler.validate(num_items)?;
        }
        Ok(())
    }

    pub fn run_seed(&self, run_index: usize) -> u64 {
        self.federation.seed + run_index as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = ExperimentConfig::default();
        assert_eq!(c.federation.learning_rate, 1e-3);
        assert_eq!(c.federation.users_per_round, 16);
        assert_eq!(c.model.dim, 64);
        assert_eq!((c.privacy.delta, c.privacy.epsilon), (1.0, 4.0));
        assert_eq!(c.cluster.count, 25);
        assert_eq!((c.client.local_pool_size, c.client.local_negatives_per_positive), (100, 10));
        assert_eq!((c.sampler.hard_ratio_percent, c.sampler.num_semi_hard), (25.0, 20));
        c.validate().unwrap();
    }

    #[test]
    fn dotted_overrides() {
        let mut c = ExperimentConfig::default();
        c.set("client.use_semi_hard", "false").unwrap();
        c.set("privacy.epsilon", "8").unwrap();
        c.set("cluster.algorithm", "kmeans").unwrap();
        c.set("sampler.mode", "globally_hardest").unwrap();
        c.set("federation.max_rounds", "12").unwrap();
        assert!(!c.client.use_semi_hard);
        assert_eq!(c.privacy.epsilon, 8.0);
        assert_eq!(c.cluster.algorithm, ClusterAlgorithm::Kmeans);
        assert_eq!(c.federation.max_rounds, 12);
        assert_eq!(c.get("privacy.epsilon").unwrap(), "8.0");
        c.set("privacy.epsilon", "inf").unwrap();
        assert!(c.privacy.epsilon.is_infinite());
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let mut c = ExperimentConfig::default();
        let err = c.set("privacy.budget", "1").unwrap_err().to_string();
        assert!(err.contains("privacy.epsilon"));
        assert!(c.set("privacy", "1").is_err());
        assert!(c.set("federation.users_per_round", "many").is_err());
        assert!(c.set("cluster.algorithm", "spectral").is_err());
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = ExperimentConfig::from_toml_str("[privacy]\nepsilon = 2.0\n[client]\nuse_local = false\n").unwrap();
        assert_eq!(c.privacy.epsilon, 2.0);
        assert_eq!(c.privacy.delta, 1.0);
        assert!(!c.client.use_local);
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::from_toml_str("[privacy]\nbudget = 1\n").is_err());
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        c.client.local_negatives_per_positive = 101;
        assert!(c.validate().is_err());
        let c = ExperimentConfig::default();
        assert!(c.validate_for(10, 1000).is_err());
        assert!(c.validate_for(100, 40).is_err());
        assert!(c.validate_for(100, 80).is_ok());
    }
}
