//! Run configuration (TOML with sections) and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalmetrics::CandidateScope;
use crate::model::ModelConfig;
use crate::pipeline::PrepareOptions;
use crate::synthetic::SyntheticSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Document records, one JSON object per line.
    pub corpus: Option<PathBuf>,
    /// Label records: code, description, optional `unseen` flag.
    pub labels: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphOptions {
    /// Neighbours kept per label in the similarity graph.
    pub k: usize,
    /// Cosine threshold of the similarity graph.
    pub tau: f64,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions { k: 10, tau: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub few_threshold: usize,
    pub scope: CandidateScope,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![10],
            few_threshold: 5,
            scope: CandidateScope::WithinBucket,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextOptions {
    pub min_count: usize,
    pub max_len: usize,
}

impl Default for TextOptions {
    fn default() -> Self {
        TextOptions {
            min_count: 1,
            max_len: 2500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub text: TextOptions,
    pub graphs: GraphOptions,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    /// Used by `synth`.
    pub synthetic: SyntheticSpec,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // Relative input paths are resolved against the config file.
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.paths.corpus,
                &mut cfg.paths.labels,
                &mut cfg.paths.taxonomy,
                &mut cfg.paths.embeddings,
                &mut cfg.paths.out,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Every field, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("K list must be non-empty and positive".into()));
        }
        if self.eval.few_threshold == 0 {
            return Err(Error::Config("few threshold must be at least 1".into()));
        }
        if self.graphs.k == 0 {
            return Err(Error::Config("similarity k must be at least 1".into()));
        }
        if !self.graphs.tau.is_finite() {
            return Err(Error::Config("similarity tau must be finite".into()));
        }
        Ok(())
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            min_count: self.text.min_count,
            sim_k: self.graphs.k,
            sim_tau: self.graphs.tau,
            few_threshold: self.eval.few_threshold,
            max_len: self.text.max_len,
            seed: self.seed,
        }
    }

    /// Training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn require(&self, what: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        let p = path
            .clone()
            .ok_or_else(|| Error::Config(format!("no {what} path configured")))?;
        if !p.exists() {
            return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
        }
        Ok(p)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// What a run was asked to do and with which inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Input role → SHA-256 of the file contents.
    pub inputs: BTreeMap<String, String>,
    pub version: String,
}

impl Manifest {
    /// The output directory is not part of the record.
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.paths.out = None;
        Manifest {
            command: command.to_string(),
            seed: config.seed,
            config,
            inputs: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::corpus::write_file(path, self.to_json_line().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(text.trim())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelgraphs::GraphKind;
    use crate::model::FusionMode;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.eval.ks, vec![10]);
        assert_eq!(c.eval.few_threshold, 5);
    }

    #[test]
    fn sections_override_fields() {
        let c = RunConfig::parse(
            "seed = 7\n[model]\nembed_dim = 8\ngraphs = [\"hierarchy\", \"similarity\"]\nfusion = \"pre-gcn-merge\"\n[graphs]\nk = 3\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.embed_dim, 8);
        assert_eq!(c.model.graphs, vec![GraphKind::Hierarchy, GraphKind::Similarity]);
        assert_eq!(c.model.fusion, FusionMode::PreGcnMerge);
        assert_eq!(c.graphs.k, 3);
        assert_eq!(c.graphs.tau, 0.3);
        assert_eq!(c.train_config().seed, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("[model]\nembedding = 3\n"), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig {
            seed: 3,
            ..Default::default()
        };
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
