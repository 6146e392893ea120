//! Declarative run configuration (`run.toml`).
//!
//! Relative paths resolve against the directory of the file they appear in.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use poc_client::EndpointConfig;
use poc_core::prompt::{PromptStrategy, TemplateSet};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}")]
    Toml {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub vocab: PathBuf,
    pub test: PathBuf,
    /// Expert `predictions.jsonl`. Required for POC and for routing.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    /// Pre-sampled `exemplars.jsonl`. Alternatively give `train` and `shots`
    /// and the run samples exemplars with `seed`.
    #[serde(default)]
    pub exemplars: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub shots: Option<usize>,
    #[serde(default)]
    pub attributes: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    pub strategy: PromptStrategy,
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub seed: u64,
    /// Route only items whose expert max confidence is below this value.
    #[serde(default)]
    pub threshold: Option<f64>,
    pub output_dir: PathBuf,
    /// Response cache root; `POC_CACHE_DIR` takes precedence.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub dump_prompts: bool,
    #[serde(default)]
    pub plots: bool,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: toml::Value = toml::from_str(&text).map_err(|source| ConfigError::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_value(value, path.parent().unwrap_or(Path::new(".")), path)
    }

    /// Builds a config from an already-parsed TOML table. `origin` only
    /// labels errors.
    pub fn from_value(
        value: toml::Value,
        base_dir: &Path,
        origin: &Path,
    ) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = value.try_into().map_err(|source| ConfigError::Toml {
            path: origin.to_path_buf(),
            source,
        })?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        resolve(base, &mut d.vocab);
        resolve(base, &mut d.test);
        for p in [
            &mut d.predictions,
            &mut d.exemplars,
            &mut d.train,
            &mut d.attributes,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut self.output_dir);
        for p in [&mut self.cache_dir, &mut self.templates_dir]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.strategy
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.endpoint
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let d = &self.data;
        for (name, p) in [("vocab", Some(&d.vocab)), ("test", Some(&d.test))]
            .into_iter()
            .chain([
                ("predictions", d.predictions.as_ref()),
                ("exemplars", d.exemplars.as_ref()),
                ("train", d.train.as_ref()),
                ("attributes", d.attributes.as_ref()),
            ])
        {
            if let Some(p) = p.filter(|p| !p.is_file()) {
                return bad(format!("data.{name}: {} does not exist", p.display()));
            }
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() || t < 0.0 {
                return bad(format!("threshold must be a non-negative number, got {t}"));
            }
            if d.predictions.is_none() {
                return bad("threshold routing needs data.predictions".into());
            }
        }
        if let Some(opts) = self.strategy.poc() {
            if d.predictions.is_none() {
                return bad("the poc family needs data.predictions".into());
            }
            if opts.exemplar_images
                && d.exemplars.is_none()
                && (d.train.is_none() || d.shots.is_none())
            {
                return bad(
                    "exemplar images need data.exemplars, or data.train with data.shots".into(),
                );
            }
            if opts.text_attributes && d.attributes.is_none() {
                return bad("text attributes need data.attributes".into());
            }
        }
        if d.train.is_some() != d.shots.is_some() {
            return bad("data.train and data.shots go together".into());
        }
        if let Some(dir) = self.templates_dir.as_ref().filter(|p| !p.is_dir()) {
            return bad(format!(
                "templates_dir {} is not a directory",
                dir.display()
            ));
        }
        Ok(())
    }

    /// Everything that determines the report's contents: input digests,
    /// strategy, model, decoding settings, seed, threshold and a template
    /// digest. Endpoint URL, parallelism, retry and output settings are left
    /// out.
    pub fn canonical(&self, templates: &TemplateSet) -> Result<serde_json::Value, ConfigError> {
        let file_digest = |p: &Path| -> Result<String, ConfigError> {
            let bytes = fs::read(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            Ok(hex::encode(Sha256::digest(&bytes)))
        };
        let d = &self.data;
        let mut inputs = serde_json::Map::new();
        for (name, p) in [("vocab", Some(&d.vocab)), ("test", Some(&d.test))]
            .into_iter()
            .chain([
                ("predictions", d.predictions.as_ref()),
                ("exemplars", d.exemplars.as_ref()),
                ("train", d.train.as_ref()),
                ("attributes", d.attributes.as_ref()),
            ])
        {
            if let Some(p) = p {
                inputs.insert(name.into(), file_digest(p)?.into());
            }
        }
        Ok(serde_json::json!({
            "version": 1,
            "inputs": inputs,
            "shots": d.shots,
            "strategy": self.strategy,
            "model": self.endpoint.model_name,
            "temperature": self.endpoint.temperature,
            "max_output_tokens": self.endpoint.max_output_tokens,
            "seed": self.seed,
            "threshold": self.threshold,
            "templates": hex::encode(Sha256::digest(format!("{templates:?}").as_bytes())),
        }))
    }

    /// SHA-256 of [`RunConfig::canonical`].
    pub fn fingerprint(&self, templates: &TemplateSet) -> Result<String, ConfigError> {
        let canonical = self.canonical(templates)?;
        Ok(hex::encode(Sha256::digest(
            canonical.to_string().as_bytes(),
        )))
    }
}

/// Recursively merges `patch` into `base`; tables merge, everything else
/// is replaced.
pub fn merge_toml(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(existing) => merge_toml(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
