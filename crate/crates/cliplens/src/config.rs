use std::path::{Path, PathBuf};

use cliplens_core::labeler::LabelMode;
use cliplens_core::metrics::EntanglementVariant;
use cliplens_core::pipeline::PipelineConfig;
use cliplens_core::textspan::DecompositionConfig;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// One analyzable model: a dump and, optionally, its own sidecar.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Public name; defaults to `<model_id>-<pretrain_tag>` from the dump.
    pub id: Option<String>,
    pub dump: PathBuf,
    pub sidecar: Option<String>,
    pub manual: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Chat-completions endpoint, e.g. `https://host/v1/chat/completions`.
    pub endpoint: Option<String>,
    pub model: String,
    pub retries: u32,
    pub base_delay_ms: u64,
    pub min_interval_ms: u64,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "gpt-3.5-turbo".into(),
            retries: 3,
            base_delay_ms: 500,
            min_interval_ms: 200,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub property_k: usize,
    pub head_image_k: usize,
    pub head_text_k: usize,
    pub m: usize,
    pub association_k: usize,
    pub entanglement_variant: EntanglementVariant,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            property_k: 4,
            head_image_k: 8,
            head_text_k: 8,
            m: 5,
            association_k: 3,
            entanglement_variant: EntanglementVariant::MeanPairwise,
        }
    }
}

impl Defaults {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            decomposition: DecompositionConfig {
                m: self.m,
                ..DecompositionConfig::default()
            },
            association_k: self.association_k,
            entanglement_variant: self.entanglement_variant,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Sidecar used by models that do not name their own.
    pub sidecar: Option<String>,
    #[serde(default = "default_mode", deserialize_with = "mode_from_str")]
    pub mode: LabelMode,
    pub label_cache: Option<PathBuf>,
    /// Annotations applied to models without their own `manual` file.
    pub manual: Option<PathBuf>,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_mode() -> LabelMode {
    LabelMode::CacheOnly
}

fn mode_from_str<'de, D: serde::Deserializer<'de>>(d: D) -> Result<LabelMode, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            sidecar: None,
            mode: default_mode(),
            label_cache: None,
            manual: None,
            llm: LlmConfig::default(),
            defaults: Defaults::default(),
            models: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        // relative paths are relative to the config file
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.label_cache.as_mut().map(fix);
        self.manual.as_mut().map(fix);
        for m in &mut self.models {
            fix(&mut m.dump);
            m.manual.as_mut().map(fix);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.models.is_empty() {
            return Err(ConfigError::Invalid("at least one model dump must be configured".into()));
        }
        let d = &self.defaults;
        for (name, v) in [
            ("property_k", d.property_k),
            ("head_image_k", d.head_image_k),
            ("head_text_k", d.head_text_k),
            ("m", d.m),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("defaults.{name} must be at least 1")));
            }
        }
        let mut ids: Vec<&str> = self.models.iter().filter_map(|m| m.id.as_deref()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(ConfigError::Invalid("model ids must be unique".into()));
        }
        Ok(())
    }

    /// Label cache location: configured, or `labels.jsonl` beside the first dump.
    pub fn label_cache_path(&self) -> Option<PathBuf> {
        self.label_cache.clone().or_else(|| {
            self.models
                .first()
                .map(|m| m.dump.with_file_name("labels.jsonl"))
        })
    }

    pub fn sidecar_for(&self, model: &ModelConfig) -> Option<String> {
        model.sidecar.clone().or_else(|| self.sidecar.clone())
    }

    pub fn manual_for(&self, model: &ModelConfig) -> Option<PathBuf> {
        model.manual.clone().or_else(|| self.manual.clone())
    }
}
