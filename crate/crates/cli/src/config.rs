//! Layered configuration: built-in defaults, then a TOML file, then
//! command-line overrides, then `ALP_*` environment variables.
//!
//! Every key can be addressed as `section.key`. On the command line use
//! `--set section.key=value`; in the environment use `ALP_SECTION_KEY`, e.g.
//! `ALP_LLM_MODEL_ID=qwen2.5:14b` or `ALP_SPLIT_SEED=7`.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use maplabel::baselines::AnnealParams;
use maplabel::eval::SplitSpec;
use maplabel::groundtruth::GtParams;
use maplabel::guidelines::{RerankWeights, DEFAULT_EMBED_MODEL};
use maplabel::llm::LlmConfig;
use maplabel::prompting::DEFAULT_NEIGHBOR_THRESHOLD_PX;
use maplabel::render::RenderStyle;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "ALP_";

/// Variables read directly rather than merged into the config; credentials
/// never appear in run manifests.
pub const ENV_CONFIG_PATH: &str = "ALP_CONFIG";
pub const ENV_LLM_API_KEY: &str = "ALP_LLM_API_KEY";
pub const ENV_EMBEDDING_API_KEY: &str = "ALP_EMBEDDING_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub endpoint: String,
    pub timeout_secs: f64,
    /// Minimum spacing between requests to the map API.
    pub min_interval_ms: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            endpoint: maplabel::ingest::OverpassClient::DEFAULT_ENDPOINT.into(),
            timeout_secs: 90.0,
            min_interval_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderBackend {
    Http,
    Hashing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub backend: EmbedderBackend,
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub batch_size: usize,
    /// Vector size of the offline hashing embedder.
    pub hashing_dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            backend: EmbedderBackend::Http,
            endpoint: "http://localhost:11434/v1/embeddings".into(),
            model: DEFAULT_EMBED_MODEL.into(),
            timeout_secs: 60.0,
            batch_size: 32,
            hashing_dim: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub keyword_weight: f64,
    pub tag_weight: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let w = RerankWeights::default();
        Self {
            k: 2,
            keyword_weight: w.keyword,
            tag_weight: w.tag,
        }
    }
}

impl RetrievalConfig {
    pub fn weights(&self) -> RerankWeights {
        RerankWeights {
            keyword: self.keyword_weight,
            tag: self.tag_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub neighbor_threshold_px: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            neighbor_threshold_px: DEFAULT_NEIGHBOR_THRESHOLD_PX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub anchor: String,
    pub offset_px: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            anchor: "top".into(),
            offset_px: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub ingest: IngestConfig,
    pub groundtruth: GtParams,
    pub embedding: EmbeddingConfig,
    pub retrieval: RetrievalConfig,
    pub prompt: PromptConfig,
    pub llm: LlmConfig,
    pub anchor: AnchorConfig,
    pub anneal: AnnealParams,
    pub split: SplitSpec,
    pub render: RenderStyle,
}

/// A `section.key = value` override from a flag or the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub section: String,
    pub key: String,
    pub value: String,
    pub source: String,
}

impl Override {
    pub fn flag(section: &str, key: &str, value: impl ToString) -> Self {
        Self {
            section: section.into(),
            key: key.into(),
            value: value.to_string(),
            source: format!("--{section}.{key}"),
        }
    }

    /// Parses `section.key=value` as given to `--set`.
    pub fn parse_assignment(s: &str) -> Result<Self> {
        let (path, value) = s.split_once('=').ok_or_else(|| anyhow!("expected section.key=value, got `{s}`"))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| anyhow!("expected section.key=value, got `{s}`"))?;
        Ok(Self {
            section: section.into(),
            key: key.into(),
            value: value.trim().into(),
            source: format!("--set {s}"),
        })
    }
}

/// Overrides from `ALP_SECTION_KEY` variables. Section names are matched
/// against the known sections, so `ALP_LLM_MODEL_ID` maps to `llm.model_id`.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Result<Vec<Override>> {
    let sections = section_names();
    let mut out = Vec::new();
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, value) in vars {
        if [ENV_CONFIG_PATH, ENV_LLM_API_KEY, ENV_EMBEDDING_API_KEY].contains(&name.as_str()) {
            continue;
        }
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let section = sections
            .iter()
            .filter(|s| rest.starts_with(&format!("{s}_")))
            .max_by_key(|s| s.len())
            .ok_or_else(|| anyhow!("{name}: no config section matches"))?;
        out.push(Override {
            section: section.clone(),
            key: rest[section.len() + 1..].to_string(),
            value,
            source: name,
        });
    }
    Ok(out)
}

fn section_names() -> Vec<String> {
    match toml::Value::try_from(Config::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn apply(table: &mut toml::Table, o: &Override) -> Result<()> {
    let section = table
        .get_mut(&o.section)
        .and_then(|v| v.as_table_mut())
        .ok_or_else(|| anyhow!("{}: unknown config section `{}`", o.source, o.section))?;
    let current = section
        .get(&o.key)
        .ok_or_else(|| anyhow!("{}: unknown config key `{}.{}`", o.source, o.section, o.key))?;
    let bad = |ty: &str| anyhow!("{}: `{}` is not a valid {ty} for {}.{}", o.source, o.value, o.section, o.key);
    let value = match current {
        toml::Value::String(_) => toml::Value::String(o.value.clone()),
        toml::Value::Integer(_) => toml::Value::Integer(o.value.parse().map_err(|_| bad("integer"))?),
        toml::Value::Float(_) => toml::Value::Float(o.value.parse().map_err(|_| bad("number"))?),
        toml::Value::Boolean(_) => toml::Value::Boolean(o.value.parse().map_err(|_| bad("boolean"))?),
        _ => bail!("{}: {}.{} cannot be overridden", o.source, o.section, o.key),
    };
    section.insert(o.key.clone(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, overlay: toml::Table, path: &str) -> Result<()> {
    for (k, v) in overlay {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &here)?,
            (Some(slot), v) => *slot = v,
            (None, _) => bail!("unknown config key `{here}`"),
        }
    }
    Ok(())
}

/// Resolves the effective configuration.
pub fn resolve(file: Option<&Path>, flags: &[Override], env: &[Override]) -> Result<Config> {
    let mut table = match toml::Value::try_from(Config::default())? {
        toml::Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let overlay: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut table, overlay, "").with_context(|| format!("in config {}", path.display()))?;
    }
    for o in flags.iter().chain(env) {
        apply(&mut table, o)?;
    }
    let cfg: Config = toml::Value::Table(table).try_into().context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.groundtruth.validate()?;
        self.llm.validate()?;
        self.anneal.validate()?;
        self.split.validate()?;
        if self.retrieval.k == 0 {
            bail!("retrieval.k must be at least 1");
        }
        if !(self.prompt.neighbor_threshold_px >= 0.0) {
            bail!("prompt.neighbor_threshold_px must be >= 0");
        }
        self.anchor
            .anchor
            .parse::<maplabel::baselines::Anchor>()
            .map_err(|e| anyhow!("anchor.anchor: {e}"))?;
        if !(self.render.stroke_width > 0.0 && self.render.font_size > 0.0 && self.render.marker_radius > 0.0) {
            bail!("render sizes must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<Override> {
        env_overrides(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string()))).unwrap()
    }

    #[test]
    fn defaults_validate() {
        let cfg = resolve(None, &[], &[]).unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.retrieval.k, 2);
        assert_eq!(cfg.split.train, 0.70);
    }

    #[test]
    fn precedence_is_file_then_flags_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alp.toml");
        std::fs::write(&path, "[llm]\nmodel_id = \"from-file\"\nmax_retries = 5\n[split]\nseed = 3\n").unwrap();

        let cfg = resolve(Some(&path), &[], &[]).unwrap();
        assert_eq!((cfg.llm.model_id.as_str(), cfg.llm.max_retries, cfg.split.seed), ("from-file", 5, 3));

        let flags = [Override::flag("llm", "model_id", "from-flag"), Override::flag("split", "seed", 4)];
        let cfg = resolve(Some(&path), &flags, &[]).unwrap();
        assert_eq!((cfg.llm.model_id.as_str(), cfg.split.seed), ("from-flag", 4));

        let cfg = resolve(Some(&path), &flags, &env(&[("ALP_LLM_MODEL_ID", "from-env")])).unwrap();
        assert_eq!(cfg.llm.model_id, "from-env");
        assert_eq!(cfg.llm.max_retries, 5);
    }

    #[test]
    fn env_names_map_to_sections() {
        let o = env(&[
            ("ALP_LLM_ENDPOINT_URL", "http://x"),
            ("ALP_EMBEDDING_HASHING_DIM", "64"),
            ("ALP_LLM_API_KEY", "secret"),
            ("HOME", "/root"),
        ]);
        assert_eq!(o.len(), 2);
        assert_eq!((o[0].section.as_str(), o[0].key.as_str()), ("embedding", "hashing_dim"));
        assert_eq!((o[1].section.as_str(), o[1].key.as_str()), ("llm", "endpoint_url"));
        let cfg = resolve(None, &[], &o).unwrap();
        assert_eq!(cfg.embedding.hashing_dim, 64);
    }

    #[test]
    fn rejects_unknown_and_ill_typed_keys() {
        assert!(resolve(None, &[Override::flag("llm", "modle_id", "x")], &[]).is_err());
        assert!(resolve(None, &[Override::flag("split", "seed", "abc")], &[]).is_err());
        assert!(resolve(None, &[Override::flag("split", "train", "0.9")], &[]).is_err(), "ratios no longer sum to 1");
        assert!(env_overrides([("ALP_NOPE_X".to_string(), "1".to_string())]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[llm]\ntemprature = 0.5\n").unwrap();
        assert!(resolve(Some(&path), &[], &[]).is_err());
    }

    #[test]
    fn set_assignment_parsing() {
        let o = Override::parse_assignment("anneal.seed=9").unwrap();
        assert_eq!((o.section.as_str(), o.key.as_str(), o.value.as_str()), ("anneal", "seed", "9"));
        assert!(Override::parse_assignment("seed=9").is_err());
        assert!(Override::parse_assignment("anneal.seed").is_err());
    }
}
