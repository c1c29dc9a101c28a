//! Section-granular guideline store with embedding retrieval and reranking.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LandmarkType;

pub const STORE_FILE: &str = "guidelines.index.json";
pub const DEFAULT_EMBED_MODEL: &str = "nomic-embed-text";

#[derive(Debug, Error)]
pub enum GuidelineError {
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("embedding service returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("embedding protocol error: {0}")]
    Protocol(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("similarity undefined for a zero vector")]
    ZeroVector,
    #[error("guideline store is empty")]
    EmptyStore,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("store was built with embedder `{store}` but `{requested}` was requested")]
    EmbedderMismatch { store: String, requested: String },
    #[error("invalid store: {0}")]
    InvalidStore(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// A parsed section before embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionDraft {
    pub title: String,
    pub body: String,
    pub type_tags: Vec<LandmarkType>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedDocument {
    pub sections: Vec<SectionDraft>,
    pub warnings: Vec<String>,
}

fn header_title(line: &str) -> Option<&str> {
    let rest = line.strip_prefix('#')?;
    if rest.starts_with('#') {
        return None;
    }
    if rest.is_empty() {
        return Some("");
    }
    rest.starts_with([' ', '\t']).then(|| rest.trim())
}

/// Landmark types named in `title`, in order of first appearance.
pub fn infer_type_tags(title: &str) -> Vec<LandmarkType> {
    let lower = title.to_lowercase();
    let mut found: Vec<(usize, LandmarkType)> = LandmarkType::ALL
        .into_iter()
        .filter_map(|t| lower.find(t.key()).map(|pos| (pos, t)))
        .collect();
    found.sort();
    found.into_iter().map(|(_, t)| t).collect()
}

/// Splits a markdown document at top-level `#` headers. Text before the first
/// header becomes an untitled section; a headerless document becomes a single
/// untitled section. Sections with an empty body are dropped with a warning.
pub fn parse_sections(document: &str) -> ParsedDocument {
    let mut parsed = ParsedDocument::default();
    let mut title: Option<String> = None;
    let mut body: Vec<&str> = Vec::new();
    let mut saw_header = false;

    let flush = |title: Option<String>, body: &mut Vec<&str>, parsed: &mut ParsedDocument| {
        let text = body.join("\n").trim_matches(|c| c == '\n' || c == '\r').to_string();
        body.clear();
        let title_text = title.clone().unwrap_or_default();
        if text.trim().is_empty() {
            if title.is_some() {
                parsed.warnings.push(format!("section `{title_text}` has no body; skipped"));
            }
            return;
        }
        parsed.sections.push(SectionDraft {
            type_tags: infer_type_tags(&title_text),
            title: title_text,
            body: text,
        });
    };

    for line in document.lines() {
        if let Some(t) = header_title(line) {
            saw_header = true;
            flush(title.take(), &mut body, &mut parsed);
            title = Some(t.to_string());
        } else {
            body.push(line);
        }
    }
    flush(title, &mut body, &mut parsed);

    if !saw_header {
        parsed
            .warnings
            .push("document has no top-level headers; treated as a single untitled section".into());
    }
    parsed
}

/// Text embedding backend.
pub trait Embedder: Send + Sync {
    /// Stable identifier recorded in the store; stores refuse other embedders.
    fn id(&self) -> String;

    /// One vector per input, all of the same dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GuidelineError>;
}

fn check_batch(expected_len: usize, vectors: &[Vec<f64>]) -> Result<(), GuidelineError> {
    if vectors.len() != expected_len {
        return Err(GuidelineError::Protocol(format!(
            "expected {expected_len} embeddings, received {}",
            vectors.len()
        )));
    }
    if let Some(first) = vectors.first() {
        if first.is_empty() {
            return Err(GuidelineError::Protocol("empty embedding vector".into()));
        }
        if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
            return Err(GuidelineError::DimensionMismatch {
                expected: first.len(),
                got: bad.len(),
            });
        }
    }
    Ok(())
}

/// Client for an HTTP embedding endpoint taking `{model, input: [..]}`.
///
/// Accepts either the `{"data": [{"embedding": [..], "index": i}]}` response
/// shape or `{"embeddings": [[..]]}`.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    batch_size: usize,
    http: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        batch_size: usize,
    ) -> Result<Self, GuidelineError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GuidelineError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            batch_size: batch_size.max(1),
            http,
        })
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GuidelineError> {
        #[derive(Deserialize)]
        struct Item {
            embedding: Vec<f64>,
            #[serde(default)]
            index: Option<usize>,
        }
        #[derive(Deserialize)]
        struct Response {
            data: Option<Vec<Item>>,
            embeddings: Option<Vec<Vec<f64>>>,
        }

        let mut req = self
            .http
            .post(&self.endpoint)
            .json(&serde_json::json!({ "model": self.model, "input": texts }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| GuidelineError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| GuidelineError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GuidelineError::Status {
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        let parsed: Response = serde_json::from_str(&body).map_err(|e| GuidelineError::Protocol(e.to_string()))?;
        let vectors = match (parsed.data, parsed.embeddings) {
            (Some(mut items), _) => {
                if items.iter().all(|i| i.index.is_some()) {
                    items.sort_by_key(|i| i.index);
                }
                items.into_iter().map(|i| i.embedding).collect()
            }
            (None, Some(e)) => e,
            (None, None) => return Err(GuidelineError::Protocol("response has neither `data` nor `embeddings`".into())),
        };
        check_batch(texts.len(), &vectors)?;
        Ok(vectors)
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        self.model.clone()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GuidelineError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            out.extend(self.embed_batch(chunk)?);
        }
        check_batch(texts.len(), &out)?;
        Ok(out)
    }
}

/// Offline embedder: signed feature hashing of lowercase word tokens and
/// character trigrams. Deterministic and dependency-free; useful for tests and
/// for runs without an embedding service.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(2) }
    }

    fn fnv1a(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    fn add(&self, v: &mut [f64], feature: &str, weight: f64) {
        let h = Self::fnv1a(feature.as_bytes());
        let idx = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        v[idx] += sign * weight;
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            self.add(&mut v, token, 1.0);
            let chars: Vec<char> = format!("^{token}$").chars().collect();
            for w in chars.windows(3) {
                self.add(&mut v, &w.iter().collect::<String>(), 0.25);
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GuidelineError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Cosine similarity; errors on unequal dimensions or a zero vector.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, GuidelineError> {
    if u.len() != v.len() {
        return Err(GuidelineError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(GuidelineError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineSection {
    pub id: String,
    pub title: String,
    pub type_tags: Vec<LandmarkType>,
    pub body: String,
    pub embedding: Vec<f64>,
}

impl GuidelineSection {
    /// Text that gets embedded and injected into prompts.
    pub fn text(&self) -> String {
        if self.title.is_empty() {
            self.body.clone()
        } else {
            format!("{}\n{}", self.title, self.body)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineStore {
    pub embedder_id: String,
    pub embed_dim: usize,
    pub sections: Vec<GuidelineSection>,
}

impl GuidelineStore {
    /// Embeds each section and assembles the store. Section ids are
    /// `sec-0000`, `sec-0001`, … in document order.
    pub fn build(drafts: Vec<SectionDraft>, embedder: &dyn Embedder) -> Result<Self, GuidelineError> {
        if drafts.is_empty() {
            return Err(GuidelineError::EmptyStore);
        }
        let mut sections: Vec<GuidelineSection> = drafts
            .into_iter()
            .enumerate()
            .map(|(i, d)| GuidelineSection {
                id: format!("sec-{i:04}"),
                title: d.title,
                type_tags: d.type_tags,
                body: d.body,
                embedding: Vec::new(),
            })
            .collect();
        let texts: Vec<String> = sections.iter().map(GuidelineSection::text).collect();
        let vectors = embedder.embed(&texts)?;
        check_batch(texts.len(), &vectors)?;
        for (s, v) in sections.iter_mut().zip(vectors) {
            s.embedding = v;
        }
        let store = Self {
            embedder_id: embedder.id(),
            embed_dim: sections[0].embedding.len(),
            sections,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<(), GuidelineError> {
        if self.sections.is_empty() {
            return Err(GuidelineError::EmptyStore);
        }
        let mut ids = HashSet::new();
        for s in &self.sections {
            if !ids.insert(&s.id) {
                return Err(GuidelineError::InvalidStore(format!("duplicate section id `{}`", s.id)));
            }
            if s.body.trim().is_empty() {
                return Err(GuidelineError::InvalidStore(format!("section `{}` has an empty body", s.id)));
            }
            if s.embedding.len() != self.embed_dim {
                return Err(GuidelineError::DimensionMismatch {
                    expected: self.embed_dim,
                    got: s.embedding.len(),
                });
            }
            if s.embedding.iter().all(|x| *x == 0.0) || s.embedding.iter().any(|x| !x.is_finite()) {
                return Err(GuidelineError::InvalidStore(format!(
                    "section `{}` has a zero or non-finite embedding",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), GuidelineError> {
        let text = serde_json::to_string_pretty(self).expect("store serializes");
        fs::write(path, text + "\n").map_err(|e| GuidelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Loads and validates a store. With `expected_embedder`, a store built by
    /// a different embedder is rejected.
    pub fn load(path: &Path, expected_embedder: Option<&str>) -> Result<Self, GuidelineError> {
        let io = |message: String| GuidelineError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let store: GuidelineStore = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
        store.validate()?;
        if let Some(requested) = expected_embedder {
            if requested != store.embedder_id {
                return Err(GuidelineError::EmbedderMismatch {
                    store: store.embedder_id,
                    requested: requested.to_string(),
                });
            }
        }
        Ok(store)
    }
}

/// What the retriever knows about the landmark being labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQuery {
    pub landmark_name: String,
    pub landmark_type: LandmarkType,
    pub neighbor_context: Option<Vec<(String, LandmarkType)>>,
}

impl RetrievalQuery {
    pub fn new(name: impl Into<String>, kind: LandmarkType) -> Self {
        Self {
            landmark_name: name.into(),
            landmark_type: kind,
            neighbor_context: None,
        }
    }

    pub fn with_neighbors(mut self, neighbors: Vec<(String, LandmarkType)>) -> Self {
        self.neighbor_context = Some(neighbors);
        self
    }
}

/// `name: <name>; type: <type>[; nearby: <name (type)>, …]`
pub fn build_query(q: &RetrievalQuery) -> String {
    let mut s = format!("name: {}; type: {}", q.landmark_name, q.landmark_type.key());
    if let Some(neighbors) = q.neighbor_context.as_ref().filter(|n| !n.is_empty()) {
        let listed: Vec<String> = neighbors.iter().map(|(n, t)| format!("{n} ({})", t.key())).collect();
        s.push_str("; nearby: ");
        s.push_str(&listed.join(", "));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved<'a> {
    pub section: &'a GuidelineSection,
    pub similarity: f64,
    /// Rerank score; equals `similarity` until reranked.
    pub score: f64,
}

fn by_score_then_id(a: &Retrieved<'_>, b: &Retrieved<'_>, key: fn(&Retrieved<'_>) -> f64) -> Ordering {
    key(b).total_cmp(&key(a)).then_with(|| a.section.id.cmp(&b.section.id))
}

/// Top-`k` sections by cosine similarity, descending; ties by id ascending.
pub fn retrieve<'a>(
    store: &'a GuidelineStore,
    query_vector: &[f64],
    k: usize,
) -> Result<Vec<Retrieved<'a>>, GuidelineError> {
    if k == 0 {
        return Err(GuidelineError::InvalidK);
    }
    if store.sections.is_empty() {
        return Err(GuidelineError::EmptyStore);
    }
    let mut scored = store
        .sections
        .iter()
        .map(|s| {
            let sim = cosine(query_vector, &s.embedding)?;
            Ok(Retrieved {
                section: s,
                similarity: sim,
                score: sim,
            })
        })
        .collect::<Result<Vec<_>, GuidelineError>>()?;
    scored.sort_by(|a, b| by_score_then_id(a, b, |r| r.similarity));
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankWeights {
    pub keyword: f64,
    pub tag: f64,
}

impl Default for RerankWeights {
    fn default() -> Self {
        Self { keyword: 0.2, tag: 0.5 }
    }
}

fn token_set(s: &str) -> HashSet<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Jaccard index of two token sets; zero when both are empty.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Reorders candidates by `similarity + w_kw·jaccard + w_tag·[type tagged]`.
pub fn rerank<'a>(
    candidates: Vec<Retrieved<'a>>,
    q: &RetrievalQuery,
    weights: &RerankWeights,
) -> Vec<Retrieved<'a>> {
    let query_tokens = token_set(&build_query(q));
    let mut out: Vec<Retrieved<'a>> = candidates
        .into_iter()
        .map(|mut c| {
            let section_tokens = token_set(&format!("{} {}", c.section.title, c.section.body));
            let tagged = c.section.type_tags.contains(&q.landmark_type);
            c.score = c.similarity
                + weights.keyword * jaccard(&query_tokens, &section_tokens)
                + if tagged { weights.tag } else { 0.0 };
            c
        })
        .collect();
    out.sort_by(|a, b| by_score_then_id(a, b, |r| r.score));
    out
}

/// Embeds a query, retrieves `k` sections, and reranks them.
pub struct Retriever<'a> {
    pub store: &'a GuidelineStore,
    pub embedder: &'a dyn Embedder,
    pub k: usize,
    pub weights: RerankWeights,
}

impl<'a> Retriever<'a> {
    pub fn new(store: &'a GuidelineStore, embedder: &'a dyn Embedder, k: usize, weights: RerankWeights) -> Result<Self, GuidelineError> {
        if embedder.id() != store.embedder_id {
            return Err(GuidelineError::EmbedderMismatch {
                store: store.embedder_id.clone(),
                requested: embedder.id(),
            });
        }
        if k == 0 {
            return Err(GuidelineError::InvalidK);
        }
        Ok(Self {
            store,
            embedder,
            k,
            weights,
        })
    }

    pub fn sections_for(&self, q: &RetrievalQuery) -> Result<Vec<Retrieved<'a>>, GuidelineError> {
        let vectors = self.embedder.embed(&[build_query(q)])?;
        check_batch(1, &vectors)?;
        if vectors[0].len() != self.store.embed_dim {
            return Err(GuidelineError::DimensionMismatch {
                expected: self.store.embed_dim,
                got: vectors[0].len(),
            });
        }
        let top = retrieve(self.store, &vectors[0], self.k)?;
        Ok(rerank(top, q, &self.weights))
    }

    /// Retrieved section texts joined by blank lines, ready for a prompt.
    pub fn instructions_for(&self, q: &RetrievalQuery) -> Result<String, GuidelineError> {
        Ok(self
            .sections_for(q)?
            .iter()
            .map(|r| r.section.text())
            .collect::<Vec<_>>()
            .join("\n\n"))
    }
}
