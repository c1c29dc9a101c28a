//! Chat-completions client, coordinate parsing, and LLM-driven placement.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidelines::Retriever;
use crate::model::{FailureRecord, Landmark, MapRecord, PlacementMethod, PlacementResult, Point};
use crate::prompting::{prompt_for_landmark, CoordFormat, OUTPUT_REMINDER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint_url: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Per-request timeout in seconds.
    pub request_timeout_secs: f64,
    /// Extra endpoint calls allowed per landmark after the first.
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Base delay for exponential backoff on rate limits and 5xx responses.
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:11434/v1/chat/completions".into(),
            model_id: "llama3.1:8b".into(),
            temperature: 0.0,
            max_tokens: 64,
            request_timeout_secs: 120.0,
            max_retries: 2,
            max_in_flight: 4,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.request_timeout_secs > 0.0 && self.request_timeout_secs.is_finite()) {
            return Err(LlmError::Config("request_timeout_secs must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    fn backoff(&self, retry_index: u32, hint: Option<Duration>) -> Duration {
        let exp = self.backoff_base_ms.saturating_mul(1u64 << retry_index.min(16));
        let base = hint.unwrap_or(Duration::from_millis(exp));
        base.min(Duration::from_millis(self.backoff_max_ms))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid LLM configuration: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response contained no choices")]
    EmptyChoices,
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no (x, y) pair found in response: {raw:?}")]
    NoPairFound { raw: String },
}

impl LlmError {
    /// Worth repeating the identical request after a delay.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::RateLimited { .. } | LlmError::Timeout | LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LlmError::Config(_) => "config",
            LlmError::Transport(_) => "transport",
            LlmError::Timeout => "timeout",
            LlmError::RateLimited { .. } => "rate_limited",
            LlmError::Status { .. } => "status",
            LlmError::EmptyChoices | LlmError::Protocol(_) => "protocol",
            LlmError::NoPairFound { .. } => "parse",
        }
    }

    fn retry_after(&self) -> Option<Duration> {
        match self {
            LlmError::RateLimited { retry_after } => *retry_after,
            _ => None,
        }
    }
}

/// A single-turn completion backend.
pub trait ChatClient: Send + Sync {
    /// Sends `prompt` as one user message and returns the first choice's text.
    /// Performs exactly one endpoint call.
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// Client for an HTTP endpoint speaking the chat-completions wire shape.
pub struct HttpChatClient {
    cfg: LlmConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(cfg: LlmConfig, api_key: Option<String>) -> Result<Self, LlmError> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.request_timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { cfg, api_key, http })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

fn transport(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Transport(e.to_string())
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.cfg.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        });
        let mut req = self.http.post(&self.cfg.endpoint_url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        if status.as_u16() == 429 {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|s| s.is_finite() && *s >= 0.0)
                .map(Duration::from_secs_f64);
            return Err(LlmError::RateLimited { retry_after });
        }
        let text = resp.text().map_err(transport)?;
        if !status.is_success() {
            return Err(LlmError::Status {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| LlmError::Protocol(e.to_string()))?;
        let first = parsed.choices.into_iter().next().ok_or(LlmError::EmptyChoices)?;
        first
            .message
            .content
            .ok_or_else(|| LlmError::Protocol("first choice has no content".into()))
    }
}

fn pair_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"([+-]?(?:\d+(?:\.\d*)?|\.\d+))";
        Regex::new(&format!(r"\(\s*{num}\s*,\s*{num}\s*\)")).expect("valid pattern")
    })
}

/// First `(x, y)` pair of decimal numbers anywhere in `raw`.
pub fn parse_coordinates(raw: &str) -> Result<Point, LlmError> {
    let caps = pair_pattern()
        .captures(raw)
        .ok_or_else(|| LlmError::NoPairFound { raw: raw.to_string() })?;
    let num = |i: usize| caps[i].parse::<f64>().map_err(|_| LlmError::NoPairFound { raw: raw.to_string() });
    Ok(Point::new(num(1)?, num(2)?))
}

/// Options shared by every placement in a run.
#[derive(Clone, Copy)]
pub struct LlmPlacement<'a> {
    pub retriever: &'a Retriever<'a>,
    pub client: &'a dyn ChatClient,
    pub cfg: &'a LlmConfig,
    pub format: CoordFormat,
    /// Include neighbors within this many pixels; `None` disables neighbors.
    pub neighbor_threshold: Option<f64>,
}

fn failed(landmark_id: &str, fmt: CoordFormat, attempts: u32, raw: Option<String>, kind: &str, message: String) -> PlacementResult {
    PlacementResult {
        landmark_id: landmark_id.to_string(),
        predicted: None,
        method: PlacementMethod::Llm,
        coord_format: Some(fmt),
        raw_output: raw,
        attempts,
        error: Some(FailureRecord {
            kind: kind.to_string(),
            message,
        }),
    }
}

/// Retrieves instructions, prompts the model, and parses its answer.
///
/// Makes at most `max_retries + 1` endpoint calls. After an unparseable
/// answer the prompt is re-sent with a reminder of the output format; after a
/// retryable transport failure the same prompt is re-sent after a backoff.
/// Failures are recorded in the result, never returned.
pub fn place_with_llm(landmark: &Landmark, map: &MapRecord, opts: &LlmPlacement<'_>) -> PlacementResult {
    let fmt = opts.format;
    let prompt = match prompt_for_landmark(landmark, map, opts.retriever, fmt, opts.neighbor_threshold) {
        Ok(p) => p,
        Err(e) => return failed(&landmark.id, fmt, 1, None, "retrieval", e.to_string()),
    };

    let max_calls = opts.cfg.max_retries + 1;
    let mut current = prompt.clone();
    let mut last_raw = None;
    let mut last_err = LlmError::EmptyChoices;
    for attempt in 1..=max_calls {
        match opts.client.complete(&current) {
            Ok(raw) => match parse_coordinates(&raw) {
                Ok(point) => {
                    return PlacementResult {
                        landmark_id: landmark.id.clone(),
                        predicted: Some(point),
                        method: PlacementMethod::Llm,
                        coord_format: Some(fmt),
                        raw_output: Some(raw),
                        attempts: attempt,
                        error: None,
                    };
                }
                Err(e) => {
                    last_raw = Some(raw);
                    last_err = e;
                    current = format!("{prompt}\n{OUTPUT_REMINDER}\n");
                }
            },
            Err(e) if e.is_retryable() => {
                if attempt < max_calls {
                    std::thread::sleep(opts.cfg.backoff(attempt - 1, e.retry_after()));
                }
                last_err = e;
            }
            Err(e) => return failed(&landmark.id, fmt, attempt, last_raw, e.kind(), e.to_string()),
        }
    }
    failed(&landmark.id, fmt, max_calls, last_raw, last_err.kind(), last_err.to_string())
}

/// Places every `(map, landmark)` pair with up to `max_in_flight` concurrent
/// workers. Results are keyed by landmark id, so scheduling does not affect the
/// output. Setting `cancel` stops new work; already finished results are kept.
pub fn place_batch(
    items: &[(&MapRecord, &Landmark)],
    opts: &LlmPlacement<'_>,
    cancel: &AtomicBool,
) -> BTreeMap<String, PlacementResult> {
    let next = AtomicUsize::new(0);
    let sink = Mutex::new(BTreeMap::new());
    let workers = opts.cfg.max_in_flight.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if cancel.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((map, lm)) = items.get(i) else { break };
                let result = place_with_llm(lm, map, opts);
                sink.lock().unwrap_or_else(|p| p.into_inner()).insert(lm.id.clone(), result);
            });
        }
    });
    sink.into_inner().unwrap_or_else(|p| p.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidelines::{parse_sections, GuidelineStore, HashingEmbedder, RerankWeights};
    use crate::model::{LandmarkType, Polygon};
    use std::sync::atomic::AtomicU32;

    struct Scripted {
        replies: Vec<Result<String, LlmError>>,
        calls: AtomicU32,
    }

    impl Scripted {
        fn new(replies: Vec<Result<String, LlmError>>) -> Self {
            Self {
                replies,
                calls: AtomicU32::new(0),
            }
        }
    }

    impl ChatClient for Scripted {
        fn complete(&self, _prompt: &str) -> Result<String, LlmError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst) as usize;
            self.replies[i.min(self.replies.len() - 1)].clone()
        }
    }

    fn fixture() -> (MapRecord, GuidelineStore, HashingEmbedder) {
        let lm = Landmark {
            id: "lm-1".into(),
            name: "North Beach Branch Library".into(),
            kind: LandmarkType::Amenity,
            boundary: Polygon::new(vec![Point::new(10.0, 10.0), Point::new(30.0, 20.0)]).unwrap(),
            map_id: "m".into(),
        };
        let map = MapRecord {
            id: "m".into(),
            city: "San Francisco".into(),
            image_width: 100,
            image_height: 100,
            labeled_image_path: "labeled.png".into(),
            unlabeled_image_path: "unlabeled.png".into(),
            landmarks: vec![lm],
        };
        let e = HashingEmbedder::new(32);
        let store = GuidelineStore::build(parse_sections("# Amenities\nInside.\n# Shops\nAbove.").sections, &e).unwrap();
        (map, store, e)
    }

    fn run(client: &Scripted, max_retries: u32) -> PlacementResult {
        let (map, store, e) = fixture();
        let retriever = Retriever::new(&store, &e, 2, RerankWeights::default()).unwrap();
        let cfg = LlmConfig {
            max_retries,
            backoff_base_ms: 1,
            ..LlmConfig::default()
        };
        let opts = LlmPlacement {
            retriever: &retriever,
            client,
            cfg: &cfg,
            format: CoordFormat::List,
            neighbor_threshold: None,
        };
        place_with_llm(&map.landmarks[0], &map, &opts)
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_coordinates("(120, 340)").unwrap(), Point::new(120.0, 340.0));
        assert_eq!(
            parse_coordinates("The label should go at (120.5,  339.8) to avoid overlap.").unwrap(),
            Point::new(120.5, 339.8)
        );
        assert!(matches!(
            parse_coordinates("I cannot determine a location."),
            Err(LlmError::NoPairFound { .. })
        ));
    }

    #[test]
    fn first_attempt_success() {
        let c = Scripted::new(vec![Ok("(20, 15)".into())]);
        let r = run(&c, 2);
        assert_eq!(r.predicted, Some(Point::new(20.0, 15.0)));
        assert_eq!(r.attempts, 1);
        assert_eq!(r.coord_format, Some(CoordFormat::List));
    }

    #[test]
    fn prose_then_coordinates() {
        let c = Scripted::new(vec![Ok("Somewhere near the top.".into()), Ok("Sure: (21, 14)".into())]);
        let r = run(&c, 2);
        assert_eq!(r.attempts, 2);
        assert_eq!(r.predicted, Some(Point::new(21.0, 14.0)));
    }

    #[test]
    fn gives_up_after_budget() {
        let c = Scripted::new(vec![Ok("no idea".into())]);
        let r = run(&c, 2);
        assert!(r.predicted.is_none());
        assert_eq!(r.attempts, 3);
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);
        assert_eq!(r.error.unwrap().kind, "parse");
        assert_eq!(r.raw_output.as_deref(), Some("no idea"));
    }

    #[test]
    fn rate_limit_then_success() {
        let c = Scripted::new(vec![Err(LlmError::RateLimited { retry_after: None }), Ok("(1, 2)".into())]);
        let r = run(&c, 1);
        assert_eq!(r.attempts, 2);
        assert!(r.is_success());
    }

    #[test]
    fn non_retryable_stops_immediately() {
        let c = Scripted::new(vec![Err(LlmError::Status { status: 400, body: "bad".into() })]);
        let r = run(&c, 5);
        assert_eq!(r.attempts, 1);
        assert_eq!(c.calls.load(Ordering::SeqCst), 1);
        assert_eq!(r.error.unwrap().kind, "status");
    }

    #[test]
    fn config_validation() {
        assert!(LlmConfig { temperature: -1.0, ..Default::default() }.validate().is_err());
        assert!(LlmConfig { max_in_flight: 0, ..Default::default() }.validate().is_err());
        let cfg = LlmConfig { backoff_base_ms: 100, backoff_max_ms: 250, ..Default::default() };
        assert_eq!(cfg.backoff(0, None), Duration::from_millis(100));
        assert_eq!(cfg.backoff(3, None), Duration::from_millis(250));
        assert_eq!(cfg.backoff(0, Some(Duration::from_millis(7))), Duration::from_millis(7));
    }

    proptest::proptest! {
        #[test]
        fn parse_round_trips(x in -1_000_000_000i64..1_000_000_000, y in -1_000_000_000i64..1_000_000_000, dx in 0u32..7, dy in 0u32..7) {
            let fmt = |v: i64, d: u32| {
                let scaled = v as f64 / 1000.0;
                format!("{:.*}", d as usize, scaled)
            };
            let (sx, sy) = (fmt(x, dx), fmt(y, dy));
            let p = parse_coordinates(&format!("({sx}, {sy})")).unwrap();
            proptest::prop_assert_eq!(p, Point::new(sx.parse().unwrap(), sy.parse().unwrap()));
        }
    }
}
