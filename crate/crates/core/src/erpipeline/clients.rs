//! Knowledge-base extract and chat-completion clients.
//!
//! Each contract has a fixture implementation that replays recorded
//! responses, a live HTTP implementation, and a retrying wrapper.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("no recorded response for {0}")]
    NotRecorded(String),
    #[error("could not decode response: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ClientError> },
    #[error("fixture {path}: {message}")]
    Fixture { path: String, message: String },
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Page-extract lookup: title in, plaintext paragraphs out.
pub trait KbClient: Send + Sync {
    /// `Ok(None)` when the knowledge base has no page for `title`.
    fn fetch_extract(&self, title: &str) -> ClientResult<Option<Vec<String>>>;
}

/// Chat completion: ordered role/content messages in, text out.
pub trait LlmClient: Send + Sync {
    fn chat(&self, messages: &[ChatMessage]) -> ClientResult<String>;
}

impl<T: KbClient + ?Sized> KbClient for &T {
    fn fetch_extract(&self, title: &str) -> ClientResult<Option<Vec<String>>> {
        (**self).fetch_extract(title)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for &T {
    fn chat(&self, messages: &[ChatMessage]) -> ClientResult<String> {
        (**self).chat(messages)
    }
}

/// Splits an extract into blank-line separated paragraphs; lines inside a
/// paragraph are joined with a single space.
pub fn split_paragraphs(extract: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in extract.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(current.join(" "));
                current.clear();
            }
        } else {
            current.push(line.trim());
        }
    }
    if !current.is_empty() {
        out.push(current.join(" "));
    }
    out
}

fn fixture_err(path: &Path, message: impl Into<String>) -> ClientError {
    ClientError::Fixture { path: path.display().to_string(), message: message.into() }
}

/// Recorded page extracts: `{"pages": {"Title": "extract" | null}}`.
#[derive(Debug, Default)]
pub struct FixtureKbClient {
    pages: BTreeMap<String, Option<String>>,
    calls: AtomicUsize,
}

#[derive(Deserialize)]
struct KbFixtureFile {
    pages: BTreeMap<String, Option<String>>,
}

impl FixtureKbClient {
    pub fn new(pages: BTreeMap<String, Option<String>>) -> Self {
        Self { pages, calls: AtomicUsize::new(0) }
    }

    pub fn load(path: &Path) -> ClientResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| fixture_err(path, e.to_string()))?;
        let file: KbFixtureFile = serde_json::from_str(&text).map_err(|e| fixture_err(path, e.to_string()))?;
        Ok(Self::new(file.pages))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl KbClient for FixtureKbClient {
    fn fetch_extract(&self, title: &str) -> ClientResult<Option<Vec<String>>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.pages.get(title) {
            Some(Some(extract)) => Ok(Some(split_paragraphs(extract))),
            Some(None) => Ok(None),
            None => Err(ClientError::NotRecorded(format!("page `{title}`"))),
        }
    }
}

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedChat {
    pub messages: Vec<ChatMessage>,
    pub response: String,
}

/// Replays recorded chat exchanges keyed by the exact message list.
#[derive(Debug, Default)]
pub struct FixtureLlmClient {
    exchanges: Vec<RecordedChat>,
    calls: AtomicUsize,
}

impl FixtureLlmClient {
    pub fn new(exchanges: Vec<RecordedChat>) -> Self {
        Self { exchanges, calls: AtomicUsize::new(0) }
    }

    /// Newline-delimited [`RecordedChat`] records.
    pub fn load(path: &Path) -> ClientResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| fixture_err(path, e.to_string()))?;
        let mut exchanges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(line).map_err(|e| fixture_err(path, format!("line {}: {e}", i + 1)))?;
            exchanges.push(rec);
        }
        Ok(Self::new(exchanges))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for FixtureLlmClient {
    fn chat(&self, messages: &[ChatMessage]) -> ClientResult<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.exchanges.iter().find(|r| r.messages == messages).map(|r| r.response.clone()).ok_or_else(|| {
            let last = messages.last().map(|m| m.content.as_str()).unwrap_or("");
            ClientError::NotRecorded(format!("conversation of {} messages ending in `{last}`", messages.len()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_delay_ms: 500, max_delay_ms: 8_000, multiplier: 2.0 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.multiplier.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis(ms.min(self.max_delay_ms as f64) as u64)
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> ClientResult<T>) -> ClientResult<T> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    log::warn!("attempt {attempt} failed ({e}); retrying");
                    std::thread::sleep(self.delay(attempt));
                }
                Err(e) if e.is_retryable() => return Err(ClientError::Exhausted { attempts: attempt, last: Box::new(e) }),
                Err(e) => return Err(e),
            }
        }
    }
}

/// Retries transient failures of the wrapped client.
pub struct Retrying<C> {
    pub inner: C,
    pub policy: RetryPolicy,
}

impl<C: KbClient> KbClient for Retrying<C> {
    fn fetch_extract(&self, title: &str) -> ClientResult<Option<Vec<String>>> {
        self.policy.run(|| self.inner.fetch_extract(title))
    }
}

impl<C: LlmClient> LlmClient for Retrying<C> {
    fn chat(&self, messages: &[ChatMessage]) -> ClientResult<String> {
        self.policy.run(|| self.inner.chat(messages))
    }
}

/// Enforces a minimum interval between requests across threads.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(interval: Duration) -> Self {
        Self { interval, next: Mutex::new(None) }
    }

    pub fn wait(&self) {
        let sleep_for = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !sleep_for.is_zero() {
            std::thread::sleep(sleep_for);
        }
    }
}

fn http_client(timeout: Duration) -> ClientResult<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .user_agent(concat!("mmel/", env!("CARGO_PKG_VERSION")))
        .build()
        .map_err(|e| ClientError::Transport(e.to_string()))
}

fn transport(e: reqwest::Error) -> ClientError {
    ClientError::Transport(e.to_string())
}

/// Page-extract HTTP API. `url_template` contains `{title}`; the response is
/// JSON with a string `extract` field whose lines are paragraphs. 404 means
/// the page does not exist.
pub struct HttpKbClient {
    url_template: String,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
}

impl HttpKbClient {
    pub const WIKIPEDIA_SUMMARY: &'static str = "https://en.wikipedia.org/api/rest_v1/page/summary/{title}";

    pub fn new(url_template: impl Into<String>, min_interval: Duration) -> ClientResult<Self> {
        Ok(Self {
            url_template: url_template.into(),
            client: http_client(Duration::from_secs(30))?,
            limiter: RateLimiter::new(min_interval),
        })
    }
}

fn encode_title(title: &str) -> String {
    let mut out = String::new();
    for b in title.replace(' ', "_").bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'_' | b'-' | b'.' | b'~' | b'(' | b')' | b',' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

impl KbClient for HttpKbClient {
    fn fetch_extract(&self, title: &str) -> ClientResult<Option<Vec<String>>> {
        self.limiter.wait();
        let url = self.url_template.replace("{title}", &encode_title(title));
        let resp = self.client.get(url).send().map_err(transport)?;
        let status = resp.status().as_u16();
        if status == 404 {
            return Ok(None);
        }
        let body = resp.text().map_err(transport)?;
        if status != 200 {
            return Err(ClientError::Status { status, body });
        }
        let v: serde_json::Value = serde_json::from_str(&body).map_err(|e| ClientError::Decode(e.to_string()))?;
        let extract = v.get("extract").and_then(|x| x.as_str()).unwrap_or("");
        let paragraphs: Vec<String> = extract.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        Ok(if paragraphs.is_empty() { None } else { Some(paragraphs) })
    }
}

/// OpenAI-compatible chat-completion endpoint.
pub struct HttpLlmClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
}

impl HttpLlmClient {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        min_interval: Duration,
    ) -> ClientResult<Self> {
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            client: http_client(Duration::from_secs(120))?,
            limiter: RateLimiter::new(min_interval),
        })
    }
}

impl LlmClient for HttpLlmClient {
    fn chat(&self, messages: &[ChatMessage]) -> ClientResult<String> {
        self.limiter.wait();
        let body = serde_json::json!({ "model": self.model, "messages": messages });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(transport)?;
        if status != 200 {
            return Err(ClientError::Status { status, body: text });
        }
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(String::from)
            .ok_or_else(|| ClientError::Decode("missing choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::AtomicU32;

    #[test]
    fn paragraphs_split_on_blank_lines() {
        let p = split_paragraphs("First line\ncontinues.\n\n  \nSecond.\n\n\nThird.");
        assert_eq!(p, ["First line continues.", "Second.", "Third."]);
        assert!(split_paragraphs("\n\n").is_empty());
    }

    #[test]
    fn fixture_kb_distinguishes_missing_from_unrecorded() {
        let mut pages = BTreeMap::new();
        pages.insert("A".to_string(), Some("x\n\ny".to_string()));
        pages.insert("B".to_string(), None);
        let kb = FixtureKbClient::new(pages);
        assert_eq!(kb.fetch_extract("A").unwrap().unwrap(), ["x", "y"]);
        assert!(kb.fetch_extract("B").unwrap().is_none());
        assert!(matches!(kb.fetch_extract("C"), Err(ClientError::NotRecorded(_))));
        assert_eq!(kb.calls(), 3);
    }

    struct Flaky {
        failures: AtomicU32,
        status: u16,
    }

    impl LlmClient for Flaky {
        fn chat(&self, _: &[ChatMessage]) -> ClientResult<String> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(ClientError::Status { status: self.status, body: String::new() });
            }
            Ok("ok".into())
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy { max_attempts: 3, base_delay_ms: 0, max_delay_ms: 0, multiplier: 2.0 }
    }

    #[test]
    fn retries_transient_failures() {
        let c = Retrying { inner: Flaky { failures: AtomicU32::new(2), status: 503 }, policy: fast() };
        assert_eq!(c.chat(&[]).unwrap(), "ok");
        let c = Retrying { inner: Flaky { failures: AtomicU32::new(3), status: 429 }, policy: fast() };
        assert!(matches!(c.chat(&[]), Err(ClientError::Exhausted { attempts: 3, .. })));
        let c = Retrying { inner: Flaky { failures: AtomicU32::new(1), status: 400 }, policy: fast() };
        assert!(matches!(c.chat(&[]), Err(ClientError::Status { status: 400, .. })));
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_millis(500));
        assert_eq!(p.delay(2), Duration::from_millis(1000));
        assert_eq!(p.delay(10), Duration::from_millis(8000));
    }

    /// Serves canned responses, one connection each, and records request lines and bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut len = 0;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h == "\r\n" || h.is_empty() {
                        break;
                    }
                    if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut req_body = vec![0; len];
                reader.read_exact(&mut req_body).unwrap();
                seen.push(format!("{}{}", request_line.trim(), String::from_utf8(req_body).unwrap()));
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
            seen
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn http_kb_client_parses_extract_and_404() {
        let (base, handle) = serve(vec![(200, r#"{"extract":"Para one.\nPara two."}"#.into()), (404, "{}".into())]);
        let kb = HttpKbClient::new(format!("{base}/page/summary/{{title}}"), Duration::ZERO).unwrap();
        assert_eq!(kb.fetch_extract("Bruce Golding").unwrap().unwrap(), ["Para one.", "Para two."]);
        assert!(kb.fetch_extract("Nobody").unwrap().is_none());
        let seen = handle.join().unwrap();
        assert!(seen[0].starts_with("GET /page/summary/Bruce_Golding"), "{}", seen[0]);
    }

    #[test]
    fn http_llm_client_round_trip_with_retry() {
        let (base, handle) = serve(vec![
            (503, "busy".into()),
            (200, r#"{"choices":[{"message":{"role":"assistant","content":"An introduction."}}]}"#.into()),
        ]);
        let llm = HttpLlmClient::new(format!("{base}/v1/chat/completions"), "test-model", Some("k".into()), Duration::ZERO).unwrap();
        let c = Retrying { inner: llm, policy: fast() };
        let out = c.chat(&[ChatMessage::system("sys"), ChatMessage::user("Enno Hagenah")]).unwrap();
        assert_eq!(out, "An introduction.");
        let seen = handle.join().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].contains(r#""role":"user""#) && seen[1].contains("Enno Hagenah"));
    }
}
