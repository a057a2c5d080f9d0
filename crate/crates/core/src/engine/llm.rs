//! Chat model abstraction: a scripted backend for deterministic runs and an
//! HTTP chat-completions backend for live models.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Environment variable holding the API key of the live backend.
pub const API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self::new(Role::Tool, content)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },
    #[error("unexpected response: {0}")]
    BadResponse(String),
    #[error("scripted backend has no response #{index} (script holds {len})")]
    ScriptExhausted { index: usize, len: usize },
    #[error("no script for task `{0}`")]
    NoScript(String),
    #[error("configuration: {0}")]
    Config(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Self::Transport {
                retryable: true,
                ..
            }
        )
    }
}

pub trait LlmClient: Send + Sync {
    fn model(&self) -> &str;
    fn complete(&self, turns: &[ChatTurn]) -> Result<Completion, LlmError>;
}

/// Hands out a client per grounding task.
pub trait LlmProvider: Send + Sync {
    fn client_for(&self, task_id: &str) -> Result<Arc<dyn LlmClient>, LlmError>;
}

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Replays fixed assistant responses. The n-th response answers a
/// conversation that already holds n assistant turns, so replies depend only
/// on the turns passed in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedLlm {
    responses: Vec<String>,
}

impl ScriptedLlm {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self {
            responses: responses.into_iter().map(Into::into).collect(),
        }
    }
}

impl LlmClient for ScriptedLlm {
    fn model(&self) -> &str {
        "scripted"
    }

    fn complete(&self, turns: &[ChatTurn]) -> Result<Completion, LlmError> {
        let index = turns.iter().filter(|t| t.role == Role::Assistant).count();
        let text = self
            .responses
            .get(index)
            .ok_or(LlmError::ScriptExhausted {
                index,
                len: self.responses.len(),
            })?
            .clone();
        Ok(Completion {
            usage: Usage {
                prompt_tokens: turns.iter().map(|t| word_count(&t.content)).sum(),
                completion_tokens: word_count(&text),
            },
            text,
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Shared(Vec<String>),
    PerTask(BTreeMap<String, Vec<String>>),
}

/// Scripted responses loaded from a fixture file: either one JSON list used
/// for every task, or a map from task id to list (`"*"` is the fallback).
#[derive(Debug, Clone, Default)]
pub struct ScriptBook {
    shared: Option<Vec<String>>,
    per_task: BTreeMap<String, Vec<String>>,
}

impl ScriptBook {
    pub fn shared(responses: Vec<String>) -> Self {
        Self {
            shared: Some(responses),
            per_task: BTreeMap::new(),
        }
    }

    pub fn per_task(mut per_task: BTreeMap<String, Vec<String>>) -> Self {
        let shared = per_task.remove("*");
        Self { shared, per_task }
    }

    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let file: ScriptFile = serde_json::from_str(text)
            .map_err(|e| LlmError::Config(format!("bad script fixture: {e}")))?;
        Ok(match file {
            ScriptFile::Shared(list) => Self::shared(list),
            ScriptFile::PerTask(map) => Self::per_task(map),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

impl LlmProvider for ScriptBook {
    fn client_for(&self, task_id: &str) -> Result<Arc<dyn LlmClient>, LlmError> {
        let script = self
            .per_task
            .get(task_id)
            .or(self.shared.as_ref())
            .ok_or_else(|| LlmError::NoScript(task_id.to_string()))?;
        Ok(Arc::new(ScriptedLlm::new(script.iter().cloned())))
    }
}

/// Spaces out requests so that at most one starts per `min_interval`.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Duration,
    next_slot: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        Self {
            min_interval,
            next_slot: Mutex::new(Instant::now()),
        }
    }

    pub fn per_minute(requests: u32) -> Self {
        Self::new(Duration::from_secs(60) / requests.max(1))
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next_slot.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.min_interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        Self {
            base_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .mul_f64(self.multiplier.powi(attempt.saturating_sub(1) as i32))
    }
}

/// Calls the model, retrying retryable transport failures with exponential
/// backoff.
pub fn complete_with_retry(
    llm: &dyn LlmClient,
    turns: &[ChatTurn],
    policy: &RetryPolicy,
) -> Result<Completion, LlmError> {
    let mut attempt = 1;
    loop {
        match llm.complete(turns) {
            Err(err) if err.is_retryable() && attempt < policy.max_attempts => {
                tracing::warn!(attempt, %err, "llm call failed, retrying");
                std::thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// OpenAI-style `/chat/completions` client.
pub struct LiveLlm {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    limiter: Arc<RateLimiter>,
}

impl LiveLlm {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
            limiter: Arc::new(RateLimiter::new(Duration::ZERO)),
        }
    }

    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self::new(base_url, model, std::env::var(API_KEY_ENV).ok())
    }

    pub fn with_rate_limiter(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = limiter;
        self
    }

    fn wire_role(role: Role) -> &'static str {
        match role {
            Role::System => "system",
            // tool output is sent back as a user message; plain chat
            // endpoints reject `tool` without a tool-call id
            Role::User | Role::Tool => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl LlmClient for LiveLlm {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, turns: &[ChatTurn]) -> Result<Completion, LlmError> {
        self.limiter.acquire();
        let messages: Vec<_> = turns
            .iter()
            .map(|t| serde_json::json!({"role": Self::wire_role(t.role), "content": t.content}))
            .collect();
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": 0,
        });
        let mut req = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body) {
            Ok(resp) => resp,
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                return Err(LlmError::Transport {
                    message: format!("HTTP {code}: {detail}"),
                    retryable: code == 429 || code >= 500,
                });
            }
            Err(err) => {
                return Err(LlmError::Transport {
                    message: err.to_string(),
                    retryable: true,
                })
            }
        };
        let wire: WireResponse = resp
            .into_json()
            .map_err(|e| LlmError::BadResponse(e.to_string()))?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::BadResponse("no message content".into()))?;
        Ok(Completion {
            text,
            usage: wire.usage.unwrap_or_default(),
        })
    }
}

impl LlmProvider for Arc<LiveLlm> {
    fn client_for(&self, _task_id: &str) -> Result<Arc<dyn LlmClient>, LlmError> {
        Ok(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn scripted_reply_depends_on_assistant_count() {
        let llm = ScriptedLlm::new(["first", "second"]);
        let mut turns = vec![ChatTurn::system("s"), ChatTurn::user("u")];
        assert_eq!(llm.complete(&turns).unwrap().text, "first");
        assert_eq!(llm.complete(&turns).unwrap().text, "first");
        turns.push(ChatTurn::assistant("first"));
        turns.push(ChatTurn::tool("out"));
        assert_eq!(llm.complete(&turns).unwrap().text, "second");
        turns.push(ChatTurn::assistant("second"));
        assert_eq!(
            llm.complete(&turns).unwrap_err(),
            LlmError::ScriptExhausted { index: 2, len: 2 }
        );
    }

    #[test]
    fn script_book_shapes() {
        let shared = ScriptBook::parse(r#"["a", "b"]"#).unwrap();
        assert!(shared.client_for("anything").is_ok());
        let per = ScriptBook::parse(r#"{"t1": ["x"], "*": ["y"]}"#).unwrap();
        let turns = [ChatTurn::user("q")];
        assert_eq!(
            per.client_for("t1").unwrap().complete(&turns).unwrap().text,
            "x"
        );
        assert_eq!(
            per.client_for("t2").unwrap().complete(&turns).unwrap().text,
            "y"
        );
        let strict = ScriptBook::parse(r#"{"t1": ["x"]}"#).unwrap();
        assert_eq!(
            strict.client_for("t2").err(),
            Some(LlmError::NoScript("t2".into()))
        );
        assert!(ScriptBook::parse("{not json").is_err());
    }

    struct Flaky {
        failures: AtomicU32,
        retryable: bool,
        calls: AtomicU32,
    }

    impl LlmClient for Flaky {
        fn model(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _turns: &[ChatTurn]) -> Result<Completion, LlmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(LlmError::Transport {
                    message: "boom".into(),
                    retryable: self.retryable,
                });
            }
            Ok(Completion {
                text: "ok".into(),
                usage: Usage::default(),
            })
        }
    }

    #[test]
    fn retries_up_to_three_attempts() {
        let policy = RetryPolicy::no_delay();
        let llm = Flaky {
            failures: AtomicU32::new(2),
            retryable: true,
            calls: AtomicU32::new(0),
        };
        assert_eq!(complete_with_retry(&llm, &[], &policy).unwrap().text, "ok");
        assert_eq!(llm.calls.load(Ordering::SeqCst), 3);

        let llm = Flaky {
            failures: AtomicU32::new(3),
            retryable: true,
            calls: AtomicU32::new(0),
        };
        assert!(complete_with_retry(&llm, &[], &policy).is_err());
        assert_eq!(llm.calls.load(Ordering::SeqCst), 3);

        let llm = Flaky {
            failures: AtomicU32::new(1),
            retryable: false,
            calls: AtomicU32::new(0),
        };
        assert!(complete_with_retry(&llm, &[], &policy).is_err());
        assert_eq!(llm.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_grows_exponentially() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_millis(500));
        assert_eq!(p.delay(2), Duration::from_millis(1000));
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let limiter = RateLimiter::new(Duration::from_millis(20));
        let start = Instant::now();
        for _ in 0..4 {
            limiter.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(60));
    }

    fn serve_once(status: &str, body: &str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let reply = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            stream.write_all(reply.as_bytes()).unwrap();
            head + &String::from_utf8(body).unwrap()
        });
        (addr, handle)
    }

    #[test]
    fn live_client_speaks_chat_completions() {
        let (addr, server) = serve_once(
            "200 OK",
            r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}],"usage":{"prompt_tokens":7,"completion_tokens":1}}"#,
        );
        let llm = LiveLlm::new(addr, "some-model", Some("secret".into()));
        let out = llm
            .complete(&[ChatTurn::system("s"), ChatTurn::tool("result")])
            .unwrap();
        assert_eq!(out.text, "hello");
        assert_eq!(out.usage.prompt_tokens, 7);
        let request = server.join().unwrap();
        assert!(request.starts_with("POST /chat/completions"));
        assert!(request.contains("Bearer secret"));
        assert!(request.contains(r#""model":"some-model""#));
        assert!(!request.contains(r#""role":"tool""#));
    }

    #[test]
    fn live_client_marks_server_errors_retryable() {
        let (addr, server) = serve_once("503 Service Unavailable", "{}");
        let err = LiveLlm::new(addr, "m", None).complete(&[]).unwrap_err();
        server.join().unwrap();
        assert!(err.is_retryable(), "{err}");
        let (addr, server) = serve_once("400 Bad Request", "{}");
        let err = LiveLlm::new(addr, "m", None).complete(&[]).unwrap_err();
        server.join().unwrap();
        assert!(!err.is_retryable());
    }
}
