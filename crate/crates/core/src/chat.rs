//! Minimal chat-completions client: request/response types, an HTTP
//! transport, and a retrying call helper that parses the first choice.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENV_ENDPOINT: &str = "SYNTHEX_ENDPOINT";
pub const ENV_API_KEY: &str = "SYNTHEX_API_KEY";
pub const ENV_MODEL: &str = "SYNTHEX_MODEL";
pub const ENV_TIMEOUT: &str = "SYNTHEX_TIMEOUT_SECS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Content of the first choice in a chat-completions response body.
pub fn first_choice_content(body: &str) -> std::result::Result<String, String> {
    let resp: ChatResponse = serde_json::from_str(body).map_err(|e| format!("malformed response body: {e}"))?;
    resp.choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| "response has no choice content".to_string())
}

/// The JSON object inside a model reply: a ```json fenced block if present,
/// otherwise the outermost `{ … }` span.
pub fn extract_json_block(text: &str) -> Option<&str> {
    if let Some(start) = text.find("```") {
        let after = &text[start + 3..];
        let body_start = after.find('\n').map_or(0, |i| i + 1);
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            let block = body[..end].trim();
            if block.starts_with('{') {
                return Some(block);
            }
        }
    }
    let open = text.find('{')?;
    let close = text.rfind('}')?;
    (close > open).then(|| &text[open..=close])
}

pub trait ChatTransport: Send + Sync {
    /// Sends one request and returns the raw response body.
    fn send(&self, request: &ChatRequest) -> Result<String>;
}

/// Connection settings. The API key is never read from config files, only
/// from `SYNTHEX_API_KEY`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointConfig {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: None,
            timeout_secs: 60,
            max_retries: 3,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

impl EndpointConfig {
    /// Fills unset fields from the environment.
    pub fn with_env(mut self) -> Self {
        if self.endpoint.is_none() {
            self.endpoint = std::env::var(ENV_ENDPOINT).ok();
        }
        if self.model.is_none() {
            self.model = std::env::var(ENV_MODEL).ok();
        }
        if let Some(t) = std::env::var(ENV_TIMEOUT).ok().and_then(|v| v.parse().ok()) {
            self.timeout_secs = t;
        }
        self
    }
}

pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            api_key,
        }
    }

    pub fn from_config(config: &EndpointConfig) -> Result<Self> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config(format!("no remote endpoint configured (set {ENV_ENDPOINT})")))?;
        Ok(Self::new(
            endpoint,
            std::env::var(ENV_API_KEY).ok(),
            Duration::from_secs(config.timeout_secs),
        ))
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_string(request).map_err(|e| Error::json("encoding chat request", e))?;
        let mut resp = req
            .send(body.as_bytes())
            .map_err(|e| Error::backend(format!("transport failure: {e}"), None))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::backend(format!("reading response: {e}"), None))?;
        if !status.is_success() {
            return Err(Error::backend(format!("HTTP status {status}"), Some(text)));
        }
        Ok(text)
    }
}

/// Chat client with bounded retries on transport and parse failures.
pub struct ChatClient {
    transport: Box<dyn ChatTransport>,
    model: Option<String>,
    temperature: f64,
    max_tokens: u32,
    max_retries: usize,
}

impl ChatClient {
    pub fn new(transport: Box<dyn ChatTransport>, config: &EndpointConfig) -> Self {
        Self {
            transport,
            model: config.model.clone(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            max_retries: config.max_retries,
        }
    }

    pub fn from_config(config: &EndpointConfig) -> Result<Self> {
        Ok(Self::new(Box::new(HttpTransport::from_config(config)?), config))
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    /// Sends `messages` and parses the first choice with `parse`, retrying up
    /// to `max_retries` times. The final error carries the last raw payload.
    pub fn complete_with<T>(
        &self,
        messages: Vec<ChatMessage>,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let request = self.request(messages);
        let mut last_err = None;
        let mut last_raw = None;
        for _ in 0..=self.max_retries {
            match self.transport.send(&request) {
                Ok(body) => {
                    let parsed = first_choice_content(&body).and_then(|content| {
                        last_raw = Some(content.clone());
                        parse(&content)
                    });
                    match parsed {
                        Ok(v) => return Ok(v),
                        Err(e) => {
                            if last_raw.is_none() {
                                last_raw = Some(body);
                            }
                            last_err = Some(e);
                        }
                    }
                }
                Err(Error::Backend { message, raw, .. }) => {
                    last_err = Some(message);
                    if raw.is_some() {
                        last_raw = raw;
                    }
                }
                Err(other) => return Err(other),
            }
        }
        Err(Error::Backend {
            message: format!(
                "giving up after {} attempt(s): {}",
                self.max_retries + 1,
                last_err.unwrap_or_default()
            ),
            raw: last_raw,
            retryable: true,
        })
    }
}

impl<T: ChatTransport + ?Sized> ChatTransport for std::sync::Arc<T> {
    fn send(&self, request: &ChatRequest) -> Result<String> {
        self.as_ref().send(request)
    }
}

/// Offline transport for tests and dry runs.
pub mod scripted {
    use std::sync::Mutex;

    use super::*;

    /// Replays canned reply contents in order and records every request.
    #[derive(Debug, Default)]
    pub struct ScriptedTransport {
        replies: Mutex<std::collections::VecDeque<Result<String>>>,
        pub requests: Mutex<Vec<ChatRequest>>,
    }

    impl ScriptedTransport {
        pub fn new(contents: Vec<&str>) -> Self {
            Self {
                replies: Mutex::new(contents.into_iter().map(|c| Ok(wrap(c))).collect()),
                requests: Mutex::new(Vec::new()),
            }
        }
    }

    /// A minimal chat-completions response body carrying `content`.
    pub fn wrap(content: &str) -> String {
        serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]})
            .to_string()
    }

    impl ChatTransport for ScriptedTransport {
        fn send(&self, request: &ChatRequest) -> Result<String> {
            self.requests.lock().unwrap().push(request.clone());
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| Err(Error::backend("script exhausted", None)))
        }
    }

}

#[cfg(test)]
mod tests {
    use super::scripted::ScriptedTransport;
    use super::*;

    #[test]
    fn extracts_fenced_and_bare_json() {
        let fenced = "Sure.\n```json\n{\"a\": 1}\n```\nbye";
        assert_eq!(extract_json_block(fenced), Some("{\"a\": 1}"));
        assert_eq!(extract_json_block("x {\"b\": {\"c\": 2}} y"), Some("{\"b\": {\"c\": 2}}"));
        assert_eq!(extract_json_block("no json"), None);
    }

    #[test]
    fn retries_then_succeeds() {
        let t = ScriptedTransport::new(vec!["garbage", "42"]);
        let client = ChatClient::new(Box::new(t), &EndpointConfig::default());
        let v: u32 = client
            .complete_with(vec![ChatMessage::user("hi")], |s| s.trim().parse().map_err(|_| "nan".to_string()))
            .unwrap();
        assert_eq!(v, 42);
    }

    #[test]
    fn gives_up_with_raw_payload() {
        let t = ScriptedTransport::new(vec!["bad1", "bad2"]);
        let cfg = EndpointConfig {
            max_retries: 1,
            ..Default::default()
        };
        let client = ChatClient::new(Box::new(t), &cfg);
        let err = client
            .complete_with(vec![ChatMessage::user("hi")], |_| Err::<(), _>("nope".to_string()))
            .unwrap_err();
        match err {
            Error::Backend { raw, retryable, .. } => {
                assert_eq!(raw.as_deref(), Some("bad2"));
                assert!(retryable);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn request_wire_format() {
        let cfg = EndpointConfig::default();
        let client = ChatClient::new(Box::new(ScriptedTransport::new(vec![])), &cfg);
        let req = client.request(vec![ChatMessage::system("s"), ChatMessage::user("u")]);
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][1]["content"], "u");
        assert_eq!(v["max_tokens"], 1024);
        assert!(v.get("model").is_none());
    }
}
