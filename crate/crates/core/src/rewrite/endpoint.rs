use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Temperature for verification calls.
    pub verify_temperature: f64,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    /// Transport retries after the first attempt.
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "gpt-4o".into(),
            temperature: 1.0,
            max_tokens: 2048,
            verify_temperature: 0.0,
            api_key_env: None,
            max_retries: 3,
            timeout_secs: 120,
            backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_url.is_empty() || self.model_name.is_empty() {
            return Err(Error::Config("endpoint base_url and model_name are required".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointMeta {
    pub model: String,
    pub latency_ms: u64,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub meta: EndpointMeta,
}

/// Anything that answers chat-completion requests.
pub trait ChatBackend: Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse>;
}

/// OpenAI-compatible `POST {base_url}/chat/completions` client.
pub struct HttpBackend {
    cfg: EndpointConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    model: Option<String>,
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl HttpBackend {
    /// Reads the token from `api_key_env` if one is named; a named but unset
    /// variable is an error.
    pub fn new(cfg: EndpointConfig) -> Result<HttpBackend> {
        cfg.validate()?;
        let token = match &cfg.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend { cfg, token, agent })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn body(&self, req: &ChatRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if let Some(s) = &req.system {
            messages.push(serde_json::json!({"role": "system", "content": s}));
        }
        messages.push(serde_json::json!({"role": "user", "content": req.user}));
        serde_json::json!({
            "model": self.cfg.model_name,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<ChatResponse, Attempt> {
        let start = Instant::now();
        let mut r = self.agent.post(self.url()).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            r = r.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = r.send_json(body).map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(Error::Endpoint(format!("HTTP {status}: {}", truncate(&text)))));
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(Error::MalformedResponse(format!("{e}: {}", truncate(&text)))))?;
        let content = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal(Error::MalformedResponse("no message content".into())))?;
        Ok(ChatResponse {
            text: content,
            meta: EndpointMeta {
                model: wire.model.unwrap_or_else(|| self.cfg.model_name.clone()),
                latency_ms: start.elapsed().as_millis() as u64,
                prompt_tokens: wire.usage.as_ref().and_then(|u| u.prompt_tokens),
                completion_tokens: wire.usage.as_ref().and_then(|u| u.completion_tokens),
            },
        })
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let body = self.body(req);
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let wait = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(why)) => {
                    log::warn!("endpoint attempt {} failed: {why}", attempt + 1);
                    last = why;
                }
            }
        }
        Err(Error::Endpoint(format!(
            "giving up after {} attempts: {last}",
            self.cfg.max_retries + 1
        )))
    }
}
