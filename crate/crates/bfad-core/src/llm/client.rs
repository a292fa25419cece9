//! Chat-completion transport: wire types, the retrying HTTP endpoint, and a
//! client that bounds in-flight requests.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse_verdict, LlmConfig, PromptBundle, Verdict};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("authentication rejected with HTTP {status}")]
    Auth { status: u16 },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// The ubiquitous chat-completions request body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn from_bundle(bundle: &PromptBundle, config: &LlmConfig) -> Self {
        Self {
            model: config.model_id.clone(),
            temperature: config.temperature,
            max_tokens: config.max_output_tokens,
            messages: vec![
                ChatMessage {
                    role: "system".to_string(),
                    content: bundle.system_text.clone(),
                },
                ChatMessage {
                    role: "user".to_string(),
                    content: bundle.user_text.clone(),
                },
            ],
        }
    }

    /// Content of the user message, used by rule-based stubs.
    pub fn user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

/// Anything that can answer a chat request with the verdict text.
pub trait ChatEndpoint: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

/// Real endpoint: POST to `{endpoint_url}/chat/completions` with bearer auth
/// from the configured environment variable, retrying transport errors and
/// 429/5xx with exponential backoff and jitter.
pub struct HttpChatEndpoint {
    url: String,
    api_key: Option<String>,
    max_retries: usize,
    client: reqwest::blocking::Client,
}

impl HttpChatEndpoint {
    pub fn from_config(config: &LlmConfig) -> Result<Self, LlmError> {
        let api_key = if config.api_key_env_var.is_empty() {
            None
        } else {
            match std::env::var(&config.api_key_env_var) {
                Ok(key) => Some(key),
                Err(_) => {
                    return Err(LlmError::Protocol(format!(
                        "environment variable {} is not set",
                        config.api_key_env_var
                    )))
                }
            }
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_s))
            .build()
            .map_err(|e| LlmError::Protocol(e.to_string()))?;
        Ok(Self {
            url: format!(
                "{}/chat/completions",
                config.endpoint_url.trim_end_matches('/')
            ),
            api_key,
            max_retries: config.max_retries,
            client,
        })
    }

    fn backoff(&self, attempt: usize) {
        let base_ms = 200u64.saturating_mul(1 << attempt.min(6));
        let jitter_ms = rand::thread_rng().gen_range(0..100);
        std::thread::sleep(Duration::from_millis(base_ms + jitter_ms));
    }
}

impl ChatEndpoint for HttpChatEndpoint {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut last_message = String::new();
        let attempts = self.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                self.backoff(attempt - 1);
            }
            let mut builder = self.client.post(&self.url).json(request);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            let response = match builder.send() {
                Ok(r) => r,
                Err(e) => {
                    last_message = e.to_string();
                    continue;
                }
            };
            let status = response.status().as_u16();
            match status {
                200..=299 => {
                    let parsed: ChatResponse = response
                        .json()
                        .map_err(|e| LlmError::Protocol(e.to_string()))?;
                    return parsed
                        .choices
                        .first()
                        .map(|c| c.message.content.clone())
                        .ok_or_else(|| LlmError::Protocol("response has no choices".to_string()));
                }
                401 | 403 => return Err(LlmError::Auth { status }),
                429 | 500..=599 => {
                    last_message = format!("HTTP {status}");
                    continue;
                }
                other => {
                    return Err(LlmError::Protocol(format!("unexpected HTTP {other}")));
                }
            }
        }
        Err(LlmError::Transport {
            attempts,
            message: last_message,
        })
    }
}

/// Counting semaphore; `std` has none and the dependency is not worth it.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

/// Classification front end: holds the endpoint, enforces the in-flight
/// request bound, and turns responses into verdicts.
pub struct LlmClient {
    endpoint: Arc<dyn ChatEndpoint>,
    config: LlmConfig,
    semaphore: Semaphore,
}

impl LlmClient {
    pub fn new(endpoint: Arc<dyn ChatEndpoint>, config: LlmConfig) -> Self {
        let permits = config.max_concurrent_requests.max(1);
        Self {
            endpoint,
            config,
            semaphore: Semaphore::new(permits),
        }
    }

    pub fn from_config(config: LlmConfig) -> Result<Self, LlmError> {
        let endpoint = Arc::new(HttpChatEndpoint::from_config(&config)?);
        Ok(Self::new(endpoint, config))
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    /// Sends the two-message chat request and parses the verdict. Safe to
    /// call from many threads; at most `max_concurrent_requests` are in
    /// flight at once.
    pub fn classify(&self, bundle: &PromptBundle) -> Result<Verdict, LlmError> {
        let _permit = self.semaphore.acquire();
        let request = ChatRequest::from_bundle(bundle, &self.config);
        let started = Instant::now();
        let raw_response = self.endpoint.chat(&request)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        Ok(Verdict {
            label: parse_verdict(&raw_response),
            raw_response,
            latency_ms,
            model_id: self.config.model_id.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::ByteRatioEstimator;
    use crate::llm::build_prompt;

    fn bundle() -> PromptBundle {
        build_prompt("<?php eval($x);", "", None, &ByteRatioEstimator).unwrap()
    }

    struct FixedEndpoint(&'static str);

    impl ChatEndpoint for FixedEndpoint {
        fn chat(&self, _request: &ChatRequest) -> Result<String, LlmError> {
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn classify_parses_fixed_answers() {
        let config = LlmConfig::default();
        for (answer, expected) in [
            ("This is a WebShell.", crate::llm::VerdictLabel::Webshell),
            ("benign", crate::llm::VerdictLabel::Benign),
            ("cannot determine", crate::llm::VerdictLabel::Unparseable),
        ] {
            let client = LlmClient::new(Arc::new(FixedEndpoint(answer)), config.clone());
            let verdict = client.classify(&bundle()).unwrap();
            assert_eq!(verdict.label, expected);
            assert_eq!(verdict.raw_response, answer);
            assert_eq!(verdict.model_id, config.model_id);
        }
    }

    #[test]
    fn request_carries_system_and_user_messages() {
        let request = ChatRequest::from_bundle(&bundle(), &LlmConfig::default());
        assert_eq!(request.messages.len(), 2);
        assert_eq!(request.messages[0].role, "system");
        assert_eq!(request.messages[1].role, "user");
        assert_eq!(request.temperature, 0.0);
        assert!(request.user_content().unwrap().contains("[Critical Code]"));
    }

    #[test]
    fn missing_api_key_env_is_an_error() {
        let config = LlmConfig {
            endpoint_url: "http://127.0.0.1:1".to_string(),
            api_key_env_var: "BFAD_TEST_KEY_THAT_DOES_NOT_EXIST".to_string(),
            ..Default::default()
        };
        assert!(matches!(
            HttpChatEndpoint::from_config(&config),
            Err(LlmError::Protocol(_))
        ));
    }

    #[test]
    fn api_key_is_sent_as_bearer_token() {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(headers_end) = text.find("\r\n\r\n") {
                    let headers = &text[..headers_end];
                    let length: usize = headers
                        .lines()
                        .find_map(|l| {
                            let (name, value) = l.split_once(':')?;
                            name.eq_ignore_ascii_case("content-length")
                                .then(|| value.trim().parse().ok())?
                        })
                        .unwrap();
                    if buf.len() >= headers_end + 4 + length {
                        break;
                    }
                }
            }
            let body = "{\"choices\": [{\"message\": {\"content\": \"benign\"}}]}";
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
            String::from_utf8_lossy(&buf).to_string()
        });

        std::env::set_var("BFAD_TEST_BEARER_KEY", "sk-test-123");
        let config = LlmConfig {
            endpoint_url: url,
            api_key_env_var: "BFAD_TEST_BEARER_KEY".to_string(),
            max_retries: 0,
            ..Default::default()
        };
        let client = LlmClient::from_config(config).unwrap();
        let verdict = client.classify(&bundle()).unwrap();
        assert_eq!(verdict.label, crate::llm::VerdictLabel::Benign);

        let raw_request = handle.join().unwrap();
        assert!(
            raw_request.contains("authorization: Bearer sk-test-123")
                || raw_request.contains("Authorization: Bearer sk-test-123"),
            "bearer header missing in:\n{raw_request}"
        );
        assert!(raw_request.contains("POST /chat/completions"));
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};

        struct CountingEndpoint {
            current: AtomicUsize,
            max_seen: AtomicUsize,
        }

        impl ChatEndpoint for CountingEndpoint {
            fn chat(&self, _request: &ChatRequest) -> Result<String, LlmError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.max_seen.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok("benign".to_string())
            }
        }

        let endpoint = Arc::new(CountingEndpoint {
            current: AtomicUsize::new(0),
            max_seen: AtomicUsize::new(0),
        });
        let config = LlmConfig {
            max_concurrent_requests: 3,
            ..Default::default()
        };
        let client = Arc::new(LlmClient::new(endpoint.clone(), config));
        std::thread::scope(|scope| {
            for _ in 0..12 {
                let client = Arc::clone(&client);
                scope.spawn(move || {
                    client.classify(&bundle()).unwrap();
                });
            }
        });
        assert!(endpoint.max_seen.load(Ordering::SeqCst) <= 3);
        assert!(endpoint.max_seen.load(Ordering::SeqCst) >= 1);
    }
}
