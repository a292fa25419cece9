//! Prompt rendering, verdict parsing and the chat-completion client.

mod client;
pub mod stub;

pub use client::{ChatEndpoint, ChatMessage, ChatRequest, HttpChatEndpoint, LlmClient, LlmError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::Label;
use crate::extraction::TokenEstimator;

/// The system directive, fixed byte-for-byte.
pub const SYSTEM_PROMPT: &str = "You are tasked with analyzing PHP scripts. Your objective is to classify the provided PHP code as either a WebShell or a legitimate script. A WebShell is typically a malicious script intended to exploit the server by executing unauthorized commands or providing backdoor access.";

/// The user-query instruction preceding the three labeled slots.
pub const USER_INSTRUCTION: &str = "Analyze the provided PHP code to determine whether it constitutes a WebShell or a legitimate script. Provide your verdict as WebShell or benign.";

/// Placeholder for an absent demonstration.
pub const NO_EXAMPLES: &str = "(none)";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("nothing to analyze: both critical and global sections are empty")]
    NothingToAnalyze,
}

/// A rendered demonstration: the library entry's view text and its label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Demonstration {
    pub file_id: String,
    pub rendered_view: String,
    pub label: Label,
}

impl Demonstration {
    fn verdict_word(&self) -> &'static str {
        match self.label {
            Label::Webshell => "WebShell",
            Label::Benign => "benign",
        }
    }
}

/// The two chat messages of one query plus their token estimate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub estimated_tokens: usize,
}

/// Fills the three user-query slots in order. The examples slot carries the
/// demonstration text followed by its verdict line, or `(none)`.
/// Deterministic: identical inputs yield byte-identical bundles.
pub fn build_prompt(
    critical_code: &str,
    source_code: &str,
    demonstration: Option<&Demonstration>,
    estimator: &dyn TokenEstimator,
) -> Result<PromptBundle, PromptError> {
    if critical_code.is_empty() && source_code.is_empty() {
        return Err(PromptError::NothingToAnalyze);
    }
    let examples = match demonstration {
        Some(demo) => format!("{}\nVerdict: {}", demo.rendered_view, demo.verdict_word()),
        None => NO_EXAMPLES.to_string(),
    };
    let user_text = format!(
        "{USER_INSTRUCTION}\n\n[Critical Code]\n{critical_code}\n\n[Source Code]\n{source_code}\n\n[Examples]\n{examples}\n\nOutput:"
    );
    let estimated_tokens = estimator.estimate(SYSTEM_PROMPT) + estimator.estimate(&user_text);
    Ok(PromptBundle {
        system_text: SYSTEM_PROMPT.to_string(),
        user_text,
        estimated_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictLabel {
    Webshell,
    Benign,
    Unparseable,
}

/// The parsed model answer with its transport context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub label: VerdictLabel,
    pub raw_response: String,
    pub latency_ms: u64,
    pub model_id: String,
}

/// Case-insensitive keyword scan. When both keywords occur, the last one wins
/// (final-answer convention); when neither occurs, the verdict is unparseable.
pub fn parse_verdict(response_text: &str) -> VerdictLabel {
    let lower = response_text.to_lowercase();
    let last_webshell = lower.rfind("webshell");
    let last_benign = lower.rfind("benign");
    match (last_webshell, last_benign) {
        (Some(w), Some(b)) => {
            if w > b {
                VerdictLabel::Webshell
            } else {
                VerdictLabel::Benign
            }
        }
        (Some(_), None) => VerdictLabel::Webshell,
        (None, Some(_)) => VerdictLabel::Benign,
        (None, None) => VerdictLabel::Unparseable,
    }
}

fn default_temperature() -> f64 {
    0.0
}
fn default_max_output_tokens() -> usize {
    256
}
fn default_request_timeout_s() -> f64 {
    30.0
}
fn default_max_retries() -> usize {
    3
}
fn default_max_concurrent_requests() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the API key; empty when the
    /// endpoint needs none.
    #[serde(default)]
    pub api_key_env_var: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: usize,
    #[serde(default = "default_request_timeout_s")]
    pub request_timeout_s: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_max_concurrent_requests")]
    pub max_concurrent_requests: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint_url: String::new(),
            model_id: "gpt-4".to_string(),
            api_key_env_var: String::new(),
            temperature: default_temperature(),
            max_output_tokens: default_max_output_tokens(),
            request_timeout_s: default_request_timeout_s(),
            max_retries: default_max_retries(),
            max_concurrent_requests: default_max_concurrent_requests(),
        }
    }
}
