//! Config-file loading and flag/file/default precedence resolution.

use std::path::{Path, PathBuf};

use bfad_core::extraction::{ExtractionConfig, Strategy, DEFAULT_ESTIMATOR_ID};
use bfad_core::llm::LlmConfig;
use bfad_core::profiling::{RatioTransform, ScoreParams};
use bfad_core::registry::CriticalFunctionRegistry;
use bfad_core::retrieval::{
    EmbeddingProvider, HashedTokenProvider, HttpEmbeddingProvider,
};
use bfad_core::scanner::ScanOptions;
use serde::Deserialize;

use crate::args::{Cli, EmbeddingProviderArg, ProviderArgs};
use crate::CommandError;

pub const DEFAULT_TAU: usize = 300;
/// 8192-token context minus a 1024-token reserve for system text,
/// demonstration framing and instructions.
pub const DEFAULT_BUDGET_TOKENS: usize = 7168;
pub const DEFAULT_MODEL_ID: &str = "gpt-4";
pub const DEFAULT_EMBED_MODEL_ID: &str = "st-codesearch-distilroberta-base";

/// Shape of the JSON config file. Unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub registry: Option<PathBuf>,
    pub tau: Option<usize>,
    pub budget_tokens: Option<usize>,
    pub strategy: Option<Strategy>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub ratio_transform: Option<RatioTransform>,
    pub count_in_strings: Option<bool>,
    pub require_e_modifier: Option<bool>,
    pub unparseable_as_webshell: Option<bool>,
    pub seed: Option<u64>,
    pub embedding_provider: Option<String>,
    pub embed_endpoint_url: Option<String>,
    pub embed_model_id: Option<String>,
    pub embed_dimension: Option<usize>,
    pub embed_api_key_env: Option<String>,
    pub llm: Option<LlmFileConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmFileConfig {
    pub endpoint_url: Option<String>,
    pub model_id: Option<String>,
    pub api_key_env_var: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<usize>,
    pub request_timeout_s: Option<f64>,
    pub max_retries: Option<usize>,
    pub max_concurrent_requests: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CommandError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CommandError::unreadable(format!("config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CommandError::unreadable(format!("config {}: {e}", path.display())))
    }
}

/// Fully resolved settings: flag > config file > built-in default.
pub struct Resolved {
    pub registry_path: Option<PathBuf>,
    pub tau: usize,
    pub budget_tokens: usize,
    pub strategy: Strategy,
    pub score_params: ScoreParams,
    pub scan_options: ScanOptions,
    pub unparseable_as_webshell: bool,
    pub seed: u64,
    pub llm: LlmConfig,
    pub provider_kind: ProviderKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderKind {
    Hashed,
    Http {
        endpoint_url: String,
        model_id: String,
        dimension: usize,
        api_key_env: Option<String>,
    },
}

#[derive(Default)]
pub struct ResolveFlags<'a> {
    pub tau: Option<usize>,
    pub budget_tokens: Option<usize>,
    pub strategy: Option<Strategy>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub ratio_transform: Option<RatioTransform>,
    pub count_in_strings: bool,
    pub require_e_modifier: bool,
    pub unparseable_as_webshell: bool,
    pub provider: Option<&'a ProviderArgs>,
    pub llm: LlmFlagOverrides,
}

#[derive(Default)]
pub struct LlmFlagOverrides {
    pub endpoint_url: Option<String>,
    pub model_id: Option<String>,
    pub api_key_env: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<usize>,
    pub request_timeout_s: Option<f64>,
    pub max_retries: Option<usize>,
    pub max_concurrent_requests: Option<usize>,
}


pub fn resolve(cli: &Cli, flags: ResolveFlags<'_>) -> Result<Resolved, CommandError> {
    let mut file = FileConfig::load(cli.config.as_deref())?;
    let defaults = LlmConfig::default();
    let file_llm = file.llm.take().unwrap_or_default();

    let llm = LlmConfig {
        endpoint_url: flags
            .llm
            .endpoint_url
            .or(file_llm.endpoint_url)
            .unwrap_or_default(),
        model_id: flags
            .llm
            .model_id
            .or(file_llm.model_id)
            .unwrap_or_else(|| DEFAULT_MODEL_ID.to_string()),
        api_key_env_var: flags
            .llm
            .api_key_env
            .or(file_llm.api_key_env_var)
            .unwrap_or_default(),
        temperature: flags
            .llm
            .temperature
            .or(file_llm.temperature)
            .unwrap_or(defaults.temperature),
        max_output_tokens: flags
            .llm
            .max_output_tokens
            .or(file_llm.max_output_tokens)
            .unwrap_or(defaults.max_output_tokens),
        request_timeout_s: flags
            .llm
            .request_timeout_s
            .or(file_llm.request_timeout_s)
            .unwrap_or(defaults.request_timeout_s),
        max_retries: flags
            .llm
            .max_retries
            .or(file_llm.max_retries)
            .unwrap_or(defaults.max_retries),
        max_concurrent_requests: flags
            .llm
            .max_concurrent_requests
            .or(file_llm.max_concurrent_requests)
            .unwrap_or(defaults.max_concurrent_requests),
    };

    let provider_kind = resolve_provider(flags.provider, &file)?;

    Ok(Resolved {
        registry_path: cli.registry.clone().or(file.registry),
        tau: flags.tau.or(file.tau).unwrap_or(DEFAULT_TAU),
        budget_tokens: flags
            .budget_tokens
            .or(file.budget_tokens)
            .unwrap_or(DEFAULT_BUDGET_TOKENS),
        strategy: flags.strategy.or(file.strategy).unwrap_or(Strategy::Hybrid),
        score_params: ScoreParams {
            alpha: flags.alpha.or(file.alpha).unwrap_or(1.0),
            beta: flags.beta.or(file.beta).unwrap_or(1.0),
            gamma: flags.gamma.or(file.gamma).unwrap_or(1.0),
            ratio_transform: flags
                .ratio_transform
                .or(file.ratio_transform)
                .unwrap_or_default(),
        },
        scan_options: ScanOptions {
            count_in_strings: flags.count_in_strings || file.count_in_strings.unwrap_or(false),
            require_e_modifier: flags.require_e_modifier
                || file.require_e_modifier.unwrap_or(false),
        },
        unparseable_as_webshell: flags.unparseable_as_webshell
            || file.unparseable_as_webshell.unwrap_or(false),
        seed: cli.seed.or(file.seed).unwrap_or(0),
        llm,
        provider_kind,
    })
}

fn resolve_provider(
    provider_args: Option<&ProviderArgs>,
    file: &FileConfig,
) -> Result<ProviderKind, CommandError> {
    let choice = provider_args
        .and_then(|p| p.embedding_provider)
        .map(|p| match p {
            EmbeddingProviderArg::Hashed => "hashed".to_string(),
            EmbeddingProviderArg::Http => "http".to_string(),
        })
        .or_else(|| file.embedding_provider.clone())
        .unwrap_or_else(|| "hashed".to_string());
    match choice.as_str() {
        "hashed" => Ok(ProviderKind::Hashed),
        "http" => {
            let endpoint_url = provider_args
                .and_then(|p| p.embed_endpoint_url.clone())
                .or_else(|| file.embed_endpoint_url.clone())
                .ok_or_else(|| {
                    CommandError::unreadable(
                        "http embedding provider needs --embed-endpoint-url",
                    )
                })?;
            let model_id = provider_args
                .and_then(|p| p.embed_model_id.clone())
                .or_else(|| file.embed_model_id.clone())
                .unwrap_or_else(|| DEFAULT_EMBED_MODEL_ID.to_string());
            let dimension = provider_args
                .and_then(|p| p.embed_dimension)
                .or(file.embed_dimension)
                .ok_or_else(|| {
                    CommandError::unreadable("http embedding provider needs --embed-dimension")
                })?;
            let api_key_env = provider_args
                .and_then(|p| p.embed_api_key_env.clone())
                .or_else(|| file.embed_api_key_env.clone());
            Ok(ProviderKind::Http {
                endpoint_url,
                model_id,
                dimension,
                api_key_env,
            })
        }
        other => Err(CommandError::unreadable(format!(
            "unknown embedding provider {other:?} (expected hashed or http)"
        ))),
    }
}

impl Resolved {
    pub fn registry(&self) -> Result<CriticalFunctionRegistry, CommandError> {
        match &self.registry_path {
            Some(path) => CriticalFunctionRegistry::load_from_file(path)
                .map_err(|e| CommandError::unreadable(e.to_string())),
            None => Ok(CriticalFunctionRegistry::default_registry()),
        }
    }

    pub fn extraction(&self) -> Result<ExtractionConfig, CommandError> {
        ExtractionConfig::new(self.tau, self.budget_tokens, self.strategy)
            .map_err(|e| CommandError::unreadable(e.to_string()))
    }

    pub fn build_provider(&self) -> Result<Box<dyn EmbeddingProvider>, CommandError> {
        match &self.provider_kind {
            ProviderKind::Hashed => Ok(Box::new(HashedTokenProvider)),
            ProviderKind::Http {
                endpoint_url,
                model_id,
                dimension,
                api_key_env,
            } => {
                let api_key = match api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        CommandError::unreadable(format!(
                            "environment variable {var} is not set"
                        ))
                    })?),
                    None => None,
                };
                let provider = HttpEmbeddingProvider::new(
                    endpoint_url.clone(),
                    model_id.clone(),
                    *dimension,
                    api_key,
                )
                .map_err(|e| CommandError::unreadable(e.to_string()))?;
                Ok(Box::new(provider))
            }
        }
    }

    /// The effective configuration echoed into reports for provenance.
    pub fn echo_json(&self) -> serde_json::Value {
        let provider = match &self.provider_kind {
            ProviderKind::Hashed => serde_json::json!({"kind": "hashed"}),
            ProviderKind::Http {
                endpoint_url,
                model_id,
                dimension,
                ..
            } => serde_json::json!({
                "kind": "http",
                "endpoint_url": endpoint_url,
                "model_id": model_id,
                "dimension": dimension,
            }),
        };
        serde_json::json!({
            "registry": self.registry_path.as_ref().map(|p| p.display().to_string()),
            "tau": self.tau,
            "budget_tokens": self.budget_tokens,
            "strategy": self.strategy,
            "token_estimator": DEFAULT_ESTIMATOR_ID,
            "score_params": self.score_params,
            "scan_options": self.scan_options,
            "unparseable_as_webshell": self.unparseable_as_webshell,
            "seed": self.seed,
            "llm": {
                "endpoint_url": self.llm.endpoint_url,
                "model_id": self.llm.model_id,
                "temperature": self.llm.temperature,
                "max_output_tokens": self.llm.max_output_tokens,
                "request_timeout_s": self.llm.request_timeout_s,
                "max_retries": self.llm.max_retries,
                "max_concurrent_requests": self.llm.max_concurrent_requests,
            },
            "embedding_provider": provider,
        })
    }
}
