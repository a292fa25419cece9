//! Argument definitions for every subcommand.

use std::path::PathBuf;

use bfad_core::evaluation::Label;
use bfad_core::extraction::Strategy;
use bfad_core::profiling::RatioTransform;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "bfad",
    version,
    about = "Behavior-anchored PHP WebShell detection pipeline",
    long_about = "Locates security-critical function calls in PHP sources, extracts \
behavior-centered code views under a token budget, retrieves in-context demonstrations \
by behavior-weighted similarity, queries a chat-completion endpoint and scores the verdicts."
)]
pub struct Cli {
    /// JSON config file; command-line flags take precedence over its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for randomized steps (the stratified split).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Critical-function registry file; the built-in taxonomy when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub registry: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Scan PHP files and list critical-function call sites as JSONL.
    Scan(ScanArgs),
    /// Print the extracted code view of one file.
    Extract(ExtractArgs),
    /// Compute per-category statistics, discrimination scores and weights.
    Profile(ProfileArgs),
    /// Build a demonstration library directory from a labeled manifest.
    BuildLibrary(BuildLibraryArgs),
    /// Classify files through the full pipeline against a chat endpoint.
    Detect(DetectArgs),
    /// Split a labeled manifest into library and eval parts, stratified.
    Split(SplitArgs),
}

#[derive(clap::Args, Debug)]
pub struct ScanArgs {
    /// Files or directories; directories are searched recursively for *.php.
    #[arg(required = true, value_name = "PATH")]
    pub paths: Vec<PathBuf>,

    /// Also count name tokens inside string literals and heredoc bodies.
    #[arg(long)]
    pub count_in_strings: bool,

    /// Only count preg_replace calls whose literal pattern carries /e.
    #[arg(long)]
    pub require_e_modifier: bool,
}

#[derive(clap::Args, Debug)]
pub struct ExtractArgs {
    #[arg(value_name = "PATH")]
    pub path: PathBuf,

    /// Context radius around each call position, in bytes.
    #[arg(long, value_name = "BYTES")]
    pub tau: Option<usize>,

    /// Token budget for the rendered view, omission markers included.
    #[arg(long, value_name = "TOKENS")]
    pub budget_tokens: Option<usize>,

    /// Extraction strategy.
    #[arg(long, value_enum, value_name = "STRATEGY")]
    pub strategy: Option<StrategyArg>,

    #[arg(long)]
    pub count_in_strings: bool,

    #[arg(long)]
    pub require_e_modifier: bool,
}

#[derive(clap::Args, Debug)]
pub struct ProfileArgs {
    /// Labeled JSONL manifest (the demonstration-library split).
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    /// Multiplier for the coverage-difference term.
    #[arg(long, value_name = "X")]
    pub alpha: Option<f64>,

    /// Multiplier for the frequency-ratio term.
    #[arg(long, value_name = "X")]
    pub beta: Option<f64>,

    /// Multiplier for the usage-ratio term.
    #[arg(long, value_name = "X")]
    pub gamma: Option<f64>,

    /// How unbounded ratios are mapped before combination.
    #[arg(long, value_enum, value_name = "TRANSFORM")]
    pub ratio_transform: Option<RatioTransformArg>,

    /// Fall back to uniform weights when every score is zero.
    #[arg(long)]
    pub fallback_uniform: bool,

    /// Write the reloadable weights document here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,

    #[arg(long)]
    pub count_in_strings: bool,

    #[arg(long)]
    pub require_e_modifier: bool,
}

#[derive(clap::Args, Debug)]
pub struct BuildLibraryArgs {
    /// Labeled JSONL manifest of the library split.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    /// Output library directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Weights document produced by `profile`; recomputed from the manifest
    /// when omitted.
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,

    #[arg(long)]
    pub fallback_uniform: bool,

    #[arg(long, value_name = "BYTES")]
    pub tau: Option<usize>,

    #[arg(long, value_name = "TOKENS")]
    pub budget_tokens: Option<usize>,

    #[arg(long, value_enum, value_name = "STRATEGY")]
    pub strategy: Option<StrategyArg>,

    #[command(flatten)]
    pub provider: ProviderArgs,

    #[arg(long)]
    pub count_in_strings: bool,

    #[arg(long)]
    pub require_e_modifier: bool,
}

#[derive(clap::Args, Debug)]
pub struct DetectArgs {
    /// Individual PHP files to classify.
    #[arg(value_name = "PATH")]
    pub paths: Vec<PathBuf>,

    /// Labeled JSONL manifest; enables the full evaluation report.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,

    /// Demonstration library directory built by `build-library`.
    #[arg(long, value_name = "DIR")]
    pub library: PathBuf,

    /// Use the deterministic offline stub instead of a real endpoint.
    #[arg(long)]
    pub stub: bool,

    /// Chat-completion endpoint base URL.
    #[arg(long, value_name = "URL")]
    pub endpoint_url: Option<String>,

    #[arg(long, value_name = "ID")]
    pub model_id: Option<String>,

    /// Environment variable holding the API key.
    #[arg(long, value_name = "VAR")]
    pub api_key_env: Option<String>,

    #[arg(long, value_name = "X")]
    pub temperature: Option<f64>,

    #[arg(long, value_name = "N")]
    pub max_output_tokens: Option<usize>,

    #[arg(long, value_name = "SECONDS")]
    pub request_timeout_s: Option<f64>,

    #[arg(long, value_name = "N")]
    pub max_retries: Option<usize>,

    #[arg(long, value_name = "N")]
    pub max_concurrent_requests: Option<usize>,

    /// Where the evaluation report JSON is written (CSV lands alongside).
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,

    /// Count unparseable responses as WebShell (fail closed) instead of the
    /// majority class.
    #[arg(long)]
    pub unparseable_as_webshell: bool,

    /// Restrict demonstration candidates by label; `mix` is pure similarity.
    #[arg(long, value_enum, value_name = "LABEL")]
    pub require_label: Option<RequireLabelArg>,

    #[arg(long, value_name = "BYTES")]
    pub tau: Option<usize>,

    #[arg(long, value_name = "TOKENS")]
    pub budget_tokens: Option<usize>,

    #[arg(long, value_enum, value_name = "STRATEGY")]
    pub strategy: Option<StrategyArg>,

    #[command(flatten)]
    pub provider: ProviderArgs,

    #[arg(long)]
    pub count_in_strings: bool,

    #[arg(long)]
    pub require_e_modifier: bool,
}

#[derive(clap::Args, Debug)]
pub struct SplitArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    /// Fraction of each label assigned to the library split.
    #[arg(long, value_name = "F", default_value_t = 0.6)]
    pub fraction: f64,

    #[arg(long, value_name = "FILE")]
    pub library_out: PathBuf,

    #[arg(long, value_name = "FILE")]
    pub eval_out: PathBuf,
}

/// Embedding provider selection shared by build-library and detect.
#[derive(clap::Args, Debug)]
pub struct ProviderArgs {
    /// Embedding provider: the offline hashed-token provider or HTTP.
    #[arg(long, value_enum, value_name = "PROVIDER")]
    pub embedding_provider: Option<EmbeddingProviderArg>,

    /// Embeddings endpoint URL (HTTP provider).
    #[arg(long, value_name = "URL")]
    pub embed_endpoint_url: Option<String>,

    /// Embedding model identifier (HTTP provider).
    #[arg(long, value_name = "ID")]
    pub embed_model_id: Option<String>,

    /// Embedding vector dimension (HTTP provider).
    #[arg(long, value_name = "N")]
    pub embed_dimension: Option<usize>,

    /// Environment variable holding the embeddings API key (HTTP provider).
    #[arg(long, value_name = "VAR")]
    pub embed_api_key_env: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyArg {
    Critical,
    Hybrid,
}

impl From<StrategyArg> for Strategy {
    fn from(value: StrategyArg) -> Self {
        match value {
            StrategyArg::Critical => Strategy::CriticalOnly,
            StrategyArg::Hybrid => Strategy::Hybrid,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatioTransformArg {
    Raw,
    Squash,
    Log1p,
}

impl From<RatioTransformArg> for RatioTransform {
    fn from(value: RatioTransformArg) -> Self {
        match value {
            RatioTransformArg::Raw => RatioTransform::Raw,
            RatioTransformArg::Squash => RatioTransform::Squash,
            RatioTransformArg::Log1p => RatioTransform::Log1p,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequireLabelArg {
    Webshell,
    Benign,
    Mix,
}

impl RequireLabelArg {
    pub fn as_filter(self) -> Option<Label> {
        match self {
            RequireLabelArg::Webshell => Some(Label::Webshell),
            RequireLabelArg::Benign => Some(Label::Benign),
            RequireLabelArg::Mix => None,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingProviderArg {
    Hashed,
    Http,
}
