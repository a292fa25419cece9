//! Behavior-anchored detection of PHP WebShells.
//!
//! The pipeline locates security-critical function calls, extracts a compact
//! behavior-centered code view under a token budget, ranks in-context
//! demonstrations by behavior-weighted similarity, queries a chat-completion
//! endpoint and scores the verdicts against a labeled manifest.

pub mod evaluation;
pub mod extraction;
pub mod llm;
pub mod profiling;
pub mod registry;
pub mod retrieval;
pub mod scanner;

pub use evaluation::{ConfusionMatrix, DatasetManifest, EvalReport, Label, Metrics};
pub use extraction::{CodeRegion, ExtractedView, ExtractionConfig, RegionOrigin, Strategy};
pub use llm::{LlmConfig, PromptBundle, Verdict, VerdictLabel};
pub use profiling::{CategoryStats, CorpusStats, RatioTransform, ScoreParams, WeightVector};
pub use registry::{BehaviorCategory, CriticalFunctionRegistry};
pub use retrieval::{BehavioralProfile, DemonstrationLibrary, EmbeddingProvider};
pub use scanner::{FunctionOccurrence, ScanOptions, SourceFile};
