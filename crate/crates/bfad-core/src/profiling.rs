//! Per-category corpus statistics, discrimination scores and normalized
//! category weights computed from a labeled corpus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluation::Label;
use crate::registry::{BehaviorCategory, CriticalFunctionRegistry};
use crate::scanner::{self, ScanOptions, SourceFile};

/// Guards the frequency and usage ratios against empty benign denominators.
pub const RATIO_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProfilingError {
    #[error("degenerate corpus: no files labeled {0:?}")]
    DegenerateCorpus(Label),
    #[error("uninformative corpus: all discrimination scores are zero")]
    UninformativeCorpus,
    #[error("weights file {path}: {message}")]
    InvalidWeights { path: String, message: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed weights JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Contrast statistics for one category across the two corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: BehaviorCategory,
    /// Fraction of webshell files containing at least one call.
    pub webshell_file_fraction: f64,
    pub benign_file_fraction: f64,
    pub webshell_avg_per_file: f64,
    pub benign_avg_per_file: f64,
    pub webshell_total: u64,
    pub benign_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub per_category: BTreeMap<BehaviorCategory, CategoryStats>,
    pub n_webshell: usize,
    pub n_benign: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[derive(Default)]
pub enum RatioTransform {
    /// Use the raw ratios. Unbounded, so ratio terms can dominate.
    Raw,
    /// `x / (1 + x)`, mapping ratios into `[0, 1)`.
    #[default]
    Squash,
    /// `ln(1 + x)`.
    Log1p,
}


impl RatioTransform {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            RatioTransform::Raw => x,
            RatioTransform::Squash => x / (1.0 + x),
            RatioTransform::Log1p => x.ln_1p(),
        }
    }
}

/// Scalar multipliers for the three contrast terms, plus the ratio transform
/// that harmonizes their units before combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub ratio_transform: RatioTransform,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            ratio_transform: RatioTransform::default(),
        }
    }
}

/// Normalized per-category weights: non-negative, summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: BTreeMap<BehaviorCategory, f64>,
}

impl WeightVector {
    pub fn get(&self, category: BehaviorCategory) -> f64 {
        self.weights.get(&category).copied().unwrap_or(0.0)
    }

    /// Equal weight for every category; the explicit fallback for corpora
    /// with no discriminative signal.
    pub fn uniform() -> Self {
        let w = 1.0 / BehaviorCategory::ALL.len() as f64;
        Self {
            weights: BehaviorCategory::ALL.iter().map(|c| (*c, w)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut sum = 0.0;
        for (category, w) in &self.weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(format!("weight for {category} is {w}"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("weights sum to {sum}, expected 1"));
        }
        Ok(())
    }
}

/// Per-file occurrence counts paired with the file's label.
pub type LabeledCounts = (BTreeMap<BehaviorCategory, usize>, Label);

/// Aggregates already-counted files into corpus statistics.
pub fn stats_from_counts(counts: &[LabeledCounts]) -> Result<CorpusStats, ProfilingError> {
    let n_webshell = counts.iter().filter(|(_, l)| *l == Label::Webshell).count();
    let n_benign = counts.len() - n_webshell;
    if n_webshell == 0 {
        return Err(ProfilingError::DegenerateCorpus(Label::Webshell));
    }
    if n_benign == 0 {
        return Err(ProfilingError::DegenerateCorpus(Label::Benign));
    }

    let mut per_category = BTreeMap::new();
    for category in BehaviorCategory::ALL {
        let mut ws_files = 0u64;
        let mut ws_total = 0u64;
        let mut benign_files = 0u64;
        let mut benign_total = 0u64;
        for (file_counts, label) in counts {
            let c = file_counts.get(&category).copied().unwrap_or(0) as u64;
            match label {
                Label::Webshell => {
                    ws_total += c;
                    if c > 0 {
                        ws_files += 1;
                    }
                }
                Label::Benign => {
                    benign_total += c;
                    if c > 0 {
                        benign_files += 1;
                    }
                }
            }
        }
        per_category.insert(
            category,
            CategoryStats {
                category,
                webshell_file_fraction: ws_files as f64 / n_webshell as f64,
                benign_file_fraction: benign_files as f64 / n_benign as f64,
                webshell_avg_per_file: ws_total as f64 / n_webshell as f64,
                benign_avg_per_file: benign_total as f64 / n_benign as f64,
                webshell_total: ws_total,
                benign_total,
            },
        );
    }
    Ok(CorpusStats {
        per_category,
        n_webshell,
        n_benign,
    })
}

/// Scans every file and aggregates per-category statistics.
pub fn compute_corpus_stats(
    corpus: &[(SourceFile, Label)],
    registry: &CriticalFunctionRegistry,
    options: &ScanOptions,
) -> Result<CorpusStats, ProfilingError> {
    let counts: Vec<LabeledCounts> = corpus
        .iter()
        .map(|(file, label)| {
            let occurrences = scanner::scan_with_options(file, registry, options);
            (scanner::count_by_category(&occurrences), *label)
        })
        .collect();
    stats_from_counts(&counts)
}

/// The three class-contrast terms for one category: coverage difference,
/// raw frequency ratio and raw usage ratio.
pub fn class_contrast(stats: &CategoryStats) -> (f64, f64, f64) {
    let coverage_diff = stats.webshell_file_fraction - stats.benign_file_fraction;
    let frequency_ratio =
        stats.webshell_avg_per_file / stats.benign_avg_per_file.max(RATIO_EPSILON);
    let usage_ratio = stats.webshell_total as f64 / (stats.benign_total as f64).max(RATIO_EPSILON);
    (coverage_diff, frequency_ratio, usage_ratio)
}

/// Discrimination score per category: the coverage difference plus the two
/// transformed ratios, each scaled by its multiplier. Negative scores clamp
/// to zero.
pub fn discrimination_scores(
    stats: &CorpusStats,
    params: &ScoreParams,
) -> BTreeMap<BehaviorCategory, f64> {
    let mut scores = BTreeMap::new();
    for (category, cat_stats) in &stats.per_category {
        let (coverage_diff, frequency_ratio, usage_ratio) = class_contrast(cat_stats);
        let score = coverage_diff * params.alpha
            + params.ratio_transform.apply(frequency_ratio) * params.beta
            + params.ratio_transform.apply(usage_ratio) * params.gamma;
        scores.insert(*category, score.max(0.0));
    }
    scores
}

/// Normalizes scores to weights summing to 1.
pub fn normalize_weights(
    scores: &BTreeMap<BehaviorCategory, f64>,
) -> Result<WeightVector, ProfilingError> {
    let total: f64 = scores.values().sum();
    if total <= 0.0 {
        return Err(ProfilingError::UninformativeCorpus);
    }
    let weights = scores.iter().map(|(c, s)| (*c, s / total)).collect();
    Ok(WeightVector { weights })
}

/// Persisted weights document: the weights, the parameters that produced
/// them, and a fingerprint of the source statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsDocument {
    pub format_version: u32,
    pub weights: WeightVector,
    pub params: ScoreParams,
    pub corpus_fingerprint: String,
}

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

impl WeightsDocument {
    pub fn new(weights: WeightVector, params: ScoreParams, stats: &CorpusStats) -> Self {
        Self {
            format_version: WEIGHTS_FORMAT_VERSION,
            weights,
            params,
            corpus_fingerprint: corpus_fingerprint(stats),
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ProfilingError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|source| ProfilingError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ProfilingError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ProfilingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let doc: WeightsDocument = serde_json::from_str(&text)?;
        doc.weights
            .validate()
            .map_err(|message| ProfilingError::InvalidWeights {
                path: path.display().to_string(),
                message,
            })?;
        Ok(doc)
    }
}

/// SHA-256 over the canonical JSON of the statistics.
pub fn corpus_fingerprint(stats: &CorpusStats) -> String {
    let json = serde_json::to_string(stats).expect("stats serialize");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    format!("sha256:{:x}", hasher.finalize())
}
