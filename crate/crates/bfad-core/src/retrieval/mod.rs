//! Behavioral profiles, weighted similarity and demonstration selection.

mod library;
mod provider;

pub use library::{build_library, DemonstrationLibrary, LibraryEntry, LIBRARY_FORMAT_VERSION};
pub use provider::{
    EmbeddingProvider, HashedTokenProvider, HttpEmbeddingProvider, ProviderError,
    HASHED_TOKEN_DIMENSION, HASHED_TOKEN_PROVIDER_ID,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::Label;
use crate::extraction::{ExtractedView, RegionOrigin};
use crate::profiling::WeightVector;
use crate::registry::BehaviorCategory;
use crate::scanner::{FunctionOccurrence, SourceFile};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding {category} of {file_id}: {source}")]
    Embedding {
        file_id: String,
        category: BehaviorCategory,
        #[source]
        source: ProviderError,
    },
    #[error("demonstration library is empty")]
    EmptyLibrary,
    #[error("library {path}: {message}")]
    InvalidLibrary { path: String, message: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("library serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("library built with provider {library:?}, queried with {query:?}")]
    ProviderMismatch { library: String, query: String },
}

/// Per-category text and embeddings of one file. An embedding exists exactly
/// for the categories with non-empty text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralProfile {
    pub file_id: String,
    pub per_category_text: BTreeMap<BehaviorCategory, String>,
    pub per_category_embedding: BTreeMap<BehaviorCategory, Vec<f64>>,
    pub label: Option<Label>,
}

impl BehavioralProfile {
    pub fn populated_categories(&self) -> impl Iterator<Item = BehaviorCategory> + '_ {
        self.per_category_embedding.keys().copied()
    }

    pub fn has_signal(&self) -> bool {
        !self.per_category_embedding.is_empty()
    }
}

/// Groups the view's critical regions by the categories of the occurrences
/// anchoring them and embeds each category's concatenated text.
///
/// A merged region containing anchors of several categories contributes its
/// text to each of them; region texts concatenate in document order,
/// newline-separated.
pub fn build_profile(
    file: &SourceFile,
    view: &ExtractedView,
    occurrences: &[FunctionOccurrence],
    provider: &dyn EmbeddingProvider,
    label: Option<Label>,
) -> Result<BehavioralProfile, RetrievalError> {
    let file_id = file.path.display().to_string();
    let mut per_category_text: BTreeMap<BehaviorCategory, String> = BTreeMap::new();

    for region in view
        .regions
        .iter()
        .filter(|r| r.origin == RegionOrigin::CriticalWindow)
    {
        let mut categories: Vec<BehaviorCategory> = occurrences
            .iter()
            .filter(|occ| region.contains(occ.byte_offset))
            .map(|occ| occ.category)
            .collect();
        categories.sort();
        categories.dedup();
        let text = &file.content[region.start..region.end];
        for category in categories {
            let entry = per_category_text.entry(category).or_default();
            if !entry.is_empty() {
                entry.push('\n');
            }
            entry.push_str(text);
        }
    }
    per_category_text.retain(|_, text| !text.is_empty());

    let mut per_category_embedding = BTreeMap::new();
    for (category, text) in &per_category_text {
        let vector = provider
            .embed(text)
            .map_err(|source| RetrievalError::Embedding {
                file_id: file_id.clone(),
                category: *category,
                source,
            })?;
        per_category_embedding.insert(*category, vector);
    }

    Ok(BehavioralProfile {
        file_id,
        per_category_text,
        per_category_embedding,
        label,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    dot / (norm_a * norm_b)
}

/// Cosine similarity of the two profiles' embeddings for `category`; 0.0 when
/// either side lacks the category.
pub fn category_similarity(
    x: &BehavioralProfile,
    y: &BehavioralProfile,
    category: BehaviorCategory,
) -> f64 {
    match (
        x.per_category_embedding.get(&category),
        y.per_category_embedding.get(&category),
    ) {
        (Some(a), Some(b)) => cosine(a, b),
        _ => 0.0,
    }
}

/// Weighted similarity: the weight-scaled sum of per-category cosines.
/// Symmetric in its profile arguments.
pub fn weighted_similarity(
    x: &BehavioralProfile,
    y: &BehavioralProfile,
    weights: &WeightVector,
) -> f64 {
    BehaviorCategory::ALL
        .iter()
        .map(|category| weights.get(*category) * category_similarity(x, y, *category))
        .sum()
}

/// One selected demonstration with its similarity score.
#[derive(Debug, Clone)]
pub struct SelectedDemo<'a> {
    pub entry: &'a LibraryEntry,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Selection<'a> {
    pub picks: Vec<SelectedDemo<'a>>,
    pub warnings: Vec<String>,
}

/// Returns the `k` highest-similarity library entries, sorted by score
/// descending with ties broken by ascending file id. The target's own file id
/// is excluded. A target with no populated categories scores 0 everywhere and
/// falls back to file-id order with a warning.
pub fn select_demonstration<'a>(
    target: &BehavioralProfile,
    library: &'a DemonstrationLibrary,
    k: usize,
) -> Result<Selection<'a>, RetrievalError> {
    if library.entries.is_empty() {
        return Err(RetrievalError::EmptyLibrary);
    }
    let mut warnings = Vec::new();
    if !target.has_signal() {
        warnings.push(format!(
            "no behavioral signal in {}: all similarities are 0, selection falls back to file-id order",
            target.file_id
        ));
    }
    let mut scored: Vec<(&LibraryEntry, f64)> = library
        .entries
        .iter()
        .filter(|entry| entry.profile.file_id != target.file_id)
        .map(|entry| {
            (
                entry,
                weighted_similarity(target, &entry.profile, &library.weights),
            )
        })
        .collect();
    scored.sort_by(|(ea, sa), (eb, sb)| {
        sb.total_cmp(sa)
            .then_with(|| ea.profile.file_id.cmp(&eb.profile.file_id))
    });
    scored.truncate(k);
    Ok(Selection {
        picks: scored
            .into_iter()
            .map(|(entry, score)| SelectedDemo { entry, score })
            .collect(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{self, ExtractionConfig, Strategy};
    use crate::registry::CriticalFunctionRegistry;
    use crate::scanner;

    fn profile_with(
        file_id: &str,
        label: Option<Label>,
        categories: &[(BehaviorCategory, Vec<f64>)],
    ) -> BehavioralProfile {
        BehavioralProfile {
            file_id: file_id.to_string(),
            per_category_text: categories
                .iter()
                .map(|(c, _)| (*c, format!("text for {c}")))
                .collect(),
            per_category_embedding: categories.iter().cloned().collect(),
            label,
        }
    }

    fn pipeline_profile(content: &str, tau: usize) -> BehavioralProfile {
        let file = SourceFile::from_string("test.php", content);
        let registry = CriticalFunctionRegistry::default_registry();
        let occurrences = scanner::scan(&file, &registry);
        let config = ExtractionConfig::new(tau, 100_000, Strategy::Hybrid).unwrap();
        let view = extraction::extract(&file, &occurrences, &config).unwrap();
        build_profile(&file, &view, &occurrences, &HashedTokenProvider, None).unwrap()
    }

    #[test]
    fn single_category_file_populates_one_category() {
        let profile = pipeline_profile("<?php eval($a); eval($b);", 50);
        let populated: Vec<_> = profile.populated_categories().collect();
        assert_eq!(populated, vec![BehaviorCategory::CodeExecution]);
        assert!(profile.per_category_text[&BehaviorCategory::CodeExecution].contains("eval"));
    }

    #[test]
    fn no_occurrences_give_empty_profile() {
        let profile = pipeline_profile("<?php echo 'hello';", 50);
        assert!(profile.per_category_text.is_empty());
        assert!(profile.per_category_embedding.is_empty());
        assert!(!profile.has_signal());
    }

    #[test]
    fn merged_region_feeds_every_anchor_category() {
        // eval at p=100 and base64_encode at p=110 with tau=100: the windows
        // merge, and the merged text lands under both categories.
        let mut content = String::from("<?php ");
        content.push_str(&" ".repeat(100 - content.len()));
        content.push_str("eval($x); base64_encode($y);");
        let file = SourceFile::from_string("t.php", &content);
        let registry = CriticalFunctionRegistry::default_registry();
        let occurrences = scanner::scan(&file, &registry);
        assert_eq!(occurrences.len(), 2);
        assert_eq!(occurrences[0].byte_offset, 100);

        let config = ExtractionConfig::new(100, 100_000, Strategy::CriticalOnly).unwrap();
        let view = extraction::extract(&file, &occurrences, &config).unwrap();
        assert_eq!(view.regions.len(), 1);

        let profile =
            build_profile(&file, &view, &occurrences, &HashedTokenProvider, None).unwrap();
        let code = &profile.per_category_text[&BehaviorCategory::CodeExecution];
        let obf = &profile.per_category_text[&BehaviorCategory::ObfuscationAndEncryption];
        assert_eq!(code, obf);
        assert!(code.contains("eval") && code.contains("base64_encode"));
    }

    #[test]
    fn identical_text_has_unit_self_similarity() {
        let a = pipeline_profile("<?php eval($cmd);", 50);
        let b = pipeline_profile("<?php eval($cmd);", 50);
        let sim = category_similarity(&a, &b, BehaviorCategory::CodeExecution);
        assert!((sim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn missing_side_scores_zero() {
        let x = profile_with("x", None, &[(BehaviorCategory::CodeExecution, vec![1.0, 0.0])]);
        let y = profile_with("y", None, &[]);
        assert_eq!(category_similarity(&x, &y, BehaviorCategory::CodeExecution), 0.0);
        assert_eq!(category_similarity(&y, &x, BehaviorCategory::CodeExecution), 0.0);
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        let x = profile_with("x", None, &[(BehaviorCategory::CodeExecution, vec![1.0, 0.0])]);
        let y = profile_with("y", None, &[(BehaviorCategory::CodeExecution, vec![0.0, 1.0])]);
        assert_eq!(category_similarity(&x, &y, BehaviorCategory::CodeExecution), 0.0);
    }

    #[test]
    fn full_self_similarity_sums_weights_to_one() {
        let categories: Vec<(BehaviorCategory, Vec<f64>)> = BehaviorCategory::ALL
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut v = vec![0.0; 8];
                v[i] = 1.0;
                (*c, v)
            })
            .collect();
        let x = profile_with("x", None, &categories);
        let weights = WeightVector::uniform();
        let sim = weighted_similarity(&x, &x, &weights);
        assert!((sim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn partial_self_similarity_sums_populated_weights() {
        let x = profile_with(
            "x",
            None,
            &[
                (BehaviorCategory::CodeExecution, vec![1.0, 2.0, 3.0]),
                (BehaviorCategory::ProgramExecution, vec![0.5, 0.5]),
            ],
        );
        let weights = WeightVector::uniform();
        let expected = weights.get(BehaviorCategory::CodeExecution)
            + weights.get(BehaviorCategory::ProgramExecution);
        assert!((weighted_similarity(&x, &x, &weights) - expected).abs() < 1e-9);
    }

    #[test]
    fn weighted_similarity_is_symmetric() {
        let x = pipeline_profile("<?php eval($a); exec('ls'); base64_encode($b);", 30);
        let y = pipeline_profile("<?php eval($z); fsockopen('h', 80);", 30);
        let weights = WeightVector::uniform();
        let xy = weighted_similarity(&x, &y, &weights);
        let yx = weighted_similarity(&y, &x, &weights);
        assert_eq!(xy, yx);
        assert!(xy.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn zero_weight_categories_cannot_affect_similarity() {
        let mut weights = WeightVector::uniform();
        // Move all mass away from ObfuscationAndEncryption.
        *weights
            .weights
            .get_mut(&BehaviorCategory::ObfuscationAndEncryption)
            .unwrap() = 0.0;
        *weights
            .weights
            .get_mut(&BehaviorCategory::CodeExecution)
            .unwrap() += 1.0 / 6.0;

        let base = vec![(BehaviorCategory::CodeExecution, vec![1.0, 1.0])];
        let mut with_extra = base.clone();
        with_extra.push((BehaviorCategory::ObfuscationAndEncryption, vec![9.0, 1.0]));
        let target = profile_with("t", None, &base);
        let a = profile_with("a", None, &base);
        let b = profile_with("b", None, &with_extra);
        let sim_a = weighted_similarity(&target, &a, &weights);
        let sim_b = weighted_similarity(&target, &b, &weights);
        assert!((sim_a - sim_b).abs() < 1e-12);
    }
}
