//! Demonstration library: construction from a labeled manifest and the
//! versioned on-disk directory format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_profile, BehavioralProfile, EmbeddingProvider, RetrievalError};
use crate::evaluation::Label;
use crate::extraction::{self, ExtractionConfig};
use crate::profiling::WeightVector;
use crate::registry::CriticalFunctionRegistry;
use crate::scanner::{self, ScanOptions, SourceFile};

pub const LIBRARY_FORMAT_VERSION: u32 = 1;

/// One library member: its behavioral profile and the rendered view text
/// injected into the prompt when the member is selected as a demonstration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub profile: BehavioralProfile,
    pub rendered_view: String,
}

impl LibraryEntry {
    pub fn label(&self) -> Label {
        self.profile.label.expect("library entries are labeled")
    }
}

/// The fixed demonstration pool: labeled profiles, the weight vector used for
/// ranking, and the id of the provider that produced the embeddings.
#[derive(Debug, Clone)]
pub struct DemonstrationLibrary {
    pub entries: Vec<LibraryEntry>,
    pub weights: WeightVector,
    pub embedding_provider_id: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    format_version: u32,
    embedding_provider_id: String,
    dimension: usize,
    weights: WeightVector,
    profiles: Vec<ManifestProfile>,
}

#[derive(Serialize, Deserialize)]
struct ManifestProfile {
    file_id: String,
    label: Label,
    record: String,
}

impl DemonstrationLibrary {
    pub fn new(
        entries: Vec<LibraryEntry>,
        weights: WeightVector,
        embedding_provider_id: String,
    ) -> Result<Self, RetrievalError> {
        if entries.is_empty() {
            return Err(RetrievalError::EmptyLibrary);
        }
        for entry in &entries {
            if entry.profile.label.is_none() {
                return Err(RetrievalError::InvalidLibrary {
                    path: "<in-memory>".to_string(),
                    message: format!("profile {} is unlabeled", entry.profile.file_id),
                });
            }
        }
        weights
            .validate()
            .map_err(|message| RetrievalError::InvalidLibrary {
                path: "<in-memory>".to_string(),
                message,
            })?;
        Ok(Self {
            entries,
            weights,
            embedding_provider_id,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes the library as a directory: `manifest.json` plus one record
    /// file per profile under `records/`.
    pub fn save(&self, dir: impl AsRef<Path>, dimension: usize) -> Result<(), RetrievalError> {
        let dir = dir.as_ref();
        let records_dir = dir.join("records");
        std::fs::create_dir_all(&records_dir).map_err(|source| RetrievalError::Io {
            path: records_dir.display().to_string(),
            source,
        })?;
        let mut profiles = Vec::with_capacity(self.entries.len());
        for (i, entry) in self.entries.iter().enumerate() {
            let record = format!("records/{i:06}.json");
            let record_path = dir.join(&record);
            let json = serde_json::to_string(entry)?;
            std::fs::write(&record_path, json).map_err(|source| RetrievalError::Io {
                path: record_path.display().to_string(),
                source,
            })?;
            profiles.push(ManifestProfile {
                file_id: entry.profile.file_id.clone(),
                label: entry.label(),
                record,
            });
        }
        let manifest = ManifestDoc {
            format_version: LIBRARY_FORMAT_VERSION,
            embedding_provider_id: self.embedding_provider_id.clone(),
            dimension,
            weights: self.weights.clone(),
            profiles,
        };
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&manifest_path, json).map_err(|source| RetrievalError::Io {
            path: manifest_path.display().to_string(),
            source,
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|source| RetrievalError::Io {
                path: manifest_path.display().to_string(),
                source,
            })?;
        let manifest: ManifestDoc = serde_json::from_str(&text)?;
        if manifest.format_version != LIBRARY_FORMAT_VERSION {
            return Err(RetrievalError::InvalidLibrary {
                path: dir.display().to_string(),
                message: format!(
                    "unsupported format version {} (expected {})",
                    manifest.format_version, LIBRARY_FORMAT_VERSION
                ),
            });
        }
        let mut entries = Vec::with_capacity(manifest.profiles.len());
        for profile_ref in &manifest.profiles {
            let record_path = dir.join(&profile_ref.record);
            let record_text =
                std::fs::read_to_string(&record_path).map_err(|source| RetrievalError::Io {
                    path: record_path.display().to_string(),
                    source,
                })?;
            let entry: LibraryEntry = serde_json::from_str(&record_text)?;
            for vector in entry.profile.per_category_embedding.values() {
                if vector.len() != manifest.dimension {
                    return Err(RetrievalError::InvalidLibrary {
                        path: record_path.display().to_string(),
                        message: format!(
                            "embedding dimension {} does not match manifest {}",
                            vector.len(),
                            manifest.dimension
                        ),
                    });
                }
            }
            entries.push(entry);
        }
        Self::new(entries, manifest.weights, manifest.embedding_provider_id).map_err(|e| {
            match e {
                RetrievalError::EmptyLibrary => RetrievalError::InvalidLibrary {
                    path: dir.display().to_string(),
                    message: "library directory holds no profiles".to_string(),
                },
                other => other,
            }
        })
    }
}

/// Builds library entries by running scan, extraction and profiling over each
/// labeled file. Embeddings are computed once here and persisted with the
/// library.
pub fn build_library(
    corpus: &[(SourceFile, Label)],
    registry: &CriticalFunctionRegistry,
    scan_options: &ScanOptions,
    extraction_config: &ExtractionConfig,
    provider: &dyn EmbeddingProvider,
    weights: WeightVector,
) -> Result<DemonstrationLibrary, RetrievalError> {
    let mut entries = Vec::with_capacity(corpus.len());
    for (file, label) in corpus {
        let occurrences = scanner::scan_with_options(file, registry, scan_options);
        let view = extraction::extract(file, &occurrences, extraction_config).map_err(|e| {
            RetrievalError::InvalidLibrary {
                path: file.path.display().to_string(),
                message: e.to_string(),
            }
        })?;
        let profile = build_profile(file, &view, &occurrences, provider, Some(*label))?;
        entries.push(LibraryEntry {
            profile,
            rendered_view: view.rendered_text,
        });
    }
    DemonstrationLibrary::new(entries, weights, provider.identifier().to_string())
}
