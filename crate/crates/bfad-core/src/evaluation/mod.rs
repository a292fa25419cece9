//! Labeled manifests, the confusion matrix and classification metrics.
//! WebShell is the positive class throughout.

mod runner;

pub use runner::{
    detect_file, run_evaluation, EvalReport, EvalSettings, FileDetection, PerFileResult,
    PipelineError, REPORT_FORMAT_VERSION,
};

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Webshell,
    Benign,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Webshell => "webshell",
            Label::Benign => "benign",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {message}")]
    ManifestEntry {
        path: String,
        line: usize,
        message: String,
    },
    #[error("manifest {path}: duplicate path {duplicate}")]
    DuplicatePath { path: String, duplicate: String },
    #[error("split fraction must be strictly between 0 and 1, got {0}")]
    FractionOutOfRange(f64),
    #[error("empty manifest")]
    EmptyManifest,
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("every request failed; first error: {first}")]
    AllRequestsFailed { first: String },
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Library,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
}

/// A labeled dataset: JSONL on disk, one `{"path": ..., "label": ...}` per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Option<SplitTag>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, EvalError> {
        let mut seen = BTreeSet::new();
        for entry in &entries {
            if !seen.insert(entry.path.clone()) {
                return Err(EvalError::DuplicatePath {
                    path: "<in-memory>".to_string(),
                    duplicate: entry.path.display().to_string(),
                });
            }
        }
        Ok(Self {
            entries,
            split: None,
        })
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(line).map_err(|e| EvalError::ManifestEntry {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            if !seen.insert(entry.path.clone()) {
                return Err(EvalError::DuplicatePath {
                    path: path.display().to_string(),
                    duplicate: entry.path.display().to_string(),
                });
            }
            entries.push(entry);
        }
        Ok(Self {
            entries,
            split: None,
        })
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

/// Deterministic stratified split: per label, entries are ordered by path,
/// shuffled with a seeded generator, and the first `round(fraction · n)` go
/// to the library. The two parts are disjoint and exhaustive.
pub fn split_manifest(
    manifest: &DatasetManifest,
    library_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), EvalError> {
    if !(library_fraction > 0.0 && library_fraction < 1.0) {
        return Err(EvalError::FractionOutOfRange(library_fraction));
    }
    if manifest.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut library = Vec::new();
    let mut eval = Vec::new();
    for label in [Label::Webshell, Label::Benign] {
        let mut group: Vec<ManifestEntry> = manifest
            .entries
            .iter()
            .filter(|e| e.label == label)
            .cloned()
            .collect();
        group.sort_by(|a, b| a.path.cmp(&b.path));
        group.shuffle(&mut rng);
        let take = ((library_fraction * group.len() as f64).round() as usize).min(group.len());
        for (i, entry) in group.into_iter().enumerate() {
            if i < take {
                library.push(entry);
            } else {
                eval.push(entry);
            }
        }
    }
    library.sort_by(|a, b| a.path.cmp(&b.path));
    eval.sort_by(|a, b| a.path.cmp(&b.path));
    let mut library = DatasetManifest::new(library)?;
    library.split = Some(SplitTag::Library);
    let mut eval = DatasetManifest::new(eval)?;
    eval.split = Some(SplitTag::Eval);
    Ok((library, eval))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }

    pub fn record(&mut self, gold: Label, predicted: Label) {
        match (gold, predicted) {
            (Label::Webshell, Label::Webshell) => self.true_positives += 1,
            (Label::Webshell, Label::Benign) => self.false_negatives += 1,
            (Label::Benign, Label::Webshell) => self.false_positives += 1,
            (Label::Benign, Label::Benign) => self.true_negatives += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Standard metrics with WebShell positive. Undefined ratios (empty
/// denominators) are reported as 0 with an accompanying warning.
pub fn compute_metrics(matrix: &ConfusionMatrix) -> Result<(Metrics, Vec<String>), EvalError> {
    let total = matrix.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut warnings = Vec::new();
    let tp = matrix.true_positives as f64;
    let fp = matrix.false_positives as f64;
    let tn = matrix.true_negatives as f64;
    let fn_ = matrix.false_negatives as f64;

    let precision = if tp + fp == 0.0 {
        warnings.push("precision undefined (no positive predictions); reported as 0".to_string());
        0.0
    } else {
        tp / (tp + fp)
    };
    let recall = if tp + fn_ == 0.0 {
        warnings.push("recall undefined (no positive gold labels); reported as 0".to_string());
        0.0
    } else {
        tp / (tp + fn_)
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let accuracy = (tp + tn) / total as f64;
    Ok((
        Metrics {
            accuracy,
            precision,
            recall,
            f1,
        },
        warnings,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n_webshell: usize, n_benign: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..n_webshell {
            entries.push(ManifestEntry {
                path: PathBuf::from(format!("ws_{i:03}.php")),
                label: Label::Webshell,
            });
        }
        for i in 0..n_benign {
            entries.push(ManifestEntry {
                path: PathBuf::from(format!("benign_{i:03}.php")),
                label: Label::Benign,
            });
        }
        DatasetManifest::new(entries).unwrap()
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let m = manifest(3, 2);
        m.save_jsonl(&path).unwrap();
        let loaded = DatasetManifest::load_jsonl(&path).unwrap();
        assert_eq!(loaded.entries, m.entries);
    }

    #[test]
    fn jsonl_line_errors_carry_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, "{\"path\": \"a.php\", \"label\": \"webshell\"}\nnot json\n")
            .unwrap();
        match DatasetManifest::load_jsonl(&path).unwrap_err() {
            EvalError::ManifestEntry { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_paths_rejected() {
        let entries = vec![
            ManifestEntry {
                path: PathBuf::from("same.php"),
                label: Label::Webshell,
            },
            ManifestEntry {
                path: PathBuf::from("same.php"),
                label: Label::Benign,
            },
        ];
        assert!(matches!(
            DatasetManifest::new(entries),
            Err(EvalError::DuplicatePath { .. })
        ));
    }

    #[test]
    fn unknown_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, "{\"path\": \"a.php\", \"label\": \"spooky\"}\n").unwrap();
        assert!(DatasetManifest::load_jsonl(&path).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let m = manifest(5, 5);
        let (library, eval) = split_manifest(&m, 0.6, 7).unwrap();
        assert_eq!(library.len(), 6);
        assert_eq!(eval.len(), 4);
        assert_eq!(library.count(Label::Webshell), 3);
        assert_eq!(library.count(Label::Benign), 3);
        assert_eq!(library.split, Some(SplitTag::Library));
        assert_eq!(eval.split, Some(SplitTag::Eval));
    }

    #[test]
    fn split_is_deterministic() {
        let m = manifest(20, 30);
        let (lib_a, eval_a) = split_manifest(&m, 0.6, 42).unwrap();
        let (lib_b, eval_b) = split_manifest(&m, 0.6, 42).unwrap();
        assert_eq!(lib_a, lib_b);
        assert_eq!(eval_a, eval_b);
        // A different seed picks a different library (overwhelmingly likely).
        let (lib_c, _) = split_manifest(&m, 0.6, 43).unwrap();
        assert_ne!(lib_a, lib_c);
    }

    #[test]
    fn split_partition_property() {
        let m = manifest(40, 60);
        let (library, eval) = split_manifest(&m, 0.37, 11).unwrap();
        let all: BTreeSet<_> = m.entries.iter().map(|e| e.path.clone()).collect();
        let lib_set: BTreeSet<_> = library.entries.iter().map(|e| e.path.clone()).collect();
        let eval_set: BTreeSet<_> = eval.entries.iter().map(|e| e.path.clone()).collect();
        assert!(lib_set.is_disjoint(&eval_set));
        let union: BTreeSet<_> = lib_set.union(&eval_set).cloned().collect();
        assert_eq!(union, all);
    }

    #[test]
    fn split_fraction_bounds() {
        let m = manifest(2, 2);
        assert!(matches!(
            split_manifest(&m, 0.0, 1),
            Err(EvalError::FractionOutOfRange(_))
        ));
        assert!(matches!(
            split_manifest(&m, 1.0, 1),
            Err(EvalError::FractionOutOfRange(_))
        ));
    }

    #[test]
    fn metrics_gpt4_baseline_pattern() {
        // Perfect precision with imperfect recall.
        let matrix = ConfusionMatrix {
            true_positives: 86,
            false_negatives: 14,
            false_positives: 0,
            true_negatives: 900,
        };
        let (metrics, warnings) = compute_metrics(&matrix).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(metrics.precision, 1.0);
        assert!((metrics.recall - 0.86).abs() < 1e-12);
        assert!((metrics.f1 - 0.9247).abs() < 5e-5);
        assert!((metrics.accuracy - 986.0 / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_precision_warns() {
        let matrix = ConfusionMatrix {
            true_positives: 0,
            false_positives: 0,
            true_negatives: 5,
            false_negatives: 5,
        };
        let (metrics, warnings) = compute_metrics(&matrix).unwrap();
        assert_eq!(metrics.precision, 0.0);
        assert_eq!(metrics.f1, 0.0);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(
            compute_metrics(&ConfusionMatrix::default()),
            Err(EvalError::EmptyMatrix)
        ));
    }

    proptest::proptest! {
        #[test]
        fn metrics_match_independent_formulas(
            tp in 0u64..500,
            fp in 0u64..500,
            tn in 0u64..500,
            fn_ in 0u64..500,
        ) {
            proptest::prop_assume!(tp + fp + tn + fn_ > 0);
            let matrix = ConfusionMatrix {
                true_positives: tp,
                false_positives: fp,
                true_negatives: tn,
                false_negatives: fn_,
            };
            let (metrics, _) = compute_metrics(&matrix).unwrap();

            // Independent re-derivation.
            let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            let acc = (tp + tn) / (tp + fp + tn + fn_);
            proptest::prop_assert!((metrics.precision - p).abs() < 1e-12);
            proptest::prop_assert!((metrics.recall - r).abs() < 1e-12);
            proptest::prop_assert!((metrics.f1 - f1).abs() < 1e-12);
            proptest::prop_assert!((metrics.accuracy - acc).abs() < 1e-12);
        }

        #[test]
        fn split_counts_round_per_label(
            n_ws in 1usize..50,
            n_b in 1usize..50,
            frac in 0.05f64..0.95,
            seed in 0u64..1000,
        ) {
            let m = manifest(n_ws, n_b);
            let (library, eval) = split_manifest(&m, frac, seed).unwrap();
            let expect_ws = ((frac * n_ws as f64).round() as usize).min(n_ws);
            let expect_b = ((frac * n_b as f64).round() as usize).min(n_b);
            proptest::prop_assert_eq!(library.count(Label::Webshell), expect_ws);
            proptest::prop_assert_eq!(library.count(Label::Benign), expect_b);
            proptest::prop_assert_eq!(library.len() + eval.len(), m.len());
        }
    }
}
