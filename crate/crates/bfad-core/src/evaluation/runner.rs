//! Drives the pipeline over an eval manifest and aggregates the report.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{compute_metrics, ConfusionMatrix, DatasetManifest, EvalError, Label, Metrics};
use crate::extraction::{self, ExtractionConfig};
use crate::llm::{self, Demonstration, LlmClient, LlmConfig, Verdict, VerdictLabel};
use crate::registry::CriticalFunctionRegistry;
use crate::retrieval::{
    build_profile, select_demonstration, DemonstrationLibrary, EmbeddingProvider,
};
use crate::scanner::{self, ScanOptions, SourceFile};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Everything the per-file pipeline needs besides the library and endpoint.
#[derive(Clone)]
pub struct EvalSettings {
    pub registry: CriticalFunctionRegistry,
    pub scan_options: ScanOptions,
    pub extraction: ExtractionConfig,
    pub llm: LlmConfig,
    /// Count unparseable responses as WebShell (fail closed) instead of the
    /// majority class.
    pub unparseable_as_webshell: bool,
    /// Restrict demonstration candidates to one label; None is pure
    /// similarity over the whole library.
    pub demo_label_filter: Option<Label>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("extraction: {0}")]
    Extraction(#[from] crate::extraction::ExtractionError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error("prompt: {0}")]
    Prompt(#[from] crate::llm::PromptError),
    #[error("endpoint: {0}")]
    Llm(#[from] crate::llm::LlmError),
}

impl PipelineError {
    fn is_endpoint_failure(&self) -> bool {
        matches!(self, PipelineError::Llm(_))
    }
}

/// Outcome of classifying one file.
#[derive(Debug, Clone)]
pub struct FileDetection {
    pub verdict: Verdict,
    pub demo_id: Option<String>,
    pub similarity: Option<f64>,
    pub estimated_prompt_tokens: usize,
    pub warnings: Vec<String>,
}

/// Runs scan, extraction, profiling, demonstration selection and
/// classification for one in-memory file.
pub fn detect_file(
    file: &SourceFile,
    library: &DemonstrationLibrary,
    provider: &dyn EmbeddingProvider,
    client: &LlmClient,
    settings: &EvalSettings,
) -> Result<FileDetection, PipelineError> {
    if provider.identifier() != library.embedding_provider_id {
        return Err(crate::retrieval::RetrievalError::ProviderMismatch {
            library: library.embedding_provider_id.clone(),
            query: provider.identifier().to_string(),
        }
        .into());
    }
    let mut warnings = Vec::new();
    let occurrences = scanner::scan_with_options(file, &settings.registry, &settings.scan_options);
    let view = extraction::extract(file, &occurrences, &settings.extraction)?;
    warnings.extend(view.warnings.iter().cloned());

    let profile = build_profile(file, &view, &occurrences, provider, None)?;
    let selection = select_filtered(&profile, library, settings.demo_label_filter)?;
    warnings.extend(selection.1);
    let (demo, demo_id, similarity) = match selection.0 {
        Some((entry, score)) => (
            Some(Demonstration {
                file_id: entry.profile.file_id.clone(),
                rendered_view: entry.rendered_view.clone(),
                label: entry.label(),
            }),
            Some(entry.profile.file_id.clone()),
            Some(score),
        ),
        None => (None, None, None),
    };

    let estimator = settings.extraction.estimator()?;
    let bundle = llm::build_prompt(
        &view.critical_text(file),
        &view.backfill_text(file),
        demo.as_ref(),
        estimator.as_ref(),
    )?;
    let verdict = client.classify(&bundle)?;
    Ok(FileDetection {
        verdict,
        demo_id,
        similarity,
        estimated_prompt_tokens: bundle.estimated_tokens,
        warnings,
    })
}

type PickedDemo<'a> = Option<(&'a crate::retrieval::LibraryEntry, f64)>;

fn select_filtered<'a>(
    profile: &crate::retrieval::BehavioralProfile,
    library: &'a DemonstrationLibrary,
    label_filter: Option<Label>,
) -> Result<(PickedDemo<'a>, Vec<String>), PipelineError> {
    let selection = select_demonstration(profile, library, library.len())?;
    let pick = selection
        .picks
        .iter()
        .find(|p| label_filter.is_none_or(|want| p.entry.label() == want))
        .map(|p| (p.entry, p.score));
    Ok((pick, selection.warnings))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerFileResult {
    pub path: PathBuf,
    pub gold: Option<Label>,
    pub predicted: VerdictLabel,
    /// Prediction after resolving unparseable verdicts per configuration.
    pub effective: Label,
    pub demo_id: Option<String>,
    pub similarity: Option<f64>,
    pub latency_ms: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub matrix: ConfusionMatrix,
    pub metrics: Metrics,
    pub warnings: Vec<String>,
    pub per_file: Vec<PerFileResult>,
    /// SHA-256 over the stable report content; latency fields are excluded.
    pub fingerprint: String,
}

#[derive(Serialize)]
struct StableRow<'a> {
    path: &'a Path,
    gold: Option<Label>,
    predicted: VerdictLabel,
    effective: Label,
    demo_id: &'a Option<String>,
    similarity: Option<f64>,
    error: &'a Option<String>,
}

fn report_fingerprint(
    config: &serde_json::Value,
    matrix: &ConfusionMatrix,
    per_file: &[PerFileResult],
) -> String {
    let rows: Vec<StableRow> = per_file
        .iter()
        .map(|r| StableRow {
            path: &r.path,
            gold: r.gold,
            predicted: r.predicted,
            effective: r.effective,
            demo_id: &r.demo_id,
            similarity: r.similarity,
            error: &r.error,
        })
        .collect();
    let payload =
        serde_json::to_string(&(config, matrix, rows)).expect("fingerprint serialization");
    let mut hasher = Sha256::new();
    hasher.update(payload.as_bytes());
    format!("sha256:{:x}", hasher.finalize())
}

impl EvalReport {
    /// The fingerprint recomputed from the carried fields.
    pub fn recompute_fingerprint(&self) -> String {
        report_fingerprint(&self.config, &self.matrix, &self.per_file)
    }

    pub fn all_requests_failed(&self) -> bool {
        !self.per_file.is_empty() && self.per_file.iter().all(|r| r.error.is_some())
    }

    /// Writes the JSON report atomically (temp file, then rename).
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json).map_err(|source| EvalError::Io {
            path: tmp.display().to_string(),
            source,
        })?;
        std::fs::rename(&tmp, path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Companion CSV of the per-file rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
        writer
            .write_record([
                "path",
                "gold",
                "predicted",
                "effective",
                "demo_id",
                "similarity",
                "latency_ms",
                "error",
            ])
            .and_then(|_| {
                for row in &self.per_file {
                    writer.write_record([
                        row.path.display().to_string(),
                        row.gold.map(|l| l.as_str().to_string()).unwrap_or_default(),
                        format!("{:?}", row.predicted).to_lowercase(),
                        row.effective.as_str().to_string(),
                        row.demo_id.clone().unwrap_or_default(),
                        row.similarity.map(|s| s.to_string()).unwrap_or_default(),
                        row.latency_ms.to_string(),
                        row.error.clone().unwrap_or_default(),
                    ])?;
                }
                writer.flush().map_err(csv::Error::from)
            })
            .map_err(|e| EvalError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e),
            })
    }
}

fn effective_label(verdict: VerdictLabel, unparseable_as_webshell: bool) -> Label {
    match verdict {
        VerdictLabel::Webshell => Label::Webshell,
        VerdictLabel::Benign => Label::Benign,
        VerdictLabel::Unparseable => {
            if unparseable_as_webshell {
                Label::Webshell
            } else {
                Label::Benign
            }
        }
    }
}

/// Evaluates every manifest entry: scan, extract, profile, select a
/// demonstration, query, and record. Per-file failures are recorded in the
/// rows and never abort the batch; the whole run fails only for an empty
/// manifest or when every issued request fails.
pub fn run_evaluation(
    eval_manifest: &DatasetManifest,
    library: &DemonstrationLibrary,
    provider: &dyn EmbeddingProvider,
    client: &LlmClient,
    settings: &EvalSettings,
    effective_config: serde_json::Value,
) -> Result<EvalReport, EvalError> {
    if eval_manifest.is_empty() {
        return Err(EvalError::EmptyManifest);
    }

    let n = eval_manifest.len();
    let results: Mutex<Vec<Option<(PerFileResult, bool)>>> = Mutex::new(vec![None; n]);
    let next_index = AtomicUsize::new(0);
    let worker_count = settings.llm.max_concurrent_requests.clamp(1, n);

    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                let i = next_index.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    return;
                }
                let entry = &eval_manifest.entries[i];
                let row = evaluate_one(entry.path.as_path(), Some(entry.label), library, provider, client, settings);
                results.lock().expect("results poisoned")[i] = Some(row);
            });
        }
    });

    let rows: Vec<(PerFileResult, bool)> = results
        .into_inner()
        .expect("results poisoned")
        .into_iter()
        .map(|r| r.expect("all rows filled"))
        .collect();

    let endpoint_failures = rows
        .iter()
        .filter(|(_, endpoint_failure)| *endpoint_failure)
        .count();
    if endpoint_failures == n {
        let first = rows
            .iter()
            .find_map(|(row, _)| row.error.clone())
            .unwrap_or_default();
        return Err(EvalError::AllRequestsFailed { first });
    }

    let mut matrix = ConfusionMatrix::default();
    let per_file: Vec<PerFileResult> = rows.into_iter().map(|(row, _)| row).collect();
    for row in &per_file {
        if let Some(gold) = row.gold {
            matrix.record(gold, row.effective);
        }
    }
    let (metrics, warnings) = compute_metrics(&matrix)?;
    let fingerprint = report_fingerprint(&effective_config, &matrix, &per_file);
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        config: effective_config,
        matrix,
        metrics,
        warnings,
        per_file,
        fingerprint,
    })
}

/// Classifies one path, mapping any failure into a recorded row. The bool
/// marks endpoint failures for the all-failed batch check.
pub(crate) fn evaluate_one(
    path: &Path,
    gold: Option<Label>,
    library: &DemonstrationLibrary,
    provider: &dyn EmbeddingProvider,
    client: &LlmClient,
    settings: &EvalSettings,
) -> (PerFileResult, bool) {
    let unparseable = settings.unparseable_as_webshell;
    let file = match SourceFile::from_path(path) {
        Ok(file) => file,
        Err(e) => {
            return (
                PerFileResult {
                    path: path.to_path_buf(),
                    gold,
                    predicted: VerdictLabel::Unparseable,
                    effective: effective_label(VerdictLabel::Unparseable, unparseable),
                    demo_id: None,
                    similarity: None,
                    latency_ms: 0,
                    error: Some(format!("read: {e}")),
                },
                false,
            );
        }
    };
    match detect_file(&file, library, provider, client, settings) {
        Ok(detection) => (
            PerFileResult {
                path: path.to_path_buf(),
                gold,
                predicted: detection.verdict.label,
                effective: effective_label(detection.verdict.label, unparseable),
                demo_id: detection.demo_id,
                similarity: detection.similarity,
                latency_ms: detection.verdict.latency_ms,
                error: None,
            },
            false,
        ),
        Err(e) => (
            PerFileResult {
                path: path.to_path_buf(),
                gold,
                predicted: VerdictLabel::Unparseable,
                effective: effective_label(VerdictLabel::Unparseable, unparseable),
                demo_id: None,
                similarity: None,
                latency_ms: 0,
                error: Some(e.to_string()),
            },
            e.is_endpoint_failure(),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::ManifestEntry;
    use crate::extraction::Strategy;
    use crate::llm::stub::RuleStubEndpoint;
    use crate::profiling::WeightVector;
    use crate::retrieval::{build_library, HashedTokenProvider};
    use std::sync::Arc;

    fn settings() -> EvalSettings {
        EvalSettings {
            registry: CriticalFunctionRegistry::default_registry(),
            scan_options: ScanOptions::default(),
            extraction: ExtractionConfig::new(100, 4000, Strategy::Hybrid).unwrap(),
            llm: LlmConfig::default(),
            unparseable_as_webshell: false,
            demo_label_filter: None,
        }
    }

    fn stub_client() -> LlmClient {
        LlmClient::new(Arc::new(RuleStubEndpoint::default()), LlmConfig::default())
    }

    fn write_corpus(dir: &Path) -> DatasetManifest {
        let files = [
            ("ws_0.php", "<?php eval($_POST['a']); exec('id'); system('ls');", Label::Webshell),
            ("ws_1.php", "<?php passthru($_GET['c']); eval($x); shell_exec('w'); phpinfo();", Label::Webshell),
            ("ok_0.php", "<?php echo 'hi'; $a = 1;", Label::Benign),
            ("ok_1.php", "<?php eval($tpl); echo 'one call only';", Label::Benign),
        ];
        let mut entries = Vec::new();
        for (name, content, label) in files {
            let path = dir.join(name);
            std::fs::write(&path, content).unwrap();
            entries.push(ManifestEntry { path, label });
        }
        DatasetManifest::new(entries).unwrap()
    }

    fn library_for(dir: &Path) -> DemonstrationLibrary {
        let corpus = vec![
            (
                SourceFile::from_path(dir.join("ws_0.php")).unwrap(),
                Label::Webshell,
            ),
            (
                SourceFile::from_path(dir.join("ok_0.php")).unwrap(),
                Label::Benign,
            ),
        ];
        build_library(
            &corpus,
            &CriticalFunctionRegistry::default_registry(),
            &ScanOptions::default(),
            &ExtractionConfig::new(100, 4000, Strategy::Hybrid).unwrap(),
            &HashedTokenProvider,
            WeightVector::uniform(),
        )
        .unwrap()
    }

    #[test]
    fn stub_run_matches_rule_applied_to_scanner_output() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path());
        let library = library_for(dir.path());
        let client = stub_client();
        let report = run_evaluation(
            &manifest,
            &library,
            &HashedTokenProvider,
            &client,
            &settings(),
            serde_json::json!({"test": true}),
        )
        .unwrap();

        assert_eq!(report.per_file.len(), 4);
        assert_eq!(report.matrix.total(), 4);
        // Rule: webshell iff >= 3 critical calls. ws files have >= 3, benign < 3.
        assert_eq!(report.matrix.true_positives, 2);
        assert_eq!(report.matrix.true_negatives, 2);
        assert_eq!(report.metrics.accuracy, 1.0);
        for row in &report.per_file {
            assert!(row.error.is_none());
            assert!(row.demo_id.is_some());
        }
    }

    #[test]
    fn reports_are_deterministic_modulo_latency() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path());
        let library = library_for(dir.path());
        let client = stub_client();
        let a = run_evaluation(
            &manifest,
            &library,
            &HashedTokenProvider,
            &client,
            &settings(),
            serde_json::json!({}),
        )
        .unwrap();
        let b = run_evaluation(
            &manifest,
            &library,
            &HashedTokenProvider,
            &client,
            &settings(),
            serde_json::json!({}),
        )
        .unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        assert_eq!(a.fingerprint, a.recompute_fingerprint());
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn permuting_manifest_leaves_matrix_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path());
        let mut reversed_entries = manifest.entries.clone();
        reversed_entries.reverse();
        let reversed = DatasetManifest::new(reversed_entries).unwrap();
        let library = library_for(dir.path());
        let client = stub_client();
        let a = run_evaluation(&manifest, &library, &HashedTokenProvider, &client, &settings(), serde_json::json!({})).unwrap();
        let b = run_evaluation(&reversed, &library, &HashedTokenProvider, &client, &settings(), serde_json::json!({})).unwrap();
        assert_eq!(a.matrix, b.matrix);
        let mut a_paths: Vec<_> = a.per_file.iter().map(|r| r.path.clone()).collect();
        let mut b_paths: Vec<_> = b.per_file.iter().map(|r| r.path.clone()).collect();
        assert_ne!(a_paths, b_paths);
        a_paths.sort();
        b_paths.sort();
        assert_eq!(a_paths, b_paths);
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let library = library_for(&{
            let d = dir.path();
            write_corpus(d);
            d.to_path_buf()
        });
        let manifest = DatasetManifest {
            entries: Vec::new(),
            split: None,
        };
        let client = stub_client();
        assert!(matches!(
            run_evaluation(&manifest, &library, &HashedTokenProvider, &client, &settings(), serde_json::json!({})),
            Err(EvalError::EmptyManifest)
        ));
    }

    #[test]
    fn unreadable_file_is_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_corpus(dir.path());
        manifest.entries.push(ManifestEntry {
            path: dir.path().join("missing.php"),
            label: Label::Webshell,
        });
        let manifest = DatasetManifest::new(manifest.entries).unwrap();
        let library = library_for(dir.path());
        let client = stub_client();
        let report = run_evaluation(&manifest, &library, &HashedTokenProvider, &client, &settings(), serde_json::json!({})).unwrap();
        let failed: Vec<_> = report.per_file.iter().filter(|r| r.error.is_some()).collect();
        assert_eq!(failed.len(), 1);
        assert!(failed[0].error.as_ref().unwrap().starts_with("read:"));
        // Unparseable default counts toward the majority class.
        assert_eq!(failed[0].effective, Label::Benign);
        assert_eq!(report.matrix.total(), 5);
    }

    #[test]
    fn unparseable_policy_flag_flips_effective_label() {
        assert_eq!(effective_label(VerdictLabel::Unparseable, false), Label::Benign);
        assert_eq!(effective_label(VerdictLabel::Unparseable, true), Label::Webshell);
        assert_eq!(effective_label(VerdictLabel::Webshell, false), Label::Webshell);
        assert_eq!(effective_label(VerdictLabel::Benign, true), Label::Benign);
    }

    #[test]
    fn all_benign_eval_with_benign_stub_warns_on_recall() {
        struct AlwaysBenign;
        impl crate::llm::ChatEndpoint for AlwaysBenign {
            fn chat(&self, _r: &crate::llm::ChatRequest) -> Result<String, crate::llm::LlmError> {
                Ok("benign".to_string())
            }
        }
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path());
        let library = library_for(dir.path());
        let entries = vec![
            ManifestEntry { path: dir.path().join("ok_0.php"), label: Label::Benign },
            ManifestEntry { path: dir.path().join("ok_1.php"), label: Label::Benign },
        ];
        let manifest = DatasetManifest::new(entries).unwrap();
        let client = LlmClient::new(Arc::new(AlwaysBenign), LlmConfig::default());
        let report = run_evaluation(&manifest, &library, &HashedTokenProvider, &client, &settings(), serde_json::json!({})).unwrap();
        assert_eq!(report.metrics.accuracy, 1.0);
        assert_eq!(report.metrics.recall, 0.0);
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn endpoint_failure_on_every_request_is_batch_error() {
        struct AlwaysFail;
        impl crate::llm::ChatEndpoint for AlwaysFail {
            fn chat(&self, _r: &crate::llm::ChatRequest) -> Result<String, crate::llm::LlmError> {
                Err(crate::llm::LlmError::Transport {
                    attempts: 1,
                    message: "connection refused".to_string(),
                })
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path());
        let library = library_for(dir.path());
        let client = LlmClient::new(Arc::new(AlwaysFail), LlmConfig::default());
        let result = run_evaluation(&manifest, &library, &HashedTokenProvider, &client, &settings(), serde_json::json!({}));
        assert!(matches!(result, Err(EvalError::AllRequestsFailed { .. })));
    }

    #[test]
    fn label_filter_restricts_demo_pool() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path());
        let library = library_for(dir.path());
        let client = stub_client();
        let mut s = settings();
        s.demo_label_filter = Some(Label::Benign);
        let file = SourceFile::from_path(dir.path().join("ws_1.php")).unwrap();
        let detection = detect_file(&file, &library, &HashedTokenProvider, &client, &s).unwrap();
        assert_eq!(detection.demo_id.as_deref(), Some(dir.path().join("ok_0.php").display().to_string().as_str()));
    }

    #[test]
    fn provider_mismatch_is_rejected() {
        struct OtherProvider;
        impl EmbeddingProvider for OtherProvider {
            fn identifier(&self) -> &str {
                "other"
            }
            fn dimension(&self) -> usize {
                4
            }
            fn embed(&self, _text: &str) -> Result<Vec<f64>, crate::retrieval::ProviderError> {
                Ok(vec![1.0, 0.0, 0.0, 0.0])
            }
        }
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path());
        let library = library_for(dir.path());
        let client = stub_client();
        let file = SourceFile::from_path(dir.path().join("ws_0.php")).unwrap();
        let err = detect_file(&file, &library, &OtherProvider, &client, &settings()).unwrap_err();
        assert!(err.to_string().contains("provider"));
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path());
        let library = library_for(dir.path());
        let client = stub_client();
        let report = run_evaluation(&manifest, &library, &HashedTokenProvider, &client, &settings(), serde_json::json!({"tau": 100})).unwrap();
        let json_path = dir.path().join("report.json");
        let csv_path = dir.path().join("report.csv");
        report.write_json(&json_path).unwrap();
        report.write_csv(&csv_path).unwrap();

        let loaded: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(loaded.fingerprint, report.fingerprint);
        assert_eq!(loaded.matrix, report.matrix);
        // Stored metrics agree with a recomputation from the stored matrix.
        let (recomputed, _) = compute_metrics(&loaded.matrix).unwrap();
        assert!((recomputed.accuracy - loaded.metrics.accuracy).abs() < 1e-12);
        assert!((recomputed.precision - loaded.metrics.precision).abs() < 1e-12);
        assert!((recomputed.recall - loaded.metrics.recall).abs() < 1e-12);
        assert!((recomputed.f1 - loaded.metrics.f1).abs() < 1e-12);
        let csv_text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(csv_text.lines().count() == report.per_file.len() + 1);
    }
}
