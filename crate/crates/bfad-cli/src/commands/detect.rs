//! `bfad detect`: classify files or evaluate a labeled manifest.

use std::sync::Arc;

use bfad_core::evaluation::{run_evaluation, EvalError, EvalSettings};
use bfad_core::llm::stub::RuleStubEndpoint;
use bfad_core::llm::{ChatEndpoint, HttpChatEndpoint, LlmClient};
use bfad_core::retrieval::DemonstrationLibrary;
use serde_json::json;

use super::read_source;
use crate::args::{Cli, DetectArgs};
use crate::config::{resolve, LlmFlagOverrides, ResolveFlags};
use crate::CommandError;

pub fn run(cli: &Cli, args: &DetectArgs) -> Result<(), CommandError> {
    let resolved = resolve(
        cli,
        ResolveFlags {
            tau: args.tau,
            budget_tokens: args.budget_tokens,
            strategy: args.strategy.map(Into::into),
            count_in_strings: args.count_in_strings,
            require_e_modifier: args.require_e_modifier,
            unparseable_as_webshell: args.unparseable_as_webshell,
            provider: Some(&args.provider),
            llm: LlmFlagOverrides {
                endpoint_url: args.endpoint_url.clone(),
                model_id: args.model_id.clone(),
                api_key_env: args.api_key_env.clone(),
                temperature: args.temperature,
                max_output_tokens: args.max_output_tokens,
                request_timeout_s: args.request_timeout_s,
                max_retries: args.max_retries,
                max_concurrent_requests: args.max_concurrent_requests,
            },
            ..Default::default()
        },
    )?;
    if args.manifest.is_none() && args.paths.is_empty() {
        return Err(CommandError::unreadable(
            "nothing to detect: pass PHP files or --manifest",
        ));
    }
    let registry = resolved.registry()?;
    let library = DemonstrationLibrary::load(&args.library)
        .map_err(|e| CommandError::unreadable(e.to_string()))?;
    let provider = resolved.build_provider()?;
    if provider.identifier() != library.embedding_provider_id {
        return Err(CommandError::unreadable(format!(
            "library {} was built with embedding provider {:?} but {:?} is configured",
            args.library.display(),
            library.embedding_provider_id,
            provider.identifier()
        )));
    }

    let endpoint: Arc<dyn ChatEndpoint> = if args.stub {
        Arc::new(RuleStubEndpoint::new(registry.clone()))
    } else {
        if resolved.llm.endpoint_url.is_empty() {
            return Err(CommandError::unreadable(
                "no endpoint configured: pass --endpoint-url or --stub",
            ));
        }
        Arc::new(
            HttpChatEndpoint::from_config(&resolved.llm)
                .map_err(|e| CommandError::unreadable(e.to_string()))?,
        )
    };
    let client = LlmClient::new(endpoint, resolved.llm.clone());

    let settings = EvalSettings {
        registry,
        scan_options: resolved.scan_options.clone(),
        extraction: resolved.extraction()?,
        llm: resolved.llm.clone(),
        unparseable_as_webshell: resolved.unparseable_as_webshell,
        demo_label_filter: args.require_label.and_then(|r| r.as_filter()),
    };
    let mut effective_config = resolved.echo_json();
    effective_config["stub"] = json!(args.stub);
    effective_config["require_label"] = json!(args
        .require_label
        .map(|r| format!("{r:?}").to_lowercase()));

    use std::io::Write;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();

    if let Some(manifest_path) = &args.manifest {
        let manifest = super::load_manifest(manifest_path)?;
        let report = run_evaluation(
            &manifest,
            &library,
            provider.as_ref(),
            &client,
            &settings,
            effective_config,
        )
        .map_err(|e| match e {
            EvalError::AllRequestsFailed { .. } => CommandError::endpoint(e.to_string()),
            other => CommandError::unreadable(other.to_string()),
        })?;
        for row in &report.per_file {
            let line = json!({
                "path": row.path.display().to_string(),
                "gold": row.gold,
                "predicted": row.predicted,
                "effective": row.effective,
                "demo_id": row.demo_id,
                "similarity": row.similarity,
                "latency_ms": row.latency_ms,
                "error": row.error,
            });
            writeln!(lock, "{line}")
                .map_err(|e| CommandError::unreadable(format!("stdout: {e}")))?;
        }
        let report_path = args
            .report
            .clone()
            .unwrap_or_else(|| std::path::PathBuf::from("eval_report.json"));
        report
            .write_json(&report_path)
            .map_err(|e| CommandError::unreadable(e.to_string()))?;
        report
            .write_csv(report_path.with_extension("csv"))
            .map_err(|e| CommandError::unreadable(e.to_string()))?;
        eprintln!(
            "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  ({} files, report {})",
            report.metrics.accuracy,
            report.metrics.precision,
            report.metrics.recall,
            report.metrics.f1,
            report.per_file.len(),
            report_path.display()
        );
        for warning in &report.warnings {
            eprintln!("warning: {warning}");
        }
        return Ok(());
    }

    // Unlabeled single-file mode.
    let mut endpoint_failures = 0usize;
    let mut rows = Vec::new();
    for path in &args.paths {
        let file = read_source(path)?;
        match bfad_core::evaluation::detect_file(
            &file,
            &library,
            provider.as_ref(),
            &client,
            &settings,
        ) {
            Ok(detection) => {
                for warning in &detection.warnings {
                    eprintln!("warning: {warning}");
                }
                rows.push(json!({
                    "path": path.display().to_string(),
                    "label": detection.verdict.label,
                    "model_id": detection.verdict.model_id,
                    "demo_id": detection.demo_id,
                    "similarity": detection.similarity,
                    "estimated_prompt_tokens": detection.estimated_prompt_tokens,
                    "latency_ms": detection.verdict.latency_ms,
                }));
            }
            Err(e) => {
                if matches!(e, bfad_core::evaluation::PipelineError::Llm(_)) {
                    endpoint_failures += 1;
                }
                rows.push(json!({
                    "path": path.display().to_string(),
                    "label": "unparseable",
                    "error": e.to_string(),
                }));
            }
        }
    }
    for row in &rows {
        writeln!(lock, "{row}").map_err(|e| CommandError::unreadable(format!("stdout: {e}")))?;
    }
    if !args.paths.is_empty() && endpoint_failures == args.paths.len() {
        return Err(CommandError::endpoint("every request failed"));
    }
    Ok(())
}
