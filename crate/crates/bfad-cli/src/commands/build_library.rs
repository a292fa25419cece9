//! `bfad build-library`: materialize the demonstration library directory.

use bfad_core::profiling::WeightsDocument;
use bfad_core::retrieval;

use super::{load_manifest, read_corpus};
use crate::args::{BuildLibraryArgs, Cli};
use crate::config::{resolve, ResolveFlags};
use crate::CommandError;

pub fn run(cli: &Cli, args: &BuildLibraryArgs) -> Result<(), CommandError> {
    let resolved = resolve(
        cli,
        ResolveFlags {
            tau: args.tau,
            budget_tokens: args.budget_tokens,
            strategy: args.strategy.map(Into::into),
            count_in_strings: args.count_in_strings,
            require_e_modifier: args.require_e_modifier,
            provider: Some(&args.provider),
            ..Default::default()
        },
    )?;
    let registry = resolved.registry()?;
    let extraction_config = resolved.extraction()?;
    let manifest = load_manifest(&args.manifest)?;
    let corpus = read_corpus(&manifest)?;
    let provider = resolved.build_provider()?;

    let weights = match &args.weights {
        Some(path) => WeightsDocument::load(path)
            .map_err(|e| CommandError::unreadable(e.to_string()))?
            .weights,
        None => {
            let (weights, _, _) = super::profile::compute_weights(
                &corpus,
                &registry,
                &resolved.scan_options,
                &resolved.score_params,
                args.fallback_uniform,
            )?;
            weights
        }
    };

    let library = retrieval::build_library(
        &corpus,
        &registry,
        &resolved.scan_options,
        &extraction_config,
        provider.as_ref(),
        weights,
    )
    .map_err(|e| CommandError::unreadable(e.to_string()))?;
    library
        .save(&args.out, provider.dimension())
        .map_err(|e| CommandError::unreadable(e.to_string()))?;

    let summary = serde_json::json!({
        "out": args.out.display().to_string(),
        "entries": library.len(),
        "embedding_provider_id": library.embedding_provider_id,
        "weights": library.weights,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}
