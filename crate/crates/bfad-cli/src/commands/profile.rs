//! `bfad profile`: corpus statistics, discrimination scores and weights.

use bfad_core::profiling::{
    self, ProfilingError, ScoreParams, WeightVector, WeightsDocument,
};

use super::{load_manifest, read_corpus};
use crate::args::{Cli, ProfileArgs};
use crate::config::{resolve, ResolveFlags};
use crate::CommandError;

pub fn run(cli: &Cli, args: &ProfileArgs) -> Result<(), CommandError> {
    let resolved = resolve(
        cli,
        ResolveFlags {
            alpha: args.alpha,
            beta: args.beta,
            gamma: args.gamma,
            ratio_transform: args.ratio_transform.map(Into::into),
            count_in_strings: args.count_in_strings,
            require_e_modifier: args.require_e_modifier,
            ..Default::default()
        },
    )?;
    let registry = resolved.registry()?;
    let manifest = load_manifest(&args.manifest)?;
    let corpus = read_corpus(&manifest)?;

    let (weights, stats, params) = compute_weights(
        &corpus,
        &registry,
        &resolved.scan_options,
        &resolved.score_params,
        args.fallback_uniform,
    )?;

    if let Some(out) = &args.out {
        let doc = WeightsDocument::new(weights.clone(), params, &stats);
        doc.save(out)
            .map_err(|e| CommandError::unreadable(e.to_string()))?;
    }
    let scores = profiling::discrimination_scores(&stats, &params);
    let output = serde_json::json!({
        "weights": weights,
        "scores": scores,
        "stats": stats,
        "params": params,
    });
    println!("{}", serde_json::to_string_pretty(&output).expect("json"));
    Ok(())
}

pub fn compute_weights(
    corpus: &[(bfad_core::scanner::SourceFile, bfad_core::evaluation::Label)],
    registry: &bfad_core::registry::CriticalFunctionRegistry,
    scan_options: &bfad_core::scanner::ScanOptions,
    params: &ScoreParams,
    fallback_uniform: bool,
) -> Result<(WeightVector, profiling::CorpusStats, ScoreParams), CommandError> {
    let stats = profiling::compute_corpus_stats(corpus, registry, scan_options)
        .map_err(|e| CommandError::corpus(e.to_string()))?;
    let scores = profiling::discrimination_scores(&stats, params);
    let weights = match profiling::normalize_weights(&scores) {
        Ok(weights) => weights,
        Err(ProfilingError::UninformativeCorpus) if fallback_uniform => {
            eprintln!("warning: uninformative corpus; falling back to uniform weights");
            WeightVector::uniform()
        }
        Err(e) => return Err(CommandError::corpus(e.to_string())),
    };
    Ok((weights, stats, *params))
}
