//! `bfad split`: stratified library/eval partition of a manifest.

use bfad_core::evaluation::{split_manifest, Label};

use super::load_manifest;
use crate::args::{Cli, SplitArgs};
use crate::config::{resolve, ResolveFlags};
use crate::CommandError;

pub fn run(cli: &Cli, args: &SplitArgs) -> Result<(), CommandError> {
    let resolved = resolve(cli, ResolveFlags::default())?;
    let manifest = load_manifest(&args.manifest)?;
    let (library, eval) = split_manifest(&manifest, args.fraction, resolved.seed)
        .map_err(|e| CommandError::unreadable(e.to_string()))?;
    library
        .save_jsonl(&args.library_out)
        .map_err(|e| CommandError::unreadable(e.to_string()))?;
    eval.save_jsonl(&args.eval_out)
        .map_err(|e| CommandError::unreadable(e.to_string()))?;
    let summary = serde_json::json!({
        "library": {
            "path": args.library_out.display().to_string(),
            "total": library.len(),
            "webshell": library.count(Label::Webshell),
            "benign": library.count(Label::Benign),
        },
        "eval": {
            "path": args.eval_out.display().to_string(),
            "total": eval.len(),
            "webshell": eval.count(Label::Webshell),
            "benign": eval.count(Label::Benign),
        },
        "seed": resolved.seed,
        "fraction": args.fraction,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}
