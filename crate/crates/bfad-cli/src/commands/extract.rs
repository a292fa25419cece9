//! `bfad extract`: print the rendered view of one file, byte-exact.

use bfad_core::{extraction, scanner};

use super::read_source;
use crate::args::{Cli, ExtractArgs};
use crate::config::{resolve, ResolveFlags};
use crate::CommandError;

pub fn run(cli: &Cli, args: &ExtractArgs) -> Result<(), CommandError> {
    let resolved = resolve(
        cli,
        ResolveFlags {
            tau: args.tau,
            budget_tokens: args.budget_tokens,
            strategy: args.strategy.map(Into::into),
            count_in_strings: args.count_in_strings,
            require_e_modifier: args.require_e_modifier,
            ..Default::default()
        },
    )?;
    let registry = resolved.registry()?;
    let config = resolved.extraction()?;
    let file = read_source(&args.path)?;
    let occurrences = scanner::scan_with_options(&file, &registry, &resolved.scan_options);
    let view = extraction::extract(&file, &occurrences, &config)
        .map_err(|e| CommandError::unreadable(e.to_string()))?;
    for warning in &view.warnings {
        eprintln!("warning: {warning}");
    }
    use std::io::Write;
    std::io::stdout()
        .write_all(view.rendered_text.as_bytes())
        .map_err(|e| CommandError::unreadable(format!("stdout: {e}")))
}
