//! `bfad scan`: occurrence listing as JSONL.

use bfad_core::scanner;
use serde_json::json;

use super::{discover_php_files, read_source};
use crate::args::{Cli, ScanArgs};
use crate::config::{resolve, ResolveFlags};
use crate::CommandError;

pub fn run(cli: &Cli, args: &ScanArgs) -> Result<(), CommandError> {
    let resolved = resolve(
        cli,
        ResolveFlags {
            count_in_strings: args.count_in_strings,
            require_e_modifier: args.require_e_modifier,
            ..Default::default()
        },
    )?;
    let registry = resolved.registry()?;
    let files = discover_php_files(&args.paths)?;

    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    use std::io::Write;
    for path in files {
        let file = read_source(&path)?;
        let occurrences = scanner::scan_with_options(&file, &registry, &resolved.scan_options);
        for occ in occurrences {
            let row = json!({
                "path": path.display().to_string(),
                "function_name": occ.function_name,
                "category": occ.category,
                "byte_offset": occ.byte_offset,
                "line": occ.line,
            });
            writeln!(lock, "{row}")
                .map_err(|e| CommandError::unreadable(format!("stdout: {e}")))?;
        }
    }
    Ok(())
}
