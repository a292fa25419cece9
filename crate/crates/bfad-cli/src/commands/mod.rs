//! One module per subcommand.

pub mod build_library;
pub mod detect;
pub mod extract;
pub mod profile;
pub mod scan;
pub mod split;

use std::path::{Path, PathBuf};

use bfad_core::evaluation::{DatasetManifest, Label};
use bfad_core::scanner::SourceFile;

use crate::CommandError;

/// Expands path arguments: files pass through, directories are searched
/// recursively for `*.php` in deterministic path-sorted order.
pub fn discover_php_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CommandError> {
    let mut out = Vec::new();
    for path in paths {
        if path.is_file() {
            out.push(path.clone());
        } else if path.is_dir() {
            let mut found = Vec::new();
            for entry in walkdir::WalkDir::new(path).follow_links(false) {
                let entry = entry.map_err(|e| {
                    CommandError::unreadable(format!("walking {}: {e}", path.display()))
                })?;
                if entry.file_type().is_file()
                    && entry
                        .path()
                        .extension()
                        .is_some_and(|ext| ext.eq_ignore_ascii_case("php"))
                {
                    found.push(entry.into_path());
                }
            }
            found.sort();
            out.extend(found);
        } else {
            return Err(CommandError::unreadable(format!(
                "no such file or directory: {}",
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn read_source(path: &Path) -> Result<SourceFile, CommandError> {
    let file = SourceFile::from_path(path)
        .map_err(|e| CommandError::unreadable(format!("{}: {e}", path.display())))?;
    if file.lossy {
        eprintln!(
            "warning: {} is not valid UTF-8; decoded lossily",
            path.display()
        );
    }
    Ok(file)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, CommandError> {
    DatasetManifest::load_jsonl(path).map_err(|e| CommandError::unreadable(e.to_string()))
}

/// Reads every manifest entry into memory, front-loading IO failures.
pub fn read_corpus(manifest: &DatasetManifest) -> Result<Vec<(SourceFile, Label)>, CommandError> {
    manifest
        .entries
        .iter()
        .map(|entry| Ok((read_source(&entry.path)?, entry.label)))
        .collect()
}
