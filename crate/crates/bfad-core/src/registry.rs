//! Critical-function taxonomy: six behavior categories and the PHP function
//! names that belong to each.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The six behavior categories a critical PHP function can belong to.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum BehaviorCategory {
    ProgramExecution,
    CodeExecution,
    CallbackFunctions,
    NetworkCommunication,
    InformationGathering,
    ObfuscationAndEncryption,
}

impl BehaviorCategory {
    /// All six categories, in a fixed order.
    pub const ALL: [BehaviorCategory; 6] = [
        BehaviorCategory::ProgramExecution,
        BehaviorCategory::CodeExecution,
        BehaviorCategory::CallbackFunctions,
        BehaviorCategory::NetworkCommunication,
        BehaviorCategory::InformationGathering,
        BehaviorCategory::ObfuscationAndEncryption,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BehaviorCategory::ProgramExecution => "ProgramExecution",
            BehaviorCategory::CodeExecution => "CodeExecution",
            BehaviorCategory::CallbackFunctions => "CallbackFunctions",
            BehaviorCategory::NetworkCommunication => "NetworkCommunication",
            BehaviorCategory::InformationGathering => "InformationGathering",
            BehaviorCategory::ObfuscationAndEncryption => "ObfuscationAndEncryption",
        }
    }
}

impl fmt::Display for BehaviorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BehaviorCategory {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ProgramExecution" => Ok(BehaviorCategory::ProgramExecution),
            "CodeExecution" => Ok(BehaviorCategory::CodeExecution),
            "CallbackFunctions" => Ok(BehaviorCategory::CallbackFunctions),
            "NetworkCommunication" => Ok(BehaviorCategory::NetworkCommunication),
            "InformationGathering" => Ok(BehaviorCategory::InformationGathering),
            "ObfuscationAndEncryption" => Ok(BehaviorCategory::ObfuscationAndEncryption),
            other => Err(RegistryError::UnknownCategory {
                name: other.to_string(),
                line: 0,
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("cannot read registry file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `function_name = CategoryName`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: empty function name")]
    EmptyName { line: usize },
    #[error("line {line}: function {name:?} appears under more than one category")]
    DuplicateName { name: String, line: usize },
    #[error("line {line}: unknown category {name:?}")]
    UnknownCategory { name: String, line: usize },
}

/// Maps lowercase PHP function names to their behavior category.
///
/// Immutable after construction; lookups are case-insensitive with respect to
/// the queried name because PHP function names are case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticalFunctionRegistry {
    entries: BTreeMap<String, BehaviorCategory>,
}

/// Built-in function list per category. Not exhaustive; the registry file
/// format lets users extend or replace it.
const DEFAULT_ENTRIES: &[(&str, BehaviorCategory)] = &[
    // Program execution: spawn system commands.
    ("exec", BehaviorCategory::ProgramExecution),
    ("system", BehaviorCategory::ProgramExecution),
    ("shell_exec", BehaviorCategory::ProgramExecution),
    ("passthru", BehaviorCategory::ProgramExecution),
    ("popen", BehaviorCategory::ProgramExecution),
    ("proc_open", BehaviorCategory::ProgramExecution),
    ("pcntl_exec", BehaviorCategory::ProgramExecution),
    // Code execution: interpret strings as PHP.
    ("eval", BehaviorCategory::CodeExecution),
    ("preg_replace", BehaviorCategory::CodeExecution),
    ("assert", BehaviorCategory::CodeExecution),
    ("create_function", BehaviorCategory::CodeExecution),
    // Callbacks: indirect invocation that hides control flow.
    ("array_map", BehaviorCategory::CallbackFunctions),
    ("register_shutdown_function", BehaviorCategory::CallbackFunctions),
    ("call_user_func", BehaviorCategory::CallbackFunctions),
    ("call_user_func_array", BehaviorCategory::CallbackFunctions),
    ("array_filter", BehaviorCategory::CallbackFunctions),
    ("array_walk", BehaviorCategory::CallbackFunctions),
    ("usort", BehaviorCategory::CallbackFunctions),
    ("preg_replace_callback", BehaviorCategory::CallbackFunctions),
    ("register_tick_function", BehaviorCategory::CallbackFunctions),
    // Network communication: remote control and exfiltration channels.
    ("fsockopen", BehaviorCategory::NetworkCommunication),
    ("curl_init", BehaviorCategory::NetworkCommunication),
    ("curl_exec", BehaviorCategory::NetworkCommunication),
    ("socket_create", BehaviorCategory::NetworkCommunication),
    ("socket_connect", BehaviorCategory::NetworkCommunication),
    ("stream_socket_client", BehaviorCategory::NetworkCommunication),
    ("pfsockopen", BehaviorCategory::NetworkCommunication),
    // Information gathering: environment reconnaissance.
    ("phpinfo", BehaviorCategory::InformationGathering),
    ("getenv", BehaviorCategory::InformationGathering),
    ("php_uname", BehaviorCategory::InformationGathering),
    ("get_current_user", BehaviorCategory::InformationGathering),
    ("posix_getpwuid", BehaviorCategory::InformationGathering),
    ("posix_getuid", BehaviorCategory::InformationGathering),
    ("getmygid", BehaviorCategory::InformationGathering),
    ("disk_free_space", BehaviorCategory::InformationGathering),
    // Obfuscation and encryption: disguise or encrypt payloads.
    ("base64_encode", BehaviorCategory::ObfuscationAndEncryption),
    ("openssl_encrypt", BehaviorCategory::ObfuscationAndEncryption),
    ("base64_decode", BehaviorCategory::ObfuscationAndEncryption),
    ("openssl_decrypt", BehaviorCategory::ObfuscationAndEncryption),
    ("gzinflate", BehaviorCategory::ObfuscationAndEncryption),
    ("gzuncompress", BehaviorCategory::ObfuscationAndEncryption),
    ("gzdecode", BehaviorCategory::ObfuscationAndEncryption),
    ("str_rot13", BehaviorCategory::ObfuscationAndEncryption),
    ("convert_uudecode", BehaviorCategory::ObfuscationAndEncryption),
    ("hex2bin", BehaviorCategory::ObfuscationAndEncryption),
    ("mcrypt_decrypt", BehaviorCategory::ObfuscationAndEncryption),
];

impl CriticalFunctionRegistry {
    /// The built-in registry. Deterministic across runs.
    pub fn default_registry() -> Self {
        let mut entries = BTreeMap::new();
        for (name, category) in DEFAULT_ENTRIES {
            let prev = entries.insert((*name).to_string(), *category);
            debug_assert!(prev.is_none(), "duplicate default entry {name}");
        }
        Self { entries }
    }

    /// Builds a registry from `(name, category)` pairs, normalizing names to
    /// lowercase and rejecting duplicates or empty names.
    pub fn from_entries<I, S>(pairs: I) -> Result<Self, RegistryError>
    where
        I: IntoIterator<Item = (S, BehaviorCategory)>,
        S: AsRef<str>,
    {
        let mut entries = BTreeMap::new();
        for (i, (name, category)) in pairs.into_iter().enumerate() {
            let name = name.as_ref().trim().to_lowercase();
            if name.is_empty() {
                return Err(RegistryError::EmptyName { line: i + 1 });
            }
            if entries.insert(name.clone(), category).is_some() {
                return Err(RegistryError::DuplicateName { name, line: i + 1 });
            }
        }
        Ok(Self { entries })
    }

    /// Parses the registry file format: one `function_name = CategoryName` per
    /// line, `#` starts a comment, blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, RegistryError> {
        let mut entries = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, category) = line.split_once('=').ok_or_else(|| {
                RegistryError::Malformed {
                    line: line_no,
                    text: line.to_string(),
                }
            })?;
            let name = name.trim().to_lowercase();
            if name.is_empty() {
                return Err(RegistryError::EmptyName { line: line_no });
            }
            let category = category.trim().parse::<BehaviorCategory>().map_err(|e| {
                match e {
                    RegistryError::UnknownCategory { name, .. } => {
                        RegistryError::UnknownCategory { name, line: line_no }
                    }
                    other => other,
                }
            })?;
            if entries.insert(name.clone(), category).is_some() {
                return Err(RegistryError::DuplicateName {
                    name,
                    line: line_no,
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load_from_file(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RegistryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Serializes back to the registry file format. `parse` of the output
    /// yields an identical mapping.
    pub fn to_file_format(&self) -> String {
        let mut out = String::new();
        for (name, category) in &self.entries {
            out.push_str(name);
            out.push_str(" = ");
            out.push_str(category.as_str());
            out.push('\n');
        }
        out
    }

    /// Case-insensitive category lookup.
    pub fn lookup(&self, function_name: &str) -> Option<BehaviorCategory> {
        if function_name.bytes().any(|b| b.is_ascii_uppercase()) {
            self.entries.get(&function_name.to_lowercase()).copied()
        } else {
            self.entries.get(function_name).copied()
        }
    }

    pub fn contains(&self, function_name: &str) -> bool {
        self.lookup(function_name).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, BehaviorCategory)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// The longest function name in the registry, in bytes. Zero when empty.
    pub fn max_name_len(&self) -> usize {
        self.entries.keys().map(|k| k.len()).max().unwrap_or(0)
    }
}

impl Default for CriticalFunctionRegistry {
    fn default() -> Self {
        Self::default_registry()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_registry_maps_canonical_functions() {
        let reg = CriticalFunctionRegistry::default_registry();
        assert_eq!(reg.lookup("eval"), Some(BehaviorCategory::CodeExecution));
        assert_eq!(
            reg.lookup("fsockopen"),
            Some(BehaviorCategory::NetworkCommunication)
        );
        assert_eq!(reg.lookup("exec"), Some(BehaviorCategory::ProgramExecution));
        assert_eq!(reg.lookup("system"), Some(BehaviorCategory::ProgramExecution));
        assert_eq!(
            reg.lookup("preg_replace"),
            Some(BehaviorCategory::CodeExecution)
        );
        assert_eq!(
            reg.lookup("array_map"),
            Some(BehaviorCategory::CallbackFunctions)
        );
        assert_eq!(
            reg.lookup("register_shutdown_function"),
            Some(BehaviorCategory::CallbackFunctions)
        );
        assert_eq!(
            reg.lookup("curl_init"),
            Some(BehaviorCategory::NetworkCommunication)
        );
        assert_eq!(
            reg.lookup("phpinfo"),
            Some(BehaviorCategory::InformationGathering)
        );
        assert_eq!(
            reg.lookup("getenv"),
            Some(BehaviorCategory::InformationGathering)
        );
        assert_eq!(
            reg.lookup("base64_encode"),
            Some(BehaviorCategory::ObfuscationAndEncryption)
        );
        assert_eq!(
            reg.lookup("openssl_encrypt"),
            Some(BehaviorCategory::ObfuscationAndEncryption)
        );
    }

    #[test]
    fn non_critical_function_is_absent() {
        let reg = CriticalFunctionRegistry::default_registry();
        assert_eq!(reg.lookup("strlen"), None);
    }

    #[test]
    fn lookup_is_case_insensitive() {
        let reg = CriticalFunctionRegistry::default_registry();
        assert_eq!(reg.lookup("EVAL"), reg.lookup("eval"));
        assert_eq!(reg.lookup("SyStEm"), Some(BehaviorCategory::ProgramExecution));
    }

    #[test]
    fn default_registry_is_deterministic() {
        let a = CriticalFunctionRegistry::default_registry();
        let b = CriticalFunctionRegistry::default_registry();
        assert_eq!(a, b);
        assert_eq!(a.to_file_format(), b.to_file_format());
    }

    #[test]
    fn every_default_name_is_lowercase_and_nonempty() {
        let reg = CriticalFunctionRegistry::default_registry();
        for (name, _) in reg.iter() {
            assert!(!name.is_empty());
            assert_eq!(name, name.to_lowercase());
        }
    }

    #[test]
    fn parse_single_entry() {
        let reg = CriticalFunctionRegistry::parse("shell_exec = ProgramExecution\n").unwrap();
        assert_eq!(
            reg.lookup("shell_exec"),
            Some(BehaviorCategory::ProgramExecution)
        );
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn parse_normalizes_to_lowercase() {
        let reg = CriticalFunctionRegistry::parse("Shell_Exec = ProgramExecution\n").unwrap();
        assert_eq!(
            reg.lookup("shell_exec"),
            Some(BehaviorCategory::ProgramExecution)
        );
    }

    #[test]
    fn parse_skips_comments_and_blank_lines() {
        let text = "# header comment\n\neval = CodeExecution # trailing comment\n";
        let reg = CriticalFunctionRegistry::parse(text).unwrap();
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.lookup("eval"), Some(BehaviorCategory::CodeExecution));
    }

    #[test]
    fn duplicate_name_is_rejected_with_line() {
        let text = "eval = CodeExecution\neval = CallbackFunctions\n";
        let err = CriticalFunctionRegistry::parse(text).unwrap_err();
        match err {
            RegistryError::DuplicateName { name, line } => {
                assert_eq!(name, "eval");
                assert_eq!(line, 2);
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_category_is_rejected_with_line() {
        let err = CriticalFunctionRegistry::parse("eval = Exotic\n").unwrap_err();
        match err {
            RegistryError::UnknownCategory { name, line } => {
                assert_eq!(name, "Exotic");
                assert_eq!(line, 1);
            }
            other => panic!("expected unknown-category error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_is_rejected_with_context() {
        let err = CriticalFunctionRegistry::parse("this is not an entry\n").unwrap_err();
        match err {
            RegistryError::Malformed { line, text } => {
                assert_eq!(line, 1);
                assert!(text.contains("not an entry"));
            }
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_reports_path() {
        let err = CriticalFunctionRegistry::load_from_file("/nonexistent/registry.txt")
            .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/registry.txt"));
    }

    #[test]
    fn round_trip_default_registry() {
        let reg = CriticalFunctionRegistry::default_registry();
        let reparsed = CriticalFunctionRegistry::parse(&reg.to_file_format()).unwrap();
        assert_eq!(reg, reparsed);
    }

    proptest::proptest! {
        #[test]
        fn round_trip_arbitrary_registry(
            names in proptest::collection::btree_set("[a-z_][a-z0-9_]{0,20}", 0..40),
            picks in proptest::collection::vec(0usize..6, 40),
        ) {
            let pairs: Vec<(String, BehaviorCategory)> = names
                .into_iter()
                .zip(picks)
                .map(|(n, p)| (n, BehaviorCategory::ALL[p]))
                .collect();
            let reg = CriticalFunctionRegistry::from_entries(pairs).unwrap();
            let reparsed = CriticalFunctionRegistry::parse(&reg.to_file_format()).unwrap();
            proptest::prop_assert_eq!(reg, reparsed);
        }
    }
}
