//! Lexical scanner that locates critical-function call sites in PHP source.
//!
//! This is deliberately a lexer, not a parser: WebShells are routinely
//! malformed or obfuscated in ways a strict parser rejects, and only the call
//! positions are needed. Name tokens count only when they appear in PHP code
//! regions, are followed (modulo whitespace) by `(`, and are not method
//! calls, declarations, or text inside comments and string literals.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::registry::{BehaviorCategory, CriticalFunctionRegistry};

/// A source file held in memory. Content is decoded lossily so invalid UTF-8
/// never aborts a scan; `lossy` records that replacement happened.
#[derive(Debug, Clone)]
pub struct SourceFile {
    pub path: PathBuf,
    pub content: String,
    pub lossy: bool,
}

impl SourceFile {
    pub fn from_path(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read(path)?;
        let (content, lossy) = match String::from_utf8_lossy(&raw) {
            std::borrow::Cow::Borrowed(s) => (s.to_string(), false),
            std::borrow::Cow::Owned(s) => (s, true),
        };
        Ok(Self {
            path: path.to_path_buf(),
            content,
            lossy,
        })
    }

    pub fn from_string(path: impl Into<PathBuf>, content: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            content: content.into(),
            lossy: false,
        }
    }

    pub fn byte_length(&self) -> usize {
        self.content.len()
    }
}

/// One critical call site: the lowercased name, its category, the byte offset
/// of the name token and the 1-based line it starts on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionOccurrence {
    pub function_name: String,
    pub category: BehaviorCategory,
    pub byte_offset: usize,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanOptions {
    /// Count name tokens inside string literals and heredoc bodies. Off by
    /// default: the decode step of string-built payloads is caught by the
    /// obfuscation category instead.
    pub count_in_strings: bool,
    /// Only count `preg_replace` when its first argument is a literal pattern
    /// carrying the `/e` modifier.
    pub require_e_modifier: bool,
}

/// Scans with default options.
pub fn scan(file: &SourceFile, registry: &CriticalFunctionRegistry) -> Vec<FunctionOccurrence> {
    scan_with_options(file, registry, &ScanOptions::default())
}

/// Scans `file` for registry functions, returning occurrences sorted by byte
/// offset. Pure function of its inputs.
pub fn scan_with_options(
    file: &SourceFile,
    registry: &CriticalFunctionRegistry,
    options: &ScanOptions,
) -> Vec<FunctionOccurrence> {
    let bytes = file.content.as_bytes();
    let mut hits: Vec<(usize, String, BehaviorCategory)> = Vec::new();
    let mut i = 0usize;
    let n = bytes.len();
    let mut in_php = false;

    while i < n {
        if !in_php {
            match open_tag_len(bytes, i) {
                Some(len) => {
                    in_php = true;
                    i += len;
                }
                None => i += 1,
            }
            continue;
        }
        let b = bytes[i];
        if b == b'?' && bytes.get(i + 1) == Some(&b'>') {
            in_php = false;
            i += 2;
        } else if b == b'\'' || b == b'"' || b == b'`' {
            let (body_end, resume) = skip_quoted(bytes, i + 1, b);
            if options.count_in_strings {
                collect_names_in_range(bytes, i + 1, body_end, registry, options, &mut hits);
            }
            i = resume;
        } else if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
            i = skip_line_comment(bytes, i + 2, &mut in_php);
        } else if b == b'#' {
            i = skip_line_comment(bytes, i + 1, &mut in_php);
        } else if b == b'/' && bytes.get(i + 1) == Some(&b'*') {
            i = skip_block_comment(bytes, i + 2);
        } else if b == b'<' && bytes[i..].starts_with(b"<<<") {
            match parse_heredoc(bytes, i) {
                Some(doc) => {
                    if options.count_in_strings {
                        collect_names_in_range(
                            bytes,
                            doc.body_start,
                            doc.body_end,
                            registry,
                            options,
                            &mut hits,
                        );
                    }
                    i = doc.resume;
                }
                None => i += 1,
            }
        } else if is_ident_start(b) {
            let end = ident_end(bytes, i);
            consider_token(bytes, i, end, registry, options, &mut hits);
            i = end;
        } else {
            i += 1;
        }
    }

    attach_lines(&file.content, hits)
}

/// Counts occurrences per category; all six categories are present, absent
/// ones map to 0.
pub fn count_by_category(
    occurrences: &[FunctionOccurrence],
) -> std::collections::BTreeMap<BehaviorCategory, usize> {
    let mut counts: std::collections::BTreeMap<BehaviorCategory, usize> =
        BehaviorCategory::ALL.iter().map(|c| (*c, 0)).collect();
    for occ in occurrences {
        *counts.get_mut(&occ.category).expect("all categories present") += 1;
    }
    counts
}

// PHP identifiers may contain bytes >= 0x80.
fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_' || b >= 0x80
}

fn is_ident_cont(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80
}

fn is_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n')
}

fn ident_end(bytes: &[u8], start: usize) -> usize {
    let mut j = start + 1;
    while j < bytes.len() && is_ident_cont(bytes[j]) {
        j += 1;
    }
    j
}

/// Length of an open tag at `i`, if one starts there. Recognizes `<?php`
/// (case-insensitive, not glued to an identifier) and `<?=`. Bare `<?` short
/// tags are configuration-dependent in PHP and are not treated as openers.
fn open_tag_len(bytes: &[u8], i: usize) -> Option<usize> {
    if bytes[i] != b'<' || bytes.get(i + 1) != Some(&b'?') {
        return None;
    }
    if bytes.get(i + 2) == Some(&b'=') {
        return Some(3);
    }
    let tag_end = i + 5;
    if bytes.len() >= tag_end
        && bytes[i + 2..tag_end].eq_ignore_ascii_case(b"php")
        && bytes.get(tag_end).is_none_or(|b| !is_ident_cont(*b))
    {
        return Some(5);
    }
    None
}

/// Skips a quoted literal body starting just after the opening quote.
/// Returns (body_end, resume): `body_end` excludes the closing quote.
fn skip_quoted(bytes: &[u8], body_start: usize, quote: u8) -> (usize, usize) {
    let mut i = body_start;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b if b == quote => return (i, i + 1),
            _ => i += 1,
        }
    }
    (bytes.len(), bytes.len())
}

/// A `//` or `#` comment runs to end of line, but `?>` terminates both the
/// comment and the PHP region, exactly as the PHP lexer does.
fn skip_line_comment(bytes: &[u8], from: usize, in_php: &mut bool) -> usize {
    let mut i = from;
    while i < bytes.len() {
        if bytes[i] == b'\n' {
            return i + 1;
        }
        if bytes[i] == b'?' && bytes.get(i + 1) == Some(&b'>') {
            *in_php = false;
            return i + 2;
        }
        i += 1;
    }
    bytes.len()
}

fn skip_block_comment(bytes: &[u8], from: usize) -> usize {
    let mut i = from;
    while i + 1 < bytes.len() {
        if bytes[i] == b'*' && bytes[i + 1] == b'/' {
            return i + 2;
        }
        i += 1;
    }
    bytes.len()
}

struct HeredocSpan {
    body_start: usize,
    body_end: usize,
    resume: usize,
}

/// Parses a heredoc/nowdoc starting at the `<<<` of the header. Returns None
/// when the header is malformed (e.g. shift operators).
fn parse_heredoc(bytes: &[u8], at: usize) -> Option<HeredocSpan> {
    let mut i = at + 3;
    while i < bytes.len() && (bytes[i] == b' ' || bytes[i] == b'\t') {
        i += 1;
    }
    let quote = match bytes.get(i) {
        Some(&q @ (b'\'' | b'"')) => {
            i += 1;
            Some(q)
        }
        _ => None,
    };
    if i >= bytes.len() || !is_ident_start(bytes[i]) {
        return None;
    }
    let label_start = i;
    let label_end = ident_end(bytes, label_start);
    i = label_end;
    if let Some(q) = quote {
        if bytes.get(i) != Some(&q) {
            return None;
        }
        i += 1;
    }
    if bytes.get(i) == Some(&b'\r') {
        i += 1;
    }
    if bytes.get(i) != Some(&b'\n') {
        return None;
    }
    let body_start = i + 1;
    let label = &bytes[label_start..label_end];

    // The closing marker may be indented (flexible heredoc syntax) and must
    // not be followed by an identifier character.
    let mut line_start = body_start;
    loop {
        let mut t = line_start;
        while t < bytes.len() && (bytes[t] == b' ' || bytes[t] == b'\t') {
            t += 1;
        }
        if bytes[t..].starts_with(label)
            && bytes
                .get(t + label.len())
                .is_none_or(|b| !is_ident_cont(*b))
        {
            return Some(HeredocSpan {
                body_start,
                body_end: line_start,
                resume: t + label.len(),
            });
        }
        match bytes[line_start..].iter().position(|b| *b == b'\n') {
            Some(off) => line_start += off + 1,
            None => {
                // Unterminated heredoc: body runs to EOF.
                return Some(HeredocSpan {
                    body_start,
                    body_end: bytes.len(),
                    resume: bytes.len(),
                });
            }
        }
    }
}

/// Finds identifier tokens inside `[from, to)` (string/heredoc bodies when
/// `count_in_strings` is set) and applies the same token rules as code.
fn collect_names_in_range(
    bytes: &[u8],
    from: usize,
    to: usize,
    registry: &CriticalFunctionRegistry,
    options: &ScanOptions,
    hits: &mut Vec<(usize, String, BehaviorCategory)>,
) {
    let mut i = from;
    while i < to {
        if is_ident_start(bytes[i]) {
            let end = ident_end(bytes, i);
            consider_token(bytes, i, end, registry, options, hits);
            i = end;
        } else {
            i += 1;
        }
    }
}

/// Applies the call-site rules to the token at `[start, end)` and records a
/// hit when they all pass.
fn consider_token(
    bytes: &[u8],
    start: usize,
    end: usize,
    registry: &CriticalFunctionRegistry,
    options: &ScanOptions,
    hits: &mut Vec<(usize, String, BehaviorCategory)>,
) {
    // Variables ($name) and mid-identifier slices never count.
    if start > 0 && (bytes[start - 1] == b'$' || is_ident_cont(bytes[start - 1])) {
        return;
    }
    // Must be a call: `(` after optional whitespace.
    let mut j = end;
    while j < bytes.len() && is_ws(bytes[j]) {
        j += 1;
    }
    if bytes.get(j) != Some(&b'(') {
        return;
    }
    if is_method_or_declaration(bytes, start) {
        return;
    }
    let name = match std::str::from_utf8(&bytes[start..end]) {
        Ok(s) => s.to_lowercase(),
        Err(_) => return,
    };
    let Some(category) = registry.lookup(&name) else {
        return;
    };
    if options.require_e_modifier && name == "preg_replace" && !has_e_modifier(bytes, j + 1) {
        return;
    }
    hits.push((start, name, category));
}

/// True when the token is preceded by `->`, `::`, or the `function` keyword
/// (declarations may carry a by-reference `&`).
fn is_method_or_declaration(bytes: &[u8], token_start: usize) -> bool {
    let mut k = token_start;
    while k > 0 && is_ws(bytes[k - 1]) {
        k -= 1;
    }
    if k >= 2 && (&bytes[k - 2..k] == b"->" || &bytes[k - 2..k] == b"::") {
        return true;
    }
    if k > 0 && bytes[k - 1] == b'&' {
        k -= 1;
        while k > 0 && is_ws(bytes[k - 1]) {
            k -= 1;
        }
    }
    k >= 8
        && bytes[k - 8..k].eq_ignore_ascii_case(b"function")
        && (k == 8 || !is_ident_cont(bytes[k - 9]))
        && k != token_start
}

/// Checks whether the first argument starting at `arg_start` (just past the
/// opening paren) is a literal pattern string with an `e` modifier.
fn has_e_modifier(bytes: &[u8], arg_start: usize) -> bool {
    let mut i = arg_start;
    while i < bytes.len() && is_ws(bytes[i]) {
        i += 1;
    }
    let quote = match bytes.get(i) {
        Some(&q @ (b'\'' | b'"')) => q,
        _ => return false,
    };
    let (body_end, _) = skip_quoted(bytes, i + 1, quote);
    let pattern = &bytes[i + 1..body_end];
    if pattern.len() < 2 {
        return false;
    }
    let closer = match pattern[0] {
        b'(' => b')',
        b'[' => b']',
        b'{' => b'}',
        b'<' => b'>',
        d => d,
    };
    match pattern[1..].iter().rposition(|b| *b == closer) {
        Some(pos) => pattern[1 + pos + 1..].contains(&b'e'),
        None => false,
    }
}

/// Converts raw hits to occurrences with 1-based line numbers in one sweep.
fn attach_lines(
    content: &str,
    hits: Vec<(usize, String, BehaviorCategory)>,
) -> Vec<FunctionOccurrence> {
    let bytes = content.as_bytes();
    let mut out = Vec::with_capacity(hits.len());
    let mut line = 1usize;
    let mut cursor = 0usize;
    for (offset, function_name, category) in hits {
        line += bytes[cursor..offset].iter().filter(|b| **b == b'\n').count();
        cursor = offset;
        out.push(FunctionOccurrence {
            function_name,
            category,
            byte_offset: offset,
            line,
        });
    }
    out
}
