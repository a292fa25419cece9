//! Builds the extracted code view: context windows around critical calls,
//! interval merging, and budget-limited global backfill.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scanner::{FunctionOccurrence, SourceFile};

/// Marker inserted between rendered regions wherever bytes were omitted.
pub const OMISSION_MARKER: &str = "/* …omitted… */";

const SEPARATOR_PREFIX: &str = "\n";
const SEPARATOR_SUFFIX: &str = "\n";

/// Identifier of the built-in token estimator (`ceil(bytes / 4)`).
pub const DEFAULT_ESTIMATOR_ID: &str = "bytes/4";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionOrigin {
    CriticalWindow,
    GlobalBackfill,
}

/// A half-open byte range `[start, end)` of the source file. Boundaries are
/// always snapped to UTF-8 character boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRegion {
    pub start: usize,
    pub end: usize,
    pub origin: RegionOrigin,
}

impl CodeRegion {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, offset: usize) -> bool {
        offset >= self.start && offset < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Critical windows only.
    #[serde(rename = "critical")]
    CriticalOnly,
    /// Critical windows plus non-overlapping global segments up to the budget.
    Hybrid,
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("context radius tau must be positive")]
    ZeroTau,
    #[error("token budget must be positive")]
    ZeroBudget,
    #[error("unknown token estimator {0:?}")]
    UnknownEstimator(String),
}

/// Estimates how many prompt tokens a piece of text will cost. Estimates must
/// be monotone in prefix length.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// Default estimator: `ceil(byte_length / 4)`.
pub struct ByteRatioEstimator;

impl TokenEstimator for ByteRatioEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

/// Estimates tokens with the default rule.
pub fn estimate_tokens(text: &str) -> usize {
    ByteRatioEstimator.estimate(text)
}

/// Resolves an estimator identifier. The default id is [`DEFAULT_ESTIMATOR_ID`];
/// a real tokenizer can be plugged in by extending this table.
pub fn resolve_estimator(id: &str) -> Result<Box<dyn TokenEstimator>, ExtractionError> {
    match id {
        DEFAULT_ESTIMATOR_ID => Ok(Box::new(ByteRatioEstimator)),
        other => Err(ExtractionError::UnknownEstimator(other.to_string())),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionConfig {
    /// Context radius around a call position, in bytes of source.
    pub tau: usize,
    /// Total token budget for the rendered view, markers included.
    pub budget_tokens: usize,
    pub strategy: Strategy,
    pub token_estimator: String,
}

impl ExtractionConfig {
    pub fn new(tau: usize, budget_tokens: usize, strategy: Strategy) -> Result<Self, ExtractionError> {
        if tau == 0 {
            return Err(ExtractionError::ZeroTau);
        }
        if budget_tokens == 0 {
            return Err(ExtractionError::ZeroBudget);
        }
        Ok(Self {
            tau,
            budget_tokens,
            strategy,
            token_estimator: DEFAULT_ESTIMATOR_ID.to_string(),
        })
    }

    pub fn estimator(&self) -> Result<Box<dyn TokenEstimator>, ExtractionError> {
        resolve_estimator(&self.token_estimator)
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.tau == 0 {
            return Err(ExtractionError::ZeroTau);
        }
        if self.budget_tokens == 0 {
            return Err(ExtractionError::ZeroBudget);
        }
        resolve_estimator(&self.token_estimator)?;
        Ok(())
    }
}

/// The final extracted view of one file: disjoint regions in document order
/// and their rendered text, which never exceeds the producing budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractedView {
    pub regions: Vec<CodeRegion>,
    pub rendered_text: String,
    pub estimated_tokens: usize,
    pub warnings: Vec<String>,
}

impl ExtractedView {
    /// Renders only the regions of one origin, with omission markers between
    /// non-adjacent regions of that subset.
    pub fn origin_text(&self, file: &SourceFile, origin: RegionOrigin) -> String {
        let subset: Vec<CodeRegion> = self
            .regions
            .iter()
            .copied()
            .filter(|r| r.origin == origin)
            .collect();
        render(&file.content, &subset)
    }

    pub fn critical_text(&self, file: &SourceFile) -> String {
        self.origin_text(file, RegionOrigin::CriticalWindow)
    }

    pub fn backfill_text(&self, file: &SourceFile) -> String {
        self.origin_text(file, RegionOrigin::GlobalBackfill)
    }
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    i = i.min(s.len());
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn ceil_char_boundary(s: &str, mut i: usize) -> usize {
    i = i.min(s.len());
    while !s.is_char_boundary(i) {
        i += 1;
    }
    i
}

/// One window `[p − τ, p + τ)` per occurrence, clamped at file bounds and
/// snapped outward to character boundaries.
pub fn extract_windows(
    file: &SourceFile,
    occurrences: &[FunctionOccurrence],
    tau: usize,
) -> Vec<CodeRegion> {
    let content = &file.content;
    occurrences
        .iter()
        .map(|occ| {
            let p = occ.byte_offset;
            let start = floor_char_boundary(content, p.saturating_sub(tau));
            let end = ceil_char_boundary(content, p.saturating_add(tau).min(content.len()));
            CodeRegion {
                start,
                end,
                origin: RegionOrigin::CriticalWindow,
            }
        })
        .collect()
}

/// Classic interval union: output is sorted and pairwise disjoint, regions
/// that overlap or touch are coalesced, byte coverage is preserved exactly.
/// A merged region is a CriticalWindow if any of its inputs was.
pub fn merge_regions(regions: &[CodeRegion]) -> Vec<CodeRegion> {
    let mut sorted: Vec<CodeRegion> = regions.iter().copied().filter(|r| !r.is_empty()).collect();
    sorted.sort_by_key(|r| (r.start, r.end));
    let mut out: Vec<CodeRegion> = Vec::with_capacity(sorted.len());
    for region in sorted {
        match out.last_mut() {
            Some(last) if region.start <= last.end => {
                last.end = last.end.max(region.end);
                if region.origin == RegionOrigin::CriticalWindow {
                    last.origin = RegionOrigin::CriticalWindow;
                }
            }
            _ => out.push(region),
        }
    }
    out
}

/// Renders regions (assumed sorted and disjoint) in document order, inserting
/// the omission marker line wherever consecutive regions are not adjacent.
fn render(content: &str, regions: &[CodeRegion]) -> String {
    let mut out = String::new();
    let mut prev_end: Option<usize> = None;
    for region in regions {
        if let Some(end) = prev_end {
            if region.start > end {
                out.push_str(SEPARATOR_PREFIX);
                out.push_str(OMISSION_MARKER);
                out.push_str(SEPARATOR_SUFFIX);
            }
        }
        out.push_str(&content[region.start..region.end]);
        prev_end = Some(region.end);
    }
    out
}

/// Produces the final view under the token budget.
///
/// Critical regions are taken in document order; the first that does not fit
/// is cut to the longest fitting prefix (with a truncation warning) and the
/// rest are dropped. Under the Hybrid strategy, remaining budget is then
/// filled with uncovered byte ranges in document order, each chunked to at
/// most `2·tau` bytes, the last chunk likewise cut to fit. Backfill never
/// overlaps critical regions.
pub fn fill_budget(
    file: &SourceFile,
    merged: &[CodeRegion],
    config: &ExtractionConfig,
) -> Result<ExtractedView, ExtractionError> {
    let estimator = config.estimator()?;
    let content = &file.content;
    let budget = config.budget_tokens;
    let mut selected: Vec<CodeRegion> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();

    let fits = |regions: &[CodeRegion]| estimator.estimate(&render(content, regions)) <= budget;

    let mut truncated = false;
    for region in merged {
        debug_assert_eq!(region.origin, RegionOrigin::CriticalWindow);
        selected.push(*region);
        if fits(&selected) {
            continue;
        }
        selected.pop();
        if let Some(prefix) = longest_fitting_prefix(content, &mut selected, *region, &fits) {
            selected.push(prefix);
        }
        warnings.push(format!(
            "budget {budget} tokens cannot hold all critical windows; truncated at byte {}",
            region.start
        ));
        truncated = true;
        break;
    }

    if config.strategy == Strategy::Hybrid && !truncated {
        'outer: for gap in uncovered_ranges(content.len(), merged) {
            for chunk in chunk_range(content, gap, 2 * config.tau) {
                let region = CodeRegion {
                    start: chunk.0,
                    end: chunk.1,
                    origin: RegionOrigin::GlobalBackfill,
                };
                let insert_at = selected
                    .iter()
                    .position(|r| r.start > region.start)
                    .unwrap_or(selected.len());
                selected.insert(insert_at, region);
                if fits(&selected) {
                    continue;
                }
                selected.remove(insert_at);
                if let Some(prefix) = longest_fitting_prefix(content, &mut selected, region, &fits)
                {
                    let insert_at = selected
                        .iter()
                        .position(|r| r.start > prefix.start)
                        .unwrap_or(selected.len());
                    selected.insert(insert_at, prefix);
                }
                break 'outer;
            }
        }
    }

    let rendered_text = render(content, &selected);
    let estimated_tokens = estimator.estimate(&rendered_text);
    debug_assert!(estimated_tokens <= budget);
    Ok(ExtractedView {
        regions: selected,
        rendered_text,
        estimated_tokens,
        warnings,
    })
}

/// Runs the whole extraction for one file: windows, merge, budget fill.
pub fn extract(
    file: &SourceFile,
    occurrences: &[FunctionOccurrence],
    config: &ExtractionConfig,
) -> Result<ExtractedView, ExtractionError> {
    let windows = extract_windows(file, occurrences, config.tau);
    let merged = merge_regions(&windows);
    fill_budget(file, &merged, config)
}

/// Longest prefix of `region` that still fits when appended to `selected`
/// (in document order), or None when not even one character fits.
fn longest_fitting_prefix(
    content: &str,
    selected: &mut Vec<CodeRegion>,
    region: CodeRegion,
    fits: &dyn Fn(&[CodeRegion]) -> bool,
) -> Option<CodeRegion> {
    let insert_at = selected
        .iter()
        .position(|r| r.start > region.start)
        .unwrap_or(selected.len());
    let mut lo = 0usize; // known fitting length
    let mut hi = region.len(); // known non-fitting length (full region already failed)
    while lo + 1 < hi {
        let mid = floor_char_boundary(content, region.start + (lo + hi) / 2) - region.start;
        if mid <= lo || mid >= hi {
            break;
        }
        let candidate = CodeRegion {
            start: region.start,
            end: region.start + mid,
            origin: region.origin,
        };
        selected.insert(insert_at, candidate);
        let ok = fits(selected);
        selected.remove(insert_at);
        if ok {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Descend to the nearest fitting boundary below `lo` if snapping stalled.
    let mut len = floor_char_boundary(content, region.start + lo) - region.start;
    while len > 0 {
        let candidate = CodeRegion {
            start: region.start,
            end: region.start + len,
            origin: region.origin,
        };
        selected.insert(insert_at, candidate);
        let ok = fits(selected);
        selected.remove(insert_at);
        if ok {
            return Some(candidate);
        }
        len = floor_char_boundary(content, region.start + len - 1) - region.start;
    }
    None
}

/// Byte ranges of `[0, len)` not covered by `covered` (sorted, disjoint).
fn uncovered_ranges(len: usize, covered: &[CodeRegion]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut cursor = 0usize;
    for region in covered {
        if region.start > cursor {
            out.push((cursor, region.start));
        }
        cursor = cursor.max(region.end);
    }
    if cursor < len {
        out.push((cursor, len));
    }
    out
}

/// Splits `[range.0, range.1)` into chunks of at most `max_len` bytes,
/// snapped to character boundaries while always making progress.
fn chunk_range(content: &str, range: (usize, usize), max_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = range.0;
    while start < range.1 {
        let raw_end = start.saturating_add(max_len).min(range.1);
        let mut end = floor_char_boundary(content, raw_end);
        if end <= start {
            end = ceil_char_boundary(content, raw_end);
        }
        out.push((start, end));
        start = end;
    }
    out
}
