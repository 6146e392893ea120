//! Resolves raw model text into a ranking of class ids.
//!
//! Resolution order:
//! 1. `<ranking>`...`</ranking>` blocks, latest block first; each line names
//!    at most one candidate.
//! 2. Otherwise the whole text is scanned: word-bounded full-name matches
//!    ordered by position, then unanchored (containment) matches ordered by
//!    position.
//! 3. Re-ranking completes the permutation with unmatched candidates in
//!    expert order; selection keeps the first class only.
//! 4. Nothing matched: expert order when an expert is available, else an
//!    explicit no-match.
//!
//! Parsing never fails; every outcome is a [`ParseStatus`].

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data_model::{ClassId, ExpertPrediction, SpeciesRecord, SpeciesVocabulary};
use crate::names::{contains_word_bounded, normalize_name, occurrences, word_bounded_occurrences};

pub const OPEN_MARKER: &str = "<ranking>";
pub const CLOSE_MARKER: &str = "</ranking>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchQuality {
    ExactScientific,
    ExactCommon,
    Containment,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    MarkerBlock,
    FreeText,
    FallbackToExpert,
    /// No candidate named and no expert to fall back on. The ranking is
    /// empty and the item scores as incorrect.
    NoMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    Select,
    Rerank,
    OpenVocab,
}

#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    Classes(&'a [ClassId]),
    AllClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub image_id: String,
    pub ranking: Vec<ClassId>,
    pub match_quality: Vec<MatchQuality>,
    pub parse_status: ParseStatus,
}

impl ParsedAnswer {
    /// First-ranked class, `None` for [`ParseStatus::NoMatch`].
    pub fn top1(&self) -> Option<ClassId> {
        self.ranking.first().copied()
    }
}

struct NameEntry {
    class_id: ClassId,
    name: String,
    quality: MatchQuality,
}

fn name_table(records: &[&SpeciesRecord]) -> Vec<NameEntry> {
    let mut table = Vec::new();
    for r in records {
        table.push(NameEntry {
            class_id: r.class_id,
            name: normalize_name(&r.scientific_name),
            quality: MatchQuality::ExactScientific,
        });
        for common in &r.common_names {
            let name = normalize_name(common);
            if !name.is_empty() {
                table.push(NameEntry {
                    class_id: r.class_id,
                    name,
                    quality: MatchQuality::ExactCommon,
                });
            }
        }
    }
    table
}

/// Strips list decorations such as `1.`, `2)`, `-`, `*`, `•` and `**`.
fn strip_list_marker(line: &str) -> &str {
    let mut s = line.trim();
    s = s.trim_start_matches(['-', '*', '•', '#', '>']).trim_start();
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(stripped) = rest.strip_prefix(['.', ')', ':']) {
            s = stripped;
        }
    }
    s.trim()
}

/// The best candidate named by one ranking line.
fn match_line(
    line: &str,
    table: &[NameEntry],
    displays: &[(ClassId, String)],
) -> Option<(ClassId, MatchQuality)> {
    let norm = normalize_name(strip_list_marker(line));
    if norm.is_empty() {
        return None;
    }
    if let Some((id, _)) = displays.iter().find(|(_, d)| *d == norm) {
        return Some((*id, MatchQuality::ExactScientific));
    }
    if let Some(e) = table.iter().find(|e| e.name == norm) {
        return Some((e.class_id, e.quality));
    }
    table
        .iter()
        .filter_map(|e| {
            word_bounded_occurrences(&norm, &e.name)
                .first()
                .map(|&pos| (pos, std::cmp::Reverse(e.name.len()), e.class_id))
        })
        .min()
        .map(|(_, _, id)| (id, MatchQuality::Containment))
}

/// Yields the contents of every `<ranking>` block, latest first. An opening
/// marker without a closing one runs to the end of the text.
fn marker_blocks(text: &str) -> Vec<&str> {
    let lower = text.to_ascii_lowercase();
    let mut blocks = Vec::new();
    let mut from = 0;
    while let Some(rel) = lower[from..].find(OPEN_MARKER) {
        let start = from + rel + OPEN_MARKER.len();
        let end = lower[start..]
            .find(CLOSE_MARKER)
            .map_or(text.len(), |e| start + e);
        blocks.push(&text[start..end]);
        from = (end + CLOSE_MARKER.len()).min(text.len());
        if end == text.len() {
            break;
        }
    }
    blocks.reverse();
    blocks
}

fn parse_block(
    block: &str,
    table: &[NameEntry],
    displays: &[(ClassId, String)],
) -> Vec<(ClassId, MatchQuality)> {
    let mut seen = HashSet::new();
    block
        .lines()
        .filter_map(|line| match_line(line, table, displays))
        .filter(|(id, _)| seen.insert(*id))
        .collect()
}

/// Free-text scan: exact (word-bounded) tier by position, then containment tier.
fn scan_free_text(text: &str, table: &[NameEntry]) -> Vec<(ClassId, MatchQuality)> {
    let norm = normalize_name(text);
    let mut out: Vec<(ClassId, MatchQuality)> = Vec::new();
    let mut seen = HashSet::new();
    // Spans already claimed by an accepted name, across both tiers.
    let mut claimed: Vec<(usize, usize)> = Vec::new();
    for exact_tier in [true, false] {
        let mut spans: Vec<(usize, usize, ClassId, MatchQuality)> = Vec::new();
        for e in table.iter().filter(|e| !seen.contains(&e.class_id)) {
            let positions = if exact_tier {
                word_bounded_occurrences(&norm, &e.name)
            } else {
                occurrences(&norm, &e.name)
            };
            let quality = if exact_tier {
                e.quality
            } else {
                MatchQuality::Containment
            };
            spans.extend(
                positions
                    .into_iter()
                    .map(|p| (p, e.name.len(), e.class_id, quality)),
            );
        }
        // Earliest first; among equal starts the longest name wins, and a
        // shorter name nested inside an accepted span is ignored.
        spans.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        for (start, len, id, quality) in spans {
            let end = start + len;
            if claimed.iter().any(|&(s, e)| start < e && s < end) {
                continue;
            }
            claimed.push((start, end));
            if seen.insert(id) {
                out.push((id, quality));
            }
        }
    }
    out
}

/// Resolves `text` against the candidate set.
pub fn parse(
    image_id: &str,
    text: &str,
    candidates: Candidates<'_>,
    vocab: &SpeciesVocabulary,
    expert: Option<&ExpertPrediction>,
    mode: ParseMode,
) -> ParsedAnswer {
    let candidate_ids: Vec<ClassId> = match candidates {
        Candidates::Classes(ids) => {
            let mut seen = HashSet::new();
            ids.iter()
                .copied()
                .filter(|id| vocab.contains(*id) && seen.insert(*id))
                .collect()
        }
        Candidates::AllClasses => vocab.class_ids().collect(),
    };
    let records: Vec<&SpeciesRecord> = candidate_ids.iter().map(|id| vocab.get(*id)).collect();
    let table = name_table(&records);
    let displays: Vec<(ClassId, String)> = records
        .iter()
        .map(|r| (r.class_id, normalize_name(&r.display_name())))
        .collect();

    let mut status = ParseStatus::FreeText;
    let mut matched = Vec::new();
    for block in marker_blocks(text) {
        let found = parse_block(block, &table, &displays);
        if !found.is_empty() {
            matched = found;
            status = ParseStatus::MarkerBlock;
            break;
        }
    }
    if matched.is_empty() {
        matched = scan_free_text(text, &table);
    }

    if matched.is_empty() {
        let fallback: Vec<ClassId> = match expert {
            Some(e) if mode != ParseMode::OpenVocab => {
                let allowed: HashSet<ClassId> = candidate_ids.iter().copied().collect();
                let mut order: Vec<ClassId> = e
                    .entries
                    .iter()
                    .map(|(c, _)| *c)
                    .filter(|c| allowed.contains(c))
                    .collect();
                let listed: HashSet<ClassId> = order.iter().copied().collect();
                if mode == ParseMode::Rerank {
                    order.extend(
                        candidate_ids
                            .iter()
                            .copied()
                            .filter(|c| !listed.contains(c)),
                    );
                } else {
                    order.truncate(1);
                }
                order
            }
            _ => Vec::new(),
        };
        if fallback.is_empty() {
            return ParsedAnswer {
                image_id: image_id.to_string(),
                ranking: Vec::new(),
                match_quality: Vec::new(),
                parse_status: ParseStatus::NoMatch,
            };
        }
        let n = fallback.len();
        return ParsedAnswer {
            image_id: image_id.to_string(),
            ranking: fallback,
            match_quality: vec![MatchQuality::Fallback; n],
            parse_status: ParseStatus::FallbackToExpert,
        };
    }

    match mode {
        ParseMode::Select | ParseMode::OpenVocab => matched.truncate(1),
        ParseMode::Rerank => {
            let listed: HashSet<ClassId> = matched.iter().map(|(c, _)| *c).collect();
            let expert_order: Vec<ClassId> = match expert {
                Some(e) => e.entries.iter().map(|(c, _)| *c).collect(),
                None => Vec::new(),
            };
            let rest = expert_order
                .iter()
                .copied()
                .filter(|c| candidate_ids.contains(c))
                .chain(candidate_ids.iter().copied())
                .filter(|c| !listed.contains(c));
            let mut added = HashSet::new();
            for c in rest {
                if added.insert(c) {
                    matched.push((c, MatchQuality::Fallback));
                }
            }
        }
    }
    let (ranking, match_quality) = matched.into_iter().unzip();
    ParsedAnswer {
        image_id: image_id.to_string(),
        ranking,
        match_quality,
        parse_status: status,
    }
}

/// Open-vocabulary scoring: the normalized scientific name or any normalized
/// common name of the true class occurs in the response on word boundaries.
pub fn open_vocab_correct(text: &str, truth: &SpeciesRecord) -> bool {
    let norm = normalize_name(text);
    std::iter::once(&truth.scientific_name)
        .chain(truth.common_names.iter())
        .map(|n| normalize_name(n))
        .any(|n| !n.is_empty() && contains_word_bounded(&norm, &n))
}
