//! Species-name normalization and occurrence search.

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

fn normalize_once(raw: &str) -> String {
    let folded: String = raw
        .to_lowercase()
        .nfkd()
        .filter(|c| !is_combining_mark(*c))
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-folds, strips accents, turns punctuation into spaces and collapses
/// whitespace. `normalize_name(normalize_name(x)) == normalize_name(x)`.
pub fn normalize_name(raw: &str) -> String {
    let mut current = normalize_once(raw);
    // A handful of code points only settle after a second fold
    // (compatibility decompositions that yield uppercase letters).
    for _ in 0..4 {
        let next = normalize_once(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

/// Byte offsets of every occurrence of `needle` in `hay` that starts and ends
/// on a word boundary. Both sides must already be normalized.
pub fn word_bounded_occurrences(hay: &str, needle: &str) -> Vec<usize> {
    if needle.is_empty() {
        return Vec::new();
    }
    hay.match_indices(needle)
        .filter(|(start, _)| {
            let end = start + needle.len();
            let before_ok = *start == 0 || hay.as_bytes()[start - 1] == b' ';
            let after_ok = end == hay.len() || hay.as_bytes()[end] == b' ';
            before_ok && after_ok
        })
        .map(|(start, _)| start)
        .collect()
}

/// Byte offsets of every occurrence of `needle` in `hay`, boundaries ignored.
pub fn occurrences(hay: &str, needle: &str) -> Vec<usize> {
    if needle.is_empty() {
        return Vec::new();
    }
    hay.match_indices(needle).map(|(start, _)| start).collect()
}

/// True iff `needle` occurs in `hay` on word boundaries.
pub fn contains_word_bounded(hay: &str, needle: &str) -> bool {
    !word_bounded_occurrences(hay, needle).is_empty()
}
