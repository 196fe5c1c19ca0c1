//! Shared text analysis used by lexical retrieval, overlap scoring and the
//! n-gram metrics.

use std::collections::BTreeSet;

/// Lowercased alphanumeric terms, in order of appearance.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Distinct terms of `text`.
pub fn term_set(text: &str) -> BTreeSet<String> {
    terms(text).into_iter().collect()
}

/// Whitespace tokens with surrounding punctuation trimmed and case folded.
/// Tokens that are pure punctuation are dropped.
pub fn bag_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|raw| {
        let t = raw.trim_matches(|c: char| !c.is_alphanumeric());
        (!t.is_empty()).then(|| t.to_lowercase())
    })
}

/// 64-bit FNV-1a. Stable across platforms and toolchain versions, unlike
/// `std::hash::DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// First `max` whitespace-delimited tokens of `text`, re-joined by single spaces.
pub fn truncate_tokens(text: &str, max: usize) -> String {
    text.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
}
