use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::terms;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeVariant {
    #[default]
    L,
    #[serde(rename = "rouge1")]
    One,
    #[serde(rename = "rouge2")]
    Two,
}

fn f1(overlap: usize, cand: usize, refr: usize) -> f64 {
    if overlap == 0 || cand == 0 || refr == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / refr as f64;
    2.0 * p * r / (p + r)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 over lowercased alphanumeric tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (terms(candidate), terms(reference));
    f1(lcs_len(&c, &r), c.len(), r.len())
}

/// ROUGE-N F1 with clipped n-gram counts.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    let grams = |toks: &[String]| -> HashMap<Vec<String>, usize> {
        let mut m = HashMap::new();
        for w in toks.windows(n.max(1)) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
        m
    };
    let (c, r) = (terms(candidate), terms(reference));
    let (gc, gr) = (grams(&c), grams(&r));
    let overlap = gc.iter().map(|(g, &k)| k.min(gr.get(g).copied().unwrap_or(0))).sum();
    f1(overlap, gc.values().sum(), gr.values().sum())
}

pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> f64 {
    match variant {
        RougeVariant::L => rouge_l(candidate, reference),
        RougeVariant::One => rouge_n(candidate, reference, 1),
        RougeVariant::Two => rouge_n(candidate, reference, 2),
    }
}

/// Exact-match unigram alignment. Each candidate token takes the reference
/// position right after the previous match when that is a free match,
/// otherwise the earliest free one.
fn align(c: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; r.len()];
    let mut pairs = Vec::new();
    let mut last: Option<usize> = None;
    for (i, tok) in c.iter().enumerate() {
        let follow = last.map(|j| j + 1).filter(|&j| j < r.len() && !used[j] && &r[j] == tok);
        let pick = follow.or_else(|| (0..r.len()).find(|&j| !used[j] && &r[j] == tok));
        if let Some(j) = pick {
            used[j] = true;
            pairs.push((i, j));
            last = Some(j);
        }
    }
    pairs
}

/// METEOR with exact matches only: recall-weighted harmonic mean
/// (alpha 0.9) times a fragmentation penalty 0.5 * (chunks / matches)^3.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (terms(candidate), terms(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let pairs = align(&c, &r);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let fmean = p * rec / (0.9 * p + 0.1 * rec);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn rouge_l_hand_case() {
        assert!((rouge_l("the cat sat", "the cat") - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert_eq!(rouge_l("", "c d"), 0.0);
    }

    #[test]
    fn rouge_n_counts_are_clipped() {
        assert!((rouge_n("the the the", "the cat", 1) - 0.4).abs() < 1e-12);
        assert_eq!(rouge_n("a b c", "a b c", 2), 1.0);
    }

    #[test]
    fn meteor_identity_and_disjoint() {
        let m = 4.0f64;
        assert!((meteor("w x y z", "w x y z") - (1.0 - 0.5 / m.powi(3))).abs() < 1e-12);
        assert_eq!(meteor("a b", "c d"), 0.0);
    }

    #[test]
    fn meteor_counts_chunks() {
        // "the cat sat" vs "sat the cat": two chunks of three matches.
        let want = 1.0 - 0.5 * (2.0f64 / 3.0).powi(3);
        assert!((meteor("the cat sat", "sat the cat") - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn scores_in_unit_interval(a in "[a-e ]{0,30}", b in "[a-e ]{0,30}") {
            for s in [rouge_l(&a, &b), meteor(&a, &b), rouge_n(&a, &b, 1), rouge_n(&a, &b, 2)] {
                prop_assert!((0.0..=1.0).contains(&s));
            }
            let shared = terms(&a).iter().any(|t| terms(&b).contains(t));
            prop_assert_eq!(rouge_l(&a, &b) > 0.0, shared);
            prop_assert_eq!(meteor(&a, &b) > 0.0, shared);
        }
    }
}
