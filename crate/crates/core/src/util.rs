//! Small shared helpers: bounded fan-out and seed derivation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

/// Default number of in-flight generator or render calls.
pub const DEFAULT_BUDGET: usize = 8;

/// Maps `f` over `items` with at most `budget` threads, keeping input order.
pub fn fan_out<T, R, F>(items: Vec<T>, budget: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let threads = budget.clamp(1, n);
    if threads == 1 {
        return items.into_iter().map(f).collect();
    }
    let inputs: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let outputs: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    return;
                }
                let item = inputs[i].lock().expect("input slot").take().expect("taken once");
                let out = f(item);
                *outputs[i].lock().expect("output slot") = Some(out);
            });
        }
    });
    outputs
        .into_iter()
        .map(|m| m.into_inner().expect("output slot").expect("every slot filled"))
        .collect()
}

/// Derives an independent 64-bit seed from a base seed and labels.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    for label in labels {
        h.update((label.len() as u64).to_be_bytes());
        h.update(label.as_bytes());
    }
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Canonical comparison form of an answer: trimmed, case-folded, with
/// whitespace collapsed and a trailing period or surrounding `$` removed.
pub fn normalize_answer(raw: &str) -> String {
    let mut t = raw.trim();
    loop {
        let next = t.trim_matches('$').trim().trim_end_matches('.').trim();
        if next == t {
            break;
        }
        t = next;
    }
    t.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn numbers(s: &str) -> Option<Vec<f64>> {
    let inner = s
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .unwrap_or(s);
    inner
        .split(',')
        .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect()
}

/// Numbers (and parenthesized tuples of numbers) match within 1e-6;
/// anything else must match after [`normalize_answer`].
pub fn answers_match(candidate: &str, gold: &str) -> bool {
    let (c, g) = (normalize_answer(candidate), normalize_answer(gold));
    if c.is_empty() || g.is_empty() {
        return false;
    }
    match (numbers(&c), numbers(&g)) {
        (Some(a), Some(b)) => a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6),
        _ => c == g,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_keeps_order() {
        let out = fan_out((0..50).collect(), 4, |x: u32| x * 2);
        assert_eq!(out, (0..50).map(|x| x * 2).collect::<Vec<_>>());
        assert!(fan_out(Vec::<u32>::new(), 8, |x| x).is_empty());
    }

    #[test]
    fn answer_matching() {
        assert!(answers_match(" 4.1200000001 ", "4.12"));
        assert!(!answers_match("4.13", "4.12"));
        assert!(answers_match("(120, 80)", "(120,80)"));
        assert!(!answers_match("(120, 81)", "(120, 80)"));
        assert!(answers_match("Right   Angle.", "right angle"));
        assert!(!answers_match("", ""));
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_eq!(derive_seed(1, &["a"]), derive_seed(1, &["a"]));
        assert_ne!(derive_seed(1, &["a"]), derive_seed(1, &["b"]));
        assert_ne!(derive_seed(1, &["ab"]), derive_seed(1, &["a", "b"]));
    }
}
