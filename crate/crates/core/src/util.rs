//! Small shared helpers: whitespace tokenization, token-multiset F1,
//! case-folded containment, and deterministic seed derivation.

use rand_core::RngCore;
use sha2::{Digest, Sha256};

/// Splits on Unicode whitespace. No other normalization is applied here;
/// callers that want case-insensitive matching fold first.
pub fn whitespace_tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Token-multiset F1 between two strings.
///
/// Precision and recall are computed over whitespace tokens with multiset
/// overlap (each occurrence matches at most once), so
/// `F1 = 2*overlap / (|pred| + |gold|)`. Two empty token lists count as a
/// perfect match; exactly one empty list scores zero.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = whitespace_tokens(pred);
    let g = whitespace_tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: std::collections::BTreeMap<&str, i64> = std::collections::BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    2.0 * overlap as f64 / (p.len() + g.len()) as f64
}

/// True when every case-folded token of `needle` occurs among the
/// case-folded tokens of `haystack`.
pub fn tokens_contained(needle: &str, haystack: &str) -> bool {
    let hay: std::collections::BTreeSet<String> = haystack
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .collect();
    needle
        .split_whitespace()
        .all(|t| hay.contains(&t.to_lowercase()))
}

/// FNV-1a over the raw bytes. Used for stable, platform-independent keys.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 step, for deriving independent seed streams from one base seed.
/// Hex SHA-256, used to fingerprint resolved configurations inside report
/// artifacts.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Folds a list of lane values into one RNG seed, so every rollout gets its
/// own stream independent of evaluation order.
pub fn derive_seed(root: u64, lanes: &[u64]) -> u64 {
    let mut state = splitmix64(root ^ 0x9e37_79b9_7f4a_7c15);
    for &lane in lanes {
        state = splitmix64(state ^ lane.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    }
    state
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) built directly from the generator's next 64 bits,
/// so sampling does not depend on distribution code that may change between
/// library releases.
pub fn uniform_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_core::SeedableRng;

    #[test]
    fn f1_counts_multiset_overlap_once() {
        let f = token_f1("acme ltd registration number", "registration number of acme ltd");
        assert!((f - 2.0 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn f1_empty_edge_cases() {
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("a", ""), 0.0);
        assert_eq!(token_f1("", "a"), 0.0);
        assert_eq!(token_f1("a a b", "a b b"), 2.0 * 2.0 / 6.0);
    }

    #[test]
    fn containment_folds_case() {
        assert!(tokens_contained("RC-4417-88", "found rc-4417-88 on the page"));
        assert!(!tokens_contained("RC-4417-88", "nothing here"));
        assert!(tokens_contained("", "anything"));
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let u = uniform_f64(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
