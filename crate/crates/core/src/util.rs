use sha2::{Digest, Sha256};

/// Platform-independent seed derived from a list of byte strings.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Splits on sentence-final punctuation and counts non-empty segments.
pub fn sentence_count(text: &str) -> usize {
    let mut count = 0;
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        let terminal = matches!(c, '.' | '!' | '?');
        let boundary = chars.peek().is_none_or(|n| n.is_whitespace());
        if terminal && boundary {
            if current.chars().any(char::is_alphanumeric) {
                count += 1;
            }
            current.clear();
        }
    }
    if current.chars().any(char::is_alphanumeric) {
        count += 1;
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(&[b"a", b"b"]), derive_seed(&[b"a", b"b"]));
        assert_ne!(derive_seed(&[b"ab", b""]), derive_seed(&[b"a", b"b"]));
    }

    #[test]
    fn sentences() {
        assert_eq!(sentence_count("Fear of failure drives avoidance."), 1);
        assert_eq!(sentence_count("Fear of failure drives avoidance"), 1);
        assert_eq!(sentence_count("Fear grows. Avoidance follows."), 2);
        assert_eq!(sentence_count("Is it fear? Yes!"), 2);
        assert_eq!(sentence_count("Tension over 2.5 jobs..."), 1);
        assert_eq!(sentence_count("   "), 0);
    }
}
