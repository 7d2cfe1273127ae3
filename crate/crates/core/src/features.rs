//! Feature extraction for the two network paths: a fixed-length scaled byte
//! sequence and per-token occurrence counts.

use aho_corasick::{AhoCorasick, MatchKind};

use crate::fuzzer::{format_dictionary, Token};
use crate::hash::fnv1a64;

pub const DEFAULT_SEQ_LEN: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct ByteSeqVector {
    pub values: Vec<f32>,
    pub original_length: usize,
}

/// `byte / 255` for the first `len` bytes, zero-padded. Longer inputs are
/// truncated.
pub fn byte_vector(bytes: &[u8], len: usize) -> ByteSeqVector {
    assert!(len >= 1, "sequence length must be >= 1");
    let mut values = vec![0.0f32; len];
    for (v, &b) in values.iter_mut().zip(bytes) {
        *v = f32::from(b) / 255.0;
    }
    ByteSeqVector {
        values,
        original_length: bytes.len(),
    }
}

/// An ordered, deduplicated token list with a compiled matcher.
#[derive(Debug, Clone)]
pub struct TokenList {
    tokens: Vec<Token>,
    matcher: Option<AhoCorasick>,
    version: u64,
}

impl PartialEq for TokenList {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl TokenList {
    pub fn new(tokens: Vec<Token>) -> Self {
        let mut uniq: Vec<Token> = Vec::with_capacity(tokens.len());
        for t in tokens {
            if !uniq.iter().any(|u| u.bytes() == t.bytes()) {
                uniq.push(t);
            }
        }
        let matcher = if uniq.is_empty() {
            None
        } else {
            Some(
                AhoCorasick::builder()
                    .match_kind(MatchKind::Standard)
                    .build(uniq.iter().map(Token::bytes))
                    .expect("token patterns are bounded"),
            )
        };
        let version = token_set_version(&uniq);
        Self {
            tokens: uniq,
            matcher,
            version,
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Hash of the dictionary file this list serializes to.
    pub fn version(&self) -> u64 {
        self.version
    }
}

/// 64-bit hash of the dictionary-file encoding of `tokens`.
pub fn token_set_version(tokens: &[Token]) -> u64 {
    fnv1a64(format_dictionary(tokens).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCountVector {
    pub counts: Vec<u32>,
    pub token_set_version: u64,
}

/// Overlapping occurrence counts, one per token in list order.
pub fn token_counts(bytes: &[u8], tokens: &TokenList) -> TokenCountVector {
    let mut counts = vec![0u32; tokens.len()];
    if let Some(m) = &tokens.matcher {
        for hit in m.find_overlapping_iter(bytes) {
            counts[hit.pattern().as_usize()] += 1;
        }
    }
    TokenCountVector {
        counts,
        token_set_version: tokens.version,
    }
}

/// Squashes a raw count into [0, 1) as `c / (1 + c)`.
pub fn normalize_count(count: u32) -> f32 {
    let c = count as f32;
    c / (1.0 + c)
}

#[derive(Debug, Clone)]
pub struct FeatureConfig {
    pub seq_len: usize,
    pub tokens: TokenList,
}

impl FeatureConfig {
    pub fn new(seq_len: usize, tokens: TokenList) -> Self {
        Self { seq_len, tokens }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub bytes: ByteSeqVector,
    pub counts: TokenCountVector,
}

impl FeatureVector {
    /// Count features as fed to the network.
    pub fn normalized_counts(&self) -> Vec<f32> {
        self.counts.counts.iter().map(|&c| normalize_count(c)).collect()
    }
}

pub fn extract(bytes: &[u8], config: &FeatureConfig) -> FeatureVector {
    FeatureVector {
        bytes: byte_vector(bytes, config.seq_len),
        counts: token_counts(bytes, &config.tokens),
    }
}
