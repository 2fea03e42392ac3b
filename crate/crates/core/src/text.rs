//! Post normalization and fixed-length sequence encoding.
//!
//! Cleanup order is normative: URLs are stripped from the raw text first
//! (before punctuation removal would shred them into token soup), then
//! @-mentions and hashtag markers are handled on the token level, then
//! everything outside lowercase [a-z0-9] is removed, then stopwords and
//! empty tokens are dropped, and leading retweet markers go last.

use std::collections::BTreeSet;
use std::io::BufRead;

use crate::embeddings::EmbeddingSource;

/// The standard English function-word list, post-punctuation-stripping
/// forms (contractions appear as e.g. `dont`).
const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "arent", "as", "at", "be", "because", "been", "before", "being", "below", "between", "both",
    "but", "by", "cannot", "cant", "could", "couldnt", "did", "didnt", "do", "does", "doesnt",
    "doing", "dont", "down", "during", "each", "few", "for", "from", "further", "had", "hadnt",
    "has", "hasnt", "have", "havent", "having", "he", "hed", "hell", "her", "here", "heres",
    "hers", "herself", "hes", "him", "himself", "his", "how", "hows", "i", "id", "if", "ill",
    "im", "in", "into", "is", "isnt", "it", "its", "itself", "ive", "lets", "me", "more", "most",
    "mustnt", "my", "myself", "no", "nor", "not", "of", "off", "on", "once", "only", "or",
    "other", "ought", "our", "ours", "ourselves", "out", "over", "own", "same", "shant", "she",
    "shed", "shell", "shes", "should", "shouldnt", "so", "some", "such", "than", "that", "thats",
    "the", "their", "theirs", "them", "themselves", "then", "there", "theres", "these", "they",
    "theyd", "theyll", "theyre", "theyve", "this", "those", "through", "to", "too", "under",
    "until", "up", "very", "was", "wasnt", "we", "wed", "well", "were", "werent", "weve", "what",
    "whats", "when", "whens", "where", "wheres", "which", "while", "who", "whom", "whos", "whys",
    "why", "with", "wont", "would", "wouldnt", "you", "youd", "youll", "youre", "yours",
    "yourself", "yourselves", "youve",
];

/// A stopword set. Ordered internally so its hash is stable.
#[derive(Debug, Clone)]
pub struct Stopwords {
    set: BTreeSet<String>,
}

impl Stopwords {
    pub fn default_english() -> Self {
        Stopwords {
            set: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn empty() -> Self {
        Stopwords { set: BTreeSet::new() }
    }

    pub fn from_tokens<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Self {
        Stopwords {
            set: tokens.into_iter().map(|t| t.into().to_lowercase()).collect(),
        }
    }

    /// One lowercase token per line; `#`-prefixed lines are comments.
    pub fn from_reader<R: BufRead>(reader: R) -> std::io::Result<Self> {
        let mut set = BTreeSet::new();
        for line in reader.lines() {
            let line = line?;
            let token = line.trim();
            if token.is_empty() || token.starts_with('#') {
                continue;
            }
            set.insert(token.to_lowercase());
        }
        Ok(Stopwords { set })
    }

    pub fn contains(&self, token: &str) -> bool {
        self.set.contains(token)
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    /// FNV-1a over the sorted entries.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for token in &self.set {
            for b in token.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Everything needed to turn raw post text into model input.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub stopwords: Stopwords,
    pub max_len: usize,
}

impl PipelineConfig {
    pub fn new(stopwords: Stopwords, max_len: usize) -> Self {
        assert!(max_len >= 1);
        PipelineConfig { stopwords, max_len }
    }

    /// Stable hash of the preprocessing configuration, recorded in
    /// checkpoints so artifacts can be matched to their pipeline.
    pub fn fingerprint(&self) -> u64 {
        self.stopwords
            .fingerprint()
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.max_len as u64)
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::new(Stopwords::default_english(), 30)
    }
}

/// Delete every URL (`http://…`, `https://…`, `www.…`) up to the next
/// whitespace. Matching is ASCII case-insensitive.
fn strip_urls(text: &str) -> String {
    let bytes = text.as_bytes();
    let lower: Vec<u8> = bytes.iter().map(|b| b.to_ascii_lowercase()).collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < bytes.len() {
        let rest = &lower[i..];
        if rest.starts_with(b"http://") || rest.starts_with(b"https://") || rest.starts_with(b"www.")
        {
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            continue;
        }
        // advance one full UTF-8 character
        let ch_len = text[i..].chars().next().map_or(1, char::len_utf8);
        out.push_str(&text[i..i + ch_len]);
        i += ch_len;
    }
    out
}

/// Normalize raw post text into classifier tokens.
pub fn preprocess(text: &str, stopwords: &Stopwords) -> Vec<String> {
    let stripped = strip_urls(text);
    let mut out = Vec::new();
    for token in stripped.split_whitespace() {
        if token.starts_with('@') {
            continue;
        }
        let body = token.trim_start_matches('#');
        let cleaned: String = body
            .to_lowercase()
            .chars()
            .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
            .collect();
        if cleaned.is_empty() || stopwords.contains(&cleaned) {
            continue;
        }
        out.push(cleaned);
    }
    // Leading retweet markers go last and repeatedly: dropped mentions or
    // stopwords may expose one, and idempotence requires none survive in
    // front position.
    let lead = out.iter().take_while(|t| t.as_str() == "rt").count();
    out.drain(..lead);
    out
}

/// A fixed-length matrix of token vectors plus a validity mask.
/// Positions at and beyond `length` are all-zero rows with a false mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    matrix: Vec<f64>,
    mask: Vec<bool>,
    length: usize,
    dim: usize,
    max_len: usize,
}

impl EncodedSequence {
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.matrix[t * self.dim..(t + 1) * self.dim]
    }
}

/// Look up the first `max_len` tokens against `source`, right-padding
/// with zero rows. Truncation keeps the earliest tokens.
pub fn encode(tokens: &[String], source: &EmbeddingSource, max_len: usize) -> EncodedSequence {
    assert!(max_len >= 1, "max_len must be at least 1");
    let dim = source.dim();
    let length = tokens.len().min(max_len);
    let mut matrix = vec![0.0; max_len * dim];
    let mut mask = vec![false; max_len];
    for (t, token) in tokens.iter().take(max_len).enumerate() {
        source.lookup_into(token, &mut matrix[t * dim..(t + 1) * dim]);
        mask[t] = true;
    }
    EncodedSequence { matrix, mask, length, dim, max_len }
}
