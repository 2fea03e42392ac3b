//! Word-vector collections and meta-embedding fusion.
//!
//! Two text layouts are accepted and auto-detected: GloVe-style
//! (`token v1 .. vd` per line, no header) and word2vec-style (the same,
//! preceded by a `count dim` header line). A first line consisting of
//! exactly two integer fields is treated as the header and skipped.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("line {line}: vector has {found} values, expected {expected}")]
    InconsistentDimension { line: usize, expected: usize, found: usize },
    #[error("embedding file contains no vectors")]
    EmptyFile,
    #[error("line {line}: malformed number {text:?}")]
    MalformedNumber { line: usize, text: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One embedding source: a vocabulary mapped onto rows of an n×dim matrix.
///
/// Immutable after construction; tokens are stored lowercase and lookups
/// lowercase their argument first. Values are held as f64 regardless of
/// the precision in the file.
#[derive(Debug, Clone)]
pub struct WordVectors {
    name: String,
    dim: usize,
    vocab: HashMap<String, usize>,
    tokens: Vec<String>,
    matrix: Vec<f64>,
    duplicates: usize,
}

impl WordVectors {
    /// Build directly from rows; used by tests and synthetic corpora.
    pub fn from_rows(name: &str, dim: usize, rows: Vec<(String, Vec<f64>)>) -> Self {
        let mut wv = WordVectors {
            name: name.to_string(),
            dim,
            vocab: HashMap::new(),
            tokens: Vec::new(),
            matrix: Vec::new(),
            duplicates: 0,
        };
        for (token, values) in rows {
            assert_eq!(values.len(), dim);
            wv.insert(token.to_lowercase(), &values);
        }
        wv
    }

    fn insert(&mut self, token: String, values: &[f64]) {
        if self.vocab.contains_key(&token) {
            self.duplicates += 1;
            return; // first occurrence wins
        }
        self.vocab.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.matrix.extend_from_slice(values);
    }

    /// Parse a GloVe- or word2vec-style text stream.
    pub fn parse<R: BufRead>(reader: R, name: &str) -> Result<Self, EmbeddingError> {
        let mut wv = WordVectors {
            name: name.to_string(),
            dim: 0,
            vocab: HashMap::new(),
            tokens: Vec::new(),
            matrix: Vec::new(),
            duplicates: 0,
        };
        let mut values = Vec::new();
        let mut first_data_line = true;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let rest: Vec<&str> = fields.collect();

            // word2vec header: a first line of exactly two integers.
            if first_data_line
                && rest.len() == 1
                && token.parse::<u64>().is_ok()
                && rest[0].parse::<u64>().is_ok()
            {
                continue;
            }

            values.clear();
            for field in &rest {
                let v: f64 = field.parse().map_err(|_| EmbeddingError::MalformedNumber {
                    line: line_no,
                    text: field.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(EmbeddingError::MalformedNumber {
                        line: line_no,
                        text: field.to_string(),
                    });
                }
                values.push(v);
            }
            if values.is_empty() {
                return Err(EmbeddingError::MalformedNumber {
                    line: line_no,
                    text: line.clone(),
                });
            }
            if first_data_line {
                wv.dim = values.len();
                first_data_line = false;
            } else if values.len() != wv.dim {
                return Err(EmbeddingError::InconsistentDimension {
                    line: line_no,
                    expected: wv.dim,
                    found: values.len(),
                });
            }
            wv.insert(token.to_lowercase(), &values);
        }
        if wv.tokens.is_empty() {
            return Err(EmbeddingError::EmptyFile);
        }
        Ok(wv)
    }

    /// Write back in GloVe-style text. Values use Rust's shortest
    /// round-trip decimal form, so parse(write(wv)) reproduces every
    /// value exactly.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, token) in self.tokens.iter().enumerate() {
            write!(w, "{token}")?;
            for v in &self.matrix[i * self.dim..(i + 1) * self.dim] {
                write!(w, " {v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Count of tokens that collided (after lowercasing) during load.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.contains_key(&token.to_lowercase())
    }

    /// Stored row for the token, or all zeros when out of vocabulary.
    pub fn lookup(&self, token: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.lookup_into(token, &mut out);
        out
    }

    /// Write the token's vector into `out` (length ≥ dim); positions past
    /// dim are zeroed. OOV writes all zeros.
    pub fn lookup_into(&self, token: &str, out: &mut [f64]) {
        debug_assert!(out.len() >= self.dim);
        out.fill(0.0);
        if let Some(&row) = self.vocab.get(&token.to_lowercase()) {
            out[..self.dim].copy_from_slice(&self.matrix[row * self.dim..(row + 1) * self.dim]);
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }
}

/// An ordered set of embedding sources fused by per-word averaging.
/// Members of smaller dimension are zero-padded on the right to the
/// largest member dimension before the mean is taken.
#[derive(Debug, Clone)]
pub struct MetaSource {
    members: Vec<Arc<WordVectors>>,
    dim: usize,
}

impl MetaSource {
    /// Panics if `members` is empty.
    pub fn new(members: Vec<Arc<WordVectors>>) -> Self {
        assert!(!members.is_empty(), "meta source needs at least one member");
        let dim = members.iter().map(|m| m.dim()).max().unwrap();
        MetaSource { members, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn members(&self) -> &[Arc<WordVectors>] {
        &self.members
    }

    pub fn lookup(&self, token: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.lookup_into(token, &mut out);
        out
    }

    /// Mean of the zero-padded member vectors.
    ///
    /// Computed as first + mean(member - first): algebraically the same
    /// mean, but exact when every member stores identical bits, so a meta
    /// source of k copies of one collection reproduces that collection's
    /// vectors bit for bit.
    pub fn lookup_into(&self, token: &str, out: &mut [f64]) {
        debug_assert!(out.len() >= self.dim);
        out.fill(0.0);
        let mut first = vec![0.0; self.dim];
        self.members[0].lookup_into(token, &mut first);
        let mut diff_sum = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.dim];
        for member in &self.members[1..] {
            member.lookup_into(token, &mut scratch);
            for ((d, &s), &f) in diff_sum.iter_mut().zip(&scratch).zip(&first) {
                *d += s - f;
            }
        }
        let k = self.members.len() as f64;
        for ((o, &f), &d) in out[..self.dim].iter_mut().zip(&first).zip(&diff_sum) {
            *o = f + d / k;
        }
    }
}

/// Either a single collection or a meta fusion; what models encode against.
#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    Single(Arc<WordVectors>),
    Meta(MetaSource),
}

impl EmbeddingSource {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::Single(wv) => wv.dim(),
            EmbeddingSource::Meta(ms) => ms.dim(),
        }
    }

    pub fn lookup_into(&self, token: &str, out: &mut [f64]) {
        match self {
            EmbeddingSource::Single(wv) => wv.lookup_into(token, out),
            EmbeddingSource::Meta(ms) => ms.lookup_into(token, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<WordVectors, EmbeddingError> {
        WordVectors::parse(Cursor::new(text), "test")
    }

    #[test]
    fn parses_glove_style() {
        let wv = parse("hi 0.1 0.2\nyo 0.3 0.4").unwrap();
        assert_eq!(wv.dim(), 2);
        assert_eq!(wv.len(), 2);
        assert_eq!(wv.lookup("hi"), vec![0.1, 0.2]);
        assert_eq!(wv.lookup("yo"), vec![0.3, 0.4]);
    }

    #[test]
    fn skips_word2vec_header() {
        let wv = parse("2 3\na 1 2 3\nb 4 5 6").unwrap();
        assert_eq!(wv.dim(), 3);
        assert_eq!(wv.len(), 2);
        assert!(!wv.contains("2"));
    }

    #[test]
    fn two_field_data_line_is_not_a_header() {
        // "a 0.5" has a non-integer first field: a dim-1 data line.
        let wv = parse("a 0.5\nb 1.5").unwrap();
        assert_eq!(wv.dim(), 1);
        assert_eq!(wv.len(), 2);
    }

    #[test]
    fn inconsistent_dimension_reports_line() {
        let err = parse("a 1 2\nb 3").unwrap_err();
        match err {
            EmbeddingError::InconsistentDimension { line, expected, found } => {
                assert_eq!((line, expected, found), (2, 2, 1));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(parse(""), Err(EmbeddingError::EmptyFile)));
        assert!(matches!(parse("\n\n"), Err(EmbeddingError::EmptyFile)));
    }

    #[test]
    fn malformed_number_rejected() {
        let err = parse("a 1 x").unwrap_err();
        assert!(matches!(err, EmbeddingError::MalformedNumber { line: 1, .. }));
        // "inf" parses as a float but is not finite
        let err = parse("a inf 2").unwrap_err();
        assert!(matches!(err, EmbeddingError::MalformedNumber { .. }));
    }

    #[test]
    fn lookup_lowercases_and_zeroes_oov() {
        let wv = parse("a 1 2").unwrap();
        assert_eq!(wv.lookup("A"), vec![1.0, 2.0]);
        assert_eq!(wv.lookup("a"), vec![1.0, 2.0]);
        assert_eq!(wv.lookup("zzz"), vec![0.0, 0.0]);
    }

    #[test]
    fn duplicates_first_wins_and_counted() {
        let wv = parse("A 1 1\na 2 2\nb 3 3").unwrap();
        assert_eq!(wv.len(), 2);
        assert_eq!(wv.duplicates(), 1);
        assert_eq!(wv.lookup("a"), vec![1.0, 1.0]);
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = Rng::new(31);
        let rows: Vec<(String, Vec<f64>)> = (0..40)
            .map(|i| {
                (
                    format!("tok{i}"),
                    (0..5)
                        .map(|_| rng.normal() * 10f64.powi(rng.below(30) as i32 - 15))
                        .collect(),
                )
            })
            .collect();
        let wv = WordVectors::from_rows("rt", 5, rows);
        let mut buf = Vec::new();
        wv.write_text(&mut buf).unwrap();
        let back = WordVectors::parse(Cursor::new(buf), "rt").unwrap();
        assert_eq!(back.dim(), wv.dim());
        assert_eq!(back.len(), wv.len());
        for token in wv.tokens() {
            let a = wv.lookup(token);
            let b = back.lookup(token);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits(), "token {token}");
            }
        }
    }

    #[test]
    fn meta_mean_of_two() {
        let a = Arc::new(WordVectors::from_rows("a", 2, vec![("w".into(), vec![1.0, 2.0])]));
        let b = Arc::new(WordVectors::from_rows("b", 2, vec![("w".into(), vec![3.0, 4.0])]));
        let ms = MetaSource::new(vec![a, b]);
        assert_eq!(ms.lookup("w"), vec![2.0, 3.0]);
    }

    #[test]
    fn meta_pads_smaller_members() {
        let a = Arc::new(WordVectors::from_rows("a", 2, vec![("w".into(), vec![2.0, 2.0])]));
        let b = Arc::new(WordVectors::from_rows("b", 4, vec![("w".into(), vec![4.0, 4.0, 4.0, 4.0])]));
        let ms = MetaSource::new(vec![a, b]);
        assert_eq!(ms.dim(), 4);
        assert_eq!(ms.lookup("w"), vec![3.0, 3.0, 2.0, 2.0]);
    }

    #[test]
    fn meta_of_identical_copies_is_bitwise_lookup() {
        let mut rng = Rng::new(77);
        let rows: Vec<(String, Vec<f64>)> = (0..20)
            .map(|i| (format!("t{i}"), (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()))
            .collect();
        let wv = Arc::new(WordVectors::from_rows("x", 3, rows));
        for k in 1..=4 {
            let ms = MetaSource::new(vec![wv.clone(); k]);
            for token in wv.tokens() {
                let single = wv.lookup(token);
                let fused = ms.lookup(token);
                for (a, b) in single.iter().zip(&fused) {
                    assert_eq!(a.to_bits(), b.to_bits(), "k={k} token={token}");
                }
            }
        }
    }

    #[test]
    fn meta_oov_everywhere_is_zero() {
        let a = Arc::new(WordVectors::from_rows("a", 2, vec![("w".into(), vec![1.0, 2.0])]));
        let b = Arc::new(WordVectors::from_rows("b", 3, vec![("v".into(), vec![1.0, 2.0, 3.0])]));
        let ms = MetaSource::new(vec![a, b]);
        assert_eq!(ms.lookup("absent"), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn lookups_are_always_finite() {
        let wv = parse("a 1e300 -1e300\nb 0.0 -0.0").unwrap();
        for token in ["a", "b", "missing"] {
            assert!(wv.lookup(token).iter().all(|v| v.is_finite()));
        }
    }
}
