//! Labeled post collections in a tab-separated layout.
//!
//! The header must name `tweet_id`, `tweet_text`, and `label` columns
//! (extra columns are ignored). Labels are `informative` or
//! `not_informative`, case-insensitive. Embedded tabs or newlines inside
//! the text field are not supported: a row with the wrong field count is
//! rejected with its line number.

use std::io::{BufRead, Write};

/// Relevance class. `NotInformative` is class index 0, so probability
/// ties resolve to it under first-index argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    NotInformative,
    Informative,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::NotInformative => 0,
            Label::Informative => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::NotInformative
        } else {
            Label::Informative
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NotInformative => "not_informative",
            Label::Informative => "informative",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.to_lowercase().as_str() {
            "informative" => Some(Label::Informative),
            "not_informative" => Some(Label::NotInformative),
            _ => None,
        }
    }
}

/// One social-media post, optionally labeled.
#[derive(Debug, Clone)]
pub struct RawPost {
    pub id: String,
    pub text: String,
    pub label: Option<Label>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("header is missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("line {line}: unknown label {value:?}")]
    BadLabel { line: usize, value: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    BadRow { line: usize, expected: usize, found: usize },
    #[error("file has no header line")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fully labeled collection with unique post ids.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub event_name: String,
    posts: Vec<RawPost>,
}

impl LabeledDataset {
    pub fn new(event_name: &str, posts: Vec<RawPost>) -> Self {
        debug_assert!(posts.iter().all(|p| p.label.is_some()));
        LabeledDataset { event_name: event_name.to_string(), posts }
    }

    pub fn posts(&self) -> &[RawPost] {
        &self.posts
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    /// Exact class counts: (informative, not informative).
    pub fn stats(&self) -> (usize, usize) {
        let informative = self
            .posts
            .iter()
            .filter(|p| p.label == Some(Label::Informative))
            .count();
        (informative, self.posts.len() - informative)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tweet_id\ttweet_text\tlabel")?;
        for post in &self.posts {
            writeln!(w, "{}\t{}\t{}", post.id, post.text, post.label.unwrap().as_str())?;
        }
        Ok(())
    }
}

/// Outcome of a lenient load: rejected rows are counted, not fatal.
pub struct LoadOutcome {
    pub dataset: LabeledDataset,
    pub skipped: usize,
}

pub fn load_tsv<R: BufRead>(reader: R, event_name: &str) -> Result<LabeledDataset, DataError> {
    let outcome = load_tsv_inner(reader, event_name, false)?;
    Ok(outcome.dataset)
}

/// Like [`load_tsv`] but counts and skips malformed rows instead of
/// rejecting the file.
pub fn load_tsv_lenient<R: BufRead>(reader: R, event_name: &str) -> Result<LoadOutcome, DataError> {
    load_tsv_inner(reader, event_name, true)
}

fn load_tsv_inner<R: BufRead>(
    reader: R,
    event_name: &str,
    lenient: bool,
) -> Result<LoadOutcome, DataError> {
    let mut lines = reader.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(DataError::Empty);
    };
    let header = header?;
    let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |name: &'static str| -> Result<usize, DataError> {
        columns
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
            .ok_or(DataError::MissingColumn(name))
    };
    let id_col = find("tweet_id")?;
    let text_col = find("tweet_text")?;
    let label_col = find("label")?;
    let width = columns.len();

    let mut posts: Vec<RawPost> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut skipped = 0usize;
    for (idx, line) in lines {
        let line = line?;
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let mut reject = |err: DataError| -> Result<(), DataError> {
            if lenient {
                skipped += 1;
                Ok(())
            } else {
                Err(err)
            }
        };
        if fields.len() != width {
            reject(DataError::BadRow { line: line_no, expected: width, found: fields.len() })?;
            continue;
        }
        let Some(label) = Label::parse(fields[label_col]) else {
            reject(DataError::BadLabel { line: line_no, value: fields[label_col].to_string() })?;
            continue;
        };
        let id = fields[id_col].to_string();
        if !seen.insert(id.clone()) {
            reject(DataError::DuplicateId { line: line_no, id })?;
            continue;
        }
        posts.push(RawPost { id, text: fields[text_col].to_string(), label: Some(label) });
    }
    Ok(LoadOutcome { dataset: LabeledDataset::new(event_name, posts), skipped })
}
