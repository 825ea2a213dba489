//! Document loading, lexicon loading and dictionary-based entity extraction.
//!
//! Text is normalized by lowercasing and turning every non-alphanumeric
//! character into a separator; runs of separators collapse into one space.
//! Lexicon terms go through the same normalization, so a multi-word term
//! matches exactly when its tokens appear contiguously in a document.
//! Matching is leftmost-longest over token positions: at each position the
//! longest term starting there wins and the scan resumes after it.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("unsupported document format `{0}` (expected jsonl or csv)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One patent record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub id: String,
    pub year: i32,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, year: i32, title: impl Into<String>, abstract_text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            year,
            title: title.into(),
            abstract_text: abstract_text.into(),
        }
    }

    /// Title and abstract joined by a single space.
    pub fn text(&self) -> String {
        format!("{} {}", self.title, self.abstract_text)
    }

    /// Sentences of the title followed by sentences of the abstract.
    pub fn sentences(&self) -> Vec<&str> {
        split_sentences(&self.title)
            .into_iter()
            .chain(split_sentences(&self.abstract_text))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DocFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for DocFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(DocFormat::Jsonl),
            "csv" => Ok(DocFormat::Csv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl DocFormat {
    /// Guesses the format from a file extension, defaulting to JSON Lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DocFormat::Csv,
            _ => DocFormat::Jsonl,
        }
    }
}

fn validate(doc: &Document, line: usize) -> Result<()> {
    if doc.id.trim().is_empty() {
        return Err(CorpusError::Parse {
            line,
            message: "empty document id".into(),
        });
    }
    if normalize(&doc.text()).is_empty() {
        return Err(CorpusError::Parse {
            line,
            message: format!("document `{}` has no text", doc.id),
        });
    }
    Ok(())
}

/// Sorts by `(year, id)` and rejects duplicate ids.
pub fn finalize_documents(mut docs: Vec<Document>) -> Result<Vec<Document>> {
    let mut seen = HashSet::new();
    for d in &docs {
        if !seen.insert(d.id.as_str()) {
            return Err(CorpusError::DuplicateId(d.id.clone()));
        }
    }
    docs.sort_by(|a, b| (a.year, &a.id).cmp(&(b.year, &b.id)));
    Ok(docs)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
            line,
            message: e.to_string(),
        })?;
        validate(&doc, line)?;
        docs.push(doc);
    }
    finalize_documents(docs)
}

pub fn parse_csv(text: &str) -> Result<Vec<Document>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| CorpusError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.is_empty() && text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let expected = ["id", "year", "title", "abstract"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(CorpusError::Parse {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut docs = Vec::new();
    for record in reader.deserialize::<Document>() {
        let doc = record.map_err(|e| CorpusError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = docs.len() + 2;
        validate(&doc, line)?;
        docs.push(doc);
    }
    finalize_documents(docs)
}

/// Loads documents ordered by `(year, id)`.
pub fn load_documents(path: &Path, format: DocFormat) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path)?;
    match format {
        DocFormat::Jsonl => parse_jsonl(&text),
        DocFormat::Csv => parse_csv(&text),
    }
}

/// Writes documents as JSON Lines.
pub fn write_jsonl(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("documents serialize"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Normalization

/// Normalized text plus the byte span of each token within it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormalizedText {
    pub text: String,
    pub spans: Vec<(usize, usize)>,
}

impl NormalizedText {
    pub fn token(&self, i: usize) -> &str {
        let (s, e) = self.spans[i];
        &self.text[s..e]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.spans.iter().map(|&(s, e)| &self.text[s..e])
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

pub fn normalize_text(raw: &str) -> NormalizedText {
    let mut text = String::with_capacity(raw.len());
    let mut spans = Vec::new();
    let mut start = None;
    for ch in raw.chars() {
        if ch.is_alphanumeric() {
            if start.is_none() {
                if !text.is_empty() {
                    text.push(' ');
                }
                start = Some(text.len());
            }
            text.extend(ch.to_lowercase());
        } else if let Some(s) = start.take() {
            spans.push((s, text.len()));
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    NormalizedText { text, spans }
}

/// Lowercased, punctuation-free, single-space-separated form of `raw`.
pub fn normalize(raw: &str) -> String {
    normalize_text(raw).text
}

/// Splits on sentence-final punctuation; empty pieces are dropped.
pub fn split_sentences(raw: &str) -> Vec<&str> {
    raw.split(['.', '!', '?', ';'])
        .map(str::trim)
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .collect()
}

// ---------------------------------------------------------------------------
// Lexicon

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: HashMap<String, usize>,
    term: Option<usize>,
}

/// Domain dictionary. Entity ids are the normalized terms; term indices
/// follow their lexicographic order.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    trie: Vec<TrieNode>,
    duplicates: usize,
    skipped: usize,
}

impl PartialEq for Lexicon {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms
    }
}

impl Lexicon {
    /// Normalizes and deduplicates `terms`.
    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        let mut duplicates = 0;
        let mut skipped = 0;
        for t in terms {
            let n = normalize(t.as_ref());
            if n.is_empty() {
                skipped += 1;
            } else if !set.insert(n) {
                duplicates += 1;
            }
        }
        let terms: Vec<String> = set.into_iter().collect();
        let mut trie = vec![TrieNode::default()];
        for (idx, term) in terms.iter().enumerate() {
            let mut node = 0;
            for tok in term.split(' ') {
                node = match trie[node].children.get(tok) {
                    Some(&next) => next,
                    None => {
                        trie.push(TrieNode::default());
                        let next = trie.len() - 1;
                        trie[node].children.insert(tok.to_string(), next);
                        next
                    }
                };
            }
            trie[node].term = Some(idx);
        }
        let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Lexicon {
            terms,
            index,
            trie,
            duplicates,
            skipped,
        }
    }

    /// Parses one term per line; blank and `#` comment lines are ignored.
    pub fn parse(text: &str) -> Self {
        let lex = Lexicon::from_terms(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        );
        if lex.duplicates > 0 {
            log::warn!("lexicon: {} duplicate terms collapsed", lex.duplicates);
        }
        lex
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Number of lines that normalized to an already present term.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    /// Number of lines with no alphanumeric content.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.index.contains_key(entity)
    }

    pub fn term_index(&self, entity: &str) -> Option<usize> {
        self.index.get(entity).copied()
    }

    /// Leftmost-longest whole-token matches as `(term index, first token,
    /// end token)`.
    pub fn match_tokens<'a, I>(&self, tokens: I) -> Vec<(usize, usize, usize)>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let tokens: Vec<&str> = tokens.into_iter().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let mut node = 0;
            let mut best = None;
            for (j, tok) in tokens[i..].iter().enumerate() {
                match self.trie[node].children.get(*tok) {
                    Some(&next) => node = next,
                    None => break,
                }
                if let Some(t) = self.trie[node].term {
                    best = Some((t, i + j + 1));
                }
            }
            match best {
                Some((t, end)) => {
                    out.push((t, i, end));
                    i = end;
                }
                None => i += 1,
            }
        }
        out
    }
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let file = fs::File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    Ok(Lexicon::parse(&text))
}

// ---------------------------------------------------------------------------
// Extraction

/// One dictionary hit; `start..end` is a byte span in the normalized text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub entity_id: String,
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
}

pub fn find_mentions(doc: &Document, lex: &Lexicon) -> (NormalizedText, Vec<EntityMention>) {
    let norm = normalize_text(&doc.text());
    let mentions = lex
        .match_tokens(norm.tokens())
        .into_iter()
        .map(|(t, first, end)| EntityMention {
            entity_id: lex.terms[t].clone(),
            doc_id: doc.id.clone(),
            start: norm.spans[first].0,
            end: norm.spans[end - 1].1,
        })
        .collect();
    (norm, mentions)
}

/// Distinct entity ids mentioned anywhere in the document's text.
pub fn extract_entities(doc: &Document, lex: &Lexicon) -> BTreeSet<String> {
    extract_from_text(&doc.text(), lex)
}

pub fn extract_from_text(raw: &str, lex: &Lexicon) -> BTreeSet<String> {
    let norm = normalize_text(raw);
    lex.match_tokens(norm.tokens())
        .into_iter()
        .map(|(t, _, _)| lex.terms[t].clone())
        .collect()
}

/// For each entity, the tokens of the first sentence mentioning it, scanning
/// documents with `year <= cutoff` in `(year, id)` order and sentences in
/// text order.
pub fn first_context_sentences(docs: &[Document], lex: &Lexicon, cutoff: i32) -> BTreeMap<String, Vec<String>> {
    let mut out = BTreeMap::new();
    let mut ordered: Vec<&Document> = docs.iter().filter(|d| d.year <= cutoff).collect();
    ordered.sort_by(|a, b| (a.year, &a.id).cmp(&(b.year, &b.id)));
    for doc in ordered {
        for sentence in doc.sentences() {
            let norm = normalize_text(sentence);
            for (t, _, _) in lex.match_tokens(norm.tokens()) {
                out.entry(lex.terms[t].clone())
                    .or_insert_with(|| norm.tokens().map(str::to_string).collect());
            }
        }
    }
    out
}
