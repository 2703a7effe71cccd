//! Corpus data model: documents, passages, slot-filling instances, JSONL
//! ingestion, tokenization, query rendering, and entity co-occurrence.

mod cooc;
mod segment;
mod vocab;

pub use cooc::CooccurrenceIndex;
pub use segment::{passage_entities, segment_documents};
pub use vocab::{Vocab, BOS_ID, EOS_ID, PAD_ID, RESERVED_TOKENS, SEP_ID, UNK_ID};

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// (doc_id, paragraph index): the provenance granularity everywhere.
pub type ParagraphRef = (String, usize);

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("query {part} is empty")]
    EmptyQueryPart { part: &'static str },
    #[error("max_passage_tokens must be >= 1")]
    BadPassageLimit,
}

/// One source document: ordered paragraphs plus optional entity
/// annotations consumed by the co-occurrence index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub paragraphs: Vec<String>,
    /// (paragraph index, entity surface form) pairs.
    #[serde(default, rename = "entities", skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<(usize, String)>,
}

/// A retrieval unit: one or more whole paragraphs of a single document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    /// "{doc_id}:{first_paragraph_index}".
    pub passage_id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    /// Source paragraphs in order, all from `doc_id`, never empty.
    pub paragraph_ids: Vec<ParagraphRef>,
}

impl Passage {
    /// Token stream used by BM25 indexing, context encoding, and the
    /// generator's evidence sequence: title then text.
    pub fn indexed_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }

    pub fn covers(&self, paragraph: &ParagraphRef) -> bool {
        self.paragraph_ids.iter().any(|p| p == paragraph)
    }
}

/// A slot-filling query: subject and relation in, object out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotInstance {
    pub query_id: String,
    pub subject: String,
    pub relation: String,
    /// Accepted answer strings; the first is the training target.
    pub answers: Vec<String>,
    /// Gold paragraphs. Empty only for unlabeled test instances.
    #[serde(rename = "provenance")]
    pub gold_provenance: BTreeSet<ParagraphRef>,
}

/// Passage row as persisted by the segment stage: the passage plus the
/// entities annotated on its source paragraphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    #[serde(flatten)]
    pub passage: Passage,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<String>,
}

/// Read one JSON value per line. Blank lines are tolerated; malformed
/// lines error with their 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, CorpusError> {
    let display = path.as_ref().display().to_string();
    let file = File::open(path.as_ref()).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            path: display.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Write one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<(), CorpusError> {
    let display = path.as_ref().display().to_string();
    let io_err = |source| CorpusError::Io {
        path: display.clone(),
        source,
    };
    let file = File::create(path.as_ref()).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| CorpusError::Line {
            path: display.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Load and validate a corpus file: unique non-empty doc_ids, non-empty
/// paragraph strings, annotation indexes in range.
pub fn read_jsonl_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    let display = path.as_ref().display().to_string();
    let docs: Vec<Document> = read_jsonl(&path)?;
    let mut seen = HashSet::new();
    for (i, doc) in docs.iter().enumerate() {
        let line = i + 1;
        let bad = |message: String| CorpusError::Line {
            path: display.clone(),
            line,
            message,
        };
        if doc.doc_id.is_empty() {
            return Err(bad("empty doc_id".into()));
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(bad(format!("duplicate doc_id {:?}", doc.doc_id)));
        }
        if let Some(j) = doc.paragraphs.iter().position(|p| p.is_empty()) {
            return Err(bad(format!("empty paragraph at index {j}")));
        }
        if let Some((idx, ent)) = doc.entities.iter().find(|(idx, _)| *idx >= doc.paragraphs.len())
        {
            return Err(bad(format!(
                "entity {ent:?} annotated on paragraph {idx}, but document has {} paragraphs",
                doc.paragraphs.len()
            )));
        }
    }
    Ok(docs)
}

/// Load and validate instances: unique query_ids, non-empty answer lists.
pub fn read_jsonl_instances(path: impl AsRef<Path>) -> Result<Vec<SlotInstance>, CorpusError> {
    let display = path.as_ref().display().to_string();
    let rows: Vec<SlotInstance> = read_jsonl(&path)?;
    let mut seen = HashSet::new();
    for (i, inst) in rows.iter().enumerate() {
        let line = i + 1;
        if !seen.insert(inst.query_id.clone()) {
            return Err(CorpusError::Line {
                path: display.clone(),
                line,
                message: format!("duplicate query_id {:?}", inst.query_id),
            });
        }
        if inst.answers.is_empty() {
            return Err(CorpusError::Line {
                path: display,
                line,
                message: "answers must be non-empty".into(),
            });
        }
    }
    Ok(rows)
}

/// Lexical split shared by segmentation, BM25, and the vocabulary:
/// lowercased maximal alphanumeric runs; everything else separates.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                cur.push(lc);
            }
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Number of lexical tokens in `text`, without allocating.
pub fn token_count(text: &str) -> usize {
    let mut n = 0;
    let mut in_run = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if !in_run {
                n += 1;
                in_run = true;
            }
        } else {
            in_run = false;
        }
    }
    n
}

/// Head-truncate to the first `n` lexical tokens, keeping original bytes
/// up to the end of token `n`.
pub fn truncate_to_tokens(text: &str, n: usize) -> &str {
    if n == 0 {
        return "";
    }
    let mut seen = 0;
    let mut in_run = false;
    for (idx, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if !in_run {
                in_run = true;
                seen += 1;
            }
        } else if in_run {
            in_run = false;
            if seen == n {
                return &text[..idx];
            }
        }
    }
    text
}

/// Strip a namespace prefix and turn underscores into spaces:
/// "per:employee_of" -> "employee of".
pub fn normalize_relation(relation: &str) -> String {
    let tail = match relation.split_once(':') {
        Some((_, tail)) => tail,
        None => relation,
    };
    tail.replace('_', " ")
}

/// Query text for the query encoder: "{subject} [SEP] {relation}",
/// relation namespace-normalized.
pub fn render_query(subject: &str, relation: &str) -> Result<String, CorpusError> {
    let relation = non_empty(relation, "relation")?;
    Ok(format!("{} [SEP] {}", non_empty(subject, "subject")?, relation))
}

/// Keyword form for sparse search: same rendering, separator dropped.
pub fn render_keyword_query(subject: &str, relation: &str) -> Result<String, CorpusError> {
    let relation = non_empty(relation, "relation")?;
    Ok(format!("{} {}", non_empty(subject, "subject")?, relation))
}

fn non_empty(raw: &str, part: &'static str) -> Result<String, CorpusError> {
    let value = if part == "relation" {
        normalize_relation(raw)
    } else {
        raw.to_string()
    };
    if value.trim().is_empty() {
        return Err(CorpusError::EmptyQueryPart { part });
    }
    Ok(value)
}
