//! Local ranked retrieval over a document corpus: an inverted index with
//! BM25 scoring and best-window snippets, standing in for an external
//! search service.
//!
//! The analyzer is the same byte-level BPE vocabulary the model uses,
//! applied to lowercased text with pure-whitespace tokens dropped. The
//! vocabulary's merge rules are embedded in the persisted index so an index
//! file is self-contained.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tokenizer::{TokenId, TokenizerError, Vocabulary};

#[cfg(test)]
mod tests;

/// BM25 term-frequency saturation constant.
pub const BM25_K1: f64 = 1.2;
/// BM25 length-normalization strength.
pub const BM25_B: f64 = 0.75;
/// Default snippet budget in analyzer tokens, sized so a snippet fits the
/// knowledge segment of a serialized sample alongside dialogue context.
pub const DEFAULT_SNIPPET_BUDGET: usize = 128;

const MAGIC: &[u8; 8] = b"KGCHINDX";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("duplicate document id '{id}'")]
    DuplicateId { id: String },
    #[error("document '{id}' has an empty body")]
    EmptyBody { id: String },
    #[error("search requires k >= 1")]
    ZeroK,
    #[error("document file line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("index file: {0}")]
    Format(String),
    #[error("index checksum mismatch: file corrupt or truncated")]
    ChecksumMismatch,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One retrievable document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub body: String,
    /// Publication time in seconds since the Unix epoch, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

/// One search result: the document, how well it matched, and the best
/// excerpt of its body for the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
    pub snippet: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Posting {
    /// Position of the document in `docs`.
    doc: u32,
    /// Term frequency in that document's body.
    tf: u32,
}

/// Corpus-level scoring statistics, kept separate from the live posting
/// lists so they can be frozen while documents are still being added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusStats {
    doc_count: u64,
    total_terms: u64,
    /// Term -> number of documents whose body contains it.
    df: BTreeMap<TokenId, u32>,
}

impl CorpusStats {
    fn empty() -> Self {
        CorpusStats {
            doc_count: 0,
            total_terms: 0,
            df: BTreeMap::new(),
        }
    }
}

/// Inverted index over a document corpus. Immutable once searches begin;
/// rebuilds replace the whole value.
#[derive(Debug, Clone)]
pub struct Index {
    vocab: Vocabulary,
    docs: Vec<Document>,
    /// Scoring-term count of each body, parallel to `docs`.
    doc_terms: Vec<u32>,
    postings: BTreeMap<TokenId, Vec<Posting>>,
    stats: CorpusStats,
    /// True once a document has been added without updating `stats`.
    stats_frozen: bool,
}

/// Serialized form of the index: the vocabulary travels as its merge list.
#[derive(Serialize, Deserialize)]
struct IndexPayload {
    merges: Vec<(TokenId, TokenId)>,
    truncated: bool,
    docs: Vec<Document>,
    doc_terms: Vec<u32>,
    postings: BTreeMap<TokenId, Vec<Posting>>,
    stats: CorpusStats,
    stats_frozen: bool,
}

/// Scoring terms of a text: lowercase, BPE-encode, drop pure-whitespace
/// tokens.
fn analyze(vocab: &Vocabulary, text: &str) -> Vec<TokenId> {
    vocab
        .encode(&text.to_lowercase())
        .into_iter()
        .filter(|&id| {
            vocab
                .token_bytes(id)
                .is_some_and(|b| !b.iter().all(u8::is_ascii_whitespace))
        })
        .collect()
}

/// Build an index over `docs` using `vocab` as the analyzer.
pub fn build_index(docs: Vec<Document>, vocab: &Vocabulary) -> Result<Index, StoreError> {
    let mut index = Index {
        vocab: vocab.clone(),
        docs: Vec::new(),
        doc_terms: Vec::new(),
        postings: BTreeMap::new(),
        stats: CorpusStats::empty(),
        stats_frozen: false,
    };
    for doc in docs {
        index.add_document(doc, false)?;
    }
    Ok(index)
}

impl Index {
    /// Add one document. With `freeze_stats`, posting lists grow but the
    /// corpus statistics used for scoring stay exactly as they were, so
    /// previously indexed documents keep bit-identical scores for queries
    /// that do not match the new document.
    pub fn add_document(&mut self, doc: Document, freeze_stats: bool) -> Result<(), StoreError> {
        if doc.body.is_empty() {
            return Err(StoreError::EmptyBody { id: doc.id });
        }
        if self.docs.iter().any(|d| d.id == doc.id) {
            return Err(StoreError::DuplicateId { id: doc.id });
        }
        let terms = analyze(&self.vocab, &doc.body);
        let mut tf: BTreeMap<TokenId, u32> = BTreeMap::new();
        for &t in &terms {
            *tf.entry(t).or_insert(0) += 1;
        }
        let slot = self.docs.len() as u32;
        for (&term, &count) in &tf {
            self.postings
                .entry(term)
                .or_default()
                .push(Posting { doc: slot, tf: count });
        }
        if freeze_stats {
            self.stats_frozen = true;
        } else {
            self.stats.doc_count += 1;
            self.stats.total_terms += terms.len() as u64;
            for &term in tf.keys() {
                *self.stats.df.entry(term).or_insert(0) += 1;
            }
        }
        self.doc_terms.push(terms.len() as u32);
        self.docs.push(doc);
        Ok(())
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.docs.iter().find(|d| d.id == id)
    }

    /// The analyzer this index was built with.
    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn idf(&self, term: TokenId) -> f64 {
        let n = self.stats.doc_count as f64;
        let df = self.stats.df.get(&term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn avgdl(&self) -> f64 {
        if self.stats.doc_count == 0 {
            0.0
        } else {
            self.stats.total_terms as f64 / self.stats.doc_count as f64
        }
    }

    /// BM25 search with the default snippet budget.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, StoreError> {
        self.search_with(query, k, DEFAULT_SNIPPET_BUDGET)
    }

    /// BM25 search: top `k` documents by score descending, ties broken by
    /// ascending document id, each with its best body window of at most
    /// `snippet_budget` analyzer tokens.
    pub fn search_with(
        &self,
        query: &str,
        k: usize,
        snippet_budget: usize,
    ) -> Result<Vec<SearchHit>, StoreError> {
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        // Distinct query terms: repeating a word in the query does not
        // multiply its weight.
        let mut terms = analyze(&self.vocab, query);
        terms.sort_unstable();
        terms.dedup();

        let avg = self.avgdl();
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for &term in &terms {
            let Some(postings) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(term);
            for p in postings {
                let dl = f64::from(self.doc_terms[p.doc as usize]);
                let norm = if avg > 0.0 {
                    1.0 - BM25_B + BM25_B * dl / avg
                } else {
                    1.0
                };
                let tf = f64::from(p.tf);
                *scores.entry(p.doc).or_insert(0.0) +=
                    idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
            }
        }

        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.docs[a.0 as usize].id.cmp(&self.docs[b.0 as usize].id))
        });
        ranked.truncate(k);
        ranked
            .into_iter()
            .map(|(slot, score)| {
                let doc = &self.docs[slot as usize];
                Ok(SearchHit {
                    doc_id: doc.id.clone(),
                    score,
                    snippet: self.snippet(doc, &terms, snippet_budget)?,
                })
            })
            .collect()
    }

    /// The highest-scoring window of the body, at most `budget` tokens of
    /// the original (case-preserved) text. Windows advance by half the
    /// budget; ties keep the earliest window. A body within budget is
    /// returned whole.
    fn snippet(
        &self,
        doc: &Document,
        query_terms: &[TokenId],
        budget: usize,
    ) -> Result<String, StoreError> {
        if budget == 0 {
            return Ok(String::new());
        }
        let tokens = self.vocab.encode(&doc.body);
        if tokens.len() <= budget {
            return Ok(doc.body.clone());
        }
        let stride = (budget / 2).max(1);
        let mut best: Option<(f64, usize)> = None;
        let mut start = 0;
        loop {
            let end = (start + budget).min(tokens.len());
            let text = self.vocab.decode(&tokens[start..end])?;
            let mut tf: BTreeMap<TokenId, u32> = BTreeMap::new();
            for t in analyze(&self.vocab, &text) {
                if query_terms.contains(&t) {
                    *tf.entry(t).or_insert(0) += 1;
                }
            }
            // Saturated frequency, as in document scoring but without
            // length normalization: covering another query term beats
            // repeating one already present.
            let score: f64 = tf
                .iter()
                .map(|(&t, &count)| {
                    let c = f64::from(count);
                    self.idf(t) * c * (BM25_K1 + 1.0) / (c + BM25_K1)
                })
                .sum();
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, start));
            }
            if end == tokens.len() {
                break;
            }
            start += stride;
        }
        let (_, start) = best.expect("at least one window was scored");
        let end = (start + budget).min(tokens.len());
        Ok(self.vocab.decode(&tokens[start..end])?)
    }

    /// Structural invariants: parallel arrays line up and every posting
    /// points at a real document with a positive count, in ascending slot
    /// order.
    fn check_structure(&self) -> Result<(), StoreError> {
        if self.doc_terms.len() != self.docs.len() {
            return Err(StoreError::Format(format!(
                "{} documents but {} length entries",
                self.docs.len(),
                self.doc_terms.len()
            )));
        }
        for (&term, list) in &self.postings {
            let mut prev: Option<u32> = None;
            for p in list {
                if p.doc as usize >= self.docs.len() {
                    return Err(StoreError::Format(format!(
                        "term {term} posting references missing document slot {}",
                        p.doc
                    )));
                }
                if p.tf == 0 {
                    return Err(StoreError::Format(format!(
                        "term {term} posting for slot {} has zero frequency",
                        p.doc
                    )));
                }
                if prev.is_some_and(|q| q >= p.doc) {
                    return Err(StoreError::Format(format!(
                        "term {term} posting list out of order at slot {}",
                        p.doc
                    )));
                }
                prev = Some(p.doc);
            }
        }
        Ok(())
    }

    /// Full consistency check: structure plus, when statistics were never
    /// frozen, a brute-force recount of postings and statistics from the
    /// document bodies.
    pub fn validate(&self) -> Result<(), StoreError> {
        self.check_structure()?;
        if self.stats_frozen {
            return Ok(());
        }
        let mut df: BTreeMap<TokenId, u32> = BTreeMap::new();
        let mut total_terms = 0u64;
        for (slot, doc) in self.docs.iter().enumerate() {
            let terms = analyze(&self.vocab, &doc.body);
            total_terms += terms.len() as u64;
            if self.doc_terms[slot] as usize != terms.len() {
                return Err(StoreError::Format(format!(
                    "document '{}' length {} does not match recount {}",
                    doc.id,
                    self.doc_terms[slot],
                    terms.len()
                )));
            }
            let mut tf: BTreeMap<TokenId, u32> = BTreeMap::new();
            for &t in &terms {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (&term, &count) in &tf {
                *df.entry(term).or_insert(0) += 1;
                let stored = self
                    .postings
                    .get(&term)
                    .and_then(|list| list.iter().find(|p| p.doc as usize == slot))
                    .map(|p| p.tf);
                if stored != Some(count) {
                    return Err(StoreError::Format(format!(
                        "document '{}' term {term}: stored frequency {stored:?}, recount {count}",
                        doc.id
                    )));
                }
            }
        }
        let posting_count: usize = self.postings.values().map(Vec::len).sum();
        let df_count: u64 = df.values().map(|&c| u64::from(c)).sum();
        if posting_count as u64 != df_count {
            return Err(StoreError::Format(format!(
                "{posting_count} postings stored but recount found {df_count}"
            )));
        }
        if self.stats.doc_count != self.docs.len() as u64
            || self.stats.total_terms != total_terms
            || self.stats.df != df
        {
            return Err(StoreError::Format(
                "corpus statistics do not match posting recount".into(),
            ));
        }
        Ok(())
    }

    // ---- persistence -------------------------------------------------------

    /// Write the index atomically: magic, version, JSON payload, SHA-256
    /// trailer, via a temp file + rename.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let payload = IndexPayload {
            merges: self.vocab.merges().to_vec(),
            truncated: self.vocab.truncated(),
            docs: self.docs.clone(),
            doc_terms: self.doc_terms.clone(),
            postings: self.postings.clone(),
            stats: self.stats.clone(),
            stats_frozen: self.stats_frozen,
        };
        let json = serde_json::to_vec(&payload)
            .map_err(|e| StoreError::Format(format!("payload serialization: {e}")))?;
        let mut body = Vec::with_capacity(json.len() + 20);
        body.extend_from_slice(MAGIC);
        body.extend_from_slice(&VERSION.to_le_bytes());
        body.extend_from_slice(&(json.len() as u64).to_le_bytes());
        body.extend_from_slice(&json);
        let digest = Sha256::digest(&body);

        let tmp = path.with_extension("idx.tmp");
        {
            let mut file = File::create(&tmp)?;
            file.write_all(&body)?;
            file.write_all(&digest)?;
            file.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Index, StoreError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < MAGIC.len() + 4 + 8 + CHECKSUM_LEN {
            return Err(StoreError::Format("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(StoreError::ChecksumMismatch);
        }
        if &body[..MAGIC.len()] != MAGIC {
            return Err(StoreError::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(StoreError::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let payload_bytes = body
            .get(20..20 + len)
            .ok_or_else(|| StoreError::Format("payload length exceeds file".into()))?;
        if 20 + len != body.len() {
            return Err(StoreError::Format("trailing data after payload".into()));
        }
        let payload: IndexPayload = serde_json::from_slice(payload_bytes)
            .map_err(|e| StoreError::Format(format!("payload: {e}")))?;
        let index = Index {
            vocab: Vocabulary::from_merges(&payload.merges, payload.truncated)?,
            docs: payload.docs,
            doc_terms: payload.doc_terms,
            postings: payload.postings,
            stats: payload.stats,
            stats_frozen: payload.stats_frozen,
        };
        index.check_structure()?;
        Ok(index)
    }
}

/// Read a document corpus: one JSON object per line, blank lines skipped.
pub fn read_documents(path: &Path) -> Result<Vec<Document>, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = serde_json::from_str(&line)
            .map_err(|source| StoreError::Json { line: i + 1, source })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Write a document corpus as JSON lines.
pub fn write_documents(path: &Path, docs: &[Document]) -> Result<(), StoreError> {
    let mut out = String::new();
    for doc in docs {
        let line = serde_json::to_string(doc)
            .map_err(|e| StoreError::Format(format!("document serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
