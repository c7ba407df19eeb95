//! Corpus construction: raw threads and documents become dialogues,
//! dialogues expand into training samples, and samples serialize into
//! model-ready sequences.

mod convert;
mod io;
mod samples;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

pub use convert::{
    comments_to_dialogues, mix_corpora, text_to_dialogue, Comment, CommentThread, RawComment,
    RawRecord,
};
pub use io::{
    read_dialogues, read_knowledge_records, read_raw_records, read_samples, write_dialogues,
    write_samples,
};
pub use samples::{
    dialogue_to_samples, knowledge_record_to_samples, serialize_prefix, serialize_sample,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("thread {thread}: no root comment (every comment has a parent)")]
    NoRoot { thread: String },
    #[error("thread {thread}: comments {first} and {second} are both roots")]
    MultipleRoots {
        thread: String,
        first: String,
        second: String,
    },
    #[error("thread {thread}: comment {comment} references unknown parent {parent}")]
    UnknownParent {
        thread: String,
        comment: String,
        parent: String,
    },
    #[error("thread {thread}: cyclic parent links involving comment {comment}")]
    CyclicParents { thread: String, comment: String },
    #[error("thread {thread}: duplicate comment id {comment}")]
    DuplicateComment { thread: String, comment: String },
    #[error("document {id} contains no text")]
    EmptyDocument { id: String },
    #[error("dialogue {id}: {detail}")]
    InvalidDialogue { id: String, detail: String },
    #[error("knowledge record: {detail}")]
    InvalidRecord { detail: String },
    #[error("mixing weights ({single}, {multi}) must be non-negative, finite, and not both zero")]
    InvalidRatio { single: f64, multi: f64 },
    #[error(
        "serialized sample does not fit: {context} context + {knowledge} knowledge + \
         {target} target tokens (+ separators) exceed max_len {max_len} even after truncation"
    )]
    SampleTooLong {
        context: usize,
        knowledge: usize,
        target: usize,
        max_len: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One turn of a dialogue: who spoke and what they said.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Utterance {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DialogueKind {
    #[serde(rename = "single-party")]
    SingleParty,
    #[serde(rename = "multi-party")]
    MultiParty,
}

/// An ordered conversation extracted from a raw source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub kind: DialogueKind,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |detail: String| {
            Err(CorpusError::InvalidDialogue {
                id: self.id.clone(),
                detail,
            })
        };
        if self.utterances.is_empty() {
            return fail("no utterances".into());
        }
        let distinct = distinct_speakers(&self.utterances);
        match self.kind {
            DialogueKind::SingleParty if distinct != 1 => {
                fail(format!("single-party dialogue has {distinct} speakers"))
            }
            DialogueKind::MultiParty if distinct < 2 => {
                fail(format!("multi-party dialogue has {distinct} speaker(s)"))
            }
            _ => Ok(()),
        }
    }
}

pub(crate) fn distinct_speakers(utterances: &[Utterance]) -> usize {
    let mut seen: Vec<&str> = Vec::new();
    for u in utterances {
        if !seen.contains(&u.speaker.as_str()) {
            seen.push(&u.speaker);
        }
    }
    seen.len()
}

/// Which of the two output groups a sample trains: search-query generation
/// or response generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Query,
    Response,
}

/// One training example: a dialogue context, optional grounding, and the
/// text the model should produce.
///
/// The `query` field is bookkeeping that links a response sample back to
/// its sibling query sample; it is never serialized into the model input.
/// A query-kind sample with an empty `target` trains the "no search needed"
/// convention and serializes to the dedicated sentinel token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub context: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<String>,
    pub output_kind: OutputKind,
    pub target: String,
    /// Speaker id of the side producing the target, when known; their
    /// context turns share role 0 with the output tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responder: Option<String>,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.output_kind == OutputKind::Query && self.knowledge.is_some() {
            return Err(CorpusError::InvalidRecord {
                detail: "query-generation sample must not carry knowledge".into(),
            });
        }
        Ok(())
    }
}

/// A logged human search interaction: context, the query the human issued
/// (possibly empty when no search was needed), what it retrieved, and the
/// grounded response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDialogueRecord {
    pub context: Vec<Utterance>,
    #[serde(default)]
    pub human_query: String,
    #[serde(default)]
    pub retrieved_knowledge: String,
    pub response: String,
}

impl KnowledgeDialogueRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let query_empty = self.human_query.trim().is_empty();
        let knowledge_empty = self.retrieved_knowledge.trim().is_empty();
        if query_empty && !knowledge_empty {
            return Err(CorpusError::InvalidRecord {
                detail: "retrieved knowledge without a query".into(),
            });
        }
        if !query_empty && knowledge_empty {
            return Err(CorpusError::InvalidRecord {
                detail: "query without retrieved knowledge".into(),
            });
        }
        Ok(())
    }
}

/// Replace control characters with spaces and trim the ends; applied to
/// every text fragment at ingestion.
pub(crate) fn clean_fragment(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect::<String>()
        .trim()
        .to_string()
}

/// Collapse runs of whitespace to single spaces; the key under which
/// dialogues are considered duplicates.
fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drop dialogues that are identical after whitespace normalization,
/// keeping the first occurrence. Ids are ignored by the comparison.
pub fn dedup_dialogues(dialogues: Vec<Dialogue>) -> Vec<Dialogue> {
    let mut seen: std::collections::HashSet<(DialogueKind, Vec<(String, String)>)> =
        std::collections::HashSet::new();
    let mut kept = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let key = (
            d.kind,
            d.utterances
                .iter()
                .map(|u| (u.speaker.clone(), normalize_ws(&u.text)))
                .collect(),
        );
        if seen.insert(key) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests;
