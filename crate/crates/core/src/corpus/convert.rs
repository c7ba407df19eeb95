//! Raw-source conversion: comment threads to multi-party dialogues, web
//! documents to single-party dialogues, and seeded corpus mixing.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clean_fragment, distinct_speakers, CorpusError, Dialogue, DialogueKind, Utterance};

/// One comment in flat parent-link form. The root has `parent: None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub id: String,
    #[serde(default)]
    pub parent: Option<String>,
    pub speaker: String,
    pub text: String,
}

/// A whole comment thread: the root post plus replies, parent-linked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentThread {
    pub id: String,
    pub comments: Vec<Comment>,
}

/// Nested reply-tree form used by the raw JSON-lines input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawComment {
    #[serde(default)]
    pub id: Option<String>,
    pub speaker: String,
    pub text: String,
    #[serde(default)]
    pub replies: Vec<RawComment>,
}

/// One line of the raw input file: a comment thread or a web document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum RawRecord {
    #[serde(rename = "thread")]
    Thread { root: RawComment },
    #[serde(rename = "doc")]
    Doc { text: String },
}

impl RawRecord {
    /// Convert one raw record into dialogues. `id` names the record
    /// (typically its line number) and seeds the dialogue ids;
    /// `sentence_cap` is the per-utterance word cap for documents.
    pub fn to_dialogues(
        &self,
        id: &str,
        sentence_cap: usize,
    ) -> Result<Vec<Dialogue>, CorpusError> {
        match self {
            RawRecord::Thread { root } => {
                let thread = flatten_thread(id, root);
                comments_to_dialogues(&thread)
            }
            RawRecord::Doc { text } => Ok(vec![text_to_dialogue(id, text, sentence_cap)?]),
        }
    }
}

/// Flatten a nested reply tree into parent-link form, assigning positional
/// ids (`0`, `0.1`, `0.1.0`, ...) to comments that lack one.
fn flatten_thread(thread_id: &str, root: &RawComment) -> CommentThread {
    let mut comments = Vec::new();
    let mut stack: Vec<(&RawComment, Option<String>, String)> =
        vec![(root, None, "0".to_string())];
    while let Some((node, parent, auto_id)) = stack.pop() {
        let id = node.id.clone().unwrap_or(auto_id.clone());
        for (i, reply) in node.replies.iter().enumerate().rev() {
            stack.push((reply, Some(id.clone()), format!("{auto_id}.{i}")));
        }
        comments.push(Comment {
            id,
            parent,
            speaker: node.speaker.clone(),
            text: node.text.clone(),
        });
    }
    CommentThread {
        id: thread_id.to_string(),
        comments,
    }
}

/// Extract one dialogue per root-to-leaf path of length ≥ 2.
///
/// Paths whose comments all share one speaker (self-reply chains) are kept
/// but tagged single-party so the dialogue invariants hold.
pub fn comments_to_dialogues(thread: &CommentThread) -> Result<Vec<Dialogue>, CorpusError> {
    let n = thread.comments.len();
    let mut index_of = std::collections::HashMap::with_capacity(n);
    for (i, c) in thread.comments.iter().enumerate() {
        if index_of.insert(c.id.as_str(), i).is_some() {
            return Err(CorpusError::DuplicateComment {
                thread: thread.id.clone(),
                comment: c.id.clone(),
            });
        }
    }

    let mut root = None;
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, c) in thread.comments.iter().enumerate() {
        match &c.parent {
            None => match root {
                None => root = Some(i),
                Some(r) => {
                    return Err(CorpusError::MultipleRoots {
                        thread: thread.id.clone(),
                        first: thread.comments[r].id.clone(),
                        second: c.id.clone(),
                    })
                }
            },
            Some(p) => {
                let &pi = index_of
                    .get(p.as_str())
                    .ok_or_else(|| CorpusError::UnknownParent {
                        thread: thread.id.clone(),
                        comment: c.id.clone(),
                        parent: p.clone(),
                    })?;
                children[pi].push(i);
            }
        }
    }
    let root = root.ok_or_else(|| CorpusError::NoRoot {
        thread: thread.id.clone(),
    })?;

    // Depth-first walk collecting root-to-leaf paths; a visit count below n
    // afterwards means some comments sit on a parent cycle.
    let mut dialogues = Vec::new();
    let mut visited = vec![false; n];
    let mut path: Vec<usize> = Vec::new();
    // (comment index, how many of its children are already expanded)
    let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
    visited[root] = true;
    path.push(root);
    while let Some(&mut (i, ref mut next_child)) = stack.last_mut() {
        if *next_child < children[i].len() {
            let child = children[i][*next_child];
            *next_child += 1;
            visited[child] = true;
            path.push(child);
            stack.push((child, 0));
        } else {
            if children[i].is_empty() && path.len() >= 2 {
                let utterances: Vec<Utterance> = path
                    .iter()
                    .map(|&k| {
                        let c = &thread.comments[k];
                        Utterance::new(c.speaker.clone(), clean_fragment(&c.text))
                    })
                    .collect();
                let kind = if distinct_speakers(&utterances) >= 2 {
                    DialogueKind::MultiParty
                } else {
                    DialogueKind::SingleParty
                };
                dialogues.push(Dialogue {
                    id: format!("{}/{}", thread.id, thread.comments[i].id),
                    kind,
                    utterances,
                });
            }
            stack.pop();
            path.pop();
        }
    }

    if let Some(unreached) = visited.iter().position(|&v| !v) {
        return Err(CorpusError::CyclicParents {
            thread: thread.id.clone(),
            comment: thread.comments[unreached].id.clone(),
        });
    }
    Ok(dialogues)
}

/// Segment a web document into a single-party dialogue: one utterance per
/// paragraph, split further at sentence boundaries when a paragraph
/// exceeds `word_cap` whitespace-separated words.
pub fn text_to_dialogue(id: &str, text: &str, word_cap: usize) -> Result<Dialogue, CorpusError> {
    let word_cap = word_cap.max(1);
    let mut utterances = Vec::new();
    for paragraph in text.split('\n') {
        let paragraph = clean_fragment(paragraph);
        if paragraph.is_empty() {
            continue;
        }
        if word_count(&paragraph) <= word_cap {
            utterances.push(Utterance::new("author", paragraph));
            continue;
        }
        // Pack whole sentences greedily up to the cap; a single sentence
        // longer than the cap is hard-split at word boundaries.
        let mut current = String::new();
        let mut current_words = 0;
        for sentence in split_sentences(&paragraph) {
            for piece in split_to_cap(&sentence, word_cap) {
                let piece_words = word_count(&piece);
                if current_words + piece_words > word_cap && !current.is_empty() {
                    utterances.push(Utterance::new("author", current.trim().to_string()));
                    current = String::new();
                    current_words = 0;
                }
                if !current.is_empty() {
                    current.push(' ');
                }
                current.push_str(&piece);
                current_words += piece_words;
            }
        }
        if !current.trim().is_empty() {
            utterances.push(Utterance::new("author", current.trim().to_string()));
        }
    }
    if utterances.is_empty() {
        return Err(CorpusError::EmptyDocument { id: id.to_string() });
    }
    Ok(Dialogue {
        id: id.to_string(),
        kind: DialogueKind::SingleParty,
        utterances,
    })
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Split at sentence-final punctuation (ASCII and CJK), keeping the
/// punctuation with the preceding sentence.
fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if matches!(c, '.' | '!' | '?' | '。' | '！' | '？') {
            let s = current.trim();
            if !s.is_empty() {
                sentences.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        sentences.push(s.to_string());
    }
    sentences
}

/// Split a sentence into pieces of at most `word_cap` words.
fn split_to_cap(sentence: &str, word_cap: usize) -> Vec<String> {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    if words.len() <= word_cap {
        return vec![words.join(" ")];
    }
    words.chunks(word_cap).map(|c| c.join(" ")).collect()
}

/// Interleave two dialogue streams by weighted seeded draws. When one
/// stream runs dry the rest of the other is emitted after a logged
/// warning. Weights may include zero (that stream is never drawn while
/// the other has items) but not both.
pub fn mix_corpora<I, J>(
    single: I,
    multi: J,
    ratio: (f64, f64),
    seed: u64,
) -> Result<Vec<Dialogue>, CorpusError>
where
    I: IntoIterator<Item = Dialogue>,
    J: IntoIterator<Item = Dialogue>,
{
    let (ws, wm) = ratio;
    if !ws.is_finite() || !wm.is_finite() || ws < 0.0 || wm < 0.0 || ws + wm <= 0.0 {
        return Err(CorpusError::InvalidRatio {
            single: ws,
            multi: wm,
        });
    }
    // A zero weight excludes that stream entirely; it is not a fallback.
    if wm == 0.0 {
        return Ok(single.into_iter().collect());
    }
    if ws == 0.0 {
        return Ok(multi.into_iter().collect());
    }
    let p_single = ws / (ws + wm);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut single = single.into_iter().peekable();
    let mut multi = multi.into_iter().peekable();
    let mut mixed = Vec::new();
    let mut warned = false;
    loop {
        let draw_single = match (single.peek().is_some(), multi.peek().is_some()) {
            (false, false) => break,
            (true, false) | (false, true) => {
                if !warned {
                    let dry = if single.peek().is_some() {
                        "multi-party"
                    } else {
                        "single-party"
                    };
                    log::warn!("{dry} stream exhausted; continuing from the other");
                    warned = true;
                }
                single.peek().is_some()
            }
            (true, true) => rng.random_bool(p_single),
        };
        let item = if draw_single {
            single.next()
        } else {
            multi.next()
        };
        mixed.push(item.expect("peeked stream yields an item"));
    }
    Ok(mixed)
}
