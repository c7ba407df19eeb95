//! Decoding, the query → retrieve → respond pipeline, and the self-chat
//! harness.
//!
//! Responses are produced in two model calls: first a query is decoded from
//! the dialogue context (the no-search sentinel means "answer from internal
//! knowledge"), then — when a store is available — the best snippet for
//! that query is packed into the knowledge segment and the response is
//! decoded. Every turn returns a [`TurnTrace`] so the trigger behavior and
//! retrieval results stay auditable.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{serialize_prefix, CorpusError, OutputKind, Utterance};
use crate::knowledge_store::{Index, SearchHit, StoreError};
use crate::model::{forward, ModelError, Parameters, Sequence, TYPE_KNOWLEDGE};
use crate::numerics::Scalar;
use crate::tokenizer::{TokenId, TokenizerError, Vocabulary, EOS, NO_QUERY};

#[cfg(test)]
mod tests;

/// Top-p mass for interactive chat.
pub const CHAT_TOP_P: f64 = 0.9;
/// Sampling temperature for interactive chat.
pub const CHAT_TEMPERATURE: f64 = 1.0;
/// Generation budget for interactive chat turns.
pub const CHAT_MAX_NEW_TOKENS: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("decode config: {0}")]
    BadDecodeConfig(String),
    #[error("context must hold at least one utterance")]
    EmptyContext,
    #[error("self-chat needs at least one round")]
    ZeroRounds,
    #[error("prefix of {len} tokens leaves no room under the {max_len}-token limit")]
    PrefixTooLong { len: usize, max_len: usize },
    #[error("trace file line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeStrategy {
    Greedy,
    TopP,
}

/// How to turn logits into tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    /// Nucleus mass for top-p sampling; ignored by greedy decoding.
    pub p: f64,
    pub temperature: f64,
    /// Generation budget per decode call. The prompt serializer reserves
    /// this much room, shedding old context first if it must.
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Only token ids below this bound are ever selected. A model may
    /// carry more logit columns than the vocabulary has entries (capacity
    /// headroom); those ids cannot decode to text, so the pipeline caps
    /// the bound at the vocabulary size automatically. `None` means the
    /// full logit width.
    #[serde(default)]
    pub vocab_limit: Option<usize>,
}

impl DecodeConfig {
    /// Deterministic decoding, as used throughout the test suite.
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            p: 1.0,
            temperature: 1.0,
            max_new_tokens,
            seed: 0,
            vocab_limit: None,
        }
    }

    /// Chat defaults: top-p 0.9 at temperature 1.0.
    pub fn chat(seed: u64) -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::TopP,
            p: CHAT_TOP_P,
            temperature: CHAT_TEMPERATURE,
            max_new_tokens: CHAT_MAX_NEW_TOKENS,
            seed,
            vocab_limit: None,
        }
    }

    /// The same settings with token selection capped to ids the given
    /// vocabulary can decode.
    fn capped_to(&self, vocab: &Vocabulary) -> DecodeConfig {
        DecodeConfig {
            vocab_limit: Some(self.vocab_limit.map_or(vocab.size(), |l| l.min(vocab.size()))),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(InferenceError::BadDecodeConfig(format!(
                "p must be in (0, 1], got {}",
                self.p
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(InferenceError::BadDecodeConfig(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(InferenceError::BadDecodeConfig(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if let Some(limit) = self.vocab_limit {
            // Below this nothing can terminate generation.
            if limit <= EOS as usize {
                return Err(InferenceError::BadDecodeConfig(format!(
                    "vocab_limit {limit} leaves the end-of-sequence token unreachable"
                )));
            }
        }
        Ok(())
    }
}

/// Everything one pipeline turn did, for display and audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    /// The dialogue context this turn responded to.
    pub context: Vec<Utterance>,
    /// The generated search query; absent when the model declined to
    /// search.
    pub query: Option<String>,
    /// Search results for `query`; absent when no search ran (no query or
    /// no store). Present implies `query` is present.
    pub retrieval: Option<Vec<SearchHit>>,
    /// True when retrieval failed and the turn fell back to the internal
    /// knowledge path.
    pub fallback: bool,
    pub response: String,
    /// Length of the serialized response prompt.
    pub prompt_tokens: usize,
    /// Knowledge-typed tokens inside the response prompt.
    pub knowledge_tokens: usize,
    /// Tokens decoded across the query and response calls.
    pub generated_tokens: usize,
    pub elapsed_ms: u64,
}

/// Autoregressively extend `prefix` until EOS or the budget runs out; the
/// returned ids include the closing EOS when one was produced. Generated
/// positions take the prefix's output type and role 0.
pub fn decode<T: Scalar>(
    params: &Parameters<T>,
    prefix: &Sequence,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>, InferenceError> {
    cfg.validate()?;
    prefix.validate(&params.config)?;
    let max_len = params.config.max_len;
    if prefix.len() >= max_len {
        return Err(InferenceError::PrefixTooLong {
            len: prefix.len(),
            max_len,
        });
    }
    let output_type = *prefix.types.last().expect("validated sequence is non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seq = prefix.clone();
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens && seq.len() < max_len {
        let logits = forward(params, &seq)?;
        let row = logits.row(logits.rows() - 1);
        let row = &row[..cfg.vocab_limit.unwrap_or(row.len()).min(row.len())];
        let next = match cfg.strategy {
            DecodeStrategy::Greedy => argmax(row),
            DecodeStrategy::TopP => sample_top_p(row, cfg.p, cfg.temperature, &mut rng),
        };
        out.push(next);
        if next == EOS {
            break;
        }
        seq.tokens.push(next);
        seq.types.push(output_type);
        seq.roles.push(0);
        seq.positions
            .push(seq.positions.last().map_or(0, |&p| p + 1));
        seq.loss_mask.push(false);
    }
    Ok(out)
}

/// First index of the largest logit.
fn argmax<T: Scalar>(row: &[T]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Sample from the smallest probability mass ≥ p, renormalized. Ties in
/// probability keep ascending token order, so p → 0 degenerates to greedy.
fn sample_top_p<T: Scalar>(row: &[T], p: f64, temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let scaled: Vec<f64> = row
        .iter()
        .map(|v| v.to_f64().expect("logit fits in f64") / temperature)
        .collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut ranked: Vec<(usize, f64)> = weights
        .iter()
        .map(|w| w / total)
        .enumerate()
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    let mut kept = 0;
    let mut mass = 0.0;
    for &(_, q) in &ranked {
        kept += 1;
        mass += q;
        if mass >= p {
            break;
        }
    }

    let draw = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &(i, q) in &ranked[..kept] {
        acc += q;
        if draw < acc {
            return i as TokenId;
        }
    }
    ranked[kept - 1].0 as TokenId
}

/// Decode the raw query ids for `context` (query-typed prefix, no
/// knowledge).
fn query_ids<T: Scalar>(
    params: &Parameters<T>,
    vocab: &Vocabulary,
    context: &[Utterance],
    responder: &str,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>, InferenceError> {
    if context.is_empty() {
        return Err(InferenceError::EmptyContext);
    }
    let prefix = serialize_prefix(
        context,
        None,
        OutputKind::Query,
        Some(responder),
        cfg.max_new_tokens,
        vocab,
        &params.config,
    )?;
    decode(params, &prefix, &cfg.capped_to(vocab))
}

/// Generate a search query for the dialogue context, or `None` when the
/// model's first token is the no-search sentinel.
pub fn generate_query<T: Scalar>(
    params: &Parameters<T>,
    vocab: &Vocabulary,
    context: &[Utterance],
    responder: &str,
    cfg: &DecodeConfig,
) -> Result<Option<String>, InferenceError> {
    let ids = query_ids(params, vocab, context, responder, cfg)?;
    if ids.first() == Some(&NO_QUERY) {
        Ok(None)
    } else {
        Ok(Some(vocab.decode(&ids)?))
    }
}

/// Run one full turn: generate a query, retrieve the best snippet when a
/// store is available, and decode the response grounded on it.
pub fn respond<T: Scalar>(
    params: &Parameters<T>,
    vocab: &Vocabulary,
    context: &[Utterance],
    responder: &str,
    store: Option<&Index>,
    cfg: &DecodeConfig,
) -> Result<TurnTrace, InferenceError> {
    if context.is_empty() {
        return Err(InferenceError::EmptyContext);
    }
    let started = Instant::now();

    let ids = query_ids(params, vocab, context, responder, cfg)?;
    let mut generated_tokens = ids.len();
    let query = if ids.first() == Some(&NO_QUERY) {
        None
    } else {
        Some(vocab.decode(&ids)?)
    };

    let (retrieval, fallback, knowledge) = match (&query, store) {
        (Some(q), Some(index)) => match index.search(q, 1) {
            Ok(hits) => {
                let knowledge = hits.first().map(|h| h.snippet.clone());
                (Some(hits), false, knowledge)
            }
            Err(err) => {
                log::warn!("retrieval failed, answering from internal knowledge: {err}");
                (None, true, None)
            }
        },
        _ => (None, false, None),
    };

    let prefix = serialize_prefix(
        context,
        knowledge.as_deref(),
        OutputKind::Response,
        Some(responder),
        cfg.max_new_tokens,
        vocab,
        &params.config,
    )?;
    let prompt_tokens = prefix.len();
    let knowledge_tokens = prefix
        .types
        .iter()
        .filter(|&&t| t == TYPE_KNOWLEDGE)
        .count();
    let ids = decode(params, &prefix, &cfg.capped_to(vocab))?;
    generated_tokens += ids.len();
    let response = vocab.decode(&ids)?;

    Ok(TurnTrace {
        context: context.to_vec(),
        query,
        retrieval,
        fallback,
        response,
        prompt_tokens,
        knowledge_tokens,
        generated_tokens,
        elapsed_ms: started.elapsed().as_millis() as u64,
    })
}

/// The two alternating self-chat voices; the first one opens with the
/// topic.
pub const SELF_CHAT_SPEAKERS: [&str; 2] = ["speaker-a", "speaker-b"];

/// A finished self-chat: the seed topic and one trace per generated turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfChatLog {
    pub topic: String,
    pub turns: Vec<TurnTrace>,
}

impl SelfChatLog {
    /// The whole conversation: the topic opener plus one utterance per
    /// turn, speakers alternating.
    pub fn utterances(&self) -> Vec<Utterance> {
        let mut out = vec![Utterance::new(SELF_CHAT_SPEAKERS[0], &self.topic)];
        for (i, turn) in self.turns.iter().enumerate() {
            out.push(Utterance::new(
                SELF_CHAT_SPEAKERS[(i + 1) % 2],
                &turn.response,
            ));
        }
        out
    }
}

/// Let the model talk to itself about `topic` for `rounds` exchanges
/// (two utterances each), running the full respond pipeline every turn.
/// The serialization role flip happens through the responder: whoever
/// speaks next is role 0 for that turn.
pub fn self_chat<T: Scalar>(
    params: &Parameters<T>,
    vocab: &Vocabulary,
    topic: &str,
    rounds: usize,
    store: Option<&Index>,
    cfg: &DecodeConfig,
) -> Result<SelfChatLog, InferenceError> {
    if rounds == 0 {
        return Err(InferenceError::ZeroRounds);
    }
    let mut log = SelfChatLog {
        topic: topic.to_string(),
        turns: Vec::new(),
    };
    for turn in 0..2 * rounds {
        let context = log.utterances();
        let responder = SELF_CHAT_SPEAKERS[(turn + 1) % 2];
        let turn_cfg = DecodeConfig {
            seed: cfg.seed.wrapping_add(turn as u64),
            ..cfg.clone()
        };
        let trace = respond(params, vocab, &context, responder, store, &turn_cfg)?;
        log.turns.push(trace);
    }
    Ok(log)
}

/// Append-style trace log: one JSON object per line.
pub fn write_traces(path: &Path, traces: &[TurnTrace]) -> Result<(), InferenceError> {
    let mut file = File::create(path)?;
    for trace in traces {
        let line = serde_json::to_string(trace).map_err(|source| InferenceError::Json {
            line: 0,
            source,
        })?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<TurnTrace>, InferenceError> {
    let reader = BufReader::new(File::open(path)?);
    let mut traces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace = serde_json::from_str(&line)
            .map_err(|source| InferenceError::Json { line: i + 1, source })?;
        traces.push(trace);
    }
    Ok(traces)
}
