//! Expansion of dialogues and knowledge records into training samples, and
//! serialization of samples into model sequences.

use crate::model::{
    ModelConfig, Sequence, TYPE_CONTEXT, TYPE_KNOWLEDGE, TYPE_QUERY, TYPE_RESPONSE,
};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, NO_QUERY, SEP};

use super::{
    CorpusError, Dialogue, KnowledgeDialogueRecord, OutputKind, TrainingSample, Utterance,
};

/// Expand a dialogue into one response sample per non-initial turn, each
/// conditioned on the preceding `max_context` utterances. Dialogues with
/// fewer than two utterances yield nothing.
pub fn dialogue_to_samples(d: &Dialogue, max_context: usize) -> Vec<TrainingSample> {
    let mut samples = Vec::new();
    for t in 1..d.utterances.len() {
        let start = t.saturating_sub(max_context);
        samples.push(TrainingSample {
            context: d.utterances[start..t].to_vec(),
            query: None,
            knowledge: None,
            output_kind: OutputKind::Response,
            target: d.utterances[t].text.clone(),
            responder: Some(d.utterances[t].speaker.clone()),
        });
    }
    samples
}

/// Expand a knowledge record into its query sample and response sample.
///
/// A record with a human query yields (context → query) and
/// (context + knowledge → response). A record without one yields a query
/// sample whose empty target serializes to the no-search sentinel, and an
/// ungrounded response sample.
pub fn knowledge_record_to_samples(
    r: &KnowledgeDialogueRecord,
) -> Result<Vec<TrainingSample>, CorpusError> {
    r.validate()?;
    let has_query = !r.human_query.trim().is_empty();
    let query_sample = TrainingSample {
        context: r.context.clone(),
        query: None,
        knowledge: None,
        output_kind: OutputKind::Query,
        target: if has_query {
            r.human_query.clone()
        } else {
            String::new()
        },
        responder: None,
    };
    let response_sample = TrainingSample {
        context: r.context.clone(),
        query: has_query.then(|| r.human_query.clone()),
        knowledge: has_query.then(|| r.retrieved_knowledge.clone()),
        output_kind: OutputKind::Response,
        target: r.response.clone(),
        responder: None,
    };
    Ok(vec![query_sample, response_sample])
}

/// Serialize a sample into a model sequence.
///
/// Layout: each context utterance as SEP + its tokens (type 0, role per
/// speaker), then knowledge tokens (type 2, role 0) if any, then BOS, the
/// target tokens, and EOS — the output side typed 1 (query) or 3
/// (response) and role 0. `prefix_len` is the BOS index; the loss mask
/// covers exactly the positions predicting the target tokens and EOS.
///
/// Over-long samples drop oldest context utterances first (always keeping
/// at least one), then trim knowledge from its tail; if the sample still
/// does not fit, an error reports the segment lengths.
pub fn serialize_sample(
    s: &TrainingSample,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<Sequence, CorpusError> {
    s.validate()?;
    cfg.validate()?;

    let context = encode_context(&s.context, s.responder.as_deref(), vocab, cfg);
    let knowledge: Vec<TokenId> = match &s.knowledge {
        Some(k) if !k.trim().is_empty() => vocab.encode(k),
        _ => Vec::new(),
    };
    let (target, target_type): (Vec<TokenId>, u32) = match s.output_kind {
        OutputKind::Query if s.target.trim().is_empty() => (vec![NO_QUERY], TYPE_QUERY),
        OutputKind::Query => (vocab.encode(&s.target), TYPE_QUERY),
        OutputKind::Response => (vocab.encode(&s.target), TYPE_RESPONSE),
    };

    // BOS + target + EOS.
    let mut seq = assemble_prefix(
        context,
        knowledge,
        target.len() + 2,
        target_type,
        target.len(),
        cfg,
    )?;
    seq.tokens.extend(&target);
    seq.tokens.push(EOS);
    while seq.types.len() < seq.tokens.len() {
        seq.types.push(target_type);
        seq.roles.push(0);
    }

    let len = seq.tokens.len();
    seq.positions = (0..len).collect();
    seq.loss_mask = vec![false; len];
    // Position i predicts token i+1: the BOS slot predicts the first
    // target token and the last target slot predicts EOS.
    for m in seq.loss_mask.iter_mut().take(len - 1).skip(seq.prefix_len) {
        *m = true;
    }

    seq.validate(cfg)?;
    Ok(seq)
}

/// Serialize just the input side for generation: context, optional
/// knowledge, and a trailing BOS typed for the requested output, leaving
/// room for `reserve` generated tokens under the model's length limit.
/// The truncation policy is the same as for full samples.
pub fn serialize_prefix(
    context: &[Utterance],
    knowledge: Option<&str>,
    output_kind: OutputKind,
    responder: Option<&str>,
    reserve: usize,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<Sequence, CorpusError> {
    cfg.validate()?;
    let knowledge_tokens: Vec<TokenId> = match knowledge {
        Some(k) if !k.trim().is_empty() => vocab.encode(k),
        _ => Vec::new(),
    };
    if matches!(output_kind, OutputKind::Query) && !knowledge_tokens.is_empty() {
        return Err(CorpusError::InvalidRecord {
            detail: "a query prefix cannot carry knowledge".into(),
        });
    }
    let target_type = match output_kind {
        OutputKind::Query => TYPE_QUERY,
        OutputKind::Response => TYPE_RESPONSE,
    };
    let context_tokens = encode_context(context, responder, vocab, cfg);
    let seq = assemble_prefix(
        context_tokens,
        knowledge_tokens,
        reserve.max(1) + 1,
        target_type,
        0,
        cfg,
    )?;
    seq.validate(cfg)?;
    Ok(seq)
}

fn encode_context(
    context: &[Utterance],
    responder: Option<&str>,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Vec<(u32, Vec<TokenId>)> {
    assign_roles(context, responder, cfg.role_count)
        .into_iter()
        .map(|(role, utterance)| {
            let mut toks = vec![SEP];
            toks.extend(vocab.encode(&utterance.text));
            (role, toks)
        })
        .collect()
}

/// Lay out context ⊕ knowledge ⊕ BOS while holding `output_len` positions
/// (BOS included) free for the output region, dropping oldest context
/// utterances and then trailing knowledge as needed. The returned sequence
/// ends at BOS with an all-false loss mask; `target_len` only feeds the
/// too-long error report.
fn assemble_prefix(
    context: Vec<(u32, Vec<TokenId>)>,
    mut knowledge: Vec<TokenId>,
    output_len: usize,
    target_type: u32,
    target_len: usize,
    cfg: &ModelConfig,
) -> Result<Sequence, CorpusError> {
    let context_len = |ctx: &[(u32, Vec<TokenId>)]| ctx.iter().map(|(_, t)| t.len()).sum::<usize>();
    let full_context = context_len(&context);
    let full_knowledge = knowledge.len();

    let mut dropped = 0;
    while context_len(&context[dropped..]) + knowledge.len() + output_len > cfg.max_len
        && context.len() - dropped > 1
    {
        dropped += 1;
    }
    let context = &context[dropped..];
    let over = (context_len(context) + knowledge.len() + output_len).saturating_sub(cfg.max_len);
    if over > 0 {
        knowledge.truncate(knowledge.len().saturating_sub(over));
    }
    if context_len(context) + knowledge.len() + output_len > cfg.max_len {
        return Err(CorpusError::SampleTooLong {
            context: full_context,
            knowledge: full_knowledge,
            target: target_len,
            max_len: cfg.max_len,
        });
    }

    let total = context_len(context) + knowledge.len() + 1;
    let mut tokens = Vec::with_capacity(total);
    let mut types = Vec::with_capacity(total);
    let mut roles = Vec::with_capacity(total);
    for (role, toks) in context {
        for &t in toks {
            tokens.push(t);
            types.push(TYPE_CONTEXT);
            roles.push(*role);
        }
    }
    for &t in &knowledge {
        tokens.push(t);
        types.push(TYPE_KNOWLEDGE);
        roles.push(0);
    }
    let prefix_len = tokens.len();
    tokens.push(BOS);
    types.push(target_type);
    roles.push(0);
    let len = tokens.len();
    Ok(Sequence {
        tokens,
        types,
        roles,
        positions: (0..len).collect(),
        prefix_len,
        loss_mask: vec![false; len],
    })
}

/// Map context speakers to role ids: the responder (when present in the
/// context) is role 0, other speakers take 1, 2, ... ordered newest-first
/// by their latest turn. Speakers past the role table collapse to the
/// last id with a warning.
fn assign_roles<'a>(
    context: &'a [Utterance],
    responder: Option<&str>,
    role_count: usize,
) -> Vec<(u32, &'a Utterance)> {
    let mut order: Vec<&str> = Vec::new();
    for u in context.iter().rev() {
        if Some(u.speaker.as_str()) != responder && !order.contains(&u.speaker.as_str()) {
            order.push(&u.speaker);
        }
    }
    let last_role = (role_count - 1) as u32;
    let mut overflowed = false;
    context
        .iter()
        .map(|u| {
            let role = if Some(u.speaker.as_str()) == responder {
                0
            } else {
                let rank = order
                    .iter()
                    .position(|&s| s == u.speaker)
                    .expect("every non-responder speaker was ranked")
                    as u32
                    + 1;
                if rank > last_role {
                    if !overflowed {
                        log::warn!(
                            "more than {role_count} speakers in context; collapsing extras to role {last_role}"
                        );
                        overflowed = true;
                    }
                    last_role
                } else {
                    rank
                }
            };
            (role, u)
        })
        .collect()
}
