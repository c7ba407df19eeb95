use std::sync::OnceLock;

use super::*;
use crate::corpus::{knowledge_record_to_samples, serialize_sample, KnowledgeDialogueRecord};
use crate::model::{ModelConfig, Parameters};
use crate::tokenizer::PAD;
use crate::training::{train_phase, PhaseConfig, PhaseKind, StartPoint};

/// Small model over the full byte vocabulary, so real text serializes.
fn probe_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        embed_dim: 32,
        ffn_dim: 64,
        heads: 2,
        vocab_size: 261,
        max_len: 96,
        type_count: 4,
        role_count: 4,
        rope_base: 10000.0,
        dropout: 0.0,
    }
}

fn utterance(speaker: &str, text: &str) -> Utterance {
    Utterance::new(speaker, text)
}

/// Zeroed parameters that always put the largest logit on EOS: every block
/// passes zeros through, the final norm emits all-ones (gain 0, bias 1),
/// and only the EOS output column is nonzero.
fn eos_model(cfg: &ModelConfig) -> Parameters<f32> {
    let mut params = Parameters::<f32>::init(cfg, 1).unwrap();
    for (_, tensor) in params.iter_mut() {
        tensor.data_mut().fill(0.0);
    }
    params
        .get_mut("final_norm.bias")
        .unwrap()
        .data_mut()
        .fill(1.0);
    let vocab = cfg.vocab_size;
    let weights = params.get_mut("output_projection").unwrap().data_mut();
    for row in 0..cfg.embed_dim {
        weights[row * vocab + EOS as usize] = 1.0;
    }
    params
}

fn fact_record() -> KnowledgeDialogueRecord {
    KnowledgeDialogueRecord {
        context: vec![utterance("user", "tell me about the azure canyon")],
        human_query: "azure canyon".into(),
        retrieved_knowledge: "the azure canyon is 321 meters deep".into(),
        response: "it is 321 meters deep".into(),
    }
}

fn chitchat_record() -> KnowledgeDialogueRecord {
    KnowledgeDialogueRecord {
        context: vec![utterance("user", "hello there")],
        human_query: String::new(),
        retrieved_knowledge: String::new(),
        response: "hi".into(),
    }
}

/// Memorize the two records (four samples: query + response each) so the
/// pipeline can be probed with greedy decoding.
fn train_pipeline_model() -> (Parameters<f32>, Vocabulary, ModelConfig) {
    let cfg = probe_config();
    let vocab = Vocabulary::base();
    let mut samples = knowledge_record_to_samples(&fact_record()).unwrap();
    samples.extend(knowledge_record_to_samples(&chitchat_record()).unwrap());
    let data: Vec<_> = samples
        .iter()
        .map(|s| serialize_sample(s, &vocab, &cfg).unwrap())
        .collect();
    let phase = PhaseConfig {
        name: "probe".into(),
        kind: PhaseKind::Pretrain,
        datasets: Vec::new(),
        peak_lr: 1e-2,
        warmup_steps: 10,
        total_tokens: 256 * 400,
        batch_tokens: 256,
        weight_decay: 0.0,
        seed: 5,
    };
    let out = train_phase(
        Parameters::<f32>::init(&cfg, 3).unwrap(),
        None,
        &data,
        &phase,
        StartPoint::RandomInit,
        None,
        false,
    )
    .unwrap();
    let final_loss = out.curve.last().unwrap().loss;
    assert!(
        final_loss < 0.05,
        "fixture must memorize its four samples, final loss {final_loss}"
    );
    (out.params, vocab, cfg)
}

fn trained() -> &'static (Parameters<f32>, Vocabulary, ModelConfig) {
    static TRAINED: OnceLock<(Parameters<f32>, Vocabulary, ModelConfig)> = OnceLock::new();
    TRAINED.get_or_init(train_pipeline_model)
}

fn fact_store(vocab: &Vocabulary) -> Index {
    crate::knowledge_store::build_index(
        vec![
            Document {
                id: "canyon".into(),
                title: "azure canyon".into(),
                body: "the azure canyon is 321 meters deep".into(),
                timestamp: None,
            },
            Document {
                id: "caves".into(),
                title: "limestone caves".into(),
                body: "limestone caves stay cool and damp".into(),
                timestamp: None,
            },
        ],
        vocab,
    )
    .unwrap()
}

use crate::knowledge_store::{build_index, Document};

// ---- decoding ---------------------------------------------------------

#[test]
fn an_eos_hungry_model_stops_immediately() {
    let cfg = probe_config();
    let params = eos_model(&cfg);
    let vocab = Vocabulary::base();
    let prefix = crate::corpus::serialize_prefix(
        &[utterance("user", "anything")],
        None,
        OutputKind::Response,
        Some("bot"),
        8,
        &vocab,
        &cfg,
    )
    .unwrap();
    let ids = decode(&params, &prefix, &DecodeConfig::greedy(8)).unwrap();
    assert_eq!(ids, vec![EOS]);
}

#[test]
fn greedy_decoding_is_deterministic() {
    let cfg = probe_config();
    let params = Parameters::<f32>::init(&cfg, 7).unwrap();
    let vocab = Vocabulary::base();
    let prefix = crate::corpus::serialize_prefix(
        &[utterance("user", "say something")],
        None,
        OutputKind::Response,
        Some("bot"),
        12,
        &vocab,
        &cfg,
    )
    .unwrap();
    let a = decode(&params, &prefix, &DecodeConfig::greedy(12)).unwrap();
    let b = decode(&params, &prefix, &DecodeConfig::greedy(12)).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty() && a.len() <= 12);
}

#[test]
fn nucleus_mass_near_zero_reduces_to_greedy() {
    let cfg = probe_config();
    let params = Parameters::<f32>::init(&cfg, 7).unwrap();
    let vocab = Vocabulary::base();
    let prefix = crate::corpus::serialize_prefix(
        &[utterance("user", "compare the strategies")],
        None,
        OutputKind::Response,
        Some("bot"),
        10,
        &vocab,
        &cfg,
    )
    .unwrap();
    let greedy = decode(&params, &prefix, &DecodeConfig::greedy(10)).unwrap();
    for seed in [0, 1, 99] {
        let nucleus = DecodeConfig {
            strategy: DecodeStrategy::TopP,
            p: 1e-12,
            temperature: 1.0,
            max_new_tokens: 10,
            seed,
            vocab_limit: None,
        };
        assert_eq!(
            decode(&params, &prefix, &nucleus).unwrap(),
            greedy,
            "a vanishing nucleus must pick the argmax regardless of seed"
        );
    }
}

#[test]
fn nucleus_sampling_is_deterministic_under_a_fixed_seed() {
    let cfg = probe_config();
    let params = Parameters::<f32>::init(&cfg, 7).unwrap();
    let vocab = Vocabulary::base();
    let prefix = crate::corpus::serialize_prefix(
        &[utterance("user", "roll the dice")],
        None,
        OutputKind::Response,
        Some("bot"),
        10,
        &vocab,
        &cfg,
    )
    .unwrap();
    let sampled = DecodeConfig::chat(42);
    let sampled = DecodeConfig {
        max_new_tokens: 10,
        ..sampled
    };
    let a = decode(&params, &prefix, &sampled).unwrap();
    let b = decode(&params, &prefix, &sampled).unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_prefixes_are_refused() {
    let cfg = probe_config();
    let params = Parameters::<f32>::init(&cfg, 7).unwrap();
    let len = cfg.max_len;
    let prefix = crate::model::Sequence {
        tokens: vec![PAD; len],
        types: vec![0; len],
        roles: vec![0; len],
        positions: (0..len).collect(),
        prefix_len: len,
        loss_mask: vec![false; len],
    };
    match decode(&params, &prefix, &DecodeConfig::greedy(4)) {
        Err(InferenceError::PrefixTooLong { len: l, max_len }) => {
            assert_eq!((l, max_len), (len, cfg.max_len));
        }
        other => panic!("expected PrefixTooLong, got {other:?}"),
    }
}

#[test]
fn decode_config_bounds_are_enforced() {
    let bad = [
        DecodeConfig {
            p: 0.0,
            ..DecodeConfig::chat(0)
        },
        DecodeConfig {
            p: 1.5,
            ..DecodeConfig::chat(0)
        },
        DecodeConfig {
            temperature: 0.0,
            ..DecodeConfig::chat(0)
        },
        DecodeConfig {
            max_new_tokens: 0,
            ..DecodeConfig::chat(0)
        },
    ];
    for cfg in bad {
        assert!(
            matches!(cfg.validate(), Err(InferenceError::BadDecodeConfig(_))),
            "{cfg:?} should be rejected"
        );
    }
    DecodeConfig::greedy(1).validate().unwrap();
    DecodeConfig::chat(0).validate().unwrap();
}

// ---- trained pipeline probes ------------------------------------------

#[test]
fn the_trained_model_echoes_its_memorized_query() {
    let (params, vocab, _) = trained();
    let query = generate_query(
        params,
        vocab,
        &fact_record().context,
        "bot",
        &DecodeConfig::greedy(24),
    )
    .unwrap();
    assert_eq!(query.as_deref(), Some("azure canyon"));
}

#[test]
fn the_trained_model_declines_to_search_for_small_talk() {
    let (params, vocab, _) = trained();
    let query = generate_query(
        params,
        vocab,
        &chitchat_record().context,
        "bot",
        &DecodeConfig::greedy(24),
    )
    .unwrap();
    assert_eq!(query, None);
}

#[test]
fn the_pipeline_grounds_the_response_on_the_retrieved_fact() {
    let (params, vocab, _) = trained();
    let store = fact_store(vocab);
    let trace = respond(
        params,
        vocab,
        &fact_record().context,
        "bot",
        Some(&store),
        &DecodeConfig::greedy(24),
    )
    .unwrap();

    assert_eq!(trace.query.as_deref(), Some("azure canyon"));
    let hits = trace.retrieval.as_ref().expect("a search ran");
    assert_eq!(hits[0].doc_id, "canyon");
    assert_eq!(hits[0].snippet, "the azure canyon is 321 meters deep");
    assert!(!trace.fallback);
    assert_eq!(
        trace.knowledge_tokens,
        vocab.encode("the azure canyon is 321 meters deep").len(),
        "the snippet must sit in the response prompt as knowledge tokens"
    );
    assert_eq!(trace.response, "it is 321 meters deep");
}

#[test]
fn declined_searches_put_no_knowledge_in_the_prompt() {
    let (params, vocab, _) = trained();
    let store = fact_store(vocab);
    let trace = respond(
        params,
        vocab,
        &chitchat_record().context,
        "bot",
        Some(&store),
        &DecodeConfig::greedy(24),
    )
    .unwrap();
    assert_eq!(trace.query, None);
    assert!(trace.retrieval.is_none());
    assert_eq!(trace.knowledge_tokens, 0);
    assert_eq!(trace.response, "hi");
}

#[test]
fn an_empty_store_matches_a_missing_store_token_for_token() {
    let (params, vocab, _) = trained();
    let empty = build_index(Vec::new(), vocab).unwrap();
    let cfg = DecodeConfig::greedy(24);
    let with_empty = respond(
        params,
        vocab,
        &fact_record().context,
        "bot",
        Some(&empty),
        &cfg,
    )
    .unwrap();
    let without = respond(params, vocab, &fact_record().context, "bot", None, &cfg).unwrap();

    assert_eq!(with_empty.response, without.response);
    assert_eq!(with_empty.prompt_tokens, without.prompt_tokens);
    assert_eq!(with_empty.knowledge_tokens, 0);
    assert_eq!(without.knowledge_tokens, 0);
    assert_eq!(with_empty.retrieval.as_deref(), Some(&[] as &[SearchHit]));
    assert!(without.retrieval.is_none());
}

// ---- pipeline misc -----------------------------------------------------

#[test]
fn context_is_required() {
    let cfg = probe_config();
    let params = eos_model(&cfg);
    let vocab = Vocabulary::base();
    assert!(matches!(
        generate_query(&params, &vocab, &[], "bot", &DecodeConfig::greedy(4)),
        Err(InferenceError::EmptyContext)
    ));
    assert!(matches!(
        respond(&params, &vocab, &[], "bot", None, &DecodeConfig::greedy(4)),
        Err(InferenceError::EmptyContext)
    ));
}

#[test]
fn self_chat_needs_at_least_one_round() {
    let cfg = probe_config();
    let params = eos_model(&cfg);
    let vocab = Vocabulary::base();
    assert!(matches!(
        self_chat(&params, &vocab, "tea", 0, None, &DecodeConfig::greedy(4)),
        Err(InferenceError::ZeroRounds)
    ));
}

#[test]
fn self_chat_yields_two_utterances_per_round_plus_the_topic() {
    let cfg = probe_config();
    let params = eos_model(&cfg);
    let vocab = Vocabulary::base();
    for rounds in [1, 5] {
        let log = self_chat(
            &params,
            &vocab,
            "tea ceremonies",
            rounds,
            None,
            &DecodeConfig::greedy(4),
        )
        .unwrap();
        assert_eq!(log.turns.len(), 2 * rounds);
        let utterances = log.utterances();
        assert_eq!(utterances.len(), 2 * rounds + 1);
        assert_eq!(utterances[0].text, "tea ceremonies");
        for (i, pair) in utterances.windows(2).enumerate() {
            assert_ne!(
                pair[0].speaker, pair[1].speaker,
                "speakers must alternate at utterance {i}"
            );
        }
        for (i, turn) in log.turns.iter().enumerate() {
            assert_eq!(turn.context.len(), i + 1, "turn {i} sees all prior turns");
        }
    }
}

#[test]
fn traces_round_trip_through_json_lines() {
    let cfg = probe_config();
    let params = eos_model(&cfg);
    let vocab = Vocabulary::base();
    let log = self_chat(
        &params,
        &vocab,
        "portable chess sets",
        1,
        None,
        &DecodeConfig::greedy(4),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traces.jsonl");
    write_traces(&path, &log.turns).unwrap();
    let back = read_traces(&path).unwrap();
    assert_eq!(back, log.turns);

    std::fs::write(&path, "{\"bad\": true}\n").unwrap();
    assert!(matches!(
        read_traces(&path),
        Err(InferenceError::Json { line: 1, .. })
    ));
}

#[test]
fn selection_never_leaves_the_vocab_limit() {
    let cfg = probe_config();
    let params = Parameters::<f32>::init(&cfg, 13).unwrap();
    let vocab = Vocabulary::base();
    let prefix = crate::corpus::serialize_prefix(
        &[utterance("user", "say anything")],
        None,
        OutputKind::Response,
        Some("bot"),
        24,
        &vocab,
        &cfg,
    )
    .unwrap();
    for seed in 0..8 {
        let capped = DecodeConfig {
            max_new_tokens: 24,
            vocab_limit: Some(64),
            ..DecodeConfig::chat(seed)
        };
        for id in decode(&params, &prefix, &capped).unwrap() {
            assert!(id < 64, "token {id} escapes the 64-token limit");
        }
    }

    // Bounds: the limit must keep EOS reachable.
    let starved = DecodeConfig {
        vocab_limit: Some(EOS as usize),
        ..DecodeConfig::chat(0)
    };
    assert!(matches!(
        starved.validate(),
        Err(InferenceError::BadDecodeConfig(_))
    ));
}

/// A model may reserve more logit columns than the vocabulary has entries;
/// sampling must never pick an id the vocabulary cannot turn back into
/// text (regression: an untrained 320-column model over a 261-entry
/// vocabulary emitted id 310 and the pipeline failed to decode it).
#[test]
fn pipeline_output_always_decodes_despite_logit_headroom() {
    let mut cfg = probe_config();
    cfg.vocab_size = 320;
    let params = Parameters::<f32>::init(&cfg, 99).unwrap();
    let vocab = Vocabulary::base();
    assert!(vocab.size() < cfg.vocab_size);

    let context = [utterance("user", "what do you know about tides?")];
    for seed in 0..6 {
        let decode_cfg = DecodeConfig {
            max_new_tokens: 16,
            ..DecodeConfig::chat(seed)
        };
        let trace = respond(&params, &vocab, &context, "bot", None, &decode_cfg)
            .expect("every sampled id must decode");
        let _ = trace.response;
    }
}
