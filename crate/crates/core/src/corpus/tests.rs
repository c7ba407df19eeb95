use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ModelConfig, TYPE_CONTEXT, TYPE_QUERY, TYPE_RESPONSE};
use crate::tokenizer::{Vocabulary, BOS, EOS, NO_QUERY, SEP};

use super::*;

fn comment(id: &str, parent: Option<&str>, speaker: &str, text: &str) -> Comment {
    Comment {
        id: id.into(),
        parent: parent.map(Into::into),
        speaker: speaker.into(),
        text: text.into(),
    }
}

fn thread(comments: Vec<Comment>) -> CommentThread {
    CommentThread {
        id: "t".into(),
        comments,
    }
}

#[test]
fn root_with_two_leaf_replies_gives_two_dialogues() {
    let t = thread(vec![
        comment("r", None, "alice", "post"),
        comment("a", Some("r"), "bob", "first reply"),
        comment("b", Some("r"), "carol", "second reply"),
    ]);
    let ds = comments_to_dialogues(&t).unwrap();
    assert_eq!(ds.len(), 2);
    for d in &ds {
        assert_eq!(d.utterances.len(), 2);
        assert_eq!(d.utterances[0].text, "post");
        assert_eq!(d.kind, DialogueKind::MultiParty);
        d.validate().unwrap();
    }
    assert_eq!(ds[0].utterances[1].speaker, "bob");
    assert_eq!(ds[1].utterances[1].speaker, "carol");
}

#[test]
fn root_without_replies_gives_no_dialogues() {
    let t = thread(vec![comment("r", None, "alice", "post")]);
    assert!(comments_to_dialogues(&t).unwrap().is_empty());
}

#[test]
fn chain_of_depth_four_gives_one_dialogue() {
    let t = thread(vec![
        comment("0", None, "a", "one"),
        comment("1", Some("0"), "b", "two"),
        comment("2", Some("1"), "a", "three"),
        comment("3", Some("2"), "c", "four"),
    ]);
    let ds = comments_to_dialogues(&t).unwrap();
    assert_eq!(ds.len(), 1);
    let texts: Vec<&str> = ds[0].utterances.iter().map(|u| u.text.as_str()).collect();
    assert_eq!(texts, ["one", "two", "three", "four"]);
}

#[test]
fn self_reply_chain_is_tagged_single_party() {
    let t = thread(vec![
        comment("0", None, "a", "talking"),
        comment("1", Some("0"), "a", "to myself"),
    ]);
    let ds = comments_to_dialogues(&t).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds[0].kind, DialogueKind::SingleParty);
    ds[0].validate().unwrap();
}

/// Oracle: dialogue count equals the number of leaves at depth ≥ 2,
/// counted by an independent brute-force walk over random trees.
#[test]
fn dialogue_count_matches_leaf_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for _ in 0..50 {
        let n = rng.random_range(1..40usize);
        let mut comments = vec![comment("0", None, "s0", "root")];
        for i in 1..n {
            let parent = rng.random_range(0..i);
            comments.push(comment(
                &i.to_string(),
                Some(&parent.to_string()),
                &format!("s{}", rng.random_range(0..5)),
                "text",
            ));
        }

        let mut depth = vec![0usize; n];
        let mut has_child = vec![false; n];
        for (i, c) in comments.iter().enumerate().skip(1) {
            let p: usize = c.parent.as_ref().unwrap().parse().unwrap();
            has_child[p] = true;
            // Parents precede children by construction, so depths resolve
            // in one pass.
            depth[i] = 0;
            let mut cur = p;
            depth[i] += 1;
            while let Some(pp) = comments[cur].parent.as_ref() {
                cur = pp.parse().unwrap();
                depth[i] += 1;
            }
        }
        let expected = (0..n)
            .filter(|&i| !has_child[i] && depth[i] + 1 >= 2)
            .count();

        let ds = comments_to_dialogues(&thread(comments)).unwrap();
        assert_eq!(ds.len(), expected);
    }
}

#[test]
fn cyclic_parent_links_are_rejected() {
    let t = thread(vec![
        comment("r", None, "a", "root"),
        comment("x", Some("y"), "b", "chicken"),
        comment("y", Some("x"), "c", "egg"),
    ]);
    assert!(matches!(
        comments_to_dialogues(&t),
        Err(CorpusError::CyclicParents { .. })
    ));
}

#[test]
fn malformed_threads_are_rejected() {
    let no_root = thread(vec![comment("a", Some("b"), "x", "."), comment("b", Some("a"), "y", ".")]);
    assert!(matches!(
        comments_to_dialogues(&no_root),
        Err(CorpusError::NoRoot { .. })
    ));

    let two_roots = thread(vec![comment("a", None, "x", "."), comment("b", None, "y", ".")]);
    assert!(matches!(
        comments_to_dialogues(&two_roots),
        Err(CorpusError::MultipleRoots { .. })
    ));

    let orphan = thread(vec![comment("a", None, "x", "."), comment("b", Some("zz"), "y", ".")]);
    assert!(matches!(
        comments_to_dialogues(&orphan),
        Err(CorpusError::UnknownParent { .. })
    ));

    let dup = thread(vec![comment("a", None, "x", "."), comment("a", Some("a"), "y", ".")]);
    assert!(matches!(
        comments_to_dialogues(&dup),
        Err(CorpusError::DuplicateComment { .. })
    ));
}

#[test]
fn three_paragraphs_become_three_utterances() {
    let d = text_to_dialogue("doc", "First paragraph.\nSecond one.\nThird.", 256).unwrap();
    assert_eq!(d.utterances.len(), 3);
    assert_eq!(d.kind, DialogueKind::SingleParty);
    assert_eq!(distinct_speakers(&d.utterances), 1);
    d.validate().unwrap();
}

#[test]
fn single_short_sentence_is_one_utterance() {
    let d = text_to_dialogue("doc", "Just one thought.", 256).unwrap();
    assert_eq!(d.utterances.len(), 1);
}

#[test]
fn long_paragraph_splits_under_word_cap() {
    let mut text = String::new();
    for i in 0..100 {
        // Seven words per sentence, 700 words total.
        text.push_str(&format!("sentence {i} has exactly seven words inside."));
        text.push(' ');
    }
    let d = text_to_dialogue("doc", &text, 256).unwrap();
    assert!(d.utterances.len() >= 3, "got {}", d.utterances.len());
    let mut words = Vec::new();
    for u in &d.utterances {
        let count = u.text.split_whitespace().count();
        assert!(count <= 256, "utterance has {count} words");
        words.extend(u.text.split_whitespace().map(str::to_string));
    }
    let original: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    assert_eq!(words, original, "splitting must not lose or reorder words");
}

#[test]
fn oversized_single_sentence_is_hard_split() {
    let text = (0..30).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
    let d = text_to_dialogue("doc", &text, 8).unwrap();
    assert!(d.utterances.len() >= 4);
    for u in &d.utterances {
        assert!(u.text.split_whitespace().count() <= 8);
    }
}

#[test]
fn whitespace_only_document_is_rejected() {
    assert!(matches!(
        text_to_dialogue("doc", " \n\t \n", 256),
        Err(CorpusError::EmptyDocument { .. })
    ));
}

fn stub(id: usize, kind: DialogueKind) -> Dialogue {
    let speakers = match kind {
        DialogueKind::SingleParty => vec!["solo", "solo"],
        DialogueKind::MultiParty => vec!["a", "b"],
    };
    Dialogue {
        id: format!("{kind:?}-{id}"),
        kind,
        utterances: speakers
            .into_iter()
            .map(|s| Utterance::new(s, format!("line {id}")))
            .collect(),
    }
}

#[test]
fn even_mix_draws_half_from_each_source() {
    let single: Vec<_> = (0..10_000).map(|i| stub(i, DialogueKind::SingleParty)).collect();
    let multi: Vec<_> = (0..10_000).map(|i| stub(i, DialogueKind::MultiParty)).collect();
    let mixed = mix_corpora(single, multi, (1.0, 1.0), 2024).unwrap();
    let singles_in_first_10k = mixed[..10_000]
        .iter()
        .filter(|d| d.kind == DialogueKind::SingleParty)
        .count();
    assert!(
        (4850..=5150).contains(&singles_in_first_10k),
        "got {singles_in_first_10k} single-party draws in the first 10000"
    );
}

#[test]
fn zero_weight_excludes_a_source() {
    let single: Vec<_> = (0..5).map(|i| stub(i, DialogueKind::SingleParty)).collect();
    let multi: Vec<_> = (0..5).map(|i| stub(i, DialogueKind::MultiParty)).collect();
    let mixed = mix_corpora(single, multi, (1.0, 0.0), 7).unwrap();
    assert_eq!(mixed.len(), 5);
    assert!(mixed.iter().all(|d| d.kind == DialogueKind::SingleParty));
}

#[test]
fn mixing_is_deterministic_per_seed() {
    let make = || {
        (
            (0..50).map(|i| stub(i, DialogueKind::SingleParty)).collect::<Vec<_>>(),
            (0..50).map(|i| stub(i, DialogueKind::MultiParty)).collect::<Vec<_>>(),
        )
    };
    let (s1, m1) = make();
    let (s2, m2) = make();
    assert_eq!(
        mix_corpora(s1, m1, (2.0, 1.0), 99).unwrap(),
        mix_corpora(s2, m2, (2.0, 1.0), 99).unwrap()
    );
}

#[test]
fn exhausted_stream_falls_through_to_the_other() {
    let single: Vec<_> = (0..3).map(|i| stub(i, DialogueKind::SingleParty)).collect();
    let multi: Vec<_> = (0..40).map(|i| stub(i, DialogueKind::MultiParty)).collect();
    let mixed = mix_corpora(single.clone(), multi.clone(), (1.0, 1.0), 5).unwrap();
    assert_eq!(mixed.len(), 43, "every item from both streams is emitted");
    let singles: Vec<_> = mixed.iter().filter(|d| d.kind == DialogueKind::SingleParty).collect();
    assert_eq!(singles.len(), 3);
}

#[test]
fn invalid_mix_ratios_are_rejected() {
    for ratio in [(0.0, 0.0), (-1.0, 2.0), (f64::NAN, 1.0), (1.0, f64::INFINITY)] {
        assert!(matches!(
            mix_corpora(Vec::new(), Vec::new(), ratio, 0),
            Err(CorpusError::InvalidRatio { .. })
        ));
    }
}

fn chat(n: usize) -> Dialogue {
    Dialogue {
        id: "chat".into(),
        kind: DialogueKind::MultiParty,
        utterances: (0..n)
            .map(|i| Utterance::new(format!("s{}", i % 2), format!("turn {i}")))
            .collect(),
    }
}

#[test]
fn three_utterances_give_two_samples() {
    let samples = dialogue_to_samples(&chat(3), 8);
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0].target, "turn 1");
    assert_eq!(samples[0].context.len(), 1);
    assert_eq!(samples[1].target, "turn 2");
    assert_eq!(samples[1].context.len(), 2);
    for s in &samples {
        assert!(s.query.is_none() && s.knowledge.is_none());
        assert_eq!(s.output_kind, OutputKind::Response);
        s.validate().unwrap();
    }
}

#[test]
fn context_window_of_one_keeps_one_utterance() {
    for s in dialogue_to_samples(&chat(5), 1) {
        assert_eq!(s.context.len(), 1);
    }
}

#[test]
fn context_window_slices_the_most_recent_turns() {
    let samples = dialogue_to_samples(&chat(5), 3);
    // Sample for t = 4 sees utterances 1..=3.
    let s = &samples[3];
    let texts: Vec<&str> = s.context.iter().map(|u| u.text.as_str()).collect();
    assert_eq!(texts, ["turn 1", "turn 2", "turn 3"]);
    assert_eq!(s.target, "turn 4");
}

#[test]
fn short_dialogues_expand_to_nothing() {
    assert!(dialogue_to_samples(&chat(1), 4).is_empty());
}

fn record(query: &str, knowledge: &str) -> KnowledgeDialogueRecord {
    KnowledgeDialogueRecord {
        context: vec![
            Utterance::new("user", "tell me about the deep canyon"),
            Utterance::new("bot", "which one do you mean?"),
            Utterance::new("user", "the azure one"),
        ],
        human_query: query.into(),
        retrieved_knowledge: knowledge.into(),
        response: "it is striking".into(),
    }
}

#[test]
fn knowledgeful_record_gives_query_and_response_samples() {
    let samples = knowledge_record_to_samples(&record("azure canyon", "321 meters deep")).unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0].output_kind, OutputKind::Query);
    assert_eq!(samples[0].target, "azure canyon");
    assert!(samples[0].knowledge.is_none());
    assert_eq!(samples[1].output_kind, OutputKind::Response);
    assert_eq!(samples[1].knowledge.as_deref(), Some("321 meters deep"));
    assert_eq!(samples[1].query.as_deref(), Some("azure canyon"));
    assert_eq!(samples[1].target, "it is striking");
}

#[test]
fn queryless_record_trains_the_no_search_convention() {
    let samples = knowledge_record_to_samples(&record("", "")).unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0].output_kind, OutputKind::Query);
    assert_eq!(samples[0].target, "");
    assert!(samples[1].knowledge.is_none());

    let vocab = Vocabulary::base();
    let cfg = test_config(128);
    let seq = serialize_sample(&samples[0], &vocab, &cfg).unwrap();
    assert_eq!(&seq.tokens[seq.prefix_len..], &[BOS, NO_QUERY, EOS]);
    assert_eq!(seq.types[seq.prefix_len + 1], TYPE_QUERY);
}

#[test]
fn inconsistent_records_are_rejected() {
    assert!(matches!(
        knowledge_record_to_samples(&record("", "knowledge but no query")),
        Err(CorpusError::InvalidRecord { .. })
    ));
    assert!(matches!(
        knowledge_record_to_samples(&record("query but no knowledge", "")),
        Err(CorpusError::InvalidRecord { .. })
    ));
}

fn test_config(max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 261,
        max_len,
        ..ModelConfig::tiny()
    }
}

#[test]
fn serialized_layout_matches_the_wire_format() {
    let vocab = Vocabulary::base();
    let cfg = test_config(128);
    let sample = TrainingSample {
        context: vec![Utterance::new("a", "hi"), Utterance::new("b", "yo")],
        query: None,
        knowledge: Some("kk".into()),
        output_kind: OutputKind::Response,
        target: "ok".into(),
        responder: Some("a".into()),
    };
    let seq = serialize_sample(&sample, &vocab, &cfg).unwrap();

    let hi = vocab.encode("hi");
    let yo = vocab.encode("yo");
    let kk = vocab.encode("kk");
    let ok = vocab.encode("ok");
    let mut expected = vec![SEP];
    expected.extend(&hi);
    expected.push(SEP);
    expected.extend(&yo);
    expected.extend(&kk);
    expected.push(BOS);
    expected.extend(&ok);
    expected.push(EOS);
    assert_eq!(seq.tokens, expected);

    let ctx_len = 2 + hi.len() + yo.len();
    assert_eq!(seq.prefix_len, ctx_len + kk.len());
    for i in 0..ctx_len {
        assert_eq!(seq.types[i], TYPE_CONTEXT);
    }
    for i in ctx_len..seq.prefix_len {
        assert_eq!(seq.types[i], crate::model::TYPE_KNOWLEDGE);
    }
    for i in seq.prefix_len..seq.len() {
        assert_eq!(seq.types[i], TYPE_RESPONSE);
    }

    // Responder "a" keeps role 0 in context; "b" is the most recent other.
    assert_eq!(&seq.roles[..ctx_len], &[0, 0, 0, 1, 1, 1]);
    assert!(seq.roles[ctx_len..].iter().all(|&r| r == 0));

    assert_eq!(seq.positions, (0..seq.len()).collect::<Vec<_>>());
    seq.validate(&cfg).unwrap();
}

#[test]
fn plain_dialogue_samples_use_only_context_and_response_types() {
    let vocab = Vocabulary::base();
    let cfg = test_config(128);
    for sample in dialogue_to_samples(&chat(4), 3) {
        let seq = serialize_sample(&sample, &vocab, &cfg).unwrap();
        assert!(seq
            .types
            .iter()
            .all(|&t| t == TYPE_CONTEXT || t == TYPE_RESPONSE));
    }
}

#[test]
fn loss_mask_covers_target_and_eos_predictions() {
    let vocab = Vocabulary::base();
    let cfg = test_config(128);
    let sample = TrainingSample {
        context: vec![Utterance::new("a", "question")],
        query: None,
        knowledge: None,
        output_kind: OutputKind::Response,
        target: "answer".into(),
        responder: None,
    };
    let seq = serialize_sample(&sample, &vocab, &cfg).unwrap();
    let target_len = vocab.encode("answer").len();
    let masked = seq.loss_mask.iter().filter(|&&m| m).count();
    assert_eq!(masked, target_len + 1);
    assert!(!seq.loss_mask[..seq.prefix_len].iter().any(|&m| m));
    assert!(seq.loss_mask[seq.prefix_len..seq.len() - 1].iter().all(|&m| m));
    assert!(!seq.loss_mask[seq.len() - 1]);
}

#[test]
fn response_sample_prefixes_never_contain_query_tokens() {
    let vocab = Vocabulary::base();
    let cfg = test_config(128);
    let samples = knowledge_record_to_samples(&record("azure canyon", "321 meters deep")).unwrap();
    for s in &samples {
        let seq = serialize_sample(s, &vocab, &cfg).unwrap();
        assert!(
            !seq.types[..seq.prefix_len].iter().any(|&t| t == TYPE_QUERY),
            "prefix must never carry query-typed tokens"
        );
    }
}

#[test]
fn speakers_are_numbered_by_recency() {
    let vocab = Vocabulary::base();
    let cfg = test_config(128);
    let sample = TrainingSample {
        context: vec![
            Utterance::new("old", "x"),
            Utterance::new("mid", "y"),
            Utterance::new("new", "z"),
        ],
        query: None,
        knowledge: None,
        output_kind: OutputKind::Response,
        target: "t".into(),
        responder: None,
    };
    let seq = serialize_sample(&sample, &vocab, &cfg).unwrap();
    // Each utterance is SEP + one byte token. Most recent foreign speaker
    // gets role 1, then outward.
    assert_eq!(&seq.roles[..6], &[3, 3, 2, 2, 1, 1]);
}

#[test]
fn speakers_beyond_the_role_table_collapse_to_the_last_role() {
    let vocab = Vocabulary::base();
    let cfg = test_config(128); // role_count = 4
    let sample = TrainingSample {
        context: (0..6)
            .map(|i| Utterance::new(format!("s{i}"), "w"))
            .collect(),
        query: None,
        knowledge: None,
        output_kind: OutputKind::Response,
        target: "t".into(),
        responder: None,
    };
    let seq = serialize_sample(&sample, &vocab, &cfg).unwrap();
    let roles: Vec<u32> = seq.roles[..12].iter().copied().collect();
    // Newest-first ranks: s5 -> 1, s4 -> 2, s3 -> 3, older -> 3 (collapsed).
    assert_eq!(roles, [3, 3, 3, 3, 3, 3, 3, 3, 2, 2, 1, 1]);
    assert!(seq.roles.iter().all(|&r| (r as usize) < cfg.role_count));
}

#[test]
fn truncation_drops_oldest_context_first() {
    let vocab = Vocabulary::base();
    let cfg = test_config(32);
    let sample = TrainingSample {
        context: vec![
            Utterance::new("a", "oldest words here"),
            Utterance::new("b", "middle words"),
            Utterance::new("a", "newest"),
        ],
        query: None,
        knowledge: Some("ground".into()),
        output_kind: OutputKind::Response,
        target: "reply".into(),
        responder: None,
    };
    // Full length: 3 SEP + 17+12+6 bytes + 6 knowledge + 5+2 output = 51.
    let seq = serialize_sample(&sample, &vocab, &cfg).unwrap();
    assert!(seq.len() <= 32);
    let decoded = crate::tokenizer::Vocabulary::base()
        .decode_bytes(&seq.tokens[1..1 + 6])
        .unwrap();
    assert_eq!(decoded, b"newest", "only the newest utterance survives");
    // Knowledge and target are intact.
    let know = &seq.tokens[7..seq.prefix_len];
    assert_eq!(vocab.decode_bytes(know).unwrap(), b"ground");
    let tgt = &seq.tokens[seq.prefix_len + 1..seq.len() - 1];
    assert_eq!(vocab.decode_bytes(tgt).unwrap(), b"reply");
}

#[test]
fn knowledge_is_tail_trimmed_only_when_context_is_minimal() {
    let vocab = Vocabulary::base();
    let cfg = test_config(24);
    let sample = TrainingSample {
        context: vec![Utterance::new("a", "short")],
        query: None,
        knowledge: Some("a very long grounding passage".into()),
        output_kind: OutputKind::Response,
        target: "ok".into(),
        responder: None,
    };
    // 1 + 5 context, 29 knowledge, 4 output: knowledge must shrink to 14.
    let seq = serialize_sample(&sample, &vocab, &cfg).unwrap();
    assert_eq!(seq.len(), 24);
    let ctx = vocab.decode_bytes(&seq.tokens[1..6]).unwrap();
    assert_eq!(ctx, b"short", "the single context utterance survives whole");
    let know = vocab.decode_bytes(&seq.tokens[6..seq.prefix_len]).unwrap();
    assert_eq!(know, b"a very long gr", "knowledge loses its tail only");
    let tgt = vocab
        .decode_bytes(&seq.tokens[seq.prefix_len + 1..seq.len() - 1])
        .unwrap();
    assert_eq!(tgt, b"ok");
}

#[test]
fn unfittable_samples_error_with_lengths() {
    let vocab = Vocabulary::base();
    let cfg = test_config(16);
    let sample = TrainingSample {
        context: vec![Utterance::new("a", "a single but rather long utterance")],
        query: None,
        knowledge: None,
        output_kind: OutputKind::Response,
        target: "target text that is itself long".into(),
        responder: None,
    };
    match serialize_sample(&sample, &vocab, &cfg) {
        Err(CorpusError::SampleTooLong {
            context,
            knowledge,
            target,
            max_len,
        }) => {
            assert_eq!(context, 35); // SEP + 34 bytes
            assert_eq!(knowledge, 0);
            assert_eq!(target, 31);
            assert_eq!(max_len, 16);
        }
        other => panic!("expected SampleTooLong, got {other:?}"),
    }
}

#[test]
fn duplicate_dialogues_collapse_after_whitespace_normalization() {
    let a = Dialogue {
        id: "a".into(),
        kind: DialogueKind::MultiParty,
        utterances: vec![
            Utterance::new("x", "hello   there"),
            Utterance::new("y", "hi"),
        ],
    };
    let b = Dialogue {
        id: "b".into(),
        kind: DialogueKind::MultiParty,
        utterances: vec![
            Utterance::new("x", " hello there "),
            Utterance::new("y", "hi"),
        ],
    };
    let c = Dialogue {
        id: "c".into(),
        kind: DialogueKind::MultiParty,
        utterances: vec![
            Utterance::new("x", "hello there friend"),
            Utterance::new("y", "hi"),
        ],
    };
    let kept = dedup_dialogues(vec![a.clone(), b, c.clone()]);
    assert_eq!(kept.len(), 2);
    assert_eq!(kept[0].id, "a");
    assert_eq!(kept[1].id, "c");
}

#[test]
fn raw_records_round_trip_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.jsonl");
    std::fs::write(
        &path,
        concat!(
            r#"{"kind":"thread","root":{"speaker":"op","text":"post","replies":[{"speaker":"r1","text":"reply"}]}}"#,
            "\n",
            r#"{"kind":"doc","text":"An essay.\nWith two paragraphs."}"#,
            "\n",
        ),
    )
    .unwrap();
    let records = read_raw_records(&path).unwrap();
    assert_eq!(records.len(), 2);
    let mut dialogues = Vec::new();
    for (i, r) in records.iter().enumerate() {
        dialogues.extend(r.to_dialogues(&format!("line{}", i + 1), 256).unwrap());
    }
    assert_eq!(dialogues.len(), 2);
    assert_eq!(dialogues[0].kind, DialogueKind::MultiParty);
    assert_eq!(dialogues[1].utterances.len(), 2);

    let dpath = dir.path().join("dialogues.jsonl");
    write_dialogues(&dpath, &dialogues).unwrap();
    assert_eq!(read_dialogues(&dpath).unwrap(), dialogues);
}

#[test]
fn samples_round_trip_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.jsonl");
    let samples: Vec<TrainingSample> =
        knowledge_record_to_samples(&record("azure canyon", "321 meters deep")).unwrap();
    write_samples(&path, &samples).unwrap();
    assert_eq!(read_samples(&path).unwrap(), samples);
}

#[test]
fn bad_jsonl_reports_the_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"kind\":\"doc\",\"text\":\"fine\"}\nnot json\n").unwrap();
    match read_raw_records(&path) {
        Err(CorpusError::Json { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a line-tagged parse error, got {other:?}"),
    }
}

prop_compose! {
    fn arb_utterance()(speaker in 0..4usize, text in "[a-z ]{1,20}") -> Utterance {
        Utterance::new(format!("s{speaker}"), text)
    }
}

proptest! {
    /// Every expansion of a random dialogue serializes into a sequence that
    /// satisfies the model's structural invariants.
    #[test]
    fn random_dialogues_serialize_to_valid_sequences(
        utterances in proptest::collection::vec(arb_utterance(), 2..6),
        max_context in 1..4usize,
    ) {
        let vocab = Vocabulary::base();
        let cfg = test_config(256);
        let d = Dialogue {
            id: "fuzz".into(),
            kind: DialogueKind::MultiParty,
            utterances,
        };
        for sample in dialogue_to_samples(&d, max_context) {
            let seq = serialize_sample(&sample, &vocab, &cfg).unwrap();
            prop_assert!(seq.validate(&cfg).is_ok());
            prop_assert_eq!(seq.tokens[seq.prefix_len], BOS);
            prop_assert_eq!(*seq.tokens.last().unwrap(), EOS);
        }
    }
}
