use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::tokenizer::train_bpe;

fn doc(id: &str, body: &str) -> Document {
    Document {
        id: id.into(),
        title: id.into(),
        body: body.into(),
        timestamp: None,
    }
}

/// A vocabulary whose merges turn "apple" and "river" into single tokens,
/// so queries over them are genuinely two-term queries.
fn word_vocab() -> Vocabulary {
    let vocab = train_bpe(
        std::iter::repeat_n("apple river", 4),
        crate::tokenizer::BASE_VOCAB + 8,
    )
    .unwrap();
    assert_eq!(vocab.encode("apple").len(), 1, "fixture: apple is one token");
    assert_eq!(vocab.encode("river").len(), 1, "fixture: river is one token");
    vocab
}

/// Independent BM25 scorer: recomputes term statistics from scratch for
/// every call and applies the k1=1.2, b=0.75 formula with the
/// ln(1 + (N - df + 0.5)/(df + 0.5)) idf.
fn bm25_by_hand(docs: &[Document], vocab: &Vocabulary, query: &str) -> Vec<(String, f64)> {
    let term_lists: Vec<Vec<TokenId>> = docs
        .iter()
        .map(|d| analyze(vocab, &d.body))
        .collect();
    let n = docs.len() as f64;
    let avgdl = term_lists.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut q = analyze(vocab, query);
    q.sort_unstable();
    q.dedup();
    let mut out = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        let dl = term_lists[i].len() as f64;
        let mut score = 0.0;
        let mut matched = false;
        for &t in &q {
            let tf = term_lists[i].iter().filter(|&&x| x == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            matched = true;
            let df = term_lists.iter().filter(|l| l.contains(&t)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * tf * (1.2 + 1.0) / (tf + 1.2 * (1.0 - 0.75 + 0.75 * dl / avgdl));
        }
        if matched {
            out.push((d.id.clone(), score));
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

#[test]
fn empty_corpus_builds_an_empty_index_that_finds_nothing() {
    let index = build_index(Vec::new(), &Vocabulary::base()).unwrap();
    assert_eq!(index.doc_count(), 0);
    assert_eq!(index.search("anything at all", 5).unwrap(), Vec::new());
    index.validate().unwrap();
}

#[test]
fn a_single_document_yields_one_posting_per_body_term() {
    let index = build_index(vec![doc("d0", "sphinx of black quartz")], &Vocabulary::base()).unwrap();
    let terms = analyze(index.vocabulary(), "sphinx of black quartz");
    assert!(!terms.is_empty());
    for &term in &terms {
        let list = index.postings.get(&term).unwrap();
        assert_eq!(list.len(), 1, "term {term} should have exactly one posting");
        assert_eq!(list[0].doc, 0);
    }
    assert_eq!(
        index.postings.len(),
        {
            let mut distinct = terms.clone();
            distinct.sort_unstable();
            distinct.dedup();
            distinct.len()
        },
        "no postings beyond the body's distinct terms"
    );
}

#[test]
fn stored_postings_match_a_brute_force_recount() {
    let mut rng = StdRng::seed_from_u64(77);
    let alphabet = ["cat", "dog", "cog", "catdog", "a", "éclair"];
    for _ in 0..30 {
        let docs: Vec<Document> = (0..rng.random_range(1..6))
            .map(|i| {
                let words: Vec<&str> = (0..rng.random_range(1..12))
                    .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                    .collect();
                doc(&format!("d{i}"), &words.join(" "))
            })
            .collect();
        let index = build_index(docs, &Vocabulary::base()).unwrap();
        for (slot, d) in index.docs.iter().enumerate() {
            let terms = analyze(index.vocabulary(), &d.body);
            assert_eq!(index.doc_terms[slot] as usize, terms.len());
            let mut counts: BTreeMap<TokenId, u32> = BTreeMap::new();
            for t in terms {
                *counts.entry(t).or_insert(0) += 1;
            }
            for (&term, list) in &index.postings {
                let stored = list.iter().find(|p| p.doc as usize == slot).map(|p| p.tf);
                assert_eq!(
                    stored,
                    counts.get(&term).copied(),
                    "doc {slot} term {term}: stored vs recounted frequency"
                );
            }
            for (&term, &count) in &counts {
                let stored = index.postings[&term]
                    .iter()
                    .find(|p| p.doc as usize == slot)
                    .map(|p| p.tf);
                assert_eq!(stored, Some(count));
            }
        }
        index.validate().unwrap();
    }
}

#[test]
fn a_term_unique_to_one_document_ranks_it_first() {
    let vocab = word_vocab();
    let index = build_index(
        vec![
            doc("a", "river banks and river boats"),
            doc("b", "apple orchards in autumn"),
            doc("c", "river fog at dawn"),
        ],
        &vocab,
    )
    .unwrap();
    let hits = index.search("apple", 3).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].doc_id, "b");
}

#[test]
fn a_query_with_no_indexed_terms_finds_nothing() {
    let index = build_index(
        vec![doc("a", "letters only in here"), doc("b", "more letters")],
        &Vocabulary::base(),
    )
    .unwrap();
    assert_eq!(index.search("0123 456", 5).unwrap(), Vec::new());
    assert_eq!(index.search("", 5).unwrap(), Vec::new());
}

#[test]
fn five_documents_and_two_terms_match_an_exhaustive_scorer() {
    let vocab = word_vocab();
    let docs = vec![
        doc("d0", "apple apple apple pie"),
        doc("d1", "river apple crossing near the old apple mill"),
        doc("d2", "river river river river delta"),
        doc("d3", "nothing relevant whatsoever"),
        doc("d4", "apple river"),
    ];
    let index = build_index(docs.clone(), &vocab).unwrap();
    let expected = bm25_by_hand(&docs, &vocab, "apple river");
    assert_eq!(expected.len(), 4, "fixture: d3 matches neither term");
    let hits = index.search("apple river", 5).unwrap();
    assert_eq!(hits.len(), expected.len());
    for (hit, (id, score)) in hits.iter().zip(&expected) {
        assert_eq!(&hit.doc_id, id);
        assert!(
            (hit.score - score).abs() <= 1e-12 * score.abs(),
            "score for {id}: {} vs hand-computed {score}",
            hit.score
        );
    }
}

#[test]
fn random_corpora_match_the_exhaustive_scorer() {
    let vocab = word_vocab();
    let words = ["apple", "river", "stone", "müsli", "apples"];
    let mut rng = StdRng::seed_from_u64(4242);
    for round in 0..25 {
        let docs: Vec<Document> = (0..rng.random_range(1..7))
            .map(|i| {
                let body: Vec<&str> = (0..rng.random_range(1..15))
                    .map(|_| words[rng.random_range(0..words.len())])
                    .collect();
                doc(&format!("d{i}"), &body.join(" "))
            })
            .collect();
        let query: Vec<&str> = (0..rng.random_range(1..4))
            .map(|_| words[rng.random_range(0..words.len())])
            .collect();
        let query = query.join(" ");
        let index = build_index(docs.clone(), &vocab).unwrap();
        let expected = bm25_by_hand(&docs, &vocab, &query);
        let hits = index.search(&query, docs.len()).unwrap();
        let got: Vec<(String, f64)> = hits.iter().map(|h| (h.doc_id.clone(), h.score)).collect();
        assert_eq!(
            got.len(),
            expected.len(),
            "round {round}, query '{query}': hit count"
        );
        for ((gid, gscore), (eid, escore)) in got.iter().zip(&expected) {
            assert_eq!(gid, eid, "round {round}, query '{query}'");
            assert!((gscore - escore).abs() <= 1e-12 * escore.abs());
        }
    }
}

#[test]
fn ties_break_by_ascending_document_id() {
    let index = build_index(
        vec![
            doc("zeta", "same words here"),
            doc("alpha", "same words here"),
            doc("mid", "same words here"),
        ],
        &Vocabulary::base(),
    )
    .unwrap();
    let hits = index.search("same words", 3).unwrap();
    let ids: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
    assert_eq!(ids, ["alpha", "mid", "zeta"]);
    assert_eq!(hits[0].score.to_bits(), hits[1].score.to_bits());
    assert_eq!(hits[1].score.to_bits(), hits[2].score.to_bits());
}

#[test]
fn k_caps_the_result_list() {
    let index = build_index(
        vec![
            doc("a", "shared term plus aaa"),
            doc("b", "shared term plus bbb"),
            doc("c", "shared term plus ccc"),
        ],
        &Vocabulary::base(),
    )
    .unwrap();
    assert_eq!(index.search("shared", 2).unwrap().len(), 2);
    assert!(matches!(index.search("shared", 0), Err(StoreError::ZeroK)));
}

#[test]
fn matching_is_case_insensitive() {
    let index = build_index(vec![doc("a", "The Azure CANYON")], &Vocabulary::base()).unwrap();
    let hits = index.search("azure canyon", 1).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].snippet, "The Azure CANYON", "snippet keeps the original case");
}

#[test]
fn freezing_statistics_keeps_prior_scores_bit_identical() {
    let mut index = build_index(
        vec![
            doc("a", "granite cliffs by the sea"),
            doc("b", "granite quarry town"),
            doc("c", "limestone caves"),
        ],
        &Vocabulary::base(),
    )
    .unwrap();
    // With byte-level terms every letter body matches some query byte, so
    // all three documents score.
    let before = index.search("granite", 3).unwrap();
    assert_eq!(before.len(), 3);

    // The new document shares no bytes with the query ("granite" is pure
    // letters; the body is digits and punctuation).
    index
        .add_document(doc("z", "0123 456! 789? 31415"), true)
        .unwrap();
    assert_eq!(index.doc_count(), 4);

    let after = index.search("granite", 3).unwrap();
    assert_eq!(before.len(), after.len());
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b.doc_id, a.doc_id);
        assert_eq!(
            b.score.to_bits(),
            a.score.to_bits(),
            "score for {} must not move at all",
            b.doc_id
        );
        assert_eq!(b.snippet, a.snippet);
    }

    // The frozen-in document is still searchable through its own terms.
    let new_hits = index.search("789", 3).unwrap();
    assert_eq!(new_hits.len(), 1);
    assert_eq!(new_hits[0].doc_id, "z");
}

#[test]
fn unfrozen_additions_do_move_scores() {
    let docs = vec![
        doc("a", "granite cliffs by the sea"),
        doc("b", "granite quarry town"),
        doc("c", "limestone caves"),
    ];
    let mut index = build_index(docs, &Vocabulary::base()).unwrap();
    let before = index.search("granite", 3).unwrap();
    index
        .add_document(doc("z", "0123 456! 789? 31415"), false)
        .unwrap();
    let after = index.search("granite", 3).unwrap();
    assert!(
        before
            .iter()
            .zip(&after)
            .any(|(b, a)| b.score.to_bits() != a.score.to_bits()),
        "a live corpus-statistics update must be visible in the scores"
    );
    index.validate().unwrap();
}

#[test]
fn duplicate_ids_are_rejected() {
    let err = build_index(
        vec![doc("same", "first body"), doc("same", "second body")],
        &Vocabulary::base(),
    )
    .unwrap_err();
    assert!(matches!(err, StoreError::DuplicateId { id } if id == "same"));
}

#[test]
fn empty_bodies_are_rejected() {
    let err = build_index(vec![doc("e", "")], &Vocabulary::base()).unwrap_err();
    assert!(matches!(err, StoreError::EmptyBody { id } if id == "e"));
}

#[test]
fn short_bodies_come_back_whole_as_snippets() {
    let index = build_index(
        vec![doc("a", "A Short Body, case preserved.")],
        &Vocabulary::base(),
    )
    .unwrap();
    let hits = index.search("short body", 1).unwrap();
    assert_eq!(hits[0].snippet, "A Short Body, case preserved.");
}

#[test]
fn snippets_zoom_in_on_the_matching_region() {
    let filler = "plain filler words drift along without meaning anything much ".repeat(8);
    let body = format!("{filler}the hidden zebra quartz fact sits here {filler}");
    let index = build_index(vec![doc("a", &body)], &Vocabulary::base()).unwrap();

    let hits = index.search("zebra quartz", 1).unwrap();
    let snippet = &hits[0].snippet;
    assert!(
        snippet.contains("zebra quartz"),
        "snippet should cover the matching region, got: {snippet}"
    );
    // With the merge-free vocabulary one token is one byte, so the budget
    // bounds the snippet length exactly.
    assert!(snippet.len() <= DEFAULT_SNIPPET_BUDGET);
    assert!(body.len() > DEFAULT_SNIPPET_BUDGET, "fixture: body must overflow the budget");
}

#[test]
fn the_snippet_budget_is_configurable() {
    let body = "one two three four five six seven eight nine ten eleven twelve";
    let index = build_index(vec![doc("a", body)], &Vocabulary::base()).unwrap();
    let hits = index.search_with("seven", 1, 16).unwrap();
    assert!(hits[0].snippet.len() <= 16);
    assert!(hits[0].snippet.to_lowercase().contains("seven"));
}

#[test]
fn the_index_round_trips_through_its_file() {
    let vocab = word_vocab();
    let mut docs = vec![
        doc("a", "apple orchards by the river"),
        doc("b", "river navigation charts"),
    ];
    docs[0].timestamp = Some(1_700_000_000);
    let index = build_index(docs, &vocab).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.idx");
    index.save(&path).unwrap();
    let loaded = Index::load(&path).unwrap();
    loaded.validate().unwrap();

    assert_eq!(loaded.documents(), index.documents());
    assert_eq!(loaded.get("a").unwrap().timestamp, Some(1_700_000_000));
    let before = index.search("apple river", 5).unwrap();
    let after = loaded.search("apple river", 5).unwrap();
    assert_eq!(before.len(), after.len());
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b.doc_id, a.doc_id);
        assert_eq!(b.score.to_bits(), a.score.to_bits());
        assert_eq!(b.snippet, a.snippet);
    }

    // Saving the loaded index reproduces the file byte for byte.
    let path2 = dir.path().join("store2.idx");
    loaded.save(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn corrupt_index_files_are_refused() {
    let index = build_index(vec![doc("a", "some body")], &Vocabulary::base()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.idx");
    index.save(&path).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        Index::load(&path),
        Err(StoreError::ChecksumMismatch)
    ));

    // A structurally valid envelope with the wrong magic is refused even
    // when its checksum holds.
    let mut body = b"WRONGMAG".to_vec();
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&2u64.to_le_bytes());
    body.extend_from_slice(b"{}");
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    std::fs::write(&path, &body).unwrap();
    assert!(matches!(Index::load(&path), Err(StoreError::Format(_))));
}

#[test]
fn document_files_round_trip_and_report_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docs.jsonl");
    let docs = vec![
        Document {
            id: "a".into(),
            title: "First".into(),
            body: "first body".into(),
            timestamp: Some(99),
        },
        doc("b", "second body"),
    ];
    write_documents(&path, &docs).unwrap();
    assert_eq!(read_documents(&path).unwrap(), docs);

    std::fs::write(&path, "{\"id\":\"a\",\"title\":\"t\",\"body\":\"b\"}\nnot json\n").unwrap();
    let err = read_documents(&path).unwrap_err();
    assert!(matches!(err, StoreError::Json { line: 2, .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_stay_finite_nonnegative_and_sorted(
        bodies in prop::collection::vec("[a-z ]{1,40}", 1..6),
        query in "[a-z ]{0,20}",
        k in 1usize..6,
    ) {
        let docs: Vec<Document> = bodies
            .iter()
            .enumerate()
            .map(|(i, b)| doc(&format!("d{i}"), b))
            .collect();
        let index = build_index(docs, &Vocabulary::base()).unwrap();
        let hits = index.search(&query, k).unwrap();
        prop_assert!(hits.len() <= k);
        for pair in hits.windows(2) {
            let ordered = pair[0].score > pair[1].score
                || (pair[0].score == pair[1].score && pair[0].doc_id < pair[1].doc_id);
            prop_assert!(ordered, "hits out of order: {pair:?}");
        }
        for hit in &hits {
            prop_assert!(hit.score.is_finite() && hit.score >= 0.0);
        }
    }
}
