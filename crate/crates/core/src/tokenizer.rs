//! Byte-level BPE tokenizer with reserved control tokens.
//!
//! The base alphabet is all 256 bytes, so any string encodes without an
//! unknown-token escape hatch and decoding is a lossless byte
//! concatenation. Merges never cross whitespace/non-whitespace boundaries
//! and never touch the reserved control ids.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const NO_QUERY: TokenId = 4;

/// Reserved control ids occupy [0, SPECIAL_COUNT).
pub const SPECIAL_COUNT: usize = 5;
/// Byte b maps to id BYTE_BASE + b.
pub const BYTE_BASE: TokenId = SPECIAL_COUNT as TokenId;
/// Specials plus the 256 single-byte tokens.
pub const BASE_VOCAB: usize = SPECIAL_COUNT + 256;

const SPECIAL_NAMES: [&str; SPECIAL_COUNT] = ["PAD", "BOS", "EOS", "SEP", "NO_QUERY"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < SPECIAL_COUNT
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target vocabulary size {target} not above the {BASE_VOCAB} base tokens")]
    TargetTooSmall { target: usize },
    #[error("token id {id} at position {position} out of range for vocabulary of {size}")]
    OutOfRangeId {
        position: usize,
        id: TokenId,
        size: usize,
    },
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    /// id -> byte string; empty for the control tokens.
    tokens: Vec<Vec<u8>>,
    /// Ordered merge rules as (left id, right id).
    merges: Vec<(TokenId, TokenId)>,
    /// (left, right) -> (rule order, merged id).
    ranks: HashMap<(TokenId, TokenId), (u32, TokenId)>,
    /// True when training ran out of mergeable pairs before target size.
    truncated: bool,
}

impl Vocabulary {
    /// The merge-free vocabulary: control tokens plus one token per byte.
    pub fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); SPECIAL_COUNT];
        for b in 0..=255u8 {
            tokens.push(vec![b]);
        }
        Vocabulary {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
            truncated: false,
        }
    }

    /// Rebuild a vocabulary from its ordered merge list. The merge rules
    /// fully determine every learned token, so this is the canonical way to
    /// reconstruct a vocabulary embedded in another file format.
    pub fn from_merges(
        merges: &[(TokenId, TokenId)],
        truncated: bool,
    ) -> Result<Self, TokenizerError> {
        let mut vocab = Vocabulary::base();
        vocab.truncated = truncated;
        for (i, &(a, b)) in merges.iter().enumerate() {
            let limit = vocab.tokens.len() as TokenId;
            if a < BYTE_BASE || b < BYTE_BASE || a >= limit || b >= limit {
                return Err(TokenizerError::Format(format!(
                    "merge {i} references invalid ids {a},{b}"
                )));
            }
            vocab.add_merge(a, b);
        }
        Ok(vocab)
    }

    fn add_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let id = self.tokens.len() as TokenId;
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        self.tokens.push(bytes);
        self.ranks
            .insert((left, right), (self.merges.len() as u32, id));
        self.merges.push((left, right));
        id
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Whether training stopped early because no mergeable pairs remained.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for chunk in chunks(text.as_bytes()) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    fn encode_chunk(&self, bytes: &[u8], out: &mut Vec<TokenId>) {
        let mut seq: Vec<TokenId> = bytes.iter().map(|&b| BYTE_BASE + b as TokenId).collect();
        loop {
            // Lowest-rank pair first reproduces applying the rules in
            // training order.
            let mut best: Option<(u32, TokenId, TokenId, TokenId)> = None;
            for w in seq.windows(2) {
                if let Some(&(rank, id)) = self.ranks.get(&(w[0], w[1])) {
                    if best.map_or(true, |(r, ..)| rank < r) {
                        best = Some((rank, w[0], w[1], id));
                    }
                }
            }
            let Some((_, a, b, merged)) = best else { break };
            let mut dst = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
                    dst.push(merged);
                    i += 2;
                } else {
                    dst.push(seq[i]);
                    i += 1;
                }
            }
            seq = dst;
        }
        out.extend(seq);
    }

    /// Byte concatenation of the given ids; control tokens contribute
    /// nothing.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for (position, &id) in ids.iter().enumerate() {
            match self.tokens.get(id as usize) {
                Some(bytes) => out.extend_from_slice(bytes),
                None => {
                    return Err(TokenizerError::OutOfRangeId {
                        position,
                        id,
                        size: self.size(),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Decode to text. Ids produced by `encode` always round-trip exactly;
    /// arbitrary id sequences may splice tokens into invalid UTF-8, which
    /// decodes with replacement characters.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    // ---- persistence -------------------------------------------------------

    /// Versioned text format: header, control-token names, learned tokens as
    /// hex byte strings, then ordered merges.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        writeln_str(&mut out, "kgchat-bpe v1");
        writeln_str(&mut out, &format!("truncated {}", u8::from(self.truncated)));
        writeln_str(&mut out, &format!("tokens {}", self.tokens.len()));
        for name in SPECIAL_NAMES {
            writeln_str(&mut out, &format!("special {name}"));
        }
        for bytes in &self.tokens[SPECIAL_COUNT..] {
            let mut line = String::with_capacity(bytes.len() * 2);
            for b in bytes {
                let _ = write!(line, "{b:02x}");
            }
            writeln_str(&mut out, &line);
        }
        writeln_str(&mut out, &format!("merges {}", self.merges.len()));
        for (a, b) in &self.merges {
            writeln_str(&mut out, &format!("{a} {b}"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let bad = |msg: &str| TokenizerError::Format(msg.to_string());

        if lines.next() != Some("kgchat-bpe v1") {
            return Err(bad("missing or unsupported header"));
        }
        let truncated = match field(lines.next(), "truncated")? {
            "0" => false,
            "1" => true,
            other => return Err(bad(&format!("bad truncated flag '{other}'"))),
        };
        let count: usize = field(lines.next(), "tokens")?
            .parse()
            .map_err(|_| bad("bad token count"))?;
        if count < BASE_VOCAB {
            return Err(bad("token count below base vocabulary"));
        }
        for name in SPECIAL_NAMES {
            if field(lines.next(), "special")? != name {
                return Err(bad(&format!("expected control token {name}")));
            }
        }
        let mut vocab = Vocabulary::base();
        vocab.truncated = truncated;
        let mut learned: Vec<Vec<u8>> = Vec::with_capacity(count - BASE_VOCAB);
        for i in SPECIAL_COUNT..count {
            let line = lines.next().ok_or_else(|| bad("truncated token list"))?;
            let bytes = hex_bytes(line).ok_or_else(|| bad(&format!("bad hex token at id {i}")))?;
            if i < BASE_VOCAB {
                if bytes != vocab.tokens[i] {
                    return Err(bad(&format!("byte token {i} does not match its id")));
                }
            } else {
                learned.push(bytes);
            }
        }
        let merge_count: usize = field(lines.next(), "merges")?
            .parse()
            .map_err(|_| bad("bad merge count"))?;
        if merge_count != count - BASE_VOCAB {
            return Err(bad("merge count does not match learned token count"));
        }
        for (i, expect) in learned.into_iter().enumerate() {
            let line = lines.next().ok_or_else(|| bad("truncated merge list"))?;
            let mut parts = line.split(' ');
            let a: TokenId = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("bad merge line"))?;
            let b: TokenId = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("bad merge line"))?;
            let limit = vocab.tokens.len() as TokenId;
            if a < BYTE_BASE || b < BYTE_BASE || a >= limit || b >= limit {
                return Err(bad(&format!("merge {i} references invalid ids {a},{b}")));
            }
            let id = vocab.add_merge(a, b);
            if vocab.tokens[id as usize] != expect {
                return Err(bad(&format!(
                    "merge {i} produces bytes inconsistent with its token entry"
                )));
            }
        }
        if lines.next().is_some() {
            return Err(bad("trailing data after merge list"));
        }
        Ok(vocab)
    }
}

fn writeln_str(out: &mut String, line: &str) {
    out.push_str(line);
    out.push('\n');
}

fn field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str, TokenizerError> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|l| l.strip_prefix(' '))
        .ok_or_else(|| TokenizerError::Format(format!("expected '{key} ...' line")))
}

fn hex_bytes(line: &str) -> Option<Vec<u8>> {
    if line.len() % 2 != 0 {
        return None;
    }
    (0..line.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(line.get(i..i + 2)?, 16).ok())
        .collect()
}

/// Split into maximal runs of whitespace / non-whitespace bytes. Merges never
/// cross these boundaries, which keeps pair statistics word-local.
fn chunks(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut rest = bytes;
    std::iter::from_fn(move || {
        let first = *rest.first()?;
        let class = first.is_ascii_whitespace();
        let end = rest
            .iter()
            .position(|b| b.is_ascii_whitespace() != class)
            .unwrap_or(rest.len());
        let (chunk, tail) = rest.split_at(end);
        rest = tail;
        Some(chunk)
    })
}

/// Learn a BPE vocabulary of `target_size` tokens over the corpus.
///
/// Merges are chosen by descending pair frequency; frequency ties go to the
/// lexicographically smallest (left bytes, right bytes) pair. If the corpus
/// runs out of mergeable pairs early, the smaller vocabulary is returned with
/// its `truncated` flag set.
pub fn train_bpe<I, S>(corpus: I, target_size: usize) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if target_size <= BASE_VOCAB {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
        });
    }

    // Collapse the corpus into distinct chunks with counts; merges never
    // cross chunk boundaries, so this loses nothing.
    let mut chunk_counts: HashMap<Vec<u8>, u64> = HashMap::new();
    let mut saw_text = false;
    for line in corpus {
        let line = line.as_ref();
        if !line.is_empty() {
            saw_text = true;
        }
        for chunk in chunks(line.as_bytes()) {
            *chunk_counts.entry(chunk.to_vec()).or_insert(0) += 1;
        }
    }
    if !saw_text {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut vocab = Vocabulary::base();
    let mut seqs: Vec<(Vec<TokenId>, u64)> = chunk_counts
        .into_iter()
        .map(|(bytes, count)| {
            let seq = bytes.iter().map(|&b| BYTE_BASE + b as TokenId).collect();
            (seq, count)
        })
        .collect();

    let mut pair_counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
    for (seq, count) in &seqs {
        for w in seq.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_insert(0) += *count as i64;
        }
    }

    while vocab.size() < target_size {
        let best = pair_counts
            .iter()
            .filter(|&(_, &count)| count > 0)
            .max_by(|&(pa, ca), &(pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Reversed byte comparison: the smaller pair wins the tie.
                    let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                    let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&pair, _)| pair);
        let Some((a, b)) = best else {
            vocab.truncated = true;
            log::warn!(
                "pair exhaustion at {} tokens (target {target_size})",
                vocab.size()
            );
            break;
        };
        let merged = vocab.add_merge(a, b);
        for (seq, count) in &mut seqs {
            if !seq.windows(2).any(|w| w[0] == a && w[1] == b) {
                continue;
            }
            let delta = *count as i64;
            for w in seq.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) -= delta;
            }
            let mut dst = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
                    dst.push(merged);
                    i += 2;
                } else {
                    dst.push(seq[i]);
                    i += 1;
                }
            }
            *seq = dst;
            for w in seq.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += delta;
            }
        }
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use tempfile::tempdir;

    use super::*;

    fn byte_id(b: u8) -> TokenId {
        BYTE_BASE + b as TokenId
    }

    #[test]
    fn first_merge_on_repeated_word_is_its_byte_pair() {
        let vocab = train_bpe(["ab ab ab"], BASE_VOCAB + 1).unwrap();
        assert_eq!(vocab.merges(), &[(byte_id(b'a'), byte_id(b'b'))]);
        assert_eq!(vocab.token_bytes(BASE_VOCAB as TokenId), Some(&b"ab"[..]));
    }

    #[test]
    fn frequency_ties_go_to_lexicographically_smallest_pair() {
        // (c,d) and (a,b) both appear once; "ab" < "cd" as byte strings.
        let vocab = train_bpe(["cd ab"], BASE_VOCAB + 2).unwrap();
        assert_eq!(
            vocab.merges(),
            &[
                (byte_id(b'a'), byte_id(b'b')),
                (byte_id(b'c'), byte_id(b'd')),
            ]
        );
    }

    #[test]
    fn single_character_corpus_learns_no_merges_and_warns() {
        let vocab = train_bpe(["a"], BASE_VOCAB + 10).unwrap();
        assert_eq!(vocab.size(), BASE_VOCAB);
        assert!(vocab.truncated());
        assert!(vocab.merges().is_empty());
    }

    #[test]
    fn encode_applies_learned_merges() {
        let vocab = train_bpe(["ab ab ab"], BASE_VOCAB + 1).unwrap();
        assert_eq!(vocab.encode("abab").len(), 2);
        assert_eq!(vocab.encode(""), Vec::<TokenId>::new());
    }

    #[test]
    fn merges_do_not_cross_whitespace() {
        let vocab = train_bpe(["ab ab ab"], BASE_VOCAB + 1).unwrap();
        let ids = vocab.encode("ab ab");
        // "ab", " ", "ab"
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[1], byte_id(b' '));
    }

    #[test]
    fn plain_text_never_encodes_to_control_tokens() {
        let vocab = train_bpe(["some text 一些文字"], BASE_VOCAB + 20).unwrap();
        for id in vocab.encode("any text at all 任何văn bản\0\x07") {
            assert!(!is_special(id));
        }
    }

    #[test]
    fn decode_drops_control_tokens() {
        let vocab = train_bpe(["x"], BASE_VOCAB + 1).unwrap();
        let ids = [BOS, byte_id(b'h'), byte_id(b'i'), EOS, SEP, NO_QUERY, PAD];
        assert_eq!(vocab.decode(&ids).unwrap(), "hi");
    }

    #[test]
    fn decode_reports_out_of_range_position() {
        let vocab = train_bpe(["x"], BASE_VOCAB + 1).unwrap();
        let bad = vocab.size() as TokenId + 7;
        let err = vocab.decode(&[byte_id(b'a'), bad]).unwrap_err();
        match err {
            TokenizerError::OutOfRangeId { position, id, .. } => {
                assert_eq!((position, id), (1, bad));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the quick brown fox", "the lazy dog", "quick quick"];
        let a = train_bpe(corpus, BASE_VOCAB + 30).unwrap();
        let b = train_bpe(corpus, BASE_VOCAB + 30).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            train_bpe(Vec::<String>::new(), BASE_VOCAB + 1),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            train_bpe([""], BASE_VOCAB + 1),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn target_at_or_below_base_vocabulary_is_rejected() {
        assert!(matches!(
            train_bpe(["abc"], BASE_VOCAB),
            Err(TokenizerError::TargetTooSmall { .. })
        ));
    }

    #[test]
    fn save_load_round_trip_preserves_behavior() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = train_bpe(["hello world", "hello there", "世界 你好"], BASE_VOCAB + 40)
            .unwrap();
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab.merges(), loaded.merges());
        assert_eq!(vocab.truncated(), loaded.truncated());
        let text = "hello 世界";
        assert_eq!(vocab.encode(text), loaded.encode(text));
        // Saving the loaded vocabulary reproduces the file byte for byte.
        let path2 = dir.path().join("vocab2.txt");
        loaded.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_corrupted_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = train_bpe(["hello world"], BASE_VOCAB + 10).unwrap();
        vocab.save(&path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("zz\n");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(TokenizerError::Format(_))
        ));
    }

    /// Rule-order merge application, the independent oracle for training:
    /// recount every pair from scratch each round instead of updating
    /// incrementally.
    fn brute_force_merges(corpus: &[&str], target: usize) -> Vec<(TokenId, TokenId)> {
        let mut vocab = Vocabulary::base();
        let mut seqs: Vec<Vec<TokenId>> = corpus
            .iter()
            .flat_map(|line| chunks(line.as_bytes()))
            .map(|c| c.iter().map(|&b| byte_id(b)).collect())
            .collect();
        let mut merges = Vec::new();
        while vocab.size() < target {
            let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            let Some((&pair, _)) = counts.iter().max_by(|&(pa, ca), &(pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                    let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            }) else {
                break;
            };
            let merged = vocab.add_merge(pair.0, pair.1);
            merges.push(pair);
            for seq in &mut seqs {
                let mut dst = Vec::with_capacity(seq.len());
                let mut i = 0;
                while i < seq.len() {
                    if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
                        dst.push(merged);
                        i += 2;
                    } else {
                        dst.push(seq[i]);
                        i += 1;
                    }
                }
                *seq = dst;
            }
        }
        merges
    }

    #[test]
    fn incremental_training_matches_brute_force_oracle() {
        let corpus = [
            "the cat sat on the mat",
            "the dog sat on the log",
            "天气很好 天气很好 很好很好",
            "mixed 文字 and words words words",
        ];
        let target = BASE_VOCAB + 25;
        let trained = train_bpe(corpus, target).unwrap();
        assert_eq!(trained.merges(), brute_force_merges(&corpus, target));
    }

    proptest! {
        #[test]
        fn round_trip_any_string(text in ".{0,200}") {
            let vocab = train_bpe(["shared training text 共享训练文本"], BASE_VOCAB + 30).unwrap();
            let ids = vocab.encode(&text);
            prop_assert_eq!(vocab.decode(&ids).unwrap(), text);
        }
    }
}
