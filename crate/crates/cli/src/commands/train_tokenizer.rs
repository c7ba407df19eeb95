//! `kgchat train-tokenizer`: learn a byte-level BPE vocabulary from
//! dialogue corpora and plain text files.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use kgchat_core::corpus::read_dialogues;
use kgchat_core::model::ModelConfig;
use kgchat_core::tokenizer::train_bpe;

use crate::RunArtifacts;

#[derive(Debug, Args)]
pub struct TrainTokenizerArgs {
    /// Dialogue corpus (JSON lines); every utterance feeds the trainer.
    /// Repeat to merge files.
    #[arg(long = "dialogues", value_name = "FILE")]
    pub dialogues: Vec<PathBuf>,

    /// Plain text file; each line feeds the trainer. Repeat to merge.
    #[arg(long = "text", value_name = "FILE")]
    pub text: Vec<PathBuf>,

    /// Vocabulary size to learn (specials and raw bytes included).
    #[arg(long, default_value_t = ModelConfig::desk().vocab_size)]
    pub vocab_size: usize,

    /// Where to write the vocabulary.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn run(args: TrainTokenizerArgs) -> Result<RunArtifacts> {
    if args.dialogues.is_empty() && args.text.is_empty() {
        anyhow::bail!("no training text: pass --dialogues and/or --text");
    }

    let mut corpus: Vec<String> = Vec::new();
    for path in &args.dialogues {
        let dialogues = read_dialogues(path)
            .with_context(|| format!("reading dialogues {}", path.display()))?;
        for dialogue in dialogues {
            for utterance in dialogue.utterances {
                corpus.push(utterance.text);
            }
        }
    }
    for path in &args.text {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading text {}", path.display()))?;
        corpus.extend(text.lines().filter(|l| !l.trim().is_empty()).map(String::from));
    }

    let vocab = train_bpe(&corpus, args.vocab_size).context("training tokenizer")?;
    if vocab.truncated() {
        log::warn!(
            "corpus ran out of mergeable pairs at {} tokens (target {})",
            vocab.size(),
            args.vocab_size
        );
    }
    vocab
        .save(&args.out)
        .with_context(|| format!("writing vocabulary {}", args.out.display()))?;
    println!(
        "vocabulary: {} tokens ({} merges) from {} text fragments -> {}",
        vocab.size(),
        vocab.merges().len(),
        corpus.len(),
        args.out.display()
    );

    let mut inputs = args.dialogues.clone();
    inputs.extend(args.text.iter().cloned());
    Ok(RunArtifacts {
        seed: None,
        inputs,
        outputs: vec![args.out.clone()],
        ..RunArtifacts::deterministic()
    })
}
