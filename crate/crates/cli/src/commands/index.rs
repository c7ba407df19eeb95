//! `kgchat index`: build the retrieval index over document collections.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use kgchat_core::knowledge_store::{build_index, read_documents, Document};

use crate::{load_vocab, RunArtifacts};

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Document collection (JSON lines: id, title, body). Repeat to merge.
    #[arg(long = "docs", value_name = "FILE", required = true)]
    pub docs: Vec<PathBuf>,

    /// Tokenizer vocabulary used to term-split queries and bodies.
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,

    /// Where to write the index.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn run(args: IndexArgs) -> Result<RunArtifacts> {
    let mut documents: Vec<Document> = Vec::new();
    for path in &args.docs {
        documents.extend(
            read_documents(path)
                .with_context(|| format!("reading documents {}", path.display()))?,
        );
    }
    let vocab = load_vocab(&args.vocab)?;
    let index = build_index(documents, &vocab)?;
    index
        .save(&args.out)
        .with_context(|| format!("writing index {}", args.out.display()))?;
    println!("indexed {} documents -> {}", index.doc_count(), args.out.display());

    let mut inputs = args.docs.clone();
    inputs.push(args.vocab.clone());
    Ok(RunArtifacts {
        seed: None,
        inputs,
        outputs: vec![args.out.clone()],
        ..RunArtifacts::deterministic()
    })
}
